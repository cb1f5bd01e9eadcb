#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "metrics.hpp"
#include "network.hpp"
#include "simworld.hpp"
#include "supervision.hpp"
#include "training.hpp"

namespace cmflow::io {

inline constexpr const char* kVersion = "0.1.0";

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// temp-file + rename so interrupted runs never leave truncated artifacts
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

// sequence directory: meta.json, frames.jsonl, boxes.jsonl, gt.jsonl and
// optflow/<pair>.bin (row-major little-endian f32, H x W x 2)
void save_sequence(const sim::Sequence& seq, const std::filesystem::path& dir);
sim::Sequence load_sequence(const std::filesystem::path& dir);

// labels.jsonl: one bundle per frame pair, absent vectors encoded as null
void save_labels(const std::vector<sup::LabelBundle>& bundles,
                 const std::filesystem::path& file);
std::vector<sup::LabelBundle> load_labels(const std::filesystem::path& file);

// checkpoint: a JSON manifest (architecture, parameter names/shapes, format
// version) followed by the concatenated little-endian f32 arrays in
// manifest order
struct Checkpoint {
    net::NetConfig config;
    net::ParamStore params;
};
void save_checkpoint(const net::NetConfig& cfg, const net::ParamStore& params,
                     const std::filesystem::path& file);
Checkpoint load_checkpoint(const std::filesystem::path& file);

// training log: one JSON object per optimizer step
void save_train_log(const std::vector<train::StepLog>& log, const std::filesystem::path& file);

// per-pair model outputs as JSON lines
void save_predictions(const std::vector<net::ModelOutput>& outputs,
                      const std::filesystem::path& file);
std::vector<net::ModelOutput> load_predictions(const std::filesystem::path& file);

struct MetricsRow {
    std::string pair;
    double epe = 0, acc_s = 0, acc_r = 0, rne = 0;
    std::optional<double> mrne, srne;
    double miou = 0, rte = 0, rae = 0;
};
// one row per pair plus a trailing MEAN row; absent values are empty cells
void save_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& file);

struct RunManifest {
    std::string command;
    std::string config_echo;  // JSON text of the effective configuration
    std::uint64_t seed = 0;
    std::string input_hash;
    std::string version = kVersion;
    std::string timestamp;
};
void save_manifest(const RunManifest& m, const std::filesystem::path& dir);

// FNV-1a content hash over the named files, order-sensitive
std::string content_hash(const std::vector<std::filesystem::path>& inputs);

}  // namespace cmflow::io
