#include "io.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace cmflow::io {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- low-level helpers ----

void write_file_atomic(const fs::path& path, const std::string& content) {
    fs::path dir = path.parent_path();
    if (!dir.empty()) fs::create_directories(dir);
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + tmp.string());
        out.write(content.data(), (std::streamsize)content.size());
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace {

json parse(const std::string& text, const std::string& what) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw IoError("malformed JSON in " + what);
    return j;
}

json vec3_json(const geo::Vec3& v) { return json::array({v(0), v(1), v(2)}); }
geo::Vec3 vec3_from(const json& j) { return geo::Vec3(j.at(0), j.at(1), j.at(2)); }

json transform_json(const geo::RigidTransform& t) {
    json r = json::array();
    for (int i = 0; i < 3; ++i)
        r.push_back(json::array({t.rotation(i, 0), t.rotation(i, 1), t.rotation(i, 2)}));
    return json{{"rotation", r}, {"translation", vec3_json(t.translation)}};
}

geo::RigidTransform transform_from(const json& j) {
    geo::RigidTransform t;
    for (int i = 0; i < 3; ++i)
        for (int c = 0; c < 3; ++c) t.rotation(i, c) = j.at("rotation").at(i).at(c);
    t.translation = vec3_from(j.at("translation"));
    return t;
}

json points_json(const std::vector<geo::Vec3>& pts) {
    json a = json::array();
    for (const auto& p : pts) a.push_back(vec3_json(p));
    return a;
}

std::vector<geo::Vec3> points_from(const json& j) {
    std::vector<geo::Vec3> pts;
    for (const auto& e : j) pts.push_back(vec3_from(e));
    return pts;
}

json mask_json(const std::vector<char>& m) {
    json a = json::array();
    for (char c : m) a.push_back((int)c);
    return a;
}

std::vector<char> mask_from(const json& j) {
    std::vector<char> m;
    for (const auto& e : j) m.push_back((char)(int)e);
    return m;
}

json calib_json(const geo::Calibration& c) {
    return json{{"fx", c.fx},         {"fy", c.fy},
                {"cx", c.cx},         {"cy", c.cy},
                {"width", c.width},   {"height", c.height},
                {"cam_from_radar", transform_json(c.cam_from_radar)}};
}

geo::Calibration calib_from(const json& j) {
    geo::Calibration c;
    c.fx = j.at("fx");
    c.fy = j.at("fy");
    c.cx = j.at("cx");
    c.cy = j.at("cy");
    c.width = j.at("width");
    c.height = j.at("height");
    c.cam_from_radar = transform_from(j.at("cam_from_radar"));
    return c;
}

json box_json(const sim::TrackedBox& b) {
    return json{{"id", b.id},
                {"center", vec3_json(b.center)},
                {"size", vec3_json(b.size)},
                {"yaw", b.yaw},
                {"frame_index", b.frame_index}};
}

sim::TrackedBox box_from(const json& j) {
    sim::TrackedBox b;
    b.id = j.at("id");
    b.center = vec3_from(j.at("center"));
    b.size = vec3_from(j.at("size"));
    b.yaw = j.at("yaw");
    b.frame_index = j.at("frame_index");
    return b;
}

json config_json(const sim::SimConfig& c) {
    return json{{"n_frames", c.n_frames},
                {"dt", c.dt},
                {"points_per_frame", c.points_per_frame},
                {"n_movers", c.n_movers},
                {"mover_points", c.mover_points},
                {"ego_speed", c.ego_speed},
                {"ego_yaw_rate", c.ego_yaw_rate},
                {"mover_speed_min", c.mover_speed_min},
                {"mover_speed_max", c.mover_speed_max},
                {"mover_yaw_rate_max", c.mover_yaw_rate_max},
                {"rrv_noise", c.rrv_noise},
                {"rrv_bias_range", c.rrv_bias_range},
                {"box_dropout", c.box_dropout},
                {"box_center_noise", c.box_center_noise},
                {"flow_noise_px", c.flow_noise_px},
                {"flow_corrupt_frac", c.flow_corrupt_frac},
                {"z_min", c.z_min},
                {"z_max", c.z_max},
                {"sample_n", c.sample_n},
                {"depth_min", c.depth_min},
                {"depth_max", c.depth_max},
                {"calib", calib_json(c.calib)}};
}

sim::SimConfig config_from(const json& j) {
    sim::SimConfig c;
    c.n_frames = j.at("n_frames");
    c.dt = j.at("dt");
    c.points_per_frame = j.at("points_per_frame");
    c.n_movers = j.at("n_movers");
    c.mover_points = j.at("mover_points");
    c.ego_speed = j.at("ego_speed");
    c.ego_yaw_rate = j.at("ego_yaw_rate");
    c.mover_speed_min = j.at("mover_speed_min");
    c.mover_speed_max = j.at("mover_speed_max");
    c.mover_yaw_rate_max = j.at("mover_yaw_rate_max");
    c.rrv_noise = j.at("rrv_noise");
    c.rrv_bias_range = j.at("rrv_bias_range");
    c.box_dropout = j.at("box_dropout");
    c.box_center_noise = j.at("box_center_noise");
    c.flow_noise_px = j.at("flow_noise_px");
    c.flow_corrupt_frac = j.at("flow_corrupt_frac");
    c.z_min = j.at("z_min");
    c.z_max = j.at("z_max");
    c.sample_n = j.at("sample_n");
    c.depth_min = j.at("depth_min");
    c.depth_max = j.at("depth_max");
    c.calib = calib_from(j.at("calib"));
    return c;
}

std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream ss(text);
    std::string line;
    while (std::getline(ss, line))
        if (!line.empty()) lines.push_back(line);
    return lines;
}

void append_u32_le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back((char)((v >> (8 * i)) & 0xff));
}

std::uint32_t read_u32_le(const std::string& s, size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= (std::uint32_t)(std::uint8_t)s.at(off + i) << (8 * i);
    return v;
}

void append_f32_le(std::string& out, float f) {
    std::uint32_t bits;
    static_assert(sizeof(bits) == sizeof(f));
    std::memcpy(&bits, &f, 4);
    append_u32_le(out, bits);
}

float read_f32_le(const std::string& s, size_t off) {
    std::uint32_t bits = read_u32_le(s, off);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

}  // namespace

// ---- sequence directory ----

void save_sequence(const sim::Sequence& seq, const fs::path& dir) {
    fs::create_directories(dir / "optflow");

    json meta{{"config", config_json(seq.config)},
              {"calib", calib_json(seq.calib)},
              {"dt", seq.dt},
              {"n_frames", (int)seq.frames.size()}};
    json odom = json::array();
    for (const auto& p : seq.odom_poses) odom.push_back(transform_json(p));
    meta["odom_poses"] = odom;
    write_file_atomic(dir / "meta.json", meta.dump(2) + "\n");

    std::string frames;
    for (size_t k = 0; k < seq.frames.size(); ++k) {
        const auto& f = seq.frames[k];
        json line{{"coords", points_json(f.coords)},
                  {"rrv", f.rrv},
                  {"rcs", f.rcs},
                  {"timestamp", f.timestamp},
                  {"owners", seq.owners[k]}};
        frames += line.dump() + "\n";
    }
    write_file_atomic(dir / "frames.jsonl", frames);

    std::string boxes;
    for (size_t k = 0; k < seq.frames.size(); ++k) {
        json gtb = json::array(), obs = json::array();
        for (const auto& b : seq.gt_boxes[k]) gtb.push_back(box_json(b));
        for (const auto& b : seq.boxes[k]) obs.push_back(box_json(b));
        boxes += json{{"gt", gtb}, {"observed", obs}}.dump() + "\n";
    }
    write_file_atomic(dir / "boxes.jsonl", boxes);

    std::string gt;
    for (const auto& pg : seq.gt) {
        json objs = json::array();
        for (const auto& t : pg.object_transforms) objs.push_back(transform_json(t));
        gt += json{{"ego", transform_json(pg.ego)},
                   {"object_transforms", objs},
                   {"flow", points_json(pg.flow)},
                   {"moving", mask_json(pg.moving)}}
                  .dump() +
              "\n";
    }
    write_file_atomic(dir / "gt.jsonl", gt);

    for (size_t k = 0; k < seq.optflow.size(); ++k) {
        const sim::FlowMap& m = seq.optflow[k];
        std::string bin;
        bin.reserve(m.data.size() * 4);
        for (float v : m.data) append_f32_le(bin, v);
        write_file_atomic(dir / "optflow" / (std::to_string(k) + ".bin"), bin);
    }
}

sim::Sequence load_sequence(const fs::path& dir) {
    sim::Sequence seq;
    json meta = parse(read_file(dir / "meta.json"), "meta.json");
    seq.config = config_from(meta.at("config"));
    seq.calib = calib_from(meta.at("calib"));
    seq.dt = meta.at("dt");
    for (const auto& p : meta.at("odom_poses")) seq.odom_poses.push_back(transform_from(p));

    for (const auto& text : split_lines(read_file(dir / "frames.jsonl"))) {
        json j = parse(text, "frames.jsonl");
        sim::RadarFrame f;
        f.coords = points_from(j.at("coords"));
        f.rrv = j.at("rrv").get<std::vector<double>>();
        f.rcs = j.at("rcs").get<std::vector<double>>();
        f.timestamp = j.at("timestamp");
        seq.frames.push_back(std::move(f));
        seq.owners.push_back(j.at("owners").get<std::vector<int>>());
    }
    for (const auto& text : split_lines(read_file(dir / "boxes.jsonl"))) {
        json j = parse(text, "boxes.jsonl");
        std::vector<sim::TrackedBox> gtb, obs;
        for (const auto& b : j.at("gt")) gtb.push_back(box_from(b));
        for (const auto& b : j.at("observed")) obs.push_back(box_from(b));
        seq.gt_boxes.push_back(std::move(gtb));
        seq.boxes.push_back(std::move(obs));
    }
    for (const auto& text : split_lines(read_file(dir / "gt.jsonl"))) {
        json j = parse(text, "gt.jsonl");
        sim::PairGT pg;
        pg.ego = transform_from(j.at("ego"));
        for (const auto& t : j.at("object_transforms")) pg.object_transforms.push_back(transform_from(t));
        pg.flow = points_from(j.at("flow"));
        pg.moving = mask_from(j.at("moving"));
        seq.gt.push_back(std::move(pg));
    }
    for (size_t k = 0; k + 1 < seq.frames.size(); ++k) {
        std::string bin = read_file(dir / "optflow" / (std::to_string(k) + ".bin"));
        sim::FlowMap m(seq.calib.width, seq.calib.height);
        if (bin.size() != m.data.size() * 4)
            throw IoError("optflow size mismatch in pair " + std::to_string(k));
        for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = read_f32_le(bin, i * 4);
        seq.optflow.push_back(std::move(m));
    }
    seq.validate();
    return seq;
}

// ---- labels ----

void save_labels(const std::vector<sup::LabelBundle>& bundles, const fs::path& file) {
    std::string out;
    for (const auto& b : bundles) {
        json f_fg = json::array(), w_opt = json::array();
        for (const auto& f : b.f_fg) f_fg.push_back(f ? vec3_json(*f) : json(nullptr));
        for (const auto& w : b.w_opt)
            w_opt.push_back(w ? json::array({(*w)(0), (*w)(1)}) : json(nullptr));
        out += json{{"pseudo_T", transform_json(b.pseudo_T)},
                    {"rigid_flow", points_json(b.rigid_flow_r)},
                    {"s_v", mask_json(b.s_v)},
                    {"s_fg", mask_json(b.s_fg)},
                    {"f_fg", f_fg},
                    {"s_l", mask_json(b.s_l)},
                    {"s_fused", mask_json(b.s_fused)},
                    {"w_opt", w_opt}}
                   .dump() +
               "\n";
    }
    write_file_atomic(file, out);
}

std::vector<sup::LabelBundle> load_labels(const fs::path& file) {
    std::vector<sup::LabelBundle> bundles;
    for (const auto& text : split_lines(read_file(file))) {
        json j = parse(text, file.string());
        sup::LabelBundle b;
        b.pseudo_T = transform_from(j.at("pseudo_T"));
        b.rigid_flow_r = points_from(j.at("rigid_flow"));
        b.s_v = mask_from(j.at("s_v"));
        b.s_fg = mask_from(j.at("s_fg"));
        b.s_l = mask_from(j.at("s_l"));
        b.s_fused = mask_from(j.at("s_fused"));
        for (const auto& f : j.at("f_fg"))
            b.f_fg.push_back(f.is_null() ? std::nullopt : std::optional(vec3_from(f)));
        for (const auto& w : j.at("w_opt"))
            b.w_opt.push_back(w.is_null() ? std::nullopt
                                          : std::optional(sup::Vec2(w.at(0), w.at(1))));
        b.validate();
        bundles.push_back(std::move(b));
    }
    return bundles;
}

// ---- checkpoint ----

void save_checkpoint(const net::NetConfig& cfg, const net::ParamStore& params,
                     const fs::path& file) {
    json entries = json::array();
    for (const auto& [name, arr] : params.entries())
        entries.push_back(json{{"name", name}, {"shape", arr.shape()}, {"dtype", "f32"}});
    json manifest{{"format_version", 1},
                  {"config",
                   {{"scale", cfg.scale},
                    {"use_gru", cfg.use_gru},
                    {"radii", cfg.radii},
                    {"nsamples", cfg.nsamples},
                    {"feat_dim", cfg.feat_dim},
                    {"cv_neighbors", cfg.cv_neighbors},
                    {"eta_b", cfg.eta_b}}},
                  {"params", entries}};
    std::string mtext = manifest.dump();

    std::string out = "CMFLOWCK1\n";
    append_u32_le(out, (std::uint32_t)mtext.size());
    out += mtext;
    for (const auto& [name, arr] : params.entries())
        for (size_t i = 0; i < arr.size(); ++i) append_f32_le(out, (float)arr[i]);
    write_file_atomic(file, out);
}

Checkpoint load_checkpoint(const fs::path& file) {
    std::string data = read_file(file);
    const std::string magic = "CMFLOWCK1\n";
    if (data.rfind(magic, 0) != 0) throw IoError("not a checkpoint: " + file.string());
    size_t off = magic.size();
    std::uint32_t mlen = read_u32_le(data, off);
    off += 4;
    json manifest = parse(data.substr(off, mlen), "checkpoint manifest");
    off += mlen;
    if ((int)manifest.at("format_version") != 1)
        throw IoError("unsupported checkpoint version");

    Checkpoint ck;
    const json& c = manifest.at("config");
    ck.config.scale = c.at("scale");
    ck.config.use_gru = c.at("use_gru");
    ck.config.radii = c.at("radii").get<std::vector<double>>();
    ck.config.nsamples = c.at("nsamples").get<std::vector<int>>();
    ck.config.feat_dim = c.at("feat_dim");
    ck.config.cv_neighbors = c.at("cv_neighbors");
    ck.config.eta_b = c.at("eta_b");
    for (const auto& e : manifest.at("params")) {
        std::vector<int> shape = e.at("shape").get<std::vector<int>>();
        ad::Array arr(shape);
        if (off + arr.size() * 4 > data.size()) throw IoError("truncated checkpoint");
        for (size_t i = 0; i < arr.size(); ++i) {
            arr[i] = (double)read_f32_le(data, off);
            off += 4;
        }
        ck.params.insert(e.at("name"), std::move(arr));
    }
    return ck;
}

// ---- logs, predictions, metrics ----

void save_train_log(const std::vector<train::StepLog>& log, const fs::path& file) {
    std::string out;
    for (const auto& l : log)
        out += json{{"epoch", l.epoch},
                    {"step", l.step},
                    {"lr", l.lr},
                    {"loss",
                     {{"total", l.report.total},
                      {"ego", l.report.ego},
                      {"seg", l.report.seg},
                      {"mot", l.report.mot},
                      {"opt", l.report.opt},
                      {"self", l.report.self_},
                      {"lambda_opt", l.report.lambda_opt}}}}
                   .dump() +
               "\n";
    write_file_atomic(file, out);
}

void save_predictions(const std::vector<net::ModelOutput>& outputs, const fs::path& file) {
    std::string out;
    for (const auto& o : outputs) {
        json mask = json::array();
        for (char c : o.moving_mask) mask.push_back((int)c);
        out += json{{"init_flow", points_json(o.init_flow)},
                    {"final_flow", points_json(o.final_flow)},
                    {"moving_prob", o.moving_prob},
                    {"moving_mask", mask},
                    {"ego", transform_json(o.ego)},
                    {"ego_fallback_uniform", o.ego_fallback_uniform}}
                   .dump() +
               "\n";
    }
    write_file_atomic(file, out);
}

std::vector<net::ModelOutput> load_predictions(const fs::path& file) {
    std::vector<net::ModelOutput> outputs;
    for (const auto& text : split_lines(read_file(file))) {
        json j = parse(text, file.string());
        net::ModelOutput o;
        o.init_flow = points_from(j.at("init_flow"));
        o.final_flow = points_from(j.at("final_flow"));
        o.moving_prob = j.at("moving_prob").get<std::vector<double>>();
        for (const auto& c : j.at("moving_mask")) o.moving_mask.push_back((char)(int)c);
        o.ego = transform_from(j.at("ego"));
        o.ego_fallback_uniform = j.at("ego_fallback_uniform");
        outputs.push_back(std::move(o));
    }
    return outputs;
}

namespace {

std::string fmt(double v) {
    std::ostringstream ss;
    ss.precision(9);
    ss << v;
    return ss.str();
}

}  // namespace

void save_metrics_csv(const std::vector<MetricsRow>& rows, const fs::path& file) {
    std::string out = "pair,epe,acc_s,acc_r,rne,mrne,srne,miou,rte,rae\n";
    double se = 0, ss_ = 0, sr = 0, sn = 0, sm = 0, si = 0, st = 0, sa = 0;
    double smr = 0, ssr = 0;
    int nmr = 0, nsr = 0;
    for (const auto& r : rows) {
        out += r.pair + "," + fmt(r.epe) + "," + fmt(r.acc_s) + "," + fmt(r.acc_r) + "," +
               fmt(r.rne) + "," + (r.mrne ? fmt(*r.mrne) : "") + "," +
               (r.srne ? fmt(*r.srne) : "") + "," + fmt(r.miou) + "," + fmt(r.rte) + "," +
               fmt(r.rae) + "\n";
        se += r.epe;
        ss_ += r.acc_s;
        sr += r.acc_r;
        sn += r.rne;
        si += r.miou;
        st += r.rte;
        sa += r.rae;
        sm += 1;
        if (r.mrne) {
            smr += *r.mrne;
            ++nmr;
        }
        if (r.srne) {
            ssr += *r.srne;
            ++nsr;
        }
    }
    if (!rows.empty()) {
        double n = (double)rows.size();
        out += std::string("MEAN,") + fmt(se / n) + "," + fmt(ss_ / n) + "," + fmt(sr / n) + "," +
               fmt(sn / n) + "," + (nmr ? fmt(smr / nmr) : "") + "," +
               (nsr ? fmt(ssr / nsr) : "") + "," + fmt(si / n) + "," + fmt(st / n) + "," +
               fmt(sa / n) + "\n";
    }
    (void)sm;
    write_file_atomic(file, out);
}

void save_manifest(const RunManifest& m, const fs::path& dir) {
    json j{{"command", m.command}, {"config", m.config_echo}, {"seed", m.seed},
           {"input_hash", m.input_hash}, {"version", m.version}, {"timestamp", m.timestamp}};
    write_file_atomic(dir / "manifest.json", j.dump(2) + "\n");
}

std::string content_hash(const std::vector<fs::path>& inputs) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](const char* data, size_t n) {
        for (size_t i = 0; i < n; ++i) {
            h ^= (std::uint8_t)data[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& p : inputs) {
        std::string name = p.filename().string();
        mix(name.data(), name.size());
        std::string body = read_file(p);
        mix(body.data(), body.size());
    }
    std::ostringstream ss;
    ss << std::hex << h;
    return ss.str();
}

}  // namespace cmflow::io
