#ifndef CMFLOW_H
#define CMFLOW_H

/* C interface to the cmflow pipeline.
 *
 * Every entry point returns a cmflow_status; on failure a human-readable
 * message is available via cmflow_last_error() (thread-local). Commands that
 * produce a report hand back an opaque cmflow_result whose JSON text lives
 * until cmflow_result_free(). All paths are UTF-8, all config payloads are
 * JSON text; unknown config keys are rejected.
 */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cmflow_status {
    CMFLOW_OK = 0,
    CMFLOW_ERR_ARGUMENT = 1,  /* bad config, unknown keys, bad paths */
    CMFLOW_ERR_INVARIANT = 2, /* inputs violate a documented invariant */
    CMFLOW_ERR_INTERNAL = 3   /* unexpected failure */
} cmflow_status;

/* Library semantic version, e.g. "0.1.0". Static storage; do not free. */
const char* cmflow_version(void);

/* Message for the most recent failure on this thread. Static storage. */
const char* cmflow_last_error(void);

/* Opaque report handle. */
typedef struct cmflow_result cmflow_result;

/* JSON text of a report. Valid until cmflow_result_free(result). */
const char* cmflow_result_json(const cmflow_result* result);
void cmflow_result_free(cmflow_result* result);

/* Generate a synthetic sequence directory.
 * config_json: simulator configuration ("{}" for defaults).
 * Report: {"out": ..., "frames": n, "pairs": n}. */
cmflow_status cmflow_simulate(const char* config_json, uint64_t seed, const char* out_dir,
                              cmflow_result** result);

/* Build pseudo labels for a sequence and score them against ground truth.
 * options_json keys: eta_v, eta_l, direct_threshold ("{}" for defaults).
 * Report: per-pair and mean mIoU of the fused, configured, bias-aware and
 * direct-threshold labels. */
cmflow_status cmflow_labels(const char* seq_dir, const char* options_json, const char* out_dir,
                            cmflow_result** result);

/* Train a model on one or more sequence directories (labels derived on the
 * fly from each sequence's observed odometry/boxes/optical flow).
 * config_json keys mirror the training configuration (lr, epochs, scale,
 * seed, threads, odometer, lidar_boxes, camera, ...).
 * resume_ckpt may be NULL. Report: {"steps": n, "final_loss": x, ...}. */
cmflow_status cmflow_train(const char* const* data_dirs, size_t n_dirs, const char* config_json,
                           const char* out_dir, const char* resume_ckpt, cmflow_result** result);

/* Run a checkpoint over a sequence; writes pred.jsonl into out_dir. */
cmflow_status cmflow_infer(const char* ckpt_file, const char* seq_dir, const char* out_dir,
                           cmflow_result** result);

/* Score predictions against a sequence's ground truth; writes a CSV with a
 * trailing MEAN row to out_csv. */
cmflow_status cmflow_eval(const char* pred_dir, const char* seq_dir, double resolution_ratio,
                          const char* out_csv, cmflow_result** result);

/* Accumulate predicted / ICP-baseline / ground-truth trajectories; writes
 * traj.csv. with_icp == 0 skips the baseline. */
cmflow_status cmflow_odometry(const char* pred_dir, const char* seq_dir, int with_icp,
                              const char* out_csv, cmflow_result** result);

/* Finite-difference check of every loss component through a reduced-scale
 * model. Report: {"errors": {...}, "max_error": x}. */
cmflow_status cmflow_gradcheck(double scale, uint64_t seed, int points, int max_coords,
                               cmflow_result** result);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* CMFLOW_H */
