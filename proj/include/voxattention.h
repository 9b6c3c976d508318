/* C interface to the voxattention part-assembly library.
 *
 * All functions return VOXATT_OK on success; on failure they return an
 * error code and voxatt_last_error() carries a human-readable message
 * (thread-local, valid until the next call from the same thread). Objects
 * are opaque handles released with their matching destroy/close call.
 */
#ifndef VOXATTENTION_H
#define VOXATTENTION_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum voxatt_status {
  VOXATT_OK = 0,
  VOXATT_ERR_INVALID_ARGUMENT = 1,
  VOXATT_ERR_IO = 2,
  VOXATT_ERR_FORMAT = 3,
  VOXATT_ERR_CONFIG = 4,
  VOXATT_ERR_STATE = 5,
  VOXATT_ERR_UNSUPPORTED = 6,
  VOXATT_ERR_INTERNAL = 7
} voxatt_status;

const char* voxatt_version(void);
const char* voxatt_status_name(voxatt_status status);
const char* voxatt_last_error(void);

/* ---- configuration ------------------------------------------------------ */

typedef struct voxatt_config voxatt_config;

voxatt_status voxatt_config_create(voxatt_config** out_config);
voxatt_status voxatt_config_load(const char* path, voxatt_config** out_config);
voxatt_status voxatt_config_save(const voxatt_config* config, const char* path);
voxatt_status voxatt_config_set(voxatt_config* config, const char* key, const char* value);
/* writes the value into buffer (NUL-terminated); fails when too small */
voxatt_status voxatt_config_get(const voxatt_config* config, const char* key, char* buffer,
                                size_t buffer_size);
void voxatt_config_destroy(voxatt_config* config);

/* ---- dataset -------------------------------------------------------------- */

/* synthetic items + manifest into out_dir, seeded from the config */
voxatt_status voxatt_gen_synth(const voxatt_config* config, const char* out_dir, uint32_t count);
/* deterministic train/test retagging of an existing manifest */
voxatt_status voxatt_split(const char* manifest_path, double train_ratio, uint64_t seed);

/* ---- training / evaluation ------------------------------------------------ */

/* Runs one training stage. resume_checkpoint may be NULL for stage 1; a
 * checkpoint of stage-1 starts this stage; one of the same stage resumes it.
 * target_epochs <= 0 trains the configured epoch count. */
voxatt_status voxatt_train(const voxatt_config* config, int stage, const char* resume_checkpoint,
                           const char* out_checkpoint, const char* log_csv, int target_epochs);

#define VOXATT_MAX_PARTS 16

typedef struct voxatt_metrics {
  uint32_t n_parts;
  uint32_t item_count;
  double per_part_miou[VOXATT_MAX_PARTS];
  uint8_t part_available[VOXATT_MAX_PARTS];
  double mean_part_miou;
  double shape_miou;
  double transform_mse;
  double per_part_symmetry[VOXATT_MAX_PARTS];
  double shape_symmetry;
  uint8_t has_set_metrics;
  double jsd;
  double mmd_cd;
  double mmd_emd;
  double cov_cd;
  double cov_emd;
} voxatt_metrics;

/* split is "train" or "test"; data_dir NULL uses the checkpoint's snapshot.
 * out_csv, when non-NULL, receives header + one row. */
voxatt_status voxatt_evaluate(const char* checkpoint, const char* data_dir, const char* split,
                              int with_set_metrics, voxatt_metrics* out_metrics,
                              const char* out_csv);

/* ---- sessions (latent-space operations) ----------------------------------- */

typedef struct voxatt_session voxatt_session;

voxatt_status voxatt_session_open(const char* checkpoint, const char* data_dir,
                                  voxatt_session** out_session);
void voxatt_session_close(voxatt_session* session);

voxatt_status voxatt_recon(voxatt_session* session, const char* item_id, const char* out_dir);
/* part_index is 1-based */
voxatt_status voxatt_swap(voxatt_session* session, const char* item_a, const char* item_b,
                          uint32_t part_index, const char* out_dir);
/* donor_ids may be NULL (n_donors 0) to draw random donors with the seed */
voxatt_status voxatt_mix(voxatt_session* session, const char* const* donor_ids, uint32_t n_donors,
                         uint64_t seed, const char* out_dir);
voxatt_status voxatt_interp(voxatt_session* session, const char* item_a, const char* item_b,
                            uint32_t steps, const char* out_dir);
voxatt_status voxatt_attn_maps(voxatt_session* session, const char* item_id, const char* out_dir);

/* ---- shape export ----------------------------------------------------------- */

/* format: "vxp", "obj-cubes" or "ascii-slices" */
voxatt_status voxatt_export(const char* vxp_path, const char* out_path, const char* format);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* VOXATTENTION_H */
