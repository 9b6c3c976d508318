#pragma once

#include <array>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "voxattention/config.hpp"
#include "voxattention/metrics.hpp"
#include "voxattention/optim.hpp"
#include "voxattention/voxgrid.hpp"

namespace vox {

// Checkpoint layout (little-endian): magic "VXCK", u32 version, u32
// parameter count, then per parameter sorted by name: u16 name length +
// UTF-8 name, u8 dtype code (0=f32, 1=f64), u8 ndim, u32 dims,
// scalar payload, u8 has-adam flag + both moment payloads when set. The
// trailer holds u8 stage, u32 epoch, u64 adam step count, u32 config
// snapshot length + bytes, and the trailing RNG-state block (4 x u64).
struct CheckpointMeta {
  int stage = 0;  // 0 = fresh, otherwise the stage the parameters came from
  int epoch = 0;  // completed epochs within that stage
  uint64_t adam_step = 0;
  std::array<uint64_t, 4> rng_state{};
  std::string config_text;
};

template <typename T>
void save_checkpoint(const ParameterStore<T>& store, const CheckpointMeta& meta,
                     const std::string& path);

template <typename T>
CheckpointMeta load_checkpoint(ParameterStore<T>& store, const std::string& path);

// meta only, skipping parameter payloads
CheckpointMeta read_checkpoint_meta(const std::string& path);

// ---- dataset tooling ---------------------------------------------------------

// Writes `count` synthetic items (item ids <category>_0000 ...) plus a
// manifest with every item tagged train; run a split afterwards.
void generate_dataset(const TrainConfig& config, const std::string& out_dir, int count);

void split_manifest_file(const std::string& manifest_path, double ratio, uint64_t seed);

// ---- shape export --------------------------------------------------------------

// formats: vxp (binarized, single part), obj-cubes, ascii-slices
void export_occupancy(std::span<const float> occupancy, int resolution, const std::string& path,
                      const std::string& format);
void export_labeled(const LabeledVoxelGrid& grid, const std::string& path,
                    const std::string& format);

// ---- training / evaluation / latent operations --------------------------------

struct TrainOutcome {
  int stage = 0;
  int epochs_ran = 0;
  std::string checkpoint_path;
  std::string log_path;
};

// dtype-erased pipeline front; the implementation is chosen by the config's
// dtype field
class PipelineHandle {
 public:
  virtual ~PipelineHandle() = default;

  // fresh parameters from the config's seed
  static std::unique_ptr<PipelineHandle> create(const TrainConfig& config);
  // rebuild from a checkpoint's config snapshot and load its parameters
  static std::unique_ptr<PipelineHandle> open(const std::string& checkpoint_path,
                                              const std::string& data_dir_override = "");

  virtual const TrainConfig& config() const = 0;
  virtual int current_stage() const = 0;
  virtual int current_epoch() const = 0;

  virtual void load_checkpoint_file(const std::string& path) = 0;
  virtual void save_checkpoint_file(const std::string& path) = 0;

  // Trains the given stage up to its configured epoch count (or
  // target_epochs when positive). A checkpoint from stage-1 of the request
  // starts the stage fresh; one from the same stage resumes mid-stage.
  virtual TrainOutcome train_stage(int stage, const std::string& out_checkpoint,
                                   const std::string& log_csv, int target_epochs = -1) = 0;

  virtual MetricReport evaluate_split(const std::string& split, bool with_set_metrics) = 0;

  virtual void reconstruct(const std::string& item_id, const std::string& out_dir) = 0;
  virtual void swap_parts(const std::string& item_a, const std::string& item_b, int part_index,
                          const std::string& out_dir) = 0;
  virtual void mix_parts(const std::vector<std::string>& donor_ids, uint64_t seed,
                         const std::string& out_dir) = 0;
  virtual void interpolate(const std::string& item_a, const std::string& item_b, int steps,
                           const std::string& out_dir) = 0;
  virtual void export_attention(const std::string& item_id, const std::string& out_dir) = 0;

  // test hooks: raw access to the underlying store for invariants like the
  // stage-2 freeze
  virtual std::vector<std::pair<std::string, std::vector<double>>> snapshot_parameters(
      const std::string& prefix) const = 0;
};

const char* log_csv_header();

}  // namespace vox
