#include "voxattention/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "voxattention/losses.hpp"
#include "voxattention/model.hpp"

namespace fs = std::filesystem;

namespace vox {

// ---- little-endian binary io ---------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big,
              "mixed-endian platforms are not supported");

template <typename U>
void write_le(std::ostream& out, U v) {
  uint8_t buf[sizeof(U)];
  for (size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<uint8_t>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U read_le(std::istream& in, const std::string& what) {
  uint8_t buf[sizeof(U)];
  in.read(reinterpret_cast<char*>(buf), sizeof(U));
  require(in.gcount() == sizeof(U), ErrorKind::format, "checkpoint: truncated " + what);
  U v = 0;
  for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

template <typename T>
void write_scalars(std::ostream& out, std::span<const T> data) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(T)));
  } else {
    using U = std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>;
    for (T v : data) {
      U bits;
      std::memcpy(&bits, &v, sizeof(T));
      write_le(out, bits);
    }
  }
}

template <typename T>
void read_scalars(std::istream& in, std::span<T> data, const std::string& what) {
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(T)));
    require(in.gcount() == static_cast<std::streamsize>(data.size() * sizeof(T)),
            ErrorKind::format, "checkpoint: truncated payload of " + what);
  } else {
    using U = std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>;
    for (T& v : data) {
      U bits = read_le<U>(in, "payload of " + what);
      std::memcpy(&v, &bits, sizeof(T));
    }
  }
}

template <typename T>
constexpr uint8_t dtype_code() {
  return sizeof(T) == 4 ? 0 : 1;
}

constexpr uint32_t kCheckpointVersion = 1;

std::string fmt_g(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::vector<float> to_float_vec(std::span<const float> s) { return {s.begin(), s.end()}; }
std::vector<float> to_float_vec(std::span<const double> s) {
  std::vector<float> out(s.size());
  for (size_t i = 0; i < s.size(); ++i) out[i] = static_cast<float>(s[i]);
  return out;
}

}  // namespace

// ---- checkpoint ---------------------------------------------------------------

template <typename T>
void save_checkpoint(const ParameterStore<T>& store, const CheckpointMeta& meta,
                     const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::io, "cannot write " + path);
  out.write("VXCK", 4);
  write_le<uint32_t>(out, kCheckpointVersion);
  write_le<uint32_t>(out, static_cast<uint32_t>(store.all().size()));
  for (const auto& [name, p] : store.all()) {
    require(name.size() <= 0xffff, ErrorKind::invariant, "parameter name too long: " + name);
    write_le<uint16_t>(out, static_cast<uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    out.put(static_cast<char>(dtype_code<T>()));
    out.put(static_cast<char>(p.value.ndim()));
    for (int i = 0; i < p.value.ndim(); ++i)
      write_le<uint32_t>(out, static_cast<uint32_t>(p.value.dim(i)));
    write_scalars<T>(out, p.value.data());
    const bool has_adam = !p.buffer;
    out.put(has_adam ? 1 : 0);
    if (has_adam) {
      write_scalars<T>(out, p.adam_m.data());
      write_scalars<T>(out, p.adam_v.data());
    }
  }
  out.put(static_cast<char>(meta.stage));
  write_le<uint32_t>(out, static_cast<uint32_t>(meta.epoch));
  write_le<uint64_t>(out, meta.adam_step);
  write_le<uint32_t>(out, static_cast<uint32_t>(meta.config_text.size()));
  out.write(meta.config_text.data(), static_cast<std::streamsize>(meta.config_text.size()));
  for (uint64_t w : meta.rng_state) write_le<uint64_t>(out, w);
  require(out.good(), ErrorKind::io, "short write to " + path);
}

namespace {

void read_checkpoint_header(std::istream& in, const std::string& path, uint32_t& n_params) {
  char magic[4];
  in.read(magic, 4);
  require(in.gcount() == 4 && std::memcmp(magic, "VXCK", 4) == 0, ErrorKind::format,
          path + ": not a checkpoint file (bad magic)");
  const uint32_t version = read_le<uint32_t>(in, "version");
  require(version == kCheckpointVersion, ErrorKind::format,
          path + ": unsupported checkpoint version " + std::to_string(version));
  n_params = read_le<uint32_t>(in, "parameter count");
}

CheckpointMeta read_trailer(std::istream& in, const std::string& path) {
  CheckpointMeta meta;
  int stage = in.get();
  require(stage != EOF, ErrorKind::format, path + ": truncated trailer");
  meta.stage = stage;
  meta.epoch = static_cast<int>(read_le<uint32_t>(in, "epoch"));
  meta.adam_step = read_le<uint64_t>(in, "adam step count");
  const uint32_t cfg_len = read_le<uint32_t>(in, "config length");
  meta.config_text.resize(cfg_len);
  in.read(meta.config_text.data(), cfg_len);
  require(in.gcount() == static_cast<std::streamsize>(cfg_len), ErrorKind::format,
          path + ": truncated config snapshot");
  for (auto& w : meta.rng_state) w = read_le<uint64_t>(in, "rng state");
  return meta;
}

}  // namespace

template <typename T>
CheckpointMeta load_checkpoint(ParameterStore<T>& store, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::io, "cannot open " + path);
  uint32_t n_params = 0;
  read_checkpoint_header(in, path, n_params);
  require(n_params == store.all().size(), ErrorKind::format,
          path + ": parameter count " + std::to_string(n_params) + " does not match the model (" +
              std::to_string(store.all().size()) + ")");
  std::map<std::string, bool> filled;
  for (uint32_t k = 0; k < n_params; ++k) {
    const uint16_t name_len = read_le<uint16_t>(in, "parameter name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    require(in.gcount() == static_cast<std::streamsize>(name_len), ErrorKind::format,
            path + ": truncated parameter name");
    require(store.contains(name), ErrorKind::format, path + ": unknown parameter " + name);
    Parameter<T>& p = store.get(name);
    const int dtype = in.get();
    require(dtype != EOF, ErrorKind::format, path + ": truncated dtype of " + name);
    require(dtype == dtype_code<T>(), ErrorKind::format,
            path + ": dtype mismatch for " + name + " (checkpoint " +
                (dtype == 0 ? "f32" : "f64") + ")");
    const int ndim = in.get();
    require(ndim != EOF, ErrorKind::format, path + ": truncated rank of " + name);
    require(ndim == p.value.ndim(), ErrorKind::format, path + ": rank mismatch for " + name);
    for (int i = 0; i < ndim; ++i) {
      const uint32_t d = read_le<uint32_t>(in, "dims of " + name);
      require(static_cast<int64_t>(d) == p.value.dim(i), ErrorKind::format,
              path + ": shape mismatch for " + name);
    }
    read_scalars<T>(in, p.value.data(), name);
    const int has_adam = in.get();
    require(has_adam == 0 || has_adam == 1, ErrorKind::format,
            path + ": bad adam flag for " + name);
    require((has_adam == 1) == !p.buffer, ErrorKind::format,
            path + ": adam moment presence mismatch for " + name);
    if (has_adam) {
      read_scalars<T>(in, p.adam_m.data(), name + " (adam m)");
      read_scalars<T>(in, p.adam_v.data(), name + " (adam v)");
    }
    filled[name] = true;
  }
  require(filled.size() == store.all().size(), ErrorKind::format,
          path + ": checkpoint does not cover every model parameter");
  return read_trailer(in, path);
}

CheckpointMeta read_checkpoint_meta(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::io, "cannot open " + path);
  uint32_t n_params = 0;
  read_checkpoint_header(in, path, n_params);
  for (uint32_t k = 0; k < n_params; ++k) {
    const uint16_t name_len = read_le<uint16_t>(in, "parameter name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    require(in.gcount() == static_cast<std::streamsize>(name_len), ErrorKind::format,
            path + ": truncated parameter name");
    const int dtype = in.get();
    const int ndim = in.get();
    require(dtype != EOF && ndim != EOF, ErrorKind::format, path + ": truncated header of " + name);
    int64_t numel = 1;
    for (int i = 0; i < ndim; ++i) numel *= read_le<uint32_t>(in, "dims of " + name);
    const int64_t scalar = dtype == 0 ? 4 : 8;
    in.seekg(numel * scalar, std::ios::cur);
    const int has_adam = in.get();
    require(has_adam == 0 || has_adam == 1, ErrorKind::format,
            path + ": bad adam flag for " + name);
    if (has_adam) in.seekg(2 * numel * scalar, std::ios::cur);
    require(in.good(), ErrorKind::format, path + ": truncated payload of " + name);
  }
  return read_trailer(in, path);
}

// ---- dataset tooling ------------------------------------------------------------

void generate_dataset(const TrainConfig& config, const std::string& out_dir, int count) {
  require(count >= 1, ErrorKind::config, "generate_dataset: count must be positive");
  require(config.n_parts == category_part_count(config.category), ErrorKind::config,
          "generate_dataset: n_parts does not match category " + config.category);
  fs::create_directories(out_dir);
  DatasetManifest manifest;
  manifest.category = config.category;
  manifest.n_parts = config.n_parts;
  manifest.resolution = config.resolution;
  manifest.seed = config.seed;
  for (int i = 0; i < count; ++i) {
    LabeledVoxelGrid grid = generate_synthetic(
        config.category, Rng::derive(config.seed, Rng::hash_str("dataset"), static_cast<uint64_t>(i)),
        config.resolution);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%04d", config.category.c_str(), i);
    grid.item_id = buf;
    write_vxp(grid, (fs::path(out_dir) / (grid.item_id + ".vxp")).string());
    manifest.items.push_back({grid.item_id, "train"});
  }
  write_manifest(manifest, (fs::path(out_dir) / "manifest.txt").string());
}

void split_manifest_file(const std::string& manifest_path, double ratio, uint64_t seed) {
  DatasetManifest manifest = read_manifest(manifest_path);
  split_dataset(manifest, ratio, seed);
  write_manifest(manifest, manifest_path);
}

// ---- shape export ----------------------------------------------------------------

namespace {

void export_obj(std::span<const float> occupancy, int resolution, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), ErrorKind::io, "cannot write " + path);
  out << "# voxel occupancy as unit cubes\n";
  const int64_t R = resolution;
  int64_t base = 0;
  for (int64_t x = 0; x < R; ++x)
    for (int64_t y = 0; y < R; ++y)
      for (int64_t z = 0; z < R; ++z) {
        if (occupancy[static_cast<size_t>((x * R + y) * R + z)] <= 0.5f) continue;
        for (int dx = 0; dx < 2; ++dx)
          for (int dy = 0; dy < 2; ++dy)
            for (int dz = 0; dz < 2; ++dz)
              out << "v " << x + dx << ' ' << y + dy << ' ' << z + dz << '\n';
        // corners are v1..v8 in (dx,dy,dz) binary order
        static const int quads[6][4] = {{1, 2, 4, 3}, {5, 7, 8, 6}, {1, 5, 6, 2},
                                        {3, 4, 8, 7}, {1, 3, 7, 5}, {2, 6, 8, 4}};
        for (const auto& q : quads)
          out << "f " << base + q[0] << ' ' << base + q[1] << ' ' << base + q[2] << ' '
              << base + q[3] << '\n';
        base += 8;
      }
  require(out.good(), ErrorKind::io, "short write to " + path);
}

void export_ascii_slices(std::span<const float> occupancy, int resolution,
                         const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), ErrorKind::io, "cannot write " + path);
  const int64_t R = resolution;
  for (int64_t z = 0; z < R; ++z) {
    out << "slice z=" << z << '\n';
    for (int64_t y = R - 1; y >= 0; --y) {
      for (int64_t x = 0; x < R; ++x)
        out << (occupancy[static_cast<size_t>((x * R + y) * R + z)] > 0.5f ? '#' : '.');
      out << '\n';
    }
    out << '\n';
  }
  require(out.good(), ErrorKind::io, "short write to " + path);
}

}  // namespace

void export_occupancy(std::span<const float> occupancy, int resolution, const std::string& path,
                      const std::string& format) {
  if (format == "vxp") {
    LabeledVoxelGrid grid;
    grid.resolution = resolution;
    grid.n_parts = 1;
    grid.category = "occupancy";
    grid.labels.assign(occupancy.size(), 0);
    for (size_t i = 0; i < occupancy.size(); ++i) grid.labels[i] = occupancy[i] > 0.5f ? 1 : 0;
    write_vxp(grid, path);
  } else if (format == "obj-cubes") {
    export_obj(occupancy, resolution, path);
  } else if (format == "ascii-slices") {
    export_ascii_slices(occupancy, resolution, path);
  } else {
    fail(ErrorKind::config, "export: unknown format " + format);
  }
}

void export_labeled(const LabeledVoxelGrid& grid, const std::string& path,
                    const std::string& format) {
  if (format == "vxp") {
    write_vxp(grid, path);
  } else {
    export_occupancy(full_occupancy(grid), grid.resolution, path, format);
  }
}

const char* log_csv_header() {
  return "epoch,stage,loss_pi,loss_part,loss_trans,loss_ac,loss_shape,total,part_miou,shape_miou,"
         "trans_mse,symmetry";
}

// ---- pipeline -------------------------------------------------------------------

namespace {

template <typename T>
ModelConfig<T> model_config_from(const TrainConfig& cfg) {
  ModelConfig<T> m;
  m.resolution = cfg.resolution;
  m.encoder_channels.clear();
  int channel = 64;
  for (int r = cfg.resolution; r > 4; r /= 2) {
    m.encoder_channels.push_back(channel);
    channel = std::min(256, channel * 2);
  }
  m.latent_width = 256;
  m.n_parts = cfg.n_parts;
  m.head = head_mode_from_string(cfg.head);
  m.feature_layers = cfg.layers;
  m.embed_width = cfg.d_a;
  m.heads = cfg.heads;
  m.blocks = cfg.blocks;
  m.apply_ac_loss = cfg.ac_loss;
  m.head_mlp_hidden = cfg.head_mlp_hidden;
  m.simple_mlp_hidden1 = cfg.simple_mlp_hidden1;
  m.simple_mlp_hidden2 = cfg.simple_mlp_hidden2;
  return m;
}

constexpr double kThreshold = 0.5;

}  // namespace

template <typename T>
class PipelineImpl final : public PipelineHandle {
 public:
  explicit PipelineImpl(const TrainConfig& cfg, bool load_data = true)
      : cfg_(cfg), session_rng_(Rng::derive(cfg.seed, Rng::hash_str("init"))) {
    cfg_.validate();
    model_ = std::make_unique<VoxModel<T>>(model_config_from<T>(cfg_), store_, session_rng_);
    if (load_data) load_dataset();
  }

  const TrainConfig& config() const override { return cfg_; }
  int current_stage() const override { return meta_.stage; }
  int current_epoch() const override { return meta_.epoch; }

  void load_checkpoint_file(const std::string& path) override {
    meta_ = load_checkpoint(store_, path);
    session_rng_.set_state(meta_.rng_state);
    adam_.step_count = static_cast<int64_t>(meta_.adam_step);
  }

  void save_checkpoint_file(const std::string& path) override {
    meta_.rng_state = session_rng_.state();
    meta_.adam_step = static_cast<uint64_t>(adam_.step_count);
    meta_.config_text = cfg_.serialize();
    save_checkpoint(store_, meta_, path);
  }

  TrainOutcome train_stage(int stage, const std::string& out_checkpoint,
                           const std::string& log_csv, int target_epochs) override;

  MetricReport evaluate_split(const std::string& split, bool with_set_metrics) override;

  void reconstruct(const std::string& item_id, const std::string& out_dir) override;
  void swap_parts(const std::string& item_a, const std::string& item_b, int part_index,
                  const std::string& out_dir) override;
  void mix_parts(const std::vector<std::string>& donor_ids, uint64_t seed,
                 const std::string& out_dir) override;
  void interpolate(const std::string& item_a, const std::string& item_b, int steps,
                   const std::string& out_dir) override;
  void export_attention(const std::string& item_id, const std::string& out_dir) override;

  std::vector<std::pair<std::string, std::vector<double>>> snapshot_parameters(
      const std::string& prefix) const override {
    std::vector<std::pair<std::string, std::vector<double>>> out;
    for (const auto& [name, p] : store_.all()) {
      if (name.rfind(prefix, 0) != 0) continue;
      std::vector<double> vals(p.value.data().begin(), p.value.data().end());
      out.emplace_back(name, std::move(vals));
    }
    return out;
  }

 private:
  struct Item {
    std::string id;
    LabeledVoxelGrid grid;
    Tensor<T> occupancy;   // (1,1,R,R,R)
    Tensor<T> canonical;   // (1,N_p,R^3)
    Tensor<T> transforms;  // (1,N_p,6)
    Tensor<T> present;     // (1,N_p)
  };

  struct ItemForward {
    std::vector<std::vector<float>> canonical_parts;  // per part, R^3
    std::vector<std::vector<float>> placed_parts;     // per part, R^3
    std::vector<float> assembled;                     // R^3
    std::vector<std::array<double, 6>> transforms;    // per part
  };

  void load_dataset();
  const Item& item_by_id(const std::string& id) const;
  LossWeights<T> weights_for(int stage) const;
  void apply_freezing(int stage);
  void start_stage(int stage);
  void build_tap_cache();
  StageLossReport train_step(int stage, std::span<const int> batch, int epoch);
  ItemForward run_item(const Tensor<T>& part_latents);
  ItemForward run_item_from_shape(const Tensor<T>& occupancy);
  Tensor<T> encode_item(const Tensor<T>& occupancy);
  LabeledVoxelGrid labeled_from(const ItemForward& fwd) const;
  void export_shape_files(const ItemForward& fwd, const std::string& out_dir,
                          const std::string& stem) const;

  TrainConfig cfg_;
  ParameterStore<T> store_;
  std::unique_ptr<VoxModel<T>> model_;
  Rng session_rng_;
  CheckpointMeta meta_;
  AdamState<T> adam_;

  DatasetManifest manifest_;
  std::vector<Item> items_;
  std::map<std::string, int> id_index_;
  std::vector<int> train_idx_, test_idx_;

  // stage-2 cache: per train item, the selected feature layers (eval mode)
  std::map<int, std::vector<Tensor<T>>> tap_cache_;
};

template <typename T>
void PipelineImpl<T>::load_dataset() {
  const fs::path dir(cfg_.data_dir);
  const std::string manifest_path = (dir / "manifest.txt").string();
  manifest_ = read_manifest(manifest_path);
  require(manifest_.category == cfg_.category, ErrorKind::config,
          "dataset category " + manifest_.category + " does not match config " + cfg_.category);
  require(manifest_.n_parts == cfg_.n_parts, ErrorKind::config,
          "dataset part count does not match config");
  require(manifest_.resolution == cfg_.resolution, ErrorKind::config,
          "dataset resolution does not match config");
  const int64_t R = cfg_.resolution;
  const int64_t V = R * R * R;
  const int P = cfg_.n_parts;
  for (const auto& entry : manifest_.items) {
    Item item;
    item.id = entry.item_id;
    item.grid = read_vxp((dir / (entry.item_id + ".vxp")).string());
    require(item.grid.resolution == cfg_.resolution, ErrorKind::config,
            entry.item_id + ": resolution mismatch");
    require(item.grid.n_parts == cfg_.n_parts, ErrorKind::config,
            entry.item_id + ": part count mismatch");

    item.occupancy = Tensor<T>::zeros({1, 1, R, R, R});
    const auto occ = full_occupancy(item.grid);
    for (int64_t i = 0; i < V; ++i) item.occupancy.data()[i] = static_cast<T>(occ[i]);

    item.canonical = Tensor<T>::zeros({1, P, V});
    item.transforms = Tensor<T>::zeros({1, P, 6});
    item.present = Tensor<T>::zeros({1, P});
    for (int p = 0; p < P; ++p) {
      auto [canonical, transform] = canonicalize_part(item.grid, p + 1);
      for (int64_t i = 0; i < V; ++i)
        item.canonical.data()[p * V + i] = static_cast<T>(canonical.occupancy[i]);
      for (int a = 0; a < 3; ++a) {
        item.transforms.data()[p * 6 + a] = static_cast<T>(transform.scale[a]);
        item.transforms.data()[p * 6 + 3 + a] = static_cast<T>(transform.translation[a]);
      }
      item.present.data()[p] = canonical.present ? T(1) : T(0);
    }
    id_index_[item.id] = static_cast<int>(items_.size());
    if (entry.split == "train")
      train_idx_.push_back(static_cast<int>(items_.size()));
    else
      test_idx_.push_back(static_cast<int>(items_.size()));
    items_.push_back(std::move(item));
  }
  require(!items_.empty(), ErrorKind::config, "dataset is empty");
}

template <typename T>
const typename PipelineImpl<T>::Item& PipelineImpl<T>::item_by_id(const std::string& id) const {
  auto it = id_index_.find(id);
  require(it != id_index_.end(), ErrorKind::config, "unknown item id: " + id);
  return items_[static_cast<size_t>(it->second)];
}

template <typename T>
LossWeights<T> PipelineImpl<T>::weights_for(int stage) const {
  LossWeights<T> w;
  w.gamma = static_cast<T>(cfg_.gamma);
  if (stage == 1) {
    w.w_pi = static_cast<T>(cfg_.s1_w_pi);
    w.w_part = static_cast<T>(cfg_.s1_w_part);
    w.w_trans = w.w_ac = w.w_shape = T(0);
  } else if (stage == 2) {
    w.w_trans = static_cast<T>(cfg_.s2_w_trans);
    w.w_ac = static_cast<T>(cfg_.s2_w_ac);
    w.w_pi = w.w_part = w.w_shape = T(0);
  } else {
    w.w_pi = static_cast<T>(cfg_.s3_w_pi);
    w.w_part = static_cast<T>(cfg_.s3_w_part);
    w.w_trans = static_cast<T>(cfg_.s3_w_trans);
    w.w_ac = static_cast<T>(cfg_.s3_w_ac);
    w.w_shape = static_cast<T>(cfg_.s3_w_shape);
  }
  return w;
}

template <typename T>
void PipelineImpl<T>::apply_freezing(int stage) {
  store_.set_all_frozen(false);
  if (stage == 1) {
    store_.set_frozen_by_prefix("head.", true);
  } else if (stage == 2) {
    store_.set_frozen_by_prefix("enc.", true);
    store_.set_frozen_by_prefix("dec.", true);
    store_.set_frozen_by_prefix("bank.", true);
  }
}

template <typename T>
void PipelineImpl<T>::start_stage(int stage) {
  meta_.stage = stage;
  meta_.epoch = 0;
  adam_.step_count = 0;
  meta_.adam_step = 0;
  // fresh optimizer per stage: the trainable set changes between stages
  for (auto& [name, p] : store_.all()) {
    if (p.buffer) continue;
    std::fill(p.adam_m.data().begin(), p.adam_m.data().end(), T(0));
    std::fill(p.adam_v.data().begin(), p.adam_v.data().end(), T(0));
  }
}

template <typename T>
void PipelineImpl<T>::build_tap_cache() {
  tap_cache_.clear();
  NoGradScope<T> no_grad;
  for (int idx : train_idx_) {
    const Item& item = items_[static_cast<size_t>(idx)];
    Tensor<T> z = model_->encode(item.occupancy, /*training=*/false);
    Tensor<T> u = model_->project_latents(z);
    auto dec = model_->decode_parts(u, /*training=*/false);
    std::vector<Tensor<T>> cached(dec.taps.size());
    for (int l : cfg_.layers) cached[static_cast<size_t>(l)] = dec.taps[static_cast<size_t>(l)];
    tap_cache_[idx] = std::move(cached);
  }
}

template <typename T>
StageLossReport PipelineImpl<T>::train_step(int stage, std::span<const int> batch, int epoch) {
  const int64_t B = static_cast<int64_t>(batch.size());
  const int P = cfg_.n_parts;
  const int64_t R = cfg_.resolution;
  const int64_t V = R * R * R;

  auto gather = [&](auto field) {
    std::vector<Tensor<T>> parts;
    for (int idx : batch) parts.push_back(items_[static_cast<size_t>(idx)].*field);
    return parts.size() == 1 ? parts[0] : concat(parts, 0);
  };
  Tensor<T> target_canonical = gather(&Item::canonical);
  Tensor<T> gt_transforms = gather(&Item::transforms);
  Tensor<T> present = gather(&Item::present);

  Tape<T> tape;
  TapeScope<T> scope(tape);
  StageLossInputs<T> in;
  std::vector<Tensor<T>> bank;
  StageLossReport report;
  Tensor<T> loss;
  const bool attention_head = cfg_.head != "simple_mlp";

  if (stage == 1) {
    Tensor<T> shapes = gather(&Item::occupancy);
    Tensor<T> z = model_->encode(shapes, /*training=*/true);
    Tensor<T> u = model_->project_latents(z);
    auto dec = model_->decode_parts(u, /*training=*/true);
    bank = model_->bank_matrices();
    in.bank = &bank;
    in.part_output = reshape(dec.parts, {B, P, V});
    in.part_target = target_canonical;
    in.part_mask = present;
    loss = stage_loss(1, in, weights_for(1), report);
  } else if (stage == 2) {
    typename VoxModel<T>::Decoded dec;
    dec.batch = B;
    dec.taps.resize(static_cast<size_t>(model_->config().tap_count()));
    for (int l : cfg_.layers) {
      std::vector<Tensor<T>> per_item;
      for (int idx : batch) per_item.push_back(tap_cache_.at(idx)[static_cast<size_t>(l)]);
      dec.taps[static_cast<size_t>(l)] = per_item.size() == 1 ? per_item[0] : concat(per_item, 0);
    }
    auto head = model_->run_head(dec);
    in.trans_pred = head.transforms;
    in.trans_gt = gt_transforms;
    in.trans_mask = present;
    in.ac_vectors = head.ac_vectors;
    in.ac_active = attention_head && cfg_.ac_loss;
    loss = stage_loss(2, in, weights_for(2), report);
  } else {
    Tensor<T> shapes = gather(&Item::occupancy);
    auto fwd = model_->forward(shapes, /*training=*/true);
    bank = model_->bank_matrices();
    in.bank = &bank;
    in.part_output = reshape(fwd.decoded.parts, {B, P, V});
    in.part_target = target_canonical;
    in.part_mask = present;
    in.trans_pred = fwd.head.transforms;
    in.trans_gt = gt_transforms;
    in.trans_mask = present;
    in.ac_vectors = fwd.head.ac_vectors;
    in.ac_active = attention_head && cfg_.ac_loss;
    in.assembled = reshape(fwd.assembled, {B, 1, V});
    in.shape_target = reshape(shapes, {B, 1, V});
    loss = stage_loss(3, in, weights_for(3), report);
  }
  tape.backward(loss);
  adam_step(store_, adam_, epoch);
  report.epoch = epoch;
  return report;
}

template <typename T>
TrainOutcome PipelineImpl<T>::train_stage(int stage, const std::string& out_checkpoint,
                                          const std::string& log_csv, int target_epochs) {
  require(stage >= 1 && stage <= 3, ErrorKind::config, "train: stage must be 1, 2 or 3");
  if (meta_.stage == stage) {
    // resume mid-stage
  } else if (meta_.stage == stage - 1) {
    start_stage(stage);
  } else {
    fail(ErrorKind::state, "train: stage " + std::to_string(stage) +
                               " needs a checkpoint from stage " + std::to_string(stage - 1) +
                               " (have stage " + std::to_string(meta_.stage) + ")");
  }
  const StageSchedule& sched =
      stage == 1 ? cfg_.stage1 : (stage == 2 ? cfg_.stage2 : cfg_.stage3);
  const int total = target_epochs > 0 ? target_epochs : sched.epochs;
  require(meta_.epoch <= total, ErrorKind::state,
          "train: checkpoint is already past the requested epoch count");
  require(!train_idx_.empty(), ErrorKind::config, "train: no training items in the dataset");
  if (total > 0 && total >= cfg_.eval_every)
    require(!test_idx_.empty(), ErrorKind::config,
            "train: evaluation cadence needs a non-empty test split");

  apply_freezing(stage);
  adam_.lr = static_cast<T>(sched.lr);
  adam_.decay_ratio = static_cast<T>(sched.decay_ratio);
  adam_.decay_every = sched.decay_every;
  if (stage == 2) build_tap_cache();

  std::ofstream log(log_csv, std::ios::trunc);
  require(log.good(), ErrorKind::io, "cannot write " + log_csv);
  log << log_csv_header() << '\n';

  const int start_epoch = meta_.epoch;
  for (int epoch = start_epoch; epoch < total; ++epoch) {
    std::vector<int> order = train_idx_;
    Rng shuffle_rng(Rng::derive(cfg_.seed, Rng::hash_str("shuffle"),
                                static_cast<uint64_t>(stage), static_cast<uint64_t>(epoch)));
    for (size_t i = order.size() - 1; i > 0; --i) {
      const size_t j = static_cast<size_t>(shuffle_rng.next_below(i + 1));
      std::swap(order[i], order[j]);
    }
    double sums[6] = {0, 0, 0, 0, 0, 0};
    int steps = 0;
    for (size_t off = 0; off < order.size(); off += static_cast<size_t>(cfg_.batch_size)) {
      const size_t end = std::min(order.size(), off + static_cast<size_t>(cfg_.batch_size));
      StageLossReport rep = train_step(
          stage, std::span<const int>(order.data() + off, end - off), epoch);
      sums[0] += rep.loss_pi;
      sums[1] += rep.loss_part;
      sums[2] += rep.loss_trans;
      sums[3] += rep.loss_ac;
      sums[4] += rep.loss_shape;
      sums[5] += rep.total;
      ++steps;
    }
    log << epoch << ',' << stage;
    for (double s : sums) log << ',' << fmt_g(s / steps);
    if ((epoch + 1) % cfg_.eval_every == 0) {
      MetricReport m = evaluate_split("test", false);
      log << ',' << fmt_g(m.mean_part_miou) << ',' << fmt_g(m.shape_miou) << ','
          << fmt_g(m.transform_mse) << ',' << fmt_g(m.shape_symmetry);
    } else {
      log << ",,,,";
    }
    log << '\n';
    meta_.epoch = epoch + 1;
  }
  log.close();
  save_checkpoint_file(out_checkpoint);
  TrainOutcome outcome;
  outcome.stage = stage;
  outcome.epochs_ran = total - start_epoch;
  outcome.checkpoint_path = out_checkpoint;
  outcome.log_path = log_csv;
  return outcome;
}

template <typename T>
Tensor<T> PipelineImpl<T>::encode_item(const Tensor<T>& occupancy) {
  return model_->encode(occupancy, /*training=*/false);
}

template <typename T>
typename PipelineImpl<T>::ItemForward PipelineImpl<T>::run_item(const Tensor<T>& part_latents) {
  NoGradScope<T> no_grad;
  const int P = cfg_.n_parts;
  const int64_t R = cfg_.resolution;
  const int64_t V = R * R * R;
  auto dec = model_->decode_parts(part_latents, /*training=*/false);
  auto head = model_->run_head(dec);

  ItemForward fwd;
  fwd.canonical_parts.resize(static_cast<size_t>(P));
  fwd.placed_parts.resize(static_cast<size_t>(P));
  fwd.transforms.resize(static_cast<size_t>(P));
  fwd.assembled.assign(static_cast<size_t>(V), 0.0f);
  for (int p = 0; p < P; ++p) {
    fwd.canonical_parts[static_cast<size_t>(p)] = to_float_vec(
        std::span<const T>(dec.parts.data().data() + p * V, static_cast<size_t>(V)));
    Tensor<T> occ = Tensor<T>::zeros({1, R, R, R});
    std::copy(dec.parts.data().begin() + p * V, dec.parts.data().begin() + (p + 1) * V,
              occ.data().begin());
    Tensor<T> prm = Tensor<T>::zeros({6});
    for (int k = 0; k < 6; ++k) {
      prm.data()[k] = head.transforms.data()[p * 6 + k];
      fwd.transforms[static_cast<size_t>(p)][static_cast<size_t>(k)] =
          static_cast<double>(prm.data()[k]);
    }
    Tensor<T> placed = grid_sample_transform(occ, prm);
    fwd.placed_parts[static_cast<size_t>(p)] = to_float_vec(placed.data());
    for (int64_t i = 0; i < V; ++i)
      fwd.assembled[static_cast<size_t>(i)] = std::max(
          fwd.assembled[static_cast<size_t>(i)], fwd.placed_parts[static_cast<size_t>(p)][static_cast<size_t>(i)]);
  }
  return fwd;
}

template <typename T>
typename PipelineImpl<T>::ItemForward PipelineImpl<T>::run_item_from_shape(
    const Tensor<T>& occupancy) {
  NoGradScope<T> no_grad;
  Tensor<T> z = encode_item(occupancy);
  return run_item(model_->project_latents(z));
}

template <typename T>
MetricReport PipelineImpl<T>::evaluate_split(const std::string& split, bool with_set_metrics) {
  const std::vector<int>& indices = split == "train" ? train_idx_ : test_idx_;
  require(split == "train" || split == "test", ErrorKind::config,
          "evaluate: split must be train or test");
  require(!indices.empty(), ErrorKind::config, "evaluate: the " + split + " split is empty");

  const int P = cfg_.n_parts;
  const int64_t R = cfg_.resolution;
  PartIouAccumulator iou_acc(P);
  PartIouAccumulator sym_acc(P);
  double trans_se = 0.0;
  int64_t trans_n = 0;
  double shape_iou_sum = 0.0, shape_sym_sum = 0.0;
  std::vector<PointCloud> gen_cd, ref_cd, gen_emd, ref_emd;

  for (size_t k = 0; k < indices.size(); ++k) {
    const Item& item = items_[static_cast<size_t>(indices[k])];
    ItemForward fwd = run_item_from_shape(item.occupancy);
    const auto gt_full = full_occupancy(item.grid);
    for (int p = 0; p < P; ++p) {
      if (item.present.data()[p] == T(0)) continue;
      const auto gt_canonical = to_float_vec(std::span<const T>(
          item.canonical.data().data() + p * R * R * R, static_cast<size_t>(R * R * R)));
      iou_acc.add(p, miou(fwd.canonical_parts[static_cast<size_t>(p)], gt_canonical, kThreshold));
      sym_acc.add(p, symmetry_score(fwd.placed_parts[static_cast<size_t>(p)], cfg_.resolution,
                                    kThreshold));
      double se = 0.0;
      for (int q = 0; q < 6; ++q) {
        const double d = fwd.transforms[static_cast<size_t>(p)][static_cast<size_t>(q)] -
                         static_cast<double>(item.transforms.data()[p * 6 + q]);
        se += d * d;
      }
      trans_se += se / 6.0;
      ++trans_n;
    }
    shape_iou_sum += miou(fwd.assembled, gt_full, kThreshold);
    shape_sym_sum += symmetry_score(fwd.assembled, cfg_.resolution, kThreshold);
    if (with_set_metrics) {
      const uint64_t base = Rng::derive(cfg_.seed, Rng::hash_str("points"),
                                        static_cast<uint64_t>(indices[k]));
      gen_cd.push_back(sample_points(fwd.assembled, cfg_.resolution, 2048, base, kThreshold));
      ref_cd.push_back(sample_points(gt_full, cfg_.resolution, 2048, base + 1, kThreshold));
      gen_emd.push_back(sample_points(fwd.assembled, cfg_.resolution, 256, base + 2, kThreshold));
      ref_emd.push_back(sample_points(gt_full, cfg_.resolution, 256, base + 3, kThreshold));
    }
  }

  MetricReport report;
  report.n_parts = P;
  report.item_count = static_cast<int>(indices.size());
  report.per_part_miou.resize(static_cast<size_t>(P));
  report.part_available.resize(static_cast<size_t>(P));
  report.per_part_symmetry.resize(static_cast<size_t>(P));
  for (int p = 0; p < P; ++p) {
    report.part_available[static_cast<size_t>(p)] = iou_acc.available(p) ? 1 : 0;
    report.per_part_miou[static_cast<size_t>(p)] = iou_acc.per_part(p);
    report.per_part_symmetry[static_cast<size_t>(p)] = sym_acc.per_part(p);
  }
  report.mean_part_miou = iou_acc.micro_mean();
  report.shape_miou = shape_iou_sum / static_cast<double>(indices.size());
  report.shape_symmetry = shape_sym_sum / static_cast<double>(indices.size());
  report.transform_mse = trans_n > 0 ? trans_se / static_cast<double>(trans_n) : 0.0;
  if (with_set_metrics) {
    report.has_set_metrics = true;
    report.jsd_value = jsd(gen_cd, ref_cd);
    auto [mmd_c, cov_c] = mmd_cov(gen_cd, ref_cd, SetDistance::chamfer);
    auto [mmd_e, cov_e] = mmd_cov(gen_emd, ref_emd, SetDistance::emd);
    report.mmd_cd = mmd_c;
    report.cov_cd = cov_c;
    report.mmd_emd = mmd_e;
    report.cov_emd = cov_e;
  }
  return report;
}

template <typename T>
LabeledVoxelGrid PipelineImpl<T>::labeled_from(const ItemForward& fwd) const {
  LabeledVoxelGrid grid;
  grid.resolution = cfg_.resolution;
  grid.n_parts = cfg_.n_parts;
  grid.category = cfg_.category;
  const int64_t V = static_cast<int64_t>(fwd.assembled.size());
  grid.labels.assign(static_cast<size_t>(V), 0);
  for (int64_t i = 0; i < V; ++i) {
    float best = static_cast<float>(kThreshold);
    int label = 0;
    for (int p = 0; p < cfg_.n_parts; ++p) {
      const float v = fwd.placed_parts[static_cast<size_t>(p)][static_cast<size_t>(i)];
      if (v > best) {
        best = v;
        label = p + 1;
      }
    }
    grid.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(label);
  }
  return grid;
}

template <typename T>
void PipelineImpl<T>::export_shape_files(const ItemForward& fwd, const std::string& out_dir,
                                         const std::string& stem) const {
  fs::create_directories(out_dir);
  LabeledVoxelGrid grid = labeled_from(fwd);
  grid.item_id = stem;
  write_vxp(grid, (fs::path(out_dir) / (stem + ".vxp")).string());
  export_occupancy(fwd.assembled, cfg_.resolution, (fs::path(out_dir) / (stem + ".obj")).string(),
                   "obj-cubes");
}

template <typename T>
void PipelineImpl<T>::reconstruct(const std::string& item_id, const std::string& out_dir) {
  const Item& item = item_by_id(item_id);
  ItemForward fwd = run_item_from_shape(item.occupancy);
  export_shape_files(fwd, out_dir, item_id + "_recon");
}

template <typename T>
void PipelineImpl<T>::swap_parts(const std::string& item_a, const std::string& item_b,
                                 int part_index, const std::string& out_dir) {
  require(part_index >= 1 && part_index <= cfg_.n_parts, ErrorKind::config,
          "swap: part index out of range");
  const Item& a = item_by_id(item_a);
  const Item& b = item_by_id(item_b);
  NoGradScope<T> no_grad;
  Tensor<T> ua = model_->project_latents(encode_item(a.occupancy));
  Tensor<T> ub = model_->project_latents(encode_item(b.occupancy));
  const int64_t L = model_->config().latent_width;
  const int64_t off = static_cast<int64_t>(part_index - 1) * L;
  Tensor<T> ua_sw = ua.clone_detached();
  Tensor<T> ub_sw = ub.clone_detached();
  for (int64_t i = 0; i < L; ++i) {
    ua_sw.data()[off + i] = ub.data()[off + i];
    ub_sw.data()[off + i] = ua.data()[off + i];
  }
  export_shape_files(run_item(ua_sw), out_dir,
                     item_a + "_swap_part" + std::to_string(part_index) + "_from_" + item_b);
  export_shape_files(run_item(ub_sw), out_dir,
                     item_b + "_swap_part" + std::to_string(part_index) + "_from_" + item_a);
}

template <typename T>
void PipelineImpl<T>::mix_parts(const std::vector<std::string>& donor_ids, uint64_t seed,
                                const std::string& out_dir) {
  std::vector<std::string> donors = donor_ids;
  if (donors.empty()) {
    require(!train_idx_.empty(), ErrorKind::config, "mix: no training items to draw donors from");
    Rng rng(Rng::derive(cfg_.seed, Rng::hash_str("mix"), seed));
    for (int p = 0; p < cfg_.n_parts; ++p) {
      const int idx = train_idx_[static_cast<size_t>(rng.next_below(train_idx_.size()))];
      donors.push_back(items_[static_cast<size_t>(idx)].id);
    }
  }
  require(static_cast<int>(donors.size()) == cfg_.n_parts, ErrorKind::config,
          "mix: need exactly one donor per part (" + std::to_string(cfg_.n_parts) + ")");
  NoGradScope<T> no_grad;
  const int64_t L = model_->config().latent_width;
  Tensor<T> mixed = Tensor<T>::zeros({1, cfg_.n_parts, L});
  for (int p = 0; p < cfg_.n_parts; ++p) {
    const Item& donor = item_by_id(donors[static_cast<size_t>(p)]);
    Tensor<T> u = model_->project_latents(encode_item(donor.occupancy));
    for (int64_t i = 0; i < L; ++i) mixed.data()[p * L + i] = u.data()[p * L + i];
  }
  std::string stem = "mix";
  for (const auto& d : donors) stem += "_" + d;
  if (stem.size() > 120) stem = "mix_seed" + std::to_string(seed);
  export_shape_files(run_item(mixed), out_dir, stem);
}

template <typename T>
void PipelineImpl<T>::interpolate(const std::string& item_a, const std::string& item_b, int steps,
                                  const std::string& out_dir) {
  require(steps >= 2, ErrorKind::config, "interp: need at least 2 steps");
  const Item& a = item_by_id(item_a);
  const Item& b = item_by_id(item_b);
  NoGradScope<T> no_grad;
  Tensor<T> za = encode_item(a.occupancy);
  Tensor<T> zb = encode_item(b.occupancy);
  for (int k = 0; k < steps; ++k) {
    const T alpha = static_cast<T>(k) / static_cast<T>(steps - 1);
    Tensor<T> z = add(scale(za, T(1) - alpha), scale(zb, alpha));
    ItemForward fwd = run_item(model_->project_latents(z));
    char stem[128];
    std::snprintf(stem, sizeof(stem), "interp_%s_%s_step%02d", item_a.c_str(), item_b.c_str(), k);
    export_shape_files(fwd, out_dir, stem);
  }
}

template <typename T>
void PipelineImpl<T>::export_attention(const std::string& item_id, const std::string& out_dir) {
  require(cfg_.head != "simple_mlp", ErrorKind::unsupported,
          "attention maps are not available for the simple_mlp head");
  const Item& item = item_by_id(item_id);
  NoGradScope<T> no_grad;
  Tensor<T> z = encode_item(item.occupancy);
  Tensor<T> u = model_->project_latents(z);
  auto dec = model_->decode_parts(u, /*training=*/false);
  auto head = model_->run_head(dec, /*collect_attention=*/true);
  fs::create_directories(out_dir);

  const int P = cfg_.n_parts;
  for (size_t li = 0; li < cfg_.layers.size(); ++li) {
    const int layer = cfg_.layers[li];
    const auto& blocks = head.attn_maps[li];
    // one portable graymap per layer: blocks stacked vertically, heads horizontally
    const int cell = 16, gap = 2;
    const int W = cfg_.heads * (P * cell + gap) - gap;
    const int H = static_cast<int>(blocks.size()) * (P * cell + gap) - gap;
    std::vector<int> image(static_cast<size_t>(W) * H, 255);
    for (size_t bi = 0; bi < blocks.size(); ++bi) {
      const Tensor<T>& maps = blocks[bi];  // (1, heads, P, P)
      char name[64];
      for (int h = 0; h < cfg_.heads; ++h) {
        std::snprintf(name, sizeof(name), "layer%d_block%zu_head%d.csv", layer, bi + 1, h);
        std::ofstream csv((fs::path(out_dir) / name).string(), std::ios::trunc);
        require(csv.good(), ErrorKind::io, "cannot write attention csv");
        for (int r = 0; r < P; ++r) {
          for (int c = 0; c < P; ++c) {
            const double v = static_cast<double>(maps.at({0, h, r, c}));
            csv << (c ? "," : "") << fmt_g(v);
            const int px0 = h * (P * cell + gap) + c * cell;
            const int py0 = static_cast<int>(bi) * (P * cell + gap) + r * cell;
            for (int dy = 0; dy < cell; ++dy)
              for (int dx = 0; dx < cell; ++dx)
                image[static_cast<size_t>((py0 + dy) * W + px0 + dx)] =
                    static_cast<int>(std::lround(v * 255.0));
          }
          csv << '\n';
        }
      }
    }
    char pgm_name[64];
    std::snprintf(pgm_name, sizeof(pgm_name), "layer%d_maps.pgm", layer);
    std::ofstream pgm((fs::path(out_dir) / pgm_name).string(), std::ios::trunc);
    require(pgm.good(), ErrorKind::io, "cannot write attention image");
    pgm << "P2\n" << W << ' ' << H << "\n255\n";
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) pgm << image[static_cast<size_t>(y * W + x)] << (x + 1 == W ? "" : " ");
      pgm << '\n';
    }
  }
}

// ---- factory --------------------------------------------------------------------

std::unique_ptr<PipelineHandle> PipelineHandle::create(const TrainConfig& config) {
  if (config.dtype == "f64") return std::make_unique<PipelineImpl<double>>(config);
  return std::make_unique<PipelineImpl<float>>(config);
}

std::unique_ptr<PipelineHandle> PipelineHandle::open(const std::string& checkpoint_path,
                                                     const std::string& data_dir_override) {
  CheckpointMeta meta = read_checkpoint_meta(checkpoint_path);
  TrainConfig cfg = TrainConfig::from_text(meta.config_text, checkpoint_path + " (snapshot)");
  if (!data_dir_override.empty()) cfg.data_dir = data_dir_override;
  auto handle = PipelineHandle::create(cfg);
  handle->load_checkpoint_file(checkpoint_path);
  return handle;
}

template void save_checkpoint<float>(const ParameterStore<float>&, const CheckpointMeta&,
                                     const std::string&);
template void save_checkpoint<double>(const ParameterStore<double>&, const CheckpointMeta&,
                                      const std::string&);
template CheckpointMeta load_checkpoint<float>(ParameterStore<float>&, const std::string&);
template CheckpointMeta load_checkpoint<double>(ParameterStore<double>&, const std::string&);
template class PipelineImpl<float>;
template class PipelineImpl<double>;

}  // namespace vox
