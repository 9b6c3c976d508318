#pragma once

#include <string>
#include <vector>

#include "voxattention/attention.hpp"
#include "voxattention/optim.hpp"

namespace vox {

enum class HeadMode { simple_mlp, part_attention, channelwise };

HeadMode head_mode_from_string(const std::string& s);
std::string head_mode_to_string(HeadMode mode);

template <typename T>
struct ModelConfig {
  int resolution = 32;
  std::vector<int> encoder_channels = {64, 128, 256};  // stride-2 conv stack
  int latent_width = 256;                              // final 4^3 stride-1 conv
  int n_parts = 4;

  HeadMode head = HeadMode::part_attention;
  std::vector<int> feature_layers = {0, 3, 5};
  int embed_width = 256;  // d_A
  int heads = 8;
  int blocks = 3;
  bool apply_ac_loss = true;
  int head_mlp_hidden = 256;
  int simple_mlp_hidden1 = 1024;
  int simple_mlp_hidden2 = 256;
  T leaky_slope = T(0.2);

  // feature layers: 0 latent, 1 reshaped latent, 2..k+1 deconv outputs,
  // k+2 decoded part
  int tap_count() const { return static_cast<int>(encoder_channels.size()) + 3; }
  void validate() const;

  // channel count and per-part flattened width of each feature layer
  int tap_channels(int layer) const;
  int64_t tap_width(int layer) const;      // C * H * W * D
  int64_t tap_spatial(int layer) const;    // H * W * D
};

// The part-assembly network: shared encoder, learned projection bank,
// shared per-part decoder with feature taps, a transformation head, and the
// differentiable assembler. Parameters are registered into the store under
// the prefixes enc. / bank. / dec. / head.
template <typename T>
class VoxModel {
 public:
  VoxModel(ModelConfig<T> config, ParameterStore<T>& store, Rng& init_rng);

  const ModelConfig<T>& config() const { return cfg_; }
  ParameterStore<T>& store() { return *store_; }

  // (B,1,R,R,R) -> (B,latent)
  Tensor<T> encode(const Tensor<T>& shapes, bool training);

  std::vector<Tensor<T>> bank_matrices();

  // (B,latent) -> (B,N_p,latent), part latent i = z P_i^T
  Tensor<T> project_latents(const Tensor<T>& z);

  struct Decoded {
    Tensor<T> parts;               // (B,N_p,1,R,R,R) in (0,1)
    std::vector<Tensor<T>> taps;   // folded (B*N_p, C, ...) per feature layer
    int64_t batch = 0;
  };
  // (B,N_p,latent) -> decoded parts plus every feature layer
  Decoded decode_parts(const Tensor<T>& part_latents, bool training);

  struct HeadOutput {
    Tensor<T> transforms;                             // (B,N_p,6), positive scales
    std::vector<Tensor<T>> ac_vectors;                // per selected layer (B,N_p,d_A)
    std::vector<std::vector<Tensor<T>>> attn_maps;    // [layer][block] (B,heads,N_p,N_p)
  };
  HeadOutput run_head(const Decoded& decoded, bool collect_attention = false);

  // canonical parts (B,N_p,1,R,R,R) + transforms (B,N_p,6) -> (B,1,R,R,R)
  Tensor<T> assemble(const Tensor<T>& parts, const Tensor<T>& transforms);

  struct FullForward {
    Tensor<T> latent;       // (B,latent)
    Tensor<T> part_latents; // (B,N_p,latent)
    Decoded decoded;
    HeadOutput head;
    Tensor<T> assembled;    // (B,1,R,R,R)
  };
  FullForward forward(const Tensor<T>& shapes, bool training, bool collect_attention = false);

  // same pipeline but starting from externally supplied part latents
  FullForward forward_from_part_latents(const Tensor<T>& part_latents, bool training,
                                        bool collect_attention = false);

 private:
  Tensor<T> param(const std::string& name) { return store_->get(name).value; }
  AttentionBlockParams<T> block_params(int index);
  Tensor<T> head_mlp(const Tensor<T>& per_part);  // (B,N_p,W) -> (B,N_p,6)

  ModelConfig<T> cfg_;
  ParameterStore<T>* store_;
};

}  // namespace vox
