#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxattention/error.hpp"

namespace vox {

struct StageSchedule {
  double lr = 1e-3;
  double decay_ratio = 1.0;
  int decay_every = 1;
  int epochs = 0;
};

// Flat key=value training configuration. Unknown keys are errors; the full
// key list is in config_keys(). Stage-2 schedule defaults depend on the head
// (attention heads train longer at a lower rate than the plain MLP).
struct TrainConfig {
  std::string category = "chair";
  int n_parts = 4;
  int resolution = 32;
  std::string head = "part_attention";
  std::vector<int> layers = {0, 3, 5};
  int d_a = 256;
  int heads = 8;
  int blocks = 3;
  bool ac_loss = true;
  double gamma = 0.6;
  int batch_size = 8;
  uint64_t seed = 42;
  std::string data_dir = "data";
  int eval_every = 10;
  std::string dtype = "f32";
  int head_mlp_hidden = 256;
  int simple_mlp_hidden1 = 1024;
  int simple_mlp_hidden2 = 256;

  StageSchedule stage1{0.001, 0.8, 50, 250};
  StageSchedule stage2{0.0001, 1.0, 1, 1500};  // adjusted when head=simple_mlp
  StageSchedule stage3{0.00001, 0.8, 250, 500};
  bool stage2_explicit[4] = {false, false, false, false};  // lr, ratio, every, epochs

  double s1_w_pi = 1.0, s1_w_part = 1.0;
  double s2_w_trans = 1.0, s2_w_ac = 1.0;
  double s3_w_pi = 1.0, s3_w_part = 1.0, s3_w_trans = 10.0, s3_w_ac = 1.0, s3_w_shape = 10.0;

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  // resolved full key=value text, one pair per line, fixed order
  std::string serialize() const;
  void validate() const;

  static TrainConfig from_text(const std::string& text, const std::string& origin);
  static TrainConfig from_file(const std::string& path);
  void save(const std::string& path) const;

  static const std::vector<std::string>& config_keys();
};

}  // namespace vox
