#include "voxattention/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace vox {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const int r = std::stoi(v, &pos);
    require(pos == v.size(), ErrorKind::config, "config: bad integer for " + key + ": " + v);
    return r;
  } catch (const Error&) {
    throw;
  } catch (...) {
    fail(ErrorKind::config, "config: bad integer for " + key + ": " + v);
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double r = std::stod(v, &pos);
    require(pos == v.size(), ErrorKind::config, "config: bad number for " + key + ": " + v);
    return r;
  } catch (const Error&) {
    throw;
  } catch (...) {
    fail(ErrorKind::config, "config: bad number for " + key + ": " + v);
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const uint64_t r = std::stoull(v, &pos);
    require(pos == v.size(), ErrorKind::config, "config: bad integer for " + key + ": " + v);
    return r;
  } catch (const Error&) {
    throw;
  } catch (...) {
    fail(ErrorKind::config, "config: bad integer for " + key + ": " + v);
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorKind::config, "config: bad boolean for " + key + ": " + v);
}

std::vector<int> parse_layers(const std::string& v) {
  std::vector<int> out;
  std::istringstream is(v);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(parse_int("layers", tok));
  }
  require(!out.empty(), ErrorKind::config, "config: layers must name at least one feature layer");
  return out;
}

std::string layers_to_string(const std::vector<int>& layers) {
  std::ostringstream os;
  for (size_t i = 0; i < layers.size(); ++i) {
    if (i) os << ',';
    os << layers[i];
  }
  return os.str();
}

std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct KeyEntry {
  std::string name;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

const std::vector<KeyEntry>& key_table() {
  static const std::vector<KeyEntry> table = [] {
    std::vector<KeyEntry> t;
    auto add = [&t](const std::string& name, std::function<void(TrainConfig&, const std::string&)> set,
                    std::function<std::string(const TrainConfig&)> get) {
      t.push_back({name, std::move(set), std::move(get)});
    };
    add("category", [](TrainConfig& c, const std::string& v) { c.category = v; },
        [](const TrainConfig& c) { return c.category; });
    add("n_parts", [](TrainConfig& c, const std::string& v) { c.n_parts = parse_int("n_parts", v); },
        [](const TrainConfig& c) { return std::to_string(c.n_parts); });
    add("resolution",
        [](TrainConfig& c, const std::string& v) { c.resolution = parse_int("resolution", v); },
        [](const TrainConfig& c) { return std::to_string(c.resolution); });
    add("head", [](TrainConfig& c, const std::string& v) { c.head = v; },
        [](const TrainConfig& c) { return c.head; });
    add("layers", [](TrainConfig& c, const std::string& v) { c.layers = parse_layers(v); },
        [](const TrainConfig& c) { return layers_to_string(c.layers); });
    add("d_a", [](TrainConfig& c, const std::string& v) { c.d_a = parse_int("d_a", v); },
        [](const TrainConfig& c) { return std::to_string(c.d_a); });
    add("heads", [](TrainConfig& c, const std::string& v) { c.heads = parse_int("heads", v); },
        [](const TrainConfig& c) { return std::to_string(c.heads); });
    add("blocks", [](TrainConfig& c, const std::string& v) { c.blocks = parse_int("blocks", v); },
        [](const TrainConfig& c) { return std::to_string(c.blocks); });
    add("ac_loss", [](TrainConfig& c, const std::string& v) { c.ac_loss = parse_bool("ac_loss", v); },
        [](const TrainConfig& c) { return std::string(c.ac_loss ? "true" : "false"); });
    add("gamma", [](TrainConfig& c, const std::string& v) { c.gamma = parse_double("gamma", v); },
        [](const TrainConfig& c) { return fmt_double(c.gamma); });
    add("batch_size",
        [](TrainConfig& c, const std::string& v) { c.batch_size = parse_int("batch_size", v); },
        [](const TrainConfig& c) { return std::to_string(c.batch_size); });
    add("seed", [](TrainConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); },
        [](const TrainConfig& c) { return std::to_string(c.seed); });
    add("data_dir", [](TrainConfig& c, const std::string& v) { c.data_dir = v; },
        [](const TrainConfig& c) { return c.data_dir; });
    add("eval_every",
        [](TrainConfig& c, const std::string& v) { c.eval_every = parse_int("eval_every", v); },
        [](const TrainConfig& c) { return std::to_string(c.eval_every); });
    add("dtype", [](TrainConfig& c, const std::string& v) { c.dtype = v; },
        [](const TrainConfig& c) { return c.dtype; });
    add("head_mlp_hidden",
        [](TrainConfig& c, const std::string& v) {
          c.head_mlp_hidden = parse_int("head_mlp_hidden", v);
        },
        [](const TrainConfig& c) { return std::to_string(c.head_mlp_hidden); });
    add("simple_mlp_hidden1",
        [](TrainConfig& c, const std::string& v) {
          c.simple_mlp_hidden1 = parse_int("simple_mlp_hidden1", v);
        },
        [](const TrainConfig& c) { return std::to_string(c.simple_mlp_hidden1); });
    add("simple_mlp_hidden2",
        [](TrainConfig& c, const std::string& v) {
          c.simple_mlp_hidden2 = parse_int("simple_mlp_hidden2", v);
        },
        [](const TrainConfig& c) { return std::to_string(c.simple_mlp_hidden2); });

    auto add_stage = [&add](const std::string& p, StageSchedule TrainConfig::*stage, int idx) {
      add(p + ".lr",
          [stage, idx, p](TrainConfig& c, const std::string& v) {
            (c.*stage).lr = parse_double(p + ".lr", v);
            if (idx == 2) c.stage2_explicit[0] = true;
          },
          [stage](const TrainConfig& c) { return fmt_double((c.*stage).lr); });
      add(p + ".decay_ratio",
          [stage, idx, p](TrainConfig& c, const std::string& v) {
            (c.*stage).decay_ratio = parse_double(p + ".decay_ratio", v);
            if (idx == 2) c.stage2_explicit[1] = true;
          },
          [stage](const TrainConfig& c) { return fmt_double((c.*stage).decay_ratio); });
      add(p + ".decay_every",
          [stage, idx, p](TrainConfig& c, const std::string& v) {
            (c.*stage).decay_every = parse_int(p + ".decay_every", v);
            if (idx == 2) c.stage2_explicit[2] = true;
          },
          [stage](const TrainConfig& c) { return std::to_string((c.*stage).decay_every); });
      add(p + ".epochs",
          [stage, idx, p](TrainConfig& c, const std::string& v) {
            (c.*stage).epochs = parse_int(p + ".epochs", v);
            if (idx == 2) c.stage2_explicit[3] = true;
          },
          [stage](const TrainConfig& c) { return std::to_string((c.*stage).epochs); });
    };
    add_stage("stage1", &TrainConfig::stage1, 1);
    add_stage("stage2", &TrainConfig::stage2, 2);
    add_stage("stage3", &TrainConfig::stage3, 3);

    auto add_weight = [&add](const std::string& name, double TrainConfig::*field) {
      add(name,
          [field, name](TrainConfig& c, const std::string& v) { c.*field = parse_double(name, v); },
          [field](const TrainConfig& c) { return fmt_double(c.*field); });
    };
    add_weight("stage1.w_pi", &TrainConfig::s1_w_pi);
    add_weight("stage1.w_part", &TrainConfig::s1_w_part);
    add_weight("stage2.w_trans", &TrainConfig::s2_w_trans);
    add_weight("stage2.w_ac", &TrainConfig::s2_w_ac);
    add_weight("stage3.w_pi", &TrainConfig::s3_w_pi);
    add_weight("stage3.w_part", &TrainConfig::s3_w_part);
    add_weight("stage3.w_trans", &TrainConfig::s3_w_trans);
    add_weight("stage3.w_ac", &TrainConfig::s3_w_ac);
    add_weight("stage3.w_shape", &TrainConfig::s3_w_shape);
    return t;
  }();
  return table;
}

}  // namespace

const std::vector<std::string>& TrainConfig::config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& e : key_table()) k.push_back(e.name);
    return k;
  }();
  return keys;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  for (const auto& e : key_table()) {
    if (key == e.name) {
      e.set(*this, value);
      return;
    }
  }
  fail(ErrorKind::config, "config: unknown key: " + key);
}

std::string TrainConfig::get(const std::string& key) const {
  for (const auto& e : key_table()) {
    if (key == e.name) return e.get(*this);
  }
  fail(ErrorKind::config, "config: unknown key: " + key);
}

std::string TrainConfig::serialize() const {
  std::ostringstream os;
  for (const auto& e : key_table()) os << e.name << '=' << e.get(*this) << '\n';
  return os.str();
}

void TrainConfig::validate() const {
  require(category == "chair" || category == "table", ErrorKind::config,
          "config: category must be chair or table");
  require(n_parts >= 1, ErrorKind::config, "config: n_parts must be positive");
  require(resolution >= 16, ErrorKind::config, "config: resolution must be at least 16");
  require(head == "simple_mlp" || head == "part_attention" || head == "channelwise",
          ErrorKind::config, "config: head must be simple_mlp, part_attention or channelwise");
  require(dtype == "f32" || dtype == "f64", ErrorKind::config, "config: dtype must be f32 or f64");
  require(batch_size >= 1, ErrorKind::config, "config: batch_size must be positive");
  require(eval_every >= 1, ErrorKind::config, "config: eval_every must be positive");
  require(gamma > 0.0 && gamma < 1.0, ErrorKind::config, "config: gamma must lie in (0,1)");
  for (const StageSchedule* s : {&stage1, &stage2, &stage3}) {
    require(s->lr > 0.0, ErrorKind::config, "config: learning rate must be positive");
    require(s->decay_ratio > 0.0 && s->decay_ratio <= 1.0, ErrorKind::config,
            "config: decay ratio must lie in (0,1]");
    require(s->decay_every >= 1, ErrorKind::config, "config: decay_every must be positive");
    require(s->epochs >= 0, ErrorKind::config, "config: epochs must be non-negative");
  }
}

TrainConfig TrainConfig::from_text(const std::string& text, const std::string& origin) {
  TrainConfig cfg;
  // two passes so the head can pick the stage-2 defaults before explicit
  // stage2.* keys override them
  std::vector<std::pair<std::string, std::string>> pairs;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    require(eq != std::string::npos, ErrorKind::config,
            origin + ":" + std::to_string(line_no) + ": expected key=value");
    pairs.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  for (const auto& [k, v] : pairs)
    if (k == "head") cfg.head = v;
  if (cfg.head == "simple_mlp") cfg.stage2 = StageSchedule{0.001, 0.8, 100, 500};
  for (const auto& [k, v] : pairs) cfg.set(k, v);
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::io, "cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str(), path);
}

void TrainConfig::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), ErrorKind::io, "cannot write " + path);
  out << serialize();
  require(out.good(), ErrorKind::io, "short write to " + path);
}

}  // namespace vox
