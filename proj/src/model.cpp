#include "voxattention/model.hpp"

#include <cmath>
#include <iostream>

namespace vox {

HeadMode head_mode_from_string(const std::string& s) {
  if (s == "simple_mlp") return HeadMode::simple_mlp;
  if (s == "part_attention") return HeadMode::part_attention;
  if (s == "channelwise" || s == "channelwise_part_attention") return HeadMode::channelwise;
  fail(ErrorKind::config, "unknown head mode: " + s);
}

std::string head_mode_to_string(HeadMode mode) {
  switch (mode) {
    case HeadMode::simple_mlp: return "simple_mlp";
    case HeadMode::part_attention: return "part_attention";
    case HeadMode::channelwise: return "channelwise";
  }
  return "?";
}

template <typename T>
void ModelConfig<T>::validate() const {
  require(n_parts >= 1 && n_parts <= 255, ErrorKind::config, "model: bad part count");
  require(!encoder_channels.empty(), ErrorKind::config, "model: empty encoder stack");
  int r = 4;
  for (size_t i = 0; i < encoder_channels.size(); ++i) r *= 2;
  require(r == resolution, ErrorKind::config,
          "model: resolution " + std::to_string(resolution) + " needs " +
              std::to_string(static_cast<int>(std::log2(resolution / 4.0))) +
              " stride-2 encoder layers");
  require(!feature_layers.empty(), ErrorKind::config, "model: no feature layers selected");
  for (int l : feature_layers)
    require(l >= 0 && l < tap_count(), ErrorKind::config,
            "model: feature layer index " + std::to_string(l) + " out of range");
  require(embed_width % heads == 0, ErrorKind::config,
          "model: embed width must be divisible by the head count");
  if (head == HeadMode::channelwise) {
    for (int l : feature_layers)
      if (l == 1 || l == 2)
        std::cerr << "warning: channelwise attention on feature layer " << l << " carries "
                  << tap_channels(l) << " channels; expect a large working set\n";
  }
}

template <typename T>
int ModelConfig<T>::tap_channels(int layer) const {
  const int k = static_cast<int>(encoder_channels.size());
  if (layer == 0) return 1;
  if (layer == 1) return latent_width;
  if (layer >= 2 && layer < 2 + k) return encoder_channels[static_cast<size_t>(k - 1 - (layer - 2))];
  if (layer == k + 2) return 1;
  fail(ErrorKind::config, "bad feature layer index");
}

template <typename T>
int64_t ModelConfig<T>::tap_spatial(int layer) const {
  if (layer == 0) return latent_width;  // stored as (1, latent)
  if (layer == 1) return 1;
  const int64_t e = 4ll << (layer - 2);  // 4^3 after the first deconv, doubling each layer
  return e * e * e;
}

template <typename T>
int64_t ModelConfig<T>::tap_width(int layer) const {
  return static_cast<int64_t>(tap_channels(layer)) * tap_spatial(layer);
}

namespace {

template <typename T>
Tensor<T> fan_in_uniform(Shape shape, Rng& rng) {
  int64_t fan = 1;
  for (size_t i = 1; i < shape.size(); ++i) fan *= shape[i];
  const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(fan)));
  return Tensor<T>::uniform(std::move(shape), rng, -bound, bound);
}

}  // namespace

template <typename T>
VoxModel<T>::VoxModel(ModelConfig<T> config, ParameterStore<T>& store, Rng& init_rng)
    : cfg_(std::move(config)), store_(&store) {
  cfg_.validate();
  const int64_t L = cfg_.latent_width;
  const int k = static_cast<int>(cfg_.encoder_channels.size());

  // encoder: stride-2 convs with batchnorm between layers, then the 4^3 -> 1^3 conv
  int64_t in_c = 1;
  for (int i = 0; i < k; ++i) {
    const int64_t out_c = cfg_.encoder_channels[static_cast<size_t>(i)];
    const std::string base = "enc.conv" + std::to_string(i + 1);
    store.create(base + ".weight", fan_in_uniform<T>({out_c, in_c, 4, 4, 4}, init_rng));
    store.create(base + ".bias", Tensor<T>::zeros({out_c}));
    const std::string bn = "enc.bn" + std::to_string(i + 1);
    store.create(bn + ".gamma", Tensor<T>::full({out_c}, T(1)));
    store.create(bn + ".beta", Tensor<T>::zeros({out_c}));
    store.create(bn + ".running_mean", Tensor<T>::zeros({out_c}), /*buffer=*/true);
    store.create(bn + ".running_var", Tensor<T>::full({out_c}, T(1)), /*buffer=*/true);
    in_c = out_c;
  }
  store.create("enc.conv" + std::to_string(k + 1) + ".weight",
               fan_in_uniform<T>({L, in_c, 4, 4, 4}, init_rng));
  store.create("enc.conv" + std::to_string(k + 1) + ".bias", Tensor<T>::zeros({L}));

  // projection bank: block partition of the identity plus small noise
  {
    const int64_t chunk = L / cfg_.n_parts;
    for (int p = 0; p < cfg_.n_parts; ++p) {
      const int64_t lo = chunk * p;
      const int64_t hi = p == cfg_.n_parts - 1 ? L : chunk * (p + 1);
      Tensor<T> m = Tensor<T>::normal({L, L}, init_rng, T(0), T(0.01));
      for (int64_t i = lo; i < hi; ++i) m.at({i, i}) += T(1);
      store.create("bank.p" + std::to_string(p + 1), std::move(m));
    }
  }

  // decoder mirrors the encoder
  int64_t dec_in = L;
  for (int i = 0; i < k + 1; ++i) {
    const int64_t out_c =
        i == k ? 1 : cfg_.encoder_channels[static_cast<size_t>(k - 1 - i)];
    const std::string base = "dec.deconv" + std::to_string(i + 1);
    store.create(base + ".weight", fan_in_uniform<T>({dec_in, out_c, 4, 4, 4}, init_rng));
    store.create(base + ".bias", Tensor<T>::zeros({out_c}));
    if (i != k) {
      const std::string bn = "dec.bn" + std::to_string(i + 1);
      store.create(bn + ".gamma", Tensor<T>::full({out_c}, T(1)));
      store.create(bn + ".beta", Tensor<T>::zeros({out_c}));
      store.create(bn + ".running_mean", Tensor<T>::zeros({out_c}), /*buffer=*/true);
      store.create(bn + ".running_var", Tensor<T>::full({out_c}, T(1)), /*buffer=*/true);
    }
    dec_in = out_c;
  }

  // transformation head
  const int64_t dA = cfg_.embed_width;
  if (cfg_.head == HeadMode::simple_mlp) {
    int64_t width = 0;
    for (int l : cfg_.feature_layers) width += cfg_.tap_width(l);
    width *= cfg_.n_parts;
    store.create("head.mlp1.weight", fan_in_uniform<T>({cfg_.simple_mlp_hidden1, width}, init_rng));
    store.create("head.mlp1.bias", Tensor<T>::zeros({cfg_.simple_mlp_hidden1}));
    store.create("head.mlp2.weight",
                 fan_in_uniform<T>({cfg_.simple_mlp_hidden2, cfg_.simple_mlp_hidden1}, init_rng));
    store.create("head.mlp2.bias", Tensor<T>::zeros({cfg_.simple_mlp_hidden2}));
    store.create("head.mlp3.weight",
                 fan_in_uniform<T>({static_cast<int64_t>(cfg_.n_parts) * 6,
                                    cfg_.simple_mlp_hidden2},
                                   init_rng));
    store.create("head.mlp3.bias", Tensor<T>::zeros({static_cast<int64_t>(cfg_.n_parts) * 6}));
  } else {
    const bool channelwise = cfg_.head == HeadMode::channelwise;
    for (int l : cfg_.feature_layers) {
      const int64_t width = channelwise ? cfg_.tap_spatial(l) : cfg_.tap_width(l);
      const std::string base = "head.embed.l" + std::to_string(l);
      store.create(base + ".weight", fan_in_uniform<T>({dA, width}, init_rng));
      store.create(base + ".bias", Tensor<T>::zeros({dA}));
    }
    for (int b = 0; b < cfg_.blocks; ++b) {
      const std::string base = "head.block" + std::to_string(b + 1);
      for (const char* proj : {"wq", "wk", "wv", "wo"}) {
        store.create(base + "." + proj + ".weight", fan_in_uniform<T>({dA, dA}, init_rng));
        store.create(base + "." + proj + ".bias", Tensor<T>::zeros({dA}));
      }
      store.create(base + ".ln1.gamma", Tensor<T>::full({dA}, T(1)));
      store.create(base + ".ln1.beta", Tensor<T>::zeros({dA}));
      store.create(base + ".ln2.gamma", Tensor<T>::full({dA}, T(1)));
      store.create(base + ".ln2.beta", Tensor<T>::zeros({dA}));
      store.create(base + ".ff1.weight", fan_in_uniform<T>({4 * dA, dA}, init_rng));
      store.create(base + ".ff1.bias", Tensor<T>::zeros({4 * dA}));
      store.create(base + ".ff2.weight", fan_in_uniform<T>({dA, 4 * dA}, init_rng));
      store.create(base + ".ff2.bias", Tensor<T>::zeros({dA}));
    }
    int64_t concat_width = 0;
    for (int l : cfg_.feature_layers)
      concat_width += channelwise ? static_cast<int64_t>(cfg_.tap_channels(l)) * dA : dA;
    store.create("head.mlp1.weight",
                 fan_in_uniform<T>({cfg_.head_mlp_hidden, concat_width}, init_rng));
    store.create("head.mlp1.bias", Tensor<T>::zeros({cfg_.head_mlp_hidden}));
    store.create("head.mlp2.weight", fan_in_uniform<T>({6, cfg_.head_mlp_hidden}, init_rng));
    store.create("head.mlp2.bias", Tensor<T>::zeros({6}));
  }
}

template <typename T>
Tensor<T> VoxModel<T>::encode(const Tensor<T>& shapes, bool training) {
  require(shapes.ndim() == 5 && shapes.dim(1) == 1 && shapes.dim(2) == cfg_.resolution &&
              shapes.dim(3) == cfg_.resolution && shapes.dim(4) == cfg_.resolution,
          ErrorKind::dimension,
          "encode: expected (B,1," + std::to_string(cfg_.resolution) + "^3) input");
  const int k = static_cast<int>(cfg_.encoder_channels.size());
  Tensor<T> x = shapes;
  for (int i = 0; i < k; ++i) {
    const std::string base = "enc.conv" + std::to_string(i + 1);
    x = conv3d(x, param(base + ".weight"), param(base + ".bias"), 2, 1);
    const std::string bn = "enc.bn" + std::to_string(i + 1);
    auto& rm = store_->get(bn + ".running_mean").value;
    auto& rv = store_->get(bn + ".running_var").value;
    x = batchnorm3d(x, param(bn + ".gamma"), param(bn + ".beta"), rm, rv, training);
    x = leaky_relu(x, cfg_.leaky_slope);
  }
  const std::string last = "enc.conv" + std::to_string(k + 1);
  x = conv3d(x, param(last + ".weight"), param(last + ".bias"), 1, 0);
  x = leaky_relu(x, cfg_.leaky_slope);
  return reshape(x, {x.dim(0), cfg_.latent_width});
}

template <typename T>
std::vector<Tensor<T>> VoxModel<T>::bank_matrices() {
  std::vector<Tensor<T>> bank;
  for (int p = 0; p < cfg_.n_parts; ++p) bank.push_back(param("bank.p" + std::to_string(p + 1)));
  return bank;
}

template <typename T>
Tensor<T> VoxModel<T>::project_latents(const Tensor<T>& z) {
  require(z.ndim() == 2 && z.dim(1) == cfg_.latent_width, ErrorKind::dimension,
          "project_latents: expected (B,latent)");
  const int64_t B = z.dim(0);
  std::vector<Tensor<T>> parts;
  Tensor<T> no_bias = Tensor<T>::zeros({cfg_.latent_width});
  for (int p = 0; p < cfg_.n_parts; ++p) {
    Tensor<T> u = dense(z, param("bank.p" + std::to_string(p + 1)), no_bias);  // z P^T
    parts.push_back(reshape(u, {B, 1, cfg_.latent_width}));
  }
  return concat(parts, 1);
}

template <typename T>
typename VoxModel<T>::Decoded VoxModel<T>::decode_parts(const Tensor<T>& part_latents,
                                                        bool training) {
  require(part_latents.ndim() == 3 && part_latents.dim(1) == cfg_.n_parts &&
              part_latents.dim(2) == cfg_.latent_width,
          ErrorKind::dimension, "decode_parts: expected (B,N_p,latent)");
  const int64_t B = part_latents.dim(0);
  const int64_t n = B * cfg_.n_parts;
  const int64_t L = cfg_.latent_width;
  const int k = static_cast<int>(cfg_.encoder_channels.size());

  Decoded out;
  out.batch = B;
  out.taps.resize(static_cast<size_t>(cfg_.tap_count()));

  Tensor<T> x = reshape(part_latents, {n, L});
  out.taps[0] = reshape(x, {n, 1, L});
  x = reshape(x, {n, L, 1, 1, 1});
  out.taps[1] = x;
  for (int i = 0; i < k + 1; ++i) {
    const std::string base = "dec.deconv" + std::to_string(i + 1);
    const int stride = i == 0 ? 1 : 2;
    const int pad = i == 0 ? 0 : 1;
    x = deconv3d(x, param(base + ".weight"), param(base + ".bias"), stride, pad);
    if (i != k) {
      const std::string bn = "dec.bn" + std::to_string(i + 1);
      auto& rm = store_->get(bn + ".running_mean").value;
      auto& rv = store_->get(bn + ".running_var").value;
      x = batchnorm3d(x, param(bn + ".gamma"), param(bn + ".beta"), rm, rv, training);
      x = leaky_relu(x, cfg_.leaky_slope);
    } else {
      x = sigmoid(x);
    }
    out.taps[static_cast<size_t>(i + 2)] = x;
  }
  const int64_t R = cfg_.resolution;
  out.parts = reshape(x, {B, cfg_.n_parts, 1, R, R, R});
  return out;
}

template <typename T>
AttentionBlockParams<T> VoxModel<T>::block_params(int index) {
  const std::string base = "head.block" + std::to_string(index + 1);
  AttentionBlockParams<T> p;
  p.wq = param(base + ".wq.weight");
  p.bq = param(base + ".wq.bias");
  p.wk = param(base + ".wk.weight");
  p.bk = param(base + ".wk.bias");
  p.wv = param(base + ".wv.weight");
  p.bv = param(base + ".wv.bias");
  p.wo = param(base + ".wo.weight");
  p.bo = param(base + ".wo.bias");
  p.ln1_gamma = param(base + ".ln1.gamma");
  p.ln1_beta = param(base + ".ln1.beta");
  p.ln2_gamma = param(base + ".ln2.gamma");
  p.ln2_beta = param(base + ".ln2.beta");
  p.ff1_weight = param(base + ".ff1.weight");
  p.ff1_bias = param(base + ".ff1.bias");
  p.ff2_weight = param(base + ".ff2.weight");
  p.ff2_bias = param(base + ".ff2.bias");
  return p;
}

template <typename T>
Tensor<T> VoxModel<T>::head_mlp(const Tensor<T>& per_part) {
  Tensor<T> h = dense(per_part, param("head.mlp1.weight"), param("head.mlp1.bias"));
  h = leaky_relu(h, cfg_.leaky_slope);
  h = dense(h, param("head.mlp2.weight"), param("head.mlp2.bias"));
  return transform_activation(h);
}

template <typename T>
typename VoxModel<T>::HeadOutput VoxModel<T>::run_head(const Decoded& decoded,
                                                       bool collect_attention) {
  const int64_t B = decoded.batch;
  const int64_t P = cfg_.n_parts;
  const int64_t dA = cfg_.embed_width;
  HeadOutput out;

  if (cfg_.head == HeadMode::simple_mlp) {
    std::vector<Tensor<T>> flat;
    for (int l : cfg_.feature_layers) {
      const Tensor<T>& tap = decoded.taps[static_cast<size_t>(l)];
      flat.push_back(reshape(tap, {B, P * cfg_.tap_width(l)}));
    }
    Tensor<T> x = flat.size() == 1 ? flat[0] : concat(flat, 1);
    Tensor<T> h = dense(x, param("head.mlp1.weight"), param("head.mlp1.bias"));
    h = leaky_relu(h, cfg_.leaky_slope);
    h = dense(h, param("head.mlp2.weight"), param("head.mlp2.bias"));
    h = leaky_relu(h, cfg_.leaky_slope);
    h = dense(h, param("head.mlp3.weight"), param("head.mlp3.bias"));
    out.transforms = transform_activation(reshape(h, {B, P, 6}));
    return out;
  }

  const bool channelwise = cfg_.head == HeadMode::channelwise;
  std::vector<Tensor<T>> per_layer_concat;
  for (int l : cfg_.feature_layers) {
    const Tensor<T>& tap = decoded.taps[static_cast<size_t>(l)];
    const int64_t C = cfg_.tap_channels(l);
    const std::string embed = "head.embed.l" + std::to_string(l);
    Tensor<T> seq;
    if (channelwise) {
      // (B*P,C,s) -> (B*C, P, s), shared embedding and blocks per channel
      Tensor<T> t = reshape(tap, {B, P, C, cfg_.tap_spatial(l)});
      t = transpose(t, 1, 2);
      seq = reshape(t, {B * C, P, cfg_.tap_spatial(l)});
    } else {
      seq = reshape(tap, {B, P, cfg_.tap_width(l)});
    }
    Tensor<T> x = dense(seq, param(embed + ".weight"), param(embed + ".bias"));
    std::vector<Tensor<T>> layer_maps;
    for (int b = 0; b < cfg_.blocks; ++b) {
      Tensor<T> maps;
      x = attention_block(x, block_params(b), cfg_.heads, collect_attention ? &maps : nullptr,
                          cfg_.leaky_slope);
      if (collect_attention) {
        if (channelwise && C > 1) {
          // average the per-channel maps for export
          maps = mean_axis(reshape(maps, {B, C, static_cast<int64_t>(cfg_.heads), P, P}), 1);
        }
        layer_maps.push_back(maps);
      }
    }
    if (collect_attention) out.attn_maps.push_back(std::move(layer_maps));

    if (channelwise) {
      Tensor<T> y = reshape(x, {B, C, P, dA});
      out.ac_vectors.push_back(mean_axis(y, 1));  // channel mean, (B,P,dA)
      y = transpose(y, 1, 2);                     // (B,P,C,dA)
      per_layer_concat.push_back(reshape(y, {B, P, C * dA}));
    } else {
      out.ac_vectors.push_back(x);
      per_layer_concat.push_back(x);
    }
  }
  Tensor<T> joined =
      per_layer_concat.size() == 1 ? per_layer_concat[0] : concat(per_layer_concat, 2);
  out.transforms = head_mlp(joined);
  return out;
}

template <typename T>
Tensor<T> VoxModel<T>::assemble(const Tensor<T>& parts, const Tensor<T>& transforms) {
  require(parts.ndim() == 6 && parts.dim(2) == 1, ErrorKind::dimension,
          "assemble: expected (B,N_p,1,R,R,R) parts");
  require(transforms.ndim() == 3 && transforms.dim(2) == 6 && transforms.dim(0) == parts.dim(0) &&
              transforms.dim(1) == parts.dim(1),
          ErrorKind::dimension, "assemble: expected matching (B,N_p,6) transforms");
  const int64_t B = parts.dim(0), P = parts.dim(1), R = parts.dim(3);
  Tensor<T> folded = reshape(parts, {B * P, 1, R, R, R});
  Tensor<T> tfolded = reshape(transforms, {B * P, 6});
  std::vector<Tensor<T>> items;
  for (int64_t b = 0; b < B; ++b) {
    std::vector<Tensor<T>> placed;
    for (int64_t p = 0; p < P; ++p) {
      Tensor<T> occ = reshape(slice(folded, 0, b * P + p, 1), {1, R, R, R});
      Tensor<T> prm = reshape(slice(tfolded, 0, b * P + p, 1), {6});
      placed.push_back(grid_sample_transform(occ, prm));
    }
    Tensor<T> stack = placed.size() == 1 ? placed[0] : concat(placed, 0);  // (P,R,R,R)
    items.push_back(reshape(voxel_max_union(stack), {1, 1, R, R, R}));
  }
  return items.size() == 1 ? items[0] : concat(items, 0);
}

template <typename T>
typename VoxModel<T>::FullForward VoxModel<T>::forward(const Tensor<T>& shapes, bool training,
                                                       bool collect_attention) {
  FullForward f;
  f.latent = encode(shapes, training);
  f.part_latents = project_latents(f.latent);
  f.decoded = decode_parts(f.part_latents, training);
  f.head = run_head(f.decoded, collect_attention);
  f.assembled = assemble(f.decoded.parts, f.head.transforms);
  return f;
}

template <typename T>
typename VoxModel<T>::FullForward VoxModel<T>::forward_from_part_latents(
    const Tensor<T>& part_latents, bool training, bool collect_attention) {
  FullForward f;
  f.part_latents = part_latents;
  f.decoded = decode_parts(part_latents, training);
  f.head = run_head(f.decoded, collect_attention);
  f.assembled = assemble(f.decoded.parts, f.head.transforms);
  return f;
}

template struct ModelConfig<float>;
template struct ModelConfig<double>;
template class VoxModel<float>;
template class VoxModel<double>;

}  // namespace vox
