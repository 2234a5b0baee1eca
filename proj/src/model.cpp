#include "cvf/model.hpp"

#include <cmath>
#include <string>

#include "cvf/errors.hpp"
#include "cvf/ops.hpp"

namespace cvf::model {

namespace {

std::string dims(std::size_t h, std::size_t w) { return std::to_string(h) + "x" + std::to_string(w); }

}  // namespace

void validate(const ConviformerConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model config: " + what);
  };
  require(c.n_heads > 0, "n_heads must be positive");
  require(c.d_emb == 64 * c.n_heads,
          "d_emb must equal 64 * n_heads (" + std::to_string(64 * c.n_heads) + "), got " + std::to_string(c.d_emb));
  require(c.patch_size > 0 && c.base_res > 0, "patch_size and base_res must be positive");
  require(c.base_res % c.patch_size == 0, "base_res must be divisible by patch_size");
  require(c.conv_channels > 0 && c.ffn_expansion > 0 && c.head_hidden > 0, "widths must be positive");
  require(c.n_taxa > 0 && c.n_genus > 0 && c.n_family > 0, "class counts must be positive");
  require(c.emb_tax > 0 && c.emb_gen > 0 && c.emb_fam > 0, "embedding dims must be positive");
  require(c.dropout >= 0.0 && c.dropout < 1.0, "dropout must lie in [0, 1)");
  require(c.input_res >= c.patch_size, "input_res must cover at least one patch");
}

ConviformerConfig config_from(const KeyValueConfig& kv, const std::string& p) {
  ConviformerConfig c;
  c.n_heads = kv.get_size(p + "n_heads", c.n_heads);
  c.d_emb = kv.get_size(p + "d_emb", 64 * c.n_heads);
  c.n_gpsa_layers = kv.get_size(p + "n_gpsa_layers", c.n_gpsa_layers);
  c.n_sa_layers = kv.get_size(p + "n_sa_layers", c.n_sa_layers);
  c.patch_size = kv.get_size(p + "patch_size", c.patch_size);
  c.base_res = kv.get_size(p + "base_res", c.base_res);
  c.conv_channels = kv.get_size(p + "conv_channels", c.conv_channels);
  c.ffn_expansion = kv.get_size(p + "ffn_expansion", c.ffn_expansion);
  c.n_taxa = kv.get_size(p + "n_taxa", c.n_taxa);
  c.n_genus = kv.get_size(p + "n_genus", c.n_genus);
  c.n_family = kv.get_size(p + "n_family", c.n_family);
  c.emb_tax = kv.get_size(p + "emb_tax", c.emb_tax);
  c.emb_gen = kv.get_size(p + "emb_gen", c.emb_gen);
  c.emb_fam = kv.get_size(p + "emb_fam", c.emb_fam);
  c.head_hidden = kv.get_size(p + "head_hidden", c.head_hidden);
  c.input_res = kv.get_size(p + "input_res", c.input_res);
  c.use_frontend = kv.get_bool(p + "use_frontend", c.use_frontend);
  c.dropout = kv.get_double(p + "dropout", c.dropout);
  c.locality_strength = kv.get_double(p + "locality_strength", c.locality_strength);
  c.gate_init = kv.get_double(p + "gate_init", c.gate_init);
  validate(c);
  return c;
}

void config_to(const ConviformerConfig& c, KeyValueConfig& kv, const std::string& p) {
  auto put = [&](const char* k, auto v) { kv.set(p + k, std::to_string(v)); };
  put("n_heads", c.n_heads);
  put("d_emb", c.d_emb);
  put("n_gpsa_layers", c.n_gpsa_layers);
  put("n_sa_layers", c.n_sa_layers);
  put("patch_size", c.patch_size);
  put("base_res", c.base_res);
  put("conv_channels", c.conv_channels);
  put("ffn_expansion", c.ffn_expansion);
  put("n_taxa", c.n_taxa);
  put("n_genus", c.n_genus);
  put("n_family", c.n_family);
  put("emb_tax", c.emb_tax);
  put("emb_gen", c.emb_gen);
  put("emb_fam", c.emb_fam);
  put("head_hidden", c.head_hidden);
  put("input_res", c.input_res);
  kv.set(p + "use_frontend", c.use_frontend ? "true" : "false");
  put("dropout", c.dropout);
  put("locality_strength", c.locality_strength);
  put("gate_init", c.gate_init);
}

std::size_t downsample_factor(std::size_t h, std::size_t base_res) {
  if (h == 0 || base_res == 0) throw DimensionError("downsample_factor needs h >= 1 and base_res >= 1");
  return std::max<std::size_t>(1, h / base_res);
}

PatchGrid patch_grid(std::size_t h, std::size_t w, const ConviformerConfig& cfg) {
  PatchGrid g;
  g.d_s = cfg.use_frontend ? downsample_factor(h, cfg.base_res) : 1;
  g.h_prime = h / g.d_s;
  g.w_prime = w / g.d_s;
  if (g.h_prime < cfg.patch_size || g.w_prime < cfg.patch_size) {
    throw DimensionError("input " + dims(h, w) + " reduces to " + dims(g.h_prime, g.w_prime) +
                         ", smaller than one " + std::to_string(cfg.patch_size) + "px patch");
  }
  g.grid_h = g.h_prime / cfg.patch_size;
  g.grid_w = g.w_prime / cfg.patch_size;
  g.t_p = g.grid_h * g.grid_w;
  return g;
}

std::size_t patch_count(std::size_t h, std::size_t w, const ConviformerConfig& cfg) {
  return patch_grid(h, w, cfg).t_p;
}

std::vector<std::size_t> frontend_strides(std::size_t d_s) {
  std::vector<std::size_t> out;
  for (std::size_t f = 2; f * f <= d_s; ++f) {
    while (d_s % f == 0) {
      out.push_back(f);
      d_s /= f;
    }
  }
  if (d_s > 1) out.push_back(d_s);
  return out;
}

template <typename T>
Tensor<T> relative_offsets(std::size_t grid_h, std::size_t grid_w) {
  const std::size_t n = grid_h * grid_w;
  std::vector<T> r(n * n * 3);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto dx = static_cast<T>(static_cast<long>(j % grid_w) - static_cast<long>(i % grid_w));
      const auto dy = static_cast<T>(static_cast<long>(j / grid_w) - static_cast<long>(i / grid_w));
      T* row = &r[(i * n + j) * 3];
      row[0] = dx;
      row[1] = dy;
      row[2] = dx * dx + dy * dy;
    }
  }
  return Tensor<T>({n * n, 3}, std::move(r));
}

std::vector<std::pair<int, int>> head_offsets(std::size_t n_heads) {
  std::size_t k = 1;
  while (k * k < n_heads) ++k;
  const int centre = static_cast<int>(k / 2);
  std::vector<std::pair<int, int>> out;
  for (std::size_t h = 0; h < n_heads; ++h) {
    out.emplace_back(static_cast<int>(h % k) - centre, static_cast<int>(h / k) - centre);
  }
  return out;
}

template <typename T>
Tensor<T> Conviformer<T>::add_param(const std::string& name, Shape shape, std::vector<T> data) {
  if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
  auto t = Tensor<T>::parameter(std::move(shape), std::move(data));
  index_[name] = params_.size();
  params_.push_back({name, t});
  return t;
}

template <typename T>
Tensor<T> Conviformer<T>::add_normal(const std::string& name, Shape shape, double stddev, CounterRng& rng) {
  std::vector<T> data(cvf::numel(shape));
  for (auto& v : data) v = static_cast<T>(stddev * rng.truncated_normal(1.0));
  return add_param(name, std::move(shape), std::move(data));
}

template <typename T>
Tensor<T> Conviformer<T>::add_const(const std::string& name, Shape shape, T value) {
  const auto n = cvf::numel(shape);
  return add_param(name, std::move(shape), std::vector<T>(n, value));
}

template <typename T>
TransformerLayer<T> Conviformer<T>::make_layer(const std::string& p, bool gated, CounterRng& rng) {
  const std::size_t d = cfg_.d_emb;
  const std::size_t hidden = d * cfg_.ffn_expansion;
  constexpr double kLinearStd = 0.02;
  TransformerLayer<T> l;
  l.norm1_gain = add_const(p + "norm1.weight", {d}, T(1));
  l.norm1_bias = add_const(p + "norm1.bias", {d}, T(0));
  l.attn.wq = add_normal(p + "wq", {d, d}, kLinearStd, rng);
  l.attn.wk = add_normal(p + "wk", {d, d}, kLinearStd, rng);
  l.attn.wv = add_normal(p + "wv", {d, d}, kLinearStd, rng);
  l.attn.wo = add_normal(p + "wo", {d, d}, kLinearStd, rng);
  l.attn.bo = add_const(p + "bo", {d}, T(0));
  if (gated) {
    std::vector<T> vpos;
    const T alpha = static_cast<T>(cfg_.locality_strength);
    for (const auto& [dx, dy] : head_offsets(cfg_.n_heads)) {
      vpos.push_back(alpha * T(2) * static_cast<T>(dx));
      vpos.push_back(alpha * T(2) * static_cast<T>(dy));
      vpos.push_back(-alpha);
    }
    l.v_pos = add_param(p + "v_pos", {cfg_.n_heads, 3}, std::move(vpos));
    l.gate = add_const(p + "gate", {cfg_.n_heads}, static_cast<T>(cfg_.gate_init));
  }
  l.norm2_gain = add_const(p + "norm2.weight", {d}, T(1));
  l.norm2_bias = add_const(p + "norm2.bias", {d}, T(0));
  l.fc1_w = add_normal(p + "ffn.fc1.weight", {d, hidden}, kLinearStd, rng);
  l.fc1_b = add_const(p + "ffn.fc1.bias", {hidden}, T(0));
  l.fc2_w = add_normal(p + "ffn.fc2.weight", {hidden, d}, kLinearStd, rng);
  l.fc2_b = add_const(p + "ffn.fc2.bias", {d}, T(0));
  return l;
}

template <typename T>
Conviformer<T>::Conviformer(const ConviformerConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  validate(cfg_);
  CounterRng rng(seed, 0x6d6f64656cULL);
  const std::size_t d = cfg_.d_emb;
  const std::size_t cc = cfg_.conv_channels;
  auto he = [](std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); };

  std::size_t patch_in = 3;
  if (cfg_.use_frontend) {
    auto strides = frontend_strides(downsample_factor(cfg_.input_res, cfg_.base_res));
    if (strides.empty()) strides.push_back(1);
    std::size_t cin = 3;
    for (std::size_t i = 0; i < strides.size(); ++i) {
      const std::string p = "frontend." + std::to_string(i) + ".";
      FrontendBlock<T> b;
      b.stride = strides[i];
      b.kernel = std::max<std::size_t>(3, b.stride);
      b.conv_w = add_normal(p + "conv.weight", {cc, cin, b.kernel, b.kernel}, he(cin * b.kernel * b.kernel), rng);
      b.conv_b = add_const(p + "conv.bias", {cc}, T(0));
      b.norm_gain = add_const(p + "norm.weight", {cc}, T(1));
      b.norm_bias = add_const(p + "norm.bias", {cc}, T(0));
      frontend_.push_back(b);
      cin = cc;
    }
    frontend_out_w_ = add_normal("frontend.out.weight", {cc, cc, 3, 3}, he(cc * 9), rng);
    frontend_out_b_ = add_const("frontend.out.bias", {cc}, T(0));
    patch_in = cc;
  }
  const std::size_t p = cfg_.patch_size;
  patch_w_ = add_normal("patch_embed.proj.weight", {d, patch_in, p, p},
                        std::sqrt(1.0 / static_cast<double>(patch_in * p * p)), rng);
  patch_b_ = add_const("patch_embed.proj.bias", {d}, T(0));

  for (std::size_t i = 0; i < cfg_.n_gpsa_layers; ++i) {
    gpsa_.push_back(make_layer("gpsa." + std::to_string(i) + ".", true, rng));
  }
  cls_token_ = add_const("cls_token", {1, d}, T(0));
  for (std::size_t i = 0; i < cfg_.n_sa_layers; ++i) {
    sa_.push_back(make_layer("sa." + std::to_string(i) + ".", false, rng));
  }
  norm_gain_ = add_const("norm.weight", {d}, T(1));
  norm_bias_ = add_const("norm.bias", {d}, T(0));

  constexpr double kHeadStd = 0.02;
  const std::size_t hh = cfg_.head_hidden;
  tax_w_ = add_normal("head.tax.weight", {d, cfg_.n_taxa}, kHeadStd, rng);
  tax_b_ = add_const("head.tax.bias", {cfg_.n_taxa}, T(0));
  gen_w1_ = add_normal("head.gen.fc1.weight", {d, hh}, kHeadStd, rng);
  gen_b1_ = add_const("head.gen.fc1.bias", {hh}, T(0));
  gen_w2_ = add_normal("head.gen.fc2.weight", {hh, cfg_.n_genus}, kHeadStd, rng);
  gen_b2_ = add_const("head.gen.fc2.bias", {cfg_.n_genus}, T(0));
  fam_w1_ = add_normal("head.fam.fc1.weight", {d, hh}, kHeadStd, rng);
  fam_b1_ = add_const("head.fam.fc1.bias", {hh}, T(0));
  fam_w2_ = add_normal("head.fam.fc2.weight", {hh, cfg_.n_family}, kHeadStd, rng);
  fam_b2_ = add_const("head.fam.fc2.bias", {cfg_.n_family}, T(0));
  emb_tax_w_ = add_normal("emb.tax.weight", {d, cfg_.emb_tax}, kHeadStd, rng);
  emb_tax_b_ = add_const("emb.tax.bias", {cfg_.emb_tax}, T(0));
  emb_gen_w_ = add_normal("emb.gen.weight", {d, cfg_.emb_gen}, kHeadStd, rng);
  emb_gen_b_ = add_const("emb.gen.bias", {cfg_.emb_gen}, T(0));
  emb_fam_w_ = add_normal("emb.fam.weight", {d, cfg_.emb_fam}, kHeadStd, rng);
  emb_fam_b_ = add_const("emb.fam.bias", {cfg_.emb_fam}, T(0));
}

template <typename T>
Tensor<T> Conviformer<T>::parameter(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("no parameter named " + name);
  return params_[it->second].tensor;
}

template <typename T>
std::size_t Conviformer<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

namespace {

// Layer norm over the channel axis of [B, C, H, W].
template <typename T>
Tensor<T> channel_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  const auto nhwc = ops::permute(x, {0, 2, 3, 1});
  return ops::permute(ops::layer_norm(nhwc, gain, bias), {0, 3, 1, 2});
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return ops::add(ops::matmul(x, w), b);
}

}  // namespace

template <typename T>
Tensor<T> Conviformer<T>::conv_frontend(const Tensor<T>& x) const {
  if (!cfg_.use_frontend) throw ContractError("conv_frontend called on a model built without a front-end");
  if (x.rank() != 4 || x.dim(1) != 3) throw DimensionError("front-end expects [B, 3, h, w], got " + to_string(x.shape()));
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  if (h != w) throw DimensionError("front-end expects a square input, got " + dims(h, w));
  const std::size_t d_s = downsample_factor(h, cfg_.base_res);
  const std::size_t built = downsample_factor(cfg_.input_res, cfg_.base_res);
  if (d_s != built) {
    throw DimensionError("input " + dims(h, w) + " needs d_s=" + std::to_string(d_s) + " but the front-end was built for d_s=" +
                         std::to_string(built));
  }
  Tensor<T> z = x;
  for (const auto& b : frontend_) {
    // Trailing-only padding of kernel - stride gives exactly floor(extent / stride).
    ops::Conv2dOptions o;
    o.stride = b.stride;
    if (b.stride == 1) {
      o.pad_top = o.pad_left = o.pad_bottom = o.pad_right = b.kernel / 2;
    } else {
      o.pad_bottom = o.pad_right = b.kernel - b.stride;
    }
    z = ops::conv2d<T>(z, b.conv_w, b.conv_b, o);
    z = ops::gelu(channel_norm(z, b.norm_gain, b.norm_bias));
  }
  z = ops::conv2d<T>(z, frontend_out_w_, frontend_out_b_, ops::Conv2dOptions::symmetric(1, 1));
  if (z.dim(2) != h / d_s || z.dim(3) != w / d_s) {
    throw ContractError("front-end produced " + dims(z.dim(2), z.dim(3)) + ", expected " + dims(h / d_s, w / d_s));
  }
  return z;
}

template <typename T>
Tensor<T> Conviformer<T>::patch_embed(const Tensor<T>& z) const {
  const std::size_t cin = patch_w_.dim(1);
  if (z.rank() != 4 || z.dim(1) != cin) {
    throw DimensionError("patch_embed expects [B, " + std::to_string(cin) + ", h', w'], got " + to_string(z.shape()));
  }
  const std::size_t p = cfg_.patch_size;
  if (z.dim(2) < p || z.dim(3) < p) throw DimensionError("feature map " + dims(z.dim(2), z.dim(3)) + " is smaller than a patch");
  const auto y = ops::conv2d<T>(z, patch_w_, patch_b_, ops::Conv2dOptions::symmetric(p, 0));
  const std::size_t b = y.dim(0);
  const std::size_t t = y.dim(2) * y.dim(3);
  return ops::permute(ops::reshape(y, {b, cfg_.d_emb, t}), {0, 2, 1});
}

namespace {

// softmax_j(v_pos[h] . r_ij) -> [H, t_p, t_p].
template <typename T>
Tensor<T> positional_softmax(const Tensor<T>& v_pos, const PatchGrid& grid) {
  const std::size_t n = grid.t_p;
  const auto r = relative_offsets<T>(grid.grid_h, grid.grid_w);
  const auto scores = ops::transpose(ops::matmul(r, ops::transpose(v_pos)));
  return ops::softmax(ops::reshape(scores, {v_pos.dim(0), n, n}), -1);
}

}  // namespace

template <typename T>
Tensor<T> Conviformer<T>::positional_attention(std::size_t layer, const PatchGrid& grid) const {
  if (layer >= gpsa_.size()) throw ContractError("GPSA layer index out of range");
  return positional_softmax(gpsa_[layer].v_pos, grid);
}

template <typename T>
Tensor<T> Conviformer<T>::mixed_attention(const TransformerLayer<T>& layer, const Tensor<T>& tokens,
                                          const PatchGrid& grid, const ForwardOptions<T>& opts,
                                          Tensor<T>* attn_out) const {
  if (tokens.rank() != 3 || tokens.dim(2) != cfg_.d_emb) {
    throw DimensionError("attention expects [B, N, " + std::to_string(cfg_.d_emb) + "], got " + to_string(tokens.shape()));
  }
  const std::size_t b = tokens.dim(0);
  const std::size_t n = tokens.dim(1);
  const std::size_t h = cfg_.n_heads;
  const std::size_t dh = cfg_.d_emb / h;
  auto split = [&](const Tensor<T>& t) {
    return ops::reshape(ops::permute(ops::reshape(t, {b, n, h, dh}), {0, 2, 1, 3}), {b * h, n, dh});
  };
  const auto& a = layer.attn;
  const auto q = split(ops::matmul(tokens, a.wq));
  const auto k = split(ops::matmul(tokens, a.wk));
  const auto v = split(ops::matmul(tokens, a.wv));
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  auto attn = ops::softmax(ops::reshape(ops::scale(ops::bmm(q, k, true), inv_sqrt), {b, h, n, n}), -1);
  if (layer.gate.numel() > 0) {
    if (n != grid.t_p) throw DimensionError("GPSA token count " + std::to_string(n) + " != grid " + std::to_string(grid.t_p));
    attn = ops::gated_mix(attn, positional_softmax(layer.v_pos, grid), layer.gate, opts.forced_gate);
  }
  if (attn_out) *attn_out = attn.detach();
  const auto ctx = ops::bmm(ops::reshape(attn, {b * h, n, n}), v);
  const auto merged = ops::reshape(ops::permute(ops::reshape(ctx, {b, h, n, dh}), {0, 2, 1, 3}), {b, n, cfg_.d_emb});
  auto out = linear(merged, a.wo, a.bo);
  if (opts.training && cfg_.dropout > 0.0) {
    if (!opts.dropout_rng) throw ContractError("training with dropout needs a dropout RNG");
    out = ops::dropout(out, static_cast<T>(cfg_.dropout), *opts.dropout_rng, true);
  }
  return out;
}

template <typename T>
Tensor<T> Conviformer<T>::gpsa_attention(std::size_t layer, const Tensor<T>& tokens, const PatchGrid& grid,
                                         const ForwardOptions<T>& opts, Tensor<T>* attn_out) const {
  if (layer >= gpsa_.size()) throw ContractError("GPSA layer index out of range");
  if (tokens.rank() != 3 || tokens.dim(1) != grid.t_p) {
    throw DimensionError("GPSA expects " + std::to_string(grid.t_p) + " tokens, got shape " + to_string(tokens.shape()));
  }
  return mixed_attention(gpsa_[layer], tokens, grid, opts, attn_out);
}

template <typename T>
Tensor<T> Conviformer<T>::content_attention(const AttentionBlock<T>& block, const Tensor<T>& tokens,
                                            const ForwardOptions<T>& opts, Tensor<T>* attn_out) const {
  TransformerLayer<T> plain;
  plain.attn = block;
  return mixed_attention(plain, tokens, PatchGrid{}, opts, attn_out);
}

template <typename T>
Tensor<T> Conviformer<T>::ffn(const TransformerLayer<T>& l, const Tensor<T>& x, const ForwardOptions<T>& opts) const {
  auto drop = [&](const Tensor<T>& t) {
    if (!opts.training || cfg_.dropout == 0.0) return t;
    if (!opts.dropout_rng) throw ContractError("training with dropout needs a dropout RNG");
    return ops::dropout(t, static_cast<T>(cfg_.dropout), *opts.dropout_rng, true);
  };
  const auto hidden = drop(ops::gelu(linear(x, l.fc1_w, l.fc1_b)));
  return drop(linear(hidden, l.fc2_w, l.fc2_b));
}

template <typename T>
ModelOutputs<T> Conviformer<T>::heads(const Tensor<T>& f) const {
  if (f.rank() != 2 || f.dim(1) != cfg_.d_emb) {
    throw DimensionError("heads expect [B, " + std::to_string(cfg_.d_emb) + "], got " + to_string(f.shape()));
  }
  ModelOutputs<T> o;
  o.out_feat = f;
  o.label_tax = linear(f, tax_w_, tax_b_);
  o.label_gen = linear(ops::gelu(linear(f, gen_w1_, gen_b1_)), gen_w2_, gen_b2_);
  o.label_fam = linear(ops::gelu(linear(f, fam_w1_, fam_b1_)), fam_w2_, fam_b2_);
  o.emb_tax = linear(f, emb_tax_w_, emb_tax_b_);
  o.emb_gen = linear(f, emb_gen_w_, emb_gen_b_);
  o.emb_fam = linear(f, emb_fam_w_, emb_fam_b_);
  return o;
}

template <typename T>
ModelOutputs<T> Conviformer<T>::forward(const Tensor<T>& x, const ForwardOptions<T>& opts) const {
  if (x.rank() != 4 || x.dim(1) != 3) throw DimensionError("forward expects [B, 3, h, w], got " + to_string(x.shape()));
  if (x.dim(2) != x.dim(3)) throw DimensionError("forward expects a square input, got " + dims(x.dim(2), x.dim(3)));
  const auto grid = patch_grid(x.dim(2), x.dim(3), cfg_);
  auto t = patch_embed(cfg_.use_frontend ? conv_frontend(x) : x);
  if (t.dim(1) != grid.t_p) throw ContractError("token count disagrees with the patch grid");
  const std::size_t b = x.dim(0);

  for (const auto& layer : gpsa_) {
    Tensor<T> attn;
    t = ops::add(t, mixed_attention(layer, ops::layer_norm(t, layer.norm1_gain, layer.norm1_bias), grid, opts,
                                    opts.trace ? &attn : nullptr));
    if (opts.trace) opts.trace->gpsa.push_back(attn);
    t = ops::add(t, ffn(layer, ops::layer_norm(t, layer.norm2_gain, layer.norm2_bias), opts));
  }

  const std::vector<std::size_t> zeros(b, 0);
  const auto cls = ops::reshape(ops::embedding_lookup(cls_token_, zeros), {b, 1, cfg_.d_emb});
  t = ops::concat<T>({cls, t}, 1);

  for (const auto& layer : sa_) {
    Tensor<T> attn;
    t = ops::add(t, content_attention(layer.attn, ops::layer_norm(t, layer.norm1_gain, layer.norm1_bias), opts,
                                      opts.trace ? &attn : nullptr));
    if (opts.trace) opts.trace->sa.push_back(attn);
    t = ops::add(t, ffn(layer, ops::layer_norm(t, layer.norm2_gain, layer.norm2_bias), opts));
  }

  t = ops::layer_norm(t, norm_gain_, norm_bias_);
  auto out = heads(ops::reshape(ops::slice(t, 1, 0, 1), {b, cfg_.d_emb}));
  out.tokens = t;
  return out;
}

template Tensor<float> relative_offsets<float>(std::size_t, std::size_t);
template Tensor<double> relative_offsets<double>(std::size_t, std::size_t);
template class Conviformer<float>;
template class Conviformer<double>;

}  // namespace cvf::model
