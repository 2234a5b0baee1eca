#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cvf/config.hpp"
#include "cvf/rng.hpp"
#include "cvf/tensor.hpp"

namespace cvf::model {

struct ConviformerConfig {
  std::size_t n_heads = 12;
  std::size_t d_emb = 768;  // always 64 * n_heads
  std::size_t n_gpsa_layers = 10;
  std::size_t n_sa_layers = 2;
  std::size_t patch_size = 16;
  std::size_t base_res = 224;
  std::size_t conv_channels = 64;
  std::size_t ffn_expansion = 4;
  std::size_t n_taxa = 15501;
  std::size_t n_genus = 2564;
  std::size_t n_family = 272;
  std::size_t emb_tax = 512;
  std::size_t emb_gen = 128;
  std::size_t emb_fam = 128;
  std::size_t head_hidden = 512;
  // Input side length the front-end is built for; fixes d_s and therefore
  // the number of strided blocks.
  std::size_t input_res = 448;
  // false: plain ConViT (d_s = 1, patch embedding straight from RGB).
  bool use_frontend = true;
  double dropout = 0.0;
  double locality_strength = 1.0;
  double gate_init = 1.0;
};

// Throws ConfigError on any violated invariant.
void validate(const ConviformerConfig& cfg);

// Reads `<prefix>n_heads` etc.; absent keys keep the defaults above.
ConviformerConfig config_from(const KeyValueConfig& kv, const std::string& prefix = "model.");
void config_to(const ConviformerConfig& cfg, KeyValueConfig& kv, const std::string& prefix = "model.");

struct PatchGrid {
  std::size_t d_s = 1;
  std::size_t h_prime = 0, w_prime = 0;
  std::size_t grid_h = 0, grid_w = 0;
  std::size_t t_p = 0;
};

// max(1, floor(h / base_res)).
std::size_t downsample_factor(std::size_t h, std::size_t base_res);

// Token grid for an h x w input. d_s is taken from h and forced to 1 when
// the front-end is disabled. Throws DimensionError when the reduced map is
// smaller than one patch.
PatchGrid patch_grid(std::size_t h, std::size_t w, const ConviformerConfig& cfg);
std::size_t patch_count(std::size_t h, std::size_t w, const ConviformerConfig& cfg);

// Stride of each strided front-end block: the prime factors of d_s in
// ascending order. Empty for d_s = 1.
std::vector<std::size_t> frontend_strides(std::size_t d_s);

// Relative offsets r_ij = (dx, dy, dx^2 + dy^2) for every ordered token pair
// of a row-major grid, shape [t_p * t_p, 3].
template <typename T>
Tensor<T> relative_offsets(std::size_t grid_h, std::size_t grid_w);

// Integer (dx, dy) locality offset of each head on a ceil(sqrt(H)) grid.
std::vector<std::pair<int, int>> head_offsets(std::size_t n_heads);

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct AttentionTrace {
  // Mixed attention [B, H, N, N] of every GPSA layer, then every SA layer.
  std::vector<Tensor<T>> gpsa;
  std::vector<Tensor<T>> sa;
};

template <typename T>
struct ForwardOptions {
  bool training = false;
  // Replaces sigmoid(lambda) in every GPSA layer.
  std::optional<T> forced_gate;
  CounterRng* dropout_rng = nullptr;
  AttentionTrace<T>* trace = nullptr;
};

template <typename T>
struct ModelOutputs {
  Tensor<T> out_feat;  // [B, d_emb]
  Tensor<T> tokens;    // [B, 1 + t_p, d_emb] after the final norm
  Tensor<T> label_tax, label_gen, label_fam;
  Tensor<T> emb_tax, emb_gen, emb_fam;
};

template <typename T>
struct AttentionBlock {
  Tensor<T> wq, wk, wv, wo, bo;  // projections stored [in, out]
};

template <typename T>
struct TransformerLayer {
  Tensor<T> norm1_gain, norm1_bias, norm2_gain, norm2_bias;
  AttentionBlock<T> attn;
  Tensor<T> v_pos;  // [H, 3]; empty for plain self-attention layers
  Tensor<T> gate;   // [H]; empty for plain self-attention layers
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;
};

template <typename T>
struct FrontendBlock {
  std::size_t stride = 1;
  std::size_t kernel = 3;
  Tensor<T> conv_w, conv_b, norm_gain, norm_bias;
};

template <typename T>
class Conviformer {
 public:
  Conviformer(const ConviformerConfig& cfg, std::uint64_t seed);

  const ConviformerConfig& config() const noexcept { return cfg_; }

  // x [B, 3, h, w] with h = w and floor(h / base_res) matching input_res.
  ModelOutputs<T> forward(const Tensor<T>& x, const ForwardOptions<T>& opts = {}) const;

  // [B, 3, h, w] -> [B, conv_channels, h', w'].
  Tensor<T> conv_frontend(const Tensor<T>& x) const;
  // [B, C, h', w'] -> [B, t_p, d_emb].
  Tensor<T> patch_embed(const Tensor<T>& z) const;
  // Attention sublayer of GPSA layer `layer` (no norm, no residual).
  // `attn_out` receives the mixed attention [B, H, t_p, t_p].
  Tensor<T> gpsa_attention(std::size_t layer, const Tensor<T>& tokens, const PatchGrid& grid,
                           const ForwardOptions<T>& opts = {}, Tensor<T>* attn_out = nullptr) const;
  // Same projections as gpsa_attention, content softmax only.
  Tensor<T> content_attention(const AttentionBlock<T>& block, const Tensor<T>& tokens,
                              const ForwardOptions<T>& opts = {}, Tensor<T>* attn_out = nullptr) const;
  // softmax over v_pos . r_ij for GPSA layer `layer`: [H, t_p, t_p].
  Tensor<T> positional_attention(std::size_t layer, const PatchGrid& grid) const;
  ModelOutputs<T> heads(const Tensor<T>& out_feat) const;

  std::vector<NamedTensor<T>>& parameters() noexcept { return params_; }
  const std::vector<NamedTensor<T>>& parameters() const noexcept { return params_; }
  // Throws ContractError for an unknown name.
  Tensor<T> parameter(const std::string& name) const;
  std::size_t parameter_count() const;

  const std::vector<TransformerLayer<T>>& gpsa_layers() const noexcept { return gpsa_; }
  const std::vector<TransformerLayer<T>>& sa_layers() const noexcept { return sa_; }
  PatchGrid grid_for(std::size_t h, std::size_t w) const { return patch_grid(h, w, cfg_); }

 private:
  Tensor<T> add_param(const std::string& name, Shape shape, std::vector<T> data);
  Tensor<T> add_normal(const std::string& name, Shape shape, double stddev, CounterRng& rng);
  Tensor<T> add_const(const std::string& name, Shape shape, T value);
  TransformerLayer<T> make_layer(const std::string& prefix, bool gated, CounterRng& rng);
  Tensor<T> ffn(const TransformerLayer<T>& layer, const Tensor<T>& x, const ForwardOptions<T>& opts) const;
  Tensor<T> mixed_attention(const TransformerLayer<T>& layer, const Tensor<T>& tokens, const PatchGrid& grid,
                            const ForwardOptions<T>& opts, Tensor<T>* attn_out) const;

  ConviformerConfig cfg_;
  std::vector<NamedTensor<T>> params_;
  std::map<std::string, std::size_t> index_;

  std::vector<FrontendBlock<T>> frontend_;
  Tensor<T> frontend_out_w_, frontend_out_b_;
  Tensor<T> patch_w_, patch_b_;
  std::vector<TransformerLayer<T>> gpsa_, sa_;
  Tensor<T> cls_token_;
  Tensor<T> norm_gain_, norm_bias_;
  Tensor<T> tax_w_, tax_b_;
  Tensor<T> gen_w1_, gen_b1_, gen_w2_, gen_b2_;
  Tensor<T> fam_w1_, fam_b1_, fam_w2_, fam_b2_;
  Tensor<T> emb_tax_w_, emb_tax_b_, emb_gen_w_, emb_gen_b_, emb_fam_w_, emb_fam_b_;
};

}  // namespace cvf::model
