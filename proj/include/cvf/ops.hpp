#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "cvf/kernels.hpp"
#include "cvf/rng.hpp"
#include "cvf/tape.hpp"
#include "cvf/tensor.hpp"

// Differentiable tensor operations. Each op computes its output eagerly and,
// when a tape is active and any input requires a gradient, records a
// backward closure on the tape.
//
// Broadcasting is limited to two cases: a right operand whose shape equals
// the trailing dimensions of the left operand (bias vectors, batch-shared
// tensors), or equal shapes. Anything else is a DimensionError.
//
// Every op throws NumericError if it produces a non-finite value.
namespace cvf::ops {

// Elementwise arithmetic with trailing broadcast of `b` onto `a`.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value);

template <typename T>
Tensor<T> exp(const Tensor<T>& x);
template <typename T>
Tensor<T> log(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

// a [..., m, k] x b [k, n] -> [..., m, n]; leading dims of `a` are batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Batched product a [B, m, k] x b [B, k, n]; with transpose_b, b is [B, n, k].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad_top = 0, pad_left = 0, pad_bottom = 0, pad_right = 0;

  static Conv2dOptions symmetric(std::size_t stride, std::size_t padding) {
    return {stride, padding, padding, padding, padding};
  }
};

// x [B, C, H, W], w [O, C, kh, kw], bias [O] or empty -> [B, O, H', W'].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& bias,
                 const Conv2dOptions& opts);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t padding) {
  return conv2d<T>(x, w, std::nullopt, Conv2dOptions::symmetric(stride, padding));
}

// x [B, C, H, W] -> [B, C, H', W'], no padding.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1);
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis = -1);

// Normalizes over the last axis, then scales by gain and shifts by bias
// (both [last]).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5));

// Sum/mean of all elements (scalar result) or along one axis (axis removed).
template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x);
template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, int axis);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
// General axis permutation: output axis i is input axis perm[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm);
// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
// Contiguous range [start, start+length) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t start, std::size_t length);

// Rows of table [V, D] selected by ids -> [ids.size(), D].
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::size_t> ids);

// x [N, C] -> [N] with out[n] = x[n, ids[n]].
template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::span<const std::size_t> ids);

// x [N, D] -> [N] p-norms of the rows. The gradient at a zero row is taken
// as zero (the subgradient of smallest norm).
template <typename T>
Tensor<T> row_norm(const Tensor<T>& x, T p);

// Blend of two attention tensors with a per-head sigmoid gate:
// out = (1 - s) * content + s * positional, s = sigmoid(gate_logits[h]).
// content [B, H, N, M]; positional [H, N, M] shared over the batch;
// gate_logits [H]. `forced_gate`, when set, replaces s for every head and
// blocks the gradient into gate_logits.
template <typename T>
Tensor<T> gated_mix(const Tensor<T>& content, const Tensor<T>& positional, const Tensor<T>& gate_logits,
                    std::optional<T> forced_gate = std::nullopt);

// Inverted dropout. Identity when !training or rate == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T rate, CounterRng& rng, bool training);

}  // namespace cvf::ops
