#pragma once

#include <cstddef>
#include <span>

namespace cvf::kernels {

// Window geometry for 2-D convolution and pooling. Padding may be asymmetric
// (the convolutional front-end pads only the trailing edges).
struct Conv2dGeometry {
  std::size_t in_h = 0, in_w = 0;
  std::size_t kernel_h = 1, kernel_w = 1;
  std::size_t stride = 1;
  std::size_t pad_top = 0, pad_left = 0, pad_bottom = 0, pad_right = 0;

  std::size_t out_h() const noexcept { return (in_h + pad_top + pad_bottom - kernel_h) / stride + 1; }
  std::size_t out_w() const noexcept { return (in_w + pad_left + pad_right - kernel_w) / stride + 1; }
  bool valid() const noexcept {
    return stride >= 1 && kernel_h >= 1 && kernel_w >= 1 && kernel_h <= in_h + pad_top + pad_bottom &&
           kernel_w <= in_w + pad_left + pad_right;
  }
};

// Row-major C[m x n] = op(A) * op(B) (+ C when accumulate). op(A) is m x k,
// op(B) is k x n; a transposed operand is stored as its transpose.
// Parallel over output rows; every C element is reduced over k in ascending
// order, so results are bitwise identical for any thread count.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,
          std::span<const T> b, std::span<T> c, bool accumulate);

// Unfolds one image [channels x in_h x in_w] into columns
// [channels*kernel_h*kernel_w x out_h*out_w]; out-of-range taps read zero.
template <typename T>
void im2col(std::span<const T> image, std::size_t channels, const Conv2dGeometry& g, std::span<T> columns);

// Adjoint of im2col: scatters columns back, accumulating into `image`.
template <typename T>
void col2im(std::span<const T> columns, std::size_t channels, const Conv2dGeometry& g, std::span<T> image);

// Batched convolution forward: x [batch x in_c x H x W], w [out_c x in_c x kh x kw],
// optional bias [out_c]; y [batch x out_c x out_h x out_w].
template <typename T>
void conv2d_forward(std::span<const T> x, std::span<const T> w, std::span<const T> bias, std::size_t batch,
                    std::size_t in_c, std::size_t out_c, const Conv2dGeometry& g, std::span<T> y);

// Accumulates into whichever of dx / dw / dbias is non-empty.
template <typename T>
void conv2d_backward(std::span<const T> x, std::span<const T> w, std::span<const T> dy, std::size_t batch,
                     std::size_t in_c, std::size_t out_c, const Conv2dGeometry& g, std::span<T> dx,
                     std::span<T> dw, std::span<T> dbias);

// Straightforward serial versions kept as test oracles and benchmark
// baselines. They share no code with the kernels above.
namespace reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,
          std::span<const T> b, std::span<T> c, bool accumulate);

template <typename T>
void conv2d_forward(std::span<const T> x, std::span<const T> w, std::span<const T> bias, std::size_t batch,
                    std::size_t in_c, std::size_t out_c, const Conv2dGeometry& g, std::span<T> y);

template <typename T>
void conv2d_backward(std::span<const T> x, std::span<const T> w, std::span<const T> dy, std::size_t batch,
                     std::size_t in_c, std::size_t out_c, const Conv2dGeometry& g, std::span<T> dx,
                     std::span<T> dw, std::span<T> dbias);

}  // namespace reference

}  // namespace cvf::kernels
