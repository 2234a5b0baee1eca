#include <cstddef>

#include "cvf/kernels.hpp"

namespace cvf::kernels::reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,
          std::span<const T> b, std::span<T> c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = accumulate ? c[i * n + j] : T{0};
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * m + i] : a[i * k + p];
        const T bv = trans_b ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] = acc;
    }
  }
}

namespace {

// Input coordinate of an output tap, or -1 when it falls in padding.
std::ptrdiff_t tap(std::size_t out, std::size_t kernel_pos, std::size_t stride, std::size_t pad, std::size_t extent) {
  const auto pos = static_cast<std::ptrdiff_t>(out * stride + kernel_pos) - static_cast<std::ptrdiff_t>(pad);
  return (pos < 0 || pos >= static_cast<std::ptrdiff_t>(extent)) ? -1 : pos;
}

}  // namespace

template <typename T>
void conv2d_forward(std::span<const T> x, std::span<const T> w, std::span<const T> bias, std::size_t batch,
                    std::size_t in_c, std::size_t out_c, const Conv2dGeometry& g, std::span<T> y) {
  const std::size_t oh = g.out_h();
  const std::size_t ow = g.out_w();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < out_c; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          T acc = bias.empty() ? T{0} : bias[o];
          for (std::size_t c = 0; c < in_c; ++c)
            for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
              const auto iy = tap(oy, ki, g.stride, g.pad_top, g.in_h);
              if (iy < 0) continue;
              for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                const auto ix = tap(ox, kj, g.stride, g.pad_left, g.in_w);
                if (ix < 0) continue;
                acc += x[((b * in_c + c) * g.in_h + static_cast<std::size_t>(iy)) * g.in_w +
                         static_cast<std::size_t>(ix)] *
                       w[((o * in_c + c) * g.kernel_h + ki) * g.kernel_w + kj];
              }
            }
          y[((b * out_c + o) * oh + oy) * ow + ox] = acc;
        }
}

template <typename T>
void conv2d_backward(std::span<const T> x, std::span<const T> w, std::span<const T> dy, std::size_t batch,
                     std::size_t in_c, std::size_t out_c, const Conv2dGeometry& g, std::span<T> dx,
                     std::span<T> dw, std::span<T> dbias) {
  const std::size_t oh = g.out_h();
  const std::size_t ow = g.out_w();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < out_c; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const T grad = dy[((b * out_c + o) * oh + oy) * ow + ox];
          if (!dbias.empty()) dbias[o] += grad;
          for (std::size_t c = 0; c < in_c; ++c)
            for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
              const auto iy = tap(oy, ki, g.stride, g.pad_top, g.in_h);
              if (iy < 0) continue;
              for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
                const auto ix = tap(ox, kj, g.stride, g.pad_left, g.in_w);
                if (ix < 0) continue;
                const std::size_t xi =
                    ((b * in_c + c) * g.in_h + static_cast<std::size_t>(iy)) * g.in_w + static_cast<std::size_t>(ix);
                const std::size_t wi = ((o * in_c + c) * g.kernel_h + ki) * g.kernel_w + kj;
                if (!dx.empty()) dx[xi] += grad * w[wi];
                if (!dw.empty()) dw[wi] += grad * x[xi];
              }
            }
        }
}

#define CVF_INSTANTIATE_REFERENCE(T)                                                                         \
  template void gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, std::span<const T>,              \
                        std::span<const T>, std::span<T>, bool);                                             \
  template void conv2d_forward<T>(std::span<const T>, std::span<const T>, std::span<const T>, std::size_t,  \
                                  std::size_t, std::size_t, const Conv2dGeometry&, std::span<T>);           \
  template void conv2d_backward<T>(std::span<const T>, std::span<const T>, std::span<const T>, std::size_t, \
                                   std::size_t, std::size_t, const Conv2dGeometry&, std::span<T>,           \
                                   std::span<T>, std::span<T>);

CVF_INSTANTIATE_REFERENCE(float)
CVF_INSTANTIATE_REFERENCE(double)

#undef CVF_INSTANTIATE_REFERENCE

}  // namespace cvf::kernels::reference
