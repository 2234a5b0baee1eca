#include "cvf/kernels.hpp"

#include <algorithm>
#include <cstddef>
#include <vector>

namespace cvf::kernels {

namespace {

// Work below this many multiply-adds is not worth waking a thread team.
constexpr std::size_t kParallelThreshold = 1 << 15;

template <typename T>
void transpose_into(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  // src is rows x cols, dst becomes cols x rows
  constexpr std::size_t kTile = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kTile) {
    const std::size_t r1 = std::min(rows, r0 + kTile);
    for (std::size_t c0 = 0; c0 < cols; c0 += kTile) {
      const std::size_t c1 = std::min(cols, c0 + kTile);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
    }
  }
}

template <typename T>
void gemm_rows4(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t n, std::size_t k) {
  T* __restrict c0 = c;
  T* __restrict c1 = c + n;
  T* __restrict c2 = c + 2 * n;
  T* __restrict c3 = c + 3 * n;
  for (std::size_t p = 0; p < k; ++p) {
    const T a0 = a[p];
    const T a1 = a[k + p];
    const T a2 = a[2 * k + p];
    const T a3 = a[3 * k + p];
    const T* __restrict brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T bv = brow[j];
      c0[j] += a0 * bv;
      c1[j] += a1 * bv;
      c2[j] += a2 * bv;
      c3[j] += a3 * bv;
    }
  }
}

template <typename T>
void gemm_row(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t n, std::size_t k) {
  for (std::size_t p = 0; p < k; ++p) {
    const T av = a[p];
    const T* __restrict brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
  }
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,
          std::span<const T> b, std::span<T> c, bool accumulate) {
  std::vector<T> a_pack;
  std::vector<T> b_pack;
  const T* ap = a.data();
  const T* bp = b.data();
  if (trans_a) {
    a_pack.resize(m * k);
    transpose_into(a.data(), k, m, a_pack.data());
    ap = a_pack.data();
  }
  if (trans_b) {
    b_pack.resize(k * n);
    transpose_into(b.data(), n, k, b_pack.data());
    bp = b_pack.data();
  }
  T* cp = c.data();
  if (!accumulate) std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(m * n), T{0});

  const auto blocks = static_cast<std::ptrdiff_t>((m + 3) / 4);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelThreshold)
  for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
    const std::size_t i0 = static_cast<std::size_t>(blk) * 4;
    const std::size_t rows = std::min<std::size_t>(4, m - i0);
    if (rows == 4) {
      gemm_rows4(ap + i0 * k, bp, cp + i0 * n, n, k);
    } else {
      for (std::size_t r = 0; r < rows; ++r) gemm_row(ap + (i0 + r) * k, bp, cp + (i0 + r) * n, n, k);
    }
  }
}

template <typename T>
void im2col(std::span<const T> image, std::size_t channels, const Conv2dGeometry& g, std::span<T> columns) {
  const std::size_t oh = g.out_h();
  const std::size_t ow = g.out_w();
  const std::size_t plane = oh * ow;
  const auto in_h = static_cast<std::ptrdiff_t>(g.in_h);
  const auto in_w = static_cast<std::ptrdiff_t>(g.in_w);
  for (std::size_t ch = 0; ch < channels; ++ch) {
    const T* src = image.data() + ch * g.in_h * g.in_w;
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        T* dst = columns.data() + ((ch * g.kernel_h + ki) * g.kernel_w + kj) * plane;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad_top);
          T* drow = dst + oy * ow;
          if (iy < 0 || iy >= in_h) {
            std::fill(drow, drow + ow, T{0});
            continue;
          }
          const T* srow = src + iy * in_w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad_left);
            drow[ox] = (ix >= 0 && ix < in_w) ? srow[ix] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(std::span<const T> columns, std::size_t channels, const Conv2dGeometry& g, std::span<T> image) {
  const std::size_t oh = g.out_h();
  const std::size_t ow = g.out_w();
  const std::size_t plane = oh * ow;
  const auto in_h = static_cast<std::ptrdiff_t>(g.in_h);
  const auto in_w = static_cast<std::ptrdiff_t>(g.in_w);
  for (std::size_t ch = 0; ch < channels; ++ch) {
    T* dst = image.data() + ch * g.in_h * g.in_w;
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const T* src = columns.data() + ((ch * g.kernel_h + ki) * g.kernel_w + kj) * plane;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad_top);
          if (iy < 0 || iy >= in_h) continue;
          const T* srow = src + oy * ow;
          T* drow = dst + iy * in_w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad_left);
            if (ix >= 0 && ix < in_w) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_forward(std::span<const T> x, std::span<const T> w, std::span<const T> bias, std::size_t batch,
                    std::size_t in_c, std::size_t out_c, const Conv2dGeometry& g, std::span<T> y) {
  const std::size_t plane = g.out_h() * g.out_w();
  const std::size_t patch = in_c * g.kernel_h * g.kernel_w;
  const std::size_t in_size = in_c * g.in_h * g.in_w;
  const auto nb = static_cast<std::ptrdiff_t>(batch);
#pragma omp parallel if (batch > 1)
  {
    std::vector<T> columns(patch * plane);
#pragma omp for schedule(static)
    for (std::ptrdiff_t bi = 0; bi < nb; ++bi) {
      const auto b = static_cast<std::size_t>(bi);
      im2col<T>(x.subspan(b * in_size, in_size), in_c, g, columns);
      auto yb = y.subspan(b * out_c * plane, out_c * plane);
      gemm<T>(false, false, out_c, plane, patch, w, columns, yb, false);
      if (!bias.empty()) {
        for (std::size_t o = 0; o < out_c; ++o)
          for (std::size_t p = 0; p < plane; ++p) yb[o * plane + p] += bias[o];
      }
    }
  }
}

template <typename T>
void conv2d_backward(std::span<const T> x, std::span<const T> w, std::span<const T> dy, std::size_t batch,
                     std::size_t in_c, std::size_t out_c, const Conv2dGeometry& g, std::span<T> dx,
                     std::span<T> dw, std::span<T> dbias) {
  const std::size_t plane = g.out_h() * g.out_w();
  const std::size_t patch = in_c * g.kernel_h * g.kernel_w;
  const std::size_t in_size = in_c * g.in_h * g.in_w;

  if (!dbias.empty()) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t o = 0; o < out_c; ++o) {
        const T* row = dy.data() + (b * out_c + o) * plane;
        T acc{0};
        for (std::size_t p = 0; p < plane; ++p) acc += row[p];
        dbias[o] += acc;
      }
  }

  if (!dx.empty()) {
    const auto nb = static_cast<std::ptrdiff_t>(batch);
#pragma omp parallel if (batch > 1)
    {
      std::vector<T> dcol(patch * plane);
#pragma omp for schedule(static)
      for (std::ptrdiff_t bi = 0; bi < nb; ++bi) {
        const auto b = static_cast<std::size_t>(bi);
        gemm<T>(true, false, patch, plane, out_c, w, dy.subspan(b * out_c * plane, out_c * plane), dcol, false);
        col2im<T>(dcol, in_c, g, dx.subspan(b * in_size, in_size));
      }
    }
  }

  if (!dw.empty()) {
    // Serial over the batch so the weight-gradient sum has a fixed order.
    std::vector<T> columns(patch * plane);
    for (std::size_t b = 0; b < batch; ++b) {
      im2col<T>(x.subspan(b * in_size, in_size), in_c, g, columns);
      gemm<T>(false, true, out_c, patch, plane, dy.subspan(b * out_c * plane, out_c * plane), columns, dw, true);
    }
  }
}

#define CVF_INSTANTIATE_KERNELS(T)                                                                             \
  template void gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, std::span<const T>,                \
                        std::span<const T>, std::span<T>, bool);                                               \
  template void im2col<T>(std::span<const T>, std::size_t, const Conv2dGeometry&, std::span<T>);              \
  template void col2im<T>(std::span<const T>, std::size_t, const Conv2dGeometry&, std::span<T>);              \
  template void conv2d_forward<T>(std::span<const T>, std::span<const T>, std::span<const T>, std::size_t,    \
                                  std::size_t, std::size_t, const Conv2dGeometry&, std::span<T>);             \
  template void conv2d_backward<T>(std::span<const T>, std::span<const T>, std::span<const T>, std::size_t,   \
                                   std::size_t, std::size_t, const Conv2dGeometry&, std::span<T>,             \
                                   std::span<T>, std::span<T>);

CVF_INSTANTIATE_KERNELS(float)
CVF_INSTANTIATE_KERNELS(double)

#undef CVF_INSTANTIATE_KERNELS

}  // namespace cvf::kernels
