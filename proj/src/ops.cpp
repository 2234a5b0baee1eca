#include "cvf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

namespace cvf::ops {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>* t) { return t->requires_grad(); });
}

template <typename T>
Tensor<T> make_output(const char* op, Shape shape, std::vector<T> data) {
  for (const T v : data) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

// Registers the backward closure for `out` on the active tape.
template <typename T, typename Fn>
void attach(Tensor<T>& out, Fn&& fn) {
  auto& node = *out.node();
  node.requires_grad = true;
  node.is_leaf = false;
  active_tape<T>()->record(out.node(), std::forward<Fn>(fn));
}

// Gradient buffer of an input, allocated on first use; null when the input
// does not take part in differentiation.
template <typename T>
T* grad_of(const NodePtr<T>& n) {
  if (!n->requires_grad) return nullptr;
  if (n->grad.empty()) n->grad.assign(n->data.size(), T{0});
  return n->grad.data();
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void check_broadcast(const char* op, const Shape& a, const Shape& b) {
  bool ok = b.size() <= a.size();
  if (ok) ok = std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()));
  if (!ok) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(b) + " onto " + to_string(a));
  }
}

enum class Arith { kAdd, kSub, kMul, kDiv };

template <typename T>
Tensor<T> arith(Arith kind, const char* name, const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast(name, a.shape(), b.shape());
  const std::size_t n = a.numel();
  const std::size_t inner = b.numel();
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = av[i];
    const T y = bv[i % inner];
    switch (kind) {
      case Arith::kAdd: out[i] = x + y; break;
      case Arith::kSub: out[i] = x - y; break;
      case Arith::kMul: out[i] = x * y; break;
      case Arith::kDiv: out[i] = x / y; break;
    }
  }
  auto result = make_output<T>(name, a.shape(), std::move(out));
  if (tracking<T>({&a, &b})) {
    attach(result, [kind, an = a.node(), bn = b.node(), n, inner](const TensorNode<T>& o) {
      const auto& g = o.grad;
      T* ga = grad_of(an);
      T* gb = grad_of(bn);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i % inner;
        const T x = an->data[i];
        const T y = bn->data[j];
        switch (kind) {
          case Arith::kAdd:
            if (ga) ga[i] += g[i];
            if (gb) gb[j] += g[i];
            break;
          case Arith::kSub:
            if (ga) ga[i] += g[i];
            if (gb) gb[j] -= g[i];
            break;
          case Arith::kMul:
            if (ga) ga[i] += g[i] * y;
            if (gb) gb[j] += g[i] * x;
            break;
          case Arith::kDiv:
            if (ga) ga[i] += g[i] / y;
            if (gb) gb[j] -= g[i] * x / (y * y);
            break;
        }
      }
    });
  }
  return result;
}

// Elementwise unary op; `deriv(x, y)` is dy/dx given input and output.
template <typename T, typename F, typename D>
Tensor<T> unary(const char* name, const Tensor<T>& x, F f, D deriv) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  std::transform(xv.begin(), xv.end(), out.begin(), f);
  auto result = make_output<T>(name, x.shape(), std::move(out));
  if (tracking<T>({&x})) {
    attach(result, [xn = x.node(), deriv](const TensorNode<T>& o) {
      T* gx = grad_of(xn);
      for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * deriv(xn->data[i], o.data[i]);
    });
  }
  return result;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return arith(Arith::kAdd, "add", a, b);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return arith(Arith::kSub, "sub", a, b);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return arith(Arith::kMul, "mul", a, b);
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return arith(Arith::kDiv, "div", a, b);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary<T>("scale", a, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  return unary<T>("add_scalar", a, [value](T v) { return v + value; }, [](T, T) { return T{1}; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return unary<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>(
      "sigmoid", x, [](T v) { return T{1} / (T{1} + std::exp(-v)); }, [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary<T>(
      "relu", x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kInvSqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T kInvSqrt2Pi = std::numbers::inv_sqrtpi_v<T> * kInvSqrt2;
  return unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T{1} + std::erf(v * kInvSqrt2)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T{1} + std::erf(v * kInvSqrt2));
        return cdf + v * kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
      });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.dim(-1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t k = b.dim(0);
  const std::size_t n = b.dim(1);
  const std::size_t m = a.numel() / k;
  Shape shape = a.shape();
  shape.back() = n;
  std::vector<T> out(m * n);
  kernels::gemm<T>(false, false, m, n, k, a.data(), b.data(), out, false);
  auto result = make_output<T>("matmul", std::move(shape), std::move(out));
  if (tracking<T>({&a, &b})) {
    attach(result, [an = a.node(), bn = b.node(), m, n, k](const TensorNode<T>& o) {
      if (T* ga = grad_of(an)) {
        kernels::gemm<T>(false, true, m, k, n, o.grad, bn->data, std::span<T>(ga, m * k), true);
      }
      if (T* gb = grad_of(bn)) {
        kernels::gemm<T>(true, false, k, n, m, an->data, o.grad, std::span<T>(gb, k * n), true);
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  const bool ok = a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) &&
                  a.dim(2) == (transpose_b ? b.dim(2) : b.dim(1));
  if (!ok) {
    throw DimensionError("bmm: incompatible shapes " + to_string(a.shape()) + " x " + to_string(b.shape()) +
                         (transpose_b ? " (b transposed)" : ""));
  }
  const std::size_t batch = a.dim(0);
  const std::size_t m = a.dim(1);
  const std::size_t k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  std::vector<T> out(batch * m * n);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < batch; ++i) {
    kernels::gemm<T>(false, transpose_b, m, n, k, av.subspan(i * m * k, m * k), bv.subspan(i * k * n, k * n),
                     std::span<T>(out).subspan(i * m * n, m * n), false);
  }
  auto result = make_output<T>("bmm", Shape{batch, m, n}, std::move(out));
  if (tracking<T>({&a, &b})) {
    attach(result, [an = a.node(), bn = b.node(), batch, m, n, k, transpose_b](const TensorNode<T>& o) {
      T* ga = grad_of(an);
      T* gb = grad_of(bn);
      const std::span<const T> g = o.grad;
      const std::span<const T> ad = an->data;
      const std::span<const T> bd = bn->data;
      for (std::size_t i = 0; i < batch; ++i) {
        const auto gi = g.subspan(i * m * n, m * n);
        const auto ai = ad.subspan(i * m * k, m * k);
        const auto bi = bd.subspan(i * k * n, k * n);
        if (ga) {
          // dA = dC * op(B)^T
          kernels::gemm<T>(false, !transpose_b, m, k, n, gi, bi, std::span<T>(ga + i * m * k, m * k), true);
        }
        if (gb) {
          if (transpose_b) {
            // B stored [n, k]: dB = dC^T * A
            kernels::gemm<T>(true, false, n, k, m, gi, ai, std::span<T>(gb + i * k * n, k * n), true);
          } else {
            kernels::gemm<T>(true, false, k, n, m, ai, gi, std::span<T>(gb + i * k * n, k * n), true);
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& bias,
                 const Conv2dOptions& opts) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1)) {
    throw DimensionError("conv2d: incompatible input " + to_string(x.shape()) + " and kernel " +
                         to_string(w.shape()));
  }
  kernels::Conv2dGeometry g;
  g.in_h = x.dim(2);
  g.in_w = x.dim(3);
  g.kernel_h = w.dim(2);
  g.kernel_w = w.dim(3);
  g.stride = opts.stride;
  g.pad_top = opts.pad_top;
  g.pad_left = opts.pad_left;
  g.pad_bottom = opts.pad_bottom;
  g.pad_right = opts.pad_right;
  if (!g.valid()) {
    throw DimensionError("conv2d: kernel " + to_string(w.shape()) + " larger than padded input " +
                         to_string(x.shape()) + " or stride 0");
  }
  const std::size_t batch = x.dim(0);
  const std::size_t in_c = x.dim(1);
  const std::size_t out_c = w.dim(0);
  if (bias && (bias->rank() != 1 || bias->dim(0) != out_c)) {
    throw DimensionError("conv2d: bias shape " + to_string(bias->shape()) + " does not match " +
                         std::to_string(out_c) + " output channels");
  }
  std::vector<T> out(batch * out_c * g.out_h() * g.out_w());
  kernels::conv2d_forward<T>(x.data(), w.data(), bias ? bias->data() : std::span<const T>{}, batch, in_c, out_c,
                             g, out);
  auto result = make_output<T>("conv2d", Shape{batch, out_c, g.out_h(), g.out_w()}, std::move(out));
  const Tensor<T> no_bias;
  const Tensor<T>& b = bias ? *bias : no_bias;
  if (tracking<T>({&x, &w, &b})) {
    attach(result, [xn = x.node(), wn = w.node(), bn = bias ? bias->node() : nullptr, g, batch, in_c,
                    out_c](const TensorNode<T>& o) {
      T* gx = grad_of(xn);
      T* gw = grad_of(wn);
      T* gb = bn ? grad_of(bn) : nullptr;
      kernels::conv2d_backward<T>(xn->data, wn->data, o.grad, batch, in_c, out_c, g,
                                  gx ? std::span<T>(gx, xn->data.size()) : std::span<T>{},
                                  gw ? std::span<T>(gw, wn->data.size()) : std::span<T>{},
                                  gb ? std::span<T>(gb, out_c) : std::span<T>{});
    });
  }
  return result;
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride) {
  if (x.rank() != 4 || kernel == 0 || stride == 0 || kernel > x.dim(2) || kernel > x.dim(3)) {
    throw DimensionError("max_pool2d: kernel " + std::to_string(kernel) + " invalid for input " +
                         to_string(x.shape()));
  }
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  const std::size_t oh = (h - kernel) / stride + 1;
  const std::size_t ow = (w - kernel) / stride + 1;
  std::vector<T> out(planes * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  const auto xv = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = p * h * w + oy * stride * w + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = p * h * w + (oy * stride + ky) * w + ox * stride + kx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = xv[best];
        argmax[o] = best;
      }
  auto result = make_output<T>("max_pool2d", Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out));
  if (tracking<T>({&x})) {
    attach(result, [xn = x.node(), argmax = std::move(argmax)](const TensorNode<T>& o) {
      T* gx = grad_of(xn);
      for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += o.grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_at(x.shape(), ax);
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = xv[base];
      for (std::size_t e = 1; e < s.extent; ++e) mx = std::max(mx, xv[base + e * s.inner]);
      T total{0};
      for (std::size_t e = 0; e < s.extent; ++e) {
        const T v = std::exp(xv[base + e * s.inner] - mx);
        out[base + e * s.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] /= total;
    }
  auto result = make_output<T>("softmax", x.shape(), std::move(out));
  if (tracking<T>({&x})) {
    attach(result, [xn = x.node(), s](const TensorNode<T>& o) {
      T* gx = grad_of(xn);
      for (std::size_t ou = 0; ou < s.outer; ++ou)
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = ou * s.extent * s.inner + in;
          T dot{0};
          for (std::size_t e = 0; e < s.extent; ++e) {
            const std::size_t i = base + e * s.inner;
            dot += o.grad[i] * o.data[i];
          }
          for (std::size_t e = 0; e < s.extent; ++e) {
            const std::size_t i = base + e * s.inner;
            gx[i] += o.data[i] * (o.grad[i] - dot);
          }
        }
    });
  }
  return result;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_at(x.shape(), ax);
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = xv[base];
      for (std::size_t e = 1; e < s.extent; ++e) mx = std::max(mx, xv[base + e * s.inner]);
      T total{0};
      for (std::size_t e = 0; e < s.extent; ++e) total += std::exp(xv[base + e * s.inner] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] = xv[base + e * s.inner] - lse;
    }
  auto result = make_output<T>("log_softmax", x.shape(), std::move(out));
  if (tracking<T>({&x})) {
    attach(result, [xn = x.node(), s](const TensorNode<T>& o) {
      T* gx = grad_of(xn);
      for (std::size_t ou = 0; ou < s.outer; ++ou)
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = ou * s.extent * s.inner + in;
          T gsum{0};
          for (std::size_t e = 0; e < s.extent; ++e) gsum += o.grad[base + e * s.inner];
          for (std::size_t e = 0; e < s.extent; ++e) {
            const std::size_t i = base + e * s.inner;
            gx[i] += o.grad[i] - std::exp(o.data[i]) * gsum;
          }
        }
    });
  }
  return result;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (x.rank() < 1 || gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != x.dim(-1) ||
      bias.dim(0) != x.dim(-1)) {
    throw DimensionError("layer_norm: gain/bias " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                         " do not match input " + to_string(x.shape()));
  }
  const std::size_t d = x.dim(-1);
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  std::vector<T> out(xv.size());
  std::vector<T> xhat(xv.size());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu{0};
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T inv = T{1} / std::sqrt(var + eps);
    rstd[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * inv;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  auto result = make_output<T>("layer_norm", x.shape(), std::move(out));
  if (tracking<T>({&x, &gain, &bias})) {
    attach(result, [xn = x.node(), gn = gain.node(), bn = bias.node(), xhat = std::move(xhat),
                    rstd = std::move(rstd), d, rows](const TensorNode<T>& o) {
      T* gx = grad_of(xn);
      T* gg = grad_of(gn);
      T* gb = grad_of(bn);
      std::vector<T> dxhat(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* g = o.grad.data() + r * d;
        const T* h = xhat.data() + r * d;
        T mean_d{0};
        T mean_dh{0};
        for (std::size_t j = 0; j < d; ++j) {
          if (gg) gg[j] += g[j] * h[j];
          if (gb) gb[j] += g[j];
          dxhat[j] = g[j] * gn->data[j];
          mean_d += dxhat[j];
          mean_dh += dxhat[j] * h[j];
        }
        if (!gx) continue;
        mean_d /= static_cast<T>(d);
        mean_dh /= static_cast<T>(d);
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x) {
  T total{0};
  for (const T v : x.data()) total += v;
  auto result = make_output<T>("reduce_sum", Shape{}, std::vector<T>{total});
  if (tracking<T>({&x})) {
    attach(result, [xn = x.node()](const TensorNode<T>& o) {
      T* gx = grad_of(xn);
      for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += o.grad[0];
    });
  }
  return result;
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_at(x.shape(), ax);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
  const auto xv = x.data();
  std::vector<T> out(s.outer * s.inner, T{0});
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t in = 0; in < s.inner; ++in)
        out[o * s.inner + in] += xv[(o * s.extent + e) * s.inner + in];
  auto result = make_output<T>("reduce_sum", std::move(shape), std::move(out));
  if (tracking<T>({&x})) {
    attach(result, [xn = x.node(), s](const TensorNode<T>& o) {
      T* gx = grad_of(xn);
      for (std::size_t ou = 0; ou < s.outer; ++ou)
        for (std::size_t e = 0; e < s.extent; ++e)
          for (std::size_t in = 0; in < s.inner; ++in)
            gx[(ou * s.extent + e) * s.inner + in] += o.grad[ou * s.inner + in];
    });
  }
  return result;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(reduce_sum(x), T{1} / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis) {
  const std::size_t extent = x.dim(axis);
  if (extent == 0) throw DimensionError("mean over an empty axis");
  return scale(reduce_sum(x, axis), T{1} / static_cast<T>(extent));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " to " + to_string(shape));
  }
  auto result = make_output<T>("reshape", std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (tracking<T>({&x})) {
    attach(result, [xn = x.node()](const TensorNode<T>& o) {
      T* gx = grad_of(xn);
      for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t rank = x.rank();
  std::vector<std::size_t> check(perm);
  std::sort(check.begin(), check.end());
  std::vector<std::size_t> iota(rank);
  std::iota(iota.begin(), iota.end(), std::size_t{0});
  if (perm.size() != rank || check != iota) {
    throw DimensionError("permute: invalid permutation for shape " + to_string(x.shape()));
  }
  const Shape& in_shape = x.shape();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(rank);
  std::vector<std::size_t> src_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[perm[i]];
    src_strides[i] = in_strides[perm[i]];
  }
  // Flat source index of every output element, reused by backward.
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    src[i] = offset;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      offset += src_strides[d];
      if (idx[d] < out_shape[d]) break;
      offset -= src_strides[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  const auto xv = x.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[src[i]];
  auto result = make_output<T>("permute", std::move(out_shape), std::move(out));
  if (tracking<T>({&x})) {
    attach(result, [xn = x.node(), src = std::move(src)](const TensorNode<T>& o) {
      T* gx = grad_of(xn);
      for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += o.grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + to_string(x.shape()));
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, perm);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const std::size_t ax = normalize_axis(axis, parts.front().rank());
  Shape shape = parts.front().shape();
  shape[ax] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == shape.size();
    for (std::size_t d = 0; ok && d < shape.size(); ++d) ok = d == ax || p.shape()[d] == shape[d];
    if (!ok) {
      throw DimensionError("concat: shape " + to_string(p.shape()) + " incompatible with " +
                           to_string(parts.front().shape()) + " along axis " + std::to_string(axis));
    }
    shape[ax] += p.shape()[ax];
  }
  const AxisSplit out_split = split_at(shape, ax);
  std::vector<T> out(numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.shape()[ax] * out_split.inner;
    const auto pv = p.data();
    for (std::size_t o = 0; o < out_split.outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.begin() + static_cast<std::ptrdiff_t>(o * out_split.extent * out_split.inner + offset));
    }
    offset += chunk;
  }
  auto result = make_output<T>("concat", std::move(shape), std::move(out));
  const bool track = active_tape<T>() != nullptr &&
                     std::any_of(parts.begin(), parts.end(), [](const Tensor<T>& p) { return p.requires_grad(); });
  if (track) {
    std::vector<NodePtr<T>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    attach(result, [nodes = std::move(nodes), offsets = std::move(offsets), out_split, ax](const TensorNode<T>& o) {
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        T* gp = grad_of(nodes[k]);
        if (!gp) continue;
        const std::size_t chunk = nodes[k]->shape[ax] * out_split.inner;
        for (std::size_t ou = 0; ou < out_split.outer; ++ou) {
          const T* src = o.grad.data() + ou * out_split.extent * out_split.inner + offsets[k];
          for (std::size_t i = 0; i < chunk; ++i) gp[ou * chunk + i] += src[i];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  if (start + length > x.shape()[ax]) {
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for axis of extent " + std::to_string(x.shape()[ax]));
  }
  const AxisSplit s = split_at(x.shape(), ax);
  Shape shape = x.shape();
  shape[ax] = length;
  const std::size_t chunk = length * s.inner;
  const auto xv = x.data();
  std::vector<T> out(s.outer * chunk);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * s.extent + start) * s.inner), chunk,
                out.begin() + static_cast<std::ptrdiff_t>(o * chunk));
  }
  auto result = make_output<T>("slice", std::move(shape), std::move(out));
  if (tracking<T>({&x})) {
    attach(result, [xn = x.node(), s, start, chunk](const TensorNode<T>& o) {
      T* gx = grad_of(xn);
      for (std::size_t ou = 0; ou < s.outer; ++ou) {
        T* dst = gx + (ou * s.extent + start) * s.inner;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += o.grad[ou * chunk + i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::size_t> ids) {
  if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be 2-D, got " + to_string(table.shape()));
  const std::size_t rows = table.dim(0);
  const std::size_t d = table.dim(1);
  const auto tv = table.data();
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) {
      throw DimensionError("embedding_lookup: id " + std::to_string(ids[i]) + " >= table rows " +
                           std::to_string(rows));
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  auto result = make_output<T>("embedding_lookup", Shape{ids.size(), d}, std::move(out));
  if (tracking<T>({&table})) {
    attach(result, [tn = table.node(), ids = std::vector<std::size_t>(ids.begin(), ids.end()), d](
                       const TensorNode<T>& o) {
      T* gt = grad_of(tn);
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += o.grad[i * d + j];
    });
  }
  return result;
}

template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::span<const std::size_t> ids) {
  if (x.rank() != 2 || x.dim(0) != ids.size()) {
    throw DimensionError("pick: expected [" + std::to_string(ids.size()) + ", C], got " + to_string(x.shape()));
  }
  const std::size_t c = x.dim(1);
  std::vector<T> out(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= c) {
      throw LabelError("pick: class id " + std::to_string(ids[i]) + " >= " + std::to_string(c) + " classes");
    }
    out[i] = x.data()[i * c + ids[i]];
  }
  auto result = make_output<T>("pick", Shape{ids.size()}, std::move(out));
  if (tracking<T>({&x})) {
    attach(result, [xn = x.node(), ids = std::vector<std::size_t>(ids.begin(), ids.end()), c](
                       const TensorNode<T>& o) {
      T* gx = grad_of(xn);
      for (std::size_t i = 0; i < ids.size(); ++i) gx[i * c + ids[i]] += o.grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> row_norm(const Tensor<T>& x, T p) {
  if (x.rank() != 2) throw DimensionError("row_norm: expected 2-D input, got " + to_string(x.shape()));
  if (!(p >= T{1})) throw ConfigError("row_norm: p must be >= 1");
  const std::size_t n = x.dim(0);
  const std::size_t d = x.dim(1);
  const auto xv = x.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    T acc{0};
    for (std::size_t j = 0; j < d; ++j) acc += std::pow(std::abs(xv[i * d + j]), p);
    out[i] = std::pow(acc, T{1} / p);
  }
  auto result = make_output<T>("row_norm", Shape{n}, std::move(out));
  if (tracking<T>({&x})) {
    attach(result, [xn = x.node(), p, n, d](const TensorNode<T>& o) {
      T* gx = grad_of(xn);
      for (std::size_t i = 0; i < n; ++i) {
        const T norm = o.data[i];
        if (norm == T{0}) continue;
        const T denom = std::pow(norm, p - T{1});
        for (std::size_t j = 0; j < d; ++j) {
          const T v = xn->data[i * d + j];
          const T sign = v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0});
          gx[i * d + j] += o.grad[i] * sign * std::pow(std::abs(v), p - T{1}) / denom;
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> gated_mix(const Tensor<T>& content, const Tensor<T>& positional, const Tensor<T>& gate_logits,
                    std::optional<T> forced_gate) {
  if (content.rank() != 4 || positional.rank() != 3 || gate_logits.rank() != 1 ||
      positional.dim(0) != content.dim(1) || positional.dim(1) != content.dim(2) ||
      positional.dim(2) != content.dim(3) || gate_logits.dim(0) != content.dim(1)) {
    throw DimensionError("gated_mix: content " + to_string(content.shape()) + ", positional " +
                         to_string(positional.shape()) + ", gate " + to_string(gate_logits.shape()));
  }
  const std::size_t batch = content.dim(0);
  const std::size_t heads = content.dim(1);
  const std::size_t plane = content.dim(2) * content.dim(3);
  std::vector<T> gate(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    gate[h] = forced_gate ? *forced_gate : T{1} / (T{1} + std::exp(-gate_logits.data()[h]));
  }
  const auto cv = content.data();
  const auto pv = positional.data();
  std::vector<T> out(cv.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const T s = gate[h];
      const T keep = T{1} - s;
      const std::size_t base = (b * heads + h) * plane;
      for (std::size_t i = 0; i < plane; ++i) out[base + i] = keep * cv[base + i] + s * pv[h * plane + i];
    }
  auto result = make_output<T>("gated_mix", content.shape(), std::move(out));
  if (tracking<T>({&content, &positional, &gate_logits})) {
    attach(result, [cn = content.node(), pn = positional.node(), gn = gate_logits.node(), gate = std::move(gate),
                    forced = forced_gate.has_value(), batch, heads, plane](const TensorNode<T>& o) {
      T* gc = grad_of(cn);
      T* gp = grad_of(pn);
      T* gg = forced ? nullptr : grad_of(gn);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
          const T s = gate[h];
          const std::size_t base = (b * heads + h) * plane;
          T dgate{0};
          for (std::size_t i = 0; i < plane; ++i) {
            const T g = o.grad[base + i];
            if (gc) gc[base + i] += (T{1} - s) * g;
            if (gp) gp[h * plane + i] += s * g;
            dgate += g * (pn->data[h * plane + i] - cn->data[base + i]);
          }
          if (gg) gg[h] += dgate * s * (T{1} - s);
        }
    });
  }
  return result;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T rate, CounterRng& rng, bool training) {
  if (rate < T{0} || rate >= T{1}) throw ConfigError("dropout rate must be in [0, 1)");
  if (!training || rate == T{0}) return x;
  const T keep_scale = T{1} / (T{1} - rate);
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() < static_cast<double>(rate) ? T{0} : keep_scale;
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  auto result = make_output<T>("dropout", x.shape(), std::move(out));
  if (tracking<T>({&x})) {
    attach(result, [xn = x.node(), mask = std::move(mask)](const TensorNode<T>& o) {
      T* gx = grad_of(xn);
      for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += o.grad[i] * mask[i];
    });
  }
  return result;
}

#define CVF_INSTANTIATE_OPS(T)                                                                                \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> div<T>(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                                          \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                                     \
  template Tensor<T> exp<T>(const Tensor<T>&);                                                               \
  template Tensor<T> log<T>(const Tensor<T>&);                                                               \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                           \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                              \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                              \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> bmm<T>(const Tensor<T>&, const Tensor<T>&, bool);                                       \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&,          \
                               const Conv2dOptions&);                                                         \
  template Tensor<T> max_pool2d<T>(const Tensor<T>&, std::size_t, std::size_t);                              \
  template Tensor<T> softmax<T>(const Tensor<T>&, int);                                                      \
  template Tensor<T> log_softmax<T>(const Tensor<T>&, int);                                                  \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                 \
  template Tensor<T> reduce_sum<T>(const Tensor<T>&);                                                        \
  template Tensor<T> reduce_sum<T>(const Tensor<T>&, int);                                                   \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                              \
  template Tensor<T> mean<T>(const Tensor<T>&, int);                                                         \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                    \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<std::size_t>&);                         \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                                         \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);                                          \
  template Tensor<T> slice<T>(const Tensor<T>&, int, std::size_t, std::size_t);                              \
  template Tensor<T> embedding_lookup<T>(const Tensor<T>&, std::span<const std::size_t>);                    \
  template Tensor<T> pick<T>(const Tensor<T>&, std::span<const std::size_t>);                                \
  template Tensor<T> row_norm<T>(const Tensor<T>&, T);                                                       \
  template Tensor<T> gated_mix<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::optional<T>);   \
  template Tensor<T> dropout<T>(const Tensor<T>&, T, CounterRng&, bool);

CVF_INSTANTIATE_OPS(float)
CVF_INSTANTIATE_OPS(double)

#undef CVF_INSTANTIATE_OPS

}  // namespace cvf::ops
