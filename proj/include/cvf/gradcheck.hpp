#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cvf/rng.hpp"
#include "cvf/tape.hpp"
#include "cvf/tensor.hpp"

namespace cvf {

// Central finite differences against tape gradients. The numeric side only
// ever calls the forward function, so it is independent of every backward
// closure it validates.
struct GradProbe {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradProbe> probes;

  double max_rel_err() const {
    double worst = 0.0;
    for (const auto& p : probes) worst = std::max(worst, p.rel_err);
    return worst;
  }
  const GradProbe* worst() const {
    const GradProbe* w = nullptr;
    for (const auto& p : probes)
      if (!w || p.rel_err > w->rel_err) w = &p;
    return w;
  }
  bool passed(double tol) const { return max_rel_err() < tol; }
};

struct GradCheckOptions {
  // Coordinates probed per tensor; 0 probes every coordinate.
  std::size_t coords_per_tensor = 0;
  double step = 1e-6;
  // Denominator floor so vanishing gradients are compared absolutely.
  double floor = 1e-6;
  std::uint64_t seed = 7;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// `loss_fn` must rebuild the scalar loss from the current values of
// `inputs` every time it is called.
template <typename T>
GradCheckReport check_gradients(const std::function<Tensor<T>()>& loss_fn,
                                std::vector<std::pair<std::string, Tensor<T>>> inputs,
                                const GradCheckOptions& opts = {}) {
  for (auto& [name, t] : inputs) t.zero_grad();
  {
    GradTape<T> tape;
    TapeScope<T> scope(tape);
    const Tensor<T> loss = loss_fn();
    tape.backward(loss);
  }
  std::vector<std::vector<T>> analytic;
  for (auto& [name, t] : inputs) {
    analytic.emplace_back(t.grad().begin(), t.grad().end());
    if (analytic.back().empty()) analytic.back().assign(t.numel(), T{0});
  }

  CounterRng rng(opts.seed);
  GradCheckReport report;
  NoGradScope<T> no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& [name, t] = inputs[k];
    std::vector<std::size_t> coords;
    if (opts.coords_per_tensor == 0 || opts.coords_per_tensor >= t.numel()) {
      for (std::size_t i = 0; i < t.numel(); ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < opts.coords_per_tensor; ++i) coords.push_back(rng.below(t.numel()));
    }
    auto values = t.mutable_data();
    for (const auto i : coords) {
      const T saved = values[i];
      const T h = static_cast<T>(opts.step);
      values[i] = saved + h;
      const double plus = static_cast<double>(loss_fn().item());
      values[i] = saved - h;
      const double minus = static_cast<double>(loss_fn().item());
      values[i] = saved;
      GradProbe probe;
      probe.tensor = name;
      probe.index = i;
      probe.analytic = static_cast<double>(analytic[k][i]);
      probe.numeric = (plus - minus) / (2.0 * static_cast<double>(h));
      probe.rel_err = relative_error(probe.analytic, probe.numeric, opts.floor);
      report.probes.push_back(std::move(probe));
    }
  }
  return report;
}

}  // namespace cvf
