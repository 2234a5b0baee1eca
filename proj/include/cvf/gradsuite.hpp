#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cvf/gradcheck.hpp"
#include "cvf/model.hpp"

namespace cvf::gradsuite {

struct CaseResult {
  std::string name;
  std::size_t probes = 0;
  double max_rel_err = 0;
  std::string worst;  // "tensor[index]"
};

struct SuiteOptions {
  model::ConviformerConfig model;
  std::size_t batch = 4;
  // Coordinates probed per model parameter; ops are probed exhaustively.
  std::size_t coords_per_tensor = 2;
  std::uint64_t seed = 7;
};

// Every differentiable op on small random double inputs, then the full
// model forward and the model under each loss mode. `on_case` sees each
// result as soon as it is computed.
std::vector<CaseResult> run(const SuiteOptions& opts, const std::function<void(const CaseResult&)>& on_case = {});

// Reads model.* keys and gradcheck.batch, gradcheck.coords, gradcheck.seed.
SuiteOptions options_from(const KeyValueConfig& kv);

}  // namespace cvf::gradsuite
