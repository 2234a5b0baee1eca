#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cvf/config.hpp"
#include "cvf/labels.hpp"
#include "cvf/model.hpp"
#include "cvf/rng.hpp"
#include "cvf/tensor.hpp"

namespace cvf::losses {

struct LossWeights {
  double lambda1 = 1.0;  // genus CE
  double lambda2 = 1.0;  // family CE
  double lambda3 = 1.0;  // taxon triplet
  double lambda4 = 1.0;  // genus triplet
  double lambda5 = 1.0;  // family triplet
  double alpha = 1.0;    // triplet margin
  double p = 2.0;        // norm order of the phylogenetic term
  double lambda_dist = 0.1;
};

// Throws ConfigError on a negative weight or p < 1.
void validate(const LossWeights& w);

// Symmetric n_genus x n_genus distances with a zero diagonal.
struct PhyloMatrix {
  std::size_t n = 0;
  std::vector<double> d;

  double at(std::size_t i, std::size_t j) const { return d[i * n + j]; }
  // Throws ConfigError when not square, not symmetric, negative or with a
  // non-zero diagonal.
  void validate() const;
};

enum class Mode { ce, ce_trip, hier, hier_trip, hier_phylo };
Mode parse_mode(const std::string& s);
const char* mode_name(Mode m) noexcept;

enum class Mining { random, exhaustive };
Mining parse_mining(const std::string& s);

struct LossConfig {
  Mode mode = Mode::ce;
  LossWeights weights;
  Level sampling = Level::genus;
  Mining mining = Mining::random;
};

// Reads loss.mode, loss.lambda1..5, loss.alpha, loss.p, loss.lambda_dist,
// loss.sampling, loss.mining.
LossConfig loss_config_from(const KeyValueConfig& kv);
void loss_config_to(const LossConfig& cfg, KeyValueConfig& kv);

// Degenerate batches are counted, not raised.
struct LossStats {
  std::size_t triplet_skips = 0;
  std::size_t phylo_skips = 0;
  std::size_t triplets = 0;
  std::size_t pairs = 0;
};

struct Triplet {
  std::size_t anchor, positive, negative;
  bool operator==(const Triplet&) const = default;
};

// Random: one triplet per anchor that has both a positive (same label, other
// index) and a negative, chosen uniformly by `rng`. Exhaustive: every valid
// (anchor, positive, negative). Empty when the batch admits none.
std::vector<Triplet> mine_triplets(std::span<const std::size_t> labels, Mining mining, CounterRng* rng);

// sum_n w[y_n] * -log softmax(logits_n)[y_n] / N. `class_weights` empty
// means all ones. Throws LabelError for an out-of-range target.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets,
                        std::span<const double> class_weights = {});

// mean_n max(alpha + |a_n - p_n|^2 - |a_n - n_n|^2, 0).
template <typename T>
Tensor<T> triplet_loss(const Tensor<T>& anchor, const Tensor<T>& positive, const Tensor<T>& negative, T alpha);

// triplet_loss over the rows of `emb` picked by `triplets`.
template <typename T>
Tensor<T> triplet_term(const Tensor<T>& emb, const std::vector<Triplet>& triplets, T alpha);

// CE_tax + lambda1 CE_gen + lambda2 CE_fam. With a taxonomy, labels are
// checked against it first.
template <typename T>
Tensor<T> hierarchical_ce(const model::ModelOutputs<T>& out, std::span<const HierLabel> labels, const LossWeights& w,
                          const Taxonomy* taxonomy = nullptr);

// hierarchical_ce + lambda3 Trip(emb_tax) + lambda4 Trip(emb_gen)
// + lambda5 Trip(emb_fam), triplets mined once at `level`.
template <typename T>
Tensor<T> hierarchical_triplet(const model::ModelOutputs<T>& out, std::span<const HierLabel> labels, Level level,
                               const LossWeights& w, Mining mining, CounterRng* rng, LossStats* stats = nullptr,
                               const Taxonomy* taxonomy = nullptr);

// Mean over cross-genus pairs (a, b) of (|e_a - e_b|_p - d_phy[g_a][g_b])^2.
// Zero (and a counted skip) when the batch holds a single genus.
template <typename T>
Tensor<T> phylo_distance_loss(const Tensor<T>& emb_gen, std::span<const std::size_t> genus, const PhyloMatrix& phylo,
                              T p, LossStats* stats = nullptr);

// A loss term evaluated to a non-finite value.
class LossTermError : public NumericError {
 public:
  LossTermError(std::string term, const std::string& what)
      : NumericError("loss term '" + term + "': " + what), term_(std::move(term)) {}
  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

template <typename T>
struct LossResult {
  Tensor<T> total;
  // Unweighted terms in evaluation order, for diagnostics.
  std::vector<std::pair<std::string, Tensor<T>>> terms;
};

struct LossContext {
  LossConfig config;
  const PhyloMatrix* phylo = nullptr;
  const Taxonomy* taxonomy = nullptr;
  std::span<const double> class_weights;
};

// ce: CE_tax. ce+trip: CE_tax + lambda3 Trip_tax at taxon level.
// hier: hierarchical_ce. hier+trip: hierarchical_triplet at
// config.sampling. hier+phylo: hierarchical_ce + lambda_dist L_dist.
template <typename T>
LossResult<T> combined_loss(const model::ModelOutputs<T>& out, std::span<const HierLabel> labels,
                            const LossContext& ctx, CounterRng* rng, LossStats* stats = nullptr);

}  // namespace cvf::losses
