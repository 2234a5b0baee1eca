#include "cvf/losses.hpp"

#include <cmath>
#include <string>

#include "cvf/errors.hpp"
#include "cvf/ops.hpp"

namespace cvf::losses {

void validate(const LossWeights& w) {
  for (const double v : {w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5, w.alpha, w.lambda_dist}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights and margin must be finite and >= 0");
  }
  if (!(w.p >= 1.0) || !std::isfinite(w.p)) throw ConfigError("loss.p must be a finite norm order >= 1");
}

void PhyloMatrix::validate() const {
  if (d.size() != n * n) throw ConfigError("phylo matrix holds " + std::to_string(d.size()) + " values for n=" + std::to_string(n));
  for (std::size_t i = 0; i < n; ++i) {
    if (at(i, i) != 0.0) throw ConfigError("phylo matrix diagonal must be zero at " + std::to_string(i));
    for (std::size_t j = 0; j < n; ++j) {
      if (!(at(i, j) >= 0.0) || !std::isfinite(at(i, j))) throw ConfigError("phylo distances must be finite and >= 0");
      if (at(i, j) != at(j, i)) {
        throw ConfigError("phylo matrix is not symmetric at (" + std::to_string(i) + ", " + std::to_string(j) + ")");
      }
    }
  }
}

Mode parse_mode(const std::string& s) {
  if (s == "ce") return Mode::ce;
  if (s == "ce+trip") return Mode::ce_trip;
  if (s == "hier") return Mode::hier;
  if (s == "hier+trip") return Mode::hier_trip;
  if (s == "hier+phylo") return Mode::hier_phylo;
  throw ConfigError("unknown loss mode '" + s + "' (ce|ce+trip|hier|hier+trip|hier+phylo)");
}

const char* mode_name(Mode m) noexcept {
  switch (m) {
    case Mode::ce: return "ce";
    case Mode::ce_trip: return "ce+trip";
    case Mode::hier: return "hier";
    case Mode::hier_trip: return "hier+trip";
    case Mode::hier_phylo: return "hier+phylo";
  }
  return "ce";
}

Mining parse_mining(const std::string& s) {
  if (s == "random") return Mining::random;
  if (s == "exhaustive") return Mining::exhaustive;
  throw ConfigError("unknown triplet mining '" + s + "' (random|exhaustive)");
}

LossConfig loss_config_from(const KeyValueConfig& kv) {
  LossConfig c;
  c.mode = parse_mode(kv.get_string("loss.mode", mode_name(c.mode)));
  auto& w = c.weights;
  w.lambda1 = kv.get_double("loss.lambda1", w.lambda1);
  w.lambda2 = kv.get_double("loss.lambda2", w.lambda2);
  w.lambda3 = kv.get_double("loss.lambda3", w.lambda3);
  w.lambda4 = kv.get_double("loss.lambda4", w.lambda4);
  w.lambda5 = kv.get_double("loss.lambda5", w.lambda5);
  w.alpha = kv.get_double("loss.alpha", w.alpha);
  w.p = kv.get_double("loss.p", w.p);
  w.lambda_dist = kv.get_double("loss.lambda_dist", w.lambda_dist);
  c.sampling = parse_level(kv.get_string("loss.sampling", level_name(c.sampling)));
  c.mining = parse_mining(kv.get_string("loss.mining", c.mining == Mining::random ? "random" : "exhaustive"));
  validate(w);
  return c;
}

void loss_config_to(const LossConfig& c, KeyValueConfig& kv) {
  kv.set("loss.mode", mode_name(c.mode));
  const auto& w = c.weights;
  kv.set("loss.lambda1", std::to_string(w.lambda1));
  kv.set("loss.lambda2", std::to_string(w.lambda2));
  kv.set("loss.lambda3", std::to_string(w.lambda3));
  kv.set("loss.lambda4", std::to_string(w.lambda4));
  kv.set("loss.lambda5", std::to_string(w.lambda5));
  kv.set("loss.alpha", std::to_string(w.alpha));
  kv.set("loss.p", std::to_string(w.p));
  kv.set("loss.lambda_dist", std::to_string(w.lambda_dist));
  kv.set("loss.sampling", level_name(c.sampling));
  kv.set("loss.mining", c.mining == Mining::random ? "random" : "exhaustive");
}

std::vector<Triplet> mine_triplets(std::span<const std::size_t> labels, Mining mining, CounterRng* rng) {
  if (mining == Mining::random && !rng) throw ContractError("random triplet mining needs an RNG");
  const std::size_t n = labels.size();
  std::vector<Triplet> out;
  std::vector<std::size_t> pos, neg;
  for (std::size_t a = 0; a < n; ++a) {
    pos.clear();
    neg.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == a) continue;
      (labels[j] == labels[a] ? pos : neg).push_back(j);
    }
    if (pos.empty() || neg.empty()) continue;
    if (mining == Mining::random) {
      const auto p = pos[rng->below(pos.size())];
      const auto q = neg[rng->below(neg.size())];
      out.push_back({a, p, q});
    } else {
      for (const auto p : pos)
        for (const auto q : neg) out.push_back({a, p, q});
    }
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets,
                        std::span<const double> class_weights) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy expects [N, C] logits, got " + to_string(logits.shape()));
  const std::size_t n = logits.dim(0);
  const std::size_t c = logits.dim(1);
  if (targets.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
  }
  if (n == 0) throw DimensionError("cross_entropy on an empty batch");
  if (!class_weights.empty() && class_weights.size() != c) {
    throw DimensionError("cross_entropy: " + std::to_string(class_weights.size()) + " class weights for " +
                         std::to_string(c) + " classes");
  }
  std::vector<T> w(n, T(1));
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= c) {
      throw LabelError("target " + std::to_string(targets[i]) + " out of range for " + std::to_string(c) + " classes");
    }
    if (!class_weights.empty()) w[i] = static_cast<T>(class_weights[targets[i]]);
  }
  const auto nll = ops::pick(ops::log_softmax(logits, -1), targets);
  const auto weighted = class_weights.empty() ? nll : ops::mul(nll, Tensor<T>({n}, std::move(w)));
  return ops::scale(ops::reduce_sum(weighted), T(-1) / static_cast<T>(n));
}

template <typename T>
Tensor<T> triplet_loss(const Tensor<T>& anchor, const Tensor<T>& positive, const Tensor<T>& negative, T alpha) {
  if (anchor.rank() != 2 || anchor.shape() != positive.shape() || anchor.shape() != negative.shape()) {
    throw DimensionError("triplet_loss expects equal [N, D] shapes, got " + to_string(anchor.shape()) + ", " +
                         to_string(positive.shape()) + ", " + to_string(negative.shape()));
  }
  auto sq = [](const Tensor<T>& d) { return ops::reduce_sum(ops::mul(d, d), 1); };
  const auto d_pos = sq(ops::sub(anchor, positive));
  const auto d_neg = sq(ops::sub(anchor, negative));
  return ops::mean(ops::relu(ops::add_scalar(ops::sub(d_pos, d_neg), alpha)));
}

template <typename T>
Tensor<T> triplet_term(const Tensor<T>& emb, const std::vector<Triplet>& triplets, T alpha) {
  if (triplets.empty()) throw SamplingError("no valid triplet in batch");
  std::vector<std::size_t> a, p, n;
  for (const auto& t : triplets) {
    a.push_back(t.anchor);
    p.push_back(t.positive);
    n.push_back(t.negative);
  }
  return triplet_loss(ops::embedding_lookup(emb, a), ops::embedding_lookup(emb, p), ops::embedding_lookup(emb, n), alpha);
}

template <typename T>
Tensor<T> phylo_distance_loss(const Tensor<T>& emb_gen, std::span<const std::size_t> genus, const PhyloMatrix& phylo,
                              T p, LossStats* stats) {
  if (emb_gen.rank() != 2 || emb_gen.dim(0) != genus.size()) {
    throw DimensionError("phylo_distance_loss: embeddings " + to_string(emb_gen.shape()) + " for " +
                         std::to_string(genus.size()) + " genus ids");
  }
  std::vector<std::size_t> left, right;
  std::vector<T> target;
  for (std::size_t a = 0; a < genus.size(); ++a) {
    if (genus[a] >= phylo.n) throw LabelError("genus " + std::to_string(genus[a]) + " outside the phylo matrix");
    for (std::size_t b = a + 1; b < genus.size(); ++b) {
      if (genus[a] == genus[b]) continue;
      left.push_back(a);
      right.push_back(b);
      target.push_back(static_cast<T>(phylo.at(genus[a], genus[b])));
    }
  }
  if (left.empty()) {
    if (stats) ++stats->phylo_skips;
    return Tensor<T>::scalar(T(0));
  }
  if (stats) stats->pairs += left.size();
  const std::size_t m = left.size();
  const auto x = ops::sub(ops::embedding_lookup(emb_gen, left), ops::embedding_lookup(emb_gen, right));
  const auto diff = ops::sub(ops::row_norm(x, p), Tensor<T>({m}, std::move(target)));
  return ops::mean(ops::mul(diff, diff));
}

namespace {

template <typename T>
class Accumulator {
 public:
  // `compute` yields the unweighted term; a non-finite value anywhere in it
  // or in its weighted sum is reported under `name`.
  template <typename F>
  void add(const std::string& name, F&& compute, double weight) {
    try {
      const Tensor<T> term = compute();
      result_.terms.emplace_back(name, term);
      const auto weighted = weight == 1.0 ? term : ops::scale(term, static_cast<T>(weight));
      result_.total = has_total_ ? ops::add(result_.total, weighted) : weighted;
      has_total_ = true;
    } catch (const LossTermError&) {
      throw;
    } catch (const NumericError& e) {
      throw LossTermError(name, e.what());
    }
  }
  LossResult<T> finish() {
    if (!has_total_) result_.total = Tensor<T>::scalar(T(0));
    return std::move(result_);
  }

 private:
  LossResult<T> result_;
  bool has_total_ = false;
};

template <typename T>
void add_hier_ce(Accumulator<T>& acc, const model::ModelOutputs<T>& out, std::span<const HierLabel> labels,
                 const LossWeights& w, std::span<const double> class_weights) {
  acc.add("ce_tax", [&] { return cross_entropy(out.label_tax, level_ids(labels, Level::taxon), class_weights); }, 1.0);
  if (w.lambda1 != 0.0) {
    acc.add("ce_gen", [&] { return cross_entropy(out.label_gen, level_ids(labels, Level::genus)); }, w.lambda1);
  }
  if (w.lambda2 != 0.0) {
    acc.add("ce_fam", [&] { return cross_entropy(out.label_fam, level_ids(labels, Level::family)); }, w.lambda2);
  }
}

template <typename T>
void add_triplets(Accumulator<T>& acc, const model::ModelOutputs<T>& out, std::span<const HierLabel> labels, Level level,
                  const LossWeights& w, Mining mining, CounterRng* rng, LossStats* stats, bool all_heads) {
  const struct {
    const char* name;
    const Tensor<T>* emb;
    double weight;
  } heads[] = {{"trip_tax", &out.emb_tax, w.lambda3}, {"trip_gen", &out.emb_gen, w.lambda4},
               {"trip_fam", &out.emb_fam, w.lambda5}};
  const bool any = heads[0].weight != 0.0 || (all_heads && (heads[1].weight != 0.0 || heads[2].weight != 0.0));
  if (!any) return;
  const auto ids = level_ids(labels, level);
  const auto triplets = mine_triplets(ids, mining, rng);
  if (triplets.empty()) {
    if (stats) ++stats->triplet_skips;
    return;
  }
  if (stats) stats->triplets += triplets.size();
  const T alpha = static_cast<T>(w.alpha);
  for (std::size_t h = 0; h < (all_heads ? 3u : 1u); ++h) {
    if (heads[h].weight != 0.0) {
      acc.add(heads[h].name, [&] { return triplet_term(*heads[h].emb, triplets, alpha); }, heads[h].weight);
    }
  }
}

void check_labels(std::span<const HierLabel> labels, const Taxonomy* taxonomy) {
  if (taxonomy) taxonomy->check(labels);
}

}  // namespace

template <typename T>
Tensor<T> hierarchical_ce(const model::ModelOutputs<T>& out, std::span<const HierLabel> labels, const LossWeights& w,
                          const Taxonomy* taxonomy) {
  check_labels(labels, taxonomy);
  Accumulator<T> acc;
  add_hier_ce(acc, out, labels, w, {});
  return acc.finish().total;
}

template <typename T>
Tensor<T> hierarchical_triplet(const model::ModelOutputs<T>& out, std::span<const HierLabel> labels, Level level,
                               const LossWeights& w, Mining mining, CounterRng* rng, LossStats* stats,
                               const Taxonomy* taxonomy) {
  check_labels(labels, taxonomy);
  Accumulator<T> acc;
  add_hier_ce(acc, out, labels, w, {});
  add_triplets(acc, out, labels, level, w, mining, rng, stats, true);
  return acc.finish().total;
}

template <typename T>
LossResult<T> combined_loss(const model::ModelOutputs<T>& out, std::span<const HierLabel> labels,
                            const LossContext& ctx, CounterRng* rng, LossStats* stats) {
  const auto& cfg = ctx.config;
  const auto& w = cfg.weights;
  validate(w);
  check_labels(labels, ctx.taxonomy);
  Accumulator<T> acc;
  switch (cfg.mode) {
    case Mode::ce:
      acc.add("ce_tax", [&] { return cross_entropy(out.label_tax, level_ids(labels, Level::taxon), ctx.class_weights); },
              1.0);
      break;
    case Mode::ce_trip:
      acc.add("ce_tax", [&] { return cross_entropy(out.label_tax, level_ids(labels, Level::taxon), ctx.class_weights); },
              1.0);
      add_triplets(acc, out, labels, Level::taxon, w, cfg.mining, rng, stats, false);
      break;
    case Mode::hier:
      add_hier_ce(acc, out, labels, w, ctx.class_weights);
      break;
    case Mode::hier_trip:
      add_hier_ce(acc, out, labels, w, ctx.class_weights);
      add_triplets(acc, out, labels, cfg.sampling, w, cfg.mining, rng, stats, true);
      break;
    case Mode::hier_phylo: {
      if (!ctx.phylo) throw ConfigError("loss mode hier+phylo needs a phylogenetic distance matrix");
      add_hier_ce(acc, out, labels, w, ctx.class_weights);
      const auto genus = level_ids(labels, Level::genus);
      acc.add("dist", [&] { return phylo_distance_loss(out.emb_gen, genus, *ctx.phylo, static_cast<T>(w.p), stats); },
              w.lambda_dist);
      break;
    }
  }
  return acc.finish();
}

#define CVF_INSTANTIATE_LOSSES(T)                                                                                     \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, std::span<const std::size_t>, std::span<const double>);      \
  template Tensor<T> triplet_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                       \
  template Tensor<T> triplet_term<T>(const Tensor<T>&, const std::vector<Triplet>&, T);                              \
  template Tensor<T> hierarchical_ce<T>(const model::ModelOutputs<T>&, std::span<const HierLabel>, const LossWeights&, \
                                        const Taxonomy*);                                                            \
  template Tensor<T> hierarchical_triplet<T>(const model::ModelOutputs<T>&, std::span<const HierLabel>, Level,         \
                                             const LossWeights&, Mining, CounterRng*, LossStats*, const Taxonomy*);   \
  template Tensor<T> phylo_distance_loss<T>(const Tensor<T>&, std::span<const std::size_t>, const PhyloMatrix&, T,   \
                                            LossStats*);                                                             \
  template LossResult<T> combined_loss<T>(const model::ModelOutputs<T>&, std::span<const HierLabel>,                 \
                                          const LossContext&, CounterRng*, LossStats*);

CVF_INSTANTIATE_LOSSES(float)
CVF_INSTANTIATE_LOSSES(double)
#undef CVF_INSTANTIATE_LOSSES

}  // namespace cvf::losses
