#include "cvf/gradsuite.hpp"

#include <utility>

#include "cvf/losses.hpp"
#include "cvf/ops.hpp"
#include "cvf/synth.hpp"

namespace cvf::gradsuite {

namespace {

using Td = Tensor<double>;
using Inputs = std::vector<std::pair<std::string, Td>>;

Td param(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Td::parameter(std::move(shape), std::move(v));
}

// Fixed random weights per output coordinate so no two coordinates
// contribute equally to the scalar.
Td scalarize(const Td& y) {
  CounterRng rng(99);
  std::vector<double> w(y.numel());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return ops::reduce_sum(ops::mul(y, Td(y.shape(), std::move(w))));
}

class Runner {
 public:
  Runner(std::vector<CaseResult>& out, const std::function<void(const CaseResult&)>& cb) : out_(out), cb_(cb) {}

  void operator()(std::string name, const std::function<Td()>& f, Inputs inputs, std::size_t coords = 0) {
    GradCheckOptions o;
    o.coords_per_tensor = coords;
    const auto report = check_gradients<double>(f, std::move(inputs), o);
    CaseResult r;
    r.name = std::move(name);
    r.probes = report.probes.size();
    r.max_rel_err = report.max_rel_err();
    if (const auto* w = report.worst()) r.worst = w->tensor + "[" + std::to_string(w->index) + "]";
    if (cb_) cb_(r);
    out_.push_back(std::move(r));
  }

 private:
  std::vector<CaseResult>& out_;
  const std::function<void(const CaseResult&)>& cb_;
};

void op_cases(Runner& run, CounterRng& rng) {
  {
    auto a = param({5, 7}, rng), b = param({7, 3}, rng);
    run("op.matmul", [&] { return scalarize(ops::matmul(a, b)); }, {{"a", a}, {"b", b}});
    auto a3 = param({2, 3, 4}, rng), b3 = param({4, 5}, rng);
    run("op.matmul.batched", [&] { return scalarize(ops::matmul(a3, b3)); }, {{"a", a3}, {"b", b3}});
  }
  {
    auto a = param({2, 3, 4}, rng), b = param({2, 4, 5}, rng), bt = param({2, 5, 4}, rng);
    run("op.bmm", [&] { return scalarize(ops::bmm(a, b)); }, {{"a", a}, {"b", b}});
    run("op.bmm.transposed", [&] { return scalarize(ops::bmm(a, bt, true)); }, {{"a", a}, {"bt", bt}});
  }
  {
    auto x = param({2, 3, 9, 9}, rng), w = param({4, 3, 3, 3}, rng), b = param({4}, rng);
    run("op.conv2d",
        [&] { return scalarize(ops::conv2d<double>(x, w, b, ops::Conv2dOptions::symmetric(2, 1))); },
        {{"x", x}, {"w", w}, {"b", b}});
    auto xa = param({1, 2, 6, 6}, rng), wa = param({3, 2, 3, 3}, rng);
    const ops::Conv2dOptions asym{2, 0, 0, 1, 1};
    run("op.conv2d.asymmetric", [&] { return scalarize(ops::conv2d<double>(xa, wa, std::nullopt, asym)); },
        {{"x", xa}, {"w", wa}});
  }
  {
    auto x = param({2, 3, 4}, rng, -2, 2);
    for (int axis : {0, 1, 2}) {
      run("op.softmax.axis" + std::to_string(axis), [&] { return scalarize(ops::softmax(x, axis)); }, {{"x", x}});
      run("op.log_softmax.axis" + std::to_string(axis), [&] { return scalarize(ops::log_softmax(x, axis)); },
          {{"x", x}});
    }
  }
  {
    auto x = param({20}, rng, -4, 4);
    run("op.gelu", [&] { return scalarize(ops::gelu(x)); }, {{"x", x}});
    auto p = param({3, 4}, rng, 0.2, 2.0);
    run("op.sigmoid", [&] { return scalarize(ops::sigmoid(x)); }, {{"x", x}});
    run("op.exp", [&] { return scalarize(ops::exp(p)); }, {{"x", p}});
    run("op.log", [&] { return scalarize(ops::log(p)); }, {{"x", p}});
    run("op.scale", [&] { return scalarize(ops::scale(p, 2.5)); }, {{"x", p}});
    run("op.add_scalar", [&] { return scalarize(ops::add_scalar(p, -0.3)); }, {{"x", p}});
    run("op.relu", [&] { return scalarize(ops::relu(ops::add_scalar(p, -1.0))); }, {{"x", p}});
  }
  {
    auto a = param({2, 3, 4}, rng, 0.5, 2.0), b = param({3, 4}, rng, 0.5, 2.0);
    auto c = param({4}, rng, 0.5, 2.0), d = param({2, 3, 4}, rng, 0.5, 2.0);
    run("op.add.broadcast", [&] { return scalarize(ops::add(a, b)); }, {{"a", a}, {"b", b}});
    run("op.sub.broadcast", [&] { return scalarize(ops::sub(a, c)); }, {{"a", a}, {"c", c}});
    run("op.mul", [&] { return scalarize(ops::mul(a, d)); }, {{"a", a}, {"d", d}});
    run("op.div.broadcast", [&] { return scalarize(ops::div(a, b)); }, {{"a", a}, {"b", b}});
  }
  {
    auto x = param({3, 5}, rng, -3, 3), g = param({5}, rng, 0.5, 1.5), b = param({5}, rng);
    run("op.layer_norm", [&] { return scalarize(ops::layer_norm(x, g, b)); }, {{"x", x}, {"g", g}, {"b", b}});
    auto r = param({2, 2, 5, 5}, rng);
    run("op.max_pool2d", [&] { return scalarize(ops::max_pool2d(r, 3, 2)); }, {{"x", r}});
  }
  {
    auto x = param({2, 3, 4}, rng), y = param({2, 1, 4}, rng);
    run("op.reshape", [&] { return scalarize(ops::reshape(x, {6, 4})); }, {{"x", x}});
    run("op.permute", [&] { return scalarize(ops::permute(x, {2, 0, 1})); }, {{"x", x}});
    run("op.transpose", [&] { return scalarize(ops::transpose(x)); }, {{"x", x}});
    run("op.concat", [&] { return scalarize(ops::concat<double>({y, x, y}, 1)); }, {{"x", x}, {"y", y}});
    run("op.slice", [&] { return scalarize(ops::slice(x, 2, 1, 2)); }, {{"x", x}});
    run("op.reduce_sum.axis", [&] { return scalarize(ops::reduce_sum(x, 1)); }, {{"x", x}});
    run("op.reduce_sum", [&] { return ops::reduce_sum(ops::mul(x, x)); }, {{"x", x}});
    run("op.mean.axis", [&] { return scalarize(ops::mean(x, 0)); }, {{"x", x}});
    run("op.mean", [&] { return ops::mean(ops::mul(x, x)); }, {{"x", x}});
  }
  {
    auto table = param({5, 3}, rng), logits = param({4, 5}, rng);
    const std::vector<std::size_t> ids{4, 0, 4, 2};
    run("op.embedding_lookup", [&] { return scalarize(ops::embedding_lookup<double>(table, ids)); },
        {{"table", table}});
    run("op.pick", [&] { return scalarize(ops::pick<double>(logits, ids)); }, {{"x", logits}});
    for (const double p : {1.5, 2.0, 3.0}) {
      run("op.row_norm.p" + std::to_string(p).substr(0, 3), [&] { return scalarize(ops::row_norm(logits, p)); },
          {{"x", logits}});
    }
  }
  {
    auto content = param({2, 3, 4, 4}, rng, 0, 1), positional = param({3, 4, 4}, rng, 0, 1);
    auto gate = param({3}, rng, -2, 2);
    run("op.gated_mix", [&] { return scalarize(ops::gated_mix(content, positional, gate)); },
        {{"content", content}, {"positional", positional}, {"gate", gate}});
    auto x = param({4, 6}, rng);
    run("op.dropout",
        [&] {
          CounterRng mask(5);
          return scalarize(ops::dropout(x, 0.3, mask, true));
        },
        {{"x", x}});
  }
  {
    auto logits = param({5, 4}, rng, -2, 2);
    const std::vector<std::size_t> targets{0, 3, 1, 1, 2};
    const std::vector<double> weights{1.0, 0.5, 2.0, 1.5};
    run("loss.cross_entropy", [&] { return losses::cross_entropy(logits, targets); }, {{"logits", logits}});
    run("loss.cross_entropy.weighted", [&] { return losses::cross_entropy<double>(logits, targets, weights); },
        {{"logits", logits}});
    // Margin large enough that every hinge is active.
    auto a = param({3, 4}, rng), p = param({3, 4}, rng), n = param({3, 4}, rng);
    run("loss.triplet", [&] { return losses::triplet_loss(a, p, n, 10.0); }, {{"a", a}, {"p", p}, {"n", n}});
    auto e = param({5, 3}, rng);
    losses::PhyloMatrix phy{3, {0, 2, 4, 2, 0, 4, 4, 4, 0}};
    const std::vector<std::size_t> genus{0, 1, 2, 0, 1};
    run("loss.phylo", [&] { return losses::phylo_distance_loss(e, genus, phy, 2.0); }, {{"e", e}});
  }
}

// Batch labels with a repeated taxon, a second taxon of the same genus and a
// far taxon, so triplets exist at every sampling level.
std::vector<HierLabel> batch_labels(const Taxonomy& tx, std::size_t batch) {
  const std::size_t n = tx.n_taxa();
  const std::vector<std::size_t> pick{0, 0, 1, n - 1, n / 2, 2};
  std::vector<HierLabel> out;
  for (std::size_t i = 0; i < batch; ++i) out.push_back(tx.label_of(pick[i % pick.size()] % n));
  return out;
}

void model_cases(Runner& run, const SuiteOptions& opts, CounterRng& rng) {
  const auto& cfg = opts.model;
  model::Conviformer<double> m(cfg, opts.seed);
  // Off the initial symmetric point so zero biases and unit gains see generic
  // gradients.
  for (auto& p : m.parameters()) {
    auto d = p.tensor.mutable_data();
    for (auto& v : d) v += 0.05 * rng.normal();
  }
  std::vector<double> pixels(opts.batch * 3 * cfg.input_res * cfg.input_res);
  for (auto& v : pixels) v = rng.normal();
  auto x = Td({opts.batch, 3, cfg.input_res, cfg.input_res}, std::move(pixels));
  x.set_requires_grad(true);

  Inputs inputs{{"x", x}};
  for (const auto& p : m.parameters()) inputs.emplace_back(p.name, p.tensor);

  const auto shapes = m.forward(x);
  std::vector<Td> w;
  for (const auto* t : {&shapes.label_tax, &shapes.label_gen, &shapes.label_fam, &shapes.emb_tax, &shapes.emb_gen,
                        &shapes.emb_fam}) {
    std::vector<double> v(t->numel());
    for (auto& e : v) e = rng.uniform(-1.0, 1.0);
    w.emplace_back(t->shape(), std::move(v));
  }
  run("model.forward",
      [&] {
        const auto o = m.forward(x);
        Td s = ops::reduce_sum(ops::mul(o.label_tax, w[0]));
        const Td* rest[] = {&o.label_gen, &o.label_fam, &o.emb_tax, &o.emb_gen, &o.emb_fam};
        for (std::size_t i = 0; i < 5; ++i) s = ops::add(s, ops::reduce_sum(ops::mul(*rest[i], w[i + 1])));
        return s;
      },
      inputs, opts.coords_per_tensor);

  synth::SynthSpec spec;
  spec.n_family = cfg.n_family;
  spec.n_genus = cfg.n_genus;
  spec.n_taxa = cfg.n_taxa;
  const auto tx = synth::make_taxonomy(spec);
  const auto phy = synth::phylo_matrix(spec, opts.seed);
  const auto labels = batch_labels(tx, opts.batch);

  struct ModeCase {
    losses::Mode mode;
    Level level;
    const char* name;
  };
  for (const auto& mc : {ModeCase{losses::Mode::ce, Level::genus, "model.loss.ce"},
                         ModeCase{losses::Mode::ce_trip, Level::genus, "model.loss.ce+trip"},
                         ModeCase{losses::Mode::hier, Level::genus, "model.loss.hier"},
                         ModeCase{losses::Mode::hier_trip, Level::genus, "model.loss.hier+trip.genus"},
                         ModeCase{losses::Mode::hier_trip, Level::family, "model.loss.hier+trip.family"},
                         ModeCase{losses::Mode::hier_phylo, Level::genus, "model.loss.hier+phylo"}}) {
    losses::LossContext ctx;
    ctx.config.mode = mc.mode;
    ctx.config.sampling = mc.level;
    // A wide margin keeps every hinge active, away from its kink.
    ctx.config.weights.alpha = 50.0;
    ctx.phylo = &phy;
    ctx.taxonomy = &tx;
    run(mc.name,
        [&] {
          CounterRng mine(3);
          return losses::combined_loss(m.forward(x), labels, ctx, &mine).total;
        },
        inputs, opts.coords_per_tensor);
  }
}

}  // namespace

std::vector<CaseResult> run(const SuiteOptions& opts, const std::function<void(const CaseResult&)>& on_case) {
  model::validate(opts.model);
  if (opts.batch < 4) throw ConfigError("gradcheck batch must be at least 4");
  std::vector<CaseResult> out;
  Runner runner(out, on_case);
  CounterRng rng(opts.seed);
  op_cases(runner, rng);
  model_cases(runner, opts, rng);
  return out;
}

SuiteOptions options_from(const KeyValueConfig& kv) {
  SuiteOptions o;
  o.model = model::config_from(kv);
  o.batch = kv.get_size("gradcheck.batch", o.batch);
  o.coords_per_tensor = kv.get_size("gradcheck.coords", o.coords_per_tensor);
  o.seed = kv.get_u64("gradcheck.seed", o.seed);
  return o;
}

}  // namespace cvf::gradsuite
