// Runs every acceptance criterion and prints one PASS/FAIL line per
// criterion. Exit status is nonzero if any criterion fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cvf/checkpoint.hpp"
#include "cvf/gradsuite.hpp"
#include "cvf/presizer.hpp"
#include "cvf/synth.hpp"
#include "cvf/train.hpp"
#include "support/attention_oracle.hpp"
#include "support/loss_oracles.hpp"
#include "support/model_fixtures.hpp"
#include "support/presize_reference.hpp"

using namespace cvf;
using cvf::testing::random_tensor;

namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Collects failed sub-checks; the criterion passes only if none failed.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    ++total_;
    if (!ok && failures_.size() < 4) failures_.push_back(what);
    if (!ok) ++failed_;
  }
  Outcome done(const std::string& summary) const {
    if (failed_ == 0) return {true, summary};
    std::string d = std::to_string(failed_) + "/" + std::to_string(total_) + " checks failed:";
    for (const auto& f : failures_) d += " [" + f + "]";
    return {false, d};
  }

 private:
  std::size_t total_ = 0, failed_ = 0;
  std::vector<std::string> failures_;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

KeyValueConfig load_merged(const fs::path& dir, const std::vector<std::string>& files) {
  KeyValueConfig kv;
  for (const auto& f : files) {
    const auto part = KeyValueConfig::load(dir / f);
    for (const auto& [k, v] : part.values()) kv.set(k, v);
  }
  return kv;
}

Outcome patch_counts(const fs::path&) {
  Checks c;
  model::ConviformerConfig vit;
  vit.use_frontend = false;
  const model::ConviformerConfig conv;
  const std::pair<std::size_t, std::size_t> vit_rows[] = {{224, 196}, {448, 784}, {512, 1024}, {600, 1369}};
  const std::pair<std::size_t, std::size_t> conv_rows[] = {{448, 196}, {512, 256}, {600, 324}};
  std::string got;
  for (const auto& [res, want] : vit_rows) {
    const auto n = model::patch_count(res, res, vit);
    c.expect(n == want, "ConViT " + std::to_string(res) + ": " + std::to_string(n));
    got += std::to_string(n) + " ";
  }
  got += "| ";
  for (const auto& [res, want] : conv_rows) {
    const auto n = model::patch_count(res, res, conv);
    c.expect(n == want, "Conviformer " + std::to_string(res) + ": " + std::to_string(n));
    got += std::to_string(n) + " ";
  }
  return c.done("ConViT 224/448/512/600 and Conviformer 448/512/600: " + got);
}

Outcome presizer_pipeline(const fs::path&) {
  Checks c;
  const auto img = cvf::testing::coordinate_image(1000, 700);
  const auto stripped = presizer::strip_border(img, 20);
  c.expect(stripped.height() == 960 && stripped.width() == 660, "strip extent");
  const auto padded = presizer::reflect_pad_to_square(stripped);
  c.expect(padded.height() == 960 && padded.width() == 960, "pad extent");
  std::size_t mirror_bad = 0;
  for (std::size_t k = 0; k < 300; ++k)
    for (std::size_t y = 0; y < 960; ++y)
      for (std::size_t ch = 0; ch < 3; ++ch)
        if (padded.at(y, 660 + k, ch) != padded.at(y, 659 - k, ch)) ++mirror_bad;
  c.expect(mirror_bad == 0, std::to_string(mirror_bad) + " mirror mismatches");
  std::size_t kept_bad = 0;
  for (std::size_t y = 0; y < 960; ++y)
    for (std::size_t x = 0; x < 660; ++x)
      for (std::size_t ch = 0; ch < 3; ++ch)
        if (padded.at(y, x, ch) != stripped.at(y, x, ch)) ++kept_bad;
  c.expect(kept_bad == 0, "original region altered");
  const presizer::PresizeConfig cfg{20, 512, 448};
  const auto out = presizer::presize(img, cfg);
  c.expect(out.height() == 448 && out.width() == 448, "final extent");
  c.expect(out == cvf::testing::reference_presize(img, 20, 512, 448), "differs from straight-line reference");
  return c.done("1000x700 -> 960x660 -> 960x960 (300 mirrored columns) -> 448x448, bitwise equal to reference");
}

Outcome gradient_suite(const fs::path& dir) {
  auto kv = KeyValueConfig::load(dir / "gradcheck.cfg");
  const auto opts = gradsuite::options_from(kv);
  kv.reject_unknown();
  const auto results = gradsuite::run(opts);
  Checks c;
  double worst = 0;
  std::string worst_name;
  std::size_t ops = 0, model_cases = 0;
  for (const auto& r : results) {
    c.expect(r.max_rel_err < 1e-3 && r.probes > 0, r.name + " " + fmt("%.3e", r.max_rel_err) + " at " + r.worst);
    (r.name.rfind("model.", 0) == 0 ? model_cases : ops) += 1;
    if (r.max_rel_err >= worst) {
      worst = r.max_rel_err;
      worst_name = r.name;
    }
  }
  c.expect(model_cases == 7, "expected forward + 6 loss cases");
  return c.done(std::to_string(ops) + " op cases and " + std::to_string(model_cases) +
                " model cases; worst rel err " + fmt("%.2e", worst) + " (" + worst_name + ") < 1e-3");
}

Outcome gpsa_extremes(const fs::path&) {
  Checks c;
  const auto cfg = cvf::testing::tiny_config();
  model::Conviformer<double> m(cfg, 8);
  CounterRng rng(8);
  const auto grid = m.grid_for(cfg.input_res, cfg.input_res);

  // Closed gate: plain content attention, checked against a loop oracle.
  const auto x = random_tensor<double>({2, grid.t_p, cfg.d_emb}, rng);
  model::ForwardOptions<double> closed;
  closed.forced_gate = 0.0;
  const auto gpsa = m.gpsa_attention(0, x, grid, closed);
  const auto oracle = cvf::testing::naive_content_attention(x, m.gpsa_layers()[0].attn, cfg.n_heads);
  double closed_err = 0;
  for (std::size_t i = 0; i < gpsa.numel(); ++i) closed_err = std::max(closed_err, std::abs(gpsa[i] - oracle[i]));
  c.expect(closed_err <= 1e-6, "closed gate err " + fmt("%.2e", closed_err));

  // Open gate: token values permuted and rescaled, attention unchanged.
  std::vector<double> permuted(x.numel() / 2);
  const std::size_t n = grid.t_p, d = cfg.d_emb;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t e = 0; e < d; ++e) permuted[i * d + e] = 3.0 * x[(n - 1 - i) * d + e];
  const Tensor<double> y({1, n, d}, permuted);
  const auto x0 = ops::slice(x, 0, 0, 1);
  model::ForwardOptions<double> open;
  open.forced_gate = 1.0;
  Tensor<double> ax, ay;
  m.gpsa_attention(0, x0, grid, open, &ax);
  m.gpsa_attention(0, y, grid, open, &ay);
  double open_diff = 0;
  for (std::size_t i = 0; i < ax.numel(); ++i) open_diff = std::max(open_diff, std::abs(ax[i] - ay[i]));
  c.expect(ax.numel() == ay.numel() && open_diff == 0.0, "open gate diff " + fmt("%.2e", open_diff));

  // Convolutional init: 9 heads on a 6x6 grid peak at their offsets.
  auto lc = cvf::testing::tiny_config();
  lc.use_frontend = false;
  lc.n_heads = 9;
  lc.d_emb = 576;
  lc.n_gpsa_layers = 1;
  lc.n_sa_layers = 0;
  lc.patch_size = 8;
  lc.base_res = 48;
  lc.input_res = 48;
  lc.locality_strength = 4.0;
  model::Conviformer<double> local(lc, 10);
  const auto g6 = local.grid_for(48, 48);
  const auto pos = local.positional_attention(0, g6);
  const auto offsets = model::head_offsets(9);
  std::size_t interior = 0, peaked = 0;
  for (std::size_t h = 0; h < 9; ++h) {
    const auto [dx, dy] = offsets[h];
    for (std::size_t i = 0; i < g6.t_p; ++i) {
      const int px = static_cast<int>(i % g6.grid_w) + dx;
      const int py = static_cast<int>(i / g6.grid_w) + dy;
      if (px < 0 || py < 0 || px >= static_cast<int>(g6.grid_w) || py >= static_cast<int>(g6.grid_h)) continue;
      ++interior;
      const double* row = &pos[(h * g6.t_p + i) * g6.t_p];
      std::size_t best = 0;
      for (std::size_t j = 1; j < g6.t_p; ++j)
        if (row[j] > row[best]) best = j;
      if (best == static_cast<std::size_t>(py) * g6.grid_w + static_cast<std::size_t>(px)) ++peaked;
    }
  }
  c.expect(interior > 0 && peaked == interior,
           std::to_string(peaked) + "/" + std::to_string(interior) + " patches peak at offset");
  return c.done("closed gate vs oracle " + fmt("%.1e", closed_err) + "; open gate invariant (max diff " +
                fmt("%.1e", open_diff) + "); " + std::to_string(peaked) + "/" + std::to_string(interior) +
                " interior (head, patch) pairs peak at the head offset");
}

Outcome loss_values(const fs::path&) {
  using namespace cvf::testing;
  using namespace cvf::losses;
  Checks c;
  double worst = 0;
  auto near = [&](double got, double want, const std::string& what) {
    const double e = std::abs(got - want);
    worst = std::max(worst, e);
    c.expect(e <= 1e-6, what + " got " + fmt("%.9g", got) + " want " + fmt("%.9g", want));
  };
  for (const std::size_t classes : {2u, 4u, 36u}) {
    const std::vector<std::size_t> y{0, classes - 1, classes / 2};
    near(cross_entropy(Td::full({3, classes}, 0.7), y).item(), std::log(static_cast<double>(classes)),
         "CE uniform C=" + std::to_string(classes));
  }
  CounterRng rng(3);
  const auto a = random_tensor<double>({4, 6}, rng);
  near(triplet_loss(a, a, a, 1.0).item(), 1.0, "triplet degenerate alpha=1");
  near(triplet_loss(a, a, a, 0.8).item(), 0.8, "triplet degenerate alpha=0.8");
  const PhyloMatrix phy2{2, {0, 5, 5, 0}};
  const std::vector<std::size_t> g01{0, 1};
  near(phylo_distance_loss(Td({2, 2}, {0, 0, 3, 4}), g01, phy2, 2.0).item(), 0.0, "phylo exact match");

  const auto tx = small_taxonomy();
  {
    const std::vector<std::size_t> taxa{1, 4, 2, 2, 5};
    const auto out = random_outputs(5, 6, 3, 2, rng);
    LossWeights w;
    w.lambda1 = 0.7;
    w.lambda2 = 1.3;
    near(hierarchical_ce(out, labels_for(tx, taxa), w, &tx).item(),
         ce_oracle(out.label_tax, taxa) + 0.7 * ce_oracle(out.label_gen, {0, 2, 1, 1, 2}) +
             1.3 * ce_oracle(out.label_fam, {0, 1, 0, 0, 1}),
         "hierarchical CE");
  }
  {
    const std::vector<std::size_t> taxa{0, 1, 2, 3, 4, 0};
    const std::vector<std::size_t> genus{0, 0, 1, 1, 2, 0};
    const auto out = random_outputs(6, 6, 3, 2, rng);
    LossWeights w;
    w.lambda3 = 0.5;
    w.lambda5 = 2.0;
    w.alpha = 1.5;
    near(hierarchical_triplet(out, labels_for(tx, taxa), Level::genus, w, Mining::exhaustive, nullptr, nullptr, &tx)
             .item(),
         ce_oracle(out.label_tax, taxa) + ce_oracle(out.label_gen, genus) +
             ce_oracle(out.label_fam, {0, 0, 0, 0, 1, 0}) + 0.5 * exhaustive_triplet_oracle(out.emb_tax, genus, 1.5) +
             exhaustive_triplet_oracle(out.emb_gen, genus, 1.5) +
             2.0 * exhaustive_triplet_oracle(out.emb_fam, genus, 1.5),
         "hierarchical triplet");
  }
  {
    const std::vector<std::size_t> taxa{0, 2, 4, 3};
    const std::vector<std::size_t> genus{0, 1, 2, 1};
    const auto out = random_outputs(4, 6, 3, 2, rng);
    const auto phy = three_genus_phylo();
    LossContext ctx;
    ctx.config.mode = Mode::hier_phylo;
    ctx.phylo = &phy;
    near(combined_loss(out, labels_for(tx, taxa), ctx, nullptr).total.item(),
         ce_oracle(out.label_tax, taxa) + ce_oracle(out.label_gen, genus) + ce_oracle(out.label_fam, {0, 0, 1, 0}) +
             0.1 * phylo_oracle(out.emb_gen, genus, phy, 2.0),
         "hierarchical CE + phylo");
  }
  return c.done("CE uniform = ln C, triplet degenerate = alpha, phylo exact = 0, three compositions; max err " +
                fmt("%.1e", worst));
}

Outcome checkpoint_compat(const fs::path&) {
  using namespace cvf::checkpoint;
  Checks c;
  auto base_cfg = cvf::testing::tiny_config();
  base_cfg.use_frontend = false;
  const model::Conviformer<float> base(base_cfg, 5);
  const auto path = fs::temp_directory_path() / "cvf_acceptance_base.ckpt";
  save(from_model(base), path);
  const auto b = load(path);
  fs::remove(path);
  const auto conv = convert(b, Direction::base_to_conviformer);
  c.expect(conv.dropped == std::vector<std::string>{"patch_embed.proj.weight", "patch_embed.proj.bias"},
           "drop list");
  c.expect(conv.bundle.size() + 2 == b.size(), "entry count");
  std::size_t same = 0;
  for (const auto& e : conv.bundle.entries()) {
    const auto* src = b.find(e.name);
    if (src && src->bytes == e.bytes && src->shape == e.shape && src->dtype == e.dtype) ++same;
  }
  c.expect(same == conv.bundle.size(), "retained bytes differ");

  model::Conviformer<float> target(cvf::testing::tiny_config(), 9);
  const auto report = load_into(target, decode(encode(conv.bundle)));
  std::size_t wrong_fresh = 0;
  for (const auto& n : report.fresh)
    if (n.rfind("frontend.", 0) != 0 && n.rfind("patch_embed.", 0) != 0) ++wrong_fresh;
  c.expect(wrong_fresh == 0 && report.loaded.size() == conv.bundle.size(), "unexpected fresh parameters");
  CounterRng rng(1);
  const auto out = target.forward(random_tensor<float>({2, 3, 64, 64}, rng));
  bool finite = true;
  for (const auto v : out.label_tax.data()) finite &= std::isfinite(v);
  c.expect(out.label_tax.shape() == Shape{2, 36} && finite, "forward output");
  return c.done("dropped " + std::to_string(conv.dropped.size()) + " of " + std::to_string(b.size()) +
                " entries, " + std::to_string(same) + " retained bitwise; loaded " +
                std::to_string(report.loaded.size()) + ", fresh " + std::to_string(report.fresh.size()) +
                ", forward finite");
}

Outcome toy_convergence(const fs::path& dir) {
  auto kv = load_merged(dir, {"tiny.cfg", "synth_toy.cfg"});
  const auto spec = synth::spec_from(kv);
  const auto tc = train::train_config_from(kv);
  auto mc = model::config_from(kv);
  kv.reject_unknown();
  const auto ds = synth::generate(spec);
  mc.n_taxa = ds.taxonomy.n_taxa();
  mc.n_genus = ds.taxonomy.n_genus();
  mc.n_family = ds.taxonomy.n_family();
  mc.input_res = tc.input_res;
  mc.dropout = tc.dropout;
  const train::ImageBatcher<float> data(ds, tc.input_res);

  Checks c;
  c.expect(mc.n_taxa == 8, "subset has " + std::to_string(mc.n_taxa) + " classes");
  c.expect(train::effective_stages(tc).size() == 1 && tc.epochs <= 50, "more than 50 epochs configured");
  std::vector<std::vector<std::uint8_t>> encoded;
  double top1 = 0;
  std::size_t first_epoch = 0;
  for (int run = 0; run < 2; ++run) {
    model::Conviformer<float> m(mc, tc.seed);
    train::TrainContext<float> ctx;
    ctx.taxonomy = &ds.taxonomy;
    std::size_t reached = 0;
    ctx.on_epoch = [&](const train::EpochRecord& r) {
      if (!reached && r.train_top1 >= 0.95) reached = r.epoch;
    };
    train::train(m, data, tc, ctx);
    encoded.push_back(checkpoint::encode(checkpoint::from_model(m)));
    if (run == 0) {
      top1 = train::evaluate(m, data).top1;
      first_epoch = reached;
    }
  }
  c.expect(top1 >= 0.95, "final train top-1 " + fmt("%.4f", top1));
  c.expect(encoded[0] == encoded[1], "two runs differ");
  return c.done(std::to_string(ds.size()) + " samples, 8 classes: train top-1 " + fmt("%.4f", top1) + " after " +
                std::to_string(tc.epochs) + " epochs (running accuracy first >= 0.95 at epoch " +
                std::to_string(first_epoch) + "); second run bitwise identical");
}

Outcome resolution_trend(const fs::path& dir) {
  auto kv = KeyValueConfig::load(dir / "resolution.cfg");
  auto rc = train::resolution_config_from(kv);
  kv.reject_unknown();
  std::sort(rc.resolutions.begin(), rc.resolutions.end());
  const std::size_t hi = rc.resolutions.back(), lo = rc.resolutions.front();
  Checks c;
  c.expect(hi == 4 * lo, "resolutions are not a 4x pair");
  std::string detail;
  for (const std::uint64_t seed : {0u, 1u, 2u}) {
    auto run = rc;
    run.spec.seed = seed;
    run.train.seed = seed;
    const auto report = train::resolution_experiment(run);
    const auto& a = report.points.front();
    const auto& b = report.points.back();
    c.expect(b.test.top1 > a.test.top1, "seed " + std::to_string(seed) + ": " + fmt("%.3f", b.test.top1) +
                                            " <= " + fmt("%.3f", a.test.top1));
    detail += " seed " + std::to_string(seed) + ": " + fmt("%.3f", a.test.top1) + " -> " + fmt("%.3f", b.test.top1) + ";";
  }
  return c.done("test top-1 at " + std::to_string(lo) + " -> " + std::to_string(hi) + " px:" + detail);
}

Outcome attention_footprint(const fs::path&) {
  Checks c;
  model::ConviformerConfig vit;
  vit.use_frontend = false;
  const model::ConviformerConfig conv;
  const auto pv = train::attention_memory_proxy(512, vit);
  const auto pc = train::attention_memory_proxy(512, conv);
  c.expect(pv == 1024u * 1024u, "ConViT proxy " + std::to_string(pv));
  c.expect(pc == 256u * 256u, "Conviformer proxy " + std::to_string(pc));
  c.expect(pc > 0 && pv == 16 * pc, "ratio");
  return c.done("t_p^2 at 512: ConViT " + std::to_string(pv) + ", Conviformer " + std::to_string(pc) + ", ratio " +
                std::to_string(pc ? pv / pc : 0) + "x");
}

struct Criterion {
  const char* id;
  std::function<Outcome(const fs::path&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string config_dir = CVF_CONFIG_DIR;
  std::vector<std::string> only;
  app.add_option("--config-dir", config_dir, "Directory holding the committed configs")->capture_default_str();
  app.add_option("--only", only, "Run only these criterion ids")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {"patch-counts", patch_counts},         {"presizer-pipeline", presizer_pipeline},
      {"gradient-suite", gradient_suite},     {"gpsa-extremes", gpsa_extremes},
      {"loss-values", loss_values},           {"checkpoint-compat", checkpoint_compat},
      {"toy-convergence", toy_convergence},   {"resolution-trend", resolution_trend},
      {"attention-footprint", attention_footprint},
  };
  const std::set<std::string> filter(only.begin(), only.end());
  std::size_t failed = 0, ran = 0;
  for (const auto& cr : criteria) {
    if (!filter.empty() && !filter.count(cr.id)) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = cr.run(config_dir);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failed;
    std::printf("%s %-20s (%7.1fs) %s\n", o.pass ? "PASS" : "FAIL", cr.id, secs, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", ran - failed, ran);
  return failed == 0 && ran > 0 ? 0 : 1;
}
