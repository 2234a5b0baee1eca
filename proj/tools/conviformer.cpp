#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cvf/checkpoint.hpp"
#include "cvf/gradsuite.hpp"
#include "cvf/presizer.hpp"
#include "cvf/synth.hpp"
#include "cvf/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cvf;

namespace {

// Records go to stdout one JSON object per line; the summary goes to stderr.
void emit(const json& j) {
  std::cout << j.dump() << '\n';
  std::cout.flush();
}

json eval_json(const train::EvalReport& r) {
  return {{"top1", r.top1}, {"macro_f1", r.macro_f1}, {"mean_loss", r.mean_loss}, {"n", r.n}};
}

json epoch_json(const train::EpochRecord& r) {
  json terms = json::object();
  for (const auto& [name, v] : r.term_means) terms[name] = v;
  json j{{"event", "epoch"},
         {"epoch", r.epoch},
         {"stage", r.stage},
         {"mode", losses::mode_name(r.mode)},
         {"loss", r.mean_loss},
         {"terms", terms},
         {"train_top1", r.train_top1},
         {"lr", r.lr},
         {"triplet_skips", r.stats.triplet_skips},
         {"phylo_skips", r.stats.phylo_skips}};
  if (r.eval) j["eval"] = eval_json(*r.eval);
  return j;
}

int verdict(bool assert_mode, bool ok) { return assert_mode && !ok ? 2 : 0; }

int cmd_presize(const fs::path& in, const fs::path& out, const presizer::PresizeConfig& cfg) {
  presizer::validate(cfg);
  std::vector<std::pair<fs::path, fs::path>> jobs;
  if (fs::is_directory(in)) {
    fs::create_directories(out);
    for (const auto& e : fs::directory_iterator(in))
      if (e.is_regular_file() && e.path().extension() == ".ppm") jobs.emplace_back(e.path(), out / e.path().filename());
    std::sort(jobs.begin(), jobs.end());
  } else {
    jobs.emplace_back(in, out);
  }
  for (const auto& [src, dst] : jobs) {
    const auto img = read_ppm(src);
    const auto res = presizer::presize(img, cfg);
    write_ppm(res, dst);
    emit({{"event", "presize"},
          {"in", src.string()},
          {"out", dst.string()},
          {"from", json::array({img.height(), img.width()})},
          {"to", json::array({res.height(), res.width()})}});
  }
  std::cerr << "presized " << jobs.size() << " image(s) to " << cfg.crop_to << "x" << cfg.crop_to << "\n";
  return 0;
}

int cmd_gen_data(const fs::path& spec_path, const fs::path& out) {
  auto kv = KeyValueConfig::load(spec_path);
  const auto spec = synth::spec_from(kv);
  kv.reject_unknown();
  const auto ds = synth::generate(spec);
  synth::write_dataset(ds, out);
  synth::write_phylo(synth::phylo_matrix(spec, spec.seed), out / "phylo.txt");
  KeyValueConfig saved;
  synth::spec_to(spec, saved);
  std::ofstream(out / "spec.cfg") << saved.dump();
  emit({{"event", "gen-data"},
        {"out", out.string()},
        {"samples", ds.size()},
        {"taxa", ds.taxonomy.n_taxa()},
        {"genera", ds.taxonomy.n_genus()},
        {"families", ds.taxonomy.n_family()}});
  std::cerr << "wrote " << ds.size() << " samples over " << ds.taxonomy.n_taxa() << " taxa to " << out << "\n";
  return 0;
}

model::ConviformerConfig model_for(const KeyValueConfig& kv, const train::TrainConfig& tc, const Taxonomy& tx) {
  auto mc = model::config_from(kv);
  mc.n_taxa = tx.n_taxa();
  mc.n_genus = tx.n_genus();
  mc.n_family = tx.n_family();
  mc.input_res = tc.input_res;
  mc.dropout = tc.dropout;
  return mc;
}

int cmd_train(const fs::path& config, const fs::path& data, const fs::path& out, const std::string& eval_data,
              double threshold, bool assert_mode) {
  auto kv = KeyValueConfig::load(config);
  const auto tc = train::train_config_from(kv);
  const auto ds = synth::read_dataset(data);
  const auto mc = model_for(kv, tc, ds.taxonomy);
  kv.reject_unknown();
  train::validate(tc);

  model::Conviformer<float> m(mc, tc.seed);
  const train::ImageBatcher<float> batcher(ds, tc.input_res);
  std::optional<train::ImageBatcher<float>> eval_batcher;
  if (!eval_data.empty()) eval_batcher.emplace(synth::read_dataset(eval_data), tc.input_res);
  std::optional<losses::PhyloMatrix> phylo;
  if (fs::exists(data / "phylo.txt")) phylo = synth::read_phylo(data / "phylo.txt");

  train::TrainContext<float> ctx;
  ctx.eval = eval_batcher ? &*eval_batcher : nullptr;
  ctx.phylo = phylo ? &*phylo : nullptr;
  ctx.taxonomy = &ds.taxonomy;
  ctx.on_epoch = [](const train::EpochRecord& r) { emit(epoch_json(r)); };
  const auto history = train::train(m, batcher, tc, ctx);

  const auto final_train = train::evaluate(m, batcher);
  checkpoint::Metadata meta;
  KeyValueConfig snapshot;
  model::config_to(mc, snapshot);
  train::train_config_to(tc, snapshot);
  meta.config = snapshot.values();
  meta.seed = tc.seed;
  meta.epoch = history.epochs.size();
  checkpoint::save(checkpoint::from_model(m, meta), out);

  const bool ok = final_train.top1 >= threshold;
  json summary{{"event", "summary"},
               {"checkpoint", out.string()},
               {"epochs", history.epochs.size()},
               {"steps", history.steps},
               {"train", eval_json(final_train)},
               {"threshold", threshold},
               {"pass", ok}};
  if (eval_batcher) summary["eval"] = eval_json(train::evaluate(m, *eval_batcher));
  emit(summary);
  std::fprintf(stderr, "trained %zu epochs (%zu steps); train top-1 %.4f, macro-F1 %.4f; %s threshold %.3f\n",
               history.epochs.size(), history.steps, final_train.top1, final_train.macro_f1,
               ok ? "meets" : "misses", threshold);
  return verdict(assert_mode, ok);
}

int cmd_eval(const fs::path& ckpt, const fs::path& data, double threshold, bool assert_mode) {
  const auto bundle = checkpoint::load(ckpt);
  KeyValueConfig kv;
  for (const auto& [k, v] : bundle.metadata.config) kv.set(k, v);
  const auto mc = model::config_from(kv);
  const auto res = kv.get_size("train.input_res", mc.input_res);
  model::Conviformer<float> m(mc, bundle.metadata.seed);
  checkpoint::load_into(m, bundle, true);
  const auto ds = synth::read_dataset(data);
  if (ds.taxonomy.n_taxa() > mc.n_taxa)
    throw LabelError("dataset has " + std::to_string(ds.taxonomy.n_taxa()) + " taxa, checkpoint head has " +
                     std::to_string(mc.n_taxa));
  const train::ImageBatcher<float> batcher(ds, res);
  const auto r = train::evaluate(m, batcher);
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& pc = r.per_class[c];
    emit({{"event", "class"},
          {"taxon", c},
          {"precision", pc.precision},
          {"recall", pc.recall},
          {"f1", pc.f1},
          {"support", pc.support}});
  }
  const bool ok = r.top1 >= threshold;
  auto summary = eval_json(r);
  summary["event"] = "summary";
  summary["threshold"] = threshold;
  summary["pass"] = ok;
  emit(summary);
  std::fprintf(stderr, "evaluated %zu samples at %zu px: top-1 %.4f, macro-F1 %.4f, mean CE %.4f\n", r.n, res, r.top1,
               r.macro_f1, r.mean_loss);
  return verdict(assert_mode, ok);
}

int cmd_resolution(const fs::path& spec_path, const std::string& config, std::vector<std::size_t> resolutions,
                   std::vector<std::uint64_t> seeds, bool assert_mode) {
  auto kv = KeyValueConfig::load(spec_path);
  if (!config.empty()) {
    const auto extra = KeyValueConfig::load(config);
    for (const auto& [k, v] : extra.values())
      if (!kv.has(k)) kv.set(k, v);
  }
  auto rc = train::resolution_config_from(kv);
  kv.reject_unknown();
  if (!resolutions.empty()) rc.resolutions = resolutions;
  if (rc.resolutions.size() < 2) throw ConfigError("--resolutions needs at least two entries");
  if (seeds.empty()) seeds.push_back(rc.spec.seed);
  std::sort(rc.resolutions.begin(), rc.resolutions.end());

  bool ok = true;
  std::string table;
  for (const auto seed : seeds) {
    auto run = rc;
    run.spec.seed = seed;
    run.train.seed = seed;
    const auto report = train::resolution_experiment(run, [&](std::size_t res, const train::EpochRecord& r) {
      auto j = epoch_json(r);
      j["seed"] = seed;
      j["resolution"] = res;
      emit(j);
    });
    for (std::size_t i = 0; i < report.points.size(); ++i) {
      const auto& p = report.points[i];
      emit({{"event", "point"},
            {"seed", seed},
            {"resolution", p.resolution},
            {"tokens", p.tokens},
            {"attention_proxy", p.attention_proxy},
            {"train_top1", p.train_top1},
            {"test", eval_json(p.test)}});
      char line[160];
      std::snprintf(line, sizeof line, "  seed %-4llu res %-5zu tokens %-5zu train %.3f  test top-1 %.3f  F1 %.3f\n",
                    static_cast<unsigned long long>(seed), p.resolution, p.tokens, p.train_top1, p.test.top1,
                    p.test.macro_f1);
      table += line;
    }
    // Directional claim: the highest resolution beats every resolution at
    // most a quarter of its size.
    const auto& hi = report.points.back();
    for (const auto& p : report.points)
      if (4 * p.resolution <= hi.resolution && !(hi.test.top1 > p.test.top1)) ok = false;
  }
  emit({{"event", "summary"}, {"seeds", seeds.size()}, {"pass", ok}});
  std::cerr << "resolution experiment\n" << table << (ok ? "trend holds" : "trend violated") << " across "
            << seeds.size() << " seed(s)\n";
  return verdict(assert_mode, ok);
}

int cmd_gradcheck(const fs::path& config, double tol, bool assert_mode) {
  auto kv = KeyValueConfig::load(config);
  const auto opts = gradsuite::options_from(kv);
  kv.reject_unknown();
  double worst = 0;
  std::string worst_name;
  std::size_t failed = 0;
  const auto results = gradsuite::run(opts, [&](const gradsuite::CaseResult& r) {
    emit({{"event", "case"},
          {"name", r.name},
          {"probes", r.probes},
          {"max_rel_err", r.max_rel_err},
          {"worst", r.worst},
          {"pass", r.max_rel_err < tol}});
    if (r.max_rel_err >= tol) ++failed;
    if (r.max_rel_err >= worst) {
      worst = r.max_rel_err;
      worst_name = r.name;
    }
  });
  emit({{"event", "summary"}, {"cases", results.size()}, {"failed", failed}, {"max_rel_err", worst}, {"pass", !failed}});
  std::fprintf(stderr, "gradcheck: %zu cases, %zu above tolerance %.1e; worst %.3e (%s)\n", results.size(), failed, tol,
               worst, worst_name.c_str());
  return verdict(assert_mode, failed == 0);
}

int cmd_convert(const fs::path& in, const fs::path& out, const std::string& direction) {
  const auto dir = checkpoint::parse_direction(direction);
  const auto conv = checkpoint::convert(checkpoint::load(in), dir);
  checkpoint::save(conv.bundle, out);
  emit({{"event", "convert"},
        {"direction", checkpoint::direction_name(dir)},
        {"kept", conv.bundle.size()},
        {"dropped", conv.dropped}});
  std::cerr << "converted " << in << " -> " << out << ": kept " << conv.bundle.size() << ", dropped "
            << conv.dropped.size() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conviformer on synthetic herbarium data"};
  app.require_subcommand(1);

  auto* presize = app.add_subcommand("presize", "Strip border, mirror to square, resize and crop PPM images");
  std::string pin, pout;
  presizer::PresizeConfig pcfg;
  presize->add_option("--in", pin, "Input PPM file or directory")->required();
  presize->add_option("--out", pout, "Output PPM file or directory")->required();
  presize->add_option("--border", pcfg.border_px, "Border pixels stripped from each side")->capture_default_str();
  presize->add_option("--resize", pcfg.resize_to, "Square side after padding")->capture_default_str();
  presize->add_option("--crop", pcfg.crop_to, "Center crop side")->capture_default_str();

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset and its phylogenetic matrix");
  std::string gspec, gout;
  gen->add_option("--spec", gspec, "Synth spec config file")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", gout, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a Conviformer and write a checkpoint");
  std::string tconf, tdata, tout, teval;
  double tthr = 0.95;
  tr->add_option("--config", tconf, "model.*, train.* and loss.* config file")->required()->check(CLI::ExistingFile);
  tr->add_option("--data", tdata, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", tout, "Checkpoint path")->required();
  tr->add_option("--eval-data", teval, "Dataset evaluated after every epoch")->check(CLI::ExistingDirectory);
  tr->add_option("--threshold", tthr, "Minimum final train top-1")->capture_default_str();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string eckpt, edata;
  double ethr = 0.0;
  ev->add_option("--ckpt", eckpt, "Checkpoint path")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", edata, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--threshold", ethr, "Minimum top-1")->capture_default_str();

  auto* rx = app.add_subcommand("resolution-exp", "Train at several input resolutions on one split");
  std::string rspec, rconf;
  std::vector<std::size_t> rres;
  std::vector<std::uint64_t> rseeds;
  rx->add_option("--spec", rspec, "Config with synth.* keys (may also hold model/train keys)")
      ->required()
      ->check(CLI::ExistingFile);
  rx->add_option("--config", rconf, "Extra model/train/loss config; --spec keys win")->check(CLI::ExistingFile);
  rx->add_option("--resolutions", rres, "Comma-separated input sizes")->delimiter(',');
  rx->add_option("--seeds", rseeds, "Comma-separated seeds for data and training")->delimiter(',');

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every op, the model and each loss mode");
  std::string gconf;
  double gtol = 1e-3;
  gc->add_option("--config", gconf, "model.* and gradcheck.* config file")->required()->check(CLI::ExistingFile);
  gc->add_option("--tol", gtol, "Relative error tolerance")->capture_default_str();

  auto* cv = app.add_subcommand("convert", "Convert checkpoints between plain and Conviformer layouts");
  std::string cin, cout, cdir;
  cv->add_option("--in", cin, "Source checkpoint")->required()->check(CLI::ExistingFile);
  cv->add_option("--out", cout, "Destination checkpoint")->required();
  cv->add_option("--direction", cdir, "base-to-conviformer or conviformer-to-base")->required();

  bool assert_mode = false;
  for (auto* sub : {tr, ev, rx, gc}) sub->add_flag("--assert", assert_mode, "Exit nonzero when a threshold fails");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*presize) return cmd_presize(pin, pout, pcfg);
    if (*gen) return cmd_gen_data(gspec, gout);
    if (*tr) return cmd_train(tconf, tdata, tout, teval, tthr, assert_mode);
    if (*ev) return cmd_eval(eckpt, edata, ethr, assert_mode);
    if (*rx) return cmd_resolution(rspec, rconf, rres, rseeds, assert_mode);
    if (*gc) return cmd_gradcheck(gconf, gtol, assert_mode);
    if (*cv) return cmd_convert(cin, cout, cdir);
  } catch (const cvf::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
