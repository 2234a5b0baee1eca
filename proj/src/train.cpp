#include "cvf/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "cvf/errors.hpp"
#include "cvf/presizer.hpp"
#include "cvf/tape.hpp"

namespace cvf::train {

namespace {

constexpr std::uint64_t kShuffleStream = 0x73687566ULL;
constexpr std::uint64_t kMiningStream = 0x6d696e65ULL;
constexpr std::uint64_t kDropoutStream = 0x64726f70ULL;
constexpr std::uint64_t kTripletStream = 0x74726970ULL;
constexpr std::uint64_t kSplitSeed = 0x73706c74ULL;

bool mines_triplets(losses::Mode m) { return m == losses::Mode::ce_trip || m == losses::Mode::hier_trip; }

template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  const auto d = logits.data();
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = d.subspan(i * c, c);
    out[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

template <typename T>
double row_nll(std::span<const T> row, std::size_t target) {
  double mx = -1e300;
  for (const auto v : row) mx = std::max(mx, static_cast<double>(v));
  double z = 0;
  for (const auto v : row) z += std::exp(static_cast<double>(v) - mx);
  return mx + std::log(z) - static_cast<double>(row[target]);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  const auto e = s.find_last_not_of(" \t");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

}  // namespace

bool decays(const std::string& name, const Shape& shape) {
  if (shape.size() < 2) return false;
  const auto ends_with = [&](const std::string& suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return !ends_with("v_pos") && name != "cls_token";
}

template <typename T>
AdamW<T>::AdamW(std::vector<model::NamedTensor<T>>& params, AdamWConfig cfg) : params_(&params), cfg_(cfg) {
  if (!(cfg.beta1 >= 0 && cfg.beta1 < 1 && cfg.beta2 >= 0 && cfg.beta2 < 1 && cfg.eps > 0 && cfg.weight_decay >= 0)) {
    throw ConfigError("AdamW needs 0 <= beta < 1, eps > 0 and weight_decay >= 0");
  }
  for (const auto& p : params) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
    decay_.push_back(decays(p.name, p.tensor.shape()));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  auto& params = *params_;
  for (const auto& p : params) {
    for (const auto g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient for '" + p.name + "'");
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const double shrink = 1.0 - lr * cfg_.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& tensor = params[k].tensor;
    const auto grad = tensor.grad();
    auto data = tensor.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
      double theta = static_cast<double>(data[i]);
      if (decay_[k]) theta *= shrink;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      theta -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      data[i] = static_cast<T>(theta);
    }
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : *params_) p.tensor.zero_grad();
}

double cosine_lr(double peak, std::size_t step, std::size_t total, std::size_t warmup, double min_ratio) {
  if (step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const std::size_t span = total > warmup ? total - warmup : 1;
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
  const double floor = peak * min_ratio;
  return floor + 0.5 * (peak - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

void validate(const TrainConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("train config: " + what);
  };
  require(c.batch_size >= 1, "batch_size must be positive");
  require(std::isfinite(c.learning_rate) && c.learning_rate >= 0, "learning_rate must be finite and >= 0");
  require(c.min_lr_ratio >= 0 && c.min_lr_ratio <= 1, "min_lr_ratio must lie in [0, 1]");
  require(c.dropout >= 0 && c.dropout < 1, "dropout must lie in [0, 1)");
  require(c.input_res >= 1, "input_res must be positive");
  require(!effective_stages(c).empty(), "at least one epoch is required");
  for (const auto& s : effective_stages(c)) {
    if (mines_triplets(s.mode)) require(c.batch_size >= 3, "triplet stages need batch_size >= 3");
  }
  losses::validate(c.loss.weights);
}

std::vector<Stage> effective_stages(const TrainConfig& c) {
  std::vector<Stage> out;
  if (c.stages.empty()) {
    if (c.epochs > 0) out.push_back({c.loss.mode, c.epochs});
    return out;
  }
  for (const auto& s : c.stages)
    if (s.epochs > 0) out.push_back(s);
  return out;
}

TrainConfig train_config_from(const KeyValueConfig& kv) {
  TrainConfig c;
  c.loss = losses::loss_config_from(kv);
  c.epochs = kv.get_size("train.epochs", c.epochs);
  c.batch_size = kv.get_size("train.batch_size", c.batch_size);
  c.learning_rate = kv.get_double("train.learning_rate", c.learning_rate);
  c.min_lr_ratio = kv.get_double("train.min_lr_ratio", c.min_lr_ratio);
  c.warmup_epochs = kv.get_size("train.warmup_epochs", c.warmup_epochs);
  c.adamw.beta1 = kv.get_double("train.beta1", c.adamw.beta1);
  c.adamw.beta2 = kv.get_double("train.beta2", c.adamw.beta2);
  c.adamw.eps = kv.get_double("train.eps", c.adamw.eps);
  c.adamw.weight_decay = kv.get_double("train.weight_decay", c.adamw.weight_decay);
  c.seed = kv.get_u64("train.seed", c.seed);
  c.input_res = kv.get_size("train.input_res", c.input_res);
  c.dropout = kv.get_double("train.dropout", c.dropout);
  const auto stages = kv.get_string("train.stages", "");
  std::stringstream ss(stages);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto colon = item.rfind(':');
    if (colon == std::string::npos) throw ConfigError("train.stages entry '" + item + "' is not mode:epochs");
    Stage s;
    s.mode = losses::parse_mode(trim(item.substr(0, colon)));
    try {
      std::size_t used = 0;
      const auto text = trim(item.substr(colon + 1));
      s.epochs = std::stoul(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
    } catch (const std::exception&) {
      throw ConfigError("train.stages entry '" + item + "' has a bad epoch count");
    }
    c.stages.push_back(s);
  }
  validate(c);
  return c;
}

void train_config_to(const TrainConfig& c, KeyValueConfig& kv) {
  losses::loss_config_to(c.loss, kv);
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  kv.set("train.epochs", std::to_string(c.epochs));
  kv.set("train.batch_size", std::to_string(c.batch_size));
  kv.set("train.learning_rate", num(c.learning_rate));
  kv.set("train.min_lr_ratio", num(c.min_lr_ratio));
  kv.set("train.warmup_epochs", std::to_string(c.warmup_epochs));
  kv.set("train.beta1", num(c.adamw.beta1));
  kv.set("train.beta2", num(c.adamw.beta2));
  kv.set("train.eps", num(c.adamw.eps));
  kv.set("train.weight_decay", num(c.adamw.weight_decay));
  kv.set("train.seed", std::to_string(c.seed));
  kv.set("train.input_res", std::to_string(c.input_res));
  kv.set("train.dropout", num(c.dropout));
  std::string stages;
  for (const auto& s : c.stages) {
    stages += (stages.empty() ? "" : ",") + std::string(losses::mode_name(s.mode)) + ":" + std::to_string(s.epochs);
  }
  if (!stages.empty()) kv.set("train.stages", stages);
}

template <typename T>
ImageBatcher<T>::ImageBatcher(const synth::Dataset& ds, std::size_t res) : res_(res) {
  if (res == 0) throw ConfigError("image resolution must be positive");
  pixels_.reserve(ds.size());
  for (const auto& s : ds.samples) {
    const RasterImage img = (s.image.height() == res && s.image.width() == res)
                                ? s.image
                                : presizer::resize(s.image, res, res);
    std::vector<T> px(3 * res * res);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < res; ++y)
        for (std::size_t x = 0; x < res; ++x)
          px[(c * res + y) * res + x] = static_cast<T>((img.at(y, x, c) / 255.0 - 0.5) / 0.25);
    pixels_.push_back(std::move(px));
    labels_.push_back(s.label);
  }
}

template <typename T>
Tensor<T> ImageBatcher<T>::batch(std::span<const std::size_t> indices) const {
  const std::size_t per = 3 * res_ * res_;
  std::vector<T> data;
  data.reserve(indices.size() * per);
  for (const auto i : indices) {
    const auto& px = pixels_.at(i);
    data.insert(data.end(), px.begin(), px.end());
  }
  return Tensor<T>({indices.size(), 3, res_, res_}, std::move(data));
}

EvalReport classification_metrics(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                                  std::size_t n_classes) {
  if (truth.empty()) throw ConfigError("cannot evaluate an empty dataset");
  if (truth.size() != predicted.size()) throw DimensionError("truth and prediction counts differ");
  std::vector<std::size_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= n_classes || predicted[i] >= n_classes) throw LabelError("class id out of range");
    if (truth[i] == predicted[i]) {
      ++tp[truth[i]];
      ++correct;
    } else {
      ++fp[predicted[i]];
      ++fn[truth[i]];
    }
  }
  EvalReport r;
  r.n = truth.size();
  r.top1 = static_cast<double>(correct) / static_cast<double>(r.n);
  r.per_class.resize(n_classes);
  double f1_sum = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    auto& m = r.per_class[c];
    m.support = tp[c] + fn[c];
    m.precision = tp[c] + fp[c] ? static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fp[c]) : 0.0;
    m.recall = m.support ? static_cast<double>(tp[c]) / static_cast<double>(m.support) : 0.0;
    m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    f1_sum += m.f1;
  }
  r.macro_f1 = n_classes ? f1_sum / static_cast<double>(n_classes) : 0.0;
  return r;
}

template <typename T>
EvalReport evaluate(const model::Conviformer<T>& m, const ImageBatcher<T>& data, std::size_t batch_size) {
  if (data.size() == 0) throw ConfigError("cannot evaluate an empty dataset");
  if (batch_size == 0) throw ConfigError("evaluation batch_size must be positive");
  NoGradScope<T> no_grad;
  std::vector<std::size_t> truth, predicted;
  double nll = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const auto out = m.forward(data.batch(idx));
    const auto pred = argmax_rows(out.label_tax);
    const std::size_t c = out.label_tax.dim(1);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto t = data.labels()[idx[k]].taxon;
      truth.push_back(t);
      predicted.push_back(pred[k]);
      nll += row_nll(out.label_tax.data().subspan(k * c, c), t);
    }
  }
  auto r = classification_metrics(truth, predicted, m.config().n_taxa);
  r.mean_loss = nll / static_cast<double>(truth.size());
  return r;
}

TrainingAborted::TrainingAborted(std::size_t epoch, std::size_t batch, std::string term, const std::string& detail)
    : NumericError("training aborted at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                   ", term '" + term + "': " + detail),
      epoch_(epoch),
      batch_(batch),
      term_(std::move(term)) {}

template <typename T>
History train(model::Conviformer<T>& m, const ImageBatcher<T>& data, const TrainConfig& cfg,
              const TrainContext<T>& ctx) {
  validate(cfg);
  if (data.size() == 0) throw ConfigError("cannot train on an empty dataset");
  if (data.resolution() != cfg.input_res) {
    throw ConfigError("batcher resolution " + std::to_string(data.resolution()) + " differs from train.input_res " +
                      std::to_string(cfg.input_res));
  }
  const auto stages = effective_stages(cfg);
  const std::size_t n = data.size();
  const std::size_t batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total_epochs = 0;
  for (const auto& s : stages) total_epochs += s.epochs;
  const std::size_t total_steps = total_epochs * batches_per_epoch;
  const std::size_t warmup_steps = std::min(cfg.warmup_epochs * batches_per_epoch, total_steps);

  // Label-only view for the triplet sampler.
  synth::Dataset labels_only;
  for (const auto& l : data.labels()) labels_only.samples.push_back({RasterImage{}, l});

  AdamW<T> opt(m.parameters(), cfg.adamw);
  CounterRng mining_rng(cfg.seed, kMiningStream);
  CounterRng dropout_rng(cfg.seed, kDropoutStream);
  const CounterRng shuffle_root(cfg.seed, kShuffleStream);

  History history;
  std::size_t epoch = 0;
  for (std::size_t si = 0; si < stages.size(); ++si) {
    const auto& stage = stages[si];
    losses::LossContext lctx{cfg.loss, ctx.phylo, ctx.taxonomy, ctx.class_weights};
    lctx.config.mode = stage.mode;
    std::optional<synth::TripletBatchStream> stream;
    if (mines_triplets(stage.mode)) {
      const Level level = stage.mode == losses::Mode::ce_trip ? Level::taxon : cfg.loss.sampling;
      stream.emplace(labels_only, level, cfg.batch_size, cfg.seed ^ (kTripletStream + si));
    }
    for (std::size_t e = 0; e < stage.epochs; ++e) {
      ++epoch;
      EpochRecord rec;
      rec.epoch = epoch;
      rec.stage = si;
      rec.mode = stage.mode;
      std::vector<std::size_t> order(n);
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      auto shuffle_rng = shuffle_root.fork(epoch);
      shuffle_rng.shuffle(order.begin(), order.end());

      double loss_sum = 0;
      std::size_t seen = 0, correct = 0;
      for (std::size_t b = 0; b < batches_per_epoch; ++b) {
        std::vector<std::size_t> idx;
        if (stream) {
          idx = stream->next();
        } else {
          idx.assign(order.begin() + static_cast<std::ptrdiff_t>(b * cfg.batch_size),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, (b + 1) * cfg.batch_size)));
        }
        std::vector<HierLabel> labels;
        for (const auto i : idx) labels.push_back(data.labels()[i]);

        opt.zero_grad();
        GradTape<T> tape;
        TapeScope<T> scope(tape);
        model::ForwardOptions<T> fo;
        fo.training = true;
        fo.dropout_rng = &dropout_rng;
        model::ModelOutputs<T> out;
        try {
          out = m.forward(data.batch(idx), fo);
        } catch (const NumericError& ex) {
          throw TrainingAborted(epoch, b, "forward", ex.what());
        }
        losses::LossResult<T> loss;
        try {
          loss = losses::combined_loss(out, labels, lctx, &mining_rng, &rec.stats);
        } catch (const losses::LossTermError& ex) {
          throw TrainingAborted(epoch, b, ex.term(), ex.what());
        } catch (const NumericError& ex) {
          throw TrainingAborted(epoch, b, "loss", ex.what());
        }
        try {
          tape.backward(loss.total);
        } catch (const NumericError& ex) {
          throw TrainingAborted(epoch, b, "backward", ex.what());
        }
        const double lr = cosine_lr(cfg.learning_rate, history.steps, total_steps, warmup_steps, cfg.min_lr_ratio);
        try {
          opt.step(lr);
        } catch (const NumericError& ex) {
          throw TrainingAborted(epoch, b, "gradient", ex.what());
        }
        ++history.steps;
        rec.lr = lr;

        loss_sum += static_cast<double>(loss.total.item()) * static_cast<double>(idx.size());
        if (rec.term_means.empty()) {
          for (const auto& [name, t] : loss.terms) rec.term_means.emplace_back(name, 0.0);
        }
        for (const auto& [name, t] : loss.terms) {
          for (auto& [rn, v] : rec.term_means)
            if (rn == name) v += static_cast<double>(t.item()) * static_cast<double>(idx.size());
        }
        const auto pred = argmax_rows(out.label_tax);
        for (std::size_t k = 0; k < idx.size(); ++k) correct += pred[k] == labels[k].taxon;
        seen += idx.size();
      }
      opt.zero_grad();
      rec.mean_loss = loss_sum / static_cast<double>(seen);
      for (auto& [name, v] : rec.term_means) v /= static_cast<double>(seen);
      rec.train_top1 = static_cast<double>(correct) / static_cast<double>(seen);
      if (ctx.eval) rec.eval = evaluate(m, *ctx.eval);
      if (ctx.on_epoch) ctx.on_epoch(rec);
      history.epochs.push_back(std::move(rec));
    }
  }
  return history;
}

std::size_t attention_memory_proxy(std::size_t res, const model::ConviformerConfig& cfg) {
  const auto t = model::patch_count(res, res, cfg);
  return t * t;
}

ResolutionReport resolution_experiment(const ResolutionConfig& cfg,
                                       const std::function<void(std::size_t, const EpochRecord&)>& on_epoch) {
  if (cfg.resolutions.size() < 2) throw ConfigError("resolution experiment needs at least two resolutions");
  const auto ds = synth::generate(cfg.spec);
  const auto split = synth::stratified_split(ds, cfg.test_fraction, cfg.spec.seed ^ kSplitSeed);
  const auto train_ds = synth::subset(ds, split.train);
  const auto test_ds = synth::subset(ds, split.test);
  ResolutionReport report;
  for (const auto res : cfg.resolutions) {
    auto mcfg = cfg.model;
    mcfg.input_res = res;
    mcfg.dropout = cfg.train.dropout;
    mcfg.n_taxa = ds.taxonomy.n_taxa();
    mcfg.n_genus = ds.taxonomy.n_genus();
    mcfg.n_family = ds.taxonomy.n_family();
    model::validate(mcfg);
    auto tcfg = cfg.train;
    tcfg.input_res = res;
    model::Conviformer<float> m(mcfg, tcfg.seed);
    const ImageBatcher<float> train_b(train_ds, res), test_b(test_ds, res);
    TrainContext<float> ctx;
    ctx.taxonomy = &ds.taxonomy;
    if (on_epoch) ctx.on_epoch = [&](const EpochRecord& r) { on_epoch(res, r); };
    train(m, train_b, tcfg, ctx);
    ResolutionPoint p;
    p.resolution = res;
    p.tokens = model::patch_count(res, res, mcfg);
    p.attention_proxy = attention_memory_proxy(res, mcfg);
    p.train_top1 = evaluate(m, train_b).top1;
    p.test = evaluate(m, test_b);
    report.points.push_back(std::move(p));
  }
  return report;
}

ResolutionConfig resolution_config_from(const KeyValueConfig& kv) {
  ResolutionConfig c;
  c.spec = synth::spec_from(kv, "synth.");
  c.model = model::config_from(kv, "model.");
  c.train = train_config_from(kv);
  c.resolutions = kv.get_size_list("resolution.resolutions", {16, 64});
  c.test_fraction = kv.get_double("resolution.test_fraction", c.test_fraction);
  if (c.resolutions.size() < 2) throw ConfigError("resolution.resolutions needs at least two entries");
  return c;
}

template class AdamW<float>;
template class AdamW<double>;
template class ImageBatcher<float>;
template class ImageBatcher<double>;
template EvalReport evaluate<float>(const model::Conviformer<float>&, const ImageBatcher<float>&, std::size_t);
template EvalReport evaluate<double>(const model::Conviformer<double>&, const ImageBatcher<double>&, std::size_t);
template History train<float>(model::Conviformer<float>&, const ImageBatcher<float>&, const TrainConfig&,
                              const TrainContext<float>&);
template History train<double>(model::Conviformer<double>&, const ImageBatcher<double>&, const TrainConfig&,
                               const TrainContext<double>&);

}  // namespace cvf::train
