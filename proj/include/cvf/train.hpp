#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cvf/config.hpp"
#include "cvf/losses.hpp"
#include "cvf/model.hpp"
#include "cvf/synth.hpp"
#include "cvf/tensor.hpp"

namespace cvf::train {

// Adaptive moments with decoupled weight decay. For each parameter, at step t:
//   theta <- theta * (1 - lr * wd)            (decayed parameters only)
//   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
//   theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// Decay applies to matrices and kernels (rank >= 2) except v_pos and the
// class token; gains, biases and gates are never decayed.
bool decays(const std::string& name, const Shape& shape);

template <typename T>
class AdamW {
 public:
  AdamW(std::vector<model::NamedTensor<T>>& params, AdamWConfig cfg);
  // Throws NumericError naming the first parameter whose gradient is not
  // finite; no parameter is modified in that case. Missing gradients count
  // as zero.
  void step(double lr);
  void zero_grad();
  std::size_t steps() const noexcept { return t_; }

 private:
  std::vector<model::NamedTensor<T>>* params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<bool> decay_;
  std::size_t t_ = 0;
};

// Linear warmup over `warmup` steps to `peak`, then cosine decay to
// peak * min_ratio at step `total`.
double cosine_lr(double peak, std::size_t step, std::size_t total, std::size_t warmup, double min_ratio);

struct Stage {
  losses::Mode mode = losses::Mode::ce;
  std::size_t epochs = 0;
};

struct TrainConfig {
  std::size_t epochs = 30;  // used when `stages` is empty
  std::vector<Stage> stages;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double min_lr_ratio = 0.01;
  std::size_t warmup_epochs = 1;
  AdamWConfig adamw;
  std::uint64_t seed = 0;
  losses::LossConfig loss;
  // Pixel size images are resized to before the model sees them.
  std::size_t input_res = 64;
  // Copied into the model config by the drivers.
  double dropout = 0.0;
};

void validate(const TrainConfig& cfg);
// Reads train.* and loss.* keys. `train.stages` is "mode:epochs,...".
TrainConfig train_config_from(const KeyValueConfig& kv);
void train_config_to(const TrainConfig& cfg, KeyValueConfig& kv);
std::vector<Stage> effective_stages(const TrainConfig& cfg);

// Images resized to `res` and normalized to (v / 255 - 0.5) / 0.25, laid
// out [N, 3, res, res].
template <typename T>
class ImageBatcher {
 public:
  ImageBatcher(const synth::Dataset& ds, std::size_t res);
  Tensor<T> batch(std::span<const std::size_t> indices) const;
  std::size_t size() const noexcept { return labels_.size(); }
  std::size_t resolution() const noexcept { return res_; }
  const std::vector<HierLabel>& labels() const noexcept { return labels_; }

 private:
  std::size_t res_;
  std::vector<std::vector<T>> pixels_;
  std::vector<HierLabel> labels_;
};

struct ClassMetrics {
  double precision = 0, recall = 0, f1 = 0;
  std::size_t support = 0;
};

// Macro-F1 is the unweighted mean of per-class F1 over all n_classes.
// Any undefined ratio counts as 0, so a class absent from both truth and
// prediction contributes 0.
struct EvalReport {
  double top1 = 0;
  double macro_f1 = 0;
  double mean_loss = 0;  // taxon cross entropy; 0 when not computed
  std::size_t n = 0;
  std::vector<ClassMetrics> per_class;
};

EvalReport classification_metrics(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                                  std::size_t n_classes);

// Taxon-level metrics; no parameter or optimizer state is touched. Throws
// ConfigError on an empty dataset.
template <typename T>
EvalReport evaluate(const model::Conviformer<T>& m, const ImageBatcher<T>& data, std::size_t batch_size = 32);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based across all stages
  std::size_t stage = 0;
  losses::Mode mode = losses::Mode::ce;
  double mean_loss = 0;
  std::vector<std::pair<std::string, double>> term_means;
  double train_top1 = 0;  // running argmax accuracy on training batches
  double lr = 0;          // learning rate of the epoch's last step
  losses::LossStats stats;
  std::optional<EvalReport> eval;
};

struct History {
  std::vector<EpochRecord> epochs;
  std::size_t steps = 0;
};

// Raised when a loss term, the forward pass or a gradient goes non-finite.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(std::size_t epoch, std::size_t batch, std::string term, const std::string& detail);
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }
  const std::string& term() const noexcept { return term_; }

 private:
  std::size_t epoch_, batch_;
  std::string term_;
};

template <typename T>
struct TrainContext {
  const ImageBatcher<T>* eval = nullptr;
  const losses::PhyloMatrix* phylo = nullptr;
  const Taxonomy* taxonomy = nullptr;
  std::vector<double> class_weights;
  std::function<void(const EpochRecord&)> on_epoch;
};

// Mutates the model's parameters in place. Batches are reshuffled every
// epoch; stages whose loss mines triplets draw batches from a
// TripletBatchStream at the configured sampling level so each batch has a
// valid triplet.
template <typename T>
History train(model::Conviformer<T>& m, const ImageBatcher<T>& data, const TrainConfig& cfg,
              const TrainContext<T>& ctx = {});

// patch_count squared at `res`: the attention-matrix size per head.
std::size_t attention_memory_proxy(std::size_t res, const model::ConviformerConfig& cfg);

struct ResolutionConfig {
  synth::SynthSpec spec;
  model::ConviformerConfig model;  // input_res is overwritten per run
  TrainConfig train;               // input_res is overwritten per run
  std::vector<std::size_t> resolutions;
  double test_fraction = 0.3;
};

struct ResolutionPoint {
  std::size_t resolution = 0;
  std::size_t tokens = 0;
  std::size_t attention_proxy = 0;
  double train_top1 = 0;
  EvalReport test;
};

struct ResolutionReport {
  std::vector<ResolutionPoint> points;
};

// Every resolution shares the dataset, split and model seed; lower
// resolutions are bilinear resizes of the generated images.
ResolutionReport resolution_experiment(const ResolutionConfig& cfg,
                                       const std::function<void(std::size_t res, const EpochRecord&)>& on_epoch = {});

// Reads synth.*, model.*, train.*, loss.* and resolution.* keys.
ResolutionConfig resolution_config_from(const KeyValueConfig& kv);

}  // namespace cvf::train
