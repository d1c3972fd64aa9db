#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "peva/encoder.hpp"
#include "peva/feature_store.hpp"
#include "peva/zeroshot.hpp"

namespace peva {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  /// false: λθ is added to the gradient (L2). true: θ is shrunk by lr·λθ after the Adam update.
  bool decoupled = false;
};

struct AdamState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::uint64_t step = 0;
};

struct ParamRef {
  std::string name;
  Tensor* value;
};

AdamState make_adam_state(std::span<const ParamRef> params);

/// One bias-corrected Adam update. Throws NumericError naming the first
/// parameter whose gradient is not finite; nothing is modified in that case.
void adam_step(std::span<const ParamRef> params, std::span<const Tensor> grads, AdamState& state,
               const AdamOptions& options);

struct TrainConfig {
  std::size_t shots = 16;
  std::size_t epochs = 50;
  AdamOptions adam;
  std::size_t batch_size = 32;
  double logit_scale = kDefaultLogitScale;
  std::uint64_t seed = 0;
  bool distill = true;
  /// Encoder shape; `dim` is taken from the features when left at 0.
  EncoderConfig encoder;

  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss_cls = 0.0;
  double loss_fd = 0.0;
  double loss_total = 0.0;
  std::optional<double> test_acc;

  /// Single-line JSON record with 17 significant digits per real.
  std::string to_json() const;
};

struct TrainResult {
  EncoderParams params;
  std::vector<EpochLog> log;
  FeatureSet training_set;  // the sampled K-shot set
};

/// Exactly `shots` shapes per class, drawn by a partial Fisher-Yates shuffle of
/// each class's indices (classes in index order, one Rng(seed) stream), then
/// emitted class by class in on-disk order.
FeatureSet sample_k_shot(const FeatureSet& set, std::span<const std::string> categories, std::size_t shots,
                         std::uint64_t seed);

std::vector<double> few_shot_logits(const Tensor& prompts, std::span<const double> descriptor,
                                    double scale = kDefaultLogitScale);
/// −log softmax(logits)[label], via log-sum-exp.
double classification_loss(std::span<const double> logits, std::size_t label);
/// ‖few − zero‖²
double distillation_loss(std::span<const double> few, std::span<const double> zero);
double total_loss(double cls, double fd, bool distill);

/// Zero-shot descriptors (prompt-enhanced aggregation) of every shape, one row each.
Tensor zero_shot_targets(std::span<const ShapeRecord> shapes, const Tensor& prompts);

struct FewShotObjective {
  Var cls_sum;     // Σ cross-entropy over the batch
  Var fd_sum;      // Σ ‖f_few − f_zero‖², only when distilling
  Var objective;   // mean total loss over the batch
  Var descriptors; // B×D few-shot descriptors
};

/// Records the batch objective on the tape holding `vars`. `zero_targets`
/// (B×D, constant) enables the distillation term when non-null.
FewShotObjective few_shot_objective(const EncoderVars& vars, const EncoderConfig& config, std::span<const Var> views,
                                    Var prompts, std::span<const std::size_t> labels, const Tensor* zero_targets,
                                    double logit_scale);

struct StepLosses {
  double cls = 0.0;
  double fd = 0.0;
  double total = 0.0;
};

/// Mean losses over a batch and the gradient of the mean total w.r.t. every
/// encoder parameter (in EncoderParams::for_each order).
StepLosses batch_loss_and_grads(const EncoderParams& params, std::span<const ShapeRecord> batch,
                                const Tensor& prompts, double logit_scale, bool distill,
                                std::vector<Tensor>* grads);

using EpochCallback = std::function<void(const EpochLog&)>;

/// K-shot sampling, encoder initialization and per-epoch shuffling draw their
/// seeds, in that order, from the first three outputs of Rng(config.seed).
/// Every epoch applies a full Fisher-Yates shuffle (Rng::below) to the sample
/// order, then steps Adam once per consecutive batch.

TrainResult train(const FeatureSet& train_features, const PromptBank& prompts, const TrainConfig& config,
                  const FeatureSet* test_features = nullptr, const EpochCallback& on_epoch = {});

enum class EvalMode { zero_peva, zero_avg, few };

std::string to_string(EvalMode mode);
EvalMode parse_eval_mode(const std::string& text);

struct EvalOptions {
  double logit_scale = kDefaultLogitScale;
  std::size_t threads = 1;
  const EncoderParams* encoder = nullptr;  // required for EvalMode::few
};

struct EvalReport {
  double accuracy = 0.0;
  std::vector<std::size_t> predictions;
  std::vector<std::size_t> class_counts;
  std::vector<std::size_t> class_correct;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]

  std::optional<double> class_accuracy(std::size_t c) const;
};

EvalReport evaluate(const FeatureSet& test_features, const PromptBank& prompts, EvalMode mode,
                    const EvalOptions& options = {});

/// Per-shape descriptors in the given mode (few requires options.encoder).
Tensor descriptors(const FeatureSet& features, const PromptBank& prompts, EvalMode mode,
                   const EvalOptions& options = {});

std::string format_real(double value);

}  // namespace peva
