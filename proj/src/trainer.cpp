#include "peva/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <thread>

#include "peva/error.hpp"
#include "peva/rng.hpp"

namespace peva {

// ---- optimizer -----------------------------------------------------------------

AdamState make_adam_state(std::span<const ParamRef> params) {
  AdamState state;
  for (const auto& p : params) {
    state.first_moment.push_back(Tensor::zeros(p.value->shape()));
    state.second_moment.push_back(Tensor::zeros(p.value->shape()));
  }
  return state;
}

void adam_step(std::span<const ParamRef> params, std::span<const Tensor> grads, AdamState& state,
               const AdamOptions& options) {
  if (grads.size() != params.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size()) {
    throw DimensionError("adam_step: parameter, gradient and moment counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].value->shape() || state.first_moment[i].shape() != grads[i].shape()) {
      throw DimensionError("adam_step: shape mismatch for " + params[i].name);
    }
    if (!grads[i].all_finite()) throw NumericError("non-finite gradient for parameter " + params[i].name);
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(options.beta1, t);
  const double correction2 = 1.0 - std::pow(options.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].value->data();
    auto g = grads[i].data();
    auto m = state.first_moment[i].data();
    auto v = state.second_moment[i].data();
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double grad = options.decoupled ? g[k] : g[k] + options.weight_decay * theta[k];
      m[k] = options.beta1 * m[k] + (1.0 - options.beta1) * grad;
      v[k] = options.beta2 * v[k] + (1.0 - options.beta2) * grad * grad;
      const double m_hat = m[k] / correction1;
      const double v_hat = v[k] / correction2;
      double update = m_hat / (std::sqrt(v_hat) + options.eps);
      if (options.decoupled) update += options.weight_decay * theta[k];
      theta[k] -= options.learning_rate * update;
    }
  }
}

// ---- configuration ---------------------------------------------------------------

void TrainConfig::validate() const {
  if (shots == 0) throw std::invalid_argument("K (shots per class) must be at least 1");
  if (!(adam.learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (!(logit_scale > 0.0)) throw std::invalid_argument("logit scale must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
  }
  if (!(adam.weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be non-negative");
}

std::string format_real(double value) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

std::string EpochLog::to_json() const {
  std::string out = "{\"epoch\":" + std::to_string(epoch) + ",\"loss_cls\":" + format_real(loss_cls) +
                    ",\"loss_fd\":" + format_real(loss_fd) + ",\"loss_total\":" + format_real(loss_total);
  if (test_acc) out += ",\"test_acc\":" + format_real(*test_acc);
  return out + "}";
}

// ---- sampling ------------------------------------------------------------------

FeatureSet sample_k_shot(const FeatureSet& set, std::span<const std::string> categories, std::size_t shots,
                         std::uint64_t seed) {
  if (shots == 0) throw std::invalid_argument("K (shots per class) must be at least 1");
  const std::size_t n = categories.size();
  std::vector<std::vector<std::size_t>> by_class(n);
  for (std::size_t i = 0; i < set.shapes.size(); ++i) {
    const auto label = set.shapes[i].label_index;
    if (label >= n) {
      throw DataError("shape '" + set.shapes[i].shape_id + "' has label " + std::to_string(label) +
                      " outside " + std::to_string(n) + " categories");
    }
    by_class[label].push_back(i);
  }

  Rng rng(seed);
  FeatureSet out;
  out.dim = set.dim;
  out.backbone_tag = set.backbone_tag;
  out.normalized = set.normalized;
  for (std::size_t c = 0; c < n; ++c) {
    auto& pool = by_class[c];
    if (pool.size() < shots) {
      throw InsufficientDataError("class '" + categories[c] + "' has " + std::to_string(pool.size()) +
                                  " samples, fewer than K=" + std::to_string(shots));
    }
    for (std::size_t i = 0; i < shots; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
      std::swap(pool[i], pool[j]);
    }
    std::vector<std::size_t> chosen(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(shots));
    std::sort(chosen.begin(), chosen.end());
    for (std::size_t idx : chosen) out.shapes.push_back(set.shapes[idx]);
  }
  return out;
}

// ---- losses --------------------------------------------------------------------

std::vector<double> few_shot_logits(const Tensor& prompts, std::span<const double> descriptor, double scale) {
  return zero_shot_logits(prompts, descriptor, scale);
}

double classification_loss(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) {
    throw DataError("label " + std::to_string(label) + " out of range for " + std::to_string(logits.size()) + " logits");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double l : logits) total += std::exp(l - mx);
  return mx + std::log(total) - logits[label];
}

double distillation_loss(std::span<const double> few, std::span<const double> zero) {
  if (few.size() != zero.size()) {
    throw DimensionError("distillation_loss dimension mismatch: " + std::to_string(few.size()) + " vs " +
                         std::to_string(zero.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < few.size(); ++i) s += (few[i] - zero[i]) * (few[i] - zero[i]);
  return s;
}

double total_loss(double cls, double fd, bool distill) { return distill ? cls + fd : cls; }

Tensor zero_shot_targets(std::span<const ShapeRecord> shapes, const Tensor& prompts) {
  if (shapes.empty()) throw DimensionError("zero_shot_targets needs at least one shape");
  Tensor out({shapes.size(), prompts.cols()});
  for (std::size_t b = 0; b < shapes.size(); ++b) {
    const auto agg = aggregate_peva(prompts, shapes[b].views);
    std::copy(agg.descriptor.begin(), agg.descriptor.end(), out.row(b).begin());
  }
  return out;
}

FewShotObjective few_shot_objective(const EncoderVars& vars, const EncoderConfig& config, std::span<const Var> views,
                                    Var prompts, std::span<const std::size_t> labels, const Tensor* zero_targets,
                                    double logit_scale) {
  FewShotObjective out;
  out.descriptors = encode_batch(vars, config, views);
  const Var logits = scale(matmul_nt(out.descriptors, prompts), logit_scale);
  out.cls_sum = sum(cross_entropy_rows(logits, labels));
  Var total = out.cls_sum;
  if (zero_targets) {
    out.fd_sum = sum(squared_distance_rows(out.descriptors, *zero_targets));
    total = add(total, out.fd_sum);
  }
  out.objective = scale(total, 1.0 / static_cast<double>(views.size()));
  return out;
}

StepLosses batch_loss_and_grads(const EncoderParams& params, std::span<const ShapeRecord> batch,
                                const Tensor& prompts, double logit_scale, bool distill,
                                std::vector<Tensor>* grads) {
  Tape tape;
  const EncoderVars vars = bind(tape, params, grads != nullptr);
  std::vector<Var> views;
  std::vector<std::size_t> labels;
  views.reserve(batch.size());
  for (const auto& shape : batch) {
    views.push_back(tape.constant(shape.views));
    labels.push_back(shape.label_index);
  }
  // The zero-shot target is a constant: no gradient reaches the aggregation path.
  const Tensor targets = distill ? zero_shot_targets(batch, prompts) : Tensor{};
  const FewShotObjective obj = few_shot_objective(vars, params.config, views, tape.constant(prompts), labels,
                                                  distill ? &targets : nullptr, logit_scale);
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  StepLosses losses;
  losses.cls = obj.cls_sum.value()[0] * inv_batch;
  if (distill) losses.fd = obj.fd_sum.value()[0] * inv_batch;
  losses.total = total_loss(losses.cls, losses.fd, distill);
  if (!std::isfinite(losses.total)) throw NumericError("training loss is not finite");

  if (grads) {
    tape.backward(obj.objective);
    grads->clear();
    EncoderVars::visit(vars, params.config.use_positional_embedding, [&](const std::string&, const Var& v) {
      grads->push_back(v.has_grad() ? v.grad() : Tensor::zeros(v.shape()));
    });
  }
  return losses;
}

// ---- training ------------------------------------------------------------------

namespace {

struct DerivedSeeds {
  std::uint64_t sampling, init, shuffle;
};

DerivedSeeds derive_seeds(std::uint64_t seed) {
  Rng master(seed);
  DerivedSeeds s;
  s.sampling = master.next();
  s.init = master.next();
  s.shuffle = master.next();
  return s;
}

}  // namespace

TrainResult train(const FeatureSet& train_features, const PromptBank& prompts, const TrainConfig& config,
                  const FeatureSet* test_features, const EpochCallback& on_epoch) {
  config.validate();
  prompts.validate();
  if (train_features.shapes.empty()) throw DataError("training set is empty");
  if (train_features.dim != prompts.dim()) {
    throw DimensionError("training features have dimension " + std::to_string(train_features.dim) +
                         " but prompts have " + std::to_string(prompts.dim()));
  }
  const DerivedSeeds seeds = derive_seeds(config.seed);

  TrainResult result;
  result.training_set = sample_k_shot(train_features, prompts.categories, config.shots, seeds.sampling);
  const auto& shapes = result.training_set.shapes;

  EncoderConfig enc = config.encoder;
  if (enc.dim == 0) enc.dim = prompts.dim();
  if (enc.dim != prompts.dim()) throw DimensionError("encoder dim does not match feature dim");
  result.params = init_encoder(enc, seeds.init);

  std::vector<ParamRef> refs;
  result.params.for_each([&refs](const std::string& name, Tensor& t) { refs.push_back({name, &t}); });
  AdamState state = make_adam_state(refs);

  Rng shuffle_rng(seeds.shuffle);
  std::vector<std::size_t> order(shapes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<ShapeRecord> batch;
  std::vector<Tensor> grads;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.below(i))]);
    }
    double sum_cls = 0.0, sum_fd = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      batch.clear();
      for (std::size_t k = start; k < stop; ++k) batch.push_back(shapes[order[k]]);
      const StepLosses losses =
          batch_loss_and_grads(result.params, batch, prompts.features, config.logit_scale, config.distill, &grads);
      adam_step(refs, grads, state, config.adam);
      sum_cls += losses.cls * static_cast<double>(batch.size());
      sum_fd += losses.fd * static_cast<double>(batch.size());
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.loss_cls = sum_cls / static_cast<double>(shapes.size());
    entry.loss_fd = sum_fd / static_cast<double>(shapes.size());
    entry.loss_total = total_loss(entry.loss_cls, entry.loss_fd, config.distill);
    if (test_features) {
      EvalOptions opts;
      opts.logit_scale = config.logit_scale;
      opts.encoder = &result.params;
      entry.test_acc = evaluate(*test_features, prompts, EvalMode::few, opts).accuracy;
    }
    if (on_epoch) on_epoch(entry);
    result.log.push_back(entry);
  }
  return result;
}

// ---- evaluation ----------------------------------------------------------------

std::string to_string(EvalMode mode) {
  switch (mode) {
    case EvalMode::zero_peva: return "zero_peva";
    case EvalMode::zero_avg: return "zero_avg";
    case EvalMode::few: return "few";
  }
  return "unknown";
}

EvalMode parse_eval_mode(const std::string& text) {
  if (text == "zero_peva" || text == "peva") return EvalMode::zero_peva;
  if (text == "zero_avg" || text == "avg") return EvalMode::zero_avg;
  if (text == "few") return EvalMode::few;
  throw std::invalid_argument("unknown evaluation mode '" + text + "'");
}

std::optional<double> EvalReport::class_accuracy(std::size_t c) const {
  if (c >= class_counts.size() || class_counts[c] == 0) return std::nullopt;
  return static_cast<double>(class_correct[c]) / static_cast<double>(class_counts[c]);
}

namespace {

template <typename Fn>
void parallel_chunks(std::size_t count, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    fn(0, count);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (count + threads - 1) / threads;
  for (std::size_t start = 0; start < count; start += chunk) {
    pool.emplace_back([&fn, start, stop = std::min(count, start + chunk)] { fn(start, stop); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace

Tensor descriptors(const FeatureSet& features, const PromptBank& prompts, EvalMode mode, const EvalOptions& options) {
  if (features.shapes.empty()) throw DataError("feature set is empty");
  if (features.dim != prompts.dim()) {
    throw DimensionError("features have dimension " + std::to_string(features.dim) + " but prompts have " +
                         std::to_string(prompts.dim()));
  }
  if (mode == EvalMode::few) {
    if (!options.encoder) throw std::invalid_argument("few-shot evaluation requires encoder parameters");
    if (options.encoder->config.dim != features.dim) {
      throw DimensionError("checkpoint dimension " + std::to_string(options.encoder->config.dim) +
                           " does not match feature dimension " + std::to_string(features.dim));
    }
  }
  const std::size_t n = features.shapes.size();
  Tensor out({n, features.dim});
  parallel_chunks(n, options.threads, [&](std::size_t start, std::size_t stop) {
    if (mode == EvalMode::few) {
      constexpr std::size_t kBlock = 64;
      for (std::size_t b = start; b < stop; b += kBlock) {
        std::vector<Tensor> views;
        for (std::size_t i = b; i < std::min(stop, b + kBlock); ++i) views.push_back(features.shapes[i].views);
        const Tensor enc = encode_many(views, *options.encoder);
        std::copy(enc.data().begin(), enc.data().end(), out.row(b).begin());
      }
      return;
    }
    for (std::size_t i = start; i < stop; ++i) {
      const auto& views = features.shapes[i].views;
      const std::vector<double> d = mode == EvalMode::zero_peva ? aggregate_peva(prompts.features, views).descriptor
                                                                : aggregate_average(views);
      std::copy(d.begin(), d.end(), out.row(i).begin());
    }
  });
  return out;
}

EvalReport evaluate(const FeatureSet& test_features, const PromptBank& prompts, EvalMode mode,
                    const EvalOptions& options) {
  const std::size_t n = prompts.size();
  for (const auto& s : test_features.shapes) {
    if (s.label_index >= n) {
      throw DataError("shape '" + s.shape_id + "' has label " + std::to_string(s.label_index) + " but only " +
                      std::to_string(n) + " categories exist");
    }
  }
  const Tensor desc = descriptors(test_features, prompts, mode, options);

  EvalReport report;
  report.class_counts.assign(n, 0);
  report.class_correct.assign(n, 0);
  report.confusion.assign(n, std::vector<std::size_t>(n, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test_features.shapes.size(); ++i) {
    const auto logits = zero_shot_logits(prompts.features, desc.row(i), options.logit_scale);
    const std::size_t pred = predict(logits);
    const std::size_t label = test_features.shapes[i].label_index;
    report.predictions.push_back(pred);
    ++report.class_counts[label];
    ++report.confusion[label][pred];
    if (pred == label) {
      ++correct;
      ++report.class_correct[label];
    }
  }
  report.accuracy = static_cast<double>(correct) / static_cast<double>(test_features.shapes.size());
  return report;
}

}  // namespace peva
