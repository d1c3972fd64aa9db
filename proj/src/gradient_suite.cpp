#include "peva/gradient_suite.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "peva/encoder.hpp"
#include "peva/feature_store.hpp"
#include "peva/rng.hpp"
#include "peva/trainer.hpp"

namespace peva {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor t(std::move(shape));
  rng.fill_normal(t.data(), stddev);
  return t;
}

/// x·w over all entries plus 0.1·‖x‖², so each output entry gets a distinct,
/// input-dependent cotangent.
Var weighted_sum(Var x, const Tensor& weights) {
  const std::size_t n = x.value().size();
  Var flat = reshape(x, {1, n});
  Var w = x.tape().constant(weights.reshaped({n, 1}));
  Var quadratic = sum(squared_distance_rows(flat, Tensor::zeros({1, n})));
  return add(sum(matmul(flat, w)), scale(quadratic, 0.1));
}

GradSuiteEntry check(const std::string& name, const Objective& objective, std::vector<NamedTensor> params,
                     GradCheckOptions options) {
  GradSuiteEntry entry{name, options, {}};
  entry.report = grad_check(objective, params, options);
  return entry;
}

struct EncoderCase {
  std::string name;
  EncoderConfig config;
};

GradSuiteEntry check_encoder(const EncoderCase& c, Rng& rng) {
  // Weights well away from initialization scale so the nonlinear paths matter.
  EncoderParams params = init_encoder(c.config, rng.next());
  params.for_each([&rng](const std::string& name, Tensor& t) {
    const bool gain = name.ends_with(".gamma");
    for (auto& v : t.data()) v = (gain ? 1.0 : 0.0) + rng.normal() * (gain ? 0.1 : 0.2);
  });

  const std::size_t d = c.config.dim;
  const std::size_t classes = 4;
  const std::vector<std::size_t> view_counts = {3, 2};
  std::vector<Tensor> views;
  for (std::size_t m : view_counts) views.push_back(l2_normalize_rows(random_tensor({m, d}, rng)));
  const Tensor prompts = l2_normalize_rows(random_tensor({classes, d}, rng));
  const std::vector<std::size_t> labels = {1, 3};
  std::vector<ShapeRecord> shapes;
  for (std::size_t b = 0; b < views.size(); ++b) shapes.push_back({"s" + std::to_string(b), static_cast<std::uint32_t>(labels[b]), views[b]});
  const Tensor targets = zero_shot_targets(shapes, prompts);
  const EncoderConfig config = c.config;

  Objective objective = [&, config](Tape& tape, std::span<const Var> leaves) {
    const EncoderVars vars = assemble_vars(config, leaves);
    std::vector<Var> inputs;
    for (const auto& v : views) inputs.push_back(tape.constant(v));
    return few_shot_objective(vars, config, inputs, tape.constant(prompts), labels, &targets, kDefaultLogitScale)
        .objective;
  };
  GradCheckOptions options;
  options.step = 1e-4;
  options.relative_step = true;
  options.tolerance = 1e-4;
  return check(c.name, objective, params.named(), options);
}

}  // namespace

GradSuiteReport run_gradient_suite(std::uint64_t seed) {
  Rng rng(seed);
  GradSuiteReport report;
  report.seed = seed;

  GradCheckOptions op_options;  // h = 1e-5, tol = 1e-6

  {
    const Tensor w = random_tensor({5, 3}, rng);
    report.entries.push_back(check(
        "matmul",
        [&w](Tape&, std::span<const Var> p) { return weighted_sum(matmul(p[0], p[1]), w); },
        {{"a", random_tensor({5, 7}, rng)}, {"b", random_tensor({7, 3}, rng)}}, op_options));
  }
  {
    const Tensor w = random_tensor({4, 6}, rng);
    report.entries.push_back(check(
        "softmax", [&w](Tape&, std::span<const Var> p) { return weighted_sum(softmax(p[0]), w); },
        {{"x", random_tensor({4, 6}, rng, 2.0)}}, op_options));
    report.entries.push_back(check(
        "softmax_axis0", [&w](Tape&, std::span<const Var> p) { return weighted_sum(softmax(p[0], 0), w); },
        {{"x", random_tensor({4, 6}, rng, 2.0)}}, op_options));
  }
  {
    const Tensor w = random_tensor({4, 8}, rng);
    report.entries.push_back(check(
        "layer_norm",
        [&w](Tape&, std::span<const Var> p) { return weighted_sum(layer_norm(p[0], p[1], p[2]), w); },
        {{"x", random_tensor({4, 8}, rng)}, {"gamma", random_tensor({8}, rng)}, {"beta", random_tensor({8}, rng)}},
        op_options));
  }
  {
    const Tensor w = random_tensor({3, 5}, rng);
    report.entries.push_back(check(
        "gelu", [&w](Tape&, std::span<const Var> p) { return weighted_sum(gelu(p[0]), w); },
        {{"x", random_tensor({3, 5}, rng, 1.5)}}, op_options));
    report.entries.push_back(check(
        "add_bias", [&w](Tape&, std::span<const Var> p) { return weighted_sum(add_bias(p[0], p[1]), w); },
        {{"x", random_tensor({3, 5}, rng)}, {"bias", random_tensor({5}, rng)}}, op_options));
  }
  {
    const std::vector<std::size_t> labels = {2, 0, 4};
    report.entries.push_back(check(
        "classification_loss",
        [&labels](Tape&, std::span<const Var> p) { return sum(cross_entropy_rows(p[0], labels)); },
        {{"logits", random_tensor({3, 5}, rng, 2.0)}}, op_options));
    const Tensor target = random_tensor({3, 6}, rng);
    report.entries.push_back(check(
        "distillation_loss",
        [&target](Tape&, std::span<const Var> p) { return sum(squared_distance_rows(p[0], target)); },
        {{"f_few", random_tensor({3, 6}, rng)}}, op_options));
  }

  {
    // Analytic distillation gradient against its closed form.
    const Tensor few = random_tensor({2, 8}, rng);
    const Tensor zero = random_tensor({2, 8}, rng);
    Tape tape;
    Var f = tape.leaf(few, true);
    tape.backward(sum(squared_distance_rows(f, zero)));
    double worst = 0.0;
    for (std::size_t i = 0; i < few.size(); ++i) {
      worst = std::max(worst, std::abs(f.grad()[i] - 2.0 * (few[i] - zero[i])));
    }
    report.distill_grad_max_abs_err = worst;
  }

  EncoderConfig base;
  base.dim = 8;
  EncoderConfig deep;
  deep.dim = 6;
  deep.proj_width = 8;
  deep.heads = 2;
  deep.mlp_hidden = 10;
  deep.layers = 2;
  EncoderConfig positional = deep;
  positional.layers = 1;
  positional.use_positional_embedding = true;
  positional.max_views = 3;
  for (const EncoderCase& c : {EncoderCase{"encoder_default_widths", base}, EncoderCase{"encoder_two_blocks", deep},
                               EncoderCase{"encoder_positional", positional}}) {
    report.entries.push_back(check_encoder(c, rng));
  }

  report.passed = report.distill_grad_max_abs_err <= report.distill_grad_tolerance;
  for (const auto& e : report.entries) report.passed = report.passed && e.report.passed;
  return report;
}

std::string GradSuiteReport::to_text() const {
  std::ostringstream out;
  out.precision(6);
  out << "gradient suite (seed " << seed << ")\n";
  for (const auto& e : entries) {
    out << (e.report.passed ? "PASS " : "FAIL ") << e.name << ": checked=" << e.report.checked
        << " max_rel_err=" << std::scientific << e.report.max_rel_err << " mean_rel_err=" << e.report.mean_rel_err
        << " tol=" << e.options.tolerance << std::defaultfloat;
    if (!e.report.passed) {
      out << " worst=" << e.report.worst_param << "[" << e.report.worst_index << "] analytic=" << e.report.worst_analytic
          << " numeric=" << e.report.worst_numeric;
    }
    out << "\n";
  }
  out << (distill_grad_max_abs_err <= distill_grad_tolerance ? "PASS " : "FAIL ")
      << "distillation_closed_form: max_abs_err=" << std::scientific << distill_grad_max_abs_err
      << " tol=" << distill_grad_tolerance << std::defaultfloat << "\n";
  out << (passed ? "PASS" : "FAIL") << "\n";
  return out.str();
}

}  // namespace peva
