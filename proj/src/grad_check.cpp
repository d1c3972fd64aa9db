#include "peva/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "peva/error.hpp"

namespace peva {

namespace {

double evaluate(const Objective& objective, std::span<const NamedTensor> params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.constant(p.value));
  const Var out = objective(tape, vars);
  if (out.value().size() != 1) throw DimensionError("grad_check objective must be scalar");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NumericError("grad_check objective evaluated to a non-finite value");
  return v;
}

}  // namespace

GradCheckReport grad_check(const Objective& objective, std::span<const NamedTensor> params,
                           const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw std::invalid_argument("grad_check step must be positive");
  for (const auto& p : params) {
    if (!p.value.all_finite()) throw NumericError("grad_check parameter " + p.name + " is not finite");
  }

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& p : params) vars.push_back(tape.leaf(p.value, true));
    const Var out = objective(tape, vars);
    if (out.value().size() != 1) throw DimensionError("grad_check objective must be scalar");
    if (!std::isfinite(out.value()[0])) throw NumericError("grad_check objective evaluated to a non-finite value");
    tape.backward(out);
    for (const Var& v : vars) analytic.push_back(v.has_grad() ? v.grad() : Tensor::zeros(v.shape()));
  }

  GradCheckReport report;
  std::vector<NamedTensor> probe(params.begin(), params.end());
  double total = 0.0;
  for (std::size_t p = 0; p < probe.size(); ++p) {
    auto values = probe[p].value.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      const double h = options.relative_step ? options.step * std::max(1.0, std::abs(original)) : options.step;
      values[i] = original + h;
      const double up = evaluate(objective, probe);
      values[i] = original - h;
      const double down = evaluate(objective, probe);
      values[i] = original;

      const double numeric = (up - down) / (2.0 * h);
      const double exact = analytic[p][i];
      const double denom = std::max({std::abs(exact), std::abs(numeric), options.denominator_floor});
      const double rel = std::abs(exact - numeric) / denom;
      total += rel;
      ++report.checked;
      if (rel > report.max_rel_err || report.checked == 1) {
        report.max_rel_err = rel;
        report.worst_param = probe[p].name;
        report.worst_index = i;
        report.worst_analytic = exact;
        report.worst_numeric = numeric;
      }
    }
  }
  report.mean_rel_err = report.checked ? total / static_cast<double>(report.checked) : 0.0;
  report.passed = report.max_rel_err <= options.tolerance;
  return report;
}

}  // namespace peva
