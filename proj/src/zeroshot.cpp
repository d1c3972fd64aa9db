#include "peva/zeroshot.hpp"

#include <algorithm>
#include <cmath>

#include "peva/error.hpp"

namespace peva {

Tensor similarity_matrix(const Tensor& prompts, const Tensor& views) {
  if (prompts.rank() != 2 || views.rank() != 2 || prompts.cols() != views.cols()) {
    throw DimensionError("similarity_matrix dimension mismatch: prompts " + shape_string(prompts.shape()) +
                         " vs views " + shape_string(views.shape()));
  }
  return kernels::matmul_nt(prompts, views);
}

std::vector<double> discriminative_scores(const Tensor& similarity) {
  if (similarity.rank() != 2) throw DimensionError("discriminative_scores expects an N x M matrix");
  const std::size_t n = similarity.rows(), m = similarity.cols();
  std::vector<double> alpha(m);
  for (std::size_t j = 0; j < m; ++j) {
    double mx = similarity(0, j);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx = std::max(mx, similarity(i, j));
      total += similarity(i, j);
    }
    // max ≥ mean in exact arithmetic; clamp the rounding residue of a constant column.
    alpha[j] = std::max(0.0, mx - total / static_cast<double>(n));
  }
  return alpha;
}

std::vector<double> aggregation_weights(std::span<const double> scores) {
  if (scores.empty()) throw DimensionError("aggregation_weights needs at least one score");
  const double mx = *std::max_element(scores.begin(), scores.end());
  std::vector<double> w(scores.size());
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    w[i] = std::exp(scores[i] - mx);
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

AggregationResult aggregate_peva(const Tensor& prompts, const Tensor& views) {
  AggregationResult r;
  r.similarity = similarity_matrix(prompts, views);
  r.scores = discriminative_scores(r.similarity);
  r.weights = aggregation_weights(r.scores);
  const std::size_t d = views.cols();
  r.descriptor.assign(d, 0.0);
  for (std::size_t i = 0; i < views.rows(); ++i) {
    const auto v = views.row(i);
    for (std::size_t k = 0; k < d; ++k) r.descriptor[k] += r.weights[i] * v[k];
  }
  return r;
}

std::vector<double> aggregate_average(const Tensor& views) {
  if (views.rank() != 2 || views.rows() == 0) throw DimensionError("aggregate_average expects an M x D matrix");
  const std::size_t d = views.cols();
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < views.rows(); ++i) {
    const auto v = views.row(i);
    for (std::size_t k = 0; k < d; ++k) mean[k] += v[k];
  }
  for (auto& v : mean) v /= static_cast<double>(views.rows());
  return mean;
}

std::vector<double> zero_shot_logits(const Tensor& prompts, std::span<const double> descriptor, double scale) {
  if (prompts.rank() != 2 || prompts.cols() != descriptor.size()) {
    throw DimensionError("zero_shot_logits dimension mismatch: prompts " + shape_string(prompts.shape()) +
                         " vs descriptor [" + std::to_string(descriptor.size()) + "]");
  }
  if (!(scale > 0.0)) throw std::invalid_argument("logit scale must be positive");
  std::vector<double> logits(prompts.rows());
  for (std::size_t j = 0; j < prompts.rows(); ++j) logits[j] = scale * kernels::dot(prompts.row(j), descriptor);
  return logits;
}

std::size_t predict(std::span<const double> logits) {
  if (logits.empty()) throw DimensionError("predict needs at least one logit");
  // max_element returns the first maximum.
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

}  // namespace peva
