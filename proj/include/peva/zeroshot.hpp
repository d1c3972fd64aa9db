#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "peva/tensor.hpp"

namespace peva {

/// Default multiplier on inner-product logits (CLIP convention).
inline constexpr double kDefaultLogitScale = 100.0;

struct AggregationResult {
  std::vector<double> weights;  // length M, on the simplex
  std::vector<double> scores;   // length M, discriminative score per view
  std::vector<double> descriptor;  // length D
  Tensor similarity;               // N×M
};

/// S[i][j] = promptsᵢ · viewsⱼ for prompts[N×D], views[M×D].
Tensor similarity_matrix(const Tensor& prompts, const Tensor& views);

/// Per column of S: max entry minus the mean of all N entries.
std::vector<double> discriminative_scores(const Tensor& similarity);

/// Softmax over the scores.
std::vector<double> aggregation_weights(std::span<const double> scores);

/// Prompt-enhanced view aggregation: views weighted by the softmax of their
/// discriminative scores against the prompt bank.
AggregationResult aggregate_peva(const Tensor& prompts, const Tensor& views);

/// Arithmetic mean of the view rows.
std::vector<double> aggregate_average(const Tensor& views);

/// scale · promptsⱼ · descriptor for every category j.
std::vector<double> zero_shot_logits(const Tensor& prompts, std::span<const double> descriptor,
                                     double scale = kDefaultLogitScale);

/// Index of the largest logit, lowest index on ties.
std::size_t predict(std::span<const double> logits);

}  // namespace peva
