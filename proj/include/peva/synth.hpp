#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "peva/feature_store.hpp"

namespace peva {

// Synthetic view/prompt features with controllable view quality.
//
// Class prototypes are orthonormalized Gaussian vectors. Prompt j is
// normalize(ρ·p_j + √(1−ρ²)·n_j) with n_j a random unit vector orthogonal to
// p_j. Each view is independently degenerate with probability
// `degenerate_fraction` (a normalized isotropic Gaussian, carrying no class
// signal); otherwise it is normalize(p_label + σ·g) with g ~ N(0, I).
struct SynthConfig {
  std::size_t classes = 10;
  std::size_t views = 8;
  std::size_t dim = 64;
  std::size_t shots = 16;          // training shapes per class
  std::size_t test_per_class = 20;
  double prompt_alignment = 0.9;   // ρ
  double view_noise = 0.3;         // σ
  double degenerate_fraction = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthData {
  FeatureSet train;
  FeatureSet test;
  PromptBank prompts;
  /// Per shape, per view: whether the view was drawn as class-uninformative noise.
  std::vector<std::vector<bool>> train_degenerate;
  std::vector<std::vector<bool>> test_degenerate;
};

/// Deterministic per seed. Throws std::invalid_argument when dim < classes
/// (prototypes cannot be mutually orthogonal).
SynthData generate(const SynthConfig& config);

/// Writes train.pevf, test.pevf, prompts.pevf and manifest.json into `dir`.
/// Returns the manifest path.
std::filesystem::path write_synth(const SynthData& data, const SynthConfig& config, const std::filesystem::path& dir);

}  // namespace peva
