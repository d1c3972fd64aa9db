#include "peva/synth.hpp"

#include <cmath>
#include <cstdio>

#include "peva/error.hpp"
#include "peva/rng.hpp"

namespace peva {

namespace fs = std::filesystem;

void SynthConfig::validate() const {
  if (classes < 2) throw std::invalid_argument("synth needs at least 2 classes");
  if (views == 0 || dim == 0) throw std::invalid_argument("synth views and dim must be positive");
  if (dim < classes) {
    throw std::invalid_argument("capacity error: dim " + std::to_string(dim) + " < classes " + std::to_string(classes) +
                                ", prototypes cannot be orthogonal");
  }
  if (shots == 0 || test_per_class == 0) throw std::invalid_argument("synth needs at least one shape per class and split");
  if (!(prompt_alignment >= 0.0 && prompt_alignment <= 1.0)) throw std::invalid_argument("prompt alignment must lie in [0, 1]");
  if (!(view_noise >= 0.0)) throw std::invalid_argument("view noise must be non-negative");
  if (!(degenerate_fraction >= 0.0 && degenerate_fraction < 1.0)) {
    throw std::invalid_argument("degenerate fraction must lie in [0, 1)");
  }
}

namespace {

void normalize(std::span<double> v) {
  const double norm = std::sqrt(kernels::dot(v, v));
  if (!(norm > 0.0)) throw DegenerateInputError("synth drew a zero vector");
  for (auto& x : v) x /= norm;
}

/// Modified Gram-Schmidt on Gaussian rows; redraws a row whose residual vanishes.
Tensor orthonormal_rows(std::size_t n, std::size_t d, Rng& rng) {
  Tensor basis({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    auto row = basis.row(i);
    for (;;) {
      rng.fill_normal(row);
      for (std::size_t k = 0; k < i; ++k) {
        const auto prev = basis.row(k);
        const double proj = kernels::dot(row, prev);
        for (std::size_t j = 0; j < d; ++j) row[j] -= proj * prev[j];
      }
      if (kernels::dot(row, row) > 1e-12) break;
    }
    normalize(row);
  }
  return basis;
}

FeatureSet make_split(const Tensor& prototypes, const SynthConfig& config, std::size_t per_class, const char* prefix,
                      Rng& rng, std::vector<std::vector<bool>>& degenerate_mask) {
  FeatureSet set;
  set.dim = config.dim;
  set.backbone_tag = "synth";
  set.normalized = true;
  char id[64];
  for (std::size_t c = 0; c < config.classes; ++c) {
    const auto proto = prototypes.row(c);
    for (std::size_t s = 0; s < per_class; ++s) {
      ShapeRecord rec;
      std::snprintf(id, sizeof id, "%s_c%03zu_%04zu", prefix, c, s);
      rec.shape_id = id;
      rec.label_index = static_cast<std::uint32_t>(c);
      rec.views = Tensor({config.views, config.dim});
      auto& mask = degenerate_mask.emplace_back(config.views, false);
      for (std::size_t m = 0; m < config.views; ++m) {
        auto row = rec.views.row(m);
        const bool degenerate = rng.uniform() < config.degenerate_fraction;
        mask[m] = degenerate;
        rng.fill_normal(row);
        if (!degenerate) {
          for (std::size_t j = 0; j < config.dim; ++j) row[j] = proto[j] + config.view_noise * row[j];
        }
        normalize(row);
      }
      set.shapes.push_back(std::move(rec));
    }
  }
  return set;
}

}  // namespace

SynthData generate(const SynthConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const std::size_t n = config.classes, d = config.dim;
  const Tensor prototypes = orthonormal_rows(n, d, rng);

  SynthData data;
  data.prompts.features = Tensor({n, d});
  const double rho = config.prompt_alignment;
  const double off = std::sqrt(std::max(0.0, 1.0 - rho * rho));
  std::vector<double> noise(d);
  for (std::size_t j = 0; j < n; ++j) {
    const auto proto = prototypes.row(j);
    // d ≥ 2 here, so a nonzero orthogonal residual exists almost surely.
    do {
      rng.fill_normal(noise);
      const double proj = kernels::dot(noise, proto);
      for (std::size_t k = 0; k < d; ++k) noise[k] -= proj * proto[k];
    } while (kernels::dot(noise, noise) <= 1e-12);
    normalize(noise);
    auto row = data.prompts.features.row(j);
    for (std::size_t k = 0; k < d; ++k) row[k] = rho * proto[k] + off * noise[k];
    normalize(row);
    char name[32];
    std::snprintf(name, sizeof name, "class_%02zu", j);
    data.prompts.categories.push_back(name);
  }
  data.prompts.template_text = "synthetic {CLASS}";
  data.train = make_split(prototypes, config, config.shots, "train", rng, data.train_degenerate);
  data.test = make_split(prototypes, config, config.test_per_class, "test", rng, data.test_degenerate);
  return data;
}

fs::path write_synth(const SynthData& data, const SynthConfig& config, const fs::path& dir) {
  fs::create_directories(dir);
  write_container(data.train, dir / "train.pevf");
  write_container(data.test, dir / "test.pevf");
  write_container(data.prompts, dir / "prompts.pevf");
  Manifest m;
  m.categories = data.prompts.categories;
  m.template_text = data.prompts.template_text;
  m.splits["train"] = "train.pevf";
  m.splits["test"] = "test.pevf";
  m.prompts = "prompts.pevf";
  m.normalized = true;
  m.backbone = "synth";
  m.config = {{"synth",
               {{"classes", config.classes},
                {"views", config.views},
                {"dim", config.dim},
                {"shots", config.shots},
                {"test_per_class", config.test_per_class},
                {"prompt_alignment", config.prompt_alignment},
                {"view_noise", config.view_noise},
                {"degenerate_fraction", config.degenerate_fraction},
                {"seed", config.seed}}}};
  const fs::path manifest = dir / "manifest.json";
  write_manifest(m, manifest);
  return manifest;
}

}  // namespace peva
