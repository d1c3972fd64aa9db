#pragma once

// PEVF containers and the dataset manifest.
//
// Container layout (all integers unsigned 32-bit little-endian, all reals
// IEEE-754 binary32 little-endian, row-major):
//
//   "PEVF" | version=1 | kind (1 byte) | D | record count
//   kind 1 (views):      per record  id_len | id (UTF-8) | label | M | M·D reals
//   kind 2 (prompts):    per record  id_len | id (UTF-8) | D reals
//   kind 3 (parameters): per record  name_len | name | rank | extents… | ∏extents reals
//
// Parameter records are written in lexicographic name order.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "peva/tensor.hpp"

namespace peva {

inline constexpr std::uint32_t kContainerVersion = 1;

enum class ContainerKind : std::uint8_t { views = 1, prompts = 2, parameters = 3 };

struct ShapeRecord {
  std::string shape_id;
  std::uint32_t label_index = 0;
  Tensor views;  // M×D
};

struct FeatureSet {
  std::vector<ShapeRecord> shapes;
  std::size_t dim = 0;
  std::string backbone_tag;
  bool normalized = false;

  void validate() const;
  std::size_t size() const noexcept { return shapes.size(); }
};

struct PromptBank {
  std::vector<std::string> categories;
  std::string template_text;
  Tensor features;  // N×D

  void validate() const;
  std::size_t size() const noexcept { return categories.size(); }
  std::size_t dim() const noexcept { return features.cols(); }
};

struct ParameterSet {
  std::size_t dim = 0;
  std::vector<NamedTensor> tensors;
};

using Container = std::variant<FeatureSet, PromptBank, ParameterSet>;

std::vector<std::uint8_t> encode_container(const Container& container);
Container decode_container(std::span<const std::uint8_t> bytes);

void write_container(const Container& container, const std::filesystem::path& path);
Container read_container(const std::filesystem::path& path);

FeatureSet read_views(const std::filesystem::path& path);
PromptBank read_prompts(const std::filesystem::path& path);
ParameterSet read_parameters(const std::filesystem::path& path);

/// Scales each row to unit Euclidean norm. Throws DegenerateInputError on an all-zero row.
Tensor l2_normalize_rows(const Tensor& matrix);

void normalize_in_place(FeatureSet& set);
void normalize_in_place(PromptBank& bank);

struct Manifest {
  std::vector<std::string> categories;
  std::string template_text;
  std::map<std::string, std::filesystem::path> splits;  // resolved against base_dir
  std::filesystem::path prompts;
  bool normalized = false;
  std::string backbone;
  nlohmann::json config = nlohmann::json::object();
  std::filesystem::path base_dir;
};

Manifest read_manifest(const std::filesystem::path& path);
/// Writes paths relative to the manifest's directory when they live beneath it.
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

struct Dataset {
  PromptBank prompts;
  std::map<std::string, FeatureSet> splits;
};

/// Loads the prompt bank and the named splits (all splits when `splits` is empty),
/// L2-normalizing both unless the manifest records that export already did.
Dataset load_dataset(const Manifest& manifest, std::span<const std::string> splits = {});

}  // namespace peva
