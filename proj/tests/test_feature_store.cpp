#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "oracles.hpp"
#include "peva/error.hpp"
#include "peva/feature_store.hpp"

using namespace peva;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "peva_unit" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::uint32_t u32_at(const std::vector<std::uint8_t>& b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | static_cast<std::uint32_t>(b[at + 1]) << 8 |
         static_cast<std::uint32_t>(b[at + 2]) << 16 | static_cast<std::uint32_t>(b[at + 3]) << 24;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Values that survive the binary32 round trip unchanged.
Tensor float_exact(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t = testutil::random_matrix(rng, rows, cols);
  for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  return t;
}

FeatureSet small_set(Rng& rng, std::size_t shapes, std::size_t m, std::size_t d) {
  FeatureSet set;
  set.dim = d;
  for (std::size_t i = 0; i < shapes; ++i) {
    set.shapes.push_back({"shape_" + std::to_string(i), static_cast<std::uint32_t>(i % 3), float_exact(rng, m, d)});
  }
  return set;
}

}  // namespace

TEST_SUITE("feature_store") {

TEST_CASE("one shape with two views survives a round trip") {
  Rng rng(1);
  const FeatureSet set = small_set(rng, 1, 2, 4);
  const auto bytes = encode_container(set);
  const auto decoded = std::get<FeatureSet>(decode_container(bytes));
  REQUIRE(decoded.shapes.size() == 1);
  CHECK(decoded.shapes[0].shape_id == "shape_0");
  CHECK(decoded.shapes[0].views == set.shapes[0].views);
  CHECK(encode_container(decoded) == bytes);
}

TEST_CASE("header layout") {
  Rng rng(2);
  PromptBank bank;
  for (int i = 0; i < 40; ++i) bank.categories.push_back("category_" + std::to_string(i));
  bank.features = float_exact(rng, 40, 768);
  const auto b = encode_container(bank);
  CHECK(std::memcmp(b.data(), "PEVF", 4) == 0);
  CHECK(u32_at(b, 4) == 1);
  CHECK(b[8] == 2);
  CHECK(u32_at(b, 9) == 768);
  CHECK(u32_at(b, 13) == 40);
  // first record: id length, id, then 768 binary32 values
  CHECK(u32_at(b, 17) == 10);
  CHECK(b.size() == 17 + 40 * 4 + 10 * 40 + 30 * 1 + 40 * 768 * 4);
}

TEST_CASE("malformed containers report a byte offset") {
  Rng rng(3);
  const auto good = encode_container(small_set(rng, 2, 3, 4));

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_container(bad_magic), FormatError);

  auto bad_version = good;
  bad_version[4] = 2;
  try {
    decode_container(bad_version);
    FAIL("expected format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 4);
  }

  auto bad_kind = good;
  bad_kind[8] = 9;
  try {
    decode_container(bad_kind);
    FAIL("expected format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 8);
  }

  const std::vector<std::uint8_t> truncated(good.begin(), good.end() - 5);
  try {
    decode_container(truncated);
    FAIL("expected format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() > 17);
    CHECK(e.offset() <= truncated.size());
  }

  auto trailing = good;
  trailing.push_back(0);
  try {
    decode_container(trailing);
    FAIL("expected format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == good.size());
  }

  // a view count far beyond the remaining bytes
  auto overflow = good;
  const std::size_t m_at = 17 + 4 + std::strlen("shape_0") + 4;
  overflow[m_at + 3] = 0x7f;
  CHECK_THROWS_AS(decode_container(overflow), FormatError);

  CHECK_THROWS_AS(decode_container(std::vector<std::uint8_t>{'P', 'E'}), FormatError);
}

TEST_CASE("writing is deterministic and rejects empty sets") {
  Rng rng(4);
  const FeatureSet set = small_set(rng, 5, 3, 6);
  const fs::path dir = scratch("determinism");
  write_container(set, dir / "a.pevf");
  write_container(set, dir / "b.pevf");
  CHECK(file_bytes(dir / "a.pevf") == file_bytes(dir / "b.pevf"));
  CHECK(file_bytes(dir / "a.pevf") == encode_container(set));

  FeatureSet empty;
  empty.dim = 4;
  CHECK_THROWS_AS(write_container(empty, dir / "empty.pevf"), FormatError);
  CHECK_FALSE(fs::exists(dir / "empty.pevf"));
}

TEST_CASE("loading preserves on-disk order") {
  Rng rng(5);
  FeatureSet set = small_set(rng, 12, 2, 3);
  std::reverse(set.shapes.begin(), set.shapes.end());
  const auto decoded = std::get<FeatureSet>(decode_container(encode_container(set)));
  for (std::size_t i = 0; i < set.shapes.size(); ++i) CHECK(decoded.shapes[i].shape_id == set.shapes[i].shape_id);
}

TEST_CASE("parameter containers are written in name order") {
  Rng rng(6);
  ParameterSet params;
  params.dim = 3;
  params.tensors = {{"zeta", float_exact(rng, 2, 3)}, {"alpha", float_exact(rng, 1, 3)}};
  params.tensors.push_back({"mid", Tensor::vector({1.0, 2.0, 3.0})});
  const auto bytes = encode_container(params);
  const auto decoded = std::get<ParameterSet>(decode_container(bytes));
  REQUIRE(decoded.tensors.size() == 3);
  CHECK(decoded.tensors[0].name == "alpha");
  CHECK(decoded.tensors[1].name == "mid");
  CHECK(decoded.tensors[1].value.shape() == Shape{3});
  CHECK(decoded.tensors[2].value == params.tensors[0].value);
  CHECK(encode_container(decoded) == bytes);
}

TEST_CASE("l2 normalization") {
  const Tensor t = l2_normalize_rows(Tensor::matrix({{3, 4}}));
  CHECK(t[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(t[1] == doctest::Approx(0.8).epsilon(1e-15));

  Rng rng(7);
  const Tensor r = l2_normalize_rows(testutil::random_matrix(rng, 5, 8));
  for (std::size_t i = 0; i < 5; ++i) {
    const double norm = std::sqrt(kernels::dot(r.row(i), r.row(i)));
    CHECK(std::abs(norm - 1.0) <= 1e-6);
  }
  CHECK(testutil::max_abs_diff(l2_normalize_rows(r).data(), r.data()) <= 1e-7);

  try {
    l2_normalize_rows(Tensor::matrix({{1, 0}, {0, 0}}));
    FAIL("expected degenerate input error");
  } catch (const DegenerateInputError& e) {
    CHECK(std::string(e.what()).find("row 1") != std::string::npos);
  }
}

TEST_CASE("manifest round trip and dataset loading") {
  Rng rng(8);
  const fs::path dir = scratch("manifest");
  fs::create_directories(dir / "data");
  FeatureSet train = small_set(rng, 6, 2, 4);
  write_container(train, dir / "data" / "train.pevf");
  PromptBank bank;
  bank.categories = {"a", "b", "c"};
  bank.features = float_exact(rng, 3, 4);
  write_container(bank, dir / "data" / "prompts.pevf");

  Manifest m;
  m.categories = bank.categories;
  m.template_text = "a view of {CLASS}";
  m.splits["train"] = dir / "data" / "train.pevf";
  m.prompts = dir / "data" / "prompts.pevf";
  m.backbone = "test";
  write_manifest(m, dir / "manifest.json");
  std::ifstream raw(dir / "manifest.json");
  const auto j = nlohmann::json::parse(raw);
  CHECK(j["prompts"] == "data/prompts.pevf");
  CHECK(j["splits"]["train"] == "data/train.pevf");

  const Manifest back = read_manifest(dir / "manifest.json");
  CHECK(back.categories == m.categories);
  CHECK(fs::equivalent(back.prompts, m.prompts));

  const Dataset data = load_dataset(back);
  const FeatureSet& loaded = data.splits.at("train");
  for (const auto& s : loaded.shapes)
    for (std::size_t r = 0; r < s.views.rows(); ++r)
      CHECK(std::abs(kernels::dot(s.views.row(r), s.views.row(r)) - 1.0) <= 1e-12);

  Manifest raw_manifest = back;
  raw_manifest.normalized = true;
  const Dataset untouched = load_dataset(raw_manifest);
  CHECK(untouched.splits.at("train").shapes[0].views == train.shapes[0].views);
}

TEST_CASE("dataset loading validates labels and dimensions") {
  Rng rng(9);
  const fs::path dir = scratch("invalid");
  FeatureSet train = small_set(rng, 4, 2, 4);
  train.shapes[3].label_index = 7;
  write_container(train, dir / "train.pevf");
  PromptBank bank;
  bank.categories = {"a", "b", "c"};
  bank.features = float_exact(rng, 3, 4);
  write_container(bank, dir / "prompts.pevf");
  Manifest m;
  m.categories = bank.categories;
  m.splits["train"] = dir / "train.pevf";
  m.prompts = dir / "prompts.pevf";
  CHECK_THROWS_AS(load_dataset(m), DataError);

  PromptBank wide;
  wide.categories = bank.categories;
  wide.features = float_exact(rng, 3, 5);
  write_container(wide, dir / "prompts.pevf");
  train.shapes[3].label_index = 0;
  write_container(train, dir / "train.pevf");
  CHECK_THROWS_AS(load_dataset(m), DimensionError);
}

}  // TEST_SUITE
