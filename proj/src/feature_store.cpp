#include "peva/feature_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

#include "peva/error.hpp"

namespace peva {

namespace fs = std::filesystem;

namespace {

constexpr std::uint8_t kMagic[4] = {0x50, 0x45, 0x56, 0x46};

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void str(const std::string& s) {
    u32(checked_u32(s.size(), "string length"));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void raw(std::span<const std::uint8_t> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }

  static std::uint32_t checked_u32(std::size_t v, const char* what) {
    if (v > 0xffffffffULL) throw FormatError(std::string(what) + " exceeds 32-bit range");
    return static_cast<std::uint32_t>(v);
  }

  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t offset() const noexcept { return pos_; }
  std::uint64_t remaining() const noexcept { return bytes_.size() - pos_; }

  void need(std::uint64_t n, const char* what) const {
    if (n > remaining()) {
      throw FormatError(std::string("truncated container: need ") + std::to_string(n) + " bytes for " + what +
                            ", " + std::to_string(remaining()) + " remain",
                        pos_);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f32() {
    need(4, "value");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return static_cast<double>(std::bit_cast<float>(v));
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  /// Reads `count` binary32 values after verifying they fit in the remaining bytes.
  std::vector<double> reals(std::uint64_t count, const char* what) {
    if (count > remaining() / 4) {
      throw FormatError(std::string("extent overflow: ") + what + " declares " + std::to_string(count) +
                            " values but only " + std::to_string(remaining()) + " bytes remain",
                        pos_);
    }
    std::vector<double> out(count);
    for (auto& v : out) v = f32();
    return out;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::uint64_t pos_ = 0;
};

void write_header(Writer& w, ContainerKind kind, std::size_t dim, std::size_t count) {
  w.raw(kMagic);
  w.u32(kContainerVersion);
  w.u8(static_cast<std::uint8_t>(kind));
  w.u32(Writer::checked_u32(dim, "dimension"));
  w.u32(Writer::checked_u32(count, "record count"));
}

void encode_views(Writer& w, const FeatureSet& set) {
  try {
    set.validate();
  } catch (const DimensionError& e) {
    throw FormatError(e.what());
  }
  write_header(w, ContainerKind::views, set.dim, set.shapes.size());
  for (const auto& shape : set.shapes) {
    w.str(shape.shape_id);
    w.u32(shape.label_index);
    w.u32(Writer::checked_u32(shape.views.rows(), "view count"));
    for (double v : shape.views.data()) w.f32(v);
  }
}

void encode_prompts(Writer& w, const PromptBank& bank) {
  try {
    bank.validate();
  } catch (const DimensionError& e) {
    throw FormatError(e.what());
  }
  write_header(w, ContainerKind::prompts, bank.dim(), bank.size());
  for (std::size_t j = 0; j < bank.size(); ++j) {
    w.str(bank.categories[j]);
    for (double v : bank.features.row(j)) w.f32(v);
  }
}

void encode_parameters(Writer& w, const ParameterSet& params) {
  if (params.tensors.empty()) throw FormatError("parameter container needs at least one tensor");
  if (params.dim == 0) throw FormatError("parameter container needs a positive dimension");
  std::vector<const NamedTensor*> ordered;
  for (const auto& t : params.tensors) ordered.push_back(&t);
  std::sort(ordered.begin(), ordered.end(), [](const auto* a, const auto* b) { return a->name < b->name; });
  for (std::size_t i = 1; i < ordered.size(); ++i) {
    if (ordered[i]->name == ordered[i - 1]->name) throw FormatError("duplicate parameter name " + ordered[i]->name);
  }
  write_header(w, ContainerKind::parameters, params.dim, ordered.size());
  for (const auto* t : ordered) {
    w.str(t->name);
    w.u32(Writer::checked_u32(t->value.rank(), "rank"));
    for (auto extent : t->value.shape()) w.u32(Writer::checked_u32(extent, "extent"));
    for (double v : t->value.data()) w.f32(v);
  }
}

}  // namespace

void FeatureSet::validate() const {
  if (dim == 0) throw DimensionError("feature set dimension must be positive");
  if (shapes.empty()) throw DimensionError("feature set needs at least one shape");
  for (const auto& s : shapes) {
    if (s.views.rank() != 2 || s.views.rows() < 1 || s.views.cols() != dim) {
      throw DimensionError("shape '" + s.shape_id + "' has view matrix " + shape_string(s.views.shape()) +
                           ", expected M x " + std::to_string(dim) + " with M >= 1");
    }
  }
}

void PromptBank::validate() const {
  if (categories.size() < 2) throw DimensionError("prompt bank needs at least 2 categories");
  if (features.rank() != 2 || features.rows() != categories.size()) {
    throw DimensionError("prompt features " + shape_string(features.shape()) + " do not match " +
                         std::to_string(categories.size()) + " categories");
  }
}

std::vector<std::uint8_t> encode_container(const Container& container) {
  Writer w;
  std::visit(
      [&w](const auto& c) {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, FeatureSet>) encode_views(w, c);
        else if constexpr (std::is_same_v<T, PromptBank>) encode_prompts(w, c);
        else encode_parameters(w, c);
      },
      container);
  return w.take();
}

Container decode_container(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.need(4, "magic");
  if (!std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) throw FormatError("bad magic, not a PEVF container", 0);
  (void)r.u32("magic");
  const std::uint64_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kContainerVersion) throw FormatError("unsupported container version " + std::to_string(version), version_at);
  const std::uint64_t kind_at = r.offset();
  const std::uint8_t kind = r.u8("kind");
  const std::uint64_t dim_at = r.offset();
  const std::uint32_t dim = r.u32("dimension");
  const std::uint32_t count = r.u32("record count");
  if (dim == 0) throw FormatError("dimension must be positive", dim_at);
  if (count == 0) throw FormatError("container holds no records", dim_at + 4);

  Container result;
  switch (static_cast<ContainerKind>(kind)) {
    case ContainerKind::views: {
      FeatureSet set;
      set.dim = dim;
      set.shapes.reserve(std::min<std::uint64_t>(count, r.remaining() / 12));
      for (std::uint32_t i = 0; i < count; ++i) {
        ShapeRecord rec;
        rec.shape_id = r.str("shape id");
        rec.label_index = r.u32("label");
        const std::uint64_t m_at = r.offset();
        const std::uint32_t m = r.u32("view count");
        if (m == 0) throw FormatError("shape '" + rec.shape_id + "' has zero views", m_at);
        rec.views = Tensor({m, dim}, r.reals(std::uint64_t{m} * dim, "view matrix"));
        set.shapes.push_back(std::move(rec));
      }
      result = std::move(set);
      break;
    }
    case ContainerKind::prompts: {
      if (count < 2) throw FormatError("prompt container needs at least 2 records", dim_at + 4);
      PromptBank bank;
      std::vector<double> data;
      for (std::uint32_t i = 0; i < count; ++i) {
        bank.categories.push_back(r.str("prompt id"));
        auto row = r.reals(dim, "prompt vector");
        data.insert(data.end(), row.begin(), row.end());
      }
      bank.features = Tensor({count, dim}, std::move(data));
      result = std::move(bank);
      break;
    }
    case ContainerKind::parameters: {
      ParameterSet params;
      params.dim = dim;
      for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        t.name = r.str("parameter name");
        const std::uint64_t rank_at = r.offset();
        const std::uint32_t rank = r.u32("rank");
        if (rank == 0 || rank > 8) throw FormatError("parameter '" + t.name + "' has unsupported rank " + std::to_string(rank), rank_at);
        Shape shape;
        std::uint64_t total = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
          const std::uint64_t at = r.offset();
          const std::uint32_t extent = r.u32("extent");
          if (extent == 0) throw FormatError("parameter '" + t.name + "' has a zero extent", at);
          total *= extent;
          if (total > r.remaining()) throw FormatError("extent overflow in parameter '" + t.name + "'", at);
          shape.push_back(extent);
        }
        t.value = Tensor(std::move(shape), r.reals(total, "parameter values"));
        params.tensors.push_back(std::move(t));
      }
      result = std::move(params);
      break;
    }
    default:
      throw FormatError("unknown container kind " + std::to_string(kind), kind_at);
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last record", r.offset());
  return result;
}

void write_container(const Container& container, const fs::path& path) {
  const auto bytes = encode_container(container);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Container read_container(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open container " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_container(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

namespace {

template <typename T>
T read_as(const fs::path& path, const char* expected) {
  Container c = read_container(path);
  if (auto* v = std::get_if<T>(&c)) return std::move(*v);
  throw FormatError(path.string() + ": expected a " + expected + " container", 8);
}

}  // namespace

FeatureSet read_views(const fs::path& path) { return read_as<FeatureSet>(path, "views"); }
PromptBank read_prompts(const fs::path& path) { return read_as<PromptBank>(path, "prompts"); }
ParameterSet read_parameters(const fs::path& path) { return read_as<ParameterSet>(path, "parameters"); }

Tensor l2_normalize_rows(const Tensor& matrix) {
  Tensor out = matrix;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double norm = std::sqrt(kernels::dot(row, row));
    if (!(norm > 0.0)) throw DegenerateInputError("cannot normalize all-zero row " + std::to_string(r));
    for (auto& v : row) v /= norm;
  }
  return out;
}

void normalize_in_place(FeatureSet& set) {
  for (auto& s : set.shapes) {
    try {
      s.views = l2_normalize_rows(s.views);
    } catch (const DegenerateInputError& e) {
      throw DegenerateInputError("shape '" + s.shape_id + "': " + e.what());
    }
  }
  set.normalized = true;
}

void normalize_in_place(PromptBank& bank) { bank.features = l2_normalize_rows(bank.features); }

// ---- manifest ------------------------------------------------------------------

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  Manifest m;
  m.base_dir = path.parent_path();
  auto resolve = [&m](const std::string& p) {
    fs::path candidate(p);
    return candidate.is_absolute() ? candidate : m.base_dir / candidate;
  };
  try {
    m.categories = j.at("categories").get<std::vector<std::string>>();
    m.template_text = j.value("template", std::string{});
    for (const auto& [name, p] : j.at("splits").items()) m.splits[name] = resolve(p.get<std::string>());
    m.prompts = resolve(j.at("prompts").get<std::string>());
    m.normalized = j.value("normalized", false);
    m.backbone = j.value("backbone", std::string{});
    if (j.contains("config")) m.config = j.at("config");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path.string() + " is missing or mistypes a field: " + e.what());
  }
  if (m.categories.size() < 2) throw FormatError("manifest " + path.string() + " lists fewer than 2 categories");
  return m;
}

void write_manifest(const Manifest& manifest, const fs::path& path) {
  const fs::path dir = path.parent_path();
  auto relativize = [&dir](const fs::path& p) {
    if (p.is_relative()) return p.generic_string();
    const fs::path rel = p.lexically_relative(dir.empty() ? fs::current_path() : fs::absolute(dir));
    return (rel.empty() || *rel.begin() == "..") ? p.generic_string() : rel.generic_string();
  };
  nlohmann::json j;
  j["categories"] = manifest.categories;
  j["template"] = manifest.template_text;
  nlohmann::json splits = nlohmann::json::object();
  for (const auto& [name, p] : manifest.splits) splits[name] = relativize(p);
  j["splits"] = splits;
  j["prompts"] = relativize(manifest.prompts);
  j["normalized"] = manifest.normalized;
  j["backbone"] = manifest.backbone;
  if (!manifest.config.empty()) j["config"] = manifest.config;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

Dataset load_dataset(const Manifest& manifest, std::span<const std::string> splits) {
  Dataset ds;
  ds.prompts = read_prompts(manifest.prompts);
  if (ds.prompts.size() != manifest.categories.size()) {
    throw DataError("prompt container has " + std::to_string(ds.prompts.size()) + " rows but manifest lists " +
                    std::to_string(manifest.categories.size()) + " categories");
  }
  ds.prompts.categories = manifest.categories;
  ds.prompts.template_text = manifest.template_text;
  if (!manifest.normalized) normalize_in_place(ds.prompts);

  std::vector<std::string> wanted(splits.begin(), splits.end());
  if (wanted.empty())
    for (const auto& [name, _] : manifest.splits) wanted.push_back(name);
  for (const auto& name : wanted) {
    auto it = manifest.splits.find(name);
    if (it == manifest.splits.end()) throw DataError("manifest has no split named '" + name + "'");
    FeatureSet set = read_views(it->second);
    set.backbone_tag = manifest.backbone;
    set.normalized = manifest.normalized;
    if (set.dim != ds.prompts.dim()) {
      throw DimensionError("split '" + name + "' has dimension " + std::to_string(set.dim) +
                           " but prompts have dimension " + std::to_string(ds.prompts.dim()));
    }
    for (const auto& s : set.shapes) {
      if (s.label_index >= ds.prompts.size()) {
        throw DataError("shape '" + s.shape_id + "' in split '" + name + "' has label " +
                        std::to_string(s.label_index) + " but only " + std::to_string(ds.prompts.size()) +
                        " categories exist");
      }
    }
    if (!set.normalized) normalize_in_place(set);
    ds.splits.emplace(name, std::move(set));
  }
  return ds;
}

}  // namespace peva
