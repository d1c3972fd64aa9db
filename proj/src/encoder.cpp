#include "peva/encoder.hpp"

#include <cmath>
#include <map>

#include "peva/error.hpp"
#include "peva/rng.hpp"

namespace peva {

void EncoderConfig::validate() const {
  if (dim == 0) throw std::invalid_argument("encoder dim must be positive");
  if (proj_width == 0 || heads == 0 || proj_width % heads != 0) {
    throw std::invalid_argument("head count " + std::to_string(heads) + " must divide projection width " +
                                std::to_string(proj_width));
  }
  if (mlp_hidden == 0) throw std::invalid_argument("mlp hidden width must be positive");
  if (layers == 0) throw std::invalid_argument("encoder needs at least one layer");
  if (use_positional_embedding && max_views == 0) {
    throw std::invalid_argument("positional embedding requires max_views");
  }
  if (!(ln_eps > 0.0)) throw std::invalid_argument("layer-norm eps must be positive");
}

std::size_t EncoderParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&n](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

std::vector<NamedTensor> EncoderParams::named() const {
  std::vector<NamedTensor> out;
  for_each([&out](const std::string& name, const Tensor& t) { out.push_back({name, t}); });
  return out;
}

EncoderParams init_encoder(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.dim, p = config.proj_width, h = config.mlp_hidden;
  EncoderParams params;
  params.config = config;
  auto& w = params.weights;
  w.cls_token = Tensor({d});
  w.pos_embedding = config.use_positional_embedding ? Tensor({config.max_views + 1, d}) : Tensor{};
  w.blocks.resize(config.layers);
  for (auto& b : w.blocks) {
    b.ln1_gamma = Tensor::filled({d}, 1.0);
    b.ln1_beta = Tensor({d});
    b.w_q = Tensor({d, p});
    b.b_q = Tensor({p});
    b.w_k = Tensor({d, p});
    b.b_k = Tensor({p});
    b.w_v = Tensor({d, p});
    b.b_v = Tensor({p});
    b.w_o = Tensor({p, d});
    b.b_o = Tensor({d});
    b.ln2_gamma = Tensor::filled({d}, 1.0);
    b.ln2_beta = Tensor({d});
    b.mlp_w1 = Tensor({d, h});
    b.mlp_b1 = Tensor({h});
    b.mlp_w2 = Tensor({h, d});
    b.mlp_b2 = Tensor({d});
  }
  Rng rng(seed);
  params.for_each([&rng](const std::string& name, Tensor& t) {
    const bool random = name == "cls_token" || name == "pos_embedding" || name.find(".w_") != std::string::npos ||
                        name.ends_with(".w1") || name.ends_with(".w2");
    if (!random) return;
    for (auto& v : t.data()) v = rng.truncated_normal(0.02);
  });
  return params;
}

EncoderVars bind(Tape& tape, const EncoderParams& params, bool requires_grad) {
  EncoderVars vars;
  vars.blocks.resize(params.weights.blocks.size());
  const auto& src = params.weights;
  vars.cls_token = tape.leaf(src.cls_token, requires_grad);
  if (params.config.use_positional_embedding) vars.pos_embedding = tape.leaf(src.pos_embedding, requires_grad);
  for (std::size_t i = 0; i < src.blocks.size(); ++i) {
    const auto& b = src.blocks[i];
    auto& v = vars.blocks[i];
    v.ln1_gamma = tape.leaf(b.ln1_gamma, requires_grad);
    v.ln1_beta = tape.leaf(b.ln1_beta, requires_grad);
    v.w_q = tape.leaf(b.w_q, requires_grad);
    v.b_q = tape.leaf(b.b_q, requires_grad);
    v.w_k = tape.leaf(b.w_k, requires_grad);
    v.b_k = tape.leaf(b.b_k, requires_grad);
    v.w_v = tape.leaf(b.w_v, requires_grad);
    v.b_v = tape.leaf(b.b_v, requires_grad);
    v.w_o = tape.leaf(b.w_o, requires_grad);
    v.b_o = tape.leaf(b.b_o, requires_grad);
    v.ln2_gamma = tape.leaf(b.ln2_gamma, requires_grad);
    v.ln2_beta = tape.leaf(b.ln2_beta, requires_grad);
    v.mlp_w1 = tape.leaf(b.mlp_w1, requires_grad);
    v.mlp_b1 = tape.leaf(b.mlp_b1, requires_grad);
    v.mlp_w2 = tape.leaf(b.mlp_w2, requires_grad);
    v.mlp_b2 = tape.leaf(b.mlp_b2, requires_grad);
  }
  return vars;
}

EncoderVars assemble_vars(const EncoderConfig& config, std::span<const Var> ordered) {
  EncoderVars vars;
  vars.blocks.resize(config.layers);
  std::size_t next = 0;
  EncoderVars::visit(vars, config.use_positional_embedding, [&](const std::string& name, Var& v) {
    if (next >= ordered.size()) throw DimensionError("assemble_vars: missing leaf for " + name);
    v = ordered[next++];
  });
  if (next != ordered.size()) throw DimensionError("assemble_vars: too many leaves");
  return vars;
}

namespace {

Var mlp(Var x, const BlockParams<Var>& b) {
  Var hidden = gelu(add_bias(matmul(x, b.mlp_w1), b.mlp_b1));
  return add_bias(matmul(hidden, b.mlp_w2), b.mlp_b2);
}

Var full_block(Var x, const BlockParams<Var>& b, const EncoderConfig& config) {
  Var y = add(x, attention(layer_norm(x, b.ln1_gamma, b.ln1_beta, config.ln_eps), b, config.heads));
  return add(y, mlp(layer_norm(y, b.ln2_gamma, b.ln2_beta, config.ln_eps), b));
}

/// Per-head key-space image of the CLS query: u_h = q_h·W_k,hᵀ, so that the
/// CLS attention logits against normed tokens z are z·u_hᵀ. The key bias adds
/// the same constant to every logit of a head and cancels in the softmax.
std::vector<Var> cls_query_keys(Var normed_cls, const BlockParams<Var>& b, const EncoderConfig& config) {
  const std::size_t dh = config.head_dim();
  Var q = add_bias(matmul(normed_cls, b.w_q), b.b_q);
  std::vector<Var> keys;
  keys.reserve(config.heads);
  for (std::size_t h = 0; h < config.heads; ++h) {
    keys.push_back(matmul_nt(slice_cols(q, h * dh, dh), slice_cols(b.w_k, h * dh, dh)));
  }
  return keys;
}

Var prepend_cls(const EncoderVars& vars, const EncoderConfig& config, Var views) {
  const Tensor& v = views.value();
  if (v.rank() != 2 || v.cols() != config.dim || v.rows() == 0) {
    throw DimensionError("encoder expects M x " + std::to_string(config.dim) + " views, got " + shape_string(v.shape()));
  }
  Var cls = reshape(vars.cls_token, {1, config.dim});
  const Var parts[] = {cls, views};
  Var x = concat_rows(parts);
  if (config.use_positional_embedding) {
    if (v.rows() > config.max_views) {
      throw DimensionError("shape has " + std::to_string(v.rows()) + " views but positional table covers " +
                           std::to_string(config.max_views));
    }
    x = add(x, slice_rows(vars.pos_embedding, 0, v.rows() + 1));
  }
  return x;
}

}  // namespace

Var attention(Var x, const BlockParams<Var>& b, std::size_t heads) {
  const std::size_t width = b.w_q.value().cols();
  if (heads == 0 || width % heads != 0) throw std::invalid_argument("head count must divide projection width");
  const std::size_t dh = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = add_bias(matmul(x, b.w_q), b.b_q);
  Var k = add_bias(matmul(x, b.w_k), b.b_k);
  Var v = add_bias(matmul(x, b.w_v), b.b_v);
  std::vector<Var> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var logits = scale(matmul_nt(slice_cols(q, h * dh, dh), slice_cols(k, h * dh, dh)), inv_sqrt);
    outputs.push_back(matmul(softmax(logits), slice_cols(v, h * dh, dh)));
  }
  return add_bias(matmul(concat_cols(outputs), b.w_o), b.b_o);
}

Var encode_batch(const EncoderVars& vars, const EncoderConfig& config, std::span<const Var> views) {
  if (views.empty()) throw DimensionError("encode_batch needs at least one shape");
  const std::size_t heads = config.heads, dh = config.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto& last = vars.blocks.back();

  std::vector<Var> tokens;
  tokens.reserve(views.size());
  for (const Var& v : views) {
    Var x = prepend_cls(vars, config, v);
    for (std::size_t l = 0; l + 1 < vars.blocks.size(); ++l) x = full_block(x, vars.blocks[l], config);
    tokens.push_back(x);
  }

  // Only the CLS row of the final block is needed. With a single block its
  // input CLS row is the same for every shape, so the query side is shared.
  const bool shared_query = vars.blocks.size() == 1;
  std::vector<Var> shared_keys;
  if (shared_query) {
    Var cls_row = slice_rows(tokens.front(), 0, 1);
    shared_keys = cls_query_keys(layer_norm(cls_row, last.ln1_gamma, last.ln1_beta, config.ln_eps), last, config);
  }

  std::vector<std::vector<Var>> contexts(heads);
  std::vector<Var> cls_rows;
  cls_rows.reserve(tokens.size());
  for (const Var& x : tokens) {
    Var z = layer_norm(x, last.ln1_gamma, last.ln1_beta, config.ln_eps);
    const std::vector<Var> keys = shared_query ? shared_keys : cls_query_keys(slice_rows(z, 0, 1), last, config);
    for (std::size_t h = 0; h < heads; ++h) {
      Var weights = softmax(scale(matmul_nt(keys[h], z), inv_sqrt));
      contexts[h].push_back(matmul(weights, z));
    }
    cls_rows.push_back(slice_rows(x, 0, 1));
  }

  std::vector<Var> head_outputs;
  head_outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    head_outputs.push_back(matmul(concat_rows(contexts[h]), slice_cols(last.w_v, h * dh, dh)));
  }
  Var attended = add_bias(concat_cols(head_outputs), last.b_v);
  Var y = add(concat_rows(cls_rows), add_bias(matmul(attended, last.w_o), last.b_o));
  return add(y, mlp(layer_norm(y, last.ln2_gamma, last.ln2_beta, config.ln_eps), last));
}

std::vector<double> encode(const Tensor& views, const EncoderParams& params) {
  const Tensor out = encode_many(std::span<const Tensor>(&views, 1), params);
  return {out.data().begin(), out.data().end()};
}

Tensor encode_many(std::span<const Tensor> views, const EncoderParams& params) {
  Tape tape;
  const EncoderVars vars = bind(tape, params, false);
  std::vector<Var> inputs;
  inputs.reserve(views.size());
  for (const auto& v : views) inputs.push_back(tape.constant(v));
  return encode_batch(vars, params.config, inputs).value();
}

// ---- checkpoints -------------------------------------------------------------

namespace {

constexpr const char* kMetaHeads = "meta.heads";
constexpr const char* kMetaLayers = "meta.layers";
constexpr const char* kMetaMaxViews = "meta.max_views";

}  // namespace

ParameterSet to_parameter_set(const EncoderParams& params) {
  ParameterSet set;
  set.dim = params.config.dim;
  set.tensors = params.named();
  set.tensors.push_back({kMetaHeads, Tensor::vector({static_cast<double>(params.config.heads)})});
  set.tensors.push_back({kMetaLayers, Tensor::vector({static_cast<double>(params.config.layers)})});
  if (params.config.use_positional_embedding) {
    set.tensors.push_back({kMetaMaxViews, Tensor::vector({static_cast<double>(params.config.max_views)})});
  }
  return set;
}

EncoderParams from_parameter_set(const ParameterSet& set) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : set.tensors) by_name[t.name] = &t.value;
  auto need = [&by_name](const std::string& name) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing parameter '" + name + "'");
    return *it->second;
  };
  auto meta = [&need](const char* name) {
    const Tensor& t = need(name);
    if (t.size() != 1 || t[0] < 1.0) throw FormatError(std::string("checkpoint has invalid ") + name);
    return static_cast<std::size_t>(t[0]);
  };

  EncoderConfig config;
  config.dim = set.dim;
  config.heads = meta(kMetaHeads);
  config.layers = meta(kMetaLayers);
  config.use_positional_embedding = by_name.contains(kMetaMaxViews);
  if (config.use_positional_embedding) config.max_views = meta(kMetaMaxViews);
  const Tensor& w_q = need("block0.attn.w_q");
  const Tensor& w1 = need("block0.mlp.w1");
  if (w_q.rank() != 2 || w1.rank() != 2) throw FormatError("checkpoint projection tensors must be matrices");
  config.proj_width = w_q.cols();
  config.mlp_hidden = w1.cols();
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }

  // Shapes come from a freshly initialized template; values from the file.
  EncoderParams params = init_encoder(config, 0);
  params.for_each([&need](const std::string& name, Tensor& t) {
    const Tensor& stored = need(name);
    if (stored.shape() != t.shape()) {
      throw FormatError("checkpoint parameter '" + name + "' has shape " + shape_string(stored.shape()) +
                        ", expected " + shape_string(t.shape()));
    }
    t = stored;
  });
  std::size_t expected = params.named().size() + 2 + (config.use_positional_embedding ? 1 : 0);
  if (set.tensors.size() != expected) throw FormatError("checkpoint holds unexpected extra tensors");
  return params;
}

void save_checkpoint(const EncoderParams& params, const std::filesystem::path& path) {
  write_container(to_parameter_set(params), path);
}

EncoderParams load_checkpoint(const std::filesystem::path& path) { return from_parameter_set(read_parameters(path)); }

}  // namespace peva
