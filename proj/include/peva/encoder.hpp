#pragma once

// Transformer aggregator for the few-shot path: a learned CLS token is
// prepended to the M view features and the sequence passes through pre-norm
// blocks (x + MHA(LN(x)), then x + MLP(LN(x))). The CLS row of the final
// block is the shape descriptor.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "peva/autograd.hpp"
#include "peva/feature_store.hpp"
#include "peva/tensor.hpp"

namespace peva {

struct EncoderConfig {
  std::size_t dim = 0;
  std::size_t proj_width = 1024;
  std::size_t heads = 4;
  std::size_t mlp_hidden = 512;
  std::size_t layers = 1;
  bool use_positional_embedding = false;
  /// Longest view sequence the positional table covers (only with positional embedding).
  std::size_t max_views = 0;
  double ln_eps = 1e-5;

  void validate() const;
  std::size_t head_dim() const noexcept { return proj_width / heads; }
};

template <typename T>
struct BlockParams {
  T ln1_gamma, ln1_beta;
  T w_q, b_q, w_k, b_k, w_v, b_v;  // D×P projections, P biases
  T w_o, b_o;                      // P×D output projection
  T ln2_gamma, ln2_beta;
  T mlp_w1, mlp_b1;  // D×H
  T mlp_w2, mlp_b2;  // H×D

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "attn.b_k", self.b_k);
    f(prefix + "attn.b_o", self.b_o);
    f(prefix + "attn.b_q", self.b_q);
    f(prefix + "attn.b_v", self.b_v);
    f(prefix + "attn.w_k", self.w_k);
    f(prefix + "attn.w_o", self.w_o);
    f(prefix + "attn.w_q", self.w_q);
    f(prefix + "attn.w_v", self.w_v);
    f(prefix + "ln1.beta", self.ln1_beta);
    f(prefix + "ln1.gamma", self.ln1_gamma);
    f(prefix + "ln2.beta", self.ln2_beta);
    f(prefix + "ln2.gamma", self.ln2_gamma);
    f(prefix + "mlp.b1", self.mlp_b1);
    f(prefix + "mlp.b2", self.mlp_b2);
    f(prefix + "mlp.w1", self.mlp_w1);
    f(prefix + "mlp.w2", self.mlp_w2);
  }
};

template <typename T>
struct EncoderWeights {
  T cls_token;
  T pos_embedding;  // (max_views+1)×D, unused when positional embedding is off
  std::vector<BlockParams<T>> blocks;

  /// Calls f(name, member) for every trainable tensor in a fixed order.
  template <typename Self, typename F>
  static void visit(Self& self, bool positional, F&& f) {
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      BlockParams<T>::visit(self.blocks[i], "block" + std::to_string(i) + ".", f);
    }
    f(std::string("cls_token"), self.cls_token);
    if (positional) f(std::string("pos_embedding"), self.pos_embedding);
  }
};

struct EncoderParams {
  EncoderConfig config;
  EncoderWeights<Tensor> weights;

  template <typename F>
  void for_each(F&& f) {
    EncoderWeights<Tensor>::visit(weights, config.use_positional_embedding, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    EncoderWeights<Tensor>::visit(weights, config.use_positional_embedding, f);
  }
  std::size_t parameter_count() const;
  std::vector<NamedTensor> named() const;
};

using EncoderVars = EncoderWeights<Var>;

/// Truncated-normal(0.02) projections and CLS token, zero biases, unit layer-norm gains.
EncoderParams init_encoder(const EncoderConfig& config, std::uint64_t seed);

/// Places every parameter on the tape as a leaf.
EncoderVars bind(Tape& tape, const EncoderParams& params, bool requires_grad);

/// Rebuilds the Var-side weights from leaves listed in EncoderParams::for_each order.
EncoderVars assemble_vars(const EncoderConfig& config, std::span<const Var> ordered);

/// Multi-head self-attention over all rows of x[T×D] (already layer-normed).
Var attention(Var x, const BlockParams<Var>& block, std::size_t heads);

/// Descriptors for a batch of shapes, one row per shape (B×D).
Var encode_batch(const EncoderVars& vars, const EncoderConfig& config, std::span<const Var> views);

/// Descriptor of one shape from its M×D views.
std::vector<double> encode(const Tensor& views, const EncoderParams& params);
/// Descriptors for many shapes, one row per shape.
Tensor encode_many(std::span<const Tensor> views, const EncoderParams& params);

ParameterSet to_parameter_set(const EncoderParams& params);
EncoderParams from_parameter_set(const ParameterSet& set);

void save_checkpoint(const EncoderParams& params, const std::filesystem::path& path);
EncoderParams load_checkpoint(const std::filesystem::path& path);

}  // namespace peva
