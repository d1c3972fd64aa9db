#pragma once

// Straight-line reference implementations used as test oracles. They share
// nothing with the engine except the Tensor container used for storage:
// every quantity is recomputed with plain loops over std::vector.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "peva/encoder.hpp"
#include "peva/rng.hpp"
#include "peva/tensor.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;
using Vec = std::vector<double>;

inline Mat to_mat(const peva::Tensor& t) {
  Mat m(t.rows(), Vec(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.data()[r * t.cols() + c];
  return m;
}

struct ZeroShot {
  Mat similarity;  // N×M
  Vec alpha, weights, descriptor, logits;
  std::size_t prediction = 0;
};

inline ZeroShot zero_shot(const Mat& prompts, const Mat& views, double scale) {
  const std::size_t n = prompts.size(), m = views.size(), d = views[0].size();
  ZeroShot z;
  z.similarity.assign(n, Vec(m, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t k = 0; k < d; ++k) z.similarity[i][j] += prompts[i][k] * views[j][k];

  z.alpha.assign(m, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    double mx = z.similarity[0][j], total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx = std::max(mx, z.similarity[i][j]);
      total += z.similarity[i][j];
    }
    z.alpha[j] = mx - total / static_cast<double>(n);
  }

  double top = z.alpha[0];
  for (double a : z.alpha) top = std::max(top, a);
  double denom = 0.0;
  z.weights.assign(m, 0.0);
  for (std::size_t j = 0; j < m; ++j) denom += (z.weights[j] = std::exp(z.alpha[j] - top));
  for (double& w : z.weights) w /= denom;

  z.descriptor.assign(d, 0.0);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t k = 0; k < d; ++k) z.descriptor[k] += z.weights[j] * views[j][k];

  z.logits.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) z.logits[i] += prompts[i][k] * z.descriptor[k];
    z.logits[i] *= scale;
  }
  for (std::size_t i = 1; i < n; ++i)
    if (z.logits[i] > z.logits[z.prediction]) z.prediction = i;
  return z;
}

// ---- encoder -----------------------------------------------------------------

inline Mat affine(const Mat& x, const peva::Tensor& w, const peva::Tensor& b) {
  const std::size_t in = w.shape()[0], out = w.shape()[1];
  Mat y(x.size(), Vec(out, 0.0));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = b.data()[o];
      for (std::size_t i = 0; i < in; ++i) acc += x[r][i] * w.data()[i * out + o];
      y[r][o] = acc;
    }
  return y;
}

inline Mat layer_norm(const Mat& x, const peva::Tensor& gamma, const peva::Tensor& beta, double eps) {
  Mat y = x;
  for (std::size_t r = 0; r < x.size(); ++r) {
    const double d = static_cast<double>(x[r].size());
    double mean = 0.0, var = 0.0;
    for (double v : x[r]) mean += v;
    mean /= d;
    for (double v : x[r]) var += (v - mean) * (v - mean);
    var /= d;
    for (std::size_t c = 0; c < x[r].size(); ++c)
      y[r][c] = (x[r][c] - mean) / std::sqrt(var + eps) * gamma.data()[c] + beta.data()[c];
  }
  return y;
}

/// Full multi-head attention over every row of z (already normalized).
inline Mat attention(const Mat& z, const peva::BlockParams<peva::Tensor>& b, std::size_t heads) {
  const Mat q = affine(z, b.w_q, b.b_q), k = affine(z, b.w_k, b.b_k), v = affine(z, b.w_v, b.b_v);
  const std::size_t t = z.size(), p = q[0].size(), dh = p / heads;
  Mat concat(t, Vec(p, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < t; ++i) {
      Vec score(t, 0.0);
      double top = -1e300;
      for (std::size_t j = 0; j < t; ++j) {
        for (std::size_t c = 0; c < dh; ++c) score[j] += q[i][h * dh + c] * k[j][h * dh + c];
        score[j] /= std::sqrt(static_cast<double>(dh));
        top = std::max(top, score[j]);
      }
      double denom = 0.0;
      for (double& s : score) denom += (s = std::exp(s - top));
      for (std::size_t j = 0; j < t; ++j)
        for (std::size_t c = 0; c < dh; ++c) concat[i][h * dh + c] += score[j] / denom * v[j][h * dh + c];
    }
  }
  return affine(concat, b.w_o, b.b_o);
}

inline Mat gelu(Mat x) {
  for (auto& row : x)
    for (double& v : row) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  return x;
}

inline Vec encode(const peva::Tensor& views, const peva::EncoderParams& params) {
  const auto& cfg = params.config;
  const auto& w = params.weights;
  Mat x;
  x.push_back(Vec(w.cls_token.data().begin(), w.cls_token.data().end()));
  for (const auto& row : to_mat(views)) x.push_back(row);
  if (cfg.use_positional_embedding)
    for (std::size_t r = 0; r < x.size(); ++r)
      for (std::size_t c = 0; c < x[r].size(); ++c) x[r][c] += w.pos_embedding.data()[r * cfg.dim + c];
  for (const auto& b : w.blocks) {
    const Mat a = attention(layer_norm(x, b.ln1_gamma, b.ln1_beta, cfg.ln_eps), b, cfg.heads);
    for (std::size_t r = 0; r < x.size(); ++r)
      for (std::size_t c = 0; c < x[r].size(); ++c) x[r][c] += a[r][c];
    const Mat hidden = gelu(affine(layer_norm(x, b.ln2_gamma, b.ln2_beta, cfg.ln_eps), b.mlp_w1, b.mlp_b1));
    const Mat out = affine(hidden, b.mlp_w2, b.mlp_b2);
    for (std::size_t r = 0; r < x.size(); ++r)
      for (std::size_t c = 0; c < x[r].size(); ++c) x[r][c] += out[r][c];
  }
  return x[0];
}

}  // namespace oracle

namespace testutil {

inline peva::Tensor random_matrix(peva::Rng& rng, std::size_t rows, std::size_t cols, double stddev = 1.0) {
  peva::Tensor t({rows, cols});
  rng.fill_normal(t.data(), stddev);
  return t;
}

inline peva::Tensor random_unit_rows(peva::Rng& rng, std::size_t rows, std::size_t cols) {
  peva::Tensor t = random_matrix(rng, rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double norm = 0.0;
    for (double v : t.row(r)) norm += v * v;
    norm = std::sqrt(norm);
    for (double& v : t.row(r)) v /= norm;
  }
  return t;
}

/// Every encoder parameter redrawn at a scale where the nonlinear paths matter.
inline void randomize(peva::EncoderParams& params, peva::Rng& rng, double stddev = 0.3) {
  params.for_each([&](const std::string& name, peva::Tensor& t) {
    const bool gain = name.ends_with(".gamma");
    for (double& v : t.data()) v = (gain ? 1.0 : 0.0) + rng.normal() * stddev;
  });
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = a.size() == b.size() ? 0.0 : 1e300;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace testutil
