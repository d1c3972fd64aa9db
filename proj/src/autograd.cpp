#include "peva/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>

#include "peva/error.hpp"

namespace peva {

namespace testing {
namespace {
std::atomic<BackwardFault> g_fault{BackwardFault::none};
}

void inject_backward_fault(BackwardFault fault) { g_fault.store(fault); }
BackwardFault active_backward_fault() { return g_fault.load(); }

}  // namespace testing

namespace {

double fault_sign(testing::BackwardFault op) {
  return testing::active_backward_fault() == op ? -1.0 : 1.0;
}

void accumulate(Tensor* sink, const Tensor& delta, double factor = 1.0) {
  if (!sink) return;
  auto dst = sink->data();
  auto src = delta.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * src[i];
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_rank2(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(a.shape()));
}

}  // namespace

// ---- Var / Tape --------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::has_grad() const { return tape_->has_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, {}, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [this](std::size_t id) { return nodes_[id].requires_grad; });
  if (!needs) {
    nodes_.push_back(Node{std::move(value), Tensor{}, false, {}, nullptr});
  } else {
    nodes_.push_back(Node{std::move(value), Tensor{}, true, std::move(inputs), std::move(backward)});
  }
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::grad(std::size_t id) const {
  if (nodes_[id].grad.empty()) throw std::logic_error("node carries no gradient");
  return nodes_[id].grad;
}

Tensor* Tape::grad_sink(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
  return &n.grad;
}

void Tape::backward(Var root) {
  if (root.value().size() != 1) {
    throw DimensionError("backward root must be a scalar, got " + shape_string(root.shape()));
  }
  if (!nodes_[root.id()].requires_grad) return;
  grad_sink(root.id())->data()[0] += 1.0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward(*this, i);
  }
}

// ---- ops ---------------------------------------------------------------------

Var matmul(Var a, Var b) {
  Tensor out = kernels::matmul(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const double s = fault_sign(testing::BackwardFault::matmul);
    if (Tensor* ga = t.grad_sink(ia)) accumulate(ga, kernels::matmul_nt(g, t.value(ib)), s);
    if (Tensor* gb = t.grad_sink(ib)) accumulate(gb, kernels::matmul_tn(t.value(ia), g));
  });
}

Var matmul_nt(Var a, Var b) {
  Tensor out = kernels::matmul_nt(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
    if (Tensor* ga = t.grad_sink(ia)) accumulate(ga, kernels::matmul(g, t.value(ib)));
    if (Tensor* gb = t.grad_sink(ib)) accumulate(gb, kernels::matmul_tn(g, t.value(ia)));
  });
}

Var transpose(Var a) {
  Tensor out = kernels::transpose(a.value());
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    if (Tensor* ga = t.grad_sink(ia)) accumulate(ga, kernels::transpose(t.grad(self)));
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    accumulate(t.grad_sink(ia), t.grad(self));
    accumulate(t.grad_sink(ib), t.grad(self));
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    accumulate(t.grad_sink(ia), t.grad(self));
    accumulate(t.grad_sink(ib), t.grad(self), -1.0);
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= factor;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, factor](Tape& t, std::size_t self) {
    accumulate(t.grad_sink(ia), t.grad(self), factor);
  });
}

Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.rank() != 1 || bv.size() != xv.cols()) {
    throw DimensionError("add_bias shape mismatch: " + shape_string(xv.shape()) + " + " + shape_string(bv.shape()));
  }
  Tensor out = xv;
  const std::size_t c = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < c; ++j) row[j] += bv[j];
  }
  const std::size_t ix = x.id(), ib = bias.id();
  return x.tape().record(std::move(out), {ix, ib}, [ix, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    accumulate(t.grad_sink(ix), g);
    if (Tensor* gb = t.grad_sink(ib)) {
      const double s = fault_sign(testing::BackwardFault::add_bias);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t j = 0; j < row.size(); ++j) (*gb)[j] += s * row[j];
      }
    }
  });
}

Var softmax(Var x, int axis) {
  const Tensor& xv = x.value();
  if (xv.rank() > 2) throw DimensionError("softmax supports rank <= 2, got " + shape_string(xv.shape()));
  const bool along_rows = xv.rank() == 2 && (axis == 0 || axis == -2);
  if (!along_rows && !(axis == -1 || axis == static_cast<int>(xv.rank()) - 1)) {
    throw DimensionError("softmax axis out of range");
  }
  if (along_rows) {
    return transpose(softmax(transpose(x), -1));
  }
  Tensor out = kernels::softmax_rows(xv);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_sink(ix);
    if (!gx) return;
    const Tensor& y = t.value(self);
    const Tensor& g = t.grad(self);
    const double s = fault_sign(testing::BackwardFault::softmax);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto gr = g.row(r);
      const double inner = kernels::dot(yr, gr);
      auto dst = gx->row(r);
      for (std::size_t j = 0; j < yr.size(); ++j) dst[j] += s * yr[j] * (gr[j] - inner);
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw DimensionError("layer_norm affine extent mismatch: " + shape_string(xv.shape()) + " with " +
                         shape_string(gamma.shape()) + ", " + shape_string(beta.shape()));
  }
  if (!(eps > 0.0)) throw std::invalid_argument("layer_norm eps must be positive");
  const std::size_t rows = xv.rows();
  Tensor normalized(xv.shape());
  std::vector<double> inv_std(rows);
  Tensor out(xv.shape());
  const auto gv = gamma.value().data();
  const auto bv = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    auto xr = xv.row(r);
    double mean = 0.0;
    for (double v : xr) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    auto nr = normalized.row(r);
    auto orow = out.row(r);
    for (std::size_t j = 0; j < d; ++j) {
      nr[j] = (xr[j] - mean) * inv_std[r];
      orow[j] = gv[j] * nr[j] + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      std::move(out), {ix, ig, ib},
      [ix, ig, ib, normalized = std::move(normalized), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const auto gv = t.value(ig).data();
        const std::size_t d = g.cols();
        const double s = fault_sign(testing::BackwardFault::layer_norm);
        Tensor* gg = t.grad_sink(ig);
        Tensor* gb = t.grad_sink(ib);
        Tensor* gx = t.grad_sink(ix);
        std::vector<double> dn(d);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          auto gr = g.row(r);
          auto nr = normalized.row(r);
          if (gg)
            for (std::size_t j = 0; j < d; ++j) (*gg)[j] += gr[j] * nr[j];
          if (gb)
            for (std::size_t j = 0; j < d; ++j) (*gb)[j] += gr[j];
          if (!gx) continue;
          double mean_dn = 0.0, mean_dn_n = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dn[j] = gr[j] * gv[j];
            mean_dn += dn[j];
            mean_dn_n += dn[j] * nr[j];
          }
          mean_dn /= static_cast<double>(d);
          mean_dn_n /= static_cast<double>(d);
          auto dst = gx->row(r);
          for (std::size_t j = 0; j < d; ++j) dst[j] += s * inv_std[r] * (dn[j] - mean_dn - nr[j] * mean_dn_n);
        }
      });
}

Var gelu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_sink(ix);
    if (!gx) return;
    const auto xv = t.value(ix).data();
    const auto g = t.grad(self).data();
    const double s = fault_sign(testing::BackwardFault::gelu);
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      (*gx)[i] += s * g[i] * (cdf + v * pdf);
    }
  });
}

Var slice_rows(Var x, std::size_t start, std::size_t count) {
  const Tensor& xv = x.value();
  require_rank2(xv, "slice_rows");
  if (count == 0 || start + count > xv.rows()) throw DimensionError("slice_rows out of range for " + shape_string(xv.shape()));
  const std::size_t c = xv.cols();
  std::vector<double> data(xv.data().begin() + start * c, xv.data().begin() + (start + count) * c);
  const std::size_t ix = x.id();
  return x.tape().record(Tensor({count, c}, std::move(data)), {ix}, [ix, start](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_sink(ix);
    if (!gx) return;
    const auto g = t.grad(self).data();
    const std::size_t offset = start * gx->cols();
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[offset + i] += g[i];
  });
}

Var slice_cols(Var x, std::size_t start, std::size_t count) {
  const Tensor& xv = x.value();
  require_rank2(xv, "slice_cols");
  if (count == 0 || start + count > xv.cols()) throw DimensionError("slice_cols out of range for " + shape_string(xv.shape()));
  const std::size_t rows = xv.rows();
  Tensor out({rows, count});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xv.row(r).begin() + start, count, out.row(r).begin());
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, start](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_sink(ix);
    if (!gx) return;
    const Tensor& g = t.grad(self);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto gr = g.row(r);
      auto dst = gx->row(r);
      for (std::size_t j = 0; j < gr.size(); ++j) dst[start + j] += gr[j];
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows needs at least one part");
  const std::size_t c = parts[0].value().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.value().cols() != c) throw DimensionError("concat_rows column mismatch: " + shape_string(p.shape()));
    rows += p.value().rows();
  }
  std::vector<double> data;
  data.reserve(rows * c);
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
    ids.push_back(p.id());
  }
  return parts[0].tape().record(Tensor({rows, c}, std::move(data)), ids, [ids](Tape& t, std::size_t self) {
    const auto g = t.grad(self).data();
    std::size_t offset = 0;
    for (std::size_t id : ids) {
      const std::size_t n = t.value(id).size();
      if (Tensor* gp = t.grad_sink(id))
        for (std::size_t i = 0; i < n; ++i) (*gp)[i] += g[offset + i];
      offset += n;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols needs at least one part");
  const std::size_t rows = parts[0].value().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.value().rows() != rows) throw DimensionError("concat_cols row mismatch: " + shape_string(p.shape()));
    cols += p.value().cols();
  }
  Tensor out({rows, cols});
  std::vector<std::size_t> ids;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r) std::copy(pv.row(r).begin(), pv.row(r).end(), out.row(r).begin() + offset);
    offset += pv.cols();
    ids.push_back(p.id());
  }
  return parts[0].tape().record(std::move(out), ids, [ids](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    std::size_t offset = 0;
    for (std::size_t id : ids) {
      const std::size_t c = t.value(id).cols();
      if (Tensor* gp = t.grad_sink(id)) {
        for (std::size_t r = 0; r < g.rows(); ++r) {
          auto gr = g.row(r);
          auto dst = gp->row(r);
          for (std::size_t j = 0; j < c; ++j) dst[j] += gr[offset + j];
        }
      }
      offset += c;
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_sink(ix);
    if (!gx) return;
    const auto g = t.grad(self).data();
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

Var sum(Var x) {
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  const std::size_t ix = x.id();
  return x.tape().record(Tensor({1}, {total}), {ix}, [ix](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_sink(ix);
    if (!gx) return;
    const double g = t.grad(self)[0];
    for (auto& v : gx->data()) v += g;
  });
}

Var cross_entropy_rows(Var logits, std::span<const std::size_t> labels) {
  const Tensor& lv = logits.value();
  const std::size_t rows = lv.rows(), n = lv.cols();
  if (labels.size() != rows) throw DimensionError("cross_entropy_rows: label count does not match rows");
  Tensor probs = kernels::softmax_rows(lv);
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= n) throw DataError("label " + std::to_string(labels[r]) + " out of range for " + std::to_string(n) + " classes");
    auto row = lv.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double v : row) total += std::exp(v - mx);
    out[r] = mx + std::log(total) - row[labels[r]];
  }
  std::vector<std::size_t> label_copy(labels.begin(), labels.end());
  const std::size_t il = logits.id();
  return logits.tape().record(
      std::move(out), {il}, [il, probs = std::move(probs), label_copy = std::move(label_copy)](Tape& t, std::size_t self) {
        Tensor* gl = t.grad_sink(il);
        if (!gl) return;
        const Tensor& g = t.grad(self);
        for (std::size_t r = 0; r < probs.rows(); ++r) {
          auto pr = probs.row(r);
          auto dst = gl->row(r);
          for (std::size_t j = 0; j < pr.size(); ++j) dst[j] += g[r] * (pr[j] - (j == label_copy[r] ? 1.0 : 0.0));
        }
      });
}

Var squared_distance_rows(Var x, const Tensor& target) {
  require_same_shape(x.value(), target, "squared_distance_rows");
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows();
  Tensor diff = xv;
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] -= target[i];
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) out[r] = kernels::dot(diff.row(r), diff.row(r));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, diff = std::move(diff)](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_sink(ix);
    if (!gx) return;
    const Tensor& g = t.grad(self);
    for (std::size_t r = 0; r < diff.rows(); ++r) {
      auto dr = diff.row(r);
      auto dst = gx->row(r);
      for (std::size_t j = 0; j < dr.size(); ++j) dst[j] += 2.0 * g[r] * dr[j];
    }
  });
}

}  // namespace peva
