#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "catchfm/common.hpp"

// Reverse-mode autodiff over dense Eigen matrices. A Tape owns the forward
// values and backward rules; Tensor is a cheap handle. Values are 2-D
// throughout (vectors are 1xN rows, scalars 1x1). float is the training
// scalar, double the verification mode.
namespace catchfm::te {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
class Tape;

template <typename S>
struct Tensor {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Mat<S>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <typename S>
class Tape {
 public:
  Tensor<S> constant(Mat<S> value) {
    return push(std::move(value), nullptr, false, {});
  }

  // caller-owned value, no gradient; avoids copying parameters at inference
  Tensor<S> external(const Mat<S>& value) {
    int id = int(nodes_.size());
    Node n;
    n.external_value = &value;
    nodes_.push_back(std::move(n));
    return {this, id};
  }

  // leaf whose gradient accumulates into caller-owned storage (never zeroed
  // here, so one Tape per sequence can accumulate across a batch)
  Tensor<S> param(const Mat<S>& value, Mat<S>& grad_out) {
    if (grad_out.rows() != value.rows() || grad_out.cols() != value.cols())
      fail("param grad shape ", grad_out.rows(), "x", grad_out.cols(),
           " does not match value ", value.rows(), "x", value.cols());
    int id = int(nodes_.size());
    Node n;
    n.external_value = &value;
    n.external_grad = &grad_out;
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return {this, id};
  }

  using Backprop = std::function<void(Tape&, int)>;

  Tensor<S> push(Mat<S> value, Backprop backprop, bool needs_grad,
                 std::vector<int> parents) {
    int id = int(nodes_.size());
    Node n;
    n.storage = std::move(value);
    n.backprop = std::move(backprop);
    n.needs_grad = needs_grad;
    n.parents = std::move(parents);
    nodes_.push_back(std::move(n));
    return {this, id};
  }

  const Mat<S>& value(int id) const {
    const Node& n = nodes_[size_t(id)];
    return n.external_value ? *n.external_value : n.storage;
  }

  bool needs_grad(int id) const { return nodes_[size_t(id)].needs_grad; }

  // lazily materialized zero gradient
  Mat<S>& grad(int id) {
    Node& n = nodes_[size_t(id)];
    if (n.external_grad) {
      n.touched = true;
      return *n.external_grad;
    }
    if (!n.touched) {
      n.grad.setZero(value(id).rows(), value(id).cols());
      n.touched = true;
    }
    return n.grad;
  }

  void backward(Tensor<S> loss, S seed = S(1)) {
    if (loss.tape != this) fail("loss tensor belongs to another tape");
    if (loss.rows() != 1 || loss.cols() != 1) fail("backward requires a scalar loss");
    grad(loss.id)(0, 0) += seed;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[size_t(id)];
      if (n.touched && n.needs_grad && n.backprop) n.backprop(*this, id);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<S> storage;
    const Mat<S>* external_value = nullptr;
    Mat<S>* external_grad = nullptr;
    Mat<S> grad;
    bool needs_grad = false;
    bool touched = false;
    Backprop backprop;
    std::vector<int> parents;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// shape plumbing

template <typename S>
void check_same_tape(Tensor<S> a, Tensor<S> b) {
  if (a.tape != b.tape) fail("tensors belong to different tapes");
}

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return concat(r, "x", c);
}

// ---------------------------------------------------------------------------
// ops

template <typename S>
Tensor<S> matmul(Tensor<S> a, Tensor<S> b) {
  check_same_tape(a, b);
  if (a.cols() != b.rows())
    fail("matmul shape mismatch: ", shape_str(a.rows(), a.cols()), " * ",
         shape_str(b.rows(), b.cols()));
  Mat<S> out = a.value() * b.value();
  bool ng = a.tape->needs_grad(a.id) || a.tape->needs_grad(b.id);
  int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out),
      [ia, ib](Tape<S>& t, int id) {
        const Mat<S>& g = t.grad(id);
        if (t.needs_grad(ia)) t.grad(ia).noalias() += g * t.value(ib).transpose();
        if (t.needs_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * g;
      },
      ng, {ia, ib});
}

template <typename S>
Tensor<S> add(Tensor<S> a, Tensor<S> b) {
  check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    fail("add shape mismatch: ", shape_str(a.rows(), a.cols()), " vs ",
         shape_str(b.rows(), b.cols()));
  Mat<S> out = a.value() + b.value();
  bool ng = a.tape->needs_grad(a.id) || a.tape->needs_grad(b.id);
  int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out),
      [ia, ib](Tape<S>& t, int id) {
        const Mat<S>& g = t.grad(id);
        if (t.needs_grad(ia)) t.grad(ia) += g;
        if (t.needs_grad(ib)) t.grad(ib) += g;
      },
      ng, {ia, ib});
}

// broadcast a 1xN row vector over every row
template <typename S>
Tensor<S> add_rowvec(Tensor<S> a, Tensor<S> v) {
  check_same_tape(a, v);
  if (v.rows() != 1 || v.cols() != a.cols())
    fail("add_rowvec expects 1x", a.cols(), " bias, got ", shape_str(v.rows(), v.cols()));
  Mat<S> out = a.value().rowwise() + v.value().row(0);
  bool ng = a.tape->needs_grad(a.id) || a.tape->needs_grad(v.id);
  int ia = a.id, iv = v.id;
  return a.tape->push(std::move(out),
      [ia, iv](Tape<S>& t, int id) {
        const Mat<S>& g = t.grad(id);
        if (t.needs_grad(ia)) t.grad(ia) += g;
        if (t.needs_grad(iv)) t.grad(iv).row(0) += g.colwise().sum();
      },
      ng, {ia, iv});
}

template <typename S>
Tensor<S> hadamard(Tensor<S> a, Tensor<S> b) {
  check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    fail("mul shape mismatch: ", shape_str(a.rows(), a.cols()), " vs ",
         shape_str(b.rows(), b.cols()));
  Mat<S> out = a.value().cwiseProduct(b.value());
  bool ng = a.tape->needs_grad(a.id) || a.tape->needs_grad(b.id);
  int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out),
      [ia, ib](Tape<S>& t, int id) {
        const Mat<S>& g = t.grad(id);
        if (t.needs_grad(ia)) t.grad(ia) += g.cwiseProduct(t.value(ib));
        if (t.needs_grad(ib)) t.grad(ib) += g.cwiseProduct(t.value(ia));
      },
      ng, {ia, ib});
}

template <typename S>
Tensor<S> scale(Tensor<S> a, S c) {
  Mat<S> out = a.value() * c;
  int ia = a.id;
  return a.tape->push(std::move(out),
      [ia, c](Tape<S>& t, int id) {
        if (t.needs_grad(ia)) t.grad(ia) += t.grad(id) * c;
      },
      a.tape->needs_grad(a.id), {ia});
}

template <typename S>
Tensor<S> transpose(Tensor<S> a) {
  Mat<S> out = a.value().transpose();
  int ia = a.id;
  return a.tape->push(std::move(out),
      [ia](Tape<S>& t, int id) {
        if (t.needs_grad(ia)) t.grad(ia) += t.grad(id).transpose();
      },
      a.tape->needs_grad(a.id), {ia});
}

template <typename S>
Tensor<S> rows_slice(Tensor<S> a, Eigen::Index r0, Eigen::Index n) {
  if (r0 < 0 || n < 0 || r0 + n > a.rows())
    fail("rows_slice [", r0, ", ", r0 + n, ") out of ", a.rows(), " rows");
  Mat<S> out = a.value().middleRows(r0, n);
  int ia = a.id;
  return a.tape->push(std::move(out),
      [ia, r0, n](Tape<S>& t, int id) {
        if (t.needs_grad(ia)) t.grad(ia).middleRows(r0, n) += t.grad(id);
      },
      a.tape->needs_grad(a.id), {ia});
}

template <typename S>
Tensor<S> col_slice(Tensor<S> a, Eigen::Index c0, Eigen::Index n) {
  if (c0 < 0 || n < 0 || c0 + n > a.cols())
    fail("col_slice [", c0, ", ", c0 + n, ") out of ", a.cols(), " cols");
  Mat<S> out = a.value().middleCols(c0, n);
  int ia = a.id;
  return a.tape->push(std::move(out),
      [ia, c0, n](Tape<S>& t, int id) {
        if (t.needs_grad(ia)) t.grad(ia).middleCols(c0, n) += t.grad(id);
      },
      a.tape->needs_grad(a.id), {ia});
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) fail("concat_cols of zero parts");
  Eigen::Index rows = parts[0].rows(), cols = 0;
  bool ng = false;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) {
    check_same_tape(parts[0], p);
    if (p.rows() != rows) fail("concat_cols row mismatch");
    cols += p.cols();
    widths.push_back(p.cols());
    ids.push_back(p.id);
    ng = ng || p.tape->needs_grad(p.id);
  }
  Mat<S> out(rows, cols);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return parts[0].tape->push(std::move(out),
      [ids, widths](Tape<S>& t, int id) {
        const Mat<S>& g = t.grad(id);
        Eigen::Index off = 0;
        for (size_t k = 0; k < ids.size(); ++k) {
          if (t.needs_grad(ids[k])) t.grad(ids[k]) += g.middleCols(off, widths[k]);
          off += widths[k];
        }
      },
      ng, ids);
}

template <typename S>
Tensor<S> softmax_rows(Tensor<S> a) {
  Mat<S> out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    S m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp();
    S sum = out.row(r).sum();
    out.row(r) /= sum;
  }
  int ia = a.id;
  return a.tape->push(std::move(out),
      [ia](Tape<S>& t, int id) {
        if (!t.needs_grad(ia)) return;
        const Mat<S>& y = t.value(id);
        const Mat<S>& g = t.grad(id);
        Mat<S>& ga = t.grad(ia);
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
          S dot = y.row(r).dot(g.row(r));
          ga.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
        }
      },
      a.tape->needs_grad(a.id), {ia});
}

// (x - mean) / sqrt(var + eps) * gain + bias, per row; gain/bias are 1xD
template <typename S>
Tensor<S> layer_norm_rows(Tensor<S> x, Tensor<S> gain, Tensor<S> bias, S eps = S(1e-5)) {
  check_same_tape(x, gain);
  check_same_tape(x, bias);
  Eigen::Index d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d)
    fail("layer_norm expects 1x", d, " gain/bias");
  Mat<S> normed(x.rows(), d);
  Mat<S> inv_sigma(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    S mu = x.value().row(r).mean();
    S var = (x.value().row(r).array() - mu).square().mean();
    S is = S(1) / std::sqrt(var + eps);
    normed.row(r) = (x.value().row(r).array() - mu) * is;
    inv_sigma(r, 0) = is;
  }
  Mat<S> out = (normed.array().rowwise() * gain.value().row(0).array()).rowwise() +
               bias.value().row(0).array();
  int ix = x.id, ig = gain.id, ib = bias.id;
  bool ng = x.tape->needs_grad(ix) || x.tape->needs_grad(ig) || x.tape->needs_grad(ib);
  // normed and inv_sigma captured for the backward pass
  auto back = [ix, ig, ib, normed, inv_sigma](Tape<S>& t, int id) {
    const Mat<S>& g = t.grad(id);
    if (t.needs_grad(ib)) t.grad(ib).row(0) += g.colwise().sum();
    if (t.needs_grad(ig)) t.grad(ig).row(0) += (g.cwiseProduct(normed)).colwise().sum();
    if (t.needs_grad(ix)) {
      const Mat<S>& gain_v = t.value(ig);
      Mat<S>& gx = t.grad(ix);
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        auto dy = (g.row(r).array() * gain_v.row(0).array()).eval();
        S mean_dy = dy.mean();
        S mean_dyy = (dy * normed.row(r).array()).mean();
        gx.row(r).array() +=
            inv_sigma(r, 0) * (dy - mean_dy - normed.row(r).array() * mean_dyy);
      }
    }
  };
  return x.tape->push(std::move(out), back, ng, {ix, ig, ib});
}

// tanh-approximation gelu
template <typename S>
Tensor<S> gelu(Tensor<S> a) {
  const S k = S(std::sqrt(2.0 / M_PI));
  const S c = S(0.044715);
  Mat<S> out = a.value().unaryExpr([k, c](S v) {
    return S(0.5) * v * (S(1) + std::tanh(k * (v + c * v * v * v)));
  });
  int ia = a.id;
  return a.tape->push(std::move(out),
      [ia, k, c](Tape<S>& t, int id) {
        if (!t.needs_grad(ia)) return;
        const Mat<S>& x = t.value(ia);
        Mat<S> dydx = x.unaryExpr([k, c](S v) {
          S u = k * (v + c * v * v * v);
          S th = std::tanh(u);
          S sech2 = S(1) - th * th;
          return S(0.5) * (S(1) + th) + S(0.5) * v * sech2 * k * (S(1) + S(3) * c * v * v);
        });
        t.grad(ia) += t.grad(id).cwiseProduct(dydx);
      },
      a.tape->needs_grad(a.id), {ia});
}

// gather rows of an embedding table
template <typename S>
Tensor<S> embedding_rows(Tensor<S> table, const std::vector<int32_t>& ids) {
  Eigen::Index v = table.rows();
  for (int32_t t : ids)
    if (t < 0 || t >= v) fail("token id ", t, " out of vocabulary (V=", v, ")");
  Mat<S> out(Eigen::Index(ids.size()), table.cols());
  for (size_t i = 0; i < ids.size(); ++i) out.row(Eigen::Index(i)) = table.value().row(ids[i]);
  int it = table.id;
  return table.tape->push(std::move(out),
      [it, ids](Tape<S>& t, int id) {
        if (!t.needs_grad(it)) return;
        const Mat<S>& g = t.grad(id);
        Mat<S>& gt = t.grad(it);
        for (size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(Eigen::Index(i));
      },
      table.tape->needs_grad(table.id), {it});
}

// rotary embedding with one shared angle set per row; pairs are (k, k + d/2)
// and the pair-k angle at position p is p * theta_base^(-2k/d)
template <typename S>
Tensor<S> rope_rows(Tensor<S> x, const std::vector<int32_t>& positions, double theta_base) {
  Eigen::Index t_len = x.rows(), d = x.cols();
  if (d % 2 != 0) fail("rope_rotate requires an even feature dimension, got ", d);
  if (Eigen::Index(positions.size()) != t_len)
    fail("rope_rotate: ", positions.size(), " positions for ", t_len, " rows");
  Eigen::Index half = d / 2;
  Mat<S> cosm(t_len, half), sinm(t_len, half);
  for (Eigen::Index r = 0; r < t_len; ++r)
    for (Eigen::Index k = 0; k < half; ++k) {
      double angle = double(positions[size_t(r)]) *
                     std::pow(theta_base, -2.0 * double(k) / double(d));
      cosm(r, k) = S(std::cos(angle));
      sinm(r, k) = S(std::sin(angle));
    }
  const Mat<S>& v = x.value();
  Mat<S> out(t_len, d);
  out.leftCols(half) =
      v.leftCols(half).cwiseProduct(cosm) - v.rightCols(half).cwiseProduct(sinm);
  out.rightCols(half) =
      v.rightCols(half).cwiseProduct(cosm) + v.leftCols(half).cwiseProduct(sinm);
  int ix = x.id;
  return x.tape->push(std::move(out),
      [ix, cosm, sinm, half](Tape<S>& t, int id) {
        if (!t.needs_grad(ix)) return;
        const Mat<S>& g = t.grad(id);
        Mat<S>& gx = t.grad(ix);
        gx.leftCols(half) +=
            g.leftCols(half).cwiseProduct(cosm) + g.rightCols(half).cwiseProduct(sinm);
        gx.rightCols(half) +=
            g.rightCols(half).cwiseProduct(cosm) - g.leftCols(half).cwiseProduct(sinm);
      },
      x.tape->needs_grad(x.id), {ix});
}

// mean over rows of -log softmax(row)[target]; returns 1x1
template <typename S>
Tensor<S> cross_entropy_rows(Tensor<S> logits, const std::vector<int32_t>& targets) {
  Eigen::Index n = logits.rows(), v = logits.cols();
  if (Eigen::Index(targets.size()) != n)
    fail("cross_entropy: ", targets.size(), " targets for ", n, " rows");
  for (int32_t t : targets)
    if (t < 0 || t >= v) fail("cross_entropy target ", t, " out of range (V=", v, ")");
  Mat<S> probs(n, v);
  S loss = S(0);
  for (Eigen::Index r = 0; r < n; ++r) {
    S m = logits.value().row(r).maxCoeff();
    probs.row(r) = (logits.value().row(r).array() - m).exp();
    S sum = probs.row(r).sum();
    probs.row(r) /= sum;
    loss -= std::log(probs(r, targets[size_t(r)]));
  }
  loss /= S(n);
  if (!std::isfinite(double(loss))) fail("cross_entropy produced a non-finite loss");
  Mat<S> out(1, 1);
  out(0, 0) = loss;
  int il = logits.id;
  return logits.tape->push(std::move(out),
      [il, probs, targets](Tape<S>& t, int id) {
        if (!t.needs_grad(il)) return;
        S g = t.grad(id)(0, 0) / S(targets.size());
        Mat<S>& gl = t.grad(il);
        gl += probs * g;
        for (size_t r = 0; r < targets.size(); ++r)
          gl(Eigen::Index(r), targets[r]) -= g;
      },
      logits.tape->needs_grad(logits.id), {il});
}

// additive attention mask: 0 where j <= i, -inf above the diagonal
template <typename S>
Mat<S> causal_mask(Eigen::Index t_len) {
  Mat<S> m = Mat<S>::Zero(t_len, t_len);
  const S neg_inf = -std::numeric_limits<S>::infinity();
  for (Eigen::Index i = 0; i < t_len; ++i)
    for (Eigen::Index j = i + 1; j < t_len; ++j) m(i, j) = neg_inf;
  return m;
}

// ---------------------------------------------------------------------------
// finite-difference verification (64-bit mode)

template <typename S>
struct ParamRef {
  std::string name;
  Mat<S>* value = nullptr;
  Mat<S>* grad = nullptr;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_entry;
};

// Central differences (f(x+eps) - f(x-eps)) / 2eps on sampled entries of every
// parameter tensor, against one reverse pass. Relative error uses
// |a - n| / max(|a|, |n|, floor).
template <typename S>
GradCheckResult grad_check(const std::function<Tensor<S>(Tape<S>&)>& build,
                           std::vector<ParamRef<S>> params, double eps,
                           int samples_per_tensor, uint64_t seed,
                           double denom_floor = 1e-6) {
  static_assert(std::is_same_v<S, double>, "grad_check runs in 64-bit mode");
  for (auto& p : params) p.grad->setZero();
  {
    Tape<S> tape;
    Tensor<S> loss = build(tape);
    tape.backward(loss);
  }
  std::vector<Mat<S>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(*p.grad);

  auto eval = [&]() -> double {
    Tape<S> tape;
    return double(build(tape).value()(0, 0));
  };

  Rng rng = Rng(seed).sub("grad_check");
  GradCheckResult res;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Mat<S>& v = *params[pi].value;
    Eigen::Index total = v.size();
    int n_samples = int(std::min<Eigen::Index>(samples_per_tensor, total));
    for (int s = 0; s < n_samples; ++s) {
      Eigen::Index flat = Eigen::Index(rng.uniform_int(uint64_t(total)));
      Eigen::Index r = flat / v.cols(), c = flat % v.cols();
      S old = v(r, c);
      v(r, c) = old + S(eps);
      double fp = eval();
      v(r, c) = old - S(eps);
      double fm = eval();
      v(r, c) = old;
      double numeric = (fp - fm) / (2.0 * eps);
      double a = double(analytic[pi](r, c));
      double rel = std::abs(a - numeric) /
                   std::max({std::abs(a), std::abs(numeric), denom_floor});
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_entry = concat(params[pi].name, "(", r, ",", c, "): analytic ", a,
                                 " vs numeric ", numeric);
      }
    }
  }
  return res;
}

}  // namespace catchfm::te
