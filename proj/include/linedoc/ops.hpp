#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "linedoc/tensor.hpp"

namespace linedoc {
namespace ops {

namespace detail {
inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const char* what) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

inline void accumulate(const std::shared_ptr<TensorNode>& p, size_t i,
                       double g) {
  if (p->requires_grad) {
    p->ensure_grad();
    p->grad[i] += g;
  }
}
}  // namespace detail

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  auto an = a.node(), bn = b.node();
  Tensor out = make_op_result(a.shape(), {an, bn}, [an, bn](TensorNode& o) {
    for (size_t i = 0; i < o.numel(); ++i) {
      detail::accumulate(an, i, o.grad[i]);
      detail::accumulate(bn, i, o.grad[i]);
    }
  });
  for (size_t i = 0; i < out.numel(); ++i)
    out.data()[i] = an->value[i] + bn->value[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  auto an = a.node(), bn = b.node();
  Tensor out = make_op_result(a.shape(), {an, bn}, [an, bn](TensorNode& o) {
    for (size_t i = 0; i < o.numel(); ++i) {
      detail::accumulate(an, i, o.grad[i]);
      detail::accumulate(bn, i, -o.grad[i]);
    }
  });
  for (size_t i = 0; i < out.numel(); ++i)
    out.data()[i] = an->value[i] - bn->value[i];
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  auto an = a.node(), bn = b.node();
  Tensor out = make_op_result(a.shape(), {an, bn}, [an, bn](TensorNode& o) {
    for (size_t i = 0; i < o.numel(); ++i) {
      detail::accumulate(an, i, o.grad[i] * bn->value[i]);
      detail::accumulate(bn, i, o.grad[i] * an->value[i]);
    }
  });
  for (size_t i = 0; i < out.numel(); ++i)
    out.data()[i] = an->value[i] * bn->value[i];
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  auto an = a.node();
  Tensor out = make_op_result(a.shape(), {an}, [an, c](TensorNode& o) {
    for (size_t i = 0; i < o.numel(); ++i)
      detail::accumulate(an, i, o.grad[i] * c);
  });
  for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = an->value[i] * c;
  return out;
}

// tanh-approximated GELU; smooth, so finite differences behave
inline Tensor gelu(const Tensor& a) {
  auto an = a.node();
  Tensor out = make_op_result(a.shape(), {an}, [an](TensorNode& o) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    for (size_t i = 0; i < o.numel(); ++i) {
      double x = an->value[i];
      double u = k * (x + 0.044715 * x * x * x);
      double t = std::tanh(u);
      double du = k * (1.0 + 3.0 * 0.044715 * x * x);
      double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      detail::accumulate(an, i, o.grad[i] * d);
    }
  });
  constexpr double k = 0.7978845608028654;
  for (size_t i = 0; i < out.numel(); ++i) {
    double x = an->value[i];
    out.data()[i] = 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
  }
  return out;
}

// ---- matrix ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[0])
    throw std::invalid_argument("matmul: bad shapes " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  auto an = a.node(), bn = b.node();
  Tensor out =
      make_op_result({m, n}, {an, bn}, [an, bn, m, k, n](TensorNode& o) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
              double g = o.grad[static_cast<size_t>(i) * n + j];
              if (g == 0.0) continue;
              for (int t = 0; t < k; ++t)
                an->grad[static_cast<size_t>(i) * k + t] +=
                    g * bn->value[static_cast<size_t>(t) * n + j];
            }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int i = 0; i < m; ++i)
            for (int t = 0; t < k; ++t) {
              double av = an->value[static_cast<size_t>(i) * k + t];
              if (av == 0.0) continue;
              for (int j = 0; j < n; ++j)
                bn->grad[static_cast<size_t>(t) * n + j] +=
                    av * o.grad[static_cast<size_t>(i) * n + j];
            }
        }
      });
  for (int i = 0; i < m; ++i)
    for (int t = 0; t < k; ++t) {
      double av = an->value[static_cast<size_t>(i) * k + t];
      if (av == 0.0) continue;
      for (int j = 0; j < n; ++j)
        out.data()[static_cast<size_t>(i) * n + j] +=
            av * bn->value[static_cast<size_t>(t) * n + j];
    }
  return out;
}

// mat [R,C] + vec [C] broadcast over rows
inline Tensor add_rowvec(const Tensor& mat, const Tensor& vec) {
  if (mat.shape().size() != 2 || vec.shape().size() != 1 ||
      mat.shape()[1] != vec.shape()[0])
    throw std::invalid_argument("add_rowvec: bad shapes");
  const int r = mat.shape()[0], c = mat.shape()[1];
  auto mn = mat.node(), vn = vec.node();
  Tensor out = make_op_result({r, c}, {mn, vn}, [mn, vn, r, c](TensorNode& o) {
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) {
        double g = o.grad[static_cast<size_t>(i) * c + j];
        detail::accumulate(mn, static_cast<size_t>(i) * c + j, g);
        detail::accumulate(vn, static_cast<size_t>(j), g);
      }
  });
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out.data()[static_cast<size_t>(i) * c + j] =
          mn->value[static_cast<size_t>(i) * c + j] + vn->value[j];
  return out;
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---- row-structured ----

// softmax along the last axis of a 2D tensor
inline Tensor softmax_rows(const Tensor& x) {
  if (x.shape().size() != 2) throw std::invalid_argument("softmax_rows: 2D only");
  const int r = x.shape()[0], c = x.shape()[1];
  auto xn = x.node();
  Tensor out = make_op_result({r, c}, {xn}, [xn, r, c](TensorNode& o) {
    for (int i = 0; i < r; ++i) {
      double dot = 0.0;
      const size_t base = static_cast<size_t>(i) * c;
      for (int j = 0; j < c; ++j) dot += o.grad[base + j] * o.value[base + j];
      for (int j = 0; j < c; ++j)
        detail::accumulate(xn, base + j,
                           o.value[base + j] * (o.grad[base + j] - dot));
    }
  });
  for (int i = 0; i < r; ++i) {
    const size_t base = static_cast<size_t>(i) * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < c; ++j) mx = std::max(mx, xn->value[base + j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      out.data()[base + j] = std::exp(xn->value[base + j] - mx);
      sum += out.data()[base + j];
    }
    for (int j = 0; j < c; ++j) out.data()[base + j] /= sum;
  }
  return out;
}

// layer norm over the last axis of [R, C] with learned gain/bias [C]
inline Tensor layer_norm(const Tensor& x, const Tensor& gain,
                         const Tensor& bias, double eps = 1e-5) {
  if (x.shape().size() != 2) throw std::invalid_argument("layer_norm: 2D only");
  const int r = x.shape()[0], c = x.shape()[1];
  if (gain.shape() != Shape{c} || bias.shape() != Shape{c})
    throw std::invalid_argument("layer_norm: gain/bias shape mismatch");
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  auto stats = std::make_shared<std::vector<double>>();  // mean, rstd per row
  stats->resize(static_cast<size_t>(r) * 2);
  Tensor out = make_op_result(
      {r, c}, {xn, gn, bn}, [xn, gn, bn, stats, r, c](TensorNode& o) {
        for (int i = 0; i < r; ++i) {
          const size_t base = static_cast<size_t>(i) * c;
          const double mean = (*stats)[static_cast<size_t>(i) * 2];
          const double rstd = (*stats)[static_cast<size_t>(i) * 2 + 1];
          double sum_gh = 0.0, sum_ghx = 0.0;
          for (int j = 0; j < c; ++j) {
            double xhat = (xn->value[base + j] - mean) * rstd;
            double gh = o.grad[base + j] * gn->value[j];
            sum_gh += gh;
            sum_ghx += gh * xhat;
            detail::accumulate(gn, static_cast<size_t>(j),
                               o.grad[base + j] * xhat);
            detail::accumulate(bn, static_cast<size_t>(j), o.grad[base + j]);
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            for (int j = 0; j < c; ++j) {
              double xhat = (xn->value[base + j] - mean) * rstd;
              double gh = o.grad[base + j] * gn->value[j];
              xn->grad[base + j] +=
                  rstd * (gh - (sum_gh + xhat * sum_ghx) / c);
            }
          }
        }
      });
  for (int i = 0; i < r; ++i) {
    const size_t base = static_cast<size_t>(i) * c;
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += xn->value[base + j];
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      double d = xn->value[base + j] - mean;
      var += d * d;
    }
    var /= c;
    double rstd = 1.0 / std::sqrt(var + eps);
    (*stats)[static_cast<size_t>(i) * 2] = mean;
    (*stats)[static_cast<size_t>(i) * 2 + 1] = rstd;
    for (int j = 0; j < c; ++j)
      out.data()[base + j] =
          (xn->value[base + j] - mean) * rstd * gn->value[j] + bn->value[j];
  }
  return out;
}

// row gather: out[i, :] = table[ids[i], :]; grad scatters back to rows.
// Doubles as embedding lookup.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  if (table.shape().size() != 2)
    throw std::invalid_argument("gather_rows: table must be 2D");
  const int rows = table.shape()[0], c = table.shape()[1];
  for (int id : ids)
    if (id < 0 || id >= rows)
      throw std::out_of_range("gather_rows: id " + std::to_string(id) +
                              " outside table of " + std::to_string(rows));
  const int n = static_cast<int>(ids.size());
  auto tn = table.node();
  Tensor out = make_op_result({n, c}, {tn}, [tn, ids, n, c](TensorNode& o) {
    if (!tn->requires_grad) return;
    tn->ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j)
        tn->grad[static_cast<size_t>(ids[i]) * c + j] +=
            o.grad[static_cast<size_t>(i) * c + j];
  });
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j)
      out.data()[static_cast<size_t>(i) * c + j] =
          tn->value[static_cast<size_t>(ids[i]) * c + j];
  return out;
}

// scalar gather from a 1D table; used for relative-position bias matrices
inline Tensor gather_scalars(const Tensor& table, const std::vector<int>& idx,
                             const Shape& out_shape) {
  if (table.shape().size() != 1)
    throw std::invalid_argument("gather_scalars: table must be 1D");
  if (idx.size() != shape_numel(out_shape))
    throw std::invalid_argument("gather_scalars: index count mismatch");
  const int k = table.shape()[0];
  for (int i : idx)
    if (i < 0 || i >= k) throw std::out_of_range("gather_scalars: bad index");
  auto tn = table.node();
  Tensor out = make_op_result(out_shape, {tn}, [tn, idx](TensorNode& o) {
    if (!tn->requires_grad) return;
    tn->ensure_grad();
    for (size_t i = 0; i < idx.size(); ++i)
      tn->grad[static_cast<size_t>(idx[i])] += o.grad[i];
  });
  for (size_t i = 0; i < idx.size(); ++i)
    out.data()[i] = tn->value[static_cast<size_t>(idx[i])];
  return out;
}

// select rows of x [T, C] at positions; grad scatters
inline Tensor select_rows(const Tensor& x, const std::vector<int>& positions) {
  if (x.shape().size() != 2)
    throw std::invalid_argument("select_rows: 2D only");
  const int t = x.shape()[0], c = x.shape()[1];
  for (int p : positions)
    if (p < 0 || p >= t) throw std::out_of_range("select_rows: bad position");
  const int n = static_cast<int>(positions.size());
  auto xn = x.node();
  Tensor out = make_op_result({n, c}, {xn}, [xn, positions, n, c](TensorNode& o) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j)
        xn->grad[static_cast<size_t>(positions[i]) * c + j] +=
            o.grad[static_cast<size_t>(i) * c + j];
  });
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j)
      out.data()[static_cast<size_t>(i) * c + j] =
          xn->value[static_cast<size_t>(positions[i]) * c + j];
  return out;
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[1])
    throw std::invalid_argument("concat_rows: column mismatch");
  const int ra = a.shape()[0], rb = b.shape()[0], c = a.shape()[1];
  auto an = a.node(), bn = b.node();
  Tensor out =
      make_op_result({ra + rb, c}, {an, bn}, [an, bn, ra, rb, c](TensorNode& o) {
        for (size_t i = 0; i < static_cast<size_t>(ra) * c; ++i)
          detail::accumulate(an, i, o.grad[i]);
        const size_t off = static_cast<size_t>(ra) * c;
        for (size_t i = 0; i < static_cast<size_t>(rb) * c; ++i)
          detail::accumulate(bn, i, o.grad[off + i]);
      });
  std::copy(an->value.begin(), an->value.end(), out.data().begin());
  std::copy(bn->value.begin(), bn->value.end(),
            out.data().begin() + static_cast<long>(a.numel()));
  return out;
}

// concatenate along columns: [R, Ca] ++ [R, Cb] -> [R, Ca+Cb]
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[0] != b.shape()[0])
    throw std::invalid_argument("concat_cols: row mismatch");
  const int r = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
  auto an = a.node(), bn = b.node();
  Tensor out =
      make_op_result({r, ca + cb}, {an, bn}, [an, bn, r, ca, cb](TensorNode& o) {
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < ca; ++j)
            detail::accumulate(an, static_cast<size_t>(i) * ca + j,
                               o.grad[static_cast<size_t>(i) * (ca + cb) + j]);
          for (int j = 0; j < cb; ++j)
            detail::accumulate(
                bn, static_cast<size_t>(i) * cb + j,
                o.grad[static_cast<size_t>(i) * (ca + cb) + ca + j]);
        }
      });
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < ca; ++j)
      out.data()[static_cast<size_t>(i) * (ca + cb) + j] =
          an->value[static_cast<size_t>(i) * ca + j];
    for (int j = 0; j < cb; ++j)
      out.data()[static_cast<size_t>(i) * (ca + cb) + ca + j] =
          bn->value[static_cast<size_t>(i) * cb + j];
  }
  return out;
}

inline Tensor transpose2d(const Tensor& x) {
  if (x.shape().size() != 2) throw std::invalid_argument("transpose2d: 2D only");
  const int r = x.shape()[0], c = x.shape()[1];
  auto xn = x.node();
  Tensor out = make_op_result({c, r}, {xn}, [xn, r, c](TensorNode& o) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        xn->grad[static_cast<size_t>(i) * c + j] +=
            o.grad[static_cast<size_t>(j) * r + i];
  });
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out.data()[static_cast<size_t>(j) * r + i] =
          xn->value[static_cast<size_t>(i) * c + j];
  return out;
}

// zero out rows not flagged keep; gradient matches
inline Tensor mask_rows(const Tensor& x, const std::vector<bool>& keep) {
  if (x.shape().size() != 2) throw std::invalid_argument("mask_rows: 2D only");
  const int r = x.shape()[0], c = x.shape()[1];
  if (static_cast<int>(keep.size()) != r)
    throw std::invalid_argument("mask_rows: mask size mismatch");
  auto xn = x.node();
  Tensor out = make_op_result({r, c}, {xn}, [xn, keep, r, c](TensorNode& o) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (int i = 0; i < r; ++i) {
      if (!keep[static_cast<size_t>(i)]) continue;
      for (int j = 0; j < c; ++j)
        xn->grad[static_cast<size_t>(i) * c + j] +=
            o.grad[static_cast<size_t>(i) * c + j];
    }
  });
  for (int i = 0; i < r; ++i) {
    if (!keep[static_cast<size_t>(i)]) continue;
    for (int j = 0; j < c; ++j)
      out.data()[static_cast<size_t>(i) * c + j] =
          xn->value[static_cast<size_t>(i) * c + j];
  }
  return out;
}

inline Tensor reshape(const Tensor& x, const Shape& new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw std::invalid_argument("reshape: element count mismatch");
  auto xn = x.node();
  Tensor out = make_op_result(new_shape, {xn}, [xn](TensorNode& o) {
    for (size_t i = 0; i < o.numel(); ++i) detail::accumulate(xn, i, o.grad[i]);
  });
  std::copy(xn->value.begin(), xn->value.end(), out.data().begin());
  return out;
}

// mean over all elements -> scalar
inline Tensor mean_all(const Tensor& x) {
  auto xn = x.node();
  const double inv = 1.0 / static_cast<double>(x.numel());
  Tensor out = make_op_result({}, {xn}, [xn, inv](TensorNode& o) {
    for (size_t i = 0; i < xn->value.size(); ++i)
      detail::accumulate(xn, i, o.grad[0] * inv);
  });
  double s = 0.0;
  for (double v : xn->value) s += v;
  out.data()[0] = s * inv;
  return out;
}

// mean over rows of [R, C] -> [C]
inline Tensor mean_rows(const Tensor& x) {
  if (x.shape().size() != 2) throw std::invalid_argument("mean_rows: 2D only");
  const int r = x.shape()[0], c = x.shape()[1];
  auto xn = x.node();
  const double inv = 1.0 / r;
  Tensor out = make_op_result({c}, {xn}, [xn, r, c, inv](TensorNode& o) {
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        detail::accumulate(xn, static_cast<size_t>(i) * c + j,
                           o.grad[static_cast<size_t>(j)] * inv);
  });
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out.data()[static_cast<size_t>(j)] +=
          xn->value[static_cast<size_t>(i) * c + j] * inv;
  return out;
}

// L2-normalize each row; rows with norm below eps map to zero
inline Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12) {
  if (x.shape().size() != 2)
    throw std::invalid_argument("l2_normalize_rows: 2D only");
  const int r = x.shape()[0], c = x.shape()[1];
  auto xn = x.node();
  auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(r));
  Tensor out =
      make_op_result({r, c}, {xn}, [xn, norms, r, c](TensorNode& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int i = 0; i < r; ++i) {
          const size_t base = static_cast<size_t>(i) * c;
          double nrm = (*norms)[static_cast<size_t>(i)];
          if (nrm == 0.0) continue;  // zero row stays zero
          double dot = 0.0;
          for (int j = 0; j < c; ++j) dot += o.grad[base + j] * o.value[base + j];
          for (int j = 0; j < c; ++j)
            xn->grad[base + j] +=
                (o.grad[base + j] - dot * o.value[base + j]) / nrm;
        }
      });
  for (int i = 0; i < r; ++i) {
    const size_t base = static_cast<size_t>(i) * c;
    double sq = 0.0;
    for (int j = 0; j < c; ++j) sq += xn->value[base + j] * xn->value[base + j];
    double nrm = std::sqrt(sq);
    if (nrm < eps) {
      (*norms)[static_cast<size_t>(i)] = 0.0;
      continue;
    }
    (*norms)[static_cast<size_t>(i)] = nrm;
    for (int j = 0; j < c; ++j) out.data()[base + j] = xn->value[base + j] / nrm;
  }
  return out;
}

// ---- attention ----

// Multi-head scaled dot-product self-attention with an additive pre-softmax
// bias shared across heads. q, k, v: [T, d]; bias: [T, T].
inline Tensor multihead_attention(const Tensor& q, const Tensor& k,
                                  const Tensor& v, const Tensor& bias,
                                  int n_heads) {
  const int t = q.shape()[0], d = q.shape()[1];
  detail::check_same_shape(q, k, "attention q/k");
  detail::check_same_shape(q, v, "attention q/v");
  if (bias.shape() != Shape{t, t})
    throw std::invalid_argument("attention: bias must be [T, T]");
  if (n_heads < 1 || d % n_heads != 0)
    throw std::invalid_argument("attention: d must divide by heads");
  const int dh = d / n_heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  auto qn = q.node(), kn = k.node(), vn = v.node(), biasn = bias.node();
  // per-head attention probabilities, kept for the backward pass
  auto probs = std::make_shared<std::vector<double>>(
      static_cast<size_t>(n_heads) * t * t);

  Tensor out = make_op_result(
      {t, d}, {qn, kn, vn, biasn},
      [qn, kn, vn, biasn, probs, t, d, dh, n_heads, scl](TensorNode& o) {
        std::vector<double> dlog(static_cast<size_t>(t) * t);
        for (int h = 0; h < n_heads; ++h) {
          const int hoff = h * dh;
          const double* a = probs->data() + static_cast<size_t>(h) * t * t;
          // dV, dA
          for (int i = 0; i < t; ++i) {
            // dA[i, j] = dO_h[i, :] . V_h[j, :]
            double dot = 0.0;
            for (int j = 0; j < t; ++j) {
              double da = 0.0;
              for (int e = 0; e < dh; ++e)
                da += o.grad[static_cast<size_t>(i) * d + hoff + e] *
                      vn->value[static_cast<size_t>(j) * d + hoff + e];
              dlog[static_cast<size_t>(i) * t + j] = da;
              dot += da * a[static_cast<size_t>(i) * t + j];
            }
            // softmax backward in place: dlogit = A * (dA - rowdot)
            for (int j = 0; j < t; ++j) {
              double& x = dlog[static_cast<size_t>(i) * t + j];
              x = a[static_cast<size_t>(i) * t + j] * (x - dot);
            }
          }
          if (vn->requires_grad) {
            vn->ensure_grad();
            for (int j = 0; j < t; ++j)
              for (int i = 0; i < t; ++i) {
                double aij = a[static_cast<size_t>(i) * t + j];
                if (aij == 0.0) continue;
                for (int e = 0; e < dh; ++e)
                  vn->grad[static_cast<size_t>(j) * d + hoff + e] +=
                      aij * o.grad[static_cast<size_t>(i) * d + hoff + e];
              }
          }
          if (biasn->requires_grad) {
            biasn->ensure_grad();
            for (size_t i = 0; i < dlog.size(); ++i) biasn->grad[i] += dlog[i];
          }
          if (qn->requires_grad) {
            qn->ensure_grad();
            for (int i = 0; i < t; ++i)
              for (int j = 0; j < t; ++j) {
                double g = dlog[static_cast<size_t>(i) * t + j] * scl;
                if (g == 0.0) continue;
                for (int e = 0; e < dh; ++e)
                  qn->grad[static_cast<size_t>(i) * d + hoff + e] +=
                      g * kn->value[static_cast<size_t>(j) * d + hoff + e];
              }
          }
          if (kn->requires_grad) {
            kn->ensure_grad();
            for (int i = 0; i < t; ++i)
              for (int j = 0; j < t; ++j) {
                double g = dlog[static_cast<size_t>(i) * t + j] * scl;
                if (g == 0.0) continue;
                for (int e = 0; e < dh; ++e)
                  kn->grad[static_cast<size_t>(j) * d + hoff + e] +=
                      g * qn->value[static_cast<size_t>(i) * d + hoff + e];
              }
          }
        }
      });

  std::vector<double> logits(static_cast<size_t>(t) * t);
  for (int h = 0; h < n_heads; ++h) {
    const int hoff = h * dh;
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < t; ++j) {
        double s = 0.0;
        for (int e = 0; e < dh; ++e)
          s += qn->value[static_cast<size_t>(i) * d + hoff + e] *
               kn->value[static_cast<size_t>(j) * d + hoff + e];
        logits[static_cast<size_t>(i) * t + j] =
            s * scl + biasn->value[static_cast<size_t>(i) * t + j];
      }
    double* a = probs->data() + static_cast<size_t>(h) * t * t;
    for (int i = 0; i < t; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < t; ++j)
        mx = std::max(mx, logits[static_cast<size_t>(i) * t + j]);
      double sum = 0.0;
      for (int j = 0; j < t; ++j) {
        double e = std::exp(logits[static_cast<size_t>(i) * t + j] - mx);
        a[static_cast<size_t>(i) * t + j] = e;
        sum += e;
      }
      for (int j = 0; j < t; ++j) a[static_cast<size_t>(i) * t + j] /= sum;
    }
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < t; ++j) {
        double aij = a[static_cast<size_t>(i) * t + j];
        if (aij == 0.0) continue;
        for (int e = 0; e < dh; ++e)
          out.data()[static_cast<size_t>(i) * d + hoff + e] +=
              aij * vn->value[static_cast<size_t>(j) * d + hoff + e];
      }
  }
  return out;
}

// ---- convolution ----

// x: [Cin, H, W], w: [Cout, Cin, K, K], b: [Cout]; square kernel
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                     int stride, int pad) {
  if (x.shape().size() != 3 || w.shape().size() != 4)
    throw std::invalid_argument("conv2d: bad ranks");
  const int cin = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  const int cout = w.shape()[0], k = w.shape()[2];
  if (w.shape()[1] != cin || w.shape()[3] != k || b.shape() != Shape{cout})
    throw std::invalid_argument("conv2d: shape mismatch");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  auto xn = x.node(), wn = w.node(), bn = b.node();
  Tensor out = make_op_result(
      {cout, ho, wo}, {xn, wn, bn},
      [xn, wn, bn, cin, h, wd, cout, k, ho, wo, stride, pad](TensorNode& o) {
        for (int co = 0; co < cout; ++co)
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
              double g =
                  o.grad[(static_cast<size_t>(co) * ho + oy) * wo + ox];
              if (g == 0.0) continue;
              detail::accumulate(bn, static_cast<size_t>(co), g);
              for (int ci = 0; ci < cin; ++ci)
                for (int ky = 0; ky < k; ++ky) {
                  int iy = oy * stride + ky - pad;
                  if (iy < 0 || iy >= h) continue;
                  for (int kx = 0; kx < k; ++kx) {
                    int ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= wd) continue;
                    size_t xi = (static_cast<size_t>(ci) * h + iy) * wd + ix;
                    size_t wi =
                        ((static_cast<size_t>(co) * cin + ci) * k + ky) * k +
                        kx;
                    if (wn->requires_grad) {
                      wn->ensure_grad();
                      wn->grad[wi] += g * xn->value[xi];
                    }
                    if (xn->requires_grad) {
                      xn->ensure_grad();
                      xn->grad[xi] += g * wn->value[wi];
                    }
                  }
                }
            }
      });
  for (int co = 0; co < cout; ++co)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double acc = bn->value[static_cast<size_t>(co)];
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < k; ++ky) {
            int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < k; ++kx) {
              int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= wd) continue;
              acc += xn->value[(static_cast<size_t>(ci) * h + iy) * wd + ix] *
                     wn->value[((static_cast<size_t>(co) * cin + ci) * k + ky) *
                                   k +
                               kx];
            }
          }
        out.data()[(static_cast<size_t>(co) * ho + oy) * wo + ox] = acc;
      }
  return out;
}

// transposed convolution, x: [Cin, H, W], w: [Cin, Cout, K, K], b: [Cout]
inline Tensor conv_transpose2d(const Tensor& x, const Tensor& w,
                               const Tensor& b, int stride) {
  if (x.shape().size() != 3 || w.shape().size() != 4)
    throw std::invalid_argument("conv_transpose2d: bad ranks");
  const int cin = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  const int cout = w.shape()[1], k = w.shape()[2];
  if (w.shape()[0] != cin || w.shape()[3] != k || b.shape() != Shape{cout})
    throw std::invalid_argument("conv_transpose2d: shape mismatch");
  const int ho = (h - 1) * stride + k;
  const int wo = (wd - 1) * stride + k;
  auto xn = x.node(), wn = w.node(), bn = b.node();
  Tensor out = make_op_result(
      {cout, ho, wo}, {xn, wn, bn},
      [xn, wn, bn, cin, h, wd, cout, k, ho, wo, stride](TensorNode& o) {
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int co = 0; co < cout; ++co) {
            double s = 0.0;
            for (int i = 0; i < ho * wo; ++i)
              s += o.grad[static_cast<size_t>(co) * ho * wo + i];
            bn->grad[static_cast<size_t>(co)] += s;
          }
        }
        for (int ci = 0; ci < cin; ++ci)
          for (int iy = 0; iy < h; ++iy)
            for (int ix = 0; ix < wd; ++ix) {
              size_t xi = (static_cast<size_t>(ci) * h + iy) * wd + ix;
              double xv = xn->value[xi];
              double dx = 0.0;
              for (int co = 0; co < cout; ++co)
                for (int ky = 0; ky < k; ++ky)
                  for (int kx = 0; kx < k; ++kx) {
                    int oy = iy * stride + ky, ox = ix * stride + kx;
                    double g =
                        o.grad[(static_cast<size_t>(co) * ho + oy) * wo + ox];
                    if (g == 0.0) continue;
                    size_t wi =
                        ((static_cast<size_t>(ci) * cout + co) * k + ky) * k +
                        kx;
                    dx += g * wn->value[wi];
                    if (wn->requires_grad) {
                      wn->ensure_grad();
                      wn->grad[wi] += g * xv;
                    }
                  }
              if (xn->requires_grad) {
                xn->ensure_grad();
                xn->grad[xi] += dx;
              }
            }
      });
  for (int co = 0; co < cout; ++co)
    std::fill_n(out.data().begin() + static_cast<size_t>(co) * ho * wo, ho * wo,
                bn->value[static_cast<size_t>(co)]);
  for (int ci = 0; ci < cin; ++ci)
    for (int iy = 0; iy < h; ++iy)
      for (int ix = 0; ix < wd; ++ix) {
        double xv = xn->value[(static_cast<size_t>(ci) * h + iy) * wd + ix];
        if (xv == 0.0) continue;
        for (int co = 0; co < cout; ++co)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx)
              out.data()[(static_cast<size_t>(co) * ho + iy * stride + ky) *
                             wo +
                         ix * stride + kx] +=
                  xv *
                  wn->value[((static_cast<size_t>(ci) * cout + co) * k + ky) *
                                k +
                            kx];
      }
  return out;
}

// adaptive average pooling [C, H, W] -> [C, oh, ow]; window boundaries at
// floor(i*H/oh) .. floor((i+1)*H/oh), which partition the input
inline Tensor adaptive_avg_pool(const Tensor& x, int oh, int ow) {
  if (x.shape().size() != 3)
    throw std::invalid_argument("adaptive_avg_pool: 3D only");
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (h < oh || w < ow)
    throw std::invalid_argument("adaptive_avg_pool: input smaller than output");
  auto xn = x.node();
  Tensor out =
      make_op_result({c, oh, ow}, {xn}, [xn, c, h, w, oh, ow](TensorNode& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
          for (int i = 0; i < oh; ++i) {
            int y0 = i * h / oh, y1 = (i + 1) * h / oh;
            for (int j = 0; j < ow; ++j) {
              int x0 = j * w / ow, x1 = (j + 1) * w / ow;
              double g = o.grad[(static_cast<size_t>(ch) * oh + i) * ow + j] /
                         ((y1 - y0) * (x1 - x0));
              for (int y = y0; y < y1; ++y)
                for (int xx = x0; xx < x1; ++xx)
                  xn->grad[(static_cast<size_t>(ch) * h + y) * w + xx] += g;
            }
          }
      });
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < oh; ++i) {
      int y0 = i * h / oh, y1 = (i + 1) * h / oh;
      for (int j = 0; j < ow; ++j) {
        int x0 = j * w / ow, x1 = (j + 1) * w / ow;
        double s = 0.0;
        for (int y = y0; y < y1; ++y)
          for (int xx = x0; xx < x1; ++xx)
            s += xn->value[(static_cast<size_t>(ch) * h + y) * w + xx];
        out.data()[(static_cast<size_t>(ch) * oh + i) * ow + j] =
            s / ((y1 - y0) * (x1 - x0));
      }
    }
  return out;
}

// average-pool rectangular cell ranges of a feature map [C, H, W].
// cells[l] = {y0, y1, x0, x1} half-open; output [L, C]. Lines flagged
// inactive produce exact zero rows and receive no gradient.
struct CellRect {
  int y0, y1, x0, x1;
};

inline Tensor region_avg_pool(const Tensor& fm, const std::vector<CellRect>& cells,
                              const std::vector<bool>& active) {
  if (fm.shape().size() != 3)
    throw std::invalid_argument("region_avg_pool: 3D only");
  const int c = fm.shape()[0], h = fm.shape()[1], w = fm.shape()[2];
  const int l = static_cast<int>(cells.size());
  if (active.size() != cells.size())
    throw std::invalid_argument("region_avg_pool: mask size mismatch");
  for (int i = 0; i < l; ++i) {
    if (!active[static_cast<size_t>(i)]) continue;
    const CellRect& r = cells[static_cast<size_t>(i)];
    if (r.y0 < 0 || r.y1 > h || r.x0 < 0 || r.x1 > w || r.y0 >= r.y1 ||
        r.x0 >= r.x1)
      throw std::invalid_argument("region_avg_pool: bad cell rect");
  }
  auto fn = fm.node();
  Tensor out = make_op_result(
      {l, c}, {fn}, [fn, cells, active, c, h, w, l](TensorNode& o) {
        if (!fn->requires_grad) return;
        fn->ensure_grad();
        for (int i = 0; i < l; ++i) {
          if (!active[static_cast<size_t>(i)]) continue;
          const CellRect& r = cells[static_cast<size_t>(i)];
          double inv = 1.0 / ((r.y1 - r.y0) * (r.x1 - r.x0));
          for (int ch = 0; ch < c; ++ch) {
            double g = o.grad[static_cast<size_t>(i) * c + ch] * inv;
            for (int y = r.y0; y < r.y1; ++y)
              for (int x = r.x0; x < r.x1; ++x)
                fn->grad[(static_cast<size_t>(ch) * h + y) * w + x] += g;
          }
        }
      });
  for (int i = 0; i < l; ++i) {
    if (!active[static_cast<size_t>(i)]) continue;
    const CellRect& r = cells[static_cast<size_t>(i)];
    double inv = 1.0 / ((r.y1 - r.y0) * (r.x1 - r.x0));
    for (int ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (int y = r.y0; y < r.y1; ++y)
        for (int x = r.x0; x < r.x1; ++x)
          s += fn->value[(static_cast<size_t>(ch) * h + y) * w + x];
      out.data()[static_cast<size_t>(i) * c + ch] = s * inv;
    }
  }
  return out;
}

// per-line mean of token features [T, d] -> [L, d]; membership[t] in
// [0, L) or -1 for tokens outside any line. Empty lines stay zero.
inline Tensor pool_rows_by_group(const Tensor& x,
                                 const std::vector<int>& membership, int groups) {
  if (x.shape().size() != 2)
    throw std::invalid_argument("pool_rows_by_group: 2D only");
  const int t = x.shape()[0], c = x.shape()[1];
  if (static_cast<int>(membership.size()) != t)
    throw std::invalid_argument("pool_rows_by_group: membership size mismatch");
  std::vector<int> counts(static_cast<size_t>(groups), 0);
  for (int m : membership) {
    if (m >= groups) throw std::out_of_range("pool_rows_by_group: bad group");
    if (m >= 0) counts[static_cast<size_t>(m)]++;
  }
  auto xn = x.node();
  Tensor out = make_op_result(
      {groups, c}, {xn}, [xn, membership, counts, t, c](TensorNode& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int i = 0; i < t; ++i) {
          int m = membership[static_cast<size_t>(i)];
          if (m < 0) continue;
          double inv = 1.0 / counts[static_cast<size_t>(m)];
          for (int j = 0; j < c; ++j)
            xn->grad[static_cast<size_t>(i) * c + j] +=
                o.grad[static_cast<size_t>(m) * c + j] * inv;
        }
      });
  for (int i = 0; i < t; ++i) {
    int m = membership[static_cast<size_t>(i)];
    if (m < 0) continue;
    double inv = 1.0 / counts[static_cast<size_t>(m)];
    for (int j = 0; j < c; ++j)
      out.data()[static_cast<size_t>(m) * c + j] +=
          xn->value[static_cast<size_t>(i) * c + j] * inv;
  }
  return out;
}

// ---- losses ----

// mean of -log softmax(logits)[label] over rows not flagged in ignore_mask
inline Tensor cross_entropy_mean(const Tensor& logits,
                                 const std::vector<int>& labels,
                                 const std::vector<bool>& ignore_mask = {}) {
  if (logits.shape().size() != 2)
    throw std::invalid_argument("cross_entropy_mean: logits must be 2D");
  const int n = logits.shape()[0], c = logits.shape()[1];
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("cross_entropy_mean: label count mismatch");
  if (!ignore_mask.empty() && static_cast<int>(ignore_mask.size()) != n)
    throw std::invalid_argument("cross_entropy_mean: mask size mismatch");
  int kept = 0;
  for (int i = 0; i < n; ++i) {
    bool ignored = !ignore_mask.empty() && ignore_mask[static_cast<size_t>(i)];
    if (ignored) continue;
    if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= c)
      throw std::out_of_range("cross_entropy_mean: label out of range");
    ++kept;
  }
  if (kept == 0)
    throw std::invalid_argument("cross_entropy_mean: all rows ignored");
  auto ln = logits.node();
  auto probs = std::make_shared<std::vector<double>>(
      static_cast<size_t>(n) * c);
  const double inv = 1.0 / kept;
  Tensor out = make_op_result(
      {}, {ln}, [ln, probs, labels, ignore_mask, n, c, inv](TensorNode& o) {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        for (int i = 0; i < n; ++i) {
          if (!ignore_mask.empty() && ignore_mask[static_cast<size_t>(i)])
            continue;
          const size_t base = static_cast<size_t>(i) * c;
          for (int j = 0; j < c; ++j) {
            double p = (*probs)[base + j];
            double delta = (j == labels[static_cast<size_t>(i)]) ? 1.0 : 0.0;
            ln->grad[base + j] += o.grad[0] * inv * (p - delta);
          }
        }
      });
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const size_t base = static_cast<size_t>(i) * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < c; ++j) mx = std::max(mx, ln->value[base + j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      (*probs)[base + j] = std::exp(ln->value[base + j] - mx);
      sum += (*probs)[base + j];
    }
    for (int j = 0; j < c; ++j) (*probs)[base + j] /= sum;
    if (!ignore_mask.empty() && ignore_mask[static_cast<size_t>(i)]) continue;
    total -= std::log(
        (*probs)[base + static_cast<size_t>(labels[static_cast<size_t>(i)])]);
  }
  out.data()[0] = total * inv;
  return out;
}

// mean absolute error over masked elements only
inline Tensor l1_masked_mean(const Tensor& pred, const Tensor& target,
                             const std::vector<bool>& mask) {
  detail::check_same_shape(pred, target, "l1_masked_mean");
  if (mask.size() != pred.numel())
    throw std::invalid_argument("l1_masked_mean: mask size mismatch");
  size_t kept = 0;
  for (bool m : mask) kept += m ? 1 : 0;
  if (kept == 0) throw std::invalid_argument("l1_masked_mean: empty mask");
  auto pn = pred.node(), tn = target.node();
  const double inv = 1.0 / static_cast<double>(kept);
  Tensor out = make_op_result({}, {pn, tn}, [pn, tn, mask, inv](TensorNode& o) {
    for (size_t i = 0; i < mask.size(); ++i) {
      if (!mask[i]) continue;
      double diff = pn->value[i] - tn->value[i];
      double s = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
      detail::accumulate(pn, i, o.grad[0] * inv * s);
      detail::accumulate(tn, i, -o.grad[0] * inv * s);
    }
  });
  double total = 0.0;
  for (size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) total += std::abs(pn->value[i] - tn->value[i]);
  out.data()[0] = total * inv;
  return out;
}

// average over real lines of A of the max dot product against real lines
// of B; the textline similarity direction primitive. Gradient flows to
// the argmax pair of each averaged line.
inline Tensor line_max_similarity(const Tensor& a, const Tensor& b,
                                  const std::vector<bool>& mask_a,
                                  const std::vector<bool>& mask_b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[1])
    throw std::invalid_argument("line_max_similarity: bad shapes");
  const int la = a.shape()[0], lb = b.shape()[0], d = a.shape()[1];
  if (static_cast<int>(mask_a.size()) != la ||
      static_cast<int>(mask_b.size()) != lb)
    throw std::invalid_argument("line_max_similarity: mask size mismatch");
  int na = 0, nb = 0;
  for (bool m : mask_a) na += m;
  for (bool m : mask_b) nb += m;
  if (na == 0 || nb == 0)
    throw std::invalid_argument("line_max_similarity: empty mask");
  auto an = a.node(), bn = b.node();
  auto argmax = std::make_shared<std::vector<int>>(static_cast<size_t>(la), -1);
  const double inv = 1.0 / na;
  Tensor out = make_op_result(
      {}, {an, bn}, [an, bn, argmax, mask_a, la, d, inv](TensorNode& o) {
        for (int l = 0; l < la; ++l) {
          if (!mask_a[static_cast<size_t>(l)]) continue;
          int k = (*argmax)[static_cast<size_t>(l)];
          for (int e = 0; e < d; ++e) {
            detail::accumulate(an, static_cast<size_t>(l) * d + e,
                               o.grad[0] * inv *
                                   bn->value[static_cast<size_t>(k) * d + e]);
            detail::accumulate(bn, static_cast<size_t>(k) * d + e,
                               o.grad[0] * inv *
                                   an->value[static_cast<size_t>(l) * d + e]);
          }
        }
      });
  double total = 0.0;
  for (int l = 0; l < la; ++l) {
    if (!mask_a[static_cast<size_t>(l)]) continue;
    double best = -std::numeric_limits<double>::infinity();
    int best_k = -1;
    for (int k = 0; k < lb; ++k) {
      if (!mask_b[static_cast<size_t>(k)]) continue;
      double dot = 0.0;
      for (int e = 0; e < d; ++e)
        dot += an->value[static_cast<size_t>(l) * d + e] *
               bn->value[static_cast<size_t>(k) * d + e];
      if (dot > best) {  // strict: ties go to the lowest index
        best = dot;
        best_k = k;
      }
    }
    (*argmax)[static_cast<size_t>(l)] = best_k;
    total += best;
  }
  out.data()[0] = total * inv;
  return out;
}

// pack scalar tensors into one [n] (or [r, c]) tensor
inline Tensor stack_scalars(const std::vector<Tensor>& xs, const Shape& shape) {
  if (xs.size() != shape_numel(shape))
    throw std::invalid_argument("stack_scalars: count mismatch");
  std::vector<std::shared_ptr<TensorNode>> parents;
  parents.reserve(xs.size());
  for (const Tensor& t : xs) {
    if (t.numel() != 1) throw std::invalid_argument("stack_scalars: non-scalar");
    parents.push_back(t.node());
  }
  auto parents_copy = parents;
  Tensor out =
      make_op_result(shape, std::move(parents), [parents_copy](TensorNode& o) {
        for (size_t i = 0; i < parents_copy.size(); ++i)
          detail::accumulate(parents_copy[i], 0, o.grad[i]);
      });
  for (size_t i = 0; i < parents_copy.size(); ++i)
    out.data()[i] = parents_copy[i]->value[0];
  return out;
}

inline Tensor add_scalars(const Tensor& a, const Tensor& b) { return add(a, b); }

}  // namespace ops
}  // namespace linedoc
