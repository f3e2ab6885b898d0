#include "milore/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "milore/errors.hpp"

namespace milore {

using detail::grad_buffer;
using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

namespace {

void require_matrix(const Tensor& t, const char* what) {
  if (!t.defined()) throw ShapeError(std::string(what) + ": undefined tensor");
  if (t.rank() != 2) throw ShapeError(std::string(what) + ": expected a matrix, got " + to_string(t.shape()));
}

// C[m x n] += A[m x k] * B[k x n]. Four rows of C share each pass over a row
// of B; every element still sums over p in ascending order.
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    const double* a0 = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double x0 = a0[p], x1 = a0[k + p], x2 = a0[2 * k + p], x3 = a0[3 * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bj = brow[j];
        c0[j] += x0 * bj;
        c1[j] += x1 * bj;
        c2[j] += x2 * bj;
        c3[j] += x3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  if (m < 4) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = b + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        c[i * n + j] += acc;
      }
    }
    return;
  }
  // Row-major B^T lets the inner loop run over contiguous columns.
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  }
  gemm_nn(a, bt.data(), c, m, k, n);
}

// C[m x n] += A[k x m]^T * B[k x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t k, std::size_t m, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      const double x0 = arow[i], x1 = arow[i + 1], x2 = arow[i + 2], x3 = arow[i + 3];
      double* c0 = c + i * n;
      double* c1 = c0 + n;
      double* c2 = c1 + n;
      double* c3 = c2 + n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bj = brow[j];
        c0[j] += x0 * bj;
        c1[j] += x1 * bj;
        c2[j] += x2 * bj;
        c3[j] += x3 * bj;
      }
    }
    for (; i < m; ++i) {
      const double api = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

bool needs_grad(const ImplPtr& t) { return t->requires_grad; }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr();
  return make_result({m, n}, std::move(out), {a, b}, [ai, bi, m, k, n](const TensorImpl& o) {
    if (needs_grad(ai)) gemm_nt(o.grad.data(), bi->data.data(), grad_buffer(*ai).data(), m, n, k);
    if (needs_grad(bi)) gemm_tn(ai->data.data(), o.grad.data(), grad_buffer(*bi).data(), m, k, n);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: inner dimensions differ, " + to_string(a.shape()) + " x " +
                     to_string(b.shape()) + "^T");
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr();
  return make_result({m, n}, std::move(out), {a, b}, [ai, bi, m, k, n](const TensorImpl& o) {
    if (needs_grad(ai)) gemm_nn(o.grad.data(), bi->data.data(), grad_buffer(*ai).data(), m, n, k);
    if (needs_grad(bi)) gemm_tn(o.grad.data(), ai->data.data(), grad_buffer(*bi).data(), m, n, k);
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_matrix(x, "linear");
  require_matrix(weight, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = weight.dim(0);
  if (weight.dim(1) != k) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " does not match weight " +
                     to_string(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != n) {
    throw ShapeError("linear: bias " + to_string(bias.shape()) + " does not match weight " +
                     to_string(weight.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  if (has_bias) {
    const auto bd = bias.data();
    for (std::size_t i = 0; i < m; ++i) std::copy(bd.begin(), bd.end(), out.begin() + static_cast<long>(i * n));
  }
  gemm_nt(x.data().data(), weight.data().data(), out.data(), m, k, n);
  ImplPtr xi = x.impl_ptr(), wi = weight.impl_ptr();
  ImplPtr bi = has_bias ? bias.impl_ptr() : nullptr;
  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result({m, n}, std::move(out), std::move(inputs), [xi, wi, bi, m, k, n](const TensorImpl& o) {
    if (needs_grad(xi)) gemm_nn(o.grad.data(), wi->data.data(), grad_buffer(*xi).data(), m, n, k);
    if (needs_grad(wi)) gemm_tn(o.grad.data(), xi->data.data(), grad_buffer(*wi).data(), m, n, k);
    if (bi && needs_grad(bi)) {
      auto& gb = grad_buffer(*bi);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += o.grad[i * n + j];
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shapes differ, " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  std::vector<double> out(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr();
  return make_result(a.shape(), std::move(out), {a, b}, [ai, bi](const TensorImpl& o) {
    for (const auto& in : {ai, bi}) {
      if (!needs_grad(in)) continue;
      auto& g = grad_buffer(*in);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes differ, " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  std::vector<double> out(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr();
  return make_result(a.shape(), std::move(out), {a, b}, [ai, bi](const TensorImpl& o) {
    if (needs_grad(ai)) {
      auto& g = grad_buffer(*ai);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bi->data[i];
    }
    if (needs_grad(bi)) {
      auto& g = grad_buffer(*bi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ai->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  ImplPtr ai = a.impl_ptr();
  return make_result(a.shape(), std::move(out), {a}, [ai, factor](const TensorImpl& o) {
    auto& g = grad_buffer(*ai);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * o.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  ImplPtr ai = a.impl_ptr();
  return make_result({1}, {acc}, {a}, [ai](const TensorImpl& o) {
    auto& g = grad_buffer(*ai);
    for (auto& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + to_string(a.shape()) + " cannot become " + to_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  ImplPtr ai = a.impl_ptr();
  return make_result(std::move(shape), std::move(out), {a}, [ai](const TensorImpl& o) {
    auto& g = grad_buffer(*ai);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size()) throw ShapeError("softmax: axis out of range for " + to_string(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  if (n == 0) throw ShapeError("softmax: empty axis");

  const auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xd[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xd[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  ImplPtr xi = x.impl_ptr();
  auto y = std::make_shared<std::vector<double>>(out);
  return make_result(s, std::move(out), {x}, [xi, y, outer, inner, n](const TensorImpl& o) {
    auto& g = grad_buffer(*xi);
    for (std::size_t a = 0; a < outer; ++a) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = a * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += o.grad[base + j * inner] * (*y)[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          g[idx] += (*y)[idx] * (o.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  const bool affine = gamma.defined();
  if (affine && (gamma.numel() != d || !beta.defined() || beta.numel() != d)) {
    throw ShapeError("layer_norm: affine parameters must have " + std::to_string(d) + " entries");
  }
  const auto xd = x.data();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = affine ? h * gamma.data()[j] + beta.data()[j] : h;
    }
  }
  ImplPtr xi = x.impl_ptr();
  ImplPtr gi = affine ? gamma.impl_ptr() : nullptr;
  ImplPtr bi = affine ? beta.impl_ptr() : nullptr;
  std::vector<Tensor> inputs{x};
  if (affine) {
    inputs.push_back(gamma);
    inputs.push_back(beta);
  }
  return make_result(x.shape(), std::move(out), std::move(inputs),
                     [xi, gi, bi, xhat, rstd, rows, d](const TensorImpl& o) {
    if (gi && needs_grad(gi)) {
      auto& gg = grad_buffer(*gi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gg[j] += o.grad[r * d + j] * (*xhat)[r * d + j];
    }
    if (bi && needs_grad(bi)) {
      auto& gb = grad_buffer(*bi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gb[j] += o.grad[r * d + j];
    }
    if (!needs_grad(xi)) return;
    auto& gx = grad_buffer(*xi);
    std::vector<double> dh(d);
    for (std::size_t r = 0; r < rows; ++r) {
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        dh[j] = o.grad[r * d + j] * (gi ? gi->data[j] : 1.0);
        m1 += dh[j];
        m2 += dh[j] * (*xhat)[r * d + j];
      }
      m1 /= static_cast<double>(d);
      m2 /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) {
        gx[r * d + j] += (*rstd)[r] * (dh[j] - m1 - (*xhat)[r * d + j] * m2);
      }
    }
  });
}

Tensor gelu(const Tensor& x) {
  const auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] / std::numbers::sqrt2));
  }
  ImplPtr xi = x.impl_ptr();
  return make_result(x.shape(), std::move(out), {x}, [xi](const TensorImpl& o) {
    auto& g = grad_buffer(*xi);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xi->data[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += o.grad[i] * (cdf + v * pdf);
    }
  });
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> indices) {
  require_matrix(table, "embedding_lookup");
  const std::size_t vocab = table.dim(0);
  for (auto idx : indices) {
    if (idx >= vocab) {
      throw IndexError("embedding_lookup: index " + std::to_string(idx) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
  }
  return gather_rows(table, indices);
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_matrix(x, "gather_rows");
  const std::size_t d = x.dim(1);
  if (rows.empty()) throw ShapeError("gather_rows: no rows selected");
  std::vector<double> out(rows.size() * d);
  const auto xd = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0)) throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(xd.begin() + static_cast<long>(rows[i] * d), d, out.begin() + static_cast<long>(i * d));
  }
  ImplPtr xi = x.impl_ptr();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result({rows.size(), d}, std::move(out), {x}, [xi, idx = std::move(idx), d](const TensorImpl& o) {
    auto& g = grad_buffer(*xi);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += o.grad[i * d + j];
  });
}

Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const int> targets,
                                 std::span<const std::size_t> rows) {
  require_matrix(logits, "cross_entropy_with_logits");
  const std::size_t m = logits.dim(0), k = logits.dim(1);
  if (targets.size() != m) {
    throw ShapeError("cross_entropy_with_logits: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(m) + " rows");
  }
  if (rows.empty()) throw EmptyMaskError("cross_entropy_with_logits: empty row set");
  for (auto r : rows) {
    if (r >= m) throw IndexError("cross_entropy_with_logits: row " + std::to_string(r) + " out of range");
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= k) {
      throw IndexError("cross_entropy_with_logits: target " + std::to_string(targets[r]) +
                       " outside vocabulary of " + std::to_string(k));
    }
  }
  const auto ld = logits.data();
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  auto probs = std::make_shared<std::vector<double>>(rows.size() * k);
  double loss = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double* lr = ld.data() + rows[i] * k;
    const double mx = *std::max_element(lr, lr + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(lr[j] - mx);
    const double lse = mx + std::log(z);
    loss += lse - lr[targets[rows[i]]];
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(lr[j] - lse);
  }
  loss *= inv_n;
  ImplPtr li = logits.impl_ptr();
  std::vector<std::size_t> rr(rows.begin(), rows.end());
  std::vector<int> tt(targets.begin(), targets.end());
  return make_result({1}, {loss}, {logits},
                     [li, probs, rr = std::move(rr), tt = std::move(tt), k, inv_n](const TensorImpl& o) {
    auto& g = grad_buffer(*li);
    const double scale_factor = o.grad[0] * inv_n;
    for (std::size_t i = 0; i < rr.size(); ++i) {
      double* gr = g.data() + rr[i] * k;
      for (std::size_t j = 0; j < k; ++j) gr[j] += scale_factor * (*probs)[i * k + j];
      gr[tt[rr[i]]] -= scale_factor;
    }
  });
}

Tensor scale_rows(const Tensor& x, const Tensor& weights, std::size_t column) {
  require_matrix(x, "scale_rows");
  require_matrix(weights, "scale_rows");
  const std::size_t m = x.dim(0), d = x.dim(1), cols = weights.dim(1);
  if (weights.dim(0) != m || column >= cols) {
    throw ShapeError("scale_rows: weights " + to_string(weights.shape()) + " column " + std::to_string(column) +
                     " does not fit " + to_string(x.shape()));
  }
  const auto xd = x.data(), wd = weights.data();
  std::vector<double> out(m * d);
  for (std::size_t i = 0; i < m; ++i) {
    const double w = wd[i * cols + column];
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = w * xd[i * d + j];
  }
  ImplPtr xi = x.impl_ptr(), wi = weights.impl_ptr();
  return make_result({m, d}, std::move(out), {x, weights}, [xi, wi, m, d, cols, column](const TensorImpl& o) {
    if (needs_grad(xi)) {
      auto& g = grad_buffer(*xi);
      for (std::size_t i = 0; i < m; ++i) {
        const double w = wi->data[i * cols + column];
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += w * o.grad[i * d + j];
      }
    }
    if (needs_grad(wi)) {
      auto& g = grad_buffer(*wi);
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += o.grad[i * d + j] * xi->data[i * d + j];
        g[i * cols + column] += acc;
      }
    }
  });
}

Tensor add_periodic_rows(const Tensor& x, const Tensor& table, std::size_t period) {
  require_matrix(x, "add_periodic_rows");
  require_matrix(table, "add_periodic_rows");
  const std::size_t m = x.dim(0), d = x.dim(1);
  if (table.dim(1) != d || period == 0 || period > table.dim(0)) {
    throw ShapeError("add_periodic_rows: table " + to_string(table.shape()) + " cannot cover period " +
                     std::to_string(period) + " of " + to_string(x.shape()));
  }
  const auto xd = x.data(), td = table.data();
  std::vector<double> out(m * d);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xd[r * d + j] + td[(r % period) * d + j];
  ImplPtr xi = x.impl_ptr(), ti = table.impl_ptr();
  return make_result({m, d}, std::move(out), {x, table}, [xi, ti, m, d, period](const TensorImpl& o) {
    if (needs_grad(xi)) {
      auto& g = grad_buffer(*xi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (needs_grad(ti)) {
      auto& g = grad_buffer(*ti);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < d; ++j) g[(r % period) * d + j] += o.grad[r * d + j];
    }
  });
}

Tensor replace_rows(const Tensor& x, std::span<const std::size_t> rows, const Tensor& value) {
  require_matrix(x, "replace_rows");
  const std::size_t m = x.dim(0), d = x.dim(1);
  if (value.numel() != d) {
    throw ShapeError("replace_rows: value " + to_string(value.shape()) + " does not match rows of " +
                     to_string(x.shape()));
  }
  std::vector<char> replaced(m, 0);
  for (auto r : rows) {
    if (r >= m) throw IndexError("replace_rows: row " + std::to_string(r) + " out of range");
    replaced[r] = 1;
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto vd = value.data();
  for (std::size_t r = 0; r < m; ++r) {
    if (replaced[r]) std::copy(vd.begin(), vd.end(), out.begin() + static_cast<long>(r * d));
  }
  ImplPtr xi = x.impl_ptr(), vi = value.impl_ptr();
  return make_result({m, d}, std::move(out), {x, value},
                     [xi, vi, replaced = std::move(replaced), m, d](const TensorImpl& o) {
    if (needs_grad(xi)) {
      auto& g = grad_buffer(*xi);
      for (std::size_t r = 0; r < m; ++r) {
        if (replaced[r]) continue;
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += o.grad[r * d + j];
      }
    }
    if (needs_grad(vi)) {
      auto& g = grad_buffer(*vi);
      for (std::size_t r = 0; r < m; ++r) {
        if (!replaced[r]) continue;
        for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[r * d + j];
      }
    }
  });
}

Tensor self_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                      std::size_t frames, std::size_t heads, std::span<const std::size_t> lengths) {
  require_matrix(q, "self_attention");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw ShapeError("self_attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", v " +
                     to_string(v.shape()) + " must agree");
  }
  const std::size_t d = q.dim(1);
  if (q.dim(0) != batch * frames) {
    throw ShapeError("self_attention: " + to_string(q.shape()) + " is not " + std::to_string(batch) + " x " +
                     std::to_string(frames) + " rows");
  }
  if (heads == 0 || d % heads != 0) throw ShapeError("self_attention: width not divisible by head count");
  if (lengths.size() != batch) throw ShapeError("self_attention: one length per sequence required");
  for (auto len : lengths) {
    if (len == 0 || len > frames) throw ShapeError("self_attention: sequence length out of range");
  }
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto qd = q.data(), kd = k.data(), vd = v.data();
  auto probs = std::make_shared<std::vector<double>>(batch * heads * frames * frames, 0.0);
  std::vector<double> out(batch * frames * d, 0.0);
  std::vector<std::size_t> lens(lengths.begin(), lengths.end());

  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t len = lens[b];
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs->data() + (b * heads + h) * frames * frames;
      for (std::size_t t = 0; t < frames; ++t) {
        const double* qt = qd.data() + (b * frames + t) * d + h * dh;
        double* pt = p + t * frames;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < len; ++s) {
          const double* ks = kd.data() + (b * frames + s) * d + h * dh;
          double acc = 0.0;
          for (std::size_t j = 0; j < dh; ++j) acc += qt[j] * ks[j];
          pt[s] = acc * sc;
          mx = std::max(mx, pt[s]);
        }
        double z = 0.0;
        for (std::size_t s = 0; s < len; ++s) {
          pt[s] = std::exp(pt[s] - mx);
          z += pt[s];
        }
        double* ot = out.data() + (b * frames + t) * d + h * dh;
        for (std::size_t s = 0; s < len; ++s) {
          pt[s] /= z;
          const double* vs = vd.data() + (b * frames + s) * d + h * dh;
          for (std::size_t j = 0; j < dh; ++j) ot[j] += pt[s] * vs[j];
        }
      }
    }
  }

  ImplPtr qi = q.impl_ptr(), ki = k.impl_ptr(), vi = v.impl_ptr();
  return make_result(q.shape(), std::move(out), {q, k, v},
                     [qi, ki, vi, probs, lens = std::move(lens), batch, frames, heads, dh, d, sc](const TensorImpl& o) {
    std::vector<double> dq(qi->data.size(), 0.0), dk(ki->data.size(), 0.0), dv(vi->data.size(), 0.0);
    std::vector<double> dp(frames);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t len = lens[b];
      for (std::size_t h = 0; h < heads; ++h) {
        const double* p = probs->data() + (b * heads + h) * frames * frames;
        for (std::size_t t = 0; t < frames; ++t) {
          const double* go = o.grad.data() + (b * frames + t) * d + h * dh;
          const double* pt = p + t * frames;
          double dot = 0.0;
          for (std::size_t s = 0; s < len; ++s) {
            const double* vs = vi->data.data() + (b * frames + s) * d + h * dh;
            double* dvs = dv.data() + (b * frames + s) * d + h * dh;
            double acc = 0.0;
            for (std::size_t j = 0; j < dh; ++j) {
              acc += go[j] * vs[j];
              dvs[j] += pt[s] * go[j];
            }
            dp[s] = acc;
            dot += pt[s] * acc;
          }
          const double* qt = qi->data.data() + (b * frames + t) * d + h * dh;
          double* dqt = dq.data() + (b * frames + t) * d + h * dh;
          for (std::size_t s = 0; s < len; ++s) {
            const double ds = pt[s] * (dp[s] - dot) * sc;
            if (ds == 0.0) continue;
            const double* ks = ki->data.data() + (b * frames + s) * d + h * dh;
            double* dks = dk.data() + (b * frames + s) * d + h * dh;
            for (std::size_t j = 0; j < dh; ++j) {
              dqt[j] += ds * ks[j];
              dks[j] += ds * qt[j];
            }
          }
        }
      }
    }
    auto accumulate = [](const ImplPtr& t, const std::vector<double>& src) {
      if (!t->requires_grad) return;
      auto& g = grad_buffer(*t);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
    };
    accumulate(qi, dq);
    accumulate(ki, dk);
    accumulate(vi, dv);
  });
}

}  // namespace milore
