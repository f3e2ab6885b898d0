#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "milore/tensor.hpp"

namespace milore {

// a[m x k] * b[k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// a[m x k] * b[n x k]^T, the layout used for weights stored as [out x in].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// x[m x in] * weight[out x in]^T + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);
// Normalizes over the last axis; gamma/beta may be undefined (no affine).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// Exact (erf) GELU.
Tensor gelu(const Tensor& x);

// Rows of table[V x d] selected by `indices`.
Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> indices);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

// Mean negative log-likelihood of targets[r] under softmax(logits[r]) over
// the rows listed in `rows`.
Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const int> targets,
                                 std::span<const std::size_t> rows);

// y[t, :] = weights[t, column] * x[t, :]
Tensor scale_rows(const Tensor& x, const Tensor& weights, std::size_t column);
// y[r, :] = x[r, :] + table[r % period, :]
Tensor add_periodic_rows(const Tensor& x, const Tensor& table, std::size_t period);
// Copy of x[m x d] with the listed rows replaced by value[d].
Tensor replace_rows(const Tensor& x, std::span<const std::size_t> rows, const Tensor& value);

// Multi-head scaled dot-product self-attention over `batch` sequences of
// `frames` rows each (q, k, v are [batch*frames x d]). Keys at or beyond
// lengths[b] are masked out for every query of sequence b.
Tensor self_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                      std::size_t frames, std::size_t heads, std::span<const std::size_t> lengths);

}  // namespace milore
