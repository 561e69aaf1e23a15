#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "bmoe/tensor.hpp"

namespace bmoe {

// ---------------------------------------------------------------------------
// gemm kernels (row-major, accumulate into C)
// ---------------------------------------------------------------------------

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn_acc(const T* A, const T* B, T* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* a_row = A + static_cast<size_t>(i) * k;
    T* c_row = C + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T a = a_row[p];
      const T* b_row = B + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) c_row[j] += a * b_row[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt_acc(const T* A, const T* B, T* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* a_row = A + static_cast<size_t>(i) * k;
    T* c_row = C + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* b_row = B + static_cast<size_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += a_row[p] * b_row[p];
      c_row[j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn_acc(const T* A, const T* B, T* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* a_row = A + static_cast<size_t>(i) * k;
    const T* b_row = B + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T a = a_row[p];
      T* c_row = C + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) c_row[j] += a * b_row[j];
    }
  }
}

namespace detail {

template <typename T>
TensorPtr<T> op_output(Tape<T>& tape, std::vector<int> shape, bool needs_grad) {
  return make_tensor<T>(std::move(shape), needs_grad && tape.recording());
}

inline int normalize_axis(int axis, int ndim) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(ndim));
  return axis;
}

// b broadcasts onto a when it is a scalar or its shape matches a's trailing
// axes. Anything else is a shape error; this keeps the backward-rule surface
// small.
template <typename T>
void check_broadcast(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (b->numel() == 1) return;
  if (b->ndim() > a->ndim())
    throw ShapeError("cannot broadcast " + shape_str(b->shape) + " onto " +
                     shape_str(a->shape));
  const int off = a->ndim() - b->ndim();
  for (int i = 0; i < b->ndim(); ++i)
    if (a->shape[static_cast<size_t>(off + i)] != b->shape[static_cast<size_t>(i)])
      throw ShapeError("cannot broadcast " + shape_str(b->shape) + " onto " +
                       shape_str(a->shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul: a[..., m, k] x b[..., k, n]. Leading axes must match exactly, or b
// may be a single [k, n] matrix shared across the batch.
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> matmul(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (a->ndim() < 2 || b->ndim() < 2)
    throw ShapeError("matmul needs rank >= 2, got " + shape_str(a->shape) +
                     " and " + shape_str(b->shape));
  const int m = a->dim(-2), k = a->dim(-1);
  const int kb = b->dim(-2), n = b->dim(-1);
  const bool b_shared = (b->ndim() == 2 && a->ndim() > 2);
  if (k != kb || (!b_shared && a->ndim() != b->ndim()))
    throw ShapeError("matmul shape mismatch: " + shape_str(a->shape) + " x " +
                     shape_str(b->shape));
  int64_t batches = 1;
  for (int i = 0; i < a->ndim() - 2; ++i) {
    batches *= a->shape[static_cast<size_t>(i)];
    if (!b_shared && a->shape[static_cast<size_t>(i)] != b->shape[static_cast<size_t>(i)])
      throw ShapeError("matmul shape mismatch: " + shape_str(a->shape) + " x " +
                       shape_str(b->shape));
  }

  std::vector<int> out_shape(a->shape.begin(), a->shape.end() - 1);
  out_shape.push_back(n);
  auto out = detail::op_output(tape, out_shape,
                               a->requires_grad || b->requires_grad);

  const size_t a_stride = static_cast<size_t>(m) * k;
  const size_t b_stride = b_shared ? 0 : static_cast<size_t>(k) * n;
  const size_t o_stride = static_cast<size_t>(m) * n;
  for (int64_t bi = 0; bi < batches; ++bi)
    gemm_nn_acc(a->data.data() + bi * a_stride, b->data.data() + bi * b_stride,
                out->data.data() + bi * o_stride, m, k, n);

  if (out->requires_grad) {
    tape.record([a, b, out, m, k, n, batches, a_stride, b_stride, o_stride]() {
      for (int64_t bi = 0; bi < batches; ++bi) {
        const T* g = out->grad.data() + bi * o_stride;
        if (a->requires_grad)
          gemm_nt_acc(g, b->data.data() + bi * b_stride,
                      a->grad.data() + bi * a_stride, m, n, k);
        if (b->requires_grad)
          gemm_tn_acc(a->data.data() + bi * a_stride, g,
                      b->grad.data() + bi * b_stride, m, k, n);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax along an axis, max-subtracted for stability
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> softmax(Tape<T>& tape, const TensorPtr<T>& x, int axis = -1) {
  const int ax = detail::normalize_axis(axis, x->ndim());
  const int n = x->shape[static_cast<size_t>(ax)];
  int64_t inner = 1;
  for (int i = ax + 1; i < x->ndim(); ++i) inner *= x->shape[static_cast<size_t>(i)];
  const int64_t outer = n > 0 ? x->numel() / (n * inner) : 0;

  auto out = detail::op_output(tape, x->shape, x->requires_grad);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t ii = 0; ii < inner; ++ii) {
      const int64_t base = o * n * inner + ii;
      T mx = x->data[static_cast<size_t>(base)];
      for (int c = 1; c < n; ++c)
        mx = std::max(mx, x->data[static_cast<size_t>(base + c * inner)]);
      T sum = T(0);
      for (int c = 0; c < n; ++c) {
        const T e = std::exp(x->data[static_cast<size_t>(base + c * inner)] - mx);
        out->data[static_cast<size_t>(base + c * inner)] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (int c = 0; c < n; ++c)
        out->data[static_cast<size_t>(base + c * inner)] *= inv;
    }
  }

  if (out->requires_grad) {
    tape.record([x, out, n, inner, outer]() {
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t ii = 0; ii < inner; ++ii) {
          const int64_t base = o * n * inner + ii;
          T dot = T(0);
          for (int c = 0; c < n; ++c) {
            const size_t p = static_cast<size_t>(base + c * inner);
            dot += out->grad[p] * out->data[p];
          }
          for (int c = 0; c < n; ++c) {
            const size_t p = static_cast<size_t>(base + c * inner);
            x->grad[p] += out->data[p] * (out->grad[p] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// cross entropy over rows of [N, V] logits; targets equal to ignore_index do
// not contribute. Returns the mean negative log-likelihood as a scalar.
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> cross_entropy(Tape<T>& tape, const TensorPtr<T>& logits,
                           const std::vector<int>& targets,
                           int ignore_index = -1) {
  if (logits->ndim() != 2)
    throw ShapeError("cross_entropy expects [N, V] logits, got " +
                     shape_str(logits->shape));
  const int N = logits->dim(0), V = logits->dim(1);
  if (static_cast<int>(targets.size()) != N)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(N) + " rows");
  int64_t counted = 0;
  for (int t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || t >= V)
      throw IndexError("target id " + std::to_string(t) +
                       " outside vocabulary of size " + std::to_string(V));
    ++counted;
  }
  if (counted == 0) throw ConfigError("cross_entropy: no counted targets");

  auto out = detail::op_output(tape, {1}, logits->requires_grad);
  T total = T(0);
  for (int i = 0; i < N; ++i) {
    if (targets[static_cast<size_t>(i)] == ignore_index) continue;
    const T* row = logits->data.data() + static_cast<size_t>(i) * V;
    T mx = row[0];
    for (int v = 1; v < V; ++v) mx = std::max(mx, row[v]);
    T sum = T(0);
    for (int v = 0; v < V; ++v) sum += std::exp(row[v] - mx);
    total += std::log(sum) + mx - row[targets[static_cast<size_t>(i)]];
  }
  out->data[0] = total / static_cast<T>(counted);

  if (out->requires_grad) {
    tape.record([logits, out, targets, ignore_index, N, V, counted]() {
      const T gscale = out->grad[0] / static_cast<T>(counted);
      for (int i = 0; i < N; ++i) {
        const int tgt = targets[static_cast<size_t>(i)];
        if (tgt == ignore_index) continue;
        const T* row = logits->data.data() + static_cast<size_t>(i) * V;
        T* grow = logits->grad.data() + static_cast<size_t>(i) * V;
        T mx = row[0];
        for (int v = 1; v < V; ++v) mx = std::max(mx, row[v]);
        T sum = T(0);
        for (int v = 0; v < V; ++v) sum += std::exp(row[v] - mx);
        const T inv = T(1) / sum;
        for (int v = 0; v < V; ++v) {
          T p = std::exp(row[v] - mx) * inv;
          if (v == tgt) p -= T(1);
          grow[v] += gscale * p;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layernorm over the last axis (normalization only; affine terms are separate
// parameters composed with mul/add)
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> layernorm(Tape<T>& tape, const TensorPtr<T>& x, T eps) {
  const int n = x->dim(-1);
  const int64_t rows = x->numel() / n;
  auto out = detail::op_output(tape, x->shape, x->requires_grad);
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x->data.data() + r * n;
    T* yr = out->data.data() + r * n;
    T mu = T(0);
    for (int i = 0; i < n; ++i) mu += xr[i];
    mu /= static_cast<T>(n);
    T var = T(0);
    for (int i = 0; i < n; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<T>(n);
    const T inv = T(1) / std::sqrt(var + eps);
    for (int i = 0; i < n; ++i) yr[i] = (xr[i] - mu) * inv;
  }

  if (out->requires_grad) {
    tape.record([x, out, n, rows, eps]() {
      for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x->data.data() + r * n;
        const T* yr = out->data.data() + r * n;  // normalized values
        const T* gr = out->grad.data() + r * n;
        T* gx = x->grad.data() + r * n;
        T mu = T(0);
        for (int i = 0; i < n; ++i) mu += xr[i];
        mu /= static_cast<T>(n);
        T var = T(0);
        for (int i = 0; i < n; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= static_cast<T>(n);
        const T inv = T(1) / std::sqrt(var + eps);
        T gmean = T(0), gymean = T(0);
        for (int i = 0; i < n; ++i) {
          gmean += gr[i];
          gymean += gr[i] * yr[i];
        }
        gmean /= static_cast<T>(n);
        gymean /= static_cast<T>(n);
        for (int i = 0; i < n; ++i)
          gx[i] += inv * (gr[i] - gmean - yr[i] * gymean);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// embedding lookup: ids index rows of table[V, d]
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> embedding(Tape<T>& tape, const std::vector<int>& ids,
                       const TensorPtr<T>& table) {
  if (table->ndim() != 2)
    throw ShapeError("embedding table must be [V, d], got " +
                     shape_str(table->shape));
  const int V = table->dim(0), d = table->dim(1);
  for (int id : ids)
    if (id < 0 || id >= V)
      throw IndexError("token id " + std::to_string(id) +
                       " outside vocabulary of size " + std::to_string(V));
  auto out = detail::op_output(tape, {static_cast<int>(ids.size()), d},
                               table->requires_grad);
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table->data.data() + static_cast<size_t>(ids[i]) * d, d,
                out->data.data() + i * d);

  if (out->requires_grad) {
    tape.record([table, out, ids, d]() {
      for (size_t i = 0; i < ids.size(); ++i) {
        const T* g = out->grad.data() + i * d;
        T* tg = table->grad.data() + static_cast<size_t>(ids[i]) * d;
        for (int j = 0; j < d; ++j) tg[j] += g[j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise and structural ops
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> add(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::check_broadcast(a, b);
  const int64_t bn = b->numel();
  auto out = detail::op_output(tape, a->shape,
                               a->requires_grad || b->requires_grad);
  for (int64_t i = 0; i < a->numel(); ++i)
    out->data[static_cast<size_t>(i)] =
        a->data[static_cast<size_t>(i)] + b->data[static_cast<size_t>(i % bn)];

  if (out->requires_grad) {
    tape.record([a, b, out, bn]() {
      if (a->requires_grad)
        for (int64_t i = 0; i < out->numel(); ++i)
          a->grad[static_cast<size_t>(i)] += out->grad[static_cast<size_t>(i)];
      if (b->requires_grad)
        for (int64_t i = 0; i < out->numel(); ++i)
          b->grad[static_cast<size_t>(i % bn)] += out->grad[static_cast<size_t>(i)];
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> mul(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::check_broadcast(a, b);
  const int64_t bn = b->numel();
  auto out = detail::op_output(tape, a->shape,
                               a->requires_grad || b->requires_grad);
  for (int64_t i = 0; i < a->numel(); ++i)
    out->data[static_cast<size_t>(i)] =
        a->data[static_cast<size_t>(i)] * b->data[static_cast<size_t>(i % bn)];

  if (out->requires_grad) {
    tape.record([a, b, out, bn]() {
      if (a->requires_grad)
        for (int64_t i = 0; i < out->numel(); ++i)
          a->grad[static_cast<size_t>(i)] +=
              out->grad[static_cast<size_t>(i)] * b->data[static_cast<size_t>(i % bn)];
      if (b->requires_grad)
        for (int64_t i = 0; i < out->numel(); ++i)
          b->grad[static_cast<size_t>(i % bn)] +=
              out->grad[static_cast<size_t>(i)] * a->data[static_cast<size_t>(i)];
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> scale(Tape<T>& tape, const TensorPtr<T>& a, T c) {
  auto out = detail::op_output(tape, a->shape, a->requires_grad);
  for (int64_t i = 0; i < a->numel(); ++i)
    out->data[static_cast<size_t>(i)] = a->data[static_cast<size_t>(i)] * c;
  if (out->requires_grad) {
    tape.record([a, out, c]() {
      for (int64_t i = 0; i < out->numel(); ++i)
        a->grad[static_cast<size_t>(i)] += out->grad[static_cast<size_t>(i)] * c;
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> add_scalar(Tape<T>& tape, const TensorPtr<T>& a, T c) {
  auto out = detail::op_output(tape, a->shape, a->requires_grad);
  for (int64_t i = 0; i < a->numel(); ++i)
    out->data[static_cast<size_t>(i)] = a->data[static_cast<size_t>(i)] + c;
  if (out->requires_grad) {
    tape.record([a, out]() {
      for (int64_t i = 0; i < out->numel(); ++i)
        a->grad[static_cast<size_t>(i)] += out->grad[static_cast<size_t>(i)];
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> neg(Tape<T>& tape, const TensorPtr<T>& a) {
  return scale(tape, a, T(-1));
}

template <typename T>
TensorPtr<T> relu(Tape<T>& tape, const TensorPtr<T>& a) {
  auto out = detail::op_output(tape, a->shape, a->requires_grad);
  for (int64_t i = 0; i < a->numel(); ++i) {
    const T v = a->data[static_cast<size_t>(i)];
    out->data[static_cast<size_t>(i)] = v > T(0) ? v : T(0);
  }
  if (out->requires_grad) {
    tape.record([a, out]() {
      for (int64_t i = 0; i < out->numel(); ++i)
        if (a->data[static_cast<size_t>(i)] > T(0))
          a->grad[static_cast<size_t>(i)] += out->grad[static_cast<size_t>(i)];
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> reshape(Tape<T>& tape, const TensorPtr<T>& a,
                     std::vector<int> new_shape) {
  if (Tensor<T>::numel_of(new_shape) != a->numel())
    throw ShapeError("reshape " + shape_str(a->shape) + " -> " +
                     shape_str(new_shape) + " changes element count");
  auto out = detail::op_output(tape, std::move(new_shape), a->requires_grad);
  out->data = a->data;
  if (out->requires_grad) {
    tape.record([a, out]() {
      for (int64_t i = 0; i < out->numel(); ++i)
        a->grad[static_cast<size_t>(i)] += out->grad[static_cast<size_t>(i)];
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> transpose_last2(Tape<T>& tape, const TensorPtr<T>& a) {
  if (a->ndim() < 2)
    throw ShapeError("transpose needs rank >= 2, got " + shape_str(a->shape));
  const int m = a->dim(-2), n = a->dim(-1);
  const int64_t batches = a->numel() / (static_cast<int64_t>(m) * n);
  std::vector<int> shape = a->shape;
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  auto out = detail::op_output(tape, std::move(shape), a->requires_grad);
  for (int64_t b = 0; b < batches; ++b) {
    const T* src = a->data.data() + b * m * n;
    T* dst = out->data.data() + b * m * n;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        dst[static_cast<size_t>(j) * m + i] = src[static_cast<size_t>(i) * n + j];
  }
  if (out->requires_grad) {
    tape.record([a, out, m, n, batches]() {
      for (int64_t b = 0; b < batches; ++b) {
        const T* g = out->grad.data() + b * m * n;
        T* ga = a->grad.data() + b * m * n;
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            ga[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(j) * m + i];
      }
    });
  }
  return out;
}

// [A, B, C, D] -> [A, C, B, D]; used to regroup attention heads
template <typename T>
TensorPtr<T> swap_axes12(Tape<T>& tape, const TensorPtr<T>& a) {
  if (a->ndim() != 4)
    throw ShapeError("swap_axes12 expects rank 4, got " + shape_str(a->shape));
  const int A = a->dim(0), B = a->dim(1), C = a->dim(2), D = a->dim(3);
  auto out = detail::op_output(tape, {A, C, B, D}, a->requires_grad);
  auto src_idx = [B, C, D](int ia, int ib, int ic) {
    return ((static_cast<size_t>(ia) * B + ib) * C + ic) * D;
  };
  auto dst_idx = [B, C, D](int ia, int ib, int ic) {
    return ((static_cast<size_t>(ia) * C + ic) * B + ib) * D;
  };
  for (int ia = 0; ia < A; ++ia)
    for (int ib = 0; ib < B; ++ib)
      for (int ic = 0; ic < C; ++ic)
        std::copy_n(a->data.data() + src_idx(ia, ib, ic), D,
                    out->data.data() + dst_idx(ia, ib, ic));
  if (out->requires_grad) {
    tape.record([a, out, A, B, C, D, src_idx, dst_idx]() {
      for (int ia = 0; ia < A; ++ia)
        for (int ib = 0; ib < B; ++ib)
          for (int ic = 0; ic < C; ++ic) {
            const T* g = out->grad.data() + dst_idx(ia, ib, ic);
            T* ga = a->grad.data() + src_idx(ia, ib, ic);
            for (int j = 0; j < D; ++j) ga[j] += g[j];
          }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> sum_all(Tape<T>& tape, const TensorPtr<T>& a) {
  auto out = detail::op_output(tape, {1}, a->requires_grad);
  T acc = T(0);
  for (const T v : a->data) acc += v;
  out->data[0] = acc;
  if (out->requires_grad) {
    tape.record([a, out]() {
      const T g = out->grad[0];
      for (int64_t i = 0; i < a->numel(); ++i) a->grad[static_cast<size_t>(i)] += g;
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> mean_all(Tape<T>& tape, const TensorPtr<T>& a) {
  if (a->numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(tape, sum_all(tape, a), T(1) / static_cast<T>(a->numel()));
}

// column sums of a [N, E] matrix -> [E]
template <typename T>
TensorPtr<T> sum_axis0(Tape<T>& tape, const TensorPtr<T>& a) {
  if (a->ndim() != 2)
    throw ShapeError("sum_axis0 expects rank 2, got " + shape_str(a->shape));
  const int N = a->dim(0), E = a->dim(1);
  auto out = detail::op_output(tape, {E}, a->requires_grad);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < E; ++j)
      out->data[static_cast<size_t>(j)] += a->at(i, j);
  if (out->requires_grad) {
    tape.record([a, out, N, E]() {
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < E; ++j)
          a->grad[static_cast<size_t>(i) * E + j] += out->grad[static_cast<size_t>(j)];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// routing support: row/element gathers with scatter-add backward
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> gather_rows(Tape<T>& tape, const TensorPtr<T>& x,
                         const std::vector<int>& rows) {
  if (x->ndim() != 2)
    throw ShapeError("gather_rows expects rank 2, got " + shape_str(x->shape));
  const int N = x->dim(0), d = x->dim(1);
  for (int r : rows)
    if (r < 0 || r >= N) throw IndexError("row " + std::to_string(r) + " out of range");
  auto out = detail::op_output(tape, {static_cast<int>(rows.size()), d},
                               x->requires_grad);
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x->data.data() + static_cast<size_t>(rows[i]) * d, d,
                out->data.data() + i * d);
  if (out->requires_grad) {
    tape.record([x, out, rows, d]() {
      for (size_t i = 0; i < rows.size(); ++i) {
        const T* g = out->grad.data() + i * d;
        T* gx = x->grad.data() + static_cast<size_t>(rows[i]) * d;
        for (int j = 0; j < d; ++j) gx[j] += g[j];
      }
    });
  }
  return out;
}

// out[rows[i], :] += x[i, :] into a zero [N, d] tensor
template <typename T>
TensorPtr<T> scatter_rows(Tape<T>& tape, const TensorPtr<T>& x,
                          const std::vector<int>& rows, int N) {
  if (x->ndim() != 2)
    throw ShapeError("scatter_rows expects rank 2, got " + shape_str(x->shape));
  if (static_cast<int>(rows.size()) != x->dim(0))
    throw ShapeError("scatter_rows: index count mismatch");
  const int d = x->dim(1);
  for (int r : rows)
    if (r < 0 || r >= N) throw IndexError("row " + std::to_string(r) + " out of range");
  auto out = detail::op_output(tape, {N, d}, x->requires_grad);
  for (size_t i = 0; i < rows.size(); ++i) {
    const T* src = x->data.data() + i * d;
    T* dst = out->data.data() + static_cast<size_t>(rows[i]) * d;
    for (int j = 0; j < d; ++j) dst[j] += src[j];
  }
  if (out->requires_grad) {
    tape.record([x, out, rows, d]() {
      for (size_t i = 0; i < rows.size(); ++i) {
        const T* g = out->grad.data() + static_cast<size_t>(rows[i]) * d;
        T* gx = x->grad.data() + i * d;
        for (int j = 0; j < d; ++j) gx[j] += g[j];
      }
    });
  }
  return out;
}

// out[i, j] = x[i, cols[i*k + j]] for an [N, E] matrix and per-row column ids
template <typename T>
TensorPtr<T> gather_cols(Tape<T>& tape, const TensorPtr<T>& x,
                         const std::vector<int>& cols, int k) {
  if (x->ndim() != 2)
    throw ShapeError("gather_cols expects rank 2, got " + shape_str(x->shape));
  const int N = x->dim(0), E = x->dim(1);
  if (static_cast<int>(cols.size()) != N * k)
    throw ShapeError("gather_cols: index count mismatch");
  for (int c : cols)
    if (c < 0 || c >= E) throw IndexError("column " + std::to_string(c) + " out of range");
  auto out = detail::op_output(tape, {N, k}, x->requires_grad);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < k; ++j)
      out->at(i, j) = x->at(i, cols[static_cast<size_t>(i) * k + j]);
  if (out->requires_grad) {
    tape.record([x, out, cols, N, k, E]() {
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < k; ++j)
          x->grad[static_cast<size_t>(i) * E + cols[static_cast<size_t>(i) * k + j]] +=
              out->grad[static_cast<size_t>(i) * k + j];
    });
  }
  return out;
}

// out[m] = x[rows[m], cols[m]]
template <typename T>
TensorPtr<T> gather_at(Tape<T>& tape, const TensorPtr<T>& x,
                       const std::vector<int>& rows,
                       const std::vector<int>& cols) {
  if (x->ndim() != 2 || rows.size() != cols.size())
    throw ShapeError("gather_at expects rank 2 and matching index lists");
  const int N = x->dim(0), E = x->dim(1);
  for (size_t m = 0; m < rows.size(); ++m)
    if (rows[m] < 0 || rows[m] >= N || cols[m] < 0 || cols[m] >= E)
      throw IndexError("gather_at index out of range");
  auto out = detail::op_output(tape, {static_cast<int>(rows.size())},
                               x->requires_grad);
  for (size_t m = 0; m < rows.size(); ++m)
    out->data[m] = x->at(rows[m], cols[m]);
  if (out->requires_grad) {
    tape.record([x, out, rows, cols, E]() {
      for (size_t m = 0; m < rows.size(); ++m)
        x->grad[static_cast<size_t>(rows[m]) * E + cols[m]] += out->grad[m];
    });
  }
  return out;
}

// rows of x scaled by per-row factors s
template <typename T>
TensorPtr<T> scale_rows(Tape<T>& tape, const TensorPtr<T>& x,
                        const TensorPtr<T>& s) {
  if (x->ndim() != 2 || s->ndim() != 1 || s->dim(0) != x->dim(0))
    throw ShapeError("scale_rows: " + shape_str(x->shape) + " with " +
                     shape_str(s->shape));
  const int M = x->dim(0), d = x->dim(1);
  auto out = detail::op_output(tape, x->shape,
                               x->requires_grad || s->requires_grad);
  for (int i = 0; i < M; ++i) {
    const T w = s->data[static_cast<size_t>(i)];
    for (int j = 0; j < d; ++j) out->at(i, j) = x->at(i, j) * w;
  }
  if (out->requires_grad) {
    tape.record([x, s, out, M, d]() {
      for (int i = 0; i < M; ++i) {
        const T* g = out->grad.data() + static_cast<size_t>(i) * d;
        if (x->requires_grad) {
          const T w = s->data[static_cast<size_t>(i)];
          T* gx = x->grad.data() + static_cast<size_t>(i) * d;
          for (int j = 0; j < d; ++j) gx[j] += g[j] * w;
        }
        if (s->requires_grad) {
          const T* xr = x->data.data() + static_cast<size_t>(i) * d;
          T acc = T(0);
          for (int j = 0; j < d; ++j) acc += g[j] * xr[j];
          s->grad[static_cast<size_t>(i)] += acc;
        }
      }
    });
  }
  return out;
}

// f = v / sum(v); the load-balance fractions
template <typename T>
TensorPtr<T> normalize_sum(Tape<T>& tape, const TensorPtr<T>& v) {
  T sum = T(0);
  for (const T x : v->data) sum += x;
  if (std::isnan(static_cast<double>(sum)))
    throw DivergenceError("normalize_sum total went non-finite");
  if (!(sum > T(0)))
    throw ConfigError("normalize_sum requires a positive total");
  auto out = detail::op_output(tape, v->shape, v->requires_grad);
  const T inv = T(1) / sum;
  for (int64_t i = 0; i < v->numel(); ++i)
    out->data[static_cast<size_t>(i)] = v->data[static_cast<size_t>(i)] * inv;
  if (out->requires_grad) {
    tape.record([v, out, inv]() {
      T dot = T(0);
      for (int64_t i = 0; i < out->numel(); ++i)
        dot += out->grad[static_cast<size_t>(i)] * out->data[static_cast<size_t>(i)];
      for (int64_t i = 0; i < out->numel(); ++i)
        v->grad[static_cast<size_t>(i)] +=
            (out->grad[static_cast<size_t>(i)] - dot) * inv;
    });
  }
  return out;
}

}  // namespace bmoe
