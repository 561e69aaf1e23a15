#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "bmoe/counters.hpp"
#include "bmoe/ops.hpp"
#include "bmoe/tensor.hpp"

namespace bmoe {

// ---------------------------------------------------------------------------
// Butterfly orthogonal transform.
//
// A dim x dim rotation built from log2(dim) stages of independent 2x2 Givens
// rotations. Stage l (0-based) pairs lanes (i, i + 2^l) for every i whose
// l-th bit is clear, so each stage touches every lane exactly once and the
// whole transform costs O(dim log dim) instead of O(dim^2). Angles live in a
// [num_layers, dim/2] tensor (stage-major, pair-minor) so they train like any
// other parameter. The transpose — which is also the inverse, the transform
// being orthogonal — is the stages in reverse order with negated angles.
// ---------------------------------------------------------------------------

constexpr bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

constexpr int log2_int(int n) {
  int l = 0;
  while ((1 << l) < n) ++l;
  return l;
}

template <typename T>
struct Butterfly {
  int dim = 0;
  int num_layers = 0;
  TensorPtr<T> angles;  // [num_layers, dim/2], stage-major pair-minor

  Butterfly() = default;

  // depth < 0 means full depth log2(dim); a shallower transform keeps the
  // first `depth` stages (strides 1, 2, ..., 2^(depth-1))
  explicit Butterfly(int dim_, bool requires_grad = true, int depth = -1)
      : dim(dim_) {
    if (!is_power_of_two(dim))
      throw ConfigError("butterfly dimension must be a power of two, got " +
                        std::to_string(dim));
    num_layers = depth < 0 ? log2_int(dim) : depth;
    if (num_layers > log2_int(dim))
      throw ConfigError("butterfly depth " + std::to_string(depth) +
                        " exceeds log2 of dimension " + std::to_string(dim));
    angles = make_tensor<T>({num_layers, dim / 2}, requires_grad);
  }

  int64_t param_count() const { return angles ? angles->numel() : 0; }

  void randomize(Rng& rng, double stddev) {
    for (auto& a : angles->data) a = static_cast<T>(rng.normal(0.0, stddev));
  }
};

namespace detail {

// lane index of the lower element of pair p at stage l (span s = 1 << l):
// keep the low l bits, shift the rest up one to clear bit l
inline int pair_lane(int p, int s) { return ((p & ~(s - 1)) << 1) | (p & (s - 1)); }

struct ButterflyStep {
  int stage;
  int sign;  // +1 forward, -1 transposed
};

inline std::vector<ButterflyStep> butterfly_schedule(int num_layers,
                                                     bool transpose) {
  std::vector<ButterflyStep> steps;
  steps.reserve(static_cast<size_t>(num_layers));
  if (transpose)
    for (int l = num_layers - 1; l >= 0; --l) steps.push_back({l, -1});
  else
    for (int l = 0; l < num_layers; ++l) steps.push_back({l, +1});
  return steps;
}

// one stage sweep in place over a single row
template <typename T>
void butterfly_stage_inplace(T* row, const T* stage_angles, int dim, int stage,
                             int sign) {
  const int s = 1 << stage;
  const int pairs = dim / 2;
  for (int p = 0; p < pairs; ++p) {
    const int i = pair_lane(p, s);
    const int j = i + s;
    const T a = static_cast<T>(sign) * stage_angles[p];
    const T c = std::cos(a), sn = std::sin(a);
    const T u = row[i], v = row[j];
    row[i] = u * c - v * sn;
    row[j] = u * sn + v * c;
  }
}

}  // namespace detail

// Applies the transform to `rows` contiguous rows of length dim, out of
// place, without touching the tape or the op counters.
template <typename T>
void butterfly_apply_raw(const Butterfly<T>& bf, const T* in, T* out,
                         int64_t rows, bool transpose = false) {
  const auto steps = detail::butterfly_schedule(bf.num_layers, transpose);
  for (int64_t r = 0; r < rows; ++r) {
    T* row = out + r * bf.dim;
    std::copy_n(in + r * bf.dim, bf.dim, row);
    for (const auto& st : steps)
      detail::butterfly_stage_inplace(
          row, bf.angles->data.data() + static_cast<size_t>(st.stage) * (bf.dim / 2),
          bf.dim, st.stage, st.sign);
  }
}

// Rotation cost of one row through one transform: each of the dim/2 pairs in
// each of the num_layers stages is a 2x2 rotation worth 4 multiplies + 2 adds.
template <typename T>
uint64_t butterfly_flops_per_row(const Butterfly<T>& bf) {
  return 6ull * static_cast<uint64_t>(bf.dim / 2) *
         static_cast<uint64_t>(bf.num_layers);
}

// Tape op: y[..., d] = B x[..., d] (or B^T x). Gradients flow to both the
// input and the angles; the backward pass replays the stage sweep to recover
// each stage's values rather than storing them during the forward pass.
template <typename T>
TensorPtr<T> butterfly_apply(Tape<T>& tape, const Butterfly<T>& bf,
                             const TensorPtr<T>& x, bool transpose = false) {
  const int d = bf.dim;
  if (x->ndim() < 1 || x->dim(-1) != d)
    throw ShapeError("butterfly of dimension " + std::to_string(d) +
                     " cannot act on " + shape_str(x->shape));
  const int64_t rows = x->numel() / d;
  auto angles = bf.angles;
  auto out = detail::op_output(
      tape, x->shape, x->requires_grad || angles->requires_grad);

  butterfly_apply_raw(bf, x->data.data(), out->data.data(), rows, transpose);
  op_counters().butterfly_flops +=
      static_cast<uint64_t>(rows) * butterfly_flops_per_row(bf);

  if (out->requires_grad) {
    const int L = bf.num_layers;
    tape.record([x, out, angles, d, L, rows, transpose]() {
      const auto steps = detail::butterfly_schedule(L, transpose);
      const int pairs = d / 2;
      std::vector<T> snap(static_cast<size_t>(L + 1) * d);
      std::vector<T> g(static_cast<size_t>(d));
      for (int64_t r = 0; r < rows; ++r) {
        // replay the sweep, keeping the row as it entered every step
        std::copy_n(x->data.data() + r * d, d, snap.data());
        for (int k = 0; k < L; ++k) {
          T* cur = snap.data() + static_cast<size_t>(k + 1) * d;
          std::copy_n(snap.data() + static_cast<size_t>(k) * d, d, cur);
          detail::butterfly_stage_inplace(
              cur,
              angles->data.data() + static_cast<size_t>(steps[k].stage) * pairs,
              d, steps[k].stage, steps[k].sign);
        }
        std::copy_n(out->grad.data() + r * d, d, g.data());
        for (int k = L - 1; k >= 0; --k) {
          const int stage = steps[k].stage, sign = steps[k].sign;
          const int s = 1 << stage;
          const T* stage_out = snap.data() + static_cast<size_t>(k + 1) * d;
          const T* stage_angles =
              angles->data.data() + static_cast<size_t>(stage) * pairs;
          T* stage_grad =
              angles->requires_grad
                  ? angles->grad.data() + static_cast<size_t>(stage) * pairs
                  : nullptr;
          for (int p = 0; p < pairs; ++p) {
            const int i = detail::pair_lane(p, s);
            const int j = i + s;
            const T a = static_cast<T>(sign) * stage_angles[p];
            const T c = std::cos(a), sn = std::sin(a);
            const T gu = g[i], gv = g[j];
            if (stage_grad)
              stage_grad[p] += static_cast<T>(sign) *
                               (gv * stage_out[i] - gu * stage_out[j]);
            g[i] = gu * c + gv * sn;
            g[j] = -gu * sn + gv * c;
          }
        }
        if (x->requires_grad) {
          T* gx = x->grad.data() + r * d;
          for (int i = 0; i < d; ++i) gx[i] += g[i];
        }
      }
    });
  }
  return out;
}

// Materializes the transform as a dense dim x dim row-major matrix by pushing
// basis vectors through it: column j is B e_j. Diagnostic only — the training
// and inference paths never build this.
template <typename T>
std::vector<T> butterfly_dense(const Butterfly<T>& bf, bool transpose = false) {
  const int d = bf.dim;
  std::vector<T> dense(static_cast<size_t>(d) * d, T(0));
  std::vector<T> e(static_cast<size_t>(d)), col(static_cast<size_t>(d));
  for (int j = 0; j < d; ++j) {
    std::fill(e.begin(), e.end(), T(0));
    e[static_cast<size_t>(j)] = T(1);
    butterfly_apply_raw(bf, e.data(), col.data(), 1, transpose);
    for (int i = 0; i < d; ++i) dense[static_cast<size_t>(i) * d + j] = col[static_cast<size_t>(i)];
  }
  return dense;
}

}  // namespace bmoe
