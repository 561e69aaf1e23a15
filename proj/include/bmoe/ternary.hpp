#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "bmoe/counters.hpp"
#include "bmoe/ops.hpp"
#include "bmoe/tensor.hpp"

namespace bmoe {

// ---------------------------------------------------------------------------
// Ternary-quantized matrix: every weight is one of {-gamma, 0, +gamma} with a
// single shared positive scale. Codes are 2 bits each, packed four to a byte
// in row-major order, first element in the low bits: 00 = 0, 01 = +1,
// 10 = -1, 11 = invalid. The matvec kernel accumulates by addition and
// subtraction only — the sole multiplications are the final gamma scalings,
// one per output element.
// ---------------------------------------------------------------------------

template <typename T>
struct TernaryMatrix {
  int rows = 0;
  int cols = 0;
  T gamma = T(0);
  std::vector<uint8_t> codes;  // 2-bit packed, 4 per byte, row-major

  TernaryMatrix() = default;

  TernaryMatrix(int rows_, int cols_) : rows(rows_), cols(cols_) {
    if (rows < 0 || cols < 0)
      throw ShapeError("negative ternary matrix dimension");
    codes.assign((static_cast<size_t>(rows) * cols + 3) / 4, 0);
  }

  int64_t weight_count() const { return static_cast<int64_t>(rows) * cols; }
  size_t packed_bytes() const { return codes.size(); }

  // decoded code in {-1, 0, +1}
  int code_at(int r, int c) const {
    const size_t f = static_cast<size_t>(r) * cols + c;
    const uint8_t bits = (codes[f / 4] >> ((f % 4) * 2)) & 0x3u;
    return bits == 1 ? 1 : (bits == 2 ? -1 : 0);
  }

  void set_code(int r, int c, int code) {
    if (code < -1 || code > 1)
      throw FormatError("ternary code must be -1, 0, or +1, got " +
                        std::to_string(code));
    const size_t f = static_cast<size_t>(r) * cols + c;
    const uint8_t bits = code == 1 ? 1 : (code == -1 ? 2 : 0);
    const int shift = static_cast<int>(f % 4) * 2;
    codes[f / 4] = static_cast<uint8_t>((codes[f / 4] & ~(0x3u << shift)) |
                                        (bits << shift));
  }

  T value_at(int r, int c) const { return gamma * static_cast<T>(code_at(r, c)); }

  // Rejects the reserved 11 bit pattern anywhere in the payload; raw bytes
  // read from disk go through this before use.
  void validate_codes() const {
    const size_t n = static_cast<size_t>(rows) * cols;
    for (size_t f = 0; f < n; ++f)
      if (((codes[f / 4] >> ((f % 4) * 2)) & 0x3u) == 0x3u)
        throw FormatError("invalid ternary code 11 at weight " +
                          std::to_string(f));
    // trailing pad bits of the last byte must be zero
    for (size_t f = n; f < codes.size() * 4; ++f)
      if (((codes[f / 4] >> ((f % 4) * 2)) & 0x3u) != 0)
        throw FormatError("nonzero padding in packed ternary codes");
  }

  std::vector<T> dense() const {
    std::vector<T> out(static_cast<size_t>(weight_count()));
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c)
        out[static_cast<size_t>(r) * cols + c] = value_at(r, c);
    return out;
  }
};

// mean absolute value, clamped away from zero so an all-zero matrix yields a
// harmless tiny scale instead of a division blowup
template <typename T>
T absmean_scale(const Tensor<T>& W) {
  if (W.numel() == 0) throw ShapeError("cannot scale an empty matrix");
  double acc = 0;
  for (const T v : W.data) acc += std::abs(static_cast<double>(v));
  const double gamma = acc / static_cast<double>(W.numel());
  return static_cast<T>(gamma < 1e-8 ? 1e-8 : gamma);
}

// round half away from zero, then clip to {-1, 0, +1}
template <typename T>
TernaryMatrix<T> quantize(const Tensor<T>& W) {
  if (W.ndim() != 2)
    throw ShapeError("quantize expects a matrix, got " + shape_str(W.shape));
  TernaryMatrix<T> q(W.dim(0), W.dim(1));
  q.gamma = absmean_scale(W);
  const double inv = 1.0 / static_cast<double>(q.gamma);
  for (int r = 0; r < q.rows; ++r)
    for (int c = 0; c < q.cols; ++c) {
      const double scaled =
          std::round(static_cast<double>(W.at(r, c)) * inv);
      q.set_code(r, c, scaled > 1 ? 1 : (scaled < -1 ? -1 : static_cast<int>(scaled)));
    }
  return q;
}

// y[r] = gamma * (sum of x[c] where code +1, minus sum where code -1).
// Bumps the op counters: one accumulation slot per weight, one multiplication
// per output element.
template <typename T>
void ternary_matvec(const TernaryMatrix<T>& q, const T* x, T* y) {
  const int rows = q.rows, cols = q.cols;
  for (int r = 0; r < rows; ++r) {
    const size_t base = static_cast<size_t>(r) * cols;
    T acc = T(0);
    for (int c = 0; c < cols; ++c) {
      const size_t f = base + c;
      const uint8_t bits = (q.codes[f / 4] >> ((f % 4) * 2)) & 0x3u;
      if (bits == 1)
        acc += x[c];
      else if (bits == 2)
        acc -= x[c];
    }
    y[r] = q.gamma * acc;
  }
  op_counters().ternary_adds +=
      static_cast<uint64_t>(rows) * static_cast<uint64_t>(cols);
  op_counters().ternary_muls += static_cast<uint64_t>(rows);
}

// g_x[c] = gamma * sum_r code[r,c] * g[r]; used by the backward pass, which
// deliberately stays out of the op counters (they meter forward cost)
template <typename T>
void ternary_matvec_transposed(const TernaryMatrix<T>& q, const T* g, T* gx) {
  for (int c = 0; c < q.cols; ++c) gx[c] = T(0);
  for (int r = 0; r < q.rows; ++r) {
    const size_t base = static_cast<size_t>(r) * q.cols;
    const T gr = g[r];
    for (int c = 0; c < q.cols; ++c) {
      const size_t f = base + c;
      const uint8_t bits = (q.codes[f / 4] >> ((f % 4) * 2)) & 0x3u;
      if (bits == 1)
        gx[c] += gr;
      else if (bits == 2)
        gx[c] -= gr;
    }
  }
  for (int c = 0; c < q.cols; ++c) gx[c] *= q.gamma;
}

// Tape op: y[..., rows] = Q x[..., cols] through the packed kernel. The
// latent full-precision matrix behind Q receives straight-through gradients
// (as if y = latent x; gamma gets none); pass latent = nullptr when frozen.
template <typename T>
TensorPtr<T> ternary_matmul(Tape<T>& tape, const TernaryMatrix<T>& q,
                            const TensorPtr<T>& latent, const TensorPtr<T>& x) {
  if (x->ndim() < 1 || x->dim(-1) != q.cols)
    throw ShapeError("ternary matrix with " + std::to_string(q.cols) +
                     " columns cannot act on " + shape_str(x->shape));
  if (latent && (latent->ndim() != 2 || latent->dim(0) != q.rows ||
                 latent->dim(1) != q.cols))
    throw ShapeError("latent shape " + shape_str(latent->shape) +
                     " does not match quantized " + std::to_string(q.rows) +
                     "x" + std::to_string(q.cols));
  const int64_t nrows = x->numel() / q.cols;
  std::vector<int> out_shape(x->shape.begin(), x->shape.end() - 1);
  out_shape.push_back(q.rows);
  const bool latent_grad = latent && latent->requires_grad;
  auto out = detail::op_output(tape, std::move(out_shape),
                               x->requires_grad || latent_grad);
  for (int64_t i = 0; i < nrows; ++i)
    ternary_matvec(q, x->data.data() + i * q.cols, out->data.data() + i * q.rows);

  if (out->requires_grad) {
    tape.record([q, latent, x, out, nrows, latent_grad]() {
      std::vector<T> gx(static_cast<size_t>(q.cols));
      for (int64_t i = 0; i < nrows; ++i) {
        const T* g = out->grad.data() + i * q.rows;
        if (x->requires_grad) {
          ternary_matvec_transposed(q, g, gx.data());
          T* dst = x->grad.data() + i * q.cols;
          for (int c = 0; c < q.cols; ++c) dst[c] += gx[c];
        }
        if (latent_grad) {
          const T* xr = x->data.data() + i * q.cols;
          for (int r = 0; r < q.rows; ++r) {
            T* lrow = latent->grad.data() + static_cast<size_t>(r) * q.cols;
            const T gr = g[r];
            for (int c = 0; c < q.cols; ++c) lrow[c] += gr * xr[c];
          }
        }
      }
    });
  }
  return out;
}

// ||W - Q(W)||_F^2 / ||W||_F^2 as a percentage
template <typename T>
double relative_quant_error_pct(const Tensor<T>& W) {
  const auto q = quantize(W);
  double num = 0, den = 0;
  for (int r = 0; r < q.rows; ++r)
    for (int c = 0; c < q.cols; ++c) {
      const double w = static_cast<double>(W.at(r, c));
      const double d = w - static_cast<double>(q.value_at(r, c));
      num += d * d;
      den += w * w;
    }
  if (den == 0)
    throw ConfigError("quantization error of the zero matrix is undefined");
  return 100.0 * num / den;
}

}  // namespace bmoe
