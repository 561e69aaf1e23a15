// Quantize a small matrix to {-gamma, 0, +gamma}, pack the codes four to a
// byte, and run the addition-only matvec against a plain dense multiply.

#include <cmath>
#include <cstdio>

#include "bmoe/tensor.hpp"
#include "bmoe/ternary.hpp"

int main() {
  bmoe::Rng rng(7);
  auto W = bmoe::randn_tensor<double>({4, 8}, rng, 1.0);
  const auto q = bmoe::quantize(*W);

  std::printf("gamma = %.4f (mean absolute weight)\n", q.gamma);
  std::printf("%lld weights -> %zu packed bytes\n\n",
              static_cast<long long>(q.weight_count()), q.packed_bytes());
  for (int r = 0; r < q.rows; ++r) {
    for (int c = 0; c < q.cols; ++c)
      std::printf("%+7.3f->%+d  ", W->at(r, c), q.code_at(r, c));
    std::printf("\n");
  }

  auto x = bmoe::randn_tensor<double>({8}, rng, 1.0);
  double y_packed[4];
  bmoe::ternary_matvec(q, x->data.data(), y_packed);

  std::printf("\npacked matvec vs dense multiply of unpacked values:\n");
  for (int r = 0; r < q.rows; ++r) {
    double dense = 0;
    for (int c = 0; c < q.cols; ++c) dense += q.value_at(r, c) * x->data[c];
    std::printf("  row %d: %+.6f vs %+.6f (diff %.1e)\n", r, y_packed[r],
                dense, std::abs(y_packed[r] - dense));
  }
  std::printf("\nerror against the full-precision matrix: %.1f%%\n",
              bmoe::relative_quant_error_pct(*W));
  return 0;
}
