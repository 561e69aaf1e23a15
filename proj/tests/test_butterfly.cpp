#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "bmoe/butterfly.hpp"
#include "bmoe/rng.hpp"

using bmoe::Butterfly;
using bmoe::Tape;
using bmoe::TensorPtr;
using D = double;

namespace {

Butterfly<D> random_butterfly(int dim, uint64_t seed, bool rg = true) {
  Butterfly<D> bf(dim, rg);
  bmoe::Rng rng(seed);
  bf.randomize(rng, 0.7);
  return bf;
}

std::vector<D> apply_vec(const Butterfly<D>& bf, const std::vector<D>& x,
                         bool transpose = false) {
  std::vector<D> y(x.size());
  bmoe::butterfly_apply_raw(bf, x.data(), y.data(),
                            static_cast<int64_t>(x.size()) / bf.dim, transpose);
  return y;
}

}  // namespace

TEST_CASE("dimension must be a power of two") {
  CHECK_THROWS_AS(Butterfly<D>(3), bmoe::ConfigError);
  CHECK_THROWS_AS(Butterfly<D>(6), bmoe::ConfigError);
  CHECK_THROWS_AS(Butterfly<D>(0), bmoe::ConfigError);
  CHECK_NOTHROW(Butterfly<D>(8));
}

TEST_CASE("parameter count is half the dimension per stage") {
  CHECK(Butterfly<D>(2).param_count() == 1);
  CHECK(Butterfly<D>(8).param_count() == 12);     // 3 stages x 4 pairs
  CHECK(Butterfly<D>(256).param_count() == 1024);  // 8 stages x 128 pairs
  CHECK(Butterfly<D>(512).param_count() == 2304);  // 9 stages x 256 pairs
  CHECK(Butterfly<D>(512).num_layers == 9);
}

TEST_CASE("zero angles give the identity") {
  Butterfly<D> bf(16, false);
  std::vector<D> x(16);
  for (int i = 0; i < 16; ++i) x[static_cast<size_t>(i)] = i - 7.5;
  CHECK(apply_vec(bf, x) == x);
  CHECK(apply_vec(bf, x, true) == x);
}

TEST_CASE("a 2-lane transform is a plain rotation") {
  Butterfly<D> bf(2, false);
  const D a = M_PI / 6;
  bf.angles->data[0] = a;
  const auto y = apply_vec(bf, {1.0, 0.0});
  CHECK(y[0] == Catch::Approx(std::cos(a)).epsilon(1e-12));
  CHECK(y[1] == Catch::Approx(std::sin(a)).epsilon(1e-12));
  const auto z = apply_vec(bf, {0.0, 1.0});
  CHECK(z[0] == Catch::Approx(-std::sin(a)).epsilon(1e-12));
  CHECK(z[1] == Catch::Approx(std::cos(a)).epsilon(1e-12));
}

TEST_CASE("each stage pairs lanes a power-of-two span apart") {
  // with only stage l active, lane i mixes with lane i + 2^l and nothing else
  for (int stage = 0; stage < 3; ++stage) {
    Butterfly<D> bf(8, false);
    for (int p = 0; p < 4; ++p) bf.angles->at(stage, p) = 0.3 + 0.1 * p;
    const auto dense = bmoe::butterfly_dense(bf);
    const int s = 1 << stage;
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j) {
        const bool coupled = (i == j) || (i == j + s) || (j == i + s);
        if (!coupled) CHECK(dense[static_cast<size_t>(i) * 8 + j] == 0.0);
      }
  }
}

TEST_CASE("transform preserves the norm") {
  auto bf = random_butterfly(32, 101, false);
  bmoe::Rng rng(102);
  std::vector<D> x(32);
  for (auto& v : x) v = rng.normal();
  D nx = 0, ny = 0;
  const auto y = apply_vec(bf, x);
  for (int i = 0; i < 32; ++i) {
    nx += x[static_cast<size_t>(i)] * x[static_cast<size_t>(i)];
    ny += y[static_cast<size_t>(i)] * y[static_cast<size_t>(i)];
  }
  CHECK(ny == Catch::Approx(nx).epsilon(1e-12));
}

TEST_CASE("transpose inverts the transform in both orders") {
  auto bf = random_butterfly(64, 103, false);
  bmoe::Rng rng(104);
  std::vector<D> x(64);
  for (auto& v : x) v = rng.normal();
  const auto roundtrip1 = apply_vec(bf, apply_vec(bf, x), true);
  const auto roundtrip2 = apply_vec(bf, apply_vec(bf, x, true));
  for (int i = 0; i < 64; ++i) {
    CHECK(roundtrip1[static_cast<size_t>(i)] ==
          Catch::Approx(x[static_cast<size_t>(i)]).margin(1e-10));
    CHECK(roundtrip2[static_cast<size_t>(i)] ==
          Catch::Approx(x[static_cast<size_t>(i)]).margin(1e-10));
  }
}

TEST_CASE("dense materialization is orthogonal and matches apply") {
  auto bf = random_butterfly(16, 105, false);
  const auto G = bmoe::butterfly_dense(bf);

  // G^T G = I
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) {
      D acc = 0;
      for (int r = 0; r < 16; ++r)
        acc += G[static_cast<size_t>(r) * 16 + i] * G[static_cast<size_t>(r) * 16 + j];
      CHECK(acc == Catch::Approx(i == j ? 1.0 : 0.0).margin(1e-12));
    }

  // G x = apply(x)
  bmoe::Rng rng(106);
  std::vector<D> x(16);
  for (auto& v : x) v = rng.normal();
  const auto y = apply_vec(bf, x);
  for (int i = 0; i < 16; ++i) {
    D acc = 0;
    for (int j = 0; j < 16; ++j) acc += G[static_cast<size_t>(i) * 16 + j] * x[static_cast<size_t>(j)];
    CHECK(acc == Catch::Approx(y[static_cast<size_t>(i)]).margin(1e-12));
  }

  // dense of the transpose is the transpose of dense
  const auto Gt = bmoe::butterfly_dense(bf, true);
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j)
      CHECK(Gt[static_cast<size_t>(i) * 16 + j] ==
            Catch::Approx(G[static_cast<size_t>(j) * 16 + i]).margin(1e-12));
}

TEST_CASE("rotation flop counter matches the closed form") {
  auto bf = random_butterfly(8, 107, false);
  auto& ctr = bmoe::op_counters();
  Tape<D> tape;
  bmoe::Rng rng(108);

  ctr.reset();
  auto x1 = bmoe::randn_tensor<D>({1, 8}, rng, 1.0);
  bmoe::butterfly_apply(tape, bf, x1);
  CHECK(ctr.butterfly_flops == 72);  // 6 * (8/2) * log2(8) per row

  ctr.reset();
  auto x5 = bmoe::randn_tensor<D>({5, 8}, rng, 1.0);
  bmoe::butterfly_apply(tape, bf, x5, true);
  CHECK(ctr.butterfly_flops == 5 * 72);

  auto big = random_butterfly(64, 109, false);
  CHECK(bmoe::butterfly_flops_per_row(big) == 6ull * 32 * 6);
  ctr.reset();
}

TEST_CASE("tape op matches the raw kernel") {
  auto bf = random_butterfly(16, 110, false);
  Tape<D> tape;
  bmoe::Rng rng(111);
  auto x = bmoe::randn_tensor<D>({3, 16}, rng, 1.0);
  for (const bool transpose : {false, true}) {
    auto y = bmoe::butterfly_apply(tape, bf, x, transpose);
    std::vector<D> ref(x->data.size());
    bmoe::butterfly_apply_raw(bf, x->data.data(), ref.data(), 3, transpose);
    CHECK(y->data == ref);
  }
}

TEST_CASE("shallow transforms keep the leading stages") {
  Butterfly<D> bf(16, false, 2);
  CHECK(bf.num_layers == 2);
  CHECK(bf.param_count() == 16);  // 2 stages x 8 pairs
  CHECK_THROWS_AS(Butterfly<D>(16, false, 5), bmoe::ConfigError);

  // still orthogonal: transpose round-trips
  bmoe::Rng rng(120);
  bf.randomize(rng, 0.7);
  std::vector<D> x(16);
  for (auto& v : x) v = rng.normal();
  const auto back = apply_vec(bf, apply_vec(bf, x), true);
  for (int i = 0; i < 16; ++i)
    CHECK(back[static_cast<size_t>(i)] ==
          Catch::Approx(x[static_cast<size_t>(i)]).margin(1e-10));

  // matches a full-depth transform whose later-stage angles are zero
  Butterfly<D> full(16, false);
  std::copy(bf.angles->data.begin(), bf.angles->data.end(),
            full.angles->data.begin());
  CHECK(apply_vec(bf, x) == apply_vec(full, x));
}

TEST_CASE("angle and input gradients match finite differences at every depth") {
  for (const int depth : {1, 2, 3, -1}) {
  for (const bool transpose : {false, true}) {
    Butterfly<D> bf(8, true, depth);
    {
      bmoe::Rng arng(112);
      bf.randomize(arng, 0.7);
    }
    bmoe::Rng rng(113);
    auto x = bmoe::randn_tensor<D>({4, 8}, rng, 1.0, true);
    auto w = bmoe::randn_tensor<D>({4, 8}, rng, 1.0, false);

    Tape<D> tape;
    x->zero_grad();
    bf.angles->zero_grad();
    auto loss = bmoe::sum_all(
        tape, bmoe::mul(tape, bmoe::butterfly_apply(tape, bf, x, transpose), w));
    tape.backward(loss);
    const auto gx = x->grad;
    const auto ga = bf.angles->grad;

    auto eval = [&](Tape<D>& t) {
      return bmoe::sum_all(
          t, bmoe::mul(t, bmoe::butterfly_apply(t, bf, x, transpose), w));
    };
    Tape<D> replay;
    replay.set_recording(false);
    const double step = 1e-6;
    auto fd_check = [&](std::vector<D>& data, const std::vector<D>& analytic) {
      for (size_t i = 0; i < data.size(); ++i) {
        const D orig = data[i];
        data[i] = orig + step;
        const D up = eval(replay)->data[0];
        data[i] = orig - step;
        const D down = eval(replay)->data[0];
        data[i] = orig;
        const D fd = (up - down) / (2 * step);
        INFO("element " << i << " transpose " << transpose);
        CHECK(std::abs(analytic[i] - fd) / (std::abs(fd) + 1e-8) < 1e-4);
      }
    };
    fd_check(x->data, gx);
    fd_check(bf.angles->data, ga);
  }
  }
}

TEST_CASE("gradients flow through a rotate-then-project graph") {
  auto bf = random_butterfly(8, 114);
  bmoe::Rng rng(115);
  auto x = bmoe::randn_tensor<D>({2, 8}, rng, 1.0, true);
  auto W = bmoe::randn_tensor<D>({8, 3}, rng, 0.5, true);

  Tape<D> tape;
  auto h = bmoe::butterfly_apply(tape, bf, x, true);
  auto y = bmoe::matmul(tape, h, W);
  auto loss = bmoe::mean_all(tape, bmoe::mul(tape, y, y));
  tape.backward(loss);

  D asum = 0;
  for (const D g : bf.angles->grad) asum += std::abs(g);
  CHECK(asum > 0);
  D xsum = 0;
  for (const D g : x->grad) xsum += std::abs(g);
  CHECK(xsum > 0);
}

TEST_CASE("angle initialization is deterministic per seed") {
  auto a = random_butterfly(32, 7);
  auto b = random_butterfly(32, 7);
  auto c = random_butterfly(32, 8);
  CHECK(a.angles->data == b.angles->data);
  CHECK(a.angles->data != c.angles->data);
}
