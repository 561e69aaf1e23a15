#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "bmoe/analysis.hpp"
#include "bmoe/counters.hpp"
#include "bmoe/moe.hpp"
#include "bmoe/rng.hpp"

using Catch::Approx;

TEST_CASE("substrate and rotation storage") {
  // 512x2048 substrate at 1.58 bits: 0.1975 bytes per weight
  CHECK(bmoe::butterfly_substrate_bytes(512, 2048) == Approx(207093.76));
  CHECK(bmoe::butterfly_substrate_bytes(512, 2048, 2.0) == 262144.0);

  // per expert: (256*9 + 1024*11) angles at 2 bytes
  CHECK(bmoe::per_expert_rotation_bytes(512, 2048) == 27136);
  CHECK(bmoe::per_expert_rotation_bytes(64, 128, 2) == 2 * (32 * 6 + 64 * 7));

  CHECK_THROWS_AS(bmoe::butterfly_substrate_bytes(100, 2048), bmoe::ConfigError);
  CHECK_THROWS_AS(bmoe::per_expert_rotation_bytes(512, 100), bmoe::ConfigError);
  CHECK_THROWS_AS(bmoe::butterfly_memory_bytes(512, 2048, -1), bmoe::ConfigError);
}

TEST_CASE("total memory golden values") {
  // 64 experts: 207,093.76 + 64 * 27,136 = 1,943,797.76 bytes, about 1.9 MB
  const double m64 = bmoe::butterfly_memory_bytes(512, 2048, 64);
  CHECK(m64 == Approx(1943797.76));
  CHECK(bmoe::to_mb(m64) > 1.9);
  CHECK(bmoe::to_mb(m64) < 1.95);

  // zero experts leaves the substrate alone
  CHECK(bmoe::butterfly_memory_bytes(512, 2048, 0) == Approx(207093.76));

  // 256 experts: 207,093.76 + 256 * 27,136 = 7,153,909.76, about 7.15 MB
  const double m256 = bmoe::butterfly_memory_bytes(512, 2048, 256);
  CHECK(m256 == Approx(7153909.76));
  CHECK(m256 > 7153900.0);
  CHECK(m256 < 7153920.0);
}

TEST_CASE("standard mixture memory golden values") {
  CHECK(bmoe::standard_moe_memory_bytes(512, 2048, 64, 4) == 268435456);
  CHECK(bmoe::to_mib(268435456) == 256.0);
  CHECK(bmoe::standard_moe_memory_bytes(512, 2048, 8, 4) == 33554432);
  CHECK(bmoe::to_mib(33554432) == 32.0);
  CHECK(bmoe::standard_moe_memory_bytes(512, 2048, 1, 4) == 4 * 2048 * 512);
}

TEST_CASE("asymptotic compression ratio") {
  // 512*2048*4 bytes dense per expert vs 27,136 rotation bytes
  const double r = bmoe::asymptotic_compression(512, 2048, 4);
  CHECK(r == Approx(4194304.0 / 27136.0));
  CHECK(r == Approx(154.565).margin(0.01));
  CHECK(r > 154.4);
  CHECK(r < 154.7);
}

TEST_CASE("finite ratios rise toward the asymptote") {
  const double limit = bmoe::asymptotic_compression(64, 128, 4);
  double prev = 0;
  for (int e : {1, 2, 4, 8, 16, 64, 256, 1024}) {
    const double r = bmoe::compression_ratio(64, 128, e);
    CHECK(r > prev);
    CHECK(r < limit);
    prev = r;
  }
  // limit consistency: at a million experts the substrate has amortized away
  CHECK(bmoe::compression_ratio(64, 128, 1000000) ==
        Approx(limit).epsilon(1e-3));

  // large-configuration check at 256 experts: just above 150x
  CHECK(bmoe::compression_ratio(512, 2048, 256) == Approx(150.09).margin(0.05));
}

TEST_CASE("memory report is internally consistent") {
  const auto r = bmoe::memory_report(512, 2048, 64);
  CHECK(r.substrate_bytes_158 == Approx(207093.76));
  CHECK(r.substrate_bytes_2bit == 262144);
  CHECK(r.per_expert_rotation == 27136);
  CHECK(r.total_butterfly_bytes ==
        Approx(r.substrate_bytes_158 + 64.0 * r.per_expert_rotation));
  CHECK(r.standard_bytes == 268435456);
  CHECK(r.ratio == Approx(r.standard_bytes / r.total_butterfly_bytes));
  CHECK(r.ratio > 100.0);
  CHECK(r.asymptotic_ratio == Approx(154.565).margin(0.01));
  CHECK(r.ratio < r.asymptotic_ratio);
}

TEST_CASE("per-token flop formulas") {
  const auto c = bmoe::flops_per_token(8, 16, 1, 3, 0);
  CHECK(c.rotation_flops == 72);  // one full 8-lane transform

  const auto zero = bmoe::flops_per_token(64, 128, 0, 6, 7);
  CHECK(zero.rotation_flops == 0);
  CHECK(zero.ternary_adds == 0);

  const auto desk = bmoe::flops_per_token(64, 128, 2, 6, 7);
  CHECK(desk.rotation_flops == 2 * 6 * (6 * 32 + 7 * 64));
  CHECK(desk.rotation_flops == 7680);
  CHECK(desk.ternary_adds == 2 * 128 * 64);
}

TEST_CASE("formulas equal instrumented counters") {
  struct Config {
    int d_model, d_ff, n_experts, k, depth_in, depth_out;
  };
  for (const Config cfg : {Config{64, 128, 8, 2, -1, -1},
                           Config{64, 128, 8, 2, 2, 3},
                           Config{32, 64, 4, 1, -1, -1},
                           Config{16, 16, 2, 2, 1, 1}}) {
    bmoe::Rng rng(19);
    bmoe::MoEOptions<double> opts;
    opts.depth_in = cfg.depth_in;
    opts.depth_out = cfg.depth_out;
    bmoe::MoELayer<double> layer(cfg.d_model, cfg.d_ff, cfg.n_experts, cfg.k,
                                 rng, opts);
    const int l_in = cfg.depth_in < 0 ? bmoe::log2_int(cfg.d_model) : cfg.depth_in;
    const int l_out = cfg.depth_out < 0 ? bmoe::log2_int(cfg.d_ff) : cfg.depth_out;
    const auto expect =
        bmoe::flops_per_token(cfg.d_model, cfg.d_ff, cfg.k, l_in, l_out);

    for (int tokens : {1, 13}) {
      auto x = bmoe::randn_tensor<double>({tokens, cfg.d_model}, rng, 1.0);
      bmoe::Tape<double> tape;
      tape.set_recording(false);
      bmoe::op_counters().reset();
      layer.forward(tape, x);
      INFO("config " << cfg.d_model << "x" << cfg.d_ff << " E=" << cfg.n_experts
                     << " k=" << cfg.k << " depths " << l_in << "/" << l_out
                     << " tokens " << tokens);
      CHECK(bmoe::op_counters().butterfly_flops ==
            static_cast<uint64_t>(expect.rotation_flops) * tokens);
      CHECK(bmoe::op_counters().ternary_adds ==
            static_cast<uint64_t>(expect.ternary_adds) * tokens);
      CHECK(bmoe::op_counters().ternary_muls ==
            static_cast<uint64_t>(cfg.k) * cfg.d_ff * tokens);
    }
  }
}

TEST_CASE("memory traffic energy") {
  CHECK(bmoe::dram_energy_joules(0) == 0.0);

  // full standard footprint: 13.74 mJ per forward pass
  const double es = bmoe::dram_energy_joules(
      static_cast<double>(bmoe::standard_moe_memory_bytes(512, 2048, 64, 4)));
  CHECK(es == Approx(268435456.0 * 8 * 6.4e-12));
  CHECK(es > 13.7e-3 * 0.9);
  CHECK(es < 13.7e-3 * 1.1);

  // butterfly footprint: about a tenth of a millijoule, a >99% cut
  const double eb =
      bmoe::dram_energy_joules(bmoe::butterfly_memory_bytes(512, 2048, 64));
  CHECK(eb > 0.095e-3);
  CHECK(eb < 0.105e-3);
  CHECK(1.0 - eb / es >= 0.99);
}

TEST_CASE("device capacity") {
  const double substrate = bmoe::butterfly_substrate_bytes(512, 2048);

  CHECK(bmoe::device_capacity(substrate, 512, 2048) == 0);
  CHECK(bmoe::device_capacity(substrate - 1, 512, 2048) == 0);
  CHECK(bmoe::device_capacity(0, 512, 2048) == 0);
  CHECK(bmoe::device_capacity(substrate + 27136, 512, 2048) == 1);
  CHECK(bmoe::device_capacity(substrate + 2 * 27136 - 1, 512, 2048) == 1);

  // a fixed reserve comes off the budget before experts are counted
  CHECK(bmoe::device_capacity(substrate + 3 * 27136, 512, 2048, 27136.0) == 2);

  // 4 GiB budget: the formula gives about 158k experts, far from the cited
  // 10,540 — the discrepancy is reported, not hidden
  const double jetson = 4.0 * 1024 * 1024 * 1024;
  const int64_t cap = bmoe::device_capacity(jetson, 512, 2048);
  CHECK(cap == static_cast<int64_t>((jetson - substrate) / 27136.0));
  CHECK(cap > 150000);
  CHECK(cap < 165000);
  CHECK(cap != 10540);

  CHECK(bmoe::device_capacity(512.0 * 1024, 512, 2048) == 11);
}

TEST_CASE("device table carries formula and cited counts") {
  const auto rows = bmoe::device_table();
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].device == "rpi5_8gb");
  CHECK(rows[1].device == "jetson_4gb");
  CHECK(rows[2].device == "esp32_512kb");
  CHECK(rows[0].budget_bytes == 8.0 * 1024 * 1024 * 1024);
  CHECK(rows[1].budget_bytes == 4.0 * 1024 * 1024 * 1024);
  CHECK(rows[2].budget_bytes == 512.0 * 1024);
  CHECK(rows[0].cited_experts == 21079);
  CHECK(rows[1].cited_experts == 10540);
  CHECK(rows[2].cited_experts == 131);
  for (const auto& r : rows) {
    CHECK(r.formula_experts ==
          bmoe::device_capacity(r.budget_bytes, 512, 2048));
    CHECK(r.formula_experts != r.cited_experts);  // documented discrepancy
  }
  CHECK(rows[2].formula_experts == 11);
}

TEST_CASE("comparison table reproduces the published rows") {
  const auto rows = bmoe::comparison_table();
  REQUIRE(rows.size() == 6);
  std::map<std::string, bmoe::CompareRow> by_name;
  for (const auto& r : rows) by_name[r.method] = r;

  CHECK(by_name["standard_moe"].bytes_lo == 268435456.0);
  CHECK(bmoe::to_mib(by_name["standard_moe"].bytes_lo) == 256.0);

  // cited 5x ratio lands on 51.2 MiB — the published "51 MB"
  CHECK(bmoe::to_mib(by_name["moqe_2bit"].bytes_lo) == Approx(51.2));
  CHECK(by_name["moqe_2bit"].bytes_lo == by_name["moqe_2bit"].bytes_hi);

  CHECK(bmoe::to_mib(by_name["puzzlemoe"].bytes_lo) == 128.0);
  CHECK(bmoe::to_mib(by_name["mixture_compressor"].bytes_lo) == 64.0);

  CHECK(by_name["qmoe"].bytes_lo == Approx(268435456.0 / 20));
  CHECK(by_name["qmoe"].bytes_hi == Approx(268435456.0 / 10));

  const auto& bf = by_name["butterfly_moe"];
  CHECK(bf.bytes_lo == Approx(1943797.76));
  CHECK(bmoe::to_mb(bf.bytes_lo) == Approx(1.94).margin(0.01));
  CHECK(bf.ratio_label == "138.1x");  // computed, not the cited 256-expert figure

  // row order matches the published table
  CHECK(rows.front().method == "standard_moe");
  CHECK(rows.back().method == "butterfly_moe");
}
