#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <vector>

#include "bmoe/model.hpp"
#include "bmoe/tasks.hpp"

using bmoe::ModelConfig;
using bmoe::TaskKind;
using bmoe::Variant;
using D = double;
using F = float;

namespace {

ModelConfig small_config(Variant v) {
  ModelConfig cfg;
  cfg.vocab = 32;
  cfg.d_model = 32;
  cfg.d_ff = 64;
  cfg.n_blocks = 2;
  cfg.n_heads = 2;
  cfg.n_experts = 4;
  cfg.top_k = 2;
  cfg.variant = v;
  cfg.seq_len = 8;
  cfg.seed = 5;
  return cfg;
}

template <typename T>
std::map<std::string, int64_t> census_map(bmoe::Model<T>& m) {
  std::map<std::string, int64_t> out;
  for (const auto& [name, n] : m.census()) out[name] = n;
  return out;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg = small_config(Variant::butterfly_moe);
  CHECK_NOTHROW(cfg.validate());

  ModelConfig bad = cfg;
  bad.vocab = 1;
  CHECK_THROWS_AS(bad.validate(), bmoe::ConfigError);
  bad = cfg;
  bad.d_model = 48;
  CHECK_THROWS_AS(bad.validate(), bmoe::ConfigError);
  bad = cfg;
  bad.d_ff = 100;
  CHECK_THROWS_AS(bad.validate(), bmoe::ConfigError);
  bad = cfg;
  bad.n_heads = 3;
  CHECK_THROWS_AS(bad.validate(), bmoe::ConfigError);
  bad = cfg;
  bad.top_k = 5;
  CHECK_THROWS_AS(bad.validate(), bmoe::ConfigError);
  bad = cfg;
  bad.n_blocks = 0;
  CHECK_THROWS_AS(bad.validate(), bmoe::ConfigError);

  CHECK(bmoe::variant_from_name("butterfly_moe") == Variant::butterfly_moe);
  CHECK_THROWS_AS(bmoe::variant_from_name("mega_moe"), bmoe::ConfigError);
}

TEST_CASE("parameter census matches the accounting") {
  ModelConfig cfg = small_config(Variant::butterfly_moe);
  cfg.d_model = 64;
  cfg.d_ff = 128;
  cfg.n_experts = 4;
  cfg.seq_len = 16;
  bmoe::Model<D> m(cfg);
  auto census = census_map(m);

  // per block: substrate d_ff*d_model; angles N_E*(d_model/2*log2(d_model)
  // + d_ff/2*log2(d_ff)); gate d_model*N_E
  CHECK(census["moe_substrate"] == 2 * 128 * 64);
  CHECK(census["moe_angles"] == 2 * 4 * (32 * 6 + 64 * 7));
  CHECK(census["moe_gate"] == 2 * 64 * 4);
  CHECK(census["attention"] == 2 * 4 * 64 * 64);
  CHECK(census["token_embedding"] == 32 * 64);
  CHECK(census["position_embedding"] == 32 * 64);
  CHECK(census["ffn_down"] == 2 * 128 * 64);
  CHECK(census["output_head"] == 64 * 32);

  int64_t total = 0;
  for (const auto& [name, n] : census) total += n;
  CHECK(total == m.param_count());

  // the census walks the same tensors the optimizer sees
  int64_t walked = 0;
  for (const auto& p : m.parameters()) walked += p->numel();
  CHECK(walked == m.param_count());
}

TEST_CASE("dense variant has zero routing parameters") {
  bmoe::Model<D> m(small_config(Variant::dense));
  auto census = census_map(m);
  CHECK(census.count("moe_gate") == 0);
  CHECK(census.count("moe_substrate") == 0);
  CHECK(census.count("moe_experts") == 0);
  CHECK(census["ffn_up"] == 2 * 32 * 64);

  bmoe::Model<D> s(small_config(Variant::standard_moe));
  auto sc = census_map(s);
  CHECK(sc["moe_experts"] == 2 * 4 * 32 * 64);
  CHECK(sc["moe_gate"] == 2 * 32 * 4);
}

TEST_CASE("same seed gives bit-identical initialization") {
  for (Variant v : {Variant::dense, Variant::standard_moe,
                    Variant::butterfly_moe}) {
    bmoe::Model<D> a(small_config(v)), b(small_config(v));
    ModelConfig other = small_config(v);
    other.seed = 6;
    bmoe::Model<D> c(other);

    auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    REQUIRE(pa.size() == pb.size());
    bool identical = true, differs = false;
    for (size_t i = 0; i < pa.size(); ++i) {
      for (size_t j = 0; j < pa[i]->data.size(); ++j) {
        identical = identical && pa[i]->data[j] == pb[i]->data[j];
        differs = differs || pa[i]->data[j] != pc[i]->data[j];
      }
    }
    CHECK(identical);
    CHECK(differs);
  }
}

TEST_CASE("causal mask blocks gradient flow from the future") {
  ModelConfig cfg = small_config(Variant::dense);
  bmoe::Model<D> m(cfg);

  // distinct tokens so each embedding row maps to one position
  const std::vector<int> ids = {1, 2, 3, 4, 5, 6, 7, 8};
  std::vector<int> labels(8, bmoe::kIgnoreId);
  labels[3] = 9;  // only position 3 scores

  bmoe::Tape<D> tape;
  auto fwd = m.forward(tape, ids, 1, 8);
  auto loss = bmoe::cross_entropy(tape, fwd.logits, labels, bmoe::kIgnoreId);
  tape.backward(loss);

  const auto row_norm = [&](const bmoe::TensorPtr<D>& t, int row) {
    double n = 0;
    for (int c = 0; c < t->dim(1); ++c)
      n += std::abs(t->grad[static_cast<size_t>(row) * t->dim(1) + c]);
    return n;
  };
  for (int tok = 5; tok <= 8; ++tok)  // tokens seen only after position 3
    CHECK(row_norm(m.tok_emb, tok) == 0.0);
  for (int tok = 1; tok <= 4; ++tok)
    CHECK(row_norm(m.tok_emb, tok) > 0.0);
  for (int pos = 4; pos < 8; ++pos)
    CHECK(row_norm(m.pos_emb, pos) == 0.0);
  CHECK(row_norm(m.pos_emb, 0) > 0.0);
  CHECK(row_norm(m.tok_emb, 0) == 0.0);  // separator never used here
}

TEST_CASE("forward rejects malformed batches") {
  bmoe::Model<D> m(small_config(Variant::butterfly_moe));
  bmoe::Tape<D> tape;
  std::vector<int> ids(8, 1);
  CHECK_THROWS_AS(m.forward(tape, ids, 2, 3), bmoe::ShapeError);
  std::vector<int> too_long(40, 1);
  CHECK_THROWS_AS(m.forward(tape, too_long, 1, 40), bmoe::ShapeError);
}

TEST_CASE("perfect logits score accuracy 1") {
  auto logits = bmoe::make_tensor<D>({3, 8});
  const std::vector<int> labels = {bmoe::kIgnoreId, 3, 7};
  logits->at(1, 3) = 50.0;
  logits->at(2, 7) = 50.0;
  const auto [correct, counted] = bmoe::masked_accuracy(*logits, labels);
  CHECK(counted == 2);
  CHECK(correct == 2);

  // argmax ties resolve to the lower index
  auto flat = bmoe::make_tensor<D>({1, 4});
  const auto [c2, n2] = bmoe::masked_accuracy(*flat, {0});
  CHECK(c2 == 1);
  CHECK(n2 == 1);
}

TEST_CASE("untrained accuracy sits at chance level") {
  ModelConfig cfg = small_config(Variant::butterfly_moe);
  cfg.seq_len = 16;
  bmoe::Model<D> m(cfg);
  auto data = bmoe::generate(TaskKind::copy, 200, 16, 32, 77);
  auto r = bmoe::evaluate(m, data);

  // 3200 scored positions; binomial 3-sigma band around 1/32
  const double p = 1.0 / 32, sigma = std::sqrt(p * (1 - p) / 3200.0);
  INFO("accuracy " << r.token_accuracy);
  CHECK(r.token_accuracy > p - 3 * sigma);
  CHECK(r.token_accuracy < p + 3 * sigma);
  CHECK(r.loss > 3.0);  // near ln 32 = 3.466
  CHECK(r.loss < 4.0);
}

TEST_CASE("evaluate loss is the cross-entropy op on the same data") {
  bmoe::Model<D> m(small_config(Variant::butterfly_moe));
  auto data = bmoe::generate(TaskKind::reverse, 12, 8, 32, 13);
  auto r = bmoe::evaluate(m, data, static_cast<int>(data.size()));

  std::vector<size_t> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  const bmoe::BatchView b = bmoe::make_batch(data, order, 0, data.size());
  bmoe::Tape<D> tape;
  tape.set_recording(false);
  auto fwd = m.forward(tape, b.ids, b.batch, b.seq);
  auto ce = bmoe::cross_entropy(tape, fwd.logits, b.labels, bmoe::kIgnoreId);
  CHECK(r.loss == Catch::Approx(ce->data[0]).epsilon(1e-12));

  CHECK_THROWS_AS(bmoe::evaluate(m, {}), bmoe::ConfigError);
}

TEST_CASE("zero learning rate leaves parameters untouched") {
  ModelConfig cfg = small_config(Variant::butterfly_moe);
  cfg.lr = 0.0;
  cfg.lambda_balance = 0.0;  // balance term varies with batch composition
  cfg.epochs = 3;
  cfg.batch = 32;
  bmoe::Model<D> m(cfg);
  auto before = m.parameters();
  std::vector<std::vector<D>> snapshot;
  for (const auto& p : before) snapshot.push_back(p->data);

  auto data = bmoe::generate(TaskKind::copy, 96, 8, 32, 21);
  auto report = bmoe::train(m, data, cfg);

  auto after = m.parameters();
  bool unchanged = true;
  for (size_t i = 0; i < after.size(); ++i)
    for (size_t j = 0; j < after[i]->data.size(); ++j)
      unchanged = unchanged && after[i]->data[j] == snapshot[i][j];
  CHECK(unchanged);

  REQUIRE(report.epochs.size() == 3);
  for (const auto& e : report.epochs)
    CHECK(e.loss == Catch::Approx(report.epochs[0].loss).epsilon(1e-9));
}

TEST_CASE("epoch order depends only on seed and epoch") {
  const auto a = bmoe::epoch_order(9, 0, 50);
  const auto b = bmoe::epoch_order(9, 0, 50);
  CHECK(a == b);
  CHECK(a != bmoe::epoch_order(9, 1, 50));
  CHECK(a != bmoe::epoch_order(10, 0, 50));

  std::vector<bool> seen(50, false);
  for (size_t idx : a) {
    REQUIRE(idx < 50);
    seen[idx] = true;
  }
  CHECK(std::count(seen.begin(), seen.end(), true) == 50);
}

TEST_CASE("nan loss aborts with a diagnostic") {
  ModelConfig cfg = small_config(Variant::butterfly_moe);
  cfg.epochs = 1;
  bmoe::Model<D> m(cfg);
  // a poisoned output head reaches the loss as NaN without disturbing routing
  m.w_out->data[0] = std::nan("");
  auto data = bmoe::generate(TaskKind::copy, 8, 8, 32, 3);
  try {
    bmoe::train(m, data, cfg);
    FAIL("expected divergence abort");
  } catch (const bmoe::DivergenceError& e) {
    CHECK(std::string(e.what()).find("epoch 0") != std::string::npos);
  }
}

TEST_CASE("short mixture run descends and fills the report") {
  ModelConfig cfg = small_config(Variant::butterfly_moe);
  cfg.epochs = 3;
  cfg.batch = 64;
  cfg.seed = 11;
  bmoe::Model<F> m(cfg);
  auto data = bmoe::generate_mixture(256, 8, 32, 41);
  auto report = bmoe::train(m, data, cfg);

  REQUIRE(report.epochs.size() == 3);
  for (size_t i = 0; i < report.epochs.size(); ++i) {
    const auto& e = report.epochs[i];
    CHECK(e.epoch == static_cast<int>(i));
    CHECK(std::isfinite(e.loss));
    CHECK(e.balance_loss >= 0.0);
    CHECK(e.quant_error_pct > 0.0);
    CHECK(e.quant_error_pct < 100.0);
    CHECK(e.diversity >= -1.0);
    CHECK(e.diversity <= 2.0);
    CHECK(e.seconds >= 0.0);
    CHECK(e.peak_rss_kb > 0);
  }
  CHECK(report.final_loss < report.initial_loss);
}

TEST_CASE("copy task is learned in five epochs") {
  ModelConfig cfg = small_config(Variant::butterfly_moe);
  cfg.epochs = 5;
  cfg.batch = 64;
  cfg.seed = 3;
  bmoe::Model<F> m(cfg);

  auto train_data = bmoe::generate(TaskKind::copy, 2048, 8, 32, 101);
  auto report = bmoe::train(m, train_data, cfg);
  REQUIRE(report.epochs.size() == 5);
  CHECK(report.final_loss < report.initial_loss);

  auto held_out = bmoe::generate(TaskKind::copy, 256, 8, 32, 102);
  auto r = bmoe::evaluate(m, held_out);
  INFO("held-out accuracy " << r.token_accuracy << ", loss " << r.loss);
  CHECK(r.token_accuracy > 0.9);
}
