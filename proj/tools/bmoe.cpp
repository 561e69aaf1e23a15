// Command-line front end: training runs with report emission, memory/
// compression sweeps, checkpoint diagnostics, and the depth ablation
// benchmark. Exit codes: 0 ok, 2 configuration problems, 3 numeric failure.

#include <algorithm>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bmoe/analysis.hpp"
#include "bmoe/checkpoint.hpp"
#include "bmoe/config.hpp"
#include "bmoe/io.hpp"
#include "bmoe/model.hpp"
#include "bmoe/moe.hpp"
#include "bmoe/tasks.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using F = float;

namespace {

std::string iso8601_now() {
  const std::time_t now = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

std::vector<bmoe::TaskSample> make_dataset(const bmoe::RunConfig& cfg,
                                           int n_samples, uint64_t seed) {
  if (cfg.task == "mixture")
    return bmoe::generate_mixture(n_samples, cfg.model.seq_len,
                                  cfg.model.vocab, seed);
  return bmoe::generate(bmoe::task_from_name(cfg.task), n_samples,
                        cfg.model.seq_len, cfg.model.vocab, seed);
}

json config_json(const bmoe::RunConfig& cfg) {
  json j;
  for (const auto& [k, v] : bmoe::config_items(cfg)) j[k] = v;
  return j;
}

int cmd_train(const bmoe::RunConfig& cfg) {
  cfg.model.validate();
  bmoe::validate_task_name(cfg.task);
  if (cfg.train_samples < 1) throw bmoe::ConfigError("train_samples must be positive");
  if (cfg.eval_samples < 1) throw bmoe::ConfigError("eval_samples must be positive");
  fs::create_directories(cfg.out_dir);
  const std::string start_time = iso8601_now();

  const uint64_t train_seed = bmoe::Rng(cfg.model.seed).fork(3).next_u64();
  const uint64_t eval_seed = bmoe::Rng(cfg.model.seed).fork(4).next_u64();
  const auto train_data = make_dataset(cfg, cfg.train_samples, train_seed);
  const auto eval_data = make_dataset(cfg, cfg.eval_samples, eval_seed);

  bmoe::Model<F> model(cfg.model);
  const bool butterfly = cfg.model.variant == bmoe::Variant::butterfly_moe;

  std::vector<double> init_errors;
  if (butterfly)
    for (auto& blk : model.blocks)
      init_errors.push_back(bmoe::relative_quant_error_pct(*blk.moe->substrate));

  const auto report = bmoe::train(model, train_data, cfg.model);
  const auto eval = bmoe::evaluate(model, eval_data);

  std::vector<std::string> artifacts;

  if (butterfly) {
    std::vector<const bmoe::MoELayer<F>*> layers;
    for (auto& blk : model.blocks) layers.push_back(blk.moe.get());
    bmoe::save_checkpoint_file<F>(
        (fs::path(cfg.out_dir) / "checkpoint.bmoe").string(), layers,
        init_errors);
    artifacts.push_back("checkpoint.bmoe");
  }

  {
    std::ofstream os(fs::path(cfg.out_dir) / "report.csv", std::ios::binary);
    bmoe::CsvWriter csv(os);
    csv.row({"epoch", "loss", "token_accuracy", "balance_loss",
             "quant_error_pct", "diversity"});
    for (const auto& e : report.epochs)
      csv.row({std::to_string(e.epoch), bmoe::num_cell(e.loss),
               bmoe::num_cell(e.token_accuracy), bmoe::num_cell(e.balance_loss),
               bmoe::num_cell(e.quant_error_pct), bmoe::num_cell(e.diversity)});
    artifacts.push_back("report.csv");
  }

  {
    std::ofstream os(fs::path(cfg.out_dir) / "timing.csv", std::ios::binary);
    bmoe::CsvWriter csv(os);
    csv.row({"epoch", "seconds", "peak_rss_kb"});
    for (const auto& e : report.epochs)
      csv.row({std::to_string(e.epoch), bmoe::num_cell(e.seconds),
               std::to_string(e.peak_rss_kb)});
    artifacts.push_back("timing.csv");
  }

  double final_quant = 0, final_div = 0;
  if (butterfly && !report.epochs.empty()) {
    final_quant = report.epochs.back().quant_error_pct;
    final_div = report.epochs.back().diversity;
  }

  {
    json j;
    j["config"] = config_json(cfg);
    j["config_sha1"] = bmoe::sha1_hex(bmoe::config_fingerprint_text(cfg));
    j["epochs_run"] = report.epochs.size();
    j["initial_loss"] = report.initial_loss;
    j["final_loss"] = report.final_loss;
    j["eval"] = {{"loss", eval.loss}, {"token_accuracy", eval.token_accuracy}};
    if (butterfly) {
      double init_mean = 0;
      for (double e : init_errors) init_mean += e;
      init_mean /= static_cast<double>(init_errors.size());
      j["quant_error_pct"] = {{"init", init_mean}};
      if (!report.epochs.empty()) {
        j["quant_error_pct"]["final"] = final_quant;
        j["quant_error_pct"]["reduction_pct"] =
            (init_mean - final_quant) / init_mean * 100.0;
        j["diversity_final"] = final_div;
      }
    }
    json epochs = json::array();
    for (const auto& e : report.epochs) {
      json row;
      row["epoch"] = e.epoch;
      row["loss"] = e.loss;
      row["token_accuracy"] = e.token_accuracy;
      row["balance_loss"] = e.balance_loss;
      if (butterfly) {
        row["quant_error_pct"] = e.quant_error_pct;
        row["diversity"] = e.diversity;
      }
      epochs.push_back(row);
    }
    j["epochs"] = epochs;
    std::ofstream os(fs::path(cfg.out_dir) / "report.json", std::ios::binary);
    os << j.dump(2) << "\n";
    artifacts.push_back("report.json");
  }

  {
    json m;
    m["config"] = config_json(cfg);
    m["config_sha1"] = bmoe::sha1_hex(bmoe::config_fingerprint_text(cfg));
    m["seed"] = cfg.model.seed;
    m["out_dir"] = cfg.out_dir;
    m["started"] = start_time;
    m["finished"] = iso8601_now();
    m["workers"] = 1;
    m["artifacts"] = artifacts;
    m["artifacts"].push_back("manifest.json");
    std::ofstream os(fs::path(cfg.out_dir) / "manifest.json", std::ios::binary);
    os << m.dump(2) << "\n";
  }

  std::cout << "variant " << bmoe::variant_name(cfg.model.variant) << ", task "
            << cfg.task << ", " << report.epochs.size() << " epochs\n";
  if (!report.epochs.empty())
    std::cout << "train loss " << report.initial_loss << " -> "
              << report.final_loss << "\n";
  std::cout << "eval loss " << eval.loss << ", token accuracy "
            << eval.token_accuracy << "\n";
  std::cout << "artifacts in " << cfg.out_dir << "\n";
  return 0;
}

int cmd_report_memory(int d_model, int d_ff, std::vector<int> experts,
                      int precision, const std::string& out_path) {
  if (experts.empty()) experts = {8, 16, 32, 64, 128, 256};
  std::sort(experts.begin(), experts.end());
  for (int e : experts)
    if (e < 1) throw bmoe::ConfigError("expert counts must be positive");

  std::ostringstream body;
  bmoe::CsvWriter csv(body);
  csv.row({"n_experts", "standard_bytes", "butterfly_bytes", "ratio"});
  for (int e : experts) {
    const double butterfly = bmoe::butterfly_memory_bytes(d_model, d_ff, e);
    const int64_t standard =
        bmoe::standard_moe_memory_bytes(d_model, d_ff, e, precision);
    csv.row({std::to_string(e), std::to_string(standard),
             bmoe::num_cell(butterfly),
             bmoe::num_cell(static_cast<double>(standard) / butterfly)});
  }
  if (!out_path.empty()) {
    std::ofstream os(out_path, std::ios::binary);
    if (!os) throw bmoe::ConfigError("cannot write " + out_path);
    os << body.str();
  }
  std::cout << body.str();

  std::cout << "\n";
  for (int e : experts) {
    const double b = bmoe::butterfly_memory_bytes(d_model, d_ff, e);
    const double s = static_cast<double>(
        bmoe::standard_moe_memory_bytes(d_model, d_ff, e, precision));
    std::cout << "N_E=" << e << ": standard " << bmoe::to_mb(s) << " MB ("
              << bmoe::to_mib(s) << " MiB), butterfly " << bmoe::to_mb(b)
              << " MB (" << bmoe::to_mib(b) << " MiB), ratio " << s / b
              << "x\n";
  }
  std::cout << "asymptotic ratio "
            << bmoe::asymptotic_compression(d_model, d_ff, precision) << "x\n";
  return 0;
}

int cmd_quant_error(const std::string& ckpt_path, const std::string& out_path) {
  const auto ck = bmoe::load_checkpoint_file<F>(ckpt_path);
  std::ostringstream body;
  bmoe::CsvWriter csv(body);
  csv.row({"layer", "init_error_pct", "current_error_pct", "reduction_pct"});
  double init_mean = 0, cur_mean = 0;
  for (size_t li = 0; li < ck.layers.size(); ++li) {
    const double init = ck.init_error_pct[li];
    const double cur =
        bmoe::relative_quant_error_pct(*ck.layers[li]->substrate);
    init_mean += init;
    cur_mean += cur;
    csv.row({std::to_string(li), bmoe::num_cell(init), bmoe::num_cell(cur),
             bmoe::num_cell((init - cur) / init * 100.0)});
  }
  init_mean /= static_cast<double>(ck.layers.size());
  cur_mean /= static_cast<double>(ck.layers.size());
  if (!out_path.empty()) {
    std::ofstream os(out_path, std::ios::binary);
    if (!os) throw bmoe::ConfigError("cannot write " + out_path);
    os << body.str();
  }
  std::cout << body.str();
  std::cout << "\nmean substrate error: before " << init_mean << "%, after "
            << cur_mean << "% (" << (init_mean - cur_mean) / init_mean * 100.0
            << "% reduction)\n";
  return 0;
}

int cmd_diversity(const std::string& ckpt_path, uint64_t probe_seed,
                  int probe_tokens, const std::string& out_path) {
  if (probe_tokens < 1) throw bmoe::ConfigError("probe_tokens must be positive");
  auto ck = bmoe::load_checkpoint_file<F>(ckpt_path);
  bmoe::Rng rng(probe_seed);
  auto probe = bmoe::randn_tensor<F>({probe_tokens, ck.meta.d_model}, rng, 1.0);

  std::ostringstream body;
  bmoe::CsvWriter csv(body);
  csv.row({"layer", "i", "j", "cosine"});
  double div_mean = 0;
  for (size_t li = 0; li < ck.layers.size(); ++li) {
    const auto sim = bmoe::expert_similarity(*ck.layers[li], probe);
    for (int i = 0; i < sim.n_experts; ++i)
      for (int j = 0; j < sim.n_experts; ++j)
        csv.row({std::to_string(li), std::to_string(i), std::to_string(j),
                 bmoe::num_cell(sim.at(i, j))});
    const double div = bmoe::diversity_score(sim);
    div_mean += div;
    std::cout << "layer " << li << ": diversity " << div << ", excluded tokens "
              << sim.excluded_tokens << "\n";
  }
  div_mean /= static_cast<double>(ck.layers.size());
  if (!out_path.empty()) {
    std::ofstream os(out_path, std::ios::binary);
    if (!os) throw bmoe::ConfigError("cannot write " + out_path);
    os << body.str();
  }
  std::cout << body.str();
  std::cout << "\nmean diversity " << div_mean << "\n";
  return 0;
}

int cmd_bench(int d_model, int d_ff, int n_experts, int top_k,
              std::vector<int> depths, int tokens, int reps,
              const std::string& out_path) {
  if (tokens < 1 || reps < 1)
    throw bmoe::ConfigError("tokens and reps must be positive");
  if (depths.empty())
    depths = {2, 4, 6, bmoe::log2_int(std::min(d_model, d_ff))};
  std::sort(depths.begin(), depths.end());
  depths.erase(std::unique(depths.begin(), depths.end()), depths.end());

  // One layer per depth, timed round-robin so clock-speed drift over the
  // run lands evenly on every depth instead of favoring the ones timed last.
  struct Candidate {
    int depth;
    std::unique_ptr<bmoe::MoELayer<F>> layer;
    bmoe::TensorPtr<F> x;
    std::vector<double> rates;
  };
  std::vector<Candidate> cands;
  for (const int depth : depths) {
    bmoe::Rng rng(7);
    bmoe::MoEOptions<F> opts;
    opts.depth_in = depth;
    opts.depth_out = depth;
    Candidate c;
    c.depth = depth;
    c.layer = std::make_unique<bmoe::MoELayer<F>>(d_model, d_ff, n_experts,
                                                  top_k, rng, opts);
    c.layer->freeze();  // inference path: quantized view is fixed
    c.x = bmoe::randn_tensor<F>({tokens, d_model}, rng, 1.0);
    cands.push_back(std::move(c));
  }

  bmoe::Tape<F> tape;
  tape.set_recording(false);
  for (auto& c : cands)
    for (int w = 0; w < 2; ++w) c.layer->forward(tape, c.x);  // warm-up
  for (int r = 0; r < reps; ++r)
    for (auto& c : cands) {
      const bmoe::Timer t;
      c.layer->forward(tape, c.x);
      c.rates.push_back(static_cast<double>(tokens) / t.seconds());
    }

  struct Row {
    int depth;
    int64_t params_per_expert;
    double tokens_per_s;
  };
  std::vector<Row> rows;
  for (auto& c : cands) {
    std::sort(c.rates.begin(), c.rates.end());
    rows.push_back({c.depth,
                    static_cast<int64_t>(c.depth) * (d_model + d_ff) / 2,
                    c.rates[c.rates.size() / 2]});
  }

  const double baseline = rows.back().tokens_per_s;  // deepest configuration
  std::ostringstream body;
  bmoe::CsvWriter csv(body);
  csv.row({"layers", "params_per_expert", "tokens_per_s", "speedup", "workers"});
  for (const auto& r : rows)
    csv.row({std::to_string(r.depth), std::to_string(r.params_per_expert),
             bmoe::num_cell(r.tokens_per_s),
             bmoe::num_cell(r.tokens_per_s / baseline), "1"});
  if (!out_path.empty()) {
    std::ofstream os(out_path, std::ios::binary);
    if (!os) throw bmoe::ConfigError("cannot write " + out_path);
    os << body.str();
  }
  std::cout << body.str();
  std::cout << "\nsingle worker, " << tokens << " tokens per pass, median of "
            << reps << " reps\n";
  return 0;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> out;
    for (const auto& [k, v] : bmoe::config_items(bmoe::RunConfig{}))
      out.push_back(k);
    return out;
  }();
  return keys;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"butterfly-rotated ternary-substrate mixture of experts"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train a variant and emit reports");
  std::string config_path;
  train->add_option("--config", config_path, "key = value config file");
  std::map<std::string, std::string> overrides;
  for (const std::string& key : config_keys()) {
    if (key == "seed") continue;
    train
        ->add_option_function<std::string>(
            "--" + key,
            [&overrides, key](const std::string& v) { overrides[key] = v; })
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }
  std::string seed_value;
  train->add_option("--seed", seed_value, "run seed")
      ->required()
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  // report-memory
  auto* mem = app.add_subcommand("report-memory",
                                 "memory and compression sweep");
  int mem_dm = 512, mem_dff = 2048, mem_precision = 4;
  std::vector<int> mem_experts;
  std::string mem_out;
  mem->add_option("--d_model", mem_dm);
  mem->add_option("--d_ff", mem_dff);
  mem->add_option("--precision", mem_precision, "bytes per dense weight");
  mem->add_option("--experts", mem_experts, "expert counts to sweep");
  mem->add_option("--out", mem_out, "CSV output path");

  // quant-error
  auto* qe = app.add_subcommand("quant-error",
                                "substrate error before/after training");
  std::string qe_ckpt, qe_out;
  qe->add_option("--checkpoint", qe_ckpt)->required();
  qe->add_option("--out", qe_out, "CSV output path");

  // diversity
  auto* dv = app.add_subcommand("diversity", "expert similarity matrix");
  std::string dv_ckpt, dv_out;
  uint64_t dv_seed = 0;
  int dv_tokens = 64;
  dv->add_option("--checkpoint", dv_ckpt)->required();
  dv->add_option("--probe-seed", dv_seed);
  dv->add_option("--probe-tokens", dv_tokens);
  dv->add_option("--out", dv_out, "CSV output path");

  // bench
  auto* bench = app.add_subcommand("bench", "depth ablation throughput");
  int b_dm = 512, b_dff = 512, b_experts = 8, b_k = 2, b_tokens = 256,
      b_reps = 15;
  std::vector<int> b_depths;
  std::string b_out;
  bench->add_option("--d_model", b_dm);
  bench->add_option("--d_ff", b_dff);
  bench->add_option("--experts", b_experts);
  bench->add_option("--top_k", b_k);
  bench->add_option("--depths", b_depths, "butterfly depths to time");
  bench->add_option("--tokens", b_tokens);
  bench->add_option("--reps", b_reps);
  bench->add_option("--out", b_out, "CSV output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) {
      bmoe::RunConfig cfg;
      if (!config_path.empty())
        bmoe::apply_config_map(cfg, bmoe::parse_config_file(config_path));
      for (const auto& [k, v] : overrides) bmoe::apply_config_key(cfg, k, v);
      bmoe::apply_config_key(cfg, "seed", seed_value);
      return cmd_train(cfg);
    }
    if (mem->parsed())
      return cmd_report_memory(mem_dm, mem_dff, mem_experts, mem_precision,
                               mem_out);
    if (qe->parsed()) return cmd_quant_error(qe_ckpt, qe_out);
    if (dv->parsed()) return cmd_diversity(dv_ckpt, dv_seed, dv_tokens, dv_out);
    if (bench->parsed())
      return cmd_bench(b_dm, b_dff, b_experts, b_k, b_depths, b_tokens, b_reps,
                       b_out);
  } catch (const bmoe::DivergenceError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
