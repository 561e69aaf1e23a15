#pragma once

// Desk-scale pre-norm transformer whose FFN sublayer comes in three
// interchangeable variants: a dense FFN, a mixture with independent dense
// experts, and the rotated-substrate mixture. The expert path produces the
// hidden activation; a shared full-precision down projection closes the
// residual in every variant, so the variants differ only in how the hidden
// vector is made.

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bmoe/errors.hpp"
#include "bmoe/io.hpp"
#include "bmoe/moe.hpp"
#include "bmoe/ops.hpp"
#include "bmoe/rng.hpp"
#include "bmoe/tasks.hpp"
#include "bmoe/tensor.hpp"

namespace bmoe {

enum class Variant { dense, standard_moe, butterfly_moe };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::dense: return "dense";
    case Variant::standard_moe: return "standard_moe";
    case Variant::butterfly_moe: return "butterfly_moe";
  }
  throw ConfigError("unknown variant");
}

inline Variant variant_from_name(const std::string& name) {
  if (name == "dense") return Variant::dense;
  if (name == "standard_moe") return Variant::standard_moe;
  if (name == "butterfly_moe") return Variant::butterfly_moe;
  throw ConfigError("unknown variant name: " + name);
}

struct ModelConfig {
  int vocab = 32;
  int d_model = 64;
  int d_ff = 128;
  int n_blocks = 2;
  int n_heads = 2;
  int n_experts = 8;
  int top_k = 2;
  int depth_in = -1;   // butterfly depth on the d_model side (-1 = full)
  int depth_out = -1;  // butterfly depth on the d_ff side
  Variant variant = Variant::butterfly_moe;
  double lambda_balance = 0.01;
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  int batch = 64;
  int epochs = 20;
  int seq_len = 16;
  uint64_t seed = 0;

  void validate() const {
    if (vocab < 2) throw ConfigError("vocab must be at least 2");
    if (!is_power_of_two(d_model) || !is_power_of_two(d_ff))
      throw ConfigError("d_model and d_ff must be powers of two, got " +
                        std::to_string(d_model) + " and " + std::to_string(d_ff));
    if (n_heads < 1 || d_model % n_heads != 0)
      throw ConfigError("d_model " + std::to_string(d_model) +
                        " is not divisible into " + std::to_string(n_heads) +
                        " heads");
    if (n_blocks < 1) throw ConfigError("need at least one block");
    if (seq_len < 1 || batch < 1) throw ConfigError("seq_len and batch must be positive");
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (variant != Variant::dense && (n_experts < 1 || top_k < 1 || top_k > n_experts))
      throw ConfigError("need n_experts >= k >= 1, got n_experts=" +
                        std::to_string(n_experts) + " k=" + std::to_string(top_k));
  }
};

template <typename T>
struct TransformerBlock {
  TensorPtr<T> wq, wk, wv, wo;                   // attention, [d_model, d_model]
  std::unique_ptr<MoELayer<T>> moe;              // butterfly_moe variant
  std::unique_ptr<StandardMoELayer<T>> baseline; // standard_moe variant
  TensorPtr<T> w_up;                             // dense variant, [d_model, d_ff]
  TensorPtr<T> w_down;                           // shared, [d_ff, d_model]
};

template <typename T>
struct ModelForward {
  TensorPtr<T> logits;                  // [B*S, vocab]
  TensorPtr<T> balance;                 // summed balance penalty, null for dense
  std::vector<RoutingStats<T>> stats;   // one per block for MoE variants
};

template <typename T>
class Model {
 public:
  static constexpr T kLnEps = T(1e-5);

  ModelConfig cfg;
  TensorPtr<T> tok_emb;   // [vocab, d_model]
  TensorPtr<T> pos_emb;   // [max_positions, d_model]
  std::vector<TransformerBlock<T>> blocks;
  TensorPtr<T> w_out;     // [d_model, vocab]

  explicit Model(const ModelConfig& config) : cfg(config) {
    cfg.validate();
    Rng init = Rng(cfg.seed).fork(0);
    const double std = 0.02;
    const int max_pos = 2 * cfg.seq_len;  // packed sample length minus one
    tok_emb = randn_tensor<T>({cfg.vocab, cfg.d_model}, init, std, true);
    pos_emb = randn_tensor<T>({max_pos, cfg.d_model}, init, std, true);
    for (int b = 0; b < cfg.n_blocks; ++b) {
      TransformerBlock<T> blk;
      blk.wq = randn_tensor<T>({cfg.d_model, cfg.d_model}, init, std, true);
      blk.wk = randn_tensor<T>({cfg.d_model, cfg.d_model}, init, std, true);
      blk.wv = randn_tensor<T>({cfg.d_model, cfg.d_model}, init, std, true);
      blk.wo = randn_tensor<T>({cfg.d_model, cfg.d_model}, init, std, true);
      switch (cfg.variant) {
        case Variant::dense:
          blk.w_up = randn_tensor<T>({cfg.d_model, cfg.d_ff}, init, std, true);
          break;
        case Variant::standard_moe:
          blk.baseline = std::make_unique<StandardMoELayer<T>>(
              cfg.d_model, cfg.d_ff, cfg.n_experts, cfg.top_k, init,
              static_cast<T>(cfg.lambda_balance), std);
          break;
        case Variant::butterfly_moe: {
          MoEOptions<T> opts;
          opts.lambda_balance = static_cast<T>(cfg.lambda_balance);
          opts.depth_in = cfg.depth_in;
          opts.depth_out = cfg.depth_out;
          blk.moe = std::make_unique<MoELayer<T>>(cfg.d_model, cfg.d_ff,
                                                  cfg.n_experts, cfg.top_k,
                                                  init, opts);
          break;
        }
      }
      blk.w_down = randn_tensor<T>({cfg.d_ff, cfg.d_model}, init, std, true);
      blocks.push_back(std::move(blk));
    }
    w_out = randn_tensor<T>({cfg.d_model, cfg.vocab}, init, std, true);
  }

  std::vector<TensorPtr<T>> parameters() {
    std::vector<TensorPtr<T>> ps{tok_emb, pos_emb};
    for (auto& blk : blocks) {
      ps.insert(ps.end(), {blk.wq, blk.wk, blk.wv, blk.wo});
      if (blk.w_up) ps.push_back(blk.w_up);
      if (blk.baseline)
        for (auto& p : blk.baseline->parameters()) ps.push_back(p);
      if (blk.moe)
        for (auto& p : blk.moe->parameters()) ps.push_back(p);
      ps.push_back(blk.w_down);
    }
    ps.push_back(w_out);
    return ps;
  }

  int64_t param_count() {
    int64_t n = 0;
    for (const auto& p : parameters()) n += p->numel();
    return n;
  }

  // Named parameter-count breakdown for reports and accounting checks.
  std::vector<std::pair<std::string, int64_t>> census() {
    std::vector<std::pair<std::string, int64_t>> rows;
    rows.emplace_back("token_embedding", tok_emb->numel());
    rows.emplace_back("position_embedding", pos_emb->numel());
    int64_t attn = 0, up = 0, experts = 0, substrate = 0, angles = 0, gate = 0,
            down = 0;
    for (auto& blk : blocks) {
      attn += blk.wq->numel() + blk.wk->numel() + blk.wv->numel() +
              blk.wo->numel();
      if (blk.w_up) up += blk.w_up->numel();
      if (blk.baseline) {
        gate += blk.baseline->gate->numel();
        for (const auto& w : blk.baseline->experts) experts += w->numel();
      }
      if (blk.moe) {
        gate += blk.moe->gate->numel();
        substrate += blk.moe->substrate->numel();
        for (const auto& b : blk.moe->theta) angles += b.param_count();
        for (const auto& b : blk.moe->phi) angles += b.param_count();
      }
      down += blk.w_down->numel();
    }
    rows.emplace_back("attention", attn);
    if (cfg.variant == Variant::dense) rows.emplace_back("ffn_up", up);
    if (cfg.variant == Variant::standard_moe) {
      rows.emplace_back("moe_experts", experts);
      rows.emplace_back("moe_gate", gate);
    }
    if (cfg.variant == Variant::butterfly_moe) {
      rows.emplace_back("moe_substrate", substrate);
      rows.emplace_back("moe_angles", angles);
      rows.emplace_back("moe_gate", gate);
    }
    rows.emplace_back("ffn_down", down);
    rows.emplace_back("output_head", w_out->numel());
    return rows;
  }

  ModelForward<T> forward(Tape<T>& tape, const std::vector<int>& ids, int B,
                          int S) {
    if (B < 1 || S < 1 || ids.size() != static_cast<size_t>(B) * S)
      throw ShapeError("token batch of " + std::to_string(ids.size()) +
                       " ids does not factor as " + std::to_string(B) + "x" +
                       std::to_string(S));
    if (S > pos_emb->dim(0))
      throw ShapeError("sequence length " + std::to_string(S) +
                       " exceeds the " + std::to_string(pos_emb->dim(0)) +
                       " learned positions");
    const int dm = cfg.d_model, H = cfg.n_heads, hd = dm / H;

    auto x = reshape(tape, embedding(tape, ids, tok_emb), {B, S, dm});
    std::vector<int> pos_ids(S);
    for (int i = 0; i < S; ++i) pos_ids[i] = i;
    x = add(tape, x, gather_rows(tape, pos_emb, pos_ids));  // [S, dm] broadcast

    // additive causal mask, shared across batch and heads
    auto mask = make_tensor<T>({S, S}, false);
    for (int i = 0; i < S; ++i)
      for (int j = i + 1; j < S; ++j) mask->at(i, j) = T(-1e9);

    ModelForward<T> out;
    for (auto& blk : blocks) {
      // attention sublayer
      auto h = layernorm(tape, x, kLnEps);
      auto split = [&](const TensorPtr<T>& w) {
        auto proj = reshape(tape, matmul(tape, h, w), {B, S, H, hd});
        return swap_axes12(tape, proj);  // [B, H, S, hd]
      };
      auto q = split(blk.wq), k = split(blk.wk), v = split(blk.wv);
      auto scores = matmul(tape, q, transpose_last2(tape, k));
      scores = scale(tape, scores, T(1) / static_cast<T>(std::sqrt(double(hd))));
      scores = add(tape, scores, mask);
      auto ctx = matmul(tape, softmax(tape, scores, -1), v);
      ctx = reshape(tape, swap_axes12(tape, ctx), {B, S, dm});
      x = add(tape, x, matmul(tape, ctx, blk.wo));

      // hidden-vector sublayer
      auto h2 = layernorm(tape, x, kLnEps);
      TensorPtr<T> hidden;
      if (blk.w_up) hidden = matmul(tape, h2, blk.w_up);
      if (blk.baseline) {
        auto fwd = blk.baseline->forward(tape, h2);
        hidden = fwd.output;
        out.stats.push_back(fwd.routing.stats);
        auto pen = load_balance_loss(tape, fwd.routing.stats, cfg.n_experts,
                                     static_cast<T>(cfg.lambda_balance));
        out.balance = out.balance ? add(tape, out.balance, pen) : pen;
      }
      if (blk.moe) {
        auto fwd = blk.moe->forward(tape, h2);
        hidden = fwd.output;
        out.stats.push_back(fwd.routing.stats);
        auto pen = load_balance_loss(tape, fwd.routing.stats, cfg.n_experts,
                                     static_cast<T>(cfg.lambda_balance));
        out.balance = out.balance ? add(tape, out.balance, pen) : pen;
      }
      x = add(tape, x, matmul(tape, relu(tape, hidden), blk.w_down));
    }

    auto logits = matmul(tape, layernorm(tape, x, kLnEps), w_out);
    out.logits = reshape(tape, logits, {B * S, cfg.vocab});
    return out;
  }
};

// ---------------------------------------------------------------------------
// Optimizer: adaptive moments with decoupled weight decay. Moment buffers are
// kept in double regardless of the parameter precision.
// ---------------------------------------------------------------------------

template <typename T>
class AdamW {
 public:
  AdamW(std::vector<TensorPtr<T>> params, double lr, double beta1 = 0.9,
        double beta2 = 0.999, double weight_decay = 0.01, double eps = 1e-8)
      : params_(std::move(params)),
        lr_(lr),
        beta1_(beta1),
        beta2_(beta2),
        wd_(weight_decay),
        eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p->numel(), 0.0);
      v_.emplace_back(p->numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t pi = 0; pi < params_.size(); ++pi) {
      auto& p = *params_[pi];
      const bool decay = p.ndim() >= 2;  // matrices only, decoupled
      for (size_t i = 0; i < p.data.size(); ++i) {
        const double g = p.grad[i];
        m_[pi][i] = beta1_ * m_[pi][i] + (1.0 - beta1_) * g;
        v_[pi][i] = beta2_ * v_[pi][i] + (1.0 - beta2_) * g * g;
        const double mhat = m_[pi][i] / bc1;
        const double vhat = v_[pi][i] / bc2;
        double update = mhat / (std::sqrt(vhat) + eps_);
        if (decay) update += wd_ * p.data[i];
        p.data[i] -= static_cast<T>(lr_ * update);
      }
    }
  }

 private:
  std::vector<TensorPtr<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, wd_, eps_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Batching, evaluation, training.
// ---------------------------------------------------------------------------

struct BatchView {
  std::vector<int> ids;
  std::vector<int> labels;
  int batch = 0;
  int seq = 0;
  int counted = 0;  // label positions that score
};

inline BatchView make_batch(const std::vector<TaskSample>& data,
                            const std::vector<size_t>& order, size_t first,
                            size_t count) {
  BatchView b;
  b.batch = static_cast<int>(count);
  for (size_t i = 0; i < count; ++i) {
    const TrainingPair pair = training_pair(data[order[first + i]]);
    if (i == 0) b.seq = static_cast<int>(pair.tokens.size());
    if (static_cast<int>(pair.tokens.size()) != b.seq)
      throw ShapeError("mixed sequence lengths in one batch: " +
                       std::to_string(pair.tokens.size()) + " vs " +
                       std::to_string(b.seq));
    b.ids.insert(b.ids.end(), pair.tokens.begin(), pair.tokens.end());
    b.labels.insert(b.labels.end(), pair.labels.begin(), pair.labels.end());
  }
  for (int label : b.labels) b.counted += label != kIgnoreId;
  return b;
}

// Argmax-vs-label agreement over scored positions; ties pick the lower index.
template <typename T>
std::pair<int, int> masked_accuracy(const Tensor<T>& logits,
                                    const std::vector<int>& labels) {
  if (logits.ndim() != 2 || logits.dim(0) != static_cast<int>(labels.size()))
    throw ShapeError("accuracy needs [N, V] logits with N labels, got " +
                     shape_str(logits.shape) + " and " +
                     std::to_string(labels.size()) + " labels");
  const int N = logits.dim(0), V = logits.dim(1);
  int correct = 0, counted = 0;
  for (int i = 0; i < N; ++i) {
    if (labels[static_cast<size_t>(i)] == kIgnoreId) continue;
    int best = 0;
    for (int j = 1; j < V; ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    counted += 1;
    correct += best == labels[static_cast<size_t>(i)];
  }
  return {correct, counted};
}

template <typename T>
struct EvalResult {
  double loss = 0;
  double token_accuracy = 0;
};

template <typename T>
EvalResult<T> evaluate(Model<T>& model, const std::vector<TaskSample>& data,
                       int batch_size = 64) {
  if (data.empty()) throw ConfigError("evaluation dataset is empty");
  std::vector<size_t> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  double loss_sum = 0;
  long correct = 0, counted = 0;
  Tape<T> tape;
  tape.set_recording(false);
  for (size_t first = 0; first < data.size();
       first += static_cast<size_t>(batch_size)) {
    const size_t count =
        std::min(static_cast<size_t>(batch_size), data.size() - first);
    const BatchView b = make_batch(data, order, first, count);
    auto fwd = model.forward(tape, b.ids, b.batch, b.seq);
    auto ce = cross_entropy(tape, fwd.logits, b.labels, kIgnoreId);
    loss_sum += static_cast<double>(ce->data[0]) * b.counted;
    const auto [c, n] = masked_accuracy(*fwd.logits, b.labels);
    correct += c;
    counted += n;
  }
  EvalResult<T> r;
  r.loss = loss_sum / static_cast<double>(counted);
  r.token_accuracy = static_cast<double>(correct) / static_cast<double>(counted);
  return r;
}

struct EpochStats {
  int epoch = 0;
  double loss = 0;
  double token_accuracy = 0;
  double balance_loss = 0;
  double quant_error_pct = 0;
  double diversity = 0;
  double seconds = 0;
  long peak_rss_kb = 0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  double initial_loss = 0;
  double final_loss = 0;
};

// Sample order for one epoch: a pure function of seed, epoch, and dataset
// size — never of the model — so every variant consumes the same stream.
inline std::vector<size_t> epoch_order(uint64_t seed, int epoch, size_t n) {
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng(seed).fork(1).fork(static_cast<uint64_t>(epoch));
  for (size_t i = n; i > 1; --i)
    std::swap(order[i - 1],
              order[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
  return order;
}

// One optimization run. Losses turning NaN abort with a diagnostic.
template <typename T>
TrainReport train(Model<T>& model, const std::vector<TaskSample>& data,
                  const ModelConfig& cfg) {
  if (data.empty()) throw ConfigError("training dataset is empty");
  const std::vector<TensorPtr<T>> params = model.parameters();
  AdamW<T> opt(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
  Rng probe_rng = Rng(cfg.seed).fork(2);
  TensorPtr<T> probe;
  if (cfg.variant == Variant::butterfly_moe)
    probe = randn_tensor<T>({64, cfg.d_model}, probe_rng, 1.0);

  TrainReport report;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const Timer timer;
    const std::vector<size_t> order = epoch_order(cfg.seed, epoch, data.size());

    double loss_sum = 0, balance_sum = 0;
    long correct = 0, counted = 0, batches = 0;
    for (size_t first = 0; first < data.size();
         first += static_cast<size_t>(cfg.batch)) {
      const size_t count =
          std::min(static_cast<size_t>(cfg.batch), data.size() - first);
      const BatchView b = make_batch(data, order, first, count);

      Tape<T> tape;
      opt.zero_grad();
      auto fwd = model.forward(tape, b.ids, b.batch, b.seq);
      auto loss = cross_entropy(tape, fwd.logits, b.labels, kIgnoreId);
      if (fwd.balance) loss = add(tape, loss, fwd.balance);
      const double loss_val = static_cast<double>(loss->data[0]);
      if (std::isnan(loss_val) || std::isinf(loss_val))
        throw DivergenceError("loss diverged to " + std::to_string(loss_val) +
                              " at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batches));
      tape.backward(loss);
      opt.step();
      // Catch an exploding step here, before the next forward would trip an
      // internal guard with a misleading message.
      for (const auto& p : params)
        for (const T v : p->data)
          if (!std::isfinite(static_cast<double>(v)))
            throw DivergenceError("parameters diverged at epoch " +
                                  std::to_string(epoch) + ", batch " +
                                  std::to_string(batches));

      loss_sum += loss_val * b.counted;
      if (fwd.balance) balance_sum += static_cast<double>(fwd.balance->data[0]);
      const auto [c, n] = masked_accuracy(*fwd.logits, b.labels);
      correct += c;
      counted += n;
      ++batches;
    }

    EpochStats s;
    s.epoch = epoch;
    s.loss = loss_sum / static_cast<double>(counted);
    s.token_accuracy = static_cast<double>(correct) / static_cast<double>(counted);
    s.balance_loss = batches ? balance_sum / static_cast<double>(batches) : 0;
    if (cfg.variant == Variant::butterfly_moe) {
      double err = 0, div = 0;
      for (auto& blk : model.blocks) {
        err += relative_quant_error_pct(*blk.moe->substrate);
        div += diversity_score(expert_similarity(*blk.moe, probe));
      }
      s.quant_error_pct = err / model.blocks.size();
      s.diversity = div / model.blocks.size();
    }
    s.seconds = timer.seconds();
    s.peak_rss_kb = peak_rss_kb();
    report.epochs.push_back(s);
  }

  if (!report.epochs.empty()) {
    report.initial_loss = report.epochs.front().loss;
    report.final_loss = report.epochs.back().loss;
  }
  return report;
}

}  // namespace bmoe
