#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "bmoe/butterfly.hpp"
#include "bmoe/ops.hpp"
#include "bmoe/rng.hpp"
#include "bmoe/tensor.hpp"
#include "bmoe/ternary.hpp"

namespace bmoe {

// ---------------------------------------------------------------------------
// Mixture layer whose experts share one ternary substrate. Expert i is the
// virtual matrix B(phi_i) Q(W) B(theta_i)^T — never built during a forward
// pass; tokens are rotated into the substrate's frame, pushed through the
// packed ternary kernel, and rotated back out. Routing is top-k over a
// bias-free linear gate.
// ---------------------------------------------------------------------------

template <typename T>
struct RoutingStats {
  std::vector<int64_t> hard_counts;  // tokens routed per expert (k per token)
  TensorPtr<T> soft_mass;            // summed full-softmax gate probability per
                                     // expert; carries gradient to the gate
  int64_t total_tokens = 0;
};

template <typename T>
struct MoERouting {
  TensorPtr<T> weights;      // [N, k]: softmax over each token's selected logits
  std::vector<int> indices;  // [N*k]: chosen experts, descending logit order
  RoutingStats<T> stats;
};

template <typename T>
struct MoEForward {
  TensorPtr<T> output;  // [..., d_ff]
  MoERouting<T> routing;
};

// Top-k gated routing against a bias-free [d_model, E] gate matrix. Experts
// are ranked per token by gate logit, ties to the lower index; the returned
// weights are the softmax over exactly the selected logits. Soft mass (the
// column sums of the full softmax) rides the tape so the balance penalty can
// reach the gate.
template <typename T>
MoERouting<T> topk_route(Tape<T>& tape, const TensorPtr<T>& x2d,
                         const TensorPtr<T>& gate, int n_experts, int top_k) {
  if (x2d->ndim() != 2 || x2d->dim(1) != gate->dim(0))
    throw ShapeError("router expects [N, " + std::to_string(gate->dim(0)) +
                     "], got " + shape_str(x2d->shape));
  if (top_k < 1 || top_k > n_experts)
    throw ConfigError("top-k " + std::to_string(top_k) +
                      " outside [1, " + std::to_string(n_experts) + "]");
  if (x2d->dim(0) == 0) throw ShapeError("router got an empty batch");
  const int N = x2d->dim(0);
  auto logits = matmul(tape, x2d, gate);        // [N, E]
  auto full_probs = softmax(tape, logits, -1);  // [N, E]

  MoERouting<T> r;
  r.stats.hard_counts.assign(static_cast<size_t>(n_experts), 0);
  r.stats.total_tokens = N;
  r.stats.soft_mass = sum_axis0(tape, full_probs);

  r.indices.resize(static_cast<size_t>(N) * top_k);
  std::vector<int> order(static_cast<size_t>(n_experts));
  for (int t = 0; t < N; ++t) {
    const T* row = logits->data.data() + static_cast<size_t>(t) * n_experts;
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + top_k, order.end(),
                      [row](int a, int b) {
                        if (row[a] != row[b]) return row[a] > row[b];
                        return a < b;
                      });
    for (int s = 0; s < top_k; ++s) {
      const int e = order[static_cast<size_t>(s)];
      r.indices[static_cast<size_t>(t) * top_k + s] = e;
      ++r.stats.hard_counts[static_cast<size_t>(e)];
    }
  }

  auto selected = gather_cols(tape, logits, r.indices, top_k);  // [N, k]
  r.weights = softmax(tape, selected, -1);
  return r;
}

// Groups routed (token, slot) pairs by expert for the gather/scatter passes.
inline void routing_by_expert(const std::vector<int>& indices, int N, int top_k,
                              int n_experts, std::vector<std::vector<int>>& rows,
                              std::vector<std::vector<int>>& slots) {
  rows.assign(static_cast<size_t>(n_experts), {});
  slots.assign(static_cast<size_t>(n_experts), {});
  for (int t = 0; t < N; ++t)
    for (int s = 0; s < top_k; ++s) {
      const int e = indices[static_cast<size_t>(t) * top_k + s];
      rows[static_cast<size_t>(e)].push_back(t);
      slots[static_cast<size_t>(e)].push_back(s);
    }
}

template <typename T>
struct MoEOptions {
  T lambda_balance = T(0.01);
  int depth_in = -1;   // butterfly depth on the d_model side (-1 = full)
  int depth_out = -1;  // butterfly depth on the d_ff side
  double angle_init_std = 0.5;
  double weight_init_std = 0.02;
};

template <typename T>
class MoELayer {
 public:
  int d_model = 0, d_ff = 0, n_experts = 0, top_k = 0;
  T lambda_balance = T(0.01);
  TensorPtr<T> substrate;          // latent full-precision [d_ff, d_model]
  TernaryMatrix<T> quantized;      // view refreshed every forward until frozen
  std::vector<Butterfly<T>> theta;  // input-side transforms, dim d_model
  std::vector<Butterfly<T>> phi;    // output-side transforms, dim d_ff
  TensorPtr<T> gate;               // [d_model, n_experts], bias-free

  MoELayer(int d_model_, int d_ff_, int n_experts_, int k, Rng& rng,
           MoEOptions<T> opts = {})
      : d_model(d_model_),
        d_ff(d_ff_),
        n_experts(n_experts_),
        top_k(k),
        lambda_balance(opts.lambda_balance) {
    if (!is_power_of_two(d_model) || !is_power_of_two(d_ff))
      throw ConfigError("expert dimensions must be powers of two, got " +
                        std::to_string(d_model) + "x" + std::to_string(d_ff));
    if (n_experts < 1 || top_k < 1 || top_k > n_experts)
      throw ConfigError("need n_experts >= k >= 1, got n_experts=" +
                        std::to_string(n_experts) + " k=" + std::to_string(top_k));
    substrate = randn_tensor<T>({d_ff, d_model}, rng, opts.weight_init_std, true);
    gate = randn_tensor<T>({d_model, n_experts}, rng, opts.weight_init_std, true);
    theta.reserve(static_cast<size_t>(n_experts));
    phi.reserve(static_cast<size_t>(n_experts));
    for (int e = 0; e < n_experts; ++e) {
      theta.emplace_back(d_model, true, opts.depth_in);
      theta.back().randomize(rng, opts.angle_init_std);
      phi.emplace_back(d_ff, true, opts.depth_out);
      phi.back().randomize(rng, opts.angle_init_std);
    }
    refresh_quantization();
  }

  // Re-derives the ternary view from the latent substrate. Runs automatically
  // at the top of every forward pass while training; freeze() pins the view
  // for inference.
  void refresh_quantization() { quantized = quantize(*substrate); }

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  std::vector<TensorPtr<T>> parameters() {
    std::vector<TensorPtr<T>> ps{substrate, gate};
    for (auto& b : theta) ps.push_back(b.angles);
    for (auto& b : phi) ps.push_back(b.angles);
    return ps;
  }

  int64_t param_count() const {
    int64_t n = substrate->numel() + gate->numel();
    for (const auto& b : theta) n += b.param_count();
    for (const auto& b : phi) n += b.param_count();
    return n;
  }

  MoERouting<T> route(Tape<T>& tape, const TensorPtr<T>& x2d) {
    return topk_route(tape, x2d, gate, n_experts, top_k);
  }

  MoEForward<T> forward(Tape<T>& tape, const TensorPtr<T>& x) {
    if (x->ndim() < 1 || x->dim(-1) != d_model)
      throw ShapeError("expert layer of width " + std::to_string(d_model) +
                       " cannot act on " + shape_str(x->shape));
    if (!frozen_) refresh_quantization();
    const int N = static_cast<int>(x->numel() / d_model);
    auto x2d = x->ndim() == 2 ? x : reshape(tape, x, {N, d_model});

    MoEForward<T> out;
    out.routing = route(tape, x2d);

    std::vector<std::vector<int>> rows, slots;
    routing_by_expert(out.routing.indices, N, top_k, n_experts, rows, slots);

    TensorPtr<T> acc;
    auto latent = frozen_ ? nullptr : substrate;
    for (int e = 0; e < n_experts; ++e) {
      if (rows[static_cast<size_t>(e)].empty()) continue;
      auto xe = gather_rows(tape, x2d, rows[static_cast<size_t>(e)]);
      auto h = butterfly_apply(tape, theta[static_cast<size_t>(e)], xe, true);
      h = ternary_matmul(tape, quantized, latent, h);
      h = butterfly_apply(tape, phi[static_cast<size_t>(e)], h, false);
      auto w = gather_at(tape, out.routing.weights, rows[static_cast<size_t>(e)],
                         slots[static_cast<size_t>(e)]);
      h = scale_rows(tape, h, w);
      auto part = scatter_rows(tape, h, rows[static_cast<size_t>(e)], N);
      acc = acc ? add(tape, acc, part) : part;
    }

    if (x->ndim() != 2) {
      std::vector<int> shape(x->shape.begin(), x->shape.end() - 1);
      shape.push_back(d_ff);
      acc = reshape(tape, acc, std::move(shape));
    }
    out.output = acc;
    return out;
  }

 private:
  bool frozen_ = false;
};

// Balance penalty: squared deviation of each expert's routing fraction from
// uniform, scaled by lambda. Uses the differentiable soft gate mass in place
// of hard counts so the gate actually receives gradient; the fractions are
// normalized by the total soft mass, making a perfectly uniform gate score 0.
template <typename T>
TensorPtr<T> load_balance_loss(Tape<T>& tape, const RoutingStats<T>& stats,
                               int n_experts, T lambda) {
  if (stats.total_tokens == 0 || lambda == T(0))
    return make_tensor<T>({1}, false);  // zero, no gradient path
  auto frac = normalize_sum(tape, stats.soft_mass);
  auto dev = add_scalar(tape, frac, T(-1) / static_cast<T>(n_experts));
  return scale(tape, sum_all(tape, mul(tape, dev, dev)), lambda);
}

// Dense d_ff x d_model matrix of expert i, composed column by column from the
// same kernels the forward pass uses. Diagnostic only.
template <typename T>
std::vector<T> materialize_expert(MoELayer<T>& layer, int i) {
  if (i < 0 || i >= layer.n_experts)
    throw IndexError("expert " + std::to_string(i) + " out of range 0.." +
                     std::to_string(layer.n_experts - 1));
  const int dm = layer.d_model, df = layer.d_ff;
  const auto theta_t = butterfly_dense(layer.theta[static_cast<size_t>(i)], true);
  const auto qvals = layer.quantized.dense();  // [df, dm]
  // t1 = Q * B(theta)^T : [df, dm]
  std::vector<T> t1(static_cast<size_t>(df) * dm, T(0));
  gemm_nn_acc(qvals.data(), theta_t.data(), t1.data(), df, dm, dm);
  // result = B(phi) * t1 : [df, dm]
  const auto phi_d = butterfly_dense(layer.phi[static_cast<size_t>(i)], false);
  std::vector<T> out(static_cast<size_t>(df) * dm, T(0));
  gemm_nn_acc(phi_d.data(), t1.data(), out.data(), df, df, dm);
  return out;
}

// ---------------------------------------------------------------------------
// Expert-output similarity: routing is bypassed and every expert processes
// every probe token; entry (i, j) is the mean cosine similarity between
// expert i's and expert j's outputs on the same token. A token on which any
// expert produces a zero-norm output is excluded from the mean and counted.
// ---------------------------------------------------------------------------

template <typename T>
struct SimilarityResult {
  int n_experts = 0;
  std::vector<double> matrix;  // [E, E]
  int excluded_tokens = 0;

  double at(int i, int j) const {
    return matrix[static_cast<size_t>(i) * n_experts + j];
  }
};

template <typename T>
SimilarityResult<T> expert_similarity(MoELayer<T>& layer,
                                      const TensorPtr<T>& probe) {
  if (probe->ndim() != 2 || probe->dim(1) != layer.d_model || probe->dim(0) == 0)
    throw ConfigError("similarity probe must be a nonempty [N, " +
                      std::to_string(layer.d_model) + "] batch");
  const int N = probe->dim(0), E = layer.n_experts, df = layer.d_ff;
  layer.refresh_quantization();

  // expert outputs for all tokens, built with the raw (tape-free) kernels
  std::vector<std::vector<T>> outs(static_cast<size_t>(E));
  std::vector<T> mid(probe->data.size());
  for (int e = 0; e < E; ++e) {
    butterfly_apply_raw(layer.theta[static_cast<size_t>(e)], probe->data.data(),
                        mid.data(), N, true);
    std::vector<T> ternary_out(static_cast<size_t>(N) * df);
    for (int t = 0; t < N; ++t)
      ternary_matvec(layer.quantized, mid.data() + static_cast<size_t>(t) * layer.d_model,
                     ternary_out.data() + static_cast<size_t>(t) * df);
    outs[static_cast<size_t>(e)].resize(ternary_out.size());
    butterfly_apply_raw(layer.phi[static_cast<size_t>(e)], ternary_out.data(),
                        outs[static_cast<size_t>(e)].data(), N, false);
  }

  std::vector<double> norms(static_cast<size_t>(E) * N);
  std::vector<bool> keep(static_cast<size_t>(N), true);
  for (int e = 0; e < E; ++e)
    for (int t = 0; t < N; ++t) {
      double n2 = 0;
      const T* v = outs[static_cast<size_t>(e)].data() + static_cast<size_t>(t) * df;
      for (int j = 0; j < df; ++j) n2 += static_cast<double>(v[j]) * v[j];
      const double n = std::sqrt(n2);
      norms[static_cast<size_t>(e) * N + t] = n;
      if (n == 0) keep[static_cast<size_t>(t)] = false;
    }

  SimilarityResult<T> res;
  res.n_experts = E;
  res.matrix.assign(static_cast<size_t>(E) * E, 0.0);
  int kept = 0;
  for (int t = 0; t < N; ++t)
    if (keep[static_cast<size_t>(t)]) ++kept;
  res.excluded_tokens = N - kept;
  if (kept == 0) throw ConfigError("every probe token was excluded (zero norms)");

  for (int i = 0; i < E; ++i)
    for (int j = 0; j < E; ++j) {
      double acc = 0;
      for (int t = 0; t < N; ++t) {
        if (!keep[static_cast<size_t>(t)]) continue;
        const T* a = outs[static_cast<size_t>(i)].data() + static_cast<size_t>(t) * df;
        const T* b = outs[static_cast<size_t>(j)].data() + static_cast<size_t>(t) * df;
        double dot = 0;
        for (int c = 0; c < df; ++c) dot += static_cast<double>(a[c]) * b[c];
        acc += dot / (norms[static_cast<size_t>(i) * N + t] *
                      norms[static_cast<size_t>(j) * N + t]);
      }
      res.matrix[static_cast<size_t>(i) * E + j] = acc / kept;
    }
  return res;
}

template <typename T>
double diversity_score(const SimilarityResult<T>& sim) {
  const int E = sim.n_experts;
  if (E < 2)
    throw ConfigError("diversity needs at least 2 experts, got " +
                      std::to_string(E));
  double acc = 0;
  for (int i = 0; i < E; ++i)
    for (int j = 0; j < E; ++j)
      if (i != j) acc += sim.at(i, j);
  return 1.0 - acc / (static_cast<double>(E) * (E - 1));
}

// ---------------------------------------------------------------------------
// Baseline with independent full-precision experts behind the same router.
// ---------------------------------------------------------------------------

template <typename T>
class StandardMoELayer {
 public:
  int d_model = 0, d_ff = 0, n_experts = 0, top_k = 0;
  T lambda_balance = T(0.01);
  std::vector<TensorPtr<T>> experts;  // each [d_model, d_ff]
  TensorPtr<T> gate;                  // [d_model, n_experts]

  StandardMoELayer(int d_model_, int d_ff_, int n_experts_, int k, Rng& rng,
                   T lambda = T(0.01), double weight_init_std = 0.02)
      : d_model(d_model_),
        d_ff(d_ff_),
        n_experts(n_experts_),
        top_k(k),
        lambda_balance(lambda) {
    if (n_experts < 1 || top_k < 1 || top_k > n_experts)
      throw ConfigError("need n_experts >= k >= 1");
    gate = randn_tensor<T>({d_model, n_experts}, rng, weight_init_std, true);
    for (int e = 0; e < n_experts; ++e)
      experts.push_back(
          randn_tensor<T>({d_model, d_ff}, rng, weight_init_std, true));
  }

  std::vector<TensorPtr<T>> parameters() {
    std::vector<TensorPtr<T>> ps{gate};
    for (auto& w : experts) ps.push_back(w);
    return ps;
  }

  int64_t param_count() const {
    int64_t n = gate->numel();
    for (const auto& w : experts) n += w->numel();
    return n;
  }

  MoEForward<T> forward(Tape<T>& tape, const TensorPtr<T>& x) {
    if (x->ndim() < 1 || x->dim(-1) != d_model)
      throw ShapeError("expert layer of width " + std::to_string(d_model) +
                       " cannot act on " + shape_str(x->shape));
    const int N = static_cast<int>(x->numel() / d_model);
    auto x2d = x->ndim() == 2 ? x : reshape(tape, x, {N, d_model});

    MoEForward<T> out;
    out.routing = topk_route(tape, x2d, gate, n_experts, top_k);

    std::vector<std::vector<int>> rows, slots;
    routing_by_expert(out.routing.indices, N, top_k, n_experts, rows, slots);

    TensorPtr<T> acc;
    for (int e = 0; e < n_experts; ++e) {
      if (rows[static_cast<size_t>(e)].empty()) continue;
      auto xe = gather_rows(tape, x2d, rows[static_cast<size_t>(e)]);
      auto h = matmul(tape, xe, experts[static_cast<size_t>(e)]);
      auto w = gather_at(tape, out.routing.weights, rows[static_cast<size_t>(e)],
                         slots[static_cast<size_t>(e)]);
      h = scale_rows(tape, h, w);
      auto part = scatter_rows(tape, h, rows[static_cast<size_t>(e)], N);
      acc = acc ? add(tape, acc, part) : part;
    }

    if (x->ndim() != 2) {
      std::vector<int> shape(x->shape.begin(), x->shape.end() - 1);
      shape.push_back(d_ff);
      acc = reshape(tape, acc, std::move(shape));
    }
    out.output = acc;
    return out;
  }
};

}  // namespace bmoe
