#pragma once

// Binary checkpoint for the rotated-substrate mixture layers: substrate codes
// with their scale, the latent weights behind them, per-expert angle blocks,
// and the gate. Everything is little-endian; the file starts with the magic
// bytes "BMOE1". Loading validates structure and code patterns and throws
// FormatError on anything malformed.

#include <cstdint>
#include <fstream>
#include <istream>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "bmoe/errors.hpp"
#include "bmoe/io.hpp"
#include "bmoe/moe.hpp"

namespace bmoe {

inline constexpr char kCheckpointMagic[5] = {'B', 'M', 'O', 'E', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  uint32_t version = kCheckpointVersion;
  int n_layers = 0;
  int d_model = 0;
  int d_ff = 0;
  int n_experts = 0;
  int top_k = 0;
};

namespace detail {

template <typename T>
void write_angle_block(std::ostream& os, const Butterfly<T>& b) {
  write_u32le(os, static_cast<uint32_t>(b.dim));
  write_u32le(os, static_cast<uint32_t>(b.num_layers));
  for (const T a : b.angles->data) write_f32le(os, static_cast<float>(a));
}

// Reads one angle block into an existing transform, which fixes the expected
// dimension; the depth is taken from the stream.
template <typename T>
int read_angle_depth(std::istream& is, int expect_dim) {
  const uint32_t dim = read_u32le(is);
  const uint32_t layers = read_u32le(is);
  if (static_cast<int>(dim) != expect_dim)
    throw FormatError("angle block dimension " + std::to_string(dim) +
                      " does not match layer dimension " +
                      std::to_string(expect_dim));
  if (layers > 64)
    throw FormatError("implausible angle depth " + std::to_string(layers));
  return static_cast<int>(layers);
}

inline void check_range(int64_t v, int64_t lo, int64_t hi, const char* what) {
  if (v < lo || v > hi)
    throw FormatError(std::string("implausible ") + what + ": " +
                      std::to_string(v));
}

}  // namespace detail

// Layers must share dimensions and expert count; init_error_pct carries the
// substrate quantization error measured when the run started, one per layer.
template <typename T>
void save_checkpoint(std::ostream& os,
                     const std::vector<const MoELayer<T>*>& layers,
                     const std::vector<double>& init_error_pct) {
  if (layers.empty()) throw ConfigError("checkpoint needs at least one layer");
  if (init_error_pct.size() != layers.size())
    throw ConfigError("need one initial error per layer");
  const MoELayer<T>& first = *layers.front();
  for (const auto* l : layers)
    if (l->d_model != first.d_model || l->d_ff != first.d_ff ||
        l->n_experts != first.n_experts || l->top_k != first.top_k)
      throw ConfigError("checkpoint layers must share one configuration");

  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  write_u32le(os, kCheckpointVersion);
  write_u32le(os, static_cast<uint32_t>(layers.size()));
  write_u32le(os, static_cast<uint32_t>(first.d_model));
  write_u32le(os, static_cast<uint32_t>(first.d_ff));
  write_u32le(os, static_cast<uint32_t>(first.n_experts));
  write_u32le(os, static_cast<uint32_t>(first.top_k));

  for (size_t i = 0; i < layers.size(); ++i) {
    const MoELayer<T>& l = *layers[i];
    write_f64le(os, init_error_pct[i]);
    write_f64le(os, static_cast<double>(l.quantized.gamma));
    write_u64le(os, l.quantized.codes.size());
    os.write(reinterpret_cast<const char*>(l.quantized.codes.data()),
             static_cast<std::streamsize>(l.quantized.codes.size()));
    for (const T w : l.substrate->data) write_f32le(os, static_cast<float>(w));
    for (int e = 0; e < l.n_experts; ++e) {
      detail::write_angle_block(os, l.theta[static_cast<size_t>(e)]);
      detail::write_angle_block(os, l.phi[static_cast<size_t>(e)]);
    }
    for (const T g : l.gate->data) write_f32le(os, static_cast<float>(g));
  }
  if (!os) throw FormatError("checkpoint write failed");
}

template <typename T>
struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::vector<std::unique_ptr<MoELayer<T>>> layers;
  std::vector<double> init_error_pct;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(std::istream& is) {
  char magic[sizeof(kCheckpointMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::string(magic, sizeof(magic)) !=
                 std::string(kCheckpointMagic, sizeof(kCheckpointMagic)))
    throw FormatError("missing checkpoint magic bytes");

  LoadedCheckpoint<T> ck;
  ck.meta.version = read_u32le(is);
  if (ck.meta.version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " +
                      std::to_string(ck.meta.version));
  ck.meta.n_layers = static_cast<int>(read_u32le(is));
  ck.meta.d_model = static_cast<int>(read_u32le(is));
  ck.meta.d_ff = static_cast<int>(read_u32le(is));
  ck.meta.n_experts = static_cast<int>(read_u32le(is));
  ck.meta.top_k = static_cast<int>(read_u32le(is));
  detail::check_range(ck.meta.n_layers, 1, 10000, "layer count");
  detail::check_range(ck.meta.d_model, 2, 1 << 20, "d_model");
  detail::check_range(ck.meta.d_ff, 2, 1 << 20, "d_ff");
  detail::check_range(ck.meta.n_experts, 1, 1 << 20, "expert count");
  detail::check_range(ck.meta.top_k, 1, ck.meta.n_experts, "top_k");
  if (!is_power_of_two(ck.meta.d_model) || !is_power_of_two(ck.meta.d_ff))
    throw FormatError("checkpoint dimensions must be powers of two");

  for (int li = 0; li < ck.meta.n_layers; ++li) {
    ck.init_error_pct.push_back(read_f64le(is));
    const double gamma = read_f64le(is);
    const uint64_t n_bytes = read_u64le(is);
    TernaryMatrix<T> q(ck.meta.d_ff, ck.meta.d_model);
    if (n_bytes != q.codes.size())
      throw FormatError("code block holds " + std::to_string(n_bytes) +
                        " bytes, expected " + std::to_string(q.codes.size()));
    is.read(reinterpret_cast<char*>(q.codes.data()),
            static_cast<std::streamsize>(n_bytes));
    if (!is) throw FormatError("truncated code block");
    q.gamma = static_cast<T>(gamma);
    q.validate_codes();

    // latent substrate, then angle depths, then construct the layer to the
    // recorded shape and overwrite its freshly-seeded state
    std::vector<T> latent(static_cast<size_t>(ck.meta.d_ff) * ck.meta.d_model);
    for (T& w : latent) w = static_cast<T>(read_f32le(is));

    std::vector<std::vector<T>> thetas, phis;
    int depth_in = -2, depth_out = -2;
    for (int e = 0; e < ck.meta.n_experts; ++e) {
      const int din = detail::read_angle_depth<T>(is, ck.meta.d_model);
      if (depth_in == -2) depth_in = din;
      if (din != depth_in)
        throw FormatError("experts disagree on input-side depth");
      std::vector<T> th(static_cast<size_t>(din) * (ck.meta.d_model / 2));
      for (T& a : th) a = static_cast<T>(read_f32le(is));
      thetas.push_back(std::move(th));

      const int dout = detail::read_angle_depth<T>(is, ck.meta.d_ff);
      if (depth_out == -2) depth_out = dout;
      if (dout != depth_out)
        throw FormatError("experts disagree on output-side depth");
      std::vector<T> ph(static_cast<size_t>(dout) * (ck.meta.d_ff / 2));
      for (T& a : ph) a = static_cast<T>(read_f32le(is));
      phis.push_back(std::move(ph));
    }

    Rng scratch(0);
    MoEOptions<T> opts;
    opts.depth_in = depth_in;
    opts.depth_out = depth_out;
    auto layer = std::make_unique<MoELayer<T>>(ck.meta.d_model, ck.meta.d_ff,
                                               ck.meta.n_experts,
                                               ck.meta.top_k, scratch, opts);
    layer->substrate->data = std::move(latent);
    for (int e = 0; e < ck.meta.n_experts; ++e) {
      layer->theta[static_cast<size_t>(e)].angles->data = std::move(thetas[static_cast<size_t>(e)]);
      layer->phi[static_cast<size_t>(e)].angles->data = std::move(phis[static_cast<size_t>(e)]);
    }
    for (T& g : layer->gate->data) g = static_cast<T>(read_f32le(is));
    if (!is) throw FormatError("truncated checkpoint");
    // the stored codes are authoritative; do not re-derive them from the
    // latent weights here
    layer->quantized = std::move(q);
    ck.layers.push_back(std::move(layer));
  }

  // trailing garbage means the file is not what it claims to be
  is.peek();
  if (!is.eof()) throw FormatError("trailing bytes after checkpoint payload");
  return ck;
}

template <typename T>
void save_checkpoint_file(const std::string& path,
                          const std::vector<const MoELayer<T>*>& layers,
                          const std::vector<double>& init_error_pct) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open " + path + " for writing");
  save_checkpoint(os, layers, init_error_pct);
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint " + path);
  return load_checkpoint<T>(is);
}

}  // namespace bmoe
