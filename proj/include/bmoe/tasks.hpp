#pragma once

// Seeded generators for the four synthetic sequence tasks (copy, reverse,
// sort, arith). Samples pack as [input, separator, target] for next-token
// training; token 0 is the reserved separator, so task tokens live in
// [1, vocab-1].

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "bmoe/errors.hpp"
#include "bmoe/rng.hpp"

namespace bmoe {

inline constexpr int kSeparatorId = 0;
inline constexpr int kIgnoreId = -1;

enum class TaskKind { copy, reverse, sort, arith };

inline const char* task_name(TaskKind task) {
  switch (task) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::sort: return "sort";
    case TaskKind::arith: return "arith";
  }
  throw ConfigError("unknown task kind");
}

inline TaskKind task_from_name(const std::string& name) {
  if (name == "copy") return TaskKind::copy;
  if (name == "reverse") return TaskKind::reverse;
  if (name == "sort") return TaskKind::sort;
  if (name == "arith") return TaskKind::arith;
  throw ConfigError("unknown task name: " + name);
}

struct TaskSample {
  TaskKind task;
  std::vector<int> input;
  std::vector<int> target;
};

// n-th element of the wrapped arithmetic progression over the numeric
// sub-vocabulary [1, vocab-1].
inline int arith_token(int start, int step, long long n, int vocab) {
  const long long range = vocab - 1;
  return static_cast<int>((start - 1 + n * step) % range) + 1;
}

namespace detail {

inline void check_task_config(TaskKind task, int seq_len, int vocab) {
  if (seq_len < 1) throw ConfigError("seq_len must be positive");
  if (vocab < 2)
    throw ConfigError("vocab must leave room for task tokens beyond the separator");
  if (task == TaskKind::sort && vocab <= seq_len)
    throw ConfigError("sort without duplicates needs vocab > seq_len, got vocab=" +
                      std::to_string(vocab) + " seq_len=" + std::to_string(seq_len));
}

inline TaskSample draw_sample(TaskKind task, int seq_len, int vocab, Rng& rng) {
  TaskSample s;
  s.task = task;
  s.input.resize(seq_len);
  switch (task) {
    case TaskKind::copy:
      for (int& t : s.input) t = rng.uniform_int(1, vocab - 1);
      s.target = s.input;
      break;
    case TaskKind::reverse:
      for (int& t : s.input) t = rng.uniform_int(1, vocab - 1);
      s.target.assign(s.input.rbegin(), s.input.rend());
      break;
    case TaskKind::sort: {
      // partial Fisher-Yates over the numeric sub-vocabulary: distinct tokens
      std::vector<int> pool(vocab - 1);
      for (int i = 0; i < vocab - 1; ++i) pool[i] = i + 1;
      for (int i = 0; i < seq_len; ++i)
        std::swap(pool[i], pool[rng.uniform_int(i, vocab - 2)]);
      s.input.assign(pool.begin(), pool.begin() + seq_len);
      s.target = s.input;
      std::sort(s.target.begin(), s.target.end());
      break;
    }
    case TaskKind::arith: {
      const int start = rng.uniform_int(1, vocab - 1);
      const int step = rng.uniform_int(1, vocab - 1);
      s.target.resize(seq_len);
      for (int n = 0; n < seq_len; ++n) {
        s.input[n] = arith_token(start, step, n, vocab);
        s.target[n] = arith_token(start, step, n + seq_len, vocab);
      }
      break;
    }
  }
  return s;
}

}  // namespace detail

inline std::vector<TaskSample> generate(TaskKind task, int n_samples,
                                        int seq_len, int vocab, uint64_t seed) {
  detail::check_task_config(task, seq_len, vocab);
  Rng rng(seed);
  std::vector<TaskSample> out;
  out.reserve(n_samples);
  for (int i = 0; i < n_samples; ++i)
    out.push_back(detail::draw_sample(task, seq_len, vocab, rng));
  return out;
}

// Balanced mixture: sample counts per task differ by at most one, order
// shuffled per seed.
inline std::vector<TaskSample> generate_mixture(int n_samples, int seq_len,
                                                int vocab, uint64_t seed) {
  static constexpr TaskKind kAll[] = {TaskKind::copy, TaskKind::reverse,
                                      TaskKind::sort, TaskKind::arith};
  for (TaskKind task : kAll) detail::check_task_config(task, seq_len, vocab);
  std::vector<TaskKind> order;
  order.reserve(n_samples);
  for (int i = 0; i < n_samples; ++i) order.push_back(kAll[i % 4]);
  Rng rng(seed);
  for (int i = n_samples - 1; i > 0; --i)
    std::swap(order[i], order[rng.uniform_int(0, i)]);
  std::vector<TaskSample> out;
  out.reserve(n_samples);
  for (TaskKind task : order)
    out.push_back(detail::draw_sample(task, seq_len, vocab, rng));
  return out;
}

inline std::vector<int> pack_sample(const TaskSample& s) {
  std::vector<int> packed;
  packed.reserve(s.input.size() + 1 + s.target.size());
  packed.insert(packed.end(), s.input.begin(), s.input.end());
  packed.push_back(kSeparatorId);
  packed.insert(packed.end(), s.target.begin(), s.target.end());
  return packed;
}

// Next-token view of a packed sample: tokens[i] is consumed, labels[i] is the
// token to predict after it; positions before the target span carry kIgnoreId
// so the loss scores only target predictions.
struct TrainingPair {
  std::vector<int> tokens;
  std::vector<int> labels;
};

inline TrainingPair training_pair(const TaskSample& s) {
  const std::vector<int> packed = pack_sample(s);
  const size_t len = packed.size() - 1;
  const size_t first_target = s.input.size();  // label index of target[0]
  TrainingPair p;
  p.tokens.assign(packed.begin(), packed.begin() + len);
  p.labels.resize(len);
  for (size_t i = 0; i < len; ++i)
    p.labels[i] = i >= first_target ? packed[i + 1] : kIgnoreId;
  return p;
}

}  // namespace bmoe
