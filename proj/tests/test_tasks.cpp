#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <set>
#include <vector>

#include "bmoe/tasks.hpp"

using bmoe::TaskKind;
using bmoe::TaskSample;

namespace {

// Independent label checker: recomputes the expected target from the input
// alone. For arith the step is recovered from the first two input tokens, so
// callers use seq_len >= 2 there.
std::vector<int> expected_target(TaskKind task, const std::vector<int>& input,
                                 int vocab) {
  switch (task) {
    case TaskKind::copy:
      return input;
    case TaskKind::reverse:
      return {input.rbegin(), input.rend()};
    case TaskKind::sort: {
      std::vector<int> t = input;
      std::sort(t.begin(), t.end());
      return t;
    }
    case TaskKind::arith: {
      REQUIRE(input.size() >= 2);
      const int range = vocab - 1;
      const int step = ((input[1] - input[0]) % range + range) % range;
      std::vector<int> t(input.size());
      for (size_t n = 0; n < input.size(); ++n) {
        const long long shifted = input[0] - 1 + static_cast<long long>(step) *
                                  (n + input.size());
        t[n] = static_cast<int>(shifted % range) + 1;
      }
      return t;
    }
  }
  FAIL("unreachable");
  return {};
}

void check_sample(const TaskSample& s, int seq_len, int vocab) {
  REQUIRE(s.input.size() == static_cast<size_t>(seq_len));
  REQUIRE(s.target.size() == static_cast<size_t>(seq_len));
  for (int t : s.input) {
    REQUIRE(t >= 1);
    REQUIRE(t < vocab);
  }
  for (int t : s.target) {
    REQUIRE(t >= 1);
    REQUIRE(t < vocab);
  }
  // arith inputs must themselves be consistent progressions before the
  // continuation is judged
  if (s.task == TaskKind::arith) {
    const int range = vocab - 1;
    const int step = ((s.input[1] - s.input[0]) % range + range) % range;
    for (size_t n = 1; n < s.input.size(); ++n) {
      const int d = ((s.input[n] - s.input[n - 1]) % range + range) % range;
      REQUIRE(d == step);
    }
  }
  REQUIRE(s.target == expected_target(s.task, s.input, vocab));
}

}  // namespace

TEST_CASE("literal task definitions") {
  const std::vector<int> input = {5, 3, 7};
  CHECK(expected_target(TaskKind::copy, input, 32) == std::vector<int>{5, 3, 7});
  CHECK(expected_target(TaskKind::reverse, input, 32) == std::vector<int>{7, 3, 5});
  CHECK(expected_target(TaskKind::sort, input, 32) == std::vector<int>{3, 5, 7});
}

TEST_CASE("arithmetic progression tokens") {
  // start=2, step=3 in a vocabulary wide enough not to wrap
  std::vector<int> seq;
  for (int n = 0; n < 8; ++n) seq.push_back(bmoe::arith_token(2, 3, n, 32));
  CHECK(seq == std::vector<int>{2, 5, 8, 11, 14, 17, 20, 23});

  // wrapping: vocab 8 -> numeric range 7; start=6, step=4
  std::vector<int> wrapped;
  for (int n = 0; n < 4; ++n) wrapped.push_back(bmoe::arith_token(6, 4, n, 8));
  CHECK(wrapped == std::vector<int>{6, 3, 7, 4});

  // progression stays inside [1, vocab-1] over a long horizon
  for (int n = 0; n < 200; ++n) {
    const int t = bmoe::arith_token(5, 6, n, 8);
    CHECK(t >= 1);
    CHECK(t < 8);
  }
}

TEST_CASE("generated samples satisfy their task definition") {
  for (TaskKind task : {TaskKind::copy, TaskKind::reverse, TaskKind::sort,
                        TaskKind::arith}) {
    INFO("task " << bmoe::task_name(task));
    auto data = bmoe::generate(task, 50, 12, 32, 7);
    REQUIRE(data.size() == 50);
    for (const auto& s : data) {
      CHECK(s.task == task);
      check_sample(s, 12, 32);
    }
  }
}

TEST_CASE("sort inputs are duplicate-free permutations") {
  auto data = bmoe::generate(TaskKind::sort, 100, 15, 16, 11);
  for (const auto& s : data) {
    std::set<int> uniq(s.input.begin(), s.input.end());
    CHECK(uniq.size() == s.input.size());
    CHECK(std::is_permutation(s.input.begin(), s.input.end(), s.target.begin()));
    CHECK(std::is_sorted(s.target.begin(), s.target.end()));
  }
  // inputs are not pre-sorted as a rule
  int unsorted = 0;
  for (const auto& s : data)
    unsorted += !std::is_sorted(s.input.begin(), s.input.end());
  CHECK(unsorted > 50);
}

TEST_CASE("generation is deterministic per seed") {
  for (TaskKind task : {TaskKind::copy, TaskKind::sort, TaskKind::arith}) {
    auto a = bmoe::generate(task, 20, 8, 32, 123);
    auto b = bmoe::generate(task, 20, 8, 32, 123);
    auto c = bmoe::generate(task, 20, 8, 32, 124);
    bool identical = true, differs = false;
    for (int i = 0; i < 20; ++i) {
      identical = identical && a[i].input == b[i].input && a[i].target == b[i].target;
      differs = differs || a[i].input != c[i].input;
    }
    CHECK(identical);
    CHECK(differs);
  }
}

TEST_CASE("invalid configurations are rejected") {
  CHECK_THROWS_AS(bmoe::generate(TaskKind::sort, 1, 16, 16, 0), bmoe::ConfigError);
  CHECK_THROWS_AS(bmoe::generate(TaskKind::sort, 1, 16, 10, 0), bmoe::ConfigError);
  CHECK_NOTHROW(bmoe::generate(TaskKind::sort, 1, 16, 17, 0));
  CHECK_THROWS_AS(bmoe::generate(TaskKind::copy, 1, 8, 1, 0), bmoe::ConfigError);
  CHECK_THROWS_AS(bmoe::generate(TaskKind::copy, 1, 0, 32, 0), bmoe::ConfigError);
  CHECK_THROWS_AS(bmoe::generate_mixture(4, 16, 16, 0), bmoe::ConfigError);
  CHECK_THROWS_AS(bmoe::task_from_name("shuffle"), bmoe::ConfigError);
  CHECK(bmoe::task_from_name("arith") == TaskKind::arith);
}

TEST_CASE("packing layout and training view") {
  TaskSample s{TaskKind::reverse, {5, 3, 7}, {7, 3, 5}};
  const auto packed = bmoe::pack_sample(s);
  CHECK(packed == std::vector<int>{5, 3, 7, 0, 7, 3, 5});

  const auto pair = bmoe::training_pair(s);
  CHECK(pair.tokens == std::vector<int>{5, 3, 7, 0, 7, 3});
  CHECK(pair.labels == std::vector<int>{bmoe::kIgnoreId, bmoe::kIgnoreId,
                                        bmoe::kIgnoreId, 7, 3, 5});

  // counted positions equal seq_len for every task
  for (const auto& sample : bmoe::generate_mixture(20, 9, 32, 5)) {
    const auto p = bmoe::training_pair(sample);
    REQUIRE(p.tokens.size() == 18);
    REQUIRE(p.labels.size() == 18);
    int counted = 0;
    for (size_t i = 0; i < p.labels.size(); ++i) {
      if (p.labels[i] == bmoe::kIgnoreId) continue;
      ++counted;
      CHECK(p.labels[i] == sample.target[i - 9]);
    }
    CHECK(counted == 9);
  }
}

TEST_CASE("mixture balances and shuffles tasks") {
  auto data = bmoe::generate_mixture(102, 10, 32, 9);
  REQUIRE(data.size() == 102);
  int counts[4] = {0, 0, 0, 0};
  for (const auto& s : data) {
    counts[static_cast<int>(s.task)]++;
    check_sample(s, 10, 32);
  }
  // 102 = 4*25 + 2: first two kinds in declaration order get the remainder
  CHECK(counts[0] == 26);
  CHECK(counts[1] == 26);
  CHECK(counts[2] == 25);
  CHECK(counts[3] == 25);

  // order is interleaved, not block-contiguous
  int switches = 0;
  for (size_t i = 1; i < data.size(); ++i)
    switches += data[i].task != data[i - 1].task;
  CHECK(switches > 20);

  auto again = bmoe::generate_mixture(102, 10, 32, 9);
  bool identical = true;
  for (size_t i = 0; i < data.size(); ++i)
    identical = identical && data[i].task == again[i].task &&
                data[i].input == again[i].input;
  CHECK(identical);
}
