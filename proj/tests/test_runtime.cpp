#include "bimag/runtime.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>

using namespace bimag;

namespace {

ChunkMatrix random_chunk(Rng& rng, double scale = 10.0) {
  ChunkMatrix c(kChunk, kActionDim);
  for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = uniform(rng, -scale, scale);
  return c;
}

oracle::StoredChunk to_oracle(long t_r, const ChunkMatrix& c) {
  oracle::StoredChunk s{t_r, {}};
  for (int k = 0; k < c.rows(); ++k) s.rows.push_back({c(k, 0), c(k, 1), c(k, 2), c(k, 3)});
  return s;
}

}  // namespace

TEST_CASE("chunk buffer push validation") {
  ChunkBuffer b;
  Rng rng = make_rng(1);
  b.push(3, random_chunk(rng));
  CHECK_THROWS(b.push(3, random_chunk(rng)));
  CHECK_THROWS(b.push(2, random_chunk(rng)));
  CHECK_THROWS(b.push(4, ChunkMatrix::Zero(4, kActionDim)));
  ChunkMatrix bad = random_chunk(rng);
  bad(2, 1) = NAN;
  CHECK_THROWS(b.push(4, bad));
  CHECK_THROWS(ChunkBuffer(-0.1));
  CHECK_THROWS(ChunkBuffer(0.01, 0));
}

TEST_CASE("empty buffer has no action") {
  ChunkBuffer b;
  CHECK_THROWS_AS(b.ensemble(0), NoActionError);
  CHECK(b.weight_mass(0) == 0.0);
  CHECK(b.active(0) == 0);
  Rng rng = make_rng(2);
  b.push(10, random_chunk(rng));
  CHECK_THROWS_AS(b.ensemble(9), NoActionError);
  CHECK_THROWS_AS(b.ensemble(15), NoActionError);
}

TEST_CASE("prune boundary") {
  ChunkBuffer b;
  Rng rng = make_rng(3);
  b.push(0, random_chunk(rng));
  b.prune(4);
  CHECK(b.size() == 1);
  CHECK(b.active(4) == 1);
  b.prune(5);
  CHECK(b.empty());
}

TEST_CASE("single chunk is replayed exactly") {
  ChunkBuffer b;
  Rng rng = make_rng(4);
  const ChunkMatrix c = random_chunk(rng);
  b.push(7, c);
  for (int i = 0; i < kChunk; ++i) CHECK(b.ensemble(7 + i) == c.row(i).transpose());
}

TEST_CASE("consistent chunks reproduce the shared trajectory") {
  Rng rng = make_rng(5);
  std::vector<Vec4> path(40);
  for (auto& a : path) a = Vec4(uniform(rng, -5, 5), uniform(rng, -5, 5), uniform(rng, -5, 5), uniform(rng, -5, 5));
  ChunkBuffer b;
  for (long t = 0; t + kChunk <= 40; ++t) {
    ChunkMatrix c(kChunk, kActionDim);
    for (int i = 0; i < kChunk; ++i) c.row(i) = path[static_cast<size_t>(t + i)].transpose();
    b.push(t, c);
    b.prune(t);
    CHECK(b.ensemble(t) == path[static_cast<size_t>(t)]);
    CHECK(b.size() <= static_cast<size_t>(kChunk));
  }
}

TEST_CASE("two-chunk weighting") {
  Rng rng = make_rng(6);
  const ChunkMatrix c0 = random_chunk(rng), c1 = random_chunk(rng);
  ChunkBuffer b(0.01);
  b.push(0, c0);
  b.push(1, c1);
  const double w2 = std::exp(-0.02), w1 = std::exp(-0.01);
  const Vec4 expected = (w2 * c0.row(2).transpose() + w1 * c1.row(1).transpose()) / (w2 + w1);
  CHECK((b.ensemble(2) - expected).norm() < 1e-12);
  CHECK(b.weight_mass(2) == doctest::Approx(w1 + w2).epsilon(1e-15));
  CHECK(b.active(2) == 2);
  ChunkBuffer flat(0.0);
  flat.push(0, c0);
  flat.push(1, c1);
  CHECK((flat.ensemble(2) - 0.5 * (c0.row(2) + c1.row(1)).transpose()).norm() < 1e-12);
}

TEST_CASE("ensembling matches the reference on random schedules") {
  Rng rng = make_rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const double decay = uniform(rng, 0.0, 0.5);
    ChunkBuffer b(decay);
    std::vector<oracle::StoredChunk> all;
    long t_r = 0;
    for (int n = 0; n < 30; ++n) {
      t_r += 1 + static_cast<long>(uniform_index(rng, 3));
      const ChunkMatrix c = random_chunk(rng, 20.0);
      b.push(t_r, c);
      all.push_back(to_oracle(t_r, c));
      for (long t = t_r; t < t_r + 3; ++t) {
        const auto ref = oracle::ensemble(all, t, decay, kChunk);
        if (!ref) {
          CHECK_THROWS_AS(b.ensemble(t), NoActionError);
          continue;
        }
        const Vec4 got = b.ensemble(t);
        for (int d = 0; d < 4; ++d) REQUIRE(std::abs(got[d] - (*ref)[d]) < 1e-9);
        // convex combination of the aligned rows
        for (int d = 0; d < 4; ++d) {
          double lo = 1e300, hi = -1e300;
          for (const auto& c : all) {
            const long i = t - c.issued;
            if (i < 0 || i >= kChunk) continue;
            lo = std::min(lo, c.rows[i][d]);
            hi = std::max(hi, c.rows[i][d]);
          }
          REQUIRE(got[d] >= lo - 1e-12);
          REQUIRE(got[d] <= hi + 1e-12);
        }
      }
      b.prune(t_r);
      REQUIRE(b.size() <= static_cast<size_t>(kChunk));
    }
  }
}

TEST_CASE("rollout config validation") {
  RolloutConfig c;
  CHECK_NOTHROW(c.validate());
  c.replan_every = 0;
  CHECK_THROWS(c.validate());
  c.replan_every = kChunk + 1;
  CHECK_THROWS(c.validate());
  c = RolloutConfig{};
  c.max_steps = 0;
  CHECK_THROWS(c.validate());
}

TEST_CASE("zero output head with zero-mean stats holds still") {
  const Policy p(ModelConfig{});
  NormStats stats;  // mean 0, std 1
  RolloutConfig cfg;
  cfg.max_steps = 20;
  PolicyController ctl(p, stats, cfg);
  const RolloutResult r = run_rollout(ctl, TaskId::A, 0, 5, SimConfig{}, cfg);
  REQUIRE_FALSE(r.crashed);
  REQUIRE(r.steps.size() == 20);
  for (const auto& s : r.steps) {
    CHECK(s.command == Vec4::Zero());
    CHECK(s.action == Vec4::Zero());
    CHECK((s.state.arms - r.steps.front().state.arms).norm() == 0.0);
  }
  // warm-up: the first plan waits for a full history
  for (int t = 0; t < kHistory - 1; ++t) {
    CHECK(r.steps[static_cast<size_t>(t)].held);
    CHECK_FALSE(r.steps[static_cast<size_t>(t)].pushed.has_value());
  }
  CHECK(r.steps[kHistory - 1].pushed.has_value());
  CHECK_FALSE(r.steps[kHistory - 1].held);
}

TEST_CASE("policy rollouts ensemble every pushed chunk") {
  Policy p(ModelConfig{});
  testutil::perturb(p, 0.05, 11);
  const NormStats& stats = testutil::tiny_dataset().stats;
  RolloutConfig cfg;
  cfg.max_steps = 30;
  PolicyController ctl(p, stats, cfg);
  const RolloutResult r = run_rollout(ctl, TaskId::B, prompt_bank().prompts_for(TaskId::B)[0], 9, SimConfig{}, cfg);
  REQUIRE_FALSE(r.crashed);
  std::vector<oracle::StoredChunk> pushed;
  for (const auto& s : r.steps) {
    if (s.pushed) pushed.push_back(to_oracle(s.pushed->t_r, s.pushed->chunk));
    const auto ref = oracle::ensemble(pushed, s.t, cfg.decay, kChunk);
    if (!ref) {
      CHECK(s.held);
      continue;
    }
    for (int d = 0; d < 4; ++d) CHECK(std::abs(s.command[d] - (*ref)[d]) < 1e-9);
    CHECK(s.active_chunks <= kChunk);
    CHECK((s.action - clip_action(s.command, SimConfig{})).norm() == 0.0);
  }
}

TEST_CASE("open-loop execution replays each chunk") {
  Policy p(ModelConfig{});
  testutil::perturb(p, 0.05, 12);
  const NormStats& stats = testutil::tiny_dataset().stats;
  RolloutConfig cfg;
  cfg.max_steps = 33;
  cfg.replan_every = kChunk;
  cfg.clear_on_replan = true;
  PolicyController ctl(p, stats, cfg);
  const RolloutResult r = run_rollout(ctl, TaskId::A, 0, 4, SimConfig{}, cfg);
  REQUIRE_FALSE(r.crashed);
  const ChunkMatrix* current = nullptr;
  long issued = 0;
  for (const auto& s : r.steps) {
    if (s.t < kHistory - 1) continue;
    CHECK(((s.t - (kHistory - 1)) % kChunk == 0) == s.pushed.has_value());
    if (s.pushed) {
      current = &s.pushed->chunk;
      issued = s.t;
    }
    REQUIRE(current);
    CHECK(s.active_chunks == 1);
    CHECK((s.command - current->row(s.t - issued).transpose()).norm() == 0.0);
  }
}

TEST_CASE("no warm-up hold plans from the first step") {
  Policy p(ModelConfig{});
  testutil::perturb(p, 0.05, 13);
  RolloutConfig cfg;
  cfg.max_steps = 5;
  cfg.warmup_hold = false;
  PolicyController ctl(p, testutil::tiny_dataset().stats, cfg);
  const RolloutResult r = run_rollout(ctl, TaskId::A, 0, 4, SimConfig{}, cfg);
  for (const auto& s : r.steps) {
    CHECK(s.pushed.has_value());
    CHECK_FALSE(s.held);
  }
}

TEST_CASE("rollouts are deterministic") {
  Policy p(ModelConfig{});
  testutil::perturb(p, 0.05, 14);
  RolloutConfig cfg;
  cfg.max_steps = 40;
  auto once = [&] {
    PolicyController ctl(p, testutil::tiny_dataset().stats, cfg);
    return trajectory_to_jsonl(run_rollout(ctl, TaskId::C, 60, 21, SimConfig{}, cfg), cfg);
  };
  CHECK(once() == once());
}

TEST_CASE("expert controller completes a task and the runner stops") {
  ExpertController ctl;
  RolloutConfig cfg;
  RolloutRunner runner(ctl, TaskId::A, 0, 3, SimConfig{}, cfg);
  int n = 0;
  while (runner.step()) ++n;
  CHECK(runner.done());
  CHECK(runner.step() == nullptr);
  CHECK(runner.result().success.transport_done);
  CHECK(n == static_cast<int>(runner.result().steps.size()));
  CHECK(n < cfg.max_steps);

  ZeroController zero;
  cfg.max_steps = 12;
  const RolloutResult z = run_rollout(zero, TaskId::A, 0, 3, SimConfig{}, cfg);
  CHECK(z.steps.size() == 12);
  CHECK_FALSE(z.success.transport_done);
}
