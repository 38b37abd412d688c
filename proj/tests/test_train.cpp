#include "bimag/train.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

using namespace bimag;

namespace {

ParamSet single(double value) {
  ParamSet p;
  ad::Matrix m(1, 1);
  m(0, 0) = value;
  p.add("w", m);
  return p;
}

std::vector<ad::Matrix> grad_of(double g) {
  ad::Matrix m(1, 1);
  m(0, 0) = g;
  return {m};
}

TrainConfig quick_config() {
  TrainConfig c;
  c.steps = 12;
  c.batch = 4;
  c.eval_every = 6;
  c.max_val_samples = 20;
  return c;
}

}  // namespace

TEST_CASE("cosine schedule") {
  TrainConfig c;
  c.steps = 100;
  c.lr_max = 1e-3;
  c.lr_min = 1e-5;
  CHECK(cosine_lr(0, c) == doctest::Approx(1e-3).epsilon(1e-15));
  CHECK(cosine_lr(100, c) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(cosine_lr(50, c) == doctest::Approx(0.5 * (1e-3 + 1e-5)).epsilon(1e-12));
  CHECK(cosine_lr(25, c) == doctest::Approx(1e-5 + 0.5 * (1e-3 - 1e-5) * (1 + std::cos(std::numbers::pi / 4))));
  for (int s = 1; s <= 100; ++s) CHECK(cosine_lr(s, c) <= cosine_lr(s - 1, c));
  CHECK_THROWS(cosine_lr(101, c));
  CHECK_THROWS(cosine_lr(-1, c));
}

TEST_CASE("AdamW with a zero gradient only decays") {
  TrainConfig c;
  c.weight_decay = 0.01;
  ParamSet p = single(2.0);
  AdamState st = make_adam_state(p);
  CHECK(optimizer_step(p, grad_of(0.0), st, 1.0, c));
  CHECK(p[0].value(0, 0) == doctest::Approx(2.0 * 0.99).epsilon(1e-15));
  c.weight_decay = 0.0;
  ParamSet q = single(2.0);
  AdamState sq = make_adam_state(q);
  CHECK(optimizer_step(q, grad_of(0.0), sq, 1.0, c));
  CHECK(q[0].value(0, 0) == 2.0);
}

TEST_CASE("AdamW matches a hand computation over two steps") {
  TrainConfig c;
  c.weight_decay = 0.1;
  const double lr = 0.01;
  ParamSet p = single(1.0);
  AdamState st = make_adam_state(p);

  double w = 1.0, m = 0.0, v = 0.0;
  const double gs[2] = {0.5, -2.0};
  for (int k = 0; k < 2; ++k) {
    const double g = gs[k];
    REQUIRE(optimizer_step(p, grad_of(g), st, lr, c));
    w *= 1.0 - lr * 0.1;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, k + 1));
    const double vh = v / (1.0 - std::pow(0.999, k + 1));
    w -= lr * mh / (std::sqrt(vh) + 1e-8);
    CHECK(p[0].value(0, 0) == doctest::Approx(w).epsilon(1e-14));
  }
  CHECK(st.t == 2);
}

TEST_CASE("non-finite gradients skip the step") {
  TrainConfig c;
  ParamSet p = single(1.0);
  AdamState st = make_adam_state(p);
  CHECK_FALSE(optimizer_step(p, grad_of(NAN), st, 0.01, c));
  CHECK(p[0].value(0, 0) == 1.0);
  CHECK(st.t == 0);
  CHECK(st.skipped == 1);
  CHECK(st.m[0](0, 0) == 0.0);
  CHECK_THROWS(optimizer_step(p, {}, st, 0.01, c));
}

TEST_CASE("phase head gets no gradient when its loss weight is zero") {
  ModelConfig cfg = tiny_model_config(2);
  cfg.lambda_phase = 0.0;
  Policy p(cfg);
  testutil::perturb(p, 0.05, 3);
  auto grads = p.zero_grads();
  p.loss_and_grad(testutil::grid_sample(), &grads);
  double phase_head = 0.0, rest = 0.0;
  for (int i = 0; i < p.params().size(); ++i) {
    const double n = grads[static_cast<size_t>(i)].squaredNorm();
    if (p.params()[i].name.starts_with("phase_head.")) phase_head += n;
    else rest += n;
  }
  CHECK(phase_head == 0.0);
  CHECK(rest > 0.0);
}

TEST_CASE("sample set expands grids like attach_grids") {
  const Dataset& ds = testutil::tiny_dataset();
  const auto train = ds.split(Split::Train);
  const SampleSet set(train, ds.stats, true);
  CHECK(set.size() == make_samples(train, ds.stats).size());
  const TrainingSample got = set.get(5);
  TrainingSample ref = make_sample(*train.front(), kHistory - 1 + 5, ds.stats);
  attach_grids(ref, *train.front(), build_workspace(train.front()->task));
  REQUIRE(got.obs_history.size() == ref.obs_history.size());
  for (size_t k = 0; k < got.obs_history.size(); ++k) CHECK(*got.obs_history[k].grid == *ref.obs_history[k].grid);
  CHECK(got.chunk == ref.chunk);
  Rng rng = make_rng(1);
  const TrainingSample aug = set.get(5, &rng);
  CHECK(aug.chunk == ref.chunk);
  CHECK(aug.obs_history[0].features == ref.obs_history[0].features);
}

TEST_CASE("training is deterministic and lowers the loss") {
  const Dataset& ds = testutil::tiny_dataset();
  const ModelConfig m = tiny_model_config();
  TrainConfig t = quick_config();
  t.lr_max = 3e-3;
  const TrainResult a = train_loop(ds, m, t);
  const TrainResult b = train_loop(ds, m, t);
  for (int i = 0; i < a.last.params().size(); ++i) REQUIRE(a.last.params()[i].value == b.last.params()[i].value);
  CHECK(a.best_step == b.best_step);
  CHECK(a.final_train.loss < a.initial_train.loss);
  CHECK(a.skipped_steps == 0);
  t.seed = 1;
  const TrainResult c = train_loop(ds, m, t);
  bool differs = false;
  for (int i = 0; i < a.last.params().size(); ++i) differs |= a.last.params()[i].value != c.last.params()[i].value;
  CHECK(differs);
}

TEST_CASE("training writes checkpoints and a log") {
  const auto dir = std::filesystem::temp_directory_path() / "bimag_test_train";
  std::filesystem::remove_all(dir);
  TrainOptions opts;
  opts.out_dir = dir;
  int logs = 0;
  opts.on_log = [&](const Json&) { ++logs; };
  const TrainResult r = train_loop(testutil::tiny_dataset(), tiny_model_config(), quick_config(), opts);
  REQUIRE(r.best_checkpoint);
  REQUIRE(r.last_checkpoint);
  CHECK(std::filesystem::exists(*r.best_checkpoint));
  CHECK(std::filesystem::exists(*r.last_checkpoint));
  CHECK(std::filesystem::exists(*r.log_path));
  CHECK(logs > 0);
  const Checkpoint best = load_checkpoint(*r.best_checkpoint, tiny_model_config());
  for (int i = 0; i < best.policy.params().size(); ++i) CHECK(best.policy.params()[i].value == r.best.params()[i].value);
}

TEST_CASE("training rejects stats that do not come from the train split") {
  Dataset ds = testutil::tiny_dataset();
  ds.stats.mean[0] += 1.0;
  CHECK_THROWS(train_loop(ds, tiny_model_config(), quick_config()));
}

TEST_CASE("train config validation and json") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  const TrainConfig back = train_config_from_json(to_json(c));
  CHECK(back.steps == c.steps);
  CHECK(back.lr_max == c.lr_max);
  CHECK(back.batch == c.batch);
  c.batch = 0;
  CHECK_THROWS(c.validate());
  c = TrainConfig{};
  c.lr_max = -1.0;
  CHECK_THROWS(c.validate());
}

TEST_CASE("teacher-forced evaluation") {
  const Dataset& ds = testutil::tiny_dataset();
  const SampleSet set(ds.split(Split::Val), ds.stats, true);
  const Policy p(tiny_model_config());
  const EvalSummary e = evaluate_samples(p, set, 10);
  CHECK(e.n == 10);
  CHECK(e.phase_accuracy >= 0.0);
  CHECK(e.phase_accuracy <= 1.0);
  CHECK(e.loss == doctest::Approx(e.loss_action + 0.1 * e.loss_phase));
  CHECK(evaluate_samples(p, set).n == static_cast<long>(set.size()));
}
