#include "bimag/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace bimag {

using ad::Matrix;

void TrainConfig::validate() const {
  if (steps <= 0) throw std::invalid_argument("TrainConfig: steps must be > 0");
  if (batch <= 0) throw std::invalid_argument("TrainConfig: batch must be > 0");
  if (!(lr_min >= 0.0) || !(lr_max > lr_min)) throw std::invalid_argument("TrainConfig: need lr_max > lr_min >= 0");
  if (weight_decay < 0.0) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("TrainConfig: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("TrainConfig: eps must be > 0");
  if (eval_every <= 0) throw std::invalid_argument("TrainConfig: eval_every must be > 0");
  if (max_val_samples < 0) throw std::invalid_argument("TrainConfig: max_val_samples must be >= 0");
}

Json to_json(const TrainConfig& c) {
  return Json{{"steps", c.steps},          {"batch", c.batch},
              {"lr_max", c.lr_max},        {"lr_min", c.lr_min},
              {"weight_decay", c.weight_decay}, {"betas", {c.beta1, c.beta2}},
              {"eps", c.eps},              {"seed", c.seed},
              {"eval_every", c.eval_every}, {"augment", c.augment},
              {"max_val_samples", c.max_val_samples}};
}

TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.lr_max = j.value("lr_max", c.lr_max);
  c.lr_min = j.value("lr_min", c.lr_min);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (j.contains("betas")) {
    c.beta1 = j.at("betas").at(0).get<double>();
    c.beta2 = j.at("betas").at(1).get<double>();
  }
  c.eps = j.value("eps", c.eps);
  c.seed = j.value("seed", c.seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.augment = j.value("augment", c.augment);
  c.max_val_samples = j.value("max_val_samples", c.max_val_samples);
  c.validate();
  return c;
}

double cosine_lr(int step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.steps) throw std::out_of_range("cosine_lr: step outside [0, steps]");
  const double frac = static_cast<double>(step) / static_cast<double>(cfg.steps);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

AdamState make_adam_state(const ParamSet& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    s.v.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  }
  return s;
}

bool optimizer_step(ParamSet& params, const std::vector<Matrix>& grads, AdamState& st, double lr,
                    const TrainConfig& cfg) {
  const auto n = static_cast<std::size_t>(params.size());
  if (grads.size() != n || st.m.size() != n || st.v.size() != n) {
    throw std::invalid_argument("optimizer_step: parameter, gradient and moment counts differ");
  }
  for (std::size_t i = 0; i < n; ++i) {
    const Matrix& p = params[static_cast<int>(i)].value;
    if (grads[i].rows() != p.rows() || grads[i].cols() != p.cols()) {
      throw std::invalid_argument("optimizer_step: gradient shape mismatch for " + params[static_cast<int>(i)].name);
    }
    if (!grads[i].allFinite()) {
      ++st.skipped;
      return false;
    }
  }
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < n; ++i) {
    Matrix& p = params[static_cast<int>(i)].value;
    const Matrix& g = grads[i];
    p *= 1.0 - lr * cfg.weight_decay;
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    p.array() -= lr * (st.m[i].array() / bc1) / ((st.v[i].array() / bc2).sqrt() + cfg.eps);
  }
  return true;
}

// ---------------------------------------------------------------------------
// Samples

SampleSet::SampleSet(std::span<const EpisodeRecord* const> episodes, const NormStats& stats, bool with_grids)
    : with_grids_(with_grids) {
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const EpisodeRecord& ep = *episodes[e];
    for (int t = kHistory - 1; t <= ep.length() - kChunk; ++t) {
      TrainingSample s = make_sample(ep, t, stats);
      for (auto& o : s.obs_history) o.grid.reset();
      samples_.push_back(std::move(s));
      episode_of_.push_back(e);
    }
    if (!with_grids_) continue;
    const WorkspaceSpec ws = build_workspace(ep.task);
    std::vector<std::vector<std::uint8_t>> frames;
    frames.reserve(ep.frames.size());
    for (const Frame& f : ep.frames) {
      const std::vector<double> g = f.obs.grid ? *f.obs.grid : rasterize(frame_sim_state(f), ws);
      std::vector<std::uint8_t> bits(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (g[i] != 0.0 && g[i] != 1.0) throw std::invalid_argument("SampleSet: grids must be binary");
        bits[i] = g[i] != 0.0 ? 1 : 0;
      }
      frames.push_back(std::move(bits));
    }
    grids_.push_back(std::move(frames));
  }
}

TrainingSample SampleSet::get(std::size_t i, Rng* augment_rng, const AugmentParams& p) const {
  TrainingSample s = samples_.at(i);
  if (!with_grids_) return s;
  PhotometricDraw draw;
  if (augment_rng) draw = draw_photometric(*augment_rng, p);
  const auto& frames = grids_[episode_of_[i]];
  for (int k = 0; k < kHistory; ++k) {
    const auto& bits = frames[static_cast<std::size_t>(s.t - kHistory + 1 + k)];
    std::vector<double> g(bits.begin(), bits.end());
    if (!draw.identity()) apply_photometric(g, draw.brightness, draw.contrast);
    s.obs_history[static_cast<std::size_t>(k)].grid = std::move(g);
  }
  return s;
}

EvalSummary evaluate_samples(const Policy& policy, const SampleSet& set, std::size_t limit) {
  const std::size_t n = limit == 0 ? set.size() : std::min(limit, set.size());
  EvalSummary r;
  long correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const TrainingSample s = set.get(i);
    const ForwardOutput out = policy.forward(s, /*teacher_phase=*/true);
    const LossBreakdown l =
        compute_loss(out.chunk, s.chunk, out.phase.logits, static_cast<int>(s.phase), policy.config());
    r.loss += l.total;
    r.loss_action += l.action;
    r.loss_phase += l.phase;
    if (out.phase.predicted == s.phase) ++correct;
  }
  r.n = static_cast<long>(n);
  if (n > 0) {
    r.loss /= static_cast<double>(n);
    r.loss_action /= static_cast<double>(n);
    r.loss_phase /= static_cast<double>(n);
    r.phase_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  }
  return r;
}

namespace {

Json summary_json(const EvalSummary& s) {
  return Json{{"loss", s.loss},
              {"loss_action", s.loss_action},
              {"loss_phase", s.loss_phase},
              {"phase_accuracy", s.phase_accuracy},
              {"n", s.n}};
}

void check_stats_match(const Dataset& ds) {
  const auto train = ds.split(Split::Train);
  if (train.empty()) throw std::invalid_argument("train_loop: dataset has no train episodes");
  const NormStats ref = compute_norm_stats(train);
  const double tol = 1e-9;
  const bool ok = ((ref.mean - ds.stats.mean).array().abs() <= tol * (1.0 + ref.mean.array().abs())).all() &&
                  ((ref.std - ds.stats.std).array().abs() <= tol * (1.0 + ref.std.array().abs())).all();
  if (!ok) throw std::invalid_argument("train_loop: dataset stats do not match its train split");
}

}  // namespace

TrainResult train_loop(const Dataset& ds, const ModelConfig& mcfg, const TrainConfig& tcfg,
                       const TrainOptions& opts) {
  tcfg.validate();
  mcfg.validate();
  check_stats_match(ds);

  const SampleSet train(ds.split(Split::Train), ds.stats, mcfg.use_grid);
  if (train.size() == 0) throw std::invalid_argument("train_loop: train split yields no samples");
  const SampleSet val(ds.split(Split::Val), ds.stats, mcfg.use_grid);
  const auto val_limit = static_cast<std::size_t>(tcfg.max_val_samples);

  TrainResult result{Policy(mcfg), Policy(mcfg), -1, 0.0, {}, {}, 0, {}, {}, {}};
  Policy& policy = result.last;
  AdamState adam = make_adam_state(policy.params());
  if (opts.evaluate_train_set) result.initial_train = evaluate_samples(policy, train);

  std::ostringstream log;
  auto emit = [&](const Json& rec) {
    log << rec.dump() << '\n';
    if (opts.on_log) opts.on_log(rec);
  };

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  std::uint64_t epoch = 0;
  Rng aug_rng = make_rng(tcfg.seed, 0xA06);

  const double w = 1.0 / static_cast<double>(tcfg.batch);
  for (int step = 0; step < tcfg.steps; ++step) {
    const double lr = cosine_lr(step, tcfg);
    std::vector<Matrix> grads = policy.zero_grads();
    LossBreakdown acc;
    for (int b = 0; b < tcfg.batch; ++b) {
      if (cursor == order.size()) {
        Rng shuffle_rng = make_rng(tcfg.seed, 0xE90C00 + epoch++);
        shuffle(order, shuffle_rng);
        cursor = 0;
      }
      const TrainingSample s = train.get(order[cursor++], tcfg.augment ? &aug_rng : nullptr, tcfg.augment_params);
      const LossBreakdown l = policy.loss_and_grad(s, &grads, w);
      acc.total += l.total * w;
      acc.action += l.action * w;
      acc.phase += l.phase * w;
    }
    const bool applied = optimizer_step(policy.params(), grads, adam, lr, tcfg);

    Json rec{{"step", step}, {"lr", lr}, {"loss", acc.total}, {"loss_action", acc.action}, {"loss_phase", acc.phase}};
    if (!applied) rec["skipped"] = true;
    const bool eval_now = (step + 1) % tcfg.eval_every == 0 || step + 1 == tcfg.steps;
    if (eval_now && val.size() > 0) {
      const EvalSummary v = evaluate_samples(policy, val, val_limit);
      rec["val"] = summary_json(v);
      if (result.best_step < 0 || v.loss < result.best_val_loss) {
        result.best_val_loss = v.loss;
        result.best_step = step + 1;
        result.best = policy;
      }
    }
    emit(rec);
  }
  if (val.size() == 0) {
    result.best = policy;
    result.best_step = tcfg.steps;
  }
  result.skipped_steps = adam.skipped;
  if (opts.evaluate_train_set) result.final_train = evaluate_samples(policy, train);

  if (opts.out_dir) {
    const auto& dir = *opts.out_dir;
    result.best_checkpoint = dir / "best.ckpt.json";
    result.last_checkpoint = dir / "last.ckpt.json";
    result.log_path = dir / "train_log.jsonl";
    save_checkpoint(*result.best_checkpoint, result.best, ds.stats);
    save_checkpoint(*result.last_checkpoint, result.last, ds.stats);
    write_text_file(*result.log_path, log.str());
    Json summary{{"model_config", to_json(mcfg)},
                 {"train_config", to_json(tcfg)},
                 {"best_step", result.best_step},
                 {"best_val_loss", result.best_val_loss},
                 {"skipped_steps", result.skipped_steps},
                 {"train_samples", train.size()},
                 {"val_samples", val.size()}};
    if (opts.evaluate_train_set) {
      summary["initial_train"] = summary_json(result.initial_train);
      summary["final_train"] = summary_json(result.final_train);
    }
    write_text_file(dir / "train_summary.json", summary.dump(2) + "\n");
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gradient check

Json to_json(const GradCheckReport& r) {
  Json groups = Json::array();
  for (const auto& g : r.groups) {
    groups.push_back(Json{{"name", g.name},
                          {"entries", g.entries},
                          {"max_rel_error", g.max_rel_error},
                          {"max_abs_error", g.max_abs_error}});
  }
  return Json{{"passed", r.passed()},
              {"max_rel_error", r.max_rel_error},
              {"worst_group", r.worst_group},
              {"tolerance", r.tolerance},
              {"step", r.step},
              {"entries", r.entries},
              {"groups_checked", r.groups.size()},
              {"groups_total", r.total_groups},
              {"nudged_targets", r.nudged_targets},
              {"groups", groups}};
}

ModelConfig tiny_model_config(std::uint64_t seed) {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 4;
  c.ffn_hidden = 32;
  c.phase_hidden = 16;
  c.encoder_layers = 2;
  c.use_grid = true;
  c.seed = seed;
  return c;
}

GradCheckReport grad_check(const ModelConfig& cfg, TrainingSample sample, double step, double tolerance) {
  constexpr double kRelFloor = 1e-6;
  constexpr double kKinkMargin = 1e-2;

  Policy policy(cfg);
  ParamSet& ps = policy.params();
  {
    Rng rng = make_rng(cfg.seed, 0x6C4EC);
    for (const char* name : {"decoder.output.w", "decoder.output.b"}) {
      Matrix& m = ps[ps.index(name)].value;
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 0.5 * standard_normal(rng);
    }
  }

  GradCheckReport report;
  report.step = step;
  report.tolerance = tolerance;
  report.total_groups = ps.size();

  // Keep every residual away from |e| = beta so the loss is smooth around the
  // evaluation point.
  const ForwardOutput fwd = policy.forward(sample, true);
  for (Eigen::Index i = 0; i < sample.chunk.size(); ++i) {
    const double e = fwd.chunk.data()[i] - sample.chunk.data()[i];
    if (std::abs(std::abs(e) - cfg.beta) < kKinkMargin) {
      const double sign = e >= 0.0 ? 1.0 : -1.0;
      const double moved = std::abs(e) >= cfg.beta ? cfg.beta + 2.0 * kKinkMargin : cfg.beta - 2.0 * kKinkMargin;
      sample.chunk.data()[i] = fwd.chunk.data()[i] - sign * moved;
      ++report.nudged_targets;
    }
  }

  std::vector<Matrix> analytic = policy.zero_grads();
  policy.loss_and_grad(sample, &analytic);

  for (int gi = 0; gi < ps.size(); ++gi) {
    GradCheckGroup group;
    group.name = ps[gi].name;
    Matrix& value = ps[gi].value;
    for (Eigen::Index i = 0; i < value.size(); ++i) {
      const double saved = value.data()[i];
      value.data()[i] = saved + step;
      const double up = policy.loss_and_grad(sample, nullptr).total;
      value.data()[i] = saved - step;
      const double down = policy.loss_and_grad(sample, nullptr).total;
      value.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[static_cast<std::size_t>(gi)].data()[i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), kRelFloor});
      group.max_abs_error = std::max(group.max_abs_error, abs_err);
      group.max_rel_error = std::max(group.max_rel_error, rel);
      ++group.entries;
    }
    report.entries += group.entries;
    if (group.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = group.max_rel_error;
      report.worst_group = group.name;
    }
    report.groups.push_back(group);
  }
  return report;
}

}  // namespace bimag
