#include "bimag/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace bimag {

namespace {

void check_batch(std::span<const ChunkMatrix> preds, std::span<const ChunkMatrix> gts, const char* op) {
  if (preds.size() != gts.size()) throw std::invalid_argument(std::string(op) + ": prediction and target counts differ");
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].rows() != gts[i].rows() || preds[i].cols() != kActionDim || gts[i].cols() != kActionDim) {
      throw std::invalid_argument(std::string(op) + ": chunk shape mismatch at sample " + std::to_string(i));
    }
  }
}

Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

}  // namespace

RmseResult rmse_report(std::span<const ChunkMatrix> preds, std::span<const ChunkMatrix> gts,
                       std::span<const Phase> phases, const NormStats& stats) {
  check_batch(preds, gts, "rmse_report");
  if (phases.size() != preds.size()) throw std::invalid_argument("rmse_report: one phase label per sample expected");
  if (preds.empty()) throw std::invalid_argument("rmse_report: empty batch");

  double total = 0.0;
  long n_total = 0;
  std::array<double, 2> by_phase{};
  std::array<long, 2> n_phase{};
  std::array<double, 4> axis{};
  long n_rows = 0;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    const ChunkMatrix diff = denormalize_chunk(preds[s], stats) - denormalize_chunk(gts[s], stats);
    const double sq = diff.squaredNorm();
    total += sq;
    n_total += diff.size();
    const auto p = static_cast<std::size_t>(phases[s]);
    by_phase[p] += sq;
    n_phase[p] += diff.size();
    for (int d = 0; d < kActionDim; ++d) axis[static_cast<std::size_t>(d)] += diff.col(d).squaredNorm();
    n_rows += diff.rows();
  }
  RmseResult r;
  r.overall = std::sqrt(total / static_cast<double>(n_total));
  if (n_phase[0] > 0) r.approach = std::sqrt(by_phase[0] / static_cast<double>(n_phase[0]));
  if (n_phase[1] > 0) r.transport = std::sqrt(by_phase[1] / static_cast<double>(n_phase[1]));
  for (std::size_t d = 0; d < 4; ++d) r.per_axis[d] = std::sqrt(axis[d] / static_cast<double>(n_rows));
  return r;
}

EndpointResult endpoint_error(std::span<const ChunkMatrix> preds, std::span<const ChunkMatrix> gts,
                              const NormStats& stats) {
  check_batch(preds, gts, "endpoint_error");
  if (preds.empty()) throw std::invalid_argument("endpoint_error: empty batch");
  std::vector<double> dist;
  dist.reserve(preds.size());
  for (std::size_t s = 0; s < preds.size(); ++s) {
    const Eigen::Index last = preds[s].rows() - 1;
    const Vec4 p = denormalize_action(preds[s].row(last).transpose(), stats);
    const Vec4 g = denormalize_action(gts[s].row(last).transpose(), stats);
    dist.push_back((p - g).norm());
  }
  EndpointResult r;
  double sum = 0.0;
  for (double d : dist) sum += d;
  r.mean = sum / static_cast<double>(dist.size());
  const std::size_t mid = dist.size() / 2;
  std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid), dist.end());
  const double upper = dist[mid];
  if (dist.size() % 2 == 1) {
    r.median = upper;
  } else {
    const double lower = *std::max_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid));
    r.median = 0.5 * (lower + upper);
  }
  return r;
}

DirectionResult direction_metrics(std::span<const ChunkMatrix> preds, std::span<const ChunkMatrix> gts,
                                  const NormStats& stats, double eps) {
  check_batch(preds, gts, "direction_metrics");
  DirectionResult r;
  long positive = 0;
  double cos_sum = 0.0;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    for (Eigen::Index k = 0; k < preds[s].rows(); ++k) {
      const Vec4 g = denormalize_action(gts[s].row(k).transpose(), stats);
      const double gn = g.norm();
      if (!(gn > eps)) continue;
      const Vec4 p = denormalize_action(preds[s].row(k).transpose(), stats);
      const double pn = p.norm();
      const double cos = pn > 0.0 ? p.dot(g) / (pn * gn) : 0.0;
      ++r.n_moving;
      cos_sum += cos;
      if (cos > 0.0) ++positive;
    }
  }
  if (r.n_moving > 0) {
    r.accuracy = static_cast<double>(positive) / static_cast<double>(r.n_moving);
    r.mean_cosine = cos_sum / static_cast<double>(r.n_moving);
  }
  return r;
}

PhaseAccuracyResult phase_accuracy(std::span<const Eigen::Vector2d> logits, std::span<const Phase> labels) {
  if (logits.size() != labels.size()) throw std::invalid_argument("phase_accuracy: one label per logit pair expected");
  std::array<long, 2> correct{};
  std::array<long, 2> count{};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const int label = static_cast<int>(labels[i]);
    if (label != 0 && label != 1) throw std::invalid_argument("phase_accuracy: invalid label");
    ++count[static_cast<std::size_t>(label)];
    if (argmax_phase(logits[i]) == labels[i]) ++correct[static_cast<std::size_t>(label)];
  }
  PhaseAccuracyResult r;
  const long n = count[0] + count[1];
  if (n > 0) r.overall = static_cast<double>(correct[0] + correct[1]) / static_cast<double>(n);
  if (count[0] > 0) r.approach = static_cast<double>(correct[0]) / static_cast<double>(count[0]);
  if (count[1] > 0) r.transport = static_cast<double>(correct[1]) / static_cast<double>(count[1]);
  return r;
}

MetricReport compute_metrics(std::span<const ChunkMatrix> preds, std::span<const ChunkMatrix> gts,
                             std::span<const Phase> phases, std::span<const Eigen::Vector2d> logits,
                             const NormStats& stats) {
  MetricReport m;
  m.rmse = rmse_report(preds, gts, phases, stats);
  m.endpoint = endpoint_error(preds, gts, stats);
  m.direction = direction_metrics(preds, gts, stats);
  m.phase = phase_accuracy(logits, phases);
  m.n_samples = static_cast<long>(preds.size());
  return m;
}

MetricReport evaluate_offline(const Policy& policy, const NormStats& stats, const SampleSet& samples) {
  std::vector<ChunkMatrix> preds, gts;
  std::vector<Phase> phases;
  std::vector<Eigen::Vector2d> logits;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const TrainingSample s = samples.get(i);
    const ForwardOutput out = policy.forward(s, /*teacher_phase=*/false);
    preds.push_back(out.chunk);
    gts.push_back(s.chunk);
    phases.push_back(s.phase);
    logits.push_back(out.phase.logits);
  }
  return compute_metrics(preds, gts, phases, logits, stats);
}

// ---------------------------------------------------------------------------
// Closed loop

const TaskSuccess& SuccessTable::row(TaskId task) const {
  for (const auto& r : rows) {
    if (r.task == task) return r;
  }
  throw std::out_of_range("SuccessTable: no row for task " + task_name(task));
}

std::uint64_t trial_seed(std::uint64_t seed, TaskId task, int trial) {
  return derive_seed(seed, 0x7E57000ULL + 1000ULL * static_cast<std::uint64_t>(task) + static_cast<std::uint64_t>(trial));
}

int trial_prompt(std::uint64_t tseed, TaskId task) {
  const std::vector<int> ids = prompt_bank().prompts_for(task);
  Rng rng = make_rng(tseed, 2);
  return ids[static_cast<std::size_t>(uniform_index(rng, ids.size()))];
}

SuccessTable closed_loop_eval(Controller& controller, std::span<const TaskId> tasks, int n_trials,
                              std::uint64_t seed, const SimConfig& sim, const RolloutConfig& cfg) {
  if (n_trials < 10) throw std::invalid_argument("closed_loop_eval: n_trials must be >= 10");
  SuccessTable table;
  table.controller = controller.name();
  table.seed = seed;
  table.n_trials = n_trials;
  for (TaskId task : tasks) {
    TaskSuccess row;
    row.task = task;
    for (int i = 0; i < n_trials; ++i) {
      TrialLog log;
      log.seed = trial_seed(seed, task, i);
      log.prompt_id = trial_prompt(log.seed, task);
      const RolloutResult r = run_rollout(controller, task, log.prompt_id, log.seed, sim, cfg);
      log.crashed = r.crashed;
      log.approach = !r.crashed && r.success.approach_done;
      log.transport = !r.crashed && r.success.transport_done;
      log.steps = static_cast<int>(r.steps.size());
      log.slips = r.final_state.slips;
      log.error = r.error;
      ++row.n_trials;
      row.approach += log.approach ? 1 : 0;
      row.transport += log.transport ? 1 : 0;
      row.crashed += log.crashed ? 1 : 0;
      row.trials.push_back(std::move(log));
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Reports

Json to_json(const MetricReport& m) {
  return Json{{"rmse_overall", m.rmse.overall},
              {"rmse_approach", optional_json(m.rmse.approach)},
              {"rmse_transport", optional_json(m.rmse.transport)},
              {"endpoint_mean", m.endpoint.mean},
              {"endpoint_median", m.endpoint.median},
              {"rmse_per_axis", m.rmse.per_axis},
              {"direction_accuracy", optional_json(m.direction.accuracy)},
              {"mean_cosine", optional_json(m.direction.mean_cosine)},
              {"phase_acc_overall", optional_json(m.phase.overall)},
              {"phase_acc_approach", optional_json(m.phase.approach)},
              {"phase_acc_transport", optional_json(m.phase.transport)},
              {"n_samples", m.n_samples},
              {"n_moving", m.direction.n_moving}};
}

Json to_json(const SuccessTable& t) {
  Json rows = Json::array();
  for (const auto& r : t.rows) {
    Json trials = Json::array();
    for (const auto& tr : r.trials) {
      Json j{{"seed", tr.seed},         {"prompt_id", tr.prompt_id}, {"approach", tr.approach},
             {"transport", tr.transport}, {"crashed", tr.crashed},   {"steps", tr.steps},
             {"slips", tr.slips}};
      if (tr.crashed) j["error"] = tr.error;
      trials.push_back(std::move(j));
    }
    rows.push_back(Json{{"task_id", task_name(r.task)},
                        {"n_trials", r.n_trials},
                        {"approach_success", r.approach_rate()},
                        {"transport_success", r.transport_rate()},
                        {"crashed", r.crashed},
                        {"trials", trials}});
  }
  return Json{{"controller", t.controller}, {"seed", t.seed}, {"n_trials", t.n_trials}, {"tasks", rows}};
}

Json report_json(const MetricReport* metrics, const SuccessTable* table) {
  return Json{{"format_version", kReportVersion},
              {"units", "ticks"},
              {"direction_rule", {{"aggregation", "per (sample, chunk step)"}, {"moving_eps", kMovingEps}, {"strict_positive", true}}},
              {"metrics", metrics ? to_json(*metrics) : Json(nullptr)},
              {"closed_loop", table ? to_json(*table) : Json(nullptr)}};
}

std::vector<std::string> validate_report_json(const Json& j) {
  std::vector<std::string> errs;
  auto need = [&](const Json& obj, const std::string& key, auto pred, const std::string& what) {
    if (!obj.contains(key)) {
      errs.push_back("missing " + key);
    } else if (!pred(obj.at(key))) {
      errs.push_back(key + " should be " + what);
    }
  };
  auto is_nonneg = [](const Json& v) { return v.is_number() && v.get<double>() >= 0.0; };
  auto is_frac_or_null = [](const Json& v) {
    return v.is_null() || (v.is_number() && v.get<double>() >= 0.0 && v.get<double>() <= 1.0);
  };
  auto is_nonneg_or_null = [](const Json& v) { return v.is_null() || (v.is_number() && v.get<double>() >= 0.0); };
  auto is_cos_or_null = [](const Json& v) {
    return v.is_null() || (v.is_number() && v.get<double>() >= -1.0 && v.get<double>() <= 1.0);
  };
  auto is_int = [](const Json& v) { return v.is_number_integer() && v.get<long>() >= 0; };

  if (!j.is_object()) return {"report is not an object"};
  need(j, "format_version", [](const Json& v) { return v.is_number_integer() && v.get<int>() == kReportVersion; },
       "1");
  need(j, "units", [](const Json& v) { return v.is_string(); }, "a string");
  if (j.contains("metrics") && !j.at("metrics").is_null()) {
    const Json& m = j.at("metrics");
    need(m, "rmse_overall", is_nonneg, "a non-negative number");
    need(m, "rmse_approach", is_nonneg_or_null, "non-negative or null");
    need(m, "rmse_transport", is_nonneg_or_null, "non-negative or null");
    need(m, "endpoint_mean", is_nonneg, "a non-negative number");
    need(m, "endpoint_median", is_nonneg, "a non-negative number");
    need(m, "rmse_per_axis",
         [&](const Json& v) { return v.is_array() && v.size() == 4 && std::all_of(v.begin(), v.end(), is_nonneg); },
         "4 non-negative numbers");
    need(m, "direction_accuracy", is_frac_or_null, "a fraction or null");
    need(m, "mean_cosine", is_cos_or_null, "in [-1, 1] or null");
    need(m, "phase_acc_overall", is_frac_or_null, "a fraction or null");
    need(m, "phase_acc_approach", is_frac_or_null, "a fraction or null");
    need(m, "phase_acc_transport", is_frac_or_null, "a fraction or null");
    need(m, "n_samples", is_int, "a non-negative integer");
    need(m, "n_moving", is_int, "a non-negative integer");
  } else if (!j.contains("metrics")) {
    errs.push_back("missing metrics");
  }
  if (j.contains("closed_loop") && !j.at("closed_loop").is_null()) {
    const Json& c = j.at("closed_loop");
    need(c, "n_trials", is_int, "a non-negative integer");
    need(c, "tasks", [](const Json& v) { return v.is_array(); }, "an array");
    if (c.contains("tasks") && c.at("tasks").is_array()) {
      for (const auto& row : c.at("tasks")) {
        need(row, "task_id", [](const Json& v) { return v.is_string(); }, "a string");
        need(row, "approach_success", is_frac_or_null, "a fraction");
        need(row, "transport_success", is_frac_or_null, "a fraction");
        need(row, "n_trials", is_int, "a non-negative integer");
      }
    }
  } else if (!j.contains("closed_loop")) {
    errs.push_back("missing closed_loop");
  }
  return errs;
}

namespace {

std::string cell(const std::optional<double>& v, bool percent) {
  if (!v) return "—";
  char buf[64];
  if (percent) {
    std::snprintf(buf, sizeof(buf), "%.2f%%", 100.0 * *v);
  } else {
    std::snprintf(buf, sizeof(buf), "%.4f", *v);
  }
  return buf;
}

}  // namespace

std::string report_table(const MetricReport* metrics, const SuccessTable* table) {
  std::ostringstream out;
  auto row = [&out](const std::string& label, const std::string& value) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-24s %s\n", label.c_str(), value.c_str());
    out << buf;
  };
  if (metrics) {
    const MetricReport& m = *metrics;
    row("Metric", "Value");
    row("RMSE (overall)", cell(m.rmse.overall, false));
    row("RMSE (approach)", cell(m.rmse.approach, false));
    row("RMSE (transport)", cell(m.rmse.transport, false));
    row("Endpoint mean", cell(m.endpoint.mean, false));
    row("Endpoint median", cell(m.endpoint.median, false));
    row("RMSE (x_L)", cell(m.rmse.per_axis[0], false));
    row("RMSE (y_L)", cell(m.rmse.per_axis[1], false));
    row("RMSE (x_R)", cell(m.rmse.per_axis[2], false));
    row("RMSE (y_R)", cell(m.rmse.per_axis[3], false));
    row("Direction Acc.", cell(m.direction.accuracy, true));
    row("Mean cosine", cell(m.direction.mean_cosine, false));
    row("Phase Acc. (overall)", cell(m.phase.overall, true));
    row("Phase Acc. (approach)", cell(m.phase.approach, true));
    row("Phase Acc. (transport)", cell(m.phase.transport, true));
    row("Samples", std::to_string(m.n_samples));
    row("Moving pairs", std::to_string(m.direction.n_moving));
  }
  if (table) {
    if (metrics) out << '\n';
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-6s %8s %10s %10s %8s\n", "Task", "Trials", "Approach", "Transport", "Crashed");
    out << buf;
    for (const auto& r : table->rows) {
      std::snprintf(buf, sizeof(buf), "%-6s %8d %9.1f%% %9.1f%% %8d\n", task_name(r.task).c_str(), r.n_trials,
                    100.0 * r.approach_rate(), 100.0 * r.transport_rate(), r.crashed);
      out << buf;
    }
  }
  return out.str();
}

void write_report(const MetricReport* metrics, const SuccessTable* table, const std::filesystem::path& path) {
  write_text_file(path, report_json(metrics, table).dump(2) + "\n");
  std::filesystem::path txt = path;
  txt.replace_extension(".txt");
  write_text_file(txt, report_table(metrics, table));
}

}  // namespace bimag
