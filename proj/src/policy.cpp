#include "bimag/policy.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace bimag {

using ad::Matrix;
using ad::Var;

namespace {

constexpr double kMaskedScore = -1e9;

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("ModelConfig: " + what);
}

Matrix gaussian(int rows, int cols, double std, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std * standard_normal(rng);
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  require(d_model > 0 && heads > 0 && d_model % heads == 0, "d_model must be a positive multiple of heads");
  require(ffn_hidden > 0 && phase_hidden > 0, "hidden widths must be positive");
  require(encoder_layers >= 1, "encoder_layers must be >= 1");
  require(decoder_layers == 2, "decoder_layers is fixed at 2");
  require(n_queries == 5, "n_queries is fixed at 5");
  require(chunk == kChunk, "chunk size is fixed at 5");
  require(action_dim == kActionDim, "action_dim is fixed at 4");
  require(history == kHistory, "history is fixed at 4");
  require(n_prompts == prompt_bank().size(), "n_prompts must match the prompt bank");
  require(n_tasks == 3, "n_tasks must be 3");
  require(lambda_phase >= 0.0 && std::isfinite(lambda_phase), "lambda_phase must be >= 0");
  require(beta == 1.0, "beta is fixed at 1");
}

Json to_json(const ModelConfig& c) {
  return Json{{"d_model", c.d_model},
              {"heads", c.heads},
              {"ffn_hidden", c.ffn_hidden},
              {"encoder_layers", c.encoder_layers},
              {"decoder_layers", c.decoder_layers},
              {"n_queries", c.n_queries},
              {"chunk", c.chunk},
              {"action_dim", c.action_dim},
              {"history", c.history},
              {"phase_hidden", c.phase_hidden},
              {"use_grid", c.use_grid},
              {"n_prompts", c.n_prompts},
              {"n_tasks", c.n_tasks},
              {"lambda_phase", c.lambda_phase},
              {"beta", c.beta},
              {"seed", c.seed},
              {"memory_length", c.memory_length()}};
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  c.d_model = j.value("d_model", c.d_model);
  c.heads = j.value("heads", c.heads);
  c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
  c.n_queries = j.value("n_queries", c.n_queries);
  c.chunk = j.value("chunk", c.chunk);
  c.action_dim = j.value("action_dim", c.action_dim);
  c.history = j.value("history", c.history);
  c.phase_hidden = j.value("phase_hidden", c.phase_hidden);
  c.use_grid = j.value("use_grid", c.use_grid);
  c.n_prompts = j.value("n_prompts", c.n_prompts);
  c.n_tasks = j.value("n_tasks", c.n_tasks);
  c.lambda_phase = j.value("lambda_phase", c.lambda_phase);
  c.beta = j.value("beta", c.beta);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

Eigen::RowVectorXd pool_grid(const std::vector<double>& grid) {
  if (grid.size() != static_cast<std::size_t>(kGridCells)) {
    throw std::invalid_argument("pool_grid: expected " + std::to_string(kGridCells) + " cells");
  }
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(kPooledCells);
  constexpr double inv = 1.0 / (kPoolFactor * kPoolFactor);
  for (int c = 0; c < kGridChannels; ++c) {
    for (int row = 0; row < kGridSize; ++row) {
      for (int col = 0; col < kGridSize; ++col) {
        const int pooled = (c * kPooledSize + row / kPoolFactor) * kPooledSize + col / kPoolFactor;
        out[pooled] += grid[static_cast<std::size_t>(grid_index(static_cast<GridChannel>(c), row, col))] * inv;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

int ParamSet::add(std::string name, Matrix value) {
  if (index_.contains(name)) throw std::logic_error("duplicate parameter " + name);
  const int id = size();
  index_.emplace(name, id);
  params_.push_back(Parameter{std::move(name), std::move(value)});
  return id;
}

int ParamSet::index(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

long ParamSet::scalar_count() const {
  long n = 0;
  for (const auto& p : params_) n += static_cast<long>(p.value.size());
  return n;
}

Phase argmax_phase(const Eigen::Vector2d& logits) {
  return logits[1] > logits[0] ? Phase::Transport : Phase::Approach;
}

std::vector<Vec4> normalized_states(std::span<const Vec4> states_ticks) {
  std::vector<Vec4> out;
  out.reserve(states_ticks.size());
  for (const auto& s : states_ticks) out.push_back(normalize_state(s));
  return out;
}

Policy::Linear Policy::make_linear(const std::string& name, int in, int out, Rng& rng, bool zero,
                                   bool bias) {
  Linear l;
  l.w = params_.add(name + ".w", zero ? Matrix(Matrix::Zero(in, out))
                                      : gaussian(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng));
  if (bias) l.b = params_.add(name + ".b", Matrix::Zero(1, out));
  return l;
}

Policy::Norm Policy::make_norm(const std::string& name, int width) {
  Norm n;
  n.gain = params_.add(name + ".gain", Matrix::Ones(1, width));
  n.bias = params_.add(name + ".bias", Matrix::Zero(1, width));
  return n;
}

Policy::Attention Policy::make_attention(const std::string& name, Rng& rng) {
  const int d = cfg_.d_model;
  Attention a;
  a.q = make_linear(name + ".q", d, d, rng);
  // a key bias only shifts each score row by a constant, which softmax ignores
  a.k = make_linear(name + ".k", d, d, rng, false, /*bias=*/false);
  a.v = make_linear(name + ".v", d, d, rng);
  a.o = make_linear(name + ".o", d, d, rng);
  return a;
}

Policy::FeedForward Policy::make_ffn(const std::string& name, Rng& rng) {
  FeedForward f;
  f.in = make_linear(name + ".in", cfg_.d_model, cfg_.ffn_hidden, rng);
  f.out = make_linear(name + ".out", cfg_.ffn_hidden, cfg_.d_model, rng);
  return f;
}

Policy::Policy(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng = make_rng(cfg_.seed, 0x90111C7);
  const int d = cfg_.d_model;

  feature_proj_ = make_linear("encoder.feature_proj", kFeatureDim, d, rng);
  if (cfg_.use_grid) grid_proj_ = make_linear("encoder.grid_proj", kPooledCells, d, rng);
  prompt_table_ = params_.add("encoder.prompt_embedding", gaussian(cfg_.n_prompts, d, 0.1, rng));
  task_table_ = params_.add("encoder.task_embedding", gaussian(cfg_.n_tasks, d, 0.5, rng));
  slot_table_ = params_.add("encoder.slot_embedding", gaussian(cfg_.memory_length(), d, 1.0, rng));
  for (int i = 0; i < cfg_.encoder_layers; ++i) {
    const std::string p = "encoder.layer" + std::to_string(i);
    EncoderLayer layer;
    layer.ln1 = make_norm(p + ".ln1", d);
    layer.attn = make_attention(p + ".attn", rng);
    layer.ln2 = make_norm(p + ".ln2", d);
    layer.ffn = make_ffn(p + ".ffn", rng);
    encoder_.push_back(layer);
  }
  encoder_norm_ = make_norm("encoder.final_norm", d);

  state_proj_ = make_linear("state_proj", kActionDim, d, rng);

  phase_fc1_ = make_linear("phase_head.fc1", d + 2 * kActionDim, cfg_.phase_hidden, rng);
  phase_fc2_ = make_linear("phase_head.fc2", cfg_.phase_hidden, 2, rng);
  phase_table_ = params_.add("phase_embedding", gaussian(2, d, 1.0, rng));

  queries_ = params_.add("decoder.queries", gaussian(cfg_.n_queries, d, 0.5, rng));
  memory_norm_ = make_norm("decoder.memory_norm", d);
  for (int i = 0; i < cfg_.decoder_layers; ++i) {
    const std::string p = "decoder.layer" + std::to_string(i);
    DecoderLayer layer;
    layer.ln1 = make_norm(p + ".ln1", d);
    layer.self_attn = make_attention(p + ".self_attn", rng);
    layer.ln2 = make_norm(p + ".ln2", d);
    layer.cross_attn = make_attention(p + ".cross_attn", rng);
    layer.ln3 = make_norm(p + ".ln3", d);
    layer.ffn = make_ffn(p + ".ffn", rng);
    decoder_.push_back(layer);
  }
  decoder_norm_ = make_norm("decoder.final_norm", d);
  output_ = make_linear("decoder.output", d, kActionDim, rng, /*zero=*/true);
}

std::vector<Matrix> Policy::zero_grads() const {
  std::vector<Matrix> g;
  g.reserve(static_cast<std::size_t>(params_.size()));
  for (const auto& p : params_) g.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  return g;
}

// ---------------------------------------------------------------------------
// Building blocks

Var Policy::param(Graph& g, int index) const {
  if (g.bound.empty()) g.bound.assign(static_cast<std::size_t>(params_.size()), Var{});
  Var& v = g.bound[static_cast<std::size_t>(index)];
  if (!v.valid()) v = g.tape.parameter(params_[index].value);
  return v;
}

Var Policy::linear(Graph& g, Var x, const Linear& l) const {
  const Var y = ad::matmul(g.tape, x, param(g, l.w));
  return l.b >= 0 ? ad::add_row(g.tape, y, param(g, l.b)) : y;
}

Var Policy::norm(Graph& g, Var x, const Norm& n) const {
  return ad::layer_norm(g.tape, x, param(g, n.gain), param(g, n.bias));
}

Var Policy::attention(Graph& g, Var xq, Var xkv, const Attention& a,
                      const std::vector<bool>* key_mask) const {
  ad::Tape& t = g.tape;
  const Var q = linear(g, xq, a.q);
  const Var k = linear(g, xkv, a.k);
  const Var v = linear(g, xkv, a.v);
  const int dh = cfg_.d_model / cfg_.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  std::optional<Matrix> bias;
  if (key_mask) {
    const auto n_keys = static_cast<Eigen::Index>(key_mask->size());
    if (n_keys != t.value(k).rows()) throw std::invalid_argument("attention: mask length differs from keys");
    bool any_masked = false;
    Matrix b = Matrix::Zero(t.value(q).rows(), n_keys);
    for (Eigen::Index j = 0; j < n_keys; ++j) {
      if (!(*key_mask)[static_cast<std::size_t>(j)]) {
        b.col(j).setConstant(kMaskedScore);
        any_masked = true;
      }
    }
    if (any_masked) bias = std::move(b);
  }

  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(cfg_.heads));
  for (int h = 0; h < cfg_.heads; ++h) {
    const Var qh = ad::slice_cols(t, q, h * dh, dh);
    const Var kh = ad::slice_cols(t, k, h * dh, dh);
    const Var vh = ad::slice_cols(t, v, h * dh, dh);
    Var scores = ad::scale(t, ad::matmul_nt(t, qh, kh), inv_sqrt);
    if (bias) scores = ad::add_const(t, scores, *bias);
    heads.push_back(ad::matmul(t, ad::softmax_rows(t, scores), vh));
  }
  return linear(g, ad::concat_cols(t, heads), a.o);
}

Var Policy::feed_forward(Graph& g, Var x, const FeedForward& f) const {
  return linear(g, ad::gelu(g.tape, linear(g, x, f.in)), f.out);
}

// ---------------------------------------------------------------------------
// Graph form

Var Policy::encode(Graph& g, std::span<const Observation> obs_history, int prompt_id) const {
  ad::Tape& t = g.tape;
  if (static_cast<int>(obs_history.size()) != cfg_.history) {
    throw std::invalid_argument("encode: expected " + std::to_string(cfg_.history) + " observations");
  }
  if (prompt_id < 0 || prompt_id >= cfg_.n_prompts) throw std::out_of_range("encode: prompt id");

  Matrix feats(cfg_.history, kFeatureDim);
  for (int k = 0; k < cfg_.history; ++k) {
    const auto& f = obs_history[static_cast<std::size_t>(k)].features;
    if (f.size() != static_cast<std::size_t>(kFeatureDim)) throw std::invalid_argument("encode: bad feature length");
    for (int i = 0; i < kFeatureDim; ++i) feats(k, i) = f[static_cast<std::size_t>(i)];
  }
  std::vector<Var> parts{linear(g, t.constant(std::move(feats)), feature_proj_)};
  if (cfg_.use_grid) {
    Matrix pooled(cfg_.history, kPooledCells);
    for (int k = 0; k < cfg_.history; ++k) {
      const auto& grid = obs_history[static_cast<std::size_t>(k)].grid;
      if (!grid) throw std::invalid_argument("encode: model expects occupancy grids");
      pooled.row(k) = pool_grid(*grid);
    }
    parts.push_back(linear(g, t.constant(std::move(pooled)), grid_proj_));
  }
  const int task = static_cast<int>(prompt_bank().task_of(prompt_id));
  parts.push_back(ad::add(t, ad::slice_rows(t, param(g, prompt_table_), prompt_id, 1),
                          ad::slice_rows(t, param(g, task_table_), task, 1)));

  Var x = ad::add(t, ad::concat_rows(t, parts), param(g, slot_table_));
  for (const auto& layer : encoder_) {
    const Var h = norm(g, x, layer.ln1);
    x = ad::add(t, x, attention(g, h, h, layer.attn, nullptr));
    x = ad::add(t, x, feed_forward(g, norm(g, x, layer.ln2), layer.ffn));
  }
  return norm(g, x, encoder_norm_);
}

Var Policy::inject_state(Graph& g, Var memory, const Vec4& state_norm) const {
  Matrix s(1, kActionDim);
  s.row(0) = state_norm.transpose();
  const Var token = linear(g, g.tape.constant(std::move(s)), state_proj_);
  const std::array<Var, 2> parts{memory, token};
  return ad::concat_rows(g.tape, parts);
}

Var Policy::phase_logits(Graph& g, Var memory, const std::vector<bool>& mask,
                         std::span<const Vec4> state_history_norm) const {
  if (state_history_norm.empty()) throw std::invalid_argument("phase_head: empty state history");
  ad::Tape& t = g.tape;
  const Vec4& current = state_history_norm.back();
  const Vec4 motion = state_history_norm.back() - state_history_norm.front();
  Matrix extra(1, 2 * kActionDim);
  extra.block(0, 0, 1, kActionDim) = current.transpose();
  extra.block(0, kActionDim, 1, kActionDim) = motion.transpose();
  const std::array<Var, 2> parts{ad::masked_mean_rows(t, memory, mask), t.constant(std::move(extra))};
  const Var fused = ad::concat_cols(t, parts);
  return linear(g, ad::gelu(t, linear(g, fused, phase_fc1_)), phase_fc2_);
}

Var Policy::phase_token(Graph& g, Phase phase) const {
  return ad::slice_rows(g.tape, param(g, phase_table_), static_cast<int>(phase), 1);
}

Var Policy::decode_chunk(Graph& g, Var memory, const std::vector<bool>& mask, Var phase_tok) const {
  ad::Tape& t = g.tape;
  const std::array<Var, 2> parts{phase_tok, memory};
  const Var mem = norm(g, ad::concat_rows(t, parts), memory_norm_);
  std::vector<bool> mem_mask;
  mem_mask.reserve(mask.size() + 1);
  mem_mask.push_back(true);
  mem_mask.insert(mem_mask.end(), mask.begin(), mask.end());

  Var q = param(g, queries_);
  for (const auto& layer : decoder_) {
    const Var h = norm(g, q, layer.ln1);
    q = ad::add(t, q, attention(g, h, h, layer.self_attn, nullptr));
    q = ad::add(t, q, attention(g, norm(g, q, layer.ln2), mem, layer.cross_attn, &mem_mask));
    q = ad::add(t, q, feed_forward(g, norm(g, q, layer.ln3), layer.ffn));
  }
  return linear(g, norm(g, q, decoder_norm_), output_);
}

Policy::GraphOutput Policy::forward(Graph& g, const PolicyInput& in, std::optional<Phase> teacher) const {
  if (static_cast<int>(in.state_history.size()) != cfg_.history) {
    throw std::invalid_argument("forward: expected " + std::to_string(cfg_.history) + " states");
  }
  const std::vector<Vec4> states = normalized_states(in.state_history);
  const Var memory = inject_state(g, encode(g, in.obs_history, in.prompt_id), states.back());
  const std::vector<bool> mask(static_cast<std::size_t>(g.tape.value(memory).rows()), true);
  GraphOutput out;
  out.logits = phase_logits(g, memory, mask, states);
  const Matrix& lv = g.tape.value(out.logits);
  out.conditioned_on = teacher ? *teacher : argmax_phase(Eigen::Vector2d(lv(0, 0), lv(0, 1)));
  out.chunk = decode_chunk(g, memory, mask, phase_token(g, out.conditioned_on));
  return out;
}

Policy::GraphLoss Policy::loss(Graph& g, const GraphOutput& out, const ChunkMatrix& gt,
                               int phase_label) const {
  ad::Tape& t = g.tape;
  GraphLoss l;
  l.action = ad::smooth_l1(t, out.chunk, gt, cfg_.beta);
  l.phase = ad::cross_entropy(t, out.logits, phase_label);
  l.total = ad::add(t, l.action, ad::scale(t, l.phase, cfg_.lambda_phase));
  return l;
}

// ---------------------------------------------------------------------------
// Value form

MultimodalMemory Policy::encode(std::span<const Observation> obs_history, int prompt_id) const {
  Graph g(false);
  const Var h = encode(g, obs_history, prompt_id);
  MultimodalMemory m;
  m.tokens = g.tape.value(h);
  m.mask.assign(static_cast<std::size_t>(m.tokens.rows()), true);
  return m;
}

MultimodalMemory Policy::inject_state(const MultimodalMemory& mem, const Vec4& state_norm) const {
  Graph g(false);
  const Var h = inject_state(g, g.tape.constant(mem.tokens), state_norm);
  MultimodalMemory m;
  m.tokens = g.tape.value(h);
  m.mask = mem.mask;
  m.mask.push_back(true);
  return m;
}

PhaseOutput Policy::phase_head(const MultimodalMemory& mem, std::span<const Vec4> state_history_norm) const {
  Graph g(false);
  const Var l = phase_logits(g, g.tape.constant(mem.tokens), mem.mask, state_history_norm);
  PhaseOutput out;
  out.logits = Eigen::Vector2d(g.tape.value(l)(0, 0), g.tape.value(l)(0, 1));
  out.predicted = argmax_phase(out.logits);
  return out;
}

Eigen::RowVectorXd Policy::phase_token(Phase phase) const {
  return params_[phase_table_].value.row(static_cast<int>(phase));
}

ChunkMatrix Policy::decode_chunk(const MultimodalMemory& mem, const Eigen::RowVectorXd& phase_tok) const {
  Graph g(false);
  const Var c = decode_chunk(g, g.tape.constant(mem.tokens), mem.mask, g.tape.constant(Matrix(phase_tok)));
  return g.tape.value(c);
}

ForwardOutput Policy::forward(const PolicyInput& in, std::optional<Phase> teacher) const {
  Graph g(false);
  const GraphOutput o = forward(g, in, teacher);
  ForwardOutput out;
  out.chunk = g.tape.value(o.chunk);
  const Matrix& lv = g.tape.value(o.logits);
  out.phase.logits = Eigen::Vector2d(lv(0, 0), lv(0, 1));
  out.phase.predicted = argmax_phase(out.phase.logits);
  out.conditioned_on = o.conditioned_on;
  return out;
}

ForwardOutput Policy::forward(const TrainingSample& sample, bool teacher_phase) const {
  const PolicyInput in{sample.obs_history, sample.state_history, sample.prompt_id};
  return forward(in, teacher_phase ? std::optional<Phase>(sample.phase) : std::nullopt);
}

LossBreakdown Policy::loss_and_grad(const TrainingSample& sample, std::vector<Matrix>* grads,
                                    double weight) const {
  Graph g(grads != nullptr);
  const PolicyInput in{sample.obs_history, sample.state_history, sample.prompt_id};
  const GraphOutput out = forward(g, in, sample.phase);
  const GraphLoss l = loss(g, out, sample.chunk, static_cast<int>(sample.phase));
  LossBreakdown r{g.tape.value(l.total)(0, 0), g.tape.value(l.action)(0, 0), g.tape.value(l.phase)(0, 0)};
  if (!grads) return r;
  if (grads->size() != static_cast<std::size_t>(params_.size())) {
    throw std::invalid_argument("loss_and_grad: gradient buffer has the wrong size");
  }
  g.tape.backward(l.total);
  for (std::size_t i = 0; i < g.bound.size(); ++i) {
    if (!g.bound[i].valid()) continue;
    const Matrix& gi = g.tape.grad(g.bound[i]);
    if (gi.size() != 0) (*grads)[i].noalias() += weight * gi;
  }
  return r;
}

LossBreakdown compute_loss(const ChunkMatrix& pred, const ChunkMatrix& gt, const Eigen::Vector2d& logits,
                           int phase_label, const ModelConfig& cfg) {
  if (phase_label != 0 && phase_label != 1) {
    throw std::invalid_argument("compute_loss: phase label must be 0 or 1, got " + std::to_string(phase_label));
  }
  LossBreakdown r;
  r.action = ad::smooth_l1_value(pred, gt, cfg.beta);
  const double m = logits.maxCoeff();
  const double lse = m + std::log(std::exp(logits[0] - m) + std::exp(logits[1] - m));
  r.phase = lse - logits[phase_label];
  r.total = r.action + cfg.lambda_phase * r.phase;
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints

Json checkpoint_to_json(const Policy& policy, const NormStats& stats) {
  Json params = Json::array();
  for (const auto& p : policy.params()) {
    std::vector<double> data(static_cast<std::size_t>(p.value.size()));
    // row-major on disk
    std::size_t i = 0;
    for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) data[i++] = p.value(r, c);
    }
    params.push_back(Json{{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}, {"data", data}});
  }
  return Json{{"format_version", kCheckpointVersion},
              {"model_config", to_json(policy.config())},
              {"norm_stats", to_json(stats)},
              {"params", params}};
}

void save_checkpoint(const std::filesystem::path& path, const Policy& policy, const NormStats& stats) {
  write_text_file(path, checkpoint_to_json(policy, stats).dump() + "\n");
}

Checkpoint checkpoint_from_json(const Json& j, const std::optional<ModelConfig>& expected) {
  const int version = j.at("format_version").get<int>();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint format_version " + std::to_string(version));
  }
  const ModelConfig cfg = model_config_from_json(j.at("model_config"));
  if (expected && !(*expected == cfg)) {
    throw std::runtime_error("checkpoint model config does not match the requested config");
  }
  Checkpoint ck{Policy(cfg), norm_stats_from_json(j.at("norm_stats"))};
  ParamSet& ps = ck.policy.params();
  const Json& stored = j.at("params");
  if (static_cast<int>(stored.size()) != ps.size()) {
    throw std::runtime_error("checkpoint has " + std::to_string(stored.size()) + " parameters, model has " +
                             std::to_string(ps.size()));
  }
  for (const auto& e : stored) {
    Parameter& p = ps[ps.index(e.at("name").get<std::string>())];
    const auto rows = e.at("rows").get<Eigen::Index>();
    const auto cols = e.at("cols").get<Eigen::Index>();
    const auto& data = e.at("data");
    if (rows != p.value.rows() || cols != p.value.cols() || static_cast<Eigen::Index>(data.size()) != rows * cols) {
      throw std::runtime_error("checkpoint parameter " + p.name + " has the wrong shape");
    }
    std::size_t i = 0;
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) p.value(r, c) = data[i++].get<double>();
    }
  }
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
  return checkpoint_from_json(read_json_file(path), expected);
}

}  // namespace bimag
