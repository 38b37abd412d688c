#pragma once

// Phase-conditioned chunking policy.
//
//   encode        per-frame feature (+ pooled grid) tokens and a prompt token,
//                 learned slot encodings, pre-LN self-attention layers
//   inject_state  appends a linear projection of the normalized arm state
//   phase_head    masked mean pool ++ current state ++ motion -> MLP -> 2 logits
//   phase_token   2-row learned table
//   decode_chunk  5 learned queries, 2 decoder layers over [phase; memory],
//                 zero-initialized linear output -> 5x4 normalized deltas
//
// Every stage has a graph form (building on an ad::Tape, used for training and
// gradient checks) and a value form (used for inference and tests).

#include "bimag/autodiff.hpp"
#include "bimag/dataset.hpp"
#include "bimag/json_io.hpp"
#include "bimag/magsim.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace bimag {

struct ModelConfig {
  int d_model = 64;
  int heads = 4;
  int ffn_hidden = 128;
  int encoder_layers = 2;
  int decoder_layers = 2;  // fixed
  int n_queries = 5;       // fixed
  int chunk = kChunk;      // fixed
  int action_dim = kActionDim;  // fixed
  int history = kHistory;
  int phase_hidden = 64;
  bool use_grid = true;
  int n_prompts = 70;
  int n_tasks = 3;
  double lambda_phase = 0.1;
  double beta = 1.0;  // fixed
  std::uint64_t seed = 0;

  int tokens_per_frame() const { return use_grid ? 2 : 1; }
  int memory_length() const { return history * tokens_per_frame() + 1; }  // L
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

Json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const Json& j);

inline constexpr int kPoolFactor = 4;
inline constexpr int kPooledSize = kGridSize / kPoolFactor;
inline constexpr int kPooledCells = kPooledSize * kPooledSize * kGridChannels;  // 256

// Average-pools a full occupancy grid 4x4 per channel.
Eigen::RowVectorXd pool_grid(const std::vector<double>& grid);

struct Parameter {
  std::string name;
  ad::Matrix value;
};

class ParamSet {
 public:
  int add(std::string name, ad::Matrix value);
  int size() const { return static_cast<int>(params_.size()); }
  Parameter& operator[](int i) { return params_[static_cast<std::size_t>(i)]; }
  const Parameter& operator[](int i) const { return params_[static_cast<std::size_t>(i)]; }
  int index(const std::string& name) const;
  long scalar_count() const;
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, int> index_;
};

struct MultimodalMemory {
  ad::Matrix tokens;        // rows are tokens
  std::vector<bool> mask;   // true for populated tokens
  int length() const { return static_cast<int>(tokens.rows()); }
};

struct PhaseOutput {
  Eigen::Vector2d logits = Eigen::Vector2d::Zero();
  Phase predicted = Phase::Approach;
};

// Ties go to Approach.
Phase argmax_phase(const Eigen::Vector2d& logits);

struct PolicyInput {
  std::span<const Observation> obs_history;  // oldest first
  std::span<const Vec4> state_history;       // ticks, oldest first; back() is s_t
  int prompt_id = 0;
};

struct ForwardOutput {
  ChunkMatrix chunk;  // normalized
  PhaseOutput phase;
  Phase conditioned_on = Phase::Approach;
};

struct LossBreakdown {
  double total = 0.0;
  double action = 0.0;
  double phase = 0.0;
};

// Smooth L1 on normalized chunks plus lambda_phase * cross-entropy.
LossBreakdown compute_loss(const ChunkMatrix& pred, const ChunkMatrix& gt,
                           const Eigen::Vector2d& logits, int phase_label, const ModelConfig& cfg);

class Policy {
 public:
  // One forward pass worth of graph. Parameters are bound lazily.
  struct Graph {
    explicit Graph(bool record) : tape(record) {}
    ad::Tape tape;
    std::vector<ad::Var> bound;
  };

  struct GraphOutput {
    ad::Var chunk;
    ad::Var logits;
    Phase conditioned_on = Phase::Approach;
  };

  struct GraphLoss {
    ad::Var total;
    ad::Var action;
    ad::Var phase;
  };

  explicit Policy(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  // Graph form.
  ad::Var param(Graph& g, int index) const;
  ad::Var encode(Graph& g, std::span<const Observation> obs_history, int prompt_id) const;
  ad::Var inject_state(Graph& g, ad::Var memory, const Vec4& state_norm) const;
  ad::Var phase_logits(Graph& g, ad::Var memory, const std::vector<bool>& mask,
                       std::span<const Vec4> state_history_norm) const;
  ad::Var phase_token(Graph& g, Phase phase) const;
  ad::Var decode_chunk(Graph& g, ad::Var memory, const std::vector<bool>& mask,
                       ad::Var phase_tok) const;
  // teacher: condition the decoder on this phase instead of the argmax.
  GraphOutput forward(Graph& g, const PolicyInput& in, std::optional<Phase> teacher) const;
  GraphLoss loss(Graph& g, const GraphOutput& out, const ChunkMatrix& gt, int phase_label) const;

  // Value form.
  MultimodalMemory encode(std::span<const Observation> obs_history, int prompt_id) const;
  MultimodalMemory inject_state(const MultimodalMemory& mem, const Vec4& state_norm) const;
  PhaseOutput phase_head(const MultimodalMemory& mem, std::span<const Vec4> state_history_norm) const;
  Eigen::RowVectorXd phase_token(Phase phase) const;
  ChunkMatrix decode_chunk(const MultimodalMemory& mem, const Eigen::RowVectorXd& phase_tok) const;
  ForwardOutput forward(const PolicyInput& in, std::optional<Phase> teacher = std::nullopt) const;
  ForwardOutput forward(const TrainingSample& sample, bool teacher_phase) const;

  // Loss and gradients for one sample. grads (one matrix per parameter) are
  // accumulated with the given weight when non-null.
  LossBreakdown loss_and_grad(const TrainingSample& sample, std::vector<ad::Matrix>* grads,
                              double weight = 1.0) const;

  std::vector<ad::Matrix> zero_grads() const;

 private:
  struct Linear { int w = -1, b = -1; };
  struct Norm { int gain = -1, bias = -1; };
  struct Attention { Linear q, k, v, o; };
  struct FeedForward { Linear in, out; };
  struct EncoderLayer { Norm ln1; Attention attn; Norm ln2; FeedForward ffn; };
  struct DecoderLayer {
    Norm ln1;
    Attention self_attn;
    Norm ln2;
    Attention cross_attn;
    Norm ln3;
    FeedForward ffn;
  };

  Linear make_linear(const std::string& name, int in, int out, Rng& rng, bool zero = false,
                     bool bias = true);
  Norm make_norm(const std::string& name, int width);
  Attention make_attention(const std::string& name, Rng& rng);
  FeedForward make_ffn(const std::string& name, Rng& rng);

  ad::Var linear(Graph& g, ad::Var x, const Linear& l) const;
  ad::Var norm(Graph& g, ad::Var x, const Norm& n) const;
  ad::Var attention(Graph& g, ad::Var xq, ad::Var xkv, const Attention& a,
                    const std::vector<bool>* key_mask) const;
  ad::Var feed_forward(Graph& g, ad::Var x, const FeedForward& f) const;

  ModelConfig cfg_;
  ParamSet params_;
  Linear feature_proj_;
  Linear grid_proj_;
  int prompt_table_ = -1;
  int task_table_ = -1;
  int slot_table_ = -1;
  std::vector<EncoderLayer> encoder_;
  Norm encoder_norm_;
  Linear state_proj_;
  Linear phase_fc1_;
  Linear phase_fc2_;
  int phase_table_ = -1;
  int queries_ = -1;
  Norm memory_norm_;
  std::vector<DecoderLayer> decoder_;
  Norm decoder_norm_;
  Linear output_;
};

// Normalized state history of a sample, oldest first.
std::vector<Vec4> normalized_states(std::span<const Vec4> states_ticks);

struct Checkpoint {
  Policy policy;
  NormStats stats;
};

inline constexpr int kCheckpointVersion = 1;

Json checkpoint_to_json(const Policy& policy, const NormStats& stats);
void save_checkpoint(const std::filesystem::path& path, const Policy& policy, const NormStats& stats);
// Throws when `expected` is given and differs from the stored configuration.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<ModelConfig>& expected = std::nullopt);
Checkpoint checkpoint_from_json(const Json& j, const std::optional<ModelConfig>& expected = std::nullopt);

}  // namespace bimag
