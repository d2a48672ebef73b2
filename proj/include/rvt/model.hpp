#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "rvt/fusion.hpp"

namespace rvt {

class Rng;

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t vocab_size = 0;
  std::size_t n_segments = kNumSegments;
  std::size_t max_positions = 256;
  std::size_t feature_dim = 2048;
  std::size_t vc_dim = 768;
  double dropout = 0.1;
  std::uint64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(std::string_view json);
};

/// Name, shape and location of one parameter tensor in the flat buffer.
struct TensorInfo {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
  /// Subject to decoupled weight decay (matrices and embedding tables).
  bool decay = false;
  std::size_t size() const { return rows * cols; }
};

/// Decoder-only transformer over fused sequences.
///
/// Input embedding at position i is token + segment + position embedding,
/// plus the visual embedding of any slot that references i. Region visual
/// embeddings are LayerNorm(feature_proj(f) + coord_proj(c)); inference
/// start slots use vc_proj(v) alone. Pre-LayerNorm blocks with GELU MLPs;
/// the output head is tied to the token table and carries its own bias.
///
/// Parameters live in one flat double buffer. The trainer keeps every value
/// float32-representable so checkpoints (float32) round-trip exactly.
class TransformerLM {
 public:
  explicit TransformerLM(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const TensorInfo& tensor(const std::string& name) const;
  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }
  std::size_t num_parameters() const { return params_.size(); }

  Eigen::Map<Matrix> mat(const std::string& name);
  Eigen::Map<const Matrix> mat(const std::string& name) const;

  /// Rounds every parameter to the nearest float32.
  void round_to_storage_precision();

  /// Input embeddings [L x d_model] before the first block.
  Matrix embed(const FusedSequence& seq) const;
  /// Logits [L x vocab] for every position (eval mode).
  Matrix forward(const FusedSequence& seq) const;
  /// Logits from a precomputed input embedding (eval mode).
  Matrix forward_from_embeddings(const Matrix& embeddings) const;

  /// Mean next-token cross-entropy over positions whose target is masked.
  double loss(const FusedSequence& seq) const;
  /// Same with explicit targets: `targets[i]` is the label predicted at
  /// position i and counts only when rationale_mask[i + 1] is set. Size L-1.
  double loss(const FusedSequence& seq, std::span<const TokenId> targets) const;

  struct LossSum {
    double sum = 0.0;
    std::size_t count = 0;
  };
  /// Forward + backward in one pass. Adds `scale` * d(sum of masked CE)/dθ
  /// into `grad` (same layout as parameters()). Dropout is active when
  /// `dropout_rng` is non-null and config().dropout > 0.
  LossSum accumulate_gradients(const FusedSequence& seq, std::span<double> grad, double scale,
                               Rng* dropout_rng = nullptr) const;

  /// Greedy decoding from a prompt that ends with the rationale begin
  /// separator. Stops at `end_token` (not included) or after `max_new`
  /// tokens. Ties go to the lowest id.
  std::vector<TokenId> generate_greedy(FusedSequence context, TokenId end_token,
                                       std::size_t max_new) const;

  void save(const std::filesystem::path& dir, const std::string& vocab_hash,
            std::uint64_t step) const;
  struct Loaded;
  static Loaded load(const std::filesystem::path& dir);

 private:
  struct Cache;
  void add_tensor(const std::string& name, std::size_t rows, std::size_t cols, bool decay);
  void initialize();
  void check_sequence(const FusedSequence& seq) const;
  Matrix hidden_states(const FusedSequence& seq, Cache* cache, Rng* dropout_rng) const;
  Matrix run_blocks(Matrix x, Cache* cache, Rng* dropout_rng) const;

  ModelConfig config_;
  std::vector<TensorInfo> tensors_;
  std::unordered_map<std::string, std::size_t> by_name_;
  std::vector<double> params_;
};

struct TransformerLM::Loaded {
  TransformerLM model;
  std::string vocab_hash;
  std::uint64_t step = 0;
};

/// Checkpoint metadata lives in `model.json`, float32 values in `model.f32`.
inline constexpr const char* kCheckpointMeta = "model.json";
inline constexpr const char* kCheckpointBlob = "model.f32";

}  // namespace rvt
