#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rvt/feature_store.hpp"
#include "rvt/fusion.hpp"
#include "rvt/model.hpp"

namespace rvt {

struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  double learning_rate = 5e-5;
  double warmup_fraction = 0.1;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  /// Dev evaluation cadence in optimizer steps; 0 evaluates once per epoch.
  std::size_t eval_every = 0;
  std::filesystem::path output_dir = "run";
  /// Continue from a `last/` checkpoint written by an earlier run with the
  /// same config and data.
  std::optional<std::filesystem::path> resume_from;
  /// Stop after this many completed epochs (0 = run the full schedule).
  /// The schedule still spans `epochs`; used to pause a run for resume.
  std::size_t stop_after_epoch = 0;

  void validate() const;
  std::string to_json() const;
  /// Fields absent from `json` keep the values already in `base`.
  static TrainConfig from_json(std::string_view json, TrainConfig base);
  static TrainConfig from_json(std::string_view json);
};

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;
  /// Mean masked loss of every optimizer step, in order.
  std::vector<double> loss_curve;
  std::size_t steps = 0;
  /// Best dev loss (or best epoch train loss when no dev set is given).
  double best_loss = 0.0;
};

/// Linear warmup to `peak` over `warmup` steps, then linear decay to 0 at
/// `total`.
double learning_rate_at(std::size_t step, std::size_t total, std::size_t warmup, double peak);

/// Thrown when a step produces a non-finite loss; a diagnostic snapshot is
/// written before throwing.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& what, std::filesystem::path snapshot)
      : std::runtime_error(what), snapshot_(std::move(snapshot)) {}
  const std::filesystem::path& snapshot() const { return snapshot_; }

 private:
  std::filesystem::path snapshot_;
};

/// Pre-fused training data for one variant.
struct TrainingData {
  std::vector<FusedSequence> train;
  std::vector<FusedSequence> dev;
};

/// Builds full sequences for every instance. The baseline never opens the
/// feature store.
TrainingData prepare_training_data(const std::vector<RationaleInstance>& instances, const Variant& variant,
                                   const FeatureStore* features, const Vocabulary& vocab,
                                   const LengthLimits& limits);

/// Fine-tunes `model` in place with AdamW (decoupled weight decay), linear
/// warmup/decay, and global-norm gradient clipping. Runs
/// epochs * ceil(N / batch_size) steps over seeded shuffles of the train
/// set; writes `final/` and `best/` checkpoints plus `loss_curve.csv` under
/// config.output_dir. Parameters and optimizer moments are rounded to
/// float32 after each step so runs and resumes are bit-reproducible.
TrainResult train(TransformerLM& model, const TrainingData& data, const std::string& vocab_hash,
                  const TrainConfig& config);

/// Masked mean loss over a sequence set (eval mode).
double evaluate_loss(const TransformerLM& model, const std::vector<FusedSequence>& seqs);

}  // namespace rvt
