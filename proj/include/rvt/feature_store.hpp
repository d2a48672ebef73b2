#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace rvt {

class Vocabulary;

enum class Task { VCR, ESNLIVE, VQAE };
enum class Split { Train, Dev };

std::string_view to_string(Task task);
std::string_view to_string(Split split);
Task parse_task(std::string_view name);
Split parse_split(std::string_view name);

struct RationaleInstance {
  std::string instance_id;
  std::string image_id;
  Task task = Task::VCR;
  /// Question (VCR, VQA-E) or hypothesis (e-SNLI-VE).
  std::string context_question_or_hypothesis;
  /// Answer (VCR, VQA-E) or entailment label (e-SNLI-VE).
  std::string context_answer_or_label;
  std::string gold_rationale;
  Split split = Split::Train;

  /// Throws std::invalid_argument if the instance breaks a dataset invariant.
  void validate() const;
};

/// Pixel-space box, (x1, y1) top-left and (x2, y2) bottom-right.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  bool operator==(const Box&) const = default;
};

struct ImageSize {
  double width = 0, height = 0;
  bool operator==(const ImageSize&) const = default;
};

struct Detection {
  std::string label;
  Box box;
  std::vector<float> feature;
  bool operator==(const Detection&) const = default;
};

struct ObjectDetections {
  ImageSize image_size;
  std::vector<float> whole_image_feature;
  std::vector<Detection> detections;
  bool operator==(const ObjectDetections&) const = default;

  void validate(std::size_t feature_dim) const;
};

struct SituationRole {
  std::string role;
  std::string noun;
  std::optional<Box> box;
  std::optional<std::vector<float>> feature;
  bool operator==(const SituationRole&) const = default;
};

struct SituationFrame {
  std::string verb;
  std::vector<SituationRole> roles;
  std::optional<std::string> place;
  bool operator==(const SituationFrame&) const = default;

  void validate(std::size_t feature_dim, std::size_t max_roles,
                const std::vector<std::string>* role_inventory = nullptr) const;
};

inline constexpr std::size_t kInferencesPerRelation = 5;

struct CommonsenseInferences {
  std::vector<std::string> before;
  std::vector<std::string> after;
  std::vector<std::string> intent;
  /// Relation-start embeddings in (before, after, intent) order.
  std::optional<std::array<std::vector<float>, 3>> start_embeddings;
  bool operator==(const CommonsenseInferences&) const = default;

  void validate(std::size_t vc_dim) const;
};

struct VisualFeatureSet {
  std::string image_id;
  std::size_t feature_dim = 2048;
  std::size_t vc_dim = 0;
  std::optional<ObjectDetections> objects;
  std::optional<SituationFrame> situation;
  std::optional<CommonsenseInferences> inferences;
  bool operator==(const VisualFeatureSet&) const = default;

  void validate(std::size_t max_roles = 7) const;
};

/// Element length limits in subtokens (separators included) plus region caps.
struct LengthLimits {
  std::size_t max_question = 19;
  std::size_t max_answer = 23;
  std::size_t max_rationale = 50;
  std::size_t max_object_labels = 30;
  std::size_t max_situation = 17;
  std::size_t max_vc_text = 148;
  std::size_t max_objects = 28;
  std::size_t max_roles = 7;
  bool operator==(const LengthLimits&) const = default;

  void validate() const;
};

std::string limits_to_json(const LengthLimits& limits);
LengthLimits limits_from_json(std::string_view json);
LengthLimits load_limits(const std::filesystem::path& path);
void save_limits(const LengthLimits& limits, const std::filesystem::path& path);

struct InstanceLoadResult {
  std::vector<RationaleInstance> instances;
  std::size_t dropped_neutral = 0;
};

/// Reads a JSONL manifest. VCR/VQA-E rows carry `question`/`answer`,
/// e-SNLI-VE rows carry `hypothesis`/`label`; neutral e-SNLI-VE rows are
/// dropped and counted. Errors name the 1-based line number.
InstanceLoadResult load_instances(const std::filesystem::path& manifest, Task task);
void write_instances(const std::vector<RationaleInstance>& instances,
                     const std::filesystem::path& manifest);

/// Read access to `features.idx.jsonl` + `features.f32` in one directory.
///
/// The index is parsed on first use; `reads()` counts feature lookups and
/// index loads so callers can assert a path never touched visual inputs.
class FeatureStore {
 public:
  explicit FeatureStore(std::filesystem::path dir);

  VisualFeatureSet load(const std::string& image_id) const;
  bool contains(const std::string& image_id) const;
  std::vector<std::string> image_ids() const;
  std::size_t reads() const { return reads_.load(); }
  const std::filesystem::path& dir() const { return dir_; }

 private:
  void ensure_index() const;

  std::filesystem::path dir_;
  mutable std::once_flag index_once_;
  mutable std::map<std::string, std::string> index_;  // image id -> raw JSON row
  mutable std::vector<float> blob_;
  mutable std::atomic<std::size_t> reads_{0};
};

inline VisualFeatureSet load_features(const FeatureStore& store, const std::string& image_id) {
  return store.load(image_id);
}

/// Exclusive writer for a feature directory. Holds a lock file until
/// `finish()` or destruction.
class FeatureWriter {
 public:
  explicit FeatureWriter(std::filesystem::path dir);
  ~FeatureWriter();
  FeatureWriter(const FeatureWriter&) = delete;
  FeatureWriter& operator=(const FeatureWriter&) = delete;

  void add(const VisualFeatureSet& features);
  void finish();

 private:
  std::filesystem::path dir_;
  std::vector<std::string> rows_;
  std::vector<float> blob_;
  std::map<std::string, bool> seen_;
  bool finished_ = false;
};

/// Nearest-rank percentile: smallest value v in `values` such that at
/// least ceil(p * n) values are <= v.
std::size_t nearest_rank_percentile(std::vector<std::size_t> values, double percentile);

/// Derives limits from the empirical element lengths over `instances`.
/// Visual limits are derived only when `features` is given; otherwise they
/// keep their defaults.
LengthLimits compute_length_limits(const std::vector<RationaleInstance>& instances,
                                   const Vocabulary& vocab, double percentile = 0.99,
                                   const FeatureStore* features = nullptr);

}  // namespace rvt
