#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rvt/feature_store.hpp"
#include "rvt/text_codec.hpp"

namespace rvt {

enum class FusionMode { Baseline, Uniform, Hybrid };

/// Visual source. Uniform fusion uses Objects/Situation/VisComet as text;
/// hybrid fusion uses Objects/SituationRoles/VisComet as embeddings.
enum class VisualSource { None, Objects, Situation, SituationRoles, VisComet };

/// One of the seven trained model variants.
struct Variant {
  FusionMode mode = FusionMode::Baseline;
  VisualSource source = VisualSource::None;
  bool operator==(const Variant&) const = default;

  std::string name() const;
  static Variant parse(std::string_view name);
  /// Accepts CLI style pairs such as ("uniform", "situation") or ("baseline", "").
  static Variant from_mode_source(std::string_view mode, std::string_view source);
  bool uses_features() const { return mode != FusionMode::Baseline; }
};

/// Baseline, 3 uniform, 3 hybrid; the row order of the result tables.
const std::array<Variant, 7>& all_variants();

enum class Segment : TokenId { Visual = 0, Question = 1, Answer = 2, Rationale = 3 };
inline constexpr std::size_t kNumSegments = 4;

enum class SlotKind { Roi, WholeImage, VcStart };

struct VisualSlot {
  std::size_t index = 0;
  SlotKind kind = SlotKind::Roi;
  /// Index into FusedSequence::regions (Roi, WholeImage) or
  /// FusedSequence::vc_vectors (VcStart).
  std::size_t embedding_ref = 0;
};

/// (x1/W, y1/H, x2/W, y2/H, area fraction).
struct CoordinateVector {
  std::array<double, 5> values{};
  double operator[](std::size_t i) const { return values[i]; }
};

CoordinateVector coordinate_vector(const Box& box, const ImageSize& image_size);

struct RegionInput {
  std::vector<float> feature;
  CoordinateVector coords;
};

struct TruncationReport {
  std::size_t question_tokens_dropped = 0;
  std::size_t answer_tokens_dropped = 0;
  std::size_t rationale_tokens_dropped = 0;
  std::size_t object_label_tokens_dropped = 0;
  std::size_t situation_tokens_dropped = 0;
  std::size_t vc_tokens_dropped = 0;
  std::size_t objects_dropped = 0;
  std::size_t roles_dropped = 0;
};

struct FusedSequence {
  std::vector<TokenId> token_ids;
  std::vector<TokenId> segment_ids;
  std::vector<TokenId> position_ids;
  std::vector<VisualSlot> visual_slots;
  std::vector<bool> rationale_mask;
  TruncationReport truncation_report;

  Variant variant;
  std::vector<RegionInput> regions;
  std::vector<std::vector<float>> vc_vectors;
  /// Region ref added to every text token in hybrid region modes.
  std::optional<std::size_t> whole_image_ref;

  std::size_t size() const { return token_ids.size(); }
  std::size_t masked_count() const;

  /// Appends one rationale token the way the builder would have placed it:
  /// next position, rationale segment, whole-image reference if any.
  void append_rationale_token(TokenId id, bool masked = true);
};

enum class RationalePart {
  /// [..., <b_rtnl>, rationale..., <e_rtnl>] with the loss mask set.
  Full,
  /// Stops right after <b_rtnl>; the generation prompt.
  PromptOnly,
};

/// Upper bound on the fused length for a variant under `limits`.
std::size_t max_input_length(const Variant& variant, const LengthLimits& limits);

/// Element serializers shared by fusion and limit estimation. Each returns
/// the full element including its delimiters, before clipping.
std::vector<TokenId> question_element(const RationaleInstance& instance, const Vocabulary& vocab);
std::vector<TokenId> answer_element(const RationaleInstance& instance, const Vocabulary& vocab);
std::vector<TokenId> rationale_element(const RationaleInstance& instance, const Vocabulary& vocab);
/// Non-person labels, first occurrence only, between object-block delimiters.
std::vector<TokenId> object_labels_element(const ObjectDetections& objects, const Vocabulary& vocab);
std::string merged_object_labels(const ObjectDetections& objects);
std::vector<TokenId> situation_element(const SituationFrame& frame, const Vocabulary& vocab);
std::vector<TokenId> viscomet_element(const CommonsenseInferences& inferences,
                                      const Vocabulary& vocab);

FusedSequence build_baseline(const RationaleInstance& instance, const Vocabulary& vocab,
                             const LengthLimits& limits, RationalePart part = RationalePart::Full);

FusedSequence build_uniform(const RationaleInstance& instance, const VisualFeatureSet& features,
                            VisualSource source, const Vocabulary& vocab,
                            const LengthLimits& limits, RationalePart part = RationalePart::Full);

FusedSequence build_hybrid(const RationaleInstance& instance, const VisualFeatureSet& features,
                           VisualSource source, const Vocabulary& vocab, const LengthLimits& limits,
                           RationalePart part = RationalePart::Full);

/// Dispatches on the variant; `features` may be null only for the baseline.
FusedSequence build_sequence(const Variant& variant, const RationaleInstance& instance,
                             const VisualFeatureSet* features, const Vocabulary& vocab,
                             const LengthLimits& limits, RationalePart part = RationalePart::Full);

/// Checks every structural invariant of a built sequence; returns a list of
/// violations (empty when valid).
std::vector<std::string> check_invariants(const FusedSequence& seq, const Vocabulary& vocab,
                                          const LengthLimits& limits);

}  // namespace rvt
