#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rvt/feature_store.hpp"

namespace rvt {

class Vocabulary;

enum class Label { Yes, WeakYes, WeakNo, No };

std::string to_string(Label label);
/// Accepts "yes", "weak_yes", "weak_no", "no" (also with a space instead of
/// the underscore); anything else throws std::invalid_argument.
Label parse_label(std::string_view text);
/// weak_yes -> yes, weak_no -> no.
bool merged_yes(Label label);

// ---------------------------------------------------------------------------
// Phrase extraction

enum class Pos { Det, Pron, Noun, Verb, Aux, Neg, Adj, Adv, Prep, Conj, Num, Punct, Other };

struct TaggedToken {
  std::string text;
  Pos pos = Pos::Other;
};

class PosTagger {
 public:
  virtual ~PosTagger() = default;
  virtual std::vector<TaggedToken> tag(std::string_view text) const = 0;
};

/// Closed-class lexicon plus suffix and context heuristics.
class RuleTagger : public PosTagger {
 public:
  std::vector<TaggedToken> tag(std::string_view text) const override;
};

struct PhraseLists {
  std::vector<std::string> nouns;
  std::vector<std::string> noun_phrases;
  std::vector<std::string> verb_phrases;
  bool operator==(const PhraseLists&) const = default;
  std::size_t total() const { return nouns.size() + noun_phrases.size() + verb_phrases.size(); }
};

/// Nouns are the heads of base noun phrases, noun phrases are maximal
/// determiner/adjective/noun chunks, verb phrases are auxiliary chains with
/// negation plus the main verb (objects and adjuncts dropped). Lowercased,
/// deduplicated, in order of first appearance.
PhraseLists extract_phrases(std::string_view rationale, const PosTagger& tagger);

// ---------------------------------------------------------------------------
// Items and judgments

/// Result-table column an item belongs to.
enum class Column { VCR, ESNLIVEContradiction, ESNLIVEEntailment, VQAE };
inline constexpr std::array<Column, 4> kColumns{Column::VCR, Column::ESNLIVEContradiction,
                                                Column::ESNLIVEEntailment, Column::VQAE};
std::string to_string(Column column);
Column column_for(Task task, std::string_view answer_or_label);

/// Row name used for items carrying gold rationales.
inline constexpr const char* kHumanRow = "human_estimate";

struct EvalItem {
  std::string item_id;
  std::string instance_id;
  std::string image_id;
  Task task = Task::VCR;
  /// A model variant name, or kHumanRow for gold rationales.
  std::string variant;
  std::string question;
  std::string answer;
  std::string rationale;
  PhraseLists offered_phrases;
  std::size_t rationale_length = 0;
  std::size_t context_length = 0;

  Column column() const { return column_for(task, answer); }
  std::string to_json() const;
  static EvalItem from_json(std::string_view line);
};

/// Builds an item; lengths are subtoken counts under `vocab`.
EvalItem make_item(std::string item_id, const RationaleInstance& instance, std::string variant,
                   std::string rationale, const PosTagger& tagger, const Vocabulary& vocab);

struct JudgmentRecord {
  std::string item_id;
  std::string worker_id;
  Label textual_plausibility = Label::No;
  Label visual_plausibility = Label::No;
  Label grammatical = Label::No;
  Label unrelated_content = Label::No;
  PhraseLists unrelated_phrases;
  std::int64_t timestamp = 0;

  bool operator==(const JudgmentRecord&) const = default;
  /// Throws unless every picked phrase is on the item's offered list.
  void validate(const EvalItem& item) const;
  std::string to_json() const;
  static JudgmentRecord from_json(std::string_view line);
};

void write_items(const std::filesystem::path& path, const std::vector<EvalItem>& items);
std::vector<EvalItem> read_items(const std::filesystem::path& path);
void write_records(const std::filesystem::path& path, const std::vector<JudgmentRecord>& records);
std::vector<JudgmentRecord> read_records(const std::filesystem::path& path);

using RecordsByItem = std::map<std::string, std::vector<JudgmentRecord>>;
RecordsByItem group_by_item(const std::vector<JudgmentRecord>& records);

// ---------------------------------------------------------------------------
// Aggregation

enum class LabelField { Textual, Visual, Grammatical, UnrelatedContent };
Label field_of(const JudgmentRecord& record, LabelField field);

/// Ratio of merged-yes labels among one item's records.
double item_yes_ratio(const std::vector<JudgmentRecord>& records, LabelField field);

struct SampleScore {
  double score = 0.0;
  std::size_t items = 0;
  /// Items without records (not counted in the score).
  std::size_t uncovered = 0;
};

/// Mean over items of the per-item merged-yes ratio, times 100. Applied to
/// the grammatical field it gives the grammaticality ratio.
SampleScore aggregate_plausibility(const RecordsByItem& records, LabelField field);

struct FidelityScores {
  double overall = 0.0;
  double entity = 0.0;
  double entity_detail = 0.0;
  double action = 0.0;
  std::size_t items = 0;
  /// Items excluded from each fine-grained mean for lack of offered phrases.
  std::size_t entity_excluded = 0;
  std::size_t entity_detail_excluded = 0;
  std::size_t action_excluded = 0;
};

/// Per-item ratio of merged-no on unrelated_content.
double item_fidelity(const std::vector<JudgmentRecord>& records);

/// Overall fidelity plus fine-grained ratios of relevant (unpicked) phrases,
/// averaged per record, then per item. Percent scale.
FidelityScores aggregate_fidelity(const RecordsByItem& records, const std::map<std::string, EvalItem>& items);

/// Pearson product-moment correlation. Throws std::domain_error when either
/// list has zero variance, std::invalid_argument on size problems.
double correlate(const std::vector<double>& x, const std::vector<double>& y);

/// Plausibility buckets 0, 1/3, 2/3, 1 (three records per item).
inline constexpr std::size_t kBuckets = 4;

struct LengthGroup {
  std::size_t count = 0;
  double mean_rationale = 0.0;
  double var_rationale = 0.0;
  double mean_context = 0.0;
  double var_context = 0.0;
};

struct LengthAnalysis {
  std::array<LengthGroup, kBuckets> groups{};
  std::size_t excluded = 0;
};

/// Index of a unanimous-implausible (0) to unanimous-plausible (3) bucket,
/// or nullopt unless exactly three records are given.
std::optional<std::size_t> plausibility_bucket(const std::vector<JudgmentRecord>& records,
                                               LabelField field = LabelField::Visual);

/// Rationale and context lengths grouped by visual-plausibility bucket.
/// Variances are population variances.
LengthAnalysis analyze_lengths(const std::vector<EvalItem>& items, const RecordsByItem& records);

struct VariationHistogram {
  std::array<std::size_t, kBuckets> counts{};
  std::size_t excluded = 0;
};

VariationHistogram plausibility_variation(const RecordsByItem& records, LabelField field = LabelField::Visual);

// ---------------------------------------------------------------------------
// Report

/// JSON shaped like the result tables: one row per model variant plus the
/// human estimate, one column per task split. Throws when a record refers to
/// an unknown item.
std::string build_report(const std::vector<EvalItem>& items, const std::vector<JudgmentRecord>& records);

}  // namespace rvt
