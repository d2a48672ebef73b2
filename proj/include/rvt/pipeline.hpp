#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rvt/feature_store.hpp"
#include "rvt/fusion.hpp"
#include "rvt/judgments.hpp"
#include "rvt/model.hpp"
#include "rvt/text_codec.hpp"

namespace rvt {

struct FixtureOptions {
  std::uint64_t seed = 1;
  std::size_t train_per_task = 16;
  std::size_t dev_per_task = 8;
  std::size_t feature_dim = 2048;
  std::size_t vc_dim = 768;
  /// Learned merges on top of specials and bytes.
  std::size_t merges = 320;
};

/// Layout written by generate_fixtures under one directory.
struct FixtureLayout {
  std::filesystem::path root;
  std::filesystem::path roles() const { return root / "roles.txt"; }
  std::filesystem::path vocab() const { return root / "vocab.json"; }
  std::filesystem::path features() const { return root / "features"; }
  std::filesystem::path images() const { return root / "images"; }
  std::filesystem::path manifest(Task task) const;
};

/// Synthetic instances for all three tasks (e-SNLI-VE includes neutral rows
/// that the loader drops), features for every image, placeholder images, a
/// role inventory and a BPE vocabulary trained on the fixture text.
/// Byte-identical output for identical options.
void generate_fixtures(const std::filesystem::path& dir, const FixtureOptions& options);

/// Deterministic synthetic instances for one task (used by the generator
/// and by tests that need in-memory data).
std::vector<RationaleInstance> synthetic_instances(Task task, std::size_t train, std::size_t dev, std::uint64_t seed);
/// Deterministic synthetic features for one image.
VisualFeatureSet synthetic_features(const std::string& image_id, std::size_t feature_dim, std::size_t vc_dim,
                                    std::uint64_t seed);
/// Role names used by the synthetic situation frames.
std::vector<std::string> synthetic_roles();

struct Generation {
  std::string instance_id;
  std::string variant;
  std::string text;
  std::string to_json() const;
  static Generation from_json(std::string_view line);
};

void write_generations(const std::filesystem::path& path, const std::vector<Generation>& rows);
std::vector<Generation> read_generations(const std::filesystem::path& path);

/// Greedy rationale for one instance (prompt = fused context up to the
/// rationale begin separator).
std::string generate_rationale(const TransformerLM& model, const Variant& variant, const RationaleInstance& instance,
                               const VisualFeatureSet* features, const Vocabulary& vocab, const LengthLimits& limits);

/// Evaluation items for generated rationales plus one gold item per
/// distinct instance (row kHumanRow). Item ids are "<variant>:<instance>".
std::vector<EvalItem> make_tasks(const std::vector<Generation>& generations,
                                 const std::vector<RationaleInstance>& instances, const Vocabulary& vocab,
                                 const PosTagger& tagger, bool include_gold = true);

/// Three synthetic worker judgments per item, reproducible from `seed`.
std::vector<JudgmentRecord> simulate_judgments(const std::vector<EvalItem>& items, std::uint64_t seed,
                                               std::size_t workers_per_item = 3);

}  // namespace rvt
