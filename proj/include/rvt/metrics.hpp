#pragma once

#include <map>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace rvt {

/// Lowercased alphanumeric runs; punctuation and whitespace separate tokens.
std::vector<std::string> metric_tokens(std::string_view text);

/// Porter (1980) suffix-stripping stemmer for lowercase ASCII words.
std::string porter_stem(std::string word);

/// One reference set per candidate (at least one reference each).
using References = std::vector<std::vector<std::string>>;

/// Corpus BLEU-1..max_n (cumulative, uniform weights) with brevity penalty
/// against the closest reference length. Percent scale.
std::vector<double> bleu(const std::vector<std::string>& candidates, const References& references,
                         std::size_t max_n = 4);

/// Sentence-level BLEU-1..max_n for one pair; zero when any precision is zero.
std::vector<double> sentence_bleu(const std::string& candidate, const std::vector<std::string>& references,
                                  std::size_t max_n = 4);

inline constexpr double kRougeBeta = 1.2;

/// LCS F-measure for one candidate (best precision and recall over references).
double rouge_l_pair(const std::string& candidate, const std::vector<std::string>& references);
/// Mean of rouge_l_pair, percent scale.
double rouge_l(const std::vector<std::string>& candidates, const References& references);

/// Per-candidate CIDEr: for n = 1..4, mean over references of the tf-idf
/// cosine, averaged over n and multiplied by 10. Document frequencies are
/// counted over the reference sets of the corpus.
std::vector<double> cider_per_instance(const std::vector<std::string>& candidates, const References& references);
/// Mean of cider_per_instance times 100, so a perfect corpus scores 1000.
double cider(const std::vector<std::string>& candidates, const References& references);

/// METEOR restricted to exact and Porter-stem matches, best over references.
/// Percent scale for the corpus mean.
double meteor_pair(const std::string& candidate, const std::vector<std::string>& references);
double meteor_reduced(const std::vector<std::string>& candidates, const References& references);

struct StopwordList {
  std::unordered_set<std::string> words;
  /// SHA-256 of the sorted, newline-joined list.
  std::string hash;

  static StopwordList builtin();
  static StopwordList load(const std::string& path);
  static StopwordList from_words(std::vector<std::string> words);
};

/// |content(a) ∩ content(b)| / |content(a)|, or -1 when content(a) is empty.
double content_overlap_pair(const std::string& a, const std::string& b, const StopwordList& stopwords);
/// Mean over pairs with non-empty content(a), percent scale.
double content_word_overlap(const std::vector<std::string>& a, const std::vector<std::string>& b,
                            const StopwordList& stopwords);

struct InstanceScores {
  std::string id;
  std::map<std::string, double> scores;
};

struct MetricReport {
  std::map<std::string, double> corpus;
  std::vector<InstanceScores> instances;
  std::map<std::string, std::string> metadata;

  std::string to_json() const;
};

/// Every measure over aligned (id, candidate, references) triples.
MetricReport score_corpus(const std::vector<std::string>& ids, const std::vector<std::string>& candidates,
                          const References& references, const StopwordList& stopwords);

}  // namespace rvt
