#include "rvt/metrics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <unordered_map>

#include "rvt/hashing.hpp"

namespace rvt {

using nlohmann::json;

namespace {

using Tokens = std::vector<std::string>;
using NgramCounts = std::unordered_map<std::string, double>;

NgramCounts ngrams(const Tokens& toks, std::size_t n) {
  NgramCounts out;
  if (toks.size() < n) return out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    std::string key = toks[i];
    for (std::size_t k = 1; k < n; ++k) {
      key.push_back('\x1f');
      key += toks[i + k];
    }
    out[key] += 1.0;
  }
  return out;
}

void check_aligned(const std::vector<std::string>& candidates, const References& references) {
  if (candidates.empty()) throw std::invalid_argument("metrics: empty candidate set");
  if (candidates.size() != references.size())
    throw std::invalid_argument("metrics: candidates and references differ in length");
  for (const auto& refs : references)
    if (refs.empty()) throw std::invalid_argument("metrics: a candidate has no reference");
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::size_t closest_ref_length(std::size_t c, const std::vector<Tokens>& refs) {
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto d = [&](std::size_t len) { return len > c ? len - c : c - len; };
    if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
  }
  return best;
}

struct BleuStats {
  std::vector<double> matched, total;
  double cand_len = 0.0, ref_len = 0.0;
  explicit BleuStats(std::size_t max_n) : matched(max_n, 0.0), total(max_n, 0.0) {}

  void add(const Tokens& cand, const std::vector<Tokens>& refs) {
    for (std::size_t n = 1; n <= matched.size(); ++n) {
      const auto c = ngrams(cand, n);
      NgramCounts max_ref;
      for (const auto& r : refs)
        for (const auto& [g, cnt] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], cnt);
      for (const auto& [g, cnt] : c) {
        total[n - 1] += cnt;
        const auto it = max_ref.find(g);
        if (it != max_ref.end()) matched[n - 1] += std::min(cnt, it->second);
      }
    }
    cand_len += static_cast<double>(cand.size());
    ref_len += static_cast<double>(closest_ref_length(cand.size(), refs));
  }

  std::vector<double> scores() const {
    std::vector<double> out(matched.size(), 0.0);
    if (cand_len == 0.0) return out;
    const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
    double log_sum = 0.0;
    for (std::size_t n = 0; n < matched.size(); ++n) {
      if (matched[n] == 0.0) break;
      log_sum += std::log(matched[n] / total[n]);
      out[n] = 100.0 * bp * std::exp(log_sum / static_cast<double>(n + 1));
    }
    return out;
  }
};

std::vector<Tokens> tokenize_all(const std::vector<std::string>& texts) {
  std::vector<Tokens> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(metric_tokens(t));
  return out;
}

// Porter stemmer state over a single word; indices follow the reference
// implementation (k = last index, j = end of the stem under test).
class Porter {
 public:
  explicit Porter(std::string w) : b_(std::move(w)), k_(static_cast<int>(b_.size()) - 1) {}

  std::string run() {
    if (k_ <= 1) return b_;
    step1ab();
    if (k_ > 0) {
      step1c();
      step2();
      step3();
      step4();
      step5();
    }
    return b_;
  }

 private:
  bool cons(int i) const {
    switch (b_[static_cast<std::size_t>(i)]) {
      case 'a': case 'e': case 'i': case 'o': case 'u': return false;
      case 'y': return i == 0 ? true : !cons(i - 1);
      default: return true;
    }
  }
  int m() const {
    int n = 0, i = 0;
    while (true) {
      if (i > j_) return n;
      if (!cons(i)) break;
      ++i;
    }
    ++i;
    while (true) {
      while (true) {
        if (i > j_) return n;
        if (cons(i)) break;
        ++i;
      }
      ++i;
      ++n;
      while (true) {
        if (i > j_) return n;
        if (!cons(i)) break;
        ++i;
      }
      ++i;
    }
  }
  bool vowel_in_stem() const {
    for (int i = 0; i <= j_; ++i)
      if (!cons(i)) return true;
    return false;
  }
  bool doublec(int j) const {
    if (j < 1) return false;
    if (b_[static_cast<std::size_t>(j)] != b_[static_cast<std::size_t>(j - 1)]) return false;
    return cons(j);
  }
  bool cvc(int i) const {
    if (i < 2 || !cons(i) || cons(i - 1) || !cons(i - 2)) return false;
    const char ch = b_[static_cast<std::size_t>(i)];
    return ch != 'w' && ch != 'x' && ch != 'y';
  }
  bool ends(std::string_view s) {
    const int len = static_cast<int>(s.size());
    if (len > k_ + 1) return false;
    if (b_.compare(static_cast<std::size_t>(k_ - len + 1), s.size(), s) != 0) return false;
    j_ = k_ - len;
    return true;
  }
  void cut(int k) {
    k_ = k;
    b_.resize(static_cast<std::size_t>(k_ + 1));
  }
  void setto(std::string_view s) {
    cut(j_);
    b_ += s;
    k_ = static_cast<int>(b_.size()) - 1;
  }
  void r(std::string_view s) {
    if (m() > 0) setto(s);
  }
  char at(int i) const { return i < 0 ? '\0' : b_[static_cast<std::size_t>(i)]; }

  void step1ab() {
    if (at(k_) == 's') {
      if (ends("sses")) cut(k_ - 2);
      else if (ends("ies")) setto("i");
      else if (at(k_ - 1) != 's') cut(k_ - 1);
    }
    if (ends("eed")) {
      if (m() > 0) cut(k_ - 1);
    } else if ((ends("ed") || ends("ing")) && vowel_in_stem()) {
      cut(j_);
      if (ends("at")) setto("ate");
      else if (ends("bl")) setto("ble");
      else if (ends("iz")) setto("ize");
      else if (doublec(k_)) {
        const char ch = at(k_);
        if (ch != 'l' && ch != 's' && ch != 'z') cut(k_ - 1);
      } else {
        j_ = k_;
        if (m() == 1 && cvc(k_)) setto("e");
      }
    }
  }
  void step1c() {
    if (ends("y") && vowel_in_stem()) b_[static_cast<std::size_t>(k_)] = 'i';
  }
  bool rule(std::string_view suffix, std::string_view repl) {
    if (!ends(suffix)) return false;
    r(repl);
    return true;
  }
  void step2() {
    switch (at(k_ - 1)) {
      case 'a': rule("ational", "ate") || rule("tional", "tion"); break;
      case 'c': rule("enci", "ence") || rule("anci", "ance"); break;
      case 'e': rule("izer", "ize"); break;
      case 'l': rule("bli", "ble") || rule("alli", "al") || rule("entli", "ent") || rule("eli", "e") ||
                    rule("ousli", "ous");
        break;
      case 'o': rule("ization", "ize") || rule("ation", "ate") || rule("ator", "ate"); break;
      case 's': rule("alism", "al") || rule("iveness", "ive") || rule("fulness", "ful") || rule("ousness", "ous");
        break;
      case 't': rule("aliti", "al") || rule("iviti", "ive") || rule("biliti", "ble"); break;
      case 'g': rule("logi", "log"); break;
      default: break;
    }
  }
  void step3() {
    switch (at(k_)) {
      case 'e': rule("icate", "ic") || rule("ative", "") || rule("alize", "al"); break;
      case 'i': rule("iciti", "ic"); break;
      case 'l': rule("ical", "ic") || rule("ful", ""); break;
      case 's': rule("ness", ""); break;
      default: break;
    }
  }
  void step4() {
    bool found = false;
    switch (at(k_ - 1)) {
      case 'a': found = ends("al"); break;
      case 'c': found = ends("ance") || ends("ence"); break;
      case 'e': found = ends("er"); break;
      case 'i': found = ends("ic"); break;
      case 'l': found = ends("able") || ends("ible"); break;
      case 'n': found = ends("ant") || ends("ement") || ends("ment") || ends("ent"); break;
      case 'o':
        found = (ends("ion") && j_ >= 0 && (at(j_) == 's' || at(j_) == 't')) || ends("ou");
        break;
      case 's': found = ends("ism"); break;
      case 't': found = ends("ate") || ends("iti"); break;
      case 'u': found = ends("ous"); break;
      case 'v': found = ends("ive"); break;
      case 'z': found = ends("ize"); break;
      default: break;
    }
    if (found && m() > 1) cut(j_);
  }
  void step5() {
    j_ = k_;
    if (at(k_) == 'e') {
      const int a = m();
      if (a > 1 || (a == 1 && !cvc(k_ - 1))) cut(k_ - 1);
    }
    j_ = k_;
    if (at(k_) == 'l' && doublec(k_) && m() > 1) cut(k_ - 1);
  }

  std::string b_;
  int k_;
  int j_ = 0;
};

struct Alignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
};

Alignment align(const Tokens& cand, const Tokens& ref) {
  std::vector<int> link(cand.size(), -1);
  std::vector<bool> used(ref.size(), false);
  for (std::size_t i = 0; i < cand.size(); ++i)
    for (std::size_t j = 0; j < ref.size(); ++j)
      if (!used[j] && cand[i] == ref[j]) {
        link[i] = static_cast<int>(j);
        used[j] = true;
        break;
      }
  std::vector<std::string> ref_stems;
  for (const auto& w : ref) ref_stems.push_back(porter_stem(w));
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (link[i] >= 0) continue;
    const auto stem = porter_stem(cand[i]);
    for (std::size_t j = 0; j < ref.size(); ++j)
      if (!used[j] && stem == ref_stems[j]) {
        link[i] = static_cast<int>(j);
        used[j] = true;
        break;
      }
  }
  Alignment a;
  int prev = -2;
  bool prev_linked = false;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (link[i] < 0) {
      prev_linked = false;
      continue;
    }
    ++a.matches;
    if (!prev_linked || link[i] != prev + 1) ++a.chunks;
    prev = link[i];
    prev_linked = true;
  }
  return a;
}

constexpr double kMeteorAlpha = 0.9;
constexpr double kMeteorBeta = 3.0;
constexpr double kMeteorGamma = 0.5;

double meteor_tokens(const Tokens& cand, const Tokens& ref) {
  const auto a = align(cand, ref);
  if (a.matches == 0) return 0.0;
  const double m = static_cast<double>(a.matches);
  const double p = m / static_cast<double>(cand.size());
  const double r = m / static_cast<double>(ref.size());
  const double fmean = p * r / (kMeteorAlpha * p + (1.0 - kMeteorAlpha) * r);
  const double frag = static_cast<double>(a.chunks - 1) / m;
  return fmean * (1.0 - kMeteorGamma * std::pow(frag, kMeteorBeta));
}

std::unordered_set<std::string> content_words(const std::string& text, const StopwordList& stopwords) {
  std::unordered_set<std::string> out;
  for (auto& t : metric_tokens(text))
    if (!stopwords.words.count(t)) out.insert(std::move(t));
  return out;
}

std::string join_refs(const std::vector<std::string>& refs) {
  std::string out;
  for (const auto& r : refs) {
    if (!out.empty()) out.push_back(' ');
    out += r;
  }
  return out;
}

}  // namespace

std::vector<std::string> metric_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (const char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u) || u >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string porter_stem(std::string word) { return Porter(std::move(word)).run(); }

std::vector<double> bleu(const std::vector<std::string>& candidates, const References& references,
                         std::size_t max_n) {
  check_aligned(candidates, references);
  if (max_n == 0) throw std::invalid_argument("bleu: max_n must be positive");
  BleuStats stats(max_n);
  for (std::size_t i = 0; i < candidates.size(); ++i)
    stats.add(metric_tokens(candidates[i]), tokenize_all(references[i]));
  return stats.scores();
}

std::vector<double> sentence_bleu(const std::string& candidate, const std::vector<std::string>& references,
                                  std::size_t max_n) {
  if (references.empty()) throw std::invalid_argument("bleu: no reference");
  BleuStats stats(max_n);
  stats.add(metric_tokens(candidate), tokenize_all(references));
  return stats.scores();
}

double rouge_l_pair(const std::string& candidate, const std::vector<std::string>& references) {
  const auto cand = metric_tokens(candidate);
  if (cand.empty()) return 0.0;
  double best_p = 0.0, best_r = 0.0;
  for (const auto& ref_text : references) {
    const auto ref = metric_tokens(ref_text);
    if (ref.empty()) continue;
    const auto lcs = static_cast<double>(lcs_length(cand, ref));
    best_p = std::max(best_p, lcs / static_cast<double>(cand.size()));
    best_r = std::max(best_r, lcs / static_cast<double>(ref.size()));
  }
  if (best_p == 0.0 || best_r == 0.0) return 0.0;
  const double b2 = kRougeBeta * kRougeBeta;
  return (1.0 + b2) * best_p * best_r / (best_r + b2 * best_p);
}

double rouge_l(const std::vector<std::string>& candidates, const References& references) {
  check_aligned(candidates, references);
  double sum = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) sum += rouge_l_pair(candidates[i], references[i]);
  return 100.0 * sum / static_cast<double>(candidates.size());
}

std::vector<double> cider_per_instance(const std::vector<std::string>& candidates, const References& references) {
  check_aligned(candidates, references);
  std::unordered_set<std::string> distinct;
  for (const auto& refs : references) distinct.insert(refs.begin(), refs.end());
  if (distinct.size() < 2) throw std::invalid_argument("cider: needs at least two distinct references");

  constexpr std::size_t kMaxN = 4;
  const std::size_t n_docs = candidates.size();
  std::vector<std::vector<std::vector<NgramCounts>>> ref_grams(n_docs);
  std::vector<NgramCounts> df(kMaxN);
  for (std::size_t d = 0; d < n_docs; ++d) {
    std::vector<std::unordered_set<std::string>> seen(kMaxN);
    for (const auto& r : references[d]) {
      const auto toks = metric_tokens(r);
      std::vector<NgramCounts> per_n;
      for (std::size_t n = 1; n <= kMaxN; ++n) {
        per_n.push_back(ngrams(toks, n));
        for (const auto& [g, c] : per_n.back()) seen[n - 1].insert(g);
      }
      ref_grams[d].push_back(std::move(per_n));
    }
    for (std::size_t n = 0; n < kMaxN; ++n)
      for (const auto& g : seen[n]) df[n][g] += 1.0;
  }
  const double log_docs = std::log(static_cast<double>(n_docs));
  auto weigh = [&](const NgramCounts& counts, std::size_t n) {
    NgramCounts w;
    for (const auto& [g, c] : counts) {
      const auto it = df[n].find(g);
      const double dfv = it == df[n].end() ? 1.0 : std::max(1.0, it->second);
      w[g] = c * (log_docs - std::log(dfv));
    }
    return w;
  };
  auto cosine = [](const NgramCounts& a, const NgramCounts& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [g, v] : a) {
      na += v * v;
      const auto it = b.find(g);
      if (it != b.end()) dot += v * it->second;
    }
    for (const auto& [g, v] : b) nb += v * v;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
  };

  std::vector<double> out(n_docs, 0.0);
  for (std::size_t d = 0; d < n_docs; ++d) {
    const auto toks = metric_tokens(candidates[d]);
    double total = 0.0;
    for (std::size_t n = 0; n < kMaxN; ++n) {
      const auto cv = weigh(ngrams(toks, n + 1), n);
      double sum = 0.0;
      for (const auto& rg : ref_grams[d]) sum += cosine(cv, weigh(rg[n], n));
      total += sum / static_cast<double>(ref_grams[d].size());
    }
    out[d] = 10.0 * total / static_cast<double>(kMaxN);
  }
  return out;
}

double cider(const std::vector<std::string>& candidates, const References& references) {
  const auto per = cider_per_instance(candidates, references);
  double sum = 0.0;
  for (double v : per) sum += v;
  return 100.0 * sum / static_cast<double>(per.size());
}

double meteor_pair(const std::string& candidate, const std::vector<std::string>& references) {
  const auto cand = metric_tokens(candidate);
  if (cand.empty()) return 0.0;
  double best = 0.0;
  for (const auto& r : references) {
    const auto ref = metric_tokens(r);
    if (!ref.empty()) best = std::max(best, meteor_tokens(cand, ref));
  }
  return best;
}

double meteor_reduced(const std::vector<std::string>& candidates, const References& references) {
  check_aligned(candidates, references);
  double sum = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) sum += meteor_pair(candidates[i], references[i]);
  return 100.0 * sum / static_cast<double>(candidates.size());
}

StopwordList StopwordList::from_words(std::vector<std::string> words) {
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  StopwordList list;
  std::string joined;
  for (const auto& w : words) {
    joined += w;
    joined.push_back('\n');
    list.words.insert(w);
  }
  list.hash = sha256_hex(joined);
  return list;
}

StopwordList StopwordList::builtin() {
  static const char* const kWords[] = {
      "i", "me", "my", "myself", "we", "our", "ours", "ourselves", "you", "your", "yours", "yourself",
      "yourselves", "he", "him", "his", "himself", "she", "her", "hers", "herself", "it", "its", "itself",
      "they", "them", "their", "theirs", "themselves", "what", "which", "who", "whom", "this", "that",
      "these", "those", "am", "is", "are", "was", "were", "be", "been", "being", "have", "has", "had",
      "having", "do", "does", "did", "doing", "a", "an", "the", "and", "but", "if", "or", "because", "as",
      "until", "while", "of", "at", "by", "for", "with", "about", "against", "between", "into", "through",
      "during", "before", "after", "above", "below", "to", "from", "up", "down", "in", "out", "on", "off",
      "over", "under", "again", "further", "then", "once", "here", "there", "when", "where", "why", "how",
      "all", "any", "both", "each", "few", "more", "most", "other", "some", "such", "no", "nor", "not",
      "only", "own", "same", "so", "than", "too", "very", "s", "t", "can", "will", "just", "don", "should",
      "now"};
  return from_words(std::vector<std::string>(std::begin(kWords), std::end(kWords)));
}

StopwordList StopwordList::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open stopword list " + path);
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line))
    for (auto& t : metric_tokens(line)) words.push_back(std::move(t));
  return from_words(std::move(words));
}

double content_overlap_pair(const std::string& a, const std::string& b, const StopwordList& stopwords) {
  const auto ca = content_words(a, stopwords);
  if (ca.empty()) return -1.0;
  const auto cb = content_words(b, stopwords);
  std::size_t shared = 0;
  for (const auto& w : ca) shared += cb.count(w);
  return static_cast<double>(shared) / static_cast<double>(ca.size());
}

double content_word_overlap(const std::vector<std::string>& a, const std::vector<std::string>& b,
                            const StopwordList& stopwords) {
  if (a.empty()) throw std::invalid_argument("content_word_overlap: empty input");
  if (a.size() != b.size()) throw std::invalid_argument("content_word_overlap: inputs differ in length");
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double v = content_overlap_pair(a[i], b[i], stopwords);
    if (v < 0.0) continue;
    sum += v;
    ++counted;
  }
  return counted == 0 ? 0.0 : 100.0 * sum / static_cast<double>(counted);
}

std::string MetricReport::to_json() const {
  json j;
  j["corpus"] = corpus;
  j["metadata"] = metadata;
  j["instances"] = json::array();
  for (const auto& inst : instances) j["instances"].push_back({{"id", inst.id}, {"scores", inst.scores}});
  return j.dump(2);
}

MetricReport score_corpus(const std::vector<std::string>& ids, const std::vector<std::string>& candidates,
                          const References& references, const StopwordList& stopwords) {
  check_aligned(candidates, references);
  if (ids.size() != candidates.size()) throw std::invalid_argument("score_corpus: ids and candidates differ in length");
  MetricReport rep;
  const auto b = bleu(candidates, references);
  for (std::size_t n = 0; n < b.size(); ++n) rep.corpus["bleu_" + std::to_string(n + 1)] = b[n];
  rep.corpus["meteor"] = meteor_reduced(candidates, references);
  rep.corpus["rouge_l"] = rouge_l(candidates, references);
  std::vector<double> cider_scores;
  try {
    cider_scores = cider_per_instance(candidates, references);
    double sum = 0.0;
    for (double v : cider_scores) sum += v;
    rep.corpus["cider"] = 100.0 * sum / static_cast<double>(cider_scores.size());
  } catch (const std::invalid_argument&) {
    rep.metadata["cider_status"] = "undefined: fewer than two distinct references";
  }
  std::vector<std::string> joined;
  for (const auto& refs : references) joined.push_back(join_refs(refs));
  rep.corpus["content_word_overlap"] = content_word_overlap(candidates, joined, stopwords);

  for (std::size_t i = 0; i < candidates.size(); ++i) {
    InstanceScores s{ids[i], {}};
    const auto sb = sentence_bleu(candidates[i], references[i]);
    for (std::size_t n = 0; n < sb.size(); ++n) s.scores["bleu_" + std::to_string(n + 1)] = sb[n];
    s.scores["meteor"] = 100.0 * meteor_pair(candidates[i], references[i]);
    s.scores["rouge_l"] = 100.0 * rouge_l_pair(candidates[i], references[i]);
    if (!cider_scores.empty()) s.scores["cider"] = 100.0 * cider_scores[i];
    const double ov = content_overlap_pair(candidates[i], joined[i], stopwords);
    if (ov >= 0.0) s.scores["content_word_overlap"] = 100.0 * ov;
    rep.instances.push_back(std::move(s));
  }

  rep.metadata["tokenizer"] = "lowercase alphanumeric runs; punctuation and whitespace split";
  rep.metadata["stopword_hash"] = stopwords.hash;
  rep.metadata["bleu"] = "corpus cumulative BLEU-n, uniform weights, closest-reference brevity penalty, no smoothing";
  rep.metadata["meteor"] = "reduced: exact + Porter stem matching only, alpha 0.9 beta 3 gamma 0.5, fragmentation (chunks-1)/matches";
  rep.metadata["rouge_l"] = "LCS F-measure, beta 1.2, best precision/recall over references";
  rep.metadata["cider"] = "tf-idf cosine n=1..4, idf over reference sets, 10 x mean over n, reported x100 (range 0..1000)";
  rep.metadata["scale"] = "percent; cider x100";
  return rep;
}

}  // namespace rvt
