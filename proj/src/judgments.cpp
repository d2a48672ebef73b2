#include "rvt/judgments.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "rvt/fusion.hpp"
#include "rvt/text_codec.hpp"

namespace rvt {

using nlohmann::json;

std::string to_string(Label label) {
  switch (label) {
    case Label::Yes: return "yes";
    case Label::WeakYes: return "weak_yes";
    case Label::WeakNo: return "weak_no";
    case Label::No: return "no";
  }
  return "no";
}

Label parse_label(std::string_view text) {
  if (text == "yes") return Label::Yes;
  if (text == "weak_yes" || text == "weak yes") return Label::WeakYes;
  if (text == "weak_no" || text == "weak no") return Label::WeakNo;
  if (text == "no") return Label::No;
  throw std::invalid_argument("invalid label '" + std::string(text) + "' (expected yes, weak_yes, weak_no, no)");
}

bool merged_yes(Label label) { return label == Label::Yes || label == Label::WeakYes; }

namespace {

using Lexicon = std::unordered_map<std::string, Pos>;

const Lexicon& lexicon() {
  static const Lexicon lex = [] {
    Lexicon l;
    auto add = [&](Pos p, std::initializer_list<const char*> words) {
      for (const char* w : words) l.emplace(w, p);
    };
    add(Pos::Det, {"the", "a", "an", "this", "that", "these", "those", "his", "her", "their", "its", "my", "your",
                   "our", "some", "any", "every", "each", "no", "another", "all", "both", "several", "many", "few",
                   "much"});
    add(Pos::Pron, {"i", "you", "he", "she", "it", "we", "they", "me", "him", "us", "them", "someone", "somebody",
                    "something", "anyone", "anybody", "anything", "everyone", "everybody", "everything", "nobody",
                    "nothing", "who", "whom", "what", "which", "there", "himself", "herself", "themselves",
                    "itself", "myself", "yourself", "ourselves", "one"});
    add(Pos::Aux, {"is", "are", "was", "were", "be", "been", "being", "am", "has", "have", "had", "do", "does",
                   "did", "will", "would", "can", "could", "should", "may", "might", "must", "shall", "'re", "'m",
                   "'ve", "'ll", "'d", "ca", "wo"});
    add(Pos::Neg, {"not", "n't", "never"});
    add(Pos::Prep, {"in", "on", "at", "to", "from", "with", "by", "for", "of", "into", "onto", "over", "under",
                    "near", "behind", "beside", "between", "through", "about", "around", "toward", "towards",
                    "after", "before", "during", "across", "along", "against", "inside", "outside", "up", "down",
                    "off", "out", "without", "above", "below", "upon", "within", "next"});
    add(Pos::Conj, {"and", "or", "but", "because", "so", "while", "since", "if", "as", "than", "when", "then",
                    "although", "though", "whether", "where", "why", "how"});
    add(Pos::Adv, {"very", "also", "just", "too", "really", "still", "already", "always", "often", "now", "here",
                   "quite", "rather", "almost", "probably", "maybe", "perhaps", "together", "away", "back", "again",
                   "even", "only", "soon", "yet", "likely"});
    add(Pos::Adj, {"big", "small", "red", "blue", "green", "white", "black", "yellow", "brown", "young", "old",
                   "happy", "sad", "angry", "tall", "short", "large", "little", "good", "bad", "new", "other",
                   "same", "different", "dark", "wet", "empty", "full", "hot", "cold", "busy", "nice", "pretty",
                   "long", "high", "low", "open", "upset", "able", "ready", "sure", "alone", "asleep", "awake",
                   "afraid", "aware", "outdoors", "indoors", "clean", "dirty", "late", "early", "fast", "slow"});
    add(Pos::Num, {"one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "first",
                   "second", "third"});
    add(Pos::Verb, {"hold", "holds", "held", "look", "looks", "sit", "sits", "sat", "stand", "stands", "stood",
                    "wear", "wears", "wore", "worn", "eat", "eats", "ate", "eaten", "want", "wants", "go", "goes",
                    "went", "gone", "come", "comes", "came", "see", "sees", "saw", "seen", "get", "gets", "got",
                    "take", "takes", "took", "taken", "make", "makes", "made", "give", "gives", "gave", "given",
                    "know", "knows", "knew", "known", "think", "thinks", "thought", "seem", "seems", "appear",
                    "appears", "need", "needs", "like", "likes", "try", "tries", "run", "runs", "ran", "walk",
                    "walks", "play", "plays", "ride", "rides", "rode", "talk", "talks", "say", "says", "said",
                    "tell", "tells", "told", "feel", "feels", "felt", "keep", "keeps", "kept", "put", "puts",
                    "show", "shows", "point", "points", "smile", "smiles", "cry", "cries", "sleep", "sleeps",
                    "slept", "drink", "drinks", "drank", "love", "loves", "read", "reads", "write", "writes",
                    "wrote", "swim", "swims", "throw", "throws", "threw", "catch", "catches", "caught", "lie",
                    "lies", "lay", "carry", "carries", "use", "uses", "wait", "waits", "watch", "watches", "help",
                    "helps", "jump", "jumps", "fall", "falls", "fell", "hit", "hits", "kick", "kicks", "stare",
                    "stares", "cook", "cooks", "drive", "drives", "drove", "wave", "waves", "work", "works", "sing",
                    "sings", "sang", "dance", "dances", "laugh", "laughs", "close", "closes", "let", "lets",
                    "become", "becomes", "became", "include", "includes", "contain", "contains", "mean", "means",
                    "buy", "buys", "bought", "find", "finds", "found", "leave", "left", "meet", "meets", "met",
                    "sell", "sells", "sold", "speak", "speaks", "spoke", "bring", "brings", "brought"});
    add(Pos::Noun, {"thing", "king", "ring", "morning", "evening", "building", "ceiling", "clothing", "string",
                    "wing", "spring", "bed", "shed", "sled", "family", "belly", "jelly", "lily", "fly", "people",
                    "man", "woman", "men", "women", "person", "child", "children", "bus", "glass", "dress", "grass",
                    "class", "boss", "time", "way", "day", "wedding", "ceremony", "meeting", "party", "painting",
                    "sidewalk", "field", "food", "table", "room", "street", "car", "kitchen", "restaurant"});
    return l;
  }();
  return lex;
}

const std::unordered_set<std::string>& subject_pronouns() {
  static const std::unordered_set<std::string> s{"i",      "you",     "he",       "she",      "we",        "they",
                                                 "it",     "who",     "someone",  "somebody", "everyone",  "everybody",
                                                 "nobody", "anyone",  "anybody"};
  return s;
}

bool ends_with(const std::string& w, std::string_view suffix) {
  return w.size() > suffix.size() && w.compare(w.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_word_char(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

// Whitespace split, punctuation peeled into its own tokens, and English
// clitics ("n't", "'s", "'re", ...) split off their host.
std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    if (is_word_char(c)) {
      std::size_t j = i;
      while (j < text.size() && (is_word_char(static_cast<unsigned char>(text[j])) ||
                                 (text[j] == '\'' && j + 1 < text.size() &&
                                  std::isalpha(static_cast<unsigned char>(text[j + 1])))))
        ++j;
      std::string word(text.substr(i, j - i));
      std::string lower = word;
      for (auto& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      if (ends_with(lower, "n't")) {
        out.push_back(word.substr(0, word.size() - 3));
        out.push_back(word.substr(word.size() - 3));
      } else if (const auto apos = word.find('\''); apos != std::string::npos && apos > 0) {
        out.push_back(word.substr(0, apos));
        out.push_back(word.substr(apos));
      } else {
        out.push_back(std::move(word));
      }
      i = j;
    } else {
      out.emplace_back(1, static_cast<char>(c));
      ++i;
    }
  }
  return out;
}

std::string lower(std::string s) {
  for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty() && w.front() != '\'') out.push_back(' ');
    out += w;
  }
  return out;
}

void push_unique(std::vector<std::string>& list, std::string value) {
  if (std::find(list.begin(), list.end(), value) == list.end()) list.push_back(std::move(value));
}

bool all_digits(const std::string& w) {
  return !w.empty() && std::all_of(w.begin(), w.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
}

}  // namespace

std::vector<TaggedToken> RuleTagger::tag(std::string_view text) const {
  const auto words = split_words(text);
  std::vector<TaggedToken> out;
  out.reserve(words.size());
  const auto& lex = lexicon();
  for (std::size_t i = 0; i < words.size(); ++i) {
    const std::string w = lower(words[i]);
    const Pos prev = out.empty() ? Pos::Punct : out.back().pos;
    const std::string prev_word = out.empty() ? "" : lower(out.back().text);
    const std::string next_word = i + 1 < words.size() ? lower(words[i + 1]) : "";
    Pos p = Pos::Noun;
    if (!is_word_char(static_cast<unsigned char>(w.front())) && w.front() != '\'') {
      p = Pos::Punct;
    } else if (all_digits(w)) {
      p = Pos::Num;
    } else if (w == "'s") {
      p = prev == Pos::Pron ? Pos::Aux : Pos::Det;
    } else if (const auto it = lex.find(w); it != lex.end()) {
      p = it->second;
      if (p == Pos::Verb && (prev == Pos::Det || prev == Pos::Adj)) p = Pos::Noun;
      if (p == Pos::Det && (w == "her" || w == "that" || w == "this" || w == "these" || w == "those")) {
        const auto nx = lex.find(next_word);
        const bool next_nominal = !next_word.empty() && is_word_char(static_cast<unsigned char>(next_word.front())) &&
                                  (nx == lex.end() || nx->second == Pos::Adj || nx->second == Pos::Noun ||
                                   nx->second == Pos::Num);
        if (!next_nominal) p = w == "that" ? Pos::Conj : Pos::Pron;
      }
    } else if (ends_with(w, "ing") && w.size() > 4) {
      p = (prev == Pos::Det || prev == Pos::Adj) ? Pos::Noun : Pos::Verb;
    } else if (ends_with(w, "ed") && w.size() > 3) {
      p = (prev == Pos::Det || prev == Pos::Adj) ? Pos::Adj : Pos::Verb;
    } else if (ends_with(w, "ly") && w.size() > 3) {
      p = Pos::Adv;
    } else if (ends_with(w, "ous") || ends_with(w, "ful") || ends_with(w, "ive") || ends_with(w, "able") ||
               ends_with(w, "ible") || ends_with(w, "ic") || ends_with(w, "ish") || ends_with(w, "less")) {
      p = Pos::Adj;
    } else if ((prev == Pos::Pron && subject_pronouns().count(prev_word)) ||
               prev == Pos::Aux || prev == Pos::Neg || prev_word == "to") {
      p = Pos::Verb;
    } else if (prev == Pos::Noun && ends_with(w, "s") && !ends_with(w, "ss") && !ends_with(w, "us") &&
               !ends_with(w, "is")) {
      const auto nx = lex.find(next_word);
      const bool clause_edge = next_word.empty() || !is_word_char(static_cast<unsigned char>(next_word.front())) ||
                               (nx != lex.end() && (nx->second == Pos::Det || nx->second == Pos::Prep ||
                                                    nx->second == Pos::Adv || nx->second == Pos::Conj));
      if (clause_edge) p = Pos::Verb;
    }
    out.push_back({words[i], p});
  }
  return out;
}

PhraseLists extract_phrases(std::string_view rationale, const PosTagger& tagger) {
  const auto toks = tagger.tag(rationale);
  PhraseLists out;
  std::size_t i = 0;
  while (i < toks.size()) {
    const Pos p = toks[i].pos;
    if (p == Pos::Det || p == Pos::Adj || p == Pos::Num || p == Pos::Noun) {
      std::size_t j = i + 1;
      while (j < toks.size()) {
        const Pos q = toks[j].pos;
        const bool possessive = q == Pos::Det && toks[j].text == "'s" && toks[j - 1].pos == Pos::Noun;
        if (q == Pos::Adj || q == Pos::Num || q == Pos::Noun || possessive) ++j;
        else break;
      }
      std::size_t last_noun = j;
      for (std::size_t k = i; k < j; ++k)
        if (toks[k].pos == Pos::Noun) {
          last_noun = k;
          const bool head = k + 1 == j || toks[k + 1].pos != Pos::Noun;
          if (head) push_unique(out.nouns, lower(toks[k].text));
        }
      if (last_noun != j) {
        std::vector<std::string> words;
        for (std::size_t k = i; k <= last_noun; ++k) words.push_back(lower(toks[k].text));
        push_unique(out.noun_phrases, join(words));
      }
      i = j;
    } else if (p == Pos::Aux || p == Pos::Verb) {
      std::vector<std::string> words;
      std::size_t j = i;
      bool seen_verb = false;
      while (j < toks.size()) {
        const Pos q = toks[j].pos;
        if (q == Pos::Aux && !seen_verb) {
          words.push_back(lower(toks[j].text));
        } else if (q == Pos::Neg) {
          words.push_back(lower(toks[j].text));
        } else if (q == Pos::Verb && !seen_verb) {
          words.push_back(lower(toks[j].text));
          seen_verb = true;
        } else if (q != Pos::Adv) {
          break;
        }
        ++j;
      }
      push_unique(out.verb_phrases, join(words));
      i = j;
    } else {
      ++i;
    }
  }
  return out;
}

std::string to_string(Column column) {
  switch (column) {
    case Column::VCR: return "VCR";
    case Column::ESNLIVEContradiction: return "e-SNLI-VE (contradiction)";
    case Column::ESNLIVEEntailment: return "e-SNLI-VE (entailment)";
    case Column::VQAE: return "VQA-E";
  }
  return "VCR";
}

Column column_for(Task task, std::string_view answer_or_label) {
  switch (task) {
    case Task::VCR: return Column::VCR;
    case Task::VQAE: return Column::VQAE;
    case Task::ESNLIVE:
      if (answer_or_label == "entailment") return Column::ESNLIVEEntailment;
      if (answer_or_label == "contradiction") return Column::ESNLIVEContradiction;
      throw std::invalid_argument("e-SNLI-VE item with label '" + std::string(answer_or_label) + "'");
  }
  return Column::VCR;
}

namespace {

json phrases_json(const PhraseLists& p) {
  return {{"nouns", p.nouns}, {"noun_phrases", p.noun_phrases}, {"verb_phrases", p.verb_phrases}};
}

PhraseLists phrases_from(const json& j) {
  PhraseLists p;
  p.nouns = j.at("nouns").get<std::vector<std::string>>();
  p.noun_phrases = j.at("noun_phrases").get<std::vector<std::string>>();
  p.verb_phrases = j.at("verb_phrases").get<std::vector<std::string>>();
  return p;
}

template <typename T, typename Parse>
std::vector<T> read_jsonl(const std::filesystem::path& path, Parse parse) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<T> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

template <typename T>
void write_jsonl(const std::filesystem::path& path, const std::vector<T>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : rows) out << r.to_json() << '\n';
}

}  // namespace

std::string EvalItem::to_json() const {
  json j{{"item_id", item_id},
         {"instance_id", instance_id},
         {"image_id", image_id},
         {"task", std::string(rvt::to_string(task))},
         {"variant", variant},
         {"question", question},
         {"answer", answer},
         {"rationale", rationale},
         {"offered_phrases", phrases_json(offered_phrases)},
         {"rationale_length", rationale_length},
         {"context_length", context_length}};
  return j.dump();
}

EvalItem EvalItem::from_json(std::string_view line) {
  const json j = json::parse(line);
  EvalItem it;
  it.item_id = j.at("item_id").get<std::string>();
  it.instance_id = j.at("instance_id").get<std::string>();
  it.image_id = j.at("image_id").get<std::string>();
  it.task = parse_task(j.at("task").get<std::string>());
  it.variant = j.at("variant").get<std::string>();
  it.question = j.at("question").get<std::string>();
  it.answer = j.at("answer").get<std::string>();
  it.rationale = j.at("rationale").get<std::string>();
  it.offered_phrases = phrases_from(j.at("offered_phrases"));
  it.rationale_length = j.value("rationale_length", std::size_t{0});
  it.context_length = j.value("context_length", std::size_t{0});
  if (it.item_id.empty()) throw std::invalid_argument("item_id is empty");
  return it;
}

EvalItem make_item(std::string item_id, const RationaleInstance& instance, std::string variant,
                   std::string rationale, const PosTagger& tagger, const Vocabulary& vocab) {
  EvalItem it;
  it.item_id = std::move(item_id);
  it.instance_id = instance.instance_id;
  it.image_id = instance.image_id;
  it.task = instance.task;
  it.variant = std::move(variant);
  it.question = instance.context_question_or_hypothesis;
  it.answer = instance.context_answer_or_label;
  it.rationale = std::move(rationale);
  it.offered_phrases = extract_phrases(it.rationale, tagger);
  it.rationale_length = vocab.encode(it.rationale).size();
  it.context_length = vocab.encode(it.question).size() + vocab.encode(it.answer).size();
  return it;
}

void JudgmentRecord::validate(const EvalItem& item) const {
  if (item_id != item.item_id) throw std::invalid_argument("record is for a different item");
  if (worker_id.empty()) throw std::invalid_argument("worker_id is empty");
  auto check = [](const std::vector<std::string>& picked, const std::vector<std::string>& offered,
                  const char* kind) {
    for (const auto& p : picked)
      if (std::find(offered.begin(), offered.end(), p) == offered.end())
        throw std::invalid_argument(std::string(kind) + " '" + p + "' was not offered");
  };
  check(unrelated_phrases.nouns, item.offered_phrases.nouns, "noun");
  check(unrelated_phrases.noun_phrases, item.offered_phrases.noun_phrases, "noun phrase");
  check(unrelated_phrases.verb_phrases, item.offered_phrases.verb_phrases, "verb phrase");
}

std::string JudgmentRecord::to_json() const {
  json j{{"item_id", item_id},
         {"worker_id", worker_id},
         {"textual_plausibility", to_string(textual_plausibility)},
         {"visual_plausibility", to_string(visual_plausibility)},
         {"grammatical", to_string(grammatical)},
         {"unrelated_content", to_string(unrelated_content)},
         {"unrelated_phrases", phrases_json(unrelated_phrases)},
         {"timestamp", timestamp}};
  return j.dump();
}

JudgmentRecord JudgmentRecord::from_json(std::string_view line) {
  const json j = json::parse(line);
  JudgmentRecord r;
  r.item_id = j.at("item_id").get<std::string>();
  r.worker_id = j.at("worker_id").get<std::string>();
  r.textual_plausibility = parse_label(j.at("textual_plausibility").get<std::string>());
  r.visual_plausibility = parse_label(j.at("visual_plausibility").get<std::string>());
  r.grammatical = parse_label(j.at("grammatical").get<std::string>());
  r.unrelated_content = parse_label(j.at("unrelated_content").get<std::string>());
  if (j.contains("unrelated_phrases")) r.unrelated_phrases = phrases_from(j.at("unrelated_phrases"));
  r.timestamp = j.value("timestamp", std::int64_t{0});
  return r;
}

void write_items(const std::filesystem::path& path, const std::vector<EvalItem>& items) { write_jsonl(path, items); }
std::vector<EvalItem> read_items(const std::filesystem::path& path) {
  return read_jsonl<EvalItem>(path, [](const std::string& l) { return EvalItem::from_json(l); });
}
void write_records(const std::filesystem::path& path, const std::vector<JudgmentRecord>& records) {
  write_jsonl(path, records);
}
std::vector<JudgmentRecord> read_records(const std::filesystem::path& path) {
  return read_jsonl<JudgmentRecord>(path, [](const std::string& l) { return JudgmentRecord::from_json(l); });
}

RecordsByItem group_by_item(const std::vector<JudgmentRecord>& records) {
  RecordsByItem out;
  for (const auto& r : records) out[r.item_id].push_back(r);
  return out;
}

Label field_of(const JudgmentRecord& record, LabelField field) {
  switch (field) {
    case LabelField::Textual: return record.textual_plausibility;
    case LabelField::Visual: return record.visual_plausibility;
    case LabelField::Grammatical: return record.grammatical;
    case LabelField::UnrelatedContent: return record.unrelated_content;
  }
  return record.visual_plausibility;
}

double item_yes_ratio(const std::vector<JudgmentRecord>& records, LabelField field) {
  if (records.empty()) throw std::invalid_argument("item has no records");
  std::size_t yes = 0;
  for (const auto& r : records) yes += merged_yes(field_of(r, field)) ? 1 : 0;
  return static_cast<double>(yes) / static_cast<double>(records.size());
}

SampleScore aggregate_plausibility(const RecordsByItem& records, LabelField field) {
  SampleScore s;
  double sum = 0.0;
  for (const auto& [id, recs] : records) {
    if (recs.empty()) {
      ++s.uncovered;
      continue;
    }
    sum += item_yes_ratio(recs, field);
    ++s.items;
  }
  if (s.items == 0) throw std::invalid_argument("aggregate_plausibility: empty sample");
  s.score = 100.0 * sum / static_cast<double>(s.items);
  return s;
}

double item_fidelity(const std::vector<JudgmentRecord>& records) {
  return 1.0 - item_yes_ratio(records, LabelField::UnrelatedContent);
}

FidelityScores aggregate_fidelity(const RecordsByItem& records, const std::map<std::string, EvalItem>& items) {
  FidelityScores f;
  double overall = 0.0;
  std::array<double, 3> sums{};
  std::array<std::size_t, 3> counted{};
  for (const auto& [id, recs] : records) {
    if (recs.empty()) continue;
    const auto it = items.find(id);
    if (it == items.end()) throw std::invalid_argument("aggregate_fidelity: unknown item " + id);
    overall += item_fidelity(recs);
    ++f.items;
    const auto& offered = it->second.offered_phrases;
    const std::array<std::size_t, 3> offered_n{offered.nouns.size(), offered.noun_phrases.size(),
                                               offered.verb_phrases.size()};
    for (std::size_t k = 0; k < 3; ++k) {
      if (offered_n[k] == 0) continue;
      double per_item = 0.0;
      for (const auto& r : recs) {
        const auto& picked = k == 0 ? r.unrelated_phrases.nouns
                             : k == 1 ? r.unrelated_phrases.noun_phrases
                                      : r.unrelated_phrases.verb_phrases;
        const std::set<std::string> distinct(picked.begin(), picked.end());
        per_item += static_cast<double>(offered_n[k] - std::min(distinct.size(), offered_n[k])) /
                    static_cast<double>(offered_n[k]);
      }
      sums[k] += per_item / static_cast<double>(recs.size());
      ++counted[k];
    }
  }
  if (f.items == 0) throw std::invalid_argument("aggregate_fidelity: empty sample");
  f.overall = 100.0 * overall / static_cast<double>(f.items);
  auto mean = [&](std::size_t k) { return counted[k] ? 100.0 * sums[k] / static_cast<double>(counted[k]) : 0.0; };
  f.entity = mean(0);
  f.entity_detail = mean(1);
  f.action = mean(2);
  f.entity_excluded = f.items - counted[0];
  f.entity_detail_excluded = f.items - counted[1];
  f.action_excluded = f.items - counted[2];
  return f;
}

double correlate(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("correlate: lists differ in length");
  if (x.size() < 2) throw std::invalid_argument("correlate: needs at least two items");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw std::domain_error("correlate: undefined for zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::optional<std::size_t> plausibility_bucket(const std::vector<JudgmentRecord>& records, LabelField field) {
  if (records.size() != 3) return std::nullopt;
  std::size_t yes = 0;
  for (const auto& r : records) yes += merged_yes(field_of(r, field)) ? 1 : 0;
  return yes;
}

LengthAnalysis analyze_lengths(const std::vector<EvalItem>& items, const RecordsByItem& records) {
  LengthAnalysis a;
  std::array<std::vector<std::pair<double, double>>, kBuckets> values;
  for (const auto& item : items) {
    const auto it = records.find(item.item_id);
    const auto bucket = it == records.end() ? std::nullopt : plausibility_bucket(it->second);
    if (!bucket) {
      ++a.excluded;
      continue;
    }
    values[*bucket].emplace_back(static_cast<double>(item.rationale_length),
                                 static_cast<double>(item.context_length));
  }
  for (std::size_t b = 0; b < kBuckets; ++b) {
    auto& g = a.groups[b];
    g.count = values[b].size();
    if (g.count == 0) continue;
    const double n = static_cast<double>(g.count);
    for (const auto& [r, c] : values[b]) {
      g.mean_rationale += r / n;
      g.mean_context += c / n;
    }
    for (const auto& [r, c] : values[b]) {
      g.var_rationale += (r - g.mean_rationale) * (r - g.mean_rationale) / n;
      g.var_context += (c - g.mean_context) * (c - g.mean_context) / n;
    }
  }
  return a;
}

VariationHistogram plausibility_variation(const RecordsByItem& records, LabelField field) {
  VariationHistogram h;
  for (const auto& [id, recs] : records) {
    const auto b = plausibility_bucket(recs, field);
    if (b) ++h.counts[*b];
    else ++h.excluded;
  }
  return h;
}

namespace {

json number_or_null(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

std::string build_report(const std::vector<EvalItem>& items, const std::vector<JudgmentRecord>& records) {
  std::map<std::string, EvalItem> by_id;
  for (const auto& it : items)
    if (!by_id.emplace(it.item_id, it).second) throw std::invalid_argument("duplicate item id " + it.item_id);

  const auto grouped = group_by_item(records);
  std::size_t orphan_records = 0;
  for (const auto& [id, recs] : grouped)
    if (!by_id.count(id)) orphan_records += recs.size();
  if (orphan_records > 0)
    throw std::invalid_argument(std::to_string(orphan_records) + " judgment records refer to unknown items");

  std::vector<std::string> rows;
  for (const auto& v : all_variants()) rows.push_back(v.name());
  rows.push_back(kHumanRow);

  // cell key: (row, column) -> item ids
  std::map<std::pair<std::string, Column>, std::vector<std::string>> cells;
  std::size_t uncovered = 0;
  for (const auto& it : items) {
    if (std::find(rows.begin(), rows.end(), it.variant) == rows.end())
      throw std::invalid_argument("item " + it.item_id + " has unknown variant '" + it.variant + "'");
    cells[{it.variant, it.column()}].push_back(it.item_id);
    if (!grouped.count(it.item_id)) ++uncovered;
  }

  auto subset = [&](const std::vector<std::string>& ids) {
    RecordsByItem out;
    for (const auto& id : ids)
      if (const auto g = grouped.find(id); g != grouped.end()) out.emplace(id, g->second);
    return out;
  };
  auto plaus = [&](const RecordsByItem& sub, LabelField field) -> std::optional<double> {
    if (sub.empty()) return std::nullopt;
    return aggregate_plausibility(sub, field).score;
  };

  json columns = json::array();
  for (const auto c : kColumns) columns.push_back(to_string(c));
  const std::string all_esnlive = "e-SNLI-VE (all)";

  json visual, textual, grammar, correlation, fine;
  for (const auto c : kColumns) fine[to_string(c)] = json::object();
  for (const auto& row : rows) {
    std::vector<std::string> esnlive_ids;
    for (const auto c : kColumns) {
      const auto col = to_string(c);
      const auto cell = cells.find({row, c});
      const auto ids = cell == cells.end() ? std::vector<std::string>{} : cell->second;
      if (c == Column::ESNLIVEContradiction || c == Column::ESNLIVEEntailment)
        esnlive_ids.insert(esnlive_ids.end(), ids.begin(), ids.end());
      const auto sub = subset(ids);
      visual[row][col] = number_or_null(plaus(sub, LabelField::Visual));
      textual[row][col] = number_or_null(plaus(sub, LabelField::Textual));
      grammar[row][col] = number_or_null(plaus(sub, LabelField::Grammatical));

      json corr{{"plausibility", nullptr}, {"fidelity", nullptr}, {"r", nullptr}};
      json fg{{"fidelity", nullptr}, {"entity", nullptr}, {"entity_detail", nullptr}, {"action", nullptr}};
      if (!sub.empty()) {
        const auto fid = aggregate_fidelity(sub, by_id);
        corr["plausibility"] = aggregate_plausibility(sub, LabelField::Visual).score;
        corr["fidelity"] = fid.overall;
        std::vector<double> p, f;
        for (const auto& [id, recs] : sub) {
          p.push_back(item_yes_ratio(recs, LabelField::Visual));
          f.push_back(item_fidelity(recs));
        }
        try {
          corr["r"] = correlate(p, f);
        } catch (const std::exception&) {
          corr["r_status"] = "undefined";
        }
        fg["fidelity"] = fid.overall;
        if (fid.entity_excluded < fid.items) fg["entity"] = fid.entity;
        if (fid.entity_detail_excluded < fid.items) fg["entity_detail"] = fid.entity_detail;
        if (fid.action_excluded < fid.items) fg["action"] = fid.action;
      }
      correlation[row][col] = corr;
      fine[col][row] = fg;
    }
    visual[row][all_esnlive] = number_or_null(plaus(subset(esnlive_ids), LabelField::Visual));
  }

  json lengths, variation;
  for (const auto& row : rows) {
    std::vector<EvalItem> row_items;
    for (const auto& it : items)
      if (it.variant == row) row_items.push_back(it);
    const auto la = analyze_lengths(row_items, grouped);
    json groups = json::array();
    for (std::size_t b = 0; b < kBuckets; ++b) {
      const auto& g = la.groups[b];
      groups.push_back({{"plausibility", static_cast<double>(b) / 3.0},
                        {"count", g.count},
                        {"mean_rationale_length", g.mean_rationale},
                        {"var_rationale_length", g.var_rationale},
                        {"mean_context_length", g.mean_context},
                        {"var_context_length", g.var_context}});
    }
    lengths[row] = {{"groups", groups}, {"excluded", la.excluded}};
    RecordsByItem row_records;
    for (const auto& it : row_items)
      if (const auto g = grouped.find(it.item_id); g != grouped.end()) row_records.emplace(it.item_id, g->second);
    const auto h = plausibility_variation(row_records);
    variation[row] = {{"counts", h.counts}, {"excluded", h.excluded}};
  }

  json report{{"rows", rows},
              {"columns", columns},
              {"visual_plausibility", visual},
              {"textual_plausibility", textual},
              {"plausibility_fidelity", correlation},
              {"fine_grained_fidelity", fine},
              {"grammaticality", grammar},
              {"length_by_plausibility", lengths},
              {"plausibility_variation", variation},
              {"coverage",
               {{"items", items.size()},
                {"records", records.size()},
                {"items_without_records", uncovered},
                {"orphan_records", orphan_records},
                {"joins_complete", uncovered == 0 && orphan_records == 0}}}};
  return report.dump(2);
}

}  // namespace rvt
