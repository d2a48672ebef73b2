#include "rvt/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include "rvt/random.hpp"

namespace rvt {

using nlohmann::json;

namespace {

const std::vector<std::string> kPeople{"man", "woman", "boy", "girl", "chef", "doctor", "waiter", "student"};
const std::vector<std::string> kObjects{"cup",   "plate", "book",  "phone", "umbrella", "bag",
                                        "ball",  "guitar", "knife", "bottle", "laptop",  "hat"};
const std::vector<std::string> kVerbs{"dining", "reading", "cooking", "talking", "walking", "playing", "drinking",
                                      "running"};
const std::vector<std::string> kPlaces{"restaurant", "kitchen", "park", "street", "office", "library", "beach",
                                       "classroom"};
const std::vector<std::string> kExtras{"table", "chair", "car", "dog", "tree", "food", "person", "food"};
const std::vector<std::string> kRoles{"agent", "item", "tool", "food", "container", "source", "destination",
                                      "vehicle", "coagent", "victim"};

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (const char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[rng.index(v.size())];
}

struct Scene {
  std::string person, object, verb, other_verb, place;
  std::vector<std::string> extras;
};

Scene scene_for(const std::string& image_id, std::uint64_t seed) {
  Rng rng(derive_seed(seed, fnv1a(image_id)));
  Scene s;
  s.person = pick(rng, kPeople);
  s.object = pick(rng, kObjects);
  s.verb = pick(rng, kVerbs);
  do s.other_verb = pick(rng, kVerbs);
  while (s.other_verb == s.verb);
  s.place = pick(rng, kPlaces);
  const auto n = 1 + rng.index(4);
  for (std::size_t i = 0; i < n; ++i) s.extras.push_back(pick(rng, kExtras));
  return s;
}

std::vector<float> random_vector(Rng& rng, std::size_t dim) {
  std::vector<float> v(dim);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

Box random_box(Rng& rng, const ImageSize& size) {
  const double w = 32 + std::floor(rng.uniform() * (size.width / 2));
  const double h = 32 + std::floor(rng.uniform() * (size.height / 2));
  const double x1 = std::floor(rng.uniform() * (size.width - w));
  const double y1 = std::floor(rng.uniform() * (size.height - h));
  return {x1, y1, x1 + w, y1 + h};
}

std::string task_prefix(Task task) {
  switch (task) {
    case Task::VCR: return "vcr";
    case Task::ESNLIVE: return "esnlive";
    case Task::VQAE: return "vqae";
  }
  return "vcr";
}

RationaleInstance instance_for(Task task, const std::string& id, const std::string& image_id, const Scene& s,
                               std::size_t k) {
  RationaleInstance inst;
  inst.instance_id = id;
  inst.image_id = image_id;
  inst.task = task;
  switch (task) {
    case Task::VCR: {
      static const char* const kQ[] = {"why is the %p holding the %o ?", "what will the %p do with the %o ?",
                                       "where is the %p going with the %o ?"};
      static const char* const kA[] = {"the %p wants to keep %v .", "the %p will use it while %v .",
                                       "the %p is heading to the %l ."};
      const auto t = k % 3;
      inst.context_question_or_hypothesis = kQ[t];
      inst.context_answer_or_label = kA[t];
      inst.gold_rationale = "the %p is %v in the %l and needs the %o .";
      break;
    }
    case Task::VQAE:
      inst.context_question_or_hypothesis = k % 2 ? "what is the %p holding ?" : "where is the %p %v ?";
      inst.context_answer_or_label = k % 2 ? "%o" : "%l";
      inst.gold_rationale = k % 2 ? "the %p is holding a %o while %v ." : "the %p is %v at the %l .";
      break;
    case Task::ESNLIVE: {
      const auto t = k % 3;
      if (t == 0) {
        inst.context_question_or_hypothesis = "a %p is %v in a %l .";
        inst.context_answer_or_label = "entailment";
        inst.gold_rationale = "the %p is %v in the %l with a %o .";
      } else if (t == 1) {
        inst.context_question_or_hypothesis = "a %p is %w outside .";
        inst.context_answer_or_label = "contradiction";
        inst.gold_rationale = "the %p is %v not %w .";
      } else {
        inst.context_question_or_hypothesis = "a %p is %v with a friend .";
        inst.context_answer_or_label = "neutral";
        inst.gold_rationale = "the %p may be %v alone .";
      }
      break;
    }
  }
  auto fill = [&](std::string text) {
    const std::pair<const char*, const std::string*> subs[] = {
        {"%p", &s.person}, {"%o", &s.object}, {"%v", &s.verb}, {"%w", &s.other_verb}, {"%l", &s.place}};
    for (const auto& [key, value] : subs)
      for (auto pos = text.find(key); pos != std::string::npos; pos = text.find(key, pos + value->size()))
        text.replace(pos, 2, *value);
    return text;
  };
  inst.context_question_or_hypothesis = fill(inst.context_question_or_hypothesis);
  inst.context_answer_or_label = fill(inst.context_answer_or_label);
  inst.gold_rationale = fill(inst.gold_rationale);
  return inst;
}

std::size_t utf8_sequence_length(const std::string& s, std::size_t i) {
  const auto b = static_cast<unsigned char>(s[i]);
  std::size_t n = 0;
  if (b < 0x80) return 1;
  if ((b & 0xE0) == 0xC0 && b >= 0xC2) n = 2;
  else if ((b & 0xF0) == 0xE0) n = 3;
  else if ((b & 0xF8) == 0xF0 && b <= 0xF4) n = 4;
  else return 0;
  if (i + n > s.size()) return 0;
  for (std::size_t k = 1; k < n; ++k)
    if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return 0;
  const auto b1 = static_cast<unsigned char>(s[i + 1]);
  if ((b == 0xE0 && b1 < 0xA0) || (b == 0xED && b1 > 0x9F) || (b == 0xF0 && b1 < 0x90) || (b == 0xF4 && b1 > 0x8F))
    return 0;
  return n;
}

/// Replaces every byte that is not part of a valid UTF-8 sequence with U+FFFD.
std::string scrub_utf8(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size();) {
    const auto n = utf8_sequence_length(s, i);
    if (n == 0) {
      out += "\xEF\xBF\xBD";
      ++i;
    } else {
      out.append(s, i, n);
      i += n;
    }
  }
  return out;
}

std::string placeholder_svg(const std::string& image_id, const Scene& s) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\">"
         "<rect width=\"640\" height=\"480\" fill=\"#dde\"/>"
         "<text x=\"20\" y=\"40\" font-size=\"24\">" +
         image_id + "</text><text x=\"20\" y=\"80\" font-size=\"20\">a " + s.person + " " + s.verb + " in the " +
         s.place + " with a " + s.object + "</text></svg>\n";
}

}  // namespace

std::vector<std::string> synthetic_roles() { return kRoles; }

std::filesystem::path FixtureLayout::manifest(Task task) const {
  return root / task_prefix(task) / "instances.jsonl";
}

std::vector<RationaleInstance> synthetic_instances(Task task, std::size_t train, std::size_t dev,
                                                   std::uint64_t seed) {
  std::vector<RationaleInstance> out;
  std::set<std::string> contexts;
  const std::string prefix = task_prefix(task);
  std::size_t accepted = 0;
  for (std::size_t k = 0; accepted < train + dev; ++k) {
    if (k > 100 * (train + dev) + 1000) throw std::runtime_error("synthetic_instances: cannot find distinct contexts");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04zu", k);
    const std::string image_id = prefix + "_img_" + buf;
    const auto s = scene_for(image_id, seed);
    auto inst = instance_for(task, prefix + "_" + buf, image_id, s, k);
    if (!contexts.insert(inst.context_question_or_hypothesis + "|" + inst.context_answer_or_label).second) continue;
    inst.split = accepted < train ? Split::Train : Split::Dev;
    // Neutral rows do not count toward the requested sizes; the loader drops them.
    if (inst.context_answer_or_label != "neutral") ++accepted;
    out.push_back(std::move(inst));
  }
  return out;
}

VisualFeatureSet synthetic_features(const std::string& image_id, std::size_t feature_dim, std::size_t vc_dim,
                                    std::uint64_t seed) {
  const auto s = scene_for(image_id, seed);
  Rng rng(derive_seed(seed ^ 0xFEA7ull, fnv1a(image_id)));
  VisualFeatureSet fs;
  fs.image_id = image_id;
  fs.feature_dim = feature_dim;
  fs.vc_dim = vc_dim;

  ObjectDetections objs;
  objs.image_size = {640, 480};
  objs.whole_image_feature = random_vector(rng, feature_dim);
  std::vector<std::string> labels{"person", s.object};
  labels.insert(labels.end(), s.extras.begin(), s.extras.end());
  for (const auto& l : labels) objs.detections.push_back({l, random_box(rng, objs.image_size), random_vector(rng, feature_dim)});
  fs.objects = std::move(objs);

  SituationFrame frame;
  frame.verb = s.verb;
  frame.roles.push_back({"agent", s.person, random_box(rng, {640, 480}), random_vector(rng, feature_dim)});
  frame.roles.push_back({"item", s.object, random_box(rng, {640, 480}), random_vector(rng, feature_dim)});
  if (rng.uniform() < 0.5) frame.roles.push_back({"tool", pick(rng, kObjects), std::nullopt, std::nullopt});
  frame.place = s.place;
  fs.situation = std::move(frame);

  CommonsenseInferences inf;
  inf.before = {"walk into the " + s.place, "pick up the " + s.object, "meet a friend", "look for a seat",
                "put on a coat"};
  inf.after = {"put down the " + s.object, "leave the " + s.place, "go home", "keep " + s.verb, "smile"};
  inf.intent = {"enjoy " + s.verb, "use the " + s.object, "relax", "be with friends", "rest"};
  inf.start_embeddings = std::array<std::vector<float>, 3>{random_vector(rng, vc_dim), random_vector(rng, vc_dim),
                                                           random_vector(rng, vc_dim)};
  fs.inferences = std::move(inf);
  return fs;
}

void generate_fixtures(const std::filesystem::path& dir, const FixtureOptions& options) {
  const FixtureLayout layout{dir};
  std::filesystem::create_directories(dir);
  std::filesystem::create_directories(layout.images());
  std::filesystem::remove_all(layout.features());

  {
    std::ofstream roles(layout.roles());
    roles << "# situation roles used by the synthetic frames\n";
    for (const auto& r : kRoles) roles << r << '\n';
  }

  std::vector<std::string> corpus;
  FeatureWriter writer(layout.features());
  for (const Task task : {Task::VCR, Task::ESNLIVE, Task::VQAE}) {
    const auto instances = synthetic_instances(task, options.train_per_task, options.dev_per_task, options.seed);
    std::filesystem::create_directories(layout.manifest(task).parent_path());
    write_instances(instances, layout.manifest(task));
    for (const auto& inst : instances) {
      corpus.push_back(inst.context_question_or_hypothesis);
      corpus.push_back(inst.context_answer_or_label);
      corpus.push_back(inst.gold_rationale);
      const auto fs = synthetic_features(inst.image_id, options.feature_dim, options.vc_dim, options.seed);
      writer.add(fs);
      for (const auto& d : fs.objects->detections) corpus.push_back(d.label);
      corpus.push_back(fs.situation->verb);
      for (const auto& r : fs.situation->roles) corpus.push_back(r.noun);
      for (const auto* list : {&fs.inferences->before, &fs.inferences->after, &fs.inferences->intent})
        for (const auto& t : *list) corpus.push_back(t);
      std::ofstream img(layout.images() / (inst.image_id + ".svg"));
      img << placeholder_svg(inst.image_id, scene_for(inst.image_id, options.seed));
    }
  }
  writer.finish();

  auto specials = SpecialTokenInventory::with_roles(kRoles);
  const auto target = specials.size() + 256 + options.merges;
  train_bpe(corpus, target, std::move(specials)).save(layout.vocab());
}

std::string Generation::to_json() const {
  return json{{"id", variant + ":" + instance_id}, {"instance_id", instance_id}, {"variant", variant}, {"text", text}}
      .dump();
}

Generation Generation::from_json(std::string_view line) {
  const json j = json::parse(line);
  return {j.at("instance_id").get<std::string>(), j.at("variant").get<std::string>(),
          j.at("text").get<std::string>()};
}

void write_generations(const std::filesystem::path& path, const std::vector<Generation>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : rows) out << r.to_json() << '\n';
}

std::vector<Generation> read_generations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<Generation> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(Generation::from_json(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::string generate_rationale(const TransformerLM& model, const Variant& variant, const RationaleInstance& instance,
                               const VisualFeatureSet* features, const Vocabulary& vocab, const LengthLimits& limits) {
  const auto prompt = build_sequence(variant, instance, features, vocab, limits, RationalePart::PromptOnly);
  const auto ids = model.generate_greedy(prompt, vocab.special_id(special::kEndRationale),
                                         limits.max_rationale > 2 ? limits.max_rationale - 2 : 0);
  auto text = scrub_utf8(vocab.decode(ids));
  const auto first = text.find_first_not_of(' ');
  return first == std::string::npos ? std::string{} : text.substr(first);
}

std::vector<EvalItem> make_tasks(const std::vector<Generation>& generations,
                                 const std::vector<RationaleInstance>& instances, const Vocabulary& vocab,
                                 const PosTagger& tagger, bool include_gold) {
  std::map<std::string, const RationaleInstance*> by_id;
  for (const auto& inst : instances) by_id[inst.instance_id] = &inst;
  std::vector<EvalItem> items;
  std::set<std::string> seen, gold_done;
  std::vector<const RationaleInstance*> gold_order;
  for (const auto& g : generations) {
    const auto it = by_id.find(g.instance_id);
    if (it == by_id.end()) throw std::invalid_argument("generation for unknown instance " + g.instance_id);
    Variant::parse(g.variant);
    auto id = g.variant + ":" + g.instance_id;
    if (!seen.insert(id).second) throw std::invalid_argument("duplicate generation " + id);
    items.push_back(make_item(std::move(id), *it->second, g.variant, g.text, tagger, vocab));
    if (gold_done.insert(g.instance_id).second) gold_order.push_back(it->second);
  }
  if (include_gold)
    for (const auto* inst : gold_order)
      items.push_back(make_item(std::string(kHumanRow) + ":" + inst->instance_id, *inst, kHumanRow,
                                inst->gold_rationale, tagger, vocab));
  return items;
}

std::vector<JudgmentRecord> simulate_judgments(const std::vector<EvalItem>& items, std::uint64_t seed,
                                               std::size_t workers_per_item) {
  constexpr std::size_t kPool = 9;
  if (workers_per_item > kPool) throw std::invalid_argument("simulate_judgments: too many workers per item");
  static const Label kLabels[] = {Label::Yes, Label::WeakYes, Label::WeakNo, Label::No};
  std::vector<JudgmentRecord> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& item = items[i];
    Rng rng(derive_seed(seed, fnv1a(item.item_id)));
    for (std::size_t w = 0; w < workers_per_item; ++w) {
      JudgmentRecord r;
      r.item_id = item.item_id;
      r.worker_id = "sim_worker_" + std::to_string((i * workers_per_item + w) % kPool);
      r.textual_plausibility = kLabels[rng.index(4)];
      r.visual_plausibility = kLabels[rng.index(4)];
      r.grammatical = rng.uniform() < 0.9 ? Label::Yes : Label::WeakNo;
      r.unrelated_content = kLabels[rng.index(4)];
      auto pick_some = [&](const std::vector<std::string>& offered, std::vector<std::string>& picked) {
        for (const auto& p : offered)
          if (rng.uniform() < 0.2) picked.push_back(p);
      };
      pick_some(item.offered_phrases.nouns, r.unrelated_phrases.nouns);
      pick_some(item.offered_phrases.noun_phrases, r.unrelated_phrases.noun_phrases);
      pick_some(item.offered_phrases.verb_phrases, r.unrelated_phrases.verb_phrases);
      r.timestamp = 1700000000 + static_cast<std::int64_t>(out.size());
      out.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace rvt
