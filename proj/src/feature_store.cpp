#include "rvt/feature_store.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "rvt/fusion.hpp"
#include "rvt/text_codec.hpp"

namespace rvt {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "feature blobs are raw little-endian float32");

namespace {

constexpr const char* kIndexFile = "features.idx.jsonl";
constexpr const char* kBlobFile = "features.f32";
constexpr const char* kLockFile = ".writer.lock";

std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

json box_to_json(const Box& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

Box box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw std::runtime_error("box must have 4 coordinates");
  return Box{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

void check_box(const Box& b, const ImageSize& size, const std::string& what) {
  if (!(0 <= b.x1 && b.x1 < b.x2 && b.x2 <= size.width && 0 <= b.y1 && b.y1 < b.y2 &&
        b.y2 <= size.height))
    throw std::invalid_argument(what + ": box outside image bounds or degenerate");
}

void check_dim(const std::vector<float>& v, std::size_t dim, const std::string& what) {
  if (v.size() != dim)
    throw std::invalid_argument(what + ": feature length " + std::to_string(v.size()) +
                                " != declared dim " + std::to_string(dim));
}

}  // namespace

std::string_view to_string(Task task) {
  switch (task) {
    case Task::VCR: return "vcr";
    case Task::ESNLIVE: return "esnlive";
    case Task::VQAE: return "vqae";
  }
  return "?";
}

std::string_view to_string(Split split) { return split == Split::Train ? "train" : "dev"; }

Task parse_task(std::string_view name) {
  const std::string n = lowercase(std::string(name));
  if (n == "vcr") return Task::VCR;
  if (n == "esnlive" || n == "e-snli-ve" || n == "esnli-ve") return Task::ESNLIVE;
  if (n == "vqae" || n == "vqa-e") return Task::VQAE;
  throw std::invalid_argument("unknown task '" + std::string(name) + "'");
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "dev") return Split::Dev;
  throw std::invalid_argument("unknown split '" + std::string(name) + "'");
}

void RationaleInstance::validate() const {
  if (instance_id.empty()) throw std::invalid_argument("instance without id");
  if (image_id.empty()) throw std::invalid_argument(instance_id + ": missing image_id");
  if (context_question_or_hypothesis.empty())
    throw std::invalid_argument(instance_id + ": empty question/hypothesis");
  if (task == Task::ESNLIVE) {
    if (context_answer_or_label != "entailment" && context_answer_or_label != "contradiction")
      throw std::invalid_argument(instance_id + ": e-SNLI-VE label must be entailment or contradiction");
  } else if (context_answer_or_label.empty()) {
    throw std::invalid_argument(instance_id + ": empty answer");
  }
  if (split == Split::Train && gold_rationale.empty())
    throw std::invalid_argument(instance_id + ": train instance without gold rationale");
}

void ObjectDetections::validate(std::size_t feature_dim) const {
  if (!(image_size.width > 0 && image_size.height > 0))
    throw std::invalid_argument("objects: image size must be positive");
  check_dim(whole_image_feature, feature_dim, "whole image");
  for (std::size_t i = 0; i < detections.size(); ++i) {
    const auto what = "detection " + std::to_string(i);
    check_box(detections[i].box, image_size, what);
    check_dim(detections[i].feature, feature_dim, what);
  }
}

void SituationFrame::validate(std::size_t feature_dim, std::size_t max_roles,
                              const std::vector<std::string>* role_inventory) const {
  if (verb.empty()) throw std::invalid_argument("situation: empty verb");
  if (roles.size() > max_roles)
    throw std::invalid_argument("situation: " + std::to_string(roles.size()) + " roles exceed max " +
                                std::to_string(max_roles));
  for (const auto& r : roles) {
    if (r.role.empty()) throw std::invalid_argument("situation: empty role name");
    if (role_inventory &&
        std::find(role_inventory->begin(), role_inventory->end(), r.role) == role_inventory->end())
      throw std::invalid_argument("situation: role '" + r.role + "' not in role inventory");
    if (r.feature) check_dim(*r.feature, feature_dim, "role " + r.role);
  }
}

void CommonsenseInferences::validate(std::size_t vc_dim) const {
  if (start_embeddings) {
    for (const auto& v : *start_embeddings) check_dim(v, vc_dim, "inference start embedding");
  }
}

void VisualFeatureSet::validate(std::size_t max_roles) const {
  if (image_id.empty()) throw std::invalid_argument("feature set without image id");
  if (objects) objects->validate(feature_dim);
  if (situation) situation->validate(feature_dim, max_roles);
  if (inferences) inferences->validate(vc_dim);
  if (situation && objects) {
    for (const auto& r : situation->roles)
      if (r.box) check_box(*r.box, objects->image_size, "role " + r.role);
  }
}

void LengthLimits::validate() const {
  for (auto v : {max_question, max_answer, max_rationale, max_object_labels, max_situation,
                 max_vc_text, max_objects, max_roles}) {
    if (v == 0) throw std::invalid_argument("length limits must be positive");
  }
  if (max_question < 2 || max_answer < 2 || max_rationale < 2 || max_object_labels < 2 ||
      max_situation < 2)
    throw std::invalid_argument("text limits must leave room for both delimiters");
}

std::string limits_to_json(const LengthLimits& l) {
  json j{{"max_question", l.max_question},       {"max_answer", l.max_answer},
         {"max_rationale", l.max_rationale},     {"max_object_labels", l.max_object_labels},
         {"max_situation", l.max_situation},     {"max_vc_text", l.max_vc_text},
         {"max_objects", l.max_objects},         {"max_roles", l.max_roles}};
  return j.dump(2);
}

LengthLimits limits_from_json(std::string_view text) {
  const json j = json::parse(text);
  LengthLimits l;
  l.max_question = j.value("max_question", l.max_question);
  l.max_answer = j.value("max_answer", l.max_answer);
  l.max_rationale = j.value("max_rationale", l.max_rationale);
  l.max_object_labels = j.value("max_object_labels", l.max_object_labels);
  l.max_situation = j.value("max_situation", l.max_situation);
  l.max_vc_text = j.value("max_vc_text", l.max_vc_text);
  l.max_objects = j.value("max_objects", l.max_objects);
  l.max_roles = j.value("max_roles", l.max_roles);
  l.validate();
  return l;
}

LengthLimits load_limits(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open limits file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return limits_from_json(ss.str());
}

void save_limits(const LengthLimits& limits, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << limits_to_json(limits) << '\n';
}

InstanceLoadResult load_instances(const std::filesystem::path& manifest, Task task) {
  std::ifstream in(manifest);
  if (!in) throw std::runtime_error("cannot open manifest " + manifest.string());
  InstanceLoadResult result;
  std::string line;
  std::size_t line_no = 0;
  const bool nli = task == Task::ESNLIVE;
  const char* context_key = nli ? "hypothesis" : "question";
  const char* answer_key = nli ? "label" : "answer";
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = manifest.string() + ":" + std::to_string(line_no) + ": ";
    try {
      const json row = json::parse(line);
      if (!row.is_object()) throw std::runtime_error("row is not an object");
      if (row.contains("task") && parse_task(row.at("task").get<std::string>()) != task)
        throw std::runtime_error("row task does not match requested task");
      RationaleInstance inst;
      inst.task = task;
      inst.instance_id = row.at("instance_id").get<std::string>();
      inst.image_id = row.at("image_id").get<std::string>();
      inst.context_question_or_hypothesis = row.at(context_key).get<std::string>();
      inst.context_answer_or_label = row.at(answer_key).get<std::string>();
      inst.split = parse_split(row.value("split", std::string("train")));
      if (row.contains("rationale")) inst.gold_rationale = row.at("rationale").get<std::string>();
      if (nli) {
        inst.context_answer_or_label = lowercase(inst.context_answer_or_label);
        if (inst.context_answer_or_label == "neutral") {
          ++result.dropped_neutral;
          continue;
        }
      }
      inst.validate();
      result.instances.push_back(std::move(inst));
    } catch (const std::exception& e) {
      throw std::runtime_error(where + e.what());
    }
  }
  return result;
}

void write_instances(const std::vector<RationaleInstance>& instances,
                     const std::filesystem::path& manifest) {
  std::ofstream out(manifest, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + manifest.string());
  for (const auto& inst : instances) {
    const bool nli = inst.task == Task::ESNLIVE;
    json row;
    row["instance_id"] = inst.instance_id;
    row["image_id"] = inst.image_id;
    row["task"] = to_string(inst.task);
    row[nli ? "hypothesis" : "question"] = inst.context_question_or_hypothesis;
    row[nli ? "label" : "answer"] = inst.context_answer_or_label;
    row["rationale"] = inst.gold_rationale;
    row["split"] = to_string(inst.split);
    out << row.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// FeatureStore

FeatureStore::FeatureStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

void FeatureStore::ensure_index() const {
  std::call_once(index_once_, [this] {
    ++reads_;
    std::ifstream idx(dir_ / kIndexFile);
    if (!idx) throw std::runtime_error("feature index missing in " + dir_.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(idx, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      json row;
      try {
        row = json::parse(line);
      } catch (const std::exception& e) {
        throw std::runtime_error(std::string(kIndexFile) + ":" + std::to_string(line_no) + ": " +
                                 e.what());
      }
      index_[row.at("image_id").get<std::string>()] = line;
    }
    std::ifstream blob(dir_ / kBlobFile, std::ios::binary | std::ios::ate);
    if (!blob) throw std::runtime_error("feature blob missing in " + dir_.string());
    const auto bytes = static_cast<std::size_t>(blob.tellg());
    if (bytes % sizeof(float) != 0)
      throw std::runtime_error("corrupt feature blob: size is not a multiple of 4 bytes");
    blob_.resize(bytes / sizeof(float));
    blob.seekg(0);
    blob.read(reinterpret_cast<char*>(blob_.data()), static_cast<std::streamsize>(bytes));
    if (!blob) throw std::runtime_error("short read on feature blob");
  });
}

bool FeatureStore::contains(const std::string& image_id) const {
  ensure_index();
  return index_.count(image_id) > 0;
}

std::vector<std::string> FeatureStore::image_ids() const {
  ensure_index();
  std::vector<std::string> ids;
  for (const auto& [id, _] : index_) ids.push_back(id);
  return ids;
}

VisualFeatureSet FeatureStore::load(const std::string& image_id) const {
  ensure_index();
  ++reads_;
  auto it = index_.find(image_id);
  if (it == index_.end()) throw std::runtime_error("no features for image '" + image_id + "'");
  const json row = json::parse(it->second);

  auto vec = [&](const json& ref) {
    const auto offset = ref.at("offset").get<std::size_t>();
    const auto length = ref.at("length").get<std::size_t>();
    if (offset > blob_.size() || length > blob_.size() - offset)
      throw std::runtime_error("corrupt feature block for image '" + image_id +
                               "': reference outside blob");
    return std::vector<float>(blob_.begin() + static_cast<std::ptrdiff_t>(offset),
                              blob_.begin() + static_cast<std::ptrdiff_t>(offset + length));
  };

  VisualFeatureSet fs;
  fs.image_id = image_id;
  fs.feature_dim = row.value("feature_dim", std::size_t{2048});
  fs.vc_dim = row.value("vc_dim", std::size_t{0});
  if (row.contains("objects") && !row["objects"].is_null()) {
    const auto& o = row["objects"];
    ObjectDetections od;
    od.image_size = {o.at("image_size").at(0).get<double>(), o.at("image_size").at(1).get<double>()};
    od.whole_image_feature = vec(o.at("whole_image"));
    for (const auto& d : o.at("detections"))
      od.detections.push_back({d.at("label").get<std::string>(), box_from_json(d.at("box")),
                               vec(d.at("feature"))});
    fs.objects = std::move(od);
  }
  if (row.contains("situation") && !row["situation"].is_null()) {
    const auto& s = row["situation"];
    SituationFrame sf;
    sf.verb = s.at("verb").get<std::string>();
    if (s.contains("place") && !s["place"].is_null()) sf.place = s["place"].get<std::string>();
    for (const auto& r : s.at("roles")) {
      SituationRole role{r.at("role").get<std::string>(), r.at("noun").get<std::string>(), {}, {}};
      if (r.contains("box") && !r["box"].is_null()) role.box = box_from_json(r["box"]);
      if (r.contains("feature") && !r["feature"].is_null()) role.feature = vec(r["feature"]);
      sf.roles.push_back(std::move(role));
    }
    fs.situation = std::move(sf);
  }
  if (row.contains("inferences") && !row["inferences"].is_null()) {
    const auto& c = row["inferences"];
    CommonsenseInferences ci;
    ci.before = c.at("before").get<std::vector<std::string>>();
    ci.after = c.at("after").get<std::vector<std::string>>();
    ci.intent = c.at("intent").get<std::vector<std::string>>();
    if (c.contains("start_embeddings") && !c["start_embeddings"].is_null()) {
      const auto& se = c["start_embeddings"];
      if (!se.is_array() || se.size() != 3)
        throw std::runtime_error("start_embeddings must list before/after/intent");
      ci.start_embeddings = std::array<std::vector<float>, 3>{vec(se[0]), vec(se[1]), vec(se[2])};
    }
    fs.inferences = std::move(ci);
  }
  fs.validate(std::numeric_limits<std::size_t>::max());
  return fs;
}

// ---------------------------------------------------------------------------
// FeatureWriter

FeatureWriter::FeatureWriter(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
  std::FILE* lock = std::fopen((dir_ / kLockFile).c_str(), "wx");
  if (!lock) throw std::runtime_error("feature directory " + dir_.string() + " is locked by another writer");
  std::fclose(lock);
}

FeatureWriter::~FeatureWriter() {
  std::error_code ec;
  std::filesystem::remove(dir_ / kLockFile, ec);
}

void FeatureWriter::add(const VisualFeatureSet& fs) {
  if (finished_) throw std::logic_error("feature writer already finished");
  fs.validate(std::numeric_limits<std::size_t>::max());
  if (!seen_.emplace(fs.image_id, true).second)
    throw std::invalid_argument("duplicate image id " + fs.image_id);

  auto ref = [&](const std::vector<float>& v) {
    json j{{"offset", blob_.size()}, {"length", v.size()}};
    blob_.insert(blob_.end(), v.begin(), v.end());
    return j;
  };

  json row;
  row["image_id"] = fs.image_id;
  row["feature_dim"] = fs.feature_dim;
  row["vc_dim"] = fs.vc_dim;
  row["objects"] = nullptr;
  row["situation"] = nullptr;
  row["inferences"] = nullptr;
  if (fs.objects) {
    json o;
    o["image_size"] = json::array({fs.objects->image_size.width, fs.objects->image_size.height});
    o["whole_image"] = ref(fs.objects->whole_image_feature);
    o["detections"] = json::array();
    for (const auto& d : fs.objects->detections)
      o["detections"].push_back({{"label", d.label}, {"box", box_to_json(d.box)}, {"feature", ref(d.feature)}});
    row["objects"] = std::move(o);
  }
  if (fs.situation) {
    json s;
    s["verb"] = fs.situation->verb;
    s["place"] = fs.situation->place ? json(*fs.situation->place) : json(nullptr);
    s["roles"] = json::array();
    for (const auto& r : fs.situation->roles) {
      s["roles"].push_back({{"role", r.role},
                            {"noun", r.noun},
                            {"box", r.box ? box_to_json(*r.box) : json(nullptr)},
                            {"feature", r.feature ? ref(*r.feature) : json(nullptr)}});
    }
    row["situation"] = std::move(s);
  }
  if (fs.inferences) {
    json c;
    c["before"] = fs.inferences->before;
    c["after"] = fs.inferences->after;
    c["intent"] = fs.inferences->intent;
    c["start_embeddings"] = nullptr;
    if (fs.inferences->start_embeddings) {
      const auto& se = *fs.inferences->start_embeddings;
      c["start_embeddings"] = json::array({ref(se[0]), ref(se[1]), ref(se[2])});
    }
    row["inferences"] = std::move(c);
  }
  rows_.push_back(row.dump());
}

void FeatureWriter::finish() {
  if (finished_) return;
  {
    std::ofstream idx(dir_ / kIndexFile, std::ios::binary);
    if (!idx) throw std::runtime_error("cannot write feature index in " + dir_.string());
    for (const auto& r : rows_) idx << r << '\n';
  }
  {
    std::ofstream blob(dir_ / kBlobFile, std::ios::binary);
    if (!blob) throw std::runtime_error("cannot write feature blob in " + dir_.string());
    blob.write(reinterpret_cast<const char*>(blob_.data()),
               static_cast<std::streamsize>(blob_.size() * sizeof(float)));
  }
  finished_ = true;
  std::error_code ec;
  std::filesystem::remove(dir_ / kLockFile, ec);
}

// ---------------------------------------------------------------------------
// Length limits

std::size_t nearest_rank_percentile(std::vector<std::size_t> values, double percentile) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty distribution");
  if (!(percentile > 0.0 && percentile <= 1.0))
    throw std::invalid_argument("percentile must lie in (0, 1]");
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  // Guard against p*n landing a hair above an integer (0.99 * 100).
  auto rank = static_cast<std::size_t>(std::ceil(percentile * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

LengthLimits compute_length_limits(const std::vector<RationaleInstance>& instances,
                                   const Vocabulary& vocab, double percentile,
                                   const FeatureStore* features) {
  if (instances.empty()) throw std::invalid_argument("compute_length_limits: empty instance stream");
  std::vector<std::size_t> q, a, r, labels, situ, vc, objects, roles;
  for (const auto& inst : instances) {
    q.push_back(question_element(inst, vocab).size());
    a.push_back(answer_element(inst, vocab).size());
    r.push_back(rationale_element(inst, vocab).size());
    if (!features || !features->contains(inst.image_id)) continue;
    const auto fs = features->load(inst.image_id);
    if (fs.objects) {
      labels.push_back(object_labels_element(*fs.objects, vocab).size());
      objects.push_back(fs.objects->detections.size());
    }
    if (fs.situation) {
      situ.push_back(situation_element(*fs.situation, vocab).size());
      roles.push_back(static_cast<std::size_t>(
          std::count_if(fs.situation->roles.begin(), fs.situation->roles.end(),
                        [](const SituationRole& role) { return role.feature && role.box; })));
    }
    if (fs.inferences) vc.push_back(viscomet_element(*fs.inferences, vocab).size());
  }
  LengthLimits limits;
  limits.max_question = nearest_rank_percentile(q, percentile);
  limits.max_answer = nearest_rank_percentile(a, percentile);
  limits.max_rationale = nearest_rank_percentile(r, percentile);
  if (!labels.empty()) limits.max_object_labels = nearest_rank_percentile(labels, percentile);
  if (!situ.empty()) limits.max_situation = nearest_rank_percentile(situ, percentile);
  if (!vc.empty()) limits.max_vc_text = std::max<std::size_t>(1, nearest_rank_percentile(vc, percentile));
  if (!objects.empty())
    limits.max_objects = std::max<std::size_t>(1, nearest_rank_percentile(objects, percentile));
  if (!roles.empty())
    limits.max_roles = std::max<std::size_t>(1, nearest_rank_percentile(roles, percentile));
  return limits;
}

}  // namespace rvt
