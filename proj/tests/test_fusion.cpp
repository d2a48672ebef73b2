#include <doctest.h>

#include <algorithm>

#include "rvt/fusion.hpp"
#include "rvt/pipeline.hpp"
#include "test_support.hpp"

using namespace rvt;

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v = rvt::testing::vocab_for(
      {"food table people dining restaurant the dog runs in the park", "why is he here ? because ."}, 40);
  return v;
}

std::vector<float> vec(std::size_t n, float x) { return std::vector<float>(n, x); }

VisualFeatureSet objects_set(const std::vector<std::string>& labels, std::size_t dim = 4) {
  VisualFeatureSet fs;
  fs.image_id = "img0";
  fs.feature_dim = dim;
  fs.vc_dim = 3;
  ObjectDetections o;
  o.image_size = {100, 50};
  o.whole_image_feature = vec(dim, 0.5f);
  for (std::size_t i = 0; i < labels.size(); ++i) o.detections.push_back({labels[i], {0, 0, 10, 10}, vec(dim, float(i))});
  fs.objects = o;
  return fs;
}

std::vector<TokenId> between(const std::vector<TokenId>& ids, TokenId begin, TokenId end) {
  const auto b = std::find(ids.begin(), ids.end(), begin);
  const auto e = std::find(b, ids.end(), end);
  REQUIRE(b != ids.end());
  REQUIRE(e != ids.end());
  return {b + 1, e};
}

const auto inst = rvt::testing::make_instance("why is he here ?", "dining", "the dog runs in the park .");

}  // namespace

TEST_CASE("object labels drop people and repeats") {
  const auto fs = objects_set({"person", "food", "table", "food"});
  CHECK(merged_object_labels(*fs.objects) == "food table");
  const auto seq = build_uniform(inst, fs, VisualSource::Objects, vocab(), LengthLimits{});
  const auto inner = between(seq.token_ids, vocab().special_id(special::kBeginObjects),
                             vocab().special_id(special::kEndObjects));
  CHECK(inner == vocab().encode("food table"));
  CHECK(merged_object_labels(*objects_set({"Person", "PERSON", "dog"}).objects) == "dog");
}

TEST_CASE("uniform object labels sit at position zero") {
  const auto fs = objects_set({"food", "table"});
  const auto seq = build_uniform(inst, fs, VisualSource::Objects, vocab(), LengthLimits{});
  CHECK(seq.visual_slots.empty());
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.segment_ids[i] == static_cast<TokenId>(Segment::Visual)) CHECK(seq.position_ids[i] == 0);
  }
  CHECK(check_invariants(seq, vocab(), LengthLimits{}).empty());
}

TEST_CASE("empty object list leaves only the delimiters") {
  const auto fs = objects_set({});
  const auto seq = build_uniform(inst, fs, VisualSource::Objects, vocab(), LengthLimits{});
  CHECK(seq.token_ids[0] == vocab().special_id(special::kBeginObjects));
  CHECK(seq.token_ids[1] == vocab().special_id(special::kEndObjects));
  const auto base = build_baseline(inst, vocab(), LengthLimits{});
  CHECK(std::equal(base.token_ids.begin(), base.token_ids.end(), seq.token_ids.begin() + 2));
}

TEST_CASE("situation text follows the delimiter pattern") {
  VisualFeatureSet fs;
  fs.image_id = "img0";
  fs.feature_dim = 4;
  SituationFrame f;
  f.verb = "dining";
  f.roles.push_back({"agent", "people", std::nullopt, std::nullopt});
  f.place = "restaurant";
  fs.situation = f;
  const auto& v = vocab();
  const auto [ab, ae] = v.role_delimiters("agent");
  std::vector<TokenId> expect{v.special_id(special::kBeginSituation), v.special_id(special::kBeginVerb)};
  auto add = [&](const std::vector<TokenId>& ids) { expect.insert(expect.end(), ids.begin(), ids.end()); };
  add(v.encode("dining"));
  expect.push_back(v.special_id(special::kEndVerb));
  expect.push_back(ab);
  add(v.encode("people"));
  expect.push_back(ae);
  expect.push_back(v.special_id(special::kBeginPlace));
  add(v.encode("restaurant"));
  expect.push_back(v.special_id(special::kEndPlace));
  expect.push_back(v.special_id(special::kEndSituation));
  CHECK(situation_element(f, v) == expect);

  LengthLimits roomy;
  roomy.max_situation = 64;
  const auto seq = build_uniform(inst, fs, VisualSource::Situation, v, roomy);
  CHECK(std::equal(expect.begin(), expect.end(), seq.token_ids.begin()));
  for (std::size_t i = 0; i < seq.size(); ++i) CHECK(seq.position_ids[i] == static_cast<TokenId>(i + 1));
}

TEST_CASE("hybrid objects: ROI slots first, whole image on every text token") {
  const auto fs = objects_set({"food", "table"});
  const auto seq = build_hybrid(inst, fs, VisualSource::Objects, vocab(), LengthLimits{});
  std::size_t roi = 0, whole = 0;
  for (const auto& s : seq.visual_slots) {
    if (s.kind == SlotKind::Roi) {
      CHECK(s.index == roi);
      ++roi;
    }
    if (s.kind == SlotKind::WholeImage) ++whole;
  }
  CHECK(roi == 2);
  CHECK(whole == seq.size() - 2);
  CHECK(seq.token_ids[0] == vocab().special_id(special::kUnk));
  CHECK(seq.position_ids[0] == 0);
  CHECK(seq.position_ids[2] == 1);
  CHECK(check_invariants(seq, vocab(), LengthLimits{}).empty());
}

TEST_CASE("hybrid viscomet: three start slots and no whole-image additions") {
  auto fs = objects_set({"food"});
  CommonsenseInferences inf;
  inf.before = {"walk in"};
  inf.after = {"eat"};
  inf.intent = {"be fed"};
  inf.start_embeddings = std::array<std::vector<float>, 3>{vec(3, 1), vec(3, 2), vec(3, 3)};
  fs.inferences = inf;
  const auto seq = build_hybrid(inst, fs, VisualSource::VisComet, vocab(), LengthLimits{});
  CHECK(seq.visual_slots.size() == 3);
  for (const auto& s : seq.visual_slots) CHECK(s.kind == SlotKind::VcStart);
  CHECK_FALSE(seq.whole_image_ref.has_value());
  CHECK(check_invariants(seq, vocab(), LengthLimits{}).empty());
}

TEST_CASE("object regions are capped at max_objects") {
  std::vector<std::string> labels(40, "food");
  const auto fs = objects_set(labels);
  const auto seq = build_hybrid(inst, fs, VisualSource::Objects, vocab(), LengthLimits{});
  const auto roi = std::count_if(seq.visual_slots.begin(), seq.visual_slots.end(),
                                 [](const VisualSlot& s) { return s.kind == SlotKind::Roi; });
  CHECK(roi == 28);
  CHECK(seq.truncation_report.objects_dropped == 12);
  CHECK_THROWS(build_hybrid(inst, objects_set({}), VisualSource::Objects, vocab(), LengthLimits{}));
}

TEST_CASE("coordinate vectors") {
  const ImageSize size{200, 100};
  const auto full = coordinate_vector({0, 0, 200, 100}, size);
  CHECK(full.values == std::array<double, 5>{0, 0, 1, 1, 1});
  const auto quarter = coordinate_vector({0, 0, 100, 50}, size);
  CHECK(quarter.values == std::array<double, 5>{0, 0, 0.5, 0.5, 0.25});
  CHECK_THROWS(coordinate_vector({10, 10, 10, 20}, size));
  CHECK_THROWS(coordinate_vector({0, 0, 201, 10}, size));
}

TEST_CASE("mask covers the rationale and the end separator") {
  const auto seq = build_baseline(inst, vocab(), LengthLimits{});
  CHECK(seq.masked_count() == vocab().encode(inst.gold_rationale).size() + 1);
  CHECK(seq.token_ids.back() == vocab().special_id(special::kEndRationale));
  CHECK(seq.rationale_mask.back());

  LengthLimits tight;
  tight.max_rationale = 4;
  const auto clipped = build_baseline(inst, vocab(), tight);
  CHECK(clipped.masked_count() == 3);
  CHECK(clipped.masked_count() <= tight.max_rationale + 1);
  CHECK(clipped.token_ids.back() == vocab().special_id(special::kEndRationale));
  CHECK(clipped.truncation_report.rationale_tokens_dropped > 0);
}

TEST_CASE("prompt-only sequences end at the rationale begin separator") {
  const auto seq = build_baseline(inst, vocab(), LengthLimits{}, RationalePart::PromptOnly);
  CHECK(seq.token_ids.back() == vocab().special_id(special::kBeginRationale));
  CHECK(seq.masked_count() == 0);
}

TEST_CASE("variant names round trip") {
  for (const auto& v : all_variants()) CHECK(Variant::parse(v.name()) == v);
  CHECK(Variant::from_mode_source("baseline", "") == all_variants()[0]);
  CHECK(Variant::from_mode_source("hybrid", "situation").source == VisualSource::SituationRoles);
  CHECK_THROWS(Variant::from_mode_source("uniform", ""));
}

TEST_CASE("builders are deterministic") {
  const auto fs = synthetic_features("img_x", 8, 4, 2);
  auto i2 = inst;
  i2.image_id = "img_x";
  for (const auto& v : all_variants()) {
    const auto a = build_sequence(v, i2, &fs, vocab(), LengthLimits{});
    const auto b = build_sequence(v, i2, &fs, vocab(), LengthLimits{});
    CHECK(a.token_ids == b.token_ids);
    CHECK(a.position_ids == b.position_ids);
    CHECK(check_invariants(a, vocab(), LengthLimits{}).empty());
  }
}
