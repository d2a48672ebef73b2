#include <doctest.h>

#include <numeric>

#include "rvt/feature_store.hpp"
#include "rvt/pipeline.hpp"
#include "test_support.hpp"

using namespace rvt;
using rvt::testing::TempDir;
using rvt::testing::write_file;

TEST_CASE("e-SNLI-VE loader drops neutral rows and counts them") {
  TempDir dir;
  write_file(dir / "m.jsonl",
             R"({"instance_id":"a","image_id":"x","hypothesis":"h1","label":"entailment","rationale":"r","split":"train"}
{"instance_id":"b","image_id":"x","hypothesis":"h2","label":"neutral","rationale":"r","split":"train"}
{"instance_id":"c","image_id":"x","hypothesis":"h3","label":"Contradiction","rationale":"r","split":"dev"}
)");
  const auto result = load_instances(dir / "m.jsonl", Task::ESNLIVE);
  REQUIRE(result.instances.size() == 2);
  CHECK(result.dropped_neutral == 1);
  for (const auto& inst : result.instances) CHECK(inst.context_answer_or_label != "neutral");
  CHECK(result.instances[1].context_answer_or_label == "contradiction");
  CHECK(result.instances[1].split == Split::Dev);
}

TEST_CASE("loader edge cases") {
  TempDir dir;
  write_file(dir / "empty.jsonl", "");
  CHECK(load_instances(dir / "empty.jsonl", Task::VCR).instances.empty());

  write_file(dir / "norat.jsonl",
             "{\"instance_id\":\"a\",\"image_id\":\"x\",\"question\":\"q\",\"answer\":\"a\",\"rationale\":\"r\"}\n"
             "{\"instance_id\":\"b\",\"image_id\":\"x\",\"question\":\"q\",\"answer\":\"a\",\"split\":\"train\"}\n");
  try {
    load_instances(dir / "norat.jsonl", Task::VCR);
    FAIL("expected an error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  write_file(dir / "bad.jsonl", "{not json\n");
  CHECK_THROWS(load_instances(dir / "bad.jsonl", Task::VQAE));
  CHECK_THROWS_AS(parse_task("imagenet"), std::invalid_argument);
}

TEST_CASE("instances round trip through the manifest writer") {
  TempDir dir;
  const auto src = synthetic_instances(Task::VQAE, 5, 3, 9);
  write_instances(src, dir / "m.jsonl");
  const auto back = load_instances(dir / "m.jsonl", Task::VQAE).instances;
  REQUIRE(back.size() == src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    CHECK(back[i].instance_id == src[i].instance_id);
    CHECK(back[i].gold_rationale == src[i].gold_rationale);
    CHECK(back[i].split == src[i].split);
  }
}

TEST_CASE("feature sets round trip bit-identically") {
  TempDir dir;
  const auto a = synthetic_features("img_a", 16, 6, 3);
  auto b = synthetic_features("img_b", 16, 6, 3);
  b.situation.reset();
  b.inferences.reset();
  {
    FeatureWriter writer(dir.path());
    writer.add(a);
    writer.add(b);
    writer.finish();
  }
  FeatureStore store(dir.path());
  CHECK(store.load("img_a") == a);
  const auto lb = store.load("img_b");
  CHECK(lb == b);
  CHECK_FALSE(lb.situation.has_value());
  CHECK_FALSE(lb.inferences.has_value());
  CHECK(store.contains("img_a"));
  CHECK_FALSE(store.contains("img_c"));
  CHECK_THROWS(store.load("img_c"));
}

TEST_CASE("feature dimension violations and corrupt blobs are errors") {
  TempDir dir;
  auto bad = synthetic_features("img", 2048, 8, 1);
  bad.objects->detections[0].feature.resize(2047);
  {
    FeatureWriter writer(dir.path());
    CHECK_THROWS(writer.add(bad));
  }
  TempDir dir2;
  {
    FeatureWriter writer(dir2.path());
    writer.add(synthetic_features("img", 32, 8, 1));
    writer.finish();
  }
  const auto blob = dir2 / "features.f32";
  std::filesystem::resize_file(blob, std::filesystem::file_size(blob) / 2);
  FeatureStore store(dir2.path());
  CHECK_THROWS(store.load("img"));
}

TEST_CASE("the writer is exclusive per directory") {
  TempDir dir;
  FeatureWriter first(dir.path());
  CHECK_THROWS(FeatureWriter(dir.path()));
}

TEST_CASE("nearest-rank percentile") {
  std::vector<std::size_t> v(100);
  std::iota(v.begin(), v.end(), 1);
  CHECK(nearest_rank_percentile(v, 0.99) == 99);
  CHECK(nearest_rank_percentile(v, 1.0) == 100);
  CHECK(nearest_rank_percentile(v, 0.5) == 50);
  CHECK(nearest_rank_percentile({7, 7, 7}, 0.99) == 7);
}

TEST_CASE("length limits from constant-length elements") {
  // Five bytes plus the two delimiters gives element length 7 everywhere.
  const auto vocab = rvt::testing::vocab_for({"x"}, 0);
  std::vector<RationaleInstance> insts;
  for (int i = 0; i < 10; ++i) insts.push_back(rvt::testing::make_instance("abcde", "fghij", "klmno"));
  const auto limits = compute_length_limits(insts, vocab, 0.99);
  CHECK(limits.max_question == 7);
  CHECK(limits.max_answer == 7);
  CHECK(limits.max_rationale == 7);
  CHECK(limits.max_objects == LengthLimits{}.max_objects);
  CHECK_THROWS(compute_length_limits({}, vocab, 0.99));
}

TEST_CASE("length limits are monotone in the percentile") {
  const auto vocab = rvt::testing::fixture_vocab(60);
  const auto insts = synthetic_instances(Task::VCR, 20, 0, 4);
  const auto lo = compute_length_limits(insts, vocab, 0.5);
  const auto hi = compute_length_limits(insts, vocab, 0.99);
  CHECK(lo.max_question <= hi.max_question);
  CHECK(lo.max_answer <= hi.max_answer);
  CHECK(lo.max_rationale <= hi.max_rationale);
}

TEST_CASE("default limits and their JSON form") {
  const LengthLimits d;
  CHECK(d.max_question == 19);
  CHECK(d.max_answer == 23);
  CHECK(d.max_rationale == 50);
  CHECK(d.max_object_labels == 30);
  CHECK(d.max_situation == 17);
  CHECK(d.max_vc_text == 148);
  CHECK(d.max_objects == 28);
  CHECK(d.max_roles == 7);
  CHECK(limits_from_json(limits_to_json(d)) == d);
}
