// Acceptance suite: one PASS/FAIL line per criterion.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <thread>

#include "e2e.hpp"
#include "oracles.hpp"
#include "rvt/annotation_service.hpp"
#include "rvt/judgments.hpp"
#include "rvt/metrics.hpp"
#include "rvt/trainer.hpp"
#include "test_support.hpp"

using namespace rvt;
using rvt::testing::TempDir;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail = what;
    pass = pass && ok;
  }
};

int failures = 0;
int selected = 0;
std::vector<std::string> only;

void criterion(const std::string& name, const std::function<Outcome()>& body) {
  if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) return;
  ++selected;
  const auto start = std::chrono::steady_clock::now();
  Outcome out;
  try {
    out = body();
  } catch (const std::exception& e) {
    out.pass = false;
    out.detail = std::string("exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("%s  %-22s %7.2fs  %s\n", out.pass ? "PASS" : "FAIL", name.c_str(), secs, out.detail.c_str());
  std::fflush(stdout);
  failures += out.pass ? 0 : 1;
}

bool close(double a, double b, double rtol, double atol = 0.0) {
  return std::abs(a - b) <= atol + rtol * std::max(std::abs(a), std::abs(b));
}

const Vocabulary& vocab() {
  static const Vocabulary v = rvt::testing::fixture_vocab(200);
  return v;
}

std::string random_words(Rng& rng, std::size_t max_words) {
  static const std::vector<std::string> words{"the", "man", "woman", "is", "holding", "a", "cup", "because",
                                              "she", "wants", "to", "drink", "coffee", "at", "table", "dog",
                                              "running", "park", "?", ".", "they", "are", "eating", "food"};
  std::string out;
  const auto n = 1 + rng.index(max_words);
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out += ' ';
    out += words[rng.index(words.size())];
  }
  return out;
}

/// Synthetic features with a randomized number of objects, roles and inferences.
VisualFeatureSet random_features(Rng& rng, const std::string& image_id, std::size_t fdim, std::size_t vdim) {
  auto fs = synthetic_features(image_id, fdim, vdim, rng.next());
  const auto& size = fs.objects->image_size;
  const auto n_obj = 1 + rng.index(40);
  fs.objects->detections.clear();
  static const std::vector<std::string> labels{"person", "cup", "table", "dog", "chair", "car", "bottle"};
  auto box = [&] {
    const double x1 = rng.uniform() * (size.width - 20), y1 = rng.uniform() * (size.height - 20);
    return Box{x1, y1, x1 + 1 + rng.uniform() * 18, y1 + 1 + rng.uniform() * 18};
  };
  for (std::size_t i = 0; i < n_obj; ++i) {
    std::vector<float> f(fdim);
    for (auto& x : f) x = static_cast<float>(rng.normal());
    fs.objects->detections.push_back({labels[rng.index(labels.size())], box(), f});
  }
  auto& roles = fs.situation->roles;
  const auto grounded = roles.front();
  const auto n_roles = 1 + rng.index(10);
  roles.clear();
  const auto names = synthetic_roles();
  for (std::size_t i = 0; i < n_roles; ++i) {
    auto r = grounded;
    r.role = names[i % names.size()];
    r.noun = random_words(rng, 3);
    if (i > 0 && rng.index(3) == 0) {
      r.box.reset();
      r.feature.reset();
    }
    roles.push_back(r);
  }
  auto& inf = *fs.inferences;
  for (auto* list : {&inf.before, &inf.after, &inf.intent}) {
    list->clear();
    const auto k = rng.index(8);
    for (std::size_t i = 0; i < k; ++i) list->push_back(random_words(rng, 12));
  }
  return fs;
}

FusedSequence random_fused(Rng& rng, std::size_t i, std::size_t fdim, std::size_t vdim) {
  auto inst = rvt::testing::make_instance(random_words(rng, 30), random_words(rng, 30), random_words(rng, 70));
  inst.instance_id = "r" + std::to_string(i);
  const auto fs = random_features(rng, "img" + std::to_string(i), fdim, vdim);
  const auto& v = all_variants()[i % all_variants().size()];
  return build_sequence(v, inst, &fs, vocab(), LengthLimits{});
}

ModelConfig model_config(std::size_t d_model, std::size_t layers, std::size_t heads, std::size_t fdim,
                         std::size_t vdim, std::size_t max_positions) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d_model;
  c.vocab_size = vocab().size();
  c.max_positions = max_positions;
  c.feature_dim = fdim;
  c.vc_dim = vdim;
  c.dropout = 0.0;
  c.seed = 5;
  return c;
}

// ---------------------------------------------------------------------------

Outcome masked_loss() {
  Outcome out;
  Rng rng(101);
  TransformerLM model(model_config(16, 1, 2, 8, 4, 512));
  TransformerLM uniform(model_config(16, 1, 2, 8, 4, 512));
  for (auto& p : uniform.parameters()) p = 0.0;
  const double ln_v = std::log(static_cast<double>(vocab().size()));
  for (std::size_t i = 0; i < 100; ++i) {
    const auto seq = random_fused(rng, i, 8, 4);
    std::vector<TokenId> targets(seq.token_ids.begin() + 1, seq.token_ids.end());
    const double base = model.loss(seq, targets);
    out.require(base == model.loss(seq), "explicit targets differ from the sequence targets");
    for (std::size_t k = 0; k < targets.size(); ++k)
      if (!seq.rationale_mask[k + 1]) targets[k] = static_cast<TokenId>(rng.index(vocab().size()));
    out.require(model.loss(seq, targets) == base, "context target rewrite changed the loss (seq " + std::to_string(i) + ")");

    auto single = seq;
    std::fill(single.rationale_mask.begin(), single.rationale_mask.end(), false);
    single.rationale_mask.back() = true;
    out.require(close(uniform.loss(single), ln_v, 1e-6), "uniform-logit loss is not ln V");
  }
  if (out.pass) out.detail = "100 sequences, ln V = " + std::to_string(ln_v);
  return out;
}

Outcome gradient_check() {
  Outcome out;
  Rng rng(202);
  const std::size_t fdim = 6, vdim = 4;
  auto cfg = model_config(8, 2, 2, fdim, vdim, 256);
  TransformerLM model(cfg);
  // Short texts keep the sequences small; every variant contributes one sequence.
  std::vector<FusedSequence> seqs;
  for (std::size_t i = 0; i < all_variants().size(); ++i) {
    auto inst = rvt::testing::make_instance(random_words(rng, 4), random_words(rng, 3), random_words(rng, 5));
    auto fs = synthetic_features("g" + std::to_string(i), fdim, vdim, i);
    fs.objects->detections.resize(std::min<std::size_t>(3, fs.objects->detections.size()));
    fs.inferences->before.resize(1);
    fs.inferences->after.resize(1);
    fs.inferences->intent.resize(1);
    seqs.push_back(build_sequence(all_variants()[i], inst, &fs, vocab(), LengthLimits{}));
  }
  std::vector<double> grad(model.num_parameters(), 0.0);
  for (const auto& s : seqs) model.accumulate_gradients(s, grad, 1.0);
  auto total = [&] {
    double sum = 0.0;
    for (const auto& s : seqs) sum += model.loss(s) * static_cast<double>(s.masked_count());
    return sum;
  };
  auto params = model.parameters();
  std::size_t checked = 0, nonzero_groups = 0;
  double worst = 0.0;
  for (const auto& t : model.tensors()) {
    bool any_nonzero = false;
    for (std::size_t k = 0; k < t.size(); ++k) {
      const std::size_t idx = t.offset + k;
      const double orig = params[idx];
      const double h = 1e-5;
      params[idx] = orig + h;
      const double up = total();
      params[idx] = orig - h;
      const double down = total();
      params[idx] = orig;
      const double numeric = (up - down) / (2 * h);
      const double err = std::abs(grad[idx] - numeric);
      if (!close(grad[idx], numeric, 1e-4, 1e-7)) {
        out.require(false, t.name + " analytic " + std::to_string(grad[idx]) + " numeric " + std::to_string(numeric));
      }
      worst = std::max(worst, err / std::max(1e-7, std::abs(numeric)));
      any_nonzero = any_nonzero || std::abs(grad[idx]) > 1e-9;
      ++checked;
    }
    nonzero_groups += any_nonzero;
  }
  out.require(nonzero_groups == model.tensors().size(), "some parameter group received no gradient");
  if (out.pass)
    out.detail = std::to_string(checked) + " entries over " + std::to_string(model.tensors().size()) + " groups";
  return out;
}

Outcome overfit() {
  Outcome out;
  TempDir dir("rvt_overfit");
  const std::size_t fdim = 16, vdim = 8;
  const auto insts = synthetic_instances(Task::VCR, 8, 0, 31);
  {
    FeatureWriter w(dir / "features");
    for (const auto& i : insts) w.add(synthetic_features(i.image_id, fdim, vdim, 31));
    w.finish();
  }
  FeatureStore store(dir / "features");
  std::string summary;
  for (const auto& v : all_variants()) {
    auto data = prepare_training_data(insts, v, &store, vocab(), LengthLimits{});
    data.dev = data.train;
    TransformerLM model(model_config(64, 2, 4, fdim, vdim, max_input_length(v, LengthLimits{}) + 1));
    TrainConfig tc;
    tc.epochs = 300;
    tc.batch_size = 8;
    tc.learning_rate = 3e-3;
    tc.warmup_fraction = 0.05;
    tc.weight_decay = 0.0;
    tc.seed = 17;
    tc.eval_every = 1000000;
    tc.output_dir = dir / v.name();
    const auto result = train(model, data, vocab().hash(), tc);
    const double final_loss = evaluate_loss(model, data.train);
    out.require(result.steps <= 300, v.name() + " took more than 300 steps");
    out.require(final_loss < 0.05, v.name() + " final loss " + std::to_string(final_loss));
    std::size_t exact = 0;
    for (std::size_t k = 0; k < insts.size(); ++k) {
      const auto fs = v.uses_features() ? std::optional(store.load(insts[k].image_id)) : std::nullopt;
      const auto prompt = build_sequence(v, insts[k], fs ? &*fs : nullptr, vocab(), LengthLimits{},
                                         RationalePart::PromptOnly);
      const auto& full = data.train[k];
      std::vector<TokenId> gold;
      for (std::size_t i = 0; i + 1 < full.size(); ++i)
        if (full.rationale_mask[i]) gold.push_back(full.token_ids[i]);
      const auto got = model.generate_greedy(prompt, vocab().special_id(special::kEndRationale), gold.size() + 1);
      exact += got == gold;
    }
    out.require(exact == insts.size(), v.name() + " reproduced " + std::to_string(exact) + "/8 rationales");
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s%s %.4f", summary.empty() ? "" : ", ", v.name().c_str(), final_loss);
    summary += buf;
  }
  out.detail = (out.pass ? "" : out.detail + " | ") + summary;
  return out;
}

Outcome fusion_structure() {
  Outcome out;
  Rng rng(303);
  const LengthLimits limits;
  std::size_t built = 0, truncated = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    auto inst = rvt::testing::make_instance(random_words(rng, 30), random_words(rng, 30), random_words(rng, 70));
    inst.instance_id = "f" + std::to_string(i);
    const auto fs = random_features(rng, "img" + std::to_string(i), 8, 4);
    const auto q_len = question_element(inst, vocab()).size();
    const auto r_len = vocab().encode(inst.gold_rationale).size();
    for (const auto& v : all_variants()) {
      const auto seq = build_sequence(v, inst, &fs, vocab(), limits);
      ++built;
      for (const auto& e : check_invariants(seq, vocab(), limits)) out.require(false, v.name() + ": " + e);
      const auto seg_count = [&](Segment s) {
        return static_cast<std::size_t>(std::count(seq.segment_ids.begin(), seq.segment_ids.end(), static_cast<TokenId>(s)));
      };
      out.require(seg_count(Segment::Question) == std::min(q_len, limits.max_question), "question clip mismatch");
      out.require(seq.masked_count() == std::min(r_len, limits.max_rationale - 2) + 1, "mask arithmetic mismatch");
      if (v.mode == FusionMode::Hybrid && v.source == VisualSource::Objects) {
        const auto n = fs.objects->detections.size();
        out.require(seg_count(Segment::Visual) == std::min(n, limits.max_objects), "ROI count mismatch");
        out.require(seq.truncation_report.objects_dropped == (n > limits.max_objects ? n - limits.max_objects : 0),
                    "objects_dropped mismatch");
        truncated += n > limits.max_objects;
      }
      if (v.mode == FusionMode::Hybrid && v.source == VisualSource::SituationRoles) {
        std::size_t grounded = 0;
        for (const auto& r : fs.situation->roles) grounded += r.box && r.feature;
        out.require(seg_count(Segment::Visual) == std::min(grounded, limits.max_roles), "role slot count mismatch");
      }
    }
  }
  if (out.pass)
    out.detail = std::to_string(built) + " sequences, " + std::to_string(truncated) + " with dropped objects";
  return out;
}

Outcome metric_oracles() {
  Outcome out;
  Rng rng(404);
  std::vector<std::string> cands;
  References refs;
  for (int i = 0; i < 50; ++i) {
    cands.push_back(oracle::random_sentence(rng, 1, 10));
    std::vector<std::string> rs;
    const auto k = 1 + rng.index(3);
    for (std::size_t j = 0; j < k; ++j) rs.push_back(oracle::random_sentence(rng, 1, 10));
    refs.push_back(rs);
  }
  const auto b = bleu(cands, refs);
  const auto ob = oracle::bleu(cands, refs, 4);
  for (std::size_t n = 0; n < 4; ++n)
    out.require(std::abs(b[n] - ob[n]) <= 1e-6, "corpus BLEU-" + std::to_string(n + 1) + " differs");
  out.require(std::abs(rouge_l(cands, refs) - oracle::rouge_l(cands, refs)) <= 1e-6, "ROUGE-L differs");
  out.require(std::abs(cider(cands, refs) - oracle::cider(cands, refs)) <= 1e-6, "CIDEr differs");
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const auto sb = sentence_bleu(cands[i], refs[i]);
    const auto osb = oracle::bleu({cands[i]}, {refs[i]}, 4);
    for (std::size_t n = 0; n < 4; ++n) out.require(std::abs(sb[n] - osb[n]) <= 1e-6, "sentence BLEU differs");
    out.require(std::abs(rouge_l({cands[i]}, {refs[i]}) - oracle::rouge_l({cands[i]}, {refs[i]})) <= 1e-6,
                "pair ROUGE-L differs");
  }

  const std::vector<std::string> same{"the man is eating food", "a dog runs in the park", "red ball on green grass"};
  const References same_refs{{same[0]}, {same[1]}, {same[2]}};
  for (double x : bleu(same, same_refs)) out.require(x == 100.0, "identity BLEU is not 100");
  out.require(rouge_l(same, same_refs) == 100.0, "identity ROUGE-L is not 100");
  out.require(std::abs(cider(same, same_refs) - 1000.0) <= 1e-9, "identity CIDEr is not 1000");
  out.require(meteor_reduced(same, same_refs) == 100.0, "identity METEOR is not 100");
  const double cat = bleu({"the cat sat"}, {{"the cat sat down"}})[0];
  out.require(cat == 100.0 * std::exp(1.0 - 4.0 / 3.0), "\"the cat sat\" BLEU-1 is not 100 e^(1-4/3)");
  out.require(std::abs(rouge_l({"a b c"}, {{"a c d"}}) - 200.0 / 3.0) <= 1e-9, "LCS hand case");
  if (out.pass) {
    char buf[80];
    std::snprintf(buf, sizeof buf, "50 pairs; \"the cat sat\" BLEU-1 = %.6f", cat);
    out.detail = buf;
  }
  return out;
}

JudgmentRecord judged(const std::string& item, const std::string& worker, Label visual, Label unrelated = Label::No) {
  JudgmentRecord r;
  r.item_id = item;
  r.worker_id = worker;
  r.textual_plausibility = visual;
  r.visual_plausibility = visual;
  r.grammatical = Label::Yes;
  r.unrelated_content = unrelated;
  return r;
}

Outcome aggregation_oracles() {
  Outcome out;
  const double tol = 1e-9;
  using L = Label;
  RecordsByItem one{{"a", {judged("a", "1", L::Yes), judged("a", "2", L::WeakYes), judged("a", "3", L::No)}}};
  out.require(std::abs(aggregate_plausibility(one, LabelField::Visual).score - 200.0 / 3.0) <= tol,
              "{yes,weak_yes,no} is not 66.67");
  RecordsByItem allno{{"a", {judged("a", "1", L::No), judged("a", "2", L::WeakNo)}}};
  out.require(aggregate_plausibility(allno, LabelField::Visual).score == 0.0, "all-no is not 0");
  RecordsByItem two{{"a", {judged("a", "1", L::Yes)}},
                    {"b", {judged("b", "1", L::Yes), judged("b", "2", L::No), judged("b", "3", L::No)}}};
  out.require(std::abs(aggregate_plausibility(two, LabelField::Visual).score - 200.0 / 3.0) <= tol,
              "mean of ratios {1, 1/3} is not 66.67");

  const std::vector<JudgmentRecord> yyn{judged("a", "1", L::Yes), judged("a", "2", L::Yes), judged("a", "3", L::No)};
  out.require(plausibility_bucket(yyn) == 2u, "{yes,yes,no} is not the 2/3 bucket");
  out.require(plausibility_bucket({judged("a", "1", L::Yes), judged("a", "2", L::Yes), judged("a", "3", L::Yes)}) == 3u,
              "unanimous yes is not bucket 1");
  out.require(plausibility_bucket({judged("a", "1", L::No), judged("a", "2", L::No), judged("a", "3", L::No)}) == 0u,
              "unanimous no is not bucket 0");
  const auto hist = plausibility_variation({{"a", yyn}, {"b", {judged("b", "1", L::Yes)}}});
  out.require(hist.counts == std::array<std::size_t, 4>{0, 0, 1, 0} && hist.excluded == 1, "variation histogram");

  EvalItem item;
  item.item_id = "a";
  item.offered_phrases.nouns = {"dog", "ball", "frisbee"};
  auto pick = judged("a", "1", L::Yes);
  pick.unrelated_phrases.nouns = {"frisbee"};
  const auto fid = aggregate_fidelity({{"a", {pick}}}, {{"a", item}});
  out.require(std::abs(fid.entity - 200.0 / 3.0) <= tol, "entity fidelity is not 2/3");
  const std::vector<JudgmentRecord> nnw{judged("a", "1", L::Yes, L::No), judged("a", "2", L::Yes, L::No),
                                        judged("a", "3", L::Yes, L::WeakNo)};
  out.require(std::abs(item_fidelity(nnw) - 1.0) <= tol, "{no,no,weak_no} fidelity is not 1");
  out.require(aggregate_fidelity({{"a", nnw}}, {{"a", item}}).entity == 100.0, "no picks is not 100");

  std::vector<double> x, y, neg;
  Rng rng(505);
  for (int i = 0; i < 10; ++i) {
    x.push_back(rng.uniform());
    y.push_back(rng.uniform());
    neg.push_back(-x.back() + 1);
  }
  out.require(std::abs(correlate(x, x) - 1.0) <= tol, "y = x is not r = 1");
  out.require(std::abs(correlate(x, neg) + 1.0) <= tol, "y = -x + 1 is not r = -1");
  out.require(std::abs(correlate(x, y) - oracle::pearson(x, y)) <= tol, "Pearson differs from the direct formula");
  out.require(std::abs(correlate(x, y) - correlate(y, x)) <= tol, "Pearson is not symmetric");
  std::vector<double> scaled;
  for (double v : y) scaled.push_back(2.5 * v + 3);
  out.require(std::abs(correlate(x, scaled) - correlate(x, y)) <= tol, "Pearson not affine invariant");
  if (out.pass) out.detail = "r(x, y) = " + std::to_string(correlate(x, y));
  return out;
}

Outcome end_to_end() {
  Outcome out;
  TempDir dir("rvt_e2e");
  std::vector<Variant> variants(all_variants().begin(), all_variants().end());
  const auto res = rvt::testing::run_pipeline(dir.path(), variants);
  for (const auto& s : res.failed_steps) out.require(false, "step failed: " + s);
  const auto& rep = res.report;
  out.require(rep.is_object(), "no report");
  if (!out.pass) return out;
  out.require(rep["rows"].size() == 8, "report does not have 7 variant rows plus the human estimate");
  out.require(rep["columns"].size() == 4, "report does not have 4 task columns");
  out.require(rep["coverage"]["joins_complete"] == true, "joins incomplete");
  for (const char* table : {"visual_plausibility", "textual_plausibility", "plausibility_fidelity", "grammaticality"})
    for (const auto& row : rep["rows"]) {
      out.require(rep[table].contains(row.get<std::string>()), std::string(table) + " missing a row");
      for (const auto& col : rep["columns"])
        out.require(rep[table][row.get<std::string>()].contains(col.get<std::string>()),
                    std::string(table) + " missing a column");
    }
  const auto gen = rvt::read_generations(dir / "gen.jsonl");
  const auto scores = nlohmann::json::parse(rvt::testing::read_file(dir / "scores.json"));
  out.require(scores["instances"].size() == gen.size(), "score rows do not match generations");
  if (out.pass)
    out.detail = std::to_string(gen.size()) + " generations, " + std::to_string(rep["coverage"]["items"].get<int>()) +
                 " items, joins complete";
  return out;
}

Outcome service_protocol() {
  Outcome out;
  TempDir dir("rvt_service");
  std::vector<EvalItem> items;
  for (int i = 0; i < 60; ++i) {
    EvalItem it;
    it.item_id = "item" + std::to_string(i);
    it.instance_id = it.item_id;
    it.variant = "baseline";
    it.rationale = "the dog runs";
    it.offered_phrases.nouns = {"dog"};
    items.push_back(it);
  }
  std::atomic<std::int64_t> now{1000};
  ServiceOptions opt;
  opt.snapshot_every = 37;
  std::size_t duplicates = 0, submitted = 0;
  {
    AssignmentStore store(items, dir.path(), [&] { return now.load(); }, opt);
    Rng rng(606);
    // Phase 1: single-threaded random interleaving of 200 workers.
    std::map<std::string, std::string> holding;
    for (int step = 0; step < 4000; ++step) {
      const auto w = "w" + std::to_string(rng.index(200));
      now += static_cast<std::int64_t>(rng.index(3));
      if (rng.index(500) == 0) now += opt.lease_seconds;
      try {
        switch (rng.index(4)) {
          case 0: {
            const auto v = store.next_task(w);
            if (v) holding[w] = v->item.item_id;
            break;
          }
          case 1:
            if (holding.count(w)) store.submit_textual(holding[w], w, Label::Yes);
            break;
          case 2:
            if (holding.count(w)) {
              const auto events = store.events();
              const auto ack = store.submit(judged(holding[w], w, Label::Yes));
              if (ack.duplicate) {
                ++duplicates;
                out.require(store.events() == events, "duplicate submission appended to the log");
              } else {
                ++submitted;
              }
            }
            break;
          default:
            store.submit(judged(items[rng.index(items.size())].item_id, w, Label::Yes));
        }
      } catch (const ServiceError&) {
      }
      if (step % 200 == 0)
        for (const auto& [id, st] : store.states()) out.require(st.completed.size() <= 3, "item over the cap");
    }
    // Phase 2: concurrent workers on real threads.
    std::vector<std::thread> threads;
    for (int t = 0; t < 8; ++t) {
      threads.emplace_back([&, t] {
        for (int k = 0; k < 25; ++k) {
          const auto w = "t" + std::to_string(t) + "_" + std::to_string(k);
          try {
            const auto v = store.next_task(w);
            if (!v) continue;
            store.submit_textual(v->item.item_id, w, Label::No);
            store.submit(judged(v->item.item_id, w, Label::No));
            store.submit(judged(v->item.item_id, w, Label::No));
          } catch (const ServiceError&) {
          }
        }
      });
    }
    for (auto& th : threads) th.join();
    const auto events_before = store.events();
    for (const auto& r : store.records()) {
      const auto ack = store.submit(r);
      out.require(ack.duplicate, "resubmission was not recognized");
      duplicates += ack.duplicate;
    }
    out.require(store.events() == events_before, "resubmissions appended to the log");
    std::map<std::string, std::size_t> per_item;
    for (const auto& r : store.records()) ++per_item[r.item_id];
    for (const auto& [id, n] : per_item) out.require(n <= 3, id + " has more than 3 records");
    for (const auto& [id, st] : store.states()) out.require(st.completed.size() <= 3, "item over the cap");
    out.require(AssignmentStore::replay(items, dir.path()) == store.states(), "replay differs from live state");
    const auto live_records = store.records();
    const auto live_states = store.states();
    AssignmentStore reopened(items, dir.path(), [&] { return now.load(); }, opt);
    out.require(reopened.states() == live_states, "reopened state differs");
    out.require(reopened.records() == live_records, "reopened records differ");
    submitted = live_records.size();
  }
  if (out.pass)
    out.detail = std::to_string(submitted) + " records, " + std::to_string(duplicates) + " idempotent resubmissions";
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  only.assign(argv + 1, argv + argc);
  criterion("masked-loss", masked_loss);
  criterion("gradient-check", gradient_check);
  criterion("overfit", overfit);
  criterion("fusion-structure", fusion_structure);
  criterion("metric-oracles", metric_oracles);
  criterion("aggregation-oracles", aggregation_oracles);
  criterion("end-to-end", end_to_end);
  criterion("service-protocol", service_protocol);
  std::printf("%d of %d criteria failed\n", failures, selected);
  return failures == 0 ? 0 : 1;
}
