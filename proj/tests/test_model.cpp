#include <doctest.h>

#include <cmath>
#include <numeric>

#include "rvt/model.hpp"
#include "rvt/pipeline.hpp"
#include "rvt/random.hpp"
#include "test_support.hpp"

using namespace rvt;
using rvt::testing::TempDir;

namespace {

ModelConfig tiny(std::size_t vocab = 40) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.vocab_size = vocab;
  c.max_positions = 32;
  c.feature_dim = 6;
  c.vc_dim = 4;
  c.dropout = 0.0;
  c.seed = 11;
  return c;
}

/// Plain text sequence; the last `masked` tokens are rationale targets.
FusedSequence text_sequence(const std::vector<TokenId>& ids, std::size_t masked) {
  FusedSequence s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const bool r = i + masked >= ids.size();
    s.token_ids.push_back(ids[i]);
    s.segment_ids.push_back(static_cast<TokenId>(r ? Segment::Rationale : Segment::Question));
    s.position_ids.push_back(static_cast<TokenId>(i + 1));
    s.rationale_mask.push_back(r);
  }
  return s;
}

void zero_all(TransformerLM& m) {
  for (auto& p : m.parameters()) p = 0.0;
}

double log_sum_exp(const std::vector<double>& v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double s = 0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

}  // namespace

TEST_CASE("zero weights give uniform logits and ln V loss") {
  TransformerLM m(tiny(37));
  zero_all(m);
  const auto seq = text_sequence({3, 4, 5, 6}, 1);
  const auto logits = m.forward(seq);
  CHECK(logits.maxCoeff() == doctest::Approx(0.0));
  CHECK(logits.minCoeff() == doctest::Approx(0.0));
  CHECK(m.loss(seq) == doctest::Approx(std::log(37.0)).epsilon(1e-12));
}

TEST_CASE("two-token rationale loss equals hand-computed mean cross-entropy") {
  TransformerLM m(tiny(10));
  zero_all(m);
  auto hb = m.mat("head_b");
  std::vector<double> h{0.5, -1.0, 2.0, 0.0, 1.5, -0.5, 0.25, 3.0, -2.0, 1.0};
  for (int v = 0; v < 10; ++v) hb(0, v) = h[static_cast<std::size_t>(v)];
  const auto seq = text_sequence({1, 2, 7, 4}, 2);
  const double lse = log_sum_exp(h);
  const double expect = ((lse - h[7]) + (lse - h[4])) / 2.0;
  CHECK(m.loss(seq) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("context targets do not affect the loss") {
  TransformerLM m(tiny());
  const auto seq = text_sequence({1, 2, 3, 4, 5, 6, 7}, 3);
  std::vector<TokenId> targets(seq.token_ids.begin() + 1, seq.token_ids.end());
  const double base = m.loss(seq);
  CHECK(m.loss(seq, targets) == base);
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto rewritten = targets;
    for (std::size_t i = 0; i < rewritten.size(); ++i)
      if (!seq.rationale_mask[i + 1]) rewritten[i] = static_cast<TokenId>(rng.index(40));
    CHECK(m.loss(seq, rewritten) == base);
  }
  auto changed = targets;
  changed.back() = changed.back() == 9 ? 10 : 9;
  CHECK(m.loss(seq, changed) != base);
  CHECK_THROWS(m.loss(text_sequence({1, 2, 3}, 0)));
}

TEST_CASE("logits are causal") {
  TransformerLM m(tiny());
  const auto a = text_sequence({1, 2, 3, 4, 5, 6, 7, 8}, 2);
  auto b = a;
  std::swap(b.token_ids[5], b.token_ids[7]);
  b.token_ids[6] = 30;
  const auto la = m.forward(a);
  const auto lb = m.forward(b);
  for (Eigen::Index i = 0; i <= 4; ++i) CHECK((la.row(i) - lb.row(i)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((la.row(5) - lb.row(5)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("a zero whole-image region adds exactly the layer-norm bias") {
  TransformerLM m(tiny());
  m.mat("vis.feat_b").setZero();
  m.mat("vis.coord_b").setZero();
  m.mat("vis.coord_w").setZero();
  auto lnb = m.mat("vis.ln_b");
  for (Eigen::Index j = 0; j < lnb.cols(); ++j) lnb(0, j) = 0.1 * static_cast<double>(j + 1);
  const auto plain = text_sequence({1, 2, 3, 4}, 1);
  auto with = plain;
  with.regions.push_back({std::vector<float>(6, 0.0f), coordinate_vector({0, 0, 10, 10}, {10, 10})});
  with.whole_image_ref = 0;
  for (std::size_t i = 0; i < with.size(); ++i) with.visual_slots.push_back({i, SlotKind::WholeImage, 0});
  const Matrix diff = m.embed(with) - m.embed(plain);
  for (Eigen::Index i = 0; i < diff.rows(); ++i)
    for (Eigen::Index j = 0; j < diff.cols(); ++j) CHECK(diff(i, j) == doctest::Approx(lnb(0, j)).epsilon(1e-12));
  CHECK((m.forward(with) - m.forward(plain)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("analytic gradients match finite differences on sampled parameters") {
  auto cfg = tiny(30);
  cfg.n_layers = 1;
  TransformerLM m(cfg);
  const auto fs = synthetic_features("img", 6, 4, 3);
  FusedSequence seq = text_sequence({1, 5, 9, 2, 7, 3}, 3);
  // Hybrid-style visual inputs so every visual tensor receives gradient.
  seq.regions.push_back({fs.objects->detections[0].feature, coordinate_vector(fs.objects->detections[0].box, fs.objects->image_size)});
  seq.whole_image_ref = 0;
  for (std::size_t i = 1; i < seq.size(); ++i) seq.visual_slots.push_back({i, SlotKind::WholeImage, 0});
  seq.vc_vectors.push_back((*fs.inferences->start_embeddings)[0]);
  seq.visual_slots.push_back({0, SlotKind::VcStart, 0});

  std::vector<double> grad(m.num_parameters(), 0.0);
  const auto sum = m.accumulate_gradients(seq, grad, 1.0);
  CHECK(sum.count == 3);
  CHECK(sum.sum / 3.0 == doctest::Approx(m.loss(seq)).epsilon(1e-12));

  auto params = m.parameters();
  Rng rng(2);
  std::size_t checked = 0;
  for (const auto& t : m.tensors()) {
    for (int k = 0; k < 3; ++k) {
      const std::size_t idx = t.offset + rng.index(t.size());
      const double orig = params[idx];
      const double h = 1e-5;
      params[idx] = orig + h;
      const double up = m.loss(seq) * 3.0;
      params[idx] = orig - h;
      const double down = m.loss(seq) * 3.0;
      params[idx] = orig;
      const double numeric = (up - down) / (2 * h);
      CHECK_MESSAGE(std::abs(grad[idx] - numeric) <= 1e-4 * std::max(1e-3, std::abs(numeric)) + 1e-8,
                    t.name << "[" << idx - t.offset << "] analytic " << grad[idx] << " numeric " << numeric);
      ++checked;
    }
  }
  CHECK(checked == 3 * m.tensors().size());
}

TEST_CASE("greedy decoding follows forced argmax and stops at the end token") {
  const TokenId begin = 3, t = 5, end = 7;
  auto cfg = tiny(12);
  TransformerLM m(cfg);
  zero_all(m);
  m.mat("lnf_g").setOnes();
  const double r = 1.0 / std::sqrt(2.0);
  auto tok = m.mat("tok_emb");
  // Zero-mean orthogonal directions u1, u2, u3; begin -> t -> end.
  tok(begin, 0) = r;
  tok(begin, 1) = -r;
  tok(t, 0) = 2 * r;
  tok(t, 1) = -2 * r;
  tok(t, 2) = 2 * r;
  tok(t, 3) = -2 * r;
  tok(end, 2) = 5 * r;
  tok(end, 3) = -5 * r;
  tok(end, 4) = 5 * r;
  tok(end, 5) = -5 * r;
  const auto prompt = text_sequence({1, 2, begin}, 0);
  CHECK(m.generate_greedy(prompt, end, 50) == std::vector<TokenId>{t});
  CHECK(m.generate_greedy(prompt, end, 0).empty());
  CHECK(m.generate_greedy(prompt, end, 1) == std::vector<TokenId>{t});
}

TEST_CASE("greedy decoding breaks ties toward the lowest id") {
  TransformerLM m(tiny(9));
  zero_all(m);
  const auto out = m.generate_greedy(text_sequence({1, 2}, 0), 8, 3);
  CHECK(out == std::vector<TokenId>{0, 0, 0});
}

TEST_CASE("checkpoint round trip is bit-identical") {
  TempDir dir;
  TransformerLM m(tiny());
  m.round_to_storage_precision();
  m.save(dir.path(), "abc", 17);
  const auto loaded = TransformerLM::load(dir.path());
  CHECK(loaded.vocab_hash == "abc");
  CHECK(loaded.step == 17);
  CHECK(loaded.model.config() == m.config());
  const auto seq = text_sequence({1, 2, 3, 4, 5}, 2);
  CHECK((loaded.model.forward(seq) - m.forward(seq)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("configuration validation") {
  auto c = tiny();
  c.n_heads = 3;
  CHECK_THROWS(TransformerLM{c});
  c = tiny();
  c.vocab_size = 0;
  CHECK_THROWS(TransformerLM{c});
  c = tiny();
  CHECK(ModelConfig::from_json(c.to_json()) == c);
  TransformerLM m(tiny());
  CHECK_THROWS(m.forward(text_sequence(std::vector<TokenId>(40, 1), 1)));
}

TEST_CASE("identical seeds give identical weights") {
  TransformerLM a(tiny()), b(tiny());
  CHECK(std::equal(a.parameters().begin(), a.parameters().end(), b.parameters().begin()));
  auto c = tiny();
  c.seed = 12;
  TransformerLM d(c);
  CHECK_FALSE(std::equal(a.parameters().begin(), a.parameters().end(), d.parameters().begin()));
}
