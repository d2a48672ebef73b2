#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "rvt/metrics.hpp"

using namespace rvt;

TEST_CASE("tokenization lowercases and splits on punctuation") {
  CHECK(metric_tokens("The dog, running!") == std::vector<std::string>{"the", "dog", "running"});
  CHECK(metric_tokens("  ").empty());
}

TEST_CASE("identical candidate and reference score 100") {
  const std::vector<std::string> c{"the man is eating food", "a dog runs in the park"};
  const References r{{c[0]}, {c[1]}};
  for (double b : bleu(c, r)) CHECK(b == doctest::Approx(100.0));
  CHECK(rouge_l(c, r) == doctest::Approx(100.0));
  CHECK(meteor_reduced(c, r) == doctest::Approx(100.0));
}

TEST_CASE("brevity penalty on a short candidate") {
  const auto b = bleu({"the cat sat"}, {{"the cat sat down"}});
  CHECK(b[0] == doctest::Approx(100.0 * std::exp(1.0 - 4.0 / 3.0)).epsilon(1e-12));
  CHECK(b[0] == doctest::Approx(71.653131).epsilon(1e-8));
  CHECK(sentence_bleu("the cat sat", {"the cat sat down"})[0] == doctest::Approx(b[0]));
}

TEST_CASE("disjoint vocabularies give zero") {
  const auto b = bleu({"red ball"}, {{"green bench"}});
  for (double x : b) CHECK(x == 0.0);
  CHECK(rouge_l({"red ball"}, {{"green bench"}}) == 0.0);
  CHECK(meteor_reduced({"red ball"}, {{"green bench"}}) == 0.0);
}

TEST_CASE("ROUGE-L on a hand-computed LCS") {
  CHECK(rouge_l({"a b c"}, {{"a c d"}}) == doctest::Approx(200.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("CIDEr of a perfect corpus is 1000") {
  const std::vector<std::string> c{"red ball on green grass", "a man eats his food", "the dog runs very fast"};
  const References r{{c[0]}, {c[1]}, {c[2]}};
  const auto per = cider_per_instance(c, r);
  for (double v : per) CHECK(v == doctest::Approx(10.0));
  CHECK(cider(c, r) == doctest::Approx(1000.0));
  CHECK_THROWS(cider({"a"}, {{"a"}}));
}

TEST_CASE("metric inputs are validated") {
  CHECK_THROWS(bleu({}, {}));
  CHECK_THROWS(bleu({"a"}, {{}}));
  CHECK_THROWS(rouge_l({"a", "b"}, {{"a"}}));
}

TEST_CASE("METEOR counts stem matches and fragmentation") {
  CHECK(meteor_pair("dogs running", {"dog runs"}) == doctest::Approx(1.0));
  const double swapped = meteor_pair("b a", {"a b"});
  CHECK(swapped < 1.0);
  CHECK(swapped == doctest::Approx(1.0 - 0.5 * std::pow(1.0 / 2.0, 3.0)));
}

TEST_CASE("Porter stemmer") {
  CHECK(porter_stem("caresses") == "caress");
  CHECK(porter_stem("ponies") == "poni");
  CHECK(porter_stem("running") == "run");
  CHECK(porter_stem("hopeful") == "hope");
  CHECK(porter_stem("relational") == "relat");
  CHECK(porter_stem("generalization") == "gener");
  CHECK(porter_stem("agreed") == "agre");
  CHECK(porter_stem("sky") == "sky");
}

TEST_CASE("content-word overlap") {
  const auto sw = StopwordList::from_words({"the", "a"});
  CHECK(content_overlap_pair("the dog runs", "a dog sleeps", sw) == doctest::Approx(0.5));
  CHECK(content_word_overlap({"the dog runs"}, {"a dog sleeps"}, sw) == doctest::Approx(50.0));
  CHECK(content_word_overlap({"the dog runs"}, {"the dog runs"}, sw) == doctest::Approx(100.0));
  CHECK(content_overlap_pair("the a", "dog", sw) < 0);
  const auto builtin = StopwordList::builtin();
  CHECK(builtin.words.count("the"));
  CHECK(builtin.hash.size() == 64);
  CHECK(StopwordList::from_words({"b", "a"}).hash == StopwordList::from_words({"a", "b", "a"}).hash);
}

TEST_CASE("scores agree with the naive oracles on random pairs") {
  Rng rng(41);
  std::vector<std::string> cands;
  References refs;
  for (int i = 0; i < 30; ++i) {
    cands.push_back(oracle::random_sentence(rng, 1, 8));
    std::vector<std::string> rs;
    const auto k = 1 + rng.index(2);
    for (std::size_t j = 0; j < k; ++j) rs.push_back(oracle::random_sentence(rng, 1, 8));
    refs.push_back(rs);
  }
  const auto got = bleu(cands, refs);
  const auto want = oracle::bleu(cands, refs, 4);
  for (std::size_t n = 0; n < 4; ++n) CHECK(got[n] == doctest::Approx(want[n]).epsilon(1e-9));
  CHECK(rouge_l(cands, refs) == doctest::Approx(oracle::rouge_l(cands, refs)).epsilon(1e-9));
  CHECK(cider(cands, refs) == doctest::Approx(oracle::cider(cands, refs)).epsilon(1e-9));
}

TEST_CASE("corpus report carries metadata and per-instance scores") {
  const auto rep = score_corpus({"x", "y"}, {"the dog runs", "a man eats"}, {{"the dog runs"}, {"a woman eats"}},
                                StopwordList::builtin());
  CHECK(rep.instances.size() == 2);
  CHECK(rep.corpus.count("bleu_4"));
  CHECK(rep.corpus.count("cider"));
  CHECK(rep.metadata.count("meteor"));
  CHECK(rep.metadata.count("stopword_hash"));
  CHECK(rep.instances[0].id == "x");
}
