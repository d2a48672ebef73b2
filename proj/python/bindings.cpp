#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "rvt/cli.hpp"
#include "rvt/fusion.hpp"
#include "rvt/judgments.hpp"
#include "rvt/metrics.hpp"
#include "rvt/model.hpp"
#include "rvt/pipeline.hpp"
#include "rvt/text_codec.hpp"

namespace py = pybind11;
using namespace rvt;

namespace {

RationaleInstance instance_from(const std::string& question, const std::string& answer, const std::string& rationale,
                                const std::string& task, const std::string& image_id) {
  RationaleInstance inst;
  inst.instance_id = "py";
  inst.image_id = image_id;
  inst.task = parse_task(task);
  inst.context_question_or_hypothesis = question;
  inst.context_answer_or_label = answer;
  inst.gold_rationale = rationale;
  return inst;
}

py::dict sequence_dict(const FusedSequence& s) {
  py::dict d;
  d["token_ids"] = s.token_ids;
  d["segment_ids"] = s.segment_ids;
  d["position_ids"] = s.position_ids;
  d["rationale_mask"] = s.rationale_mask;
  py::list slots;
  for (const auto& v : s.visual_slots) {
    const char* kind = v.kind == SlotKind::Roi ? "roi" : v.kind == SlotKind::WholeImage ? "whole_image" : "vc_start";
    slots.append(py::make_tuple(v.index, kind, v.embedding_ref));
  }
  d["visual_slots"] = slots;
  d["variant"] = s.variant.name();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Rationale generation, fusion, metrics and judgment aggregation";

  py::class_<Vocabulary>(m, "Vocabulary")
      .def_static("load", [](const std::string& path) { return Vocabulary::load(path); })
      .def("save", [](const Vocabulary& v, const std::string& path) { v.save(path); })
      .def("encode", &Vocabulary::encode)
      .def("decode", &Vocabulary::decode)
      .def("token", &Vocabulary::token)
      .def("special_id", &Vocabulary::special_id)
      .def_property_readonly("hash", &Vocabulary::hash)
      .def("__len__", &Vocabulary::size);

  m.def(
      "train_bpe",
      [](const std::vector<std::string>& corpus, std::size_t merges, std::vector<std::string> roles) {
        auto specials = SpecialTokenInventory::with_roles(std::move(roles));
        const auto target = specials.size() + 256 + merges;
        return train_bpe(corpus, target, std::move(specials));
      },
      py::arg("corpus"), py::arg("merges"), py::arg("roles") = std::vector<std::string>{});

  m.def(
      "build_sequence",
      [](const std::string& variant, const Vocabulary& vocab, const std::string& question, const std::string& answer,
         const std::string& rationale, const std::string& task, const std::string& image_id, std::size_t feature_dim,
         std::size_t vc_dim, std::uint64_t feature_seed, bool prompt_only) {
        const auto v = Variant::parse(variant);
        const auto inst = instance_from(question, answer, rationale, task, image_id);
        std::optional<VisualFeatureSet> fs;
        if (v.uses_features()) fs = synthetic_features(image_id, feature_dim, vc_dim, feature_seed);
        const auto seq = build_sequence(v, inst, fs ? &*fs : nullptr, vocab, LengthLimits{},
                                        prompt_only ? RationalePart::PromptOnly : RationalePart::Full);
        auto d = sequence_dict(seq);
        d["violations"] = check_invariants(seq, vocab, LengthLimits{});
        return d;
      },
      py::arg("variant"), py::arg("vocab"), py::arg("question"), py::arg("answer"), py::arg("rationale"),
      py::arg("task") = "vcr", py::arg("image_id") = "img", py::arg("feature_dim") = 16, py::arg("vc_dim") = 8,
      py::arg("feature_seed") = 0, py::arg("prompt_only") = false,
      "Fused input for one instance; visual variants use synthetic features.");

  m.def("variants", [] {
    std::vector<std::string> out;
    for (const auto& v : all_variants()) out.push_back(v.name());
    return out;
  });

  m.def(
      "bleu", [](const std::vector<std::string>& c, const References& r, std::size_t n) { return bleu(c, r, n); },
      py::arg("candidates"), py::arg("references"), py::arg("max_n") = 4);
  m.def("rouge_l", &rouge_l, py::arg("candidates"), py::arg("references"));
  m.def("cider", &cider, py::arg("candidates"), py::arg("references"));
  m.def("meteor", &meteor_reduced, py::arg("candidates"), py::arg("references"));
  m.def(
      "content_word_overlap",
      [](const std::vector<std::string>& a, const std::vector<std::string>& b,
         std::optional<std::vector<std::string>> stopwords) {
        const auto sw = stopwords ? StopwordList::from_words(*stopwords) : StopwordList::builtin();
        return content_word_overlap(a, b, sw);
      },
      py::arg("a"), py::arg("b"), py::arg("stopwords") = py::none());
  m.def("porter_stem", &porter_stem);

  m.def(
      "plausibility",
      [](const std::vector<std::vector<std::string>>& labels_per_item) {
        RecordsByItem recs;
        for (std::size_t i = 0; i < labels_per_item.size(); ++i) {
          auto& list = recs[std::to_string(i)];
          for (std::size_t k = 0; k < labels_per_item[i].size(); ++k) {
            JudgmentRecord r;
            r.item_id = std::to_string(i);
            r.worker_id = std::to_string(k);
            r.visual_plausibility = parse_label(labels_per_item[i][k]);
            list.push_back(r);
          }
        }
        return aggregate_plausibility(recs, LabelField::Visual).score;
      },
      py::arg("labels_per_item"), "Mean over items of the merged-yes ratio, times 100.");
  m.def("correlate", &correlate, py::arg("x"), py::arg("y"));
  m.def(
      "extract_phrases",
      [](const std::string& text) {
        const auto p = extract_phrases(text, RuleTagger{});
        py::dict d;
        d["nouns"] = p.nouns;
        d["noun_phrases"] = p.noun_phrases;
        d["verb_phrases"] = p.verb_phrases;
        return d;
      },
      py::arg("text"));
  m.def(
      "build_report",
      [](const std::string& tasks, const std::string& judgments) {
        return build_report(read_items(tasks), read_records(judgments));
      },
      py::arg("tasks"), py::arg("judgments"), "Report JSON from task and judgment JSONL files.");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        py::gil_scoped_release release;
        return run_cli(args);
      },
      py::arg("args"), "Runs one rvt subcommand; returns the exit code.");
}
