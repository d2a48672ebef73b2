#include "rvt/fusion.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>
#include <unordered_set>

namespace rvt {

namespace {

std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::vector<TokenId> wrap(TokenId begin, std::vector<TokenId> inner, TokenId end) {
  inner.insert(inner.begin(), begin);
  inner.push_back(end);
  return inner;
}

// Clips a delimited element to `limit` tokens by dropping inner tokens from
// the end; both delimiters are kept. Returns the number of tokens dropped.
std::size_t clip_delimited(std::vector<TokenId>& element, std::size_t limit) {
  if (element.size() <= limit) return 0;
  const std::size_t dropped = element.size() - limit;
  const TokenId end = element.back();
  element.resize(limit - 1);
  element.push_back(end);
  return dropped;
}

std::size_t clip_plain(std::vector<TokenId>& element, std::size_t limit) {
  if (element.size() <= limit) return 0;
  const std::size_t dropped = element.size() - limit;
  element.resize(limit);
  return dropped;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

class SequenceBuilder {
 public:
  explicit SequenceBuilder(FusedSequence& seq) : seq_(seq) {}

  void add_text(const std::vector<TokenId>& ids, Segment segment, bool position_zero,
                bool whole_image) {
    for (TokenId id : ids) {
      const std::size_t index = seq_.token_ids.size();
      seq_.token_ids.push_back(id);
      seq_.segment_ids.push_back(static_cast<TokenId>(segment));
      seq_.position_ids.push_back(position_zero ? 0 : next_position_++);
      seq_.rationale_mask.push_back(false);
      if (whole_image && seq_.whole_image_ref)
        seq_.visual_slots.push_back({index, SlotKind::WholeImage, *seq_.whole_image_ref});
    }
  }

  void add_slot(TokenId unk, SlotKind kind, std::size_t ref) {
    const std::size_t index = seq_.token_ids.size();
    seq_.token_ids.push_back(unk);
    seq_.segment_ids.push_back(static_cast<TokenId>(Segment::Visual));
    seq_.position_ids.push_back(0);
    seq_.rationale_mask.push_back(false);
    seq_.visual_slots.push_back({index, kind, ref});
  }

 private:
  FusedSequence& seq_;
  TokenId next_position_ = 1;
};

// Appends question, answer and (optionally) rationale to `seq`.
void add_textual_context(FusedSequence& seq, SequenceBuilder& builder,
                         const RationaleInstance& instance, const Vocabulary& vocab,
                         const LengthLimits& limits, RationalePart part, bool whole_image) {
  auto q = question_element(instance, vocab);
  seq.truncation_report.question_tokens_dropped = clip_delimited(q, limits.max_question);
  builder.add_text(q, Segment::Question, false, whole_image);

  auto a = answer_element(instance, vocab);
  seq.truncation_report.answer_tokens_dropped = clip_delimited(a, limits.max_answer);
  builder.add_text(a, Segment::Answer, false, whole_image);

  const TokenId begin = vocab.special_id(special::kBeginRationale);
  if (part == RationalePart::PromptOnly) {
    builder.add_text({begin}, Segment::Rationale, false, whole_image);
    return;
  }
  auto r = rationale_element(instance, vocab);
  seq.truncation_report.rationale_tokens_dropped = clip_delimited(r, limits.max_rationale);
  const std::size_t start = seq.token_ids.size();
  builder.add_text(r, Segment::Rationale, false, whole_image);
  // Mask covers rationale tokens and the end separator, not the begin one.
  for (std::size_t i = start + 1; i < seq.token_ids.size(); ++i) seq.rationale_mask[i] = true;
}

void require_instance(const RationaleInstance& instance, RationalePart part) {
  instance.validate();
  if (part == RationalePart::Full && instance.gold_rationale.empty())
    throw std::invalid_argument(instance.instance_id + ": no rationale to build a training sequence");
}

}  // namespace

// ---------------------------------------------------------------------------
// Variants

std::string Variant::name() const {
  switch (mode) {
    case FusionMode::Baseline: return "baseline";
    case FusionMode::Uniform:
      switch (source) {
        case VisualSource::Objects: return "uniform-objects";
        case VisualSource::Situation: return "uniform-situation";
        case VisualSource::VisComet: return "uniform-viscomet";
        default: break;
      }
      break;
    case FusionMode::Hybrid:
      switch (source) {
        case VisualSource::Objects: return "hybrid-objects";
        case VisualSource::SituationRoles: return "hybrid-situation-roles";
        case VisualSource::VisComet: return "hybrid-viscomet";
        default: break;
      }
      break;
  }
  throw std::invalid_argument("not one of the seven fusion variants");
}

Variant Variant::parse(std::string_view name) {
  for (const auto& v : all_variants())
    if (v.name() == name) return v;
  throw std::invalid_argument("unknown variant '" + std::string(name) + "'");
}

Variant Variant::from_mode_source(std::string_view mode, std::string_view source) {
  const std::string m = lowercase(mode);
  const std::string s = lowercase(source);
  if (m == "baseline" || m == "text" || m == "text-only") {
    if (!s.empty() && s != "none") throw std::invalid_argument("baseline takes no visual source");
    return {};
  }
  Variant v;
  if (m == "uniform") {
    v.mode = FusionMode::Uniform;
    if (s == "objects") v.source = VisualSource::Objects;
    else if (s == "situation") v.source = VisualSource::Situation;
    else if (s == "viscomet") v.source = VisualSource::VisComet;
    else throw std::invalid_argument("uniform fusion source must be objects, situation or viscomet");
  } else if (m == "hybrid") {
    v.mode = FusionMode::Hybrid;
    if (s == "objects") v.source = VisualSource::Objects;
    else if (s == "situation" || s == "situation-roles" || s == "roles")
      v.source = VisualSource::SituationRoles;
    else if (s == "viscomet") v.source = VisualSource::VisComet;
    else throw std::invalid_argument("hybrid fusion source must be objects, situation-roles or viscomet");
  } else {
    throw std::invalid_argument("unknown fusion mode '" + std::string(mode) + "'");
  }
  return v;
}

const std::array<Variant, 7>& all_variants() {
  static const std::array<Variant, 7> variants{{
      {FusionMode::Baseline, VisualSource::None},
      {FusionMode::Uniform, VisualSource::Objects},
      {FusionMode::Uniform, VisualSource::Situation},
      {FusionMode::Uniform, VisualSource::VisComet},
      {FusionMode::Hybrid, VisualSource::Objects},
      {FusionMode::Hybrid, VisualSource::SituationRoles},
      {FusionMode::Hybrid, VisualSource::VisComet},
  }};
  return variants;
}

// ---------------------------------------------------------------------------

CoordinateVector coordinate_vector(const Box& box, const ImageSize& size) {
  if (!(size.width > 0 && size.height > 0)) throw std::invalid_argument("image size must be positive");
  if (!(box.x2 > box.x1 && box.y2 > box.y1)) throw std::invalid_argument("degenerate box (zero area)");
  if (box.x1 < 0 || box.y1 < 0 || box.x2 > size.width || box.y2 > size.height)
    throw std::invalid_argument("box outside image bounds");
  CoordinateVector c;
  c.values = {box.x1 / size.width, box.y1 / size.height, box.x2 / size.width, box.y2 / size.height,
              (box.x2 - box.x1) * (box.y2 - box.y1) / (size.width * size.height)};
  return c;
}

std::size_t FusedSequence::masked_count() const {
  return static_cast<std::size_t>(std::count(rationale_mask.begin(), rationale_mask.end(), true));
}

void FusedSequence::append_rationale_token(TokenId id, bool masked) {
  TokenId next_pos = 1;
  for (TokenId p : position_ids) next_pos = std::max<TokenId>(next_pos, p + 1);
  const std::size_t index = token_ids.size();
  token_ids.push_back(id);
  segment_ids.push_back(static_cast<TokenId>(Segment::Rationale));
  position_ids.push_back(next_pos);
  rationale_mask.push_back(masked);
  if (whole_image_ref) visual_slots.push_back({index, SlotKind::WholeImage, *whole_image_ref});
}

std::size_t max_input_length(const Variant& variant, const LengthLimits& l) {
  std::size_t n = l.max_question + l.max_answer + l.max_rationale;
  switch (variant.mode) {
    case FusionMode::Baseline: return n;
    case FusionMode::Uniform:
      switch (variant.source) {
        case VisualSource::Objects: return n + l.max_object_labels;
        case VisualSource::Situation: return n + l.max_situation;
        case VisualSource::VisComet: return n + l.max_vc_text;
        default: break;
      }
      break;
    case FusionMode::Hybrid:
      switch (variant.source) {
        case VisualSource::Objects: return n + l.max_objects;
        case VisualSource::SituationRoles: return n + l.max_roles;
        case VisualSource::VisComet: return n + 3;
        default: break;
      }
      break;
  }
  throw std::invalid_argument("invalid variant");
}

std::vector<TokenId> question_element(const RationaleInstance& instance, const Vocabulary& vocab) {
  return wrap(vocab.special_id(special::kBeginQuestion),
              vocab.encode(instance.context_question_or_hypothesis),
              vocab.special_id(special::kEndQuestion));
}

std::vector<TokenId> answer_element(const RationaleInstance& instance, const Vocabulary& vocab) {
  return wrap(vocab.special_id(special::kBeginAnswer), vocab.encode(instance.context_answer_or_label),
              vocab.special_id(special::kEndAnswer));
}

std::vector<TokenId> rationale_element(const RationaleInstance& instance, const Vocabulary& vocab) {
  return wrap(vocab.special_id(special::kBeginRationale), vocab.encode(instance.gold_rationale),
              vocab.special_id(special::kEndRationale));
}

std::string merged_object_labels(const ObjectDetections& objects) {
  std::vector<std::string> labels;
  std::unordered_set<std::string> seen;
  for (const auto& d : objects.detections) {
    if (lowercase(d.label) == "person") continue;
    if (seen.insert(d.label).second) labels.push_back(d.label);
  }
  return join(labels, " ");
}

std::vector<TokenId> object_labels_element(const ObjectDetections& objects, const Vocabulary& vocab) {
  return wrap(vocab.special_id(special::kBeginObjects), vocab.encode(merged_object_labels(objects)),
              vocab.special_id(special::kEndObjects));
}

std::vector<TokenId> situation_element(const SituationFrame& frame, const Vocabulary& vocab) {
  std::vector<TokenId> out{vocab.special_id(special::kBeginSituation),
                           vocab.special_id(special::kBeginVerb)};
  auto append = [&](const std::vector<TokenId>& ids) { out.insert(out.end(), ids.begin(), ids.end()); };
  append(vocab.encode(frame.verb));
  out.push_back(vocab.special_id(special::kEndVerb));
  for (const auto& role : frame.roles) {
    const auto [begin, end] = vocab.role_delimiters(role.role);
    if (role.noun.empty()) continue;
    out.push_back(begin);
    append(vocab.encode(role.noun));
    out.push_back(end);
  }
  if (frame.place && !frame.place->empty()) {
    out.push_back(vocab.special_id(special::kBeginPlace));
    append(vocab.encode(*frame.place));
    out.push_back(vocab.special_id(special::kEndPlace));
  }
  out.push_back(vocab.special_id(special::kEndSituation));
  return out;
}

std::vector<TokenId> viscomet_element(const CommonsenseInferences& inferences,
                                      const Vocabulary& vocab) {
  std::vector<TokenId> out;
  auto relation = [&](std::string_view start, const std::vector<std::string>& items) {
    out.push_back(vocab.special_id(start));
    std::vector<std::string> top(items.begin(),
                                 items.begin() + static_cast<std::ptrdiff_t>(
                                                     std::min(items.size(), kInferencesPerRelation)));
    const auto ids = vocab.encode(join(top, ", "));
    out.insert(out.end(), ids.begin(), ids.end());
  };
  relation(special::kBeginBefore, inferences.before);
  relation(special::kBeginAfter, inferences.after);
  relation(special::kBeginIntent, inferences.intent);
  return out;
}

// ---------------------------------------------------------------------------
// Builders

FusedSequence build_baseline(const RationaleInstance& instance, const Vocabulary& vocab,
                             const LengthLimits& limits, RationalePart part) {
  require_instance(instance, part);
  FusedSequence seq;
  SequenceBuilder builder(seq);
  add_textual_context(seq, builder, instance, vocab, limits, part, false);
  return seq;
}

FusedSequence build_uniform(const RationaleInstance& instance, const VisualFeatureSet& features,
                            VisualSource source, const Vocabulary& vocab,
                            const LengthLimits& limits, RationalePart part) {
  require_instance(instance, part);
  FusedSequence seq;
  seq.variant = {FusionMode::Uniform, source};
  SequenceBuilder builder(seq);
  switch (source) {
    case VisualSource::Objects: {
      if (!features.objects) throw std::invalid_argument(features.image_id + ": object detections missing");
      auto block = object_labels_element(*features.objects, vocab);
      seq.truncation_report.object_label_tokens_dropped =
          clip_delimited(block, limits.max_object_labels);
      builder.add_text(block, Segment::Visual, true, false);
      break;
    }
    case VisualSource::Situation: {
      if (!features.situation) throw std::invalid_argument(features.image_id + ": situation frame missing");
      auto block = situation_element(*features.situation, vocab);
      seq.truncation_report.situation_tokens_dropped = clip_delimited(block, limits.max_situation);
      builder.add_text(block, Segment::Visual, false, false);
      break;
    }
    case VisualSource::VisComet: {
      if (!features.inferences)
        throw std::invalid_argument(features.image_id + ": commonsense inferences missing");
      auto block = viscomet_element(*features.inferences, vocab);
      seq.truncation_report.vc_tokens_dropped = clip_plain(block, limits.max_vc_text);
      builder.add_text(block, Segment::Visual, false, false);
      break;
    }
    default: throw std::invalid_argument("uniform fusion needs objects, situation or viscomet");
  }
  add_textual_context(seq, builder, instance, vocab, limits, part, false);
  return seq;
}

FusedSequence build_hybrid(const RationaleInstance& instance, const VisualFeatureSet& features,
                           VisualSource source, const Vocabulary& vocab, const LengthLimits& limits,
                           RationalePart part) {
  require_instance(instance, part);
  FusedSequence seq;
  seq.variant = {FusionMode::Hybrid, source};
  SequenceBuilder builder(seq);
  const TokenId unk = vocab.special_id(special::kUnk);

  auto whole_image = [&]() {
    if (!features.objects)
      throw std::invalid_argument(features.image_id + ": whole-image representation missing");
    const auto& o = *features.objects;
    if (o.whole_image_feature.size() != features.feature_dim)
      throw std::invalid_argument(features.image_id + ": whole-image feature dim mismatch");
    seq.regions.push_back({o.whole_image_feature,
                           coordinate_vector({0, 0, o.image_size.width, o.image_size.height}, o.image_size)});
    seq.whole_image_ref = seq.regions.size() - 1;
  };

  switch (source) {
    case VisualSource::Objects: {
      if (!features.objects) throw std::invalid_argument(features.image_id + ": object detections missing");
      const auto& o = *features.objects;
      if (o.detections.empty())
        throw std::invalid_argument(features.image_id + ": no object regions to condition on");
      const std::size_t kept = std::min(o.detections.size(), limits.max_objects);
      seq.truncation_report.objects_dropped = o.detections.size() - kept;
      for (std::size_t i = 0; i < kept; ++i) {
        const auto& d = o.detections[i];
        if (d.feature.size() != features.feature_dim)
          throw std::invalid_argument(features.image_id + ": object feature dim mismatch");
        seq.regions.push_back({d.feature, coordinate_vector(d.box, o.image_size)});
        builder.add_slot(unk, SlotKind::Roi, seq.regions.size() - 1);
      }
      whole_image();
      break;
    }
    case VisualSource::SituationRoles: {
      if (!features.situation) throw std::invalid_argument(features.image_id + ": situation frame missing");
      if (!features.objects)
        throw std::invalid_argument(features.image_id + ": image size and whole-image feature missing");
      std::vector<const SituationRole*> grounded;
      for (const auto& r : features.situation->roles)
        if (r.feature && r.box) grounded.push_back(&r);
      if (grounded.empty())
        throw std::invalid_argument(features.image_id + ": no grounded situation roles to condition on");
      const std::size_t kept = std::min(grounded.size(), limits.max_roles);
      seq.truncation_report.roles_dropped = grounded.size() - kept;
      for (std::size_t i = 0; i < kept; ++i) {
        const auto& r = *grounded[i];
        if (r.feature->size() != features.feature_dim)
          throw std::invalid_argument(features.image_id + ": role feature dim mismatch");
        seq.regions.push_back({*r.feature, coordinate_vector(*r.box, features.objects->image_size)});
        builder.add_slot(unk, SlotKind::Roi, seq.regions.size() - 1);
      }
      whole_image();
      break;
    }
    case VisualSource::VisComet: {
      if (!features.inferences || !features.inferences->start_embeddings)
        throw std::invalid_argument(features.image_id + ": inference start embeddings missing");
      for (const auto& v : *features.inferences->start_embeddings) {
        if (v.size() != features.vc_dim || v.empty())
          throw std::invalid_argument(features.image_id + ": inference embedding dim mismatch");
        seq.vc_vectors.push_back(v);
        builder.add_slot(unk, SlotKind::VcStart, seq.vc_vectors.size() - 1);
      }
      break;
    }
    default: throw std::invalid_argument("hybrid fusion needs objects, situation-roles or viscomet");
  }
  add_textual_context(seq, builder, instance, vocab, limits, part, seq.whole_image_ref.has_value());
  return seq;
}

FusedSequence build_sequence(const Variant& variant, const RationaleInstance& instance,
                             const VisualFeatureSet* features, const Vocabulary& vocab,
                             const LengthLimits& limits, RationalePart part) {
  if (variant.mode == FusionMode::Baseline) return build_baseline(instance, vocab, limits, part);
  if (!features) throw std::invalid_argument(variant.name() + " needs visual features");
  if (variant.mode == FusionMode::Uniform)
    return build_uniform(instance, *features, variant.source, vocab, limits, part);
  return build_hybrid(instance, *features, variant.source, vocab, limits, part);
}

// ---------------------------------------------------------------------------

std::vector<std::string> check_invariants(const FusedSequence& seq, const Vocabulary& vocab,
                                          const LengthLimits& limits) {
  std::vector<std::string> errors;
  auto fail = [&](std::string msg) { errors.push_back(std::move(msg)); };
  const std::size_t n = seq.token_ids.size();
  if (seq.segment_ids.size() != n || seq.position_ids.size() != n || seq.rationale_mask.size() != n)
    fail("parallel lists differ in length");
  if (n > max_input_length(seq.variant, limits)) fail("sequence longer than max input length");
  if (!errors.empty()) return errors;

  const TokenId b_rtnl = vocab.special_id(special::kBeginRationale);
  const TokenId e_rtnl = vocab.special_id(special::kEndRationale);
  const TokenId unk = vocab.special_id(special::kUnk);
  const auto seg = [&](std::size_t i) { return static_cast<Segment>(seq.segment_ids[i]); };

  // Element lengths per segment.
  std::array<std::size_t, kNumSegments> seg_len{};
  for (std::size_t i = 0; i < n; ++i) ++seg_len[static_cast<std::size_t>(seq.segment_ids[i])];
  if (seg_len[1] > limits.max_question) fail("question element exceeds limit");
  if (seg_len[2] > limits.max_answer) fail("answer element exceeds limit");
  if (seg_len[3] > limits.max_rationale) fail("rationale element exceeds limit");

  // Element order: visual, question, answer, rationale.
  for (std::size_t i = 1; i < n; ++i)
    if (seq.segment_ids[i] < seq.segment_ids[i - 1]) fail("segments out of order at " + std::to_string(i));

  // Mask: exactly the rationale tokens after <b_rtnl>, through <e_rtnl>.
  std::size_t masked = 0;
  std::size_t rationale_start = n;
  for (std::size_t i = 0; i < n; ++i) {
    if (seg(i) == Segment::Rationale && rationale_start == n) rationale_start = i;
    const bool expect = seg(i) == Segment::Rationale && i != rationale_start;
    if (seq.rationale_mask[i] != expect) fail("rationale mask wrong at " + std::to_string(i));
    masked += seq.rationale_mask[i];
  }
  if (rationale_start == n || seq.token_ids[rationale_start] != b_rtnl) fail("missing rationale begin separator");
  if (masked > 0) {
    if (seq.token_ids.back() != e_rtnl) fail("masked sequence does not end with rationale end separator");
    if (masked > limits.max_rationale + 1) fail("mask larger than max_rationale + 1");
  }

  // Slots.
  std::size_t roi = 0, whole = 0, vc = 0;
  for (const auto& s : seq.visual_slots) {
    if (s.index >= n) { fail("slot index out of range"); continue; }
    switch (s.kind) {
      case SlotKind::Roi:
        ++roi;
        if (seq.token_ids[s.index] != unk || seq.position_ids[s.index] != 0 || seg(s.index) != Segment::Visual)
          fail("ROI slot not an unk token at position 0 in the visual segment");
        if (s.embedding_ref >= seq.regions.size()) fail("ROI slot references a missing region");
        break;
      case SlotKind::WholeImage:
        ++whole;
        if (seg(s.index) == Segment::Visual) fail("whole-image reference on a visual position");
        if (!seq.whole_image_ref || s.embedding_ref != *seq.whole_image_ref) fail("whole-image ref mismatch");
        break;
      case SlotKind::VcStart:
        ++vc;
        if (seq.token_ids[s.index] != unk || seq.position_ids[s.index] != 0)
          fail("VC start slot not an unk token at position 0");
        if (s.embedding_ref >= seq.vc_vectors.size()) fail("VC slot references a missing vector");
        break;
    }
  }
  const std::size_t text_positions = n - seg_len[0];
  const auto& v = seq.variant;
  if (v.mode != FusionMode::Hybrid) {
    if (!seq.visual_slots.empty()) fail("non-hybrid sequence carries visual slots");
  } else if (seq.visual_slots.empty()) {
    fail("hybrid sequence without visual slots");
  } else if (v.source == VisualSource::VisComet) {
    if (vc != 3 || whole != 0 || roi != 0) fail("viscomet hybrid must carry exactly 3 VC slots");
  } else {
    if (roi == 0 || roi != seg_len[0]) fail("ROI slot count does not match visual segment");
    if (v.source == VisualSource::Objects && roi > limits.max_objects) fail("more ROI slots than max_objects");
    if (v.source == VisualSource::SituationRoles && roi > limits.max_roles) fail("more ROI slots than max_roles");
    if (whole != text_positions) fail("whole-image references do not cover every text token");
  }

  // Positions.
  const bool zero_visual =
      (v.mode == FusionMode::Uniform && v.source == VisualSource::Objects) || v.mode == FusionMode::Hybrid;
  TokenId expected = 1;
  for (std::size_t i = 0; i < n; ++i) {
    if (seg(i) == Segment::Visual && zero_visual) {
      if (seq.position_ids[i] != 0) fail("visual position not zero at " + std::to_string(i));
      continue;
    }
    if (seq.position_ids[i] != expected) fail("text positions not consecutive from 1 at " + std::to_string(i));
    ++expected;
  }
  if (v.mode == FusionMode::Uniform) {
    const std::size_t cap = v.source == VisualSource::Objects     ? limits.max_object_labels
                            : v.source == VisualSource::Situation ? limits.max_situation
                                                                  : limits.max_vc_text;
    if (seg_len[0] > cap) fail("visual text block exceeds its limit");
  }
  return errors;
}

}  // namespace rvt
