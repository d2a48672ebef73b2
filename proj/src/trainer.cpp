#include "rvt/trainer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "rvt/random.hpp"

namespace rvt {

using nlohmann::json;

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr std::uint64_t kDropoutStream = 0xD80F;
constexpr const char* kOptimizerBlob = "optimizer.f32";
constexpr const char* kTrainerState = "trainer_state.json";

float to_storage(double v) { return static_cast<float>(v); }

void write_floats(const std::filesystem::path& path, const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<float> blob;
  blob.reserve(a.size() + b.size());
  for (double v : a) blob.push_back(to_storage(v));
  for (double v : b) blob.push_back(to_storage(v));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size() * sizeof(float)));
}

void read_floats(const std::filesystem::path& path, std::vector<double>& a, std::vector<double>& b) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != (a.size() + b.size()) * sizeof(float)) throw std::runtime_error("optimizer state size mismatch");
  std::vector<float> blob(bytes / sizeof(float));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(bytes));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = blob[i];
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = blob[a.size() + i];
}

void write_loss_curve(const std::filesystem::path& path, const std::vector<double>& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,loss\n";
  out.precision(17);
  for (std::size_t i = 0; i < curve.size(); ++i) out << (i + 1) << ',' << curve[i] << '\n';
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw std::invalid_argument("warmup_fraction must lie in [0, 1]");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be non-negative");
  if (!(grad_clip >= 0.0)) throw std::invalid_argument("grad_clip must be non-negative (0 disables)");
}

std::string TrainConfig::to_json() const {
  json j{{"epochs", epochs},
         {"batch_size", batch_size},
         {"learning_rate", learning_rate},
         {"warmup_fraction", warmup_fraction},
         {"weight_decay", weight_decay},
         {"grad_clip", grad_clip},
         {"seed", seed},
         {"eval_every", eval_every},
         {"output_dir", output_dir.string()},
         {"resume_from", resume_from ? json(resume_from->string()) : json(nullptr)},
         {"stop_after_epoch", stop_after_epoch}};
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(std::string_view text, TrainConfig c) {
  const json j = json::parse(text);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", c.seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
  if (j.contains("resume_from"))
    c.resume_from = j["resume_from"].is_null() ? std::nullopt
                                               : std::optional<std::filesystem::path>(j["resume_from"].get<std::string>());
  c.stop_after_epoch = j.value("stop_after_epoch", c.stop_after_epoch);
  return c;
}

TrainConfig TrainConfig::from_json(std::string_view text) { return from_json(text, TrainConfig{}); }

double learning_rate_at(std::size_t step, std::size_t total, std::size_t warmup, double peak) {
  if (total == 0) return 0.0;
  if (step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const std::size_t decay_span = total - warmup;
  if (decay_span == 0) return peak;
  return peak * static_cast<double>(total - step) / static_cast<double>(decay_span);
}

TrainingData prepare_training_data(const std::vector<RationaleInstance>& instances, const Variant& variant,
                                   const FeatureStore* features, const Vocabulary& vocab,
                                   const LengthLimits& limits) {
  TrainingData data;
  for (const auto& inst : instances) {
    if (inst.split == Split::Dev && inst.gold_rationale.empty()) continue;
    std::optional<VisualFeatureSet> fs;
    if (variant.uses_features()) {
      if (!features) throw std::invalid_argument(variant.name() + " needs a feature store");
      fs = features->load(inst.image_id);
    }
    auto seq = build_sequence(variant, inst, fs ? &*fs : nullptr, vocab, limits, RationalePart::Full);
    (inst.split == Split::Train ? data.train : data.dev).push_back(std::move(seq));
  }
  return data;
}

double evaluate_loss(const TransformerLM& model, const std::vector<FusedSequence>& seqs) {
  if (seqs.empty()) throw std::invalid_argument("evaluate_loss: no sequences");
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& s : seqs) {
    const std::size_t n = s.masked_count();
    if (n == 0) continue;
    sum += model.loss(s) * static_cast<double>(n);
    count += n;
  }
  if (count == 0) throw std::invalid_argument("evaluate_loss: no masked targets");
  return sum / static_cast<double>(count);
}

TrainResult train(TransformerLM& model, const TrainingData& data, const std::string& vocab_hash,
                  const TrainConfig& config) {
  config.validate();
  if (data.train.empty()) throw std::invalid_argument("train: empty training set");
  for (const auto& s : data.train)
    if (s.masked_count() == 0) throw std::invalid_argument("train: a training sequence has no rationale targets");

  const auto& out = config.output_dir;
  std::filesystem::create_directories(out);
  const std::size_t n = data.train.size();
  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = config.epochs * steps_per_epoch;
  const auto warmup = static_cast<std::size_t>(std::llround(config.warmup_fraction * static_cast<double>(total_steps)));

  const std::size_t p = model.num_parameters();
  std::vector<double> grad(p), m(p, 0.0), v(p, 0.0);
  std::vector<bool> decay(p, false);
  for (const auto& t : model.tensors())
    if (t.decay) std::fill(decay.begin() + static_cast<std::ptrdiff_t>(t.offset),
                           decay.begin() + static_cast<std::ptrdiff_t>(t.offset + t.size()), true);

  TrainResult result;
  result.final_checkpoint = out / "final";
  result.best_checkpoint = out / "best";
  result.best_loss = std::numeric_limits<double>::infinity();
  std::size_t step = 0;
  std::size_t start_epoch = 0;

  if (config.resume_from) {
    auto loaded = TransformerLM::load(*config.resume_from);
    if (loaded.model.config() != model.config()) throw std::invalid_argument("resume: model config differs");
    std::copy(loaded.model.parameters().begin(), loaded.model.parameters().end(), model.parameters().begin());
    read_floats(*config.resume_from / kOptimizerBlob, m, v);
    std::ifstream in(*config.resume_from / kTrainerState);
    std::stringstream ss;
    ss << in.rdbuf();
    const json state = json::parse(ss.str());
    step = state.at("step").get<std::size_t>();
    start_epoch = state.at("epoch").get<std::size_t>();
    result.best_loss = state.at("best_loss").is_null() ? std::numeric_limits<double>::infinity()
                                                        : state.at("best_loss").get<double>();
    result.loss_curve = state.at("loss_curve").get<std::vector<double>>();
  }

  auto snapshot = [&](const std::filesystem::path& dir, std::size_t epoch) {
    model.save(dir, vocab_hash, step);
    write_floats(dir / kOptimizerBlob, m, v);
    json state{{"step", step}, {"epoch", epoch}, {"loss_curve", result.loss_curve}};
    state["best_loss"] = std::isfinite(result.best_loss) ? json(result.best_loss) : json(nullptr);
    std::ofstream(dir / kTrainerState) << state.dump() << '\n';
  };

  auto evaluate = [&](double train_loss_fallback) {
    const double l = data.dev.empty() ? train_loss_fallback : evaluate_loss(model, data.dev);
    if (l < result.best_loss) {
      result.best_loss = l;
      model.save(result.best_checkpoint, vocab_hash, step);
    }
  };

  std::vector<std::size_t> order(n);
  for (std::size_t epoch = start_epoch; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(config.seed, epoch));
    shuffle_rng.shuffle(order);
    double epoch_sum = 0.0;
    std::size_t epoch_count = 0;

    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t begin = b * config.batch_size;
      const std::size_t end = std::min(n, begin + config.batch_size);
      std::size_t targets = 0;
      for (std::size_t i = begin; i < end; ++i) targets += data.train[order[i]].masked_count();

      std::fill(grad.begin(), grad.end(), 0.0);
      Rng dropout_rng(derive_seed(config.seed ^ kDropoutStream, step));
      double loss_sum = 0.0;
      for (std::size_t i = begin; i < end; ++i) {
        const auto r = model.accumulate_gradients(data.train[order[i]], grad, 1.0 / static_cast<double>(targets),
                                                  &dropout_rng);
        loss_sum += r.sum;
      }
      const double step_loss = loss_sum / static_cast<double>(targets);
      if (!std::isfinite(step_loss)) {
        const auto snap = out / "nan_snapshot";
        model.save(snap, vocab_hash, step);
        json diag{{"step", step}, {"epoch", epoch}, {"loss", std::to_string(step_loss)}};
        diag["batch"] = std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                                 order.begin() + static_cast<std::ptrdiff_t>(end));
        std::ofstream(snap / "diagnostic.json") << diag.dump(2) << '\n';
        throw NonFiniteLoss("non-finite loss at step " + std::to_string(step), snap);
      }
      result.loss_curve.push_back(step_loss);
      epoch_sum += loss_sum;
      epoch_count += targets;

      if (config.grad_clip > 0.0) {
        double sq = 0.0;
        for (double g : grad) sq += g * g;
        const double norm = std::sqrt(sq);
        if (norm > config.grad_clip) {
          const double s = config.grad_clip / norm;
          for (double& g : grad) g *= s;
        }
      }

      const double lr = learning_rate_at(step, total_steps, warmup, config.learning_rate);
      const double t = static_cast<double>(step + 1);
      const double bc1 = 1.0 - std::pow(kBeta1, t);
      const double bc2 = 1.0 - std::pow(kBeta2, t);
      auto params = model.parameters();
      for (std::size_t i = 0; i < p; ++i) {
        m[i] = to_storage(kBeta1 * m[i] + (1.0 - kBeta1) * grad[i]);
        v[i] = to_storage(kBeta2 * v[i] + (1.0 - kBeta2) * grad[i] * grad[i]);
        double w = params[i];
        if (decay[i]) w -= lr * config.weight_decay * w;
        w -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + kAdamEps);
        params[i] = to_storage(w);
      }
      ++step;
      if (config.eval_every > 0 && step % config.eval_every == 0 && !data.dev.empty()) evaluate(step_loss);
    }

    if (config.eval_every == 0 || data.dev.empty())
      evaluate(epoch_sum / static_cast<double>(std::max<std::size_t>(epoch_count, 1)));
    snapshot(out / "last", epoch + 1);
    if (config.stop_after_epoch > 0 && epoch + 1 >= config.stop_after_epoch && epoch + 1 < config.epochs) break;
  }

  result.steps = step;
  model.save(result.final_checkpoint, vocab_hash, step);
  if (!std::filesystem::exists(result.best_checkpoint / kCheckpointMeta))
    model.save(result.best_checkpoint, vocab_hash, step);
  write_loss_curve(out / "loss_curve.csv", result.loss_curve);
  return result;
}

}  // namespace rvt
