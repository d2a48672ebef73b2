#include "rvt/cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "rvt/annotation_service.hpp"
#include "rvt/feature_store.hpp"
#include "rvt/fusion.hpp"
#include "rvt/hashing.hpp"
#include "rvt/judgments.hpp"
#include "rvt/metrics.hpp"
#include "rvt/model.hpp"
#include "rvt/pipeline.hpp"
#include "rvt/text_codec.hpp"
#include "rvt/trainer.hpp"

namespace rvt {

using nlohmann::json;
namespace fs = std::filesystem;

std::string RunManifest::to_json() const {
  json j;
  j["command"] = command;
  j["argv"] = argv;
  j["config"] = json::parse(config.empty() ? "{}" : config);
  j["seed"] = seed;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["timings"] = {{"seconds", seconds}};
  return j.dump(2);
}

void RunManifest::write(const fs::path& output) const {
  auto path = output;
  if (path.has_filename()) {
    path += ".manifest.json";
  } else {
    path = path.parent_path();
    path += ".manifest.json";
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json() << '\n';
}

std::string hash_path(const fs::path& path) {
  if (!fs::is_directory(path)) return sha256_file(path);
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(path))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string listing;
  for (const auto& f : files) listing += fs::relative(f, path).generic_string() + "\t" + sha256_file(f) + "\n";
  return sha256_hex(listing);
}

fs::path default_home() {
  if (const char* home = std::getenv("RATIONALE_VT_HOME"); home && *home) return home;
  return "data";
}

namespace {

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& message) {
  if (!ok) throw ValidationError(message);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot open " + path.string());
  std::vector<json> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return rows;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  require(static_cast<bool>(out), "cannot write " + path.string());
  out << text;
}

std::vector<Task> parse_tasks(const std::vector<std::string>& names) {
  std::vector<Task> tasks;
  if (names.empty()) return {Task::VCR, Task::ESNLIVE, Task::VQAE};
  for (const auto& n : names) tasks.push_back(parse_task(n));
  return tasks;
}

std::vector<RationaleInstance> load_all(const FixtureLayout& layout, const std::vector<Task>& tasks,
                                        std::map<std::string, std::string>& inputs) {
  std::vector<RationaleInstance> out;
  for (const Task t : tasks) {
    const auto path = layout.manifest(t);
    require(fs::exists(path), "missing instance manifest " + path.string());
    inputs[path.string()] = hash_path(path);
    auto loaded = load_instances(path, t);
    for (auto& inst : loaded.instances) out.push_back(std::move(inst));
  }
  return out;
}

LengthLimits resolve_limits(const std::string& flag, const fs::path& home, std::map<std::string, std::string>& inputs) {
  fs::path path = flag;
  if (path.empty()) {
    path = home / "limits.json";
    if (!fs::exists(path)) return LengthLimits{};
  }
  inputs[path.string()] = hash_path(path);
  return load_limits(path);
}

/// Appends `--key value` for every config entry whose flag is not already
/// on the command line.
std::vector<std::string> merge_config(std::vector<std::string> args, json& snapshot) {
  auto it = std::find_if(args.begin(), args.end(),
                         [](const std::string& a) { return a == "--config" || a.rfind("--config=", 0) == 0; });
  if (it == args.end()) return args;
  std::string path;
  if (*it == "--config") {
    if (std::next(it) == args.end()) throw CLI::ArgumentMismatch("--config requires a path");
    path = *std::next(it);
    args.erase(it, std::next(it, 2));
  } else {
    path = it->substr(9);
    args.erase(it);
  }
  json config;
  try {
    config = json::parse(slurp(path));
  } catch (const json::exception& e) {
    throw ValidationError("config " + path + ": " + e.what());
  }
  require(config.is_object(), "config " + path + " must be a JSON object");
  snapshot["config_file"] = {{"path", path}, {"sha256", sha256_file(path)}};
  auto present = [&](const std::string& flag) {
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
  };
  std::vector<std::string> extra;
  for (const auto& [key, value] : config.items()) {
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    if (present(flag) || value.is_null()) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) extra.push_back(flag);
    } else if (value.is_array()) {
      for (const auto& v : value) {
        extra.push_back(flag);
        extra.push_back(v.is_string() ? v.get<std::string>() : v.dump());
      }
    } else if (value.is_object()) {
      throw ValidationError("config key '" + key + "' must not be an object");
    } else {
      extra.push_back(flag);
      extra.push_back(value.is_string() ? value.get<std::string>() : value.dump());
    }
  }
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

struct Common {
  std::uint64_t seed = 1;
  std::string home;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--seed", c.seed, "Seed for every random choice of the command");
  sub->add_option("--data", c.home, "Data directory (default: $RATIONALE_VT_HOME or ./data)");
}

fs::path home_of(const Common& c) { return c.home.empty() ? default_home() : fs::path(c.home); }

// ---------------------------------------------------------------------------

struct FixturesArgs {
  std::string out;
  std::string judgments_for;
  FixtureOptions options;
};

void run_fixtures(const FixturesArgs& a, const Common& c, RunManifest& m) {
  json cfg;
  if (!a.judgments_for.empty()) {
    require(!a.out.empty(), "--out is required");
    m.inputs[a.judgments_for] = hash_path(a.judgments_for);
    const auto items = read_items(a.judgments_for);
    write_records(a.out, simulate_judgments(items, c.seed));
    cfg = {{"judgments_for", a.judgments_for}};
  } else {
    auto opts = a.options;
    opts.seed = c.seed;
    const fs::path out = a.out.empty() ? home_of(c) : fs::path(a.out);
    generate_fixtures(out, opts);
    cfg = {{"train_per_task", opts.train_per_task}, {"dev_per_task", opts.dev_per_task},
           {"feature_dim", opts.feature_dim},       {"vc_dim", opts.vc_dim},
           {"merges", opts.merges}};
    m.outputs.push_back(out.string());
    m.config = cfg.dump();
    return;
  }
  m.outputs.push_back(a.out);
  m.config = cfg.dump();
}

struct VocabArgs {
  std::vector<std::string> tasks;
  std::string roles;
  std::size_t merges = 320;
  std::string out;
};

void run_vocab(const VocabArgs& a, const Common& c, RunManifest& m) {
  const auto home = home_of(c);
  const FixtureLayout layout{home};
  const auto instances = load_all(layout, parse_tasks(a.tasks), m.inputs);
  std::vector<std::string> corpus;
  for (const auto& inst : instances) {
    corpus.push_back(inst.context_question_or_hypothesis);
    corpus.push_back(inst.context_answer_or_label);
    corpus.push_back(inst.gold_rationale);
  }
  const fs::path roles_path = a.roles.empty() ? layout.roles() : fs::path(a.roles);
  m.inputs[roles_path.string()] = hash_path(roles_path);
  auto specials = SpecialTokenInventory::with_roles(load_role_inventory(roles_path));
  const auto target = specials.size() + 256 + a.merges;
  const fs::path out = a.out.empty() ? layout.vocab() : fs::path(a.out);
  train_bpe(corpus, target, std::move(specials)).save(out);
  m.outputs.push_back(out.string());
  m.config = json{{"merges", a.merges}, {"tasks", a.tasks}}.dump();
}

struct LimitsArgs {
  std::vector<std::string> tasks;
  std::string vocab;
  double percentile = 0.99;
  bool with_features = false;
  std::string out;
};

void run_limits(const LimitsArgs& a, const Common& c, RunManifest& m) {
  const auto home = home_of(c);
  const FixtureLayout layout{home};
  const auto instances = load_all(layout, parse_tasks(a.tasks), m.inputs);
  const fs::path vocab_path = a.vocab.empty() ? layout.vocab() : fs::path(a.vocab);
  m.inputs[vocab_path.string()] = hash_path(vocab_path);
  const auto vocab = Vocabulary::load(vocab_path);
  std::optional<FeatureStore> store;
  if (a.with_features) {
    store.emplace(layout.features());
    m.inputs[layout.features().string()] = hash_path(layout.features());
  }
  const auto limits = compute_length_limits(instances, vocab, a.percentile, store ? &*store : nullptr);
  const fs::path out = a.out.empty() ? home / "limits.json" : fs::path(a.out);
  save_limits(limits, out);
  m.outputs.push_back(out.string());
  m.config = json{{"percentile", a.percentile}, {"with_features", a.with_features}, {"tasks", a.tasks}}.dump();
}

struct TrainArgs {
  std::string mode = "baseline";
  std::string source;
  std::vector<std::string> tasks;
  std::string vocab;
  std::string limits;
  TrainConfig train;
  std::string output_dir = "run";
  std::string resume_from;
  ModelConfig model;
  std::size_t max_positions = 0;
};

void run_train(TrainArgs a, const Common& c, RunManifest& m, CLI::App* sub) {
  const auto home = home_of(c);
  const FixtureLayout layout{home};
  const auto variant = Variant::from_mode_source(a.mode, a.source);
  const auto instances = load_all(layout, parse_tasks(a.tasks), m.inputs);
  const fs::path vocab_path = a.vocab.empty() ? layout.vocab() : fs::path(a.vocab);
  m.inputs[vocab_path.string()] = hash_path(vocab_path);
  const auto vocab = Vocabulary::load(vocab_path);
  const auto limits = resolve_limits(a.limits, home, m.inputs);

  std::optional<FeatureStore> store;
  auto model_cfg = a.model;
  if (variant.uses_features()) {
    store.emplace(layout.features());
    m.inputs[layout.features().string()] = hash_path(layout.features());
    const auto ids = store->image_ids();
    require(!ids.empty(), "feature store is empty");
    const auto probe = store->load(ids.front());
    if (sub->count("--feature-dim") == 0) model_cfg.feature_dim = probe.feature_dim;
    if (sub->count("--vc-dim") == 0 && probe.vc_dim > 0) model_cfg.vc_dim = probe.vc_dim;
  }
  model_cfg.vocab_size = vocab.size();
  model_cfg.seed = c.seed;
  model_cfg.max_positions = a.max_positions ? a.max_positions : max_input_length(variant, limits) + 1;

  auto cfg = a.train;
  cfg.seed = c.seed;
  cfg.output_dir = a.output_dir;
  if (!a.resume_from.empty()) cfg.resume_from = fs::path(a.resume_from);
  cfg.validate();
  model_cfg.validate();

  const auto data = prepare_training_data(instances, variant, store ? &*store : nullptr, vocab, limits);
  require(!data.train.empty(), "no training instances");
  TransformerLM model(model_cfg);
  const auto result = train(model, data, vocab.hash(), cfg);

  json run{{"variant", variant.name()},
           {"data", home.string()},
           {"tasks", a.tasks},
           {"limits", json::parse(limits_to_json(limits))},
           {"vocab_hash", vocab.hash()},
           {"steps", result.steps},
           {"best_loss", result.best_loss}};
  write_text(cfg.output_dir / "run.json", run.dump(2) + "\n");

  m.outputs = {cfg.output_dir.string(), result.final_checkpoint.string(), result.best_checkpoint.string(),
               (cfg.output_dir / "loss_curve.csv").string()};
  m.config = json{{"variant", variant.name()},
                  {"train", json::parse(cfg.to_json())},
                  {"model", json::parse(model_cfg.to_json())}}
                 .dump();
  std::cout << json{{"final", result.final_checkpoint.string()},
                    {"best", result.best_checkpoint.string()},
                    {"steps", result.steps},
                    {"final_loss", result.loss_curve.empty() ? json(nullptr) : json(result.loss_curve.back())}}
                   .dump()
            << '\n';
}

struct GenerateArgs {
  std::vector<std::string> runs;
  std::string checkpoint = "best";
  std::string split = "dev";
  std::vector<std::string> tasks;
  std::string vocab;
  std::string out;
  std::string references_out;
};

void run_generate(const GenerateArgs& a, const Common& c, RunManifest& m) {
  require(!a.runs.empty(), "at least one --run is required");
  require(!a.out.empty(), "--out is required");
  require(a.checkpoint == "best" || a.checkpoint == "final", "--checkpoint must be best or final");
  require(a.split == "dev" || a.split == "train" || a.split == "all", "--split must be dev, train or all");
  const auto home = home_of(c);
  const FixtureLayout layout{home};
  auto instances = load_all(layout, parse_tasks(a.tasks), m.inputs);
  if (a.split != "all") {
    const auto want = parse_split(a.split);
    std::erase_if(instances, [&](const RationaleInstance& i) { return i.split != want; });
  }
  const fs::path vocab_path = a.vocab.empty() ? layout.vocab() : fs::path(a.vocab);
  m.inputs[vocab_path.string()] = hash_path(vocab_path);
  const auto vocab = Vocabulary::load(vocab_path);

  std::optional<FeatureStore> store;
  std::vector<Generation> rows;
  json refs = json::array();
  for (const auto& run_dir : a.runs) {
    const auto run = json::parse(slurp(fs::path(run_dir) / "run.json"));
    const auto variant = Variant::parse(run.at("variant").get<std::string>());
    const auto limits = limits_from_json(run.at("limits").dump());
    const auto ckpt = fs::path(run_dir) / a.checkpoint;
    m.inputs[ckpt.string()] = hash_path(ckpt);
    const auto loaded = TransformerLM::load(ckpt);
    require(loaded.vocab_hash == vocab.hash(), "checkpoint " + ckpt.string() + " was trained with another vocabulary");
    if (variant.uses_features() && !store) store.emplace(layout.features());
    for (const auto& inst : instances) {
      std::optional<VisualFeatureSet> features;
      if (variant.uses_features()) features = store->load(inst.image_id);
      rows.push_back({inst.instance_id, variant.name(),
                      generate_rationale(loaded.model, variant, inst, features ? &*features : nullptr, vocab, limits)});
      refs.push_back({{"id", variant.name() + ":" + inst.instance_id},
                      {"text", inst.gold_rationale},
                      {"context", inst.context_question_or_hypothesis + " " + inst.context_answer_or_label}});
    }
  }
  write_generations(a.out, rows);
  m.outputs.push_back(a.out);
  if (!a.references_out.empty()) {
    std::string text;
    for (const auto& r : refs) text += r.dump() + "\n";
    write_text(a.references_out, text);
    m.outputs.push_back(a.references_out);
  }
  m.config = json{{"runs", a.runs}, {"checkpoint", a.checkpoint}, {"split", a.split}, {"tasks", a.tasks}}.dump();
}

struct ScoreArgs {
  std::string candidates;
  std::string references;
  std::string field = "text";
  std::string stopwords;
  std::string out;
};

std::string row_id(const json& row) {
  if (row.contains("id")) return row.at("id").get<std::string>();
  if (row.contains("variant") && row.contains("instance_id"))
    return row.at("variant").get<std::string>() + ":" + row.at("instance_id").get<std::string>();
  if (row.contains("instance_id")) return row.at("instance_id").get<std::string>();
  throw ValidationError("row without an id: " + row.dump());
}

void run_score(const ScoreArgs& a, const Common&, RunManifest& m) {
  require(!a.candidates.empty() && !a.references.empty(), "--candidates and --references are required");
  m.inputs[a.candidates] = hash_path(a.candidates);
  m.inputs[a.references] = hash_path(a.references);
  std::map<std::string, std::vector<std::string>> refs;
  for (const auto& row : read_jsonl(a.references)) {
    const auto id = row_id(row);
    auto& list = refs[id];
    if (row.contains("references") && a.field == "text") {
      for (const auto& r : row.at("references")) list.push_back(r.get<std::string>());
    } else {
      require(row.contains(a.field), "reference row " + id + " has no field '" + a.field + "'");
      list.push_back(row.at(a.field).get<std::string>());
    }
  }
  std::vector<std::string> ids, cands;
  References references;
  std::set<std::string> seen;
  for (const auto& row : read_jsonl(a.candidates)) {
    const auto id = row_id(row);
    require(seen.insert(id).second, "duplicate candidate id " + id);
    const auto it = refs.find(id);
    require(it != refs.end(), "candidate " + id + " has no reference");
    ids.push_back(id);
    cands.push_back(row.at("text").get<std::string>());
    references.push_back(it->second);
  }
  require(!cands.empty(), "no candidates");
  StopwordList stop = StopwordList::builtin();
  if (!a.stopwords.empty()) {
    m.inputs[a.stopwords] = hash_path(a.stopwords);
    stop = StopwordList::load(a.stopwords);
  }
  const auto report = score_corpus(ids, cands, references, stop);
  if (a.out.empty()) {
    std::cout << report.to_json() << '\n';
  } else {
    write_text(a.out, report.to_json() + "\n");
    m.outputs.push_back(a.out);
  }
  m.config = json{{"field", a.field}, {"stopwords_hash", stop.hash}}.dump();
}

struct MakeTasksArgs {
  std::string generations;
  std::vector<std::string> tasks;
  std::string vocab;
  bool no_gold = false;
  std::string out;
};

void run_make_tasks(const MakeTasksArgs& a, const Common& c, RunManifest& m) {
  require(!a.generations.empty() && !a.out.empty(), "--generations and --out are required");
  const auto home = home_of(c);
  const FixtureLayout layout{home};
  const auto instances = load_all(layout, parse_tasks(a.tasks), m.inputs);
  const fs::path vocab_path = a.vocab.empty() ? layout.vocab() : fs::path(a.vocab);
  m.inputs[vocab_path.string()] = hash_path(vocab_path);
  m.inputs[a.generations] = hash_path(a.generations);
  const auto vocab = Vocabulary::load(vocab_path);
  const auto items = make_tasks(read_generations(a.generations), instances, vocab, RuleTagger{}, !a.no_gold);
  write_items(a.out, items);
  m.outputs.push_back(a.out);
  m.config = json{{"include_gold", !a.no_gold}, {"tasks", a.tasks}}.dump();
}

struct ServeArgs {
  std::string tasks;
  std::string state = "annotation_state";
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string images;
  std::string ui;
  std::string access_log;
  std::int64_t lease_seconds = 30 * 60;
  std::size_t judgments_per_item = 3;
  std::size_t snapshot_every = 100;
};

void run_serve(const ServeArgs& a, const Common& c, RunManifest& m) {
  require(!a.tasks.empty(), "--tasks is required");
  m.inputs[a.tasks] = hash_path(a.tasks);
  ServiceOptions so;
  so.lease_seconds = a.lease_seconds;
  so.judgments_per_item = a.judgments_per_item;
  so.snapshot_every = a.snapshot_every;
  AssignmentStore store(read_items(a.tasks), a.state, system_clock(), so);
  ServerOptions opts;
  opts.host = a.host;
  opts.port = a.port;
  opts.image_dir = a.images.empty() ? FixtureLayout{home_of(c)}.images() : fs::path(a.images);
  opts.ui_dir = a.ui;
  opts.access_log = a.access_log;
  m.outputs.push_back(a.state);
  m.config = json{{"host", a.host},
                  {"port", a.port},
                  {"lease_seconds", a.lease_seconds},
                  {"judgments_per_item", a.judgments_per_item},
                  {"snapshot_every", a.snapshot_every}}
                 .dump();
  m.write(fs::path(a.state));
  std::cerr << json{{"listening", a.host + ":" + std::to_string(a.port)}, {"items", store.items().size()}}.dump()
            << std::endl;
  serve(store, opts);
}

struct JudgedArgs {
  std::string tasks;
  std::string judgments;
  std::string out;
};

std::pair<std::vector<EvalItem>, std::vector<JudgmentRecord>> load_judged(const JudgedArgs& a, RunManifest& m) {
  require(!a.tasks.empty() && !a.judgments.empty(), "--tasks and --judgments are required");
  m.inputs[a.tasks] = hash_path(a.tasks);
  m.inputs[a.judgments] = hash_path(a.judgments);
  auto items = read_items(a.tasks);
  auto records = read_records(a.judgments);
  std::map<std::string, const EvalItem*> by_id;
  for (const auto& it : items) require(by_id.emplace(it.item_id, &it).second, "duplicate item " + it.item_id);
  for (const auto& r : records) {
    const auto it = by_id.find(r.item_id);
    require(it != by_id.end(), "judgment for unknown item " + r.item_id);
    r.validate(*it->second);
  }
  return {std::move(items), std::move(records)};
}

json ratio_or_null(const std::vector<JudgmentRecord>& recs, LabelField f) {
  return recs.empty() ? json(nullptr) : json(100.0 * item_yes_ratio(recs, f));
}

void run_aggregate(const JudgedArgs& a, const Common&, RunManifest& m) {
  const auto [items, records] = load_judged(a, m);
  const auto grouped = group_by_item(records);
  json per_item = json::array();
  std::size_t covered = 0;
  for (const auto& item : items) {
    const auto it = grouped.find(item.item_id);
    const std::vector<JudgmentRecord> none;
    const auto& recs = it == grouped.end() ? none : it->second;
    if (!recs.empty()) ++covered;
    const auto bucket = plausibility_bucket(recs);
    per_item.push_back({{"item_id", item.item_id},
                        {"variant", item.variant},
                        {"column", to_string(item.column())},
                        {"records", recs.size()},
                        {"visual_plausibility", ratio_or_null(recs, LabelField::Visual)},
                        {"textual_plausibility", ratio_or_null(recs, LabelField::Textual)},
                        {"grammatical", ratio_or_null(recs, LabelField::Grammatical)},
                        {"fidelity", recs.empty() ? json(nullptr) : json(100.0 * item_fidelity(recs))},
                        {"plausibility_bucket", bucket ? json(*bucket) : json(nullptr)}});
  }
  const json out{{"items", items.size()},
                 {"records", records.size()},
                 {"items_with_records", covered},
                 {"per_item", per_item}};
  require(!a.out.empty(), "--out is required");
  write_text(a.out, out.dump(2) + "\n");
  m.outputs.push_back(a.out);
  m.config = "{}";
}

void run_report(const JudgedArgs& a, const Common&, RunManifest& m) {
  const auto [items, records] = load_judged(a, m);
  const auto report = build_report(items, records);
  if (a.out.empty()) {
    std::cout << report << '\n';
  } else {
    write_text(a.out, report + "\n");
    m.outputs.push_back(a.out);
  }
  m.config = "{}";
}

void print_error(const std::string& kind, const std::string& command, const std::string& message) {
  std::cerr << json{{"error", kind}, {"command", command}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args) {
  CLI::App app{"Visually grounded rationale generation and evaluation", "rvt"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  Common common;

  FixturesArgs fx;
  auto* fixtures = app.add_subcommand("fixtures", "Write a synthetic dataset, features, images and vocabulary");
  add_common(fixtures, common);
  fixtures->add_option("--out", fx.out, "Output directory (or records file with --judgments-for)");
  fixtures->add_option("--judgments-for", fx.judgments_for, "Simulate three judgments per item of this task file");
  fixtures->add_option("--train-per-task", fx.options.train_per_task);
  fixtures->add_option("--dev-per-task", fx.options.dev_per_task);
  fixtures->add_option("--feature-dim", fx.options.feature_dim);
  fixtures->add_option("--vc-dim", fx.options.vc_dim);
  fixtures->add_option("--merges", fx.options.merges);

  VocabArgs vc;
  auto* vocab = app.add_subcommand("vocab", "Train a BPE vocabulary on instance text");
  add_common(vocab, common);
  vocab->add_option("--task", vc.tasks, "Tasks to read (default: all)");
  vocab->add_option("--roles", vc.roles, "Role inventory file");
  vocab->add_option("--merges", vc.merges);
  vocab->add_option("--out", vc.out);

  LimitsArgs lm;
  auto* limits = app.add_subcommand("limits", "Derive element length limits from the data");
  add_common(limits, common);
  limits->add_option("--task", lm.tasks);
  limits->add_option("--vocab", lm.vocab);
  limits->add_option("--percentile", lm.percentile)->check(CLI::Range(0.0, 1.0));
  limits->add_flag("--with-features", lm.with_features, "Also derive the visual limits");
  limits->add_option("--out", lm.out);

  TrainArgs tr;
  auto* trainc = app.add_subcommand("train", "Fine-tune one model variant");
  add_common(trainc, common);
  trainc->add_option("--mode", tr.mode, "baseline, uniform or hybrid");
  trainc->add_option("--source", tr.source, "objects, situation or viscomet");
  trainc->add_option("--task", tr.tasks);
  trainc->add_option("--vocab", tr.vocab);
  trainc->add_option("--limits", tr.limits);
  trainc->add_option("--epochs", tr.train.epochs);
  trainc->add_option("--batch-size", tr.train.batch_size);
  trainc->add_option("--learning-rate", tr.train.learning_rate);
  trainc->add_option("--warmup-fraction", tr.train.warmup_fraction);
  trainc->add_option("--weight-decay", tr.train.weight_decay);
  trainc->add_option("--grad-clip", tr.train.grad_clip);
  trainc->add_option("--eval-every", tr.train.eval_every);
  trainc->add_option("--stop-after-epoch", tr.train.stop_after_epoch);
  trainc->add_option("--output-dir", tr.output_dir);
  trainc->add_option("--resume-from", tr.resume_from);
  trainc->add_option("--n-layers", tr.model.n_layers);
  trainc->add_option("--n-heads", tr.model.n_heads);
  trainc->add_option("--d-model", tr.model.d_model);
  trainc->add_option("--dropout", tr.model.dropout);
  trainc->add_option("--max-positions", tr.max_positions, "Default: the variant's maximum input length plus one (position 0 is reserved)");
  trainc->add_option("--feature-dim", tr.model.feature_dim);
  trainc->add_option("--vc-dim", tr.model.vc_dim);

  GenerateArgs gn;
  auto* generate = app.add_subcommand("generate", "Greedy rationales from trained runs");
  add_common(generate, common);
  generate->add_option("--run", gn.runs, "Training output directory (repeatable)");
  generate->add_option("--checkpoint", gn.checkpoint, "best or final");
  generate->add_option("--split", gn.split, "dev, train or all");
  generate->add_option("--task", gn.tasks);
  generate->add_option("--vocab", gn.vocab);
  generate->add_option("--out", gn.out);
  generate->add_option("--references-out", gn.references_out, "Also write gold rationales and contexts by id");

  ScoreArgs sc;
  auto* score = app.add_subcommand("score", "Automatic metrics between candidate and reference JSONL files");
  add_common(score, common);
  score->add_option("--candidates", sc.candidates);
  score->add_option("--references", sc.references);
  score->add_option("--field", sc.field, "Reference field to compare against (text or context)");
  score->add_option("--stopwords", sc.stopwords);
  score->add_option("--out", sc.out);

  MakeTasksArgs mt;
  auto* make = app.add_subcommand("make-tasks", "Evaluation items with extracted phrase lists");
  add_common(make, common);
  make->add_option("--generations", mt.generations);
  make->add_option("--task", mt.tasks);
  make->add_option("--vocab", mt.vocab);
  make->add_flag("--no-gold", mt.no_gold, "Skip the gold-rationale items");
  make->add_option("--out", mt.out);

  ServeArgs sv;
  auto* servec = app.add_subcommand("serve", "Run the annotation service");
  add_common(servec, common);
  servec->add_option("--tasks", sv.tasks);
  servec->add_option("--state", sv.state, "State directory (event log and snapshot)");
  servec->add_option("--host", sv.host);
  servec->add_option("--port", sv.port);
  servec->add_option("--images", sv.images);
  servec->add_option("--ui", sv.ui);
  servec->add_option("--access-log", sv.access_log);
  servec->add_option("--lease-seconds", sv.lease_seconds);
  servec->add_option("--judgments-per-item", sv.judgments_per_item);
  servec->add_option("--snapshot-every", sv.snapshot_every);

  JudgedArgs ag, rp;
  auto* aggregate = app.add_subcommand("aggregate", "Per-item judgment aggregates");
  add_common(aggregate, common);
  aggregate->add_option("--tasks", ag.tasks);
  aggregate->add_option("--judgments", ag.judgments);
  aggregate->add_option("--out", ag.out);

  auto* report = app.add_subcommand("report", "Result tables from items and judgments");
  add_common(report, common);
  report->add_option("--tasks", rp.tasks);
  report->add_option("--judgments", rp.judgments);
  report->add_option("--out", rp.out);

  std::string command = raw_args.empty() ? "" : raw_args.front();
  json snapshot;
  std::vector<std::string> args;
  try {
    args = merge_config(raw_args, snapshot);
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help() << std::flush;
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    std::cout << app.help("", CLI::AppFormatMode::All) << std::flush;
    return 0;
  } catch (const CLI::ParseError& e) {
    print_error("usage", command, e.what());
    return 2;
  } catch (const std::exception& e) {
    print_error("validation", command, e.what());
    return 1;
  }

  RunManifest manifest;
  manifest.argv = raw_args;
  const auto start = std::chrono::steady_clock::now();
  CLI::App* used = app.get_subcommands().front();
  command = manifest.command = used->get_name();
  manifest.seed = common.seed;
  try {
    if (used == fixtures) run_fixtures(fx, common, manifest);
    else if (used == vocab) run_vocab(vc, common, manifest);
    else if (used == limits) run_limits(lm, common, manifest);
    else if (used == trainc) run_train(tr, common, manifest, trainc);
    else if (used == generate) run_generate(gn, common, manifest);
    else if (used == score) run_score(sc, common, manifest);
    else if (used == make) run_make_tasks(mt, common, manifest);
    else if (used == servec) run_serve(sv, common, manifest);
    else if (used == aggregate) run_aggregate(ag, common, manifest);
    else if (used == report) run_report(rp, common, manifest);
  } catch (const std::exception& e) {
    print_error("validation", command, e.what());
    return 1;
  }
  manifest.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!snapshot.empty()) {
    auto cfg = json::parse(manifest.config.empty() ? "{}" : manifest.config);
    cfg.update(snapshot);
    manifest.config = cfg.dump();
  }
  if (!manifest.outputs.empty()) {
    try {
      manifest.write(manifest.outputs.front());
    } catch (const std::exception& e) {
      print_error("validation", command, e.what());
      return 1;
    }
  }
  return 0;
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args);
}

}  // namespace rvt
