#include "rvt/annotation_service.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <unistd.h>

namespace rvt {

using nlohmann::json;

namespace {

constexpr const char* kEventLog = "events.jsonl";
constexpr const char* kSnapshot = "snapshot.json";

std::string ack_key(const std::string& item_id, const std::string& worker_id) { return item_id + "/" + worker_id; }

json state_json(const AssignmentState& s) {
  json textual = json::object();
  for (const auto& [w, l] : s.textual) textual[w] = to_string(l);
  return {{"item_id", s.item_id}, {"completed", s.completed}, {"leases", s.leases}, {"textual", textual}};
}

AssignmentState state_from(const json& j) {
  AssignmentState s;
  s.item_id = j.at("item_id").get<std::string>();
  s.completed = j.at("completed").get<std::set<std::string>>();
  s.leases = j.at("leases").get<std::map<std::string, std::int64_t>>();
  for (const auto& [w, l] : j.at("textual").items()) s.textual[w] = parse_label(l.get<std::string>());
  return s;
}

}  // namespace

Clock system_clock() {
  return [] {
    return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
  };
}

std::size_t AssignmentState::live_leases(std::int64_t now) const {
  std::size_t n = 0;
  for (const auto& [w, expiry] : leases)
    if (expiry > now && !completed.count(w)) ++n;
  return n;
}

void AssignmentStore::apply(Data& data, const std::string& line) {
  const json e = json::parse(line);
  const auto type = e.at("type").get<std::string>();
  if (type == "lease") {
    data.states.at(e.at("item").get<std::string>()).leases[e.at("worker").get<std::string>()] =
        e.at("expiry").get<std::int64_t>();
  } else if (type == "textual") {
    data.states.at(e.at("item").get<std::string>()).textual[e.at("worker").get<std::string>()] =
        parse_label(e.at("label").get<std::string>());
  } else if (type == "judgment") {
    auto rec = JudgmentRecord::from_json(e.at("record").dump());
    auto& st = data.states.at(rec.item_id);
    st.completed.insert(rec.worker_id);
    st.leases.erase(rec.worker_id);
    data.acks[ack_key(rec.item_id, rec.worker_id)] =
        SubmitAck{e.at("ack").get<std::string>(), e.at("seq").get<std::uint64_t>(), false};
    data.records.push_back(std::move(rec));
  } else {
    throw std::runtime_error("unknown event type '" + type + "'");
  }
  ++data.events;
}

AssignmentStore::Data AssignmentStore::load(const std::vector<EvalItem>& items,
                                            const std::filesystem::path& dir) {
  Data data;
  for (const auto& it : items) data.states[it.item_id].item_id = it.item_id;

  std::uint64_t skip = 0;
  if (std::ifstream snap(dir / kSnapshot); snap) {
    const json j = json::parse(snap);
    for (const auto& s : j.at("states")) {
      auto st = state_from(s);
      if (!data.states.count(st.item_id)) throw std::runtime_error("snapshot refers to unknown item " + st.item_id);
      data.states[st.item_id] = std::move(st);
    }
    for (const auto& r : j.at("records")) data.records.push_back(JudgmentRecord::from_json(r.dump()));
    for (const auto& [k, a] : j.at("acks").items())
      data.acks[k] = SubmitAck{a.at("ack").get<std::string>(), a.at("seq").get<std::uint64_t>(), false};
    data.events = skip = j.at("events").get<std::uint64_t>();
  }

  std::ifstream log(dir / kEventLog);
  std::string line;
  std::uint64_t n = 0;
  std::vector<std::string> lines;
  while (std::getline(log, line)) {
    if (n++ < skip) continue;
    lines.push_back(line);
  }
  if (n < skip) throw std::runtime_error("event log is shorter than the snapshot");
  for (std::size_t i = 0; i < lines.size(); ++i) {
    try {
      apply(data, lines[i]);
    } catch (const json::parse_error&) {
      // A torn final line from a crash mid-append was never acknowledged.
      if (i + 1 == lines.size()) break;
      throw;
    }
  }
  return data;
}

AssignmentStore::AssignmentStore(std::vector<EvalItem> items, std::filesystem::path state_dir, Clock clock,
                                 ServiceOptions options)
    : items_(std::move(items)), dir_(std::move(state_dir)), clock_(std::move(clock)), options_(options) {
  for (std::size_t i = 0; i < items_.size(); ++i)
    if (!index_.emplace(items_[i].item_id, i).second)
      throw std::invalid_argument("duplicate item id " + items_[i].item_id);
  std::filesystem::create_directories(dir_);
  data_ = load(items_, dir_);
  log_ = std::fopen((dir_ / kEventLog).c_str(), "ab");
  if (!log_) throw std::runtime_error("cannot open event log in " + dir_.string());
}

AssignmentStore::~AssignmentStore() {
  if (log_) std::fclose(log_);
}

void AssignmentStore::append(const std::string& line) {
  const std::string out = line + "\n";
  if (std::fwrite(out.data(), 1, out.size(), log_) != out.size() || std::fflush(log_) != 0)
    throw std::runtime_error("event log write failed");
  ::fsync(::fileno(log_));
  apply(data_, line);
  if (options_.snapshot_every > 0 && data_.events % options_.snapshot_every == 0) snapshot_locked();
}

void AssignmentStore::snapshot_locked() {
  json states = json::array();
  for (const auto& [id, st] : data_.states) states.push_back(state_json(st));
  json records = json::array();
  for (const auto& r : data_.records) records.push_back(json::parse(r.to_json()));
  json acks = json::object();
  for (const auto& [k, a] : data_.acks) acks[k] = {{"ack", a.ack}, {"seq", a.sequence}};
  const auto tmp = dir_ / (std::string(kSnapshot) + ".tmp");
  {
    std::ofstream snap(tmp);
    snap << json{{"events", data_.events}, {"states", states}, {"records", records}, {"acks", acks}}.dump();
    if (!snap) throw std::runtime_error("snapshot write failed");
  }
  std::filesystem::rename(tmp, dir_ / kSnapshot);
}

void AssignmentStore::write_snapshot() {
  std::lock_guard lock(mu_);
  snapshot_locked();
}

const EvalItem& AssignmentStore::item(const std::string& item_id) const {
  const auto it = index_.find(item_id);
  if (it == index_.end()) throw ServiceError(404, "unknown item " + item_id);
  return items_[it->second];
}

std::optional<TaskView> AssignmentStore::next_task(const std::string& worker_id) {
  if (worker_id.empty()) throw ServiceError(400, "worker id is required");
  std::lock_guard lock(mu_);
  const auto now = clock_();
  const EvalItem* best = nullptr;
  std::size_t best_load = 0;
  for (const auto& it : items_) {
    const auto& st = data_.states.at(it.item_id);
    if (st.completed.count(worker_id)) continue;
    if (const auto l = st.leases.find(worker_id); l != st.leases.end() && l->second > now)
      return TaskView{it, l->second};
    const std::size_t load = st.completed.size() + st.live_leases(now);
    if (load >= options_.judgments_per_item) continue;
    if (!best || load < best_load) {
      best = &it;
      best_load = load;
    }
  }
  if (!best) return std::nullopt;
  const auto expiry = now + options_.lease_seconds;
  append(json{{"type", "lease"}, {"item", best->item_id}, {"worker", worker_id}, {"expiry", expiry}}.dump());
  return TaskView{*best, expiry};
}

void AssignmentStore::submit_textual(const std::string& item_id, const std::string& worker_id, Label label) {
  std::lock_guard lock(mu_);
  item(item_id);
  const auto& st = data_.states.at(item_id);
  if (st.completed.count(worker_id)) throw ServiceError(409, "worker already judged this item");
  const auto l = st.leases.find(worker_id);
  if (l == st.leases.end() || l->second <= clock_()) throw ServiceError(409, "no live lease on this item");
  if (const auto t = st.textual.find(worker_id); t != st.textual.end()) {
    if (t->second != label) throw ServiceError(409, "textual judgment already recorded with a different label");
    return;
  }
  append(json{{"type", "textual"}, {"item", item_id}, {"worker", worker_id}, {"label", to_string(label)}}.dump());
}

EvalItem AssignmentStore::full_item(const std::string& item_id, const std::string& worker_id) const {
  std::lock_guard lock(mu_);
  const auto& it = item(item_id);
  if (!data_.states.at(item_id).textual.count(worker_id))
    throw ServiceError(409, "the textual judgment must be submitted before the image is shown");
  return it;
}

SubmitAck AssignmentStore::submit(JudgmentRecord record) {
  std::lock_guard lock(mu_);
  const auto& it = item(record.item_id);
  try {
    record.validate(it);
  } catch (const std::invalid_argument& e) {
    throw ServiceError(400, e.what());
  }
  const auto key = ack_key(record.item_id, record.worker_id);
  if (const auto a = data_.acks.find(key); a != data_.acks.end()) {
    auto dup = a->second;
    dup.duplicate = true;
    return dup;
  }
  const auto& st = data_.states.at(record.item_id);
  if (st.completed.size() >= options_.judgments_per_item) throw ServiceError(409, "item already has all judgments");
  const auto now = clock_();
  const auto l = st.leases.find(record.worker_id);
  if (l == st.leases.end() || l->second <= now) throw ServiceError(409, "no live lease on this item");
  const auto t = st.textual.find(record.worker_id);
  if (t == st.textual.end()) throw ServiceError(409, "textual judgment missing");
  if (t->second != record.textual_plausibility)
    throw ServiceError(400, "textual_plausibility differs from the label submitted before the image");
  if (record.timestamp == 0) record.timestamp = now;
  const auto seq = data_.events + 1;
  append(json{{"type", "judgment"}, {"record", json::parse(record.to_json())}, {"ack", key}, {"seq", seq}}.dump());
  return data_.acks.at(key);
}

std::vector<JudgmentRecord> AssignmentStore::records() const {
  std::lock_guard lock(mu_);
  return data_.records;
}

std::map<std::string, AssignmentState> AssignmentStore::states() const {
  std::lock_guard lock(mu_);
  return data_.states;
}

std::uint64_t AssignmentStore::events() const {
  std::lock_guard lock(mu_);
  return data_.events;
}

std::map<std::string, AssignmentState> AssignmentStore::replay(const std::vector<EvalItem>& items,
                                                               const std::filesystem::path& state_dir) {
  return load(items, state_dir).states;
}

}  // namespace rvt
