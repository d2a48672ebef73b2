#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "rvt/judgments.hpp"

namespace rvt {

/// Seconds since an arbitrary epoch. Injected so tests control lease expiry.
using Clock = std::function<std::int64_t()>;
Clock system_clock();

/// Error carrying the HTTP status it maps to (400, 404 or 409).
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

struct AssignmentState {
  std::string item_id;
  std::set<std::string> completed;
  /// worker -> lease expiry (seconds). Expired leases stay until replaced.
  std::map<std::string, std::int64_t> leases;
  /// worker -> textual plausibility posted before the image was revealed.
  std::map<std::string, Label> textual;

  bool operator==(const AssignmentState&) const = default;
  std::size_t live_leases(std::int64_t now) const;
};

struct ServiceOptions {
  std::int64_t lease_seconds = 30 * 60;
  std::size_t judgments_per_item = 3;
  /// Write a snapshot after this many logged events (0 disables).
  std::size_t snapshot_every = 100;
};

struct SubmitAck {
  std::string ack;
  std::uint64_t sequence = 0;
  bool duplicate = false;
};

/// Text-only view handed out before the textual judgment.
struct TaskView {
  EvalItem item;
  std::int64_t lease_expires = 0;
};

/// Assignment and persistence core of the annotation service.
///
/// Every mutation appends one event to `events.jsonl` in the state
/// directory before it is acknowledged; `snapshot.json` is rewritten every
/// `snapshot_every` events. Constructing a store over an existing directory
/// replays snapshot plus log. All public methods are serialized by one mutex.
class AssignmentStore {
 public:
  AssignmentStore(std::vector<EvalItem> items, std::filesystem::path state_dir, Clock clock,
                  ServiceOptions options = {});
  ~AssignmentStore();
  AssignmentStore(const AssignmentStore&) = delete;
  AssignmentStore& operator=(const AssignmentStore&) = delete;

  /// An item the worker has not judged, fewest (completed + live leases)
  /// first, ties in task-file order. Re-fetching while a lease is live
  /// returns the same item.
  std::optional<TaskView> next_task(const std::string& worker_id);

  /// Stores the textual plausibility label; requires a live lease.
  void submit_textual(const std::string& item_id, const std::string& worker_id, Label label);

  /// The full item (image and phrase lists). Only after submit_textual.
  EvalItem full_item(const std::string& item_id, const std::string& worker_id) const;

  /// Appends the record once per (item, worker); a repeat returns the
  /// original ack without appending.
  SubmitAck submit(JudgmentRecord record);

  std::vector<JudgmentRecord> records() const;
  std::map<std::string, AssignmentState> states() const;
  std::uint64_t events() const;
  const std::vector<EvalItem>& items() const { return items_; }
  bool has_item(const std::string& item_id) const { return index_.count(item_id) > 0; }

  void write_snapshot();

  /// State rebuilt purely from the files in `state_dir` (snapshot + log).
  static std::map<std::string, AssignmentState> replay(const std::vector<EvalItem>& items,
                                                       const std::filesystem::path& state_dir);

 private:
  struct Data {
    std::map<std::string, AssignmentState> states;
    std::vector<JudgmentRecord> records;
    std::map<std::string, SubmitAck> acks;
    std::uint64_t events = 0;
  };
  static void apply(Data& data, const std::string& event_line);
  static Data load(const std::vector<EvalItem>& items, const std::filesystem::path& state_dir);
  void append(const std::string& event_line);
  void snapshot_locked();
  const EvalItem& item(const std::string& item_id) const;

  std::vector<EvalItem> items_;
  std::map<std::string, std::size_t> index_;
  std::filesystem::path dir_;
  Clock clock_;
  ServiceOptions options_;
  Data data_;
  std::FILE* log_ = nullptr;
  mutable std::mutex mu_;
};

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path image_dir;
  std::filesystem::path ui_dir;
  /// Appends "METHOD path status" per request when set.
  std::filesystem::path access_log;
};

/// Blocks serving the HTTP API until the process is stopped:
/// GET /task?worker=, POST /task/{id}/textual, GET /task/{id}/full?worker=,
/// POST /task/{id}/judgment, GET /export, GET /health, static /images and /ui.
void serve(AssignmentStore& store, const ServerOptions& options);

class HttpServer;
/// Non-blocking variant: serves on a background thread. Port 0 binds any
/// free port, reported through `bound_port`.
std::shared_ptr<HttpServer> start_server(AssignmentStore& store, const ServerOptions& options, int* bound_port);
void stop_server(std::shared_ptr<HttpServer>& server);

}  // namespace rvt
