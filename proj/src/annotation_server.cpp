#include <httplib.h>
#include <nlohmann/json.hpp>

#include <fstream>
#include <thread>

#include "rvt/annotation_service.hpp"

namespace rvt {

using nlohmann::json;

class HttpServer {
 public:
  httplib::Server server;
  std::thread thread;
  std::mutex log_mu;
  std::ofstream access_log;
};

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}, {"status", status}});
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const ServiceError& e) {
    send_error(res, e.status(), e.what());
  } catch (const json::exception& e) {
    send_error(res, 400, std::string("malformed request: ") + e.what());
  } catch (const std::invalid_argument& e) {
    send_error(res, 400, e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, e.what());
  }
}

json text_view(const TaskView& v) {
  const auto& it = v.item;
  return {{"item_id", it.item_id},
          {"task", std::string(to_string(it.task))},
          {"question", it.question},
          {"answer", it.answer},
          {"rationale", it.rationale},
          {"lease_expires", v.lease_expires}};
}

std::string image_url(const std::filesystem::path& dir, const std::string& image_id) {
  if (dir.empty() || !std::filesystem::is_directory(dir)) return {};
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.path().stem() == image_id) return "/images/" + entry.path().filename().string();
  return {};
}

void install_routes(HttpServer& http, AssignmentStore& store, const ServerOptions& options) {
  auto& svr = http.server;
  svr.Get("/health", [&store](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}, {"items", store.items().size()}, {"records", store.records().size()}});
  });

  svr.Get("/task", [&store](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!req.has_param("worker")) throw ServiceError(400, "missing worker parameter");
      const auto view = store.next_task(req.get_param_value("worker"));
      send_json(res, 200, {{"item", view ? text_view(*view) : json(nullptr)}});
    });
  });

  svr.Post(R"(/task/([^/]+)/textual)", [&store](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto body = json::parse(req.body);
      store.submit_textual(req.matches[1], body.at("worker_id").get<std::string>(),
                           parse_label(body.at("textual_plausibility").get<std::string>()));
      send_json(res, 200, {{"status", "recorded"}});
    });
  });

  const auto image_dir = options.image_dir;
  svr.Get(R"(/task/([^/]+)/full)", [&store, image_dir](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!req.has_param("worker")) throw ServiceError(400, "missing worker parameter");
      const auto it = store.full_item(req.matches[1], req.get_param_value("worker"));
      const auto url = image_url(image_dir, it.image_id);
      send_json(res, 200,
                {{"item", json::parse(it.to_json())}, {"image_url", url.empty() ? json(nullptr) : json(url)}});
    });
  });

  svr.Post(R"(/task/([^/]+)/judgment)", [&store](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      auto body = json::parse(req.body);
      const std::string item_id = req.matches[1];
      if (body.contains("item_id") && body["item_id"] != item_id)
        throw ServiceError(400, "item_id in body differs from the path");
      body["item_id"] = item_id;
      if (!store.has_item(item_id)) throw ServiceError(404, "unknown item " + item_id);
      const auto ack = store.submit(JudgmentRecord::from_json(body.dump()));
      send_json(res, 200, {{"ack", ack.ack}, {"sequence", ack.sequence}, {"duplicate", ack.duplicate}});
    });
  });

  svr.Get("/export", [&store](const httplib::Request&, httplib::Response& res) {
    std::string out;
    for (const auto& r : store.records()) out += r.to_json() + "\n";
    res.set_content(out, "application/x-ndjson");
  });

  if (!options.image_dir.empty()) svr.set_mount_point("/images", options.image_dir.string());
  if (!options.ui_dir.empty()) svr.set_mount_point("/ui", options.ui_dir.string());

  if (!options.access_log.empty()) {
    http.access_log.open(options.access_log, std::ios::app);
    svr.set_logger([&http](const httplib::Request& req, const httplib::Response& res) {
      std::lock_guard lock(http.log_mu);
      http.access_log << req.method << ' ' << req.path << ' ' << res.status << '\n';
      http.access_log.flush();
    });
  }
}

}  // namespace

void serve(AssignmentStore& store, const ServerOptions& options) {
  HttpServer http;
  install_routes(http, store, options);
  if (!http.server.listen(options.host, options.port))
    throw std::runtime_error("cannot listen on " + options.host + ":" + std::to_string(options.port));
}

std::shared_ptr<HttpServer> start_server(AssignmentStore& store, const ServerOptions& options, int* bound_port) {
  auto http = std::make_shared<HttpServer>();
  install_routes(*http, store, options);
  const int port = options.port == 0 ? http->server.bind_to_any_port(options.host)
                                     : (http->server.bind_to_port(options.host, options.port) ? options.port : -1);
  if (port < 0) throw std::runtime_error("cannot bind " + options.host);
  if (bound_port) *bound_port = port;
  auto* raw = http.get();
  http->thread = std::thread([raw] { raw->server.listen_after_bind(); });
  raw->server.wait_until_ready();
  return http;
}

void stop_server(std::shared_ptr<HttpServer>& server) {
  if (!server) return;
  server->server.stop();
  if (server->thread.joinable()) server->thread.join();
  server.reset();
}

}  // namespace rvt
