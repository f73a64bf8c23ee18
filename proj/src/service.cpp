#include "rlpo/service.hpp"

#include "rlpo/tensor_io.hpp"

#include <httplib.h>

#include <chrono>
#include <fstream>
#include <sstream>

namespace rlpo::service {

namespace {

using runtime::Json;

void send_json(httplib::Response& res, int status, const Json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json; charset=utf-8");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  send_json(res, status, {{"error", {{"code", code}, {"message", message}}}});
}

Json request_json(const FeedbackRequest& r) {
  return {{"step", r.step},
          {"episode", r.episode},
          {"t", r.t},
          {"keyword", r.keyword},
          {"images_g1", r.images_g1},
          {"images_g2", r.images_g2}};
}

std::string file_bytes(const runtime::fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError(p.string() + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

FeedbackBroker::FeedbackBroker(int voters_required) : voters_required_(voters_required) {
  if (voters_required < 1) throw ValidationError("voters", "must be at least 1");
}

std::optional<Votes> FeedbackBroker::await(const FeedbackRequest& request, double timeout_s) {
  std::unique_lock lock(mutex_);
  item_ = Item{request, {}};
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s);
  cv_.wait_until(lock, deadline, [&] { return static_cast<int>(item_->votes.size()) >= voters_required_; });
  Votes v;
  for (const auto& [_, group] : item_->votes) (group == 1 ? v.group1 : v.group2) += 1;
  item_.reset();
  if (v.group1 + v.group2 == 0) return std::nullopt;
  return v;
}

SubmitStatus FeedbackBroker::submit(int step, const std::string& voter, int preferred) {
  if (preferred != 1 && preferred != 2) return SubmitStatus::bad_choice;
  std::lock_guard lock(mutex_);
  if (!item_ || static_cast<int>(item_->votes.size()) >= voters_required_) return SubmitStatus::no_pending;
  if (item_->request.step != step) return SubmitStatus::wrong_step;
  if (!item_->votes.emplace(voter, preferred).second) return SubmitStatus::duplicate_voter;
  if (static_cast<int>(item_->votes.size()) >= voters_required_) cv_.notify_all();
  return SubmitStatus::accepted;
}

std::optional<PendingView> FeedbackBroker::pending() const {
  std::lock_guard lock(mutex_);
  if (!item_ || static_cast<int>(item_->votes.size()) >= voters_required_) return std::nullopt;
  return PendingView{item_->request, static_cast<int>(item_->votes.size()), voters_required_};
}

const char* to_string(RunStatus status) {
  switch (status) {
    case RunStatus::idle: return "idle";
    case RunStatus::running: return "running";
    case RunStatus::awaiting_feedback: return "awaiting_feedback";
    case RunStatus::completed: return "completed";
    case RunStatus::failed: return "failed";
  }
  return "unknown";
}

void RunMonitor::set(RunStatus status, std::string message) {
  std::lock_guard lock(mutex_);
  status_ = status;
  message_ = std::move(message);
}

RunStatus RunMonitor::status() const {
  std::lock_guard lock(mutex_);
  return status_;
}

std::string RunMonitor::message() const {
  std::lock_guard lock(mutex_);
  return message_;
}

struct Server::Impl {
  runtime::fs::path dir;
  ServiceOptions options;
  httplib::Server http;
  int port = -1;

  // Config, total steps and action list; empty until the manifest exists.
  Json manifest() const {
    const auto p = dir / "manifest";
    return runtime::fs::exists(p) ? io::read_json(p) : Json();
  }

  bool feedback_refused(httplib::Response& res) const {
    if (options.mode == runtime::FeedbackMode::hf) return false;
    send_error(res, 400, "mode", "mode does not accept feedback");
    return true;
  }

  void get_run(httplib::Response& res) const {
    const auto m = manifest();
    const auto records = runtime::read_steps(dir);
    int total = 0;
    Json config = nullptr;
    if (!m.is_null()) {
      config = m.at("config");
      total = config.at("steps").get<int>() * config.at("episodes").get<int>();
    }
    RunStatus status = RunStatus::idle;
    std::string message;
    if (options.monitor) {
      status = options.monitor->status();
      message = options.monitor->message();
    } else if (total > 0 && static_cast<int>(records.size()) >= total) {
      status = RunStatus::completed;
    }
    if (status == RunStatus::running && options.broker && options.broker->pending())
      status = RunStatus::awaiting_feedback;
    send_json(res, 200,
              {{"status", to_string(status)},
               {"step", records.size()},
               {"total_steps", total},
               {"mode", runtime::to_string(options.mode)},
               {"message", message},
               {"config", config}});
  }

  void get_steps(const httplib::Request& req, httplib::Response& res) const {
    int from = 1;
    if (req.has_param("from")) {
      try {
        std::size_t used = 0;
        const std::string v = req.get_param_value("from");
        from = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
      } catch (const std::exception&) {
        send_error(res, 400, "bad_request", "from: expected an integer step");
        return;
      }
    }
    Json out = Json::array();
    for (const auto& r : runtime::read_steps(dir))
      if (r.step >= from) out.push_back(r.to_json());
    send_json(res, 200, {{"steps", out}});
  }

  void get_images(int step, httplib::Response& res) const {
    for (const auto& r : runtime::read_steps(dir)) {
      if (r.step != step) continue;
      auto group = [&](const std::vector<std::string>& paths) {
        Json g = Json::array();
        for (const auto& p : paths)
          g.push_back({{"path", p}, {"png_base64", httplib::detail::base64_encode(file_bytes(dir / p))}});
        return g;
      };
      send_json(res, 200, {{"step", step}, {"g1", group(r.images_g1)}, {"g2", group(r.images_g2)}});
      return;
    }
    send_error(res, 404, "not_found", "no record for step " + std::to_string(step));
  }

  void get_pending(httplib::Response& res) const {
    if (feedback_refused(res)) return;
    const auto p = options.broker ? options.broker->pending() : std::nullopt;
    if (!p) {
      send_json(res, 200, {{"pending", nullptr}});
      return;
    }
    Json item = request_json(p->request);
    item["votes_received"] = p->votes_received;
    item["voters_required"] = p->voters_required;
    send_json(res, 200, {{"pending", item}});
  }

  void post_feedback(const httplib::Request& req, httplib::Response& res) const {
    if (feedback_refused(res)) return;
    Json body;
    try {
      body = Json::parse(req.body);
    } catch (const std::exception&) {
      send_error(res, 400, "bad_request", "body is not valid JSON");
      return;
    }
    if (!body.is_object() || !body.contains("step") || !body["step"].is_number_integer() || !body.contains("voter") ||
        !body["voter"].is_string() || body["voter"].get<std::string>().empty() || !body.contains("preferred") ||
        !body["preferred"].is_number_integer()) {
      send_error(res, 400, "bad_request", "expected {step: int, voter: string, preferred: 1|2}");
      return;
    }
    if (!options.broker) {
      send_error(res, 409, "no_pending", "no feedback item is pending");
      return;
    }
    const int step = body["step"].get<int>();
    switch (options.broker->submit(step, body["voter"].get<std::string>(), body["preferred"].get<int>())) {
      case SubmitStatus::accepted: send_json(res, 200, {{"accepted", true}, {"step", step}}); return;
      case SubmitStatus::bad_choice: send_error(res, 400, "bad_request", "preferred must be 1 or 2"); return;
      case SubmitStatus::no_pending: send_error(res, 409, "no_pending", "no feedback item is pending"); return;
      case SubmitStatus::wrong_step:
        send_error(res, 409, "wrong_step", "step " + std::to_string(step) + " is not the pending item");
        return;
      case SubmitStatus::duplicate_voter:
        send_error(res, 409, "duplicate_voter", "this voter already answered the pending item");
        return;
    }
  }

  void get_metrics(httplib::Response& res) const {
    const auto m = manifest();
    std::vector<std::string> actions;
    if (!m.is_null() && m.contains("actions")) actions = m.at("actions").get<std::vector<std::string>>();
    const auto records = runtime::read_steps(dir);
    std::vector<long long> counts(actions.size(), 0);
    Json counts_by = Json::object();
    std::vector<double> cumulative;
    double total = 0;
    for (const auto& r : records) {
      if (r.action >= 0 && static_cast<std::size_t>(r.action) < counts.size()) ++counts[static_cast<std::size_t>(r.action)];
      cumulative.push_back(total += r.reward);
    }
    for (std::size_t i = 0; i < actions.size(); ++i) counts_by[actions[i]] = counts[i];
    Json metrics = nullptr;
    if (!actions.empty()) {
      const auto am = evalx::action_metrics(counts);
      metrics = {{"entropy", am.entropy}, {"anc", am.anc}, {"icv", am.icv ? Json(*am.icv) : Json(nullptr)}};
    }
    send_json(res, 200, {{"action_counts", counts_by}, {"action_metrics", metrics}, {"cumulative_reward", cumulative}});
  }

  template <typename F>
  auto guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const std::exception& e) {
        send_error(res, 500, "internal", e.what());
      }
    };
  }

  void routes() {
    http.Get("/api/run", guarded([this](const auto&, auto& res) { get_run(res); }));
    http.Get("/api/steps", guarded([this](const auto& req, auto& res) { get_steps(req, res); }));
    http.Get(R"(/api/steps/(\d+)/images)",
             guarded([this](const auto& req, auto& res) { get_images(std::stoi(req.matches[1].str()), res); }));
    http.Get("/api/feedback/pending", guarded([this](const auto&, auto& res) { get_pending(res); }));
    http.Post("/api/feedback", guarded([this](const auto& req, auto& res) { post_feedback(req, res); }));
    http.Get("/api/metrics", guarded([this](const auto&, auto& res) { get_metrics(res); }));
    // Address reuse only; a second listener on a live port must fail.
    http.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const char*>(&yes), sizeof(yes));
    });
    http.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) send_error(res, res.status, "http", httplib::status_message(res.status));
    });
  }
};

Server::Server(runtime::fs::path run_dir, ServiceOptions options) : impl_(std::make_unique<Impl>()) {
  if (options.mode == runtime::FeedbackMode::hf && !options.broker)
    throw ConfigError("feedback: hf mode needs a broker");
  impl_->dir = std::move(run_dir);
  impl_->options = options;
  impl_->routes();
}

Server::~Server() { stop(); }

int Server::bind(const std::string& host, int port) {
  if (port == 0) {
    impl_->port = impl_->http.bind_to_any_port(host);
  } else {
    impl_->port = impl_->http.bind_to_port(host, port) ? port : -1;
  }
  if (impl_->port < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port) + " (port busy?)");
  return impl_->port;
}

void Server::serve() { impl_->http.listen_after_bind(); }

void Server::stop() {
  if (impl_ && impl_->http.is_running()) impl_->http.stop();
}

void Server::wait_until_ready() const { impl_->http.wait_until_ready(); }

}  // namespace rlpo::service
