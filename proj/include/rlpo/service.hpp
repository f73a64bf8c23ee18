#pragma once

// HTTP monitoring and human-feedback service around a run directory.

#include "rlpo/runtime.hpp"

#include <condition_variable>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

namespace rlpo::service {

using runtime::FeedbackRequest;
using runtime::Votes;

enum class SubmitStatus { accepted, no_pending, wrong_step, duplicate_voter, bad_choice };

struct PendingView {
  FeedbackRequest request;
  int votes_received = 0;
  int voters_required = 1;
};

// Hands pending items from the run loop to voters. Each item closes once
// `voters_required` distinct voters have answered or the timeout passes, and
// is consumed exactly once.
class FeedbackBroker : public runtime::FeedbackSource {
 public:
  explicit FeedbackBroker(int voters_required = 1);

  std::optional<Votes> await(const FeedbackRequest& request, double timeout_s) override;
  SubmitStatus submit(int step, const std::string& voter, int preferred);
  std::optional<PendingView> pending() const;

 private:
  struct Item {
    FeedbackRequest request;
    std::map<std::string, int> votes;
  };
  int voters_required_;
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::optional<Item> item_;
};

enum class RunStatus { idle, running, awaiting_feedback, completed, failed };
const char* to_string(RunStatus status);

// Run-loop side status, read by the HTTP handlers.
class RunMonitor {
 public:
  void set(RunStatus status, std::string message = {});
  RunStatus status() const;
  std::string message() const;

 private:
  mutable std::mutex mutex_;
  RunStatus status_ = RunStatus::idle;
  std::string message_;
};

struct ServiceOptions {
  runtime::FeedbackMode mode = runtime::FeedbackMode::xaif;
  FeedbackBroker* broker = nullptr;  // required in hf mode
  const RunMonitor* monitor = nullptr;  // absent for a run nobody drives
};

class Server {
 public:
  Server(runtime::fs::path run_dir, ServiceOptions options);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Returns the bound port; 0 asks the OS for a free one. Throws IoError when busy.
  int bind(const std::string& host, int port);
  void serve();  // blocks until stop()
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace rlpo::service
