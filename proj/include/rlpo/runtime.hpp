#pragma once

// The run loop: action selection, sampling, scoring, preference update,
// reward and Q-learning, with run-directory persistence and resume.

#include "rlpo/agent.hpp"
#include "rlpo/evalx.hpp"
#include "rlpo/gen.hpp"
#include "rlpo/prefopt.hpp"
#include "rlpo/tcav.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace rlpo::runtime {

using Json = nlohmann::json;
namespace fs = std::filesystem;

enum class FeedbackMode { xaif, hf };
enum class Fallback { abort, use_tcav };

const char* to_string(FeedbackMode mode);
FeedbackMode parse_feedback_mode(const std::string& name);

struct FeedbackConfig {
  FeedbackMode mode = FeedbackMode::xaif;
  double timeout_s = 300;
  Fallback fallback = Fallback::abort;
  int voters = 1;  // votes that close a pending item before the timeout
};

struct XiSettings {
  agent::XiRule rule = agent::XiRule::additive;
  double init = 0.1;
  double increment = 0;  // 0 means 1 / total steps
};

struct EvalSettings {
  int top_concepts = 3;
  int concept_images = 20;
  int deletion_steps = 10;
  int deletion_test_images = 30;
  int tcav_repeats = 5;
  int stats_images = 30;
  bool fine_tune = true;
  evalx::FineTuneConfig fine_tune_config;
};

struct RunConfig {
  fs::path world;
  fs::path probe;
  fs::path generator;
  fs::path actions;  // action-space file; empty means the world's keywords
  std::string target_class;
  double eta = 0.7;
  bool inclusive_threshold = false;
  int steps = 100;  // per episode
  int episodes = 1;
  int images_per_step = 10;
  int checkpoint_every = 25;
  std::uint64_t seed = 0;
  agent::QConfig agent;
  XiSettings xi;
  prefopt::DpoConfig dpo;
  gen::AdapterConfig adapter;
  tcav::GroupConfig tcav;
  FeedbackConfig feedback;
  EvalSettings eval;

  int total_steps() const { return steps * episodes; }
  // Throws ConfigError naming the field or the missing artifact.
  void validate() const;
  Json to_json() const;
  // Relative paths resolve against `base_dir`.
  static RunConfig from_json(const Json& j, const fs::path& base_dir = {});
  static RunConfig load(const fs::path& file);
};

struct StepRecord {
  int step = 0;  // 1-based over the whole run
  int episode = 0;
  int t = 0;
  int action = 0;
  std::string keyword;
  double ts1 = 0;
  double ts2 = 0;
  double reward = 0;
  double xi = 0;
  std::string decision;
  int preferred = 0;  // group used for the next state, 0 never
  std::optional<double> dpo_loss_before;
  std::optional<double> dpo_loss_after;
  std::optional<double> q_loss;
  // hf mode only: raw TCAV of both groups and the vote counts
  std::optional<double> tcav1;
  std::optional<double> tcav2;
  std::optional<int> votes1;
  std::optional<int> votes2;
  std::vector<std::string> images_g1;  // relative to the run directory
  std::vector<std::string> images_g2;

  Json to_json() const;
  static StepRecord from_json(const Json& j);
  double best_tcav() const;
};

std::string serialize(const StepRecord& r);  // one log line, no newline

struct FeedbackRequest {
  int step = 0;
  int episode = 0;
  int t = 0;
  std::string keyword;
  std::vector<std::string> images_g1;
  std::vector<std::string> images_g2;
};

struct Votes {
  int group1 = 0;
  int group2 = 0;
};

struct FeedbackSource {
  virtual ~FeedbackSource() = default;
  // Blocks until the item closes; nullopt when the timeout passes with no votes.
  virtual std::optional<Votes> await(const FeedbackRequest& request, double timeout_s) = 0;
};

struct RunHooks {
  FeedbackSource* feedback = nullptr;
  std::function<void(const StepRecord&)> on_step;
  // Stops after this global step without a final checkpoint, as a crash would.
  int stop_after = -1;
};

struct RunOutcome {
  int steps_done = 0;
  bool completed = false;
  std::string message;
};

RunOutcome run_rlpo(const RunConfig& config, const fs::path& dir, const RunHooks& hooks = {});
RunOutcome resume(const fs::path& dir, const RunHooks& hooks = {});

RunConfig read_manifest_config(const fs::path& dir);
// Complete lines only; a torn final line is ignored.
std::vector<StepRecord> read_steps(const fs::path& dir);

struct KeywordSummary {
  std::string keyword;
  double best_tcav = 0;
  double mean_tcav = 0;
  int count = 0;
};

// Ranked by best TCAV, then mean TCAV, then keyword.
std::vector<KeywordSummary> rank_keywords(const std::vector<StepRecord>& records,
                                          const std::vector<std::string>& keywords);

struct EvalOutcome {
  Json report;
  bool explainable_empty = false;
};

EvalOutcome evaluate(const fs::path& dir);

}  // namespace rlpo::runtime
