#pragma once

#include "rlpo/nn.hpp"
#include "rlpo/probe.hpp"
#include "rlpo/types.hpp"

#include <json.hpp>

#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace rlpo::agent {

struct AgentState {
  Vector s;              // unit norm, or zero at episode start
  int last_action = -1;

  static AgentState zero(Eigen::Index dim) { return {Vector::Zero(dim), -1}; }
};

struct QConfig {
  std::vector<Eigen::Index> hidden_dims{64};
  nn::Algorithm algorithm = nn::Algorithm::adam;
  double learning_rate = 1e-3;
  double gamma = 0.99;
  double epsilon = 0.95;
  int batch_size = 32;
  int buffer_capacity = 100;
  int update_every = 4;  // target sync period, in steps
  double tau = 1.0;
  double clip_norm = 10.0;

  void validate() const;
};

struct QNets {
  nn::Mlp<Real> online;
  nn::Mlp<Real> target;
  nn::OptimizerState<Real> opt;
  QConfig config;

  Eigen::Index state_dim() const { return online.input_dim(); }
  int num_actions() const { return static_cast<int>(online.output_dim()); }
};

QNets make_qnets(Eigen::Index state_dim, int num_actions, const QConfig& config, std::uint64_t seed);

Vector q_values(const QNets& q, const Vector& s);

// Uniform with probability epsilon, otherwise greedy with the lowest index
// winning exact ties.
int select_action(const QNets& q, const AgentState& state, double epsilon, std::uint64_t seed);
int greedy_action(const Vector& values);

double compute_reward(double ts1, double ts2, double xi);

enum class XiRule { additive, ratio };

struct XiTracker {
  std::map<std::string, double> xi;
  double increment = 0.1;
  XiRule rule = XiRule::additive;
  int horizon = 10;

  double at(const std::string& keyword) const;
};

// increment <= 0 means 1 / horizon.
XiTracker make_xi_tracker(const std::vector<std::string>& keywords, int horizon, XiRule rule = XiRule::additive,
                          double xi_init = 0.1, double increment = 0);
void update_xi(XiTracker& tracker, const std::string& keyword, bool reached_explainable);
const char* to_string(XiRule rule);
XiRule parse_xi_rule(const std::string& name);

struct Transition {
  Vector s;
  int a = 0;
  double r = 0;
  Vector s_next;
};

struct ReplayBuffer {
  std::deque<Transition> items;
  std::size_t capacity = 100;

  void push(Transition t);
  std::size_t size() const { return items.size(); }
};

// One minibatch step on the online net. Returns nothing while the buffer holds
// fewer than batch_size transitions.
std::optional<double> q_learn_step(QNets& q, const ReplayBuffer& buffer, std::uint64_t seed);

void sync_target(QNets& q);

AgentState encode_state(const probe::ProbeModel& probe, const ImageBatch& preferred_group);

void save_qnets(const QNets& q, const std::filesystem::path& path);
QNets load_qnets(const std::filesystem::path& path);
void quantize_f32(QNets& q);

nlohmann::json buffer_to_json(const ReplayBuffer& buffer);
ReplayBuffer buffer_from_json(const nlohmann::json& doc);
nlohmann::json xi_to_json(const XiTracker& tracker);
XiTracker xi_from_json(const nlohmann::json& doc);

}  // namespace rlpo::agent
