#include "rlpo/runtime.hpp"

#include "rlpo/image_io.hpp"
#include "rlpo/seeds.hpp"
#include "rlpo/tensor_io.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace rlpo::runtime {

namespace {

using OJson = nlohmann::ordered_json;

const char* kManifest = "manifest";
const char* kSteps = "steps.log";
const char* kTimings = "timings.log";
const char* kErrors = "errors.log";
const char* kReport = "report";
const char* kVersion = "0.1.0";

template <typename T>
void read_field(const Json& j, const char* key, T& out, const std::string& scope) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(scope + key + ": " + e.what());
  }
}

const char* algorithm_name(nn::Algorithm a) { return a == nn::Algorithm::adam ? "adam" : "sgd"; }

nn::Algorithm parse_algorithm(const std::string& s, const std::string& field) {
  if (s == "adam") return nn::Algorithm::adam;
  if (s == "sgd") return nn::Algorithm::sgd;
  throw ConfigError(field + ": unknown algorithm '" + s + "'");
}

const char* fallback_name(Fallback f) { return f == Fallback::abort ? "abort" : "use_tcav"; }

Fallback parse_fallback(const std::string& s) {
  if (s == "abort") return Fallback::abort;
  if (s == "use_tcav") return Fallback::use_tcav;
  throw ConfigError("feedback.fallback: unknown value '" + s + "'");
}

Json cav_to_json(const tcav::CavConfig& c) {
  return {{"max_iterations", c.max_iterations},
          {"learning_rate", c.learning_rate},
          {"l2", c.l2},
          {"tolerance", c.tolerance}};
}

tcav::CavConfig cav_from_json(const Json& j, const std::string& scope) {
  tcav::CavConfig c;
  read_field(j, "max_iterations", c.max_iterations, scope);
  read_field(j, "learning_rate", c.learning_rate, scope);
  read_field(j, "l2", c.l2, scope);
  read_field(j, "tolerance", c.tolerance, scope);
  return c;
}

Json group_to_json(const tcav::GroupConfig& g) {
  return {{"random_set_size", g.random_set_size}, {"cav", cav_to_json(g.cav)}};
}

tcav::GroupConfig group_from_json(const Json& j, const std::string& scope) {
  tcav::GroupConfig g;
  read_field(j, "random_set_size", g.random_set_size, scope);
  if (j.contains("cav")) g.cav = cav_from_json(j.at("cav"), scope + "cav.");
  return g;
}

fs::path resolve(const fs::path& base, const fs::path& p) {
  if (p.empty() || p.is_absolute() || base.empty()) return p.lexically_normal();
  return (base / p).lexically_normal();
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = fs::path(path) += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(tmp.string() + ": cannot write");
    out << text;
    if (!out) throw IoError(tmp.string() + ": write failed");
  }
  fs::rename(tmp, path);
}

void append_line(const fs::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw IoError(path.string() + ": cannot append");
  out << line << '\n';
  out.flush();
  if (!out) throw IoError(path.string() + ": append failed");
}

std::string safe_name(const std::string& s) {
  std::string out;
  for (unsigned char c : s) out += std::isalnum(c) ? static_cast<char>(c) : '_';
  return out;
}

Json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector vector_from(const Json& j) {
  const auto xs = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(xs.data(), static_cast<Eigen::Index>(xs.size()));
}

fs::path adapters_path(const fs::path& dir, int step) {
  return dir / "checkpoints" / ("adapters_" + std::to_string(step));
}
fs::path qnet_path(const fs::path& dir, int step) { return dir / "checkpoints" / ("qnet_" + std::to_string(step)); }
fs::path state_path(const fs::path& dir, int step) {
  return dir / "checkpoints" / ("state_" + std::to_string(step) + ".json");
}

struct Engine {
  RunConfig cfg;
  fs::path dir;
  world::World world;
  probe::ProbeModel probe;
  gen::GeneratorState gen;
  std::vector<std::string> actions;
  Eigen::Index target = 0;
  ImageBatch test_images;
  agent::QNets q;
  agent::ReplayBuffer buffer;
  agent::XiTracker xi;
  agent::AgentState state;
};

std::vector<std::string> load_actions(const RunConfig& cfg, const world::World& w) {
  if (cfg.actions.empty()) return w.keywords;
  std::vector<std::string> out;
  for (const auto& a : seeds::load_action_space(cfg.actions)) out.push_back(a.keyword);
  return out;
}

// Loads artifacts and checks they agree with each other.
Engine load_engine(const RunConfig& cfg, const fs::path& dir) {
  Engine e;
  e.cfg = cfg;
  e.dir = dir;
  e.world = world::load_world(cfg.world);
  e.probe = probe::load_probe(cfg.probe);
  e.gen = gen::load_generator(cfg.generator);
  e.actions = load_actions(cfg, e.world);
  try {
    e.target = e.world.dataset.class_index(cfg.target_class);
  } catch (const ValidationError&) {
    throw ConfigError("target_class: '" + cfg.target_class + "' is not a class of the world");
  }
  if (e.target >= e.probe.class_count()) throw ConfigError("probe: fewer outputs than world classes");
  const auto vocab = e.gen.vocabulary();
  for (const auto& a : e.actions)
    if (std::find(vocab.begin(), vocab.end(), a) == vocab.end())
      throw ConfigError("actions: keyword '" + a + "' is not in the generator vocabulary");
  if (e.gen.height != e.probe.height || e.gen.width != e.probe.width)
    throw ConfigError("generator: image size differs from the probe");
  e.test_images = e.world.dataset.select(static_cast<int>(e.target), world::Split::test);
  if (e.test_images.empty()) throw ConfigError("world: no test images for the target class");
  return e;
}

void init_fresh(Engine& e) {
  const auto& c = e.cfg;
  gen::attach_adapters(e.gen, c.adapter, derive_seed(c.seed, "adapters"));
  e.q = agent::make_qnets(e.probe.activation_dim(), static_cast<int>(e.actions.size()), c.agent,
                          derive_seed(c.seed, "qnet"));
  e.buffer = agent::ReplayBuffer{};
  e.buffer.capacity = static_cast<std::size_t>(c.agent.buffer_capacity);
  e.xi = agent::make_xi_tracker(e.actions, c.total_steps(), c.xi.rule, c.xi.init, c.xi.increment);
  e.state = agent::AgentState::zero(e.probe.activation_dim());
}

// Live parameters are rounded to float32 first so a resumed run sees exactly
// what the uninterrupted one continues with.
void write_checkpoint(Engine& e, int step) {
  fs::create_directories(e.dir / "checkpoints");
  io::quantize_f32(e.gen.adapters);
  agent::quantize_f32(e.q);
  std::vector<io::Tensor> tensors;
  io::Json meta = {{"kind", "adapters"}, {"step", step}};
  io::append_adapters(tensors, meta, "adapters", e.gen.adapters);
  io::save_tensors(adapters_path(e.dir, step), tensors, meta);
  agent::save_qnets(e.q, qnet_path(e.dir, step));
  const Json doc = {{"step", step},
                    {"buffer", agent::buffer_to_json(e.buffer)},
                    {"xi", agent::xi_to_json(e.xi)},
                    {"agent_state", {{"s", vector_json(e.state.s)}, {"last_action", e.state.last_action}}}};
  // Written last: its presence marks the checkpoint complete.
  write_text(state_path(e.dir, step), doc.dump() + "\n");
}

void require_file(const fs::path& p) {
  if (!fs::exists(p)) throw IoError("missing checkpoint file " + p.string());
}

void restore_checkpoint(Engine& e, int step) {
  const auto ap = adapters_path(e.dir, step), qp = qnet_path(e.dir, step), sp = state_path(e.dir, step);
  for (const auto& p : {ap, io::sidecar_path(ap), qp, io::sidecar_path(qp), sp}) require_file(p);
  try {
    e.gen.adapters = io::read_adapters(io::load_tensors(ap), "adapters");
    nn::validate_adapters(e.gen.base, e.gen.adapters);
    e.q = agent::load_qnets(qp);
    const Json doc = io::read_json(sp);
    if (doc.at("step").get<int>() != step) throw IoError(sp.string() + ": step field disagrees with file name");
    e.buffer = agent::buffer_from_json(doc.at("buffer"));
    e.xi = agent::xi_from_json(doc.at("xi"));
    e.state.s = vector_from(doc.at("agent_state").at("s"));
    e.state.last_action = doc.at("agent_state").at("last_action").get<int>();
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& ex) {
    throw IoError("corrupt checkpoint at step " + std::to_string(step) + ": " + ex.what());
  }
  if (e.q.num_actions() != static_cast<int>(e.actions.size()) || e.q.state_dim() != e.probe.activation_dim())
    throw IoError("checkpoint at step " + std::to_string(step) + " does not match the action space or probe");
  if (e.state.s.size() != e.probe.activation_dim())
    throw IoError("checkpoint at step " + std::to_string(step) + ": agent state has the wrong size");
}

// Highest step with a state file, or -1.
int latest_checkpoint(const fs::path& dir) {
  int best = -1;
  const fs::path cdir = dir / "checkpoints";
  if (!fs::exists(cdir)) return best;
  for (const auto& entry : fs::directory_iterator(cdir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("state_", 0) != 0 || entry.path().extension() != ".json") continue;
    const std::string num = name.substr(6, name.size() - 6 - 5);
    if (num.empty() || !std::all_of(num.begin(), num.end(), [](unsigned char c) { return std::isdigit(c); }))
      continue;
    best = std::max(best, std::stoi(num));
  }
  return best;
}

std::vector<std::string> write_group(const fs::path& dir, int episode, int t, int group, const ImageBatch& images) {
  const fs::path rel = fs::path("images") / ("ep" + std::to_string(episode)) / ("t" + std::to_string(t)) /
                       ("g" + std::to_string(group));
  fs::create_directories(dir / rel);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const fs::path p = rel / (std::to_string(i) + ".png");
    io::write_png(dir / p, images[i]);
    out.push_back(p.generic_string());
  }
  return out;
}

StepRecord run_step(Engine& e, int gs, const RunHooks& hooks) {
  const auto& c = e.cfg;
  StepRecord r;
  r.step = gs;
  r.episode = (gs - 1) / c.steps + 1;
  r.t = (gs - 1) % c.steps + 1;
  if (r.t == 1) e.state = agent::AgentState::zero(e.probe.activation_dim());

  const agent::AgentState s = e.state;
  r.action = agent::select_action(e.q, s, c.agent.epsilon, derive_seed(c.seed, "act" + std::to_string(gs)));
  r.keyword = e.actions.at(static_cast<std::size_t>(r.action));

  const ImageBatch batch =
      gen::sample(e.gen, r.keyword, c.images_per_step, derive_seed(c.seed, "sample" + std::to_string(gs)), true);
  auto [g1, g2] = prefopt::split_groups(batch, derive_seed(c.seed, "split" + std::to_string(gs)));
  r.images_g1 = write_group(e.dir, r.episode, r.t, 1, g1);
  r.images_g2 = write_group(e.dir, r.episode, r.t, 2, g2);

  const auto scores = tcav::score_groups(e.probe, e.test_images, e.target, g1, g2, e.world.random_pool, c.tcav,
                                         derive_seed(c.seed, "tcav" + std::to_string(gs)));
  r.ts1 = scores.ts1.value;
  r.ts2 = scores.ts2.value;

  if (c.feedback.mode == FeedbackMode::hf) {
    r.tcav1 = scores.ts1.value;
    r.tcav2 = scores.ts2.value;
    FeedbackRequest req{gs, r.episode, r.t, r.keyword, r.images_g1, r.images_g2};
    const auto votes = hooks.feedback->await(req, c.feedback.timeout_s);
    if (votes && votes->group1 + votes->group2 > 0) {
      const double total = votes->group1 + votes->group2;
      r.votes1 = votes->group1;
      r.votes2 = votes->group2;
      r.ts1 = votes->group1 / total;
      r.ts2 = votes->group2 / total;
    } else if (c.feedback.fallback == Fallback::abort) {
      throw Error("no feedback within " + std::to_string(c.feedback.timeout_s) + " s");
    }
  }

  const auto decision = prefopt::decide_preference(r.ts1, r.ts2, c.eta, c.inclusive_threshold);
  r.decision = prefopt::to_string(decision.kind);
  switch (decision.kind) {
    case prefopt::DecisionKind::apply_dpo: {
      prefopt::PreferencePair pair;
      pair.winner = decision.winner == 1 ? g1 : g2;
      pair.loser = decision.winner == 1 ? g2 : g1;
      pair.keyword = r.keyword;
      pair.ts_winner = decision.winner == 1 ? r.ts1 : r.ts2;
      pair.ts_loser = decision.winner == 1 ? r.ts2 : r.ts1;
      pair.step = gs;
      const auto rec = prefopt::apply_dpo_update(e.gen, pair, c.dpo, derive_seed(c.seed, "dpo" + std::to_string(gs)));
      r.dpo_loss_before = rec.loss_before;
      r.dpo_loss_after = rec.loss_after;
      agent::update_xi(e.xi, r.keyword, false);
      r.preferred = decision.winner;
      break;
    }
    case prefopt::DecisionKind::reached_explainable:
      agent::update_xi(e.xi, r.keyword, true);
      r.preferred = r.ts2 > r.ts1 ? 2 : 1;
      break;
    case prefopt::DecisionKind::no_signal:
      agent::update_xi(e.xi, r.keyword, false);
      r.preferred = 1;
      break;
  }
  r.xi = e.xi.at(r.keyword);
  r.reward = agent::compute_reward(r.ts1, r.ts2, r.xi);

  agent::AgentState next = agent::encode_state(e.probe, r.preferred == 1 ? g1 : g2);
  next.last_action = r.action;
  e.buffer.push({s.s, r.action, r.reward, next.s});
  r.q_loss = agent::q_learn_step(e.q, e.buffer, derive_seed(c.seed, "learn" + std::to_string(gs)));
  if (gs % c.agent.update_every == 0) agent::sync_target(e.q);
  e.state = std::move(next);
  return r;
}

Json run_summary(const std::vector<StepRecord>& records, const RunConfig& cfg,
                 const std::vector<std::string>& actions) {
  Json keywords = Json::array();
  Json explainable = Json::array();
  for (const auto& k : rank_keywords(records, actions)) {
    keywords.push_back({{"keyword", k.keyword}, {"best_tcav", k.best_tcav}, {"mean_tcav", k.mean_tcav},
                        {"count", k.count}});
    if (k.count > 0 && k.best_tcav >= cfg.eta) explainable.push_back(k.keyword);
  }
  std::vector<double> cumulative;
  double total = 0;
  for (const auto& r : records) cumulative.push_back(total += r.reward);
  std::vector<long long> counts(actions.size(), 0);
  for (const auto& r : records)
    if (r.action >= 0 && static_cast<std::size_t>(r.action) < counts.size()) ++counts[static_cast<std::size_t>(r.action)];
  const auto m = evalx::action_metrics(counts);
  Json metrics = {{"entropy", m.entropy}, {"anc", m.anc}, {"icv", nullptr}};
  if (m.icv) metrics["icv"] = *m.icv;
  Json count_map = Json::object();
  for (std::size_t i = 0; i < actions.size(); ++i) count_map[actions[i]] = counts[i];
  return {{"steps", records.size()},
          {"keywords", keywords},
          {"explainable", explainable},
          {"cumulative_reward", cumulative},
          {"action_counts", count_map},
          {"action_metrics", metrics}};
}

void write_reward_curve(const fs::path& dir, const std::vector<StepRecord>& records) {
  std::ostringstream out;
  out.precision(17);
  out << "step\tcumulative_reward\n";
  double total = 0;
  for (const auto& r : records) out << r.step << '\t' << (total += r.reward) << '\n';
  write_text(dir / "reward_curve.tsv", out.str());
}

Json manifest_doc(const RunConfig& cfg, const Engine& e) {
  return {{"format", "rlpo-run"},
          {"config", cfg.to_json()},
          {"seed", cfg.seed},
          {"actions", e.actions},
          {"sampler", {{"kind", "ancestral"}, {"diffusion_steps", e.gen.schedule.steps()}}},
          {"tcav_random_set_size", cfg.tcav.random_set_size},
          {"versions",
           {{"rlpo", kVersion},
            {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                          std::to_string(EIGEN_MINOR_VERSION)}}}};
}

RunOutcome run_loop(Engine& e, int start, const RunHooks& hooks) {
  const auto& c = e.cfg;
  const int total = c.total_steps();
  if (c.feedback.mode == FeedbackMode::hf && !hooks.feedback)
    throw ConfigError("feedback: hf mode needs a feedback source");
  int last_checkpoint = start;
  for (int gs = start + 1; gs <= total; ++gs) {
    const auto t0 = std::chrono::steady_clock::now();
    StepRecord r;
    try {
      r = run_step(e, gs, hooks);
    } catch (const std::exception& ex) {
      const int ep = (gs - 1) / c.steps + 1, t = (gs - 1) % c.steps + 1;
      append_line(e.dir / kErrors, "step " + std::to_string(gs) + " (episode " + std::to_string(ep) + ", t " +
                                       std::to_string(t) + "): " + ex.what());
      throw Error("step " + std::to_string(gs) + " failed: " + ex.what() + "; resume restarts from step " +
                  std::to_string(last_checkpoint));
    }
    append_line(e.dir / kSteps, serialize(r));
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    append_line(e.dir / kTimings, OJson{{"step", gs}, {"wall_time_ms", ms}}.dump());
    if (gs % c.checkpoint_every == 0 || gs == total) {
      write_checkpoint(e, gs);
      last_checkpoint = gs;
    }
    if (hooks.on_step) hooks.on_step(r);
    if (gs == hooks.stop_after && gs < total) return {gs, false, "stopped after step " + std::to_string(gs)};
  }
  const auto records = read_steps(e.dir);
  io::write_json(e.dir / kReport, {{"run", run_summary(records, c, e.actions)}});
  write_reward_curve(e.dir, records);
  return {total, true, "completed " + std::to_string(total) + " steps"};
}

// Keeps the first `keep` lines of a line-oriented log.
void truncate_lines(const fs::path& path, std::size_t keep) {
  if (!fs::exists(path)) return;
  const std::string text = read_text(path);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < keep && pos < text.size(); ++i) {
    const auto nl = text.find('\n', pos);
    if (nl == std::string::npos) break;
    pos = nl + 1;
  }
  write_text(path, text.substr(0, pos));
}

}  // namespace

const char* to_string(FeedbackMode mode) { return mode == FeedbackMode::xaif ? "xaif" : "hf"; }

FeedbackMode parse_feedback_mode(const std::string& name) {
  if (name == "xaif") return FeedbackMode::xaif;
  if (name == "hf") return FeedbackMode::hf;
  throw ConfigError("feedback.mode: unknown mode '" + name + "'");
}

void RunConfig::validate() const {
  if (!(eta > 0 && eta <= 1)) throw ConfigError("eta: must lie in (0, 1]");
  if (steps < 1) throw ConfigError("steps: must be at least 1");
  if (episodes < 1) throw ConfigError("episodes: must be at least 1");
  if (images_per_step < 2 || images_per_step % 2 != 0)
    throw ConfigError("images_per_step: must be even and at least 2");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every: must be at least 1");
  if (target_class.empty()) throw ConfigError("target_class: missing");
  if (feedback.timeout_s <= 0) throw ConfigError("feedback.timeout_s: must be positive");
  if (feedback.voters < 1) throw ConfigError("feedback.voters: must be at least 1");
  if (tcav.random_set_size < 2) throw ConfigError("tcav.random_set_size: must be at least 2");
  if (xi.init < 0 || xi.init > 1) throw ConfigError("xi.init: must lie in [0, 1]");
  if (xi.increment < 0) throw ConfigError("xi.increment: must not be negative");
  if (eval.top_concepts < 1 || eval.concept_images < 2 || eval.deletion_steps < 1 || eval.deletion_test_images < 1 ||
      eval.tcav_repeats < 1 || eval.stats_images < 2)
    throw ConfigError("eval: counts must be positive");
  try {
    agent.validate();
    dpo.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  if (adapter.rank < 1) throw ConfigError("adapter.rank: must be at least 1");
  const std::vector<std::pair<std::string, fs::path>> artifacts{
      {"world", world / "manifest.json"}, {"probe", probe}, {"generator", generator}};
  for (const auto& [field, p] : artifacts) {
    if (p.empty() || !fs::exists(p)) throw ConfigError(field + ": artifact not found at '" + p.string() + "'");
  }
  if (!actions.empty() && !fs::exists(actions))
    throw ConfigError("actions: artifact not found at '" + actions.string() + "'");
}

Json RunConfig::to_json() const {
  Json fine = {{"epochs", eval.fine_tune_config.epochs},
               {"learning_rate", eval.fine_tune_config.learning_rate},
               {"batch_size", eval.fine_tune_config.batch_size},
               {"seed", eval.fine_tune_config.seed},
               {"tcav", group_to_json(eval.fine_tune_config.tcav)}};
  return {
      {"world", world.string()},
      {"probe", probe.string()},
      {"generator", generator.string()},
      {"actions", actions.string()},
      {"target_class", target_class},
      {"eta", eta},
      {"inclusive_threshold", inclusive_threshold},
      {"steps", steps},
      {"episodes", episodes},
      {"images_per_step", images_per_step},
      {"checkpoint_every", checkpoint_every},
      {"seed", seed},
      {"agent",
       {{"hidden_dims", agent.hidden_dims},
        {"algorithm", algorithm_name(agent.algorithm)},
        {"learning_rate", agent.learning_rate},
        {"gamma", agent.gamma},
        {"epsilon", agent.epsilon},
        {"batch_size", agent.batch_size},
        {"buffer_capacity", agent.buffer_capacity},
        {"update_every", agent.update_every},
        {"tau", agent.tau},
        {"clip_norm", agent.clip_norm}}},
      {"xi", {{"rule", agent::to_string(xi.rule)}, {"init", xi.init}, {"increment", xi.increment}}},
      {"dpo",
       {{"kappa", dpo.kappa},
        {"inner_steps", dpo.inner_steps},
        {"learning_rate", dpo.learning_rate},
        {"algorithm", algorithm_name(dpo.algorithm)},
        {"noise_draws_per_image", dpo.noise_draws_per_image},
        {"clip_norm", dpo.clip_norm}}},
      {"adapter",
       {{"layers", adapter.layers}, {"rank", adapter.rank}, {"scale", adapter.scale}, {"init_std", adapter.init_std}}},
      {"tcav", group_to_json(tcav)},
      {"feedback",
       {{"mode", to_string(feedback.mode)},
        {"timeout_s", feedback.timeout_s},
        {"fallback", fallback_name(feedback.fallback)},
        {"voters", feedback.voters}}},
      {"eval",
       {{"top_concepts", eval.top_concepts},
        {"concept_images", eval.concept_images},
        {"deletion_steps", eval.deletion_steps},
        {"deletion_test_images", eval.deletion_test_images},
        {"tcav_repeats", eval.tcav_repeats},
        {"stats_images", eval.stats_images},
        {"fine_tune", eval.fine_tune},
        {"fine_tune_config", fine}}},
  };
}

RunConfig RunConfig::from_json(const Json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("config: expected an object");
  static const std::set<std::string> known{
      "world", "probe", "generator", "actions", "target_class", "eta", "inclusive_threshold", "steps", "episodes",
      "images_per_step", "checkpoint_every", "seed", "agent", "xi", "dpo", "adapter", "tcav", "feedback", "eval"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("config: unknown field '" + key + "'");

  RunConfig c;
  std::string world, probe, generator, actions;
  read_field(j, "world", world, "");
  read_field(j, "probe", probe, "");
  read_field(j, "generator", generator, "");
  read_field(j, "actions", actions, "");
  c.world = resolve(base_dir, world);
  c.probe = resolve(base_dir, probe);
  c.generator = resolve(base_dir, generator);
  c.actions = resolve(base_dir, actions);
  read_field(j, "target_class", c.target_class, "");
  read_field(j, "eta", c.eta, "");
  read_field(j, "inclusive_threshold", c.inclusive_threshold, "");
  read_field(j, "steps", c.steps, "");
  read_field(j, "episodes", c.episodes, "");
  read_field(j, "images_per_step", c.images_per_step, "");
  read_field(j, "checkpoint_every", c.checkpoint_every, "");
  read_field(j, "seed", c.seed, "");

  if (j.contains("agent")) {
    const auto& a = j.at("agent");
    std::string alg = algorithm_name(c.agent.algorithm);
    read_field(a, "hidden_dims", c.agent.hidden_dims, "agent.");
    read_field(a, "algorithm", alg, "agent.");
    c.agent.algorithm = parse_algorithm(alg, "agent.algorithm");
    read_field(a, "learning_rate", c.agent.learning_rate, "agent.");
    read_field(a, "gamma", c.agent.gamma, "agent.");
    read_field(a, "epsilon", c.agent.epsilon, "agent.");
    read_field(a, "batch_size", c.agent.batch_size, "agent.");
    read_field(a, "buffer_capacity", c.agent.buffer_capacity, "agent.");
    read_field(a, "update_every", c.agent.update_every, "agent.");
    read_field(a, "tau", c.agent.tau, "agent.");
    read_field(a, "clip_norm", c.agent.clip_norm, "agent.");
  }
  if (j.contains("xi")) {
    const auto& x = j.at("xi");
    std::string rule = agent::to_string(c.xi.rule);
    read_field(x, "rule", rule, "xi.");
    c.xi.rule = agent::parse_xi_rule(rule);
    read_field(x, "init", c.xi.init, "xi.");
    read_field(x, "increment", c.xi.increment, "xi.");
  }
  if (j.contains("dpo")) {
    const auto& d = j.at("dpo");
    std::string alg = algorithm_name(c.dpo.algorithm);
    read_field(d, "kappa", c.dpo.kappa, "dpo.");
    read_field(d, "inner_steps", c.dpo.inner_steps, "dpo.");
    read_field(d, "learning_rate", c.dpo.learning_rate, "dpo.");
    read_field(d, "algorithm", alg, "dpo.");
    c.dpo.algorithm = parse_algorithm(alg, "dpo.algorithm");
    read_field(d, "noise_draws_per_image", c.dpo.noise_draws_per_image, "dpo.");
    read_field(d, "clip_norm", c.dpo.clip_norm, "dpo.");
  }
  if (j.contains("adapter")) {
    const auto& a = j.at("adapter");
    read_field(a, "layers", c.adapter.layers, "adapter.");
    read_field(a, "rank", c.adapter.rank, "adapter.");
    read_field(a, "scale", c.adapter.scale, "adapter.");
    read_field(a, "init_std", c.adapter.init_std, "adapter.");
  }
  if (j.contains("tcav")) c.tcav = group_from_json(j.at("tcav"), "tcav.");
  if (j.contains("feedback")) {
    const auto& f = j.at("feedback");
    std::string mode = to_string(c.feedback.mode), fallback = fallback_name(c.feedback.fallback);
    read_field(f, "mode", mode, "feedback.");
    c.feedback.mode = parse_feedback_mode(mode);
    read_field(f, "timeout_s", c.feedback.timeout_s, "feedback.");
    read_field(f, "fallback", fallback, "feedback.");
    c.feedback.fallback = parse_fallback(fallback);
    read_field(f, "voters", c.feedback.voters, "feedback.");
  }
  if (j.contains("eval")) {
    const auto& v = j.at("eval");
    read_field(v, "top_concepts", c.eval.top_concepts, "eval.");
    read_field(v, "concept_images", c.eval.concept_images, "eval.");
    read_field(v, "deletion_steps", c.eval.deletion_steps, "eval.");
    read_field(v, "deletion_test_images", c.eval.deletion_test_images, "eval.");
    read_field(v, "tcav_repeats", c.eval.tcav_repeats, "eval.");
    read_field(v, "stats_images", c.eval.stats_images, "eval.");
    read_field(v, "fine_tune", c.eval.fine_tune, "eval.");
    if (v.contains("fine_tune_config")) {
      const auto& f = v.at("fine_tune_config");
      auto& ft = c.eval.fine_tune_config;
      read_field(f, "epochs", ft.epochs, "eval.fine_tune_config.");
      read_field(f, "learning_rate", ft.learning_rate, "eval.fine_tune_config.");
      read_field(f, "batch_size", ft.batch_size, "eval.fine_tune_config.");
      read_field(f, "seed", ft.seed, "eval.fine_tune_config.");
      if (f.contains("tcav")) ft.tcav = group_from_json(f.at("tcav"), "eval.fine_tune_config.tcav.");
    }
  }
  return c;
}

RunConfig RunConfig::load(const fs::path& file) {
  Json doc;
  try {
    doc = Json::parse(read_text(file));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(file.string() + ": " + e.what());
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  auto c = from_json(doc, fs::absolute(file).parent_path());
  c.validate();
  return c;
}

Json StepRecord::to_json() const { return Json::parse(serialize(*this)); }

StepRecord StepRecord::from_json(const Json& j) {
  StepRecord r;
  r.step = j.at("step").get<int>();
  r.episode = j.at("episode").get<int>();
  r.t = j.at("t").get<int>();
  r.action = j.at("action").get<int>();
  r.keyword = j.at("keyword").get<std::string>();
  r.ts1 = j.at("ts1").get<double>();
  r.ts2 = j.at("ts2").get<double>();
  r.reward = j.at("reward").get<double>();
  r.xi = j.at("xi").get<double>();
  r.decision = j.at("decision").get<std::string>();
  r.preferred = j.at("preferred").get<int>();
  auto opt_d = [&](const char* k, std::optional<double>& out) {
    if (j.contains(k) && !j.at(k).is_null()) out = j.at(k).get<double>();
  };
  auto opt_i = [&](const char* k, std::optional<int>& out) {
    if (j.contains(k) && !j.at(k).is_null()) out = j.at(k).get<int>();
  };
  opt_d("dpo_loss_before", r.dpo_loss_before);
  opt_d("dpo_loss_after", r.dpo_loss_after);
  opt_d("q_loss", r.q_loss);
  opt_d("tcav1", r.tcav1);
  opt_d("tcav2", r.tcav2);
  opt_i("votes1", r.votes1);
  opt_i("votes2", r.votes2);
  r.images_g1 = j.at("images_g1").get<std::vector<std::string>>();
  r.images_g2 = j.at("images_g2").get<std::vector<std::string>>();
  return r;
}

double StepRecord::best_tcav() const {
  if (tcav1 && tcav2) return std::max(*tcav1, *tcav2);
  return std::max(ts1, ts2);
}

std::string serialize(const StepRecord& r) {
  OJson j;
  j["step"] = r.step;
  j["episode"] = r.episode;
  j["t"] = r.t;
  j["action"] = r.action;
  j["keyword"] = r.keyword;
  j["ts1"] = r.ts1;
  j["ts2"] = r.ts2;
  j["reward"] = r.reward;
  j["xi"] = r.xi;
  j["decision"] = r.decision;
  j["preferred"] = r.preferred;
  auto put = [&](const char* k, const auto& v) {
    if (v) j[k] = *v;
  };
  put("dpo_loss_before", r.dpo_loss_before);
  put("dpo_loss_after", r.dpo_loss_after);
  put("q_loss", r.q_loss);
  put("tcav1", r.tcav1);
  put("tcav2", r.tcav2);
  put("votes1", r.votes1);
  put("votes2", r.votes2);
  j["images_g1"] = r.images_g1;
  j["images_g2"] = r.images_g2;
  return j.dump();
}

RunOutcome run_rlpo(const RunConfig& config, const fs::path& dir, const RunHooks& hooks) {
  config.validate();
  if (fs::exists(dir / kManifest)) throw ConfigError("run directory " + dir.string() + " already holds a run");
  if (config.feedback.mode == FeedbackMode::hf && !hooks.feedback)
    throw ConfigError("feedback: hf mode needs a feedback source");
  fs::create_directories(dir);
  Engine e = load_engine(config, dir);
  init_fresh(e);
  io::write_json(dir / kManifest, manifest_doc(config, e));
  write_text(dir / kSteps, "");
  write_text(dir / kTimings, "");
  write_checkpoint(e, 0);
  return run_loop(e, 0, hooks);
}

RunConfig read_manifest_config(const fs::path& dir) {
  const fs::path p = dir / kManifest;
  if (!fs::exists(p)) throw IoError("missing run manifest " + p.string());
  const auto doc = io::read_json(p);
  if (!doc.contains("config")) throw IoError(p.string() + ": no config entry");
  return RunConfig::from_json(doc.at("config"));
}

std::vector<StepRecord> read_steps(const fs::path& dir) {
  const fs::path p = dir / kSteps;
  if (!fs::exists(p)) return {};
  const std::string text = read_text(p);
  std::vector<StepRecord> out;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    if (nl == std::string::npos) break;  // torn tail
    ++line_no;
    try {
      out.push_back(StepRecord::from_json(Json::parse(text.substr(pos, nl - pos))));
    } catch (const std::exception& e) {
      throw IoError(p.string() + ": line " + std::to_string(line_no) + ": " + e.what());
    }
    pos = nl + 1;
  }
  return out;
}

RunOutcome resume(const fs::path& dir, const RunHooks& hooks) {
  RunConfig cfg = read_manifest_config(dir);
  cfg.validate();
  const int k = latest_checkpoint(dir);
  if (k < 0) throw IoError("missing checkpoint file: no state_<step>.json under " + (dir / "checkpoints").string());
  const int total = cfg.total_steps();
  if (k > total) throw IoError("checkpoint at step " + std::to_string(k) + " is beyond the configured run length");
  const auto records = read_steps(dir);
  if (records.size() < static_cast<std::size_t>(k))
    throw IoError("steps.log holds " + std::to_string(records.size()) + " records but the checkpoint is at step " +
                  std::to_string(k));
  for (std::size_t i = 0; i < static_cast<std::size_t>(k); ++i)
    if (records[i].step != static_cast<int>(i) + 1)
      throw IoError("steps.log line " + std::to_string(i + 1) + " carries step " + std::to_string(records[i].step));
  if (k == total) {
    // Still confirm the final checkpoint is whole.
    for (const auto& p : {adapters_path(dir, k), qnet_path(dir, k)}) {
      require_file(p);
      require_file(io::sidecar_path(p));
    }
    return {total, true, "run already complete; nothing to resume"};
  }
  Engine e = load_engine(cfg, dir);
  init_fresh(e);
  restore_checkpoint(e, k);
  truncate_lines(dir / kSteps, static_cast<std::size_t>(k));
  truncate_lines(dir / kTimings, static_cast<std::size_t>(k));
  return run_loop(e, k, hooks);
}

std::vector<KeywordSummary> rank_keywords(const std::vector<StepRecord>& records,
                                          const std::vector<std::string>& keywords) {
  std::map<std::string, KeywordSummary> by;
  for (const auto& k : keywords) by[k] = {k, 0, 0, 0};
  for (const auto& r : records) {
    auto& s = by[r.keyword];
    s.keyword = r.keyword;
    const double v = r.best_tcav();
    s.best_tcav = s.count == 0 ? v : std::max(s.best_tcav, v);
    s.mean_tcav += v;
    ++s.count;
  }
  std::vector<KeywordSummary> out;
  for (auto& [_, s] : by) {
    if (s.count > 0) s.mean_tcav /= s.count;
    out.push_back(s);
  }
  std::sort(out.begin(), out.end(), [](const KeywordSummary& a, const KeywordSummary& b) {
    if (a.best_tcav != b.best_tcav) return a.best_tcav > b.best_tcav;
    if (a.mean_tcav != b.mean_tcav) return a.mean_tcav > b.mean_tcav;
    return a.keyword < b.keyword;
  });
  return out;
}

EvalOutcome evaluate(const fs::path& dir) {
  const RunConfig cfg = read_manifest_config(dir);
  cfg.validate();
  const int total = cfg.total_steps();
  const auto records = read_steps(dir);
  if (records.size() != static_cast<std::size_t>(total) || latest_checkpoint(dir) != total)
    throw Error("run is not complete: " + std::to_string(records.size()) + " of " + std::to_string(total) +
                " steps logged");
  Engine e = load_engine(cfg, dir);
  init_fresh(e);
  restore_checkpoint(e, total);
  const auto& ev = cfg.eval;

  Json report = {{"run", run_summary(records, cfg, e.actions)}};
  Json evaluation = Json::object();
  bool partial = false;

  const auto ranked = rank_keywords(records, e.actions);
  std::vector<std::string> explainable, chosen;
  for (const auto& k : ranked)
    if (k.count > 0 && k.best_tcav >= cfg.eta) explainable.push_back(k.keyword);
  chosen = explainable;
  if (chosen.size() > static_cast<std::size_t>(ev.top_concepts)) chosen.resize(static_cast<std::size_t>(ev.top_concepts));
  // Too few explainable keywords: fill with the next best ones that were tried.
  for (const auto& k : ranked) {
    if (chosen.size() >= static_cast<std::size_t>(ev.top_concepts)) break;
    if (k.count > 0 && std::find(chosen.begin(), chosen.end(), k.keyword) == chosen.end()) chosen.push_back(k.keyword);
  }
  evaluation["explainable"] = explainable;
  evaluation["explainable_empty"] = explainable.empty();

  const std::uint64_t eseed = derive_seed(cfg.seed, "evaluate");
  ImageBatch deletion_tests(e.test_images.begin(),
                            e.test_images.begin() + std::min<std::ptrdiff_t>(ev.deletion_test_images,
                                                                             static_cast<std::ptrdiff_t>(e.test_images.size())));
  std::vector<evalx::ConceptSet> concept_sets;
  Json concepts = Json::array();
  for (const auto& kw : chosen) {
    Json entry = {{"keyword", kw},
                  {"explainable", std::find(explainable.begin(), explainable.end(), kw) != explainable.end()}};
    for (const auto& k : ranked)
      if (k.keyword == kw) entry["best_tcav"] = k.best_tcav;
    try {
      const ImageBatch images =
          gen::sample(e.gen, kw, ev.concept_images, derive_seed(eseed, "concept" + kw), true);
      concept_sets.push_back({kw, images, static_cast<int>(e.target)});
      double tcav_sum = 0;
      for (int rep = 0; rep < ev.tcav_repeats; ++rep)
        tcav_sum += evalx::concept_tcav(e.probe, e.world, concept_sets.back(), cfg.tcav,
                                        derive_seed(eseed, "tcav" + kw + std::to_string(rep)));
      entry["concept_tcav"] = tcav_sum / ev.tcav_repeats;

      ImageBatch heatmaps;
      for (const auto& img : deletion_tests) heatmaps.push_back(evalx::localize(images, img));
      evalx::DeletionConfig dc;
      dc.steps = ev.deletion_steps;
      dc.mean_pixel = e.world.dataset.mean_pixel();
      const auto curve = evalx::c_deletion_curve(e.probe, deletion_tests, e.target, heatmaps, dc);
      entry["deletion_auc"] = curve.auc;
      entry["deletion_curve"] = {{"fraction", curve.fractions}, {"probability", curve.probabilities}};
      std::ostringstream tsv;
      tsv.precision(17);
      tsv << "fraction\tprobability\n";
      for (std::size_t i = 0; i < curve.fractions.size(); ++i)
        tsv << curve.fractions[i] << '\t' << curve.probabilities[i] << '\n';
      const std::string file = "deletion_" + safe_name(kw) + ".tsv";
      write_text(dir / file, tsv.str());
      entry["deletion_table"] = file;
    } catch (const std::exception& ex) {
      entry["error"] = ex.what();
      partial = true;
    }
    concepts.push_back(entry);
  }
  evaluation["concepts"] = concepts;

  // Two independent sampling seeds per keyword give the intra-concept pairs.
  Json stats = {{"intra", Json::array()}, {"inter", Json::array()}};
  try {
    std::vector<Matrix> first, second;
    for (const auto& kw : chosen) {
      first.push_back(probe::activations_at_l(
          e.probe, gen::sample(e.gen, kw, ev.stats_images, derive_seed(eseed, "statsA" + kw), true)));
      second.push_back(probe::activations_at_l(
          e.probe, gen::sample(e.gen, kw, ev.stats_images, derive_seed(eseed, "statsB" + kw), true)));
    }
    auto stat_json = [&](const Matrix& a, const Matrix& b, const std::string& tag) {
      Json out;
      try {
        evalx::SetStatsConfig sc;
        sc.seed = derive_seed(eseed, "sliced" + tag);
        const auto s = evalx::set_statistics(a, b, sc);
        out = {{"mean_cosine", s.mean_cosine},
               {"sliced_wasserstein", s.sliced_wasserstein},
               {"hotelling_t2", s.hotelling_t2},
               {"chi2_threshold", s.chi2_threshold},
               {"same_distribution", s.same_distribution}};
      } catch (const std::exception& ex) {
        out = {{"error", ex.what()}};
        partial = true;
      }
      return out;
    };
    double intra_sum = 0, inter_sum = 0;
    int intra_n = 0, inter_n = 0;
    for (std::size_t i = 0; i < chosen.size(); ++i) {
      Json s = stat_json(first[i], second[i], chosen[i]);
      s["keyword"] = chosen[i];
      if (s.contains("mean_cosine")) {
        intra_sum += s["mean_cosine"].get<double>();
        ++intra_n;
      }
      stats["intra"].push_back(s);
    }
    for (std::size_t i = 0; i < chosen.size(); ++i)
      for (std::size_t j = i + 1; j < chosen.size(); ++j) {
        Json s = stat_json(first[i], first[j], chosen[i] + "|" + chosen[j]);
        s["keywords"] = {chosen[i], chosen[j]};
        if (s.contains("mean_cosine")) {
          inter_sum += s["mean_cosine"].get<double>();
          ++inter_n;
        }
        stats["inter"].push_back(s);
      }
    stats["intra_mean_cosine"] = intra_n ? Json(intra_sum / intra_n) : Json(nullptr);
    stats["inter_mean_cosine"] = inter_n ? Json(inter_sum / inter_n) : Json(nullptr);
  } catch (const std::exception& ex) {
    stats["error"] = ex.what();
    partial = true;
  }
  evaluation["set_statistics"] = stats;

  if (ev.fine_tune && !concept_sets.empty()) {
    try {
      const auto ft = evalx::fine_tune_on_concepts(e.probe, e.world, concept_sets, concept_sets, ev.fine_tune_config);
      Json deltas = Json::array();
      for (const auto& d : ft.report.concepts)
        deltas.push_back({{"keyword", d.keyword}, {"before", d.before}, {"after", d.after}});
      evaluation["fine_tune"] = {{"accuracy_before", ft.report.accuracy_before},
                                 {"accuracy_after", ft.report.accuracy_after},
                                 {"concepts", deltas}};
    } catch (const std::exception& ex) {
      evaluation["fine_tune"] = {{"error", ex.what()}};
      partial = true;
    }
  }

  evaluation["partial"] = partial;
  report["evaluation"] = evaluation;
  io::write_json(dir / kReport, report);
  write_reward_curve(dir, records);
  return {report, explainable.empty()};
}

}  // namespace rlpo::runtime
