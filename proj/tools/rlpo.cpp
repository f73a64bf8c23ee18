// Command-line front end: artifact preparation, runs, evaluation and the service.

#include "rlpo/gen.hpp"
#include "rlpo/probe.hpp"
#include "rlpo/runtime.hpp"
#include "rlpo/seeds.hpp"
#include "rlpo/service.hpp"
#include "rlpo/synthworld.hpp"
#include "rlpo/tensor_io.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <iostream>
#include <thread>

namespace fs = std::filesystem;
using namespace rlpo;

namespace {

constexpr int kRunFailure = 1;
constexpr int kConfigError = 2;
constexpr int kEmptyExplainable = 3;

service::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

io::Json optional_json(const std::string& file) {
  if (file.empty()) return io::Json::object();
  try {
    return io::read_json(file);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

int world_build(const std::string& config_file, const fs::path& out, bool pngs) {
  const auto doc = optional_json(config_file);
  const auto cfg = config_file.empty() ? world::WorldConfig::defaults() : world::world_config_from_json(doc);
  const auto w = world::build_world(cfg);
  world::save_world(w, out, pngs);
  std::cout << "world: " << w.dataset.size() << " labeled images, " << w.random_pool.size() << " random, "
            << w.keywords.size() << " keywords -> " << out.string() << "\n";
  return 0;
}

int train_probe(const fs::path& world_dir, const fs::path& out, int epochs, std::uint64_t seed, int neutral) {
  const auto w = world::load_world(world_dir);
  probe::TrainConfig tc;
  tc.epochs = epochs;
  tc.seed = seed;
  if (neutral > 0) tc.neutral_images = world::render_random(w.config, "neutral", neutral);
  const auto trained = probe::train_classifier(w.dataset, tc);
  probe::save_probe(trained.model, out);
  std::cout << "probe: train accuracy " << trained.report.train_accuracy << ", test accuracy "
            << trained.report.test_accuracy << " -> " << out.string() << "\n";
  return 0;
}

int pretrain_gen(const fs::path& world_dir, const fs::path& out, int steps, int per_keyword, std::uint64_t seed) {
  const auto w = world::load_world(world_dir);
  const auto corpus = world::keyword_corpus(w.config, w.keywords, per_keyword);
  auto g = gen::make_generator({}, w.keywords, seed);
  gen::PretrainConfig pc;
  pc.steps = steps;
  pc.seed = derive_seed(seed, "pretrain");
  const auto rep = gen::pretrain(g, corpus.images, corpus.keywords, pc);
  gen::save_generator(g, out);
  std::cout << "generator: loss " << rep.initial_loss << " -> " << rep.smoothed_final
            << (rep.converged ? " (converged)" : " (not converged)") << " -> " << out.string() << "\n";
  return rep.converged ? 0 : kRunFailure;
}

int seeds_cmd(const fs::path& world_dir, const std::string& class_name, const fs::path& out, int k) {
  const auto w = world::load_world(world_dir);
  int label = 0;
  try {
    label = w.dataset.class_index(class_name);
  } catch (const ValidationError&) {
    throw ConfigError("class: '" + class_name + "' is not a class of the world");
  }
  const seeds::TemplateDescriber describer(w.keyword_templates);
  std::vector<std::string> errors;
  const auto actions =
      seeds::build_action_space(w.dataset.select(label, world::Split::train), describer, k, &errors);
  for (const auto& e : errors) std::cerr << "seeds: " << e << "\n";
  seeds::save_action_space(actions, out);
  for (const auto& a : actions) std::cout << a.keyword << "\t" << a.mean_relevance << "\n";
  return 0;
}

void print_outcome(const runtime::RunOutcome& o) { std::cout << o.message << "\n"; }

int run_cmd(const fs::path& config_file, const fs::path& out, std::optional<std::uint64_t> seed) {
  auto cfg = runtime::RunConfig::load(config_file);
  if (seed) cfg.seed = *seed;
  print_outcome(runtime::run_rlpo(cfg, out));
  return 0;
}

int eval_cmd(const fs::path& dir) {
  const auto out = runtime::evaluate(dir);
  const auto& ev = out.report.at("evaluation");
  for (const auto& c : ev.at("concepts")) {
    std::cout << c.at("keyword").get<std::string>();
    if (c.contains("deletion_auc")) std::cout << "\tdeletion auc " << c.at("deletion_auc").get<double>();
    if (c.contains("error")) std::cout << "\terror: " << c.at("error").get<std::string>();
    std::cout << "\n";
  }
  if (out.explainable_empty) {
    std::cout << "explainable set is empty\n";
    return kEmptyExplainable;
  }
  std::cout << "explainable: " << ev.at("explainable").dump() << "\n";
  return ev.at("partial").get<bool>() ? kRunFailure : 0;
}

int serve_cmd(const fs::path& dir, const std::string& host, int port, const std::string& mode_name,
              const std::string& config_file) {
  const auto mode = runtime::parse_feedback_mode(mode_name);
  std::optional<runtime::RunConfig> cfg;
  bool fresh = false;
  if (fs::exists(dir / "manifest")) {
    cfg = runtime::read_manifest_config(dir);
    if (cfg->feedback.mode != mode)
      throw ConfigError(std::string("mode: the run was started in ") + runtime::to_string(cfg->feedback.mode) +
                        " mode");
  } else if (!config_file.empty()) {
    cfg = runtime::RunConfig::load(config_file);
    cfg->feedback.mode = mode;
    fresh = true;
  }

  service::FeedbackBroker broker(cfg ? cfg->feedback.voters : 1);
  service::RunMonitor monitor;
  std::thread worker;
  if (cfg) {
    const int total = cfg->total_steps();
    if (!fresh && static_cast<int>(runtime::read_steps(dir).size()) >= total) {
      monitor.set(service::RunStatus::completed);
    } else {
      monitor.set(service::RunStatus::running);
      worker = std::thread([&, fresh] {
        runtime::RunHooks hooks;
        hooks.feedback = &broker;
        try {
          const auto o = fresh ? runtime::run_rlpo(*cfg, dir, hooks) : runtime::resume(dir, hooks);
          monitor.set(o.completed ? service::RunStatus::completed : service::RunStatus::idle, o.message);
          print_outcome(o);
        } catch (const std::exception& e) {
          monitor.set(service::RunStatus::failed, e.what());
          std::cerr << "run failed: " << e.what() << "\n";
        }
      });
    }
  }

  service::Server server(dir, {mode, mode == runtime::FeedbackMode::hf ? &broker : nullptr, &monitor});
  int bound = 0;
  try {
    bound = server.bind(host, port);
  } catch (...) {
    // Nothing can vote without the service; let a waiting run time out.
    if (worker.joinable()) worker.detach();
    throw;
  }
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cout << "serving " << dir.string() << " on http://" << host << ":" << bound << " (" << mode_name << ")"
            << std::endl;
  server.serve();
  g_server = nullptr;
  if (worker.joinable()) worker.join();
  return monitor.status() == service::RunStatus::failed ? kRunFailure : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept discovery by preference-optimized generation"};
  app.require_subcommand(1);

  auto* world_cmd = app.add_subcommand("world", "Synthetic texture world");
  auto* build = world_cmd->add_subcommand("build", "Render and save a world");
  world_cmd->require_subcommand(1);
  std::string world_config;
  fs::path world_out;
  bool no_png = false;
  build->add_option("--config", world_config, "World config (JSON); defaults when omitted");
  build->add_option("--out", world_out, "Output directory")->required();
  build->add_flag("--no-png", no_png, "Skip PNG copies of the images");

  auto* probe_cmd = app.add_subcommand("train-probe", "Train the classifier under test");
  fs::path probe_world, probe_out;
  int probe_epochs = 30, neutral = 600;
  std::uint64_t probe_seed = 1;
  probe_cmd->add_option("--world", probe_world)->required();
  probe_cmd->add_option("--out", probe_out)->required();
  probe_cmd->add_option("--epochs", probe_epochs);
  probe_cmd->add_option("--seed", probe_seed);
  probe_cmd->add_option("--neutral", neutral, "Random-texture images trained toward the uniform distribution");

  auto* gen_cmd = app.add_subcommand("pretrain-gen", "Pretrain the keyword-conditioned generator");
  fs::path gen_world, gen_out;
  int gen_steps = 3000, per_keyword = 256;
  std::uint64_t gen_seed = 3;
  gen_cmd->add_option("--world", gen_world)->required();
  gen_cmd->add_option("--out", gen_out)->required();
  gen_cmd->add_option("--steps", gen_steps);
  gen_cmd->add_option("--per-keyword", per_keyword);
  gen_cmd->add_option("--seed", gen_seed);

  auto* seeds_sub = app.add_subcommand("seeds", "Build the keyword action space for a class");
  fs::path seeds_world, seeds_out;
  std::string seeds_class;
  int seeds_k = 20;
  seeds_sub->add_option("--world", seeds_world)->required();
  seeds_sub->add_option("--class", seeds_class)->required();
  seeds_sub->add_option("--out", seeds_out)->required();
  seeds_sub->add_option("--k", seeds_k);

  auto* run_sub = app.add_subcommand("run", "Start a run");
  fs::path run_config, run_out;
  std::optional<std::uint64_t> run_seed;
  run_sub->add_option("--config", run_config)->required();
  run_sub->add_option("--out", run_out)->required();
  run_sub->add_option("--seed", run_seed);

  auto* resume_sub = app.add_subcommand("resume", "Continue an interrupted run");
  fs::path resume_dir;
  resume_sub->add_option("dir", resume_dir)->required();

  auto* eval_sub = app.add_subcommand("eval", "Evaluate a completed run");
  fs::path eval_dir;
  eval_sub->add_option("dir", eval_dir)->required();

  auto* serve_sub = app.add_subcommand("serve", "HTTP monitoring and feedback service");
  fs::path serve_dir;
  int port = 8080;
  std::string mode = "xaif", host = "127.0.0.1", serve_config;
  serve_sub->add_option("dir", serve_dir)->required();
  serve_sub->add_option("--port", port);
  serve_sub->add_option("--mode", mode)->check(CLI::IsMember({"xaif", "hf"}));
  serve_sub->add_option("--host", host);
  serve_sub->add_option("--config", serve_config, "Start a new run in dir from this config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  try {
    if (build->parsed()) return world_build(world_config, world_out, !no_png);
    if (probe_cmd->parsed()) return train_probe(probe_world, probe_out, probe_epochs, probe_seed, neutral);
    if (gen_cmd->parsed()) return pretrain_gen(gen_world, gen_out, gen_steps, per_keyword, gen_seed);
    if (seeds_sub->parsed()) return seeds_cmd(seeds_world, seeds_class, seeds_out, seeds_k);
    if (run_sub->parsed()) return run_cmd(run_config, run_out, run_seed);
    if (resume_sub->parsed()) {
      print_outcome(runtime::resume(resume_dir));
      return 0;
    }
    if (eval_sub->parsed()) return eval_cmd(eval_dir);
    if (serve_sub->parsed()) return serve_cmd(serve_dir, host, port, mode, serve_config);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ValidationError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRunFailure;
  }
  return kRunFailure;
}
