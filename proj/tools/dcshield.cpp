#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dcshield/dcshield.hpp"
#include "dcshield/teleop_server.hpp"

namespace {

using namespace dcshield;
using nlohmann::json;

enum Exit { kOk = 0, kError = 1, kUsage = 2, kInfeasible = 3, kMismatch = 4 };

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  return f;
}

std::string mdp_path(const std::string& prefix) { return prefix + ".mdp"; }
std::string meta_path(const std::string& prefix) { return prefix + ".meta.json"; }

envs::EnvBundle load_env(const std::string& prefix, RunManifest& man) {
  man.input(mdp_path(prefix));
  man.input(meta_path(prefix));
  std::ifstream in(mdp_path(prefix));
  if (!in) throw std::runtime_error("cannot read " + mdp_path(prefix));
  BasicMdp mdp = read_mdp(in);
  return envs::env_from_metadata(std::move(mdp), json::parse(slurp(meta_path(prefix))));
}

/// Channel options shared by every command that works on a delayed product.
struct ChannelArgs {
  std::string delay_model;
  int constant = -1;
  int safe_action = -1;

  void add(CLI::App* app) {
    auto* dm = app->add_option("--delay-model", delay_model, "Delay model file (random delay)");
    auto* cd = app->add_option("--constant-delay", constant, "Constant delay in ticks")->check(CLI::NonNegativeNumber);
    dm->excludes(cd);
    app->add_option("--safe-action", safe_action, "Idle action for constant delay (default: from metadata)");
  }

  DcMdp build(const envs::EnvBundle& env, RunManifest& man) const {
    if (!delay_model.empty()) {
      man.input(delay_model);
      std::ifstream in(delay_model);
      if (!in) throw std::runtime_error("cannot read " + delay_model);
      man.parameters()["channel"] = {{"kind", "random"}, {"delay_model", delay_model}};
      return DcMdp::random_delay(env.mdp, read_delay_model(in));
    }
    if (constant < 0) throw CLI::ValidationError("channel", "one of --delay-model or --constant-delay is required");
    const ActionId a = safe_action >= 0 ? safe_action : env.safe_action;
    man.parameters()["channel"] = {{"kind", "constant"}, {"tau_max", constant}, {"safe_action", a}};
    return DcMdp::constant_delay(env.mdp, constant, a);
  }
};

std::vector<ActionId> read_policy_file(const std::string& path, std::size_t n) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<ActionId> out;
  long long a;
  while (in >> a) out.push_back(static_cast<ActionId>(a));
  if (out.size() != n)
    throw std::runtime_error("policy file has " + std::to_string(out.size()) + " entries, expected " + std::to_string(n));
  return out;
}

StopRule parse_stop(const std::string& s) { return s == "residual" ? StopRule::residual : StopRule::error_estimate; }

Fallback parse_fallback(const std::string& s) {
  if (s == "safest") return Fallback::safest;
  if (s == "nearest") return Fallback::nearest;
  throw CLI::ValidationError("--fallback", "expected safest or nearest");
}

void finish(RunManifest& man, const std::string& manifest_path, bool as_json) {
  if (!manifest_path.empty()) man.write(manifest_path);
  if (as_json) std::cout << man.to_json()["results"].dump(2) << '\n';
}

std::string default_manifest(const std::string& out) { return out.empty() ? std::string() : out + ".manifest.json"; }

}  // namespace

int main(int argc, char** argv) {
  if (const char* lvl = std::getenv("DCSHIELD_LOG")) spdlog::set_level(spdlog::level::from_str(lvl));
  else spdlog::set_level(spdlog::level::warn);
  spdlog::set_pattern("[%l] %v");

  CLI::App app{"Shield synthesis and simulation for control over delayed links"};
  app.require_subcommand(1);
  bool as_json = false;
  std::string manifest;
  app.add_flag("--json", as_json, "Print results as JSON");
  app.add_option("--manifest", manifest, "Manifest path (default: beside the main output)");

  // build-env
  auto* be = app.add_subcommand("build-env", "Build a reference environment and its controller");
  std::string be_env, be_config, be_out;
  be->add_option("--env", be_env, "gridworld | car-following")->required();
  be->add_option("--config", be_config, "JSON configuration overrides");
  be->add_option("--out", be_out, "Output prefix (writes PREFIX.mdp and PREFIX.meta.json)")->required();

  // estimate-delay-model
  auto* ed = app.add_subcommand("estimate-delay-model", "Estimate a delay model from latency traces");
  std::vector<std::string> ed_traces;
  std::string ed_out;
  double ed_bin = 100.0, ed_smooth = 0.0;
  int ed_tau = -1;
  ed->add_option("--trace", ed_traces, "CSV trace (timestamp_ms,delay_ms); repeatable")->required();
  ed->add_option("--bin-width", ed_bin, "Bin width in ms")->check(CLI::PositiveNumber);
  ed->add_option("--tau-max", ed_tau, "Largest delay bin (default: highest observed)");
  ed->add_option("--smoothing", ed_smooth, "Additive smoothing over allowed cells")->check(CLI::NonNegativeNumber);
  ed->add_option("--out", ed_out, "Delay model output file")->required();

  // build-dcmdp
  auto* bd = app.add_subcommand("build-dcmdp", "Build the delayed-communication product");
  std::string bd_env, bd_out, bd_seeds = "init";
  ChannelArgs bd_ch;
  bd->add_option("--env", bd_env, "Environment prefix")->required();
  bd_ch.add(bd);
  bd->add_option("--out", bd_out, "Output prefix (writes PREFIX.mdp and PREFIX.map)");
  bd->add_option("--reach-from", bd_seeds, "Reachability seeds: init | all")->check(CLI::IsMember({"init", "all"}));

  // verify
  auto* vf = app.add_subcommand("verify", "Model-check the specification");
  std::string vf_env, vf_policy, vf_stop = "error-estimate";
  ChannelArgs vf_ch;
  double vf_tol = 1e-6;
  vf->add_option("--env", vf_env, "Environment prefix")->required();
  vf_ch.add(vf);
  vf->add_option("--policy", vf_policy, "Base policy file to evaluate (default: the environment controller)");
  vf->add_option("--tol", vf_tol, "Value-iteration tolerance")->check(CLI::PositiveNumber);
  vf->add_option("--stop", vf_stop, "Stopping rule: residual | error-estimate")
      ->check(CLI::IsMember({"residual", "error-estimate"}));

  // synthesize-shield
  auto* ss = app.add_subcommand("synthesize-shield", "Synthesize an epsilon-shield meeting a safety target");
  std::string ss_env, ss_policy, ss_out, ss_mode = "with-policy", ss_fallback = "safest", ss_stop = "error-estimate";
  ChannelArgs ss_ch;
  double ss_delta = 0.95, ss_eta = 0.01, ss_refine = 0.0, ss_tol = 1e-6;
  ss->add_option("--env", ss_env, "Environment prefix")->required();
  ss_ch.add(ss);
  ss->add_option("--delta", ss_delta, "Target expected initial safety probability")->required();
  ss->add_option("--eta", ss_eta, "Epsilon grid step");
  ss->add_option("--mode", ss_mode, "with-policy | policy-free")->check(CLI::IsMember({"with-policy", "policy-free"}));
  ss->add_option("--policy", ss_policy, "Base policy file (default: the environment controller)");
  ss->add_option("--fallback", ss_fallback, "safest | nearest")->check(CLI::IsMember({"safest", "nearest"}));
  ss->add_option("--refine", ss_refine, "Bisection width after the sweep (0 = off)");
  ss->add_option("--tol", ss_tol, "Value-iteration tolerance")->check(CLI::PositiveNumber);
  ss->add_option("--stop", ss_stop, "Stopping rule: residual | error-estimate")
      ->check(CLI::IsMember({"residual", "error-estimate"}));
  ss->add_option("--out", ss_out, "Shield output file")->required();

  // simulate
  auto* sm = app.add_subcommand("simulate", "Closed-loop simulation over the delayed channel");
  std::string sm_env, sm_policy, sm_shield, sm_log, sm_fallback = "safest";
  ChannelArgs sm_ch;
  std::size_t sm_n = 1000;
  std::uint64_t sm_seed = 1;
  int sm_horizon = 0;
  sm->add_option("--env", sm_env, "Environment prefix")->required();
  sm_ch.add(sm);
  sm->add_option("--controller", sm_policy, "Base policy file (default: the environment controller)");
  sm->add_option("--shield", sm_shield, "Shield file");
  sm->add_option("--fallback", sm_fallback, "safest | nearest")->check(CLI::IsMember({"safest", "nearest"}));
  sm->add_option("--episodes", sm_n, "Number of episodes")->check(CLI::PositiveNumber);
  sm->add_option("--seed", sm_seed, "Seed of episode 0 (episode i uses seed + i)");
  sm->add_option("--horizon", sm_horizon, "Ticks per episode (default: the environment's)");
  sm->add_option("--log", sm_log, "JSON-lines trajectory log");

  // serve
  auto* sv = app.add_subcommand("serve", "Serve operator sessions over WebSocket");
  std::vector<std::string> sv_entries;
  std::string sv_bind = "127.0.0.1";
  unsigned short sv_port = 8765;
  sv->add_option("--shield", sv_entries, "ID=ENV_PREFIX,CHANNEL,SHIELD_FILE with CHANNEL a delay model path or constant:T")
      ->required();
  sv->add_option("--bind", sv_bind, "Listen address");
  sv->add_option("--port", sv_port, "Listen port");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*be) {
      RunManifest man("build-env");
      json cfg = json::object();
      if (!be_config.empty()) {
        man.input(be_config);
        cfg = json::parse(slurp(be_config));
      }
      const auto env = envs::make_env(be_env, cfg);
      const auto report = validate_mdp(env.mdp);
      if (!report.ok()) throw std::runtime_error("built environment does not validate: " + report.issues.front());
      {
        auto f = open_out(mdp_path(be_out));
        write_mdp(f, env.mdp);
      }
      {
        auto f = open_out(meta_path(be_out));
        f << envs::env_metadata(env).dump(2) << '\n';
      }
      man.output(mdp_path(be_out));
      man.output(meta_path(be_out));
      man.parameters() = {{"env", be_env}, {"config", env.config}};
      man.results() = {{"states", env.mdp.state_count()}, {"actions", env.mdp.action_count()}};
      std::printf("%s: %zu states, %zu actions -> %s\n", be_env.c_str(), env.mdp.state_count(), env.mdp.action_count(),
                  mdp_path(be_out).c_str());
      finish(man, manifest.empty() ? default_manifest(be_out) : manifest, as_json);
    } else if (*ed) {
      RunManifest man("estimate-delay-model");
      std::vector<LatencyTrace> traces;
      for (const auto& p : ed_traces) {
        man.input(p);
        std::ifstream in(p);
        if (!in) throw std::runtime_error("cannot read " + p);
        traces.push_back(read_trace_csv(in));
      }
      EstimateOptions opt;
      opt.bin_width_ms = ed_bin;
      if (ed_tau >= 0) opt.tau_max = ed_tau;
      opt.smoothing = ed_smooth;
      const DelayEstimate est = estimate_from_traces(traces, opt);
      {
        auto f = open_out(ed_out);
        write_delay_model(f, est.model);
      }
      man.output(ed_out);
      man.parameters() = {{"bin_width_ms", ed_bin}, {"tau_max", ed_tau}, {"smoothing", ed_smooth}};
      man.results() = {{"tau_max", est.model.tau_max()},
                       {"transitions", est.transitions},
                       {"clamped", est.clamped},
                       {"fallback_rows", est.fallback_rows}};
      std::printf("tau_max %d from %zu transitions (%zu clamped, %zu fallback rows) -> %s\n", est.model.tau_max(),
                  est.transitions, est.clamped, est.fallback_rows.size(), ed_out.c_str());
      finish(man, manifest.empty() ? default_manifest(ed_out) : manifest, as_json);
    } else if (*bd) {
      RunManifest man("build-dcmdp");
      const auto env = load_env(bd_env, man);
      const DcMdp dc = bd_ch.build(env, man);
      const auto seen = dc.reachable(bd_seeds == "all" ? DcMdp::Seeds::all_bases : DcMdp::Seeds::init_support);
      const auto reachable = static_cast<std::size_t>(std::count(seen.begin(), seen.end(), 1));
      man.parameters()["reach_from"] = bd_seeds;
      man.results() = {{"states", dc.state_count()},
                       {"reachable", reachable},
                       {"actions", dc.action_count()},
                       {"digest", model_digest(dc)}};
      std::printf("states %zu (reachable from %s: %zu), actions %zu\ndigest %s\n", dc.state_count(),
                  bd_seeds == "all" ? "every base state" : "the initial support", reachable, dc.action_count(),
                  model_digest(dc).c_str());
      if (!bd_out.empty()) {
        {
          auto f = open_out(bd_out + ".mdp");
          write_mdp(f, dc);
        }
        {
          auto f = open_out(bd_out + ".map");
          write_dc_mapping(f, dc);
        }
        man.output(bd_out + ".mdp");
        man.output(bd_out + ".map");
      }
      finish(man, manifest.empty() ? default_manifest(bd_out) : manifest, as_json);
    } else if (*vf) {
      RunManifest man("verify");
      const auto env = load_env(vf_env, man);
      SolveOptions opt;
      opt.tol = vf_tol;
      opt.stop = parse_stop(vf_stop);
      const bool has_channel = !vf_ch.delay_model.empty() || vf_ch.constant >= 0;
      auto run = [&](const auto& model, std::span<const ActionId> base_policy) {
        const Objective obj = make_objective(model, env.spec);
        const auto vmax = compute_values(model, obj, Mode::max, {}, {}, {}, opt);
        const auto vmin = compute_values(model, obj, Mode::min, {}, {}, {}, opt);
        std::vector<ActionId> lifted(model.state_count());
        for (std::size_t x = 0; x < lifted.size(); ++x) {
          if constexpr (std::is_same_v<std::decay_t<decltype(model)>, DcMdp>)
            lifted[x] = base_policy[model.base_of(static_cast<StateId>(x))];
          else
            lifted[x] = base_policy[x];
        }
        const auto vpi = compute_values(model, obj, Mode::policy, lifted, {}, {}, opt);
        const double emax = expected_initial_value(vmax.values, model.init());
        const double emin = expected_initial_value(vmin.values, model.init());
        const double epi = expected_initial_value(vpi.values, model.init());
        man.results() = {{"spec", to_string(env.spec)},
                         {"states", model.state_count()},
                         {"expected_vmax", emax},
                         {"expected_vmin", emin},
                         {"expected_vpolicy", epi},
                         {"iterations", {vmax.iterations, vmin.iterations, vpi.iterations}},
                         {"residuals", {vmax.residual, vmin.residual, vpi.residual}}};
        std::printf("spec %s, %zu states\nE_Init[Vmax] = %.9f\nE_Init[Vmin] = %.9f\nE_Init[Vpolicy] = %.9f\n",
                    to_string(env.spec), model.state_count(), emax, emin, epi);
      };
      std::vector<ActionId> base_policy(env.controller.actions().begin(), env.controller.actions().end());
      if (!vf_policy.empty()) {
        man.input(vf_policy);
        base_policy = read_policy_file(vf_policy, env.mdp.state_count());
        (void)Policy(env.mdp, base_policy);
      }
      man.parameters() = {{"tol", vf_tol}, {"stop", vf_stop}};
      if (has_channel) run(vf_ch.build(env, man), base_policy);
      else run(env.mdp, base_policy);
      finish(man, manifest, as_json);
    } else if (*ss) {
      RunManifest man("synthesize-shield");
      const auto env = load_env(ss_env, man);
      const DcMdp dc = ss_ch.build(env, man);
      const Objective obj = make_objective(dc, env.spec);
      SynthesisOptions opt;
      opt.delta = ss_delta;
      opt.eta = ss_eta;
      opt.refine = ss_refine;
      opt.mode = ss_mode == "with-policy" ? SynthesisMode::with_policy : SynthesisMode::policy_free;
      opt.fallback = parse_fallback(ss_fallback);
      opt.metric = &env.metric;
      opt.solve.tol = ss_tol;
      opt.solve.stop = parse_stop(ss_stop);
      opt.on_step = [](double eps, double achieved) { spdlog::info("epsilon {:.4f}: {:.9f}", eps, achieved); };
      std::vector<ActionId> lifted;
      if (opt.mode == SynthesisMode::with_policy) {
        std::vector<ActionId> base(env.controller.actions().begin(), env.controller.actions().end());
        if (!ss_policy.empty()) {
          man.input(ss_policy);
          base = read_policy_file(ss_policy, env.mdp.state_count());
        }
        lifted = lift_policy(dc, Policy(env.mdp, base));
      }
      man.parameters() = {{"delta", ss_delta}, {"eta", ss_eta},     {"mode", ss_mode},
                          {"fallback", ss_fallback}, {"refine", ss_refine}, {"tol", ss_tol},
                          {"stop", ss_stop}};
      const SafetyAnalysis an = analyze(dc, obj, opt.solve);
      spdlog::info("E_Init[Vmax] = {:.9f}", an.expected_vmax);
      try {
        SynthesisResult res = synthesize(dc, an, opt, lifted);
        res.shield.meta.digest = model_digest(dc);
        {
          auto f = open_out(ss_out);
          write_shield(f, res.shield);
        }
        man.output(ss_out);
        json sweep = json::array();
        for (const auto& p : res.sweep_log) sweep.push_back({p.epsilon, p.achieved});
        man.results() = {{"epsilon_star", res.epsilon_star}, {"achieved", res.achieved},
                         {"expected_vmax", res.expected_vmax}, {"digest", res.shield.meta.digest},
                         {"sweep", sweep}};
        std::printf("epsilon* = %.6g, achieved %.9f >= delta %.6g (E_Init[Vmax] = %.9f)\n", res.epsilon_star,
                    res.achieved, ss_delta, res.expected_vmax);
      } catch (const InfeasibleTargetError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kInfeasible;
      }
      finish(man, manifest.empty() ? default_manifest(ss_out) : manifest, as_json);
    } else if (*sm) {
      RunManifest man("simulate");
      const auto env = load_env(sm_env, man);
      const DcMdp dc = sm_ch.build(env, man);
      std::optional<Shield> shield;
      if (!sm_shield.empty()) {
        man.input(sm_shield);
        std::ifstream in(sm_shield);
        if (!in) throw std::runtime_error("cannot read " + sm_shield);
        shield = read_shield(in);
        check_binding(*shield, model_digest(dc), dc.state_count());
      }
      std::optional<Policy> base;
      if (!sm_policy.empty()) {
        man.input(sm_policy);
        base.emplace(env.mdp, read_policy_file(sm_policy, env.mdp.state_count()));
      }
      const Policy& controller = base ? *base : env.controller;
      EpisodeOptions eo;
      eo.horizon = sm_horizon;
      eo.fallback = parse_fallback(sm_fallback);
      eo.keep_records = !sm_log.empty();
      man.parameters() = {{"episodes", sm_n},   {"seed", sm_seed}, {"horizon", sm_horizon > 0 ? sm_horizon : env.horizon},
                          {"fallback", sm_fallback}};
      AggregateReport rep;
      const std::string log_path = sm_log.empty() ? std::string() : sm_log;
      std::ofstream log;
      if (!log_path.empty()) log = open_out(log_path);
      rep = run_batch(env, dc, base_controller(controller), shield ? &*shield : nullptr, sm_n, sm_seed, eo,
                      worker_count(), [&](std::size_t i, const EpisodeResult& r) {
                        if (!log.is_open()) return;
                        for (const auto& rec : r.records) log << step_line(i, rec).dump() << '\n';
                        log << episode_line(i, sm_seed + i, r).dump() << '\n';
                      });
      if (log.is_open()) {
        // The summary is folded from the log itself.
        log.close();
        std::ifstream back(log_path);
        rep = aggregate_log(back);
        std::ofstream app_log(log_path, std::ios::app);
        json summary = to_json(rep);
        summary["kind"] = "summary";
        app_log << summary.dump() << '\n';
        app_log.close();
        man.output(log_path);
      }
      man.results() = to_json(rep);
      std::printf("episodes %zu: satisfied %zu (%.4f, 95%% CI [%.4f, %.4f])\n", rep.episodes, rep.satisfied,
                  rep.satisfaction_rate, rep.satisfaction_ci.lo, rep.satisfaction_ci.hi);
      if (env.spec == SpecKind::reach_avoid)
        std::printf("win %zu  loss %zu  draw %zu\n", rep.wins, rep.losses, rep.draws);
      else
        std::printf("safe %zu  violated %zu\n", rep.safe, rep.violated);
      std::printf("mean separation %.4f  interventions/episode %.3f  steps/episode %.2f\n", rep.mean_separation.mean,
                  rep.interventions.mean, rep.steps.mean);
      finish(man, manifest.empty() ? default_manifest(log_path) : manifest, as_json);
    } else if (*sv) {
      teleop::Service service;
      for (const auto& spec : sv_entries) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos) throw CLI::ValidationError("--shield", "expected ID=ENV_PREFIX,CHANNEL,SHIELD_FILE");
        std::vector<std::string> parts;
        std::stringstream rest(spec.substr(eq + 1));
        for (std::string p; std::getline(rest, p, ',');) parts.push_back(p);
        if (parts.size() != 3) throw CLI::ValidationError("--shield", "expected ID=ENV_PREFIX,CHANNEL,SHIELD_FILE");
        RunManifest scratch("serve");
        auto env = std::make_shared<envs::EnvBundle>(load_env(parts[0], scratch));
        ChannelArgs ch;
        if (parts[1].rfind("constant:", 0) == 0) ch.constant = std::stoi(parts[1].substr(9));
        else ch.delay_model = parts[1];
        auto dc = std::make_shared<DcMdp>(ch.build(*env, scratch));
        std::ifstream in(parts[2]);
        if (!in) throw std::runtime_error("cannot read " + parts[2]);
        auto shield = std::make_shared<Shield>(read_shield(in));
        service.add(teleop::make_entry(spec.substr(0, eq), env, dc, shield));
        spdlog::info("loaded shield {}", spec.substr(0, eq));
      }
      teleop::Server server(service, sv_bind, sv_port);
      std::printf("serving on ws://%s:%u (listing at http://%s:%u/api/listing)\n", sv_bind.c_str(), server.port(),
                  sv_bind.c_str(), server.port());
      std::fflush(stdout);
      server.run();
    }
  } catch (const CLI::ValidationError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const InfeasibleTargetError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInfeasible;
  } catch (const ModelMismatchError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kMismatch;
  } catch (const teleop::ProtocolError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.code() == "mismatch" ? kMismatch : kError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kError;
  }
  return kOk;
}
