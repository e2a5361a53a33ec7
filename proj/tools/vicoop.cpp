#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "vicoop/experiment.hpp"

namespace {

using namespace vicoop;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitBackend = 3;

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError(path + " is not valid JSON");
  return j;
}

// "key=value" pairs; values are JSON when they parse as JSON, strings otherwise.
nlohmann::json overrides_json(const std::vector<std::string>& sets) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got " + s);
    const auto key = s.substr(0, eq);
    const auto text = s.substr(eq + 1);
    auto value = nlohmann::json::parse(text, nullptr, false);
    j[key] = value.is_discarded() ? nlohmann::json(text) : value;
  }
  return j;
}

struct BackendFlags {
  std::string backend = "rule";
  std::string fixture;
  std::string llm_config;
  std::string transcript;
  bool allow_fallback = false;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--backend", backend, "Negotiation backend: rule, llm, fixture or noisy");
    cmd->add_option("--fixture", fixture, "JSONL replies for the fixture backend");
    cmd->add_option("--llm-config", llm_config, "JSON file with endpoint_url, model_name, api_key_env_var, ...");
    cmd->add_option("--transcript", transcript, "Append llm prompts and replies to this JSONL file");
    cmd->add_flag("--allow-fallback", allow_fallback, "Run with the rule fallback when the llm backend is unusable");
  }

  [[nodiscard]] BackendSpec spec(BackendSpec base = {}) const {
    base.kind = parse_backend(backend);
    if (!fixture.empty()) base.fixture_path = fixture;
    if (!llm_config.empty()) base.llm = llm_config_from_json(read_json_file(llm_config), base.llm);
    if (!transcript.empty()) base.transcript_path = transcript;
    return base;
  }
};

// AuthFailure is fatal unless the caller opted into the rule fallback.
int check_backend(const BackendSpec& spec, bool allow_fallback) {
  try {
    preflight(spec);
  } catch (const AuthFailure& e) {
    if (!allow_fallback) {
      std::cerr << "error: " << e.what() << '\n';
      return kExitBackend;
    }
    std::cerr << "warning: " << e.what() << "; negotiation will fall back to the rule order\n";
  }
  return kExitOk;
}

struct RunFlags {
  std::string config;
  std::string method = "IIGN";
  std::optional<int> n_vehicles;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::string out = ".";
  bool no_snapshots = false;
  BackendFlags backend;
};

int cmd_run(const RunFlags& f) {
  ScenarioConfig cfg;
  BackendSpec bspec;
  MethodKind method{};
  try {
    if (!f.config.empty()) cfg = config_from_json(read_json_file(f.config));
    apply_config_json(cfg, overrides_json(f.sets));
    if (f.n_vehicles) cfg.n_vehicles = *f.n_vehicles;
    if (f.seed) cfg.seed = *f.seed;
    cfg.validate();
    method = parse_method(f.method);
    bspec = f.backend.spec();
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  if (int rc = check_backend(bspec, f.backend.allow_fallback); rc != kExitOk) return rc;

  SimTrace trace;
  try {
    const BackendFactory factory(bspec);
    auto backend = factory.make(cfg.seed);
    trace = run_cell(method, cfg.n_vehicles, cfg.seed, cfg, *backend, !f.no_snapshots);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const PlacementFailure& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitBackend;
  }

  fs::create_directories(f.out);
  const auto stem = fs::path(trace_file_name(method, cfg.n_vehicles, cfg.seed)).stem().string();
  const auto trace_path = fs::path(f.out) / (stem + ".jsonl");
  const auto summary_path = fs::path(f.out) / (stem + "_summary.csv");
  {
    std::ofstream out(trace_path);
    write_jsonl(trace, out);
  }
  const auto summary = summarize(trace);
  {
    std::ofstream out(summary_path);
    write_summary_header(out);
    write_summary_row(out, summary);
  }
  std::cout << fmt::format("{} n={} seed={}: collided={} completed={}/{} fallbacks={}\n", to_string(method),
                           cfg.n_vehicles, cfg.seed, summary.collided ? "yes" : "no", trace.completions.size(),
                           trace.vehicles.size(), summary.fallback_count);
  std::cout << trace_path.string() << '\n' << summary_path.string() << '\n';
  return kExitOk;
}

struct ExperimentFlags {
  std::string spec;
  std::vector<std::string> methods;
  std::vector<int> counts;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> sets;
  std::string out;
  int jobs = 0;
  bool traces = false;
  bool snapshots = false;
  BackendFlags backend;
  bool backend_given = false;
};

int cmd_experiment(const ExperimentFlags& f) {
  ExperimentSpec spec;
  try {
    if (!f.spec.empty()) spec = experiment_from_json(read_json_file(f.spec));
    if (!f.methods.empty()) {
      spec.methods.clear();
      for (const auto& m : f.methods) spec.methods.push_back(parse_method(m));
    }
    if (!f.counts.empty()) spec.vehicle_counts = f.counts;
    if (!f.seeds.empty()) spec.seeds = f.seeds;
    apply_config_json(spec.config, overrides_json(f.sets));
    if (f.backend_given || !f.backend.fixture.empty() || !f.backend.llm_config.empty()) {
      spec.backend = f.backend.spec(spec.backend);
    }
    if (!f.out.empty()) spec.output_dir = f.out;
    if (spec.output_dir.empty()) throw ConfigError("experiment needs --out or output_dir");
    spec.jobs = f.jobs > 0 ? f.jobs : static_cast<int>(std::max(1U, std::thread::hardware_concurrency()));
    if (f.traces) spec.write_traces = true;
    if (f.snapshots) spec.snapshots = true;
    spec.validate();
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  if (int rc = check_backend(spec.backend, f.backend.allow_fallback); rc != kExitOk) return rc;

  ExperimentResult result;
  try {
    result = run_experiment(spec);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  std::cout << fmt::format("{:<6} {:>3} {:>5} {:>9} {:>8} {:>10} {:>11}\n", "method", "n", "runs", "collided",
                           "min_pet", "mean_speed", "mean_delay");
  for (const auto& r : result.aggregate) {
    std::cout << fmt::format("{:<6} {:>3} {:>5} {:>9} {:>8} {:>10.3f} {:>11.3f}\n", r.method, r.n_vehicles, r.runs,
                             r.collided_runs, r.pet.count ? fmt::format("{:.3f}", r.pet.min) : "-", r.mean_speed,
                             r.mean_delay);
  }
  int failed = 0;
  for (const auto& c : result.cells) {
    if (c.summary) continue;
    ++failed;
    std::cerr << fmt::format("cell {} n={} seed={} failed: {}\n", to_string(c.method), c.n_vehicles, c.seed,
                             c.error);
  }
  std::cout << fmt::format("{} runs, {} failed; outputs in {}\n", result.cells.size(), failed, spec.output_dir);
  return failed == 0 ? kExitOk : kExitBackend;
}

int cmd_export(const std::string& trace_path, const std::string& what, const std::string& out) {
  try {
    if (!fs::exists(trace_path)) throw ConfigError("no such trace: " + trace_path);
    const auto records = read_jsonl(trace_path);
    std::cout << export_artifact(records, what, out) << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cooperative pass-order negotiation at unsignalized intersections"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "vicoop 0.1.0");

  RunFlags run_flags;
  auto* run_cmd = app.add_subcommand("run", "Simulate one scenario and write its trace and summary");
  run_cmd->add_option("--config", run_flags.config, "Scenario config JSON");
  run_cmd->add_option("--method", run_flags.method, "IVD, IGN or IIGN");
  run_cmd->add_option("--n-vehicles", run_flags.n_vehicles, "Number of vehicles");
  run_cmd->add_option("--seed", run_flags.seed, "Scenario seed");
  run_cmd->add_option("--set", run_flags.sets, "Config override key=value (repeatable)");
  run_cmd->add_option("--out", run_flags.out, "Output directory");
  run_cmd->add_flag("--no-snapshots", run_flags.no_snapshots, "Leave per-step snapshots out of the trace");
  run_flags.backend.add_to(run_cmd);

  ExperimentFlags exp_flags;
  auto* exp_cmd = app.add_subcommand("experiment", "Run a grid of methods, vehicle counts and seeds");
  exp_cmd->add_option("--spec", exp_flags.spec, "Experiment spec JSON");
  exp_cmd->add_option("--methods", exp_flags.methods, "Methods")->delimiter(',');
  exp_cmd->add_option("--counts", exp_flags.counts, "Vehicle counts")->delimiter(',');
  exp_cmd->add_option("--seeds", exp_flags.seeds, "Seeds")->delimiter(',');
  exp_cmd->add_option("--set", exp_flags.sets, "Scenario override key=value (repeatable)");
  exp_cmd->add_option("--out", exp_flags.out, "Output directory");
  exp_cmd->add_option("--jobs", exp_flags.jobs, "Concurrent runs (default: hardware threads)");
  exp_cmd->add_flag("--traces", exp_flags.traces, "Write one JSONL trace per run");
  exp_cmd->add_flag("--snapshots", exp_flags.snapshots, "Include per-step snapshots in traces");
  exp_flags.backend.add_to(exp_cmd);

  std::string trace_path, what, export_out = ".";
  auto* export_cmd = app.add_subcommand("export", "Extract intermediate artifacts from a trace");
  export_cmd->add_option("--trace", trace_path, "Trace JSONL")->required();
  export_cmd->add_option("--what", what, "influence, groups, negotiation or schedule")->required();
  export_cmd->add_option("--out", export_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }
  exp_flags.backend_given = exp_cmd->count("--backend") > 0;

  if (*run_cmd) return cmd_run(run_flags);
  if (*exp_cmd) return cmd_experiment(exp_flags);
  return cmd_export(trace_path, what, export_out);
}
