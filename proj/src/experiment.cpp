#include "vicoop/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace vicoop {

namespace fs = std::filesystem;

std::string_view to_string(BackendKind k) {
  switch (k) {
    case BackendKind::Rule: return "rule";
    case BackendKind::Llm: return "llm";
    case BackendKind::Fixture: return "fixture";
    case BackendKind::Noisy: return "noisy";
  }
  return "?";
}

BackendKind parse_backend(std::string_view text) {
  std::string t(text);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "rule") return BackendKind::Rule;
  if (t == "llm") return BackendKind::Llm;
  if (t == "fixture" || t == "replay") return BackendKind::Fixture;
  if (t == "noisy") return BackendKind::Noisy;
  throw ConfigError("unknown backend: " + std::string(text));
}

BackendFactory::BackendFactory(BackendSpec spec) : spec_(std::move(spec)) {
  switch (spec_.kind) {
    case BackendKind::Fixture: {
      if (spec_.fixture_path.empty()) throw ConfigError("fixture backend needs a fixture file");
      fixture_ = load_fixture(spec_.fixture_path);
      break;
    }
    case BackendKind::Llm:
      client_ = std::make_shared<ChatClient>(spec_.llm);
      if (!spec_.transcript_path.empty()) transcript_ = std::make_shared<TranscriptWriter>(spec_.transcript_path);
      break;
    case BackendKind::Noisy:
      if (!(spec_.noise_slope >= 0.0) || !(spec_.noise_max >= 0.0 && spec_.noise_max <= 1.0)) {
        throw ConfigError("noisy backend needs slope >= 0 and max in [0, 1]");
      }
      break;
    case BackendKind::Rule: break;
  }
}

std::unique_ptr<NegotiatorBackend> BackendFactory::make(std::uint64_t seed) const {
  switch (spec_.kind) {
    case BackendKind::Rule: return std::make_unique<RuleBackend>();
    case BackendKind::Fixture: return std::make_unique<ReplayBackend>(fixture_);
    case BackendKind::Llm: return std::make_unique<LlmBackend>(client_, transcript_);
    case BackendKind::Noisy: return std::make_unique<NoisyRuleBackend>(seed, spec_.noise_slope, spec_.noise_max);
  }
  throw std::logic_error("unhandled backend kind");
}

void preflight(const BackendSpec& spec) {
  if (spec.kind != BackendKind::Llm) return;
  spec.llm.validate();
  const auto& var = spec.llm.api_key_env_var;
  if (var.empty()) return;
  const char* key = std::getenv(var.c_str());
  if (key == nullptr || *key == '\0') throw AuthFailure("API key variable " + var + " is not set", {});
}

void ExperimentSpec::validate() const {
  if (methods.empty()) throw ConfigError("experiment needs at least one method");
  if (vehicle_counts.empty()) throw ConfigError("experiment needs at least one vehicle count");
  if (seeds.empty()) throw ConfigError("experiment needs at least one seed");
  for (int n : vehicle_counts) {
    if (n < 1) throw ConfigError("vehicle counts must be >= 1");
  }
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  config.validate();
}

ExperimentSpec experiment_from_json(const nlohmann::json& j, ExperimentSpec s) {
  if (!j.is_object()) throw ConfigError("experiment spec must be a JSON object");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "methods") {
        s.methods.clear();
        for (const auto& m : v) s.methods.push_back(parse_method(m.get<std::string>()));
      } else if (k == "vehicle_counts") {
        s.vehicle_counts = v.get<std::vector<int>>();
      } else if (k == "seeds") {
        s.seeds = v.get<std::vector<std::uint64_t>>();
      } else if (k == "backend") {
        s.backend.kind = parse_backend(v.get<std::string>());
      } else if (k == "fixture") {
        s.backend.fixture_path = v.get<std::string>();
      } else if (k == "llm") {
        s.backend.llm = llm_config_from_json(v, s.backend.llm);
      } else if (k == "transcript") {
        s.backend.transcript_path = v.get<std::string>();
      } else if (k == "output_dir") {
        s.output_dir = v.get<std::string>();
      } else if (k == "jobs") {
        s.jobs = v.get<int>();
      } else if (k == "write_traces") {
        s.write_traces = v.get<bool>();
      } else if (k == "snapshots") {
        s.snapshots = v.get<bool>();
      } else if (k == "scenario") {
        apply_config_json(s.config, v);
      } else {
        throw ConfigError("unknown experiment key: " + k);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad experiment value: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  s.validate();
  return s;
}

bool ExperimentResult::complete() const {
  return std::all_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.summary.has_value(); });
}

SimTrace run_cell(MethodKind method, int n_vehicles, std::uint64_t seed, const ScenarioConfig& base,
                  NegotiatorBackend& backend, bool snapshots) {
  ScenarioConfig cfg = base;
  cfg.n_vehicles = n_vehicles;
  cfg.seed = seed;
  cfg.validate();
  const auto geometry = build_intersection(cfg);
  const auto scenario = generate_scenario(static_cast<std::size_t>(n_vehicles), seed, cfg, geometry);
  RunOptions options;
  options.snapshots = snapshots;
  options.negotiation.max_renegotiations = cfg.max_renegotiations;
  return run(method, scenario, backend, cfg, seed, options);
}

std::string trace_file_name(MethodKind method, int n_vehicles, std::uint64_t seed) {
  return fmt::format("{}_n{}_s{}.jsonl", to_string(method), n_vehicles, seed);
}

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  const BackendFactory factory(spec.backend);

  ExperimentResult result;
  for (auto m : spec.methods) {
    for (int n : spec.vehicle_counts) {
      for (auto seed : spec.seeds) result.cells.push_back({m, n, seed, std::nullopt, {}});
    }
  }

  const fs::path out_dir = spec.output_dir;
  if (!spec.output_dir.empty()) {
    fs::create_directories(out_dir);
    if (spec.write_traces) fs::create_directories(out_dir / "traces");
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (auto k = next.fetch_add(1); k < result.cells.size(); k = next.fetch_add(1)) {
      auto& cell = result.cells[k];
      try {
        auto backend = factory.make(cell.seed);
        const auto trace = run_cell(cell.method, cell.n_vehicles, cell.seed, spec.config, *backend, spec.snapshots);
        cell.summary = summarize(trace);
        if (!spec.output_dir.empty() && spec.write_traces) {
          std::ofstream out(out_dir / "traces" / trace_file_name(cell.method, cell.n_vehicles, cell.seed));
          write_jsonl(trace, out);
        }
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
    }
  };
  const auto threads = static_cast<std::size_t>(std::max(1, spec.jobs));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(threads, result.cells.size()); ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<RunSummary> summaries;
  for (const auto& c : result.cells) {
    if (c.summary) summaries.push_back(*c.summary);
  }
  if (!summaries.empty()) {
    result.aggregate = aggregate(summaries);
    result.rounds = rounds_by_group_size(summaries);
  }

  if (!spec.output_dir.empty()) {
    std::ofstream summary(out_dir / "summary.csv");
    write_summary_header(summary);
    for (const auto& s : summaries) write_summary_row(summary, s);
    std::ofstream agg(out_dir / "aggregate.csv");
    write_aggregate_csv(agg, result.aggregate);
    std::ofstream rounds(out_dir / "rounds.csv");
    write_rounds_csv(rounds, result.rounds);
    std::ofstream errors(out_dir / "errors.csv");
    errors << "method,n_vehicles,seed,error\n";
    for (const auto& c : result.cells) {
      if (!c.summary) errors << fmt::format("{},{},{},\"{}\"\n", to_string(c.method), c.n_vehicles, c.seed, c.error);
    }
  }
  return result;
}

std::string export_artifact(const std::vector<nlohmann::json>& records, std::string_view what,
                            const std::string& output_dir) {
  if (what != "influence" && what != "groups" && what != "negotiation" && what != "schedule") {
    throw ConfigError("unknown export: " + std::string(what) + " (influence, groups, negotiation, schedule)");
  }
  const fs::path dir = output_dir.empty() ? fs::path(".") : fs::path(output_dir);
  fs::create_directories(dir);
  const auto path = dir / (std::string(what) + (what == "negotiation" ? ".jsonl" : ".csv"));
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  auto event_of = [](const nlohmann::json& r) { return r.value("event", std::string()); };

  if (what == "influence") {
    out << "t,source,target,direct,cumulative\n";
    for (const auto& r : records) {
      if (event_of(r) != "influence" || !r.contains("direct")) continue;
      const auto& ids = r["ids"];
      for (std::size_t i = 0; i < ids.size(); ++i) {
        for (std::size_t j = 0; j < ids.size(); ++j) {
          if (i == j) continue;
          out << fmt::format("{:.2f},{},{},{:.9g},{:.9g}\n", r["t"].get<double>(), ids[i].get<std::int64_t>(),
                             ids[j].get<std::int64_t>(), r["direct"][i][j].get<double>(),
                             r["cumulative"][i][j].get<double>());
        }
      }
    }
  } else if (what == "groups") {
    out << "t,group,vehicles\n";
    for (const auto& r : records) {
      if (event_of(r) != "group_partition") continue;
      const auto& groups = r["groups"];
      for (std::size_t g = 0; g < groups.size(); ++g) {
        std::string ids;
        for (const auto& id : groups[g]) {
          if (!ids.empty()) ids += ' ';
          ids += std::to_string(id.get<std::int64_t>());
        }
        out << fmt::format("{:.2f},{},{}\n", r["t"].get<double>(), g, ids);
      }
    }
  } else if (what == "negotiation") {
    for (const auto& r : records) {
      const auto ev = event_of(r);
      if (ev == "negotiation_round" || ev == "order_committed" || ev == "fallback_used") out << r.dump() << '\n';
    }
  } else {
    out << "t,vehicle,conflict_point,target_time,pinned\n";
    for (const auto& r : records) {
      if (event_of(r) != "schedule") continue;
      for (const auto& e : r["entries"]) {
        out << fmt::format("{:.2f},{},{},{:.6f},{}\n", r["t"].get<double>(), e["id"].get<std::int64_t>(),
                           e["cp"].get<int>(), e["target"].get<double>(), e["pinned"].get<bool>() ? 1 : 0);
      }
    }
  }
  return path.string();
}

}  // namespace vicoop
