#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vicoop/core.hpp"
#include "vicoop/llm_backend.hpp"
#include "vicoop/metrics.hpp"
#include "vicoop/sim.hpp"

namespace vicoop {

enum class BackendKind { Rule, Llm, Fixture, Noisy };
std::string_view to_string(BackendKind k);
BackendKind parse_backend(std::string_view text);

struct BackendSpec {
  BackendKind kind = BackendKind::Rule;
  std::string fixture_path;        // fixture
  LlmConfig llm;                   // llm
  std::string transcript_path;     // llm: optional JSONL transcript of prompts and replies
  double noise_slope = 0.04;       // noisy
  double noise_max = 0.95;         // noisy
};

// Builds one backend per run. Fixture files are read once; the LLM client
// (and its rate limiter) is shared by every backend it makes.
class BackendFactory {
 public:
  explicit BackendFactory(BackendSpec spec);
  std::unique_ptr<NegotiatorBackend> make(std::uint64_t seed) const;
  [[nodiscard]] const BackendSpec& spec() const { return spec_; }

 private:
  BackendSpec spec_;
  std::map<std::string, std::string> fixture_;
  std::shared_ptr<ChatClient> client_;
  std::shared_ptr<TranscriptWriter> transcript_;
};

// Fails with AuthFailure when the llm backend has no API key available.
void preflight(const BackendSpec& spec);

struct ExperimentSpec {
  std::vector<MethodKind> methods{MethodKind::IVD, MethodKind::IGN, MethodKind::IIGN};
  std::vector<int> vehicle_counts{2, 4, 8};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  BackendSpec backend;
  ScenarioConfig config;  // n_vehicles and seed are overridden per cell
  std::string output_dir;
  int jobs = 1;
  bool write_traces = false;
  bool snapshots = false;

  void validate() const;
};

// Keys: methods, vehicle_counts, seeds, backend, fixture, llm, output_dir,
// jobs, write_traces, snapshots, scenario (ScenarioConfig overrides).
ExperimentSpec experiment_from_json(const nlohmann::json& j, ExperimentSpec base = {});

struct CellResult {
  MethodKind method = MethodKind::IIGN;
  int n_vehicles = 0;
  std::uint64_t seed = 0;
  std::optional<RunSummary> summary;
  std::string error;
};

struct ExperimentResult {
  std::vector<CellResult> cells;  // grid order: method, count, seed
  std::vector<AggregateRow> aggregate;
  std::vector<RoundsRow> rounds;

  [[nodiscard]] bool complete() const;
};

// Scenario for one cell, then the closed loop.
SimTrace run_cell(MethodKind method, int n_vehicles, std::uint64_t seed, const ScenarioConfig& base,
                  NegotiatorBackend& backend, bool snapshots);

// Runs the grid on up to `jobs` threads. Outputs are independent of `jobs`.
// With output_dir set, writes summary.csv, aggregate.csv, rounds.csv and
// (write_traces) traces/<method>_n<count>_s<seed>.jsonl.
ExperimentResult run_experiment(const ExperimentSpec& spec);

std::string trace_file_name(MethodKind method, int n_vehicles, std::uint64_t seed);

// Intermediate artifacts from trace records: "influence" (CSV, one row per
// ordered pair and replan tick), "groups" (CSV), "negotiation" (JSONL
// transcript) or "schedule" (CSV). Returns the written path; unknown `what`
// throws ConfigError.
std::string export_artifact(const std::vector<nlohmann::json>& records, std::string_view what,
                            const std::string& output_dir);

}  // namespace vicoop
