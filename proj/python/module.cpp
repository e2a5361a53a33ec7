#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "vicoop/experiment.hpp"
#include "vicoop/grouping.hpp"
#include "vicoop/influence.hpp"
#include "vicoop/planning.hpp"

namespace py = pybind11;
using namespace vicoop;

namespace {

// Python objects cross the boundary as JSON text.
nlohmann::json to_json(const py::handle& obj) {
  if (obj.is_none()) return nlohmann::json::object();
  const auto text = py::module_::import("json").attr("dumps")(obj).cast<std::string>();
  return nlohmann::json::parse(text);
}

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

ScenarioConfig config_of(const py::handle& obj) { return config_from_json(to_json(obj)); }

VehicleState state_of(const py::dict& d) {
  VehicleState s;
  s.id = VehicleId{d["id"].cast<std::int64_t>()};
  const auto p = d["position"].cast<std::pair<double, double>>();
  const auto v = d["velocity"].cast<std::pair<double, double>>();
  s.position = {p.first, p.second};
  s.velocity = {v.first, v.second};
  if (d.contains("route_id")) s.route_id = d["route_id"].cast<int>();
  if (d.contains("arc_position")) s.arc_position = d["arc_position"].cast<double>();
  if (d.contains("length")) s.length = d["length"].cast<double>();
  return s;
}

py::dict state_dict(const VehicleState& s) {
  py::dict d;
  d["id"] = s.id.value;
  d["position"] = py::make_tuple(s.position.x, s.position.y);
  d["velocity"] = py::make_tuple(s.velocity.x, s.velocity.y);
  d["route_id"] = s.route_id;
  d["arc_position"] = s.arc_position;
  d["length"] = s.length;
  return d;
}

py::dict summary_dict(const RunSummary& s) {
  py::dict d;
  d["method"] = s.method;
  d["n_vehicles"] = s.n_vehicles;
  d["seed"] = s.seed;
  d["collided"] = s.collided;
  d["pet_values"] = s.pet_values;
  d["min_pet"] = s.min_pet ? py::object(py::float_(*s.min_pet)) : py::object(py::none());
  d["mean_speed"] = s.avg_speed;
  d["delays"] = s.delays;
  d["mean_delay"] = s.mean_delay;
  d["censored"] = s.censored;
  d["negotiation_rounds"] = s.negotiation_rounds;
  d["rounds_total"] = s.rounds_total;
  d["fallbacks"] = s.fallback_count;
  return d;
}

std::vector<std::vector<std::size_t>> divide(const Matrix& f, std::uint64_t seed, const std::string& motif,
                                             int k_max, double s_min) {
  auto rng = seeded_rng(seed, "grouping");
  return divide_groups(f, {motif, k_max, s_min, false}, rng).groups;
}

py::dict run_one(const std::string& method, int n_vehicles, std::uint64_t seed, const py::object& config,
                 const std::string& backend, const std::string& fixture, bool snapshots) {
  const auto cfg = config_of(config);
  BackendSpec spec;
  spec.kind = parse_backend(backend);
  spec.fixture_path = fixture;
  SimTrace trace;
  {
    py::gil_scoped_release release;
    const BackendFactory factory(spec);
    auto b = factory.make(seed);
    trace = run_cell(parse_method(method), n_vehicles, seed, cfg, *b, snapshots);
  }
  std::ostringstream jsonl;
  write_jsonl(trace, jsonl);
  py::dict out;
  out["summary"] = summary_dict(summarize(trace));
  out["trace"] = jsonl.str();
  return out;
}

py::dict experiment(const py::object& spec_obj) {
  const auto spec = experiment_from_json(to_json(spec_obj));
  ExperimentResult r;
  {
    py::gil_scoped_release release;
    r = run_experiment(spec);
  }
  py::list runs;
  for (const auto& c : r.cells) {
    if (c.summary) runs.append(summary_dict(*c.summary));
  }
  py::list agg;
  for (const auto& a : r.aggregate) {
    py::dict d;
    d["method"] = a.method;
    d["n_vehicles"] = a.n_vehicles;
    d["runs"] = a.runs;
    d["collided_runs"] = a.collided_runs;
    d["collision_rate"] = a.collision_rate;
    d["mean_speed"] = a.mean_speed;
    d["mean_delay"] = a.mean_delay;
    d["rounds_mean"] = a.rounds.mean;
    d["rounds_max"] = a.rounds.max;
    agg.append(d);
  }
  py::list errors;
  for (const auto& c : r.cells) {
    if (!c.summary) errors.append(py::make_tuple(std::string(to_string(c.method)), c.n_vehicles, c.seed, c.error));
  }
  py::dict out;
  out["runs"] = runs;
  out["aggregate"] = agg;
  out["errors"] = errors;
  return out;
}

}  // namespace

PYBIND11_MODULE(_vicoop, m) {
  m.doc() = "Influence, grouping, negotiation and simulation core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ReplyError>(m, "ReplyError", PyExc_ValueError);
  py::register_exception<InfeasibleTarget>(m, "InfeasibleTarget", PyExc_RuntimeError);

  m.def("default_config", [] { return to_py(config_to_json(ScenarioConfig{})); });

  m.def(
      "direct_influence",
      [](std::pair<double, double> xi, std::pair<double, double> vi, std::pair<double, double> xj,
         std::pair<double, double> vj) {
        return direct_influence({xi.first, xi.second}, {vi.first, vi.second}, {xj.first, xj.second},
                                {vj.first, vj.second});
      },
      py::arg("xi"), py::arg("vi"), py::arg("xj"), py::arg("vj"));
  m.def("normalize", &normalize, py::arg("direct"));
  m.def("cumulative_influence_matrix", &cumulative_influence_matrix, py::arg("normalized"));
  m.def(
      "compute_influence",
      [](const std::vector<py::dict>& states, bool augmentation, double gap) {
        std::vector<VehicleState> s;
        for (const auto& d : states) s.push_back(state_of(d));
        const auto r = compute_influence(s, {augmentation, gap});
        return py::make_tuple(r.direct, r.normalized, r.cumulative);
      },
      py::arg("states"), py::arg("following_augmentation") = true, py::arg("following_gap") = 25.0);

  m.def("motif_names", [] {
    std::vector<std::string> names;
    for (const auto& mo : motif_catalog()) names.push_back(mo.name);
    return names;
  });
  m.def(
      "motif_adjacency", [](const Matrix& w, const std::string& motif) { return motif_adjacency(w, motif_by_name(motif)); },
      py::arg("weights"), py::arg("motif") = "Ms");
  m.def("divide_groups", &divide, py::arg("cumulative"), py::arg("seed") = 0, py::arg("motif") = "Ms",
        py::arg("k_max") = 6, py::arg("s_min") = 0.25);

  m.def("earliest_arrival", py::overload_cast<double, double, double, double>(&earliest_arrival), py::arg("speed"),
        py::arg("distance"), py::arg("a_max"), py::arg("v_max"));
  m.def(
      "schedule_times",
      [](const std::vector<double>& arrivals, double dt_safe) { return schedule_times(arrivals, dt_safe); },
      py::arg("arrivals"), py::arg("dt_safe"));
  m.def(
      "acceleration_command",
      [](double speed, double distance, double tau, double a_min, double a_max, double v_max, double dt) {
        return acceleration_command(speed, distance, tau, {a_min, a_max, v_max}, dt);
      },
      py::arg("speed"), py::arg("distance"), py::arg("time_to_target"), py::arg("a_min") = -4.5,
      py::arg("a_max") = 2.5, py::arg("v_max") = 10.0, py::arg("dt") = 0.1);

  m.def(
      "generate_scenario",
      [](int n, std::uint64_t seed, const py::object& config) {
        const auto cfg = config_of(config);
        const auto geometry = build_intersection(cfg);
        py::list out;
        for (const auto& s : generate_scenario(static_cast<std::size_t>(n), seed, cfg, geometry)) {
          out.append(state_dict(s));
        }
        return out;
      },
      py::arg("n"), py::arg("seed"), py::arg("config") = py::none());

  m.def("run", &run_one, py::arg("method"), py::arg("n_vehicles"), py::arg("seed"), py::arg("config") = py::none(),
        py::arg("backend") = "rule", py::arg("fixture") = "", py::arg("snapshots") = false);
  m.def("run_experiment", &experiment, py::arg("spec"));

  m.def(
      "parse_reply",
      [](const std::string& raw, const std::string& schema, const std::vector<std::int64_t>& known) {
        std::vector<VehicleId> ids;
        for (auto k : known) ids.emplace_back(k);
        const auto r = parse_reply(raw, schema, ids);
        py::list items;
        for (const auto& p : r.precedences) items.append(py::make_tuple(p.first.value, p.second.value, p.rationale));
        for (const auto& e : r.order) items.append(py::make_tuple(e.id.value, e.group));
        return items;
      },
      py::arg("raw"), py::arg("schema_id"), py::arg("known_ids"));
}
