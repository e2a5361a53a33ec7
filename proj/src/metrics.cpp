#include "vicoop/metrics.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <ostream>
#include <tuple>

#include <fmt/format.h>
#include <fmt/ostream.h>

namespace vicoop {

namespace {

const Crossing* crossing_of(const SimTrace& trace, VehicleId v, int cp) {
  for (const auto& c : trace.crossings) {
    if (c.vehicle == v && c.conflict_point == cp) return &c;
  }
  return nullptr;
}

double length_of(const SimTrace& trace, VehicleId v) {
  const auto* info = trace.vehicle(v);
  return info ? info->length : trace.config.vehicle_length;
}

std::string num(double x) { return fmt::format("{:.4f}", x); }

double sorted_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return std::accumulate(v.begin(), v.end(), 0.0);
}

double mean_of(std::vector<double> v) { return v.empty() ? 0.0 : sorted_sum(v) / static_cast<double>(v.size()); }

void write_stats(std::ostream& out, const Stats& s) {
  if (s.count == 0) {
    out << ",,";
    return;
  }
  out << num(s.mean) << ',' << num(s.min) << ',' << num(s.max);
}

}  // namespace

std::optional<double> post_encroachment_time(const SimTrace& trace, VehicleId a, VehicleId b, int conflict_point,
                                             PetMode mode) {
  const auto* ca = crossing_of(trace, a, conflict_point);
  const auto* cb = crossing_of(trace, b, conflict_point);
  if (!ca || !cb) return std::nullopt;
  const Crossing* first = ca;
  const Crossing* second = cb;
  if (std::tie(cb->time, cb->vehicle) < std::tie(ca->time, ca->vehicle)) std::swap(first, second);
  double clear = first->time;
  if (mode == PetMode::RearToFront) clear += length_of(trace, first->vehicle) / std::max(first->speed, 0.1);
  return std::max(0.0, second->time - clear);
}

std::vector<PetRecord> all_pets(const SimTrace& trace, PetMode mode) {
  std::vector<const Crossing*> sorted;
  for (const auto& c : trace.crossings) sorted.push_back(&c);
  std::stable_sort(sorted.begin(), sorted.end(), [](const Crossing* x, const Crossing* y) {
    return std::tie(x->time, x->vehicle) < std::tie(y->time, y->vehicle);
  });
  std::vector<PetRecord> out;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    for (std::size_t j = i + 1; j < sorted.size(); ++j) {
      const auto& x = *sorted[i];
      const auto& y = *sorted[j];
      if (x.conflict_point != y.conflict_point || x.vehicle == y.vehicle) continue;
      const auto pet = post_encroachment_time(trace, x.vehicle, y.vehicle, x.conflict_point, mode);
      if (pet) out.push_back({x.vehicle, y.vehicle, x.conflict_point, *pet});
    }
  }
  return out;
}

DelayRecord delay(const SimTrace& trace, VehicleId vehicle) {
  const auto* info = trace.vehicle(vehicle);
  if (!info) throw std::out_of_range("unknown vehicle " + to_string(vehicle));
  for (const auto& c : trace.completions) {
    if (c.vehicle == vehicle) return {vehicle, std::max(0.0, c.time - info->free_flow_time), false};
  }
  return {vehicle, std::max(0.0, trace.config.t_limit - info->free_flow_time), true};
}

RunSummary summarize(const SimTrace& trace) {
  RunSummary s;
  s.method = std::string(to_string(trace.method));
  s.n_vehicles = trace.vehicles.size();
  s.seed = trace.seed;
  s.collided = !trace.collisions.empty();
  for (const auto& p : all_pets(trace, trace.config.pet_mode)) s.pet_values.push_back(p.pet);
  if (!s.pet_values.empty()) s.min_pet = *std::min_element(s.pet_values.begin(), s.pet_values.end());

  std::vector<double> speeds;
  for (const auto& v : trace.vehicles) {
    const auto d = delay(trace, v.id);
    s.delays.push_back(d.delay);
    if (d.censored) ++s.censored;
    double on_road = trace.end_time;
    for (const auto& c : trace.completions) {
      if (c.vehicle == v.id) on_road = c.time;
    }
    if (on_road > 0.0) speeds.push_back(v.distance_travelled / on_road);
  }
  s.avg_speed = mean_of(speeds);
  s.mean_delay = mean_of(s.delays);
  for (const auto& e : trace.episodes) {
    s.negotiation_rounds.push_back(e.rounds);
    s.rounds_total += e.rounds;
  }
  s.episodes = trace.episodes;
  s.fallback_count = trace.fallback_count();
  return s;
}

void write_summary_header(std::ostream& out) {
  out << "method,n_vehicles,seed,collided,min_pet,mean_speed,mean_delay,rounds_total,fallbacks\n";
}

void write_summary_row(std::ostream& out, const RunSummary& s) {
  fmt::print(out, "{},{},{},{},{},{},{},{},{}\n", s.method, s.n_vehicles, s.seed, s.collided ? 1 : 0,
             s.min_pet ? num(*s.min_pet) : std::string(), num(s.avg_speed), num(s.mean_delay), s.rounds_total,
             s.fallback_count);
}

Stats stats_of(std::span<const double> values) {
  Stats s;
  s.count = values.size();
  if (values.empty()) return s;
  std::vector<double> v(values.begin(), values.end());
  s.mean = mean_of(v);
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  s.min = *lo;
  s.max = *hi;
  return s;
}

std::vector<AggregateRow> aggregate(std::span<const RunSummary> runs) {
  if (runs.empty()) throw std::invalid_argument("aggregate needs at least one run");
  std::map<std::pair<std::string, std::size_t>, std::vector<const RunSummary*>> cells;
  for (const auto& r : runs) cells[{r.method, r.n_vehicles}].push_back(&r);

  auto method_rank = [](const std::string& m) {
    try {
      return static_cast<int>(parse_method(m));
    } catch (const std::exception&) {
      return 99;
    }
  };
  std::vector<AggregateRow> rows;
  for (const auto& [key, members] : cells) {
    AggregateRow row;
    row.method = key.first;
    row.n_vehicles = key.second;
    row.runs = members.size();
    std::vector<double> pets, speeds, delays, rounds;
    for (const auto* r : members) {
      if (r->collided) ++row.collided_runs;
      pets.insert(pets.end(), r->pet_values.begin(), r->pet_values.end());
      speeds.push_back(r->avg_speed);
      delays.push_back(r->mean_delay);
      for (int k : r->negotiation_rounds) rounds.push_back(k);
      row.fallbacks += r->fallback_count;
    }
    row.collision_rate = static_cast<double>(row.collided_runs) / static_cast<double>(row.runs);
    row.pet = stats_of(pets);
    row.mean_speed = mean_of(speeds);
    row.mean_delay = mean_of(delays);
    row.rounds = stats_of(rounds);
    rows.push_back(std::move(row));
  }
  std::sort(rows.begin(), rows.end(), [&](const AggregateRow& a, const AggregateRow& b) {
    return std::make_tuple(method_rank(a.method), a.method, a.n_vehicles) <
           std::make_tuple(method_rank(b.method), b.method, b.n_vehicles);
  });
  return rows;
}

void write_aggregate_csv(std::ostream& out, std::span<const AggregateRow> rows) {
  out << "method,n_vehicles,runs,collided_runs,collision_rate,pet_mean,pet_min,pet_max,mean_speed,mean_delay,"
         "rounds_mean,rounds_min,rounds_max,fallbacks\n";
  for (const auto& r : rows) {
    fmt::print(out, "{},{},{},{},{},", r.method, r.n_vehicles, r.runs, r.collided_runs, num(r.collision_rate));
    write_stats(out, r.pet);
    fmt::print(out, ",{},{},", num(r.mean_speed), num(r.mean_delay));
    write_stats(out, r.rounds);
    fmt::print(out, ",{}\n", r.fallbacks);
  }
}

std::vector<RoundsRow> rounds_by_group_size(std::span<const RunSummary> runs) {
  std::map<std::tuple<int, std::string, std::string, std::size_t>, std::vector<double>> cells;
  for (const auto& r : runs) {
    int rank = 99;
    try {
      rank = static_cast<int>(parse_method(r.method));
    } catch (const std::exception&) {
    }
    for (const auto& e : r.episodes) cells[{rank, r.method, e.scope, e.group_size}].push_back(e.rounds);
  }
  std::vector<RoundsRow> rows;
  for (const auto& [key, values] : cells) {
    rows.push_back({std::get<1>(key), std::get<2>(key), std::get<3>(key), stats_of(values)});
  }
  return rows;
}

void write_rounds_csv(std::ostream& out, std::span<const RoundsRow> rows) {
  out << "method,scope,group_size,episodes,rounds_mean,rounds_min,rounds_max\n";
  for (const auto& r : rows) {
    fmt::print(out, "{},{},{},{},", r.method, r.scope, r.group_size, r.rounds.count);
    write_stats(out, r.rounds);
    out << '\n';
  }
}

}  // namespace vicoop
