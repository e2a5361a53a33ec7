"""Cooperative pass-order negotiation at unsignalized intersections."""

import json

from ._vicoop import (
    ConfigError,
    InfeasibleTarget,
    ReplyError,
    acceleration_command,
    compute_influence,
    cumulative_influence_matrix,
    default_config,
    direct_influence,
    divide_groups,
    earliest_arrival,
    generate_scenario,
    motif_adjacency,
    motif_names,
    normalize,
    parse_reply,
    run,
    run_experiment,
    schedule_times,
)

__version__ = "0.1.0"


def trace_records(trace_text):
    """Records of a JSONL trace, header first."""
    return [json.loads(line) for line in trace_text.splitlines() if line.strip()]


def events(trace_text, name):
    return [r for r in trace_records(trace_text) if r.get("event") == name]
