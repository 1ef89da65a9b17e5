"""Experiment configuration: a flat JSON object with dotted keys.

Every key is optional; missing keys take the defaults below.  Validation
errors name the offending key.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Dict, List

# Calibration constants.  Virtual-time costs chosen so that batch 50 at
# 10,000 pps sits near the latency minimum; they are not measurements.
DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "traffic.rate_pps": 10_000,
    "traffic.packets": 20_000,
    "traffic.flows": 20,
    "traffic.payload_min": 64,
    "traffic.payload_max": 1500,
    "traffic.updates_per_batch": 0,
    "traffic.burst": 0,
    "traffic.burst_at": 0,
    "nf.count": 2,
    "nf.batch_size": 50,
    "nf.buffer_batches": 5,
    "nf.work_cost_ns": 60_000,
    "nf.global_keys": 4,
    "nodes.count": 0,
    "stamper.units": 1,
    "net.base_latency_ns": 100_000,
    "net.jitter_ns": 0,
    "net.reorder_prob": 0.0,
    "net.reorder_penalty_ns": 500_000,
    "net.ctrl_latency_ns": 250_000,
    "consensus.impl": "sequencer",
    "consensus.commit_latency_ns": 250_000,
    "consensus.replicas": 3,
    "consensus.quorum_size": None,
    "control.ping_interval_ns": 10_000_000,
    "control.suspect_threshold": 3,
    "control.spare_nfs": 2,
    "control.overload_policy": False,
    "metrics.tracked_n": 50_000,
    "metrics.window_ns": 100_000_000,
    "run.max_time_ns": 3_600_000_000_000,
    "scenario": [],
    "mutations": [],
}

MUTATIONS = ("skip_marker_check", "release_before_commit", "bypass_pending",
             "rerelease_on_failover")

# op -> required fields besides the op itself
DIRECTIVES = {
    "fail_nf": ("at_ns", "nf"),
    "fail_node": ("at_ns", "node"),
    "fail_unit": ("at_ns", "unit"),
    "recover_unit": ("at_ns", "unit"),
    "fail_manager": ("at_ns",),
    "recover_manager": ("at_ns",),
    "migrate": ("at_ns", "flows", "dst"),
    "set_rate": ("at_ns", "rate_pps"),
    "pause_nf": ("at_ns", "nf", "duration_ns"),
    "crash_on": ("nf", "point", "count"),
}

HOOK_POINTS = ("processed", "pc_prepared", "pc_voted", "pc_committed", "sc_prepared",
               "sc_voted", "sc_committed", "global_submitted")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated configuration, indexed by dotted key: ``cfg["nf.batch_size"]``."""

    values: Dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``cfg.replace(**{"nf.batch_size": 20})``."""
        merged = dict(self.values)
        merged.update(changes)
        return load_config(merged)

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.values)

    def dumps(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True)


def _check_int(key, v, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        if isinstance(v, float) and v.is_integer():
            v = int(v)
        else:
            raise ConfigError(key, f"expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(key, f"must be >= {lo}, got {v}")
    return v


def _check_num(key, v, lo=None, hi=None):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(key, f"expected a number, got {v!r}")
    if lo is not None and v < lo or hi is not None and v > hi:
        raise ConfigError(key, f"must be within [{lo}, {hi}], got {v}")
    return v


_INT_MIN = {
    "seed": 0, "traffic.packets": 0, "traffic.flows": 1, "traffic.payload_min": 1,
    "traffic.payload_max": 1, "traffic.updates_per_batch": 0, "traffic.burst": 0,
    "traffic.burst_at": 0, "nf.count": 1, "nf.batch_size": 1, "nf.buffer_batches": 1,
    "nf.work_cost_ns": 0, "nf.global_keys": 1, "nodes.count": 0, "stamper.units": 1,
    "net.base_latency_ns": 0, "net.jitter_ns": 0, "net.reorder_penalty_ns": 0,
    "net.ctrl_latency_ns": 0, "consensus.commit_latency_ns": 0, "consensus.replicas": 1,
    "control.ping_interval_ns": 1, "control.suspect_threshold": 1, "control.spare_nfs": 0,
    "metrics.tracked_n": 1, "metrics.window_ns": 1, "run.max_time_ns": 1,
}


def load_config(data: Dict[str, Any]) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = sorted(set(data) - set(DEFAULTS))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    v = dict(DEFAULTS)
    v.update(data)
    for key, lo in _INT_MIN.items():
        v[key] = _check_int(key, v[key], lo)
    v["traffic.rate_pps"] = _check_num("traffic.rate_pps", v["traffic.rate_pps"], lo=1e-9)
    v["net.reorder_prob"] = _check_num("net.reorder_prob", v["net.reorder_prob"], 0.0, 1.0)
    if v["traffic.payload_min"] > v["traffic.payload_max"]:
        raise ConfigError("traffic.payload_min", "exceeds traffic.payload_max")
    if v["traffic.updates_per_batch"] > v["nf.batch_size"]:
        raise ConfigError("traffic.updates_per_batch", "exceeds nf.batch_size")
    if v["consensus.impl"] not in ("sequencer", "quorum"):
        raise ConfigError("consensus.impl", "must be 'sequencer' or 'quorum'")
    q = v["consensus.quorum_size"]
    if q is not None:
        q = _check_int("consensus.quorum_size", q, 1)
        if q > v["consensus.replicas"]:
            raise ConfigError("consensus.quorum_size", "exceeds consensus.replicas")
    if not isinstance(v["control.overload_policy"], bool):
        raise ConfigError("control.overload_policy", "expected true or false")
    if v["nodes.count"] == 1:
        raise ConfigError("nodes.count", "a primary and its secondary need two nodes")
    muts = v["mutations"]
    if not isinstance(muts, list) or any(m not in MUTATIONS for m in muts):
        raise ConfigError("mutations", f"expected a list drawn from {list(MUTATIONS)}")
    v["mutations"] = list(muts)
    v["scenario"] = [_check_directive(i, d) for i, d in enumerate(v["scenario"] or [])]
    return ExperimentConfig(v)


def _check_directive(i: int, d: Any) -> Dict[str, Any]:
    key = f"scenario[{i}]"
    if not isinstance(d, dict) or "op" not in d:
        raise ConfigError(key, "each directive needs an 'op'")
    op = d["op"]
    if op not in DIRECTIVES:
        raise ConfigError(f"{key}.op", f"unknown directive {op!r}")
    for req in DIRECTIVES[op]:
        if req not in d:
            raise ConfigError(f"{key}.{req}", "missing")
    out = dict(d)
    if "at_ns" in out:
        out["at_ns"] = _check_int(f"{key}.at_ns", out["at_ns"], 0)
    if op == "crash_on":
        if out["point"] not in HOOK_POINTS:
            raise ConfigError(f"{key}.point", f"expected one of {list(HOOK_POINTS)}")
        out["count"] = _check_int(f"{key}.count", out["count"], 1)
    if op == "set_rate":
        _check_num(f"{key}.rate_pps", out["rate_pps"], lo=1e-9)
    if op == "migrate":
        flows = out["flows"]
        if not isinstance(flows, list) or not flows:
            raise ConfigError(f"{key}.flows", "expected a non-empty list of flow indexes")
        for f in flows:
            _check_int(f"{key}.flows", f, 0)
    if op == "pause_nf":
        _check_int(f"{key}.duration_ns", out["duration_ns"], 0)
    return out


def read_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fp:
            data = json.load(fp)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"not valid JSON: {exc}") from exc
    return load_config(data)


def field_names() -> List[str]:
    return list(DEFAULTS)

