"""Acceptance criteria, each printed as one PASS/FAIL line.

Runs of criteria 1-3 are computed once per module and reused by the
consistency (4) and clock-lag (5) audits.
"""

import random
import time
from collections import Counter, defaultdict

import pytest

from nfstate.harness.cli import main as cli_main
from nfstate.harness.config import HOOK_POINTS, MUTATIONS, load_config
from nfstate.harness.experiments import mean_by, run_experiment, run_timelapse, sweep
from nfstate.model import EventKind, PacketId


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def flow_sequences(trace, actor=None):
    seqs = defaultdict(list)
    for e in trace:
        if e.kind is EventKind.PROCESSED and (actor is None or e.actor == actor):
            seqs[e.packet.flow_id].append(e.packet.counter)
    return seqs


def survivors(run):
    drops = run.oracle_drops()
    out = defaultdict(list)
    for p in run.packets:
        if p.id not in drops:
            out[p.flow_id].append(p.counter)
    return {f: sorted(cs) for f, cs in out.items()}


# ----------------------------------------------------------------------
# shared run sets
@pytest.fixture(scope="module")
def ordering_runs():
    t0 = time.perf_counter()
    runs = []
    for seed in range(500):
        rng = random.Random(seed)
        cfg = load_config({
            "seed": seed, "traffic.packets": 300, "traffic.rate_pps": 5000,
            "nf.count": rng.randint(1, 5), "traffic.flows": rng.randint(1, 20),
            "net.reorder_prob": rng.choice([0.0, 0.1, 0.2, 0.3]),
            "traffic.updates_per_batch": rng.randint(0, 2),
        })
        runs.append(run_experiment(cfg))
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="module")
def crash_runs():
    t0 = time.perf_counter()
    runs = []
    for point in HOOK_POINTS:
        for count in range(1, 26):
            victim = f"nf{count % 2}"
            cfg = load_config({
                "seed": count, "nf.count": 2, "traffic.packets": 600, "traffic.flows": 8,
                "nf.batch_size": 10, "traffic.updates_per_batch": 2,
                "net.reorder_prob": 0.1,
                "scenario": [{"op": "crash_on", "nf": victim, "point": point, "count": count}],
            })
            runs.append((point, count, run_experiment(cfg)))
    return runs, time.perf_counter() - t0


def _eq1_latency(run, skip):
    rs = [r for r in run.records if r.pid.flow_id not in skip]
    return sum(r.release - r.stamp for r in rs) / len(rs)


@pytest.fixture(scope="module")
def migration_runs():
    """50 runs, each swapping one flow each way between two NFs (100 migrations).

    Swapping keeps every NF's offered load unchanged, so any latency shift
    on the other flows is the migration protocol's doing.
    """
    out = []
    for seed in range(50):
        base = {"seed": seed, "nf.count": 3, "traffic.flows": 24, "traffic.packets": 4000,
                "net.reorder_prob": 0.2, "nf.batch_size": 10}
        control = run_experiment(load_config(base))
        rules, ids = control.run.final["rules"], control.run.flow_ids
        a, b = f"nf{seed % 3}", f"nf{(seed + 1) % 3}"
        fa = [i for i in sorted(ids) if rules[str(ids[i])] == a][seed % 4]
        fb = [i for i in sorted(ids) if rules[str(ids[i])] == b][seed % 4]
        at = 50_000_000 + seed * 4_000_000
        cfg = dict(base, scenario=[{"op": "migrate", "flows": [fa], "dst": b, "at_ns": at},
                                   {"op": "migrate", "flows": [fb], "dst": a, "at_ns": at}])
        res = run_experiment(load_config(cfg))
        out.append((control, res, {ids[fa]: b, ids[fb]: a}))
    return out


# ----------------------------------------------------------------------
def test_c01_ordering(ordering_runs, report):
    runs, elapsed = ordering_runs
    bad = []
    drops = 0
    for res in runs:
        want = survivors(res.run)
        drops += len(res.run.oracle_drops())
        for f, seq in flow_sequences(res.run.trace).items():
            if seq != want.get(f):
                bad.append((res.run.cfg["seed"], f))
    ok = not bad and drops == 0 and elapsed < 120
    report(1, ok, f"{len(runs)} runs, {len(bad)} flows out of order, {drops} input drops, "
                  f"{elapsed:.1f}s (budget 120s)")


def test_c02_exactly_once_under_failover(crash_runs, report):
    runs, elapsed = crash_runs
    failed = [(p, c) for p, c, r in runs if not r.passed]
    no_failover = [(p, c) for p, c, r in runs if not r.run.final["promotions"]]
    case2 = [r for _, _, r in runs if any(pr[2] == 2 for pr in r.run.final["promotions"])]
    rereleases = dup_globals = 0
    for r in case2:
        rel = Counter(e.packet for e in r.run.trace if e.kind is EventKind.RELEASED)
        rereleases += sum(n - 1 for n in rel.values())
        log = Counter((f, c) for _, _, f, c, _ in r.run.final["log"])
        dup_globals += sum(n - 1 for n in log.values())
    ok = (len(runs) >= 200 and not failed and not no_failover and case2
          and rereleases == 0 and dup_globals == 0 and elapsed < 300)
    report(2, ok, f"{len(runs)} crash schedules over {len(HOOK_POINTS)} points, "
                  f"{len(failed)} oracle failures, {len(case2)} Case-2 runs with "
                  f"{rereleases} re-releases and {dup_globals} duplicate log entries, "
                  f"{elapsed:.1f}s (budget 300s)")


def test_c03_migration(migration_runs, report):
    problems = []
    worst = 0.0
    interleaved = 0
    migrations = 0
    for control, res, moved in migration_runs:
        run = res.run
        migrations += len(run.trace.of_kind(EventKind.MIGRATION_DONE))
        if not res.passed:
            problems.append(f"seed {run.cfg['seed']}: {res.report.findings[0].message}")
        want = survivors(run)
        for f, dst in moved.items():
            seq = flow_sequences(run.trace, dst)[f]
            if not seq or seq != [c for c in want[f] if c >= seq[0]]:
                problems.append(f"seed {run.cfg['seed']}: flow {f} at {dst} not gap-free")
            if run.final["rules"][str(f)] != dst:
                problems.append(f"seed {run.cfg['seed']}: flow {f} not owned by {dst}")
        hops = Counter(e.packet for e in run.trace if e.kind is EventKind.SWITCH_IN)
        if any(n > 1 for n in hops.values()):
            interleaved += 1
        a, b = _eq1_latency(control.run, set(moved)), _eq1_latency(run, set(moved))
        worst = max(worst, abs(b - a) / a)
    ok = migrations >= 100 and not problems and worst < 0.01 and interleaved > 0
    report(3, ok, f"{migrations} migrations, {len(problems)} problems, {interleaved} runs "
                  f"with forwarded packets, worst latency shift on other flows "
                  f"{100 * worst:.3f}% (limit 1%)" + (f"; {problems[:2]}" if problems else ""))


def test_c04_strong_consistency(ordering_runs, crash_runs, migration_runs, report):
    results = ([r for r in ordering_runs[0]] + [r for _, _, r in crash_runs[0]]
               + [r for _, r, _ in migration_runs])
    keys = {"global-log", "global-state", "origin-order"}
    bad = [r for r in results if r.report.checks_failed() & keys]
    entries = sum(len(r.run.final["log"]) for r in results)
    ok = not bad and entries > 0
    report(4, ok, f"{len(results)} runs, {entries} global log entries, "
                  f"{len(bad)} runs with log, state or origin-order findings")


def test_c05_clock_lag(ordering_runs, crash_runs, migration_runs, report):
    results = ([r for r in ordering_runs[0]] + [r for _, _, r in crash_runs[0]]
               + [r for _, r, _ in migration_runs])
    audited = sum(len(r.run.trace.of_kind(EventKind.PACKET_CLOCK_COMMIT,
                                           EventKind.STATE_CLOCK_COMMIT)) for r in results)
    bad = [r for r in results if "clock-lag" in r.report.checks_failed()]
    ok = not bad and audited > 0
    report(5, ok, f"{audited} clock commits audited over {len(results)} runs, "
                  f"{len(bad)} violations of j <= i <= j+1")


def test_c06_batch_size_trend(report):
    base = load_config({"nf.count": 1, "nf.buffer_batches": 1000, "traffic.packets": 10_000,
                        "traffic.rate_pps": 10_000})
    sizes = [10, 20, 50, 100, 200]
    rows = sweep(base, "nf.batch_size", sizes, seeds=range(5))
    lat = mean_by(rows, "nf.batch_size", "latency_ns")
    best = min(sizes, key=lambda b: lat[b])
    k = sizes.index(best)
    down = all(lat[sizes[i]] > lat[sizes[i + 1]] for i in range(k))
    up = all(lat[sizes[i]] < lat[sizes[i + 1]] for i in range(k, len(sizes) - 1))
    ok = 0 < k < len(sizes) - 1 and down and up and all(r["verdict"] == "pass" for r in rows)
    curve = ", ".join(f"{b}:{lat[b] / 1e6:.2f}ms" for b in sizes)
    report(6, ok, f"mean latency over 5 seeds {curve}; minimum at batch {best}")


def _spike(rate):
    return load_config({"nf.count": 1, "traffic.packets": 6000, "traffic.rate_pps": 10_000,
                        "scenario": [{"op": "set_rate", "rate_pps": rate, "at_ns": 200_000_000},
                                     {"op": "set_rate", "rate_pps": 10_000,
                                      "at_ns": 300_000_000}]})


def test_c07_buffer_size_trend(report):
    sizes = list(range(1, 7))
    rows = sweep(_spike(14_500), "nf.buffer_batches", sizes, seeds=range(3))
    drops = mean_by(rows, "nf.buffer_batches", "drops")
    mono = all(drops[a] >= drops[b] for a, b in zip(sizes, sizes[1:]))
    rates = [14_000, 14_500, 15_000]
    by_rate = {r: run_experiment(_spike(r).replace(**{"nf.buffer_batches": 2})).row["drops"]
               for r in rates}
    rate_mono = all(by_rate[a] <= by_rate[b] for a, b in zip(rates, rates[1:]))
    ok = (drops[1] > 0 and mono and drops[5] == 0 and drops[6] == 0 and rate_mono
          and all(r["verdict"] == "pass" for r in rows))
    report(7, ok, f"drops by buffer {dict((k, int(v)) for k, v in drops.items())}, "
                  f"zero from 5 batches; buffer 2 drops by rate {by_rate}")


def test_c08_flow_count_invariance(report):
    base = load_config({"nf.count": 4, "traffic.rate_pps": 12_000, "traffic.packets": 24_000})
    counts = [120, 240, 360, 480, 540]
    rows = sweep(base, "traffic.flows", counts, seeds=range(2))
    tp = mean_by(rows, "traffic.flows", "throughput_pps")
    spread = (max(tp.values()) - min(tp.values())) / (sum(tp.values()) / len(tp))
    ok = spread < 0.02 and all(r["verdict"] == "pass" for r in rows)
    report(8, ok, f"throughput {dict((k, round(v)) for k, v in tp.items())} pps, "
                  f"spread {100 * spread:.2f}% (limit 2%)")


def test_c09_global_update_trend(report):
    freqs = [1, 5, 10, 15]
    base = load_config({"nf.count": 1, "traffic.packets": 8000})
    low = mean_by(sweep(base.replace(**{"traffic.rate_pps": 4000}),
                        "traffic.updates_per_batch", freqs, seeds=range(5)),
                  "traffic.updates_per_batch", "throughput_pps")
    high_rows = sweep(base.replace(**{"traffic.rate_pps": 12_000}),
                      "traffic.updates_per_batch", freqs, seeds=range(5))
    high = mean_by(high_rows, "traffic.updates_per_batch", "throughput_pps")
    spread = (max(low.values()) - min(low.values())) / (sum(low.values()) / len(low))
    falling = all(high[a] > high[b] for a, b in zip(freqs, freqs[1:]))
    ok = spread < 0.02 and falling and all(r["verdict"] == "pass" for r in high_rows)
    report(9, ok, f"4k pps spread {100 * spread:.2f}%; 12k pps throughput "
                  f"{dict((k, round(v)) for k, v in high.items())}")


def test_c10_heavy_consensus_timelapse(report):
    cfg = load_config({"nf.count": 1, "traffic.packets": 24_000, "nf.buffer_batches": 10,
                       "traffic.rate_pps": 12_000})
    t50 = run_timelapse(cfg, 50, 5000)
    t100 = run_timelapse(cfg, 100, 5000)
    lat_ok = all(t.post_latency is not None and
                 abs(t.post_latency - t.pre_latency) <= 0.3 * t.pre_latency
                 for t in (t50, t100))
    ok = (t100.dip_throughput < t50.dip_throughput and t50.recovered() and t100.recovered()
          and lat_ok and t50.report.passed and t100.report.passed)
    report(10, ok, f"pre {t50.pre_throughput:.0f} pps; dip {t50.dip_throughput:.0f} (50) vs "
                   f"{t100.dip_throughput:.0f} (100); recovered at windows "
                   f"{t50.recovery_window}/{t100.recovery_window}; post latency "
                   f"{t50.post_latency / t50.pre_latency - 1:+.1%} / "
                   f"{t100.post_latency / t100.pre_latency - 1:+.1%}")


def test_c11_determinism(tmp_path, report):
    same = 0
    for seed in range(20):
        sc = [] if seed % 2 else [{"op": "fail_nf", "nf": "nf0", "at_ns": 10_000_000 + seed}]
        cfg = load_config({"seed": seed, "traffic.packets": 400, "nf.batch_size": 10,
                           "net.reorder_prob": 0.2, "net.jitter_ns": 20_000,
                           "traffic.updates_per_batch": 1, "scenario": sc,
                           "consensus.impl": "quorum" if seed % 3 == 0 else "sequencer"})
        out = tmp_path / f"run{seed}"
        run_experiment(cfg, str(out))
        same += cli_main(["replay", str(out)]) == 0
    report(11, same == 20, f"{same}/20 replays reproduced the stored trace hash")


EXPECTED = {
    "skip_marker_check": "global-log",
    "release_before_commit": "release-gate",
    "bypass_pending": "processing-order",
    "rerelease_on_failover": "release-set",
}


def test_c12_checker_validity(report):
    base = {"nf.count": 1, "traffic.packets": 600, "traffic.flows": 6, "nf.batch_size": 10,
            "traffic.updates_per_batch": 5}
    crash = [{"op": "crash_on", "nf": "nf0", "point": "pc_committed", "count": 3}]
    extra = {"skip_marker_check": {"scenario": crash}, "rerelease_on_failover": {"scenario": crash},
             "release_before_commit": {}, "bypass_pending": {"net.reorder_prob": 0.3}}
    caught = {}
    for m in MUTATIONS:
        cfg = dict(base, **extra[m])
        clean = run_experiment(load_config(cfg)).passed
        found = run_experiment(load_config(dict(cfg, mutations=[m]))).report.checks_failed()
        caught[m] = clean and EXPECTED[m] in found
    ok = len(caught) >= 3 and all(caught.values())
    report(12, ok, ", ".join(f"{m}->{EXPECTED[m]}:{'caught' if c else 'MISSED'}"
                             for m, c in caught.items()))
