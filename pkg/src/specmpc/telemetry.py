"""Run accounting: planner calls, per-call utilization, modeled latency.

The histogram buckets planner calls by how many of their queued actions
actually executed before the block was exhausted or flushed; fallback
replans execute exactly one action and bucket as 1. Two identities must
hold at the end of every run and are asserted by the test suite:

    sum_k k * hist[k] == environment steps
    sum_k hist[k]     == planner calls

Latency is modeled from call counts with fixed per-call and per-
correction costs, so speed claims are checkable arithmetic rather than
hardware measurements. Wall-clock timing, when anyone wants it, must be
reported separately and never fed into these outputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LatencyModel:
    c_plan: float = 36.2   # ms per planner call
    c_corr: float = 12.0   # ms per corrected step
    c_enc: float = 0.0     # ms per environment step (encoder)

    def __post_init__(self):
        if min(self.c_plan, self.c_corr, self.c_enc) < 0:
            raise ValueError("latency constants must be >= 0")


@dataclass
class StepRecord:
    t: int
    mode: str
    d: float
    planner_called: bool
    action: np.ndarray
    reward: float
    cum_reward: float


class RunTelemetry:
    """Accumulates per-step outcomes and per-call execution counts."""

    def __init__(self):
        self.planner_calls = 0
        self.hist: dict[int, int] = {}
        self.fallback_count = 0
        self.corrected_count = 0
        self.cum_reward = 0.0
        self.steps = 0
        self.d_series: list[float] = []
        self.records: list[StepRecord] = []

    def record_planner_call(self) -> None:
        self.planner_calls += 1

    def record_block(self, executed: int) -> None:
        """Finalize one planner call's bucket."""
        self.hist[executed] = self.hist.get(executed, 0) + 1

    def record_step(self, outcome) -> None:
        self.steps += 1
        self.cum_reward += outcome.reward
        self.d_series.append(outcome.d)
        if outcome.mode == "fallback":
            self.fallback_count += 1
        elif outcome.mode == "corrected":
            self.corrected_count += 1
        self.records.append(StepRecord(
            t=self.steps - 1, mode=outcome.mode, d=outcome.d,
            planner_called=outcome.planner_called, action=np.asarray(outcome.action),
            reward=outcome.reward, cum_reward=self.cum_reward))

    # -- modeled latency -----------------------------------------------------

    def simulated_latency(self, lm: LatencyModel, total_steps: int | None = None):
        """(per_step_ms, total_ms, speedup_pct) under the cost model.

        Baseline cost is one planner call plus one encode per step;
        speedup is the relative per-step reduction against that.
        """
        steps = self.steps if total_steps is None else int(total_steps)
        if steps <= 0:
            raise ValueError("total_steps must be positive")
        total = (self.planner_calls * lm.c_plan
                 + self.corrected_count * lm.c_corr
                 + steps * lm.c_enc)
        per_step = total / steps
        baseline = lm.c_plan + lm.c_enc
        speedup = 100.0 * (baseline - per_step) / baseline if baseline > 0 else 0.0
        return per_step, total, speedup

    # -- CSV export ------------------------------------------------------------

    def summary_fields(self, lm: LatencyModel, max_block: int):
        per_step, _total, speedup = self.simulated_latency(lm)
        fields = {"steps": self.steps, "planner_calls": self.planner_calls}
        for k in range(0, max_block + 1):
            fields[f"hist_k{k}"] = self.hist.get(k, 0)
        fields.update({
            "fallbacks": self.fallback_count,
            "corrected": self.corrected_count,
            "cum_reward": self.cum_reward,
            "sim_ms_per_step": per_step,
            "speedup_pct": speedup,
        })
        return fields


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def export_csv(tel: RunTelemetry, out_dir, lm: LatencyModel | None = None,
               max_block: int = 3) -> None:
    """Write ``summary.csv`` and per-step ``trace.csv`` under out_dir."""
    from pathlib import Path

    lm = lm or LatencyModel()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    d_a = tel.records[0].action.shape[0] if tel.records else 0
    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["t", "mode", "d_t", "planner_called"]
                   + [f"a{i}" for i in range(d_a)] + ["reward", "cum_reward"])
        for rec in tel.records:
            w.writerow([rec.t, rec.mode, _fmt(rec.d), _fmt(rec.planner_called)]
                       + [_fmt(x) for x in rec.action]
                       + [_fmt(rec.reward), _fmt(rec.cum_reward)])

    if tel.steps > 0:
        fields = tel.summary_fields(lm, max_block)
        rows = [list(fields.keys()), [_fmt(v) for v in fields.values()]]
    else:
        rows = [["steps", "planner_calls", "fallbacks", "corrected", "cum_reward"]]
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        for row in rows:
            w.writerow(row)


def load_summary(path) -> dict:
    """Read one summary row back as {column: float} (strings preserved)."""
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        values = next(reader)
    out = {}
    for k, v in zip(header, values):
        try:
            out[k] = float(v)
        except ValueError:
            out[k] = v
    return out


def replay_latency(summary: dict, lm: LatencyModel) -> dict:
    """Recompute modeled latency from recorded counts under new constants."""
    steps = int(summary["steps"])
    calls = int(summary["planner_calls"])
    corrected = int(summary.get("corrected", 0))
    if steps <= 0:
        raise ValueError("summary has no steps")
    total = calls * lm.c_plan + corrected * lm.c_corr + steps * lm.c_enc
    per_step = total / steps
    baseline = lm.c_plan + lm.c_enc
    speedup = 100.0 * (baseline - per_step) / baseline if baseline > 0 else 0.0
    return {"steps": steps, "planner_calls": calls, "corrected": corrected,
            "sim_ms_per_step": per_step, "total_ms": total,
            "baseline_ms_per_step": baseline, "speedup_pct": speedup}
