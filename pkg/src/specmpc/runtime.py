"""Speculative plan execution: queue, gate on mismatch, correct or replan.

The control loop amortizes planning over several environment steps.
When its queues run dry it plans from the real latent and, if the
execute horizon L exceeds the plan horizon H, chains further plans
seeded at the previous block's final predicted latent. Each queued
action is paired with the latent the planner expected to see when that
action fires; queue index i of both queues always refers to the same
future step.

Every step pops one pair, measures the mismatch d between the encoded
real state and the popped latent, and takes one of four paths:

* fresh_plan  -- the pop is the seed of a block planned this step from
  the real latent; d is zero by construction and the action runs as is.
* speculative -- d within threshold, no corrector: run the queued action.
* corrected   -- d within threshold, corrector on: run the queued action
  plus a clipped learned residual.
* fallback    -- d above threshold: replan from the real latent, run the
  new first action, and flush both queues and the mismatch history.

A baseline loop that replans every step is provided separately; it is
the teacher behavior the gated loop must reproduce exactly when the
threshold is zero.
"""

from __future__ import annotations

import dataclasses
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .corrector import HistoryBuffer, MismatchFeature, apply_correction
from .planner import Plan, PlannerConfig, plan, warm_start
from .telemetry import RunTelemetry
from .tensor import derive_seed


@dataclass(frozen=True)
class SpecConfig:
    H: int = 3                       # plan horizon
    L: int = 3                       # execute horizon
    tau: float = 0.0                 # mismatch threshold
    corrector_enabled: bool = False
    K: int = 4                       # mismatch history length

    def __post_init__(self):
        if self.H < 1 or self.L < 1:
            raise ValueError("H and L must be >= 1")
        if not self.tau >= 0.0:
            raise ValueError("tau must be >= 0")

    def replace(self, **kw) -> "SpecConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class StepOutcome:
    action: np.ndarray
    mode: str            # fresh_plan | speculative | corrected | fallback
    d: float
    planner_called: bool
    reward: float


def mismatch(z_real: np.ndarray, z_hat: np.ndarray) -> float:
    """Euclidean distance between real and predicted latents."""
    z_real = np.asarray(z_real, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z_real.shape != z_hat.shape:
        raise ValueError(f"latent shape mismatch: {z_real.shape} vs {z_hat.shape}")
    return float(np.linalg.norm(z_real - z_hat))


class _BlockStat:
    """Execution bookkeeping for one planner call."""

    __slots__ = ("executed", "pending", "finalized")

    def __init__(self, size: int):
        self.executed = 0
        self.pending = size
        self.finalized = False


@dataclass
class _QueueEntry:
    action: np.ndarray
    latent: np.ndarray
    fresh: bool
    block: _BlockStat


class SpecQueues:
    """Paired action/latent FIFOs plus the next chained seed.

    ``tail`` is the predicted latent following the last queued pair; a
    refill that finds the queues non-empty seeds its next plan there.
    """

    def __init__(self):
        self._entries: deque[_QueueEntry] = deque()
        self.tail: np.ndarray | None = None

    def __len__(self):
        return len(self._entries)

    @property
    def actions(self) -> list[np.ndarray]:
        return [e.action for e in self._entries]

    @property
    def latents(self) -> list[np.ndarray]:
        return [e.latent for e in self._entries]

    def push_block(self, p: Plan, fresh: bool, block: _BlockStat) -> None:
        H = p.actions.shape[0]
        for i in range(H):
            self._entries.append(_QueueEntry(
                action=p.actions[i], latent=p.predicted_latents[i],
                fresh=(fresh and i == 0), block=block))
        self.tail = p.predicted_latents[H]

    def pop(self) -> _QueueEntry:
        entry = self._entries.popleft()
        entry.block.pending -= 1
        return entry

    def queued_blocks(self) -> list[_BlockStat]:
        seen, out = set(), []
        for e in self._entries:
            if id(e.block) not in seen:
                seen.add(id(e.block))
                out.append(e.block)
        return out

    def clear(self) -> None:
        self._entries.clear()
        self.tail = None


def refill_queues(queues: SpecQueues, z_real: np.ndarray, cfg: SpecConfig, model,
                  planner_cfg: PlannerConfig, planner_seed: int,
                  telemetry: RunTelemetry | None = None,
                  last_plan: Plan | None = None,
                  open_blocks: list | None = None,
                  plan_log: list | None = None) -> tuple[int, Plan | None]:
    """Plan until at least L pairs are queued; returns (calls, last plan).

    An empty queue seeds from the real latent (a fresh block whose first
    pair carries zero mismatch by construction); otherwise planning
    chains from the predicted latent after the last queued pair.
    """
    calls = 0
    while len(queues) < cfg.L:
        if len(queues) == 0:
            seed_latent, fresh = z_real, True
        else:
            assert queues.tail is not None
            seed_latent, fresh = queues.tail, False
        warm = None
        if planner_cfg.warm_start and last_plan is not None:
            warm = warm_start(last_plan)
        p = plan(model, seed_latent, planner_cfg, planner_seed, warm_mean=warm)
        if telemetry is not None:
            telemetry.record_planner_call()
        block = _BlockStat(size=p.actions.shape[0])
        queues.push_block(p, fresh, block)
        if open_blocks is not None:
            open_blocks.append(block)
        if plan_log is not None:
            plan_log.append((np.asarray(seed_latent).copy(), fresh))
        last_plan = p
        calls += 1
    return calls, last_plan


@dataclass
class AcceptContext:
    """Snapshot handed to the accepted-step hook (used for distillation)."""
    t: int
    z_real: np.ndarray
    z_hat: np.ndarray
    a_spec: np.ndarray
    d: float
    window: np.ndarray


@dataclass
class EpisodeTrace:
    states: list = field(default_factory=list)    # s_t before each step
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    modes: list = field(default_factory=list)
    ds: list = field(default_factory=list)


class SpeculativeRunner:
    """One episode of gated speculative execution over a fixed model."""

    def __init__(self, env, model, planner_cfg: PlannerConfig, spec_cfg: SpecConfig,
                 corrector=None, seed: int = 0):
        if spec_cfg.corrector_enabled and corrector is None:
            raise ValueError("corrector_enabled but no corrector given")
        self.env = env
        self.model = model
        self.planner_cfg = planner_cfg
        self.cfg = spec_cfg
        self.corrector = corrector
        self.seed = int(seed)
        self.planner_seed = derive_seed(self.seed, "planner")
        self.obs = env.reset(derive_seed(self.seed, "env"))
        self.queues = SpecQueues()
        self.history = HistoryBuffer(spec_cfg.K, model.d_z, model.d_a)
        self.telemetry = RunTelemetry()
        self.trace = EpisodeTrace()
        self.open_blocks: list[_BlockStat] = []
        self.last_plan: Plan | None = None
        self.plan_log: list[tuple[np.ndarray, bool]] = []
        self.t = 0
        self.done = False
        self.on_accept = None

    def _finalize(self, block: _BlockStat) -> None:
        if not block.finalized:
            block.finalized = True
            self.telemetry.record_block(block.executed)

    def _flush(self, popped_block: _BlockStat) -> None:
        self._finalize(popped_block)
        for blk in self.queues.queued_blocks():
            self._finalize(blk)
        self.queues.clear()
        self.history.clear()

    def step(self) -> StepOutcome:
        if self.done:
            raise RuntimeError("episode already finished")
        z_real = self.model.encode(self.obs)
        planner_called = False
        if len(self.queues) == 0:
            calls, self.last_plan = refill_queues(
                self.queues, z_real, self.cfg, self.model, self.planner_cfg,
                self.planner_seed, telemetry=self.telemetry,
                last_plan=self.last_plan, open_blocks=self.open_blocks,
                plan_log=self.plan_log)
            planner_called = calls > 0
        if len(self.queues.actions) != len(self.queues.latents):
            raise AssertionError("queue pairing broken: unequal lengths")

        entry = self.queues.pop()
        d = mismatch(z_real, entry.latent)

        if d > self.cfg.tau:
            warm = None
            if self.planner_cfg.warm_start and self.last_plan is not None:
                warm = warm_start(self.last_plan)
            p = plan(self.model, z_real, self.planner_cfg, self.planner_seed,
                     warm_mean=warm)
            self.telemetry.record_planner_call()
            self.telemetry.record_block(1)
            self.last_plan = p
            self.plan_log.append((z_real.copy(), True))
            a = p.actions[0].copy()
            mode = "fallback"
            planner_called = True
            self._flush(entry.block)
        else:
            self.history.append(MismatchFeature(
                z_real=z_real.copy(), z_hat=np.asarray(entry.latent).copy(),
                a_spec=np.asarray(entry.action).copy()))
            if entry.fresh:
                a = np.asarray(entry.action).copy()
                mode = "fresh_plan"
            elif self.cfg.corrector_enabled:
                delta = self.corrector.residual(self.history)
                a = apply_correction(entry.action, delta)
                mode = "corrected"
            else:
                a = np.asarray(entry.action).copy()
                mode = "speculative"
            entry.block.executed += 1
            if entry.block.pending == 0:
                self._finalize(entry.block)
            if self.on_accept is not None:
                self.on_accept(AcceptContext(
                    t=self.t, z_real=z_real, z_hat=np.asarray(entry.latent),
                    a_spec=np.asarray(entry.action), d=d,
                    window=self.history.window()))

        self.trace.states.append(np.asarray(self.obs).copy())
        obs, r, done = self.env.step(a)
        self.obs, self.done = obs, done
        self.t += 1
        outcome = StepOutcome(action=a, mode=mode, d=d,
                              planner_called=planner_called, reward=r)
        self.telemetry.record_step(outcome)
        self.trace.actions.append(a)
        self.trace.rewards.append(r)
        self.trace.modes.append(mode)
        self.trace.ds.append(d)
        if done:
            for blk in self.open_blocks:
                self._finalize(blk)
        return outcome

    def run(self, max_steps: int | None = None):
        while not self.done and (max_steps is None or self.t < max_steps):
            self.step()
        if not self.done:
            # stopped early: close the books so the histogram balances
            for blk in self.open_blocks:
                self._finalize(blk)
        return self.trace, self.telemetry


def run_episode(env, model, planner_cfg: PlannerConfig, spec_cfg: SpecConfig,
                corrector=None, seed: int = 0, max_steps: int | None = None):
    runner = SpeculativeRunner(env, model, planner_cfg, spec_cfg,
                               corrector=corrector, seed=seed)
    return runner.run(max_steps=max_steps)


def run_baseline(env, model, planner_cfg: PlannerConfig, seed: int = 0,
                 max_steps: int | None = None):
    """Replan from the real latent every step and execute the first action.

    This is the teacher behavior and the reference the gated loop is
    checked against; it is deliberately a separate, simpler loop.
    """
    tel = RunTelemetry()
    trace = EpisodeTrace()
    obs = env.reset(derive_seed(int(seed), "env"))
    planner_seed = derive_seed(int(seed), "planner")
    last_plan: Plan | None = None
    t = 0
    done = False
    while not done and (max_steps is None or t < max_steps):
        z = model.encode(obs)
        warm = None
        if planner_cfg.warm_start and last_plan is not None:
            warm = warm_start(last_plan)
        p = plan(model, z, planner_cfg, planner_seed, warm_mean=warm)
        last_plan = p
        tel.record_planner_call()
        tel.record_block(1)
        a = p.actions[0].copy()
        trace.states.append(np.asarray(obs).copy())
        obs, r, done = env.step(a)
        outcome = StepOutcome(action=a, mode="fresh_plan", d=0.0,
                              planner_called=True, reward=r)
        tel.record_step(outcome)
        trace.actions.append(a)
        trace.rewards.append(r)
        trace.modes.append("fresh_plan")
        trace.ds.append(0.0)
        t += 1
    return trace, tel


def calibrate_tau(env, model, planner_cfg: PlannerConfig, spec_cfg: SpecConfig,
                  seed: int = 0, percentile: float = 70.0,
                  max_steps: int | None = None) -> float:
    """Mismatch threshold from a gate-off probe run.

    Runs speculation with an infinite threshold and no corrector, then
    returns the requested percentile of the observed per-step mismatch.
    The model's canonical noise stream is restored afterwards so the
    probe does not perturb the run that follows it.
    """
    probe_cfg = spec_cfg.replace(tau=float("inf"), corrector_enabled=False)
    with model.noise_preserved():
        _trace, tel = run_episode(env, model, planner_cfg, probe_cfg,
                                  seed=derive_seed(int(seed), "tau-probe"),
                                  max_steps=max_steps)
    return float(np.percentile(np.asarray(tel.d_series), percentile))
