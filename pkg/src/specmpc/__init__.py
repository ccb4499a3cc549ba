"""Speculative plan execution for latent-space MPC.

Plan once, execute several queued actions, gate continuation on latent
mismatch, recycle near-misses with a learned residual corrector, and
fall back to a full replan only when the mismatch is large. Telemetry
accounts for planner calls, per-call utilization, modeled latency, and
reward.
"""

from .corrector import (
    DistillationDataset,
    GatedCorrector,
    HistoryBuffer,
    MismatchFeature,
    TemporalCorrector,
    apply_correction,
    collect_distillation_data,
    load_corrector,
    make_corrector,
    save_corrector,
    train_corrector,
)
from .envs import EnvSpec, Pendulum, PointMass, make_env
from .planner import Plan, PlannerConfig, plan, rollout_returns, warm_start
from .runtime import (
    SpecConfig,
    SpecQueues,
    SpeculativeRunner,
    StepOutcome,
    calibrate_tau,
    mismatch,
    refill_queues,
    run_baseline,
    run_episode,
)
from .telemetry import LatencyModel, RunTelemetry, export_csv, replay_latency
from .world_model import (
    LearnedWorldModel,
    PerturbedOracle,
    Transitions,
    collect_transitions,
    load_transitions,
    save_transitions,
    train_world_model,
)

__version__ = "0.1.0"
