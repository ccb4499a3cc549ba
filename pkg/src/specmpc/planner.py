"""Cross-entropy-method planner over a latent world model.

``plan`` searches action sequences of a fixed horizon with iterated
elite refitting, scoring candidates by the undiscounted sum of predicted
rewards along a deterministic (mean) latent rollout. The best sequence
found so far is carried into every population, so the best elite score
never decreases across iterations.

Sampling noise for a call is derived from the planner seed together
with the bytes of the seed latent. With warm starting disabled
(default) a plan is therefore a pure function of its seed latent:
replanning from the same latent reproduces the same plan bit for bit.
The control loop leans on this for its replan-equivalence guarantees.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 3
    n_samples: int = 256
    n_elites: int = 32
    n_iterations: int = 6
    init_std: float = 0.5
    min_std: float = 0.05
    warm_start: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.n_elites > self.n_samples:
            raise ValueError("n_elites must be <= n_samples")


@dataclass
class Plan:
    """Action sequence with its predicted latent rollout.

    ``predicted_latents`` has horizon+1 rows; row 0 is the seed latent
    and row i+1 is the model's canonical (noise-bearing) successor of
    row i under ``actions[i]``. ``predicted_return`` scores the actions
    on the deterministic mean rollout, matching the search objective.
    """

    actions: np.ndarray            # (H, d_a)
    predicted_latents: np.ndarray  # (H+1, d_z)
    predicted_return: float


def _call_rng(planner_seed: int, z_seed: np.ndarray) -> np.random.Generator:
    digest = hashlib.sha256(
        int(planner_seed).to_bytes(8, "little", signed=False)
        + np.ascontiguousarray(z_seed, dtype=np.float64).tobytes()
    ).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "little")))


def rollout_returns(model, z_seed: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Sum of predicted rewards along mean rollouts; actions (n, H, d_a)."""
    n = actions.shape[0]
    z = np.broadcast_to(z_seed, (n, z_seed.shape[-1])).copy()
    total = np.zeros(n)
    for t in range(actions.shape[1]):
        a_t = actions[:, t, :]
        total += model.predict_reward(z, a_t)
        z = model.latent_step_mean(z, a_t)
    return total


def plan(model, z_seed: np.ndarray, cfg: PlannerConfig, planner_seed: int,
         warm_mean: np.ndarray | None = None,
         iteration_best: list | None = None) -> Plan:
    """Plan from a seed latent; deterministic given (model, seed latent, cfg, seed).

    ``warm_mean`` (H, d_a) overrides the zero initial sampling mean.
    ``iteration_best``, when given, collects the best elite score per
    iteration (diagnostic).
    """
    z_seed = np.asarray(z_seed, dtype=np.float64).reshape(-1)
    if z_seed.shape[0] != model.d_z:
        raise ValueError(f"seed latent dim {z_seed.shape[0]} != {model.d_z}")
    H, d_a = cfg.horizon, model.d_a
    rng = _call_rng(planner_seed, z_seed)

    mean = np.zeros((H, d_a))
    if warm_mean is not None:
        mean = np.clip(np.asarray(warm_mean, dtype=np.float64).reshape(H, d_a), -1.0, 1.0)
    std = np.full((H, d_a), cfg.init_std)
    best_actions: np.ndarray | None = None
    best_score = -np.inf

    for it in range(cfg.n_iterations):
        samples = np.clip(mean + std * rng.standard_normal((cfg.n_samples, H, d_a)),
                          -1.0, 1.0)
        if best_actions is not None:
            samples[0] = best_actions
        scores = rollout_returns(model, z_seed, samples)
        if not np.all(np.isfinite(scores)):
            bad = int(np.flatnonzero(~np.isfinite(scores))[0])
            raise FloatingPointError(
                f"non-finite rollout score at iteration {it}, sample {bad}: "
                f"{scores[bad]!r}")
        order = np.argsort(-scores, kind="stable")
        elites = samples[order[:cfg.n_elites]]
        top = float(scores[order[0]])
        if top > best_score:
            best_score = top
            best_actions = samples[order[0]].copy()
        if iteration_best is not None:
            iteration_best.append(best_score)
        mean = elites.mean(axis=0)
        std = np.maximum(elites.std(axis=0), cfg.min_std)

    actions = np.clip(mean, -1.0, 1.0)
    ret = float(rollout_returns(model, z_seed, actions[None])[0])
    latents = np.empty((H + 1, z_seed.shape[0]))
    latents[0] = z_seed
    for t in range(H):
        latents[t + 1] = model.latent_step(latents[t], actions[t])
    return Plan(actions=actions, predicted_latents=latents, predicted_return=ret)


def warm_start(prev: Plan) -> np.ndarray:
    """Shift the previous actions left one step, zero-pad the tail."""
    mean = np.zeros_like(prev.actions)
    mean[:-1] = prev.actions[1:]
    return mean
