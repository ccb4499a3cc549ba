"""Analytic continuous-control environments with exact, replayable dynamics.

Two tasks, both explicit-Euler integrated so a one-step transition
function is the whole truth:

* ``point_mass`` -- planar double integrator, linear dynamics, quadratic
  cost. Verifiable against brute force.
* ``pendulum`` -- torque-limited inverted pendulum near the upright
  equilibrium. Nonlinear, open-loop unstable, so prediction error
  compounds quickly; this is the stress case for speculative execution.

Rewards are negated quadratic costs evaluated at the pre-transition
state, so 0 is an upper bound. Actions must arrive inside [-1, 1]; the
control loop clips before calling ``step``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import substream

ACTION_LOW = -1.0
ACTION_HIGH = 1.0


@dataclass(frozen=True)
class EnvSpec:
    name: str
    d_s: int
    d_a: int
    episode_length: int
    dt: float


def _check_action(a: np.ndarray, d_a: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.shape[0] != d_a:
        raise ValueError(f"action has dim {a.shape[0]}, expected {d_a}")
    if np.any(np.abs(a) > 1.0 + 1e-12):
        raise ValueError(f"action {a} outside [-1, 1]; clip before stepping")
    return a


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(theta, dtype=np.float64), 2.0 * np.pi)


class PointMass:
    """Planar double integrator: state (x, y, vx, vy), action = acceleration.

    x' = x + v dt, v' = v + a dt; reward = -(|x|^2 + 0.1 |a|^2).
    """

    spec = EnvSpec("point_mass", d_s=4, d_a=2, episode_length=500, dt=0.1)

    def __init__(self, episode_length: int | None = None):
        if episode_length is not None:
            self.spec = EnvSpec("point_mass", 4, 2, int(episode_length), 0.1)
        self.state = np.zeros(4)
        self._t = 0

    @staticmethod
    def transition(s: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Vectorized one-step dynamics; s (..., 4), a (..., 2)."""
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        dt = PointMass.spec.dt
        out = np.empty_like(s)
        out[..., 0:2] = s[..., 0:2] + s[..., 2:4] * dt
        out[..., 2:4] = s[..., 2:4] + a * dt
        return out

    @staticmethod
    def reward(s: np.ndarray, a: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        pos2 = (s[..., 0:2] ** 2).sum(axis=-1)
        act2 = (a ** 2).sum(axis=-1)
        return -(pos2 + 0.1 * act2)

    def reset(self, seed: int) -> np.ndarray:
        """Position uniform in [-1, 1]^2, velocity zero."""
        rng = substream(int(seed), "point_mass/reset")
        self.state = np.concatenate([rng.uniform(-1.0, 1.0, size=2), np.zeros(2)])
        self._t = 0
        return self.state.copy()

    def reset_to(self, state) -> np.ndarray:
        self.state = np.asarray(state, dtype=np.float64).reshape(4).copy()
        self._t = 0
        return self.state.copy()

    def step(self, a) -> tuple[np.ndarray, float, bool]:
        a = _check_action(a, self.spec.d_a)
        r = float(self.reward(self.state, a))
        self.state = self.transition(self.state, a)
        self._t += 1
        return self.state.copy(), r, self._t >= self.spec.episode_length


class Pendulum:
    """Torque-limited pendulum, angle measured from upright.

    theta'' = (g/l) sin(theta) + u / (m l^2) with g=10, l=1, m=1;
    explicit Euler at dt=0.05, angle wrapped to (-pi, pi].
    reward = -(theta^2 + 0.1 theta'^2 + 0.01 u^2).

    Gravity torque (up to 10) dwarfs the control bound (1), so the
    upright equilibrium is stabilizable only in a narrow basin; episodes
    start inside it. A controller fed stale or mispredicted actions
    drifts out and cannot recover, which is exactly the failure mode the
    mismatch gate and corrector exist to contain.
    """

    G = 10.0
    L = 1.0
    M = 1.0

    spec = EnvSpec("pendulum", d_s=2, d_a=1, episode_length=500, dt=0.05)

    def __init__(self, episode_length: int | None = None):
        if episode_length is not None:
            self.spec = EnvSpec("pendulum", 2, 1, int(episode_length), 0.05)
        self.state = np.zeros(2)
        self._t = 0

    @staticmethod
    def transition(s: np.ndarray, a: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        dt = Pendulum.spec.dt
        theta, omega = s[..., 0], s[..., 1]
        u = a[..., 0]
        alpha = (Pendulum.G / Pendulum.L) * np.sin(theta) + u / (Pendulum.M * Pendulum.L ** 2)
        out = np.empty_like(s)
        out[..., 0] = wrap_angle(theta + dt * omega)
        out[..., 1] = omega + dt * alpha
        return out

    @staticmethod
    def reward(s: np.ndarray, a: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        theta, omega = s[..., 0], s[..., 1]
        u = a[..., 0]
        return -(theta ** 2 + 0.1 * omega ** 2 + 0.01 * u ** 2)

    @staticmethod
    def energy(s: np.ndarray) -> np.ndarray:
        """Mechanical energy 0.5 omega^2 + (g/l) cos(theta), per unit m l^2."""
        s = np.asarray(s, dtype=np.float64)
        return 0.5 * s[..., 1] ** 2 + (Pendulum.G / Pendulum.L) * np.cos(s[..., 0])

    def reset(self, seed: int) -> np.ndarray:
        """Start near upright: theta in [-0.06, 0.06], omega in [-0.15, 0.15]."""
        rng = substream(int(seed), "pendulum/reset")
        self.state = np.array([rng.uniform(-0.06, 0.06), rng.uniform(-0.15, 0.15)])
        self._t = 0
        return self.state.copy()

    def reset_to(self, state) -> np.ndarray:
        self.state = np.asarray(state, dtype=np.float64).reshape(2).copy()
        self._t = 0
        return self.state.copy()

    def step(self, a) -> tuple[np.ndarray, float, bool]:
        a = _check_action(a, self.spec.d_a)
        r = float(self.reward(self.state, a))
        self.state = self.transition(self.state, a)
        self._t += 1
        return self.state.copy(), r, self._t >= self.spec.episode_length


ENV_CLASSES = {"point_mass": PointMass, "pendulum": Pendulum}


def make_env(name: str, episode_length: int | None = None):
    if name not in ENV_CLASSES:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENV_CLASSES)}")
    return ENV_CLASSES[name](episode_length=episode_length)
