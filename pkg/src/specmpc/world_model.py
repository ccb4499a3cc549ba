"""Latent encoders and one-step dynamics models used by the planner.

Two families:

* ``PerturbedOracle`` wraps the true environment transition with an
  identity encoder, plus two error knobs: a constant per-step latent
  bias and white Gaussian noise. The knobs let prediction error be
  dialed exactly, separating systematic drift from local noise.
* ``LearnedWorldModel`` is a regression model (affine or MLP dynamics,
  quadratic-feature reward head) trained on transition datasets.

Only the canonical rollout that feeds the speculation queues consumes
the oracle's noise stream (``latent_step``); search uses the
deterministic ``latent_step_mean`` so plans stay replayable.
"""

from __future__ import annotations

import csv
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .envs import ENV_CLASSES, make_env
from .tensor import Node, substream


class PerturbedOracle:
    """True dynamics plus controllable prediction error.

    Latent space is the state space (identity encoder), so mismatch is
    measured in state units and the environment itself is ground truth.
    """

    def __init__(self, env_name: str, eps_bias=None, sigma_noise: float = 0.0,
                 seed: int = 0):
        if env_name not in ENV_CLASSES:
            raise ValueError(f"unknown environment {env_name!r}")
        cls = ENV_CLASSES[env_name]
        self.env_name = env_name
        self.d_z = cls.spec.d_s
        self.d_a = cls.spec.d_a
        self._transition = cls.transition
        self._reward = cls.reward
        if eps_bias is None:
            eps_bias = np.zeros(self.d_z)
        self.eps_bias = np.asarray(eps_bias, dtype=np.float64).reshape(self.d_z)
        if sigma_noise < 0:
            raise ValueError("sigma_noise must be >= 0")
        self.sigma_noise = float(sigma_noise)
        self._noise_rng = substream(int(seed), f"model-noise/{env_name}")

    def encode(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        if s.shape[-1] != self.d_z:
            raise ValueError(f"observation dim {s.shape[-1]} != {self.d_z}")
        return s.copy()

    def latent_step_mean(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Deterministic predicted transition: truth plus bias."""
        z = np.asarray(z, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        if z.shape[-1] != self.d_z:
            raise ValueError(f"latent dim {z.shape[-1]} != {self.d_z}")
        if a.shape[-1] != self.d_a:
            raise ValueError(f"action dim {a.shape[-1]} != {self.d_a}")
        return self._transition(z, a) + self.eps_bias

    def latent_step(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Canonical predicted transition; draws from the model's own stream."""
        out = self.latent_step_mean(z, a)
        if self.sigma_noise > 0.0:
            out = out + self.sigma_noise * self._noise_rng.standard_normal(out.shape[-1])
        return out

    def predict_reward(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        return self._reward(np.asarray(z, dtype=np.float64), np.asarray(a, dtype=np.float64))

    def noise_state(self):
        return self._noise_rng.bit_generator.state

    def set_noise_state(self, state) -> None:
        self._noise_rng.bit_generator.state = state

    @contextmanager
    def noise_preserved(self):
        """Run a block without advancing the canonical noise stream."""
        saved = self.noise_state()
        try:
            yield
        finally:
            self.set_noise_state(saved)


# ---------------------------------------------------------------------------
# Transition datasets


@dataclass
class Transitions:
    s: np.ndarray       # (n, d_s)
    a: np.ndarray       # (n, d_a)
    s_next: np.ndarray  # (n, d_s)
    r: np.ndarray       # (n,)

    def __len__(self):
        return self.s.shape[0]


def collect_transitions(env_name: str, n: int, seed: int = 0) -> Transitions:
    """Random-action rollouts; restarts episodes as needed."""
    env = make_env(env_name)
    rng = substream(int(seed), f"collect-transitions/{env_name}")
    d_s, d_a = env.spec.d_s, env.spec.d_a
    s = np.empty((n, d_s))
    a = np.empty((n, d_a))
    s_next = np.empty((n, d_s))
    r = np.empty(n)
    obs = env.reset(int(seed))
    for i in range(n):
        act = rng.uniform(-1.0, 1.0, size=d_a)
        nxt, rew, done = env.step(act)
        s[i], a[i], s_next[i], r[i] = obs, act, nxt, rew
        obs = env.reset(int(seed) + 1 + i) if done else nxt
    return Transitions(s, a, s_next, r)


def save_transitions(path, data: Transitions) -> None:
    d_s, d_a = data.s.shape[1], data.a.shape[1]
    header = ([f"s{i}" for i in range(d_s)] + [f"a{i}" for i in range(d_a)]
              + [f"s_next{i}" for i in range(d_s)] + ["r"])
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        for i in range(len(data)):
            row = [repr(x) for x in (*data.s[i], *data.a[i], *data.s_next[i], data.r[i])]
            w.writerow(row)


def load_transitions(path) -> Transitions:
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [list(map(float, row)) for row in reader]
    d_s = sum(1 for h in header if h.startswith("s") and not h.startswith("s_next"))
    d_a = sum(1 for h in header if h.startswith("a"))
    arr = np.asarray(rows, dtype=np.float64)
    return Transitions(arr[:, :d_s], arr[:, d_s:d_s + d_a],
                       arr[:, d_s + d_a:d_s + d_a + d_s], arr[:, -1])


# ---------------------------------------------------------------------------
# Learned model


def _reward_features(z: Node, a: Node) -> Node:
    """[z, a, z*z, a*a]; quadratic costs are linear in these."""
    return T.concat_cols([z, a, T.mul(z, z), T.mul(a, a)])


class LearnedWorldModel:
    """Regression world model: encoder, one-step dynamics, reward head.

    encoder: "identity" | "affine" | "mlp"; dynamics: "linear" | "mlp".
    The MLP dynamics predicts a residual on top of the current latent,
    which keeps the untrained model close to the identity map.
    """

    def __init__(self, d_s: int, d_a: int, d_z: int | None = None,
                 encoder: str = "identity", dynamics: str = "linear",
                 hidden: int = 64, seed: int = 0):
        self.d_s, self.d_a = int(d_s), int(d_a)
        self.d_z = int(d_z) if d_z is not None else self.d_s
        if encoder == "identity" and self.d_z != self.d_s:
            raise ValueError("identity encoder requires d_z == d_s")
        if encoder not in ("identity", "affine", "mlp"):
            raise ValueError(f"unknown encoder {encoder!r}")
        if dynamics not in ("linear", "mlp"):
            raise ValueError(f"unknown dynamics {dynamics!r}")
        self.encoder = encoder
        self.dynamics = dynamics
        self.hidden = int(hidden)
        rng = substream(int(seed), "learned-model-init")
        p: dict[str, np.ndarray] = {}

        def dense(name, fan_in, fan_out, zero=False):
            w = np.zeros((fan_in, fan_out)) if zero else \
                rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            p[f"{name}_w"] = w
            p[f"{name}_b"] = np.zeros((1, fan_out))

        if encoder == "affine":
            p["enc_w"] = np.eye(self.d_s, self.d_z)
            p["enc_b"] = np.zeros((1, self.d_z))
        elif encoder == "mlp":
            dense("enc1", self.d_s, hidden)
            dense("enc2", hidden, self.d_z)
        if dynamics == "linear":
            # identity-on-z start: untrained model predicts z' = z
            p["dyn_w"] = np.vstack([np.eye(self.d_z), np.zeros((self.d_a, self.d_z))])
            p["dyn_b"] = np.zeros((1, self.d_z))
        else:
            dense("dyn1", self.d_z + self.d_a, hidden)
            dense("dyn2", hidden, hidden)
            dense("dyn3", hidden, self.d_z, zero=True)
        dense("rew", self.d_z + self.d_a + self.d_z + self.d_a, 1, zero=True)
        self.params = p

    # -- forward graphs (shared by training and inference) ------------------

    def encode_node(self, s: Node, p: dict[str, Node]) -> Node:
        if self.encoder == "identity":
            return s
        if self.encoder == "affine":
            return T.add(T.matmul(s, p["enc_w"]), p["enc_b"])
        h = T.tanh(T.add(T.matmul(s, p["enc1_w"]), p["enc1_b"]))
        return T.add(T.matmul(h, p["enc2_w"]), p["enc2_b"])

    def dynamics_node(self, z: Node, a: Node, p: dict[str, Node]) -> Node:
        za = T.concat_cols([z, a])
        if self.dynamics == "linear":
            return T.add(T.matmul(za, p["dyn_w"]), p["dyn_b"])
        h = T.tanh(T.add(T.matmul(za, p["dyn1_w"]), p["dyn1_b"]))
        h = T.tanh(T.add(T.matmul(h, p["dyn2_w"]), p["dyn2_b"]))
        return T.add(z, T.add(T.matmul(h, p["dyn3_w"]), p["dyn3_b"]))

    def reward_node(self, z: Node, a: Node, p: dict[str, Node]) -> Node:
        phi = _reward_features(z, a)
        return T.add(T.matmul(phi, p["rew_w"]), p["rew_b"])

    # -- inference API (mirrors PerturbedOracle) -----------------------------

    def encode(self, s: np.ndarray) -> np.ndarray:
        s2 = np.atleast_2d(np.asarray(s, dtype=np.float64))
        if s2.shape[-1] != self.d_s:
            raise ValueError(f"observation dim {s2.shape[-1]} != {self.d_s}")
        out = self.encode_node(Node(s2), T.params_to_nodes(self.params)).value
        return out[0] if np.asarray(s).ndim == 1 else out

    def latent_step_mean(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        z2, a2 = np.atleast_2d(z).astype(float), np.atleast_2d(a).astype(float)
        if z2.shape[-1] != self.d_z or a2.shape[-1] != self.d_a:
            raise ValueError(f"dims ({z2.shape[-1]}, {a2.shape[-1]}) != "
                             f"({self.d_z}, {self.d_a})")
        p = T.params_to_nodes(self.params)
        out = self.dynamics_node(Node(z2), Node(a2), p).value
        return out[0] if np.asarray(z).ndim == 1 else out

    latent_step = latent_step_mean  # learned model has no noise channel

    def predict_reward(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        z2, a2 = np.atleast_2d(z).astype(float), np.atleast_2d(a).astype(float)
        p = T.params_to_nodes(self.params)
        out = self.reward_node(Node(z2), Node(a2), p).value[:, 0]
        return out[0] if np.asarray(z).ndim == 1 else out

    def noise_state(self):
        return None

    def set_noise_state(self, state) -> None:
        pass

    @contextmanager
    def noise_preserved(self):
        yield

    # -- persistence ---------------------------------------------------------

    def meta(self) -> dict:
        return {"d_s": self.d_s, "d_a": self.d_a, "d_z": self.d_z,
                "encoder": self.encoder, "dynamics": self.dynamics,
                "hidden": self.hidden}

    def save(self, path) -> None:
        T.save_params_json(path, self.params, arch="world_model", meta=self.meta())

    @classmethod
    def load(cls, path) -> "LearnedWorldModel":
        params, arch, meta = T.load_params_json(path)
        if arch != "world_model":
            raise ValueError(f"checkpoint arch {arch!r} is not a world model")
        model = cls(meta["d_s"], meta["d_a"], d_z=meta["d_z"], encoder=meta["encoder"],
                    dynamics=meta["dynamics"], hidden=meta["hidden"])
        model.params = params
        return model


def train_world_model(model: LearnedWorldModel, data: Transitions, epochs: int,
                      lr: float = 1e-3, batch_size: int | None = None,
                      seed: int = 0, holdout_frac: float = 0.0):
    """Minimize one-step latent MSE plus reward MSE by minibatch Adam.

    The latent target is the encoding of the observed next state; the
    reward term anchors the representation so a trainable encoder cannot
    collapse to zero. Returns per-epoch (train_loss, holdout_loss)
    history; holdout_loss is NaN when holdout_frac is 0.
    """
    n = len(data)
    if n == 0:
        raise ValueError("empty transition dataset")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    n_hold = int(round(n * holdout_frac))
    train_idx = np.arange(n - n_hold)
    hold_idx = np.arange(n - n_hold, n)
    if batch_size is None or batch_size >= train_idx.size:
        batch_size = train_idx.size
    rng = substream(int(seed), "train-world-model")
    opt = T.Adam(model.params, lr=lr)
    steps_per_epoch = int(np.ceil(train_idx.size / batch_size))
    total_steps = max(1, epochs * steps_per_epoch)

    def batch_loss(idx, params_nodes):
        s = Node(data.s[idx])
        a = Node(data.a[idx])
        s_next = Node(data.s_next[idx])
        r = Node(data.r[idx].reshape(-1, 1))
        z = model.encode_node(s, params_nodes)
        z_next = model.encode_node(s_next, params_nodes)
        pred = model.dynamics_node(z, a, params_nodes)
        rhat = model.reward_node(z, a, params_nodes)
        return T.add(T.mse(pred, z_next), T.mse(rhat, r))

    history = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(train_idx)
        epoch_losses = []
        for b in range(steps_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            nodes = T.params_to_nodes(model.params)
            loss = batch_loss(idx, nodes)
            T.backward(loss)
            grads = {k: v.grad for k, v in nodes.items()}
            opt.step(grads, lr=T.cosine_lr(lr, step, total_steps))
            step += 1
            epoch_losses.append(loss.value[0, 0])
        if n_hold > 0:
            hold = batch_loss(hold_idx, T.params_to_nodes(model.params)).value[0, 0]
        else:
            hold = float("nan")
        history.append((float(np.mean(epoch_losses)), float(hold)))
    return history
