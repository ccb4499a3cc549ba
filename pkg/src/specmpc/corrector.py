"""Residual action correctors that recycle near-miss speculative steps.

When the latent a plan predicted for the current step disagrees only
mildly with the encoded real state, replanning is wasteful: the queued
action is almost right. A corrector maps the disagreement to a small
residual, applied on top of the queued action and clipped to bounds.

Two architectures with complementary biases:

* ``GatedCorrector`` -- two towers over the real and predicted latents,
  an explicit difference pathway, an action embedding, and a fused
  trunk; a scalar gate in [0, 1] scales the residual so the network can
  act as the identity when the mismatch carries no signal.
* ``TemporalCorrector`` -- self-attention over the last K mismatch
  features (zero-padded after resets), reading the residual off the
  most recent position; built to pick up accumulating drift that a
  single-step view cannot see.

Residual heads are zero-initialized in both, so an untrained corrector
is exactly a no-op. Training distills a replanning teacher: the target
for each recorded step is the first action of a fresh plan from the
real latent, and the loss penalizes residual magnitude as well.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Node, substream


@dataclass
class MismatchFeature:
    z_real: np.ndarray
    z_hat: np.ndarray
    a_spec: np.ndarray

    @property
    def delta_z(self) -> np.ndarray:
        # always recomputed; never cached
        return self.z_real - self.z_hat

    def vector(self) -> np.ndarray:
        return np.concatenate([self.z_real, self.z_hat, self.delta_z, self.a_spec])


class HistoryBuffer:
    """Last K mismatch features, oldest first, zero-padded when short.

    Cleared on episode reset and on fallback flush so the window never
    spans a replanning discontinuity.
    """

    def __init__(self, K: int, d_z: int, d_a: int):
        if K < 1:
            raise ValueError("history length K must be >= 1")
        self.K = K
        self.d_z, self.d_a = d_z, d_a
        self._items: list[MismatchFeature] = []

    def __len__(self):
        return len(self._items)

    def append(self, f: MismatchFeature) -> None:
        self._items.append(f)
        if len(self._items) > self.K:
            self._items.pop(0)

    def clear(self) -> None:
        self._items.clear()

    def last(self) -> MismatchFeature | None:
        return self._items[-1] if self._items else None

    def window(self) -> np.ndarray:
        """(K, 3 d_z + d_a) array; leading rows are zero padding."""
        width = 3 * self.d_z + self.d_a
        out = np.zeros((self.K, width))
        for i, f in enumerate(self._items):
            out[self.K - len(self._items) + i] = f.vector()
        return out


def apply_correction(a_spec: np.ndarray, delta_a: np.ndarray) -> np.ndarray:
    """Componentwise clip of a_spec + delta_a to [-1, 1]."""
    a_spec = np.asarray(a_spec, dtype=np.float64)
    delta_a = np.asarray(delta_a, dtype=np.float64)
    if a_spec.shape != delta_a.shape:
        raise ValueError(f"shape mismatch: {a_spec.shape} vs {delta_a.shape}")
    return np.clip(a_spec + delta_a, -1.0, 1.0)


def _dense(rng, p, name, fan_in, fan_out, zero=False):
    p[f"{name}_w"] = (np.zeros((fan_in, fan_out)) if zero
                      else rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
    p[f"{name}_b"] = np.zeros((1, fan_out))


class GatedCorrector:
    arch = "gated"

    def __init__(self, d_z: int, d_a: int, hidden: int = 64, seed: int = 0):
        self.d_z, self.d_a, self.hidden = int(d_z), int(d_a), int(hidden)
        rng = substream(int(seed), "gated-corrector-init")
        p: dict[str, np.ndarray] = {}
        _dense(rng, p, "tower_real", d_z, hidden)
        _dense(rng, p, "tower_pred", d_z, hidden)
        _dense(rng, p, "mismatch", d_z, hidden)
        _dense(rng, p, "action", d_a, hidden)
        _dense(rng, p, "fuse1", 4 * hidden, hidden)
        _dense(rng, p, "fuse2", hidden, hidden)
        _dense(rng, p, "res", hidden, d_a, zero=True)
        _dense(rng, p, "gate", hidden, 1)
        p["gate_b"][:] = -2.0  # start near-identity: small gate until trained
        self.params = p

    def forward_nodes(self, p: dict[str, Node], z_real: Node, z_hat: Node,
                      a_spec: Node) -> tuple[Node, Node]:
        """Batched residual and gate; inputs are (B, dim) nodes."""
        def branch(x, name):
            return T.tanh(T.add(T.matmul(x, p[f"{name}_w"]), p[f"{name}_b"]))

        delta_z = T.sub(z_real, z_hat)
        h = T.concat_cols([branch(z_real, "tower_real"), branch(z_hat, "tower_pred"),
                           branch(delta_z, "mismatch"), branch(a_spec, "action")])
        h = T.tanh(T.add(T.matmul(h, p["fuse1_w"]), p["fuse1_b"]))
        h = T.tanh(T.add(T.matmul(h, p["fuse2_w"]), p["fuse2_b"]))
        res = T.add(T.matmul(h, p["res_w"]), p["res_b"])
        gate = T.sigmoid(T.add(T.matmul(h, p["gate_w"]), p["gate_b"]))
        return T.mul(gate, res), gate

    def correct(self, f: MismatchFeature) -> tuple[np.ndarray, float]:
        """Residual and gate value for one feature."""
        p = T.params_to_nodes(self.params)
        delta, gate = self.forward_nodes(p, Node(f.z_real.reshape(1, -1)),
                                         Node(f.z_hat.reshape(1, -1)),
                                         Node(f.a_spec.reshape(1, -1)))
        return delta.value[0], float(gate.value[0, 0])

    def residual(self, history: HistoryBuffer) -> np.ndarray:
        f = history.last()
        if f is None:
            return np.zeros(self.d_a)
        return self.correct(f)[0]

    def batch_residual_nodes(self, p, batch: dict[str, np.ndarray]) -> Node:
        delta, _ = self.forward_nodes(p, Node(batch["z_real"]), Node(batch["z_hat"]),
                                      Node(batch["a_spec"]))
        return delta

    def meta(self) -> dict:
        return {"d_z": self.d_z, "d_a": self.d_a, "hidden": self.hidden}


class TemporalCorrector:
    arch = "temporal"

    def __init__(self, d_z: int, d_a: int, K: int = 4, hidden: int = 64,
                 n_blocks: int = 1, seed: int = 0):
        self.d_z, self.d_a = int(d_z), int(d_a)
        self.K, self.hidden, self.n_blocks = int(K), int(hidden), int(n_blocks)
        feat = 3 * self.d_z + self.d_a
        rng = substream(int(seed), "temporal-corrector-init")
        p: dict[str, np.ndarray] = {}
        _dense(rng, p, "embed", feat, hidden)
        p["pos"] = 0.1 * rng.standard_normal((self.K, hidden))
        for b in range(self.n_blocks):
            for nm in ("q", "k", "v", "o"):
                _dense(rng, p, f"blk{b}_{nm}", hidden, hidden)
            _dense(rng, p, f"blk{b}_ff1", hidden, 2 * hidden)
            _dense(rng, p, f"blk{b}_ff2", 2 * hidden, hidden)
        _dense(rng, p, "res", hidden, d_a, zero=True)
        self.params = p

    def forward_nodes(self, p: dict[str, Node], windows: np.ndarray,
                      attn_out: list | None = None) -> Node:
        """Residual for a batch of (B, K, feat) windows.

        Each window position becomes a (B, hidden) stream; attention
        weights are softmax over the K positions per query. The residual
        is read from the final (most recent) position.
        """
        B, K, _ = windows.shape
        if K != self.K:
            raise ValueError(f"window length {K} != {self.K}")
        scale = 1.0 / np.sqrt(self.hidden)
        xs = []
        for k in range(K):
            e = T.tanh(T.add(T.matmul(Node(windows[:, k, :]), p["embed_w"]),
                             p["embed_b"]))
            xs.append(T.add(e, T.slice_rows(p["pos"], k, k + 1)))
        for b in range(self.n_blocks):
            q = [T.matmul(x, p[f"blk{b}_q_w"]) for x in xs]
            ky = [T.matmul(x, p[f"blk{b}_k_w"]) for x in xs]
            v = [T.matmul(x, p[f"blk{b}_v_w"]) for x in xs]
            new_xs = []
            for i in range(K):
                scores = T.concat_cols(
                    [T.scale(T.row_sum(T.mul(q[i], ky[j])), scale) for j in range(K)])
                w = T.softmax(scores)
                if attn_out is not None:
                    attn_out.append(w.value.copy())
                att = None
                for j in range(K):
                    term = T.mul(T.slice_cols(w, j, j + 1), v[j])
                    att = term if att is None else T.add(att, term)
                x = T.add(xs[i], T.matmul(att, p[f"blk{b}_o_w"]))
                ff = T.tanh(T.add(T.matmul(x, p[f"blk{b}_ff1_w"]), p[f"blk{b}_ff1_b"]))
                ff = T.add(T.matmul(ff, p[f"blk{b}_ff2_w"]), p[f"blk{b}_ff2_b"])
                new_xs.append(T.add(x, ff))
            xs = new_xs
        return T.add(T.matmul(xs[K - 1], p["res_w"]), p["res_b"])

    def residual(self, history: HistoryBuffer) -> np.ndarray:
        win = history.window()[None, :, :]
        p = T.params_to_nodes(self.params)
        return self.forward_nodes(p, win).value[0]

    def batch_residual_nodes(self, p, batch: dict[str, np.ndarray]) -> Node:
        return self.forward_nodes(p, batch["windows"])

    def meta(self) -> dict:
        return {"d_z": self.d_z, "d_a": self.d_a, "K": self.K,
                "hidden": self.hidden, "n_blocks": self.n_blocks}


CORRECTOR_ARCHS = {"gated", "temporal"}


def make_corrector(arch: str, d_z: int, d_a: int, hidden: int = 64, K: int = 4,
                   seed: int = 0):
    if arch == "gated":
        return GatedCorrector(d_z, d_a, hidden=hidden, seed=seed)
    if arch == "temporal":
        return TemporalCorrector(d_z, d_a, K=K, hidden=hidden, seed=seed)
    raise ValueError(f"unknown corrector arch {arch!r}")


def save_corrector(path, c) -> None:
    T.save_params_json(path, c.params, arch=c.arch, meta=c.meta())


def load_corrector(path):
    params, arch, meta = T.load_params_json(path)
    if arch == "gated":
        c = GatedCorrector(meta["d_z"], meta["d_a"], hidden=meta["hidden"])
    elif arch == "temporal":
        c = TemporalCorrector(meta["d_z"], meta["d_a"], K=meta["K"],
                              hidden=meta["hidden"], n_blocks=meta["n_blocks"])
    else:
        raise ValueError(f"checkpoint arch {arch!r} is not a corrector")
    c.params = params
    return c


# ---------------------------------------------------------------------------
# Distillation data


@dataclass
class DistillationDataset:
    """Per-step mismatch features with replanning-teacher targets.

    Rows are ordered by (episode, t). Gaps in t within an episode mark
    fallback flushes; attention windows never cross them.
    """

    episode: np.ndarray  # (n,) int
    t: np.ndarray        # (n,) int
    z_real: np.ndarray   # (n, d_z)
    z_hat: np.ndarray    # (n, d_z)
    a_spec: np.ndarray   # (n, d_a)
    a_star: np.ndarray   # (n, d_a)

    def __len__(self):
        return self.episode.shape[0]

    @property
    def d_z(self):
        return self.z_real.shape[1]

    @property
    def d_a(self):
        return self.a_spec.shape[1]

    def segments(self) -> list[np.ndarray]:
        """Index runs that are contiguous in (episode, t)."""
        segs, start = [], 0
        for i in range(1, len(self) + 1):
            if (i == len(self) or self.episode[i] != self.episode[i - 1]
                    or self.t[i] != self.t[i - 1] + 1):
                segs.append(np.arange(start, i))
                start = i
        return segs

    def windows(self, K: int) -> np.ndarray:
        """(n, K, 3 d_z + d_a) trailing windows, zero-padded at segment starts."""
        width = 3 * self.d_z + self.d_a
        feats = np.concatenate(
            [self.z_real, self.z_hat, self.z_real - self.z_hat, self.a_spec], axis=1)
        out = np.zeros((len(self), K, width))
        for seg in self.segments():
            for pos, i in enumerate(seg):
                take = seg[max(0, pos - K + 1):pos + 1]
                out[i, K - take.size:] = feats[take]
        return out

    def unroll_windows(self, unroll_n: int) -> np.ndarray:
        """(m, unroll_n) index windows of consecutive steps within segments."""
        if unroll_n < 1 or unroll_n > 5:
            raise ValueError("unroll_n must be in 1..5")
        rows = []
        for seg in self.segments():
            for i in range(len(seg) - unroll_n + 1):
                rows.append(seg[i:i + unroll_n])
        if not rows:
            raise ValueError(f"no unroll windows of length {unroll_n}; "
                             "segments too short")
        return np.stack(rows)

    def save_csv(self, path) -> None:
        d_z, d_a = self.d_z, self.d_a
        header = (["episode", "t"] + [f"z_real{i}" for i in range(d_z)]
                  + [f"z_hat{i}" for i in range(d_z)]
                  + [f"a_spec{i}" for i in range(d_a)]
                  + [f"a_star{i}" for i in range(d_a)])
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(header)
            for i in range(len(self)):
                w.writerow([int(self.episode[i]), int(self.t[i])]
                           + [repr(float(x)) for x in self.z_real[i]]
                           + [repr(float(x)) for x in self.z_hat[i]]
                           + [repr(float(x)) for x in self.a_spec[i]]
                           + [repr(float(x)) for x in self.a_star[i]])

    @classmethod
    def load_csv(cls, path) -> "DistillationDataset":
        with open(path, "r", newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader)
            rows = [row for row in reader]
        d_z = sum(1 for h in header if h.startswith("z_real"))
        d_a = sum(1 for h in header if h.startswith("a_spec"))
        arr = np.asarray([[float(x) for x in row] for row in rows])
        if arr.size == 0:
            arr = arr.reshape(0, 2 + 2 * d_z + 2 * d_a)
        j = 2
        return cls(episode=arr[:, 0].astype(int), t=arr[:, 1].astype(int),
                   z_real=arr[:, j:j + d_z], z_hat=arr[:, j + d_z:j + 2 * d_z],
                   a_spec=arr[:, j + 2 * d_z:j + 2 * d_z + d_a],
                   a_star=arr[:, j + 2 * d_z + d_a:])


def collect_distillation_data(env, model, planner_cfg, spec_cfg, n_episodes: int,
                              seed: int = 0):
    """Run gated speculation (corrector off) and label accepted steps.

    Every step whose mismatch passes the gate is recorded together with
    the teacher action: the first action of a fresh plan from the real
    latent. Teacher planning happens outside the run's telemetry and
    without advancing the model's canonical noise stream.

    Returns (dataset, stats) where stats carries the observed mismatch
    quantiles used to pick thresholds.
    """
    from .planner import plan
    from .runtime import SpeculativeRunner

    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    cfg = spec_cfg.replace(corrector_enabled=False)
    rows = {k: [] for k in ("episode", "t", "z_real", "z_hat", "a_spec", "a_star")}
    all_d: list[float] = []

    for ep in range(n_episodes):
        ep_seed = T.derive_seed(int(seed), f"collect-episode-{ep}")
        runner = SpeculativeRunner(env, model, planner_cfg, cfg, corrector=None,
                                   seed=ep_seed)

        def on_accept(ctx, ep=ep, runner=runner):
            with model.noise_preserved():
                teacher = plan(model, ctx.z_real, planner_cfg, runner.planner_seed)
            rows["episode"].append(ep)
            rows["t"].append(ctx.t)
            rows["z_real"].append(ctx.z_real.copy())
            rows["z_hat"].append(ctx.z_hat.copy())
            rows["a_spec"].append(ctx.a_spec.copy())
            rows["a_star"].append(teacher.actions[0].copy())

        runner.on_accept = on_accept
        _trace, tel = runner.run()
        all_d.extend(tel.d_series)

    n = len(rows["episode"])
    data = DistillationDataset(
        episode=np.asarray(rows["episode"], dtype=int),
        t=np.asarray(rows["t"], dtype=int),
        z_real=np.stack(rows["z_real"]) if n else np.zeros((0, model.d_z)),
        z_hat=np.stack(rows["z_hat"]) if n else np.zeros((0, model.d_z)),
        a_spec=np.stack(rows["a_spec"]) if n else np.zeros((0, model.d_a)),
        a_star=np.stack(rows["a_star"]) if n else np.zeros((0, model.d_a)))
    d_arr = np.asarray(all_d)
    residual = data.a_star - data.a_spec
    stats = {
        "samples": n,
        "steps": int(d_arr.size),
        "d_quantiles": {q: float(np.quantile(d_arr, q / 100.0))
                        for q in (10, 30, 50, 70, 90)} if d_arr.size else {},
        "mean_abs_residual": float(np.abs(residual).mean()) if n else 0.0,
    }
    return data, stats


# ---------------------------------------------------------------------------
# Training


def _loss_nodes(corrector, p, idx: np.ndarray, data: DistillationDataset,
                windows: np.ndarray | None, lam: float) -> Node:
    """Mean over samples of |clip(a_spec + d) - a*|^2 + lam |d|^2."""
    batch = {"z_real": data.z_real[idx], "z_hat": data.z_hat[idx],
             "a_spec": data.a_spec[idx]}
    if windows is not None:
        batch["windows"] = windows[idx]
    delta = corrector.batch_residual_nodes(p, batch)
    corrected = T.clip(T.add(Node(data.a_spec[idx]), delta), -1.0, 1.0)
    err = T.sub(corrected, Node(data.a_star[idx]))
    fid = T.row_sum(T.mul(err, err))
    reg = T.row_sum(T.mul(delta, delta))
    return T.mean(T.add(fid, T.scale(reg, lam)))


def holdout_fidelity(corrector, data: DistillationDataset, idx: np.ndarray,
                     windows: np.ndarray | None = None):
    """(corrected_mse, uncorrected_mse) against teacher actions on idx."""
    if corrector.arch == "temporal" and windows is None:
        windows = data.windows(corrector.K)
    p = T.params_to_nodes(corrector.params)
    batch = {"z_real": data.z_real[idx], "z_hat": data.z_hat[idx],
             "a_spec": data.a_spec[idx]}
    if windows is not None:
        batch["windows"] = windows[idx]
    delta = corrector.batch_residual_nodes(p, batch).value
    corrected = np.clip(data.a_spec[idx] + delta, -1.0, 1.0)
    corr = float(((corrected - data.a_star[idx]) ** 2).sum(axis=1).mean())
    plain = float(((data.a_spec[idx] - data.a_star[idx]) ** 2).sum(axis=1).mean())
    return corr, plain


def train_corrector(data: DistillationDataset, arch: str, lam: float = 1e-3,
                    epochs: int = 600, lr: float = 1e-3, unroll_n: int = 1,
                    seed: int = 0, hidden: int = 64, K: int = 4,
                    batch_size: int = 256, holdout_frac: float = 0.2):
    """Distill the replanning teacher into a corrector.

    Minibatch Adam with cosine-decayed learning rate. With unroll_n > 1
    each batch element is a run of consecutive recorded steps and
    contributes the mean of its per-step losses; features are replayed
    from the recorded trace, not re-simulated.

    Returns (corrector, history) with history rows (train, holdout).
    """
    if len(data) == 0:
        raise ValueError("empty distillation dataset")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    corrector = make_corrector(arch, data.d_z, data.d_a, hidden=hidden, K=K,
                               seed=T.derive_seed(int(seed), "corrector-init"))
    windows = data.windows(K) if arch == "temporal" else None

    n = len(data)
    n_hold = int(round(n * holdout_frac))
    train_mask = np.zeros(n, dtype=bool)
    train_mask[:n - n_hold] = True
    hold_idx = np.arange(n - n_hold, n)

    if unroll_n > 1:
        all_windows = data.unroll_windows(unroll_n)
        keep = train_mask[all_windows].all(axis=1)
        units = all_windows[keep]
    else:
        units = np.flatnonzero(train_mask).reshape(-1, 1)
    if units.shape[0] == 0:
        raise ValueError("no training samples after holdout split")

    rng = substream(int(seed), "train-corrector")
    opt = T.Adam(corrector.params, lr=lr)
    per_batch = max(1, batch_size // unroll_n)
    steps_per_epoch = int(np.ceil(units.shape[0] / per_batch))
    total_steps = max(1, epochs * steps_per_epoch)

    history = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(units.shape[0])
        epoch_losses = []
        for b in range(steps_per_epoch):
            pick = units[order[b * per_batch:(b + 1) * per_batch]]
            idx = pick.reshape(-1)
            p = T.params_to_nodes(corrector.params)
            loss = _loss_nodes(corrector, p, idx, data, windows, lam)
            T.backward(loss)
            opt.step({k: v.grad for k, v in p.items()},
                     lr=T.cosine_lr(lr, step, total_steps))
            step += 1
            epoch_losses.append(loss.value[0, 0])
        if hold_idx.size:
            hold = _loss_nodes(corrector, T.params_to_nodes(corrector.params),
                               hold_idx, data, windows, lam).value[0, 0]
        else:
            hold = float("nan")
        history.append((float(np.mean(epoch_losses)), float(hold)))
    return corrector, history
