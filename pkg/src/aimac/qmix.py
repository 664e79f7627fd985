"""QMIX learner: per-agent Q networks, a state-conditioned monotonic mixer,
replay buffer and TD updates with hand-derived gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

CA_OBS_DIM = 9
RC_OBS_DIM = 3
STACK = 4
STATE_DIM = 12
HIDDEN = 64
MIX_HIDDEN = 32
N_CA_ACTIONS = 2
N_RC_ACTIONS = 12
AGENTS = ("ca", "rc")
CHECKPOINT_VERSION = 1

Params = Dict[str, np.ndarray]


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch: int = 64
    gamma_rl: float = 0.95
    target_sync: int = 200
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_steps: int = 50_000
    grad_clip: float = 10.0
    buffer_capacity: int = 50_000
    optimizer: str = "sgd"  # or "adam"
    env_steps: int = 200_000
    # environment steps per gradient step
    train_every: int = 4
    episode_seconds: float = 15.0
    eval_every: int = 4
    eval_seeds: int = 2
    eval_seconds: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if min(self.lr, self.batch, self.gamma_rl, self.target_sync, self.eps_steps) <= 0:
            raise ValueError("training hyperparameters must be positive")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ValueError("epsilon schedule must satisfy 0 <= end <= start <= 1")


def epsilon_at(step: int, cfg: Optional[TrainConfig] = None) -> float:
    cfg = cfg or TrainConfig()
    if step < 0:
        raise ValueError("step must be non-negative")
    frac = min(step / cfg.eps_steps, 1.0)
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


# parameter construction

def _uniform(rng, fan_in, shape, scale=1.0):
    lim = scale * math.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape)


def init_params(seed: int = 0, ca_in: int = CA_OBS_DIM * STACK, rc_in: int = RC_OBS_DIM * STACK,
                state_dim: int = STATE_DIM, hidden: int = HIDDEN, mix_hidden: int = MIX_HIDDEN) -> Params:
    rng = np.random.Generator(np.random.Philox(key=seed))
    p: Params = {}
    for name, n_in, n_out in (("ca", ca_in, N_CA_ACTIONS), ("rc", rc_in, N_RC_ACTIONS)):
        p[f"{name}.W1"] = _uniform(rng, n_in, (n_in, hidden))
        p[f"{name}.b1"] = np.zeros(hidden)
        p[f"{name}.W2"] = _uniform(rng, hidden, (hidden, n_out), 0.5)
        p[f"{name}.b2"] = np.zeros(n_out)
    n_agents = len(AGENTS)
    p["mix.hw1"] = _uniform(rng, state_dim, (state_dim, n_agents * mix_hidden), 0.3)
    p["mix.hb1"] = np.full(n_agents * mix_hidden, 0.3)
    p["mix.hwb"] = _uniform(rng, state_dim, (state_dim, mix_hidden), 0.3)
    p["mix.hbb"] = np.zeros(mix_hidden)
    p["mix.hw2"] = _uniform(rng, state_dim, (state_dim, mix_hidden), 0.3)
    p["mix.hb2"] = np.full(mix_hidden, 0.3)
    p["mix.v1"] = _uniform(rng, state_dim, (state_dim, mix_hidden), 0.3)
    p["mix.c1"] = np.zeros(mix_hidden)
    p["mix.v2"] = _uniform(rng, mix_hidden, (mix_hidden, 1), 0.3)
    p["mix.c2"] = np.zeros(1)
    return p


def sync_target(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def agent_params(params: Params, agent: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return (params[f"{agent}.W1"], params[f"{agent}.b1"],
            params[f"{agent}.W2"], params[f"{agent}.b2"])


# forward passes

def qnet_forward(qparams, obs) -> np.ndarray:
    """Action values for one observation vector or a batch of them."""
    W1, b1, W2, b2 = qparams
    x = np.asarray(obs, dtype=float)
    if x.shape[-1] != W1.shape[0]:
        raise ValueError(f"observation has dim {x.shape[-1]}, network expects {W1.shape[0]}")
    h = np.maximum(x @ W1 + b1, 0.0)
    return h @ W2 + b2


def mix(agent_qs, state, params: Params):
    """Joint value from the chosen per-agent values (batched or single)."""
    qs = np.atleast_2d(np.asarray(agent_qs, dtype=float))
    s = np.atleast_2d(np.asarray(state, dtype=float))
    out = _mix_forward(qs, s, params)[0]
    return out if np.ndim(agent_qs) > 1 else float(out[0])


def _mix_forward(qs, s, p):
    B, n = qs.shape
    pre_w1 = s @ p["mix.hw1"] + p["mix.hb1"]
    w1 = np.abs(pre_w1).reshape(B, n, -1)
    b1 = s @ p["mix.hwb"] + p["mix.hbb"]
    z = np.einsum("bi,bih->bh", qs, w1) + b1
    h = np.maximum(z, 0.0)
    pre_w2 = s @ p["mix.hw2"] + p["mix.hb2"]
    w2 = np.abs(pre_w2)
    pre_v = s @ p["mix.v1"] + p["mix.c1"]
    hv = np.maximum(pre_v, 0.0)
    b2 = (hv @ p["mix.v2"])[:, 0] + p["mix.c2"][0]
    q_tot = np.sum(h * w2, axis=1) + b2
    cache = (qs, s, pre_w1, w1, z, h, pre_w2, w2, pre_v, hv)
    return q_tot, cache


def _mix_backward(dq, cache, p, grads):
    qs, s, pre_w1, w1, z, h, pre_w2, w2, pre_v, hv = cache
    B, n = qs.shape
    # b2 hypernet
    grads["mix.c2"] += np.array([dq.sum()])
    grads["mix.v2"] += hv.T @ dq[:, None]
    dpre_v = (dq[:, None] * p["mix.v2"][:, 0][None, :]) * (pre_v > 0)
    grads["mix.v1"] += s.T @ dpre_v
    grads["mix.c1"] += dpre_v.sum(0)
    # output layer weights
    dpre_w2 = (dq[:, None] * h) * np.sign(pre_w2)
    grads["mix.hw2"] += s.T @ dpre_w2
    grads["mix.hb2"] += dpre_w2.sum(0)
    dz = (dq[:, None] * w2) * (z > 0)
    grads["mix.hwb"] += s.T @ dz
    grads["mix.hbb"] += dz.sum(0)
    dw1 = qs[:, :, None] * dz[:, None, :]
    dpre_w1 = dw1.reshape(B, -1) * np.sign(pre_w1)
    grads["mix.hw1"] += s.T @ dpre_w1
    grads["mix.hb1"] += dpre_w1.sum(0)
    return np.einsum("bih,bh->bi", w1, dz)


def _agent_forward(x, p, agent):
    W1, b1, W2, b2 = agent_params(p, agent)
    pre = x @ W1 + b1
    h = np.maximum(pre, 0.0)
    return h @ W2 + b2, (x, pre, h)


def _agent_backward(dq_all, cache, p, agent, grads):
    x, pre, h = cache
    grads[f"{agent}.W2"] += h.T @ dq_all
    grads[f"{agent}.b2"] += dq_all.sum(0)
    dpre = (dq_all @ p[f"{agent}.W2"].T) * (pre > 0)
    grads[f"{agent}.W1"] += x.T @ dpre
    grads[f"{agent}.b1"] += dpre.sum(0)


def joint_q(params: Params, batch: dict, nxt: bool = False) -> np.ndarray:
    """Q_tot of the batch's (state, obs, actions), or of the next state with
    per-agent greedy actions when ``nxt`` is set."""
    pre = "next_" if nxt else ""
    qs = []
    for agent in AGENTS:
        q_all, _ = _agent_forward(batch[f"{pre}obs_{agent}"], params, agent)
        a = q_all.argmax(1) if nxt else batch[f"act_{agent}"]
        qs.append(q_all[np.arange(len(a)), a])
    q_tot, _ = _mix_forward(np.stack(qs, 1), batch[f"{pre}state"], params)
    return q_tot


def td_targets(batch: dict, target: Params, gamma_rl: float) -> np.ndarray:
    q_next = joint_q(target, batch, nxt=True)
    return batch["r_tot"] + gamma_rl * (1.0 - batch["done"]) * q_next


def loss_and_grads(params: Params, batch: dict, y: np.ndarray):
    """Mean squared TD error against fixed targets ``y`` and its gradient."""
    B = len(y)
    idx = np.arange(B)
    caches = {}
    qs = []
    for agent in AGENTS:
        q_all, caches[agent] = _agent_forward(batch[f"obs_{agent}"], params, agent)
        qs.append(q_all[idx, batch[f"act_{agent}"]])
    q_tot, mcache = _mix_forward(np.stack(qs, 1), batch["state"], params)
    err = q_tot - y
    loss = float(np.mean(err ** 2))
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dq_tot = 2.0 * err / B
    dqs = _mix_backward(dq_tot, mcache, params, grads)
    for i, agent in enumerate(AGENTS):
        q_all_shape = (B, params[f"{agent}.b2"].shape[0])
        dq_all = np.zeros(q_all_shape)
        dq_all[idx, batch[f"act_{agent}"]] = dqs[:, i]
        _agent_backward(dq_all, caches[agent], params, agent, grads)
    return loss, grads


def clip_grads(grads: Params, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class Optimizer:
    """Plain SGD, or Adam when configured."""

    def __init__(self, params: Params, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        if cfg.optimizer == "adam":
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}
        elif cfg.optimizer != "sgd":
            raise ValueError(f"unknown optimizer {cfg.optimizer!r}")

    def step(self, params: Params, grads: Params) -> Params:
        lr = self.cfg.lr
        self.t += 1
        out = {}
        if self.cfg.optimizer == "sgd":
            for k, v in params.items():
                out[k] = v - lr * grads[k]
            return out
        b1, b2, eps = 0.9, 0.999, 1e-8
        for k, v in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mh = self.m[k] / (1 - b1 ** self.t)
            vh = self.v[k] / (1 - b2 ** self.t)
            out[k] = v - lr * mh / (np.sqrt(vh) + eps)
        return out


def td_step(batch: dict, params: Params, target: Params, cfg: TrainConfig,
            opt: Optional[Optimizer] = None):
    """One gradient step on the squared TD error. Returns (new params, loss)."""
    y = td_targets(batch, target, cfg.gamma_rl)
    loss, grads = loss_and_grads(params, batch, y)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"non-finite TD loss {loss}")
    clip_grads(grads, cfg.grad_clip)
    opt = opt or Optimizer(params, cfg)
    return opt.step(params, grads), loss


class ReplayBuffer:
    """Fixed-capacity ring of experiences stored column-wise."""

    def __init__(self, capacity: int = 50_000, ca_dim: int = CA_OBS_DIM * STACK,
                 rc_dim: int = RC_OBS_DIM * STACK, state_dim: int = STATE_DIM, seed: int = 0):
        self.capacity = capacity
        self.size = 0
        self.pos = 0
        self.rng = np.random.Generator(np.random.Philox(key=seed + 7919))
        self.data = {
            "state": np.zeros((capacity, state_dim)),
            "obs_ca": np.zeros((capacity, ca_dim)),
            "obs_rc": np.zeros((capacity, rc_dim)),
            "act_ca": np.zeros(capacity, dtype=np.int64),
            "act_rc": np.zeros(capacity, dtype=np.int64),
            "r_tot": np.zeros(capacity),
            "next_state": np.zeros((capacity, state_dim)),
            "next_obs_ca": np.zeros((capacity, ca_dim)),
            "next_obs_rc": np.zeros((capacity, rc_dim)),
            "done": np.zeros(capacity),
        }

    def __len__(self):
        return self.size

    def add(self, exp):
        d = self.data
        i = self.pos
        d["state"][i] = exp.global_state
        d["obs_ca"][i] = exp.obs_ca
        d["obs_rc"][i] = exp.obs_rc
        d["act_ca"][i] = exp.act_ca
        d["act_rc"][i] = exp.act_rc
        d["r_tot"][i] = exp.r_tot
        d["next_state"][i] = exp.next_global_state
        d["next_obs_ca"][i] = exp.next_obs_ca
        d["next_obs_rc"][i] = exp.next_obs_rc
        d["done"][i] = float(exp.done)
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int) -> dict:
        if n > self.size:
            raise ValueError(f"cannot sample {n} from a buffer holding {self.size}")
        idx = self.rng.integers(0, self.size, size=n)
        return {k: v[idx] for k, v in self.data.items()}


# checkpoints: npz container of named tensors; shapes travel in the npy headers

def save_checkpoint(path, params: Params, meta: Optional[dict] = None):
    arrays = {k: np.asarray(v) for k, v in params.items()}
    arrays["__version__"] = np.array([CHECKPOINT_VERSION])
    for k, v in (meta or {}).items():
        arrays[f"__meta__.{k}"] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Params:
    with np.load(Path(path)) as z:
        version = int(z["__version__"][0]) if "__version__" in z.files else None
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return {k: z[k].copy() for k in z.files if not k.startswith("__")}
