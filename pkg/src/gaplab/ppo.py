"""PPO-Clip with GAE(lambda) advantages.

Rewards are divided by ``reward_scale`` inside the losses only; every curve
and return reported to callers is in raw simulator units.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .encoder import EmbedderSpec, embed
from .neuralnet import (
    AdamState,
    GradientBundle,
    PolicyParams,
    apply_update,
    backward,
    clip_by_global_norm,
    forward,
    init_params,
    log_softmax,
    policy_value,
    sample_action,
)
from .simulator import Event, LocalSimBackend


class NonFiniteLoss(FloatingPointError):
    def __init__(self, minibatch: int, epoch: int):
        super().__init__(f"non-finite loss in epoch {epoch}, minibatch {minibatch}")
        self.minibatch = minibatch
        self.epoch = epoch


@dataclass(frozen=True)
class PPOConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch: int = 64
    lr: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    episodes: int = 500
    episodes_per_update: int = 4
    reward_scale: float = 100.0
    normalize_advantages: bool = True
    # normalization divides by max(std, floor): rescales large advantages but
    # never inflates near-zero ones into unit-variance noise
    adv_std_floor: float = 0.0
    max_grad_norm: float | None = 0.5
    # stop the remaining epochs once a minibatch's approximate KL exceeds 1.5 * target_kl
    target_kl: float | None = None
    hidden: tuple[int, ...] = (128, 64)

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must be in (0, 1)")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.epochs < 1 or self.minibatch < 1 or self.episodes_per_update < 1:
            raise ValueError("epochs, minibatch and episodes_per_update must be >= 1")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if self.lr <= 0 or self.reward_scale <= 0:
            raise ValueError("lr and reward_scale must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PPOConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class Trajectory:
    states: np.ndarray  # (T, d)
    actions: np.ndarray  # (T,) int64
    rewards: np.ndarray  # (T,) raw simulator units
    log_probs: np.ndarray  # (T,) under the behaviour policy
    values: np.ndarray  # (T,) critic output, in scaled units
    dones: np.ndarray  # (T,) float 0/1
    success: bool = False

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())


# ---------------------------------------------------------------------------
# rollouts

class StateEncoder:
    """Caches the embedding per distinct observation."""

    def __init__(self, spec: EmbedderSpec | None = None):
        self.spec = spec or EmbedderSpec()
        self._cache: dict[int, tuple[object, np.ndarray]] = {}

    def __call__(self, obs) -> np.ndarray:
        hit = self._cache.get(id(obs))
        if hit is not None and hit[0] is obs:
            return hit[1]
        vec = embed(obs.text, self.spec)
        self._cache[id(obs)] = (obs, vec)
        return vec


def run_episode(
    env: LocalSimBackend,
    params: PolicyParams,
    rng: np.random.Generator | None,
    encoder: StateEncoder,
    greedy: bool = False,
    seed: int | None = 0,
) -> Trajectory:
    if env.catalog.size != params.n_actions:
        raise ValueError(f"actor head has {params.n_actions} outputs, catalog has {env.catalog.size} actions")
    obs = env.reset(seed)
    states, actions, rewards, logps, values, dones = [], [], [], [], [], []
    success = False
    done = False
    while not done:
        s = encoder(obs)
        logits, v = policy_value(params, s)
        a, lp = sample_action(logits, rng, greedy=greedy)
        out = env.step(a)
        states.append(s)
        actions.append(a)
        rewards.append(out.reward)
        logps.append(lp)
        values.append(v)
        dones.append(1.0 if out.done else 0.0)
        success = success or out.event is Event.COMPROMISED
        obs, done = out.observation, out.done
    return Trajectory(
        np.array(states),
        np.array(actions, dtype=np.int64),
        np.array(rewards, dtype=np.float64),
        np.array(logps),
        np.array(values),
        np.array(dones),
        success,
    )


def collect(
    env: LocalSimBackend,
    params: PolicyParams,
    n_episodes: int,
    rng: np.random.Generator,
    encoder: StateEncoder | None = None,
    greedy: bool = False,
) -> list[Trajectory]:
    encoder = encoder or StateEncoder()
    return [run_episode(env, params, rng, encoder, greedy=greedy) for _ in range(n_episodes)]


# ---------------------------------------------------------------------------
# advantages

def compute_advantages(
    trajectories: Trajectory | Sequence[Trajectory],
    gamma: float,
    lam: float,
    reward_scale: float = 1.0,
    normalize: bool = True,
    std_floor: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """GAE over each trajectory, concatenated.  Returns (advantages, returns).

    ``returns = advantages + values`` is computed before normalization.
    """
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    advs, rets = [], []
    for tr in trajectories:
        next_values = np.append(tr.values[1:], 0.0)
        adv = _kernels.gae(tr.rewards / reward_scale, tr.values, next_values, tr.dones, gamma, lam)
        advs.append(adv)
        rets.append(adv + tr.values)
    adv = np.concatenate(advs) if advs else np.zeros(0)
    ret = np.concatenate(rets) if rets else np.zeros(0)
    if normalize and adv.size > 1:
        adv = (adv - adv.mean()) / max(adv.std() + 1e-8, std_floor)
    return adv, ret


# ---------------------------------------------------------------------------
# objective

@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    log_probs_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    def subset(self, idx: np.ndarray) -> "Batch":
        return Batch(self.states[idx], self.actions[idx], self.log_probs_old[idx], self.advantages[idx], self.returns[idx])


def make_batch(trajectories: Sequence[Trajectory], cfg: PPOConfig) -> Batch:
    adv, ret = compute_advantages(
        trajectories, cfg.gamma, cfg.gae_lambda, cfg.reward_scale, cfg.normalize_advantages, cfg.adv_std_floor
    )
    return Batch(
        np.concatenate([t.states for t in trajectories]),
        np.concatenate([t.actions for t in trajectories]),
        np.concatenate([t.log_probs for t in trajectories]),
        adv,
        ret,
    )


def clipped_surrogate(ratio: np.ndarray, adv: np.ndarray, eps: float) -> np.ndarray:
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def ppo_objective(
    params: PolicyParams, batch: Batch, cfg: PPOConfig, need_grad: bool = True
) -> tuple[dict, GradientBundle | None]:
    """Objective to maximize and its gradient.

    J = mean(min(r A, clip(r) A)) - value_coef * mean((V - R)^2) + entropy_coef * mean(H)
    """
    n = len(batch)
    cache = forward(params, batch.states)
    logp_all = log_softmax(cache.logits)
    probs = np.exp(logp_all)
    rows = np.arange(n)
    logp = logp_all[rows, batch.actions]
    ratio = np.exp(logp - batch.log_probs_old)
    adv = batch.advantages
    surr = clipped_surrogate(ratio, adv, cfg.clip_eps)
    entropy = -(probs * logp_all).sum(axis=1)
    verr = cache.values - batch.returns
    policy_term = float(surr.mean())
    value_loss = float(np.mean(verr * verr))
    ent = float(entropy.mean())
    stats = {
        "objective": policy_term - cfg.value_coef * value_loss + cfg.entropy_coef * ent,
        "policy_loss": -policy_term,
        "value_loss": value_loss,
        "entropy": ent,
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
        "approx_kl": float(np.mean((ratio - 1.0) - (logp - batch.log_probs_old))),
        "max_ratio_dev": float(np.max(np.abs(ratio - 1.0))) if n else 0.0,
    }
    if not need_grad:
        return stats, None
    # d surr / d logp: r*A where the unclipped branch is the active minimum, else 0
    unclipped = ratio * adv <= np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv
    g = np.where(unclipped, ratio * adv, 0.0)
    dlogits = -probs * g[:, None]
    dlogits[rows, batch.actions] += g
    dlogits -= cfg.entropy_coef * probs * (logp_all + entropy[:, None])
    dlogits /= n
    dvalues = -2.0 * cfg.value_coef * verr / n
    return stats, backward(params, cache, dlogits, dvalues)


def ppo_update(
    params: PolicyParams,
    trajectories: Sequence[Trajectory],
    cfg: PPOConfig,
    rng: np.random.Generator,
    opt: AdamState | None = None,
) -> tuple[PolicyParams, dict]:
    if not trajectories:
        raise ValueError("ppo_update needs at least one trajectory")
    opt = opt if opt is not None else AdamState()
    batch = make_batch(trajectories, cfg)
    n = len(batch)
    totals = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_frac": 0.0}
    count = 0
    first_ratio_dev = None
    stopped = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for mb, start in enumerate(range(0, n, cfg.minibatch)):
            idx = order[start:start + cfg.minibatch]
            stats, grads = ppo_objective(params, batch.subset(idx), cfg)
            if first_ratio_dev is None:
                first_ratio_dev = stats["max_ratio_dev"]
            if not np.isfinite(stats["objective"]) or not grads.is_finite():
                raise NonFiniteLoss(mb, epoch)
            if cfg.target_kl is not None and stats["approx_kl"] > 1.5 * cfg.target_kl:
                stopped = True
                break
            grads = clip_by_global_norm(grads, cfg.max_grad_norm)
            params = apply_update(params, grads, cfg.lr, "adam", opt)
            for k in totals:
                totals[k] += stats[k]
            count += 1
        if stopped:
            break
    out = {k: v / max(count, 1) for k, v in totals.items()}
    out["n_steps"] = count
    out["first_ratio_dev"] = first_ratio_dev
    out["n_samples"] = n
    return params, out


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    params: PolicyParams
    learning_curve: list[float]
    steps: list[int]
    successes: list[bool]
    wall_time: float
    episode_times: list[float] = field(default_factory=list)  # cumulative seconds after each episode
    update_stats: list[dict] = field(default_factory=list)

    def curve_rows(self) -> list[tuple[int, float, int, int]]:
        return [(i, r, s, int(ok)) for i, (r, s, ok) in enumerate(zip(self.learning_curve, self.steps, self.successes))]


def seed_streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def train(
    env: LocalSimBackend,
    cfg: PPOConfig,
    seed: int,
    params: PolicyParams | None = None,
    embedder: EmbedderSpec | None = None,
    on_update: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Run ``cfg.episodes`` episodes, updating every ``cfg.episodes_per_update``."""
    encoder = StateEncoder(embedder)
    act_rng, shuffle_rng = seed_streams(seed, 2)
    if params is None:
        params = init_params(encoder.spec.d, env.catalog.size, cfg.hidden, seed=seed)
    opt = AdamState()
    curve, steps, succ, times, ustats = [], [], [], [], []
    t0 = time.perf_counter()
    pending: list[Trajectory] = []
    for ep in range(cfg.episodes):
        tr = run_episode(env, params, act_rng, encoder, seed=ep)
        curve.append(tr.episode_return)
        steps.append(len(tr))
        succ.append(tr.success)
        pending.append(tr)
        if len(pending) == cfg.episodes_per_update or ep == cfg.episodes - 1:
            params, stats = ppo_update(params, pending, cfg, shuffle_rng, opt)
            stats["episode"] = ep
            ustats.append(stats)
            if on_update is not None:
                on_update(ep, stats)
            pending = []
        times.append(time.perf_counter() - t0)
    return TrainResult(params, curve, steps, succ, time.perf_counter() - t0, times, ustats)


def write_curve_csv(result: TrainResult, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("episode,return,steps,success\n")
        for ep, r, s, ok in result.curve_rows():
            fh.write(f"{ep},{r!r},{s},{ok}\n")


def write_stats_jsonl(result: TrainResult, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for st in result.update_stats:
            fh.write(json.dumps(st, sort_keys=True) + "\n")
