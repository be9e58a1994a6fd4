"""First-order MAML over a family of environments that share one vulnerability.

Inner step: one REINFORCE-with-baseline ascent step of size alpha from theta.
Outer step: the policy gradient evaluated at each adapted phi'_i is applied
directly to theta (first-order approximation) and summed over tasks in fixed
order.

Randomness is split per (iteration, task, phase) with ``SeedSequence`` spawn
keys, so whether or not an inner rollout happens never shifts the draws used
by the outer rollout.  This is what makes the alpha=0 case reproduce a plain
joint policy-gradient run exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .encoder import EmbedderSpec
from .envmodel import ActionCatalog, EnvironmentFile
from .neuralnet import (
    AdamState,
    GradientBundle,
    PolicyParams,
    apply_update,
    backward,
    clip_by_global_norm,
    forward,
    log_softmax,
    save_checkpoint,
)
from .ppo import StateEncoder, Trajectory, collect
from .simulator import EpisodeBudget, LocalSimBackend, RewardSpec

INNER, OUTER = 0, 1


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 0.05
    outer_lr: float = 1e-3
    inner_episodes: int = 10
    meta_iterations: int = 100
    order: str = "first_order"
    outer_rule: str = "sgd"  # sgd | adam
    gamma: float = 0.99
    reward_scale: float = 100.0
    value_coef: float = 0.5
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr <= 0:
            raise ValueError("need inner_lr >= 0 and outer_lr > 0")
        if self.inner_episodes < 1:
            raise ValueError("inner_episodes must be >= 1")
        if self.meta_iterations < 0:
            raise ValueError("meta_iterations must be >= 0")
        if self.order != "first_order":
            raise ValueError("only first_order meta-gradients are implemented")
        if self.outer_rule not in ("sgd", "adam"):
            raise ValueError(f"unknown outer rule {self.outer_rule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TaskSet:
    environments: list[EnvironmentFile]

    def __post_init__(self):
        if not self.environments:
            raise ValueError("task set needs at least one environment")
        cves = {e.cve_id for e in self.environments}
        if len(cves) != 1:
            raise ValueError(f"tasks must share one vulnerability, got {sorted(cves)}")

    @property
    def n(self) -> int:
        return len(self.environments)

    @property
    def cve_id(self) -> str:
        return self.environments[0].cve_id

    def backends(self, catalog: ActionCatalog, reward_spec: RewardSpec | None = None,
                 budget: EpisodeBudget | None = None) -> list[LocalSimBackend]:
        return [LocalSimBackend(e, catalog, reward_spec, budget) for e in self.environments]


# ---------------------------------------------------------------------------
# policy-gradient estimate

@dataclass
class PGBatch:
    states: np.ndarray
    actions: np.ndarray
    returns: np.ndarray  # scaled reward-to-go


def pg_batch(trajectories: Sequence[Trajectory], gamma: float, reward_scale: float) -> PGBatch:
    return PGBatch(
        np.concatenate([t.states for t in trajectories]),
        np.concatenate([t.actions for t in trajectories]),
        np.concatenate([_kernels.discounted_returns(t.rewards / reward_scale, gamma) for t in trajectories]),
    )


def pg_surrogate(
    params: PolicyParams,
    batch: PGBatch,
    advantages: np.ndarray,
    value_coef: float,
    need_grad: bool = True,
) -> tuple[float, GradientBundle | None]:
    """mean(log pi(a|s) * A) - value_coef * mean((V - G)^2), with A held fixed."""
    n = batch.actions.shape[0]
    cache = forward(params, batch.states)
    logp_all = log_softmax(cache.logits)
    rows = np.arange(n)
    verr = cache.values - batch.returns
    value = float(np.mean(logp_all[rows, batch.actions] * advantages) - value_coef * np.mean(verr * verr))
    if not need_grad:
        return value, None
    probs = np.exp(logp_all)
    dlogits = -probs * advantages[:, None]
    dlogits[rows, batch.actions] += advantages
    dlogits /= n
    dvalues = -2.0 * value_coef * verr / n
    return value, backward(params, cache, dlogits, dvalues)


def baseline_advantages(params: PolicyParams, batch: PGBatch) -> np.ndarray:
    """G_t - V(s_t), the critic acting as a baseline (treated as a constant)."""
    return batch.returns - forward(params, batch.states).values


def policy_gradient(params: PolicyParams, trajectories: Sequence[Trajectory], cfg: MetaConfig) -> GradientBundle:
    batch = pg_batch(trajectories, cfg.gamma, cfg.reward_scale)
    adv = baseline_advantages(params, batch)
    _, grads = pg_surrogate(params, batch, adv, cfg.value_coef)
    return clip_by_global_norm(grads, cfg.max_grad_norm)


def mean_return(trajectories: Sequence[Trajectory]) -> float:
    return float(np.mean([t.episode_return for t in trajectories]))


# ---------------------------------------------------------------------------
# MAML steps

def task_rng(seed: int, iteration: int, task: int, phase: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(iteration, task, phase)))


def inner_adapt(
    theta: PolicyParams,
    env: LocalSimBackend,
    alpha: float,
    inner_episodes: int,
    rng: np.random.Generator,
    cfg: MetaConfig,
    encoder: StateEncoder | None = None,
) -> tuple[PolicyParams, list[Trajectory]]:
    """phi' = theta + alpha * grad J(theta) estimated on fresh rollouts D_i."""
    data = collect(env, theta, inner_episodes, rng, encoder)
    grads = policy_gradient(theta, data, cfg)
    return apply_update(theta, grads, alpha, "sgd"), data


@dataclass
class MetaStepResult:
    theta: PolicyParams
    pre_adapt_returns: list[float]
    post_adapt_returns: list[float]


def meta_step(
    theta: PolicyParams,
    envs: Sequence[LocalSimBackend],
    cfg: MetaConfig,
    seed: int,
    iteration: int,
    opt: AdamState | None = None,
    encoder: StateEncoder | None = None,
) -> MetaStepResult:
    encoder = encoder or StateEncoder()
    total = theta.zeros_like()
    pre, post = [], []
    for i, env in enumerate(envs):
        phi, d_inner = inner_adapt(
            theta, env, cfg.inner_lr, cfg.inner_episodes, task_rng(seed, iteration, i, INNER), cfg, encoder
        )
        d_outer = collect(env, phi, cfg.inner_episodes, task_rng(seed, iteration, i, OUTER), encoder)
        # first-order: the gradient at phi' stands in for the gradient w.r.t. theta
        total = total + policy_gradient(phi, d_outer, cfg)
        pre.append(mean_return(d_inner))
        post.append(mean_return(d_outer))
    theta = apply_update(theta, total, cfg.outer_lr, cfg.outer_rule, opt)
    return MetaStepResult(theta, pre, post)


@dataclass
class MetaTrainResult:
    theta: PolicyParams
    meta_curve: list[float]  # mean post-adaptation return per iteration
    pre_curve: list[float]  # mean pre-adaptation return per iteration
    trajectory: list[PolicyParams] = field(default_factory=list)


def meta_train(
    theta_init: PolicyParams,
    envs: Sequence[LocalSimBackend],
    cfg: MetaConfig,
    seed: int,
    embedder: EmbedderSpec | None = None,
    keep_trajectory: bool = False,
) -> MetaTrainResult:
    encoder = StateEncoder(embedder)
    opt = AdamState() if cfg.outer_rule == "adam" else None
    theta = theta_init
    curve, pre_curve, path = [], [], []
    for it in range(cfg.meta_iterations):
        res = meta_step(theta, envs, cfg, seed, it, opt, encoder)
        theta = res.theta
        curve.append(float(np.mean(res.post_adapt_returns)))
        pre_curve.append(float(np.mean(res.pre_adapt_returns)))
        if keep_trajectory:
            path.append(theta)
    return MetaTrainResult(theta, curve, pre_curve, path)


def save_meta_checkpoint(theta: PolicyParams, path, tasks: TaskSet, cfg: MetaConfig, extra: dict | None = None) -> None:
    meta = {"n_tasks": tasks.n, "cve_id": tasks.cve_id, "cfg": cfg.to_dict()}
    if extra:
        meta.update(extra)
    save_checkpoint(theta, path, meta)
