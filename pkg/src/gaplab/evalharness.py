"""Evaluation protocols and metric kernels.

rq1: learning curves and training time for several catalog sizes.
rq2: zero-shot transfer to held-out variants of the same vulnerability
     (generalization gap and success rate), plain PPO vs. meta-trained.
rq3: fine-tuning on a host with a different vulnerability (jumpstart,
     curve, time to threshold) from scratch, PPO transfer and meta init.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .encoder import EmbedderSpec
from .envmodel import (
    ActionCatalog,
    CVE_PATTERN,
    EnvironmentFile,
    bundled_environment_ids,
    build_catalog,
    canonical_json,
    default_distractor_pool,
    load_bundled_environment,
    load_environment,
)
from .meta import MetaConfig, meta_train
from .neuralnet import PolicyParams
from .ppo import PPOConfig, StateEncoder, run_episode, train
from .randomizer import RandomizationPolicy, randomize_rule
from .simulator import LocalSimBackend, optimal_actions, run_actions


class DegenerateInput(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    eval_episodes: int = 20
    greedy: bool = True
    jumpstart_window: int = 10
    seeds: tuple[int, ...] = (0, 1, 2)
    threshold_frac: float = 0.8
    threshold_window: int = 20

    def __post_init__(self):
        if self.eval_episodes < 1 or self.jumpstart_window < 1 or self.threshold_window < 1:
            raise ValueError("eval_episodes, jumpstart_window and threshold_window must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


# ---------------------------------------------------------------------------
# metric kernels

def gen_gap_from_means(train_means: Sequence[float], test_means: Sequence[float]) -> float:
    """Mean train-set return minus mean test-set return (unweighted over envs)."""
    if not len(train_means) or not len(test_means):
        raise ValueError("both environment sets must be nonempty")
    return float(np.mean(train_means) - np.mean(test_means))


def success_rate(successes: int, episodes: int) -> float:
    if episodes <= 0:
        raise ValueError("episodes must be positive")
    if not 0 <= successes <= episodes:
        raise ValueError("successes must lie in [0, episodes]")
    return successes / episodes


def jumpstart(curve: Sequence[float], window: int = 10) -> float:
    if window < 1 or len(curve) < 1:
        raise ValueError("need a nonempty curve and window >= 1")
    return float(np.mean(curve[:window]))


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise DegenerateInput("need two equal-length series with at least 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = float(np.dot(dx, dx)), float(np.dot(dy, dy))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInput("zero variance")
    r = float(np.dot(dx, dy) / math.sqrt(sx * sy))
    return max(-1.0, min(1.0, r))


def mean_ci(values: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """Mean and half-width of a Student-t confidence interval."""
    v = np.asarray(values, dtype=np.float64)
    m = float(v.mean())
    if v.size < 2:
        return m, 0.0
    sem = float(v.std(ddof=1) / math.sqrt(v.size))
    return m, float(stats.t.ppf(0.5 + level / 2.0, v.size - 1) * sem)


def threshold_index(curve: Sequence[float], optimal: float, frac: float = 0.8, window: int = 20) -> int | None:
    """First episode whose trailing ``window``-episode mean reaches frac * optimal."""
    c = np.asarray(curve, dtype=np.float64)
    if c.size < window:
        return None
    means = np.convolve(c, np.ones(window) / window, mode="valid")
    hits = np.nonzero(means >= frac * optimal)[0]
    return int(hits[0] + window - 1) if hits.size else None


def optimal_return(env: LocalSimBackend) -> float:
    return float(sum(o.reward for o in run_actions(env, optimal_actions(env.profile, env.catalog))))


# ---------------------------------------------------------------------------
# evaluation operations

@dataclass
class EvalResult:
    mean_return: float
    success_rate: float
    successes: int
    episodes: int
    per_env_means: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def _backends(envs, catalog: ActionCatalog) -> list[LocalSimBackend]:
    # environment files get a simulator; anything already steppable is used as is
    return [LocalSimBackend(e, catalog) if isinstance(e, EnvironmentFile) else e for e in envs]


def zero_shot_eval(
    params: PolicyParams,
    envs: Sequence[EnvironmentFile | LocalSimBackend],
    catalog: ActionCatalog,
    cfg: EvalConfig | None = None,
    seed: int = 0,
    embedder: EmbedderSpec | None = None,
) -> EvalResult:
    cfg = cfg or EvalConfig()
    encoder = StateEncoder(embedder)
    rng = np.random.default_rng(seed)
    means, successes, episodes = [], 0, 0
    for env in _backends(envs, catalog):
        returns = []
        for ep in range(cfg.eval_episodes):
            tr = run_episode(env, params, rng, encoder, greedy=cfg.greedy, seed=ep)
            returns.append(tr.episode_return)
            successes += int(tr.success)
            episodes += 1
        means.append(float(np.mean(returns)))
    return EvalResult(float(np.mean(means)), success_rate(successes, episodes), successes, episodes, means)


def gen_gap(params, train_envs, test_envs, catalog, cfg: EvalConfig | None = None, seed: int = 0) -> float:
    tr = zero_shot_eval(params, train_envs, catalog, cfg, seed)
    te = zero_shot_eval(params, test_envs, catalog, cfg, seed)
    return gen_gap_from_means(tr.per_env_means, te.per_env_means)


@dataclass
class AdaptResult:
    curve: list[float]
    jumpstart: float
    wall_time: float
    threshold_episode: int | None
    time_to_threshold: float  # wall time at the threshold episode, or total time if never reached
    params: PolicyParams | None = None


def few_shot_adapt(
    params_init: PolicyParams | None,
    env: LocalSimBackend,
    ppo_cfg: PPOConfig,
    cfg: EvalConfig | None = None,
    seed: int = 0,
    embedder: EmbedderSpec | None = None,
) -> AdaptResult:
    """Fine-tune with PPO from ``params_init`` (random init when None)."""
    cfg = cfg or EvalConfig()
    res = train(env, ppo_cfg, seed, params=params_init, embedder=embedder)
    opt = optimal_return(env)
    idx = threshold_index(res.learning_curve, opt, cfg.threshold_frac, cfg.threshold_window)
    ttt = res.episode_times[idx] if idx is not None else res.wall_time
    return AdaptResult(res.learning_curve, jumpstart(res.learning_curve, cfg.jumpstart_window), res.wall_time, idx, ttt, res.params)


# ---------------------------------------------------------------------------
# manifests

PROTOCOLS = ("rq1", "rq2", "rq3")
_MANIFEST_FIELDS = {"protocol", "train_env", "test_envs", "catalog_size", "seeds", "configs"}


@dataclass
class Manifest:
    protocol: str
    train_env: str
    test_envs: list[str] = field(default_factory=list)
    catalog_size: int | list[int] = 100
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    configs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ManifestError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if not self.seeds:
            raise ManifestError("manifest needs at least one seed")
        sizes = self.sizes()
        if not sizes or any(not isinstance(s, int) or s < 6 for s in sizes):
            raise ManifestError("catalog_size must be an integer >= 6 or a list of them")
        if self.protocol == "rq3" and not self.test_envs:
            raise ManifestError("rq3 needs a test environment with a different vulnerability")

    def sizes(self) -> list[int]:
        return list(self.catalog_size) if isinstance(self.catalog_size, list) else [self.catalog_size]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        if not isinstance(d, dict):
            raise ManifestError("manifest must be a JSON object")
        missing = {"protocol", "train_env"} - set(d)
        extra = set(d) - _MANIFEST_FIELDS
        if missing or extra:
            raise ManifestError(f"manifest fields: missing {sorted(missing)}, unknown {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ManifestError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "Manifest":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"{path}: {exc}") from None


EXPERIMENT_PPO = {"lr": 3e-3, "adv_std_floor": 1.0, "target_kl": 0.05}
EXPERIMENT_META = {"inner_lr": 0.05, "outer_lr": 1e-3, "inner_episodes": 10, "meta_iterations": 30, "outer_rule": "adam", "max_grad_norm": 1.0}


def default_manifest(protocol: str) -> Manifest:
    if protocol == "rq1":
        return Manifest("rq1", "CVE-2018-7600", [], [100, 1000], [0, 1, 2], {"ppo": dict(EXPERIMENT_PPO)})
    if protocol == "rq2":
        return Manifest(
            "rq2", "CVE-2018-7600", [], 100, [0, 1, 2],
            {"ppo": dict(EXPERIMENT_PPO), "meta": dict(EXPERIMENT_META), "n_meta_envs": 5, "n_test_envs": 3},
        )
    if protocol == "rq3":
        return Manifest(
            "rq3", "CVE-2018-7600", ["CVE-2021-41773"], 1000, [0, 1, 2],
            {"ppo": dict(EXPERIMENT_PPO), "meta": dict(EXPERIMENT_META), "n_meta_envs": 5},
        )
    raise ManifestError(f"unknown protocol {protocol!r}")


def resolve_env(ref: str) -> EnvironmentFile:
    if CVE_PATTERN.match(ref) and ref in bundled_environment_ids():
        return load_bundled_environment(ref)
    try:
        return load_environment(ref)
    except OSError as exc:
        raise ManifestError(f"cannot resolve environment {ref!r}: {exc}") from None


def _configs(m: Manifest) -> tuple[PPOConfig, MetaConfig, EvalConfig, RandomizationPolicy]:
    c = m.configs
    try:
        ppo_cfg = PPOConfig.from_dict(c.get("ppo", {}))
        meta_cfg = MetaConfig(**c.get("meta", {}))
        eval_d = dict(c.get("eval", {}))
        eval_d["seeds"] = tuple(m.seeds)
        eval_cfg = EvalConfig(**eval_d)
        pol = dict(c.get("randomizer", {}))
        for k in ("port_range", "add_distractor_ports"):
            if k in pol:
                pol[k] = tuple(pol[k])
        policy = RandomizationPolicy(**pol)
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"bad config: {exc}") from None
    return ppo_cfg, meta_cfg, eval_cfg, policy


# ---------------------------------------------------------------------------
# protocol cells (one seed each; top-level so they can run in worker processes)

def _catalog(truth: list[str], size: int, seed: int) -> ActionCatalog:
    return build_catalog(truth, default_distractor_pool(), size, seed)


def _rq1_cell(m: Manifest, size: int, seed: int) -> dict:
    ppo_cfg, _, eval_cfg, _ = _configs(m)
    env_f = resolve_env(m.train_env)
    env = LocalSimBackend(env_f, _catalog([env_f.cve_id], size, seed))
    res = train(env, ppo_cfg, seed)
    opt = optimal_return(env)
    idx = threshold_index(res.learning_curve, opt, eval_cfg.threshold_frac, eval_cfg.threshold_window)
    return {
        "arm": f"A{size}",
        "catalog_size": size,
        "seed": seed,
        "optimal_return": opt,
        "last50_mean": float(np.mean(res.learning_curve[-50:])),
        "threshold_episode": idx,
        "wall_time": res.wall_time,
        "curve": res.learning_curve,
    }


def _meta_sets(env_f: EnvironmentFile, policy: RandomizationPolicy, n_meta: int, n_test: int, seed: int):
    variants = randomize_rule(env_f, policy, n_meta + n_test, seed)
    return variants[:n_meta], variants[n_meta:]


def _rq2_cell(m: Manifest, seed: int) -> dict:
    ppo_cfg, meta_cfg, eval_cfg, policy = _configs(m)
    env_f = resolve_env(m.train_env)
    catalog = _catalog([env_f.cve_id], m.sizes()[0], seed)
    n_meta = int(m.configs.get("n_meta_envs", 5))
    n_test = int(m.configs.get("n_test_envs", 3))
    meta_envs, test_envs = _meta_sets(env_f, policy, n_meta, n_test, seed)
    base = train(LocalSimBackend(env_f, catalog), ppo_cfg, seed)
    mres = meta_train(base.params, [LocalSimBackend(e, catalog) for e in meta_envs], meta_cfg, seed)
    out = {"seed": seed, "curve": base.learning_curve, "meta_curve": mres.meta_curve, "methods": {}}
    for name, params in (("ppo", base.params), ("meta", mres.theta)):
        tr = zero_shot_eval(params, [env_f], catalog, eval_cfg, seed)
        te = zero_shot_eval(params, test_envs, catalog, eval_cfg, seed)
        out["methods"][name] = {
            "train": tr.to_dict(),
            "test": te.to_dict(),
            "gen_gap": gen_gap_from_means(tr.per_env_means, te.per_env_means),
            "success_rate": te.success_rate,
        }
    out["test_envs"] = [e.host.host_id for e in test_envs]
    return out


def _rq3_cell(m: Manifest, seed: int) -> dict:
    ppo_cfg, meta_cfg, eval_cfg, policy = _configs(m)
    src = resolve_env(m.train_env)
    dst = resolve_env(m.test_envs[0])
    if dst.cve_id == src.cve_id:
        raise ManifestError("rq3 test environment must have a different vulnerability")
    catalog = _catalog([src.cve_id, dst.cve_id], m.sizes()[0], seed)
    n_meta = int(m.configs.get("n_meta_envs", 5))
    meta_envs, _ = _meta_sets(src, policy, n_meta, 0, seed)
    base = train(LocalSimBackend(src, catalog), ppo_cfg, seed)
    mres = meta_train(base.params, [LocalSimBackend(e, catalog) for e in meta_envs], meta_cfg, seed)
    target = LocalSimBackend(dst, catalog)
    inits = {"scratch": None, "ppo_transfer": base.params, "meta_init": mres.theta}
    out = {"seed": seed, "optimal_return": optimal_return(target), "methods": {}}
    for name, init in inits.items():
        # every arm fine-tunes with the same seed so the comparison is paired
        r = few_shot_adapt(init, target, ppo_cfg, eval_cfg, seed)
        out["methods"][name] = {
            "jumpstart": r.jumpstart,
            "threshold_episode": r.threshold_episode,
            "time_to_threshold": r.time_to_threshold,
            "wall_time": r.wall_time,
            "curve": r.curve,
        }
    return out


def _run_cells(fn, args: list[tuple], jobs: int) -> list[dict]:
    if jobs <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# reports

def _summary(values: Sequence[float]) -> dict:
    m, hw = mean_ci(values)
    return {"mean": m, "ci95": hw, "per_seed": list(values)}


def run_experiment(protocol: str, manifest: Manifest | None = None, jobs: int = 1) -> dict:
    """Execute a protocol and return the report dictionary (not yet written)."""
    m = manifest or default_manifest(protocol)
    if m.protocol != protocol:
        raise ManifestError(f"manifest is for {m.protocol}, asked to run {protocol}")
    _configs(m)  # fail early on bad configs
    report: dict = {"protocol": protocol, "manifest": m.to_dict()}
    if protocol == "rq1":
        cells = _run_cells(_rq1_cell, [(m, size, s) for size in m.sizes() for s in m.seeds], jobs)
        arms = {}
        for c in cells:
            arm = arms.setdefault(c["arm"], {"catalog_size": c["catalog_size"], "seeds": []})
            arm["seeds"].append({k: c[k] for k in ("seed", "last50_mean", "threshold_episode", "wall_time", "optimal_return")})
        for arm in arms.values():
            arm["last50_mean"] = _summary([s["last50_mean"] for s in arm["seeds"]])
            arm["training_time_s"] = _summary([s["wall_time"] for s in arm["seeds"]])
        report["arms"] = arms
        report["curves"] = [(c["arm"], c["seed"], c["curve"]) for c in cells]
    elif protocol == "rq2":
        cells = _run_cells(_rq2_cell, [(m, s) for s in m.seeds], jobs)
        methods = {}
        for name in ("ppo", "meta"):
            methods[name] = {
                "gen_gap": _summary([c["methods"][name]["gen_gap"] for c in cells]),
                "success_rate": _summary([c["methods"][name]["success_rate"] for c in cells]),
                "test_return": _summary([c["methods"][name]["test"]["mean_return"] for c in cells]),
                "train_return": _summary([c["methods"][name]["train"]["mean_return"] for c in cells]),
            }
        report["methods"] = methods
        report["cells"] = [{k: v for k, v in c.items() if k not in ("curve",)} for c in cells]
        report["curves"] = [("ppo_train", c["seed"], c["curve"]) for c in cells]
    else:
        cells = _run_cells(_rq3_cell, [(m, s) for s in m.seeds], jobs)
        methods = {}
        for name in ("scratch", "ppo_transfer", "meta_init"):
            methods[name] = {
                "jumpstart": _summary([c["methods"][name]["jumpstart"] for c in cells]),
                "time_to_threshold": _summary([c["methods"][name]["time_to_threshold"] for c in cells]),
                "threshold_episode": [c["methods"][name]["threshold_episode"] for c in cells],
                "training_time_s": _summary([c["methods"][name]["wall_time"] for c in cells]),
            }
        js = [c["methods"][n]["jumpstart"] for c in cells for n in methods]
        tt = [c["methods"][n]["time_to_threshold"] for c in cells for n in methods]
        try:
            report["jumpstart_time_pearson_r"] = pearson(js, tt)
        except DegenerateInput:
            report["jumpstart_time_pearson_r"] = None
        report["methods"] = methods
        report["cells"] = [
            {"seed": c["seed"], "optimal_return": c["optimal_return"],
             "methods": {n: {k: v for k, v in r.items() if k != "curve"} for n, r in c["methods"].items()}}
            for c in cells
        ]
        report["curves"] = [(n, c["seed"], c["methods"][n]["curve"]) for c in cells for n in methods]
    return report


def write_report(report: dict, out_dir) -> tuple[Path, Path]:
    """report.json, timing.json and curves.csv (arm,seed,episode,return).

    report.json leaves out curves and every wall-clock field so that a replay
    reproduces it byte for byte; timing.json holds the full body.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = {k: v for k, v in report.items() if k != "curves"}
    rpath = out / "report.json"
    rpath.write_bytes(canonical_json(strip_timings(body)))
    (out / "timing.json").write_bytes(canonical_json(body))
    cpath = out / "curves.csv"
    with open(cpath, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("arm,seed,episode,return\n")
        for arm, seed, curve in report.get("curves", []):
            for ep, r in enumerate(curve):
                fh.write(f"{arm},{seed},{ep},{r!r}\n")
    return rpath, cpath


def strip_timings(report: dict) -> dict:
    """Copy of a report with wall-clock fields removed (for byte comparisons)."""
    def walk(x):
        if isinstance(x, dict):
            return {k: walk(v) for k, v in x.items() if not any(t in k for t in ("time", "wall"))}
        if isinstance(x, list):
            return [walk(v) for v in x]
        return x
    return walk(report)


def default_jobs() -> int:
    return max(1, min(4, os.cpu_count() or 1))
