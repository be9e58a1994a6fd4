"""Command-line entry point: capture, train, randomize, meta-train, eval, report, experiment.

Exit codes: 0 ok, 1 usage (bad flags, missing inputs), 2 validation
(schema, invariants, incomplete capture, bad config), 3 runtime.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .encoder import EmbedderSpec
from .envmodel import (
    CVE_PATTERN,
    ActionCatalog,
    CVEEntry,
    EnvironmentFile,
    InvariantError,
    PoolTooSmall,
    SchemaError,
    build_catalog,
    bundled_environment_ids,
    canonical_json,
    default_distractor_pool,
    load_bundled_environment,
    load_cve_catalog,
    load_environment,
    serialize_environment,
)
from .evalharness import (
    PROTOCOLS,
    EvalConfig,
    Manifest,
    ManifestError,
    default_manifest,
    gen_gap_from_means,
    run_experiment,
    threshold_index,
    write_report,
    zero_shot_eval,
)
from .meta import MetaConfig, TaskSet, meta_train, save_meta_checkpoint
from .neuralnet import load_checkpoint, save_checkpoint
from .ppo import NonFiniteLoss, PPOConfig, StateEncoder, run_episode, train, write_curve_csv, write_stats_jsonl
from .randomizer import (
    EndpointError,
    ExtractionError,
    LLMClientConfig,
    PolicyUnsatisfiable,
    RandomizationPolicy,
    randomize_llm,
    randomize_rule,
)
from .simulator import (
    CatalogMismatch,
    EpisodeBudget,
    LocalSimBackend,
    RewardSpec,
    TrajectoryLog,
    capture,
    full_scan_script,
)
from .svgplot import line_chart

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3

# PPO settings used by the CLI and the experiment manifests; the dataclass
# defaults are the conservative textbook values
TUNED_PPO = {"lr": 3e-3, "adv_std_floor": 1.0, "target_kl": 0.05}
TUNED_META = {"outer_rule": "adam", "max_grad_norm": 1.0, "meta_iterations": 30}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration

@dataclass
class RunConfig:
    seed: int = 0
    actions: int = 100
    catalog_seed: int | None = None  # defaults to seed
    scan_cost: float = 1.0
    exploit_cost: float = 5.0
    max_steps: int = 100
    reward: RewardSpec = field(default_factory=RewardSpec)
    ppo: PPOConfig = field(default_factory=lambda: PPOConfig(**TUNED_PPO))
    meta: MetaConfig = field(default_factory=lambda: MetaConfig(**TUNED_META))
    eval: EvalConfig = field(default_factory=EvalConfig)
    randomizer: RandomizationPolicy = field(default_factory=RandomizationPolicy)
    embedder: EmbedderSpec = field(default_factory=EmbedderSpec)
    llm: LLMClientConfig = field(default_factory=LLMClientConfig)

    _SECTIONS = ("reward", "ppo", "meta", "eval", "randomizer", "embedder", "llm")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in self._SECTIONS:
                v = v.to_dict() if hasattr(v, "to_dict") else asdict(v)
                v = json.loads(json.dumps(v))  # tuples -> lists
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        # snapshots carry "command" and "inputs" next to the config proper
        extra = set(d) - known - {"command", "inputs", "version"}
        if extra:
            raise ValueError(f"unknown config field(s): {', '.join(sorted(extra))}")
        base = cls()
        kw = {}
        for name in known:
            if name not in d:
                continue
            if name in cls._SECTIONS:
                current = getattr(base, name)
                merged = {**json.loads(json.dumps(asdict(current))), **d[name]}
                kw[name] = _build_section(type(current), merged)
            else:
                kw[name] = d[name]
        return cls(**kw)

    @property
    def budget(self) -> EpisodeBudget:
        return EpisodeBudget(self.max_steps, max(self.ppo.episodes, 1))


def _build_section(cls, d: dict):
    hints = {f.name: f.type for f in fields(cls)}
    unknown = set(d) - set(hints)
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown field(s) {', '.join(sorted(unknown))}")
    d = dict(d)
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(v)
    return cls(**d)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: config must be a JSON object")
    return RunConfig.from_dict(doc)


def resolve_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "actions", None) is not None:
        cfg.actions = args.actions
    return cfg


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_snapshot(out: Path, command: str, cfg: RunConfig, inputs: dict) -> None:
    doc = {"command": command, "version": __version__, **cfg.to_dict(), "inputs": inputs}
    (out / "config.json").write_bytes(canonical_json(doc))


# ---------------------------------------------------------------------------
# input helpers

def read_env(ref: str) -> tuple[EnvironmentFile, dict]:
    """Environment from a path or a bundled CVE id, plus a provenance record."""
    p = Path(ref)
    if p.is_file():
        return load_environment(p), {"path": str(p), "sha256": _sha256(p)}
    if CVE_PATTERN.match(ref) and ref in bundled_environment_ids():
        env = load_bundled_environment(ref)
        return env, {"bundled": ref, "sha256": hashlib.sha256(serialize_environment(env)).hexdigest()}
    raise UsageError(f"environment not found: {ref}")


def read_env_dir(path: str) -> tuple[list[EnvironmentFile], list[dict]]:
    d = Path(path)
    if not d.is_dir():
        raise UsageError(f"environment directory not found: {path}")
    files = sorted(p for p in d.glob("*.json") if p.name != "config.json")
    if not files:
        raise UsageError(f"no environment files in {path}")
    envs = [load_environment(p) for p in files]
    return envs, [{"path": str(p), "sha256": _sha256(p)} for p in files]


def make_catalog(cfg: RunConfig, truth: list[str]) -> ActionCatalog:
    seed = cfg.seed if cfg.catalog_seed is None else cfg.catalog_seed
    return build_catalog(truth, default_distractor_pool(), cfg.actions, seed, cfg.scan_cost, cfg.exploit_cost)


def make_backend(env: EnvironmentFile, catalog: ActionCatalog, cfg: RunConfig) -> LocalSimBackend:
    return LocalSimBackend(env, catalog, cfg.reward, cfg.budget)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _copy_envs(out: Path, envs: list[EnvironmentFile]) -> None:
    d = out / "environments"
    d.mkdir(exist_ok=True)
    for e in envs:
        (d / f"{e.host.host_id}.json").write_bytes(serialize_environment(e))


def _write_timing(out: Path, **times) -> None:
    # the only file in a run directory that is not byte-reproducible
    (out / "timing.json").write_text(json.dumps(times, sort_keys=True) + "\n", encoding="utf-8")


def _write_greedy_log(out: Path, backend: LocalSimBackend, params, cfg: RunConfig) -> None:
    tr = run_episode(backend, params, None, StateEncoder(cfg.embedder), greedy=True)
    with TrajectoryLog(out / "trajectory.jsonl") as log:
        backend.reset(0)
        for t, a in enumerate(tr.actions):
            log.write(0, t, int(a), backend.step(int(a)))


# ---------------------------------------------------------------------------
# commands

def cmd_capture(args) -> int:
    cfg = resolve_config(args)
    env, src = read_env(args.env)
    catalog = make_catalog(cfg, [env.cve_id])
    backend = make_backend(env, catalog, cfg)
    cve = load_cve_catalog().get(env.cve_id)
    if cve is None:
        v = env.host.vulnerability
        cve = CVEEntry(v.cve_id, "", v.vulnerable_product, v.vulnerable_version_range, v.description, ())
    host_id = args.host_id or env.host.host_id
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = capture(backend, full_scan_script(catalog), cve, host_id, cfg.budget, seed=cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if result.incomplete:
        draft = out.with_suffix(".incomplete.json")
        draft.write_bytes(result.to_bytes())
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        print(f"capture incomplete (missing: {', '.join(result.missing)}); draft written to {draft}", file=sys.stderr)
        return EXIT_VALIDATION
    out.write_bytes(result.to_bytes())
    print(out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    env, src = read_env(args.env)
    catalog = make_catalog(cfg, [env.cve_id])
    backend = make_backend(env, catalog, cfg)
    out = _out_dir(args)
    write_snapshot(out, "train", cfg, {"env": src})
    _copy_envs(out, [env])
    res = train(backend, cfg.ppo, cfg.seed, embedder=cfg.embedder)
    save_checkpoint(res.params, out / "policy.ckpt", {
        "catalog": catalog.to_dict(), "env": env.host.host_id, "cve_id": env.cve_id, "seed": cfg.seed,
    })
    write_curve_csv(res, out / "curve.csv")
    write_stats_jsonl(res, out / "stats.jsonl")
    _write_greedy_log(out, backend, res.params, cfg)
    _write_timing(out, train_s=res.wall_time)
    last = float(np.mean(res.learning_curve[-50:])) if res.learning_curve else float("nan")
    print(f"trained {len(res.learning_curve)} episodes; mean return of last 50: {last:.2f}")
    return EXIT_OK


def cmd_randomize(args) -> int:
    cfg = resolve_config(args)
    env, src = read_env(args.env)
    out = _out_dir(args)
    if args.engine == "rule":
        variants = randomize_rule(env, cfg.randomizer, args.n, cfg.seed)
    else:
        entry = load_cve_catalog().get(env.cve_id)
        desc = entry.description if entry else env.host.vulnerability.description
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            variants = randomize_llm(env, desc, args.n, cfg.llm, cfg.randomizer)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    write_snapshot(out, "randomize", cfg, {"env": src, "n": args.n, "engine": args.engine})
    for v in variants:
        (out / f"{v.host.host_id}.json").write_bytes(serialize_environment(v))
    print(f"wrote {len(variants)} variant(s) to {out}")
    return EXIT_OK


def cmd_meta_train(args) -> int:
    cfg = resolve_config(args)
    env, src = read_env(args.env)
    variants, vsrc = read_env_dir(args.envs_dir)
    tasks = TaskSet(variants)
    if tasks.cve_id != env.cve_id:
        raise InvariantError(f"variants target {tasks.cve_id}, original targets {env.cve_id}")
    out = _out_dir(args)
    inputs = {"env": src, "variants": vsrc}
    t0 = time.perf_counter()
    if args.init:
        theta, meta_info = load_checkpoint(args.init)
        catalog = ActionCatalog.from_dict(meta_info["catalog"])
        inputs["init"] = {"path": args.init, "sha256": _sha256(Path(args.init))}
    else:
        catalog = make_catalog(cfg, [env.cve_id])
        pre = train(make_backend(env, catalog, cfg), cfg.ppo, cfg.seed, embedder=cfg.embedder)
        theta = pre.params
        save_checkpoint(theta, out / "pretrain.ckpt", {"catalog": catalog.to_dict(), "env": env.host.host_id, "cve_id": env.cve_id, "seed": cfg.seed})
        write_curve_csv(pre, out / "pretrain_curve.csv")
    write_snapshot(out, "meta-train", cfg, inputs)
    _copy_envs(out, [env, *variants])
    res = meta_train(theta, [make_backend(v, catalog, cfg) for v in variants], cfg.meta, cfg.seed, cfg.embedder)
    save_meta_checkpoint(res.theta, out / "meta.ckpt", tasks, cfg.meta, {"catalog": catalog.to_dict(), "seed": cfg.seed})
    with open(out / "meta_curve.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iteration,post_adapt_return,pre_adapt_return\n")
        for i, (post, pre_r) in enumerate(zip(res.meta_curve, res.pre_curve)):
            fh.write(f"{i},{post!r},{pre_r!r}\n")
    _write_timing(out, total_s=time.perf_counter() - t0)
    print(f"meta-trained over {tasks.n} task(s) for {cfg.meta.meta_iterations} iteration(s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    params, meta_info = load_checkpoint(args.checkpoint)
    if "catalog" not in meta_info:
        raise SchemaError("checkpoint carries no action catalog")
    catalog = ActionCatalog.from_dict(meta_info["catalog"])
    envs, srcs = [], []
    if args.env:
        e, s = read_env(args.env)
        envs.append(e)
        srcs.append(s)
    if args.envs_dir:
        es, ss = read_env_dir(args.envs_dir)
        envs += es
        srcs += ss
    if not envs:
        raise UsageError("eval needs --env and/or --envs-dir")
    out = _out_dir(args)
    inputs = {"checkpoint": {"path": args.checkpoint, "sha256": _sha256(Path(args.checkpoint))}, "envs": srcs}
    report = {"checkpoint": args.checkpoint}
    test = zero_shot_eval(params, [make_backend(e, catalog, cfg) for e in envs], catalog, cfg.eval, cfg.seed, cfg.embedder)
    report["test"] = {**test.to_dict(), "envs": [e.host.host_id for e in envs]}
    if args.train_env:
        te, ts = read_env(args.train_env)
        inputs["train_env"] = ts
        train_res = zero_shot_eval(params, [make_backend(te, catalog, cfg)], catalog, cfg.eval, cfg.seed, cfg.embedder)
        report["train"] = {**train_res.to_dict(), "envs": [te.host.host_id]}
        report["gen_gap"] = gen_gap_from_means(train_res.per_env_means, test.per_env_means)
    write_snapshot(out, "eval", cfg, inputs)
    (out / "eval.json").write_bytes(canonical_json(report))
    print(f"mean return {test.mean_return:.2f}, success rate {test.success_rate:.3f}")
    return EXIT_OK


def _read_curves(path: Path) -> dict[str, list[float]]:
    """Named series from one of the CSV layouts the commands write."""
    series: dict[str, list[float]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return series
    if "arm" in rows[0]:
        for r in rows:
            series.setdefault(f"{r['arm']}/seed{r['seed']}", []).append(float(r["return"]))
    elif "post_adapt_return" in rows[0]:
        series["post_adapt"] = [float(r["post_adapt_return"]) for r in rows]
        series["pre_adapt"] = [float(r["pre_adapt_return"]) for r in rows]
    else:
        series["return"] = [float(r["return"]) for r in rows]
    return series


def cmd_report(args) -> int:
    runs = [Path(r) for r in args.run]
    for r in runs:
        if not r.is_dir():
            raise UsageError(f"run directory not found: {r}")
    out = Path(args.out) if args.out else runs[0]
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for r in runs:
        for name in ("curve.csv", "curves.csv", "meta_curve.csv", "pretrain_curve.csv"):
            p = r / name
            if not p.is_file():
                continue
            series = _read_curves(p)
            key = f"{r.name}/{name}"
            summary[key] = {
                s: {
                    "points": len(ys),
                    "first10_mean": float(np.mean(ys[:10])),
                    "last50_mean": float(np.mean(ys[-50:])),
                    "max": max(ys),
                    "threshold_episode": threshold_index(ys, args.optimal, 0.8, 20) if args.optimal else None,
                }
                for s, ys in series.items()
            }
            if args.svg:
                svg = line_chart(series, title=key, smooth=args.smooth)
                (out / f"{r.name}_{p.stem}.svg").write_text(svg, encoding="utf-8")
    if not summary:
        raise UsageError("no curve files found in the given run directories")
    (out / "summary.json").write_bytes(canonical_json(summary))
    print(out / "summary.json")
    return EXIT_OK


def cmd_experiment(args) -> int:
    manifest = Manifest.load(args.manifest) if args.manifest else default_manifest(args.protocol)
    if args.seed is not None:
        manifest.seeds = [args.seed]
    out = _out_dir(args)
    (out / "manifest.json").write_bytes(canonical_json(manifest.to_dict()))
    report = run_experiment(args.protocol, manifest, jobs=args.jobs)
    rpath, cpath = write_report(report, out)
    if args.svg:
        series = {f"{arm}/seed{seed}": curve for arm, seed, curve in report.get("curves", [])}
        (out / "curves.svg").write_text(line_chart(series, title=args.protocol, smooth=args.smooth), encoding="utf-8")
    print(rpath)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

class _Help(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        # skip the automatic suffix when the help already names the default or there is none
        text = action.help or ""
        if "default" in text or action.default is None or action.default is argparse.SUPPRESS:
            return text
        return super()._get_help_string(action)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, seed: bool = True, actions: bool = True, config: bool = True) -> None:
    if seed:
        p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config; config default 0)")
    if actions:
        p.add_argument("--actions", type=int, default=None,
                       help="catalog size |A|, e.g. 100, 500, 1000 (overrides the config; config default 100)")
    if config:
        p.add_argument("--config", default=None, help="JSON run config or a config.json snapshot")


def build_parser() -> argparse.ArgumentParser:
    fmt = _Help
    parser = _Parser(prog="gaplab", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"gaplab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("capture", help="scan a host and write its environment file", formatter_class=fmt)
    p.add_argument("--env", required=True, help="host description (path or bundled CVE id) standing in for the real target")
    p.add_argument("--out", required=True, help="output environment file")
    p.add_argument("--host-id", default=None, help="host id for the captured file (default: the input's)")
    _common(p)
    p.set_defaults(func=cmd_capture)

    p = sub.add_parser("train", help="train a PPO agent on one environment", formatter_class=fmt)
    p.add_argument("--env", required=True, help="environment file or bundled CVE id")
    p.add_argument("--out", required=True, help="run directory")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("randomize", help="generate validated environment variants", formatter_class=fmt)
    p.add_argument("--env", required=True, help="environment file or bundled CVE id")
    p.add_argument("--n", type=int, default=5, help="number of variants")
    p.add_argument("--engine", choices=("rule", "llm"), default="rule", help="generator")
    p.add_argument("--out", required=True, help="output directory")
    _common(p, actions=False)
    p.set_defaults(func=cmd_randomize)

    p = sub.add_parser("meta-train", help="first-order MAML over environment variants", formatter_class=fmt)
    p.add_argument("--env", required=True, help="original environment (pre-training target)")
    p.add_argument("--envs-dir", required=True, help="directory of variant environment files")
    p.add_argument("--init", default=None, help="checkpoint to start from (default: pre-train with PPO on --env)")
    p.add_argument("--out", required=True, help="run directory")
    _common(p)
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("eval", help="zero-shot evaluation of a checkpoint", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="policy or meta checkpoint")
    p.add_argument("--env", default=None, help="test environment file or bundled CVE id")
    p.add_argument("--envs-dir", default=None, help="directory of test environment files")
    p.add_argument("--train-env", default=None, help="training environment, enables the generalization gap")
    p.add_argument("--out", required=True, help="output directory")
    _common(p, actions=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="summaries and plots from existing run directories", formatter_class=fmt)
    p.add_argument("--run", nargs="+", required=True, help="run directories")
    p.add_argument("--out", default=None, help="output directory (default: the first run directory)")
    p.add_argument("--optimal", type=float, default=None, help="optimal return, enables threshold episodes")
    p.add_argument("--svg", action="store_true", help="also render SVG line charts")
    p.add_argument("--smooth", type=int, default=10, help="moving-average window for the SVG charts")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("experiment", help="run an evaluation protocol end to end", formatter_class=fmt)
    p.add_argument("protocol", choices=PROTOCOLS, help="protocol to run")
    p.add_argument("--manifest", default=None, help="JSON manifest (default: the built-in one for the protocol)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="run a single seed instead of the manifest's list")
    p.add_argument("--jobs", type=int, default=1, help="concurrent (env, seed) cells")
    p.add_argument("--svg", action="store_true", help="also render curves.svg")
    p.add_argument("--smooth", type=int, default=10, help="moving-average window for the SVG chart")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gaplab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, InvariantError, ManifestError, PolicyUnsatisfiable, CatalogMismatch, PoolTooSmall, ValueError) as exc:
        print(f"gaplab: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EndpointError, ExtractionError, NonFiniteLoss, OSError, RuntimeError) as exc:
        print(f"gaplab: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
