"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest -s tests/test_acceptance.py`` to see the lines inline; they
are also repeated in the terminal summary.  Criteria that the artifact does
not meet are marked strict xfail: the test still asserts the full criterion,
so an unexpected pass turns the suite red and the marker must be removed.
"""

import json
import time
import warnings

import numpy as np
import pytest
from bandit import ScriptedBandit
from envgen import canonical_bytes, corpus
from oracles import ModelState, central_difference, model_best_return, model_step, pearson_ref, relative_error

from gaplab.cli import main as cli_main
from gaplab.encoder import embed
from gaplab.envmodel import (
    ScanType,
    build_catalog,
    bundled_environment_ids,
    canonical_json,
    load_bundled_environment,
    load_cve_catalog,
    parse_environment,
    serialize_environment,
)
from gaplab.evalharness import (
    DegenerateInput,
    EvalConfig,
    gen_gap,
    gen_gap_from_means,
    pearson,
    run_experiment,
    success_rate,
    zero_shot_eval,
)
from gaplab.meta import MetaConfig, baseline_advantages, meta_train, pg_batch, pg_surrogate, policy_gradient
from gaplab.neuralnet import AdamState, apply_update, init_params
from gaplab.ppo import Batch, PPOConfig, Trajectory, collect, ppo_objective
from gaplab.randomizer import CORRUPTIONS, corrupt, randomize_rule, validate
from gaplab.simulator import (
    Event,
    LocalSimBackend,
    capture,
    episode_return,
    exhaustive_best_return,
    full_scan_script,
    optimal_actions,
    run_actions,
)

from conftest import ACCEPTANCE_LINES, DRUPAL, FIXTURES

pytestmark = pytest.mark.acceptance


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print("\n" + line)
    ACCEPTANCE_LINES.append(line)


# -- 1 ----------------------------------------------------------------------

def _ppo_case(rng, seed):
    p = init_params(6, 5, (8, 4), seed=seed)
    p = p.from_vector(rng.normal(scale=0.5, size=p.to_vector().size))
    n = 7
    batch = Batch(rng.normal(size=(n, 6)), rng.integers(0, 5, size=n), rng.normal(-1.6, 0.3, size=n),
                  rng.normal(size=n), rng.normal(size=n))
    cfg = PPOConfig(entropy_coef=0.01)
    _, g = ppo_objective(p, batch, cfg)
    num = central_difference(lambda v: ppo_objective(p.from_vector(v), batch, cfg, need_grad=False)[0]["objective"], p.to_vector())
    return relative_error(g.to_vector(), num)


def _pg_case(rng, seed):
    p = init_params(6, 4, (5, 3), seed=seed)
    p = p.from_vector(rng.normal(scale=0.5, size=p.to_vector().size))
    n = 9
    traj = Trajectory(rng.normal(size=(n, 6)), rng.integers(0, 4, size=n), rng.normal(size=n) * 100,
                      np.zeros(n), np.zeros(n), np.r_[np.zeros(n - 1), 1.0])
    batch = pg_batch([traj], 0.99, 100.0)
    adv = baseline_advantages(p, batch)
    _, g = pg_surrogate(p, batch, adv, 0.5)
    num = central_difference(lambda v: pg_surrogate(p.from_vector(v), batch, adv, 0.5, need_grad=False)[0], p.to_vector())
    return relative_error(g.to_vector(), num)


def test_criterion_1_gradients_match_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    ppo_err = max(_ppo_case(rng, s) for s in range(100))
    pg_err = max(_pg_case(rng, s) for s in range(100))
    elapsed = time.perf_counter() - t0
    ok = ppo_err < 1e-4 and pg_err < 1e-4 and elapsed < 60
    record(1, ok, f"max rel err PPO {ppo_err:.2e}, PG {pg_err:.2e} over 100 nets each; {elapsed:.1f}s")
    assert ok


# -- 2 ----------------------------------------------------------------------

def _memo_best(env, depth, memo, root=True):
    """Best return over every sequence of length <= depth from the current state.

    The simulator is deterministic and Markov in its state key, so caching on
    (state, remaining depth) covers all |A|^depth sequences exactly.
    """
    if depth == 0 or env.done:
        return 0.0
    key = (env.state_key(), depth, root)
    if key not in memo:
        snap = env.snapshot()
        best = -np.inf if root else 0.0  # at least one action, then stopping early is allowed
        for a in range(env.catalog.size):
            r = env.step(a).reward
            best = max(best, r + _memo_best(env, depth - 1, memo, root=False))
            env.restore(snap)
        memo[key] = best
    return memo[key]


def test_criterion_2_exhaustive_optimum_and_reward_decomposition(drupal, pool):
    t0 = time.perf_counter()
    default = LocalSimBackend(drupal, build_catalog([DRUPAL], pool, 100, 0))
    default.reset(0)
    memo_best = _memo_best(default, 5, {})
    model = model_best_return(DRUPAL, True, 95, 5)

    small = LocalSimBackend(drupal, build_catalog([DRUPAL], pool, 10, 0))
    brute_best, seq, count = exhaustive_best_return(small, 5)
    brute_seq_ok = episode_return(run_actions(small, seq)) == brute_best

    cat = default.catalog
    useful = [cat.scan_id(s) for s in ScanType] + [cat.exploit_id(DRUPAL)]
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(10_000):
        default.reset(int(rng.integers(0, 2**31)))
        state, outs = ModelState(), []
        for _ in range(int(rng.integers(1, 25))):
            if default.done:
                break
            a = int(rng.choice(useful)) if rng.random() < 0.7 else int(rng.integers(0, cat.size))
            out = default.step(a)
            outs.append(out)
            if out.reward != model_step(state, cat.action(a).target, DRUPAL, True):
                mismatches += 1
        total = sum(o.reward for o in outs)
        if total != sum(o.event_value for o in outs) - sum(o.cost for o in outs) or total != episode_return(outs):
            mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = memo_best == model == brute_best == 1193.0 and brute_seq_ok and mismatches == 0 and elapsed < 60
    record(2, ok, f"optimum {memo_best:g} (|A|=100, memoized), {brute_best:g} (|A|=10, {count} sequences), "
                  f"model {model:g}; {mismatches} decomposition/model mismatches in 10^4 sequences; {elapsed:.1f}s")
    assert ok


# -- 3 ----------------------------------------------------------------------

def test_criterion_3_rq1_learning_and_action_space_scaling():
    t0 = time.perf_counter()
    rep = run_experiment("rq1")
    elapsed = time.perf_counter() - t0
    a100, a1000 = rep["arms"]["A100"]["seeds"], rep["arms"]["A1000"]["seeds"]
    reached = all(s["last50_mean"] >= 0.8 * s["optimal_return"] for s in a100)

    def later(big, small):
        # a threshold never reached within the budget counts as later than any reached one
        if small is None:
            return False
        return big is None or big > small

    slower = [later(b["threshold_episode"], s["threshold_episode"]) for s, b in zip(a100, a1000)]
    ok = reached and all(slower) and elapsed < 600
    record(3, ok, f"|A|=100 last-50 means {[round(s['last50_mean'], 1) for s in a100]}; threshold episodes "
                  f"100: {[s['threshold_episode'] for s in a100]}, 1000: {[s['threshold_episode'] for s in a1000]}; {elapsed:.0f}s")
    assert ok


# -- 4 ----------------------------------------------------------------------

@pytest.mark.xfail(strict=True, reason="plain PPO already transfers to same-CVE variants with zero gap; see README")
def test_criterion_4_rq2_meta_training_narrows_generalization_gap():
    t0 = time.perf_counter()
    rep = run_experiment("rq2")
    elapsed = time.perf_counter() - t0
    m = rep["methods"]
    gap_meta, gap_ppo = m["meta"]["gen_gap"]["mean"], m["ppo"]["gen_gap"]["mean"]
    sr_meta, sr_ppo = m["meta"]["success_rate"]["mean"], m["ppo"]["success_rate"]["mean"]
    ok = gap_meta < gap_ppo and sr_meta > sr_ppo and elapsed < 900
    record(4, ok, f"GenGap meta {gap_meta:.1f} vs PPO {gap_ppo:.1f}; success meta {sr_meta:.3f} vs PPO {sr_ppo:.3f}; {elapsed:.0f}s")
    assert ok


# -- 5 ----------------------------------------------------------------------

@pytest.mark.xfail(strict=True, reason="meta-init does not out-jumpstart PPO transfer on a dissimilar CVE; see README")
def test_criterion_5_rq3_few_shot_transfer_ordering():
    t0 = time.perf_counter()
    rep = run_experiment("rq3")
    elapsed = time.perf_counter() - t0
    cells = rep["cells"]
    js = {n: [c["methods"][n]["jumpstart"] for c in cells] for n in ("meta_init", "ppo_transfer", "scratch")}
    order = all(mi > pt > sc for mi, pt, sc in zip(js["meta_init"], js["ppo_transfer"], js["scratch"]))

    def ttt(name):
        # seeds that never reach the threshold have unbounded time to threshold
        return [c["methods"][name]["time_to_threshold"] if c["methods"][name]["threshold_episode"] is not None else np.inf
                for c in cells]

    t_meta, t_scratch = np.mean(ttt("meta_init")), np.mean(ttt("scratch"))
    ok = order and t_meta < t_scratch and elapsed < 900
    record(5, ok, "jumpstart per seed " + ", ".join(f"{n} {[round(x) for x in v]}" for n, v in js.items())
                  + f"; time to threshold per seed meta {_fmt(ttt('meta_init'))} vs scratch {_fmt(ttt('scratch'))}; {elapsed:.0f}s")
    assert ok


def _fmt(times):
    return "[" + ", ".join("never" if np.isinf(t) else f"{t:.1f}s" for t in times) + "]"


# -- 6 ----------------------------------------------------------------------

def _joint_pg(theta, envs, cfg, seed, iterations):
    opt = AdamState() if cfg.outer_rule == "adam" else None
    path = []
    for it in range(iterations):
        total = theta.zeros_like()
        for i, env in enumerate(envs):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(it, i, 1)))
            total = total + policy_gradient(theta, collect(env, theta, cfg.inner_episodes, rng), cfg)
        theta = apply_update(theta, total, cfg.outer_lr, cfg.outer_rule, opt)
        path.append(theta)
    return path


def test_criterion_6_alpha_zero_equals_joint_policy_gradient(drupal, pool):
    cat = build_catalog([DRUPAL], pool, 20, 0)
    envs = [LocalSimBackend(v, cat) for v in randomize_rule(drupal, None, 3, seed=0)]
    theta = init_params(256, cat.size, seed=5)
    results = []
    for rule in ("sgd", "adam"):
        cfg = MetaConfig(inner_lr=0.0, outer_lr=0.01, inner_episodes=3, meta_iterations=10, outer_rule=rule)
        meta = meta_train(theta, envs, cfg, seed=21, keep_trajectory=True).trajectory
        joint = _joint_pg(theta, envs, cfg, seed=21, iterations=10)
        same = len(meta) == len(joint) == 10 and all(
            all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays())) for a, b in zip(meta, joint))
        moved = not meta[-1].equals(theta)
        results.append(same and moved)
    ok = all(results)
    record(6, ok, f"bit-identical 10-iteration trajectories (sgd, adam): {results}")
    assert ok


# -- 7 ----------------------------------------------------------------------

def test_criterion_7_randomizer_validity_and_corruptor_rejection(pool):
    truth = bundled_environment_ids()
    cat = build_catalog(truth, pool, 100, 0)
    valid = solvable = total = rejected = corrupted = 0
    for k, cve in enumerate(truth):
        env = load_bundled_environment(cve)
        for v in randomize_rule(env, None, 25, seed=k):
            total += 1
            valid += validate(v, env).valid
            backend = LocalSimBackend(v, cat)
            outs = run_actions(backend, optimal_actions(backend.profile, cat))
            solvable += len(outs) == 3 and outs[-1].event is Event.COMPROMISED and episode_return(outs) == 1193.0
            for rule in CORRUPTIONS:
                corrupted += 1
                rejected += not validate(corrupt(v, env, rule), env).valid
    ok = total == 500 and valid == solvable == 500 and rejected == corrupted
    record(7, ok, f"{valid}/{total} variants valid, {solvable}/{total} solved in 3 steps over {len(truth)} CVEs; "
                  f"{rejected}/{corrupted} corrupted samples rejected")
    assert ok


# -- 8 ----------------------------------------------------------------------

def _tree(path):
    return {str(p.relative_to(path)): p.read_bytes() for p in sorted(path.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def test_criterion_8_cli_byte_reproducibility(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"ppo": {"episodes": 60}, "meta": {"meta_iterations": 3, "inner_episodes": 3},
                               "eval": {"eval_episodes": 3}, "actions": 20}))
    env = tmp_path / "drupal.json"
    env.write_bytes(serialize_environment(load_bundled_environment(DRUPAL)))
    common = ["--config", str(cfg), "--seed", "4"]
    runs = {}
    for tag in ("a", "b"):
        root = tmp_path / tag
        codes = [
            cli_main(["randomize", "--env", str(env), "--n", "5", "--engine", "rule", *common, "--out", str(root / "variants")]),
            cli_main(["train", "--env", str(env), *common, "--out", str(root / "train")]),
            cli_main(["meta-train", "--env", str(env), "--envs-dir", str(tmp_path / "a" / "variants"), *common,
                      "--out", str(root / "meta")]),
            cli_main(["eval", "--checkpoint", str(tmp_path / "a" / "meta" / "meta.ckpt"), "--envs-dir",
                      str(tmp_path / "a" / "variants"), "--train-env", str(env), *common, "--out", str(root / "eval")]),
        ]
        assert codes == [0, 0, 0, 0]
        runs[tag] = root
    verdict = {}
    for cmd in ("variants", "train", "meta", "eval"):
        verdict[cmd] = _tree(runs["a"] / cmd) == _tree(runs["b"] / cmd) and bool(_tree(runs["a"] / cmd))
    ok = all(verdict.values())
    record(8, ok, "identical bytes (excluding timing.json): " + ", ".join(f"{k} {v}" for k, v in verdict.items()))
    assert ok


# -- 9 ----------------------------------------------------------------------

def test_criterion_9_metric_kernels(small_env, drupal):
    checks = {}
    p = init_params(256, small_env.catalog.size, seed=3)
    envs = [drupal] + randomize_rule(drupal, None, 2, seed=0)
    checks["self-gap 0"] = gen_gap(p, envs, envs, small_env.catalog, EvalConfig(eval_episodes=3)) == 0.0
    checks["hand 450"] = gen_gap_from_means([1000, 900], [500, 500]) == 450.0

    bandits = [ScriptedBandit(1), ScriptedBandit(1), ScriptedBandit(2)]
    q = init_params(256, 3, seed=0)
    q = q.with_arrays(q.arrays()[:-3] + [np.array([0.0, 5.0, 0.0]), *q.critic])
    res = zero_shot_eval(q, bandits, None, EvalConfig(eval_episodes=20))
    checks["success 2/3"] = res.successes == 40 and res.episodes == 60 and res.success_rate == 2 / 3 == success_rate(2, 3)

    xs = [0.5, 1.0, 3.0, 4.5, 10.0]
    checks["pearson +1"] = pearson(xs, xs) == 1.0 == round(pearson_ref(xs, xs), 12)
    checks["pearson -1"] = pearson(xs, [-x for x in xs]) == -1.0
    try:
        pearson([2.0, 2.0, 2.0], xs[:3])
        checks["zero variance raises"] = False
    except DegenerateInput:
        checks["zero variance raises"] = True
    ok = all(checks.values())
    record(9, ok, ", ".join(f"{k} {v}" for k, v in checks.items()))
    assert ok


# -- 10 ---------------------------------------------------------------------

def test_criterion_10_schema_round_trip_and_golden_fixtures(drupal, pool):
    docs = corpus(200, seed=10)
    round_trip = sum(serialize_environment(parse_environment(canonical_bytes(d))) == canonical_bytes(d) for d in docs)
    identity = sum(parse_environment(serialize_environment(parse_environment(canonical_bytes(d)))) == parse_environment(canonical_bytes(d))
                   for d in docs)

    golden = {}
    cat = build_catalog([DRUPAL], pool, 100, 0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        cap = capture(LocalSimBackend(drupal, cat), full_scan_script(cat), load_cve_catalog()[DRUPAL], drupal.host.host_id)
    golden["capture"] = cap.to_bytes() == (FIXTURES / "drupal_capture.json").read_bytes()
    golden["catalog"] = canonical_json(cat.to_dict()) == (FIXTURES / "catalog_100_seed0.json").read_bytes()
    variants = [serialize_environment(v) for v in randomize_rule(drupal, None, 5, seed=1)]
    golden["variants"] = variants == [p.read_bytes() for p in sorted((FIXTURES / "variants").glob("*.json"))]
    g = json.loads((FIXTURES / "embedding_golden.json").read_text())
    vec = embed(g["text"])
    golden["embedding"] = {str(i): float(vec[i]) for i in np.nonzero(vec)[0]} == g["nonzero"]
    ok = round_trip == identity == 200 and all(golden.values())
    record(10, ok, f"{round_trip}/200 byte round trips, {identity}/200 value identities; golden "
                   + ", ".join(f"{k} {v}" for k, v in golden.items()))
    assert ok
