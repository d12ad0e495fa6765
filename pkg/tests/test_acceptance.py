"""Acceptance gate: one PASS / FAIL / SKIP line per criterion, at the stated tolerances.

Heavy artifacts (teacher pool, encoder, meta checkpoint) are built once per session;
trained models go to a content-addressed cache under $RCNAS_ACCEPTANCE_CACHE
(default: .acceptance-cache in the repository root), so reruns are fast and
produce the same numbers.
"""

import dataclasses
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from rcnas.arch import CostReport, apply_action, cost_model, parse_descriptor, teacher_from_name
from rcnas.attacks import AttackSpec
from rcnas.cli import run as cli_run
from rcnas.data import data_root, load_dataset
from rcnas.encoder import (
    StateEmbedding, StateEncoder, encode_state, load_encoder, parameter_digest, pretrain, save_encoder,
)
from rcnas.policy import PolicyNet, load_policy, log_prob, sample, save_policy
from rcnas.rl import (
    RLConfig, Trajectory, TrajectoryStep, Workbench, compute_reward, fine_tune, meta_train, random_baseline,
    vpg_update,
)
from rcnas.tasks import TaskSetting
from rcnas.theory import SparseCodingConfig, ToyNetConfig, median_direction, run_seeds
from rcnas.training import ATConfig, evaluate, trades_train

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("RCNAS_ACCEPTANCE_CACHE", ROOT / ".acceptance-cache"))

# desk-scale stand-ins: the registered teachers narrowed 16x, 8x8 synthetic images
DATASETS = ["synthetic-gauss:10:2000:8", "synthetic-gauss:5:2000:8"]
ATTACKS = ["fgsm", "pgd20", "cw40"]
POOL = ["WRN-28-10/16", "WRN-34-12/16", "WRN-46-14/16", "WRN-70-16/16"]
TARGET_TEACHER = "WRN-16-4/8"
META_TEACHERS = [TARGET_TEACHER, "WRN-28-10/16"]
TRAIN = ATConfig(epochs=5, inner_attack=AttackSpec(kind="pgd", steps=3, loss="kl"))
RL = RLConfig(steps_per_iteration=5, finetune_iterations=10, reward_epochs=5)
SEEDS = range(5)
POST_SAMPLES = 100


def report(n, ok, detail, elapsed=None):
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
    timing = "" if elapsed is None else f" [{elapsed:.1f}s]"
    line = f"criterion {n}: {status}{timing} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def bench_for(teachers, budget_fraction=0.5):
    descs = [parse_descriptor(t) for t in teachers]
    bench = Workbench(DATASETS, ATTACKS, descs, [1.0] * len(descs), TRAIN, TRAIN, eval_size=256,
                      cache_dir=CACHE / "models")
    bench.budgets = [budget_fraction * bench.cost(d, DATASETS[0]).flops for d in descs]
    return bench


# ---------------------------------------------------------------- 1. cost model

def test_1_cost_model_fidelity():
    table = {"WRN-28-10": (5.20, 36.5), "WRN-34-12": (9.60, 66.5), "WRN-46-14": (18.6, 128),
             "WRN-70-16": (38.8, 267)}
    t0 = time.perf_counter()
    reps = {n: cost_model(teacher_from_name(n), 32) for n in table}
    elapsed = time.perf_counter() - t0
    errs = {n: (reps[n].gflops / f - 1, reps[n].params / 1e6 / p - 1) for n, (f, p) in table.items()}
    ok = all(abs(ef) <= 0.02 and abs(ep) <= 0.015 for ef, ep in errs.values()) and elapsed < 1
    detail = "; ".join(f"{n} flops {reps[n].gflops:.3f}G ({ef:+.2%}) params {reps[n].params / 1e6:.2f}M ({ep:+.2%})"
                       for n, (ef, ep) in errs.items())
    report(1, ok, detail, elapsed)
    assert ok


# ---------------------------------------------------------------- 2. reward algebra

def test_2_reward_algebra():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)

    def cost(f):
        return CostReport(params=f, flops=f, per_stage_flops=(f,))

    continuity = all(
        compute_reward(a, at, cost(s), cost(t), 1e18, 1.0).reward
        == compute_reward(a, at, cost(s), cost(t), 0.5, 1.0).reward
        for a, at, s, t in zip(rng.random(1000), rng.random(1000) + 1e-3, rng.integers(1, 10**9, 1000),
                               rng.integers(1, 10**9, 1000))
    )
    hard = all(compute_reward(a, 0.5, cost(10**9), cost(2 * 10**9), 1.0, 0.0).reward == -1.0
               for a in rng.random(1000))
    n, worst = 100_000, math.inf
    acc, acc_t = rng.random(n), rng.random(n) + 1e-12
    s_f, t_f = rng.integers(1, 4 * 10**9, n), rng.integers(1, 2 * 10**9, n)
    budgets, eps = rng.random(n) * 4e9, rng.random(n)
    eps[:1000] = 0.0
    eps[1000:2000] = 1.0
    defs = rng.choice(["removed", "remaining"], n)
    for i in range(n):
        r = compute_reward(acc[i], acc_t[i], cost(int(s_f[i])), cost(int(t_f[i])), budgets[i], eps[i], defs[i])
        worst = min(worst, r.reward)
    elapsed = time.perf_counter() - t0
    ok = continuity and hard and worst >= -1.0 and elapsed < 10
    report(2, ok, f"continuity at eps=1 exact: {continuity}; r=-1 at eps=0 over budget: {hard}; "
                  f"min reward over {n} fuzz draws {worst:.6f}", elapsed)
    assert ok


# ---------------------------------------------------------------- 3. policy gradient

def _rel_fd_error(policy, state, smp, rng, h=1e-6):
    params = list(policy.parameters())
    grads = torch.autograd.grad(log_prob(policy(state), smp), params)
    # directional derivative along a random direction through every parameter
    dirs = [torch.from_numpy(rng.standard_normal(p.shape)) for p in params]
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(h * d)
        up = log_prob(policy(state), smp).item()
        for p, d in zip(params, dirs):
            p.sub_(2 * h * d)
        down = log_prob(policy(state), smp).item()
        for p, d in zip(params, dirs):
            p.add_(h * d)
    fd_dir = (up - down) / (2 * h)
    an_dir = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
    errs = [abs(fd_dir - an_dir) / max(abs(an_dir), 1e-8)]
    # and coordinate-wise on a random subset, compared as vectors
    fd, an = [], []
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        for idx in rng.choice(flat.numel(), size=min(8, flat.numel()), replace=False):
            old = float(flat[idx])
            flat[idx] = old + h
            u = log_prob(policy(state), smp).item()
            flat[idx] = old - h
            d = log_prob(policy(state), smp).item()
            flat[idx] = old
            fd.append((u - d) / (2 * h))
            an.append(float(g.view(-1)[idx]))
    fd, an = np.array(fd), np.array(an)
    errs.append(float(np.linalg.norm(fd - an) / max(np.linalg.norm(an), 1e-8)))
    return max(errs)


def test_3_policy_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    n_inst = 60
    for i in range(n_inst):
        n_stages = 1 + i % 3
        policy = PolicyNet(d_state=64, hidden=64, seed=i)
        state = torch.from_numpy(rng.standard_normal((n_stages, 64)))
        smp = sample(policy(state), torch.Generator().manual_seed(i))
        worst = max(worst, _rel_fd_error(policy, state, smp, rng))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 120
    report(3, ok, f"max relative error vs central differences over {n_inst} instances: {worst:.2e}", elapsed)
    assert ok


# ---------------------------------------------------------------- 4. attack sanity

def _cifar_available():
    root = data_root()
    return all((root / "cifar-10-batches-bin" / f).is_file()
               for f in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"])


def test_4_attack_sanity():
    if not _cifar_available():
        report(4, None, f"CIFAR-10 binaries not found under {data_root().resolve()} "
                        "(set RCNAS_DATA_DIR); no synthetic substitute is counted")
        pytest.skip("CIFAR-10 binary files are not available")
    t0 = time.perf_counter()
    splits = load_dataset("cifar10-subset:5256", eval_size=256)
    cfg = ATConfig(epochs=5, trades_beta=6.0)
    model = trades_train(parse_descriptor("WRN-16-4/4", input_resolution=32), splits, cfg)
    spec = AttackSpec.from_id("pgd20")
    res = evaluate(model, splits.test, spec)
    from rcnas.attacks import attack
    x, y = splits.test.x[:256], splits.test.y[:256]
    adv = attack(model, x, y, spec, torch.Generator().manual_seed(0)).inputs
    contained = bool((adv - x).abs().max() <= spec.radius + 1e-6 and adv.min() >= 0 and adv.max() <= 1)
    gap = res.clean_accuracy - res.robust_accuracy
    elapsed = time.perf_counter() - t0
    ok = gap >= 0.20 and contained and elapsed <= 90 * 60
    report(4, ok, f"clean {res.clean_accuracy:.3f} pgd20 {res.robust_accuracy:.3f} gap {gap:.3f}; "
                  f"containment {contained}", elapsed)
    assert ok


# ---------------------------------------------------------------- 5. encoder pre-training

@pytest.fixture(scope="session")
def encoder_run():
    t0 = time.perf_counter()
    bench = bench_for(POOL)
    samples = bench.encoder_samples()
    enc = StateEncoder(n_stages=3, eval_size=256, seed=0)
    history = pretrain(samples, enc, steps=1000, lr=1e-3)
    CACHE.mkdir(parents=True, exist_ok=True)
    save_encoder(enc, CACHE / "encoder.ckpt")
    return enc, history, samples, time.perf_counter() - t0


def test_5_encoder_pretraining(encoder_run):
    enc, history, samples, elapsed = encoder_run
    digest = parameter_digest(enc)
    policy = PolicyNet(d_state=enc.d_state)
    rng = np.random.default_rng(0)
    g = torch.Generator().manual_seed(0)
    for i in range(100):
        enc_in, emb = samples[i % len(samples)]
        state = encode_state(enc_in, emb, enc)
        smp = sample(policy(state.per_stage), g)
        rec = compute_reward(rng.random(), 0.5, CostReport(1, 1, (1,)), CostReport(2, 2, (2,)), 10, 1.0)
        vpg_update(Trajectory([TrajectoryStep(None, state, smp, rec)]), policy, 1e-3)
    frozen = parameter_digest(enc) == digest
    ratio = history[-1] / history[0]
    ok = ratio <= 0.1 and frozen and elapsed <= 600
    report(5, ok, f"reconstruction loss {history[0]:.4f} -> {history[-1]:.4f} (ratio {ratio:.4f}) over "
                  f"{len(samples)} pool tasks; hash unchanged after 100 updates: {frozen}", elapsed)
    assert ok


# ---------------------------------------------------------------- 6 / 7. RL end to end

def _within(policy, state, teacher, budget, seed):
    g = torch.Generator().manual_seed(10_000 + seed)
    out = policy(state.per_stage)
    hits = 0
    for _ in range(POST_SAMPLES):
        hits += cost_model(apply_action(teacher, sample(out, g).action)).flops <= budget
    return hits


@pytest.fixture(scope="session")
def rl_runs(encoder_run, tmp_path_factory):
    """Meta checkpoints of 20 (criterion 7) and the default 100 iterations (criterion 6), then
    per seed: fine-tuning from each, fine-tuning from scratch and the random baseline."""
    enc = encoder_run[0]
    bench = bench_for(META_TEACHERS)
    out = {"meta_time": {}, "seed_times": []}
    ckpts = {}
    for M in (20, 100):
        t0 = time.perf_counter()
        cfg = dataclasses.replace(RL, meta_iterations=M)
        ckpts[M] = meta_train(cfg, bench, enc, PolicyNet(d_state=enc.d_state, seed=0),
                              tmp_path_factory.mktemp(f"meta{M}")).checkpoint
        out["meta_time"][M] = time.perf_counter() - t0
    target = TaskSetting(DATASETS[0], "pgd20", bench.teachers[0], bench.budgets[0])
    state = bench.state(target, enc)
    head_teacher = bench.head(target.teacher, target.dataset_id)
    for key in ("meta20", "meta100", "scratch", "random", "post_within"):
        out[key] = []
    for s in SEEDS:
        ts = time.perf_counter()
        cfg = dataclasses.replace(RL, seed=s)
        for M in (20, 100):
            ft = fine_tune(ckpts[M], target, cfg, bench, enc)
            out[f"meta{M}"].append(ft.records)
            if M == 100:
                out["post_within"].append(_within(ft.policy, state, head_teacher, target.budget_CB, s))
        out["scratch"].append(fine_tune(PolicyNet(d_state=enc.d_state, seed=100 + s), target, cfg, bench,
                                        enc).records)
        out["random"].append(random_baseline(target, cfg, bench, seed=s))
        out["seed_times"].append(time.perf_counter() - ts)
    return out


def _rewards(runs, iters=None):
    return np.array([r["reward"] for recs in runs for r in recs
                     if not r["skipped"] and (iters is None or r["iter"] in iters)])


def test_6_fine_tuning(rl_runs):
    M = RL.finetune_iterations
    last3 = set(range(M - 2, M + 1))
    pol = _rewards(rl_runs["meta100"], last3)
    base = _rewards(rl_runs["random"], last3)
    margin = pol.mean() - (base.mean() + base.std())
    logged = [r["within_budget"] for recs in rl_runs["meta100"] for r in recs if r["eps"] == 0 and not r["skipped"]]
    post = sum(rl_runs["post_within"]) / (POST_SAMPLES * len(SEEDS))
    per_seed = rl_runs["meta_time"][100] / len(SEEDS) + max(rl_runs["seed_times"])
    ok_a = margin >= 0
    ok_b = post >= 0.9
    ok = ok_a and ok_b and per_seed <= 2 * 3600
    report(6, ok, f"from the 100-iteration meta checkpoint: (a) last-3 mean reward {pol.mean():.3f} vs random {base.mean():.3f} + 1sd {base.std():.3f} "
                  f"-> {'met' if ok_a else 'missed'}; (b) within budget at eps=0: {post:.1%} of "
                  f"{POST_SAMPLES * len(SEEDS)} post-annealing samples, {sum(logged)}/{len(logged)} logged "
                  f"final-iteration actions", per_seed)
    assert ok


def _first_hit(records, threshold, M):
    for r in records:
        if not r["skipped"] and r["reward"] >= threshold:
            return r["iter"]
    return M + 1


def test_7_meta_advantage(rl_runs):
    M = RL.finetune_iterations
    base = _rewards(rl_runs["random"])
    threshold = base.mean() + base.std()
    meta_hits = [_first_hit(r, threshold, M) for r in rl_runs["meta20"]]
    scratch_hits = [_first_hit(r, threshold, M) for r in rl_runs["scratch"]]
    wins = sum(a <= b for a, b in zip(meta_hits, scratch_hits))
    strict = sum(a < b for a, b in zip(meta_hits, scratch_hits))
    ok = wins >= 3
    report(7, ok, f"20-iteration meta checkpoint; threshold {threshold:.3f}; iterations to reach it (M~+1 = never) meta {meta_hits} vs "
                  f"scratch {scratch_hits}; meta <= scratch in {wins}/5 seeds ({strict} strictly)")
    assert ok


# ---------------------------------------------------------------- 8. theory sandbox

def test_8_theory_sandbox(tmp_path):
    t0 = time.perf_counter()
    reps = run_seeds(SparseCodingConfig(D=64, k=3, sigma_x=0.05, n=1000), ToyNetConfig(width=128),
                     T=200, T_prime=200, tau=0.5, compression=0.5, seeds=range(11), out_dir=tmp_path)
    elapsed = time.perf_counter() - t0
    rlc, u = median_direction(reps)
    worst = max(r.pythagorean_max_error for r in reps)
    below = sum(r.final_RLC <= r.final_U for r in reps)
    ok = rlc <= u and worst <= 1e-8 and elapsed <= 600
    report(8, ok, f"median final max|v|: compressed {rlc:.4f} vs uncompressed {u:.4f} "
                  f"({below}/11 seeds individually); max decomposition error {worst:.1e}", elapsed)
    assert ok


# ---------------------------------------------------------------- 9. determinism & persistence

def test_9_determinism(tmp_path, monkeypatch):
    import json

    import yaml
    t0 = time.perf_counter()
    monkeypatch.setenv("RCNAS_RUNS_DIR", str(tmp_path / "runs"))
    cfg = {
        "datasets": ["synthetic-gauss:4:128:8"], "attacks": ["pgd20"], "teachers": ["WRN-16-4/8"],
        "budgets": ["50%"], "adv_train": {"epochs": 1, "batch_size": 32, "inner_steps": 2},
        "encoder": {"eval_size": 32, "steps": 50}, "rl": {"meta_iterations": 2, "steps_per_iteration": 2,
                                                          "reward_epochs": 1},
    }
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg))
    codes = [cli_run(["meta-train", "--config", str(tmp_path / "c.yaml"), "--run-id", r]) for r in ("a", "b")]
    a, b = tmp_path / "runs" / "a", tmp_path / "runs" / "b"
    same_log = (a / "records.jsonl").read_bytes() == (b / "records.jsonl").read_bytes()

    enc = load_encoder(a / "encoder.ckpt")
    save_encoder(enc, tmp_path / "e2.ckpt")
    enc2 = load_encoder(tmp_path / "e2.ckpt")
    pol = load_policy(a / "policy.ckpt")
    save_policy(pol, tmp_path / "p2.ckpt")
    pol2 = load_policy(tmp_path / "p2.ckpt")
    x = torch.randn(3, enc.d_state, dtype=torch.float64)
    o1, o2 = pol(x), pol2(x)
    enc_in = torch.rand(1, 3, 4, dtype=torch.float64)
    lips = torch.randn(1, 32, dtype=torch.float64)
    ckpt_ok = (torch.equal(o1.mean, o2.mean) and torch.equal(o1.var, o2.var) and torch.equal(o1.prob, o2.prob)
               and torch.equal(enc(enc_in, lips, lips), enc2(enc_in, lips, lips))
               and parameter_digest(enc) == parameter_digest(enc2))

    cli_run(["report", str(a)])
    first = {p.name: p.read_bytes() for p in (a / "report").glob("*.csv")}
    cli_run(["report", str(a)])
    again = {p.name: p.read_bytes() for p in (a / "report").glob("*.csv")}
    cli_run(["report", str(b)])
    other = {p.name: p.read_bytes() for p in (b / "report").glob("*.csv")}
    csv_ok = first == again == other and len(first) == 3
    elapsed = time.perf_counter() - t0
    ok = codes == [0, 0] and same_log and ckpt_ok and csv_ok
    n_lines = len((a / "records.jsonl").read_text().splitlines())
    report(9, ok, f"records.jsonl byte-identical across reruns ({n_lines} lines): {same_log}; checkpoint "
                  f"round-trips bit-identical: {ckpt_ok}; report CSVs byte-stable: {csv_ok}", elapsed)
    assert ok
