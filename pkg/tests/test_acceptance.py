"""Acceptance suite: every numbered requirement as one test with a printed
PASS/FAIL verdict line.

The trend checks (9-11) share one set of desk-scale training runs through a
module fixture; everything else is oracle equivalence, contract checks, or
short seeded runs.
"""

import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import kglnet.trainer as trainer_mod
from kglnet.blocks import (
    EfficientChannelAttention,
    FilterResponseNorm,
    MetricClassifier,
    ThresholdedLinearUnit,
)
from kglnet.cli import main as cli_main
from kglnet.data import SynthConfig, generate_synthetic, load_patch_pack, save_patch_pack, training_batches
from kglnet.errors import DivergenceError
from kglnet.evaluator import HIGHER_IS_MATCH, LOWER_IS_MATCH, ScoredPairs, evaluate, fpr95
from kglnet.losses import descriptor_loss, feature_guided_loss, metric_loss
from kglnet.mining import distance_matrix, hard_negative_indices
from kglnet.network import (
    PRESET_NAMES,
    build_metric_only,
    build_network,
    count_parameters,
    get_preset,
    shared_parameter_report,
)
from kglnet.trainer import TrainConfig, derived_seed, make_optimizer, train, train_step

torch.set_num_threads(1)

DESK_ARCH = dict(channel_scale=0.125)
DESK_SEEDS = (0, 1, 2)
DESK_TRAIN = dict(n_pairs=5000, severity=0.5, noise=0.02)
DESK_EVAL = SynthConfig(n_pairs=1000, severity=0.5, noise=0.02, seed=999, split="test")


def verdict(number: int, ok: bool, detail: str):
    line = f"[criterion {number:02d}] {'PASS' if ok else 'FAIL'} — {detail}"
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. mining oracle equivalence


def test_criterion_01_mining_matches_loop_oracle():
    start = time.time()
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(100):
        n = int(rng.integers(2, 65))
        d = int(rng.integers(1, 17))
        db = rng.standard_normal((n, d))
        da = rng.standard_normal((n, d))
        if trial % 3 == 0:  # quantized coordinates force distance ties
            db, da = np.round(db), np.round(da)
        got = distance_matrix(torch.tensor(db), torch.tensor(da)).numpy()
        want = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                want[i, j] = np.sqrt(((db[i] - da[j]) ** 2).sum())
        worst = max(worst, np.abs(got - want).max())
        assert worst <= 1e-6

        masked = want.copy()
        np.fill_diagonal(masked, np.inf)
        brute = np.array([int(np.argmin(masked[:, j])) for j in range(n)])
        assert np.array_equal(hard_negative_indices(got), brute)
    verdict(1, time.time() - start < 10, f"100 batches, max |Δd| {worst:.2e}, "
            f"argmin exact, {time.time() - start:.1f}s")


# ---------------------------------------------------------------------------
# 2. FPR95 oracle equivalence


def _scan_oracle(scores, labels, orientation):
    sgn = 1.0 if orientation == HIGHER_IS_MATCH else -1.0
    pos, neg = sgn * scores[labels == 1], sgn * scores[labels == 0]
    best = None
    for t in np.unique(pos):
        if (pos >= t).mean() >= 0.95:
            f = (neg >= t).mean()
            best = f if best is None else min(best, f)
    return best


def test_criterion_02_fpr95_matches_scan_oracle():
    start = time.time()
    rng = np.random.default_rng(22)
    for trial in range(500):
        n_pos = 1 if trial % 7 == 0 else int(rng.integers(1, 80))
        n_neg = int(rng.integers(1, 80))
        pool = (
            rng.integers(0, 6, n_pos + n_neg).astype(float)
            if trial % 2
            else rng.standard_normal(n_pos + n_neg)
        )
        labels = np.r_[np.ones(n_pos, int), np.zeros(n_neg, int)]
        orientation = HIGHER_IS_MATCH if trial % 3 else LOWER_IS_MATCH
        sp = ScoredPairs(pool, labels, orientation=orientation)
        assert fpr95(sp) == _scan_oracle(pool, labels, orientation)
        if trial % 25 == 0:  # monotone-transform invariance, exact
            assert fpr95(ScoredPairs(3.0 * pool + 2.0, labels, orientation=orientation)) == fpr95(sp)
            assert fpr95(ScoredPairs(np.exp(pool), labels, orientation=orientation)) == fpr95(sp)
    verdict(2, time.time() - start < 30,
            f"500 score sets incl. ties/degenerates, exact, {time.time() - start:.1f}s")


# ---------------------------------------------------------------------------
# 3. finite-difference gradient checks


def _fd_check(func, inputs, step=1e-5):
    """Max relative error between autograd and central differences."""
    leaves = [t.detach().double().requires_grad_(True) for t in inputs]
    out = func(*leaves)
    out.backward()
    worst = 0.0
    for leaf in leaves:
        grad = leaf.grad.detach().clone()
        fd = torch.zeros_like(grad)
        flat = leaf.data.view(-1)
        fd_flat = fd.view(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + step
            hi = func(*leaves).item()
            flat[k] = orig - step
            lo = func(*leaves).item()
            flat[k] = orig
            fd_flat[k] = (hi - lo) / (2 * step)
        scale = max(grad.abs().max().item(), fd.abs().max().item(), 1e-10)
        worst = max(worst, (grad - fd).abs().max().item() / scale)
    return worst


def test_criterion_03_gradient_checks():
    start = time.time()
    rng = np.random.default_rng(33)
    torch.manual_seed(33)
    cases = []

    frn = FilterResponseNorm(3).double()
    for _ in range(20):
        cases.append(("frn", lambda x: frn(x).pow(2).sum(),
                      [torch.tensor(rng.standard_normal((2, 3, 4, 4)))]))

    tlu = ThresholdedLinearUnit(3).double()
    for _ in range(20):
        x = torch.tensor(rng.standard_normal((2, 3, 4, 4)))
        x = torch.where(x.abs() < 0.1, x + 0.5, x)  # stay off the max() kink
        cases.append(("tlu", lambda x: tlu(x).pow(2).sum(), [x]))

    eca = EfficientChannelAttention(4).double()
    for _ in range(20):
        cases.append(("eca", lambda x: eca(x).pow(2).sum(),
                      [torch.tensor(rng.standard_normal((2, 4, 4, 4)))]))

    clf = MetricClassifier(2 * 64).double()
    for _ in range(20):
        a = torch.tensor(rng.standard_normal((1, 2, 8, 8)))
        b = torch.tensor(rng.standard_normal((1, 2, 8, 8)))
        apart = torch.sign(a - b) * 0.05
        b = b - apart  # keep |a-b| off the abs() kink
        cases.append(("metric_branch",
                      lambda a, b: clf.score_maps(a, b).sum(), [a, b]))

    for _ in range(20):
        a = torch.tensor(rng.standard_normal((3, 2, 3, 3)))
        b = torch.tensor(rng.standard_normal((3, 2, 3, 3)))
        cases.append(("fgl", feature_guided_loss, [a, b]))

    for _ in range(20):
        while True:
            da = torch.nn.functional.normalize(torch.tensor(rng.standard_normal((6, 8))), dim=1)
            db = torch.nn.functional.normalize(torch.tensor(rng.standard_normal((6, 8))), dim=1)
            dm = distance_matrix(db, da)
            off = dm[~torch.eye(6, dtype=torch.bool)]
            gaps = (off[:, None] - off[None, :]).abs() + torch.eye(len(off), dtype=dm.dtype)
            pos = dm.diag()
            hardest = torch.minimum(
                (dm + torch.eye(6, dtype=dm.dtype) * 1e9).min(dim=0).values,
                (dm + torch.eye(6, dtype=dm.dtype) * 1e9).min(dim=1).values,
            )
            # keep both the hinge and every argmin decisively away from a switch
            if (pos - hardest + 1.0).abs().min() > 1e-3 and gaps.min() > 1e-3:
                break
        cases.append(("descriptor_loss",
                      lambda da, db: descriptor_loss(da, db, margin=1.0), [da, db]))

    labels = torch.tensor(rng.integers(0, 2, 8).astype(float))
    for _ in range(20):
        cases.append(("metric_loss",
                      lambda z: metric_loss(z, labels),
                      [torch.tensor(rng.standard_normal(8))]))

    worst = {}
    for name, func, inputs in cases:
        err = _fd_check(func, inputs)
        worst[name] = max(worst.get(name, 0.0), err)
        assert err < 1e-3, (name, err)
    elapsed = time.time() - start
    summary = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(3, elapsed < 120, f"max rel err per op: {summary}; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 4. the architecture family


_SERIES_SHARED = {"A": frozenset(), "B": frozenset(range(1, 9)),
                  "C": frozenset(range(1, 5)), "D": frozenset(range(5, 9))}
_COMBO_STRUCTURE = {1: ("siamese", "siamese"), 2: ("siamese", "pseudo"),
                    3: ("pseudo", "siamese"), 4: ("pseudo", "pseudo"),
                    5: ("siamese", "pseudo"), 6: ("pseudo", "siamese")}


def test_criterion_04_all_presets_build_and_share_correctly():
    start = time.time()
    for name in PRESET_NAMES:
        cfg = get_preset(name, channel_scale=0.25)
        net = build_network(cfg, seed=0)
        series, combo = name[0], int(name[1])
        shared = _SERIES_SHARED[series]
        m_struct, d_struct = _COMBO_STRUCTURE[combo]
        assert cfg.metric_structure == m_struct and cfg.descriptor_structure == d_struct, name
        dominant = cfg.dominant if cfg.dominant != "none" else "metric"
        shared_struct = m_struct if dominant == "metric" else d_struct
        for pos in range(1, 9):
            for s in ("a", "b"):
                same = net.stack_module("metric", s, pos) is net.stack_module("descriptor", s, pos)
                assert same == (pos in shared), (name, pos, s)
            for stack, struct in (("metric", m_struct), ("descriptor", d_struct)):
                eff = shared_struct if pos in shared else struct
                twin = net.stack_module(stack, "a", pos) is net.stack_module(stack, "b", pos)
                assert twin == (eff == "siamese"), (name, stack, pos)

        report = shared_parameter_report(net)
        assert report.total_parameters == count_parameters(net)
        feats = net(torch.rand(2, 1, 64, 64), torch.rand(2, 1, 64, 64))
        loss = feats.metric_a.sum() + feats.descriptor_a.sum()
        loss.backward()
        assert all(p.grad is None or torch.isfinite(p.grad).all() for p in net.parameters())

    c3 = get_preset("C3")
    assert (c3.metric_structure, c3.descriptor_structure) == ("pseudo", "siamese")
    assert c3.sharing == "front" and c3.shared_layer_count == 4 and c3.dominant == "metric"
    elapsed = time.time() - start
    verdict(4, elapsed < 120, f"20 presets build/forward/backward, sharing by identity, "
            f"C3 = PS-metric/S-descriptor front-4; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 5. descriptor contract


def test_criterion_05_descriptor_rows_unit_norm():
    worst = 0.0
    for dim in (64, 128, 256):
        net = build_network(get_preset("C3", channel_scale=0.25, descriptor_dim=dim), seed=dim)
        feats = net(torch.rand(5, 1, 64, 64), torch.rand(5, 1, 64, 64))
        for d in (feats.descriptor_a, feats.descriptor_b):
            assert d.shape == (5, dim)
            worst = max(worst, (d.norm(dim=1) - 1.0).abs().max().item())
    verdict(5, worst <= 1e-5, f"D in {{64,128,256}}, max |norm-1| {worst:.1e}")


# ---------------------------------------------------------------------------
# 6. parameter budget


def test_criterion_06_default_parameter_budget():
    total = count_parameters(build_network(get_preset("C3"), seed=0))
    ok = 4_500_000 <= total <= 8_500_000
    verdict(6, ok, f"default C3 has {total:,} parameters (band 4.5M-8.5M; "
            f"published calibration point 6.41M is sizing-dependent)")


# ---------------------------------------------------------------------------
# 7. determinism


def test_criterion_07_train_is_deterministic(tmp_path):
    pack = generate_synthetic(SynthConfig(n_pairs=408, severity=0.5, noise=0.02, seed=77))
    runs = []
    for tag in ("one", "two"):
        cfg = TrainConfig(batch_size=8, epochs=2, seed=5, checkpoint_every=0,
                          architecture=get_preset("C3", **DESK_ARCH))
        net = build_network(cfg.architecture, seed=cfg.seed)
        runs.append(train(net, pack, cfg, tmp_path / tag).breakdowns)
    assert len(runs[0]) >= 100
    worst = 0.0
    for x, y in zip(runs[0][:100], runs[1][:100]):
        for field in ("descriptor", "metric", "guide_a", "guide_b", "total"):
            worst = max(worst, abs(getattr(x, field) - getattr(y, field)))
    verdict(7, worst <= 1e-6, f"100 steps, max per-component drift {worst:.1e}")


# ---------------------------------------------------------------------------
# 8. overfit sanity


def test_criterion_08_overfits_one_fixed_batch():
    start = time.time()
    arch = get_preset("C3", channel_scale=0.25)
    pack = generate_synthetic(SynthConfig(n_pairs=16, severity=0.5, noise=0.02, seed=42))
    batch = next(training_batches(pack, 8, epoch_seed=7))
    cfg = TrainConfig(batch_size=8, epochs=1, seed=0, architecture=arch)
    net = build_network(arch, seed=0)
    opt = make_optimizer(net, cfg)
    final = None
    for step in range(500):
        final = train_step(net, opt, batch, cfg, derived_seed(0, step), step).metric
    elapsed = time.time() - start
    verdict(8, final < 0.1 and elapsed < 300,
            f"500 steps on 8 fixed pairs -> L_m {final:.4f}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 9-11. desk-scale trend checks (shared runs)


@pytest.fixture(scope="module")
def desk_runs():
    eval_pack = generate_synthetic(DESK_EVAL)
    arch = get_preset("C3", **DESK_ARCH)
    arms = {
        "full": dict(),
        "nohnsm": dict(use_hnsm=False),
        "wo_all": dict(metric_only=True, use_hnsm=False, use_fgl=False),
        "lr_equal": dict(lr_metric_branch=5e-3),
    }
    results = {arm: {} for arm in arms}
    for seed in DESK_SEEDS:
        train_pack = generate_synthetic(SynthConfig(seed=1000 + seed, **DESK_TRAIN))
        for arm, opts in arms.items():
            opts = dict(opts)
            metric_only = opts.pop("metric_only", False)
            cfg = TrainConfig(batch_size=64, epochs=10, seed=seed, checkpoint_every=0,
                              architecture=arch, **opts)
            net = (build_metric_only if metric_only else build_network)(arch, seed=seed)
            start = time.time()
            outcome = {"diverged": False, "fpr": None}
            try:
                with tempfile.TemporaryDirectory() as scratch:
                    train(net, train_pack, cfg, scratch)
                outcome["fpr"] = evaluate(net, eval_pack, head="metric").mean_percent
            except DivergenceError:
                outcome["diverged"] = True
            outcome["minutes"] = (time.time() - start) / 60
            results[arm][seed] = outcome
            print(f"[desk] {arm} seed {seed}: "
                  + ("diverged" if outcome["diverged"] else f"FPR95 {outcome['fpr']:.2f}%")
                  + f" ({outcome['minutes']:.1f} min)", file=sys.__stdout__, flush=True)
    return results


def _fmt(outcome):
    return "diverged" if outcome["diverged"] else f"{outcome['fpr']:.2f}%"


def test_criterion_09_mining_trend(desk_runs):
    wins, parts, minutes = 0, [], 0.0
    for seed in DESK_SEEDS:
        full, base = desk_runs["full"][seed], desk_runs["nohnsm"][seed]
        minutes += full["minutes"] + base["minutes"]
        if full["diverged"] or base["diverged"] or base["fpr"] == 0:
            parts.append(f"s{seed}: {_fmt(base)} vs {_fmt(full)} (no comparison)")
            continue
        rel = (base["fpr"] - full["fpr"]) / base["fpr"]
        parts.append(f"s{seed}: {_fmt(base)} -> {_fmt(full)} ({rel:+.0%})")
        if full["fpr"] < base["fpr"] and rel >= 0.10:
            wins += 1
    verdict(9, wins >= 2 and minutes < 30,
            f"mined vs random negatives: {', '.join(parts)}; {wins}/3 seeds >=10% better, "
            f"{minutes:.0f} min for the six runs")


# Known faithful failure. At desk scale the full configuration loses to the
# metric-only baseline on every seed (3.6/29.5/9.8 vs 2.2/2.7/1.8 %FPR95): the
# guidance term's gradient is unit-magnitude and never decays, so the metric
# branch equilibrates with its feature maps glued to the descriptor's
# (guide ~0.05) and its loss stalled well above the baseline's. The tax is
# robust — scene density 16/64, triplet margins 0.5/0.2, the hybrid descriptor
# loss, flip augmentation, wide-tail and double-width backbones, and every
# eval-list composition all leave the baseline ahead (its ROC dominates at
# every recall). The combined architecture does beat the baseline with
# guidance off, and the mining check (criterion 9) passes, so the assertion
# below is kept as-is instead of being weakened to fit the small-scale regime.
def test_criterion_10_ablation_ladder(desk_runs):
    wins = sum(
        1
        for seed in DESK_SEEDS
        if not desk_runs["full"][seed]["diverged"]
        and not desk_runs["wo_all"][seed]["diverged"]
        and desk_runs["full"][seed]["fpr"] < desk_runs["wo_all"][seed]["fpr"]
    )
    detail = ", ".join(
        f"s{seed}: wo_all {_fmt(desk_runs['wo_all'][seed])} vs "
        f"full {_fmt(desk_runs['full'][seed])}" for seed in DESK_SEEDS
    )
    verdict(10, wins >= 2, f"{detail}; full wins {wins}/3 seeds")


def test_criterion_11_equal_lr_sanity(desk_runs, tmp_path, monkeypatch, capsys):
    ok_seeds = 0
    notes = []
    for seed in DESK_SEEDS:
        eq, full = desk_runs["lr_equal"][seed], desk_runs["full"][seed]
        if eq["diverged"]:
            ok_seeds += 1
            notes.append(f"s{seed}: diverged")
        elif full["fpr"] is not None and eq["fpr"] >= full["fpr"]:
            ok_seeds += 1
            notes.append(f"s{seed}: {eq['fpr']:.2f}% >= {full['fpr']:.2f}%")
        else:
            notes.append(f"s{seed}: {eq['fpr']:.2f}% < {full['fpr']:.2f}%")

    # divergence must surface as exit code 4 with a machine-readable trace,
    # never silently: force a non-finite loss through the real CLI path
    pack_dir = tmp_path / "pack"
    save_patch_pack(generate_synthetic(SynthConfig(n_pairs=24, seed=3)), pack_dir)
    monkeypatch.setattr(trainer_mod, "metric_loss",
                        lambda logits, labels: torch.tensor(float("nan")))
    code = cli_main(["train", "--data", str(pack_dir), "--out", str(tmp_path / "run"),
                     "--arch", "A1", "--channel-scale", "0.125", "--batch-size", "8",
                     "--epochs", "1"])
    captured = capsys.readouterr()
    surfaced = (
        code == 4
        and json.loads(captured.err.strip().splitlines()[-1])["exit_code"] == 4
        and json.loads((tmp_path / "run" / "error.json").read_text())["error"] == "DivergenceError"
    )
    verdict(11, ok_seeds >= 2 and surfaced,
            f"equal-lr no better in {ok_seeds}/3 seeds ({'; '.join(notes)}); "
            f"divergence exits 4 with error.json: {surfaced}")


# ---------------------------------------------------------------------------
# 12. data round-trip


def test_criterion_12_pack_roundtrip_and_reproducibility(tmp_path):
    cfg = SynthConfig(n_pairs=64, severity=0.6, noise=0.03, seed=1234)
    pack = generate_synthetic(cfg)
    again = generate_synthetic(cfg)
    bitwise = pack.digest() == again.digest()

    save_patch_pack(pack, tmp_path / "p")
    back = load_patch_pack(tmp_path / "p")
    roundtrip = back.digest() == pack.digest()
    save_patch_pack(back, tmp_path / "q")
    bytes_equal = all(
        (tmp_path / "p" / f).read_bytes() == (tmp_path / "q" / f).read_bytes()
        for f in ("manifest.json", "a.bin", "b.bin", "labels.csv")
    )
    verdict(12, bitwise and roundtrip and bytes_equal,
            f"generation bit-reproducible: {bitwise}; write->load hash match: {roundtrip}; "
            f"re-save byte-identical: {bytes_equal}")
