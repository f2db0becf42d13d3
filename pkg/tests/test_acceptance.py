"""Acceptance suite: one test per criterion, each reporting a single PASS/FAIL line.

Run just this file with ``pytest tests/test_acceptance.py -v``; the summary
block at the end of the pytest output lists every criterion.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from acceptance_log import record
from conftest import tiny_network
from gradients import COMPONENTS, gradient_check
from him.assignment import linear_sum_assignment
from him.cli import main
from him.compositing import SceneConfig, generate_scene, occlusion_alphas
from him.config import toy_preset
from him.matting import TRIMAP_FG, TRIMAP_UNK
from him.metrics import THRESHOLDS, instance_metrics, match_for_eval
from him.model import InstanceMattingModel
from him.perception import NetworkConfig
from him.supervision import SetCriterion, scene_targets
from him.train import DETERMINISTIC_ENV, Trainer, load_dataset, set_deterministic
from oracles import best_eval_matching, brute_force_assignment, scalar_instance_metrics, scalar_iou


def _report(name, checks: dict[str, bool], detail: str):
    failed = [k for k, ok in checks.items() if not ok]
    record(name, not failed, detail + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed, failed


# -- 1 ------------------------------------------------------------------------


@pytest.mark.slow
def test_01_overfit_toy_scenes(tmp_path):
    config = toy_preset()
    data, run = tmp_path / "data", tmp_path / "run"
    start = time.monotonic()
    assert main(["gen-data", "--count", str(config.num_scenes), "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(run)]) == 0
    assert main(["eval", "--checkpoint", str(run / "checkpoints" / "last.pt"), "--data", str(data),
                 "--out", str(run / "report.json")]) == 0
    minutes = (time.monotonic() - start) / 60
    report = json.loads((run / "report.json").read_text())["thresholds"]["0.5"]
    steps = json.loads((run / "manifest.json").read_text())["steps"]

    # fixed-set loss before and after training
    _, scenes = load_dataset(data)
    targets = [scene_targets(s) for s in scenes]
    images = torch.stack([torch.from_numpy(s.image).float() for s in scenes])
    torch.manual_seed(config.seed)
    initial = InstanceMattingModel(config.model)
    trained = Trainer.resume(run / "checkpoints" / "last.pt", scenes).model

    @torch.no_grad()
    def fixed_set_loss(model):
        model.eval()
        vals = [SetCriterion(config.loss)(model(images[i:i + 8]), targets[i:i + 8])[0].total.item() * len(targets[i:i + 8])
                for i in range(0, len(scenes), 8)]
        return sum(vals) / len(scenes)

    before, after = fixed_set_loss(initial), fixed_set_loss(trained)
    reduction = 1 - after / before
    _report(
        "1 overfit (toy config, 64 scenes)",
        {"REC_0.5>=0.90": report["REC"] >= 0.90, "ACC_0.5>=0.85": report["ACC"] >= 0.85,
         "EMAD_0.5<=0.03": report["EMAD"] is not None and report["EMAD"] <= 0.03, "steps<=5000": steps <= 5000,
         "runtime<=60min": minutes <= 60, "L_total reduced>=90%": reduction >= 0.90},
        f"REC={report['REC']:.4f} ACC={report['ACC']:.4f} EMAD={report['EMAD']} steps={steps} "
        f"time={minutes:.1f}min L_total {before:.3f}->{after:.3f} ({100 * reduction:.1f}% lower)",
    )


# -- 2 ------------------------------------------------------------------------


def test_02_gradient_suite():
    start = time.monotonic()
    checks = gradient_check(seed=0)
    seconds = time.monotonic() - start
    worst = max(checks, key=lambda c: c.relative_error)
    # every parameter tensor must actually receive gradient from the total loss
    dead = [c.name for c in checks if c.component == "L_total" and c.analytic_norm == 0]
    params = len({c.name for c in checks})
    numel = sum(c.numel for c in checks if c.component == "L_total")
    _report(
        "2 gradient suite (central differences, float64, 32x32)",
        {"rel err<=1e-4": worst.relative_error <= 1e-4, "all params reached": not dead, "runtime<=5min": seconds <= 300},
        f"{numel} scalars in {params} tensors x {len(COMPONENTS)} losses; worst {worst.relative_error:.2e} "
        f"({worst.name}, {worst.component}); {seconds:.0f}s",
    )


# -- 3 ------------------------------------------------------------------------


def test_03_assignment_oracle():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for k in range(1000):
        n, m = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        cost = rng.normal(size=(n, m)) if k % 2 else rng.integers(0, 5, size=(n, m)).astype(float)
        rows, cols = linear_sum_assignment(cost)
        mismatches += math.fsum(cost[rows, cols]) != brute_force_assignment(cost)
    _report("3 assignment oracle (1000 matrices up to 6x6)", {"exact totals": mismatches == 0},
            f"{mismatches} mismatches")


# -- 4 ------------------------------------------------------------------------


def _random_mattes(rng, count, shape):
    return [rng.random(shape) * (rng.random(shape) > rng.uniform(0.2, 0.7)) for _ in range(count)]


def test_04_metrics_oracle():
    rng = np.random.default_rng(7)
    worst, bad_match, non_monotone = 0.0, 0, 0
    for _ in range(100):
        shape = (int(rng.integers(3, 8)), int(rng.integers(3, 8)))
        gts = _random_mattes(rng, int(rng.integers(0, 5)), shape)
        preds = [np.clip(g + rng.normal(0, 0.15, shape), 0, 1) for g in gts[: int(rng.integers(0, len(gts) + 1))]]
        preds += _random_mattes(rng, int(rng.integers(0, 3)), shape)
        rng.shuffle(preds)
        matches = match_for_eval(preds, gts)
        best_total, _ = best_eval_matching(preds, gts)
        total = sum(iou for _, _, iou in matches.pairs)
        bad_match += abs(total - best_total) > 1e-10 or len(matches.pairs) != min(len(preds), len(gts))
        bad_match += any(abs(iou - scalar_iou(preds[p], gts[g])) > 1e-10 for p, g, iou in matches.pairs)
        acc_rec = []
        for th in (0.1, 0.3) + THRESHOLDS + (0.9,):
            ours = instance_metrics(matches, preds, gts, th)
            ref = scalar_instance_metrics([(preds, gts, matches.pairs)], th)
            for key in ours:
                if (ours[key] is None) != (ref[key] is None):
                    worst = math.inf
                elif ours[key] is not None:
                    worst = max(worst, abs(ours[key] - ref[key]))
            acc_rec.append((ours["ACC"], ours["REC"]))
        for key in (0, 1):
            seq = [v[key] for v in acc_rec]
            if seq[0] is not None:
                non_monotone += any(a < b for a, b in zip(seq, seq[1:]))
    _report("4 metrics oracle (100 random cases)",
            {"metrics<=1e-10": worst <= 1e-10, "matching optimal": bad_match == 0, "monotone in TH": non_monotone == 0},
            f"max metric deviation {worst:.1e}; {bad_match} matching failures; {non_monotone} monotonicity violations")


# -- 5 ------------------------------------------------------------------------


def test_05_compositing():
    configs = [SceneConfig(), SceneConfig(height=64, width=64, max_instances=3),
               SceneConfig(min_instances=4, max_instances=6, edge_width=5.0)]
    worst, over, count = 0.0, 0, 0
    for cfg in configs:
        for seed in range(60):
            scene = generate_scene(cfg, seed)
            worst = max(worst, scene.residual())
            over += scene.effective_alphas.sum(0).max() > 1.0 + 1e-12
            count += 1
    # conservation: instance weights plus transmitted background weight is exactly one.
    # Alphas on a dyadic grid keep every product and sum exact in binary floating point.
    rng = np.random.default_rng(0)
    inexact = 0
    for _ in range(200):
        raw = rng.integers(0, 257, size=(int(rng.integers(1, 6)), 8, 8)) / 256.0
        eff = occlusion_alphas(raw)
        transmit = np.prod(1.0 - raw, axis=0)
        inexact += not np.all(eff.sum(0) + transmit == 1.0)
    _report("5 compositing", {"residual<=1e-6": worst <= 1e-6, "sum<=1": over == 0, "conservation exact": inexact == 0},
            f"{count} scenes, max residual {worst:.1e}; {inexact}/200 conservation failures")


# -- 6 ------------------------------------------------------------------------


def test_06_guidance_invariants():
    torch.manual_seed(0)
    model = InstanceMattingModel(tiny_network(channels=16, queries=5, guidance_heads=3)).double().eval()
    with torch.no_grad():
        out = model(torch.rand(2, 3, 64, 64, dtype=torch.float64))
    sum_err = max((w.sum(1) - 1).abs().max().item() for w in out.guidance.attention)

    # saturated softmax toward one query reproduces its semantics vector
    head = model.guidance.heads[0]
    codes, detail = out.latent.codes, out.aux.detail
    logits = head.spatial_attention(codes, detail).detach().clone()
    target_q = 3
    logits[:, :, :, 2, 5] = -30.0
    logits[:, 1 + target_q, :, 2, 5] = 30.0
    g, _ = head.semantics_embed(codes, detail, logits)
    rep = head.semantics_mlp(codes)
    sat_err = (g[:, :, 2, 5] - rep[:, target_q]).abs().max().item()

    single = InstanceMattingModel(tiny_network(guidance_heads=1)).double().eval()
    with torch.no_grad():
        o1 = single(torch.rand(1, 3, 32, 32, dtype=torch.float64))
    identity = torch.equal(o1.guidance.united, o1.guidance.per_head[0])
    _report("6 guidance invariants",
            {"weights sum 1+-1e-6": sum_err <= 1e-6, "saturation<=1e-4": sat_err <= 1e-4, "S=1 identity": identity},
            f"max |sum-1|={sum_err:.1e}; saturation error {sat_err:.1e}; S=1 concat identical={identity}")


# -- 7 ------------------------------------------------------------------------


def test_07_fusion_trichotomy():
    mismatches, seen = 0, np.zeros(3, dtype=int)
    for k in range(50):
        torch.manual_seed(k)
        model = InstanceMattingModel(tiny_network(queries=3)).eval()
        with torch.no_grad():
            model.matting.trimap_decoder.mlp.net[-1].bias.normal_(0, 2.0)
            out = model(torch.rand(1, 3, 32, 32))
        pred = out.predictions
        logits = pred.trimap_logits.numpy()
        label = np.argmax(logits, axis=2)[:, :, None]  # first maximum wins, as in the model
        alpha = np.clip(pred.alpha_pred.numpy(), 0, 1)
        ref = np.where(label == TRIMAP_FG, np.float32(1), np.where(label == TRIMAP_UNK, alpha, np.float32(0)))
        ref = ref.astype(np.float32)
        mismatches += not np.array_equal(pred.alpha_fin.numpy().view(np.int32), ref.view(np.int32))
        seen += np.bincount(label.ravel(), minlength=3)
    _report("7 alpha fusion trichotomy (50 passes)", {"bit-exact": mismatches == 0, "all regions hit": bool(seen.all())},
            f"{mismatches} mismatching passes; region pixel counts BG/UNK/FG={seen.tolist()}")


# -- 8 ------------------------------------------------------------------------


def test_08_shape_contract():
    failures = []
    base = NetworkConfig()
    for H in (64, 128):
        for N in (8, 20):
            for S in (1, 2, 4):
                cfg = NetworkConfig(**{**base.to_dict(), "queries": N, "guidance_heads": S,
                                       "backbone_channels": base.backbone_channels})
                torch.manual_seed(0)
                model = InstanceMattingModel(cfg).eval()
                B, C = 1, cfg.channels
                with torch.no_grad():
                    o = model(torch.rand(B, 3, H, H))
                expected = {
                    "F_c": (o.features.context, (B, C, H // 16, H // 16)),
                    "F_dc": (o.aux.detail, (B, C, H // 8, H // 8)),
                    "X": (o.latent.codes, (B, N, C)),
                    "M_pred": (o.aux.mask_logits, (B, N, H // 8, H // 8)),
                    "c_pred": (o.aux.class_logits, (B, N, 2)),
                    "G_All": (o.guidance.united, (B, S * C, H // 8, H // 8)),
                    "F_tri": (o.matting_features.trimap, (B, cfg.trimap_channels, H // 2, H // 2)),
                    "F_alpha": (o.matting_features.alpha, (B, cfg.alpha_channels, H, H)),
                    "T_pred": (o.predictions.trimap_logits, (B, N, 3, H, H)),
                    "alpha_fin": (o.alpha_fin, (B, N, 1, H, H)),
                }
                for h in range(S):
                    expected[f"W_sa[{h}]"] = (o.guidance.attention[h], (B, N + 1, 1, H // 8, H // 8))
                    expected[f"G[{h}]"] = (o.guidance.per_head[h], (B, C, H // 8, H // 8))
                for name, (tensor, shape) in expected.items():
                    if tuple(tensor.shape) != shape:
                        failures.append(f"H={H} N={N} S={S} {name} {tuple(tensor.shape)}!={shape}")
    _report("8 shape contract (12 configurations)", {"all shapes": not failures},
            f"{len(failures)} shape violations" + (f" e.g. {failures[0]}" if failures else ""))


# -- 9 ------------------------------------------------------------------------


def test_09_determinism_and_persistence(tmp_path, monkeypatch):
    monkeypatch.setenv(DETERMINISTIC_ENV, "1")
    set_deterministic(True)
    try:
        common = ["--set", "data.height=64", "--set", "data.width=64", "--set", "data.max_instances=2"]
        assert main(["gen-data", "--count", "3", "--out", str(tmp_path / "data")] + common) == 0
        train = ["train", "--data", str(tmp_path / "data"), "--set", "optim.steps=4", "--set", "optim.batch_size=2",
                 "--set", "checkpoint_every=2", "--set", "model.channels=32", "--set", "model.queries=4"] + common
        assert main(train + ["--out", str(tmp_path / "a")]) == 0
        assert main(train + ["--out", str(tmp_path / "b")]) == 0
        log_a = (tmp_path / "a" / "losses.jsonl").read_text()
        identical_logs = log_a == (tmp_path / "b" / "losses.jsonl").read_text()

        # bit-exact checkpoint round trip, optimiser state included
        _, scenes = load_dataset(tmp_path / "data")
        ckpt = tmp_path / "a" / "checkpoints" / "step_000002.pt"
        trainer = Trainer.resume(ckpt, scenes)
        again = trainer.save(tmp_path / "copy.pt")
        p1, p2 = torch.load(ckpt, weights_only=False), torch.load(again, weights_only=False)
        same = all(torch.equal(p1["parameters"][k], p2["parameters"][k]) for k in p1["parameters"])
        same &= all(torch.equal(a, b) for s1, s2 in zip(p1["optimizer"]["state"].values(),
                                                         p2["optimizer"]["state"].values())
                    for a, b in zip(s1.values(), s2.values()))
        same &= p1["step"] == p2["step"] and p1["config"] == p2["config"] and p1["scheduler"] == p2["scheduler"]

        # resumed training reproduces the continued run's next steps
        resumed = trainer.run()
        continued = [json.loads(x) for x in log_a.splitlines()][2:]
        diff = max(abs(r[k] - c[k]) for r, c in zip(resumed, continued) for k in r if k != "step")
        steps_match = [r["step"] for r in resumed] == [c["step"] for c in continued]
    finally:
        set_deterministic(False)
    _report("9 determinism and persistence",
            {"identical logs": identical_logs, "checkpoint bit-exact": same, "resume<=1e-6": steps_match and diff <= 1e-6},
            f"logs identical={identical_logs}; round trip bit-exact={same}; resume max deviation {diff:.1e}")
