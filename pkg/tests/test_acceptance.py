"""The nine acceptance criteria, each reported as one PASS/FAIL line."""
import hashlib
import itertools
import json
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from oculosim.dataforge import (
    BRIGHTNESS_OFFSETS,
    CLAHE_CLIP,
    CLAHE_GRID,
    EXEMPLAR_INSTRUCTION,
    SR_FACTORS,
    LeakageError,
    PhantomSpec,
    build_exemplar,
    downsample_pair,
    gen_phantom,
    make_inpaint,
    make_inpaint_rects,
    make_outpaint,
)
from oculosim.harness.cli import run as cli
from oculosim.harness.config import EvalConfig, ForgeConfig
from oculosim.harness.evaluate import cmd_eval
from oculosim.harness.forge import cmd_forge
from oculosim.imagecore import DatasetManifest, SampleRecord, patient_split
from oculosim.metrics import (
    Box,
    box_iou,
    confusion,
    frechet_distance,
    greedy_match,
    inception_score,
    psnr,
    render_change_map,
    segmentation_metrics,
    signed_change_map,
    ssim,
    tissue_mask,
)
from oculosim.worldsim import (
    Corpus,
    DiffusionSchedule,
    ModelConfig,
    TrainConfig,
    WorldModel,
    conditioning_sequence,
    grad_check,
    lr_schedule,
    make_optimizer,
    mine_hard,
    model_loss,
    read_log,
    record_prompt,
    run_curriculum,
    smoothed_losses,
    step_generator,
    to_tensor,
    train_vae,
)
from oculosim.worldsim.text import ImageRef


class Criterion:
    def __init__(self, number: int, name: str):
        self.number, self.name = number, name
        self.notes: list[str] = []
        self.failures: list[str] = []

    def check(self, ok: bool, what: str) -> None:
        (self.notes if ok else self.failures).append(what)


@contextmanager
def criterion(number: int, name: str):
    c = Criterion(number, name)
    t0 = time.perf_counter()
    try:
        yield c
    except Exception as exc:  # noqa: BLE001 - reported, then re-raised
        c.failures.append(f"{type(exc).__name__}: {exc}")
        raise
    finally:
        status = "FAIL" if c.failures else "PASS"
        detail = "; ".join(c.failures or c.notes)
        line = f"ACCEPTANCE {number} {status} {name} ({time.perf_counter() - t0:.1f}s): {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    assert not c.failures, "; ".join(c.failures)


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


# 1 -------------------------------------------------------------------------

def _count_oracle(pred, gt, c):
    tp = fp = fn = tn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p == c and g == c:
            tp += 1
        elif p == c:
            fp += 1
        elif g == c:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def _pixel_iou(a: Box, b: Box) -> float:
    grid = np.zeros((2, 40, 40), bool)
    for k, bx in enumerate((a, b)):
        grid[k, int(bx.y0):int(bx.y1), int(bx.x0):int(bx.x1)] = True
    union = (grid[0] | grid[1]).sum()
    return (grid[0] & grid[1]).sum() / union


def _exhaustive_match(preds, gts, thr):
    ious = [[_pixel_iou(p, g) for g in gts] for p in preds]
    best = [max(row) if row else 0.0 for row in ious]
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, -best[i], i))
    best_key, best_choice = None, None
    for choice in itertools.product(*[[None] + list(range(len(gts))) for _ in preds]):
        used = [c for c in choice if c is not None]
        if len(used) != len(set(used)) or any(c is not None and ious[i][c] < thr for i, c in enumerate(choice)):
            continue
        key = tuple((ious[i][choice[i]], -choice[i]) if choice[i] is not None else (-1.0, 0) for i in order)
        if best_key is None or key > best_key:
            best_key, best_choice = key, choice
    return {i: c for i, c in enumerate(best_choice) if c is not None}


def test_criterion_1_metric_oracles():
    with criterion(1, "metric oracle suite") as c:
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        exact = 0
        for _ in range(200):
            pred, gt = rng.integers(0, 3, (16, 16)), rng.integers(0, 3, (16, 16))
            classes = sorted((set(pred.ravel().tolist()) | set(gt.ravel().tolist())) - {0}) or [1]
            per = []
            for k in classes:
                cc = confusion(pred, gt, k)
                assert (cc.tp, cc.fp, cc.fn, cc.tn) == _count_oracle(pred, gt, k)
                tp, fp, fn, tn = _count_oracle(pred, gt, k)
                per.append({"dice": 2 * tp / (2 * tp + fp + fn), "miou": tp / (tp + fp + fn),
                            "accuracy": (tp + tn) / 256, "precision": tp / (tp + fp) if tp + fp else 0.0,
                            "sensitivity": tp / (tp + fn) if tp + fn else 0.0,
                            "specificity": tn / (tn + fp)})
            want = {k: float(np.mean([p[k] for p in per])) for k in per[0]}
            got = segmentation_metrics(pred, gt)
            exact += all(got[k] == want[k] for k in want)
        c.check(exact == 200, f"segmentation exact on {exact}/200 pairs")
        agree_iou = agree_match = 0
        for _ in range(100):
            def box():
                x, y = rng.integers(0, 30, 2)
                w, h = rng.integers(1, 10, 2)
                return Box(float(x), float(y), float(x + w), float(y + h), float(rng.choice([0.5, 0.8, 1.0])))
            preds = [box() for _ in range(rng.integers(0, 5))]
            gts = [box() for _ in range(rng.integers(0, 5))]
            agree_iou += all(box_iou(p, g) == pytest.approx(_pixel_iou(p, g), abs=1e-12) for p in preds for g in gts)
            got = {i: j for i, j, _ in greedy_match(preds, gts, 0.3)}
            agree_match += got == _exhaustive_match(preds, gts, 0.3)
        c.check(agree_iou == 100, f"box IoU agrees on {agree_iou}/100 sets")
        c.check(agree_match == 100, f"greedy matching agrees on {agree_match}/100 sets")
        elapsed = time.perf_counter() - t0
        c.check(elapsed < 10, f"runtime {elapsed:.2f}s < 10s")


# 2 -------------------------------------------------------------------------

def test_criterion_2_closed_forms():
    with criterion(2, "closed-form metric checks") as c:
        rng = np.random.default_rng(2)
        a = rng.random((32, 32, 3)) * 0.9
        p = psnr(a, a + 10 / 255)
        c.check(abs(p - 28.13) <= 0.01, f"PSNR {p:.4f} dB")
        mu_a, mu_b = rng.normal(size=6), rng.normal(size=6)
        fd = frechet_distance(np.tile(mu_a, (4, 1)), np.tile(mu_b, (9, 1)))
        want = float(np.sum((mu_a - mu_b) ** 2))
        c.check(abs(fd - want) <= 1e-6, f"Frechet point masses |err| {abs(fd - want):.2e}")
        for k in (2, 5, 10):
            isc = inception_score(np.eye(k))
            c.check(abs(isc - k) <= 1e-9, f"IS of {k} one-hot = {isc:.12f}")
        s = ssim(a, a)
        c.check(s == 1.0, f"SSIM(a,a) = {s}")


# 3 -------------------------------------------------------------------------

def test_criterion_3_paper_constants():
    with criterion(3, "paper-constant conformance") as c:
        c.check(SR_FACTORS == (5, 7, 9, 11, 13), f"SR factors {SR_FACTORS}")
        try:
            downsample_pair(np.zeros((20, 20, 1)), 4)
            c.check(False, "factor 4 accepted")
        except ValueError:
            pass
        img = np.ones((64, 64, 3))
        n_rect, cov_in, ret_out = set(), [], []
        for seed in range(10_000):
            n_rect.add(len(make_inpaint_rects(img, seed)))
            cov_in.append(make_inpaint(img, seed)[1].mean())
            ret_out.append(make_outpaint(img, seed)[1].mean())
        c.check(n_rect <= {1, 2, 3, 4, 5}, f"inpaint rectangles in {sorted(n_rect)}")
        c.check(0.10 <= min(cov_in) and max(cov_in) <= 0.50, f"inpaint coverage [{min(cov_in):.3f}, {max(cov_in):.3f}]")
        c.check(0.30 <= min(ret_out) and max(ret_out) <= 0.80, f"outpaint retention [{min(ret_out):.3f}, {max(ret_out):.3f}]")
        c.check((CLAHE_CLIP, CLAHE_GRID) == (2.0, (8, 8)), "CLAHE (2.0, 8x8)")
        c.check(BRIGHTNESS_OFFSETS == (-10 / 255, 20 / 255), "brightness offsets {-10,+20}/255")
        hard = mine_hard([{"id": "a", "task": "segment", "dice": 0.5, "miou": 0.5},
                          {"id": "b", "task": "segment", "dice": 0.4999, "miou": 0.9},
                          {"id": "c", "task": "segment", "dice": 0.9, "miou": 0.4999},
                          {"id": "d", "task": "enhance", "ssim": 0.5},
                          {"id": "e", "task": "enhance", "ssim": 0.4999}])
        c.check(set(hard) == {"b", "c", "e"}, "hard thresholds strictly below 0.5")
        c.check(lr_schedule(0) == 1e-18 and lr_schedule(500) == 1e-5, "lr(0)=1e-18, lr(500)=1e-5")
        c.check(all(lr_schedule(s) == 1e-5 for s in range(500, 5000, 37)), "lr constant after 500")
        g = make_optimizer([torch.nn.Parameter(torch.zeros(1))]).param_groups[0]
        c.check((g["betas"], g["weight_decay"], g["eps"]) == ((0.9, 0.95), 0.01, 1e-8), "AdamW (0.9, 0.95, 0.01, 1e-8)")
        rng = np.random.default_rng(3)
        recs = [SampleRecord(f"r{p}_{k}", f"P{p:04d}", "segment", ("i.png",), "t.png", "Segment.")
                for p in range(1000) for k in range(int(rng.integers(1, 4)))]
        m = patient_split(DatasetManifest(tuple(recs)), (0.70, 0.15, 0.15), 3)
        pats = {s: {r.patient_id for r in m.by_split(s)} for s in ("train", "val", "test")}
        sizes = tuple(len(pats[s]) for s in ("train", "val", "test"))
        c.check(sizes == (700, 150, 150), f"patients per split {sizes}")
        cross = len(pats["train"] & pats["val"]) + len(pats["train"] & pats["test"]) + len(pats["val"] & pats["test"])
        c.check(cross == 0, f"{cross} cross-split patients")


# 4 -------------------------------------------------------------------------

def test_criterion_4_change_map():
    with criterion(4, "signed change map suite") as c:
        img = gen_phantom(PhantomSpec(width=128, height=128), 4).image
        tissue = tissue_mask(img)
        zero = signed_change_map(img, img, tissue)
        c.check(not zero.values.any() and zero.peak is None, "identical images give a zero map")
        ys, xs = np.nonzero(tissue)
        y, x = int(ys[len(ys) // 2]), int(xs[len(xs) // 2])
        for delta, sign in ((0.2, 1.0), (-0.2, -1.0)):
            after = img.copy()
            after[y, x] = np.clip(after[y, x] + delta, 0, 1)
            m = signed_change_map(img, after, tissue)
            expected = np.zeros(tissue.shape)
            expected[y, x] = sign
            c.check(np.array_equal(m.values, expected) and m.peak == (x, y), f"single pixel -> {sign:+.0f} at peak")
        oy, ox = np.argwhere(tissue == 0)[0]
        after = img.copy()
        after[oy, ox] = 1 - after[oy, ox]
        c.check(not signed_change_map(img, after, tissue).values.any(), "out-of-tissue change gated")
        rng = np.random.default_rng(4)
        worst = 0.0
        for k in range(5):
            b = np.clip(img + rng.normal(0, 0.1, img.shape), 0, 1)
            t0 = time.perf_counter()
            m = signed_change_map(img, b, tissue_mask(img))
            render_change_map(m)
            worst = max(worst, time.perf_counter() - t0)
            c.check(np.abs(m.values).max() <= 1.0 and np.abs(m.values).max() == 1.0, "range within [-1, 1]")
        c.check(worst < 1.0, f"worst 128x128 pair {worst * 1000:.0f} ms < 1 s")


# 5 -------------------------------------------------------------------------

def test_criterion_5_gradients(tmp_path):
    with criterion(5, "gradient correctness") as c:
        m_path = cmd_forge(ForgeConfig(size=6, resolution=32, task_mix={"segment": 1.0}), 5, tmp_path)
        corpus = Corpus.open(m_path)
        items = [corpus.item(corpus.manifest.records[0], 16)]
        torch.manual_seed(5)
        model = WorldModel(ModelConfig()).double()
        cfg, sched = TrainConfig(), DiffusionSchedule()
        t0 = time.perf_counter()
        err, groups = grad_check(model, lambda: model_loss(model, items, sched, cfg, step_generator(5, 0, 0),
                                                           stop_latent_grad=False)[0], epsilon=1e-4, per_group=20)
        elapsed = time.perf_counter() - t0
        c.check(len(groups) == len(list(model.parameters())), f"{len(groups)} parameter tensors checked")
        c.check(err < 1e-3, f"max relative error {err:.2e}")
        c.check(elapsed < 60, f"runtime {elapsed:.1f}s < 60s")


# 6 -------------------------------------------------------------------------

DET_CONFIG = {
    "forge": {"size": 100},
    "train": {"lr_target": 2e-3, "warmup_steps": 50, "effective_batch": 16, "micro_batch": 8,
              "stage1_steps": 190, "refine_steps": 0, "stage2_steps": 10, "mining_samples": 16,
              "mining_sample_steps": 5},
    "eval": {"sample_steps": 10, "max_records": 8},
}


def _pipeline(cfg: Path, out: Path) -> None:
    base = ["--config", str(cfg), "--seed", "7", "--threads", "1"]
    assert cli([*base, "--out", str(out / "corpus"), "forge"]) == 0
    manifest = out / "corpus" / "manifest.json"
    assert cli([*base, "--out", str(out / "train"), "train", "--manifest", str(manifest)]) == 0
    assert cli([*base, "--out", str(out / "eval"), "eval", "--manifest", str(manifest),
                "--checkpoint", str(out / "train" / "model.eywk")]) == 0


@pytest.mark.slow
def test_criterion_6_determinism(tmp_path):
    with criterion(6, "end-to-end determinism") as c:
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps(DET_CONFIG))
        _pipeline(cfg, tmp_path / "a")
        _pipeline(cfg, tmp_path / "b")
        a, b = tmp_path / "a", tmp_path / "b"
        steps = [r for r in read_log(a / "train" / "train_log.jsonl") if "loss" in r]
        c.check(len(steps) == 200, f"{len(steps)} training steps")
        for rel in ("corpus/manifest.json", "train/model.eywk", "train/train_log.jsonl", "eval/metrics.csv"):
            same = (a / rel).read_bytes() == (b / rel).read_bytes()
            c.check(same, f"{rel} {'identical' if same else 'differs'}")
        c.check(_tree(a / "corpus") == _tree(b / "corpus"), "corpus trees identical")


# 7 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_smoke_training(tmp_path):
    with criterion(7, "smoke training") as c:
        torch.manual_seed(0)
        imgs = [to_tensor(gen_phantom(PhantomSpec(width=32, height=32), s).image) for s in range(200)]
        model = WorldModel(ModelConfig())
        train_vae(model.vae, imgs, TrainConfig(lr_target=2e-3, warmup_steps=50, effective_batch=32, micro_batch=16),
                  400, seed=0)
        model.eval()
        with torch.no_grad():
            x = torch.stack(imgs)
            mse = float(((model.vae.decode_raw(model.vae.encode(x)[0]).clamp(0, 1) - x) ** 2).mean())
        c.check(mse < 0.01, f"VAE-only reconstruction MSE {mse:.4f}")

        manifest = cmd_forge(ForgeConfig(size=500, records_per_patient=1, task_mix={"segment": 1.0},
                                         segment_targets=("optic disc",)), 7, tmp_path / "corpus")
        cfg = TrainConfig(lr_target=2e-3, warmup_steps=50, stage1_steps=200, stage2_steps=30,
                          mining_samples=512, mining_sample_steps=5)
        cpu0 = time.process_time()
        ckpt = run_curriculum(Corpus.open(manifest), cfg, 7, tmp_path / "train")
        cpu = time.process_time() - cpu0
        c.check(cpu <= 600, f"training {cpu / 60:.1f} CPU-minutes")
        bundle = cmd_eval(EvalConfig(sample_steps=50, resolution=32), manifest, ckpt, tmp_path / "eval", 7)
        dice = json.loads((bundle / "aggregates.json").read_text())["segment"]["dice"]
        c.check(dice["mean"] >= 0.6, f"held-out Dice {dice['mean']:.3f} over {dice['n']} test records")
        log = read_log(tmp_path / "train" / "train_log.jsonl")
        stages = {r["stage"] for r in log if "loss" in r}
        mining = [r for r in log if r.get("event") == "mining"]
        c.check(mining and mining[0]["hard"] > 0 and "refine" in stages,
                f"refinement ran on {mining[0]['hard'] if mining else 0} hard samples")
        c.check("stage2" in stages, "stage 2 ran")
        smooth = smoothed_losses(log, 50, "stage1")
        c.check(all(b <= a for a, b in zip(smooth, smooth[1:])),
                "smoothed stage-1 loss non-increasing " + "/".join(f"{v:.4f}" for v in smooth))


# 8 -------------------------------------------------------------------------

CF_FORGE = ForgeConfig(size=500, records_per_patient=1, task_mix={"progress": 1.0}, progress_kinds=("fundus",),
                       category_priors={"stable": 0.5, "progression": 0.5, "recovery": 0.0},
                       lesion_count_range=(2, 5), delta_t_range=(3, 12))


@pytest.mark.slow
def test_criterion_8_counterfactual_locality(tmp_path):
    with criterion(8, "counterfactual locality") as c:
        manifest = cmd_forge(CF_FORGE, 8, tmp_path / "corpus")
        cfg = TrainConfig(lr_target=2e-3, warmup_steps=50, stage1_steps=CF_STAGE1, stage2_steps=30,
                          mining_samples=64, mining_sample_steps=20)
        ckpt = run_curriculum(Corpus.open(manifest), cfg, 8, tmp_path / "train")
        bundle = cmd_eval(EvalConfig(sample_steps=50, resolution=32, counterfactual=True), manifest, ckpt,
                          tmp_path / "eval", 8)
        cf = json.loads((bundle / "bundle.json").read_text())["counterfactual"]
        c.check(cf["n"] > 0, f"{cf['n']} stable/progression pairs")
        c.check(cf["mean_concentration"] >= 0.5,
                f"mean share of |change| inside the dilated lesion mask {cf['mean_concentration']:.3f} "
                f"(median {cf['median_concentration']:.3f})")


CF_STAGE1 = 600


# 9 -------------------------------------------------------------------------

def test_criterion_9_exemplar_protocol():
    with criterion(9, "exemplar protocol") as c:
        try:
            build_exemplar(("a.png", "b.png"), "c.png", "segment", demo_patient="P1", query_patient="P1")
            c.check(False, "same-patient exemplar accepted")
        except LeakageError:
            c.check(True, "same-patient exemplar rejected")
        s = build_exemplar(("d_in.png", "d_out.png"), "q.png", "segment", demo_patient="P1", query_patient="P2")
        template = "According to the demonstration shown in image 1, apply the same process to image 2."
        c.check(s.instruction == template == EXEMPLAR_INSTRUCTION, "instruction matches the template verbatim")
        rec = SampleRecord("r1", "P2", "exemplar", s.image_refs, "t.png", s.instruction)
        prompt = record_prompt(rec)
        order = [x.index for x in conditioning_sequence(prompt, 3) if isinstance(x, ImageRef)]
        c.check(s.image_refs == ("d_in.png", "d_out.png", "q.png") and order == [0, 1, 2],
                f"conditioning order {order} over {s.image_refs}")
        c.check(prompt.structure_ref == 2, "structural latent taken from the query")
