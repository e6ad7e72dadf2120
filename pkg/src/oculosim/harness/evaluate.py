"""Evaluation: sample the model on a split, score every record and render change maps."""
from __future__ import annotations

import datetime as _dt
import json
import math
import re
import traceback
from pathlib import Path

import numpy as np

from ..dataforge import dilate
from ..imagecore import SampleRecord, write_image
from ..metrics import (
    DEFAULT_EXTRACTOR,
    MetricReport,
    change_concentration,
    fid,
    inception_score,
    render_change_map,
    score,
    signed_change_map,
    tissue_mask,
)
from ..worldsim import Corpus, DiffusionSchedule, load_model, record_prompt, sample_batch
from ..worldsim.text import Prompt
from .config import EvalConfig

COUNTERFACTUAL = ("stable", "progression")


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _index(record: SampleRecord) -> int:
    digits = re.sub(r"\D", "", record.record_id)
    return int(digits) if digits else 0


def swap_category(prompt: Prompt, record: SampleRecord, category: str) -> Prompt:
    """The same prompt with the follow-up category word replaced."""
    if not record.category:
        raise ValueError(f"record {record.record_id} has no category to swap")
    text = re.sub(rf"\b{re.escape(record.category)}\b", category, prompt.text, count=1)
    segs = tuple(text if s == prompt.text else s for s in prompt.segments)
    return Prompt(text, segs, prompt.delta_t, prompt.structure_ref)


class Evaluator:
    def __init__(self, corpus: Corpus, cfg: EvalConfig, seed: int, checkpoint=None):
        self.corpus = corpus
        self.cfg = cfg
        self.seed = int(seed)
        self.model = None
        self.header = {}
        if checkpoint is not None and not cfg.oracle:
            self.model, self.header = load_model(checkpoint)
        elif not cfg.oracle:
            raise ValueError("a checkpoint is required unless oracle mode is enabled")
        res = cfg.resolution
        if res is None and self.header:
            res = self.header["train_config"]["stage2_resolution"]
        self.res = res
        steps = self.header.get("train_config", {}).get("diffusion_steps", 200)
        self.schedule = DiffusionSchedule(T=steps)

    def records(self) -> list[SampleRecord]:
        recs = sorted(self.corpus.records(self.cfg.split), key=lambda r: r.record_id)
        if self.cfg.max_records is not None:
            recs = recs[: self.cfg.max_records]
        return recs

    def conds(self, record: SampleRecord) -> list[np.ndarray]:
        return [self.corpus.image(ref, self.res) for ref in record.input_refs]

    def predict(self, records: list[SampleRecord], prompts=None, salt: int = 0) -> list[np.ndarray]:
        if self.cfg.oracle:
            return [self.corpus.image(r.target_ref, self.res) for r in records]
        prompts = prompts or [record_prompt(r) for r in records]
        seeds = [_seed(self.seed, 4, salt, _index(r)) for r in records]
        return sample_batch(prompts, [self.conds(r) for r in records], self.schedule, self.cfg.sample_steps,
                            self.model, 0, self.corpus.vocab, seeds=seeds)

    def predict_safe(self, records):
        """Predictions per record, or the error string when a record fails; one failure never sinks the batch."""
        try:
            return self.predict(records)
        except Exception:
            if len(records) == 1:
                return [traceback.format_exc(limit=2).strip().splitlines()[-1]]
        return [self.predict_safe([r])[0] for r in records]


def cmd_eval(cfg: EvalConfig, manifest_path, checkpoint, out_dir, seed: int) -> Path:
    """Score the configured split and write an evaluation bundle; returns the bundle directory."""
    out = Path(out_dir)
    corpus = Corpus.open(manifest_path)
    ev = Evaluator(corpus, cfg, seed, checkpoint)
    records = ev.records()
    if not records:
        raise ValueError(f"split {cfg.split!r} is empty")
    out.mkdir(parents=True, exist_ok=True)
    report = MetricReport()
    preds_by_task: dict[str, list] = {}
    artifacts: dict[str, dict] = {}

    for start in range(0, len(records), cfg.batch):
        chunk = records[start:start + cfg.batch]
        preds = ev.predict_safe(chunk)
        for r, pred in zip(chunk, preds):
            if isinstance(pred, str):
                report.add_failure(r.record_id, r.task, pred)
                continue
            try:
                target = corpus.image(r.target_ref, ev.res)
                scores = score(r.target_kind, pred, target)
                arts = {"prediction": f"predictions/{r.record_id}.png"}
                write_image(out / arts["prediction"], pred)
                if r.task == "progress":
                    before = corpus.image(r.input_refs[0], ev.res)
                    cmap = signed_change_map(before, pred, tissue_mask(before))
                    arts["change_map"] = f"change_maps/{r.record_id}.png"
                    render_change_map(cmap, out / arts["change_map"])
            except Exception as exc:  # noqa: BLE001 - recorded as a failure row
                report.add_failure(r.record_id, r.task, f"{type(exc).__name__}: {exc}")
                continue
            for metric, value in sorted(scores.items()):
                report.add(r.record_id, metric, value, r.task)
            artifacts[r.record_id] = arts
            if r.target_kind == "image":
                preds_by_task.setdefault(r.task, []).append((pred, target))

    distribution = {}
    for task, pairs in sorted(preds_by_task.items()):
        entry = {"n": len(pairs)}
        if len(pairs) >= 2:
            entry["fid"] = fid([p for p, _ in pairs], [t for _, t in pairs])
            entry["inception_score"] = inception_score([DEFAULT_EXTRACTOR.classify(p) for p, _ in pairs])
        distribution[task] = entry

    counterfactual = None
    if cfg.counterfactual:
        counterfactual = run_counterfactual(ev, records, report, out)

    report.save(out)
    bundle = {
        "manifest": str(Path(manifest_path)),
        "checkpoint": None if checkpoint is None else str(Path(checkpoint)),
        "split": cfg.split,
        "mode": "oracle" if cfg.oracle else "model",
        "eval_config": json.loads(json.dumps(cfg.__dict__)),
        "seed": int(seed),
        "resolution": ev.res,
        "records": [r.record_id for r in records],
        "failures": sorted({row.sample_id for row in report.rows if row.metric == "failure"}),
        "artifacts": artifacts,
        "distribution": distribution,
        "counterfactual": counterfactual,
        "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    (out / "bundle.json").write_text(json.dumps(bundle, indent=1, sort_keys=True) + "\n")
    return out


def run_counterfactual(ev: Evaluator, records, report: MetricReport, out: Path) -> dict | None:
    """Sample each progression baseline under "stable" and "progression" with identical noise."""
    recs = [r for r in records if r.task == "progress" and r.category and "lesions" in r.aux_refs]
    if not recs:
        return None
    values = []
    for start in range(0, len(recs), ev.cfg.batch):
        chunk = recs[start:start + ev.cfg.batch]
        if ev.cfg.oracle:
            raise ValueError("counterfactual mode needs a model, not oracle predictions")
        pairs = {}
        for cat in COUNTERFACTUAL:
            prompts = [swap_category(record_prompt(r), r, cat) for r in chunk]
            pairs[cat] = ev.predict(chunk, prompts, salt=1)  # same salt: identical noise for both categories
        for k, r in enumerate(chunk):
            a, b = pairs["stable"][k], pairs["progression"][k]
            region = dilate(ev.corpus.mask(r.aux_refs["lesions"], ev.res), ev.cfg.lesion_dilation)
            frac = change_concentration(a, b, region)
            values.append(frac)
            report.add(r.record_id, "cf_concentration", frac, "counterfactual")
            write_image(out / "counterfactual" / f"{r.record_id}_stable.png", a)
            write_image(out / "counterfactual" / f"{r.record_id}_progression.png", b)
    finite = [v for v in values if not math.isnan(v)]
    return {"n": len(values), "mean_concentration": float(np.mean(finite)) if finite else None,
            "median_concentration": float(np.median(finite)) if finite else None}
