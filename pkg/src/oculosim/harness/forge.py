"""Corpus forging: phantoms -> task records -> patient split -> files, manifest and provenance."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from ..dataforge import (
    EXEMPLAR_INSTRUCTION,
    SR_FACTORS,
    PhantomSpec,
    build_rpe_sample,
    change_region,
    degrade,
    downsample_pair,
    followup_geometry,
    gen_followup,
    gen_phantom,
    make_inpaint,
    make_outpaint,
    months_phrase,
    random_degradation,
    rerender,
)
from ..imagecore import (
    COLOR_NAMES,
    DEFAULT_PALETTE,
    DatasetManifest,
    SampleRecord,
    encode_color_mask,
    patient_split,
    tiny_target_filter,
    write_image,
)
from ..metrics import BOX_COLOR, draw_boxes, mask_boxes
from .config import ForgeConfig

# palette class name -> phantom mask key and the phantom kind that carries it
STRUCTURES = {
    "optic disc": ("disc", "fundus"),
    "optic cup": ("cup", "fundus"),
    "vessels": ("vessels", "fundus"),
    "fovea": ("fovea", "fundus"),
    "lesions": ("lesions", "fundus"),
    "rpe layer": ("rpe_band", "bscan"),
    "macular hole": ("hole", "bscan"),
}

PROMPTS = {
    "detect": "Detect lesions with boxes.",
    "translate": "Translate the color fundus photograph into a fluorescein angiogram.",
    "enhance": "Enhance the quality of this image.",
    "inpaint": "Fill in the missing rectangular regions.",
    "outpaint": "Extend the image beyond the visible elliptical field.",
}


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def segment_prompt(name: str) -> str:
    color = COLOR_NAMES[DEFAULT_PALETTE.by_name(name).rgb]
    return f"Segment the {name} using {color}."


def sr_prompt(factor: int) -> str:
    return f"Restore the high resolution image from the image downsampled by factor {factor}."


def progress_prompt(category: str, delta_t: float) -> str:
    return f"Predict the {category} follow-up image {months_phrase(delta_t)}."


@dataclass(frozen=True)
class Plan:
    index: int
    record_id: str
    patient_id: str
    patient_seed: int
    seed: int
    task: str
    category: str | None = None
    delta_t: float | None = None


def _normalized(weights: dict) -> tuple[list[str], np.ndarray]:
    keys = sorted(weights)
    w = np.array([weights[k] for k in keys], dtype=np.float64)
    return keys, w / w.sum()


def plan_records(cfg: ForgeConfig, seed: int) -> list[Plan]:
    """Task, category and seeds for every record; pure function of (cfg, seed), no rendering."""
    tasks, tp = _normalized(cfg.task_mix)
    cats, cp = _normalized(cfg.category_priors)
    plans = []
    for i in range(cfg.size):
        p = i // cfg.records_per_patient
        rs = _seed(seed, 0, i)
        rng = np.random.default_rng(rs)
        task = tasks[int(rng.choice(len(tasks), p=tp))]
        category = delta_t = None
        if task == "progress":
            category = cats[int(rng.choice(len(cats), p=cp))]
            delta_t = float(rng.integers(cfg.delta_t_range[0], cfg.delta_t_range[1] + 1))
        plans.append(Plan(i, f"r{i:06d}", f"P{p:06d}", _seed(seed, 1, p), rs, task, category, delta_t))
    return plans


def _spec(cfg: ForgeConfig, kind: str, lesions=None) -> PhantomSpec:
    return PhantomSpec(width=cfg.resolution, height=cfg.resolution, kind=kind,
                       lesion_count_range=tuple(lesions or cfg.lesion_count_range))


def _binary(mask) -> np.ndarray:
    return np.repeat((np.asarray(mask) > 0).astype(np.float64)[..., None], 3, axis=2)


@dataclass
class Forged:
    record: SampleRecord | None
    files: dict
    provenance: dict
    structure: str | None = None


def _segment_like(plan: Plan, cfg: ForgeConfig, task: str) -> Forged:
    rng = np.random.default_rng(plan.seed)
    names = [n for n in cfg.segment_targets if n in STRUCTURES]
    order = [names[k] for k in rng.permutation(len(names))]
    prov = {"task": task, "seed": plan.seed, "patient_seed": plan.patient_seed}
    filtered = []
    for name in order:
        key, kind = STRUCTURES[name]
        sample = gen_phantom(_spec(cfg, kind), plan.patient_seed, plan.patient_id)
        mask = (sample.masks[key] > 0).astype(np.int64)
        if not tiny_target_filter(mask, cfg.tiny_threshold):
            filtered.append(name)
            continue
        rid = plan.record_id
        cls = DEFAULT_PALETTE.by_name(name).id
        files = {f"images/{rid}_in0.png": sample.image,
                 f"images/{rid}_target.png": encode_color_mask(mask * cls, DEFAULT_PALETTE)}
        aux = {}
        if sample.masks["lesions"].any():
            aux["lesions"] = f"images/{rid}_lesions.png"
            files[aux["lesions"]] = _binary(sample.masks["lesions"])
        prov.update(kind=kind, structure=name, tiny_filtered=filtered)
        rec = SampleRecord(rid, plan.patient_id, task, (f"images/{rid}_in0.png",), f"images/{rid}_target.png",
                           segment_prompt(name), target_kind="mask", aux_refs=aux)
        return Forged(rec, files, prov, name)
    prov.update(tiny_filtered=filtered, dropped="every candidate structure is below the tiny-target threshold")
    return Forged(None, {}, prov)


def forge_record(plan: Plan, cfg: ForgeConfig) -> Forged:
    """Render one planned record; returns the record (or None if filtered) and its files."""
    if plan.task in ("segment", "exemplar"):
        return _segment_like(plan, cfg, plan.task)
    rid = plan.record_id
    rng = np.random.default_rng(plan.seed)
    prov = {"task": plan.task, "seed": plan.seed, "patient_seed": plan.patient_seed}
    in0, target = f"images/{rid}_in0.png", f"images/{rid}_target.png"
    aux, files = {}, {}
    kind = "fundus"
    target_kind = "image"
    category = delta_t = volume_id = None
    warnings = ()

    if plan.task == "progress":
        kind = cfg.progress_kinds[int(rng.integers(len(cfg.progress_kinds)))]
        lo, hi = cfg.lesion_count_range
        spec = _spec(cfg, kind, (max(lo, 1), max(hi, 1)) if kind == "fundus" else None)
        base = gen_phantom(spec, plan.patient_seed, plan.patient_id)
        category, delta_t = plan.category, plan.delta_t
        post, change = gen_followup(base, category, delta_t)
        # the pathology-associated region: baseline lesions plus their progressed extent
        grown = rerender(base, geometry=followup_geometry(base.geometry, "progression", delta_t))
        region = change_region(base) | change_region(grown)
        aux = {"lesions": f"images/{rid}_lesions.png", "change": f"images/{rid}_change.png"}
        files = {aux["lesions"]: _binary(region), aux["change"]: _binary(change)}
        if kind == "bscan":
            volume_id = f"{plan.patient_id}-oct"
            post_sample = rerender(base, geometry=followup_geometry(base.geometry, category, delta_t))
            rec, imgs = build_rpe_sample(
                base.image, post, post_sample.masks["rpe_band"], delta_t, record_id=rid, patient_id=plan.patient_id,
                refs=(in0, f"images/{rid}_in1.png", target), category=category)
            files.update(imgs)
            rec = replace(rec, aux_refs=aux, volume_id=volume_id)
            prov.update(kind=kind, category=category, delta_t=delta_t)
            return Forged(rec, files, prov)
        files.update({in0: base.image, target: post})
        prompt = progress_prompt(category, delta_t)
        inputs = (in0,)
    else:
        lesion_range = None
        if plan.task == "detect":
            lo, hi = cfg.lesion_count_range
            lesion_range = (max(lo, 1), max(hi, 1))
        sample = gen_phantom(_spec(cfg, "fundus", lesion_range), plan.patient_seed, plan.patient_id)
        img = sample.image
        inputs = (in0,)
        if sample.masks["lesions"].any():
            aux["lesions"] = f"images/{rid}_lesions.png"
            files[aux["lesions"]] = _binary(sample.masks["lesions"])
        if plan.task == "detect":
            boxes = mask_boxes(sample.masks["lesions"])
            files.update({in0: img, target: draw_boxes(np.zeros_like(img), boxes, BOX_COLOR)})
            target_kind = "boxes"
            prompt = PROMPTS["detect"]
            prov["boxes"] = [[b.x0, b.y0, b.x1, b.y1] for b in boxes]
        elif plan.task == "translate":
            angio = rerender(sample, spec=_spec(cfg, "angio", lesion_range))
            files.update({in0: img, target: angio.image})
            prompt = PROMPTS["translate"]
        elif plan.task == "enhance":
            dspec = random_degradation(rng)
            dseed = int(rng.integers(2 ** 63))
            files.update({in0: degrade(img, dspec, dseed), target: img})
            prompt = PROMPTS["enhance"]
            prov.update(degradation=dspec.to_dict(), degradation_seed=dseed)
        elif plan.task == "sr":
            factors = [f for f in SR_FACTORS if f <= cfg.resolution]
            factor = int(factors[int(rng.integers(len(factors)))])
            low, high = downsample_pair(img, factor)
            files.update({in0: low, target: high})
            prompt = sr_prompt(factor)
            prov["factor"] = factor
        elif plan.task in ("inpaint", "outpaint"):
            mseed = int(rng.integers(2 ** 63))
            masked, region = (make_inpaint if plan.task == "inpaint" else make_outpaint)(img, mseed)
            key = "holes" if plan.task == "inpaint" else "kept"
            aux[key] = f"images/{rid}_{key}.png"
            files.update({in0: masked, target: img, aux[key]: _binary(region)})
            prompt = PROMPTS[plan.task]
            prov["mask_seed"] = mseed
        else:
            raise ValueError(f"unknown task {plan.task!r}")
    prov["kind"] = kind
    if category is not None:
        prov.update(category=category, delta_t=delta_t)
    rec = SampleRecord(rid, plan.patient_id, plan.task, inputs, target, prompt, volume_id=volume_id,
                       delta_t=delta_t, target_kind=target_kind, category=category, aux_refs=aux, warnings=warnings)
    return Forged(rec, files, prov)


def attach_exemplars(manifest: DatasetManifest, structures: dict[str, str], seed: int):
    """Give each exemplar record a demonstration pair from another patient in the same split.

    Returns the new manifest and ``{record_id: demo record_id or None}``; exemplars
    without any eligible demonstration are dropped.
    """
    demos = {}
    out = []
    pool = [r for r in manifest.records if r.task in ("segment", "exemplar")]
    for r in manifest.records:
        if r.task != "exemplar":
            out.append(r)
            continue
        cands = [c for c in pool if c.split == r.split and c.patient_id != r.patient_id
                 and structures.get(c.record_id) == structures.get(r.record_id)]
        if not cands:
            demos[r.record_id] = None
            continue
        rng = np.random.default_rng(_seed(seed, 2, int(r.record_id[1:])))
        demo = cands[int(rng.integers(len(cands)))]
        demos[r.record_id] = demo.record_id
        # the demonstration is the other record's own (input, target) pair
        out.append(replace(r, input_refs=(demo.input_refs[-1], demo.target_ref, r.input_refs[0]),
                           prompt=EXEMPLAR_INSTRUCTION))
    return DatasetManifest(tuple(out)), demos


def check_writable(out_dir) -> Path:
    out = Path(out_dir)
    probe = out
    while not probe.exists():
        probe = probe.parent
    if not probe.is_dir() or not os.access(probe, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    return out


def cmd_forge(cfg: ForgeConfig, seed: int, out_dir, threads: int = 1) -> Path:
    """Forge a corpus into ``out_dir``; returns the manifest path."""
    out = check_writable(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plans = plan_records(cfg, seed)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            forged = list(pool.map(lambda p: forge_record(p, cfg), plans))
    else:
        forged = [forge_record(p, cfg) for p in plans]

    records = [f.record for f in forged if f.record is not None]
    if not records:
        raise ValueError("every planned record was filtered; nothing to write")
    structures = {f.record.record_id: f.structure for f in forged if f.record is not None and f.structure}
    manifest = patient_split(DatasetManifest(tuple(records)), cfg.ratios, _seed(seed, 3))
    manifest, demos = attach_exemplars(manifest, structures, seed)

    kept = {r.record_id for r in manifest.records}
    for f in forged:
        if f.record is None or f.record.record_id not in kept:
            continue
        for ref, img in sorted(f.files.items()):
            write_image(out / ref, img)
    manifest.save(out / "manifest.json")
    provenance = {
        "seed": seed,
        "forge_config": _jsonable(cfg),
        "records": {p.record_id: f.provenance for p, f in zip(plans, forged)},
        "exemplar_demos": demos,
        "splits": {s: sorted({r.patient_id for r in manifest.by_split(s)}) for s in ("train", "val", "test")},
    }
    (out / "provenance.json").write_text(json.dumps(provenance, indent=1, sort_keys=True) + "\n")
    return out / "manifest.json"


def _jsonable(cfg: ForgeConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))
