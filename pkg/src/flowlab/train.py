"""Three-stage mutual-distillation trainer and the pseudo-label store.

Stage 1 trains the teacher without labels: census photometric loss plus
edge-aware smoothness, with an augmentation self-supervision term phased
in after a quarter of the schedule (the teacher's own detached
predictions, transformed consistently with the images, supervise the
prediction on the transformed views). Stage 2 distills the teacher into a
student from a written-out label store, restricted to reliability-filtered
non-occluded pixels; the teacher is never touched. Stage 3 re-initializes
the teacher from its stage-1 checkpoint and distills back from the student
(labels frozen, no reliability removal) while keeping reduced-weight
photometric and smoothness terms; the supervision masks are the teacher's
own current non-occluded estimates, recomputed every step.

All randomness flows through explicit generators keyed by seed, stage,
iteration and batch slot, so a run is reproducible step for step; with
single-threaded execution (``strict``) it is bit-reproducible.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import torch

from . import augment as aug
from .confidence import calibrate_threshold, reliable_mask
from .core import epe, fl_all, read_flo, read_mask, warp_backward_kw, write_flo, write_mask
from .measures import (
    CensusParams,
    OcclusionParams,
    census_residual_map,
    occlusion_masks_batch,
    photometric_loss_batch,
    smoothness_loss_batch,
)
from .models import (
    FlowModel,
    predict_bidirectional,
    save_checkpoint,
    load_checkpoint,
    build_model,
    checkpoint_id,
    STUDENT_KIND,
    TEACHER_KIND,
)
from .synth import SceneDataset


class ConfigError(ValueError):
    """Raised for malformed or unknown trainer configuration keys."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class StageConfig:
    """Everything one training stage needs besides model and data.

    ``lambda1``/``lambda2`` weight smoothness and self-supervision in
    stage 1; ``lambda3``/``lambda4`` weight photometric and smoothness in
    stage 3. ``rr`` is the label removal rate used when this stage's
    teacher writes its label store. ``lr_milestones`` are schedule
    fractions; after the k-th one the rate is exactly ``lr * 2**-k``.
    """

    stage: int = 1
    iterations: int = 3000
    batch_size: int = 4
    lr: float = 1e-4
    lr_milestones: tuple = (0.4, 0.6, 0.8, 0.9)
    optimizer: str = "adaptive-moment"
    weight_decay: float = 0.0
    lambda1: float = 1.0
    lambda2: float = 0.05
    lambda3: float = 0.1
    lambda4: float = 0.1
    smoothness_order: int = 1
    sup_start_frac: float = 0.25
    rr: float = 0.1
    seed: int = 0
    augment: aug.AugmentRanges = field(default_factory=aug.AugmentRanges)


_STAGE_DEFAULTS = {
    1: {"iterations": 3000, "lr": 1e-4},
    2: {"iterations": 1500, "lr": 4e-4},
    3: {"iterations": 3000, "lr": 1e-4},
}

OPTIMIZERS = ("adaptive-moment", "adaptive-moment-decoupled-decay")


def make_stage_config(stage: int, **overrides) -> StageConfig:
    """Stage defaults (iteration budget and learning rate differ per stage)."""
    if stage not in (1, 2, 3):
        raise ConfigError(f"stage must be 1, 2 or 3, got {stage}")
    kw = {"stage": stage, **_STAGE_DEFAULTS[stage], **overrides}
    return StageConfig(**kw)


_STAGE_KEYS = sorted(f.name for f in fields(StageConfig) if f.name not in ("stage", "augment"))
_AUG_KEYS = sorted(f.name for f in fields(aug.AugmentRanges))


def _convert(raw: str, current):
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    try:
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines into a dict; ``#`` starts a comment."""
    items = {}
    for ln, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"config line {ln}: expected 'key = value', got {line!r}")
        key, value = body.split("=", 1)
        items[key.strip()] = value.strip()
    return items


def apply_config_items(configs: dict, items: dict) -> dict:
    """Apply dotted overrides like ``stage1.lambda1`` to per-stage configs.

    ``configs`` maps stage number to StageConfig. Unknown keys raise with
    the list of valid ones.
    """
    out = dict(configs)
    for key, raw in items.items():
        parts = key.split(".")
        if parts[0] not in ("stage1", "stage2", "stage3"):
            raise ConfigError(
                f"unknown config key {key!r}; keys start with stage1/stage2/stage3"
            )
        stage = int(parts[0][5])
        cfg = out[stage]
        if len(parts) == 2 and parts[1] in _STAGE_KEYS:
            current = getattr(cfg, parts[1])
            out[stage] = replace(cfg, **{parts[1]: _convert(raw, current)})
        elif len(parts) == 3 and parts[1] == "augment" and parts[2] in _AUG_KEYS:
            current = getattr(cfg.augment, parts[2])
            ranges = replace(cfg.augment, **{parts[2]: _convert(raw, current)})
            out[stage] = replace(cfg, augment=ranges)
        else:
            valid = [f"stageN.{k}" for k in _STAGE_KEYS]
            valid += [f"stageN.augment.{k}" for k in _AUG_KEYS]
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(valid)}")
    for cfg in out.values():
        if cfg.optimizer not in OPTIMIZERS:
            raise ConfigError(
                f"unknown optimizer {cfg.optimizer!r}; valid: {', '.join(OPTIMIZERS)}"
            )
    return out


def default_configs(seed: int = 0) -> dict:
    return {s: make_stage_config(s, seed=seed) for s in (1, 2, 3)}


def _make_optimizer(model: FlowModel, cfg: StageConfig):
    if cfg.optimizer == "adaptive-moment":
        return torch.optim.Adam(model.net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adaptive-moment-decoupled-decay":
        return torch.optim.AdamW(model.net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    raise ConfigError(f"unknown optimizer {cfg.optimizer!r}; valid: {', '.join(OPTIMIZERS)}")


# ---------------------------------------------------------------------------
# supervised loss on augmented constants
# ---------------------------------------------------------------------------


def loss_supervised(model: FlowModel, samples) -> torch.Tensor:
    """Masked mean absolute flow difference against constant labels.

    ``samples`` is one AugmentedSample or a list of them (stacked into one
    bidirectional forward). Per direction the loss is the mean over valid
    pixels of |du| + |dv|; the two directions are summed, then averaged
    over samples. A prediction offset by (1, 0) everywhere under full
    masks scores exactly 2. Labels must be constants: any gradient-tracking
    field or missing constant flag is a hard error, as is an empty mask.
    """
    if isinstance(samples, aug.AugmentedSample):
        samples = [samples]
    if not samples:
        raise ValueError("loss_supervised needs at least one sample")
    for s in samples:
        if not s.constant:
            raise ValueError("supervision labels must carry the constant flag")
        for name in ("img1", "img2", "flow_f", "flow_b", "mask_f", "mask_b"):
            if getattr(s, name).requires_grad:
                raise ValueError(f"supervision field {name} tracks gradients")
    img1 = torch.stack([s.img1 for s in samples])
    img2 = torch.stack([s.img2 for s in samples])
    ff = torch.stack([s.flow_f for s in samples])
    fb = torch.stack([s.flow_b for s in samples])
    mf = torch.stack([s.mask_f for s in samples])
    mb = torch.stack([s.mask_b for s in samples])
    nf = mf.sum(dim=(1, 2))
    nb = mb.sum(dim=(1, 2))
    if (nf == 0).any() or (nb == 0).any():
        raise ValueError("supervision mask has no valid pixels in some direction")
    pf, pb = predict_bidirectional(model, img1, img2)
    term_f = ((pf - ff).abs().sum(dim=1) * mf).sum(dim=(1, 2)) / nf
    term_b = ((pb - fb).abs().sum(dim=1) * mb).sum(dim=(1, 2)) / nb
    return (term_f + term_b).mean()


def _augment_generator(cfg: StageConfig, iteration: int, slot: int) -> torch.Generator:
    # distinct stream per (seed, stage, iteration, slot); the iteration term
    # stays below the stage stride for every supported schedule length
    key = (cfg.seed * 4 + cfg.stage) * 2_000_003 + iteration * 131 + slot
    return torch.Generator().manual_seed(key)


def _augment_batch(cfg, iteration, img1, img2, ff, fb, mf, mb):
    """Per-sample augmented records; drops samples whose masks emptied."""
    h, w = img1.shape[-2:]
    samples = []
    dropped = 0
    for j in range(img1.shape[0]):
        gen = _augment_generator(cfg, iteration, j)
        spec = aug.sample_spec(gen, h, w, cfg.augment)
        rec = aug.apply(spec, img1[j], img2[j], ff[j], fb[j], mf[j], mb[j])
        if rec.mask_f.sum() == 0 or rec.mask_b.sum() == 0:
            dropped += 1
            continue
        samples.append(rec)
    return samples, dropped


# ---------------------------------------------------------------------------
# stage steps
# ---------------------------------------------------------------------------


def _zero_breakdown():
    return {
        "total": 0.0,
        "photo": 0.0,
        "smooth": 0.0,
        "sup": 0.0,
        "skipped_samples": 0,
        "skipped_sup": 0,
        "stepped": False,
    }


def stage1_step(model, cfg, img1, img2, opt, iteration) -> dict:
    """Unsupervised teacher update: photometric + smoothness (+ self-sup)."""
    out = _zero_breakdown()
    ff, fb = predict_bidirectional(model, img1, img2)
    occ_f, occ_b = occlusion_masks_batch(ff.detach(), fb.detach(), OcclusionParams())
    non_f, non_b = 1.0 - occ_f, 1.0 - occ_b
    keep = (non_f.sum(dim=(1, 2)) > 0) & (non_b.sum(dim=(1, 2)) > 0)
    out["skipped_samples"] = int((~keep).sum())
    if not keep.any():
        return out
    i1, i2 = img1[keep], img2[keep]
    ffk, fbk = ff[keep], fb[keep]
    nfk, nbk = non_f[keep], non_b[keep]
    try:
        lph = photometric_loss_batch(i1, i2, ffk, fbk, nfk, nbk, CensusParams())
    except ValueError:
        # non-occluded pixels all fell outside the warp validity region
        out["skipped_samples"] = img1.shape[0]
        return out
    lsm = smoothness_loss_batch(ffk, i1, cfg.smoothness_order) + smoothness_loss_batch(
        fbk, i2, cfg.smoothness_order
    )
    lsup = torch.zeros((), dtype=lph.dtype)
    sup_active = cfg.lambda2 > 0 and iteration >= math.floor(
        cfg.sup_start_frac * cfg.iterations
    )
    if sup_active:
        samples, dropped = _augment_batch(
            cfg, iteration, i1, i2, ffk.detach(), fbk.detach(), nfk, nbk
        )
        out["skipped_sup"] = dropped
        if samples:
            lsup = loss_supervised(model, samples)
    total = lph + cfg.lambda1 * lsm + cfg.lambda2 * lsup
    opt.zero_grad()
    total.backward()
    opt.step()
    out.update(
        total=float(total.detach()),
        photo=float(lph.detach()),
        smooth=float(lsm.detach()),
        sup=float(lsup.detach()),
        stepped=True,
    )
    return out


def stage2_step(model, cfg, img1, img2, ff, fb, mf, mb, opt, iteration) -> dict:
    """Student update on stored teacher labels, reliable pixels only."""
    out = _zero_breakdown()
    samples, dropped = _augment_batch(cfg, iteration, img1, img2, ff, fb, mf, mb)
    out["skipped_samples"] = dropped
    if not samples:
        return out
    lsup = loss_supervised(model, samples)
    opt.zero_grad()
    lsup.backward()
    opt.step()
    out.update(total=float(lsup.detach()), sup=float(lsup.detach()), stepped=True)
    return out


def stage3_step(model, cfg, img1, img2, ff, fb, opt, iteration) -> dict:
    """Teacher update from student labels plus damped unsupervised terms.

    ``ff``/``fb`` are the stored student flows. The supervision masks are
    the teacher's own current non-occluded estimates, recomputed here from
    this step's forward pass.
    """
    out = _zero_breakdown()
    tff, tfb = predict_bidirectional(model, img1, img2)
    occ_f, occ_b = occlusion_masks_batch(tff.detach(), tfb.detach(), OcclusionParams())
    non_f, non_b = 1.0 - occ_f, 1.0 - occ_b
    keep = (non_f.sum(dim=(1, 2)) > 0) & (non_b.sum(dim=(1, 2)) > 0)
    out["skipped_samples"] = int((~keep).sum())
    if not keep.any():
        return out
    i1, i2 = img1[keep], img2[keep]
    tffk, tfbk = tff[keep], tfb[keep]
    nfk, nbk = non_f[keep], non_b[keep]
    lph = torch.zeros((), dtype=tff.dtype)
    lsm = torch.zeros((), dtype=tff.dtype)
    if cfg.lambda3 > 0 or cfg.lambda4 > 0:
        try:
            lph = photometric_loss_batch(i1, i2, tffk, tfbk, nfk, nbk, CensusParams())
        except ValueError:
            out["skipped_samples"] = img1.shape[0]
            return out
        lsm = smoothness_loss_batch(tffk, i1, cfg.smoothness_order) + smoothness_loss_batch(
            tfbk, i2, cfg.smoothness_order
        )
    samples, dropped = _augment_batch(cfg, iteration, i1, i2, ff[keep], fb[keep], nfk, nbk)
    out["skipped_sup"] = dropped
    if not samples:
        return out
    lsup = loss_supervised(model, samples)
    total = lsup + cfg.lambda3 * lph + cfg.lambda4 * lsm
    opt.zero_grad()
    total.backward()
    opt.step()
    out.update(
        total=float(total.detach()),
        photo=float(lph.detach()),
        smooth=float(lsm.detach()),
        sup=float(lsup.detach()),
        stepped=True,
    )
    return out


# ---------------------------------------------------------------------------
# pseudo-label store
# ---------------------------------------------------------------------------


class LabelStore:
    """Per-pair directories of predicted flows and reliability masks.

    ``root/NNNN/`` holds ``ff.flo``, ``fb.flo``, ``mf.pgm``, ``mb.pgm``;
    ``root/meta.txt`` records the calibrated threshold, the removal rate,
    and the id of the model that wrote the store.
    """

    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / "meta.txt"
        if not meta_path.exists():
            raise FileNotFoundError(f"{self.root}: not a label store (missing meta.txt)")
        self.meta = {}
        for line in meta_path.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                self.meta[k.strip()] = v.strip()
        self.n = int(self.meta["pairs"])
        self.tau = float(self.meta["tau"])
        self.rr = float(self.meta["rr"])

    def __len__(self):
        return self.n

    def pair_dir(self, i: int) -> Path:
        if not 0 <= i < self.n:
            raise IndexError(f"label index {i} out of range [0, {self.n})")
        return self.root / f"{i:04d}"

    def load(self, i: int):
        d = self.pair_dir(i)
        return (
            read_flo(d / "ff.flo"),
            read_flo(d / "fb.flo"),
            read_mask(d / "mf.pgm"),
            read_mask(d / "mb.pgm"),
        )


def make_pseudo_labels(
    model: FlowModel, dataset: SceneDataset, removal_rate: float, out_dir, batch_size: int = 8
) -> LabelStore:
    """Predict flows for every pair and write a reliability-filtered store.

    The confidence threshold is calibrated once over the census residuals
    of the whole set (both directions, non-occluded pixels) so that
    ``removal_rate`` of them falls above it. With ``removal_rate`` 0 the
    masks are exactly the non-occlusion masks. Reruns with the same model
    and data produce byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot build a label store from an empty dataset")
    flows_f, flows_b, res_f, res_b, non_f, non_b = [], [], [], [], [], []
    with torch.no_grad():
        for start in range(0, n, batch_size):
            idx = range(start, min(start + batch_size, n))
            pairs = [dataset.load_images(i) for i in idx]
            i1 = torch.stack([p[0].data for p in pairs])
            i2 = torch.stack([p[1].data for p in pairs])
            ff, fb = predict_bidirectional(model, i1, i2)
            occ_f, occ_b = occlusion_masks_batch(ff, fb, OcclusionParams())
            w2, _ = warp_backward_kw(i2, ff)
            w1, _ = warp_backward_kw(i1, fb)
            flows_f.append(ff)
            flows_b.append(fb)
            res_f.append(census_residual_map(i1, w2))
            res_b.append(census_residual_map(i2, w1))
            non_f.append(1.0 - occ_f)
            non_b.append(1.0 - occ_b)
    flows_f = torch.cat(flows_f)
    flows_b = torch.cat(flows_b)
    res_f = torch.cat(res_f)
    res_b = torch.cat(res_b)
    non_f = torch.cat(non_f)
    non_b = torch.cat(non_b)
    tau = calibrate_threshold([res_f, res_b], [non_f, non_b], removal_rate)
    for i in range(n):
        d = out / f"{i:04d}"
        d.mkdir(exist_ok=True)
        write_flo(d / "ff.flo", flows_f[i])
        write_flo(d / "fb.flo", flows_b[i])
        write_mask(d / "mf.pgm", reliable_mask(res_f[i], non_f[i], tau))
        write_mask(d / "mb.pgm", reliable_mask(res_b[i], non_b[i], tau))
    with open(out / "meta.txt", "w") as fh:
        fh.write(f"pairs = {n}\n")
        fh.write(f"rr = {removal_rate!r}\n")
        fh.write(f"tau = {tau!r}\n")
        fh.write(f"model_kind = {model.kind}\n")
        fh.write(f"model_params = {model.parameter_hash()}\n")
    return LabelStore(out)


# ---------------------------------------------------------------------------
# stage loop and manifests
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    stage: int
    rows: list
    summary: dict

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = [
            "iteration",
            "lr",
            "loss_total",
            "loss_photo",
            "loss_smooth",
            "loss_sup",
            "skipped_samples",
            "skipped_sup",
            "val_epe",
        ]
        with open(out / "manifest.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({c: row.get(c, "") for c in cols})
        with open(out / "summary.txt", "w") as fh:
            for k, v in self.summary.items():
                fh.write(f"{k} = {v}\n")


def _load_images_tensor(dataset: SceneDataset):
    pairs = [dataset.load_images(i) for i in range(len(dataset))]
    return (
        torch.stack([p[0].data for p in pairs]),
        torch.stack([p[1].data for p in pairs]),
    )


def _load_store_tensors(store: LabelStore):
    recs = [store.load(i) for i in range(len(store))]
    return (
        torch.stack([r[0] for r in recs]),
        torch.stack([r[1] for r in recs]),
        torch.stack([r[2] for r in recs]),
        torch.stack([r[3] for r in recs]),
    )


def evaluate_model(model: FlowModel, dataset: SceneDataset, batch_size: int = 16) -> dict:
    """Mean endpoint error and outlier fraction over a labeled corpus."""
    if not dataset.has_ground_truth:
        raise FileNotFoundError(f"{dataset.root}: no ground truth stored, cannot evaluate")
    n = len(dataset)
    epes, fls = [], []
    with torch.no_grad():
        for start in range(0, n, batch_size):
            idx = range(start, min(start + batch_size, n))
            pairs = [dataset.load_images(i) for i in idx]
            i1 = torch.stack([p[0].data for p in pairs])
            i2 = torch.stack([p[1].data for p in pairs])
            pred = model.net(i1, i2)
            for j, i in enumerate(idx):
                gt = dataset.load_gt(i)[0]
                epes.append(epe(pred[j], gt.data))
                fls.append(fl_all(pred[j], gt.data))
    return {"epe": sum(epes) / n, "fl_all": sum(fls) / n, "pairs": n}


def run_stage(
    model: FlowModel,
    cfg: StageConfig,
    data: dict,
    out_dir,
    val_dataset: SceneDataset | None = None,
    log_interval: int = 100,
    strict: bool = False,
    log=None,
) -> RunManifest:
    """Drive one stage to completion; writes manifest.csv and summary.txt.

    ``data`` holds stacked tensors: img1/img2 always, plus ff/fb/mf/mb for
    stage 2 and ff/fb for stage 3 (stored student labels). The model is
    updated in place.
    """
    if strict:
        torch.set_num_threads(1)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    opt = _make_optimizer(model, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = data["img1"].shape[0]
    milestones = [math.floor(f * cfg.iterations) for f in cfg.lr_milestones]
    hash_before = model.parameter_hash()
    rows = []
    acc = {"total": 0.0, "photo": 0.0, "smooth": 0.0, "sup": 0.0, "steps": 0}
    skipped_samples = 0
    skipped_sup = 0
    skipped_updates = 0
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        k = sum(1 for m in milestones if it >= m)
        lr = cfg.lr * 2.0 ** (-k)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
        i1, i2 = data["img1"][idx], data["img2"][idx]
        if cfg.stage == 1:
            step = stage1_step(model, cfg, i1, i2, opt, it)
        elif cfg.stage == 2:
            step = stage2_step(
                model, cfg, i1, i2,
                data["ff"][idx], data["fb"][idx], data["mf"][idx], data["mb"][idx],
                opt, it,
            )
        else:
            step = stage3_step(model, cfg, i1, i2, data["ff"][idx], data["fb"][idx], opt, it)
        skipped_samples += step["skipped_samples"]
        skipped_sup += step["skipped_sup"]
        if step["stepped"]:
            for key in ("total", "photo", "smooth", "sup"):
                acc[key] += step[key]
            acc["steps"] += 1
        else:
            skipped_updates += 1
        if (it + 1) % log_interval == 0 or it + 1 == cfg.iterations:
            steps = max(acc["steps"], 1)
            row = {
                "iteration": it + 1,
                "lr": lr,
                "loss_total": acc["total"] / steps,
                "loss_photo": acc["photo"] / steps,
                "loss_smooth": acc["smooth"] / steps,
                "loss_sup": acc["sup"] / steps,
                "skipped_samples": skipped_samples,
                "skipped_sup": skipped_sup,
            }
            rows.append(row)
            if log is not None:
                log(
                    f"stage{cfg.stage} it {it + 1}/{cfg.iterations} "
                    f"lr {lr:.2e} loss {row['loss_total']:.4f}"
                )
            acc = {"total": 0.0, "photo": 0.0, "smooth": 0.0, "sup": 0.0, "steps": 0}
    elapsed = time.perf_counter() - t0
    summary = {
        "stage": cfg.stage,
        "iterations": cfg.iterations,
        "seed": cfg.seed,
        "optimizer": cfg.optimizer,
        "final_lr": cfg.lr * 2.0 ** (-len(milestones)),
        "skipped_samples": skipped_samples,
        "skipped_sup": skipped_sup,
        "skipped_updates": skipped_updates,
        "params_before": hash_before,
        "params_after": model.parameter_hash(),
        "wall_seconds": round(elapsed, 3),
    }
    if val_dataset is not None:
        metrics = evaluate_model(model, val_dataset)
        summary["val_epe"] = metrics["epe"]
        summary["val_fl_all"] = metrics["fl_all"]
        if rows:
            rows[-1]["val_epe"] = metrics["epe"]
    manifest = RunManifest(stage=cfg.stage, rows=rows, summary=summary)
    manifest.write(out)
    return manifest


# ---------------------------------------------------------------------------
# the full pipeline
# ---------------------------------------------------------------------------


def run_pipeline(
    data_dir,
    out_dir,
    seed: int = 0,
    val_dir=None,
    config_items: dict | None = None,
    strict: bool = False,
    log=None,
) -> dict:
    """Teacher, label store, student, student store, refreshed teacher.

    Writes under ``out_dir``: per-stage manifests, ``stage1_teacher.ckpt``,
    ``stage2_student.ckpt``, ``stage3_teacher.ckpt``, the two label stores
    and ``pipeline_summary.txt``. Returns the summary dict. The training
    corpus may be unlabeled; validation metrics are skipped when
    ``val_dir`` is None.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    configs = apply_config_items(default_configs(seed), config_items or {})
    for stage in configs:
        configs[stage] = replace(configs[stage], seed=seed)
    dataset = SceneDataset(data_dir)
    val = SceneDataset(val_dir) if val_dir is not None else None
    img1, img2 = _load_images_tensor(dataset)
    summary = {"seed": seed, "data": str(data_dir), "pairs": len(dataset)}
    t0 = time.perf_counter()

    teacher = build_model(TEACHER_KIND, seed=seed)
    m1 = run_stage(
        teacher, configs[1], {"img1": img1, "img2": img2}, out / "stage1",
        val_dataset=val, strict=strict, log=log,
    )
    ckpt1 = out / "stage1_teacher.ckpt"
    save_checkpoint(teacher, ckpt1, {"stage": 1, "seed": seed, "iterations": configs[1].iterations})
    summary["stage1_ckpt"] = checkpoint_id(ckpt1)

    store_t = make_pseudo_labels(teacher, dataset, configs[2].rr, out / "labels_teacher")
    summary["labels_teacher_tau"] = store_t.tau
    summary["labels_teacher_rr"] = store_t.rr

    teacher_hash_before = teacher.parameter_hash()
    student = build_model(STUDENT_KIND, seed=seed)
    ff, fb, mf, mb = _load_store_tensors(store_t)
    m2 = run_stage(
        student, configs[2],
        {"img1": img1, "img2": img2, "ff": ff, "fb": fb, "mf": mf, "mb": mb},
        out / "stage2", val_dataset=val, strict=strict, log=log,
    )
    summary["stage2_teacher_untouched"] = teacher.parameter_hash() == teacher_hash_before
    ckpt2 = out / "stage2_student.ckpt"
    save_checkpoint(student, ckpt2, {"stage": 2, "seed": seed, "iterations": configs[2].iterations})
    summary["stage2_ckpt"] = checkpoint_id(ckpt2)

    store_s = make_pseudo_labels(student, dataset, 0.0, out / "labels_student")
    summary["labels_student_tau"] = store_s.tau

    student_hash_before = student.parameter_hash()
    teacher3, _ = load_checkpoint(ckpt1, expect_kind=TEACHER_KIND)
    sff, sfb, _, _ = _load_store_tensors(store_s)
    m3 = run_stage(
        teacher3, configs[3],
        {"img1": img1, "img2": img2, "ff": sff, "fb": sfb},
        out / "stage3", val_dataset=val, strict=strict, log=log,
    )
    summary["stage3_student_untouched"] = student.parameter_hash() == student_hash_before
    ckpt3 = out / "stage3_teacher.ckpt"
    save_checkpoint(teacher3, ckpt3, {"stage": 3, "seed": seed, "iterations": configs[3].iterations})
    summary["stage3_ckpt"] = checkpoint_id(ckpt3)

    for stage, manifest in ((1, m1), (2, m2), (3, m3)):
        if "val_epe" in manifest.summary:
            summary[f"stage{stage}_val_epe"] = manifest.summary["val_epe"]
            summary[f"stage{stage}_val_fl_all"] = manifest.summary["val_fl_all"]
        summary[f"stage{stage}_skipped_samples"] = manifest.summary["skipped_samples"]
    summary["wall_seconds"] = round(time.perf_counter() - t0, 3)
    with open(out / "pipeline_summary.txt", "w") as fh:
        for k, v in summary.items():
            fh.write(f"{k} = {v}\n")
    return summary


# ---------------------------------------------------------------------------
# finite-difference gradient audit
# ---------------------------------------------------------------------------

FD_OBJECTIVES = ("ph", "sm1", "sm2", "sup", "s1", "s2", "s3")

_TINY_TEACHER = {"channels": [4, 6, 6], "hidden": 6}
_TINY_STUDENT = {"stem": 4, "channels": 6, "context": 6, "hidden": 6, "corr_radius": 2, "iters": 2}


def _fd_images(seed: int, n: int = 2, size: int = 8):
    # smooth double-precision frames: blurred noise keeps the census and
    # matching surfaces curved instead of flat
    gen = torch.Generator().manual_seed(seed)
    imgs = torch.rand(n, 3, size, size, generator=gen, dtype=torch.float64)
    k = torch.ones(3, 1, 3, 3, dtype=torch.float64) / 9.0
    imgs = torch.nn.functional.conv2d(imgs, k, padding=1, groups=3)
    return (imgs - imgs.min()) / (imgs.max() - imgs.min() + 1e-9)


def fd_objective(which: str, seed: int = 0):
    """Build a (model, closure) pair for the gradient audit.

    ``closure()`` evaluates the named objective on frozen 8x8 double data.
    Every stop-gradient gate in the stage objectives (occlusion masks,
    self-labels, validity weights) is precomputed at the base parameters
    and held constant, so central differences probe exactly the surface
    autograd differentiates. Perturbations may still flip a window argmax
    or a median tie; the shipped seeds avoid those measure-zero points.
    """
    if which not in FD_OBJECTIVES:
        raise ValueError(f"unknown objective {which!r}, expected one of {FD_OBJECTIVES}")
    imgs = _fd_images(seed)
    i1, i2 = imgs[0:1], imgs[1:2]
    gen = torch.Generator().manual_seed(seed + 1)
    kind = STUDENT_KIND if which in ("sup", "s2") else TEACHER_KIND
    hyper = _TINY_STUDENT if kind == STUDENT_KIND else _TINY_TEACHER
    model = build_model(kind, seed=seed, hyper=dict(hyper))
    model.net.double()
    ones = torch.ones(1, 8, 8, dtype=torch.float64)

    if which == "ph":
        def closure():
            ff, fb = predict_bidirectional(model, i1, i2)
            return photometric_loss_batch(i1, i2, ff, fb, ones, ones)
        return model, closure

    if which in ("sm1", "sm2"):
        order = 1 if which == "sm1" else 2
        def closure():
            ff, _ = predict_bidirectional(model, i1, i2)
            return smoothness_loss_batch(ff, i1, order=order)
        return model, closure

    if which == "sup":
        lf = 0.5 * torch.randn(2, 8, 8, generator=gen, dtype=torch.float64)
        lb = 0.5 * torch.randn(2, 8, 8, generator=gen, dtype=torch.float64)
        rec = aug.AugmentedSample(
            aug.AugmentSpec(), i1[0], i2[0], lf, lb, ones[0], ones[0], constant=True
        )
        def closure():
            return loss_supervised(model, rec)
        return model, closure

    if which == "s2":
        lf = 0.5 * torch.randn(2, 8, 8, generator=gen, dtype=torch.float64)
        lb = 0.5 * torch.randn(2, 8, 8, generator=gen, dtype=torch.float64)
        spec = aug.AugmentSpec(hflip=True, brightness_delta=0.05, contrast_gain=1.05)
        rec = aug.apply(spec, i1[0], i2[0], lf, lb, ones[0], ones[0])
        def closure():
            return loss_supervised(model, rec)
        return model, closure

    # s1 and s3 share the frozen-gate scaffolding
    cfg = make_stage_config(1 if which == "s1" else 3, seed=seed)
    with torch.no_grad():
        ff0, fb0 = predict_bidirectional(model, i1, i2)
        occ_f, occ_b = occlusion_masks_batch(ff0, fb0, OcclusionParams())
        non_f, non_b = 1.0 - occ_f, 1.0 - occ_b
        if non_f.sum() == 0 or non_b.sum() == 0:
            non_f, non_b = ones.clone(), ones.clone()

    if which == "s1":
        rec = aug.AugmentedSample(
            aug.AugmentSpec(), i1[0], i2[0],
            ff0[0].clone(), fb0[0].clone(), non_f[0].clone(), non_b[0].clone(),
        )
        def closure():
            ff, fb = predict_bidirectional(model, i1, i2)
            lph = photometric_loss_batch(i1, i2, ff, fb, non_f, non_b)
            lsm = smoothness_loss_batch(ff, i1, order=cfg.smoothness_order)
            lsm = lsm + smoothness_loss_batch(fb, i2, order=cfg.smoothness_order)
            lsup = loss_supervised(model, rec)
            return lph + cfg.lambda1 * lsm + cfg.lambda2 * lsup
        return model, closure

    lf = 0.5 * torch.randn(2, 8, 8, generator=gen, dtype=torch.float64)
    lb = 0.5 * torch.randn(2, 8, 8, generator=gen, dtype=torch.float64)
    rec = aug.AugmentedSample(
        aug.AugmentSpec(), i1[0], i2[0], lf, lb, non_f[0].clone(), non_b[0].clone()
    )
    def closure():
        ff, fb = predict_bidirectional(model, i1, i2)
        lph = photometric_loss_batch(i1, i2, ff, fb, non_f, non_b)
        lsm = smoothness_loss_batch(ff, i1, order=cfg.smoothness_order)
        lsm = lsm + smoothness_loss_batch(fb, i2, order=cfg.smoothness_order)
        lsup = loss_supervised(model, rec)
        return lsup + cfg.lambda3 * lph + cfg.lambda4 * lsm
    return model, closure
