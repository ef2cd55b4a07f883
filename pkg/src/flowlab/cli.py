"""Command line front end: data generation, training, evaluation, diagnostics.

Machine-readable key=value summaries go to stdout, human logs to stderr.
Exit codes: 0 success, 1 postcondition or validation failure, 2 usage
error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import torch

from .confidence import calibrate_threshold, sparsification_curve
from .core import (
    FlowIOError,
    epe,
    fl_all,
    flow_to_color,
    read_flo,
    warp_backward_kw,
    write_image,
)
from .measures import OcclusionParams, census_residual_map, occlusion_masks_batch
from .models import (
    CheckpointError,
    STUDENT_KIND,
    TEACHER_KIND,
    build_model,
    finite_difference_check,
    load_checkpoint,
    predict_bidirectional,
    save_checkpoint,
)
from .synth import SceneDataset, SceneSpec, generate_dataset
from .train import (
    ConfigError,
    FD_OBJECTIVES,
    _load_images_tensor,
    _load_store_tensors,
    apply_config_items,
    default_configs,
    evaluate_model,
    fd_objective,
    make_pseudo_labels,
    run_stage,
)

EXIT_OK = 0
EXIT_POSTCONDITION = 1
EXIT_USAGE = 2
EXIT_IO = 3


class UsageError(Exception):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _emit(**kv) -> None:
    print(" ".join(f"{k}={v}" for k, v in kv.items()), flush=True)


def _parse_config_file(path) -> dict:
    from .train import parse_config_text

    return parse_config_text(Path(path).read_text())


def _load_predictor(path):
    model, _ = load_checkpoint(path)
    return model


def _predicted_flows(model, dataset, batch_size=16):
    """Forward/backward flows plus residuals and non-occlusion masks."""
    flows_f, flows_b, res_f, non_f = [], [], [], []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = range(start, min(start + batch_size, len(dataset)))
            pairs = [dataset.load_images(i) for i in idx]
            i1 = torch.stack([p[0].data for p in pairs])
            i2 = torch.stack([p[1].data for p in pairs])
            ff, fb = predict_bidirectional(model, i1, i2)
            occ_f, _ = occlusion_masks_batch(ff, fb, OcclusionParams())
            w2, _ = warp_backward_kw(i2, ff)
            flows_f.append(ff)
            flows_b.append(fb)
            res_f.append(census_residual_map(i1, w2))
            non_f.append(1.0 - occ_f)
    return (
        torch.cat(flows_f),
        torch.cat(flows_b),
        torch.cat(res_f),
        torch.cat(non_f),
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    out = Path(args.out)
    spec = SceneSpec(height=args.height, width=args.width, sprites_max=args.sprites)
    generate_dataset(out, n_pairs=args.pairs, seed=args.seed, spec=spec, write_gt=not args.no_gt)
    _emit(out=out, pairs=args.pairs, seed=args.seed)
    return EXIT_OK


def cmd_train(args) -> int:
    if args.strict:
        torch.set_num_threads(1)
    items = {}
    if args.config:
        items.update(_parse_config_file(args.config))
    for kv in args.set or []:
        if "=" not in kv:
            raise ConfigError(f"--set expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        items[k.strip()] = v.strip()
    configs = apply_config_items(default_configs(args.seed), items)
    cfg = configs[args.stage]
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)

    ckpt_in = args.ckpt_in or []
    need = {1: 0, 2: 1, 3: 2}[args.stage]
    if len(ckpt_in) < need:
        raise UsageError(
            f"stage {args.stage} needs {need} input checkpoint(s): "
            + {1: "none", 2: "teacher", 3: "teacher student"}[args.stage]
        )

    dataset = SceneDataset(args.data)
    val = SceneDataset(args.val) if args.val else None
    img1, img2 = _load_images_tensor(dataset)
    data = {"img1": img1, "img2": img2}
    out_ckpt = Path(args.ckpt_out)
    out_dir = out_ckpt.parent
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.stage == 1:
        model = build_model(TEACHER_KIND, seed=cfg.seed)
    elif args.stage == 2:
        teacher, _ = load_checkpoint(ckpt_in[0], expect_kind=TEACHER_KIND)
        _log(f"labeling {len(dataset)} pairs with teacher at rr={cfg.rr}")
        store = make_pseudo_labels(teacher, dataset, cfg.rr, out_dir / "labels_teacher")
        ff, fb, mf, mb = _load_store_tensors(store)
        data.update(ff=ff, fb=fb, mf=mf, mb=mb)
        model = build_model(STUDENT_KIND, seed=cfg.seed)
    else:
        model, _ = load_checkpoint(ckpt_in[0], expect_kind=TEACHER_KIND)
        student, _ = load_checkpoint(ckpt_in[1], expect_kind=STUDENT_KIND)
        _log(f"labeling {len(dataset)} pairs with student at rr=0")
        store = make_pseudo_labels(student, dataset, 0.0, out_dir / "labels_student")
        ff, fb, _, _ = _load_store_tensors(store)
        data.update(ff=ff, fb=fb)

    manifest = run_stage(
        model, cfg, data, out_dir, val_dataset=val, strict=args.strict, log=_log
    )
    save_checkpoint(model, out_ckpt, {"stage": args.stage, "seed": cfg.seed})
    summary = dict(
        stage=args.stage,
        ckpt=out_ckpt,
        iterations=cfg.iterations,
        loss=f"{manifest.rows[-1]['loss_total']:.6f}" if manifest.rows else "nan",
    )
    if "val_epe" in manifest.summary:
        summary["val_epe"] = f"{manifest.summary['val_epe']:.6f}"
    _emit(**summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = SceneDataset(args.data)
    if not dataset.has_ground_truth:
        raise FileNotFoundError(f"{args.data}: no ground truth, nothing to evaluate")
    rows = []
    if args.model:
        model = _load_predictor(args.model)
        with torch.no_grad():
            for i in range(len(dataset)):
                im1, im2 = dataset.load_images(i)
                pred = model.net(im1.data.unsqueeze(0), im2.data.unsqueeze(0))[0]
                gt = dataset.load_gt(i)[0]
                rows.append((i, epe(pred, gt.data), fl_all(pred, gt.data)))
    else:
        flo_dir = Path(args.flo_dir)
        for i in range(len(dataset)):
            path = flo_dir / f"{i:04d}.flo"
            if not path.exists():
                raise FileNotFoundError(f"missing prediction {path}")
            pred = read_flo(path)
            gt = dataset.load_gt(i)[0]
            rows.append((i, epe(pred, gt.data), fl_all(pred, gt.data)))
    mean_epe = sum(r[1] for r in rows) / len(rows)
    mean_fl = sum(r[2] for r in rows) / len(rows)
    if args.report:
        with open(args.report, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair", "epe", "fl_all"])
            for i, e, f in rows:
                w.writerow([f"{i:04d}", f"{e!r}", f"{f!r}"])
            w.writerow(["mean", f"{mean_epe!r}", f"{mean_fl!r}"])
    _emit(epe=f"{mean_epe:.6f}", fl_all=f"{mean_fl:.6f}", pairs=len(rows))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    dataset = SceneDataset(args.data)
    model = _load_predictor(args.model)
    _, _, res_f, non_f = _predicted_flows(model, dataset)
    tau = calibrate_threshold([res_f], [non_f], args.rr)
    removed = float(((res_f > tau) * non_f).sum() / non_f.sum())
    _emit(tau=f"{tau!r}", rr=args.rr, removed=f"{removed:.6f}")
    return EXIT_OK


def cmd_sparsify(args) -> int:
    dataset = SceneDataset(args.data)
    if not dataset.has_ground_truth:
        raise FileNotFoundError(f"{args.data}: sparsification needs ground truth")
    model = _load_predictor(args.model)
    flows_f, _, res_f, non_f = _predicted_flows(model, dataset)
    gt = torch.stack(
        [torch.as_tensor(dataset.load_gt(i)[0].data) for i in range(len(dataset))]
    ).float()
    epe_fields = (flows_f - gt).norm(dim=1)
    if args.grid:
        grid = [float(g) for g in args.grid.split(",")]
    else:
        grid = [round(0.1 * k, 1) for k in range(10)]
    rows = sparsification_curve(epe_fields, res_f, non_f, rr_grid=grid)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rr", "epe", "retained"])
        for rr, e, kept in rows:
            w.writerow([f"{rr!r}", f"{e!r}", f"{kept!r}"])
    _emit(out=args.out, rows=len(rows), epe_full=f"{rows[0][1]:.6f}", epe_last=f"{rows[-1][1]:.6f}")
    return EXIT_OK


def cmd_viz(args) -> int:
    flow = read_flo(args.flow)
    rgb = flow_to_color(flow, max_norm=args.max_norm)
    write_image(args.out, rgb)
    _emit(out=args.out, height=flow.shape[0], width=flow.shape[1])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    model, closure = fd_objective(args.which, seed=args.seed)
    err = finite_difference_check(
        model,
        closure,
        n_coords=args.coords,
        h=1e-5,
        seed=args.seed,
        inject_fault=args.inject_gradient_fault,
    )
    ok = err <= 1e-3
    _emit(which=args.which, rel_err=f"{err:.6e}", ok=ok)
    return EXIT_OK if ok else EXIT_POSTCONDITION


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic labeled corpus")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--pairs", type=int, required=True, help="number of frame pairs")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.add_argument("--height", type=int, default=96, help="frame height")
    g.add_argument("--width", type=int, default=128, help="frame width")
    g.add_argument("--sprites", type=int, default=6, help="moving sprites per scene")
    g.add_argument("--no-gt", action="store_true", help="write frames only, no ground truth")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train one pipeline stage")
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--data", required=True, help="training corpus directory")
    t.add_argument("--ckpt-in", nargs="*", default=[], help="stage 2: teacher; stage 3: teacher student")
    t.add_argument("--ckpt-out", required=True, help="checkpoint written on completion")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    t.add_argument("--val", help="labeled validation corpus, evaluated at the end")
    t.add_argument("--seed", type=int, default=0, help="stage seed")
    t.add_argument("--strict", action="store_true", help="single-threaded deterministic mode")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="endpoint error of a model or stored flows")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", help="checkpoint to evaluate")
    src.add_argument("--flo-dir", help="directory of NNNN.flo forward flows")
    e.add_argument("--data", required=True, help="labeled corpus directory")
    e.add_argument("--report", help="per-pair CSV report path")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("calibrate", help="confidence threshold for a removal rate")
    c.add_argument("--model", required=True, help="checkpoint to calibrate")
    c.add_argument("--data", required=True, help="corpus directory")
    c.add_argument("--rr", type=float, default=0.1, help="removal rate in [0, 1)")
    c.set_defaults(fn=cmd_calibrate)

    s = sub.add_parser("sparsify", help="retained-error curve over removal rates")
    s.add_argument("--model", required=True, help="checkpoint to analyze")
    s.add_argument("--data", required=True, help="labeled corpus directory")
    s.add_argument("--out", required=True, help="CSV output path")
    s.add_argument("--grid", help="comma-separated removal rates, default 0..0.9")
    s.set_defaults(fn=cmd_sparsify)

    v = sub.add_parser("viz", help="render a .flo file to a PPM color wheel image")
    v.add_argument("--flow", required=True, help=".flo input")
    v.add_argument("--out", required=True, help=".ppm output")
    v.add_argument("--max-norm", type=float, default=None, help="color saturation magnitude")
    v.set_defaults(fn=cmd_viz)

    gc = sub.add_parser("gradcheck", help="finite-difference audit of one objective")
    gc.add_argument("--which", required=True, choices=FD_OBJECTIVES)
    gc.add_argument("--seed", type=int, default=0, help="harness seed")
    gc.add_argument("--coords", type=int, default=3, help="parameter coordinates probed")
    gc.add_argument(
        "--inject-gradient-fault",
        action="store_true",
        help="corrupt the analytic gradient; the audit must then fail",
    )
    gc.set_defaults(fn=cmd_gradcheck)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except (FlowIOError, CheckpointError, FileNotFoundError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_IO
    except ValueError as exc:
        _log(f"error: {exc}")
        return EXIT_POSTCONDITION


if __name__ == "__main__":
    sys.exit(main())
