"""Command line entry points: ``autonet phantom|sample|train|predict|evaluate``.

Exit codes: 0 success, 2 invalid configuration or inputs, 3 runtime or
training failure. Every command writes its resolved settings to
``run_config.json`` in the output directory; ``--config run_config.json``
replays them (explicit flags still win).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import cascade as cas
from . import networks as nets
from .evaluation import (
    DimensionMismatchError,
    aggregate_log_error,
    binarize,
    error_map,
    evaluate_case,
    summarize,
)
from .sampling import EmptyStratumError, sample_training_voxels
from .volumes import PhantomSpec, Volume, VolumeFormatError, generate_phantom, load_volume, save_volume

log = logging.getLogger("autonet")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class InvalidInput(Exception):
    """Bad configuration or inputs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def read_manifest(path) -> List[dict]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInput(f"cannot read manifest {path}: {exc}") from exc
    cases = doc.get("cases")
    if not isinstance(cases, list) or not cases:
        raise InvalidInput(f"manifest {path} has no cases")
    out = []
    for c in cases:
        if "id" not in c or "volume" not in c:
            raise InvalidInput(f"manifest entry {c} needs 'id' and 'volume'")
        entry = dict(c)
        entry["volume"] = str((path.parent / c["volume"]).resolve())
        if c.get("mask"):
            entry["mask"] = str((path.parent / c["mask"]).resolve())
        entry["fold"] = int(c.get("fold", 0))
        out.append(entry)
    return out


def _select(cases, fold):
    if fold is None:
        return cases
    chosen = [c for c in cases if c["fold"] == fold]
    if not chosen:
        raise InvalidInput(f"no cases in fold {fold}")
    return chosen


def _load_case(entry, need_mask=True):
    try:
        vol, _ = load_volume(entry["volume"])
    except (VolumeFormatError, ValueError, OSError) as exc:
        raise InvalidInput(f"case {entry['id']}: {exc}") from exc
    if not need_mask:
        return vol, None
    if not entry.get("mask"):
        raise InvalidInput(f"case {entry['id']}: missing labels (no mask in manifest)")
    try:
        _, mask = load_volume(entry["mask"])
    except (VolumeFormatError, ValueError, OSError) as exc:
        raise InvalidInput(f"case {entry['id']}: missing or unreadable labels: {exc}") from exc
    if mask is None:
        raise InvalidInput(f"case {entry['id']}: label file does not hold 0/1 integer labels")
    if mask.dims != vol.dims:
        raise InvalidInput(f"case {entry['id']}: mask dims {mask.dims} differ from volume dims {vol.dims}")
    return vol, mask


def _write_run_config(out: Path, args) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config") and not callable(v)}
    (out / "run_config.json").write_text(json.dumps(cfg, indent=2, default=str))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    dims = tuple(args.dims) * (3 // len(args.dims)) if len(args.dims) in (1, 3) else None
    if dims is None:
        raise InvalidInput("--dims takes 1 or 3 integers")
    axes = tuple(args.axes) if args.axes else tuple(round(f * n, 3) for f, n in zip((0.31, 0.25, 0.22), dims))
    if len(axes) != 3:
        raise InvalidInput("--axes takes 3 values")
    center = tuple((n - 1) / 2 for n in dims)
    largest = tuple(a * (1 + args.axes_jitter) for a in axes)
    try:
        PhantomSpec(
            dims=dims, brain_center=center, brain_axes=largest, jitter=args.center_jitter,
            n_distractors=args.distractors, noise_sigma=args.noise,
        )
    except ValueError as exc:
        raise InvalidInput(f"invalid phantom spec: {exc}") from exc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    ext = ".nii.gz" if args.format == "nifti" else ".raw"
    entries = []
    for i in range(args.count):
        scale = 1 + rng.uniform(-args.axes_jitter, args.axes_jitter, size=3)
        spec = PhantomSpec(
            dims=dims,
            brain_center=center,
            brain_axes=tuple(float(a * s) for a, s in zip(axes, scale)),
            n_distractors=args.distractors,
            noise_sigma=args.noise,
            jitter=args.center_jitter,
            bias_field=tuple(args.bias) if args.bias else None,
        )
        seed = int(args.seed * 100003 + i)
        vol, mask = generate_phantom(spec, seed)
        cid = f"phantom{i:03d}"
        save_volume(vol, out / f"{cid}{ext}")
        save_volume(mask, out / f"{cid}_mask{ext}")
        (out / f"{cid}_spec.json").write_text(spec.to_json())
        entries.append({"id": cid, "volume": f"{cid}{ext}", "mask": f"{cid}_mask{ext}", "fold": i % 2, "seed": seed})
    (out / "manifest.json").write_text(json.dumps({"cases": entries}, indent=2))
    _write_run_config(out, args)
    print(f"wrote {len(entries)} phantoms to {out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cases = _select(read_manifest(args.manifest), args.fold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for j, entry in enumerate(cases):
        _, mask = _load_case(entry)
        try:
            plan = sample_training_voxels(mask, args.total, tuple(args.fractions), seed=args.seed + j)
        except (EmptyStratumError, ValueError) as exc:
            raise InvalidInput(f"case {entry['id']}: {exc}") from exc
        (out / f"{entry['id']}_plan.json").write_text(plan.to_json())
        print(f"{entry['id']}: {plan.counts}")
    _write_run_config(out, args)
    return EXIT_OK


def _schedule_from_args(args) -> nets.TrainSchedule:
    if args.arch == "voxelwise":
        sched = nets.TrainSchedule.voxelwise_paper()
        if args.samples is not None:
            for s in sched.stages:
                s.samples_per_image = args.samples
    else:
        sched = nets.TrainSchedule.unet_paper()
    if args.epochs is not None:
        for s in sched.stages:
            s.epochs = args.epochs
    if args.lr is not None:
        scale = args.lr / sched.stages[0].learning_rate
        for s in sched.stages:
            s.learning_rate *= scale
    if args.lr_decay is not None:
        sched.decay_rate = args.lr_decay
    if args.lr_decay_steps is not None:
        sched.decay_steps = args.lr_decay_steps
    if args.batch_size is not None:
        sched.batch_size = args.batch_size
    return sched


def cmd_train(args) -> int:
    cases = _select(read_manifest(args.manifest), args.fold)
    loaded = [(e["id"], *_load_case(e)) for e in cases]
    try:
        sched = _schedule_from_args(args)
        cfg = cas.CascadeConfig(
            architecture=args.arch,
            epsilon=args.epsilon,
            max_steps=args.max_steps,
            test_steps=args.test_steps,
            warm_start=args.warm_start,
            seed=args.seed,
            voxelwise=nets.VoxelwiseConfig.small() if args.small else nets.VoxelwiseConfig(),
            unet=nets.UnetConfig.small() if args.small else nets.UnetConfig(),
            schedule=sched,
            samples_per_image=args.samples_total,
            plane=args.plane,
        )
    except ValueError as exc:
        raise InvalidInput(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_config(out, args)
    tic = time.perf_counter()
    state = cas.run_training_cascade([cas.TrainingCase(i, v, m) for i, v, m in loaded], cfg, out_dir=out)
    print(f"trained {len(state.models)} step(s) in {time.perf_counter() - tic:.1f}s; H = {state.H}")
    return EXIT_OK


def cmd_predict(args) -> int:
    try:
        state = cas.load_cascade(args.cascade)
    except (OSError, KeyError, ValueError) as exc:
        raise InvalidInput(f"cannot load cascade from {args.cascade}: {exc}") from exc
    # --steps counts context refinements after the initial network
    n_models = args.steps + 1
    if args.steps < 0 or n_models > len(state.models):
        raise InvalidInput(
            f"--steps {args.steps} needs {n_models} trained networks, cascade has {len(state.models)}"
        )
    cases = _select(read_manifest(args.manifest), args.fold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_config(out, args)
    timings = {}
    for entry in cases:
        vol, _ = _load_case(entry, need_mask=False)
        tic = time.perf_counter()
        post = cas.run_inference_cascade(state, vol, n_models)
        timings[entry["id"]] = time.perf_counter() - tic
        save_volume(Volume(post.brain.astype(np.float32), vol.spacing), out / f"{entry['id']}_posterior.nii.gz")
        save_volume(binarize(post), out / f"{entry['id']}_mask.nii.gz")
    (out / "timing.json").write_text(json.dumps({"seconds": timings, "models_used": n_models}, indent=2))
    print(f"predicted {len(cases)} case(s) with {n_models} network(s)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cases = _select(read_manifest(args.manifest), args.fold)
    pred_dir = Path(args.predictions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_config(out, args)
    tic = time.perf_counter()
    reports, maps = [], []
    for entry in cases:
        _, ref = _load_case(entry)
        path = pred_dir / f"{entry['id']}_mask.nii.gz"
        try:
            _, pred = load_volume(path)
        except (VolumeFormatError, OSError) as exc:
            raise InvalidInput(f"case {entry['id']}: cannot read prediction {path}: {exc}") from exc
        if pred is None:
            raise InvalidInput(f"case {entry['id']}: prediction {path} is not a binary mask")
        if pred.dims != ref.dims:
            raise InvalidInput(f"case {entry['id']}: prediction dims {pred.dims} differ from reference dims {ref.dims}")
        reports.append(evaluate_case(pred, ref, entry["id"], args.step))
        maps.append(error_map(pred, ref))
    try:
        agg = aggregate_log_error(maps)
    except DimensionMismatchError as exc:
        raise InvalidInput(f"error maps cannot be aggregated: {exc}") from exc
    save_volume(agg, out / "log_error_map.nii.gz")
    doc = {
        "cases": [r.to_dict() for r in reports],
        "summary": summarize(reports),
        "seconds": time.perf_counter() - tic,
    }
    (out / "report.json").write_text(json.dumps(doc, indent=2))
    mean = doc["summary"]["dice"]["mean"]
    print(f"evaluated {len(reports)} case(s); mean dice {mean:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="autonet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="replay settings from a run_config.json")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)

    ph = sub.add_parser("phantom", help="generate synthetic volume/mask pairs")
    common(ph)
    ph.add_argument("--count", type=int, default=10)
    ph.add_argument("--dims", type=int, nargs="+", default=[64])
    ph.add_argument("--axes", type=float, nargs=3, help="brain semi-axes in voxels")
    ph.add_argument("--axes-jitter", type=float, default=0.1, help="relative per-case axis variation")
    ph.add_argument("--center-jitter", type=float, default=0.0)
    ph.add_argument("--distractors", type=int, default=5)
    ph.add_argument("--noise", type=float, default=8.0)
    ph.add_argument("--bias", type=float, nargs=4, help="bias field c0 cx cy cz")
    ph.add_argument("--format", choices=("raw", "nifti"), default="raw")
    ph.set_defaults(func=cmd_phantom)

    sa = sub.add_parser("sample", help="draw class-balanced voxel plans")
    common(sa)
    sa.add_argument("--manifest", required=True)
    sa.add_argument("--fold", type=int)
    sa.add_argument("--total", type=int, default=15000)
    sa.add_argument("--fractions", type=float, nargs=3, default=[0.5, 0.25, 0.25])
    sa.set_defaults(func=cmd_sample)

    tr = sub.add_parser("train", help="train an auto-context cascade")
    common(tr)
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--fold", type=int, help="train on the cases of this fold")
    tr.add_argument("--arch", choices=cas.ARCHITECTURES, default="voxelwise")
    tr.add_argument("--max-steps", type=int, default=3)
    tr.add_argument("--test-steps", type=int, default=2)
    tr.add_argument("--epsilon", type=float, default=1e-3)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--lr-decay", type=float)
    tr.add_argument("--lr-decay-steps", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--samples", type=int, help="voxels per image per stage")
    tr.add_argument("--samples-total", type=int, default=15000, help="voxels sampled per image")
    tr.add_argument("--plane", default="axial")
    tr.add_argument("--small", action="store_true", help="desk-scale network sizes")
    tr.add_argument("--warm-start", dest="warm_start", action="store_true", default=True)
    tr.add_argument("--no-warm-start", dest="warm_start", action="store_false")
    tr.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="apply a trained cascade")
    common(pr)
    pr.add_argument("--cascade", required=True)
    pr.add_argument("--manifest", required=True)
    pr.add_argument("--fold", type=int)
    pr.add_argument("--steps", type=int, default=2, help="context refinements after the first network")
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("evaluate", help="score predictions against reference masks")
    common(ev)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--predictions", required=True)
    ev.add_argument("--fold", type=int)
    ev.add_argument("--step", type=int, default=0, help="cascade step recorded in the report")
    ev.set_defaults(func=cmd_evaluate)
    return p


def _parse(parser, argv):
    argv = list(sys.argv[1:] if argv is None else argv)
    if "--config" in argv:
        i = argv.index("--config")
        if i + 1 >= len(argv):
            raise InvalidInput("--config needs a file")
        try:
            saved = json.loads(Path(argv[i + 1]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInput(f"cannot read --config {argv[i + 1]}: {exc}") from exc
        choices = parser._subparsers._group_actions[0].choices
        command = next((a for a in argv if a in choices), saved.get("command"))
        if command not in choices:
            raise InvalidInput("cannot tell which command --config belongs to")
        if command not in argv:
            argv.insert(0, command)
        for action in choices[command]._actions:
            if action.dest in saved and action.dest not in ("help", "config"):
                action.default = saved[action.dest]
                action.required = False
    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except nets.TrainingDivergedError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
