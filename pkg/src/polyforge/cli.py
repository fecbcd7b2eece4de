"""Command-line entry point.

Heavy imports happen inside main() so POLYFORGE_THREADS can cap the BLAS
worker pool before numpy loads.  Every stochastic command requires --seed and
is bit-reproducible; all JSON output is single-line and key-sorted.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so errors map to exit codes."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


class _UsageError(Exception):
    pass


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True, separators=(",", ":")))


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError as e:
        raise _UsageError(f"expected comma-separated integers, got {text!r}") from e


def _int_pair(text: str) -> tuple[int, int]:
    vals = _int_list(text)
    if len(vals) != 2:
        raise _UsageError(f"expected two comma-separated integers, got {text!r}")
    return vals[0], vals[1]


def _float_pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError as e:
        raise _UsageError(f"expected two comma-separated floats, got {text!r}") from e
    return a, b


def build_parser() -> _Parser:
    p = _Parser(prog="polyforge", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="dataset preparation").add_subparsers(
        dest="subcommand", required=True
    )
    mk = ds.add_parser("make-toy", help="generate a synthetic blob dataset")
    mk.add_argument("--n", type=int, required=True, help="number of images")
    mk.add_argument("--res", type=int, required=True, help="square image side in pixels")
    mk.add_argument("--seed", type=int, required=True)
    mk.add_argument("--out", required=True, help="output directory")
    mk.add_argument("--channels", type=int, default=1, choices=(1, 3))
    mk.add_argument("--blobs", type=_int_pair, default=(1, 3),
                    help="min,max blob count per image")
    mk.add_argument("--blob-frac", type=_float_pair, default=(0.25, 0.55),
                    help="min,max blob diameter as a fraction of the side")
    mk.add_argument("--distractors", type=_int_pair, default=(0, 0),
                    help="min,max unannotated sub-threshold smudges per image")
    mk.add_argument("--styles", default="filled",
                    help="comma-separated blob styles: filled,ring,crescent,gradient")

    cr = ds.add_parser("crop-resize", help="center-crop and resize a dataset")
    cr.add_argument("--manifest", required=True)
    cr.add_argument("--target", type=int, required=True, help="output square side")
    cr.add_argument("--out", required=True, help="output directory")

    dd = ds.add_parser("dedup", help="drop near-duplicates via embedding components")
    dd.add_argument("--features", required=True, help="PFF1 feature file")
    dd.add_argument("--manifest", required=True)
    dd.add_argument("--policy", default="percentile:5",
                    help="threshold policy: percentile:P or fixed:V")
    dd.add_argument("--out", required=True, help="deduplicated manifest path")

    ft = sub.add_parser("features", help="feature extraction").add_subparsers(
        dest="subcommand", required=True
    )
    fe = ft.add_parser("extract-builtin", help="deterministic built-in features")
    fe.add_argument("--manifest", required=True)
    fe.add_argument("--out", required=True, help="output PFF1 file")

    tr = sub.add_parser("train", help="train a diffusion model under a regime")
    tr.add_argument("--regime", required=True,
                    choices=("vae-upscale", "finetune", "alt-batch", "alt-epoch", "mixed"))
    tr.add_argument("--primary", required=True, help="primary dataset manifest")
    tr.add_argument("--secondary", default=None,
                    help="comma-separated secondary manifests")
    tr.add_argument("--res", type=int, default=32, help="primary (low) resolution")
    tr.add_argument("--target-res", type=int, default=0,
                    help="target resolution (default: 1.25x --res)")
    tr.add_argument("--steps", type=int, default=2000, help="step budget per phase")
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--batch", type=int, default=8)
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--codec", default="identity", help="identity or pool:F")
    tr.add_argument("--base-width", type=int, default=16)
    tr.add_argument("--channel-mults", type=_int_list, default=[1, 2, 2])
    tr.add_argument("--layers-per-block", type=int, default=2)
    tr.add_argument("--timesteps", type=int, default=1000)
    tr.add_argument("--gen-count", type=int, default=500,
                    help="mixed regime: generated dataset size")
    tr.add_argument("--log", default=None, help="write the phase log JSON here")

    sm = sub.add_parser("sample", help="generate an annotated dataset from a checkpoint")
    sm.add_argument("--ckpt", required=True)
    sm.add_argument("--n", type=int, required=True)
    sm.add_argument("--res", type=int, required=True)
    sm.add_argument("--steps", type=int, default=300, help="denoising steps")
    sm.add_argument("--out", required=True, help="output directory")
    sm.add_argument("--seed", type=int, required=True)
    sm.add_argument("--cond", default="none",
                    help="conditioning: none | random | resample:MANIFEST")
    sm.add_argument("--batch", type=int, default=25, help="sampling micro-batch")

    mt = sub.add_parser("metrics", help="generated-data quality measures").add_subparsers(
        dest="subcommand", required=True
    )
    fid = mt.add_parser("fid", help="Frechet distance between feature sets")
    fid.add_argument("--real", required=True)
    fid.add_argument("--gen", required=True)
    isp = mt.add_parser("is", help="Inception Score over probability rows")
    isp.add_argument("--gen", required=True, help="PFF1 file of class-probability rows")
    isp.add_argument("--splits", type=int, default=1)
    pr = mt.add_parser("pr", help="manifold precision/recall")
    pr.add_argument("--real", required=True)
    pr.add_argument("--gen", required=True)
    pr.add_argument("--k", type=int, default=3)

    ev = sub.add_parser("eval", help="localization evaluation").add_subparsers(
        dest="subcommand", required=True
    )
    mp = ev.add_parser("map", help="mean average precision of predictions")
    mp.add_argument("--preds", required=True,
                    help="JSON {image_id: [[x,y,w,h,score],...]}")
    mp.add_argument("--gts", required=True, help="ground-truth manifest")
    mp.add_argument("--iou", type=float, default=0.5)

    ex = sub.add_parser("exp", help="experiment harnesses").add_subparsers(
        dest="subcommand", required=True
    )
    tg = ex.add_parser("transfer-grid", help="modality A vs B over subset sizes")
    tg.add_argument("--real", required=True)
    tg.add_argument("--synthetic", required=True, help="comma-separated manifests")
    tg.add_argument("--benchmark", required=True, help="comma-separated manifests")
    tg.add_argument("--sizes", type=_int_list, default=[10, 25, 50, 100, 250, 500, 1000])
    tg.add_argument("--seeds", type=int, default=3, help="number of seeds")
    tg.add_argument("--seed", type=int, required=True, help="base seed")
    tg.add_argument("--out", required=True, help="results JSON path")
    tg.add_argument("--pretrain-steps", type=int, default=600)
    tg.add_argument("--finetune-steps", type=int, default=313)
    tg.add_argument("--lr", type=float, default=3e-3)
    tg.add_argument("--batch", type=int, default=16)
    tg.add_argument("--iou", type=float, default=0.5)
    return p


# ---------------------------------------------------------------------------
# command implementations (imports deferred; see module docstring)


def _cmd_make_toy(args) -> None:
    from . import toydata

    styles = tuple(s for s in args.styles.split(",") if s)
    manifest = toydata.make_toy_dataset(
        args.out, args.n, args.res, args.seed, channels=args.channels,
        blob_count=args.blobs, blob_frac=args.blob_frac,
        distractors=args.distractors, styles=styles,
    )
    _emit({"images": args.n, "manifest": str(manifest)})


def _cmd_crop_resize(args) -> None:
    from . import spatial

    entries = spatial.load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    new_entries = []
    for e in entries:
        smp = spatial.load_sample(args.manifest, e)
        resized = spatial.center_crop_resize(smp.image, smp.boxes, args.target)
        spatial.save_image(out_dir / e.image_path, resized.image)
        new_entries.append(spatial.ManifestEntry(
            image_path=e.image_path, width=args.target, height=args.target,
            boxes=resized.boxes,
        ))
    manifest = out_dir / "manifest.json"
    spatial.save_manifest(manifest, new_entries)
    _emit({"images": len(new_entries), "manifest": str(manifest)})


def _cmd_dedup(args) -> None:
    from . import dedup, spatial

    fs = dedup.load_features(args.features)
    entries = spatial.load_manifest(args.manifest)
    distances = dedup.first_neighbor_distances(fs)
    threshold = dedup.select_threshold(distances, args.policy)
    report = dedup.deduplicate(fs, threshold)
    kept_entries = dedup.apply_dedup_to_manifest(entries, report)
    spatial.save_manifest(args.out, kept_entries)
    _emit({
        "components": len(report.components),
        "kept": len(report.kept),
        "manifest": str(args.out),
        "removed": report.removed_count,
        "threshold": threshold,
    })


def _cmd_extract_builtin(args) -> None:
    from . import dedup, spatial

    entries = spatial.load_manifest(args.manifest)
    fs = dedup.builtin_features(args.manifest, entries)
    dedup.save_features(args.out, fs)
    _emit({"d": fs.matrix.shape[1], "n": fs.n, "out": str(args.out)})


def _cmd_train(args) -> None:
    import dataclasses

    from . import regimes, spatial
    from .denoiser import DenoiserConfig

    secondary = [s for s in (args.secondary or "").split(",") if s]
    target_res = args.target_res
    if not target_res:
        target_res = max(8, round(args.res * 1.25 / 8) * 8)
    codec = spatial.LatentCodec.parse(args.codec)
    channels = _probe_channels(args.primary)
    dcfg = DenoiserConfig(
        in_channels=channels + 1, base_width=args.base_width,
        channel_multipliers=tuple(args.channel_mults),
        layers_per_block=args.layers_per_block, time_embed_dim=4 * args.base_width,
    )
    cfg = regimes.PlanConfig(
        low_res=args.res, target_res=target_res, steps=args.steps, lr=args.lr,
        generation_count=args.gen_count, batch_size=args.batch,
        timesteps=args.timesteps, codec=codec, denoiser=dcfg,
    )
    plan = regimes.plan_regime(args.regime, args.primary, secondary, cfg, seed=args.seed)
    log: list[regimes.StepRecord] = []
    work_dir = Path(args.out).parent / (Path(args.out).name + ".work")
    ckpt = regimes.run_training(plan, checkpoint_sink=args.out, work_dir=work_dir, log=log)
    if args.log:
        Path(args.log).write_text(json.dumps(
            [dataclasses.asdict(r) for r in log], sort_keys=True, separators=(",", ":"),
        ))
    losses = [r.loss for r in log]
    _emit({
        "checkpoint": str(args.out),
        "final_loss_mean100": sum(losses[-100:]) / max(1, len(losses[-100:])),
        "steps": ckpt.step,
    })


def _probe_channels(manifest: str) -> int:
    from . import spatial

    entries = spatial.load_manifest(manifest)
    if not entries:
        from .errors import DataError

        raise DataError(f"manifest {manifest} is empty")
    return spatial.load_sample(manifest, entries[0]).image.shape[0]


def _cmd_sample(args) -> None:
    import numpy as np

    from . import regimes

    ckpt = regimes.load_checkpoint(args.ckpt)
    cond = regimes.parse_cond_source(args.cond)
    manifest = regimes.generate_dataset(
        ckpt, args.n, args.res, cond, sampler_steps=args.steps,
        rng=np.random.default_rng(args.seed), out_dir=args.out, batch=args.batch,
    )
    _emit({"images": args.n, "manifest": str(manifest)})


def _cmd_metrics(args) -> None:
    from . import dedup, genmetrics

    if args.subcommand == "fid":
        real = dedup.load_features(args.real)
        gen = dedup.load_features(args.gen)
        value = genmetrics.frechet_distance(
            genmetrics.fit_gaussian(real), genmetrics.fit_gaussian(gen)
        )
        _emit({"metric": "fid", "n_gen": gen.n, "n_real": real.n, "value": value})
    elif args.subcommand == "is":
        gen = dedup.load_features(args.gen)
        mean, std = genmetrics.inception_score(gen.matrix, splits=args.splits)
        _emit({
            "metric": "is", "n_gen": gen.n, "splits": args.splits,
            "value_mean": mean, "value_std": std,
        })
    else:
        real = dedup.load_features(args.real)
        gen = dedup.load_features(args.gen)
        res = genmetrics.precision_recall(real, gen, k=args.k)
        _emit({
            "k": res.k, "metric": "pr", "n_gen": gen.n, "n_real": real.n,
            "precision": res.precision, "recall": res.recall,
        })


def _cmd_eval_map(args) -> None:
    from . import loceval, spatial
    from .errors import DataError
    from .spatial import BBox

    try:
        raw = json.loads(Path(args.preds).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read predictions {args.preds}: {e}") from e
    preds = {}
    for img_id, rows in raw.items():
        dets = []
        for r in rows:
            x, y, w, h, score = r
            dets.append(loceval.Detection(BBox(int(x), int(y), int(w), int(h)), float(score)))
        preds[img_id] = dets
    entries = spatial.load_manifest(args.gts)
    gts = {e.image_path: e.boxes for e in entries}
    value = loceval.mean_average_precision(preds, gts, iou_thr=args.iou)
    _emit({"iou": args.iou, "map": value, "n_images": len(gts)})


def _cmd_transfer_grid(args) -> None:
    from . import loceval

    synthetic = [s for s in args.synthetic.split(",") if s]
    benchmarks = [s for s in args.benchmark.split(",") if s]
    budgets = loceval.GridBudgets(
        pretrain_steps=args.pretrain_steps, finetune_steps=args.finetune_steps,
        lr=args.lr, batch_size=args.batch,
    )
    result = loceval.transfer_grid(
        args.real, synthetic, benchmarks, subset_sizes=args.sizes, seeds=args.seeds,
        budgets=budgets, base_seed=args.seed, iou_thr=args.iou,
    )
    rows = result.to_rows()
    Path(args.out).write_text(json.dumps(rows, sort_keys=True, separators=(",", ":")))
    _emit({"cells": len(rows), "out": str(args.out)})


_DISPATCH = {
    ("dataset", "make-toy"): _cmd_make_toy,
    ("dataset", "crop-resize"): _cmd_crop_resize,
    ("dataset", "dedup"): _cmd_dedup,
    ("features", "extract-builtin"): _cmd_extract_builtin,
    ("train", None): _cmd_train,
    ("sample", None): _cmd_sample,
    ("metrics", "fid"): _cmd_metrics,
    ("metrics", "is"): _cmd_metrics,
    ("metrics", "pr"): _cmd_metrics,
    ("eval", "map"): _cmd_eval_map,
    ("exp", "transfer-grid"): _cmd_transfer_grid,
}


def _apply_thread_cap() -> None:
    cap = os.environ.get("POLYFORGE_THREADS", "").strip()
    if not cap or cap == "0":
        return
    if "numpy" in sys.modules:
        return  # too late to cap the BLAS pool
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE

    from .errors import DataError, NumericError, ParameterError

    handler = _DISPATCH.get((args.command, getattr(args, "subcommand", None)))
    if handler is None:  # pragma: no cover - argparse enforces the choices
        print(f"unknown command {args.command}", file=sys.stderr)
        return EXIT_USAGE
    try:
        handler(args)
    except (_UsageError, ParameterError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
