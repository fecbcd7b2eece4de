"""Localization evaluation: IoU, average precision over greedy box matching,
a small convolutional reference localizer, and the pretrain-then-finetune
transfer grid (modality A: scarce real data only; modality B: synthetic
pretraining followed by fine-tuning).

The localizer is a 4-layer conv backbone over stride-8 grid cells with an
objectness head and a 4-coordinate box head; it is deliberately tiny so grid
cells train in seconds while still exercising the full A/B contract.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import optim, spatial
from .denoiser import engine as eng
from .denoiser import gradient
from .errors import DataError, ParameterError
from .spatial import BBox, LabeledSample

LOC_STRIDE = 8  # three 2x poolings

_SCORE_FLOOR = 0.05
_NMS_IOU = 0.5
_BOX_LOSS_WEIGHT = 5.0


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ParameterError(f"detection score must be in [0, 1], got {self.score}")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def mean_average_precision(
    preds: dict[str, list[Detection]],
    gts: dict[str, list[BBox]],
    iou_thr: float = 0.5,
) -> float:
    """Single-class AP with greedy matching and all-point interpolation.

    Detections are flattened in gts-key order then per-image list order;
    ties in score break toward the earlier flattened index.  Each detection
    greedily takes the highest-IoU unmatched ground truth with IoU >= iou_thr.
    """
    flat: list[tuple[float, int, str, BBox]] = []
    order = 0
    for img_id in gts:
        for det in preds.get(img_id, []):
            flat.append((det.score, order, img_id, det.box))
            order += 1
    total_gt = sum(len(v) for v in gts.values())
    if total_gt == 0 or not flat:
        return 0.0
    flat.sort(key=lambda r: (-r[0], r[1]))
    matched: dict[str, list[bool]] = {k: [False] * len(v) for k, v in gts.items()}
    tp = np.zeros(len(flat))
    for rank, (_, _, img_id, box) in enumerate(flat):
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts[img_id]):
            if matched[img_id][j]:
                continue
            v = iou(box, gt)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thr:
            matched[img_id][best_j] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(flat) + 1)
    recall = cum_tp / total_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_r) * envelope).sum())


# ---------------------------------------------------------------------------
# reference localizer


@dataclass(frozen=True)
class LocalizerConfig:
    in_channels: int = 1
    widths: tuple[int, int, int, int] = (16, 32, 64, 64)


def localizer_shapes(cfg: LocalizerConfig) -> dict[str, tuple]:
    w1, w2, w3, w4 = cfg.widths
    return {
        "conv1.w": (w1, cfg.in_channels, 3, 3), "conv1.b": (w1,),
        "conv2.w": (w2, w1, 3, 3), "conv2.b": (w2,),
        "conv3.w": (w3, w2, 3, 3), "conv3.b": (w3,),
        "conv4.w": (w4, w3, 3, 3), "conv4.b": (w4,),
        "head_obj.w": (1, w4, 1, 1), "head_obj.b": (1,),
        "head_box.w": (4, w4, 1, 1), "head_box.b": (4,),
    }


def build_localizer(cfg: LocalizerConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in localizer_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape).astype(np.float32)
    return params


def _loc_forward(p, x):
    h = eng.silu(eng.conv2d(x, p["conv1.w"], p["conv1.b"]))
    h = eng.avg_pool2(h)
    h = eng.silu(eng.conv2d(h, p["conv2.w"], p["conv2.b"]))
    h = eng.avg_pool2(h)
    h = eng.silu(eng.conv2d(h, p["conv3.w"], p["conv3.b"]))
    h = eng.avg_pool2(h)
    h = eng.silu(eng.conv2d(h, p["conv4.w"], p["conv4.b"]))
    obj = eng.conv2d(h, p["head_obj.w"], p["head_obj.b"])
    box = eng.conv2d(h, p["head_box.w"], p["head_box.b"])
    return obj, box


def _encode_targets(boxes: list[BBox], res: int):
    """Per-cell objectness and normalized box targets; a cell owns the box
    whose center falls in it (larger area wins collisions)."""
    s = res // LOC_STRIDE
    obj = np.zeros((1, s, s), dtype=np.float32)
    coords = np.zeros((4, s, s), dtype=np.float32)
    area = np.zeros((s, s), dtype=np.int64)
    for b in boxes:
        cx, cy = b.x + b.w / 2.0, b.y + b.h / 2.0
        gx = min(int(cx // LOC_STRIDE), s - 1)
        gy = min(int(cy // LOC_STRIDE), s - 1)
        if obj[0, gy, gx] > 0 and area[gy, gx] >= b.area:
            continue
        obj[0, gy, gx] = 1.0
        area[gy, gx] = b.area
        coords[0, gy, gx] = cx / LOC_STRIDE - gx
        coords[1, gy, gx] = cy / LOC_STRIDE - gy
        coords[2, gy, gx] = b.w / res
        coords[3, gy, gx] = b.h / res
    return obj, coords


def _loc_loss(p, images: np.ndarray, obj_t: np.ndarray, coord_t: np.ndarray):
    obj, box = _loc_forward(p, images)
    obj_loss = eng.mean(eng.bce_with_logits(obj, obj_t))
    pos = obj_t  # (N,1,S,S) broadcast over the 4 coords
    n_pos = float(obj_t.sum())
    box_err = eng.mul(eng.smooth_l1(eng.sigmoid(box), coord_t), pos)
    box_loss = eng.mul(eng.total(box_err), _BOX_LOSS_WEIGHT / max(1.0, 4.0 * n_pos))
    return eng.add(obj_loss, box_loss)


def predict(
    params: dict[str, np.ndarray], images: np.ndarray, score_floor: float = _SCORE_FLOOR
) -> list[list[Detection]]:
    """Decode grid cells into score-ranked, NMS-filtered detections."""
    obj, box = _loc_forward(params, images)
    scores = 1.0 / (1.0 + np.exp(-obj.value[:, 0]))
    coords = 1.0 / (1.0 + np.exp(-box.value))
    n, s, _ = scores.shape
    res = images.shape[-1]
    out: list[list[Detection]] = []
    for i in range(n):
        dets = []
        for gy in range(s):
            for gx in range(s):
                sc = float(scores[i, gy, gx])
                if sc < score_floor:
                    continue
                cx = (gx + coords[i, 0, gy, gx]) * LOC_STRIDE
                cy = (gy + coords[i, 1, gy, gx]) * LOC_STRIDE
                bw = max(1.0, coords[i, 2, gy, gx] * res)
                bh = max(1.0, coords[i, 3, gy, gx] * res)
                x = int(round(cx - bw / 2))
                y = int(round(cy - bh / 2))
                x = max(0, min(x, res - 1))
                y = max(0, min(y, res - 1))
                w = max(1, min(int(round(bw)), res - x))
                h = max(1, min(int(round(bh)), res - y))
                dets.append(Detection(BBox(x, y, w, h), sc))
        dets.sort(key=lambda d: -d.score)
        kept: list[Detection] = []
        for d in dets:
            if all(iou(d.box, k.box) < _NMS_IOU for k in kept):
                kept.append(d)
        out.append(kept)
    return out


def reference_localizer_train(
    samples: list[LabeledSample] | str | Path,
    pretrain: dict[str, np.ndarray] | None,
    budget: int,
    seed: int,
    cfg: LocalizerConfig | None = None,
    lr: float = 3e-3,
    batch_size: int = 16,
) -> dict[str, np.ndarray]:
    """Train the grid localizer on loaded samples or a manifest path; with
    budget 0 and a pretrained set, returns the pretrained parameters
    unchanged.  Deterministic per seed."""
    if isinstance(samples, (str, Path)):
        samples = load_samples(samples)
    if not samples:
        raise DataError("empty training set")
    if budget < 0:
        raise ParameterError("budget must be >= 0")
    res = samples[0].image.shape[-1]
    if res % LOC_STRIDE:
        raise ParameterError(f"image side {res} must be divisible by {LOC_STRIDE}")
    rng = np.random.default_rng(seed)
    if cfg is None:
        cfg = LocalizerConfig(in_channels=samples[0].image.shape[0])
    if pretrain is not None:
        params = {k: v.copy() for k, v in pretrain.items()}
    else:
        params = build_localizer(cfg, rng)
    if budget == 0:
        return params
    opt = optim.Adam(params)
    for step in range(budget):
        idx = rng.integers(0, len(samples), size=min(batch_size, len(samples)))
        ops = rng.integers(0, 8, size=len(idx))
        ims, objs, coords = [], [], []
        for i, op in zip(idx, ops):
            aug = spatial.dihedral_augment(samples[i], int(op))
            o, c = _encode_targets(aug.boxes, res)
            ims.append(aug.image)
            objs.append(o)
            coords.append(c)
        images = np.stack(ims)
        obj_t = np.stack(objs)
        coord_t = np.stack(coords)

        def closure(pv):
            return _loc_loss(pv, images, obj_t, coord_t)

        grads, _ = gradient(params, closure)
        opt.step(params, grads, optim.cosine_lr(lr, step, budget))
    return params


def load_samples(manifest_path: str | Path) -> list[LabeledSample]:
    entries = spatial.load_manifest(manifest_path)
    if not entries:
        raise DataError(f"manifest {manifest_path} is empty")
    return [spatial.load_sample(manifest_path, e) for e in entries]


def evaluate_map(
    params: dict[str, np.ndarray],
    samples: list[LabeledSample],
    iou_thr: float = 0.5,
    batch_size: int = 64,
) -> float:
    preds: dict[str, list[Detection]] = {}
    gts: dict[str, list[BBox]] = {}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.stack([s.image for s in chunk])
        for j, dets in enumerate(predict(params, images)):
            key = str(start + j)
            preds[key] = dets
            gts[key] = chunk[j].boxes
    return mean_average_precision(preds, gts, iou_thr)


# ---------------------------------------------------------------------------
# transfer grid


@dataclass
class GridBudgets:
    pretrain_steps: int = 600
    finetune_steps: int = 313  # fixed total gradient steps per fine-tune
    lr: float = 3e-3
    batch_size: int = 16


@dataclass
class GridResult:
    """Cells keyed by (subset_size, modality, pretrain_name_or_None, seed),
    each holding {benchmark_name: mAP}."""

    cells: dict[tuple[int, str, str | None, int], dict[str, float]] = field(
        default_factory=dict
    )

    def validate(self, sizes, seeds: int, pretrain_names) -> None:
        for size in sizes:
            for si in range(seeds):
                if (size, "A", None, si) not in self.cells:
                    raise ParameterError(f"missing grid cell A size={size} seed={si}")
                for name in pretrain_names:
                    if (size, "B", name, si) not in self.cells:
                        raise ParameterError(
                            f"missing grid cell B size={size} pretrain={name} seed={si}"
                        )
        for v in self.cells.values():
            for bench, m in v.items():
                if not (0.0 <= m <= 1.0):
                    raise ParameterError(f"mAP {m} for {bench} out of [0, 1]")

    def to_rows(self) -> list[dict]:
        rows = []
        for (size, modality, pretrain, seed), bench_map in sorted(
            self.cells.items(), key=lambda kv: (kv[0][0], kv[0][1], str(kv[0][2]), kv[0][3])
        ):
            rows.append({
                "map": dict(sorted(bench_map.items())),
                "modality": modality,
                "pretrain": pretrain,
                "seed": seed,
                "size": size,
            })
        return rows


def transfer_grid(
    real_manifest: str | Path,
    synthetic_manifests: list[str | Path],
    benchmark_manifests: list[str | Path],
    subset_sizes: list[int] = (10, 25, 50, 100, 250, 500, 1000),
    seeds: int = 3,
    budgets: GridBudgets | None = None,
    base_seed: int = 0,
    iou_thr: float = 0.5,
) -> GridResult:
    """For each (size, seed): modality A trains from scratch on a size-n real
    subset; modality B first trains on each synthetic set (cached per seed,
    since pretraining is size-independent), then fine-tunes on the subset.
    Every model is 0-shot evaluated on all benchmarks.
    """
    budgets = budgets or GridBudgets()
    real = load_samples(real_manifest)
    subset_sizes = sorted(set(int(s) for s in subset_sizes))
    if subset_sizes[0] < 1:
        raise ParameterError("subset sizes must be >= 1")
    if subset_sizes[-1] > len(real):
        raise ParameterError(
            f"subset size {subset_sizes[-1]} exceeds real manifest size {len(real)}"
        )
    if seeds < 1:
        raise ParameterError("need at least one seed")
    synth = {str(p): load_samples(p) for p in synthetic_manifests}
    benches = {str(p): load_samples(p) for p in benchmark_manifests}
    if not benches:
        raise ParameterError("at least one benchmark manifest is required")

    result = GridResult()
    for si in range(seeds):
        pretrained = {
            name: reference_localizer_train(
                smp, None, budgets.pretrain_steps,
                seed=int(np.random.default_rng([base_seed, 1, si]).integers(2**31)),
                lr=budgets.lr, batch_size=budgets.batch_size,
            )
            for name, smp in synth.items()
        }
        for size in subset_sizes:
            pick_rng = np.random.default_rng([base_seed, 2, si, size])
            subset_idx = pick_rng.choice(len(real), size=size, replace=False)
            subset = [real[i] for i in subset_idx]
            ft_seed = int(np.random.default_rng([base_seed, 3, si, size]).integers(2**31))

            params_a = reference_localizer_train(
                subset, None, budgets.finetune_steps, seed=ft_seed,
                lr=budgets.lr, batch_size=budgets.batch_size,
            )
            result.cells[(size, "A", None, si)] = {
                name: evaluate_map(params_a, smp, iou_thr) for name, smp in benches.items()
            }
            for name, pre in pretrained.items():
                params_b = reference_localizer_train(
                    subset, pre, budgets.finetune_steps, seed=ft_seed,
                    lr=budgets.lr, batch_size=budgets.batch_size,
                )
                result.cells[(size, "B", name, si)] = {
                    bn: evaluate_map(params_b, smp, iou_thr)
                    for bn, smp in benches.items()
                }
    result.validate(subset_sizes, seeds, list(synth))
    return result
