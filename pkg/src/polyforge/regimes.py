"""Training-regime orchestration: plan construction for the five regimes,
the training loop (augment -> encode -> mask channel -> loss -> Adam -> EMA),
jointly annotated dataset generation, and checkpointing.

All randomness in a run flows from the plan seed through a single Generator,
so identical invocations produce bit-identical checkpoints and outputs.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffusion, optim, schedule, spatial
from .denoiser import DenoiserConfig, DenoiserParams, apply, build_denoiser, gradient
from .errors import DataError, NumericError, ParameterError, ShapeError

REGIME_KINDS = ("vae_upscale", "finetune", "alternate_batch", "alternate_epoch", "mixed")

# CLI spellings
_REGIME_ALIASES = {
    "vae-upscale": "vae_upscale",
    "finetune": "finetune",
    "alt-batch": "alternate_batch",
    "alt-epoch": "alternate_epoch",
    "mixed": "mixed",
}

EMA_WARMUP_STEPS = 1000


def parse_regime(name: str) -> str:
    kind = _REGIME_ALIASES.get(name, name)
    if kind not in REGIME_KINDS:
        raise ParameterError(f"unknown regime {name!r}; choose from {sorted(_REGIME_ALIASES)}")
    return kind


@dataclass(frozen=True)
class PhaseGroup:
    """One dataset group inside a phase: manifests trained at one resolution."""

    label: str
    manifests: tuple[str, ...]
    resolution: int


@dataclass
class TrainPhase:
    name: str
    groups: list[PhaseGroup]
    steps: int
    lr_peak: float
    interleave: str | None = None  # None | "batch" | "epoch"

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"phase {self.name!r} needs a positive step budget")
        if self.interleave not in (None, "batch", "epoch"):
            raise ParameterError(f"bad interleave rule {self.interleave!r}")
        if self.interleave is not None and len(self.groups) < 2:
            raise ParameterError("interleaved phases need at least two groups")


@dataclass
class GeneratePhase:
    name: str
    count: int
    resolution: int
    sampler_steps: int = 300


@dataclass
class PlanConfig:
    """Desk-scale knobs for plan construction."""

    low_res: int = 32
    target_res: int = 40
    steps: int = 2000
    lr: float = 1e-4
    finetune_lr_factor: float = 0.1
    generation_count: int = 500
    sampler_steps: int = 300
    batch_size: int = 8
    ema_decay: float = 0.9999
    timesteps: int = 1000
    zero_terminal: bool = True
    prediction_kind: str = "epsilon"
    codec: spatial.LatentCodec = field(default_factory=spatial.LatentCodec)
    denoiser: DenoiserConfig | None = None

    def resolved_denoiser(self, image_channels: int) -> DenoiserConfig:
        if self.denoiser is not None:
            return self.denoiser
        return DenoiserConfig(in_channels=image_channels + 1, base_width=16,
                              channel_multipliers=(1, 2, 2), layers_per_block=2,
                              time_embed_dim=64)


@dataclass
class TrainingPlan:
    regime: str
    phases: list
    seed: int
    config: PlanConfig

    def fingerprint(self) -> dict:
        phases = []
        for ph in self.phases:
            if isinstance(ph, TrainPhase):
                phases.append({
                    "groups": [
                        {"label": g.label, "manifests": list(g.manifests),
                         "resolution": g.resolution}
                        for g in ph.groups
                    ],
                    "interleave": ph.interleave,
                    "kind": "train",
                    "lr_peak": ph.lr_peak,
                    "name": ph.name,
                    "steps": ph.steps,
                })
            else:
                phases.append({
                    "count": ph.count, "kind": "generate", "name": ph.name,
                    "resolution": ph.resolution, "sampler_steps": ph.sampler_steps,
                })
        return {"phases": phases, "regime": self.regime, "seed": self.seed}


def plan_regime(
    kind: str,
    primary_set: str | Path,
    secondary_sets: list[str | Path] | None,
    cfg: PlanConfig,
    seed: int = 0,
) -> TrainingPlan:
    """Build the ordered phase list realizing one of the five regimes."""
    kind = parse_regime(kind)
    for res in (cfg.low_res, cfg.target_res):
        if res % 8:
            raise ParameterError(f"resolution {res} must be divisible by 8")
        if res % (8 * cfg.codec.factor):
            raise ParameterError(
                f"resolution {res} must be divisible by 8 x codec factor "
                f"{cfg.codec.factor} (latent side must survive 3 downsamplings)"
            )
    primary = str(primary_set)
    secondary = tuple(str(s) for s in (secondary_sets or []))
    needs_secondary = kind != "vae_upscale"
    if needs_secondary and not secondary:
        raise ParameterError(f"regime {kind!r} requires at least one secondary dataset")

    grp_primary_low = PhaseGroup("primary", (primary,), cfg.low_res)
    grp_secondary_tgt = PhaseGroup("secondary", secondary, cfg.target_res)
    phases: list
    if kind == "vae_upscale":
        phases = [TrainPhase(
            "all-low", [PhaseGroup("all", (primary,) + secondary, cfg.low_res)],
            cfg.steps, cfg.lr,
        )]
    elif kind == "finetune":
        phases = [
            TrainPhase("primary", [grp_primary_low], cfg.steps, cfg.lr),
            TrainPhase("finetune-secondary", [grp_secondary_tgt], cfg.steps,
                       cfg.lr * cfg.finetune_lr_factor),
        ]
    elif kind == "alternate_batch":
        phases = [TrainPhase("alternate-batch", [grp_primary_low, grp_secondary_tgt],
                             cfg.steps, cfg.lr, interleave="batch")]
    elif kind == "alternate_epoch":
        phases = [TrainPhase("alternate-epoch", [grp_primary_low, grp_secondary_tgt],
                             cfg.steps, cfg.lr, interleave="epoch")]
    else:  # mixed
        phases = [
            TrainPhase("primary", [grp_primary_low], cfg.steps, cfg.lr),
            GeneratePhase("generate", cfg.generation_count, cfg.target_res,
                          cfg.sampler_steps),
            TrainPhase("mixed-secondary", [
                PhaseGroup("generated+secondary", ("<generated>",) + secondary,
                           cfg.target_res)
            ], cfg.steps, cfg.lr),
        ]
    return TrainingPlan(regime=kind, phases=phases, seed=seed, config=cfg)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: DenoiserParams
    ema: diffusion.EmaState
    noise_schedule: schedule.NoiseSchedule
    plan_fingerprint: dict
    step: int
    codec: spatial.LatentCodec
    train_resolution: int
    prediction_kind: str = "epsilon"


_CKPT_MAGIC = b"PFCK1\n"


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Single-file format: magic, u32 header length, JSON header, raw
    little-endian tensors at the recorded offsets."""
    tensors: dict[str, tuple[np.ndarray, str]] = {}
    for k, v in sorted(ckpt.params.tensors.items()):
        tensors[f"param.{k}"] = (v, "<f4")
    for k, v in sorted(ckpt.ema.shadow.items()):
        tensors[f"ema.{k}"] = (v, "<f4")
    tensors["schedule.beta"] = (ckpt.noise_schedule.beta, "<f8")
    directory = {}
    offset = 0
    blobs = []
    for name, (arr, dtype) in tensors.items():
        raw = np.ascontiguousarray(arr).astype(dtype).tobytes()
        directory[name] = {"dtype": dtype, "offset": offset, "shape": list(arr.shape)}
        blobs.append(raw)
        offset += len(raw)
    header = {
        "codec": {"factor": ckpt.codec.factor, "kind": ckpt.codec.kind},
        "config": ckpt.params.config.to_dict(),
        "ema_decay": ckpt.ema.decay,
        "plan": ckpt.plan_fingerprint,
        "prediction_kind": ckpt.prediction_kind,
        "schedule": schedule.schedule_descriptor(ckpt.noise_schedule),
        "step": ckpt.step,
        "tensors": directory,
        "train_resolution": ckpt.train_resolution,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise DataError(f"{path}: not a polyforge checkpoint")
    (hlen,) = struct.unpack("<I", raw[6:10])
    header = json.loads(raw[10 : 10 + hlen].decode("utf-8"))
    body = raw[10 + hlen :]
    cfg = DenoiserConfig.from_dict(header["config"])

    def read(name: str) -> np.ndarray:
        meta = header["tensors"][name]
        dt = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        start = meta["offset"]
        arr = np.frombuffer(body, dtype=dt, count=count, offset=start)
        return arr.reshape(meta["shape"]).astype(dt.newbyteorder("="))

    params = {}
    ema = {}
    for name in header["tensors"]:
        if name.startswith("param."):
            params[name[len("param."):]] = read(name)
        elif name.startswith("ema."):
            ema[name[len("ema."):]] = read(name)
    sched = schedule.schedule_from_bytes(
        header["schedule"], read("schedule.beta").astype("<f8").tobytes()
    )
    return Checkpoint(
        params=DenoiserParams(cfg, params),
        ema=diffusion.EmaState(ema, header["ema_decay"]),
        noise_schedule=sched,
        plan_fingerprint=header["plan"],
        step=header["step"],
        codec=spatial.LatentCodec(header["codec"]["kind"], header["codec"]["factor"]),
        train_resolution=header["train_resolution"],
        prediction_kind=header.get("prediction_kind", "epsilon"),
    )


# ---------------------------------------------------------------------------
# training


class _GroupData:
    """Images and boxes of one phase group, prepared at its resolution."""

    def __init__(self, group: PhaseGroup, manifests: dict[str, Path]):
        self.label = group.label
        self.resolution = group.resolution
        self.samples: list[spatial.LabeledSample] = []
        for name in group.manifests:
            mpath = manifests.get(name, Path(name))
            entries = spatial.load_manifest(mpath)
            if not entries:
                raise DataError(f"manifest {mpath} is empty")
            for e in entries:
                smp = spatial.load_sample(mpath, e)
                if smp.image.shape[1:] != (group.resolution, group.resolution):
                    smp = spatial.center_crop_resize(smp.image, smp.boxes, group.resolution)
                self.samples.append(smp)

    def __len__(self) -> int:
        return len(self.samples)


def _encode_batch(
    samples: list[spatial.LabeledSample],
    ops: np.ndarray,
    codec: spatial.LatentCodec,
) -> np.ndarray:
    """Augment jointly, encode images, and append the downscaled mask channel."""
    out = []
    for smp, op in zip(samples, ops):
        aug = spatial.dihedral_augment(smp, int(op))
        latent = spatial.codec_encode(codec, aug.image)
        lmask = spatial.downscale_mask(aug.mask, codec.factor)
        out.append(np.concatenate([latent, lmask], axis=0))
    return np.stack(out).astype(np.float32)


@dataclass
class StepRecord:
    phase: str
    step: int
    group: str
    indices: list[int]
    ops: list[int]
    lr: float
    loss: float


def _ema_with_warmup(ema: diffusion.EmaState, params: dict, decay: float,
                     step: int) -> diffusion.EmaState:
    eff = decay * min(1.0, step / EMA_WARMUP_STEPS)
    return diffusion.ema_update(diffusion.EmaState(ema.shadow, eff), params)


def run_training(
    plan: TrainingPlan,
    datasets: dict[str, str | Path] | None = None,
    checkpoint_sink: str | Path | None = None,
    checkpoint_every: int = 0,
    work_dir: str | Path | None = None,
    log: list[StepRecord] | None = None,
) -> Checkpoint:
    """Execute the plan's phases in order and return the final checkpoint.

    The plan's group names are manifest paths; `datasets` optionally remaps
    them.  A mixed regime's generated dataset is produced into `work_dir` and
    wired in automatically.  `log`, when given, collects one StepRecord per
    training step (the phase log).
    """
    cfg = plan.config
    manifests = {str(k): Path(v) for k, v in (datasets or {}).items()}
    rng = np.random.default_rng(plan.seed)

    first_group = next(
        g for ph in plan.phases if isinstance(ph, TrainPhase) for g in ph.groups
    )
    first_manifest = manifests.get(first_group.manifests[0], Path(first_group.manifests[0]))
    probe_entries = spatial.load_manifest(first_manifest)
    probe = spatial.load_sample(first_manifest, probe_entries[0])
    image_channels = probe.image.shape[0]

    dcfg = cfg.resolved_denoiser(image_channels)
    if dcfg.in_channels != image_channels + 1:
        raise ParameterError(
            f"denoiser expects {dcfg.in_channels} channels but data has "
            f"{image_channels} image channels + 1 mask channel"
        )
    params = build_denoiser(dcfg, rng)
    ema = diffusion.ema_init(params.tensors, cfg.ema_decay)
    sched = schedule.make_linear_schedule(cfg.timesteps)
    if cfg.zero_terminal:
        clamp = schedule.TERMINAL_CLAMP if cfg.prediction_kind == "epsilon" else 0.0
        sched = schedule.rescale_zero_terminal_snr(sched, clamp=clamp)
    opt = optim.Adam(params.tensors)
    fingerprint = plan.fingerprint()
    global_step = 0

    def snapshot() -> Checkpoint:
        return Checkpoint(
            params=params.copy(),
            ema=diffusion.EmaState({k: v.copy() for k, v in ema.shadow.items()},
                                   cfg.ema_decay),
            noise_schedule=sched,
            plan_fingerprint=fingerprint,
            step=global_step,
            codec=cfg.codec,
            train_resolution=cfg.low_res,
            prediction_kind=cfg.prediction_kind,
        )

    for phase in plan.phases:
        if isinstance(phase, GeneratePhase):
            if work_dir is None:
                raise ParameterError("mixed regime needs work_dir for the generated phase")
            gen_dir = Path(work_dir) / "generated"
            cond = ResampleMasks(first_manifest)
            gen_manifest = generate_dataset(
                snapshot(), phase.count, phase.resolution, cond,
                sampler_steps=phase.sampler_steps,
                rng=np.random.default_rng(rng.integers(2**63)),
                out_dir=gen_dir,
            )
            manifests["<generated>"] = gen_manifest
            continue

        groups = [_GroupData(g, manifests) for g in phase.groups]
        epoch_len = None
        perms: list[np.ndarray] = [np.empty(0, dtype=np.int64) for _ in groups]
        if phase.interleave == "epoch":
            smallest = min(len(g) for g in groups)
            epoch_len = max(1, math.ceil(smallest / cfg.batch_size))

        for step in range(phase.steps):
            if phase.interleave == "batch":
                gi = step % len(groups)
            elif phase.interleave == "epoch":
                gi = (step // epoch_len) % len(groups)
            else:
                gi = 0
            gd = groups[gi]
            if phase.interleave == "epoch":
                # fresh subsampled pass per epoch, sized to the smallest group
                pos = (step // (epoch_len * len(groups)), step % epoch_len)
                if perms[gi].size == 0 or pos[1] == 0:
                    want = epoch_len * cfg.batch_size
                    perm = rng.permutation(len(gd))
                    while perm.size < want:
                        perm = np.concatenate([perm, rng.permutation(len(gd))])
                    perms[gi] = perm[:want]
                start = pos[1] * cfg.batch_size
                idx = perms[gi][start : start + cfg.batch_size]
            else:
                idx = rng.integers(0, len(gd), size=cfg.batch_size)
            ops = rng.integers(0, 8, size=len(idx))
            batch = _encode_batch([gd.samples[i] for i in idx], ops, cfg.codec)

            def closure(pv):
                return diffusion.training_loss(
                    lambda x, t: apply(pv, dcfg, x, t), sched, batch, rng,
                    kind=cfg.prediction_kind,
                )

            try:
                grads, loss = gradient(params, closure)
            except NumericError as e:
                raise NumericError(
                    f"training aborted at phase {phase.name!r} step {step}: {e}"
                ) from e
            lr = optim.cosine_lr(phase.lr_peak, step, phase.steps)
            opt.step(params.tensors, grads, lr)
            ema = _ema_with_warmup(ema, params.tensors, cfg.ema_decay, global_step + 1)
            if log is not None:
                log.append(StepRecord(phase.name, step, gd.label,
                                      [int(i) for i in idx], [int(o) for o in ops],
                                      lr, loss))
            global_step += 1
            if checkpoint_sink and checkpoint_every and global_step % checkpoint_every == 0:
                save_checkpoint(checkpoint_sink, snapshot())

    final = snapshot()
    if checkpoint_sink:
        save_checkpoint(checkpoint_sink, final)
    return final


# ---------------------------------------------------------------------------
# conditioning sources for generation


class NoCond:
    """Unconditional sampling; the model generates the mask channel freely."""

    def draw(self, rng: np.random.Generator, res: int) -> list[spatial.BBox] | None:
        return None


class RandomBoxes:
    """Random axis-aligned boxes with a configurable size distribution."""

    def __init__(self, count: tuple[int, int] = (1, 1),
                 frac: tuple[float, float] = (0.25, 0.5)):
        if not (1 <= count[0] <= count[1]):
            raise ParameterError(f"bad box count range {count}")
        if not (0 < frac[0] <= frac[1] <= 1):
            raise ParameterError(f"bad box size fraction range {frac}")
        self.count = count
        self.frac = frac

    def draw(self, rng: np.random.Generator, res: int) -> list[spatial.BBox]:
        k = int(rng.integers(self.count[0], self.count[1] + 1))
        boxes = []
        for _ in range(k):
            w = max(1, int(round(rng.uniform(*self.frac) * res)))
            h = max(1, int(round(rng.uniform(*self.frac) * res)))
            x = int(rng.integers(0, res - w + 1))
            y = int(rng.integers(0, res - h + 1))
            boxes.append(spatial.BBox(x, y, w, h))
        return boxes


class ResampleMasks:
    """Masks resampled from a manifest's boxes with a random dihedral op,
    rescaled to the generation resolution."""

    def __init__(self, manifest_path: str | Path, dihedral: bool = True):
        self.entries = [e for e in spatial.load_manifest(manifest_path) if e.boxes]
        if not self.entries:
            raise DataError(f"manifest {manifest_path} has no boxed entries to resample")
        self.dihedral = dihedral

    def draw(self, rng: np.random.Generator, res: int) -> list[spatial.BBox]:
        e = self.entries[int(rng.integers(len(self.entries)))]
        side = min(e.width, e.height)
        scale = res / side
        boxes = []
        for b in e.boxes:
            x0, y0 = b.x * scale, b.y * scale
            x1, y1 = (b.x + b.w) * scale, (b.y + b.h) * scale
            xi, yi = int(round(max(0.0, x0))), int(round(max(0.0, y0)))
            wi = min(res, int(round(x1))) - xi
            hi = min(res, int(round(y1))) - yi
            if wi >= 1 and hi >= 1:
                boxes.append(spatial.BBox(xi, yi, wi, hi))
        if self.dihedral and boxes:
            op = int(rng.integers(8))
            for p in spatial._DIHEDRAL_OPS[op]:
                boxes = [spatial._prim_box(p, b, res) for b in boxes]
        return boxes


def parse_cond_source(spec_str: str):
    if spec_str == "none":
        return NoCond()
    if spec_str == "random":
        return RandomBoxes()
    if spec_str.startswith("resample:"):
        return ResampleMasks(spec_str.split(":", 1)[1])
    raise ParameterError(
        f"cannot parse conditioning source {spec_str!r} (none | random | resample:MANIFEST)"
    )


# ---------------------------------------------------------------------------
# generation


def generate_dataset(
    ckpt: Checkpoint,
    n: int,
    resolution: int,
    cond_source,
    sampler_steps: int = 300,
    rng: np.random.Generator | None = None,
    out_dir: str | Path | None = None,
    batch: int = 25,
) -> Path:
    """Sample n jointly annotated images with the EMA parameters and write
    PNGs plus a manifest under out_dir; returns the manifest path.

    Conditioning masks are drawn up front from `cond_source`, chains run in
    micro-batches with per-sample spawned generators, so results are
    independent of the batch size.
    """
    if rng is None or out_dir is None:
        raise ParameterError("generate_dataset needs rng and out_dir")
    if n < 1:
        raise ParameterError("n must be >= 1")
    f = ckpt.codec.factor
    if resolution % (8 * f):
        raise ShapeError(
            f"resolution {resolution} must be divisible by 8 x codec factor {f}"
        )
    latent_res = resolution // f
    cfg = ckpt.params.config
    image_channels = cfg.in_channels - 1
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    cond_source = cond_source if cond_source is not None else NoCond()
    cond_boxes: list[list[spatial.BBox] | None] = [
        cond_source.draw(rng, resolution) for _ in range(n)
    ]
    cond_latents = []
    for boxes in cond_boxes:
        if boxes is None:
            cond_latents.append(None)
        else:
            m = spatial.boxes_to_mask(boxes, resolution, resolution)
            cond_latents.append(spatial.downscale_mask(m, f))
    sub = schedule.make_subsequence(ckpt.noise_schedule, sampler_steps)

    def denoise_fn(x, t):
        return apply(ckpt.ema.shadow, cfg, x, t).value

    entries = []
    width = len(str(n - 1))
    done = 0
    while done < n:
        take = min(batch, n - done)
        conds = cond_latents[done : done + take]
        # a mixed batch of conditioned/unconditioned samples is split to keep
        # the per-sample rng stream identical either way
        runs: list[tuple[int, int]] = []
        start = 0
        for i in range(1, take + 1):
            if i == take or (conds[i] is None) != (conds[start] is None):
                runs.append((start, i))
                start = i
        for a, b in runs:
            sl = slice(done + a, done + b)
            cm = None
            if cond_latents[sl.start] is not None:
                cm = np.stack(cond_latents[sl])
            out = diffusion.ddpm_sample_batch(
                denoise_fn, ckpt.noise_schedule, sub, b - a, cfg.in_channels,
                (latent_res, latent_res), cond_mask=cm, rng=rng,
                kind=ckpt.prediction_kind,
            )
            for j, sample in enumerate(out):
                i_global = sl.start + j
                img_latent, mask_latent = sample[:image_channels], sample[image_channels]
                img = spatial.codec_decode(ckpt.codec, img_latent)
                img = np.clip(img, -1.0, 1.0)
                boxes_lat = spatial.extract_boxes(mask_latent)
                boxes = [
                    spatial.BBox(bb.x * f, bb.y * f, bb.w * f, bb.h * f)
                    for bb in boxes_lat
                ]
                name = f"gen_{i_global:0{width}d}.png"
                spatial.save_image(out_dir / name, img)
                entries.append(spatial.ManifestEntry(
                    image_path=name, width=resolution, height=resolution, boxes=boxes,
                ))
        done += take

    manifest = out_dir / "manifest.json"
    spatial.save_manifest(manifest, entries)
    return manifest
