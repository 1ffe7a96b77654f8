"""Auto-context cascades: train a sequence of networks, each fed the previous posterior.

Step 0 sees a uniform posterior as its context channel. Step ``t`` sees the
posterior produced by step ``t - 1`` on the same image, scaled by the image's
mean intensity. After each step the posteriors of every training image are
recomputed, the mean per-voxel cross-entropy ``H_t`` is recorded, and the loop
stops once ``|H_t - H_{t-1}| < epsilon`` or after ``max_steps`` networks.

With ``warm_start`` (the default) every step after the first starts from the
previous network's hidden layers, a zeroed classifier and a unit context gain,
so its initial output equals the previous posterior and its cost starts at
``H_{t-1}``. If training nonetheless ends above that cost the step keeps the
warm-start parameters; the step index is listed in ``CascadeState.fallbacks``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import networks as nets
from .networks import (
    ModelParameters,
    NetworkSpec,
    Stage,
    TrainSchedule,
    UnetConfig,
    VoxelwiseConfig,
)
from .patches import assemble_context_channel, batch_patches, extract_slice_stack
from .sampling import DEFAULT_FRACTIONS, sample_training_voxels
from .volumes import BinaryMask, PosteriorVolume, Volume, load_volume, mean_intensity, normalize_intensity, save_volume

log = logging.getLogger(__name__)

ARCHITECTURES = ("voxelwise", "unet")


@dataclass
class TrainingCase:
    id: str
    volume: Volume
    mask: BinaryMask


@dataclass
class CascadeConfig:
    architecture: str = "voxelwise"
    epsilon: float = 1e-3
    max_steps: int = 3
    test_steps: int = 2
    warm_start: bool = True
    seed: int = 0
    voxelwise: VoxelwiseConfig = field(default_factory=VoxelwiseConfig)
    unet: UnetConfig = field(default_factory=UnetConfig)
    schedule: Optional[TrainSchedule] = None
    samples_per_image: int = 15000
    fractions: Tuple[float, float, float] = DEFAULT_FRACTIONS
    plane: str = "axial"
    normalize: bool = True

    def __post_init__(self):
        if isinstance(self.voxelwise, dict):
            self.voxelwise = VoxelwiseConfig(**self.voxelwise)
        if isinstance(self.unet, dict):
            self.unet = UnetConfig(**self.unet)
        if isinstance(self.schedule, dict):
            self.schedule = TrainSchedule.from_dict(self.schedule)
        self.fractions = tuple(self.fractions)
        self.validate()

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.test_steps < 1:
            raise ValueError("test_steps must be >= 1")

    def resolved_schedule(self) -> TrainSchedule:
        if self.schedule is not None:
            return self.schedule
        if self.architecture == "voxelwise":
            return TrainSchedule.voxelwise_paper()
        return TrainSchedule.unet_paper()

    def network_spec(self) -> NetworkSpec:
        if self.architecture == "voxelwise":
            return nets.build_voxelwise_spec(self.voxelwise, in_channels=2, passthrough=True)
        return nets.build_unet_spec(self.unet, in_channels=2, passthrough=True)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = self.resolved_schedule().to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CascadeConfig":
        d = dict(d)
        if isinstance(d.get("voxelwise"), dict):
            v = dict(d["voxelwise"])
            v["conv_kernels"] = tuple(tuple(k) for k in v["conv_kernels"]) if v.get("conv_kernels") else None
            d["voxelwise"] = VoxelwiseConfig(**v)
        return cls(**d)


@dataclass
class CascadeState:
    config: CascadeConfig
    models: List[ModelParameters] = field(default_factory=list)
    H: List[float] = field(default_factory=list)
    I: List[float] = field(default_factory=list)
    converged: bool = False
    stop_reason: Optional[str] = None
    fallbacks: List[int] = field(default_factory=list)
    wall_times: List[float] = field(default_factory=list)
    channel_norms: List[dict] = field(default_factory=list)
    case_ids: List[str] = field(default_factory=list)

    @property
    def t(self) -> int:
        """Index of the last trained step (-1 before any training)."""
        return len(self.models) - 1

    @property
    def spec(self) -> NetworkSpec:
        return self.models[0].spec

    def history(self) -> dict:
        return {
            "H": self.H,
            "I": self.I,
            "epsilon": self.config.epsilon,
            "converged": self.converged,
            "stop_reason": self.stop_reason,
            "steps": len(self.models),
            "fallbacks": self.fallbacks,
            "wall_times": self.wall_times,
            "first_layer_channel_norms": self.channel_norms,
            "cases": self.case_ids,
            "config": self.config.to_dict(),
        }


def cascade_converged(H_t: float, H_prev: float, eps: float) -> bool:
    if not eps > 0:
        raise ValueError("epsilon must be > 0")
    if not (np.isfinite(H_t) and np.isfinite(H_prev)):
        raise ValueError("costs must be finite")
    return abs(H_t - H_prev) < eps


def mean_cross_entropy(posteriors: Sequence[PosteriorVolume], masks: Sequence[BinaryMask]) -> float:
    """Cross-entropy summed over every voxel of every image, divided by the voxel count."""
    total, n = 0.0, 0
    for p, m in zip(posteriors, masks):
        total += nets.cross_entropy(p.data.reshape(-1, p.n_classes), m.data.reshape(-1))
        n += m.data.size
    return total / n


# ---------------------------------------------------------------------------
# Training sets
# ---------------------------------------------------------------------------


class VoxelTrainingSet:
    """Sampled voxels of every training image with their patches drawn on demand."""

    def __init__(self, images, contexts, priors, plans, spec: NetworkSpec, seed: int):
        cfg = spec.config
        self.keys = [(p, s) for p in cfg.planes for s in cfg.sizes]
        self.pad = max(cfg.sizes) // 2
        self.images = [np.pad(np.asarray(d, dtype=np.float32), self.pad) for d in images]
        self.contexts = [np.pad(np.asarray(c, dtype=np.float32), self.pad) for c in contexts]
        self.priors = priors
        rng = np.random.default_rng(seed)
        self.plans = []
        for plan in plans:
            order = rng.permutation(len(plan.voxels))
            self.plans.append((plan.voxels[order], plan.labels[order]))
        self.weights = None

    def _stage_indices(self, stage_index: int, stage: Stage):
        picks = []
        for j, (vox, _) in enumerate(self.plans):
            n = len(vox)
            per = n if stage.samples_per_image is None else min(stage.samples_per_image, n)
            start = (stage_index * per) % n if stage.samples_per_image is not None else 0
            rows = (start + np.arange(per)) % n
            picks.append(np.stack([np.full(per, j), rows], axis=1))
        return np.concatenate(picks)

    def batches(self, stage_index, stage, batch_size, rng):
        idx = self._stage_indices(stage_index, stage)
        idx = idx[rng.permutation(len(idx))]
        for i in range(0, len(idx), batch_size):
            yield self._gather(idx[i : i + batch_size])

    def _gather(self, idx):
        parts = {k: [] for k in self.keys}
        priors, labels, order = [], [], []
        for j in np.unique(idx[:, 0]):
            sel = np.nonzero(idx[:, 0] == j)[0]
            vox, lab = self.plans[j]
            centers = vox[idx[sel, 1]]
            for k, a in batch_patches(self.images[j], self.contexts[j], centers, self.keys, pad=self.pad).items():
                parts[k].append(a)
            priors.append(self.priors[j][tuple(centers.T)])
            labels.append(lab[idx[sel, 1]])
            order.append(sel)
        inv = np.argsort(np.concatenate(order))
        x = {k: torch.from_numpy(np.concatenate(v)[inv]) for k, v in parts.items()}
        prior = torch.from_numpy(nets.log_prior(np.concatenate(priors)[inv]).astype(np.float32))
        y = torch.from_numpy(np.concatenate(labels)[inv].astype(np.int64))
        return x, prior, y


class SliceTrainingSet:
    """Whole padded slices of every training image, with inverse-frequency class weights."""

    def __init__(self, images, contexts, priors, masks, plane: str, depth: int):
        xs, ps, ys = [], [], []
        counts = np.zeros(2)
        for d, c, p, m in zip(images, contexts, priors, masks):
            stack = extract_slice_stack(d, c, plane, depth)
            prior_stack = extract_slice_stack(p, None, plane, depth).slices[:, 0]
            label_stack = extract_slice_stack(m.data.astype(np.float32), None, plane, depth).slices[:, 0]
            xs.append(stack.slices)
            ps.append(np.moveaxis(nets.log_prior(prior_stack), -1, 1).astype(np.float32))
            ys.append(label_stack.astype(np.int64))
            counts += np.bincount(m.data.reshape(-1), minlength=2)[:2]
        self.x = np.concatenate(xs)
        self.prior = np.concatenate(ps)
        self.y = np.concatenate(ys)
        self.frequencies = counts / counts.sum()
        self.weights = nets.class_weights(self.frequencies)

    def __len__(self):
        return len(self.x)

    def batches(self, stage_index, stage, batch_size, rng):
        order = rng.permutation(len(self.x))
        for i in range(0, len(order), batch_size):
            sel = order[i : i + batch_size]
            yield torch.from_numpy(self.x[sel]), torch.from_numpy(self.prior[sel]), torch.from_numpy(self.y[sel])


# ---------------------------------------------------------------------------
# Prediction helpers
# ---------------------------------------------------------------------------


def _prepare(v: Volume, cfg: CascadeConfig) -> Volume:
    return normalize_intensity(v) if cfg.normalize else v


def predict_step(model, spec: NetworkSpec, work: Volume, post: PosteriorVolume, cfg: CascadeConfig) -> PosteriorVolume:
    """One cascade step on an already-normalised volume."""
    ctx = assemble_context_channel(post, mean_intensity(work))
    if spec.arch == "voxelwise":
        return nets.predict_voxelwise_volume(model, spec, work, ctx, mode="dense")
    return nets.predict_unet(model, spec, work, ctx, plane=cfg.plane)


def first_layer_channel_norms(params: ModelParameters) -> Dict[str, Tuple[float, float]]:
    """Frobenius norms of the intensity and context slices of each first convolution."""
    spec = params.spec
    if spec.in_channels != 2:
        raise ValueError("first layer has no context channel")
    if spec.arch == "voxelwise":
        names = {f"{p}/s{s}": f"pathways.{p}_{s}.conv1.weight" for p in spec.config.planes for s in spec.config.sizes}
    else:
        key = "down.0.0.weight" if spec.config.depth > 0 else "bottleneck.0.weight"
        names = {"unet": key}
    out = {}
    for label, key in names.items():
        w = np.asarray(params.arrays[key], dtype=np.float64)
        out[label] = (float(np.linalg.norm(w[:, 0])), float(np.linalg.norm(w[:, 1])))
    return out


# ---------------------------------------------------------------------------
# Algorithm
# ---------------------------------------------------------------------------


def _warm_model(spec: NetworkSpec, prev: ModelParameters):
    model = prev.to_model()
    nets.zero_classifier(model, gain=1.0)
    return model


def _train_step(t, spec, cfg, schedule, works, masks, posts, plans, prev):
    seed = cfg.seed + 1000 * t
    means = [mean_intensity(w) for w in works]
    contexts = [assemble_context_channel(p, mu).data for p, mu in zip(posts, means)]
    priors = [p.brain for p in posts]
    if spec.arch == "voxelwise":
        data = VoxelTrainingSet([w.data for w in works], contexts, priors, plans, spec, seed)
    else:
        data = SliceTrainingSet([w.data for w in works], contexts, priors, masks, cfg.plane, spec.config.depth)
    model = None
    if cfg.warm_start and prev is not None:
        model = _warm_model(spec, prev)
    else:
        model = nets.instantiate(spec, seed)
    init = nets.ModelParameters.from_model(spec, model) if cfg.warm_start and prev is not None else None
    params = nets.train(spec, None, data, schedule, seed=seed, model=model)
    return params, init


def run_training_cascade(
    cases: Sequence[TrainingCase],
    cfg: CascadeConfig,
    out_dir=None,
    resume: bool = True,
    sentinel_posteriors: Optional[Sequence[PosteriorVolume]] = None,
) -> CascadeState:
    """Train up to ``cfg.max_steps`` networks following the auto-context loop.

    ``out_dir`` enables the on-disk layout (``step-<t>/model.*``,
    ``step-<t>/posteriors/<id>.nii.gz``, ``history.json``); completed steps
    found there are reused when ``resume`` is set. ``sentinel_posteriors``
    replaces the step-0 uniform posterior (used to audit the data flow).
    """
    if not cases:
        raise ValueError("need at least one training pair")
    cfg.validate()
    spec = cfg.network_spec()
    schedule = cfg.resolved_schedule()
    works = [_prepare(c.volume, cfg) for c in cases]
    masks = [c.mask for c in cases]
    for c in cases:
        if c.volume.dims != c.mask.dims:
            raise ValueError(f"case {c.id}: volume dims {c.volume.dims} != mask dims {c.mask.dims}")
    plans = []
    if spec.arch == "voxelwise":
        plans = [
            sample_training_voxels(m, cfg.samples_per_image, cfg.fractions, seed=cfg.seed + j)
            for j, m in enumerate(masks)
        ]
    if sentinel_posteriors is not None:
        posts = list(sentinel_posteriors)
    else:
        posts = [PosteriorVolume.uniform(w.dims, spec.n_classes, w.spacing) for w in works]

    state = CascadeState(cfg, case_ids=[c.id for c in cases])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume:
            posts = _resume(state, out, cases, posts)
        _write_config(out, cfg)

    prev = state.models[-1] if state.models else None
    for t in range(len(state.models), cfg.max_steps):
        if state.converged:
            break
        tic = time.perf_counter()
        try:
            params, init = _train_step(t, spec, cfg, schedule, works, masks, posts, plans, prev)
        except nets.TrainingDivergedError:
            state.stop_reason = "diverged"
            if out is not None:
                _write_history(out, state)
            raise
        model = params.to_model()
        new_posts = [predict_step(model, spec, w, p, cfg) for w, p in zip(works, posts)]
        H_t = mean_cross_entropy(new_posts, masks)
        if init is not None and H_t > state.H[-1]:
            log.info("step %d: trained cost %.6f above previous %.6f; keeping warm start", t, H_t, state.H[-1])
            params = init
            params.metadata["fallback_from_cost"] = H_t
            model = params.to_model()
            new_posts = [predict_step(model, spec, w, p, cfg) for w, p in zip(works, posts)]
            H_t = mean_cross_entropy(new_posts, masks)
            state.fallbacks.append(t)
        state.models.append(params)
        state.H.append(H_t)
        state.wall_times.append(time.perf_counter() - tic)
        state.channel_norms.append(first_layer_channel_norms(params))
        posts, prev = new_posts, params
        log.info("step %d: H = %.6f (%.1fs)", t, H_t, state.wall_times[-1])
        if len(state.H) > 1:
            state.I.append(abs(state.H[-1] - state.H[-2]))
            if cascade_converged(state.H[-1], state.H[-2], cfg.epsilon):
                state.converged = True
                state.stop_reason = "epsilon"
        if out is not None:
            _write_step(out, t, params, cases, new_posts)
            _write_history(out, state)
    if not state.converged:
        state.stop_reason = "max_steps"
    if out is not None:
        _write_history(out, state)
    state._train_posteriors = posts  # last training-set posteriors, handy for reports
    return state


def run_inference_cascade(state: CascadeState, v: Volume, test_steps: Optional[int] = None) -> PosteriorVolume:
    """Apply the first ``test_steps`` networks in sequence; returns the last posterior."""
    return inference_trajectory(state, v, test_steps)[-1]


def inference_trajectory(state: CascadeState, v: Volume, test_steps: Optional[int] = None) -> List[PosteriorVolume]:
    """Posteriors after each of the first ``test_steps`` networks."""
    n = state.config.test_steps if test_steps is None else test_steps
    if n < 1 or n > len(state.models):
        raise ValueError(f"test_steps={n} but the cascade has {len(state.models)} trained step(s)")
    work = _prepare(v, state.config)
    post = PosteriorVolume.uniform(work.dims, state.models[0].spec.n_classes, work.spacing)
    out = []
    for params in state.models[:n]:
        post = predict_step(params.to_model(), params.spec, work, post, state.config)
        out.append(post)
    return out


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _write_config(out: Path, cfg: CascadeConfig) -> None:
    (out / "cascade_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, default=nets._json_default))


def _write_step(out: Path, t: int, params: ModelParameters, cases, posts) -> None:
    step_dir = out / f"step-{t}"
    nets.save_model(params, step_dir, "model")
    post_dir = step_dir / "posteriors"
    post_dir.mkdir(parents=True, exist_ok=True)
    for c, p in zip(cases, posts):
        save_volume(Volume(p.brain.astype(np.float32), p.spacing), post_dir / f"{c.id}.nii.gz")


def _write_history(out: Path, state: CascadeState) -> None:
    (out / "history.json").write_text(json.dumps(state.history(), indent=2, default=nets._json_default))


def _resume(state: CascadeState, out: Path, cases, posts):
    hist_path = out / "history.json"
    if not hist_path.exists():
        return posts
    hist = json.loads(hist_path.read_text())
    if hist.get("cases") != state.case_ids:
        raise ValueError(f"{out} holds a cascade for different cases; refusing to resume")
    for t in range(hist["steps"]):
        step_dir = out / f"step-{t}"
        try:
            params = nets.load_model(step_dir, "model")
            loaded = [load_volume(step_dir / "posteriors" / f"{c.id}.nii.gz")[0] for c in cases]
        except (OSError, ValueError):
            break
        state.models.append(params)
        state.H.append(hist["H"][t])
        if t > 0:
            state.I.append(hist["I"][t - 1])
        posts = [PosteriorVolume.from_brain(v.data, v.spacing) for v in loaded]
    state.fallbacks = [t for t in hist.get("fallbacks", []) if t < len(state.models)]
    state.wall_times = hist.get("wall_times", [])[: len(state.models)]
    state.channel_norms = hist.get("first_layer_channel_norms", [])[: len(state.models)]
    if hist.get("stop_reason") == "epsilon" and len(state.models) == hist["steps"]:
        state.converged = True
        state.stop_reason = "epsilon"
    return posts


def load_cascade(out_dir) -> CascadeState:
    """Read a cascade written by :func:`run_training_cascade`."""
    out = Path(out_dir)
    hist = json.loads((out / "history.json").read_text())
    cfg = CascadeConfig.from_dict(hist["config"])
    models = [nets.load_model(out / f"step-{t}", "model") for t in range(hist["steps"])]
    return CascadeState(
        cfg,
        models=models,
        H=list(hist["H"]),
        I=list(hist["I"]),
        converged=bool(hist["converged"]),
        stop_reason=hist.get("stop_reason"),
        fallbacks=list(hist.get("fallbacks", [])),
        wall_times=list(hist.get("wall_times", [])),
        channel_norms=list(hist.get("first_layer_channel_norms", [])),
        case_ids=list(hist.get("cases", [])),
    )
