"""Architectures, losses, training and prediction for the two segmentation networks.

Two networks are described declaratively by a :class:`NetworkSpec` (a flat
list of :class:`LayerSpec`) and instantiated as torch modules:

* the tri-planar multi-scale voxelwise network: for each plane and patch size
  a pathway ``conv1 -> ReLU -> BN -> conv2 -> ReLU -> conv3 -> ReLU -> fc``
  where ``fc`` is a valid convolution spanning what is left of the patch, a
  per-plane ``1x1`` merge and a cross-plane ``1x1`` classifier;
* a U-net with padded ``3x3`` convolutions, ``2x2`` max pooling, nearest
  neighbour ``2x2`` upsampling and skip concatenations.

When a network takes the context channel as a second input it also carries a
per-class gain ``g`` that adds ``g * log p_prev`` to the logits. With the
classifier zeroed and ``g = 1`` the network reproduces the previous posterior
exactly, which is what cascade warm starts rely on.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .patches import PLANES, batch_patches, from_slices, to_slices, extract_slice_stack
from .volumes import PosteriorVolume

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
INPUT_SCALE = 1.0 / 255.0

PAPER_CONV_KERNELS = {15: (5, 3, 3), 25: (5, 3, 3), 51: (7, 5, 3)}


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


# ---------------------------------------------------------------------------
# Declarative specs
# ---------------------------------------------------------------------------

LAYER_KINDS = ("conv2d", "relu", "batchnorm", "maxpool", "upsample", "concat", "softmax", "linear-map")


@dataclass
class LayerSpec:
    name: str
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: Tuple[int, int] = (1, 1)
    stride: int = 1
    padding: str = "valid"
    inputs: Tuple[str, ...] = ()
    spatial_in: Optional[Tuple[int, int]] = None
    spatial_out: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.kernel = tuple(int(k) for k in self.kernel)
        if min(self.kernel) < 1 or self.stride < 1:
            raise ValueError(f"{self.name}: kernel and stride must be positive")
        if self.padding not in ("valid", "same"):
            raise ValueError(f"{self.name}: padding must be 'valid' or 'same'")
        self.inputs = tuple(self.inputs)

    @property
    def n_params(self) -> int:
        if self.kind == "conv2d":
            kh, kw = self.kernel
            return kh * kw * self.in_channels * self.out_channels + self.out_channels
        if self.kind == "batchnorm":
            return 2 * self.out_channels
        if self.kind == "linear-map":
            return self.out_channels
        return 0


@dataclass
class VoxelwiseConfig:
    """Tri-planar multi-scale voxelwise network.

    ``conv_kernels`` holds one ``(k1, k2, k3)`` triple per patch size; when
    omitted the published table is used for sizes 15/25/51 and a generic
    ``(5, 3, 3)`` / ``(3, 3, 3)`` rule otherwise.
    """

    sizes: Tuple[int, ...] = (15, 25, 51)
    planes: Tuple[str, ...] = PLANES
    conv_kernels: Optional[Tuple[Tuple[int, int, int], ...]] = None
    conv_features: Tuple[int, int, int] = (24, 32, 48)
    fc_features: int = 256
    plane_features: int = 64
    n_classes: int = 2

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.planes = tuple(self.planes)
        if self.conv_kernels is None:
            self.conv_kernels = tuple(PAPER_CONV_KERNELS.get(s, (5, 3, 3) if s >= 15 else (3, 3, 3)) for s in self.sizes)
        self.conv_kernels = tuple(tuple(int(k) for k in ks) for ks in self.conv_kernels)
        self.conv_features = tuple(int(f) for f in self.conv_features)
        self.validate()

    def validate(self) -> None:
        if not self.sizes or not self.planes:
            raise ValueError("need at least one patch size and one plane")
        if len(self.conv_kernels) != len(self.sizes):
            raise ValueError("conv_kernels needs one (k1, k2, k3) triple per patch size")
        for p in self.planes:
            if p not in PLANES:
                raise ValueError(f"unknown plane {p!r}")
        for s, ks in zip(self.sizes, self.conv_kernels):
            if s % 2 == 0 or s < 3:
                raise ValueError(f"patch size {s} must be odd and >= 3")
            if len(ks) != 3 or any(k < 1 or k % 2 == 0 for k in ks):
                raise ValueError(f"kernels {ks} for size {s} must be three odd positive ints")
            if self.chain(s)[-2] < 1:
                raise ValueError(f"kernels {ks} consume all of the {s}x{s} patch")

    def chain(self, size: int) -> List[int]:
        """Spatial extent after each pathway convolution, ending at 1."""
        k1, k2, k3 = self.conv_kernels[self.sizes.index(size)]
        s1 = size - k1 + 1
        s2 = s1 - k2 + 1
        s3 = s2 - k3 + 1
        return [size, s1, s2, s3, 1]

    @classmethod
    def paper(cls) -> "VoxelwiseConfig":
        return cls()

    @classmethod
    def small(cls) -> "VoxelwiseConfig":
        """Desk-scale variant used by the phantom suite."""
        return cls(
            sizes=(9, 15, 25),
            conv_kernels=((3, 3, 3), (5, 3, 3), (7, 5, 5)),
            conv_features=(8, 8, 12),
            fc_features=32,
            plane_features=16,
        )


@dataclass
class UnetConfig:
    depth: int = 4
    base_features: int = 64
    n_classes: int = 2

    def __post_init__(self):
        if self.depth < 0 or self.base_features < 1 or self.n_classes < 2:
            raise ValueError(f"invalid U-net config {self}")

    def features(self, level: int) -> int:
        return self.base_features * 2 ** level

    @classmethod
    def small(cls) -> "UnetConfig":
        return cls(depth=3, base_features=16)


@dataclass
class NetworkSpec:
    arch: str  # "voxelwise" | "unet"
    config: Union[VoxelwiseConfig, UnetConfig]
    in_channels: int
    layers: List[LayerSpec]
    passthrough: bool = False
    input_shape: Optional[Tuple[int, int]] = None

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    def layer(self, name: str) -> LayerSpec:
        for lay in self.layers:
            if lay.name == name:
                return lay
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "config": asdict(self.config),
            "in_channels": self.in_channels,
            "passthrough": self.passthrough,
            "input_shape": list(self.input_shape) if self.input_shape else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        if d["arch"] == "voxelwise":
            cfg = d["config"]
            cfg = VoxelwiseConfig(
                sizes=tuple(cfg["sizes"]),
                planes=tuple(cfg["planes"]),
                conv_kernels=tuple(tuple(k) for k in cfg["conv_kernels"]),
                conv_features=tuple(cfg["conv_features"]),
                fc_features=cfg["fc_features"],
                plane_features=cfg["plane_features"],
                n_classes=cfg["n_classes"],
            )
            return build_voxelwise_spec(cfg, d["in_channels"], passthrough=d["passthrough"])
        if d["arch"] == "unet":
            cfg = UnetConfig(**d["config"])
            shape = tuple(d["input_shape"]) if d.get("input_shape") else None
            return build_unet_spec(cfg, d["in_channels"], cfg.n_classes, input_shape=shape, passthrough=d["passthrough"])
        raise ValueError(f"unknown architecture {d['arch']!r}")


def pathway_name(plane: str, size: int) -> str:
    return f"{plane}/s{size}"


def build_voxelwise_spec(cfg: VoxelwiseConfig, in_channels: int = 1, passthrough: Optional[bool] = None) -> NetworkSpec:
    """Layer graph of the tri-planar network; pathway convolutions are unpadded."""
    if in_channels not in (1, 2):
        raise ValueError("voxelwise network takes 1 (intensity) or 2 (intensity, context) channels")
    if passthrough is None:
        passthrough = in_channels == 2
    cfg.validate()
    f1, f2, f3 = cfg.conv_features
    layers: List[LayerSpec] = []
    for plane in cfg.planes:
        merged = []
        for size, (k1, k2, k3) in zip(cfg.sizes, cfg.conv_kernels):
            p = pathway_name(plane, size)
            s0, s1, s2, s3, _ = cfg.chain(size)
            layers += [
                LayerSpec(f"{p}/conv1", "conv2d", in_channels, f1, (k1, k1), spatial_in=(s0, s0), spatial_out=(s1, s1)),
                LayerSpec(f"{p}/relu1", "relu", f1, f1),
                LayerSpec(f"{p}/bn1", "batchnorm", f1, f1),
                LayerSpec(f"{p}/conv2", "conv2d", f1, f2, (k2, k2), spatial_in=(s1, s1), spatial_out=(s2, s2)),
                LayerSpec(f"{p}/relu2", "relu", f2, f2),
                LayerSpec(f"{p}/conv3", "conv2d", f2, f3, (k3, k3), spatial_in=(s2, s2), spatial_out=(s3, s3)),
                LayerSpec(f"{p}/relu3", "relu", f3, f3),
                LayerSpec(f"{p}/fc", "conv2d", f3, cfg.fc_features, (s3, s3), spatial_in=(s3, s3), spatial_out=(1, 1)),
                LayerSpec(f"{p}/relu4", "relu", cfg.fc_features, cfg.fc_features),
            ]
            merged.append(f"{p}/relu4")
        width = cfg.fc_features * len(cfg.sizes)
        layers += [
            LayerSpec(f"{plane}/concat", "concat", width, width, inputs=tuple(merged)),
            LayerSpec(f"{plane}/merge", "conv2d", width, cfg.plane_features, (1, 1)),
            LayerSpec(f"{plane}/relu", "relu", cfg.plane_features, cfg.plane_features),
        ]
    width = cfg.plane_features * len(cfg.planes)
    layers += [
        LayerSpec("concat", "concat", width, width, inputs=tuple(f"{p}/relu" for p in cfg.planes)),
        LayerSpec("classifier", "conv2d", width, cfg.n_classes, (1, 1)),
    ]
    if passthrough:
        layers.append(LayerSpec("context_gain", "linear-map", cfg.n_classes, cfg.n_classes))
    layers.append(LayerSpec("softmax", "softmax", cfg.n_classes, cfg.n_classes))
    return NetworkSpec("voxelwise", cfg, in_channels, layers, passthrough)


def build_unet_spec(
    cfg: UnetConfig,
    in_channels: int = 1,
    c: Optional[int] = None,
    input_shape: Optional[Tuple[int, int]] = None,
    passthrough: Optional[bool] = None,
) -> NetworkSpec:
    """Layer graph of the U-net. ``input_shape`` (if given) must divide ``2**depth``."""
    if c is not None and c != cfg.n_classes:
        cfg = UnetConfig(cfg.depth, cfg.base_features, c)
    if passthrough is None:
        passthrough = in_channels == 2
    m = 2 ** cfg.depth
    if input_shape is not None:
        input_shape = tuple(int(n) for n in input_shape)
        if any(n % m for n in input_shape):
            raise ValueError(f"input {input_shape} not divisible by 2**depth = {m}")
    hw = input_shape

    def down(shape):
        return None if shape is None else (shape[0] // 2, shape[1] // 2)

    def up(shape):
        return None if shape is None else (shape[0] * 2, shape[1] * 2)

    def block(prefix, cin, cout, shape):
        return [
            LayerSpec(f"{prefix}/conv1", "conv2d", cin, cout, (3, 3), padding="same", spatial_in=shape, spatial_out=shape),
            LayerSpec(f"{prefix}/relu1", "relu", cout, cout, spatial_in=shape, spatial_out=shape),
            LayerSpec(f"{prefix}/conv2", "conv2d", cout, cout, (3, 3), padding="same", spatial_in=shape, spatial_out=shape),
            LayerSpec(f"{prefix}/relu2", "relu", cout, cout, spatial_in=shape, spatial_out=shape),
        ]

    layers: List[LayerSpec] = []
    cin = in_channels
    for level in range(cfg.depth):
        f = cfg.features(level)
        layers += block(f"down{level}", cin, f, hw)
        layers.append(LayerSpec(f"pool{level}", "maxpool", f, f, (2, 2), stride=2, spatial_in=hw, spatial_out=down(hw)))
        hw = down(hw)
        cin = f
    f = cfg.features(cfg.depth)
    layers += block("bottleneck", cin, f, hw)
    for level in reversed(range(cfg.depth)):
        f_skip = cfg.features(level)
        f_below = cfg.features(level + 1)
        layers.append(LayerSpec(f"up{level}/upsample", "upsample", f_below, f_below, (2, 2), stride=2, spatial_in=hw, spatial_out=up(hw)))
        hw = up(hw)
        layers.append(
            LayerSpec(f"up{level}/concat", "concat", f_below + f_skip, f_below + f_skip,
                      inputs=(f"up{level}/upsample", f"down{level}/relu2"), spatial_in=hw, spatial_out=hw)
        )
        layers += block(f"up{level}", f_below + f_skip, f_skip, hw)
    layers.append(LayerSpec("classifier", "conv2d", cfg.features(0), cfg.n_classes, (1, 1), spatial_in=hw, spatial_out=hw))
    if passthrough:
        layers.append(LayerSpec("context_gain", "linear-map", cfg.n_classes, cfg.n_classes))
    layers.append(LayerSpec("softmax", "softmax", cfg.n_classes, cfg.n_classes))
    return NetworkSpec("unet", cfg, in_channels, layers, passthrough, input_shape)


def count_parameters(spec: NetworkSpec) -> int:
    return sum(layer.n_params for layer in spec.layers)


def spatial_chain(spec: NetworkSpec, plane: str, size: int) -> List[int]:
    """Spatial extents through one voxelwise pathway, read off the layer specs."""
    p = pathway_name(plane, size)
    convs = [spec.layer(f"{p}/{n}") for n in ("conv1", "conv2", "conv3", "fc")]
    return [convs[0].spatial_in[0]] + [c.spatial_out[0] for c in convs]


# ---------------------------------------------------------------------------
# Torch modules
# ---------------------------------------------------------------------------


class _Pathway(nn.Module):
    def __init__(self, in_ch, cfg: VoxelwiseConfig, size):
        super().__init__()
        k1, k2, k3 = cfg.conv_kernels[cfg.sizes.index(size)]
        f1, f2, f3 = cfg.conv_features
        s3 = cfg.chain(size)[3]
        self.conv1 = nn.Conv2d(in_ch, f1, k1)
        self.bn1 = nn.BatchNorm2d(f1)
        self.conv2 = nn.Conv2d(f1, f2, k2)
        self.conv3 = nn.Conv2d(f2, f3, k3)
        self.fc = nn.Conv2d(f3, cfg.fc_features, s3)

    def forward(self, x):
        x = self.bn1(F.relu(self.conv1(x)))
        x = F.relu(self.conv2(x))
        x = F.relu(self.conv3(x))
        return F.relu(self.fc(x))


class VoxelwiseNet(nn.Module):
    """Tri-planar network. Works on single patches (output 1x1) or on padded slices (dense)."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        cfg = spec.config
        self.spec = spec
        self.pathways = nn.ModuleDict()
        self.merge = nn.ModuleDict()
        for plane in cfg.planes:
            for size in cfg.sizes:
                self.pathways[f"{plane}_{size}"] = _Pathway(spec.in_channels, cfg, size)
            self.merge[plane] = nn.Conv2d(cfg.fc_features * len(cfg.sizes), cfg.plane_features, 1)
        self.classifier = nn.Conv2d(cfg.plane_features * len(cfg.planes), cfg.n_classes, 1)
        self.context_gain = nn.Parameter(torch.zeros(cfg.n_classes)) if spec.passthrough else None

    def plane_features(self, plane: str, inputs: Dict[int, torch.Tensor]) -> torch.Tensor:
        feats = [self.pathways[f"{plane}_{s}"](inputs[s] * INPUT_SCALE) for s in self.spec.config.sizes]
        return F.relu(self.merge[plane](torch.cat(feats, dim=1)))

    def head(self, feats: torch.Tensor, prior: Optional[torch.Tensor] = None) -> torch.Tensor:
        logits = self.classifier(feats)
        if self.context_gain is not None and prior is not None:
            logits = logits + self.context_gain.view(1, -1, *([1] * (logits.dim() - 2))) * prior
        return logits

    def forward(self, patches: Dict[Tuple[str, int], torch.Tensor], prior: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Patches ``{(plane, size): (N, C, s, s)}`` -> logits ``(N, c)``."""
        feats = [self.plane_features(p, {s: patches[(p, s)] for s in self.spec.config.sizes}) for p in self.spec.config.planes]
        out = self.head(torch.cat(feats, dim=1), None if prior is None else prior[..., None, None])
        return out[:, :, 0, 0]


class UNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        cfg = spec.config
        self.spec = spec

        def block(cin, cout):
            return nn.ModuleList([nn.Conv2d(cin, cout, 3, padding=1), nn.Conv2d(cout, cout, 3, padding=1)])

        self.down = nn.ModuleList()
        cin = spec.in_channels
        for level in range(cfg.depth):
            self.down.append(block(cin, cfg.features(level)))
            cin = cfg.features(level)
        self.bottleneck = block(cin, cfg.features(cfg.depth))
        self.up = nn.ModuleList(
            [block(cfg.features(level + 1) + cfg.features(level), cfg.features(level)) for level in range(cfg.depth)]
        )
        self.classifier = nn.Conv2d(cfg.features(0), cfg.n_classes, 1)
        self.context_gain = nn.Parameter(torch.zeros(cfg.n_classes)) if spec.passthrough else None

    @staticmethod
    def _run(block, x):
        for conv in block:
            x = F.relu(conv(x))
        return x

    def forward(self, x: torch.Tensor, prior: Optional[torch.Tensor] = None) -> torch.Tensor:
        """``(B, C, H, W)`` -> logits ``(B, c, H, W)``; H and W must divide ``2**depth``."""
        m = 2 ** self.spec.config.depth
        if x.shape[-1] % m or x.shape[-2] % m:
            raise ValueError(f"input {tuple(x.shape[-2:])} not divisible by {m}")
        x = x * INPUT_SCALE
        skips = []
        for block in self.down:
            x = self._run(block, x)
            skips.append(x)
            x = F.max_pool2d(x, 2, 2)
        x = self._run(self.bottleneck, x)
        for level in reversed(range(len(self.up))):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self._run(self.up[level], torch.cat([x, skips[level]], dim=1))
        logits = self.classifier(x)
        if self.context_gain is not None and prior is not None:
            logits = logits + self.context_gain.view(1, -1, 1, 1) * prior
        return logits


def instantiate(spec: NetworkSpec, seed: int = 0, dtype=torch.float32) -> nn.Module:
    torch.manual_seed(seed)
    model = VoxelwiseNet(spec) if spec.arch == "voxelwise" else UNet(spec)
    return model.to(dtype)


def zero_classifier(model: nn.Module, gain: float = 1.0) -> None:
    """Make the network output exactly ``softmax(gain * prior)`` (warm start)."""
    with torch.no_grad():
        model.classifier.weight.zero_()
        model.classifier.bias.zero_()
        if model.context_gain is not None:
            model.context_gain.fill_(gain)


# ---------------------------------------------------------------------------
# Parameters and serialization
# ---------------------------------------------------------------------------


@dataclass
class ModelParameters:
    spec: NetworkSpec
    arrays: Dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, spec: NetworkSpec, model: nn.Module, metadata: Optional[dict] = None) -> "ModelParameters":
        arrays = {
            k: v.detach().cpu().numpy().copy()
            for k, v in model.state_dict().items()
            if v.dtype.is_floating_point
        }
        return cls(spec, arrays, dict(metadata or {}))

    def to_model(self, dtype=torch.float32) -> nn.Module:
        model = instantiate(self.spec, 0, dtype)
        state = model.state_dict()
        for k, v in self.arrays.items():
            if k not in state or tuple(state[k].shape) != v.shape:
                raise ValueError(f"parameter {k} shape {v.shape} does not match spec")
            state[k] = torch.as_tensor(v, dtype=state[k].dtype)
        model.load_state_dict(state)
        model.eval()
        return model

    def n_parameters(self) -> int:
        model = instantiate(self.spec)
        return sum(p.numel() for p in model.parameters())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())


def save_model(params: ModelParameters, directory, stem: str = "model") -> None:
    """JSON manifest plus little-endian float32 arrays concatenated in manifest order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / f"{stem}.bin", "wb") as fh:
        for name, arr in params.arrays.items():
            buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
            fh.write(buf)
            offset += len(buf)
    manifest = {"spec": params.spec.to_dict(), "arrays": entries, "metadata": params.metadata, "dtype": "<f4"}
    (directory / f"{stem}.json").write_text(json.dumps(manifest, indent=2, default=_json_default))


def load_model(directory, stem: str = "model") -> ModelParameters:
    directory = Path(directory)
    manifest = json.loads((directory / f"{stem}.json").read_text())
    blob = (directory / f"{stem}.bin").read_bytes()
    arrays = {}
    for e in manifest["arrays"]:
        chunk = blob[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).copy()
    return ModelParameters(NetworkSpec.from_dict(manifest["spec"]), arrays, manifest.get("metadata", {}))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


# ---------------------------------------------------------------------------
# Probabilities and losses
# ---------------------------------------------------------------------------


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(posteriors, labels, floor: float = LOG_FLOOR) -> float:
    """Summed negative log-probability of the true label, ``-sum_i log p_i(y_i)``."""
    p = np.asarray(posteriors, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    p_true = np.take_along_axis(p.reshape(-1, p.shape[-1]), y.reshape(-1, 1), axis=1)[:, 0]
    return float(-np.sum(np.log(np.maximum(p_true, floor))))


def class_weights(frequencies) -> np.ndarray:
    """Weights inversely proportional to class frequency, with ``sum_c w_c f_c = 1``."""
    f = np.asarray(frequencies, dtype=np.float64)
    if np.any(f <= 0):
        raise ValueError(f"empty class: frequencies must all be positive, got {f.tolist()}")
    if not np.isclose(f.sum(), 1.0, atol=1e-9):
        raise ValueError(f"frequencies must sum to 1, got {f.sum()}")
    w = 1.0 / f
    return w / np.sum(w * f)


def weighted_slice_loss(logits, labels, weights=None) -> float:
    """Weighted mean over pixels of per-pixel cross-entropy, logits ``(H, W, c)``."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if z.shape[:-1] != y.shape:
        raise ValueError(f"logit map {z.shape} and label map {y.shape} disagree")
    c = z.shape[-1]
    w = np.ones(c) if weights is None else np.asarray(weights, dtype=np.float64)
    zmax = z.max(axis=-1, keepdims=True)
    logp = z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    ce = -np.take_along_axis(logp, y[..., None], axis=-1)[..., 0]
    pw = w[y]
    return float(np.sum(pw * ce) / np.sum(pw))


def weighted_ce_torch(logits: torch.Tensor, labels: torch.Tensor, weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Torch counterpart of :func:`weighted_slice_loss`; class axis is dim 1."""
    ce = F.cross_entropy(logits, labels, reduction="none")
    if weights is None:
        return ce.mean()
    pw = weights.to(logits.dtype)[labels]
    return (pw * ce).sum() / pw.sum()


def log_prior(p_brain, floor: float = LOG_FLOOR):
    """Two-class log-posterior ``(log(1-p), log p)`` on the last axis, floored."""
    if isinstance(p_brain, torch.Tensor):
        p = p_brain.clamp(0.0, 1.0)
        return torch.stack([torch.log((1 - p).clamp_min(floor)), torch.log(p.clamp_min(floor))], dim=-1)
    p = np.clip(np.asarray(p_brain, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.log(np.maximum(1 - p, floor)), np.log(np.maximum(p, floor))], axis=-1)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class Stage:
    learning_rate: float
    samples_per_image: Optional[int] = None
    epochs: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1:
            raise ValueError(f"invalid stage {self}")


@dataclass
class TrainSchedule:
    """ADAM with one or more constant-rate stages and optional step decay."""

    stages: List[Stage]
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 64
    decay_rate: Optional[float] = None
    decay_steps: Optional[int] = None

    def __post_init__(self):
        self.stages = [s if isinstance(s, Stage) else Stage(**s) for s in self.stages]
        self.betas = tuple(self.betas)
        if not self.stages:
            raise ValueError("schedule needs at least one stage")

    def lr_at(self, stage: int, step: int) -> float:
        """Rate at a global optimizer step (decay counts steps across stages)."""
        lr = self.stages[stage].learning_rate
        if self.decay_rate is not None and self.decay_steps:
            lr *= self.decay_rate ** (step // self.decay_steps)
        return lr

    @classmethod
    def voxelwise_paper(cls) -> "TrainSchedule":
        return cls([Stage(0.001, 5000, 15), Stage(0.0001, 5000, 15), Stage(0.00005, 5000, 15)])

    @classmethod
    def unet_paper(cls, epochs: int = 15) -> "TrainSchedule":
        return cls([Stage(0.001, None, epochs)], decay_rate=0.9, decay_steps=2000, batch_size=8)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        return cls(**d)


class ArrayDataset:
    """In-memory (inputs, labels[, prior]) tensors; every stage uses all samples."""

    def __init__(self, inputs, labels, prior=None, weights=None):
        self.inputs = inputs
        self.labels = torch.as_tensor(labels, dtype=torch.long)
        self.prior = prior
        self.weights = weights

    def __len__(self):
        return len(self.labels)

    def _take(self, idx):
        if isinstance(self.inputs, dict):
            x = {k: v[idx] for k, v in self.inputs.items()}
        else:
            x = self.inputs[idx]
        return x, None if self.prior is None else self.prior[idx], self.labels[idx]

    def batches(self, stage_index: int, stage: Stage, batch_size: int, rng: np.random.Generator):
        order = rng.permutation(len(self))
        for i in range(0, len(order), batch_size):
            yield self._take(torch.as_tensor(order[i : i + batch_size]))


def train(
    spec: NetworkSpec,
    params_init: Optional[ModelParameters],
    dataset,
    schedule: TrainSchedule,
    seed: int = 0,
    model: Optional[nn.Module] = None,
    callback=None,
) -> ModelParameters:
    """Minimise (weighted) cross-entropy with ADAM over the schedule's stages.

    ``dataset`` must offer ``batches(stage_index, stage, batch_size, rng)``
    yielding ``(inputs, prior, labels)`` and may carry ``weights`` (class
    weights for the loss). The per-step loss trajectory is stored in
    ``metadata["loss_history"]``.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    if model is None:
        model = params_init.to_model() if params_init is not None else instantiate(spec, seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=schedule.stages[0].learning_rate, betas=schedule.betas, eps=schedule.eps)
    weights = getattr(dataset, "weights", None)
    if weights is not None:
        weights = torch.as_tensor(weights, dtype=torch.float32)
    losses: List[float] = []
    step = 0
    for si, stage in enumerate(schedule.stages):
        for epoch in range(stage.epochs):
            for x, prior, y in dataset.batches(si, stage, schedule.batch_size, rng):
                lr = schedule.lr_at(si, step)
                for group in opt.param_groups:
                    group["lr"] = lr
                logits = model(x, prior)
                loss = weighted_ce_torch(logits, y, weights)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at stage {si} epoch {epoch} step {step} (lr {lr:g}); "
                        f"last finite losses {losses[-5:]}",
                        losses,
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))
                step += 1
            if callback is not None:
                callback(model, si, epoch, losses)
    model.eval()
    meta = {"seed": seed, "schedule": schedule.to_dict(), "steps": step, "loss_history": losses}
    return ModelParameters.from_model(spec, model, meta)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def _context_prior(ctx_values: np.ndarray, mean: float) -> np.ndarray:
    p = ctx_values / mean if mean > 0 else np.full_like(ctx_values, 0.5)
    return log_prior(p)


def _as_model(params, dtype=torch.float32):
    return params if isinstance(params, nn.Module) else params.to_model(dtype)


def _arr(v):
    if v is None or isinstance(v, np.ndarray):
        return v
    return v.data if hasattr(v, "data") else np.asarray(v)


@torch.no_grad()
def predict_voxelwise(
    params,
    spec: NetworkSpec,
    v,
    ctx=None,
    voxels=None,
    batch_size: int = 512,
) -> np.ndarray:
    """Posteriors ``(N, c)`` at ``voxels`` by exact sliding-window evaluation."""
    model = _as_model(params)
    model.eval()
    data = _arr(v)
    ctx_data = _arr(ctx)
    if (ctx_data is None) != (spec.in_channels == 1):
        raise ValueError(f"network expects {spec.in_channels} channel(s); context {'missing' if ctx_data is None else 'unexpected'}")
    voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    cfg = spec.config
    keys = [(p, s) for p in cfg.planes for s in cfg.sizes]
    mean = float(np.mean(data, dtype=np.float64))
    out = []
    for i in range(0, len(voxels), batch_size):
        chunk = voxels[i : i + batch_size]
        x = {k: torch.from_numpy(a) for k, a in batch_patches(data, ctx_data, chunk, keys).items()}
        prior = None
        if ctx_data is not None and spec.passthrough:
            prior = torch.from_numpy(_context_prior(ctx_data[tuple(chunk.T)], mean).astype(np.float32))
        logits = model(x, prior).double().numpy()
        out.append(softmax(logits))
    if not out:
        return np.zeros((0, cfg.n_classes))
    return np.concatenate(out)


@torch.no_grad()
def voxelwise_logits_dense(model: VoxelwiseNet, data: np.ndarray, ctx_data=None, slice_batch: int = 16) -> np.ndarray:
    """Logits for every voxel by running the pathways convolutionally over padded slices."""
    spec = model.spec
    cfg = spec.config
    feats = []
    for plane in cfg.planes:
        chans = [to_slices(data, plane)]
        if ctx_data is not None:
            chans.append(to_slices(ctx_data, plane))
        stack = np.stack(chans, axis=1).astype(np.float32)  # (n, C, h, w)
        plane_out = []
        for i in range(0, len(stack), slice_batch):
            part = stack[i : i + slice_batch]
            inputs = {}
            for s in cfg.sizes:
                r = s // 2
                inputs[s] = torch.from_numpy(np.pad(part, ((0, 0), (0, 0), (r, r), (r, r))))
            plane_out.append(model.plane_features(plane, inputs).numpy())
        f = np.concatenate(plane_out)  # (n, F, h, w)
        feats.append(from_slices(np.moveaxis(f, 1, -1), plane))  # (x, y, z, F)
    vol = np.concatenate(feats, axis=-1)
    flat = torch.from_numpy(np.ascontiguousarray(vol.reshape(-1, vol.shape[-1]).T)[None, :, :, None])
    prior = None
    if ctx_data is not None and spec.passthrough:
        mean = float(np.mean(data, dtype=np.float64))
        pr = _context_prior(ctx_data.reshape(-1), mean).astype(np.float32)
        prior = torch.from_numpy(np.ascontiguousarray(pr.T)[None, :, :, None])
    logits = model.head(flat, prior)[0, :, :, 0].double().numpy().T
    return logits.reshape(*data.shape, -1)


def predict_voxelwise_volume(params, spec: NetworkSpec, v, ctx=None, mode: str = "dense", batch_size: int = 2048) -> PosteriorVolume:
    """Posterior for the whole volume; ``mode`` is ``"dense"`` or ``"sliding"``."""
    data = _arr(v)
    spacing = getattr(v, "spacing", (1.0, 1.0, 1.0))
    model = _as_model(params)
    model.eval()
    if mode == "dense":
        logits = voxelwise_logits_dense(model, data, _arr(ctx))
        return PosteriorVolume(softmax(logits), spacing)
    if mode != "sliding":
        raise ValueError(f"unknown mode {mode!r}")
    voxels = np.argwhere(np.ones(data.shape, dtype=bool))
    p = predict_voxelwise(model, spec, data, ctx, voxels, batch_size)
    return PosteriorVolume(p.reshape(*data.shape, -1), spacing)


@torch.no_grad()
def unet_logits(model: UNet, data: np.ndarray, ctx_data=None, plane: str = "axial", slice_batch: int = 16) -> np.ndarray:
    spec = model.spec
    stack = extract_slice_stack(data, ctx_data, plane, spec.config.depth)
    prior = None
    if ctx_data is not None and spec.passthrough:
        mean = float(np.mean(data, dtype=np.float64))
        pr = _context_prior(stack.slices[:, 1], mean).astype(np.float32)  # (n, H, W, c)
        prior = np.moveaxis(pr, -1, 1)
    out = []
    for i in range(0, len(stack), slice_batch):
        x = torch.from_numpy(stack.slices[i : i + slice_batch])
        pr = None if prior is None else torch.from_numpy(np.ascontiguousarray(prior[i : i + slice_batch]))
        out.append(model(x, pr).double().numpy())
    logits = stack.crop(np.concatenate(out))  # (n, c, h, w)
    return from_slices(np.moveaxis(logits, 1, -1), plane)


def predict_unet(params, spec: NetworkSpec, v, ctx=None, plane: str = "axial") -> PosteriorVolume:
    """Slice-by-slice U-net posterior for the whole volume (padding cropped back)."""
    data = _arr(v)
    ctx_data = _arr(ctx)
    if (ctx_data is None) != (spec.in_channels == 1):
        raise ValueError(f"network expects {spec.in_channels} channel(s)")
    model = _as_model(params)
    model.eval()
    logits = unet_logits(model, data, ctx_data, plane)
    return PosteriorVolume(softmax(logits), getattr(v, "spacing", (1.0, 1.0, 1.0)))
