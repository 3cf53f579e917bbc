"""Declarative residual CNN for multispectral patch classification.

The network is built from a :class:`ModelSpec`, so architectural variants
(different widths, class counts, a classic downsampling stem) are
configuration rather than code. The default spec is a 50-layer bottleneck
residual network whose stem is modified for small objects in 100x100
patches: a 3x3 stride-1 convolution and a 3x3 stride-1 max-pool replace
the usual 7x7 stride-2 + stride-2 pool, so feature maps entering stage 1
keep the full 100x100 resolution instead of 25x25. Stage strides
[1, 2, 2, 2] then reduce 100x100 inputs to 13x13 final maps.

Conventions fixed here: all 3x3 convolutions pad by 1 (stride-2 outputs
are ceil(n/2)); downsampling shortcuts are 1x1 stride-2 conv + batch norm;
batch norm uses momentum 0.1 and eps 1e-5. Initialization: convolutions
draw from N(0, sqrt(2/fan_in)), batch-norm scale/shift start at 1/0 with
the last batch norm of every residual branch zeroed (each block starts as
an identity), and the head draws from N(0, 0.01) with zero bias.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, SpecMismatchError

BOTTLENECK_FACTOR = 4
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class StemSpec:
    """First convolution + pool. Defaults keep full spatial resolution."""

    out_channels: int = 64
    kernel: int = 3
    stride: int = 1
    pool_kernel: int = 3
    pool_stride: int = 1

    @classmethod
    def standard(cls) -> "StemSpec":
        """The classic 7x7 stride-2 stem with a stride-2 pool."""
        return cls(out_channels=64, kernel=7, stride=2, pool_kernel=3, pool_stride=2)


@dataclass(frozen=True)
class ModelSpec:
    """Complete architecture description; hashable for checkpoint checks."""

    in_channels: int = 10
    num_classes: int = 11
    stem: StemSpec = field(default_factory=StemSpec)
    block_counts: tuple[int, ...] = (3, 4, 6, 3)
    stage_widths: tuple[int, ...] = (256, 512, 1024, 2048)
    stage_strides: tuple[int, ...] = (1, 2, 2, 2)

    def __post_init__(self):
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError("need at least 1 input channel and 2 classes")
        if not (len(self.block_counts) == len(self.stage_widths) == len(self.stage_strides)):
            raise ConfigError("stage lists must have equal length")
        for width in self.stage_widths:
            if width % BOTTLENECK_FACTOR != 0:
                raise ConfigError(
                    f"stage width {width} not divisible by bottleneck factor "
                    f"{BOTTLENECK_FACTOR}"
                )
        if any(c < 1 for c in self.block_counts) or any(s < 1 for s in self.stage_strides):
            raise ConfigError("block counts and strides must be positive")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "stem": {f.name: getattr(self.stem, f.name) for f in fields(self.stem)},
            "block_counts": list(self.block_counts),
            "stage_widths": list(self.stage_widths),
            "stage_strides": list(self.stage_strides),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            in_channels=int(d["in_channels"]),
            num_classes=int(d["num_classes"]),
            stem=StemSpec(**d["stem"]),
            block_counts=tuple(d["block_counts"]),
            stage_widths=tuple(d["stage_widths"]),
            stage_strides=tuple(d["stage_strides"]),
        )

    def spec_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def backbone_fields(self) -> dict:
        d = self.to_dict()
        d.pop("num_classes")
        return d


def plant_spec(num_classes: int = 11) -> ModelSpec:
    """Full-size spec for the plant-type task (10 classes + background)."""
    return ModelSpec(num_classes=num_classes)


def cooling_spec(num_classes: int = 4) -> ModelSpec:
    """Full-size spec for the cooling-mechanism task."""
    return ModelSpec(num_classes=num_classes)


def tiny_spec(
    num_classes: int,
    in_channels: int = 10,
    stem_out: int = 8,
    widths: tuple[int, ...] = (16, 32, 64, 128),
    blocks: tuple[int, ...] = (1, 1, 1, 1),
    strides: tuple[int, ...] = (1, 2, 2, 2),
) -> ModelSpec:
    """Small spec with the same topology, for tests and CPU-sized runs."""
    return ModelSpec(
        in_channels=in_channels,
        num_classes=num_classes,
        stem=StemSpec(out_channels=stem_out),
        block_counts=blocks,
        stage_widths=widths,
        stage_strides=strides,
    )


class BottleneckBlock(nn.Module):
    """1x1 reduce, 3x3 (carries the stride), 1x1 expand, plus shortcut."""

    def __init__(self, in_channels: int, width: int, stride: int):
        super().__init__()
        mid = width // BOTTLENECK_FACTOR
        self.conv1 = nn.Conv2d(in_channels, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.conv3 = nn.Conv2d(mid, width, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(width, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_channels != width:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, width, 1, stride=stride, bias=False),
                nn.BatchNorm2d(width, eps=BN_EPS, momentum=BN_MOMENTUM),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + self.shortcut(x))


class ResidualClassifier(nn.Module):
    """Stem, bottleneck stages, global average pool, affine head."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        s = spec.stem
        self.stem = nn.Sequential(
            nn.Conv2d(
                spec.in_channels, s.out_channels, s.kernel,
                stride=s.stride, padding=s.kernel // 2, bias=False,
            ),
            nn.BatchNorm2d(s.out_channels, eps=BN_EPS, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(s.pool_kernel, stride=s.pool_stride, padding=s.pool_kernel // 2),
        )
        stages = []
        in_ch = s.out_channels
        for count, width, stride in zip(
            spec.block_counts, spec.stage_widths, spec.stage_strides
        ):
            blocks = []
            for b in range(count):
                blocks.append(BottleneckBlock(in_ch, width, stride if b == 0 else 1))
                in_ch = width
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(spec.stage_widths[-1], spec.num_classes)

    def stem_features(self, x):
        return self.stem(x)

    def backbone_features(self, x):
        return self.stages(self.stem(x))

    def forward(self, x):
        feats = self.backbone_features(x)
        pooled = feats.mean(dim=(2, 3))
        return self.head(pooled)


@dataclass
class ModelParams:
    """A built network plus the identity of the spec that shaped it."""

    spec: ModelSpec
    module: ResidualClassifier
    init_seed: int
    metadata: dict = field(default_factory=dict)

    @property
    def spec_hash(self) -> str:
        return self.spec.spec_hash()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            k: v.detach().cpu().numpy().copy()
            for k, v in self.module.state_dict().items()
        }

    def trainable_tensors(self) -> Iterator[tuple[str, torch.Tensor]]:
        for name, p in self.module.named_parameters():
            if p.requires_grad:
                yield name, p


def build_model(spec: ModelSpec, init_seed: int) -> ModelParams:
    """Instantiate and deterministically initialize a network from a spec."""
    module = ResidualClassifier(spec)
    gen = torch.Generator().manual_seed(init_seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
            elif isinstance(m, nn.Linear):
                m.weight.normal_(0.0, 0.01, generator=gen)
                m.bias.zero_()
        for m in module.modules():
            if isinstance(m, BottleneckBlock):
                m.bn3.weight.zero_()
    return ModelParams(spec=spec, module=module, init_seed=init_seed)


def _as_batch_tensor(spec: ModelSpec, batch) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(batch), dtype=torch.float32)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ConfigError(
            f"expected batch (N, {spec.in_channels}, H, W), got {tuple(x.shape)}"
        )
    if not torch.isfinite(x).all():
        raise ConfigError("non-finite values in input batch")
    return x


def forward(params: ModelParams, batch, mode: str = "eval") -> np.ndarray:
    """Run a batch through the network, returning logits as numpy.

    ``mode="train"`` updates batch-norm running statistics as a side
    effect; ``"eval"`` is a pure function of (params, batch).
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = _as_batch_tensor(params.spec, batch)
    params.module.train(mode == "train")
    with torch.no_grad():
        logits = params.module(x)
    params.module.eval()
    return logits.numpy()


def predict_logits(params: ModelParams, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits for a stack of inputs, batched to bound memory."""
    outs = []
    for start in range(0, len(x), batch_size):
        outs.append(forward(params, x[start:start + batch_size], mode="eval"))
    return np.concatenate(outs, axis=0)


def feature_maps(params: ModelParams, cube: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Final-stage activations and head weights for one input.

    Returns (activations (C, h, w), head weight (num_classes, C)). Global
    average pooling the activations and applying the head (weights plus
    :func:`head_bias`) reproduces :func:`forward`'s logits.
    """
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ConfigError(f"expected one (C, H, W) input, got shape {cube.shape}")
    x = _as_batch_tensor(params.spec, cube[None])
    params.module.eval()
    with torch.no_grad():
        feats = params.module.backbone_features(x)
    return feats[0].numpy(), params.module.head.weight.detach().numpy().copy()


def head_bias(params: ModelParams) -> np.ndarray:
    return params.module.head.bias.detach().numpy().copy()


def transfer_head(
    source: ModelParams,
    new_num_classes: int,
    seed: int,
    expected: ModelSpec | None = None,
) -> ModelParams:
    """Copy a trained backbone under a freshly initialized head.

    ``expected`` (when given) must agree with the source on every spec
    field except the class count; mismatches raise
    :class:`SpecMismatchError`. Every copied tensor is verified.
    """
    if expected is not None and expected.backbone_fields() != source.spec.backbone_fields():
        raise SpecMismatchError(
            f"backbone mismatch: expected {expected.backbone_fields()}, "
            f"checkpoint has {source.spec.backbone_fields()}"
        )
    target_spec = replace(source.spec, num_classes=new_num_classes)
    target = build_model(target_spec, seed)
    source_state = source.module.state_dict()
    target_state = target.module.state_dict()
    with torch.no_grad():
        for name, tensor in source_state.items():
            if name.startswith("head."):
                continue
            if target_state[name].shape != tensor.shape:
                raise SpecMismatchError(
                    f"tensor {name}: source shape {tuple(tensor.shape)} != "
                    f"target {tuple(target_state[name].shape)}"
                )
            target_state[name].copy_(tensor)
    for name, tensor in source_state.items():
        if not name.startswith("head."):
            if not torch.equal(target.module.state_dict()[name], tensor):
                raise SpecMismatchError(f"tensor {name} failed copy verification")
    target.metadata = dict(source.metadata)
    target.metadata["transferred_from"] = source.spec_hash
    return target


HEADER_KEY = "__header__"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(params: ModelParams, path: str | Path, metadata: dict | None = None) -> Path:
    """Write all named tensors plus a JSON header to an .npz archive.

    The archive is a plain zip of .npy members written with a fixed entry
    date, so identical parameters produce byte-identical files.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    merged = dict(params.metadata)
    if metadata:
        merged.update(metadata)
    header = json.dumps({
        "spec": params.spec.to_dict(),
        "spec_hash": params.spec_hash,
        "init_seed": params.init_seed,
        "metadata": merged,
    }, sort_keys=True)
    arrays = params.state_arrays()
    if HEADER_KEY in arrays:
        raise ConfigError(f"tensor name collides with {HEADER_KEY}")
    arrays[HEADER_KEY] = np.asarray(header)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, arrays[name])
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH), buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> ModelParams:
    """Rebuild a model from a checkpoint, validating the spec hash."""
    path = Path(path)
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise SpecMismatchError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        try:
            header = json.loads(str(archive[HEADER_KEY][()]))
        except KeyError as exc:
            raise SpecMismatchError(f"{path}: checkpoint header missing") from exc
        spec = ModelSpec.from_dict(header["spec"])
        if spec.spec_hash() != header["spec_hash"]:
            raise SpecMismatchError(
                f"{path}: spec hash {header['spec_hash'][:12]}... does not match "
                f"the stored spec"
            )
        module = ResidualClassifier(spec)
        state = {}
        for name, tensor in module.state_dict().items():
            if name not in archive:
                raise SpecMismatchError(f"{path}: tensor {name} missing")
            arr = archive[name]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise SpecMismatchError(
                    f"{path}: tensor {name} shape {arr.shape} != spec shape "
                    f"{tuple(tensor.shape)}"
                )
            state[name] = torch.as_tensor(np.array(arr))
    module.load_state_dict(state)
    module.eval()
    return ModelParams(
        spec=spec,
        module=module,
        init_seed=int(header["init_seed"]),
        metadata=dict(header["metadata"]),
    )
