"""Dual encoders, projection heads, the segmentation network and weight transfer.

Tensors entering the public forward functions are channels-last
(``B x H x W x C``) with values in ``[0, 1]``; the modules work channels-first
internally.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "EncoderSpec",
    "ProjectionSpec",
    "SegmentationSpec",
    "Encoder",
    "ProjectionHead",
    "SegmentationNet",
    "ContrastiveTower",
    "encoder_forward",
    "project",
    "segment_forward",
    "adapt_input_channels",
    "transfer_encoder",
    "TransferReport",
    "ModelShapeError",
    "FingerprintMismatch",
    "spec_fingerprint",
    "param_fingerprint",
    "build_encoder",
]

class ModelShapeError(ValueError):
    pass


class FingerprintMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    profile: str = "tiny"
    input_channels: int = 3
    widths: tuple[int, ...] = (32, 64, 128, 256)
    depths: tuple[int, ...] = (1, 1, 1, 1)
    strides: tuple[int, ...] = (2, 2, 2, 1)

    def __post_init__(self):
        if self.profile not in ("tiny", "resnet50_mod"):
            raise ValueError(f"unknown encoder profile {self.profile!r}")
        if self.input_channels not in (2, 3):
            raise ValueError("input_channels must be 2 or 3")
        if self.profile == "tiny" and not (len(self.widths) == len(self.depths) == len(self.strides)):
            raise ValueError("widths, depths and strides must have equal length")

    @property
    def feature_dim(self) -> int:
        return 2048 if self.profile == "resnet50_mod" else self.widths[-1]

    @property
    def low_level_dim(self) -> int:
        return 256 if self.profile == "resnet50_mod" else self.widths[0]


@dataclass(frozen=True)
class ProjectionSpec:
    hidden_dim: int | None = None  # defaults to the encoder feature dim
    output_dim: int = 128


@dataclass(frozen=True)
class SegmentationSpec:
    num_classes: int
    atrous_rates: tuple[int, ...] = (3, 6, 9)
    aspp_dim: int = 64
    low_level_proj: int = 24


def spec_fingerprint(spec) -> str:
    """Stable short hash of a spec dataclass, used to gate checkpoint loading."""
    blob = json.dumps(asdict(spec), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def param_fingerprint(params: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        t = params[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()[:16]


def _conv_bn(cin, cout, stride=1, dilation=1, k=3):
    pad = dilation * (k // 2)
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=pad, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class _Stem(nn.Module):
    # Two 3x3 convolutions in place of the usual 7x7 layer.
    def __init__(self, cin, cout, mid=None):
        super().__init__()
        mid = mid or cout
        self.conv1 = nn.Conv2d(cin, mid, 3, stride=2, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, cout, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class Encoder(nn.Module):
    """Image encoder returning ``(feature_map, low_level_map)`` channels-first."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        if spec.profile == "tiny":
            self.stem = _Stem(spec.input_channels, spec.widths[0])
            stages = []
            cin = spec.widths[0]
            for w, d, s in zip(spec.widths, spec.depths, spec.strides):
                units = [_conv_bn(cin, w, stride=s)]
                units += [_conv_bn(w, w) for _ in range(d - 1)]
                stages.append(nn.Sequential(*units))
                cin = w
            self.stages = nn.ModuleList(stages)
        else:
            from torchvision.models import resnet50

            net = resnet50(weights=None, replace_stride_with_dilation=[False, False, True])
            self.stem = _Stem(spec.input_channels, 64, mid=32)
            self.pool = net.maxpool
            self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])

    def forward(self, x):
        x = self.stem(x)
        if self.spec.profile == "resnet50_mod":
            x = self.pool(x)
        low = None
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i == 0:
                low = x
        return x, low


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, spec: ProjectionSpec = ProjectionSpec()):
        super().__init__()
        hidden = spec.hidden_dim or in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, spec.output_dim)

    def forward(self, pooled):
        z = self.fc2(F.relu(self.fc1(pooled)))
        return z / (z.norm(dim=1, keepdim=True) + 1e-12)


class _ASPP(nn.Module):
    def __init__(self, cin, cout, rates):
        super().__init__()
        self.branches = nn.ModuleList([_conv_bn(cin, cout, k=1)])
        self.branches.extend(_conv_bn(cin, cout, dilation=r) for r in rates)
        self.image_pool = nn.Sequential(nn.Conv2d(cin, cout, 1, bias=False), nn.ReLU(inplace=True))
        self.fuse = _conv_bn(cout * (len(rates) + 2), cout, k=1)

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        pooled = self.image_pool(x.mean(dim=(2, 3), keepdim=True))
        outs.append(pooled.expand(-1, -1, x.shape[2], x.shape[3]))
        return self.fuse(torch.cat(outs, dim=1))


class SegmentationNet(nn.Module):
    """Encoder plus an atrous pyramid / low-level skip decoder."""

    def __init__(self, enc_spec: EncoderSpec, seg_spec: SegmentationSpec):
        super().__init__()
        self.enc_spec = enc_spec
        self.seg_spec = seg_spec
        self.encoder = Encoder(enc_spec)
        self.decoder = nn.ModuleDict(
            {
                "aspp": _ASPP(enc_spec.feature_dim, seg_spec.aspp_dim, seg_spec.atrous_rates),
                "low": _conv_bn(enc_spec.low_level_dim, seg_spec.low_level_proj, k=1),
                "refine": _conv_bn(seg_spec.aspp_dim + seg_spec.low_level_proj, seg_spec.aspp_dim),
                "classifier": nn.Conv2d(seg_spec.aspp_dim, seg_spec.num_classes, 1),
            }
        )

    def forward(self, x):
        h, w = x.shape[2:]
        feat, low = self.encoder(x)
        dec = self.decoder
        y = dec["aspp"](feat)
        low = dec["low"](low)
        y = F.interpolate(y, size=low.shape[2:], mode="bilinear", align_corners=False)
        y = dec["refine"](torch.cat([y, low], dim=1))
        y = dec["classifier"](y)
        return F.interpolate(y, size=(h, w), mode="bilinear", align_corners=False)


class ContrastiveTower(nn.Module):
    """One modality tower: encoder f followed by projection head g."""

    def __init__(self, enc_spec: EncoderSpec, proj_spec: ProjectionSpec = ProjectionSpec()):
        super().__init__()
        self.enc_spec = enc_spec
        self.proj_spec = proj_spec
        self.encoder = Encoder(enc_spec)
        self.projection = ProjectionHead(enc_spec.feature_dim, proj_spec)

    def forward(self, x):
        feat, _ = self.encoder(x)
        return self.projection(feat.mean(dim=(2, 3)))


def build_encoder(spec: EncoderSpec, seed: int) -> Encoder:
    torch.manual_seed(seed)
    return Encoder(spec)


def _to_nchw(batch, channels: int) -> torch.Tensor:
    x = torch.as_tensor(batch)
    if x.ndim != 4 or x.shape[-1] != channels:
        raise ModelShapeError(f"expected B x H x W x {channels}, got {tuple(x.shape)}")
    return x.permute(0, 3, 1, 2).contiguous()


def encoder_forward(encoder: Encoder, batch):
    """Run ``encoder`` on a channels-last batch in ``[0, 1]``.

    Returns ``(feature_map, pooled)`` where the feature map is channels-last
    ``B x h x w x F`` and ``pooled`` its global spatial average.
    """
    x = _to_nchw(batch, encoder.spec.input_channels)
    feat, _ = encoder(x)
    return feat.permute(0, 2, 3, 1), feat.mean(dim=(2, 3))


def project(head: ProjectionHead, pooled) -> torch.Tensor:
    pooled = torch.as_tensor(pooled)
    if pooled.shape[0] == 0:
        return pooled.new_zeros((0, head.fc2.out_features))
    return head(pooled)


def segment_forward(net: SegmentationNet, batch) -> torch.Tensor:
    """Per-pixel logits ``B x H x W x num_classes`` (no activation)."""
    x = _to_nchw(batch, net.enc_spec.input_channels)
    return net(x).permute(0, 2, 3, 1)


def adapt_input_channels(weights, target_c: int):
    """Replace a 3-input-channel filter bank by its channel average, repeated ``target_c`` times."""
    is_tensor = isinstance(weights, torch.Tensor)
    w = weights if is_tensor else np.asarray(weights)
    if w.ndim != 4 or w.shape[1] != 3:
        raise ModelShapeError(f"source filter bank must be out x 3 x k x k, got {tuple(w.shape)}")
    if target_c < 1:
        raise ValueError("target_c must be positive")
    if is_tensor:
        mean = w.mean(dim=1, keepdim=True)
        return mean.repeat(1, target_c, 1, 1)
    mean = w.mean(axis=1, keepdims=True)
    return np.repeat(mean, target_c, axis=1)


@dataclass
class TransferReport:
    copied: list[str] = field(default_factory=list)
    adapted: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


FIRST_CONV = "stem.conv1.weight"


def transfer_encoder(checkpoint, target: SegmentationNet, group: str = "encoder",
                     allow_adapt: bool = False) -> TransferReport:
    """Copy one encoder group of ``checkpoint`` into ``target.encoder``.

    The projection group is discarded and the decoder keeps its fresh
    initialization. When ``allow_adapt`` is set, a 3-channel first layer is
    channel-averaged onto a 2-channel target. The copy is all-or-nothing and
    never mutates ``checkpoint``.
    """
    src = checkpoint.groups[group]
    src_fp = checkpoint.spec_fingerprints.get(group)
    tgt_spec = target.enc_spec
    adapt = False
    if src_fp != spec_fingerprint(tgt_spec):
        src_spec = checkpoint.specs.get(group)
        if (
            allow_adapt
            and src_spec is not None
            and src_spec.get("input_channels") == 3
            and tgt_spec.input_channels != 3
            and src_fp == spec_fingerprint(EncoderSpec(**{**_spec_kwargs(src_spec), "input_channels": 3}))
            and spec_fingerprint(EncoderSpec(**{**_spec_kwargs(src_spec),
                                                "input_channels": tgt_spec.input_channels}))
            == spec_fingerprint(tgt_spec)
        ):
            adapt = True
        else:
            raise FingerprintMismatch(
                f"checkpoint group {group!r} spec {src_fp} does not match target {spec_fingerprint(tgt_spec)}"
            )

    report = TransferReport()
    target_state = target.encoder.state_dict()
    staged = {}
    for name, value in src.items():
        if name not in target_state:
            raise FingerprintMismatch(f"unexpected parameter {name!r} in checkpoint")
        value = torch.as_tensor(value).clone()
        if adapt and name == FIRST_CONV:
            value = adapt_input_channels(value, tgt_spec.input_channels)
            report.adapted.append(name)
        if value.shape != target_state[name].shape:
            raise FingerprintMismatch(f"shape mismatch for {name!r}")
        staged[name] = value.to(target_state[name].dtype)
    missing = set(target_state) - set(staged)
    if missing:
        raise FingerprintMismatch(f"checkpoint lacks {sorted(missing)[:3]}...")
    target.encoder.load_state_dict(staged)
    report.copied = sorted(n for n in staged if n not in report.adapted)
    for other, params in checkpoint.groups.items():
        if other != group:
            report.skipped.extend(f"{other}.{n}" for n in sorted(params))
    return report


def _spec_kwargs(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
