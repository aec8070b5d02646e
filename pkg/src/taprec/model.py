"""Networks: U-net dense feature map, time-equivariant TAP head, event heads.

Checkpoints use a small versioned binary container (see ``save_bundle``).
"""

from __future__ import annotations

import copy
import dataclasses
import enum
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import CheckpointError, ConfigError, DimensionError


@dataclass(frozen=True)
class BackboneConfig:
    """U-net layout.

    The encoder has a full-resolution stem followed by ``n_blocks`` blocks,
    each entered through ``downsample_factor`` average pooling. One decoder
    stage upsamples the deepest block and merges the skip connection of the
    block above it, so features come out at stride
    ``downsample_factor ** (n_blocks - 1)``.
    """

    n_blocks: int = 3
    base_channels: int = 32
    feature_channels: int = 32
    downsample_factor: int = 2

    def validate(self) -> None:
        if self.n_blocks < 1:
            raise ConfigError("backbone.n_blocks", "must be >= 1")
        for name in ("base_channels", "feature_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"backbone.{name}", "must be >= 1")
        if self.downsample_factor < 2:
            raise ConfigError("backbone.downsample_factor", "must be >= 2")

    @property
    def output_stride(self) -> int:
        return self.downsample_factor ** (self.n_blocks - 1)

    @property
    def input_multiple(self) -> int:
        """Input height and width must be multiples of this."""
        return self.downsample_factor ** self.n_blocks

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class HeadKind(str, enum.Enum):
    TAP = "tap"
    LINEAR = "linear"
    RESNET = "resnet"

    @property
    def is_event_head(self) -> bool:
        return self is not HeadKind.TAP


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(),
    )


class UNet(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        f = config.downsample_factor
        widths = [config.base_channels * 2 ** k for k in range(config.n_blocks + 1)]
        self.widths = widths
        self.pool = nn.AvgPool2d(f)
        self.encoder = nn.ModuleList(
            [_conv_block(1, widths[0])] + [_conv_block(widths[k - 1], widths[k]) for k in range(1, len(widths))]
        )
        self.decoder = _conv_block(widths[-1] + widths[-2], widths[-2])
        self.out = nn.Conv2d(widths[-2], config.feature_channels, 1)

    def forward(self, x: torch.Tensor, return_encoder: bool = False):
        """``x``: (B, 1, H, W) in [0, 1] -> (B, c0, H/s, W/s).

        With ``return_encoder`` also returns the list of encoder block outputs,
        shallowest first.
        """
        m = self.config.input_multiple
        if x.shape[-1] % m or x.shape[-2] % m:
            raise DimensionError(f"input {tuple(x.shape[-2:])} not divisible by {m}")
        skips = []
        h = x
        for k, block in enumerate(self.encoder):
            if k > 0:
                h = self.pool(h)
            h = block(h)
            skips.append(h)
        up = F.interpolate(h, scale_factor=self.config.downsample_factor, mode="nearest")
        h = self.decoder(torch.cat([up, skips[-2]], dim=1))
        z = self.out(h)
        if return_encoder:
            return z, skips
        return z


class TapHead(nn.Module):
    """Time-arrow head with swap equivariance built into its structure.

    Both feature maps go through the same embedding ``e``. A shared
    classifier scores ``[e_a - e_b, e_a + e_b]`` for the first logit and
    ``[e_b - e_a, e_a + e_b]`` for the second, so ``u(a, b) = (p, q)``
    implies ``u(b, a) = (q, p)`` for any weights.
    """

    def __init__(self, in_channels: int, hidden: int = 32):
        super().__init__()
        self.embed = nn.Sequential(nn.Conv2d(in_channels, hidden, 3, padding=1), nn.ReLU())
        self.mix = nn.Sequential(
            nn.Conv2d(2 * hidden, hidden, 1), nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.ReLU(),
        )
        self.fc = nn.Linear(hidden, 1)

    def _score(self, d: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        return self.fc(self.mix(torch.cat([d, s], dim=1)).mean(dim=(-2, -1)))

    def forward(self, z_a: torch.Tensor, z_b: torch.Tensor) -> torch.Tensor:
        if z_a.shape != z_b.shape:
            raise DimensionError(f"feature shapes differ: {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
        e_a, e_b = self.embed(z_a), self.embed(z_b)
        d, s = e_a - e_b, e_a + e_b
        return torch.cat([self._score(d, s), self._score(-d, s)], dim=1)


class LinearEventHead(nn.Module):
    def __init__(self, in_channels: int, symmetrize: bool = False):
        super().__init__()
        self.symmetrize = symmetrize
        self.fc = nn.Linear(2 * in_channels, 2)

    def _forward(self, z_a, z_b):
        return self.fc(torch.cat([z_a.mean(dim=(-2, -1)), z_b.mean(dim=(-2, -1))], dim=1))

    def forward(self, z_a, z_b):
        if z_a.shape != z_b.shape:
            raise DimensionError(f"feature shapes differ: {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
        if self.symmetrize:
            return 0.5 * (self._forward(z_a, z_b) + self._forward(z_b, z_a))
        return self._forward(z_a, z_b)


class ResNetEventHead(nn.Module):
    """One conv layer, one residual block, temporal mean pool, spatial average pool, 2 logits.

    The pair is stacked along a length-2 time axis and processed with 3-D
    convolutions, so the head can compare the two time points before pooling.
    """

    def __init__(self, in_channels: int, width: int = 32, symmetrize: bool = False):
        super().__init__()
        self.symmetrize = symmetrize
        self.conv = nn.Conv3d(in_channels, width, 3, padding=1)
        self.res1 = nn.Conv3d(width, width, 3, padding=1)
        self.res2 = nn.Conv3d(width, width, 3, padding=1)
        self.fc = nn.Linear(width, 2)

    def _forward(self, z_a, z_b):
        x = torch.stack([z_a, z_b], dim=2)
        x = F.relu(self.conv(x))
        x = F.relu(x + self.res2(F.relu(self.res1(x))))
        x = x.mean(dim=2).mean(dim=(-2, -1))
        return self.fc(x)

    def forward(self, z_a, z_b):
        if z_a.shape != z_b.shape:
            raise DimensionError(f"feature shapes differ: {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
        if self.symmetrize:
            return 0.5 * (self._forward(z_a, z_b) + self._forward(z_b, z_a))
        return self._forward(z_a, z_b)


def build_head(kind: HeadKind | str, in_channels: int, width: int = 32, symmetrize: bool = False) -> nn.Module:
    kind = HeadKind(kind)
    if kind is HeadKind.TAP:
        if symmetrize:
            raise ConfigError("head.symmetrize", "not allowed for the TAP head")
        return TapHead(in_channels, width)
    if kind is HeadKind.LINEAR:
        return LinearEventHead(in_channels, symmetrize)
    return ResNetEventHead(in_channels, width, symmetrize)


def kaiming_uniform_init(module: nn.Module, generator: torch.Generator) -> None:
    """Weights ~ U(-b, b) with b = sqrt(2) * sqrt(3 / fan_in); biases zero."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=0, mode="fan_in", nonlinearity="relu", generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass
class ModelBundle:
    backbone_config: BackboneConfig
    head_kind: HeadKind
    backbone: UNet
    head: nn.Module
    head_width: int = 32
    symmetrize: bool = False
    provenance: dict = field(default_factory=dict)
    temperature: float | None = None

    def copy(self) -> "ModelBundle":
        return copy.deepcopy(self)

    def eval(self) -> "ModelBundle":
        self.backbone.eval()
        self.head.eval()
        return self

    def config_dict(self) -> dict:
        return {
            "backbone": self.backbone_config.to_dict(),
            "head_kind": self.head_kind.value,
            "head_width": self.head_width,
            "symmetrize": self.symmetrize,
        }

    @property
    def config_digest(self) -> str:
        return hashlib.sha256(json.dumps(self.config_dict(), sort_keys=True).encode()).hexdigest()

    def with_head(self, kind: HeadKind | str, seed: int, width: int | None = None,
                  symmetrize: bool = False) -> "ModelBundle":
        """Copy of this bundle's backbone with a freshly initialized head of ``kind``."""
        kind = HeadKind(kind)
        width = self.head_width if width is None else width
        head = build_head(kind, self.backbone_config.feature_channels, width, symmetrize)
        kaiming_uniform_init(head, torch.Generator().manual_seed(seed))
        return ModelBundle(self.backbone_config, kind, copy.deepcopy(self.backbone), head, width, symmetrize,
                           dict(self.provenance), None)


def init_random(config: BackboneConfig, seed: int, head_kind: HeadKind | str = HeadKind.TAP,
                head_width: int = 32, symmetrize: bool = False) -> ModelBundle:
    config.validate()
    kind = HeadKind(head_kind)
    g = torch.Generator().manual_seed(seed)
    backbone = UNet(config)
    kaiming_uniform_init(backbone, g)
    head = build_head(kind, config.feature_channels, head_width, symmetrize)
    kaiming_uniform_init(head, g)
    return ModelBundle(config, kind, backbone, head, head_width, symmetrize,
                       provenance={"init": "kaiming_uniform", "init_seed": seed})


def to_input(images) -> torch.Tensor:
    """uint8 (H, W) / (B, H, W) arrays -> float (B, 1, H, W) tensor in [0, 1]."""
    x = torch.as_tensor(np.ascontiguousarray(images), dtype=torch.float32)
    if x.ndim == 2:
        x = x[None]
    return (x / 255.0)[:, None]


def encode(image: np.ndarray, bundle: ModelBundle) -> np.ndarray:
    """Dense features of one 8-bit image, shape (c0, h0, w0)."""
    image = np.asarray(image)
    m = bundle.backbone_config.input_multiple
    if image.ndim != 2 or image.shape[0] % m or image.shape[1] % m:
        raise DimensionError(f"image shape {image.shape} must be 2-D with sides divisible by {m}")
    bundle.backbone.eval()
    with torch.no_grad():
        z = bundle.backbone(to_input(image))
    return z[0].numpy()


def tap_head_forward(z_t, z_t1, bundle_or_head) -> tuple[torch.Tensor, torch.Tensor]:
    head = bundle_or_head.head if isinstance(bundle_or_head, ModelBundle) else bundle_or_head
    z_t, z_t1 = torch.as_tensor(z_t), torch.as_tensor(z_t1)
    squeeze = z_t.ndim == 3
    if squeeze:
        z_t, z_t1 = z_t[None], z_t1[None]
    logits = head(z_t, z_t1)
    if squeeze:
        logits = logits[0]
    return logits[..., 0], logits[..., 1]


def event_head_forward(z_t, z_t1, head: nn.Module) -> torch.Tensor:
    z_t, z_t1 = torch.as_tensor(z_t), torch.as_tensor(z_t1)
    if z_t.ndim == 3:
        return head(z_t[None], z_t1[None])[0]
    return head(z_t, z_t1)


def state_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# Checkpoint layout (little-endian):
#   magic       8 bytes b"TAPRECKP"
#   version     u16
#   header_len  u32, then header_len bytes of UTF-8 JSON:
#               format_version, config, config_digest, head_kind, provenance,
#               temperature, payload_sha256, records: [{name, dtype, shape, offset, nbytes}]
#   payload     concatenated raw tensors; record offsets are relative to payload start
CHECKPOINT_MAGIC = b"TAPRECKP"
CHECKPOINT_VERSION = 1
_CK_HEAD = struct.Struct("<8sHI")


def save_bundle(bundle: ModelBundle, path: str | Path) -> None:
    records, chunks, offset = [], [], 0
    for prefix, module in (("backbone", bundle.backbone), ("head", bundle.head)):
        for name, t in module.state_dict().items():
            arr = t.detach().cpu().contiguous().numpy()
            raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
            records.append({"name": f"{prefix}.{name}", "dtype": str(arr.dtype), "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": bundle.config_dict(),
        "config_digest": bundle.config_digest,
        "head_kind": bundle.head_kind.value,
        "provenance": bundle.provenance,
        "temperature": bundle.temperature,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "records": records,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CK_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(hb)))
        fh.write(hb)
        fh.write(payload)


def load_bundle(path: str | Path) -> ModelBundle:
    buf = Path(path).read_bytes()
    if len(buf) < _CK_HEAD.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _CK_HEAD.unpack_from(buf, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a taprec checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(buf[_CK_HEAD.size:_CK_HEAD.size + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from None
    payload = buf[_CK_HEAD.size + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch (file corrupted)")
    cfg = header["config"]
    bcfg = BackboneConfig(**cfg["backbone"])
    kind = HeadKind(cfg["head_kind"])
    backbone = UNet(bcfg)
    head = build_head(kind, bcfg.feature_channels, cfg["head_width"], cfg["symmetrize"])
    bundle = ModelBundle(bcfg, kind, backbone, head, cfg["head_width"], cfg["symmetrize"],
                         header.get("provenance", {}), header.get("temperature"))
    if bundle.config_digest != header["config_digest"]:
        raise CheckpointError(f"{path}: config digest mismatch")
    states = {"backbone": backbone.state_dict(), "head": head.state_dict()}
    seen = set()
    for rec in header["records"]:
        prefix, name = rec["name"].split(".", 1)
        target = states.get(prefix, {}).get(name)
        if target is None:
            raise CheckpointError(f"{path}: unexpected weight record {rec['name']}")
        if list(target.shape) != rec["shape"]:
            raise CheckpointError(
                f"{path}: shape mismatch for {rec['name']}: file {rec['shape']}, model {list(target.shape)}")
        arr = np.frombuffer(payload, dtype=np.dtype(rec["dtype"]).newbyteorder("<"),
                            count=math.prod(rec["shape"]), offset=rec["offset"])
        target.copy_(torch.from_numpy(arr.reshape(rec["shape"]).astype(rec["dtype"])))
        seen.add(rec["name"])
    missing = {f"{p}.{n}" for p, sd in states.items() for n in sd} - seen
    if missing:
        raise CheckpointError(f"{path}: missing weight records {sorted(missing)}")
    backbone.load_state_dict(states["backbone"])
    head.load_state_dict(states["head"])
    return bundle.eval()
