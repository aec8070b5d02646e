"""Grad-CAM over time-arrow predictions and top-k region ranking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .errors import DimensionError, WrongHeadError
from .model import HeadKind, ModelBundle, to_input


@dataclass
class AttributionMap:
    heatmap: np.ndarray
    target: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RankedRegion:
    row: int
    col: int
    size: int
    score: float
    rank: int

    def to_dict(self) -> dict:
        return asdict(self)


def _pad_to_multiple(x: torch.Tensor, m: int):
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x, (h, w)


def _resolve_layer(layer: int | str, n_levels: int) -> int:
    if layer == "skip":
        return n_levels - 2
    if layer == "deepest":
        return n_levels - 1
    if isinstance(layer, int) and -n_levels <= layer < n_levels:
        return layer % n_levels
    raise DimensionError(f"layer must be 'skip', 'deepest' or an index below {n_levels}, got {layer!r}")


def grad_cam(bundle: ModelBundle, frame_t: np.ndarray, frame_t1: np.ndarray, target_class: int = 0,
             layer: int | str = "skip") -> AttributionMap:
    """Gradient-weighted activation map for one TAP logit.

    The target layer is an encoder block output, taken for both frames
    together: each (frame, channel) activation map gets its own weight (the
    spatially averaged gradient of the target logit), the weighted maps are
    summed over channels and both frames, rectified, and upsampled
    bilinearly to the frame size. Summing before rectification lets a
    static cell's contributions from the two frames cancel, so the map
    highlights what changed.

    ``layer`` is ``"skip"`` (default: the block whose output the decoder
    merges, at the resolution of the dense features), ``"deepest"`` (the
    bottom of the encoder) or an encoder index (0 is the full-resolution
    stem). ``target_class`` 0 is the logit for "the first frame is
    earlier", i.e. the true order when the frames are passed as (t, t+1).
    """
    if bundle.head_kind is not HeadKind.TAP:
        raise WrongHeadError(f"grad_cam needs a TAP head, bundle has {bundle.head_kind.value}")
    frame_t, frame_t1 = np.asarray(frame_t), np.asarray(frame_t1)
    if frame_t.shape != frame_t1.shape or frame_t.ndim != 2:
        raise DimensionError(f"frames must be equal 2-D arrays, got {frame_t.shape} and {frame_t1.shape}")
    index = _resolve_layer(layer, len(bundle.backbone.encoder))
    bundle.eval()
    m = bundle.backbone_config.input_multiple
    x, (h, w) = _pad_to_multiple(to_input(np.stack([frame_t, frame_t1])), m)
    with torch.enable_grad():
        z, encoder = bundle.backbone(x, return_encoder=True)
        act = encoder[index]
        logits = bundle.head(z[:1], z[1:])
        score = logits[0, target_class]
        (grads,) = torch.autograd.grad(score, act)
    weights = grads.mean(dim=(-2, -1), keepdim=True)
    cam = F.relu((weights * act.detach()).sum(dim=(0, 1)))[None, None]
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0, :h, :w]
    heat = np.maximum(cam.numpy().astype(np.float64), 0.0)
    return AttributionMap(heat, {"head": "tap", "class_index": target_class, "layer": f"encoder.{index}"})


def window_means(heatmap: np.ndarray, size: int) -> np.ndarray:
    """Mean of every ``size`` x ``size`` window, indexed by top-left corner."""
    a = np.asarray(heatmap, dtype=np.float64)
    ii = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    ii[1:, 1:] = a.cumsum(0).cumsum(1)
    s = size
    sums = ii[s:, s:] - ii[:-s, s:] - ii[s:, :-s] + ii[:-s, :-s]
    return sums / (s * s)


def top_k_regions(attribution: AttributionMap | np.ndarray, k: int = 8, region_size: int = 96) -> list[RankedRegion]:
    """Greedy non-overlapping windows of maximal mean attribution.

    Each step takes the best window that does not overlap an earlier pick;
    ties resolve in row-major order (top-left first). Fewer than ``k``
    regions come back when no non-overlapping window remains.
    """
    heat = attribution.heatmap if isinstance(attribution, AttributionMap) else np.asarray(attribution)
    h, w = heat.shape
    if region_size < 1 or region_size > min(h, w):
        raise DimensionError(f"region size {region_size} does not fit a {h}x{w} map")
    if k < 1:
        raise ValueError("k must be >= 1")
    means = window_means(heat, region_size)
    free = np.ones_like(means, dtype=bool)
    out: list[RankedRegion] = []
    s = region_size
    while len(out) < k and free.any():
        cand = np.where(free, means, -np.inf)
        idx = int(np.argmax(cand))
        r, c = divmod(idx, cand.shape[1])
        out.append(RankedRegion(r, c, s, float(means[r, c]), len(out) + 1))
        free[max(r - s + 1, 0):r + s, max(c - s + 1, 0):c + s] = False
    return out


def render_explanation(frame_t: np.ndarray, frame_t1: np.ndarray, attribution: AttributionMap,
                       regions: list[RankedRegion], out_dir: str | Path) -> dict[str, Path]:
    """Overlay image with numbered boxes, crop strips at t and t+1, and a JSON region list."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Rectangle

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    heat = attribution.heatmap
    norm = heat / heat.max() if heat.max() > 0 else heat

    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(frame_t, cmap="gray", vmin=0, vmax=255)
    ax.imshow(norm, cmap="jet", alpha=0.4)
    for reg in regions:
        ax.add_patch(Rectangle((reg.col - 0.5, reg.row - 0.5), reg.size, reg.size, fill=False, color="yellow"))
        ax.text(reg.col, reg.row, str(reg.rank), color="yellow", va="bottom")
    ax.axis("off")
    fig.tight_layout()
    overlay = out_dir / "overlay.png"
    fig.savefig(overlay, dpi=100)
    plt.close(fig)

    n = max(len(regions), 1)
    fig, axes = plt.subplots(2, n, figsize=(1.6 * n, 3.4), squeeze=False)
    for j, reg in enumerate(regions):
        sl = (slice(reg.row, reg.row + reg.size), slice(reg.col, reg.col + reg.size))
        for i, fr in enumerate((frame_t, frame_t1)):
            axes[i, j].imshow(fr[sl], cmap="gray", vmin=0, vmax=255)
            axes[i, j].set_xticks([])
            axes[i, j].set_yticks([])
        axes[0, j].set_title(str(reg.rank))
    axes[0, 0].set_ylabel("t")
    axes[1, 0].set_ylabel("t+1")
    fig.tight_layout()
    strips = out_dir / "regions.png"
    fig.savefig(strips, dpi=100)
    plt.close(fig)

    listing = out_dir / "regions.json"
    listing.write_text(json.dumps({"target": attribution.target,
                                   "regions": [r.to_dict() for r in regions]}, indent=1))
    np.save(out_dir / "heatmap.npy", heat)
    return {"overlay": overlay, "strips": strips, "regions": listing, "heatmap": out_dir / "heatmap.npy"}
