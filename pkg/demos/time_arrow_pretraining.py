"""Pretrain a small U-net on the time-arrow task and watch it beat chance.

Renders a synthetic movie with division-dominant event rates, trains the
backbone and TAP head jointly for a few epochs, and prints the validation
accuracy per epoch next to the same training on i.i.d. noise, where no
arrow of time exists. Runs in about a minute on one CPU.
"""

from __future__ import annotations

import torch

from taprec.model import BackboneConfig
from taprec.synthmovie import SynthConfig, generate_movie, noise_movie
from taprec.taptrain import AugmentationConfig, TapLossConfig, pretrain_tap


def main():
    torch.manual_seed(0)
    movie, _ = generate_movie(SynthConfig(n_frames=64, n_cells_init=12, division_rate=0.03, death_rate=0.01, seed=4))
    noise = noise_movie(64, 64, 64, seed=4)
    backbone = BackboneConfig(n_blocks=2, base_channels=8, feature_channels=16, downsample_factor=2)
    aug = AugmentationConfig.disabled(flip_pair_prob=0.5, rotation_deg=(0.0, 360.0))
    curves = {}
    for name, m in (("cells", movie), ("noise", noise)):
        _, history = pretrain_tap(m, backbone, TapLossConfig(0.01, 0.2), aug, epochs=8, patch=32,
                                  steps_per_epoch=16, head_width=16, n_val_pairs=400)
        curves[name] = [h["accuracy"] for h in history if h["split"] == "val"]
    print("epoch  val acc (cells)  val acc (noise)")
    for i, (a, b) in enumerate(zip(curves["cells"], curves["noise"]), 1):
        print(f"{i:5d}  {a:15.3f}  {b:15.3f}")


if __name__ == "__main__":
    main()
