#!/usr/bin/env python3
"""Build a synthetic world and look at it.

Generates both terrain styles, simulates a short drive over the hilly
one, and renders the three camera views plus the ground-truth elevation
crop for a single frame. Outputs land in demos/output/01/.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from elevmap import (
    GridSpec,
    crop_gt_map,
    default_rig,
    generate_terrain,
    render_views,
    simulate_trajectory,
)

OUT = Path(__file__).parent / "output" / "01"
OUT.mkdir(parents=True, exist_ok=True)

print("== terrain styles ==")
for style in ("desert_flat", "hilly"):
    t = generate_terrain(seed=7, style=style)
    h = t.heightfield
    print(f"{style:>12s}: std {h.std():5.2f} m, range {h.min():6.2f} .. {h.max():5.2f} m")
    # top-down heightfield picture
    norm = (h - h.min()) / (h.max() - h.min() + 1e-12)
    Image.fromarray((norm * 255).astype(np.uint8)).save(OUT / f"terrain_{style}.png")

terrain = generate_terrain(seed=7, style="hilly")
poses = simulate_trajectory(terrain, seed=7, num_frames=40)
rolls = np.array([p.roll for p in poses])
pitches = np.array([p.pitch for p in poses])
print(f"\n40-frame drive: |roll| up to {np.abs(rolls).max():.2f} rad, "
      f"|pitch| up to {np.abs(pitches).max():.2f} rad")

rig = default_rig(image_size=64)
frame = 25
images = render_views(terrain, poses[frame], rig)
for name, img in zip(("front", "left", "right"), images):
    Image.fromarray(img, "RGB").resize((256, 256), Image.NEAREST).save(OUT / f"view_{name}.png")
print(f"rendered frame {frame} at pose roll={poses[frame].roll:+.2f} "
      f"pitch={poses[frame].pitch:+.2f}")

grid = GridSpec(32, 32, 1.0)
gt = crop_gt_map(terrain, poses[frame], grid)
print(f"ground-truth crop: anchor={gt.values[grid.anchor]:.1f} (always 0), "
      f"range {gt.values.min():.2f} .. {gt.values.max():.2f} m")
norm = (gt.values - gt.values.min()) / np.ptp(gt.values)
Image.fromarray((norm[::-1] * 255).astype(np.uint8)).resize((256, 256), Image.NEAREST).save(
    OUT / "gt_map.png"
)
print(f"\nwrote images to {OUT}")
