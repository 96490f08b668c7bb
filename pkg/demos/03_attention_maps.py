"""Where do the two class tokens look? Train briefly, capture attention for
one frame, print the distraction token's layer-by-layer row over the driver
grid, and write heatmaps plus the token-interaction table.

    python3 demos/03_attention_maps.py [workdir]
"""

import dataclasses
import sys
import tempfile
from pathlib import Path

import numpy as np

from vitdd import ModelConfig, TrainConfig, init_params, no_grad
from vitdd.attention import extract_class_attention, interaction_rows, render_sample, reshape_to_grid
from vitdd.data import NON_FACE, SyntheticSpec, generate_synthetic, load_model_image, resolve
from vitdd.model import DIST, DRIVER, forward
from vitdd.training import train_loop

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="vitdd-attn-"))
cfg = ModelConfig.desk()

# Ground-truth emotions stand in for pseudo labels here; face-less frames get Non-Face.
records = [r if r.face_path else dataclasses.replace(r, emotion=NON_FACE)
           for r in generate_synthetic(SyntheticSpec(samples_per_class=4, face_size=8), work / "data")]
params = init_params(cfg, seed=0)
train_loop(records, work / "data", params, cfg,
           TrainConfig(base_lr=1e-3, total_epochs=60, batch_size=8, crop_pad=1))

rec = next(r for r in records if r.face_path)
driver = load_model_image(resolve(work / "data", rec.driver_path), cfg.driver_size)
face = load_model_image(resolve(work / "data", rec.face_path), cfg.face_size)
with no_grad():
    dist, _, attn = forward(driver[None], face[None], params, cfg, capture=True)
attn = [a[0] for a in attn]
print(f"sample {rec.sample_id}: class {rec.distraction}, predicted {int(np.argmax(dist.data))}")

np.set_printoptions(precision=3, suppress=True)
for r in extract_class_attention(attn, cfg, DIST):
    print(f"layer {r.layer}: dist -> driver patches (row sums to {r.row.sum():.6f})")
    print(reshape_to_grid(r.segment(DRIVER), cfg, DRIVER))

for layer, head, d2e, e2d in interaction_rows(attn, cfg, per_head=True):
    print(f"layer {layer} head {head}: dist->emo {d2e:.4f}  emo->dist {e2d:.4f}")

written, table = render_sample(rec.sample_id, attn, cfg, work / "viz")
print(f"wrote {len(written)} heatmaps and {table}")
