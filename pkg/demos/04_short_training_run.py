"""
A short training run, scored and drawn
=======================================

Train the desk-scale network for a few dozen steps on eight synthetic clips,
score it on those clips, and write the first prediction as an SVG. The full
overfit experiment uses 500 steps; this one finishes in well under a minute.
"""

import os
import tempfile

from stanet.backbone import NetworkConfig
from stanet.evaluation import evaluate_clips
from stanet.scenegen import SceneSpec, dataset_to_clips, generate_dataset
from stanet.trainer import TrainConfig, predict, train
from stanet.viz import count_arrows, render_svg
from stanet.voxelizer import DESK_GRID

clips = list(dataset_to_clips(generate_dataset(SceneSpec(), 8, seed=0, grid=DESK_GRID)))
cfg = TrainConfig(lr=3e-3, max_steps=40, batch_size=2, network=NetworkConfig.desk("STAN"))

out = tempfile.mkdtemp(prefix="stanet-demo-")
result = train(cfg, out, clips=clips, grid=DESK_GRID)
first, last = result.rows[0], result.rows[-1]
print(f"loss {first['total']:.3f} -> {last['total']:.3f} after {result.steps} steps")
print("final terms:", {k: round(last[k], 4) for k in ("motion", "cls", "state")})

report = evaluate_clips(result.network, clips)
print(report.to_table(label="STAN (40 steps)"))

cls, gate, gated = predict(result.network, clips[:1])[0]
svg = render_svg(cls, gate, gated, DESK_GRID, title="clip 0 after 40 steps")
path = os.path.join(out, "clip0.svg")
with open(path, "w") as fh:
    fh.write(svg)
print(f"{count_arrows(svg)} motion arrows drawn to {path}")
