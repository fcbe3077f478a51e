"""
From a synthetic scene to a voxel clip
======================================

Generate one scene, sample lidar-like points, and turn the last twenty
frames into the five binary pseudo-images plus per-cell targets the network
is trained on.
"""

import numpy as np

from stanet.scenegen import SceneSpec, dataset_to_clips, generate_dataset
from stanet.voxelizer import CLASS_NAMES, DESK_GRID

# a 16 m x 16 m desk-scale grid: 64 x 64 cells of 0.25 m, 13 height bins
print("grid shape:", DESK_GRID.shape)

ds = generate_dataset(SceneSpec(), n_scenes=1, seed=0, grid=DESK_GRID)
scene = ds.scenes[0]
print(f"scene {scene.id}: {len(scene.actors)} actors, {scene.duration_frames} frames")
for a in scene.actors:
    print(f"  actor {a.id}: {CLASS_NAMES[a.cls]:<10} {a.length:.1f} x {a.width:.1f} m, "
          f"speed {a.speeds[0]:.1f} m/s")

# 40-frame scenes give one clip, keyed at frame 19
clip = next(dataset_to_clips(ds))
print("frames:", clip.frames.shape, "occupied voxels per frame:", clip.frames.reshape(5, -1).sum(axis=1))

# cells covered by an actor carry its class; moving ones carry 20 future offsets
counts = np.bincount(clip.class_target.reshape(-1), minlength=5)
for name, n in zip(CLASS_NAMES, counts):
    print(f"  {name:<10} {n:5d} cells")
moving = (clip.class_target != 0) & (clip.state_target == 0)
if moving.any():
    print("mean 1 s displacement of moving cells (m):",
          np.round(np.linalg.norm(clip.motion_target[-1][moving], axis=-1).mean(), 2))

# background and static cells never move
clip.check_invariants()
print("target consistency holds")
