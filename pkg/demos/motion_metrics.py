"""
Scoring temporal consistency
============================

Warp error W asks how well frame f+1, pulled back along the estimated flow,
reproduces frame f. On its own it rewards videos that barely move, so MAWE
divides it by the mean flow magnitude. Static clips have no motion to
normalise by and get an explicit "undefined" result.
"""

import numpy as np

from vindit import metrics as M
from vindit.patchio import translating_texture

# A random texture sliding two pixels right and one up per frame.
video, true_flows = translating_texture(32, 32, 8, vx=2, vy=-1)

est = M.estimate_flows(video)
print("estimated flow at the centre:", est[0].dx[16, 16], est[0].dy[16, 16])
print("usable pixels in pair 0:", int(est[0].mask.sum()), "of", est[0].mask.size)

report = M.evaluate(video, true_flows)
print(M.format_report(report))

# %%
# Add noise and the warp error rises while the motion stays the same.
noisy = video.values + 0.1 * np.random.default_rng(0).standard_normal(video.values.shape)
print("noisy MAWE:", M.evaluate(noisy, true_flows).mawe)

# %%
# A frozen clip: zero flow, so MAWE is undefined rather than zero.
frozen = np.repeat(video.values[:, :, :1], 8, axis=2)
print("frozen MAWE:", M.evaluate(frozen).mawe)

# %%
# Splicing two unrelated clips leaves a spike in frame differences.
ys, xs = np.mgrid[0:32, 0:32]
waves = lambda u: np.stack([np.sin(2 * np.pi * (u - 0.5 * f) / 32) for f in range(12)], -1)[..., None]
spliced = np.concatenate([waves(xs), waves(ys)], axis=2)
cuts = M.detect_scene_cuts(spliced)
print("cuts found after frames:", np.flatnonzero(cuts.flags).tolist())
