"""
Overlap fusion between neighbouring chunks
==========================================

Chunk i+1 re-predicts the last few frames of chunk i as its local context.
Where the two predictions overlap they are blended with frame-wise weights
that hand control to the successor as the overlap approaches its own frames.
This script prints those weights and shows on which sampling steps each
schedule fuses.
"""

import numpy as np

from vindit.diffusion import FusionConfig, fuse_pair, fusion_active, fusion_weights

# Four overlap frames, one token per frame. Weight W(k) out of F_local goes to
# the successor's prediction, the remainder stays with the current chunk.
F_local = 4
W = fusion_weights(F_local, tokens_per_frame=1)
print("successor weight per overlap frame:", (W / F_local).tolist())

# Blend a chunk that predicted 0 everywhere with a successor that predicted 4.
own = np.zeros((F_local, 1))
succ = np.full((F_local, 1), 4.0)
print("fused overlap:", fuse_pair(own, succ, W, F_local).ravel().tolist())

# %%
# Which sampling steps fuse? Sampling runs t = 49 down to 1.
steps = range(49, 0, -1)
schedules = {
    "early (t > 20)": FusionConfig("early", 20),
    "mid (15 < t < 35)": FusionConfig("mid", 35, 15),
    "late (t < 20)": FusionConfig("late", 20),
    "none": FusionConfig("none"),
}
for label, cfg in schedules.items():
    mask = "".join("#" if fusion_active(t, cfg) else "." for t in steps)
    print(f"{label:<18} {sum(fusion_active(t, cfg) for t in steps):>2} steps  {mask}")
