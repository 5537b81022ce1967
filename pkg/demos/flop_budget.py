"""
Where the FLOPs go
==================

Full attention over a long video costs a linear term (projections, FFN) plus
a quadratic term (scores and weighted values). Chunk-parallel generation
trades the quadratic term for repeated work on local context, global tokens
and text rows. This walk-through prints both budgets at the scale of a large
latent video model.
"""

from vindit import profiler as P

# Shapes of a large latent video model: 5 latent frames per 16 pixel frames,
# 240 tokens per latent frame, 20-frame chunks with 12 frames of context.
proxy = P.LARGE_PROXY
cfg = proxy.shape(256)
print(f"256 frames -> {cfg.N} tokens in {cfg.n_chunks} chunks of {cfg.N_s}")

full = P.full_flops(cfg)
vin = P.vin_flops(cfg)
print(f"{'category':<12}{'full':>14}{'chunked':>14}")
for name in P.CATEGORIES:
    print(f"{name:<12}{getattr(full, name) / 1e12:>13.1f}T{getattr(vin, name) / 1e12:>13.1f}T")
print(f"{'total':<12}{full.total / 1e12:>13.1f}T{vin.total / 1e12:>13.1f}T")

# %%
# The quadratic term only dominates once the sequence is long, so savings grow
# with length and turn positive late.
for row in P.sweep(proxy):
    print(f"{row.frames:>4} frames  savings {row.savings:+.1%}")

# %%
# Collapse to one chunk with no context and no global tokens: the two routes
# are then the same computation and the counts agree exactly.
red = P.degenerate(cfg)
print("degenerate equal:", P.vin_flops(red).total == P.full_flops(red).total)
