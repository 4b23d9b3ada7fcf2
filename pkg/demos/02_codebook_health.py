"""
Why the clustering quantizer keeps its codebook alive
=====================================================

Plain vector quantization tends to collapse: a few codes absorb every latent
and the rest never move. The clustering variant normalises latents and codes,
adds a contrastive term and periodically pulls under-used codes toward recent
latents. On eight well-separated clusters and sixteen codes the difference in
the fraction of codes still in use is large.
"""

import numpy as np

from singstyle.cvq import codebook_usage_run

rows = []
for seed in range(10):
    cvq = codebook_usage_run(seed, clustering=True)
    vq = codebook_usage_run(seed, clustering=False)
    rows.append((cvq, vq))
    print(f"seed {seed}: clustering {cvq:.2f}   plain {vq:.2f}")

rows = np.array(rows)
print(f"mean used-code fraction: clustering {rows[:, 0].mean():.2f}, plain {rows[:, 1].mean():.2f}")
print(f"clustering at least as healthy in {(rows[:, 0] >= rows[:, 1]).sum()}/10 paired runs")
