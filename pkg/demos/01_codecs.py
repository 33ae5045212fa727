# %% [markdown]
# # Blockwise codecs
#
# Each weight matrix is flattened row-major, cut into blocks, and every block
# is scaled by its absolute maximum so the entries land in [-1, 1].  Each
# scaled value is then replaced by the index of its nearest codeword.

# %%
import numpy as np

from mixq import build_codebook, dequantize, quantize

rng = np.random.default_rng(0)
W = rng.normal(size=(32, 32))

# %% [markdown]
# Three codebooks are available.  Uniform spacing suits flat distributions;
# NormalFloat places its levels at normal quantiles, which matches Gaussian
# weights better at the same bit budget.

# %%
for bits, kind in [(4, "uniform"), (4, "nf"), (4, "fp4"), (8, "uniform")]:
    cb = build_codebook(bits, kind)
    err = np.sqrt(np.mean((dequantize(quantize(W, cb, 64)) - W) ** 2))
    print(f"{kind:>8} {bits}-bit  rms error {err:.5f}")

# %% [markdown]
# Smaller blocks cost more scale storage but track local magnitude better.

# %%
cb = build_codebook(4, "nf")
for block in (1, 16, 64, 1024):
    Q = quantize(W, cb, block)
    err = np.sqrt(np.mean((dequantize(Q) - W) ** 2))
    print(f"block {block:>4}: {Q.n_blocks:>4} scales, {len(Q.to_bytes()):>5} bytes, rms {err:.5f}")

# %% [markdown]
# The serialized form is a small header, the float64 scales, and the codes
# packed least-significant-bit first.

# %%
Q = quantize(W[:2, :4], cb, 4)
blob = Q.to_bytes()
print(blob.hex(" ", 4))
print(np.array_equal(dequantize(type(Q).from_bytes(blob)), dequantize(Q)))
