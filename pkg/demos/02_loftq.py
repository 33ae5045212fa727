# %% [markdown]
# # Quantization-aware adapter initialization
#
# A LoRA adapter adds a low-rank term `A @ B` to a frozen weight.  If the
# frozen weight is quantized, the adapter can start out absorbing the
# quantization error instead of starting at zero.  The alternation is:
# quantize `W - A B`, then refit `A B` to what the codec lost.

# %%
import numpy as np

from mixq import build_codebook, dequantize, loftq_init, quantize

rng = np.random.default_rng(1)
W = rng.normal(size=(16, 16))
cb = build_codebook(4, "nf")
plain = np.linalg.norm(W - dequantize(quantize(W, cb)))
print(f"plain 4-bit residual: {plain:.4f}")

# %%
for r in (0, 1, 2, 4, 8):
    init = loftq_init(W, cb, r=r, T=1)
    print(f"rank {r}: residual {init.residual_norm:.4f}")

# %% [markdown]
# More alternations help a little; the first one does most of the work.

# %%
init = loftq_init(W, cb, r=4, T=5)
print(" -> ".join(f"{h:.4f}" for h in init.history))
