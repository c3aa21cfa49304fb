# %% [markdown]
# # Low-rank building blocks
#
# SVDApprox, the randomized variant, and the gradient-aligned matrix that
# seeds client factors.

# %%
import numpy as np

from fedsmooth.client import reconstruct_gradient_aligned
from fedsmooth.linalg import frobenius_norm, svd_approx, svd_exact, svd_randomized

rng = np.random.default_rng(0)
m = rng.standard_normal((8, 6))

# %% [markdown]
# Rank-r factors split the singular values evenly between B and A, so
# ``B.T @ B`` and ``A @ A.T`` are the same diagonal matrix.

# %%
f = svd_approx(m, 2)
print(np.round(f.b.T @ f.b, 6))
print(np.round(f.a @ f.a.T, 6))
print("rank-2 error:", frobenius_norm(m - f.product()))
print("tail of the spectrum:", np.sqrt(np.sum(svd_exact(m).sigma[2:] ** 2)))

# %% [markdown]
# A spectrum with a clear gap is recovered by the sketch to machine precision.

# %%
q1, _ = np.linalg.qr(rng.standard_normal((60, 60)))
q2, _ = np.linalg.qr(rng.standard_normal((40, 40)))
sigma = np.concatenate([[9.0, 7.0, 5.0], np.linspace(0.4, 0.01, 37)])
gapped = (q1[:, :40] * sigma) @ q2.T
approx = svd_randomized(gapped, 3, rng=np.random.default_rng(1))
print("randomized:", approx.sigma)
print("exact:     ", svd_exact(gapped).sigma[:3])

# %% [markdown]
# The gradient-aligned matrix pairs the second block of left singular vectors
# with the first block of right ones. Its norm depends only on the shape, the
# rank and gamma.

# %%
g = rng.standard_normal((8, 16))
for gamma in (16.0, 64.0, 256.0):
    w = reconstruct_gradient_aligned(g, 2, gamma)
    print(f"gamma={gamma:>5}: |W| = {frobenius_norm(w):.3e}, sqrt(8*2)/gamma^2 = {np.sqrt(16) / gamma**2:.3e}")
