"""
Patch agreement versus structural agreement
===========================================

Two feature maps can agree patch by patch and still relate their patches to
each other differently.  The structural loss compares the patch-to-patch
cosine matrices, so it only sees the second kind of disagreement.
"""

import numpy as np

from multialign.alignment import autocorrelation, patch_alignment_loss, structural_loss
from multialign.diagnostics import grid_coords, patch_correlation_map, svd_energy
from multialign.tensor import Tensor

rng = np.random.default_rng(1)
N, D = 16, 8

# target features: three "regions" on a 4x4 grid, each with its own direction
owner = np.array([0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 1, 1, 2, 2, 2, 2])
basis = rng.standard_normal((3, D))
z = basis[owner] + 0.1 * rng.standard_normal((N, D))

# a rotated copy keeps the geometry and loses every per-patch match
q, _ = np.linalg.qr(rng.standard_normal((D, D)))
rotated = z @ q
# a rescaled copy keeps both
scaled = 3.0 * z
# per-patch noise keeps rough matches but blurs the regions
noisy = z + 0.8 * rng.standard_normal((N, D))

print(f"{'candidate':<10} {'patch cos':>10} {'structural':>11}")
for name, h in [("scaled", scaled), ("rotated", rotated), ("noisy", noisy)]:
    cos = -patch_alignment_loss(z[None], Tensor(h[None])).item()
    struc = structural_loss(z[None], Tensor(h[None])).item()
    print(f"{name:<10} {cos:>10.4f} {struc:>11.4f}")

# correlation map of the top-left patch, laid out on the grid
for name, h in [("target", z), ("noisy", noisy)]:
    m = patch_correlation_map(h, 0)
    print(f"\n{name}: similarity to patch 0")
    print(np.round(m.reshape(4, 4), 2))
print("grid coordinates of patch 6:", grid_coords(N)[6])

# autocorrelation is what the structural loss compares
a = autocorrelation(Tensor(z[None])).data[0]
print("\nsymmetric:", np.allclose(a, a.T), " unit diagonal:", np.allclose(np.diag(a), 1))

# redundancy: region-structured features put most energy in few directions
print("energy in top 3 directions, target :", round(svd_energy(z, 3), 4))
print("energy in top 3 directions, noisy  :", round(svd_energy(noisy, 3), 4))
