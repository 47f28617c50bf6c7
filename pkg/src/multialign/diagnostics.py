"""Representation diagnostics: patch correlation maps, SVD energy, Frechet distance."""

from __future__ import annotations

import csv
import json
import math
import os
from pathlib import Path

import numpy as np

from . import tensor as T
from .alignment import autocorrelation, patch_alignment_loss, structural_loss
from .interpolant import corrupt
from .networks import DenoiserNet, FrozenEncoder, ProjectionMLP
from .tensor import NumericError


def patch_correlation_map(h, ref: int) -> np.ndarray:
    """Cosine similarity of patch ``ref`` to every patch of ``h`` [N, D]."""
    h = np.asarray(h.data if isinstance(h, T.Tensor) else h)
    if h.ndim != 2:
        raise T.DimensionError(f"expected [N, D] features, got {h.shape}")
    n = h.shape[0]
    if not 0 <= ref < n:
        raise IndexError(f"reference patch {ref} outside [0, {n})")
    with T.no_grad():
        corr = autocorrelation(T.Tensor(h[None]))
    return corr.data[0, ref].copy()


def grid_coords(n: int) -> np.ndarray:
    g = math.isqrt(n)
    if g * g != n:
        raise T.DimensionError(f"{n} patches do not form a square grid")
    rows, cols = np.divmod(np.arange(n), g)
    return np.stack([rows, cols], axis=1)


def svd_energy(features, k: int) -> float:
    """Share of squared singular values captured by the top ``k``."""
    return float(energy_curve(features)[_check_k(features, k) - 1])


def energy_curve(features) -> np.ndarray:
    """Cumulative energy for k = 1 .. min(M, D)."""
    a = np.asarray(features.data if isinstance(features, T.Tensor) else features, dtype=np.float64)
    if a.ndim != 2:
        raise T.DimensionError(f"expected [M, D] features, got {a.shape}")
    s2 = T.svd_values(a) ** 2
    total = s2.sum()
    if total == 0:
        return np.ones(len(s2))
    return np.minimum(np.cumsum(s2) / total, 1.0)


def _check_k(features, k: int) -> int:
    m, d = np.shape(features.data if isinstance(features, T.Tensor) else features)
    if not 1 <= k <= min(m, d):
        raise ValueError(f"k={k} outside [1, {min(m, d)}]")
    return k


def _sqrt_psd(c: np.ndarray) -> np.ndarray:
    try:
        w, u = np.linalg.eigh(c)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    return (u * np.sqrt(np.clip(w, 0, None))) @ u.T


def frechet_gaussian(mu_a, cov_a, mu_b, cov_b) -> float:
    mu_a, mu_b = np.atleast_1d(np.asarray(mu_a, float)), np.atleast_1d(np.asarray(mu_b, float))
    cov_a, cov_b = np.atleast_2d(np.asarray(cov_a, float)), np.atleast_2d(np.asarray(cov_b, float))
    if cov_a.shape != cov_b.shape or cov_a.shape[0] != mu_a.shape[0] or mu_a.shape != mu_b.shape:
        raise T.DimensionError("moment shapes disagree")
    # tr (A B)^{1/2} = tr (A^{1/2} B A^{1/2})^{1/2}, whose argument is symmetric PSD
    ra = _sqrt_psd(cov_a)
    mid = ra @ cov_b @ ra
    try:
        w = np.linalg.eigvalsh((mid + mid.T) / 2)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    diff = mu_a - mu_b
    return max(float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt), 0.0)


def moments(x) -> tuple:
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    return x.mean(axis=0), np.cov(x, rowvar=False)


# ---------------------------------------------------------------------------
# report


def probe_features(
    denoiser: DenoiserNet | None,
    encoder: FrozenEncoder,
    proj: ProjectionMLP | None,
    x0: np.ndarray,
    y: np.ndarray,
    t_probe: float = 0.5,
    rng: np.random.Generator | None = None,
    use_projection: bool = True,
) -> tuple:
    """Return (z_enc, features) for one batch.

    ``features`` is h_den (projected) or raw z_den; with no denoiser the
    encoder is compared against itself.
    """
    with T.no_grad():
        z_enc = encoder(x0).data
        if denoiser is None:
            return z_enc, z_enc
        rng = rng or np.random.default_rng(0)
        x0 = np.asarray(x0, dtype=denoiser.dtype)
        eps = rng.standard_normal(x0.shape).astype(x0.dtype)
        t = np.full(len(x0), t_probe)
        noisy = corrupt(x0, eps, t)
        _, z_den = denoiser(noisy.x_t, t, y)
        feats = proj(z_den) if use_projection else z_den
    return z_enc, feats.data


def alignment_report(
    denoiser: DenoiserNet | None,
    encoder: FrozenEncoder,
    proj: ProjectionMLP | None,
    eval_set: tuple,
    t_probe: float = 0.5,
    out_dir: str | os.PathLike | None = None,
    refs=(0,),
    map_images: int = 2,
    use_projection: bool = True,
    chunk: int = 64,
    seed: int = 0,
    extra: dict | None = None,
) -> dict:
    """Aggregate alignment statistics over ``eval_set = (x0, y)``.

    Cosine and structural terms need matching widths, so they are reported as
    None when raw z_den is probed.
    """
    x0, y = eval_set
    if len(x0) == 0:
        raise ValueError("empty evaluation set")
    if not 0 < t_probe <= 1:
        raise T.DomainError(f"t_probe must lie in (0, 1], got {t_probe}")
    rng = np.random.default_rng(seed)
    enc_feats, den_feats = [], []
    cos_sum = struc_sum = 0.0
    comparable = denoiser is None or use_projection
    for lo in range(0, len(x0), chunk):
        z, h = probe_features(denoiser, encoder, proj, x0[lo : lo + chunk], y[lo : lo + chunk], t_probe, rng, use_projection)
        enc_feats.append(z)
        den_feats.append(h)
        if comparable:
            with T.no_grad():
                cos_sum += -patch_alignment_loss(z, T.Tensor(h)).item() * len(z)
                struc_sum += structural_loss(z, T.Tensor(h)).item() * len(z)
    z_all = np.concatenate(enc_feats)
    h_all = np.concatenate(den_feats)
    curve_den = energy_curve(h_all.reshape(-1, h_all.shape[-1]))
    curve_enc = energy_curve(z_all.reshape(-1, z_all.shape[-1]))
    k_quarter = max(1, z_all.shape[-1] // 4)
    report = {
        "num_images": int(len(x0)),
        "t_probe": float(t_probe),
        "features": "h_den" if use_projection else "z_den",
        "mean_cosine": cos_sum / len(x0) if comparable else None,
        "structural_loss": struc_sum / len(x0) if comparable else None,
        "energy_k": k_quarter,
        "energy_den_at_k": float(curve_den[min(k_quarter, len(curve_den)) - 1]),
        "energy_enc_at_k": float(curve_enc[k_quarter - 1]),
        "energy_curve_den": curve_den.tolist(),
        "energy_curve_enc": curve_enc.tolist(),
    }
    maps = {}
    n = h_all.shape[1]
    coords = grid_coords(n)
    for i in range(min(map_images, len(h_all))):
        for r in refs:
            maps[(i, int(r))] = patch_correlation_map(h_all[i], int(r))
    if out_dir is not None:
        _write_bundle(Path(out_dir), report, curve_den, curve_enc, maps, coords, extra)
    report["maps"] = {f"{i}_{r}": m.tolist() for (i, r), m in maps.items()}
    return report


def _write_bundle(out: Path, report: dict, curve_den, curve_enc, maps: dict, coords, extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    body = dict(report)
    if extra:
        body["config"] = extra
    (out / "report.json").write_text(json.dumps(body, indent=2))
    with open(out / "energy_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "energy_den", "energy_enc"])
        for k in range(1, max(len(curve_den), len(curve_enc)) + 1):
            w.writerow([k, _at(curve_den, k), _at(curve_enc, k)])
    g = int(coords[:, 0].max()) + 1
    for (i, r), m in maps.items():
        with open(out / f"corrmap_{i}_{r}.csv", "w", newline="") as fh:
            fh.write(f"# grid {g}x{g}\n")
            w = csv.writer(fh)
            w.writerow(["patch", "row", "col", "value"])
            for p, (row, col) in enumerate(coords):
                w.writerow([p, int(row), int(col), repr(float(m[p]))])


def _at(curve, k):
    return repr(float(curve[k - 1])) if k <= len(curve) else ""


def read_corrmap(path: str | os.PathLike) -> tuple:
    """Parse a corrmap CSV back into (grid shape, values)."""
    with open(path) as fh:
        header = fh.readline().split()[-1]
        rows = list(csv.DictReader(fh))
    gh, gw = (int(v) for v in header.split("x"))
    return (gh, gw), np.array([float(r["value"]) for r in rows])
