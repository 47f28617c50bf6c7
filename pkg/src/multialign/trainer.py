"""Joint optimisation of the velocity objective and the alignment terms.

One ``train_step`` performs a single generator update of the denoiser and
projection head; every fifth step (when the adversarial term is active) the
discriminator is updated once on the same minibatch with ``h_den`` detached.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .alignment import (
    AlignmentConfig,
    LossBreakdown,
    adversarial_loss,
    discriminator_loss,
    patch_alignment_loss,
    structural_loss,
    total_loss,
)
from .interpolant import corrupt, sample_t, velocity_loss, velocity_target
from .networks import (
    DenoiserConfig,
    DenoiserNet,
    Discriminator,
    EncoderConfig,
    FrozenEncoder,
    ProjectionMLP,
)

FORMAT_VERSION = 1
DISC_EVERY = 5


class NonFiniteError(FloatingPointError):
    """A loss term or gradient became NaN/inf; carries the offending values."""

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimState:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(opt: OptimState, params: dict, grads: dict) -> None:
    """AdamW step in place.  Parameters without a gradient are left untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    opt.step += 1
    b1, b2 = opt.betas
    c1 = 1 - b1**opt.step
    c2 = 1 - b2**opt.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        m, v = opt.m[name], opt.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        data = p.data
        if opt.weight_decay:
            data = data * (1 - opt.lr * opt.weight_decay)
        denom = np.sqrt(v / c2)
        denom += opt.eps
        step = m / c1
        step /= denom
        step *= opt.lr
        p.data = (data - step).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticDataset:
    mode: str = "structured-grid"
    channels: int = 4
    size: int = 8
    num_classes: int = 4
    seed: int = 0
    noise: float = 0.3
    mean_scale: float = 1.0
    patch: int = 2
    regions: int = 3

    def __post_init__(self):
        if self.mode not in ("gaussian-mixture", "structured-grid"):
            raise ValueError(f"unknown dataset mode {self.mode!r}")


class Dataset:
    """Fixed per-class parameters plus a sampler driven by a caller-owned RNG."""

    def __init__(self, spec: SyntheticDataset):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        c, s, k = spec.channels, spec.size, spec.num_classes
        self.shape = (c, s, s)
        if spec.mode == "gaussian-mixture":
            self.means = rng.normal(0, spec.mean_scale, (k, c, s, s))
            self.stds = rng.uniform(0.3, 1.0, (k, c, s, s))
        else:
            self.templates = np.stack([self._template(rng) for _ in range(k)])
            self.means = self.templates
            self.stds = np.full((k, c, s, s), spec.noise)

    def _template(self, rng) -> np.ndarray:
        # piecewise-constant "materials" over spatially coherent patch regions
        sp = self.spec
        grid = sp.size // sp.patch
        centers = rng.uniform(0, grid, (sp.regions, 2))
        gy, gx = np.meshgrid(np.arange(grid) + 0.5, np.arange(grid) + 0.5, indexing="ij")
        dist = (gy[..., None] - centers[:, 0]) ** 2 + (gx[..., None] - centers[:, 1]) ** 2
        owner = dist.argmin(axis=-1)
        materials = rng.normal(0, 1.0, (sp.regions, sp.channels, sp.patch, sp.patch))
        out = np.zeros(self.shape)
        for i in range(grid):
            for j in range(grid):
                sl = (slice(None), slice(i * sp.patch, (i + 1) * sp.patch), slice(j * sp.patch, (j + 1) * sp.patch))
                out[sl] = materials[owner[i, j]]
        return out

    def class_params(self) -> list:
        return [
            {"class": i, "mean": self.means[i].ravel().tolist(), "std": self.stds[i].ravel().tolist()}
            for i in range(self.spec.num_classes)
        ]

    def sample(self, rng: np.random.Generator, batch: int, dtype=np.float32):
        y = rng.integers(0, self.spec.num_classes, size=batch)
        noise = rng.standard_normal((batch,) + self.shape)
        x0 = self.means[y] + self.stds[y] * noise
        return x0.astype(dtype), y

    def stream(self, rng: np.random.Generator, batch: int, dtype=np.float32):
        while True:
            yield self.sample(rng, batch, dtype)


def make_dataset(spec: SyntheticDataset) -> Dataset:
    return Dataset(spec)


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainConfig:
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    align: AlignmentConfig = field(default_factory=AlignmentConfig)
    data: SyntheticDataset = field(default_factory=SyntheticDataset)
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    label_dropout: float = 0.1
    proj_hidden: int = 256
    disc_channels: int = 32
    dtype: str = "float32"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            denoiser=DenoiserConfig(**d["denoiser"]),
            encoder=EncoderConfig(**d["encoder"]),
            align=AlignmentConfig(**d["align"]),
            data=SyntheticDataset(**d["data"]),
            **{k: v for k, v in d.items() if k not in ("denoiser", "encoder", "align", "data")},
        )


@dataclass
class TrainState:
    config: TrainConfig
    denoiser: DenoiserNet
    proj: ProjectionMLP
    disc: Discriminator
    encoder: FrozenEncoder
    gen_opt: OptimState
    disc_opt: OptimState
    rng: np.random.Generator
    step: int = 0
    disc_steps: int = 0

    def gen_params(self) -> dict:
        out = {f"denoiser.{k}": p for k, p in self.denoiser.named_parameters()}
        out.update({f"proj.{k}": p for k, p in self.proj.named_parameters()})
        return out

    def disc_params(self) -> dict:
        return {f"disc.{k}": p for k, p in self.disc.named_parameters()}


def init_state(config: TrainConfig) -> TrainState:
    dtype = np.dtype(config.dtype)
    init_rng = np.random.default_rng([config.seed, 1])
    denoiser = DenoiserNet(config.denoiser, init_rng, dtype)
    proj = ProjectionMLP(config.denoiser.hidden_dim, config.encoder.width, init_rng, config.proj_hidden, dtype)
    disc = Discriminator(config.encoder.width, init_rng, config.disc_channels, dtype)
    encoder = FrozenEncoder(config.encoder, dtype)
    if encoder.num_patches != config.denoiser.num_patches:
        raise ValueError("encoder and denoiser must share the patch grid")
    return TrainState(
        config=config,
        denoiser=denoiser,
        proj=proj,
        disc=disc,
        encoder=encoder,
        gen_opt=OptimState(lr=config.lr),
        disc_opt=OptimState(lr=config.lr),
        rng=np.random.default_rng([config.seed, 2]),
    )


# ---------------------------------------------------------------------------
# one step


def _grad_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def _check_finite(parts: dict) -> None:
    bad = {k: float(v) for k, v in parts.items() if not math.isfinite(float(v))}
    if bad:
        raise NonFiniteError(f"non-finite loss term(s): {', '.join(sorted(bad))}", bad)


def train_step(state: TrainState, batch, cfg: AlignmentConfig | None = None) -> tuple:
    """One generator update (plus the scheduled discriminator update).

    Returns ``(LossBreakdown, info)`` where ``info`` holds gradient norms and
    whether the discriminator moved on this step.
    """
    cfg = cfg or state.config.align
    x0, y = batch
    x0 = np.asarray(x0, dtype=state.denoiser.dtype)
    y = np.asarray(y, dtype=np.int64)
    b = x0.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    rng = state.rng
    T.current_tape().clear()

    t = sample_t(rng, b)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    drop = rng.random(b) < state.config.label_dropout
    y_in = np.where(drop, state.denoiser.null_class, y)

    noisy = corrupt(x0, eps, t)
    v_pred, z_den = state.denoiser(noisy.x_t, t, y_in)
    parts = {"velocity": velocity_loss(v_pred, velocity_target(x0, eps))}

    z_enc = h_den = None
    if cfg.needs_projection:
        z_enc = state.encoder(x0)
        h_den = state.proj(z_den)
        if cfg.patch_on:
            parts["patch"] = patch_alignment_loss(z_enc, h_den, cfg.cosine_eps)
        if cfg.struc_on:
            parts["structural"] = structural_loss(z_enc, h_den, cfg.cosine_eps)
        if cfg.adv_on:
            parts["adversarial"] = adversarial_loss(state.disc, h_den)

    losses = total_loss(cfg, parts)
    _check_finite({k: getattr(losses, k) for k in ("velocity", "patch", "structural", "adversarial", "total")})

    params = state.gen_params()
    grads = T.backward(losses.graph)
    by_name = {name: grads[p] for name, p in params.items() if p in grads}
    for p in params.values():
        p.grad = None
    info = {"grad_norm_gen": _grad_norm(by_name), "grad_norm_disc": 0.0, "disc_updated": False}
    adam_update(state.gen_opt, params, by_name)
    state.step += 1

    if cfg.adv_on:
        h_fixed = h_den.detach()
        if state.step % DISC_EVERY == 0:
            ld = discriminator_loss(state.disc, z_enc, h_fixed)
            dparams = state.disc_params()
            dgrads = T.backward(ld)
            dby_name = {name: dgrads[p] for name, p in dparams.items() if p in dgrads}
            for p in dparams.values():
                p.grad = None
            info["grad_norm_disc"] = _grad_norm(dby_name)
            adam_update(state.disc_opt, dparams, dby_name)
            state.disc_steps += 1
            info["disc_updated"] = True
        else:
            with T.no_grad():
                ld = discriminator_loss(state.disc, z_enc, h_fixed)
        losses.disc = float(ld.item())
        _check_finite({"disc": losses.disc})

    losses.graph = None
    return losses, info


def metrics_record(step: int, losses: LossBreakdown, info: dict, wall_ms: float) -> dict:
    return {
        "step": step,
        "loss_total": losses.total,
        "loss_velocity": losses.velocity,
        "loss_patch": losses.patch,
        "loss_struc": losses.structural,
        "loss_adv": losses.adversarial,
        "loss_disc": losses.disc,
        "grad_norm_gen": info["grad_norm_gen"],
        "grad_norm_disc": info["grad_norm_disc"],
        "wall_ms": wall_ms,
    }


def train(
    state: TrainState,
    steps: int,
    dataset: Dataset | None = None,
    metrics_path: str | os.PathLike | None = None,
    ckpt_dir: str | os.PathLike | None = None,
    ckpt_every: int = 0,
    callback=None,
) -> list:
    """Run ``steps`` further steps, drawing batches from ``dataset`` with the state's RNG.

    Returns the metric records produced by this call.
    """
    dataset = dataset or make_dataset(state.config.data)
    records = []
    fh = open(metrics_path, "a") if metrics_path else None
    try:
        for _ in range(steps):
            t0 = time.perf_counter()
            batch = dataset.sample(state.rng, state.config.batch_size, state.denoiser.dtype)
            losses, info = train_step(state, batch)
            rec = metrics_record(state.step, losses, info, (time.perf_counter() - t0) * 1e3)
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if callback:
                callback(state, rec)
            if ckpt_dir and ckpt_every and state.step % ckpt_every == 0:
                save_checkpoint(state, Path(ckpt_dir) / f"step_{state.step:07d}")
    finally:
        if fh:
            fh.close()
    return records


# ---------------------------------------------------------------------------
# checkpoint format: manifest.json + weights.bin (little-endian)

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


def _state_tensors(state: TrainState) -> dict:
    out = {}
    out.update({k: p.data for k, p in state.gen_params().items()})
    out.update({k: p.data for k, p in state.disc_params().items()})
    out.update({f"encoder.{k}": a for k, a in state.encoder.frozen_arrays().items()})
    for tag, opt in (("opt_gen", state.gen_opt), ("opt_disc", state.disc_opt)):
        for k in sorted(opt.m):
            out[f"{tag}.m.{k}"] = opt.m[k]
            out[f"{tag}.v.{k}"] = opt.v[k]
    return out


def write_tensors(path: str | os.PathLike, tensors: dict, meta: dict | None = None) -> dict:
    """Write ``tensors`` into ``path/weights.bin`` with a ``manifest.json`` table."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table = {}
    offset = 0
    with open(path / "weights.bin", "wb") as fh:
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            code = _CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            blob = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
            fh.write(blob)
            table[name] = {
                "dtype": code,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
                "checksum": f"{zlib.crc32(blob):08x}",
            }
            offset += len(blob)
    manifest = {"format_version": FORMAT_VERSION, **(meta or {}), "tensors": table}
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1))
    tmp.replace(path / "manifest.json")
    return manifest


def read_tensors(path: str | os.PathLike) -> tuple:
    """Inverse of :func:`write_tensors`; returns ``(manifest, {name: array})``."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "weights.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint at {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {manifest.get('format_version')!r}")
    arrays = {}
    for name, ent in manifest["tensors"].items():
        dt = _DTYPES.get(ent["dtype"])
        if dt is None:
            raise CheckpointError(f"{name}: unknown dtype {ent['dtype']!r}")
        n = int(np.prod(ent["shape"])) * dt.itemsize
        if n != ent["nbytes"]:
            raise CheckpointError(f"{name}: manifest shape {ent['shape']} disagrees with {ent['nbytes']} bytes")
        lo, hi = ent["offset"], ent["offset"] + ent["nbytes"]
        if hi > len(blob):
            raise CheckpointError(f"{name}: blob truncated ({len(blob)} bytes, need {hi})")
        chunk = blob[lo:hi]
        if f"{zlib.crc32(chunk):08x}" != ent["checksum"]:
            raise CheckpointError(f"{name}: checksum mismatch")
        arrays[name] = np.frombuffer(chunk, dtype=dt).reshape(ent["shape"]).astype(dt.newbyteorder("="))
    return manifest, arrays


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> Path:
    meta = {
        "step": state.step,
        "disc_steps": state.disc_steps,
        "opt_gen_step": state.gen_opt.step,
        "opt_disc_step": state.disc_opt.step,
        "rng_state": state.rng.bit_generator.state,
        "config": state.config.to_dict(),
    }
    write_tensors(path, _state_tensors(state), meta)
    return Path(path)


def load_checkpoint(path: str | os.PathLike) -> TrainState:
    manifest, arrays = read_tensors(path)
    config = TrainConfig.from_dict(manifest["config"])
    state = init_state(config)

    def group(prefix):
        n = len(prefix)
        return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix)}

    try:
        state.denoiser.load_arrays(group("denoiser."))
        state.proj.load_arrays(group("proj."))
        state.disc.load_arrays(group("disc."))
    except KeyError as exc:
        raise CheckpointError(f"missing tensor {exc}") from exc
    for name, arr in group("encoder.").items():
        if not np.array_equal(arr, state.encoder.frozen_arrays()[name]):
            raise CheckpointError(f"encoder.{name}: frozen weights differ from seed {config.encoder.seed}")
    for tag, opt in (("opt_gen.", state.gen_opt), ("opt_disc.", state.disc_opt)):
        opt.m = group(tag + "m.")
        opt.v = group(tag + "v.")
    state.gen_opt.step = manifest["opt_gen_step"]
    state.disc_opt.step = manifest["opt_disc_step"]
    state.step = manifest["step"]
    state.disc_steps = manifest["disc_steps"]
    state.rng.bit_generator.state = manifest["rng_state"]
    return state


def checkpoint_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    for name in ("manifest.json", "weights.bin"):
        h.update((Path(path) / name).read_bytes())
    return h.hexdigest()
