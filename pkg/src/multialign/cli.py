"""Command-line entry point: gen-data, train, sample, diagnose, gradcheck.

Config files are INI: one section per component, ``key = value`` pairs.

    [dataset]      mode, channels, size, num_classes, seed, noise, mean_scale, patch, regions
    [denoiser]     layers, hidden_dim, heads, patch_size, num_classes, alignment_depth, ...
    [encoder]      width, depth, heads, patch_size, seed
    [align]        lam, beta, gamma, use_patch, use_struc, use_adv
    [train]        steps, ckpt_every, batch_size, lr, seed, label_dropout, proj_hidden, disc_channels, dtype
    [sample]       class, count, nfe, cfg_scale, seed, guidance_lo, guidance_hi
    [diagnose]     count, seed, t_probe, refs, map_images, use_projection

Values resolve as flag > file > built-in default.  ``--set section.key=value``
overrides any single key.  Exit codes: 0 ok, 2 config error, 3 numeric
abort, 4 checkpoint error.  Outputs go under ``--out`` or, failing that,
``$MULTIALIGN_OUT/<command>`` (default ``./runs``).
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .alignment import AlignmentConfig, ConfigError
from .diagnostics import alignment_report
from .gradsuite import format_table, run_suite
from .networks import DenoiserConfig, EncoderConfig
from .sampler import SamplerConfig, sample
from .trainer import (
    CheckpointError,
    NonFiniteError,
    SyntheticDataset,
    TrainConfig,
    checkpoint_digest,
    init_state,
    load_checkpoint,
    make_dataset,
    read_tensors,
    save_checkpoint,
    train,
    write_tensors,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4
OUT_ENV = "MULTIALIGN_OUT"

RUN_DEFAULTS = {
    "train": {"steps": 1000, "ckpt_every": 0},
    "sample": {"class": 0, "count": 16, "nfe": 250, "cfg_scale": 1.0, "seed": 0, "guidance_lo": 0.0, "guidance_hi": 1.0},
    "diagnose": {"count": 256, "seed": 0, "t_probe": 0.5, "refs": "0", "map_images": 2, "use_projection": True},
}

SECTION_TYPES = {
    "dataset": SyntheticDataset,
    "denoiser": DenoiserConfig,
    "encoder": EncoderConfig,
    "align": AlignmentConfig,
}

TRAIN_KEYS = ("batch_size", "lr", "seed", "label_dropout", "proj_hidden", "disc_channels", "dtype")

PROVENANCE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["format_version", "checkpoint_sha256", "checkpoint_step", "sampler", "class", "count", "samples_sha256", "effective_config"],
    "properties": {
        "format_version": {"type": "integer", "minimum": 1},
        "checkpoint": {"type": "string"},
        "checkpoint_sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "checkpoint_step": {"type": "integer", "minimum": 0},
        "sampler": {
            "type": "object",
            "required": ["nfe", "cfg_scale", "guidance_interval", "seed", "deterministic_final_step"],
            "properties": {
                "nfe": {"type": "integer", "minimum": 1},
                "cfg_scale": {"type": "number", "minimum": 1},
                "guidance_interval": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "seed": {"type": "integer"},
                "deterministic_final_step": {"type": "boolean"},
            },
        },
        "class": {"type": "integer", "minimum": 0},
        "count": {"type": "integer", "minimum": 1},
        "shape": {"type": "array", "items": {"type": "integer"}},
        "samples_sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "effective_config": {"type": "object"},
    },
}


class CliConfigError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# config parsing


class ConfigFile:
    """Parsed INI file that remembers where each key was written."""

    def __init__(self, path: str | os.PathLike | None = None, text: str | None = None):
        self.path = str(path) if path else "<defaults>"
        self.parser = configparser.ConfigParser(interpolation=None)
        self.parser.optionxform = str
        self.lines = {}
        if path is not None and text is None:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise CliConfigError(f"{path}: cannot read config: {exc}") from None
        if text:
            try:
                self.parser.read_string(text, source=self.path)
            except configparser.Error as exc:
                raise CliConfigError(f"{self.path}: parse error: {exc.message if hasattr(exc, 'message') else exc}") from None
            self._index(text)

    def _index(self, text: str) -> None:
        section = None
        for no, line in enumerate(text.splitlines(), 1):
            m = re.match(r"\s*\[([^\]]+)\]", line)
            if m:
                section = m.group(1).strip()
                continue
            m = re.match(r"\s*([^#;=:\s][^=:]*?)\s*[=:]", line)
            if m and section:
                self.lines[(section, m.group(1))] = no

    def where(self, section: str, key: str) -> str:
        no = self.lines.get((section, key))
        return f"{self.path}:{no}" if no else self.path

    def section(self, name: str) -> dict:
        return dict(self.parser[name]) if self.parser.has_section(name) else {}

    def has(self, section: str, key: str) -> bool:
        return self.parser.has_option(section, key)

    def sections(self) -> list:
        return self.parser.sections()

    def set(self, section: str, key: str, value: str) -> None:
        if not self.parser.has_section(section):
            self.parser.add_section(section)
        self.parser.set(section, key, value)
        self.lines.pop((section, key), None)


def _coerce(raw: str, default, where: str, key: str):
    kind = type(default)
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "1", "yes", "on")
        if kind is int:
            return int(raw, 0)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(float(v) for v in raw.split(","))
        return raw.strip()
    except ValueError:
        raise CliConfigError(f"{where}: {key} = {raw!r} is not a valid {kind.__name__}") from None


def _typed_section(cfg: ConfigFile, name: str, defaults: dict) -> dict:
    out = {}
    for key, raw in cfg.section(name).items():
        if key not in defaults:
            raise CliConfigError(f"{cfg.where(name, key)}: unknown key {key!r} in [{name}]; expected one of {sorted(defaults)}")
        out[key] = _coerce(raw, defaults[key], cfg.where(name, key), key)
    return out


def _dataclass_defaults(cls) -> dict:
    return {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}


def _build(cls, cfg: ConfigFile, name: str):
    values = _typed_section(cfg, name, _dataclass_defaults(cls))
    try:
        return cls(**values)
    except (ValueError, TypeError) as exc:
        raise CliConfigError(f"{cfg.path}: [{name}] {exc}") from None


def _check_sections(cfg: ConfigFile) -> None:
    known = set(SECTION_TYPES) | set(RUN_DEFAULTS)
    for name in cfg.sections():
        if name not in known:
            raise CliConfigError(f"{cfg.path}: unknown section [{name}]; expected one of {sorted(known)}")


def apply_overrides(cfg: ConfigFile, pairs) -> None:
    for pair in pairs or ():
        m = re.fullmatch(r"([A-Za-z_]+)\.([A-Za-z_]+)=(.*)", pair)
        if not m:
            raise CliConfigError(f"--set expects section.key=value, got {pair!r}")
        cfg.set(m.group(1), m.group(2), m.group(3))


def build_train_config(cfg: ConfigFile, ablate: str | None = None) -> tuple:
    """Return (TrainConfig, run settings) from a config file."""
    _check_sections(cfg)
    data = _build(SyntheticDataset, cfg, "dataset")
    geometry = {"in_channels": data.channels, "input_size": data.size, "patch_size": data.patch}
    denoiser_defaults = _dataclass_defaults(DenoiserConfig) | geometry | {"num_classes": data.num_classes}
    encoder_defaults = _dataclass_defaults(EncoderConfig) | geometry
    try:
        den_vals = denoiser_defaults | _typed_section(cfg, "denoiser", denoiser_defaults)
        enc_vals = encoder_defaults | _typed_section(cfg, "encoder", encoder_defaults)
        denoiser = DenoiserConfig(**den_vals)
        encoder = EncoderConfig(**enc_vals)
    except ValueError as exc:
        if isinstance(exc, CliConfigError):
            raise
        raise CliConfigError(f"{cfg.path}: {exc}") from None
    for key, val in geometry.items():
        if den_vals[key] != val or enc_vals[key] != val:
            raise CliConfigError(f"{cfg.path}: [denoiser]/[encoder] {key} must match [dataset] ({val})")
    if denoiser.num_classes != data.num_classes:
        raise CliConfigError(f"{cfg.where('denoiser', 'num_classes')}: num_classes must match [dataset]")
    align = _build(AlignmentConfig, cfg, "align")
    if ablate:
        align = AlignmentConfig.ablation(ablate, lam=align.lam, beta=align.beta, gamma=align.gamma, cosine_eps=align.cosine_eps)
    base = TrainConfig()
    train_defaults = {k: getattr(base, k) for k in TRAIN_KEYS} | RUN_DEFAULTS["train"]
    tvals = _typed_section(cfg, "train", train_defaults)
    run = {k: tvals.pop(k, v) for k, v in RUN_DEFAULTS["train"].items()}
    if tvals.get("dtype", "float32") not in ("float32", "float64"):
        raise CliConfigError(f"{cfg.where('train', 'dtype')}: dtype must be float32 or float64")
    config = TrainConfig(denoiser=denoiser, encoder=encoder, align=align, data=data, **tvals)
    if run["steps"] < 0 or config.batch_size < 1:
        raise CliConfigError(f"{cfg.path}: steps must be >= 0 and batch_size >= 1")
    return config, run


def run_section(cfg: ConfigFile, name: str) -> dict:
    return RUN_DEFAULTS[name] | _typed_section(cfg, name, RUN_DEFAULTS[name])


def spec_hash(spec: SyntheticDataset) -> str:
    blob = json.dumps(dataclasses.asdict(spec), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# commands


def _out_dir(args, command: str) -> Path:
    root = args.out or Path(os.environ.get(OUT_ENV, "runs")) / command
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_cfg(args) -> ConfigFile:
    cfg = ConfigFile(args.config) if args.config else ConfigFile()
    apply_overrides(cfg, args.set)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    if not cfg.parser.has_section("dataset"):
        raise CliConfigError(f"{cfg.path}: missing [dataset] section")
    if not cfg.has("dataset", "seed"):
        raise CliConfigError(f"{cfg.path}: [dataset] is missing required field 'seed'")
    spec = _build(SyntheticDataset, cfg, "dataset")
    ds = make_dataset(spec)
    out = _out_dir(args, "data")
    record = {
        "spec": dataclasses.asdict(spec),
        "spec_hash": spec_hash(spec),
        "class_params": ds.class_params(),
    }
    (out / "dataset.json").write_text(json.dumps(record, indent=1))
    print(f"dataset {record['spec_hash'][:16]} ({spec.mode}, {spec.num_classes} classes) -> {out / 'dataset.json'}")
    return EXIT_OK


def _dataset_from_dir(path) -> SyntheticDataset:
    try:
        record = json.loads((Path(path) / "dataset.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliConfigError(f"cannot read dataset spec in {path}: {exc}") from None
    spec = SyntheticDataset(**record["spec"])
    if spec_hash(spec) != record.get("spec_hash"):
        raise CliConfigError(f"{path}: dataset spec hash mismatch")
    return spec


def cmd_train(args) -> int:
    out = _out_dir(args, "train")
    if args.resume:
        state = load_checkpoint(args.resume)
        cfg = _load_cfg(args)
        # the checkpoint fixes the model and data; only run length is read from the file
        given = {k: v for k, v in cfg.section("train").items() if k in RUN_DEFAULTS["train"]}
        run = RUN_DEFAULTS["train"] | {k: _coerce(v, RUN_DEFAULTS["train"][k], cfg.where("train", k), k) for k, v in given.items()}
    else:
        cfg = _load_cfg(args)
        if args.dataset:
            spec = _dataset_from_dir(args.dataset)
            for key, val in dataclasses.asdict(spec).items():
                cfg.set("dataset", key, str(val))
        if args.seed is not None:
            cfg.set("train", "seed", str(args.seed))
        config, run = build_train_config(cfg, args.ablate)
        state = init_state(config)
    if args.steps is not None:
        run["steps"] = args.steps
    if args.ckpt_every is not None:
        run["ckpt_every"] = args.ckpt_every
    effective = {"train": state.config.to_dict(), "run": run, "resumed_from": str(args.resume) if args.resume else None}
    (out / "config.json").write_text(json.dumps(effective, indent=1))
    remaining = max(run["steps"] - state.step, 0)
    try:
        train(
            state,
            remaining,
            metrics_path=out / "metrics.jsonl",
            ckpt_dir=out / "checkpoints",
            ckpt_every=run["ckpt_every"],
        )
    except NonFiniteError as exc:
        (out / "abort.json").write_text(json.dumps({"step": state.step + 1, "error": str(exc), "values": exc.dump}, default=str))
        print(f"numeric abort at step {state.step + 1}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    final = save_checkpoint(state, out / "final")
    print(f"trained to step {state.step} (disc updates {state.disc_steps}); checkpoint {final}")
    return EXIT_OK


def write_image(path: Path, samples: np.ndarray) -> Path:
    """Tile samples horizontally into a binary PGM (1-2 channels) or PPM (>=3)."""
    b, c, h, w = samples.shape
    chans = 3 if c >= 3 else 1
    img = samples[:, :chans].transpose(2, 0, 3, 1).reshape(h, b * w, chans)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    magic = b"P6" if chans == 3 else b"P5"
    path = path.with_suffix(".ppm" if chans == 3 else ".pgm")
    path.write_bytes(magic + f"\n{b * w} {h}\n255\n".encode() + pix.tobytes())
    return path


def cmd_sample(args) -> int:
    cfg = _load_cfg(args)
    _check_sections(cfg)
    opts = run_section(cfg, "sample")
    for key, flag in (("class", args.cls), ("count", args.count), ("nfe", args.nfe), ("cfg_scale", args.cfg_scale), ("seed", args.seed)):
        if flag is not None:
            opts[key] = flag
    if args.guidance_interval:
        opts["guidance_lo"], opts["guidance_hi"] = _coerce(args.guidance_interval, (), "--guidance-interval", "guidance_interval")
    state = load_checkpoint(args.checkpoint)
    k = state.config.denoiser.num_classes
    if not 0 <= opts["class"] < k:
        raise CliConfigError(f"class {opts['class']} out of range [0, {k})")
    if opts["count"] < 1:
        raise CliConfigError("count must be >= 1")
    try:
        scfg = SamplerConfig(
            nfe=opts["nfe"],
            cfg_scale=opts["cfg_scale"],
            guidance_interval=(opts["guidance_lo"], opts["guidance_hi"]),
            seed=opts["seed"],
        )
    except ValueError as exc:
        raise CliConfigError(str(exc)) from None
    x = sample(state.denoiser, scfg, opts["class"], opts["count"])
    if not np.all(np.isfinite(x)):
        print("numeric abort: non-finite samples", file=sys.stderr)
        return EXIT_NUMERIC
    out = _out_dir(args, "sample")
    write_tensors(out / "samples", {"samples": x}, {"kind": "samples"})
    prov = {
        "format_version": 1,
        "checkpoint": str(args.checkpoint),
        "checkpoint_sha256": checkpoint_digest(args.checkpoint),
        "checkpoint_step": state.step,
        "sampler": {**dataclasses.asdict(scfg), "guidance_interval": list(scfg.guidance_interval)},
        "class": int(opts["class"]),
        "count": int(opts["count"]),
        "shape": list(x.shape),
        "samples_sha256": hashlib.sha256(np.ascontiguousarray(x).tobytes()).hexdigest(),
        "effective_config": {"sample": opts, "train": state.config.to_dict()},
    }
    (out / "provenance.json").write_text(json.dumps(prov, indent=1))
    (out / "provenance.schema.json").write_text(json.dumps(PROVENANCE_SCHEMA, indent=1))
    if args.image:
        write_image(out / "samples", x)
    print(f"{len(x)} samples of class {opts['class']} -> {out} (sha256 {prov['samples_sha256'][:16]})")
    return EXIT_OK


def load_samples(path) -> np.ndarray:
    _, arrays = read_tensors(path)
    return arrays["samples"]


def cmd_diagnose(args) -> int:
    cfg = _load_cfg(args)
    _check_sections(cfg)
    opts = run_section(cfg, "diagnose")
    for key, flag in (("count", args.count), ("seed", args.seed), ("t_probe", args.t_probe), ("refs", args.refs)):
        if flag is not None:
            opts[key] = flag
    if args.raw:
        opts["use_projection"] = False
    try:
        refs = [int(r) for r in str(opts["refs"]).split(",")]
    except ValueError:
        raise CliConfigError(f"refs must be comma-separated integers, got {opts['refs']!r}") from None
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
    elif args.self_check:
        config, _ = build_train_config(cfg)
        state = init_state(config)
    else:
        raise CliConfigError("diagnose needs --checkpoint or --self")
    ds = make_dataset(state.config.data)
    rng = np.random.default_rng(opts["seed"])
    x0, y = ds.sample(rng, opts["count"], state.denoiser.dtype)
    out = _out_dir(args, "diagnose")
    effective = {"diagnose": opts, "train": state.config.to_dict(), "checkpoint": str(args.checkpoint), "self": args.self_check}
    try:
        report = alignment_report(
            None if args.self_check else state.denoiser,
            state.encoder,
            state.proj,
            (x0, y),
            t_probe=opts["t_probe"],
            out_dir=out,
            refs=refs,
            map_images=opts["map_images"],
            use_projection=opts["use_projection"],
            seed=opts["seed"],
            extra=effective,
        )
    except (IndexError, T.DomainError, ValueError) as exc:
        raise CliConfigError(str(exc)) from None
    print(f"{'features':<18} {report['features']}")
    for key in ("mean_cosine", "structural_loss", "energy_den_at_k", "energy_enc_at_k"):
        val = report[key]
        print(f"{key:<18} {'n/a' if val is None else f'{val:.6f}'}")
    print(f"report -> {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = run_suite(instances=args.instances, seed=args.seed)
    print(format_table(rows))
    bad = [r.name for r in rows if not r.ok]
    if bad:
        print(f"FAILED: {', '.join(bad)}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(rows)} rows pass")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multialign", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")

    g = sub.add_parser("gen-data", help="record a synthetic dataset spec")
    common(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train denoiser with alignment losses")
    common(t)
    t.add_argument("--dataset", help="directory written by gen-data")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--ablate", choices=["none", "patch", "patch+struc", "patch+adv", "full"])
    t.add_argument("--steps", type=int, help="total step count")
    t.add_argument("--seed", type=int)
    t.add_argument("--ckpt-every", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--class", dest="cls", type=int)
    s.add_argument("--count", type=int)
    s.add_argument("--nfe", type=int)
    s.add_argument("--cfg-scale", type=float)
    s.add_argument("--guidance-interval", metavar="LO,HI")
    s.add_argument("--seed", type=int)
    s.add_argument("--image", action="store_true", help="also write a PGM/PPM strip")
    s.set_defaults(func=cmd_sample)

    d = sub.add_parser("diagnose", help="alignment report for a checkpoint")
    common(d)
    d.add_argument("--checkpoint")
    d.add_argument("--self", dest="self_check", action="store_true", help="probe the frozen encoder against itself")
    d.add_argument("--raw", action="store_true", help="probe raw z_den instead of projected h_den")
    d.add_argument("--count", type=int)
    d.add_argument("--seed", type=int)
    d.add_argument("--t-probe", type=float)
    d.add_argument("--refs", help="comma-separated reference patches")
    d.set_defaults(func=cmd_diagnose)

    c = sub.add_parser("gradcheck", help="finite-difference suite over every op and loss")
    c.add_argument("--instances", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NonFiniteError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
