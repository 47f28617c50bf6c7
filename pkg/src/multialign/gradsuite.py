"""Finite-difference gradient suite over every differentiable op and loss.

Each case draws float64 inputs in [-1, 1] (shifted away from poles and kinks
where an op has them) and contracts the op output with a fixed random weight
so upstream gradients are non-trivial.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .alignment import adversarial_loss, discriminator_loss, patch_alignment_loss, structural_loss
from .interpolant import velocity_loss
from .networks import Discriminator, ProjectionMLP

TOLERANCE = 1e-4


@dataclass
class Row:
    name: str
    instances: int
    max_rel_error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _u(rng, *shape):
    return rng.uniform(-1, 1, shape)


def _away(rng, shape, lo=0.2):
    """Uniform in [-1, -lo] U [lo, 1]."""
    x = rng.uniform(lo, 1, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _contract(out: T.Tensor, w: np.ndarray) -> T.Tensor:
    return (out * T.Tensor(w)).sum()


def _unary_case(fn, make=None):
    def case(rng):
        x = make(rng) if make else _u(rng, 3, 4)
        w = _u(rng, *np.shape(fn(T.Tensor(x)).data))
        return lambda L: _contract(fn(L[0]), w), [x]

    return case


def _binary_case(fn, make_b=None, shape_b=(3, 4)):
    def case(rng):
        a = _u(rng, 3, 4)
        b = make_b(rng) if make_b else _u(rng, *shape_b)
        w = _u(rng, *np.shape(fn(T.Tensor(a), T.Tensor(b)).data))
        return lambda L: _contract(fn(L[0], L[1]), w), [a, b]

    return case


def _clamp_input(rng):
    x = _u(rng, 3, 4)
    x[np.abs(x - 0.1) < 1e-3] += 0.01
    return x


def _bind(module, names, leaves):
    for name, leaf in zip(names, leaves):
        *path, attr = name.split(".")
        obj = module
        for part in path:
            obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
        setattr(obj, attr, leaf)


def _module_case(factory, loss_of):
    """Check gradients w.r.t. every module parameter and the module input."""

    def case(rng):
        mod = factory(rng)
        names = [n for n, _ in mod.named_parameters()]
        arrays = [p.data.copy() for _, p in mod.named_parameters()]
        extra = loss_of.inputs(rng)

        def build(L):
            _bind(mod, names, L[: len(names)])
            return loss_of(mod, L[len(names) :])

        return build, arrays + extra

    return case


class _ProjLoss:
    def __init__(self):
        self.w = None

    def inputs(self, rng):
        self.w = _u(rng, 2, 4, 5)
        return [_u(rng, 2, 4, 6)]

    def __call__(self, mod, L):
        return _contract(mod(L[0]), self.w)


class _DiscLoss:
    def inputs(self, rng):
        return [_u(rng, 2, 4, 8), _u(rng, 2, 4, 8)]

    def __call__(self, mod, L):
        real = mod(L[0])
        fake = mod(L[1])
        return T.softplus(-real).mean() + T.softplus(fake).mean()


def _disc_loss_case(rng):
    # discriminator_loss treats both feature sets as constants; parameters only
    d = Discriminator(8, rng, channels=4, dtype=np.float64)
    names = [n for n, _ in d.named_parameters()]
    arrays = [p.data.copy() for _, p in d.named_parameters()]
    z, h = _u(rng, 2, 4, 8), _u(rng, 2, 4, 8)

    def build(L):
        _bind(d, names, L)
        return discriminator_loss(d, z, h)

    return build, arrays


def _adv_loss_case(rng):
    d = Discriminator(8, rng, channels=4, dtype=np.float64)
    h = _u(rng, 2, 4, 8)
    return lambda L: adversarial_loss(d, L[0]), [h]


def _conv_case(stride, padding):
    def case(rng):
        x = _u(rng, 2, 3, 5, 5)
        k = _u(rng, 4, 3, 3, 3)
        b = _u(rng, 4)
        shape = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b), stride, padding).shape
        w = _u(rng, *shape)
        return lambda L: _contract(T.conv2d(L[0], L[1], L[2], stride, padding), w), [x, k, b]

    return case


def _take_rows_case(rng):
    table = _u(rng, 5, 3)
    idx = rng.integers(0, 5, 7)
    w = _u(rng, 7, 3)
    return lambda L: _contract(T.take_rows(L[0], idx), w), [table]


def _linear_case(rng):
    x, wt, b = _u(rng, 2, 3, 4), _u(rng, 4, 5), _u(rng, 5)
    w = _u(rng, 2, 3, 5)
    return lambda L: _contract(T.linear(L[0], L[1], L[2]), w), [x, wt, b]


def _concat_case(rng):
    a, b = _u(rng, 2, 3), _u(rng, 2, 4)
    w = _u(rng, 2, 7)
    return lambda L: _contract(T.concat([L[0], L[1]], axis=1), w), [a, b]


def _pair_loss(fn):
    def case(rng):
        z, h = _u(rng, 2, 4, 8), _u(rng, 2, 4, 8)
        return lambda L: fn(z, L[0]), [h]

    return case


def _velocity_case(rng):
    pred, target = _u(rng, 2, 4, 3, 3), _u(rng, 2, 4, 3, 3)
    return lambda L: velocity_loss(L[0], target), [pred]


def cases() -> dict:
    pos = lambda rng: rng.uniform(0.2, 1.5, (3, 4))  # noqa: E731
    return {
        "add": _binary_case(T.add, shape_b=(4,)),
        "sub": _binary_case(T.sub),
        "mul": _binary_case(T.mul, shape_b=(3, 1)),
        "div": _binary_case(T.div, make_b=lambda r: _away(r, (3, 4))),
        "power": _unary_case(lambda x: T.power(x, 3.0)),
        "matmul": _binary_case(T.matmul, shape_b=(4, 2)),
        "matmul_batched": _binary_case(lambda a, b: T.matmul(a.reshape(3, 2, 2), b), shape_b=(3, 2, 5)),
        "linear": _linear_case,
        "reduce_sum": _unary_case(lambda x: T.reduce(x, "sum", axis=1)),
        "reduce_mean": _unary_case(lambda x: T.reduce(x, "mean", axis=0, keepdims=True)),
        "reduce_max": _unary_case(lambda x: T.reduce(x, "max", axis=1)),
        "exp": _unary_case(T.exp),
        "log": _unary_case(T.log, make=pos),
        "sqrt": _unary_case(T.sqrt, make=pos),
        "tanh": _unary_case(T.tanh),
        "sigmoid": _unary_case(T.sigmoid),
        "softplus": _unary_case(T.softplus),
        "silu": _unary_case(T.silu),
        "gelu_tanh": _unary_case(T.gelu),
        "clamp_min": _unary_case(lambda x: T.clamp_min(x, 0.1), make=_clamp_input),
        "softmax": _unary_case(T.softmax),
        "layernorm": _unary_case(T.layernorm),
        "normalize": _unary_case(T.normalize),
        "reshape": _unary_case(lambda x: T.reshape(x, (2, 6))),
        "transpose": _unary_case(lambda x: T.transpose(x, (1, 0))),
        "getitem": _unary_case(lambda x: T.getitem(x, (slice(1, 3), [0, 2, 2]))),
        "concat": _concat_case,
        "take_rows": _take_rows_case,
        "conv2d_s1_p0": _conv_case(1, 0),
        "conv2d_s2_p1": _conv_case(2, 1),
        "conv2d_s1_p1": _conv_case(1, 1),
        "projection_mlp": _module_case(lambda r: ProjectionMLP(6, 5, r, hidden=7, dtype=np.float64), _ProjLoss()),
        "discriminator": _module_case(lambda r: Discriminator(8, r, channels=4, dtype=np.float64), _DiscLoss()),
        "loss_velocity": _velocity_case,
        "loss_patch": _pair_loss(patch_alignment_loss),
        "loss_structural": _pair_loss(structural_loss),
        "loss_adversarial": _adv_loss_case,
        "loss_discriminator": _disc_loss_case,
    }


def run_suite(instances: int = 20, seed: int = 0, h: float = 1e-5, only=None) -> list:
    rows = []
    for k, (name, make) in enumerate(cases().items()):
        if only and name not in only:
            continue
        rng = np.random.default_rng([seed, k])
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(instances):
            build, arrays = make(rng)
            worst = max(worst, T.gradcheck(build, arrays, h))
        rows.append(Row(name, instances, worst, time.perf_counter() - t0))
    return rows


def format_table(rows) -> str:
    lines = [f"{'op':<20} {'n':>3} {'max_rel_err':>12}  status"]
    for r in rows:
        lines.append(f"{r.name:<20} {r.instances:>3} {r.max_rel_error:>12.3e}  {'PASS' if r.ok else 'FAIL'}")
    return "\n".join(lines)
