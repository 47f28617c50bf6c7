import numpy as np
import pytest

from multialign.alignment import AlignmentConfig
from multialign.networks import DenoiserConfig, EncoderConfig
from multialign.trainer import SyntheticDataset, TrainConfig


def small_config(align=None, seed=0, mode="structured-grid", dtype="float32", **kw):
    return TrainConfig(
        denoiser=DenoiserConfig(layers=2, hidden_dim=32, heads=2, alignment_depth=1, freq_dim=32),
        encoder=EncoderConfig(width=16, depth=1, heads=2),
        align=align or AlignmentConfig(),
        data=SyntheticDataset(mode=mode, seed=seed),
        batch_size=8,
        seed=seed,
        proj_hidden=32,
        disc_channels=8,
        dtype=dtype,
        **kw,
    )


@pytest.fixture
def small():
    return small_config


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def record(criterion, ok, detail=""):
    ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}".rstrip()
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[key]
        ok = all(c for c, _ in checks)
        detail = "; ".join(d for _, d in checks if d)
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
