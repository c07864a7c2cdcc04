import numpy as np
import pytest
import torch

from mgalign.config import ModelConfig, SynthConfig, TrainConfig


def raster_overlap(a, b, step=0.01):
    """Brute-force IoU of two xyxy rectangles by counting grid cells."""
    lo = min(a[0], b[0], a[1], b[1]) - 1
    hi = max(a[2], b[2], a[3], b[3]) + 1
    ticks = np.arange(lo + step / 2, hi, step)
    xs, ys = np.meshgrid(ticks, ticks)
    in_a = (xs >= a[0]) & (xs < a[2]) & (ys >= a[1]) & (ys < a[3])
    in_b = (xs >= b[0]) & (xs < b[2]) & (ys >= b[1]) & (ys < b[3])
    union = (in_a | in_b).sum()
    return (in_a & in_b).sum() / union if union else 0.0


def central_diff(fn, param: torch.Tensor, index, eps: float = 1e-6) -> float:
    """Central finite difference of scalar ``fn()`` w.r.t. ``param[index]`` (float64 tensors)."""
    with torch.no_grad():
        orig = param[index].item()
        param[index] = orig + eps
        plus = fn().item()
        param[index] = orig - eps
        minus = fn().item()
        param[index] = orig
    return (plus - minus) / (2 * eps)


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(channels=16, disc_channels=16, gn_groups=4)


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(stage1_iters=3, stage2_iters=3, seed=7)


@pytest.fixture
def tiny_synth_cfg():
    return SynthConfig(image_size=64, size_range=(10.0, 48.0), seed=3)


@pytest.fixture(autouse=True)
def _float32_default():
    torch.set_default_dtype(torch.float32)
    yield
    torch.set_default_dtype(torch.float32)


ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance_line(capsys):
    """Record (and echo) one PASS/FAIL line for an acceptance criterion."""

    def emit(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE.append(line)
        with capsys.disabled():
            print(f"\n{line}")

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
