import dataclasses

import numpy as np
import pytest
import torch

from sdtts.config import preset
from sdtts.data import make_synthetic_corpus

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    line = f"[{status}] criterion {number:2d} {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def toy_cfg():
    return preset("toy")


@pytest.fixture(scope="session")
def toy_corpus():
    return make_synthetic_corpus(4, 8, 0)


@pytest.fixture
def small_cfg():
    """Toy config shrunk further for fast unit tests."""
    cfg = preset("toy")
    return dataclasses.replace(
        cfg,
        train=dataclasses.replace(cfg.train, steps=2, batch_size=4),
        distill=dataclasses.replace(cfg.distill, batch_size=4),
    )


def randomize_(module: torch.nn.Module, seed: int = 0, scale: float = 0.3) -> torch.nn.Module:
    """Overwrite every parameter with seeded noise ("random trained weights")."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


def fd_relative_error(loss_fn, tensors, n_probe=24, h=1e-6, seed=0):
    """Norm-wise relative error between autograd and central differences.

    ``loss_fn`` is evaluated in whatever dtype the tensors carry; probes a
    random subset of entries across ``tensors``.
    """
    tensors = list(tensors)
    grads = torch.autograd.grad(loss_fn(), tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    rng = np.random.default_rng(seed)
    sizes = np.array([t.numel() for t in tensors])
    analytic, numeric = [], []
    for _ in range(n_probe):
        ti = int(rng.choice(len(tensors), p=sizes / sizes.sum()))
        j = int(rng.integers(sizes[ti]))
        flat = tensors[ti].data.view(-1)
        old = flat[j].item()
        with torch.no_grad():
            flat[j] = old + h
            up = float(loss_fn())
            flat[j] = old - h
            down = float(loss_fn())
            flat[j] = old
        numeric.append((up - down) / (2 * h))
        analytic.append(float(grads[ti].reshape(-1)[j]))
    a, n = np.array(analytic), np.array(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)
