"""Shared test utilities: tiny configs, oracles, and the acceptance recorder."""

from __future__ import annotations

import math

import torch

from layergan.losses import IlsOptions, LossWeights
from layergan.models import NetConfig
from layergan.training import TrainConfig

# One line per acceptance criterion, printed in the terminal summary by
# conftest.pytest_terminal_summary so pass/fail verdicts survive capture.
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, name: str, ok: bool, detail: str) -> bool:
    verdict = "PASS" if ok else "FAIL"
    line = f"ACCEPTANCE {number} [{name}]: {verdict} — {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def tiny_train_config(**overrides) -> TrainConfig:
    """A 16x16 configuration small enough for second-scale training tests."""
    kw = dict(
        net=NetConfig(img_size=16, base_channels=16, z_dim=32, w_dim=32),
        weights=LossWeights(),
        ils=IlsOptions(),
        batch_size=16,
        total_images_shown=160,
        seed=0,
        checkpoint_every=160,
        log_every=64,
    )
    kw.update(overrides)
    return TrainConfig(**kw)


def log_q_oracle(b: torch.Tensor, f: torch.Tensor, family: str) -> float:
    """Pure-Python log q(b|f) for one sample pair, constant term dropped."""
    diffs = [bv - fv for bv, fv in zip(b.flatten().tolist(), f.flatten().tolist())]
    if family == "laplace":
        return -sum(abs(d) for d in diffs)
    return -0.5 * sum(d * d for d in diffs)


def vclub_oracle(
    b: torch.Tensor, f: torch.Tensor, shuffle, family: str = "laplace"
) -> float:
    """Direct per-sample summation of the N-sample vCLUB value."""
    n = b.shape[0]
    ks = list(shuffle)
    total = 0.0
    for i in range(n):
        total += log_q_oracle(b[i], f[i], family) - log_q_oracle(b[int(ks[i])], f[i], family)
    return total / n


def rel_err(actual: float, expected: float, floor: float = 1e-12) -> float:
    return abs(actual - expected) / max(abs(expected), floor)


def median(values) -> float:
    s = sorted(values)
    k = len(s)
    if k == 0:
        raise ValueError("median of empty sequence")
    mid = k // 2
    return s[mid] if k % 2 else 0.5 * (s[mid - 1] + s[mid])


def gaussian_pair_samplers(rho: float):
    """Samplers of 1-D unit Gaussians with correlation rho for MINE tests."""

    def joint(n: int, g: torch.Generator):
        x = torch.randn(n, 1, generator=g)
        eps = torch.randn(n, 1, generator=g)
        y = rho * x + math.sqrt(1.0 - rho * rho) * eps
        return x, y

    def marginal(n: int, g: torch.Generator):
        return torch.randn(n, 1, generator=g), torch.randn(n, 1, generator=g)

    return joint, marginal
