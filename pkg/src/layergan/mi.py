"""Mutual information machinery.

Two estimators live here: the sample-based variational contrastive log-ratio
upper bound (vCLUB) used inside the training losses, and a Donsker-Varadhan
neural estimator (MINE) used only at evaluation time. Closed-form Gaussian MI
is included as a test oracle.

All values are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn

from .layerops import LayerTriplet, binarize_mask, split_regions

Sampler = Callable[[int, torch.Generator], tuple[torch.Tensor, torch.Tensor]]

_FAMILIES = ("laplace", "gaussian")


@dataclass(frozen=True)
class MIEstimate:
    """A scalar MI estimate plus estimator metadata."""

    value: float
    estimator: str  # "vclub" | "mine" | "closed_form"
    bound: str  # "upper" | "lower" | "exact"
    n_samples: int
    family: Optional[str] = None
    raw_value: Optional[float] = None  # pre-floor value for MINE


@dataclass(frozen=True)
class MineConfig:
    hidden_sizes: tuple[int, ...] = (256, 256)
    train_steps: int = 2000
    batch_size: int = 128
    learning_rate: float = 1e-4
    ema_decay: float = 0.99
    seed: int = 0
    eval_samples: int = 8192

    def __post_init__(self):
        if self.train_steps < 1:
            raise ValueError("train_steps must be >= 1")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in (0, 1)")


def _log_q_density(b: torch.Tensor, f: torch.Tensor, family: str) -> torch.Tensor:
    """Per-sample log q(b|f) with the constant term dropped.

    Laplace: -||b - f||_1, Gaussian: -1/2 ||b - f||_2^2, both summed over all
    non-batch dimensions.
    """
    if family not in _FAMILIES:
        raise ValueError(f"family must be one of {_FAMILIES}, got {family!r}")
    diff = (b - f).flatten(1)
    if family == "laplace":
        return -diff.abs().sum(dim=1)
    return -0.5 * diff.pow(2).sum(dim=1)


def vclub_term(
    b: torch.Tensor,
    f: torch.Tensor,
    shuffle: torch.Tensor | Sequence[int],
    family: str = "laplace",
    normalize: bool = False,
) -> torch.Tensor:
    """Differentiable N-sample vCLUB value for one (b, f) pair.

    (1/N) * sum_i [log q(b_i | f_i) - log q(b_{k_i} | f_i)] with k the given
    0-based shuffle index vector. ``normalize`` divides the log-densities by
    the per-sample element count.
    """
    if b.shape[0] != f.shape[0]:
        raise ValueError(f"batch mismatch: {b.shape[0]} vs {f.shape[0]}")
    if b.shape != f.shape:
        raise ValueError(f"shape mismatch: {tuple(b.shape)} vs {tuple(f.shape)}")
    n = b.shape[0]
    if n < 2:
        raise ValueError("vCLUB needs at least 2 samples (shuffle degenerate)")
    k = torch.as_tensor(shuffle, dtype=torch.long)
    if k.shape != (n,):
        raise ValueError(f"shuffle must have shape ({n},), got {tuple(k.shape)}")
    if k.min() < 0 or k.max() >= n:
        raise ValueError("shuffle entries must be valid 0-based sample indices")
    matched = _log_q_density(b, f, family)
    shuffled = _log_q_density(b[k], f, family)
    value = (matched - shuffled).mean()
    if normalize:
        value = value / b[0].numel()
    return value


def vclub_estimate(
    b_batch: torch.Tensor,
    f_batch: torch.Tensor,
    family: str = "laplace",
    shuffle: torch.Tensor | Sequence[int] | None = None,
    generator: torch.Generator | None = None,
) -> MIEstimate:
    """N-sample vCLUB upper-bound estimate between two sample batches.

    ``shuffle`` gives explicit 0-based negative-sample indices; when omitted
    they are drawn uniformly with replacement from the batch.
    """
    n = b_batch.shape[0]
    if shuffle is None:
        if n < 2:
            raise ValueError("vCLUB needs at least 2 samples")
        shuffle = torch.randint(0, n, (n,), generator=generator)
    with torch.no_grad():
        value = vclub_term(b_batch, f_batch, shuffle, family=family)
    return MIEstimate(
        value=float(value),
        estimator="vclub",
        bound="upper",
        n_samples=n,
        family=family,
    )


def draw_shuffle(n: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Uniform with-replacement index vector in {0..n-1} (self-pairs allowed)."""
    if n < 2:
        raise ValueError("need at least 2 samples to shuffle")
    return torch.randint(0, n, (n,), generator=generator)


class _StatisticsNet(nn.Module):
    """MLP statistics network T(x, y) for the Donsker-Varadhan objective."""

    def __init__(self, x_dim: int, y_dim: int, hidden_sizes: Sequence[int]):
        super().__init__()
        layers: list[nn.Module] = []
        prev = x_dim + y_dim
        for h in hidden_sizes:
            layers += [nn.Linear(prev, h), nn.ReLU()]
            prev = h
        layers.append(nn.Linear(prev, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([x, y], dim=1)).squeeze(1)


def _seeded_linear_init(module: nn.Module, generator: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            fan_in = m.weight.shape[1]
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                m.bias.zero_()


def _as_2d(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape[0], -1)


def _safe_scale(std: torch.Tensor) -> torch.Tensor:
    """Per-coordinate scale for standardization; coordinates whose spread is
    below float-noise level are treated as constant instead of amplified."""
    return torch.where(std > 1e-5, std, torch.ones_like(std))


def _log_ema_update(log_ema: float, log_value: float, decay: float) -> float:
    """EMA of a positive scalar tracked in log space: log(d*e^a + (1-d)*e^b)."""
    hi = max(log_ema + math.log(decay), log_value + math.log(1.0 - decay))
    return hi + math.log(
        math.exp(log_ema + math.log(decay) - hi)
        + math.exp(log_value + math.log(1.0 - decay) - hi)
    )


def mine_estimate(
    joint_sampler: Sampler,
    marginal_sampler: Sampler,
    cfg: MineConfig = MineConfig(),
    eval_joint: Sampler | None = None,
    eval_marginal: Sampler | None = None,
) -> MIEstimate:
    """Train a statistics network on the Donsker-Varadhan bound and report it.

    The objective E_joint[T] - log E_marginal[e^T] is maximized with an
    EMA-smoothed denominator in the gradient. Inputs are standardized per
    coordinate from a seeded calibration draw (MI is invariant under
    coordinate-wise affine maps, and the network trains far more evenly that
    way). The returned value is the objective on held-out samples - from
    ``eval_joint``/``eval_marginal`` when given, e.g. a disjoint half of a
    finite pool, else fresh draws from the training samplers - floored at 0
    since MI is nonnegative (a constant T certifies the 0 bound); the
    unfloored value is kept in ``raw_value``.

    Samplers take (n, generator) and return a pair of [n, d] tensors; joint
    pairs are dependent, marginal pairs are drawn independently.
    """
    g = torch.Generator().manual_seed(cfg.seed)
    cx, cy = joint_sampler(max(cfg.batch_size, 256), g)
    cx, cy = _as_2d(cx), _as_2d(cy)
    mx, sx = cx.mean(dim=0), _safe_scale(cx.std(dim=0))
    my, sy = cy.mean(dim=0), _safe_scale(cy.std(dim=0))

    def prep(x: torch.Tensor, y: torch.Tensor):
        return (_as_2d(x) - mx) / sx, (_as_2d(y) - my) / sy

    net = _StatisticsNet(cx.shape[1], cy.shape[1], cfg.hidden_sizes)
    _seeded_linear_init(net, g)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    log_ema: float | None = None
    for step in range(cfg.train_steps):
        xj, yj = prep(*joint_sampler(cfg.batch_size, g))
        xm, ym = prep(*marginal_sampler(cfg.batch_size, g))
        t_joint = net(xj, yj).mean()
        t_marg = net(xm, ym)
        log_et = float(t_marg.detach().logsumexp(0)) - math.log(t_marg.shape[0])
        if not (torch.isfinite(t_joint) and math.isfinite(log_et)):
            raise FloatingPointError(
                "MINE objective became non-finite; lower the learning rate "
                "or shrink the statistics network"
            )
        if log_ema is None:
            log_ema = log_et
        log_ema = _log_ema_update(log_ema, log_et, cfg.ema_decay)
        # log E[e^T] gradient with the batch denominator replaced by the EMA,
        # everything shifted by log_ema so the exponentials stay bounded
        loss = -(t_joint - (t_marg - log_ema).exp().mean())
        opt.zero_grad()
        loss.backward()
        opt.step()
    ej = eval_joint if eval_joint is not None else joint_sampler
    em = eval_marginal if eval_marginal is not None else marginal_sampler
    with torch.no_grad():
        xj, yj = prep(*ej(cfg.eval_samples, g))
        xm, ym = prep(*em(cfg.eval_samples, g))
        t_joint = net(xj, yj)
        t_marg = net(xm, ym)
        raw = float(t_joint.mean() - (t_marg.logsumexp(0) - math.log(cfg.eval_samples)))
    return MIEstimate(
        value=max(raw, 0.0),
        estimator="mine",
        bound="lower",
        n_samples=cfg.eval_samples,
        raw_value=raw,
    )


def pool_samplers(
    x_pool: torch.Tensor, y_pool: torch.Tensor
) -> tuple[Sampler, Sampler]:
    """Joint/marginal samplers drawing with replacement from paired pools."""
    if x_pool.shape[0] != y_pool.shape[0]:
        raise ValueError("pools must be paired (same length)")
    n = x_pool.shape[0]

    def joint(k: int, g: torch.Generator):
        idx = torch.randint(0, n, (k,), generator=g)
        return x_pool[idx], y_pool[idx]

    def marginal(k: int, g: torch.Generator):
        ix = torch.randint(0, n, (k,), generator=g)
        iy = torch.randint(0, n, (k,), generator=g)
        return x_pool[ix], y_pool[iy]

    return joint, marginal


def split_pool_samplers(
    x_pool: torch.Tensor, y_pool: torch.Tensor
) -> tuple[tuple[Sampler, Sampler], tuple[Sampler, Sampler]]:
    """Train samplers on the first half of the pool, eval samplers on the rest.

    Training and evaluation on one finite pool lets the statistics network
    memorize the joint pairings, which reads as mutual information that is not
    there; disjoint halves make the held-out bound honest.
    """
    n = x_pool.shape[0]
    if n < 4:
        raise ValueError("need at least 4 paired samples to split a pool")
    half = n // 2
    train = pool_samplers(x_pool[:half], y_pool[:half])
    evaluation = pool_samplers(x_pool[half:], y_pool[half:])
    return train, evaluation


def gaussian_mi_closed_form(rho: float, dim: int = 1) -> MIEstimate:
    """Exact MI of `dim` independent pairs of unit Gaussians with correlation rho."""
    if not abs(rho) < 1.0:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    if dim < 1:
        raise ValueError("dim must be positive")
    value = -0.5 * dim * math.log(1.0 - rho * rho)
    return MIEstimate(value=value, estimator="closed_form", bound="exact", n_samples=0)


def _pool_regions(t: torch.Tensor, size: int = 8) -> torch.Tensor:
    side = min(size, t.shape[-1], t.shape[-2])
    return torch.nn.functional.adaptive_avg_pool2d(t, side).flatten(1)


def layerwise_mi_eval(
    samples: LayerTriplet | Sequence[LayerTriplet],
    cfg: MineConfig = MineConfig(),
) -> MIEstimate:
    """Summed MINE MI over the two visibility-split region pairs.

    Masks are binarized at 0.5, each sample is split into
    (b_inv, f_vis) and (b_vis, f_inv), both region tensors are average-pooled
    to at most 8x8 and flattened, and one MINE estimate is trained per pair on
    half of the pool and evaluated on the held-out half. The reported value is
    the sum of the two estimates.
    """
    if isinstance(samples, LayerTriplet):
        pool = samples
    else:
        pool = LayerTriplet(
            f=torch.cat([s.f for s in samples]),
            b=torch.cat([s.b for s in samples]),
            m=torch.cat([s.m for s in samples]),
        )
    if pool.f.shape[0] < 2 * cfg.batch_size:
        raise ValueError(
            f"need at least 2*cfg.batch_size={2 * cfg.batch_size} samples so "
            f"each pool half covers a batch, got {pool.f.shape[0]}"
        )
    split = split_regions(
        LayerTriplet(f=pool.f, b=pool.b, m=binarize_mask(pool.m))
    )
    estimates = []
    for i, (first, second) in enumerate(
        [(split.b_inv, split.f_vis), (split.b_vis, split.f_inv)]
    ):
        train, held_out = split_pool_samplers(_pool_regions(first), _pool_regions(second))
        sub_cfg = MineConfig(
            hidden_sizes=cfg.hidden_sizes,
            train_steps=cfg.train_steps,
            batch_size=cfg.batch_size,
            learning_rate=cfg.learning_rate,
            ema_decay=cfg.ema_decay,
            seed=cfg.seed + i,
            eval_samples=cfg.eval_samples,
        )
        estimates.append(
            mine_estimate(*train, sub_cfg, eval_joint=held_out[0], eval_marginal=held_out[1])
        )
    return MIEstimate(
        value=sum(e.value for e in estimates),
        estimator="mine",
        bound="lower",
        n_samples=pool.f.shape[0],
        raw_value=sum(e.raw_value for e in estimates),
    )
