"""Forward-time scaling of a single block against sequence length.

Three block kinds are compared: the token feed-forward block with a fixed
hidden width (cost linear in N), the same block with hidden width 4N
(quadratic), and the attention block (quadratic through the N x N score
matrix). ``measure_forward`` times them and fits the log-log slope.
"""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError, ResourceError
from .model import attention_block, linear_block
from .tensor import Tensor, no_grad

BENCH_VARIANTS = ("ff_fixed_hidden", "ff_proportional_hidden", "attention_baseline")
CSV_HEADER = ("variant", "N", "median_seconds", "alpha")


@dataclass(frozen=True)
class BenchSpec:
    variant: str
    lengths: tuple[int, ...] = (128, 256, 512, 1024, 2048, 4096)
    dim: int = 64
    repetitions: int = 9
    warmup: int = 1
    fixed_hidden: int = 256
    heads: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(int(n) for n in self.lengths))
        if self.variant not in BENCH_VARIANTS:
            raise ConfigError(f"unknown bench variant {self.variant!r}; expected {BENCH_VARIANTS}")
        if len(self.lengths) < 2:
            raise ConfigError("need at least two sequence lengths")
        if any(b <= a for a, b in zip(self.lengths, self.lengths[1:])) or self.lengths[0] < 1:
            raise ConfigError(f"lengths must be positive and strictly increasing: {self.lengths}")
        if self.repetitions < 3:
            raise ConfigError("repetitions must be >= 3")
        if self.warmup < 0 or self.dim < 1 or self.fixed_hidden < 1:
            raise ConfigError("warmup must be >= 0; dim and fixed_hidden positive")
        if self.variant == "attention_baseline" and self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class ScalingReport:
    variant: str
    lengths: list[int]
    medians: list[float]
    alpha: float
    samples: list[list[float]] = field(default_factory=list)

    def rows(self) -> list[tuple]:
        return [(self.variant, n, m, self.alpha) for n, m in zip(self.lengths, self.medians)]


def token_hidden_for(variant: str, n: int, fixed_hidden: int) -> int:
    return 4 * n if variant == "ff_proportional_hidden" else fixed_hidden


def flop_count(variant: str, n: int, d: int, h: int, batch: int = 1) -> int:
    """Floating-point operations (2 per multiply-add) of one block's matmuls.

    ``h`` is the token feed-forward hidden width; attention ignores it.
    """
    feature_ff = 2 * (2 * batch * n * d * 4 * d)
    if variant in ("ff_fixed_hidden", "ff_proportional_hidden", "ff_only"):
        return 2 * (2 * batch * d * n * h) + feature_ff
    if variant == "attention_baseline":
        projections = 4 * 2 * batch * n * d * d
        scores_and_mix = 2 * 2 * batch * n * n * d
        return projections + scores_and_mix + feature_ff
    raise ConfigError(f"unknown variant {variant!r}")


def fit_exponent(lengths, times) -> float:
    """Least-squares slope of log(time) on log(N) over the largest half of N."""
    lengths = np.asarray(lengths, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    order = np.argsort(lengths)
    keep = order[-max(2, math.ceil(len(lengths) / 2)):]
    slope, _ = np.polyfit(np.log(lengths[keep]), np.log(times[keep]), 1)
    return float(slope)


def _block_weights(spec: BenchSpec, n: int, rng: np.random.Generator) -> dict[str, Tensor]:
    d = spec.dim

    def w(*shape):
        return Tensor(rng.standard_normal(shape, dtype=np.float32) * np.float32(0.02))

    def zeros(k):
        return Tensor(np.zeros(k, dtype=np.float32))

    weights = {
        "norm1.gamma": Tensor(np.ones(d, dtype=np.float32)), "norm1.beta": zeros(d),
        "norm2.gamma": Tensor(np.ones(d, dtype=np.float32)), "norm2.beta": zeros(d),
        "feature_ff.w1": w(d, 4 * d), "feature_ff.b1": zeros(4 * d),
        "feature_ff.w2": w(4 * d, d), "feature_ff.b2": zeros(d),
    }
    if spec.variant == "attention_baseline":
        weights.update({"attn.wqkv": w(d, 3 * d), "attn.bqkv": zeros(3 * d),
                        "attn.wo": w(d, d), "attn.bo": zeros(d)})
    else:
        h = token_hidden_for(spec.variant, n, spec.fixed_hidden)
        weights.update({"token_ff.w1": w(n, h), "token_ff.b1": zeros(h),
                        "token_ff.w2": w(h, n), "token_ff.b2": zeros(n)})
    return weights


def _forward_fn(spec: BenchSpec) -> Callable:
    if spec.variant == "attention_baseline":
        return lambda x, wts: attention_block(x, wts, spec.heads)
    return linear_block


def measure_forward(spec: BenchSpec, timer: Callable[[], float] = time.perf_counter
                    ) -> ScalingReport:
    """Median single-block forward time (batch 1, no autodiff) per length, and the
    fitted scaling exponent. Runs single-threaded.

    Repetitions are interleaved across lengths (one pass over every N per
    round), so slow stretches of machine time are shared by all lengths
    instead of skewing the slope.
    """
    forward = _forward_fn(spec)
    samples: list[list[float]] = [[] for _ in spec.lengths]
    with threadpool_limits(limits=1), no_grad():
        setups = []
        for n in spec.lengths:
            try:
                rng = np.random.default_rng([spec.seed, n])
                weights = _block_weights(spec, n, rng)
                x = Tensor(rng.standard_normal((1, n, spec.dim), dtype=np.float32))
                for _ in range(spec.warmup):
                    forward(x, weights)
            except MemoryError:
                raise ResourceError(f"out of memory benchmarking {spec.variant} at N={n}") from None
            setups.append((n, x, weights))
        for _ in range(spec.repetitions):
            for times, (n, x, weights) in zip(samples, setups):
                try:
                    t0 = timer()
                    forward(x, weights)
                    times.append(timer() - t0)
                except MemoryError:
                    raise ResourceError(
                        f"out of memory benchmarking {spec.variant} at N={n}") from None
    medians = [statistics.median(times) for times in samples]
    return ScalingReport(spec.variant, list(spec.lengths), medians,
                         fit_exponent(spec.lengths, medians), samples)


def write_csv(reports, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for report in reports:
        for variant, n, median, alpha in report.rows():
            writer.writerow([variant, n, repr(median), repr(alpha)])


def read_csv(fh) -> list[tuple[str, int, float, float]]:
    return [(r["variant"], int(r["N"]), float(r["median_seconds"]), float(r["alpha"]))
            for r in csv.DictReader(fh)]
