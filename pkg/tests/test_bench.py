import io

import numpy as np
import pytest

from ffvit.bench import (
    BenchSpec, ScalingReport, fit_exponent, flop_count, measure_forward, read_csv, write_csv,
)
from ffvit.errors import ConfigError

import oracles


@pytest.mark.parametrize("variant", ["ff_fixed_hidden", "attention_baseline"])
@pytest.mark.parametrize("n,d,h", [(4, 2, 3), (5, 3, 2), (3, 4, 6)])
def test_flop_count_matches_loop_nest(variant, n, d, h):
    assert flop_count(variant, n, d, h) == oracles.loop_nest_block_flops(variant, n, d, h)


def test_flop_count_batch_scales_linearly():
    assert flop_count("attention_baseline", 6, 4, 0, batch=3) == 3 * flop_count("attention_baseline", 6, 4, 0)


def test_fixed_hidden_token_term_linear_in_n():
    d, h = 64, 256
    def token_term(n):
        return flop_count("ff_fixed_hidden", n, d, h) - flop_count("ff_fixed_hidden", n, d, 0)
    for n in (128, 512, 2048):
        assert token_term(2 * n) == 2 * token_term(n)
        assert flop_count("ff_fixed_hidden", 2 * n, d, h) == 2 * flop_count("ff_fixed_hidden", n, d, h)


def test_attention_ratio_tends_to_four():
    ratios = [flop_count("attention_baseline", 2 * n, 64, 0) / flop_count("attention_baseline", n, 64, 0)
              for n in (64, 1024, 2**20)]
    assert ratios[0] < ratios[1] < ratios[2] < 4.0
    assert ratios[2] > 3.99


def test_proportional_hidden_quadratic_in_n():
    f = lambda n: flop_count("ff_proportional_hidden", n, 64, 4 * n)
    assert f(8192) / f(4096) > 3.9


@pytest.mark.parametrize("k", [1, 2])
@pytest.mark.parametrize("seed", range(5))
def test_fitter_recovers_power_law(k, seed):
    rng = np.random.default_rng(seed)
    lengths = [128, 256, 512, 1024, 2048, 4096]
    times = [3e-7 * n**k * (1 + rng.uniform(-0.05, 0.05)) for n in lengths]
    assert abs(fit_exponent(lengths, times) - k) <= 0.1


def test_fitter_uses_largest_half():
    lengths = [1, 2, 4, 8, 16, 32]
    # a lower-order term dominating the small lengths only
    times = [1e3 + 0 * n if n < 8 else float(n**2) for n in lengths]
    assert fit_exponent(lengths, times) == pytest.approx(2.0)


def test_csv_round_trip():
    report = ScalingReport("ff_fixed_hidden", [128, 256], [0.001234567891234, 0.0025], 1.0173)
    buf = io.StringIO()
    write_csv([report], buf)
    assert buf.getvalue().splitlines()[0] == "variant,N,median_seconds,alpha"
    rows = read_csv(io.StringIO(buf.getvalue()))
    assert [r[2] for r in rows] == report.medians
    assert rows == report.rows()


@pytest.mark.parametrize("bad", [dict(lengths=(128,)), dict(lengths=(256, 128)), dict(repetitions=2),
                                 dict(variant="conv"), dict(variant="attention_baseline", heads=3)])
def test_bench_spec_validation(bad):
    values = dict(variant="ff_fixed_hidden")
    values.update(bad)
    with pytest.raises(ConfigError):
        BenchSpec(**values)


def test_measure_forward_report_shape():
    ticks = iter(np.arange(0.0, 1000.0, 0.5))
    spec = BenchSpec("ff_proportional_hidden", lengths=(8, 16, 32), dim=8, repetitions=3, warmup=1)
    report = measure_forward(spec, timer=lambda: float(next(ticks)))
    assert report.lengths == [8, 16, 32]
    assert all(len(s) == 3 for s in report.samples)
    assert report.medians == [0.5, 0.5, 0.5] and report.alpha == pytest.approx(0.0, abs=1e-12)


def test_measure_forward_interleaves_lengths(monkeypatch):
    import ffvit.bench as bench_mod

    calls = []
    monkeypatch.setattr(bench_mod, "_forward_fn", lambda spec: lambda x, w: calls.append(x.shape[1]))
    spec = BenchSpec("ff_fixed_hidden", lengths=(4, 8), dim=4, repetitions=3, warmup=2, fixed_hidden=4)
    report = measure_forward(spec)
    # warmup per length first, then one pass over every length per round
    assert calls == [4, 4, 8, 8] + [4, 8] * 3
    assert [len(s) for s in report.samples] == [3, 3]


def test_measure_forward_real_timings_positive():
    report = measure_forward(BenchSpec("attention_baseline", lengths=(16, 32), dim=8, repetitions=3))
    assert all(m > 0 for m in report.medians) and np.isfinite(report.alpha)
