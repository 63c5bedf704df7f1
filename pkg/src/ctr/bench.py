"""Encoder latency sweeps and log-log scaling fits."""

from __future__ import annotations

import io
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, PBCEncoder, SelfAttentionEncoder
from .autodiff import Tensor
from .nn import ParameterSet

SCHEMES = ("self_attention", "pbc")
BENCH_COLUMNS = ("scheme", "N", "D", "layers", "mean_ms", "std_ms")


@dataclass
class Timing:
    scheme: str
    n: int
    d: int
    layers: int
    samples_ms: np.ndarray

    @property
    def mean_ms(self) -> float:
        return float(self.samples_ms.mean())

    @property
    def std_ms(self) -> float:
        return float(self.samples_ms.std())

    @property
    def min_ms(self) -> float:
        return float(self.samples_ms.min())


def _encoder(scheme: str, cfg: AttentionConfig, seed: int):
    params = ParameterSet(np.random.default_rng(seed))
    if scheme == "pbc":
        return PBCEncoder(params, cfg)
    if scheme == "self_attention":
        return SelfAttentionEncoder(params, cfg)
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def time_encoder(scheme: str, n: int, d: int, layers: int, batch: int = 4, reps: int = 20,
                 warmup: int = 3, n_heads: int = 4, ffn_expansion: int = 2, seed: int = 0) -> Timing:
    """Forward-pass latency of one encoder stack on ``batch`` proposals of ``n`` points."""
    if reps < 1 or warmup < 0:
        raise ValueError("reps must be >= 1 and warmup >= 0")
    cfg = AttentionConfig(d_model=d, n_heads=n_heads, n_layers=layers, ffn_expansion=ffn_expansion)
    enc = _encoder(scheme, cfg, seed)
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.standard_normal((batch, n, d)))
    k = Tensor(rng.standard_normal((batch, 9, d)))
    samples = []
    with ad.no_grad():
        for i in range(warmup + reps):
            t0 = time.perf_counter()
            enc(x, k)
            if i >= warmup:
                samples.append((time.perf_counter() - t0) * 1e3)
    return Timing(scheme, n, d, layers, np.array(samples))


def sweep(n_values, d: int, layers: int, batch: int = 4, reps: int = 20, warmup: int = 3,
          schemes=SCHEMES, **kw) -> list[Timing]:
    return [time_encoder(s, n, d, layers, batch, reps, warmup, **kw) for s in schemes for n in n_values]


def fit_exponent(timings: list[Timing], scheme: str, stat: str = "min_ms") -> float:
    """Slope of log(latency) against log(N). ``min_ms`` is the least noise-prone statistic."""
    rows = [t for t in timings if t.scheme == scheme]
    if len(rows) < 2:
        raise ValueError(f"need at least two N values for {scheme}")
    n = np.log([t.n for t in rows])
    y = np.log([getattr(t, stat) for t in rows])
    return float(np.polyfit(n, y, 1)[0])


def bench_csv(timings: list[Timing]) -> str:
    buf = io.StringIO()
    buf.write(",".join(BENCH_COLUMNS) + "\n")
    for t in timings:
        buf.write(f"{t.scheme},{t.n},{t.d},{t.layers},{t.mean_ms:.4f},{t.std_ms:.4f}\n")
    return buf.getvalue()
