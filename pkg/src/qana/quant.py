"""8-bit quantization primitives.

Weights use per-tensor symmetric signed-8 (zero point 0, codes -127..127, so
negation is exact). Activations use unsigned-8 with zero point 0 and a scale
chosen from a high percentile of observed values, since every quantized stream
in this pipeline is non-negative.

Rounding is half-away-from-zero everywhere, matching the integer runtime.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


def round_half_away(x):
    """Round to nearest integer, halves away from zero. Returns float array."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0
    bits: int = 8
    signed: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0.0):
            raise ConfigError(f"quant scale must be finite and positive, got {self.scale}")
        if self.bits != 8:
            raise ConfigError(f"only 8-bit quantization is supported, got {self.bits}")
        if self.signed:
            if self.zero_point != 0:
                raise ConfigError("signed (symmetric) quantization requires zero_point 0")
        elif not (0 <= self.zero_point <= 255):
            raise ConfigError(f"zero_point must be in [0,255], got {self.zero_point}")

    @property
    def qmin(self) -> int:
        return -127 if self.signed else 0

    @property
    def qmax(self) -> int:
        return 127 if self.signed else 255

    @property
    def dtype(self):
        return np.int8 if self.signed else np.uint8


@dataclass
class QuantizedTensor:
    values: np.ndarray
    params: QuantParams


def quantize_tensor(x, params: QuantParams) -> QuantizedTensor:
    """q = clip(round(x / scale) + zero_point, qmin, qmax)."""
    q = round_half_away(np.asarray(x, dtype=np.float64) / params.scale) + params.zero_point
    q = np.clip(q, params.qmin, params.qmax)
    return QuantizedTensor(q.astype(params.dtype), params)


def dequantize(qt: QuantizedTensor):
    p = qt.params
    return (qt.values.astype(np.float64) - p.zero_point) * p.scale


def quantize_symmetric(w) -> QuantizedTensor:
    """Per-tensor symmetric int8: scale = max|w| / 127, zero tensors get scale 1."""
    w = np.asarray(w, dtype=np.float64)
    amax = float(np.max(np.abs(w))) if w.size else 0.0
    scale = amax / 127.0 if amax > 0.0 else 1.0
    return quantize_tensor(w, QuantParams(scale, 0, 8, signed=True))


def percentile_high(values, q: float) -> float:
    """Nearest-rank percentile: the k-th smallest with k = ceil(q/100 * n)."""
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise ShapeError("percentile of an empty sample")
    if not (0.0 < q <= 100.0):
        raise ConfigError(f"percentile q must be in (0,100], got {q}")
    srt = np.sort(flat)
    k = max(math.ceil(q / 100.0 * flat.size), 1)
    return float(srt[k - 1])


def activation_quant_params(samples, q: float = 99.9) -> QuantParams:
    """Unsigned activation scale from the q-th percentile of observed values.

    The stream is assumed non-negative; the range is [0, p_q] so scale is
    p_q / 255 with zero point 0. Degenerate all-zero samples get a tiny
    positive scale rather than an error.
    """
    hi = max(percentile_high(samples, q), 0.0)
    hi = max(hi, 1e-12)
    return QuantParams(hi / 255.0, 0, 8, signed=False)
