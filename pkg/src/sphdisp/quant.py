"""Post-training quantization simulation.

Three modes: ``float32`` (the checkpoint baseline representation),
``float16`` (every weight rounded to its nearest binary16 value), and
``int8_float16`` (embedding tables and linear weight matrices quantized
with per-tensor symmetric int8 scales, everything else as float16).
Quantized inference runs in working precision on the dequantized weights;
this simulates storage, not int8 kernels.

Pure state-to-state transforms; tensors are independent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import HalfPrecisionOverflowError
from .model import ModelState

log = logging.getLogger(__name__)

QUANT_MODES = ("float32", "float16", "int8_float16")
FP16_MAX = 65504.0
INT8_MAX = 127


@dataclass
class QuantSpec:
    """Mode plus the per-tensor symmetric scales used for int8 tensors."""

    mode: str
    scales: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in QUANT_MODES:
            raise ValueError(f"mode must be one of {QUANT_MODES}")
        if any(s <= 0 for s in self.scales.values()):
            raise ValueError("int8 scales must be positive")


def int8_scope(state: ModelState) -> list[str]:
    """Tensors quantized to int8 in mixed mode: the embedding tables and
    every linear-layer weight matrix (all 2-D parameters)."""
    return [n for n, p in state.params.items() if p.data.ndim == 2]


def _clone(state: ModelState) -> ModelState:
    params = {
        n: Tensor(p.data.copy(), requires_grad=True) for n, p in state.params.items()
    }
    return ModelState(
        config=state.config,
        params=params,
        embed_trainable=state.embed_trainable,
        step=state.step,
    )


def _fp16_roundtrip(name: str, w: np.ndarray) -> np.ndarray:
    amax = float(np.abs(w).max()) if w.size else 0.0
    if amax > FP16_MAX:
        raise HalfPrecisionOverflowError(name, amax)
    return w.astype(np.float16).astype(np.float64)


def quantize_fp32(state: ModelState) -> ModelState:
    """Round every weight through float32 (the on-disk baseline)."""
    out = _clone(state)
    for p in out.params.values():
        p.data = p.data.astype(np.float32).astype(np.float64)
    return out


def quantize_fp16(state: ModelState) -> ModelState:
    """Round every weight to its nearest binary16 value (round-to-nearest-even),
    held in working precision.  Idempotent; overflow above 65504 is an error."""
    out = _clone(state)
    for name, p in out.params.items():
        p.data = _fp16_roundtrip(name, p.data)
    return out


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_int8(state: ModelState) -> tuple[ModelState, QuantSpec]:
    """Mixed int8/float16 quantization.

    In-scope tensors use s = max|w| / 127 and q = clamp(round-half-away(w/s));
    they are stored dequantized as q*s.  Out-of-scope tensors take the
    float16 round-trip.  An all-zero in-scope tensor has no scale and passes
    through unchanged (logged).
    """
    out = _clone(state)
    scope = set(int8_scope(state))
    spec = QuantSpec(mode="int8_float16")
    for name, p in out.params.items():
        if name not in scope:
            p.data = _fp16_roundtrip(name, p.data)
            continue
        amax = float(np.abs(p.data).max())
        if amax == 0.0:
            log.info("int8: tensor %s is all zero; passed through unscaled", name)
            continue
        s = amax / INT8_MAX
        q = np.clip(_round_half_away(p.data / s), -INT8_MAX, INT8_MAX)
        p.data = q * s
        spec.scales[name] = s
    return out, spec


def apply_quant(state: ModelState, mode: str) -> tuple[ModelState, QuantSpec]:
    if mode == "float32":
        return quantize_fp32(state), QuantSpec(mode="float32")
    if mode == "float16":
        return quantize_fp16(state), QuantSpec(mode="float16")
    if mode == "int8_float16":
        return quantize_int8(state)
    raise ValueError(f"mode must be one of {QUANT_MODES}")


def size_report(state: ModelState) -> dict:
    """Parameter-payload bytes per mode (f32 = 4 B, f16 = 2 B, int8 = 1 B for
    in-scope tensors) and percentages of the float32 payload."""
    scope = set(int8_scope(state))
    n_in = sum(p.data.size for n, p in state.params.items() if n in scope)
    n_out = sum(p.data.size for n, p in state.params.items() if n not in scope)
    total = n_in + n_out
    bytes_by_mode = {
        "float32": 4 * total,
        "float16": 2 * total,
        "int8_float16": n_in + 2 * n_out,
    }
    base = bytes_by_mode["float32"]
    return {
        "params": total,
        "params_int8_scope": n_in,
        "bytes": bytes_by_mode,
        "percent": {m: 100.0 * b / base for m, b in bytes_by_mode.items()},
    }
