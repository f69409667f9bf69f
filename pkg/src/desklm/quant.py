"""Simulated post-training quantization.

Weights: symmetric per-channel INT4 (scale = max|w_c| / 7, codes in [-8, 7]).
Activations: symmetric per-tensor INT8 from running max-abs calibration.
Forward runs in "fake-quant" mode: matmuls consume dequantized weights and
round-tripped activations, so the numeric effect of the low-bit formats is
simulated while everything stays float32 end to end.  Token embeddings,
norm gains and a tied output head stay full precision, as do LoRA factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from . import kernels
from .bundle import load_bundle, save_bundle, weights_from_tensors
from .errors import BundleError, CalibrationError, ShapeError
from .model import (DecodeSession, KvCache, LayerWeights, ModelConfig,
                    ModelWeights, forward)

INT4_MIN, INT4_MAX = -8, 7
INT8_MIN, INT8_MAX = -128, 127

PER_CHANNEL_INT4 = "per_channel_int4"
PER_TENSOR_INT8 = "per_tensor_int8"

# matrices that get INT4 codes; everything else stays f32
_QUANT_MATS = ("wq", "wk", "wv", "wo", "w_up", "w_gate", "w_down")


@dataclass
class QuantizedTensor:
    codes: np.ndarray            # int8 storage (int4 values fit)
    scheme: str
    scales: np.ndarray | float   # per-channel vector or scalar
    original_shape: tuple
    axis: int | None = None      # channel axis for per-channel schemes

    def dequantize(self) -> np.ndarray:
        scales = self._broadcast_scales()
        return kernels.dequantize_codes(self.codes, scales).reshape(self.original_shape)

    def _broadcast_scales(self):
        if self.scheme == PER_TENSOR_INT8:
            return float(self.scales)
        shape = [1] * self.codes.ndim
        shape[self.axis] = -1
        return np.asarray(self.scales, np.float64).reshape(shape)


def quantize_weights(w, axis: int = 1) -> QuantizedTensor:
    """Per-channel symmetric INT4; all-zero channels get scale 1, codes 0."""
    w = np.asarray(w, dtype=np.float32)
    if not np.isfinite(w).all():
        raise ShapeError("weights must be finite")
    if w.shape[axis] == 0:
        raise ShapeError("empty channel axis")
    reduce_axes = tuple(i for i in range(w.ndim) if i != axis)
    maxabs = np.abs(w).max(axis=reduce_axes).astype(np.float64)
    scales = np.where(maxabs > 0, maxabs / INT4_MAX, 1.0)
    shape = [1] * w.ndim
    shape[axis] = -1
    codes = kernels.quantize_codes(w, scales.reshape(shape), INT4_MIN, INT4_MAX)
    return QuantizedTensor(codes=codes, scheme=PER_CHANNEL_INT4, scales=scales,
                           original_shape=w.shape, axis=axis)


class CalibStats:
    """Running max-abs per activation site, collected over calibration prompts."""

    def __init__(self):
        self.max_abs: dict[str, float] = {}
        self.batches = 0

    def observe(self, site: str, x):
        m = float(np.abs(x).max()) if np.asarray(x).size else 0.0
        self.max_abs[site] = max(self.max_abs.get(site, 0.0), m)

    def scale(self, site: str) -> float:
        if site not in self.max_abs:
            raise CalibrationError(f"no calibration stats for site {site!r}")
        m = self.max_abs[site]
        return m / INT8_MAX if m > 0 else 1.0

    def scales(self) -> dict[str, float]:
        if not self.max_abs or self.batches < 1:
            raise CalibrationError("calibration requires at least one batch")
        return {site: self.scale(site) for site in sorted(self.max_abs)}


def quantize_activation(x, calib: CalibStats | float, site: str = "") -> QuantizedTensor:
    """Per-tensor symmetric INT8 against a calibrated max-abs scale."""
    x = np.asarray(x, dtype=np.float32)
    if isinstance(calib, CalibStats):
        scale = calib.scale(site)
    else:
        scale = float(calib)
        if scale <= 0:
            raise CalibrationError("activation scale must be positive")
    codes = kernels.quantize_codes(x, scale, INT8_MIN, INT8_MAX)
    return QuantizedTensor(codes=codes, scheme=PER_TENSOR_INT8, scales=scale,
                           original_shape=x.shape)


def fake_quant_array(x, scale: float):
    codes = kernels.quantize_codes(x, scale, INT8_MIN, INT8_MAX)
    return kernels.dequantize_codes(codes, scale)


# -- whole-model fake quantization -------------------------------------------


def quantize_model_weights(weights: ModelWeights):
    """Quantize the projection/MLP matrices; returns ({name: QuantizedTensor},
    fake-quant ModelWeights whose matrices are the dequantized codes)."""
    qtensors = {}
    fq_layers = []
    for i, lw in enumerate(weights.layers):
        kw = {"attn_gain": lw.attn_gain, "mlp_gain": lw.mlp_gain}
        for name in _QUANT_MATS:
            qt = quantize_weights(getattr(lw, name), axis=1)
            qtensors[f"layers.{i}.{name}"] = qt
            kw[name] = qt.dequantize()
        fq_layers.append(LayerWeights(**kw))
    fq = ModelWeights(weights.config, weights.token_embedding, fq_layers,
                      weights.final_gain, head=weights.head)
    return qtensors, fq


def make_act_observer(stats: CalibStats):
    def hook(site, x):
        stats.observe(site, x)
        return x

    return hook


def make_act_fq(act_scales: dict[str, float]):
    def hook(site, x):
        if site not in act_scales:
            raise CalibrationError(f"no activation scale for site {site!r}")
        return fake_quant_array(x, act_scales[site])

    return hook


def calibrate(weights: ModelWeights, prompts) -> CalibStats:
    """Run the given token prompts through the model, recording max-abs at
    every matmul boundary."""
    stats = CalibStats()
    hook = make_act_observer(stats)
    for prompt in prompts:
        session = DecodeSession(weights, act_fq=hook)
        session.prefill(list(prompt))
        stats.batches += 1
    if stats.batches < 1:
        raise CalibrationError("empty calibration prompt set")
    return stats


@dataclass
class QuantizedModel:
    weights: ModelWeights            # fake-quant weights (dequantized codes)
    act_scales: dict[str, float]
    qtensors: dict[str, QuantizedTensor] = field(default_factory=dict)

    def act_fq(self):
        return make_act_fq(self.act_scales)

    def session(self, **kw) -> DecodeSession:
        return DecodeSession(self.weights, act_fq=self.act_fq(), **kw)


def quantize_model(weights: ModelWeights, calib_prompts) -> QuantizedModel:
    qtensors, fq = quantize_model_weights(weights)
    stats = calibrate(fq, calib_prompts)
    return QuantizedModel(weights=fq, act_scales=stats.scales(), qtensors=qtensors)


def fake_quant_forward(qmodel: QuantizedModel, tokens, cache: KvCache, mask,
                       lora_delta=None, **kw):
    """Forward with INT4 weights + INT8 activations simulated; LoRA full precision."""
    return forward(qmodel.weights, tokens, cache, mask,
                   lora_delta=lora_delta, act_fq=qmodel.act_fq(), **kw)


# -- persistence --------------------------------------------------------------


def save_quantized(path, source: ModelWeights, qmodel: QuantizedModel):
    """Quantized bundle: INT4 codes + per-matrix scales, f32 for the rest."""
    tensors = {}
    for name, arr in source.all_tensors().items():
        qt = qmodel.qtensors.get(name)
        if qt is None:
            tensors[name] = arr
        else:
            tensors[name] = (qt.codes, "i4packed", {"axis": qt.axis})
            tensors[f"{name}.scales"] = np.asarray(qt.scales, np.float32)
    return save_bundle(path, tensors, config=source.config.to_dict(), extra={
        "role": "model", "quantized": True,
        "activation_scales": qmodel.act_scales,
    })


def load_quantized(path) -> QuantizedModel:
    manifest, tensors = load_bundle(path)
    if not manifest.get("quantized"):
        raise BundleError(f"{path} is not a quantized bundle")
    config = ModelConfig.from_dict(manifest["config"])
    recs = {r["name"]: r for r in manifest["tensors"]}
    qtensors = {}
    dequant = {}
    for name, arr in tensors.items():
        if name.endswith(".scales"):
            continue
        rec = recs[name]
        if rec["dtype"] == "i4packed":
            qt = QuantizedTensor(
                codes=arr, scheme=PER_CHANNEL_INT4,
                scales=tensors[f"{name}.scales"].astype(np.float64),
                original_shape=tuple(rec["shape"]),
                axis=rec.get("attrs", {}).get("axis", 1),
            )
            qtensors[name] = qt
            dequant[name] = qt.dequantize()
        else:
            dequant[name] = arr
    weights = weights_from_tensors(config, dequant)
    return QuantizedModel(weights=weights,
                          act_scales=dict(manifest["activation_scales"]),
                          qtensors=qtensors)


# -- accounting ----------------------------------------------------------------


@dataclass
class CompressionReport:
    """Byte accounting: fp16 baseline vs INT4 codes, adapters listed apart."""

    quantized_params: int
    channels: int
    fp16_bytes: int
    int4_code_bytes: int
    scale_bytes: int
    adapter_fp16_bytes: dict

    @property
    def int4_total_bytes(self) -> int:
        return self.int4_code_bytes + self.scale_bytes

    @property
    def ratio_codes_only(self) -> float:
        return self.fp16_bytes / self.int4_code_bytes if self.int4_code_bytes else 0.0

    @property
    def ratio(self) -> float:
        return self.fp16_bytes / self.int4_total_bytes if self.int4_total_bytes else 0.0

    def to_dict(self):
        return {
            "quantized_params": self.quantized_params, "channels": self.channels,
            "fp16_bytes": self.fp16_bytes, "int4_code_bytes": self.int4_code_bytes,
            "scale_bytes": self.scale_bytes, "int4_total_bytes": self.int4_total_bytes,
            "ratio_codes_only": self.ratio_codes_only, "ratio": self.ratio,
            "adapter_fp16_bytes": self.adapter_fp16_bytes,
        }


def compression_report(weights: ModelWeights, adapters=()) -> CompressionReport:
    """fp16 baseline = 2 bytes/param over the quantized matrix set;
    INT4 = 0.5 bytes/param + one f32 scale per output channel.  Adapters are
    reported as a separate "+X" term, never folded into the ratio."""
    params = 0
    channels = 0
    for lw in weights.layers:
        for name in _QUANT_MATS:
            mat = getattr(lw, name)
            params += mat.size
            channels += mat.shape[1]
    return CompressionReport(
        quantized_params=params,
        channels=channels,
        fp16_bytes=2 * params,
        int4_code_bytes=params // 2 + (params % 2),
        scale_bytes=4 * channels,
        adapter_fp16_bytes={a.task_id: a.param_bytes() // 2 for a in adapters},
    )
