"""Calibration-dependent layer quantizers and their composition.

All methods share one error-compensated sweep (the GPTQ procedure):
columns are quantized in natural order and the still-unquantized tail is
corrected through rows of the upper Cholesky factor U of the inverse
damped Hessian (Hinv = U^T U).  RTN is the degenerate sweep with no
compensation; the outlier-extracting method masks its exactly-stored
cells out of the sweep; the activation-aware and smoothing methods scale
weight columns before quantizing and record the compensating per-channel
input divisor on the result.

Estimator classes at the bottom wrap the same cores in the usual
fit/transform shape: fit() consumes a calibration activation matrix,
transform() maps a weight matrix to its effective dequantized form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import DegenerateCalibrationError, ShapeError
from .grids import (
    QuantConfig,
    QuantizedTensor,
    SCALE_FLOOR,
    _fit_groups_matrix,
    _pack_code_matrix,
    _round_half_away,
    group_slices,
    passthrough_tensor,
    rtn_quantize,
)
from .linalg import as_matrix, cholesky, invert_upper_triangular
from .model import ActivationStats, LayerRef

METHODS = ("rtn", "gptq", "spqr", "awq", "smoothquant", "smoothquant_gptq")

DEFAULT_METHOD_PARAMS = {
    "damping": 0.01,
    "outlier_threshold": 0.2,
    "outlier_cap_fraction": 0.01,
    "awq_grid_points": 20,
    "smooth_alpha": 0.5,
}

SCALE_EPS = 1e-8  # floor for channel scale vectors (awq / smoothing)


@dataclass(frozen=True)
class MethodSpec:
    """A quantization method plus every knob it reads."""

    method: str
    cfg: QuantConfig = field(default_factory=QuantConfig)
    method_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        merged = dict(DEFAULT_METHOD_PARAMS)
        for k, v in self.method_params.items():
            if k not in DEFAULT_METHOD_PARAMS:
                raise ValueError(f"unknown method parameter {k!r}")
            merged[k] = v
        if not 0.0 <= merged["smooth_alpha"] <= 1.0:
            raise ValueError("smooth_alpha must lie in [0, 1]")
        if not 0.0 <= merged["outlier_cap_fraction"] <= 0.05:
            raise ValueError("outlier_cap_fraction must lie in [0, 0.05]")
        if merged["awq_grid_points"] < 2:
            raise ValueError("awq_grid_points must be >= 2")
        if merged["damping"] < 0:
            raise ValueError("damping must be >= 0")
        object.__setattr__(self, "method_params", merged)

    @property
    def damping(self) -> float:
        return self.method_params["damping"]

    @property
    def outlier_threshold(self) -> float:
        return self.method_params["outlier_threshold"]

    @property
    def outlier_cap_fraction(self) -> float:
        return self.method_params["outlier_cap_fraction"]

    @property
    def awq_grid_points(self) -> int:
        return int(self.method_params["awq_grid_points"])

    @property
    def smooth_alpha(self) -> float:
        return self.method_params["smooth_alpha"]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "w_bits": self.cfg.w_bits,
            "a_bits": self.cfg.a_bits,
            "group_size": self.cfg.group_size,
            "scheme": self.cfg.scheme,
            "sequential_mode": self.cfg.sequential_mode,
            "method_params": dict(self.method_params),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MethodSpec":
        cfg = QuantConfig(
            w_bits=d.get("w_bits", 4),
            a_bits=d.get("a_bits", 16),
            group_size=d.get("group_size", 128),
            scheme=d.get("scheme", "asymmetric"),
            sequential_mode=d.get("sequential_mode", "layer_sequential"),
        )
        return cls(method=d["method"], cfg=cfg, method_params=d.get("method_params", {}))


@dataclass
class QuantizationReport:
    layer: Optional[LayerRef]
    method: MethodSpec
    proxy_loss: float
    output_mse: float
    outlier_count: int

    def __post_init__(self):
        # traces of PSD forms; tiny negative values are fp noise
        self.proxy_loss = max(float(self.proxy_loss), 0.0)
        self.output_mse = max(float(self.output_mse), 0.0)


def accumulate_hessian(stats: ActivationStats) -> np.ndarray:
    """H = (2/T) X^T X over the T captured calibration rows."""
    x = as_matrix(stats.input_matrix, "input_matrix")
    if x.shape[0] == 0:
        raise ValueError("no calibration rows captured")
    return (2.0 / x.shape[0]) * (x.T @ x)


def _damped(h: np.ndarray, damping: float) -> np.ndarray:
    ridge = damping * float(np.mean(np.diag(h)))
    return h + ridge * np.eye(h.shape[0])


def _proxy_loss(w: np.ndarray, w_hat: np.ndarray, h: np.ndarray) -> float:
    d = w - w_hat
    return float(np.trace(d @ h @ d.T))


def _make_report(layer, spec, w, q, h):
    w_hat = q.effective_weight()
    hd = _damped(h, spec.damping)
    # ||X dW^T||^2 = (T/2) tr(dW H dW^T) for H = (2/T) X^T X, so the
    # per-element output MSE is tr(dW H dW^T) / (2 rows)
    mse = _proxy_loss(w, w_hat, h) / (2.0 * w.shape[0])
    return QuantizationReport(
        layer=layer,
        method=spec,
        proxy_loss=_proxy_loss(w, w_hat, hd),
        output_mse=mse,
        outlier_count=q.outlier_count,
    )


def _inverse_hessian_upper(h: np.ndarray, damping: float) -> np.ndarray:
    """Upper factor U with Hinv = U^T U, Hinv the inverse damped Hessian."""
    try:
        l = cholesky(h, damping=damping)
    except Exception as e:
        raise DegenerateCalibrationError(
            f"Hessian not positive definite even after damping: {e}"
        ) from e
    linv = invert_upper_triangular(l.T).T  # inv(L), lower
    hinv = linv.T @ linv
    hinv = (hinv + hinv.T) / 2.0
    try:
        c = np.linalg.cholesky(hinv)
    except np.linalg.LinAlgError as e:
        raise DegenerateCalibrationError(f"inverse Hessian not factorizable: {e}") from e
    return c.T


def _compensated_sweep(
    w: np.ndarray,
    h: np.ndarray,
    spec: MethodSpec,
    outlier_mask: Optional[np.ndarray] = None,
):
    """Quantize columns in natural order with inverse-Hessian error
    propagation.  Masked cells are stored exactly (original values),
    excluded from grid fitting, and propagate no error.  Returns the
    QuantizedTensor built from the sweep."""
    cfg = spec.cfg
    rows, cols = w.shape
    if h.shape != (cols, cols):
        raise ShapeError(f"Hessian is {h.shape}, expected ({cols}, {cols})")
    if cfg.w_bits == 16:
        q = passthrough_tensor(w, act_bits=cfg.a_bits)
        return q
    u = _inverse_hessian_upper(h, spec.damping)
    mask = outlier_mask if outlier_mask is not None else np.zeros_like(w, dtype=bool)

    work = w.copy()
    codes = np.zeros((rows, cols), dtype=np.int64)
    slices = group_slices(cols, cfg.group_size)
    scales = np.empty((rows, len(slices)), dtype=np.float64)
    zps = np.zeros((rows, len(slices)), dtype=np.int64)
    levels = (1 << cfg.w_bits) - 1

    for k, s in enumerate(slices):
        block = work[:, s]
        bmask = mask[:, s]
        # grid fit on the compensated values, outlier cells excluded;
        # range always includes zero (see grids.fit_group)
        lo = np.minimum(np.where(bmask, np.inf, block).min(axis=1), 0.0)
        hi = np.maximum(np.where(bmask, -np.inf, block).max(axis=1), 0.0)
        if cfg.scheme == "asymmetric":
            sc = np.maximum((hi - lo) / levels, SCALE_FLOOR)
            zp = np.clip(_round_half_away(-lo / sc), 0, levels).astype(np.int64)
        else:
            sc = np.maximum(
                np.maximum(np.abs(lo), np.abs(hi)) / ((1 << (cfg.w_bits - 1)) - 1),
                SCALE_FLOOR,
            )
            zp = np.zeros(rows, dtype=np.int64)
        scales[:, k] = sc
        zps[:, k] = zp
        for i in range(s.start, s.stop):
            wi = work[:, i]
            ci = np.clip(_round_half_away(wi / sc) + zp, 0, levels).astype(np.int64)
            codes[:, i] = ci
            err = (wi - (ci - zp) * sc) / u[i, i]
            err = np.where(mask[:, i], 0.0, err)
            if i + 1 < cols:
                work[:, i + 1 :] -= np.outer(err, u[i, i + 1 :])

    outliers = [
        (int(r), int(c), float(w[r, c])) for r, c in np.argwhere(mask)
    ]
    return QuantizedTensor(
        rows=rows,
        cols=cols,
        bits=cfg.w_bits,
        group_size=cfg.group_size,
        scheme=cfg.scheme,
        codes=_pack_code_matrix(codes, cfg.w_bits, cfg.group_size),
        scales=scales,
        zero_points=zps,
        outliers=outliers,
        act_bits=cfg.a_bits,
    )


def gptq_quantize_layer(w, h, spec: MethodSpec, layer: Optional[LayerRef] = None):
    """Error-compensated quantization against the damped Hessian."""
    w = as_matrix(w, "w")
    h = as_matrix(h, "h")
    if spec.cfg.w_bits == 16:
        q = passthrough_tensor(w, act_bits=spec.cfg.a_bits)
        return q, QuantizationReport(layer, spec, 0.0, 0.0, 0)
    q = _compensated_sweep(w, h, spec)
    return q, _make_report(layer, spec, w, q, h)


def spqr_sensitivity(w: np.ndarray, h_damped: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Per-element sensitivity: squared RTN error times damped-H diagonal."""
    base = rtn_quantize(w, QuantConfig(w_bits=cfg.w_bits, group_size=cfg.group_size, scheme=cfg.scheme))
    err = w - base.dequantize()
    return err * err * np.diag(h_damped)[None, :]


def _select_outliers(sens: np.ndarray, cfg: QuantConfig, threshold: float, cap: int):
    """Cells whose sensitivity exceeds threshold x (row, group)-block mean,
    keeping at most ``cap``, largest first, ties in row-major order."""
    rows, cols = sens.shape
    mask = np.zeros((rows, cols), dtype=bool)
    if cap <= 0:
        return mask
    for s in group_slices(cols, cfg.group_size):
        block = sens[:, s]
        mean = block.mean(axis=1, keepdims=True)
        mask[:, s] = block > threshold * mean
    picked = np.argwhere(mask)
    if len(picked) > cap:
        vals = sens[picked[:, 0], picked[:, 1]]
        # stable sort on -sensitivity keeps row-major order within ties
        order = np.argsort(-vals, kind="stable")[:cap]
        keep = picked[order]
        mask = np.zeros((rows, cols), dtype=bool)
        mask[keep[:, 0], keep[:, 1]] = True
    return mask


def spqr_quantize_layer(w, h, spec: MethodSpec, layer: Optional[LayerRef] = None):
    """GPTQ sweep with the most quantization-sensitive cells stored exactly."""
    w = as_matrix(w, "w")
    h = as_matrix(h, "h")
    if spec.cfg.w_bits == 16:
        q = passthrough_tensor(w, act_bits=spec.cfg.a_bits)
        return q, QuantizationReport(layer, spec, 0.0, 0.0, 0)
    cap = math.ceil(spec.outlier_cap_fraction * w.shape[0] * w.shape[1])
    sens = spqr_sensitivity(w, _damped(h, spec.damping), spec.cfg)
    mask = _select_outliers(sens, spec.cfg, spec.outlier_threshold, cap)
    q = _compensated_sweep(w, h, spec, outlier_mask=mask)
    return q, _make_report(layer, spec, w, q, h)


def _channel_scales_floor_normalize(raw: np.ndarray) -> np.ndarray:
    raw = np.maximum(raw, SCALE_EPS)
    s = raw / np.exp(np.mean(np.log(raw)))
    return np.maximum(s, SCALE_EPS)


def awq_candidate_scales(absmax: np.ndarray, alpha: float) -> np.ndarray:
    """s_j = absmax_j^alpha, normalized to geometric mean 1, floored."""
    return _channel_scales_floor_normalize(np.power(absmax, alpha))


def _awq_objective(x, w, s, cfg: QuantConfig) -> float:
    wq = rtn_quantize(w * s[None, :], cfg).dequantize()
    ref = x @ w.T
    got = (x / s[None, :]) @ wq.T
    d = ref - got
    return float(np.sum(d * d))


def awq_compute_scales(w, stats: ActivationStats, spec: MethodSpec) -> np.ndarray:
    """Grid search over the scale exponent; first-found argmin wins.

    alpha = 0 gives all-ones scales, so the searched objective never
    beats this routine's result.
    """
    w = as_matrix(w, "w")
    x = as_matrix(stats.input_matrix, "input_matrix")
    absmax = np.asarray(stats.per_channel_absmax, dtype=np.float64)
    g = spec.awq_grid_points
    # weight-only grid config: the search objective has no activation term
    wcfg = QuantConfig(w_bits=spec.cfg.w_bits, group_size=spec.cfg.group_size, scheme=spec.cfg.scheme)
    best_s = None
    best_obj = np.inf
    for k in range(g):
        alpha = k / (g - 1)
        s = awq_candidate_scales(absmax, alpha)
        obj = _awq_objective(x, w, s, wcfg)
        if obj < best_obj:
            best_obj = obj
            best_s = s
    return best_s


def awq_quantize_layer(w, stats: ActivationStats, spec: MethodSpec, layer: Optional[LayerRef] = None):
    """RTN of the column-scaled weights, recording the input divisor."""
    w = as_matrix(w, "w")
    h = accumulate_hessian(stats)
    if spec.cfg.w_bits == 16:
        q = passthrough_tensor(w, act_bits=spec.cfg.a_bits)
        return q, QuantizationReport(layer, spec, 0.0, 0.0, 0)
    s = awq_compute_scales(w, stats, spec)
    q = rtn_quantize(w * s[None, :], spec.cfg)
    q.input_scales = s
    return q, _make_report(layer, spec, w, q, h)


def smoothquant_migrate(w, stats: ActivationStats, alpha: float):
    """Move activation outliers into the weights.

    s_j = absmax_x(j)^alpha / absmax_w_col(j)^(1-alpha), floored at 1e-8;
    returns (diag-scaled weights, s).  In full precision dividing the
    input by s exactly undoes the column scaling.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    w = as_matrix(w, "w")
    ax = np.asarray(stats.per_channel_absmax, dtype=np.float64)
    aw = np.abs(w).max(axis=0)
    s = np.maximum(np.power(ax, alpha) / np.power(aw, 1.0 - alpha), SCALE_EPS)
    return w * s[None, :], s


def smoothquant_quantize_layer(
    w, stats: ActivationStats, spec: MethodSpec, layer: Optional[LayerRef] = None
):
    """Smoothing migration followed by plain RTN (method "smoothquant")
    or by the compensated sweep on the smoothed Hessian ("smoothquant_gptq")."""
    w = as_matrix(w, "w")
    h = accumulate_hessian(stats)
    if spec.cfg.w_bits == 16:
        q = passthrough_tensor(w, act_bits=spec.cfg.a_bits)
        return q, QuantizationReport(layer, spec, 0.0, 0.0, 0)
    ws, s = smoothquant_migrate(w, stats, spec.smooth_alpha)
    if spec.method == "smoothquant_gptq":
        # Hessian of the smoothed activations X/s: H'_ij = H_ij / (s_i s_j)
        hs = h / np.outer(s, s)
        q = _compensated_sweep(ws, hs, spec)
    else:
        q = rtn_quantize(ws, spec.cfg)
    q.input_scales = s
    return q, _make_report(layer, spec, w, q, h)


def quantize_layer(w, stats: ActivationStats, spec: MethodSpec, layer: Optional[LayerRef] = None):
    """Dispatch one layer through the method named in ``spec``."""
    if spec.method == "rtn":
        w = as_matrix(w, "w")
        q = rtn_quantize(w, spec.cfg)
        if spec.cfg.w_bits == 16:
            return q, QuantizationReport(layer, spec, 0.0, 0.0, 0)
        return q, _make_report(layer, spec, w, q, accumulate_hessian(stats))
    if spec.method == "gptq":
        return gptq_quantize_layer(w, accumulate_hessian(stats), spec, layer)
    if spec.method == "spqr":
        return spqr_quantize_layer(w, accumulate_hessian(stats), spec, layer)
    if spec.method == "awq":
        return awq_quantize_layer(w, stats, spec, layer)
    if spec.method in ("smoothquant", "smoothquant_gptq"):
        return smoothquant_quantize_layer(w, stats, spec, layer)
    raise ValueError(f"unknown method {spec.method!r}")


def compose_quantize(model, calib, spec: MethodSpec):
    """Quantize every linear layer of the model in sequence.

    layer_sequential recaptures activations through the already-quantized
    prefix before every layer; block_sequential captures each block's six
    layers at once from the quantized prefix of blocks (lm_head is its
    own unit).  Returns (model, reports in quantization order).
    """
    refs = model.layer_refs()
    if spec.cfg.sequential_mode == "layer_sequential":
        units = [[r] for r in refs]
    else:
        units = []
        for r in refs:
            if units and units[-1][0].block_index == r.block_index:
                units[-1].append(r)
            else:
                units.append([r])
    reports = []
    for unit in units:
        stats = model.capture_activations(calib, unit)
        for ref in unit:
            try:
                q, rep = quantize_layer(model.get_weight(ref), stats[ref], spec, layer=ref)
            except (DegenerateCalibrationError, ShapeError, ValueError) as e:
                raise type(e)(f"layer {ref.param_key()}: {e}") from e
            model.replace_weights(ref, q)
            reports.append(rep)
    return model, reports


# ----------------------------------------------------- estimator wrappers

class _LayerQuantizer(BaseEstimator, TransformerMixin):
    """fit() on a calibration activation matrix (tokens x in_features),
    then transform() weight matrices to their effective dequantized form,
    or quantize() for the packed tensor plus report."""

    _method = "rtn"

    def __init__(self, w_bits=4, a_bits=16, group_size=128, scheme="asymmetric"):
        self.w_bits = w_bits
        self.a_bits = a_bits
        self.group_size = group_size
        self.scheme = scheme

    def _method_params(self) -> dict:
        return {}

    def spec(self) -> MethodSpec:
        return MethodSpec(
            method=self._method,
            cfg=QuantConfig(
                w_bits=self.w_bits,
                a_bits=self.a_bits,
                group_size=self.group_size,
                scheme=self.scheme,
            ),
            method_params=self._method_params(),
        )

    def fit(self, X, y=None):
        X = as_matrix(X, "X")
        self.stats_ = ActivationStats(layer=None, input_matrix=X)
        self.hessian_ = accumulate_hessian(self.stats_)
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self, W):
        if not hasattr(self, "stats_"):
            raise RuntimeError("call fit() with calibration activations first")
        W = as_matrix(W, "W")
        if W.shape[1] != self.n_features_in_:
            raise ShapeError(
                f"weight has {W.shape[1]} input features, fitted on {self.n_features_in_}"
            )
        return W

    def quantize(self, W):
        W = self._check_fitted(W)
        return quantize_layer(W, self.stats_, self.spec())

    def transform(self, W):
        q, _ = self.quantize(W)
        return q.effective_weight()


class RTNQuantizer(_LayerQuantizer):
    _method = "rtn"


class GPTQQuantizer(_LayerQuantizer):
    _method = "gptq"

    def __init__(self, w_bits=4, a_bits=16, group_size=128, scheme="asymmetric", damping=0.01):
        super().__init__(w_bits=w_bits, a_bits=a_bits, group_size=group_size, scheme=scheme)
        self.damping = damping

    def _method_params(self):
        return {"damping": self.damping}


class SpQRQuantizer(_LayerQuantizer):
    _method = "spqr"

    def __init__(
        self,
        w_bits=4,
        a_bits=16,
        group_size=128,
        scheme="asymmetric",
        damping=0.01,
        outlier_threshold=0.2,
        outlier_cap_fraction=0.01,
    ):
        super().__init__(w_bits=w_bits, a_bits=a_bits, group_size=group_size, scheme=scheme)
        self.damping = damping
        self.outlier_threshold = outlier_threshold
        self.outlier_cap_fraction = outlier_cap_fraction

    def _method_params(self):
        return {
            "damping": self.damping,
            "outlier_threshold": self.outlier_threshold,
            "outlier_cap_fraction": self.outlier_cap_fraction,
        }


class AWQQuantizer(_LayerQuantizer):
    _method = "awq"

    def __init__(self, w_bits=4, a_bits=16, group_size=128, scheme="asymmetric", awq_grid_points=20):
        super().__init__(w_bits=w_bits, a_bits=a_bits, group_size=group_size, scheme=scheme)
        self.awq_grid_points = awq_grid_points

    def _method_params(self):
        return {"awq_grid_points": self.awq_grid_points}


class SmoothQuantQuantizer(_LayerQuantizer):
    _method = "smoothquant"

    def __init__(self, w_bits=4, a_bits=8, group_size=128, scheme="asymmetric", smooth_alpha=0.5, damping=0.01):
        super().__init__(w_bits=w_bits, a_bits=a_bits, group_size=group_size, scheme=scheme)
        self.smooth_alpha = smooth_alpha
        self.damping = damping

    def _method_params(self):
        return {"smooth_alpha": self.smooth_alpha, "damping": self.damping}


class SmoothQuantGPTQQuantizer(SmoothQuantQuantizer):
    _method = "smoothquant_gptq"
