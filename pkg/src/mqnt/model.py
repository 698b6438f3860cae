"""Minimal decoder-only transformer in plain numpy.

Pre-norm blocks: RMS normalization, full causal attention with rotary
position embeddings on q/k, and a GELU MLP.  No biases anywhere; every
linear layer stores its weight as (out_features, in_features) and
computes ``y = x @ W.T``.  Compute runs in float64; parameters are kept
float32-representable (snapped through float32 after init and after
every training step) so the on-disk f32 round trip is bit-exact.

Quantized weights are attached per layer and consulted at forward time:
the layer divides its input by the stored per-channel scales (if any),
fake-quantizes it per token (if act_bits < 16), and multiplies by the
dequantized matrix.  Original weights stay around until restored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import erf

from .errors import (
    ContextLengthError,
    EmptyCalibrationError,
    MemoryBoundError,
    ShapeError,
    VocabularyError,
)
from .grids import QuantizedTensor, quantize_activations_dynamic

LAYER_NAMES = ("q_proj", "k_proj", "v_proj", "o_proj", "ff_up", "ff_down")
ROPE_BASE = 10000.0
RMS_EPS = 1e-6

# Default ceiling on bytes of captured activations (all layers together).
DEFAULT_CAPTURE_BUDGET = 1 << 30


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_len: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.context_len < 2:
            raise ValueError("context_len must be >= 2")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        for name in ("d_model", "n_layers", "n_heads", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "context_len": self.context_len,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
        }


@dataclass(frozen=True, order=True)
class LayerRef:
    """Names one quantizable linear layer; lm_head uses the sentinel
    block_index == n_layers."""

    block_index: int
    layer_name: str

    def __post_init__(self):
        if self.layer_name not in LAYER_NAMES + ("lm_head",):
            raise ValueError(f"unknown layer_name {self.layer_name!r}")

    def param_key(self) -> str:
        if self.layer_name == "lm_head":
            return "lm_head"
        return f"blocks.{self.block_index}.{self.layer_name}"


@dataclass
class ActivationStats:
    """Input rows captured at one linear layer plus their column absmax."""

    layer: LayerRef
    input_matrix: np.ndarray
    per_channel_absmax: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.per_channel_absmax is None:
            if self.input_matrix.size:
                self.per_channel_absmax = np.abs(self.input_matrix).max(axis=0)
            else:
                self.per_channel_absmax = np.zeros(self.input_matrix.shape[1])


def _f32_snap(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x):
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * pdf


def rmsnorm(x, gain):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / r * gain


def _rope_tables(n_pos: int, head_dim: int):
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    ang = np.arange(n_pos, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)  # each (n_pos, half)


def apply_rope(x, cos, sin):
    """Rotate the first 2*(head_dim//2) dims of x (T, heads, head_dim);
    an odd trailing dim passes through."""
    half = x.shape[-1] // 2
    x1 = x[..., :half]
    x2 = x[..., half : 2 * half]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = x.copy()
    out[..., :half] = x1 * c - x2 * s
    out[..., half : 2 * half] = x1 * s + x2 * c
    return out


def rope_backward(d, cos, sin):
    half = d.shape[-1] // 2
    d1 = d[..., :half]
    d2 = d[..., half : 2 * half]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = d.copy()
    out[..., :half] = d1 * c + d2 * s
    out[..., half : 2 * half] = -d1 * s + d2 * c
    return out


class TinyDecoder:
    """Decoder LM with quantizable linears and activation capture."""

    def __init__(self, config: ModelConfig, params: Optional[dict] = None, seed: int = 0):
        self.config = config
        if params is None:
            params = _init_params(config, seed)
        self.params = params
        # layer-ref key -> QuantizedTensor (runtime quantization state)
        self._quantized: dict[LayerRef, QuantizedTensor] = {}
        self._deq_cache: dict[LayerRef, np.ndarray] = {}
        self._originals: dict[LayerRef, np.ndarray] = {}

    # ------------------------------------------------------------- refs

    def layer_refs(self) -> list[LayerRef]:
        """All quantizable layers in forward order, lm_head last."""
        refs = [
            LayerRef(b, name)
            for b in range(self.config.n_layers)
            for name in LAYER_NAMES
        ]
        refs.append(LayerRef(self.config.n_layers, "lm_head"))
        return refs

    def block_of(self, ref: LayerRef) -> int:
        return ref.block_index

    def _check_ref(self, ref: LayerRef):
        if ref.layer_name == "lm_head":
            if ref.block_index != self.config.n_layers:
                raise ShapeError("lm_head must use block_index == n_layers")
        elif not 0 <= ref.block_index < self.config.n_layers:
            raise ShapeError(f"block_index {ref.block_index} out of range")

    def get_weight(self, ref: LayerRef) -> np.ndarray:
        self._check_ref(ref)
        return self.params[ref.param_key()]

    # ---------------------------------------------------------- forward

    def _layer_out(self, ref: LayerRef, x: np.ndarray) -> np.ndarray:
        q = self._quantized.get(ref)
        if q is None:
            return x @ self.params[ref.param_key()].T
        xi = x
        if q.input_scales is not None:
            xi = xi / q.input_scales[None, :]
        if q.act_bits != 16:
            xi = quantize_activations_dynamic(xi, q.act_bits)
        return xi @ self._deq_cache[ref].T

    def _run(self, tokens, capture: Optional[dict] = None) -> np.ndarray:
        cfg = self.config
        tok = np.asarray(tokens, dtype=np.int64)
        if tok.ndim != 1 or tok.size == 0:
            raise ContextLengthError("tokens must be a non-empty 1-d sequence")
        if tok.size > cfg.context_len:
            raise ContextLengthError(
                f"sequence of {tok.size} tokens exceeds context_len {cfg.context_len}"
            )
        if tok.min() < 0 or tok.max() >= cfg.vocab_size:
            raise VocabularyError("token id out of range")

        T = tok.size
        H = cfg.n_heads
        dh = cfg.d_model // H
        cos, sin = _rope_tables(T, dh)
        scale = 1.0 / math.sqrt(dh)
        mask = np.triu(np.ones((T, T), dtype=bool), k=1)

        h = self.params["embedding"][tok]
        for b in range(cfg.n_layers):
            pre = f"blocks.{b}."
            a_in = rmsnorm(h, self.params[pre + "rms1"])

            def lin(name, x, blk=b):
                ref = LayerRef(blk, name)
                if capture is not None and ref in capture:
                    capture[ref].append(x.copy())
                return self._layer_out(ref, x)

            qh = lin("q_proj", a_in).reshape(T, H, dh)
            kh = lin("k_proj", a_in).reshape(T, H, dh)
            vh = lin("v_proj", a_in).reshape(T, H, dh)
            qh = apply_rope(qh, cos, sin).transpose(1, 0, 2)
            kh = apply_rope(kh, cos, sin).transpose(1, 0, 2)
            vh = vh.transpose(1, 0, 2)
            scores = qh @ kh.transpose(0, 2, 1) * scale
            scores[:, mask] = -np.inf
            scores -= scores.max(axis=-1, keepdims=True)
            p = np.exp(scores)
            p /= p.sum(axis=-1, keepdims=True)
            ctx = (p @ vh).transpose(1, 0, 2).reshape(T, cfg.d_model)
            h = h + lin("o_proj", ctx)

            m_in = rmsnorm(h, self.params[pre + "rms2"])
            up = lin("ff_up", m_in)
            h = h + lin("ff_down", gelu(up))

        hf = rmsnorm(h, self.params["rms_final"])
        ref = LayerRef(cfg.n_layers, "lm_head")
        if capture is not None and ref in capture:
            capture[ref].append(hf.copy())
        return self._layer_out(ref, hf)

    def forward(self, tokens) -> np.ndarray:
        """Logits (len(tokens), vocab_size); causal and deterministic."""
        return self._run(tokens)

    # ---------------------------------------------------------- capture

    def capture_activations(
        self, calib, layers, max_bytes: int = DEFAULT_CAPTURE_BUDGET
    ) -> dict:
        """Inputs seen by each requested linear layer over the calibration
        sequences, concatenated row-wise across sequences."""
        sequences = getattr(calib, "sequences", calib)
        sequences = [np.asarray(s, dtype=np.int64) for s in sequences]
        if not sequences:
            raise EmptyCalibrationError("no calibration sequences")
        layers = set(layers)
        for ref in layers:
            self._check_ref(ref)
        total_tokens = sum(len(s) for s in sequences)
        need = sum(total_tokens * self.in_features(ref) * 8 for ref in layers)
        if need > max_bytes:
            raise MemoryBoundError(
                f"capturing {len(layers)} layers over {total_tokens} tokens "
                f"needs {need} bytes, budget is {max_bytes}"
            )
        capture = {ref: [] for ref in layers}
        for seq in sequences:
            self._run(seq, capture=capture)
        return {
            ref: ActivationStats(layer=ref, input_matrix=np.concatenate(chunks, axis=0))
            for ref, chunks in capture.items()
        }

    def in_features(self, ref: LayerRef) -> int:
        if ref.layer_name == "ff_down":
            return self.config.d_ff
        return self.config.d_model

    def out_features(self, ref: LayerRef) -> int:
        if ref.layer_name == "ff_up":
            return self.config.d_ff
        if ref.layer_name == "lm_head":
            return self.config.vocab_size
        return self.config.d_model

    # ------------------------------------------------------ replacement

    def replace_weights(self, ref: LayerRef, q: QuantizedTensor):
        self._check_ref(ref)
        w = self.params[ref.param_key()]
        if (q.rows, q.cols) != w.shape:
            raise ShapeError(
                f"quantized tensor is {q.rows}x{q.cols}, layer {ref.param_key()} "
                f"is {w.shape[0]}x{w.shape[1]}"
            )
        if ref not in self._originals:
            self._originals[ref] = w
        self._quantized[ref] = q
        self._deq_cache[ref] = q.dequantize()
        return self

    def restore_weights(self, ref: LayerRef):
        self._quantized.pop(ref, None)
        self._deq_cache.pop(ref, None)
        orig = self._originals.pop(ref, None)
        if orig is not None:
            self.params[ref.param_key()] = orig
        return self

    def quantized_layers(self) -> dict:
        return dict(self._quantized)

    def copy(self) -> "TinyDecoder":
        m = TinyDecoder(self.config, params={k: v.copy() for k, v in self.params.items()})
        m._quantized = dict(self._quantized)
        m._deq_cache = {k: v.copy() for k, v in self._deq_cache.items()}
        m._originals = {k: v.copy() for k, v in self._originals.items()}
        return m


def _init_params(cfg: ModelConfig, seed: int) -> dict:
    """Deterministic init from a 64-bit seed; stands in for pretraining."""
    rng = np.random.Generator(np.random.PCG64(seed))
    p = {"embedding": rng.normal(0.0, 1.0 / math.sqrt(cfg.d_model), (cfg.vocab_size, cfg.d_model))}
    for b in range(cfg.n_layers):
        pre = f"blocks.{b}."
        p[pre + "rms1"] = np.ones(cfg.d_model)
        p[pre + "rms2"] = np.ones(cfg.d_model)
        for name in ("q_proj", "k_proj", "v_proj", "o_proj"):
            p[pre + name] = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_model), (cfg.d_model, cfg.d_model))
        p[pre + "ff_up"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_model), (cfg.d_ff, cfg.d_model))
        p[pre + "ff_down"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_ff), (cfg.d_model, cfg.d_ff))
    p["rms_final"] = np.ones(cfg.d_model)
    p["lm_head"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_model), (cfg.vocab_size, cfg.d_model))
    return {k: _f32_snap(v) for k, v in p.items()}


# Spec-op spellings as free functions.

def forward(model: TinyDecoder, tokens) -> np.ndarray:
    return model.forward(tokens)


def capture_activations(model: TinyDecoder, calib, layers, **kw) -> dict:
    return model.capture_activations(calib, layers, **kw)


def replace_weights(model: TinyDecoder, layer: LayerRef, q: QuantizedTensor):
    return model.replace_weights(layer, q)


# ------------------------------------------------------------- training

def loss_and_grads(model: TinyDecoder, tokens) -> tuple[float, dict]:
    """Mean next-token cross-entropy over one sequence and its exact
    gradients for every parameter.  Straight-line replay of ``_run``
    with the standard backward passes; used by fit_corpus and by the
    finite-difference checks."""
    cfg = model.config
    P = model.params
    tok = np.asarray(tokens, dtype=np.int64)
    if tok.size < 2:
        raise ValueError("need at least 2 tokens to score a next-token loss")
    T = tok.size
    H = cfg.n_heads
    dh = cfg.d_model // H
    cos, sin = _rope_tables(T, dh)
    scale = 1.0 / math.sqrt(dh)
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)

    # forward, keeping what backward needs
    h = P["embedding"][tok]
    saved = []
    x = h
    for b in range(cfg.n_layers):
        pre = f"blocks.{b}."
        s = {"x_in": x}
        r1 = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
        a_in = x / r1 * P[pre + "rms1"]
        s["r1"], s["a_in"] = r1, a_in
        q0 = a_in @ P[pre + "q_proj"].T
        k0 = a_in @ P[pre + "k_proj"].T
        v0 = a_in @ P[pre + "v_proj"].T
        s["q0"], s["k0"], s["v0"] = q0, k0, v0
        qh = apply_rope(q0.reshape(T, H, dh), cos, sin).transpose(1, 0, 2)
        kh = apply_rope(k0.reshape(T, H, dh), cos, sin).transpose(1, 0, 2)
        vh = v0.reshape(T, H, dh).transpose(1, 0, 2)
        scores = qh @ kh.transpose(0, 2, 1) * scale
        scores[:, mask] = -np.inf
        scores -= scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        ctx = (p @ vh).transpose(1, 0, 2).reshape(T, cfg.d_model)
        s["qh"], s["kh"], s["vh"], s["p"], s["ctx"] = qh, kh, vh, p, ctx
        x = x + ctx @ P[pre + "o_proj"].T
        s["x_mid"] = x
        r2 = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
        m_in = x / r2 * P[pre + "rms2"]
        up = m_in @ P[pre + "ff_up"].T
        g = gelu(up)
        s["r2"], s["m_in"], s["up"], s["g"] = r2, m_in, up, g
        x = x + g @ P[pre + "ff_down"].T
        saved.append(s)

    rf = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    hf = x / rf * P["rms_final"]
    logits = hf @ P["lm_head"].T

    # next-token cross-entropy, positions 0..T-2 predict 1..T-1
    lmax = logits.max(axis=-1, keepdims=True)
    z = np.exp(logits - lmax)
    zsum = z.sum(axis=-1, keepdims=True)
    logp = logits - lmax - np.log(zsum)
    n_pred = T - 1
    targets = tok[1:]
    loss = -logp[np.arange(n_pred), targets].mean()

    grads = {k: np.zeros_like(v) for k, v in P.items()}
    dlogits = z / zsum
    dlogits[np.arange(n_pred), targets] -= 1.0
    dlogits[n_pred:] = 0.0
    dlogits /= n_pred

    grads["lm_head"] += dlogits.T @ hf
    dhf = dlogits @ P["lm_head"]

    def rms_backward(dy, x, r, gain, dgain_acc):
        xn = x / r
        dgain_acc += (dy * xn).sum(axis=0)
        dxn = dy * gain
        d = dxn / r - x * ((dxn * x).sum(axis=-1, keepdims=True) / (x.shape[-1] * r**3))
        return d

    dx = rms_backward(dhf, x, rf, P["rms_final"], grads["rms_final"])

    for b in reversed(range(cfg.n_layers)):
        pre = f"blocks.{b}."
        s = saved[b]
        # MLP branch
        dg = dx @ P[pre + "ff_down"]
        grads[pre + "ff_down"] += dx.T @ s["g"]
        dup = dg * gelu_grad(s["up"])
        grads[pre + "ff_up"] += dup.T @ s["m_in"]
        dm_in = dup @ P[pre + "ff_up"]
        dx = dx + rms_backward(dm_in, s["x_mid"], s["r2"], P[pre + "rms2"], grads[pre + "rms2"])
        # attention branch
        dctx = dx @ P[pre + "o_proj"]
        grads[pre + "o_proj"] += dx.T @ s["ctx"]
        dctx_h = dctx.reshape(T, H, dh).transpose(1, 0, 2)
        dp = dctx_h @ s["vh"].transpose(0, 2, 1)
        dvh = s["p"].transpose(0, 2, 1) @ dctx_h
        p = s["p"]
        dscore = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dqh = dscore @ s["kh"] * scale
        dkh = dscore.transpose(0, 2, 1) @ s["qh"] * scale
        dq0 = rope_backward(dqh.transpose(1, 0, 2), cos, sin).reshape(T, cfg.d_model)
        dk0 = rope_backward(dkh.transpose(1, 0, 2), cos, sin).reshape(T, cfg.d_model)
        dv0 = dvh.transpose(1, 0, 2).reshape(T, cfg.d_model)
        grads[pre + "q_proj"] += dq0.T @ s["a_in"]
        grads[pre + "k_proj"] += dk0.T @ s["a_in"]
        grads[pre + "v_proj"] += dv0.T @ s["a_in"]
        da_in = dq0 @ P[pre + "q_proj"] + dk0 @ P[pre + "k_proj"] + dv0 @ P[pre + "v_proj"]
        dx = dx + rms_backward(da_in, s["x_in"], s["r1"], P[pre + "rms1"], grads[pre + "rms1"])

    np.add.at(grads["embedding"], tok, dx)
    return float(loss), grads


def fit_corpus(
    model: TinyDecoder,
    tokens,
    steps: int = 200,
    seq_len: Optional[int] = None,
    batch_size: int = 8,
    lr: float = 1e-2,
    seed: int = 0,
) -> list[float]:
    """Overfit the model to a token corpus with Adam so that quantizers
    have a non-random signal to degrade.  Deterministic for a given seed;
    parameters are snapped to float32 after every step.  Returns the
    per-step mean losses."""
    tok = np.asarray(tokens, dtype=np.int64)
    if seq_len is None:
        seq_len = min(model.config.context_len, 64)
    if tok.size < seq_len + 1:
        raise ValueError("corpus shorter than one training window")
    rng = np.random.Generator(np.random.PCG64(seed))
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(p) for k, p in model.params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    losses = []
    for step in range(1, steps + 1):
        starts = rng.integers(0, tok.size - seq_len, size=batch_size)
        total = 0.0
        acc = {k: np.zeros_like(p) for k, p in model.params.items()}
        for s in starts:
            loss, grads = loss_and_grads(model, tok[s : s + seq_len + 1][: seq_len + 1])
            total += loss
            for k in acc:
                acc[k] += grads[k]
        losses.append(total / batch_size)
        for k, p in model.params.items():
            g = acc[k] / batch_size
            m[k] = b1 * m[k] + (1 - b1) * g
            v[k] = b2 * v[k] + (1 - b2) * g * g
            mhat = m[k] / (1 - b1**step)
            vhat = v[k] / (1 - b2**step)
            model.params[k] = _f32_snap(p - lr * mhat / (np.sqrt(vhat) + eps))
    return losses
