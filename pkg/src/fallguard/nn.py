"""Minimal dense-network kernels: single-layer GRU with a linear head,
3-layer MLP, AdamW, and checkpoint I/O.

Training runs in float64 (the finite-difference gradient checks demand it);
inference uses float32 exports. The GRU recurrence is, bit for bit,

    z_t    = sigmoid(x_t @ W_z + h_{t-1} @ U_z + b_z)
    r_t    = sigmoid(x_t @ W_r + h_{t-1} @ U_r + b_r)
    hbar_t = tanh(x_t @ W_h + (r_t * h_{t-1}) @ U_h + b_h)
    h_t    = (1 - z_t) * h_{t-1} + z_t * hbar_t
    y_t    = h_t @ W_o + b_o

with update gate z, reset gate r, candidate hbar; conventions differ across
ecosystems, so anything re-implementing this must match the lines above.

All parameters initialize uniform +-1/sqrt(fan_in) of their layer input.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np


class GradientBlowup(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# activations


def _act(name: str):
    if name == "tanh":
        return np.tanh, lambda y: 1.0 - y * y  # derivative from output
    if name == "relu":
        return (lambda x: np.maximum(x, 0.0)), (lambda y: (y > 0).astype(y.dtype))
    if name == "elu":
        def elu(x):
            return np.where(x > 0, x, np.expm1(x))
        return elu, lambda y: np.where(y > 0, 1.0, y + 1.0)
    if name == "linear":
        return (lambda x: x), (lambda y: np.ones_like(y))
    raise ValueError(f"unknown activation '{name}'")


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Log-space softmax along the last axis; finite for logits to +-50."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


# ---------------------------------------------------------------------------
# GRU


@dataclass
class GruParams:
    w_z: np.ndarray
    w_r: np.ndarray
    w_h: np.ndarray
    u_z: np.ndarray
    u_r: np.ndarray
    u_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    @classmethod
    def create(cls, input_dim: int, hidden: int = 64, n_out: int = 2,
               rng: np.random.Generator | None = None) -> "GruParams":
        rng = rng or np.random.default_rng(0)
        return cls(
            w_z=_uniform(rng, input_dim, (input_dim, hidden)),
            w_r=_uniform(rng, input_dim, (input_dim, hidden)),
            w_h=_uniform(rng, input_dim, (input_dim, hidden)),
            u_z=_uniform(rng, hidden, (hidden, hidden)),
            u_r=_uniform(rng, hidden, (hidden, hidden)),
            u_h=_uniform(rng, hidden, (hidden, hidden)),
            b_z=_uniform(rng, hidden, (hidden,)),
            b_r=_uniform(rng, hidden, (hidden,)),
            b_h=_uniform(rng, hidden, (hidden,)),
            w_out=_uniform(rng, hidden, (hidden, n_out)),
            b_out=_uniform(rng, hidden, (n_out,)),
        )

    @property
    def input_dim(self) -> int:
        return self.w_z.shape[0]

    @property
    def hidden(self) -> int:
        return self.w_z.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in (
            "w_z", "w_r", "w_h", "u_z", "u_r", "u_h",
            "b_z", "b_r", "b_h", "w_out", "b_out")}

    def astype(self, dtype) -> "GruParams":
        return GruParams(**{k: v.astype(dtype) for k, v in self.as_dict().items()})


def gru_forward(params: GruParams, x: np.ndarray,
                h0: np.ndarray | None = None):
    """Run the recurrence over x (B, T, D). Returns (logits (B,T,2),
    hidden (B,T,H), cache for backward)."""
    if x.ndim != 3 or x.shape[2] != params.input_dim:
        raise ValueError(
            f"expected input (B, T, {params.input_dim}), got {x.shape}"
        )
    B, T, D = x.shape
    H = params.hidden
    h = np.zeros((B, H)) if h0 is None else h0.copy()
    hs = np.empty((B, T, H))
    zs = np.empty((B, T, H))
    rs = np.empty((B, T, H))
    cs = np.empty((B, T, H))
    hprev = np.empty((B, T, H))
    for t in range(T):
        xt = x[:, t]
        hprev[:, t] = h
        z = _sigmoid(xt @ params.w_z + h @ params.u_z + params.b_z)
        r = _sigmoid(xt @ params.w_r + h @ params.u_r + params.b_r)
        c = np.tanh(xt @ params.w_h + (r * h) @ params.u_h + params.b_h)
        h = (1.0 - z) * h + z * c
        zs[:, t] = z
        rs[:, t] = r
        cs[:, t] = c
        hs[:, t] = h
    logits = hs @ params.w_out + params.b_out
    cache = (x, hs, zs, rs, cs, hprev)
    return logits, hs, cache


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gru_backward(params: GruParams, cache, dlogits: np.ndarray):
    """Exact BPTT gradients given d(loss)/d(logits)."""
    x, hs, zs, rs, cs, hprev = cache
    B, T, D = x.shape
    H = params.hidden
    g = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
    g["w_out"] = np.einsum("bth,btk->hk", hs, dlogits)
    g["b_out"] = dlogits.sum(axis=(0, 1))
    dh_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dh = dlogits[:, t] @ params.w_out.T + dh_next
        z, r, c, hp, xt = zs[:, t], rs[:, t], cs[:, t], hprev[:, t], x[:, t]
        dz = dh * (c - hp)
        dc = dh * z
        dhp = dh * (1.0 - z)
        da_h = dc * (1.0 - c * c)
        g["w_h"] += xt.T @ da_h
        g["u_h"] += (r * hp).T @ da_h
        g["b_h"] += da_h.sum(axis=0)
        dg = da_h @ params.u_h.T
        dr = dg * hp
        dhp += dg * r
        da_r = dr * r * (1.0 - r)
        g["w_r"] += xt.T @ da_r
        g["u_r"] += hp.T @ da_r
        g["b_r"] += da_r.sum(axis=0)
        da_z = dz * z * (1.0 - z)
        g["w_z"] += xt.T @ da_z
        g["u_z"] += hp.T @ da_z
        g["b_z"] += da_z.sum(axis=0)
        dhp += da_z @ params.u_z.T + da_r @ params.u_r.T
        dh_next = dhp
    return g


def masked_nll(params: GruParams, x: np.ndarray, labels: np.ndarray,
               mask: np.ndarray):
    """Mean NLL over unmasked steps plus exact gradients.

    labels (B, T) int; mask (B, T) nonzero where the step contributes.
    A fully masked batch yields zero loss/gradients and flags it.
    """
    if mask.shape != labels.shape or mask.shape != x.shape[:2]:
        raise ValueError("mask/labels must match the (B, T) of the input")
    logits, _, cache = gru_forward(params, x)
    n = float(mask.sum())
    if n == 0.0:
        zero = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
        return 0.0, zero, True
    logp = log_softmax(logits)
    B, T = labels.shape
    picked = np.take_along_axis(
        logp, labels.reshape(B, T, 1).astype(np.int64), axis=2
    )[:, :, 0]
    loss = -(picked * mask).sum() / n
    dlogits = np.exp(logp)
    rows = np.arange(B)[:, None], np.arange(T)[None, :]
    dlogits[rows[0], rows[1], labels.astype(np.int64)] -= 1.0
    dlogits *= (mask / n)[:, :, None]
    return float(loss), gru_backward(params, cache, dlogits), False


def gru_cell(params: GruParams, x: np.ndarray, h: np.ndarray):
    """Single streaming step (works at f32 for deployment)."""
    z = _sigmoid(x @ params.w_z + h @ params.u_z + params.b_z)
    r = _sigmoid(x @ params.w_r + h @ params.u_r + params.b_r)
    c = np.tanh(x @ params.w_h + (r * h) @ params.u_h + params.b_h)
    h_new = (1.0 - z) * h + z * c
    return h_new @ params.w_out + params.b_out, h_new


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    @classmethod
    def create(cls, dims: list[int], activation: str = "tanh",
               rng: np.random.Generator | None = None,
               out_scale: float = 1.0) -> "MlpParams":
        rng = rng or np.random.default_rng(0)
        ws, bs = [], []
        for i in range(len(dims) - 1):
            w = _uniform(rng, dims[i], (dims[i], dims[i + 1]))
            b = _uniform(rng, dims[i], (dims[i + 1],))
            if i == len(dims) - 2:
                w = w * out_scale
                b = b * out_scale
            ws.append(w)
            bs.append(b)
        return cls(ws, bs, activation)

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def astype(self, dtype) -> "MlpParams":
        return MlpParams([w.astype(dtype) for w in self.weights],
                         [b.astype(dtype) for b in self.biases],
                         self.activation)


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Dense forward; nonlinearity between layers, linear output layer."""
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"expected input (B, {params.weights[0].shape[0]}), got {x.shape}"
        )
    act, _ = _act(params.activation)
    acts = [x]
    h = x
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < n - 1:
            h = act(h)
        acts.append(h)
    return h, acts


def mlp_backward(params: MlpParams, cache, dout: np.ndarray):
    """Exact gradients; returns (grads dict, d(loss)/d(input))."""
    _, dact = _act(params.activation)
    acts = cache
    n = len(params.weights)
    g = {}
    delta = dout
    for i in range(n - 1, -1, -1):
        g[f"w{i}"] = acts[i].T @ delta
        g[f"b{i}"] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * dact(acts[i])
    return g, delta @ params.weights[0].T if n else dout


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamState:
    lr: float = 1.0e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.0e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> None:
    """Bias-corrected Adam with decoupled weight decay; updates in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        gr = grads[name]
        if not np.all(np.isfinite(gr)):
            raise GradientBlowup(f"gradient blew up in '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * gr
        v *= b2
        v += (1.0 - b2) * gr * gr
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p


# ---------------------------------------------------------------------------
# checkpoints: magic "FGW1", named little-endian tensors

_MAGIC = b"FGW1"
_DTYPES = {0: "<f8", 1: "<f4", 2: "<i8"}
_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("<i8"): 2}


def save_checkpoint(path, tensors: dict[str, np.ndarray],
                    config_hash: str = "", meta: dict[str, str] | None = None):
    meta = dict(meta or {})
    meta["config_hash"] = config_hash
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", 1))  # version
        blob = json.dumps(meta, sort_keys=True).encode()
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            code = _DTYPE_CODES[np.dtype(arr.dtype.str.replace(">", "<"))]
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", code, arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype(_DTYPES[code]).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a FGW1 checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != 1:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(mlen).decode())
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = tuple(
                struct.unpack("<I", fh.read(4))[0] for _ in range(ndim)
            )
            n = int(np.prod(shape)) if shape else 1
            dtype = np.dtype(_DTYPES[code])
            data = np.frombuffer(fh.read(n * dtype.itemsize), dtype=dtype)
            tensors[name] = data.reshape(shape).copy()
    return tensors, meta


def gru_to_tensors(params: GruParams) -> dict[str, np.ndarray]:
    return {f"gru.{k}": v for k, v in params.as_dict().items()}


def gru_from_tensors(tensors: dict[str, np.ndarray]) -> GruParams:
    return GruParams(**{k[4:]: v for k, v in tensors.items()
                        if k.startswith("gru.")})


def mlp_to_tensors(params: MlpParams, prefix: str) -> dict[str, np.ndarray]:
    out = {f"{prefix}.{k}": v for k, v in params.as_dict().items()}
    out[f"{prefix}.activation"] = np.frombuffer(
        params.activation.encode().ljust(16, b"\0"), dtype=np.uint8
    ).astype(np.int64)
    return out


def mlp_from_tensors(tensors: dict[str, np.ndarray], prefix: str) -> MlpParams:
    act = bytes(
        tensors[f"{prefix}.activation"].astype(np.uint8)
    ).rstrip(b"\0").decode()
    ws, bs = [], []
    i = 0
    while f"{prefix}.w{i}" in tensors:
        ws.append(tensors[f"{prefix}.w{i}"])
        bs.append(tensors[f"{prefix}.b{i}"])
        i += 1
    return MlpParams(ws, bs, act)
