"""TR-Net forward and backward passes in numpy.

A sequence of cubes goes through a shallow 3D-CNN (four conv/ReLU/max-pool
stages) one cube at a time. The flattened feature vectors plus learnable
order embeddings then pass through a stack of pre-norm Transformer
encoders. A linear softmax classifier labels every position.

Parameters live in a flat ``dict[str, ndarray]`` keyed by canonical names
(``conv1.weight``, ``encoder3.msa.wq``, ``order_embeddings``, ...). Every
``*_forward`` returns ``(output, cache)``, and the matching
``*_backward`` consumes the cache.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .phantom import ConfigError


class DivergenceError(FloatingPointError):
    """Raised when the training loss stops being finite."""


@dataclass
class ModelConfig:
    cube_side: int = 29
    max_seq_len: int = 30
    conv_filters: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    num_encoders: int = 12
    num_heads: int = 8
    ffn_hidden: int | None = None           # None -> 4 * embed_dim
    num_classes: int = 2
    ln_eps: float = 1e-6
    # "sum": FFN(LN(Z' + Z));  "split": FFN(LN(Z') + Z)
    ffn_input: str = "sum"
    final_ln: bool = False
    # fixed intensity normalisation applied before the first convolution
    input_offset: float = 0.0
    input_scale: float = 1.0 / 1000.0
    dtype: str = "float32"
    cnn_chunk: int = 32

    def __post_init__(self):
        self.conv_filters = list(self.conv_filters)

    @property
    def spatial_sizes(self) -> list[int]:
        sizes = [self.cube_side]
        for _ in self.conv_filters:
            sizes.append(sizes[-1] // 2)
        return sizes

    @property
    def feature_side(self) -> int:
        return self.spatial_sizes[-1]

    @property
    def embed_dim(self) -> int:
        return self.conv_filters[-1] * self.feature_side ** 3

    @property
    def hidden_dim(self) -> int:
        return self.ffn_hidden if self.ffn_hidden is not None else 4 * self.embed_dim

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self) -> None:
        f = self.conv_filters
        if len(f) != 4 or any(b != 2 * a for a, b in zip(f, f[1:])) or f[0] < 1:
            raise ConfigError(f"conv_filters must be 4 positive entries, each double the previous; got {f}")
        if self.feature_side < 1:
            raise ConfigError(
                f"cube_side {self.cube_side} is too small for four 2x pooling stages (needs >= 16)")
        if self.max_seq_len < 1:
            raise ConfigError(f"max_seq_len must be >= 1, got {self.max_seq_len}")
        if self.num_encoders < 1:
            raise ConfigError(f"num_encoders must be >= 1, got {self.num_encoders}")
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.ffn_input not in ("sum", "split"):
            raise ConfigError(f"ffn_input must be 'sum' or 'split', got {self.ffn_input!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


# -- parameters ----------------------------------------------------------------

ENCODER_KEYS = ("ln1.scale", "ln1.shift", "msa.wq", "msa.wk", "msa.wv", "msa.wo",
                "ln2.scale", "ln2.shift", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    D, F = config.embed_dim, config.hidden_dim
    shapes: dict[str, tuple] = {}
    cin = 1
    for k, cout in enumerate(config.conv_filters, 1):
        shapes[f"conv{k}.weight"] = (cout, cin, 3, 3, 3)
        shapes[f"conv{k}.bias"] = (cout,)
        cin = cout
    shapes["order_embeddings"] = (config.max_seq_len, D)
    for t in range(1, config.num_encoders + 1):
        e = f"encoder{t}."
        shapes.update({
            e + "ln1.scale": (D,), e + "ln1.shift": (D,),
            e + "msa.wq": (D, D), e + "msa.wk": (D, D), e + "msa.wv": (D, D), e + "msa.wo": (D, D),
            e + "ln2.scale": (D,), e + "ln2.shift": (D,),
            e + "ffn.w1": (D, F), e + "ffn.b1": (F,), e + "ffn.w2": (F, D), e + "ffn.b2": (D,),
        })
    if config.final_ln:
        shapes["final_ln.scale"] = (D,)
        shapes["final_ln.shift"] = (D,)
    shapes["classifier.weight"] = (D, config.num_classes)
    shapes["classifier.bias"] = (config.num_classes,)
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fan-in scaled normal weights, zero biases, unit LN scales and small
    noise (std 0.02) for the order embeddings."""
    config.validate()
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(("bias", "shift", ".b1", ".b2")):
            arr = np.zeros(shape)
        elif name.endswith("scale"):
            arr = np.ones(shape)
        elif name == "order_embeddings":
            arr = rng.normal(0.0, 0.02, shape)
        elif name.startswith("conv"):
            fan_in = int(np.prod(shape[1:]))
            arr = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
        elif name.endswith("ffn.w1"):
            arr = rng.normal(0.0, math.sqrt(2.0 / shape[0]), shape)
        else:
            arr = rng.normal(0.0, math.sqrt(1.0 / shape[0]), shape)
        params[name] = arr.astype(dt)
    return params


def encoder_params(params: dict, t: int) -> dict:
    prefix = f"encoder{t}."
    return {k: params[prefix + k] for k in ENCODER_KEYS}


def cast_params(params: dict, dtype) -> dict:
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


# -- 3D CNN ----------------------------------------------------------------------

def _conv_stage_forward(x, w, b):
    n, C, S = x.shape[:3]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    cols = kernels.im2col3d(xp)
    y = np.matmul(w.reshape(w.shape[0], -1), cols)
    y += b[None, :, None]
    y = y.reshape(n, w.shape[0], S, S, S)
    r = np.maximum(y, 0)
    p, arg = kernels.maxpool3d_forward(r)
    return p, (x, y > 0, arg)


def _conv_stage_backward(dp, cache, w, need_dx=True):
    x, active, arg = cache
    n, C, S = x.shape[:3]
    F = w.shape[0]
    dy = kernels.maxpool3d_backward(dp, arg, S)
    dy *= active
    dyf = dy.reshape(n, F, S ** 3)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    cols = kernels.im2col3d(xp)
    dw = np.matmul(dyf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dyf.sum(axis=(0, 2))
    dx = None
    if need_dx:
        dcols = np.matmul(w.reshape(F, -1).T, dyf)
        dx = np.ascontiguousarray(kernels.col2im3d(dcols, S))
    return dx, dw, db


def cnn_forward(cubes, params: dict, config: ModelConfig):
    """Features for a stack of cubes ``(n, N, N, N)``.

    Returns ``(feature_maps, flat, cache)`` with ``feature_maps`` shaped
    ``(n, C, H, H, H)`` and ``flat`` shaped ``(n, D)`` (row-major flatten).
    A single ``(N, N, N)`` cube is accepted and treated as ``n = 1``.
    """
    config.validate()
    cubes = np.asarray(cubes)
    if cubes.ndim == 3:
        cubes = cubes[None]
    N = config.cube_side
    if cubes.shape[1:] != (N, N, N):
        raise ConfigError(f"cube shape {cubes.shape[1:]} does not match cube_side {N}")
    dt = config.np_dtype
    x = ((cubes.astype(dt) - dt.type(config.input_offset)) * dt.type(config.input_scale))[:, None]
    caches = []
    outs = []
    step = max(1, config.cnn_chunk)
    for lo in range(0, len(x), step):
        h = x[lo:lo + step]
        chunk_cache = []
        for k in range(1, 5):
            h, c = _conv_stage_forward(h, params[f"conv{k}.weight"], params[f"conv{k}.bias"])
            chunk_cache.append(c)
        caches.append(chunk_cache)
        outs.append(h)
    fmap = np.concatenate(outs) if outs else np.zeros((0, config.conv_filters[-1], *[config.feature_side] * 3), dt)
    return fmap, fmap.reshape(len(fmap), -1), caches


def cnn_backward(dflat, caches, params: dict, config: ModelConfig) -> dict:
    grads = {f"conv{k}.{s}": np.zeros_like(params[f"conv{k}.{s}"]) for k in range(1, 5) for s in ("weight", "bias")}
    H = config.feature_side
    C = config.conv_filters[-1]
    step = max(1, config.cnn_chunk)
    for j, chunk_cache in enumerate(caches):
        d = dflat[j * step:(j + 1) * step].reshape(-1, C, H, H, H)
        for k in range(4, 0, -1):
            d, dw, db = _conv_stage_backward(d, chunk_cache[k - 1], params[f"conv{k}.weight"], need_dx=k > 1)
            grads[f"conv{k}.weight"] += dw
            grads[f"conv{k}.bias"] += db
    return grads


# -- embeddings -------------------------------------------------------------------

def embed_sequence(features, order_embeddings):
    """Add the first ``l`` order embeddings to an ``(l, D)`` or ``(B, l, D)``
    feature array."""
    features = np.asarray(features)
    l = features.shape[-2]
    if l > order_embeddings.shape[0]:
        raise ValueError(f"sequence length {l} exceeds max_seq_len {order_embeddings.shape[0]}")
    return features + order_embeddings[:l]


# -- layer norm ------------------------------------------------------------------

def layer_norm_forward(x, scale, shift, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * scale + shift, (xhat, inv)


def layer_norm_backward(dy, cache, scale):
    xhat, inv = cache
    axes = tuple(range(dy.ndim - 1))
    dscale = (dy * xhat).sum(axis=axes)
    dshift = dy.sum(axis=axes)
    dxhat = dy * scale
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dscale, dshift


# -- attention -------------------------------------------------------------------

def _softmax(s, axis=-1):
    m = np.max(s, axis=axis, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=axis, keepdims=True)


def _as_batch(X, mask):
    squeeze = X.ndim == 2
    if squeeze:
        X = X[None]
    if mask is None:
        mask = np.ones(X.shape[:2], dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 1:
            mask = mask[None]
    if not mask.any(axis=1).all():
        raise ValueError("mask leaves a sequence with no valid positions")
    return X, mask, squeeze


def msa_forward(X, p: dict, num_heads: int, mask=None):
    """Bidirectional multi-head self-attention.

    ``X`` is ``(l, D)`` or ``(B, l, D)``; ``mask`` marks valid key positions.
    The cache includes the attention weights under ``"attn"``
    (shape ``(B, heads, l, l)``).
    """
    X, mask, squeeze = _as_batch(X, mask)
    B, L, D = X.shape
    h = num_heads
    d = D // h

    def split(t):
        return t.reshape(B, L, h, d).transpose(0, 2, 1, 3)

    Q, K, V = split(X @ p["msa.wq"]), split(X @ p["msa.wk"]), split(X @ p["msa.wv"])
    scale = 1.0 / math.sqrt(d)
    S = np.matmul(Q, K.transpose(0, 1, 3, 2)) * scale
    S = np.where(mask[:, None, None, :], S, -np.inf)
    A = _softmax(S)
    O = np.matmul(A, V).transpose(0, 2, 1, 3).reshape(B, L, D)
    Y = O @ p["msa.wo"]
    cache = {"X": X, "Q": Q, "K": K, "V": V, "attn": A, "O": O, "scale": scale, "squeeze": squeeze}
    return (Y[0] if squeeze else Y), cache


def msa_backward(dY, cache, p: dict):
    X, Q, K, V, A, O, scale = (cache[k] for k in ("X", "Q", "K", "V", "attn", "O", "scale"))
    if cache["squeeze"]:
        dY = dY[None]
    B, L, D = X.shape
    h = A.shape[1]
    d = D // h
    g = {"msa.wo": np.einsum("bld,ble->de", O, dY)}
    dO = (dY @ p["msa.wo"].T).reshape(B, L, h, d).transpose(0, 2, 1, 3)
    dA = np.matmul(dO, V.transpose(0, 1, 3, 2))
    dV = np.matmul(A.transpose(0, 1, 3, 2), dO)
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
    dQ = np.matmul(dS, K)
    dK = np.matmul(dS.transpose(0, 1, 3, 2), Q)

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B, L, D)

    dQ, dK, dV = merge(dQ), merge(dK), merge(dV)
    g["msa.wq"] = np.einsum("bld,ble->de", X, dQ)
    g["msa.wk"] = np.einsum("bld,ble->de", X, dK)
    g["msa.wv"] = np.einsum("bld,ble->de", X, dV)
    dX = dQ @ p["msa.wq"].T + dK @ p["msa.wk"].T + dV @ p["msa.wv"].T
    return (dX[0] if cache["squeeze"] else dX), g


def msa(X, p: dict, num_heads: int, mask=None):
    return msa_forward(X, p, num_heads, mask)[0]


# -- encoder -----------------------------------------------------------------------

def encoder_forward(Z, p: dict, config: ModelConfig, mask=None):
    """One pre-norm encoder: ``Z' = MSA(LN(Z))``, then
    ``FFN(LN(Z' + Z)) + Z' + Z`` (or ``FFN(LN(Z') + Z) + Z' + Z`` when
    ``config.ffn_input == "split"``)."""
    eps = config.ln_eps
    h1, ln1 = layer_norm_forward(Z, p["ln1.scale"], p["ln1.shift"], eps)
    Zp, mc = msa_forward(h1, p, config.num_heads, mask)
    if config.ffn_input == "sum":
        u = Zp + Z
        h2, ln2 = layer_norm_forward(u, p["ln2.scale"], p["ln2.shift"], eps)
    else:
        n2, ln2 = layer_norm_forward(Zp, p["ln2.scale"], p["ln2.shift"], eps)
        h2 = n2 + Z
    a = h2 @ p["ffn.w1"] + p["ffn.b1"]
    r = np.maximum(a, 0)
    f = r @ p["ffn.w2"] + p["ffn.b2"]
    out = f + Zp + Z
    return out, {"ln1": ln1, "msa": mc, "ln2": ln2, "h2": h2, "a": a, "r": r}


def encoder_backward(dout, cache, p: dict, config: ModelConfig):
    g = {}
    h2, a, r = cache["h2"], cache["a"], cache["r"]
    lead = tuple(range(dout.ndim - 1))
    g["ffn.b2"] = dout.sum(axis=lead)
    g["ffn.w2"] = np.tensordot(r, dout, axes=(lead, lead))
    dr = dout @ p["ffn.w2"].T
    da = dr * (a > 0)
    g["ffn.b1"] = da.sum(axis=lead)
    g["ffn.w1"] = np.tensordot(h2, da, axes=(lead, lead))
    dh2 = da @ p["ffn.w1"].T
    dZ = dout.copy()
    dZp = dout.copy()
    if config.ffn_input == "sum":
        du, g["ln2.scale"], g["ln2.shift"] = layer_norm_backward(dh2, cache["ln2"], p["ln2.scale"])
        dZ += du
        dZp += du
    else:
        dn2, g["ln2.scale"], g["ln2.shift"] = layer_norm_backward(dh2, cache["ln2"], p["ln2.scale"])
        dZp += dn2
        dZ += dh2
    dh1, gm = msa_backward(dZp, cache["msa"], p)
    g.update(gm)
    dz1, g["ln1.scale"], g["ln1.shift"] = layer_norm_backward(dh1, cache["ln1"], p["ln1.scale"])
    dZ += dz1
    return dZ, g


# -- classifier ------------------------------------------------------------------

def classify(Z, weight, bias):
    """Per-position softmax probabilities (and logits) from ``(..., D)``."""
    logits = Z @ weight + bias
    return _softmax(logits), logits


@dataclass
class PredictionSequence:
    probabilities: np.ndarray        # (l, num_classes), rows sum to 1
    center_indices: list[int]
    source_id: str = ""

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.probabilities, axis=1).astype(np.int8)

    def __len__(self) -> int:
        return len(self.probabilities)


# -- full model ------------------------------------------------------------------

def pad_batch(sequences, config: ModelConfig):
    """Stack sequences into ``(B, l_max, N, N, N)`` cubes, a validity mask
    and ``(B, l_max)`` labels (-1 on padding)."""
    lmax = max(len(s) for s in sequences)
    if lmax > config.max_seq_len:
        raise ValueError(f"sequence length {lmax} exceeds max_seq_len {config.max_seq_len}")
    N = config.cube_side
    B = len(sequences)
    cubes = np.zeros((B, lmax, N, N, N), dtype=np.float32)
    mask = np.zeros((B, lmax), dtype=bool)
    labels = np.full((B, lmax), -1, dtype=np.int64)
    for i, s in enumerate(sequences):
        l = len(s)
        cubes[i, :l] = s.cubes
        mask[i, :l] = True
        labels[i, :l] = s.labels
    return cubes, mask, labels


def forward_batch(cubes, mask, params: dict, config: ModelConfig):
    """Probabilities ``(B, l, classes)`` for padded cubes ``(B, l, N, N, N)``.

    Padded positions skip the CNN (zero features) and are excluded as
    attention keys.
    """
    B, L = mask.shape
    if L > config.max_seq_len:
        raise ValueError(f"sequence length {L} exceeds max_seq_len {config.max_seq_len}")
    dt = config.np_dtype
    _, flat, cnn_cache = cnn_forward(cubes[mask], params, config)
    X = np.zeros((B, L, config.embed_dim), dtype=dt)
    X[mask] = flat
    Z = embed_sequence(X, params["order_embeddings"])
    enc_caches = []
    for t in range(1, config.num_encoders + 1):
        Z, c = encoder_forward(Z, encoder_params(params, t), config, mask)
        enc_caches.append(c)
    fin = None
    if config.final_ln:
        Z, fin = layer_norm_forward(Z, params["final_ln.scale"], params["final_ln.shift"], config.ln_eps)
    probs, logits = classify(Z, params["classifier.weight"], params["classifier.bias"])
    cache = {"mask": mask, "cnn": cnn_cache, "enc": enc_caches, "final_ln": fin, "ZT": Z,
             "logits": logits}
    return probs, cache


def backward_batch(dlogits, cache, params: dict, config: ModelConfig) -> dict:
    mask = cache["mask"]
    Z = cache["ZT"]
    g = {"classifier.weight": np.tensordot(Z, dlogits, axes=((0, 1), (0, 1))),
         "classifier.bias": dlogits.sum(axis=(0, 1))}
    dZ = dlogits @ params["classifier.weight"].T
    if config.final_ln:
        dZ, g["final_ln.scale"], g["final_ln.shift"] = layer_norm_backward(
            dZ, cache["final_ln"], params["final_ln.scale"])
    for t in range(config.num_encoders, 0, -1):
        dZ, ge = encoder_backward(dZ, cache["enc"][t - 1], encoder_params(params, t), config)
        for k, v in ge.items():
            g[f"encoder{t}.{k}"] = v
    L = mask.shape[1]
    dO = np.zeros_like(params["order_embeddings"])
    dO[:L] = dZ.sum(axis=0)
    g["order_embeddings"] = dO
    g.update(cnn_backward(dZ[mask], cache["cnn"], params, config))
    return {k: g[k].astype(params[k].dtype, copy=False) for k in params}


def model_forward(seq, params: dict, config: ModelConfig) -> PredictionSequence:
    cubes, mask, _ = pad_batch([seq], config)
    probs, _ = forward_batch(cubes, mask, params, config)
    return PredictionSequence(probs[0], list(seq.center_indices), seq.source_id)


def predict_sequences(sequences, params: dict, config: ModelConfig, batch_size: int = 8):
    out = []
    for lo in range(0, len(sequences), batch_size):
        batch = sequences[lo:lo + batch_size]
        cubes, mask, _ = pad_batch(batch, config)
        probs, _ = forward_batch(cubes, mask, params, config)
        for i, s in enumerate(batch):
            out.append(PredictionSequence(probs[i, :len(s)], list(s.center_indices), s.source_id))
    return out


LOG_FLOOR = 1e-12


def sequence_loss(logits, labels, mask, class_weights=(1.0, 1.0)):
    """Mean over valid positions of class-weighted negative log-likelihood.

    Returns ``(loss, dlogits)``. The log-probability is floored at
    ``log(1e-12)`` so the loss stays finite.
    """
    w = np.asarray(class_weights, dtype=np.float64)
    n = int(mask.sum())
    out_dtype = logits.dtype
    logits = logits.astype(np.float64)
    m = logits.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1))
    y = np.where(mask, labels, 0)
    logp = np.take_along_axis(logits, y[..., None], axis=-1)[..., 0] - lse
    floored = logp < math.log(LOG_FLOOR)
    logp = np.maximum(logp, math.log(LOG_FLOOR))
    wy = w[y] * mask
    loss = float(-(wy * logp).sum() / n)
    probs = np.exp(logits - lse[..., None])
    # p_y - 1 written as minus the other classes' mass (no cancellation)
    np.put_along_axis(probs, y[..., None], 0.0, axis=-1)
    np.put_along_axis(probs, y[..., None], -probs.sum(axis=-1, keepdims=True), axis=-1)
    # the floor is flat, so clamped positions contribute no gradient
    dlogits = probs * (np.where(floored, 0.0, wy) / n)[..., None]
    return loss, dlogits.astype(out_dtype)


def model_gradients(sequences, params: dict, config: ModelConfig, class_weights=(1.0, 1.0),
                    loss_scale: float = 1.0):
    """Loss and exact gradients for a batch of labelled sequences."""
    cubes, mask, labels = pad_batch(sequences, config)
    _, cache = forward_batch(cubes, mask, params, config)
    loss, dlogits = sequence_loss(cache["logits"], labels, mask, class_weights)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite training loss {loss!r}")
    if loss_scale != 1.0:
        loss *= loss_scale
        dlogits = dlogits * dlogits.dtype.type(loss_scale)
    return loss, backward_batch(dlogits, cache, params, config)
