"""Decoder-only transformer in NumPy with hand-written backpropagation.

Parameters live in a plain ``dict`` of arrays whose insertion order is the
canonical tensor order (used for checkpoints and parameter counting).
Blocks are pre-norm residual: ``x + attn(ln1(x))`` then ``x + ffn(ln2(x))``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

ACTIVATIONS = ("relu", "gelu", "rrelu", "softmax")
LN_EPS = 1e-5
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int = 1
    n_heads: int = 4
    ffn_dim: int | None = None
    activation: str = "softmax"
    max_len: int = 3
    rrelu_lower: float = 1 / 8
    rrelu_upper: float = 1 / 3

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.d_model)
        for name in ("vocab_size", "d_model", "n_heads", "ffn_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.rrelu_lower > self.rrelu_upper:
            raise ConfigError("rrelu_lower must be <= rrelu_upper")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def derive_embedding_size(base_params: int, n_layers: int, n_heads: int = 4) -> int:
    """Width per layer that keeps ``n_layers * d_model`` near ``base_params``."""
    if n_layers < 1 or base_params < n_layers:
        raise ConfigError(f"need base_params >= n_layers >= 1, got {base_params}, {n_layers}")
    d = base_params // n_layers
    if d < n_heads or d % n_heads:
        raise ConfigError(f"derived d_model={d} is incompatible with n_heads={n_heads}")
    return d


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, V = cfg.d_model, cfg.ffn_dim, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (V, d), "pos_emb": (cfg.max_len, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "wq": (d, d), p + "bq": (d,),
            p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,),
            p + "wo": (d, d), p + "bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "w1": (d, f), p + "b1": (f,),
            p + "w2": (f, d), p + "b2": (d,),
        })
    shapes["head.w"] = (d, V)
    shapes["head.b"] = (V,)
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    d, f, V = cfg.d_model, cfg.ffn_dim, cfg.vocab_size
    per_layer = 4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d)
    return V * d + cfg.max_len * d + cfg.n_layers * per_layer + d * V + V


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit layer-norm gains.

    Embedding tables use ``d_model`` as their fan-in. Values are drawn in
    float64 and cast, so a float32 and a float64 model from the same seed
    agree up to rounding.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            fan_in = cfg.d_model if name in ("tok_emb", "pos_emb") else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr.astype(dtype)
    return params


# --- activations -----------------------------------------------------------

def _gelu(z):
    cdf = 0.5 * (1.0 + erf(z / math.sqrt(2.0)))
    return z * cdf, cdf


def activation_forward(z, kind: str, train: bool, rng, lower: float, upper: float):
    """Return ``(u, aux)``; ``aux`` is whatever the backward pass needs."""
    if kind == "relu":
        return np.maximum(z, 0), z > 0
    if kind == "gelu":
        u, cdf = _gelu(z)
        return u, cdf
    if kind == "rrelu":
        if train:
            slope = rng.uniform(lower, upper, size=z.shape).astype(z.dtype)
        else:
            slope = np.asarray((lower + upper) / 2, dtype=z.dtype)
        deriv = np.where(z >= 0, np.ones((), z.dtype), slope)
        return z * deriv, deriv
    if kind == "softmax":
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        u = e / e.sum(axis=-1, keepdims=True)
        return u, u
    raise ConfigError(f"unknown activation {kind!r}")


def activation_backward(du, z, aux, kind: str):
    if kind == "relu":
        return du * aux
    if kind == "gelu":
        pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        return du * (aux + z * pdf)
    if kind == "rrelu":
        return du * aux
    u = aux
    return u * (du - (du * u).sum(axis=-1, keepdims=True))


def ffn_activation(x, kind: str, mode: str = "eval", rng=None, cfg: ModelConfig | None = None):
    lower = cfg.rrelu_lower if cfg else 1 / 8
    upper = cfg.rrelu_upper if cfg else 1 / 3
    return activation_forward(np.asarray(x, dtype=float), kind, mode == "train", rng, lower, upper)[0]


# --- building blocks -------------------------------------------------------

def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xh = xc * rstd
    return xh * g + b, (xh, rstd)


def _ln_backward(dy, g, cache):
    xh, rstd = cache
    dg = (dy * xh).reshape(-1, xh.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xh.shape[-1]).sum(axis=0)
    dxh = dy * g
    dx = rstd * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def _split_heads(x, H):
    B, T, d = x.shape
    return x.reshape(B, T, H, d // H).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def _attn_forward(h, P, p, cfg):
    H = cfg.n_heads
    q = _split_heads(h @ P[p + "wq"] + P[p + "bq"], H)
    k = _split_heads(h @ P[p + "wk"] + P[p + "bk"], H)
    v = _split_heads(h @ P[p + "wv"] + P[p + "bv"], H)
    scale = 1.0 / math.sqrt(cfg.head_dim)
    s = (q @ k.transpose(0, 1, 3, 2)) * np.asarray(scale, dtype=h.dtype)
    s = np.where(_causal_mask(h.shape[1]), s, -np.inf)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    a = e / e.sum(axis=-1, keepdims=True)
    o = _merge_heads(a @ v)
    out = o @ P[p + "wo"] + P[p + "bo"]
    return out, (h, q, k, v, a, o, scale)


def _attn_backward(dout, P, p, cfg, cache, G):
    h, q, k, v, a, o, scale = cache
    d = h.shape[-1]
    H = cfg.n_heads
    G[p + "wo"] = o.reshape(-1, d).T @ dout.reshape(-1, d)
    G[p + "bo"] = dout.reshape(-1, d).sum(axis=0)
    do = _split_heads(dout @ P[p + "wo"].T, H)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * np.asarray(scale, dtype=h.dtype)
    dq = _merge_heads(ds @ k)
    dk = _merge_heads(ds.transpose(0, 1, 3, 2) @ q)
    dv = _merge_heads(dv)
    h2 = h.reshape(-1, d)
    dh = np.zeros_like(h)
    for name, grad in (("q", dq), ("k", dk), ("v", dv)):
        G[p + "w" + name] = h2.T @ grad.reshape(-1, d)
        G[p + "b" + name] = grad.reshape(-1, d).sum(axis=0)
        dh += grad @ P[p + "w" + name].T
    return dh


def _check_tokens(tokens, cfg: ModelConfig):
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ValueError("tokens must be a non-empty 2-D id matrix")
    if tokens.shape[1] > cfg.max_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_len {cfg.max_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
    return tokens


def trunk_forward(P, cfg: ModelConfig, tokens, train: bool = False, rng=None):
    """Residual stream after the last block, plus the backward cache."""
    tokens = _check_tokens(tokens, cfg)
    T = tokens.shape[1]
    x = P["tok_emb"][tokens] + P["pos_emb"][:T]
    caches = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h, ln1 = _ln_forward(x, P[p + "ln1.g"], P[p + "ln1.b"])
        att, att_cache = _attn_forward(h, P, p, cfg)
        x = x + att
        h2, ln2 = _ln_forward(x, P[p + "ln2.g"], P[p + "ln2.b"])
        z = h2 @ P[p + "w1"] + P[p + "b1"]
        u, act = activation_forward(z, cfg.activation, train, rng, cfg.rrelu_lower, cfg.rrelu_upper)
        x = x + (u @ P[p + "w2"] + P[p + "b2"])
        caches.append((ln1, att_cache, ln2, h2, z, u, act))
    return x, (tokens, caches)


def trunk_backward(dx, P, cfg: ModelConfig, cache) -> dict[str, np.ndarray]:
    tokens, caches = cache
    G: dict[str, np.ndarray] = {}
    d, f = cfg.d_model, cfg.ffn_dim
    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        ln1, att_cache, ln2, h2, z, u, act = caches[i]
        G[p + "w2"] = u.reshape(-1, f).T @ dx.reshape(-1, d)
        G[p + "b2"] = dx.reshape(-1, d).sum(axis=0)
        du = dx @ P[p + "w2"].T
        dz = activation_backward(du, z, act, cfg.activation)
        G[p + "w1"] = h2.reshape(-1, d).T @ dz.reshape(-1, f)
        G[p + "b1"] = dz.reshape(-1, f).sum(axis=0)
        dx_ln, G[p + "ln2.g"], G[p + "ln2.b"] = _ln_backward(dz @ P[p + "w1"].T, P[p + "ln2.g"], ln2)
        dx = dx + dx_ln
        dh = _attn_backward(dx, P, p, cfg, att_cache, G)
        dx_ln, G[p + "ln1.g"], G[p + "ln1.b"] = _ln_backward(dh, P[p + "ln1.g"], ln1)
        dx = dx + dx_ln
    T = tokens.shape[1]
    G["tok_emb"] = np.zeros_like(P["tok_emb"])
    np.add.at(G["tok_emb"], tokens.ravel(), dx.reshape(-1, d))
    G["pos_emb"] = np.zeros_like(P["pos_emb"])
    G["pos_emb"][:T] = dx.sum(axis=0)
    return G


def forward(P, cfg: ModelConfig, tokens, mode: str = "eval", rng=None) -> np.ndarray:
    """Per-position logits, shape ``[rows, len, vocab_size]``."""
    x, _ = trunk_forward(P, cfg, tokens, train=(mode == "train"), rng=rng)
    return x @ P["head.w"] + P["head.b"]


def _prediction_sites(target_mask):
    """Row and input-position indices whose logits predict the masked tokens."""
    tm = np.asarray(target_mask, dtype=bool)
    if tm[:, 0].any():
        raise ValueError("position 0 has no prefix and cannot be a target")
    rows, cols = np.nonzero(tm)
    if rows.size == 0:
        raise ValueError("target_mask selects no positions")
    return rows, cols - 1, cols


def predict_logits(P, cfg: ModelConfig, tokens, target_mask) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode logits at the positions that predict masked tokens, and the targets."""
    tokens = np.asarray(tokens)
    rows, src, dst = _prediction_sites(target_mask)
    width = int(src.max()) + 1
    x, _ = trunk_forward(P, cfg, tokens[:, :width])
    return x[rows, src] @ P["head.w"] + P["head.b"], tokens[rows, dst]


def loss_and_grads(P, cfg: ModelConfig, tokens, target_mask, rng=None, train: bool = True):
    """Mean masked next-token cross-entropy and exact gradients.

    The token at masked position ``t`` is predicted from the logits at
    ``t - 1``. Inputs are cut after the last position that feeds a
    prediction; causal attention makes the cut exact.
    """
    tokens = np.asarray(tokens)
    rows, src, dst = _prediction_sites(target_mask)
    width = int(src.max()) + 1
    x, cache = trunk_forward(P, cfg, tokens[:, :width], train=train, rng=rng)
    feats = x[rows, src]
    logits = feats @ P["head.w"] + P["head.b"]
    targets = tokens[rows, dst]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    n = rows.size
    loss = float((lse - shifted[np.arange(n), targets]).mean())
    dlogits = np.exp(shifted - lse[:, None])
    dlogits[np.arange(n), targets] -= 1
    dlogits /= n
    G_head_w = feats.T @ dlogits
    G_head_b = dlogits.sum(axis=0)
    dx = np.zeros_like(x)
    np.add.at(dx, (rows, src), dlogits @ P["head.w"].T)
    G = trunk_backward(dx, P, cfg, cache)
    G["head.w"] = G_head_w
    G["head.b"] = G_head_b
    return loss, {name: G[name] for name in P}


# --- optimizer -------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **hyper) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
            **hyper,
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """Bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(params[name].dtype)
    return params, state


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path, cfg: ModelConfig, params, adam: AdamState, extra: dict | None = None) -> None:
    """Write config, tensors in declared order, Adam moments and extra state to ``.npz``."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "order": list(params),
        "adam": {k: getattr(adam, k) for k in ("step", "lr", "beta1", "beta2", "eps")},
        "extra": extra or {},
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for name in params:
        arrays[f"param/{name}"] = params[name]
        arrays[f"adam_m/{name}"] = adam.m[name]
        arrays[f"adam_v/{name}"] = adam.v[name]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def load_checkpoint(path):
    """Return ``(cfg, params, adam, extra)``."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        order = meta["order"]
        params = {n: z[f"param/{n}"].copy() for n in order}
        m = {n: z[f"adam_m/{n}"].copy() for n in order}
        v = {n: z[f"adam_v/{n}"].copy() for n in order}
    cfg = ModelConfig(**meta["config"])
    adam = AdamState(m=m, v=v, **meta["adam"])
    return cfg, params, adam, meta["extra"]
