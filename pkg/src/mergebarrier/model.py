"""A small decoder-only transformer with hand-written gradients.

Weights live in a plain ``dict[str, np.ndarray]`` (``NamedTensors``) using
row-vector conventions, i.e. a linear layer computes ``x @ W``:

    embed.tok            vocab x dim
    embed.pos            seq_len x dim
    layer.{i}.norm.g     dim               gain of the pre-attention RMS norm
    layer.{i}.attn.wq    dim x (n_heads * head_dim)
    layer.{i}.attn.wk    dim x (n_kv_heads * head_dim)
    layer.{i}.attn.wv    dim x (n_kv_heads * head_dim)
    layer.{i}.attn.wo    (n_heads * head_dim) x dim
    layer.{i}.ffn.w1     dim x ffn_dim
    layer.{i}.ffn.b1     ffn_dim
    layer.{i}.ffn.w2     ffn_dim x dim
    layer.{i}.ffn.c      dim
    head.w               dim x vocab

Query head ``h`` reads key/value head ``h // (n_heads // n_kv_heads)``; with
``n_kv_heads == n_heads`` this is ordinary multi-head attention.

The FFN input and the final hidden state are RMS-normalised without a gain
(the adjacent linear maps absorb it). A layer may instead carry a Taylor
reparameterised FFN (``layer.{i}.tffn.*``, see :mod:`mergebarrier.protect`);
forward and backward handle both forms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .activations import ActivationKind, act_eval, derivative
from .errors import ConfigError, DegenerateBatchError, InputError, SchemaError
from .numkit import RngState, keyed_seed, rng_gaussian

NamedTensors = dict  # str -> np.ndarray

RMS_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 24
    dim: int = 32
    n_layers: int = 2
    n_heads: int = 4
    n_kv_heads: int = 4
    ffn_dim: int = 64
    seq_len: int = 10
    activation: ActivationKind = ActivationKind.GELU

    def __post_init__(self):
        for name in ("vocab", "dim", "n_layers", "n_heads", "n_kv_heads", "ffn_dim", "seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.dim % self.n_heads:
            raise ConfigError(f"dim {self.dim} is not divisible by n_heads {self.n_heads}")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_heads {self.n_heads} is not divisible by n_kv_heads {self.n_kv_heads}")
        object.__setattr__(self, "activation", ActivationKind(self.activation))

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    def to_dict(self) -> dict:
        return {
            "vocab": self.vocab, "dim": self.dim, "n_layers": self.n_layers,
            "n_heads": self.n_heads, "n_kv_heads": self.n_kv_heads,
            "ffn_dim": self.ffn_dim, "seq_len": self.seq_len,
            "activation": self.activation.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls().to_dict()})


@dataclass
class Batch:
    tokens: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.loss_mask is None:
            self.loss_mask = np.ones(self.tokens.shape, dtype=bool)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        if self.tokens.ndim != 2 or self.tokens.shape != self.targets.shape != self.loss_mask.shape:
            raise InputError(
                f"tokens/targets/loss_mask must share a 2-D shape, got "
                f"{self.tokens.shape}, {self.targets.shape}, {self.loss_mask.shape}"
            )

    def __len__(self):
        return self.tokens.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.tokens[idx], self.targets[idx], self.loss_mask[idx])


def expected_shapes(cfg: ModelConfig) -> dict:
    d, hd = cfg.dim, cfg.head_dim
    shapes = {
        "embed.tok": (cfg.vocab, d),
        "embed.pos": (cfg.seq_len, d),
        "head.w": (d, cfg.vocab),
    }
    for i in range(cfg.n_layers):
        p = f"layer.{i}."
        shapes.update({
            p + "norm.g": (d,),
            p + "attn.wq": (d, cfg.n_heads * hd),
            p + "attn.wk": (d, cfg.n_kv_heads * hd),
            p + "attn.wv": (d, cfg.n_kv_heads * hd),
            p + "attn.wo": (cfg.n_heads * hd, d),
            p + "ffn.w1": (d, cfg.ffn_dim),
            p + "ffn.b1": (cfg.ffn_dim,),
            p + "ffn.w2": (cfg.ffn_dim, d),
            p + "ffn.c": (d,),
        })
    return dict(sorted(shapes.items()))


def canonical(w: NamedTensors) -> NamedTensors:
    """Same tensors, keys in lexicographic order."""
    return {k: w[k] for k in sorted(w)}


def init_model(cfg: ModelConfig, seed: int) -> NamedTensors:
    """Gaussian(0, 0.02) weights, zero biases, unit norm gains."""
    w = {}
    for name, shape in expected_shapes(cfg).items():
        if name.endswith((".b1", ".c")):
            w[name] = np.zeros(shape)
        elif name.endswith(".g"):
            w[name] = np.ones(shape)
        else:
            rows, cols = shape
            g, _ = rng_gaussian(RngState(keyed_seed(seed, "init", name)), rows, cols)
            w[name] = INIT_STD * g
    return w


def is_taylor_layer(w: NamedTensors, i: int) -> bool:
    return f"layer.{i}.tffn.coef0" in w


def taylor_order(w: NamedTensors, i: int) -> int:
    n = 0
    while f"layer.{i}.tffn.coef{n}" in w:
        n += 1
    return n - 1


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _rms(x):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / r, r


def _rms_back(dy, y, r):
    return (dy - y * np.mean(dy * y, axis=-1, keepdims=True)) / r


def _check_tokens(cfg, batch):
    t = batch.tokens
    if t.shape[1] > cfg.seq_len:
        raise InputError(f"sequence length {t.shape[1]} exceeds seq_len {cfg.seq_len}")
    if t.size and (t.min() < 0 or t.max() >= cfg.vocab):
        raise InputError(f"token ids must lie in [0, {cfg.vocab}), got range [{t.min()}, {t.max()}]")


def forward(cfg: ModelConfig, w: NamedTensors, batch: Batch, keep_cache: bool = False):
    """Logits of shape (batch * seq, vocab), plus an activation cache if requested."""
    _check_tokens(cfg, batch)
    tokens = batch.tokens
    B, T = tokens.shape
    H, KV, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    grp = np.arange(H) // cfg.group_size
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    scale = 1.0 / np.sqrt(hd)

    x = w["embed.tok"][tokens] + w["embed.pos"][None, :T]
    layers = []
    for i in range(cfg.n_layers):
        p = f"layer.{i}."
        c = {"x_in": x}
        nx, ra = _rms(x)
        a_in = nx * w[p + "norm.g"]
        q = (a_in @ w[p + "attn.wq"]).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        k = (a_in @ w[p + "attn.wk"]).reshape(B, T, KV, hd).transpose(0, 2, 1, 3)
        v = (a_in @ w[p + "attn.wv"]).reshape(B, T, KV, hd).transpose(0, 2, 1, 3)
        kk, vv = k[:, grp], v[:, grp]
        s = (q @ kk.transpose(0, 1, 3, 2)) * scale
        s = np.where(mask, -np.inf, s)
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        att = e / e.sum(axis=-1, keepdims=True)
        o = (att @ vv).transpose(0, 2, 1, 3).reshape(B, T, H * hd)
        x1 = x + o @ w[p + "attn.wo"]
        f_in, rf = _rms(x1)
        z = f_in @ w[p + ("tffn.w1" if is_taylor_layer(w, i) else "ffn.w1")]
        if is_taylor_layer(w, i):
            u = z - w[p + "tffn.z0"]
            y = np.broadcast_to(w[p + "tffn.c"], x1.shape).copy()
            un = np.ones_like(u)
            powers = [un]
            for n in range(taylor_order(w, i) + 1):
                if n:
                    un = un * u
                    powers.append(un)
                y += un @ w[p + f"tffn.coef{n}"]
            c.update(u=u, powers=powers)
        else:
            pre = z + w[p + "ffn.b1"]
            act = act_eval(cfg.activation, pre)
            y = act @ w[p + "ffn.w2"] + w[p + "ffn.c"]
            c.update(pre=pre, act=act)
        x = x1 + y
        if keep_cache:
            c.update(nx=nx, ra=ra, a_in=a_in, q=q, kk=kk, vv=vv, att=att, o=o,
                     f_in=f_in, rf=rf, z=z)
            layers.append(c)
    nf, rfin = _rms(x)
    logits = (nf @ w["head.w"]).reshape(B * T, cfg.vocab)
    cache = {"layers": layers, "nf": nf, "rfin": rfin, "shape": (B, T)} if keep_cache else None
    return logits, cache


def _xent(cfg, logits, batch):
    mask = batch.loss_mask.reshape(-1)
    count = int(mask.sum())
    if count == 0:
        raise DegenerateBatchError("batch has no unmasked positions")
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    tgt = batch.targets.reshape(-1)
    nll = lse - logits[np.arange(logits.shape[0]), np.clip(tgt, 0, cfg.vocab - 1)]
    return float(np.sum(nll * mask) / count), lse, mask, count


def loss(cfg: ModelConfig, w: NamedTensors, batch: Batch) -> float:
    logits, _ = forward(cfg, w, batch)
    return _xent(cfg, logits, batch)[0]


def loss_and_grad(cfg: ModelConfig, w: NamedTensors, batch: Batch):
    """Mean masked cross-entropy and its gradient w.r.t. every tensor in ``w``."""
    logits, cache = forward(cfg, w, batch, keep_cache=True)
    value, lse, mask, count = _xent(cfg, logits, batch)
    B, T = cache["shape"]
    H, KV, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    grp = np.arange(H) // cfg.group_size
    scale = 1.0 / np.sqrt(hd)
    g = {k: np.zeros_like(v) for k, v in w.items()}

    probs = np.exp(logits - lse[:, None])
    probs[np.arange(B * T), batch.targets.reshape(-1)] -= 1.0
    dlogits = (probs * (mask / count)[:, None]).reshape(B, T, cfg.vocab)

    nf = cache["nf"]
    g["head.w"] = np.einsum("btd,btv->dv", nf, dlogits)
    dx = _rms_back(dlogits @ w["head.w"].T, nf, cache["rfin"])

    for i in reversed(range(cfg.n_layers)):
        p = f"layer.{i}."
        c = cache["layers"][i]
        dy = dx
        if is_taylor_layer(w, i):
            g[p + "tffn.c"] = dy.sum(axis=(0, 1))
            powers, u = c["powers"], c["u"]
            du = np.zeros_like(u)
            for n in range(len(powers)):
                g[p + f"tffn.coef{n}"] = np.einsum("btf,btd->fd", powers[n], dy)
                if n:
                    du += n * powers[n - 1] * (dy @ w[p + f"tffn.coef{n}"].T)
            w1name = p + "tffn.w1"
            dz = du
        else:
            g[p + "ffn.c"] = dy.sum(axis=(0, 1))
            g[p + "ffn.w2"] = np.einsum("btf,btd->fd", c["act"], dy)
            dpre = (dy @ w[p + "ffn.w2"].T) * derivative(cfg.activation, 1, c["pre"])
            g[p + "ffn.b1"] = dpre.sum(axis=(0, 1))
            w1name = p + "ffn.w1"
            dz = dpre
        g[w1name] = np.einsum("btd,btf->df", c["f_in"], dz)
        dx1 = dx + _rms_back(dz @ w[w1name].T, c["f_in"], c["rf"])

        # attention
        o = c["o"]
        g[p + "attn.wo"] = np.einsum("bte,btd->ed", o, dx1)
        do = (dx1 @ w[p + "attn.wo"].T).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        att, vv, kk, q = c["att"], c["vv"], c["kk"], c["q"]
        datt = do @ vv.transpose(0, 1, 3, 2)
        dvv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - np.sum(datt * att, axis=-1, keepdims=True)) * scale
        dq = ds @ kk
        dkk = ds.transpose(0, 1, 3, 2) @ q
        dk = np.zeros((B, KV, T, hd))
        dv = np.zeros((B, KV, T, hd))
        np.add.at(dk, (slice(None), grp), dkk)
        np.add.at(dv, (slice(None), grp), dvv)
        dq_f = dq.transpose(0, 2, 1, 3).reshape(B, T, H * hd)
        dk_f = dk.transpose(0, 2, 1, 3).reshape(B, T, KV * hd)
        dv_f = dv.transpose(0, 2, 1, 3).reshape(B, T, KV * hd)
        a_in = c["a_in"]
        g[p + "attn.wq"] = np.einsum("btd,bte->de", a_in, dq_f)
        g[p + "attn.wk"] = np.einsum("btd,bte->de", a_in, dk_f)
        g[p + "attn.wv"] = np.einsum("btd,bte->de", a_in, dv_f)
        da_in = (dq_f @ w[p + "attn.wq"].T + dk_f @ w[p + "attn.wk"].T
                 + dv_f @ w[p + "attn.wv"].T)
        g[p + "norm.g"] = np.sum(da_in * c["nx"], axis=(0, 1))
        dx = dx1 + _rms_back(da_in * w[p + "norm.g"], c["nx"], c["ra"])

    tokens = batch.tokens
    np.add.at(g["embed.tok"], tokens, dx)
    g["embed.pos"][:T] += dx.sum(axis=0)
    return value, g


def check_weights(cfg: ModelConfig, w: NamedTensors) -> None:
    """Raise :class:`SchemaError` unless ``w`` is a standard (unprotected) model for ``cfg``."""
    want = expected_shapes(cfg)
    missing = sorted(set(want) - set(w))
    extra = sorted(set(w) - set(want))
    if missing or extra:
        raise SchemaError(f"schema mismatch: missing {missing}, unexpected {extra}")
    bad = [f"{k}: {np.shape(w[k])} != {s}" for k, s in want.items() if np.shape(w[k]) != s]
    if bad:
        raise SchemaError("shape mismatch: " + "; ".join(bad))
