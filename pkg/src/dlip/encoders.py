"""Tiny dual encoders with hand-written forward and backward passes.

Text side: token-embedding lookup, `depth` pre-norm transformer blocks with
padding-masked self-attention, mean pool over non-pad positions, linear
projection, L2 normalize. depth=0 reduces to lookup-mean-project-normalize.

Image side: non-overlapping patches, linear patch projection, `depth` blocks
over patch tokens; the patch matrix is the per-token L2-normalized block
output, the global vector is the L2-normalized linear projection of the mean
patch token (no CLS token).

Everything is NumPy. Backward passes are written by hand and verified against
central finite differences by the losses module's checker.
"""

import json
import re
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    CorruptCheckpoint,
    DataError,
    DegenerateVector,
    DimensionMismatch,
    ShapeError,
    VersionMismatch,
)

EPS_NORM = 1e-12
LN_EPS = 1e-5
TAU_MIN = 1e-3
TAU_MAX = 10.0


# ---- tokenizer ----

_WORD = re.compile(r"\w+")


class Tokenizer:
    """Corpus-built word tokenizer, lowercase, fixed output length.

    Ids: 0 = pad, 1 = unk, then corpus tokens in sorted order. Encoding
    truncates or pads to max_len; an empty tokenization maps to [unk] so the
    output always has at least one non-pad position.
    """

    PAD_ID = 0
    UNK_ID = 1

    def __init__(self, vocab: Dict[str, int], max_len: int = 77):
        self.vocab = vocab
        self.max_len = max_len

    @classmethod
    def build(cls, texts: Sequence[str], max_len: int = 77) -> "Tokenizer":
        tokens = set()
        for text in texts:
            tokens.update(cls.tokenize(text))
        vocab = {tok: i + 2 for i, tok in enumerate(sorted(tokens))}
        return cls(vocab, max_len)

    @staticmethod
    def tokenize(text: str) -> List[str]:
        return _WORD.findall(text.lower())

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) + 2

    def encode(self, text: str) -> np.ndarray:
        ids = [self.vocab.get(tok, self.UNK_ID) for tok in self.tokenize(text)]
        if not ids:
            ids = [self.UNK_ID]
        ids = ids[: self.max_len]
        out = np.full(self.max_len, self.PAD_ID, dtype=np.int32)
        out[: len(ids)] = ids
        return out

    def encode_batch(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.encode(t) for t in texts]) if texts else np.zeros(
            (0, self.max_len), dtype=np.int32
        )

    def id_to_token(self) -> List[str]:
        """Token list in id order starting at id 2 (for serialization)."""
        items = sorted(self.vocab.items(), key=lambda kv: kv[1])
        return [tok for tok, _ in items]

    @classmethod
    def from_token_list(cls, tokens: Sequence[str], max_len: int) -> "Tokenizer":
        return cls({tok: i + 2 for i, tok in enumerate(tokens)}, max_len)


# ---- config ----

@dataclass
class EncoderConfig:
    """Shapes of both encoders. patch_grid counts patches, not pixels."""

    embed_dim: int = 64
    patch_grid: Tuple[int, int] = (4, 4)
    image_size: Tuple[int, int] = (32, 32)
    channels: int = 3
    depth: int = 2
    heads: int = 4
    hidden_mult: int = 4
    max_len: int = 77
    param_seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        gh, gw = self.patch_grid
        if gh < 1 or gw < 1:
            raise ValueError("patch_grid dimensions must be >= 1")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        h, w = self.image_size
        if h % gh != 0 or w % gw != 0:
            raise ShapeError(
                f"image size {self.image_size} not divisible by patch grid {self.patch_grid}"
            )
        if self.depth > 0 and self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")

    @property
    def patch_hw(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    @property
    def patch_pixels(self) -> Tuple[int, int]:
        return (self.image_size[0] // self.patch_grid[0],
                self.image_size[1] // self.patch_grid[1])

    @property
    def patch_dim(self) -> int:
        ph, pw = self.patch_pixels
        return self.channels * ph * pw

    @property
    def hidden_dim(self) -> int:
        return self.hidden_mult * self.embed_dim

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "patch_grid": list(self.patch_grid),
            "image_size": list(self.image_size),
            "channels": self.channels,
            "depth": self.depth,
            "heads": self.heads,
            "hidden_mult": self.hidden_mult,
            "max_len": self.max_len,
            "param_seed": self.param_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(
            embed_dim=int(d["embed_dim"]),
            patch_grid=tuple(d["patch_grid"]),
            image_size=tuple(d["image_size"]),
            channels=int(d["channels"]),
            depth=int(d["depth"]),
            heads=int(d["heads"]),
            hidden_mult=int(d["hidden_mult"]),
            max_len=int(d["max_len"]),
            param_seed=int(d["param_seed"]),
        )


# ---- numeric helpers ----

def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """x / ||x|| along axis. Raises DegenerateVector when ||x|| <= 1e-12."""
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    if np.any(norm <= EPS_NORM):
        raise DegenerateVector(f"norm <= {EPS_NORM} in l2_normalize")
    return x / norm


def _l2norm_fwd(x: np.ndarray):
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    if np.any(norm <= EPS_NORM):
        raise DegenerateVector(f"norm <= {EPS_NORM} in l2_normalize")
    y = x / norm
    return y, (y, norm)


def _l2norm_bwd(d_y: np.ndarray, cache) -> np.ndarray:
    # dx = (dy - y (y.dy)) / ||x||, the projection Jacobian (I - y y^T)/||x||
    y, norm = cache
    return (d_y - y * np.sum(y * d_y, axis=-1, keepdims=True)) / norm


def softmax_lastaxis(s: np.ndarray) -> np.ndarray:
    m = np.max(s, axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / np.sum(e, axis=-1, keepdims=True)


# Unit-amplitude sinusoids would dwarf the Glorot-initialized content
# embeddings (norm ~1 vs ~5.7 at d=64) and stall content-position binding,
# so the table is scaled down.
PE_SCALE = 0.2


def sinusoidal_positions(n: int, d: int, dtype) -> np.ndarray:
    """Fixed sin/cos position table, (n, d). Added only when depth > 0."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return (PE_SCALE * table).astype(dtype)


# ---- layer primitives (explicit caches, hand-written backward) ----

def _linear_fwd(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray]):
    y = x @ w if b is None else x @ w + b
    return y, x


def _linear_bwd(d_y: np.ndarray, x: np.ndarray, w: np.ndarray):
    # collapse leading axes so the same code serves (B,D) and (B,T,D)
    din, dout = w.shape
    x2 = x.reshape(-1, din)
    g2 = d_y.reshape(-1, dout)
    d_x = (d_y @ w.T).reshape(x.shape)
    d_w = x2.T @ g2
    d_b = g2.sum(axis=0)
    return d_x, d_w, d_b


def _layernorm_fwd(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    sigma = np.sqrt(var + LN_EPS)
    xhat = xc / sigma
    return g * xhat + b, (xhat, sigma, g)


def _layernorm_bwd(d_y: np.ndarray, cache):
    # dx = (ghat - mean(ghat) - xhat * mean(ghat * xhat)) / sigma
    xhat, sigma, g = cache
    ghat = d_y * g
    m1 = ghat.mean(axis=-1, keepdims=True)
    m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
    d_x = (ghat - m1 - xhat * m2) / sigma
    d_g = (d_y * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    d_b = d_y.reshape(-1, xhat.shape[-1]).sum(axis=0)
    return d_x, d_g, d_b


def _attention_fwd(x, wq, wk, wv, wo, heads, key_mask):
    """Multi-head self-attention, no QKV/O biases.

    x: (B, T, D); key_mask: (B, T) bool of valid key positions or None.
    Masked keys get -inf scores, so they carry no weight and no gradient.
    """
    b, t, d = x.shape
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)

    def split(z):  # (B,T,D) -> (B,h,T,dh)
        return z.reshape(b, t, heads, dh).transpose(0, 2, 1, 3)

    q = split(x @ wq)
    k = split(x @ wk)
    v = split(x @ wv)
    s = (q @ k.transpose(0, 1, 3, 2)) * scale  # (B,h,T,T)
    if key_mask is not None:
        s = np.where(key_mask[:, None, None, :], s, -np.inf)
    p = softmax_lastaxis(s)
    o = p @ v  # (B,h,T,dh)
    o_merged = o.transpose(0, 2, 1, 3).reshape(b, t, d)
    y = o_merged @ wo
    cache = (x, q, k, v, p, o_merged, wq, wk, wv, wo, heads, scale)
    return y, cache


def _attention_bwd(d_y, cache):
    x, q, k, v, p, o_merged, wq, wk, wv, wo, heads, scale = cache
    b, t, d = x.shape
    dh = d // heads

    d_wo = o_merged.reshape(-1, d).T @ d_y.reshape(-1, d)
    d_o = (d_y @ wo.T).reshape(b, t, heads, dh).transpose(0, 2, 1, 3)

    d_p = d_o @ v.transpose(0, 1, 3, 2)
    d_v = p.transpose(0, 1, 3, 2) @ d_o
    # softmax rows: dS = (dP - sum(dP*P)) * P ; masked entries have P=0 -> dS=0
    d_s = (d_p - np.sum(d_p * p, axis=-1, keepdims=True)) * p
    d_q = (d_s @ k) * scale
    d_k = (d_s.transpose(0, 1, 3, 2) @ q) * scale

    def merge(z):  # (B,h,T,dh) -> (B*T, D)
        return z.transpose(0, 2, 1, 3).reshape(b * t, d)

    x2 = x.reshape(-1, d)
    d_wq = x2.T @ merge(d_q)
    d_wk = x2.T @ merge(d_k)
    d_wv = x2.T @ merge(d_v)
    d_x = (merge(d_q) @ wq.T + merge(d_k) @ wk.T + merge(d_v) @ wv.T).reshape(b, t, d)
    return d_x, d_wq, d_wk, d_wv, d_wo


_BLOCK_PARAM_SHAPES = (
    ("ln1_g", "d"), ("ln1_b", "d"),
    ("wq", "dd"), ("wk", "dd"), ("wv", "dd"), ("wo", "dd"),
    ("ln2_g", "d"), ("ln2_b", "d"),
    ("ffn_w1", "df"), ("ffn_b1", "f"), ("ffn_w2", "fd"), ("ffn_b2", "d"),
)


def _block_fwd(x, p: Dict[str, np.ndarray], prefix: str, heads: int, key_mask):
    """Pre-norm block: x + Attn(LN(x)), then y + FFN(LN(y))."""
    h1, c_ln1 = _layernorm_fwd(x, p[prefix + "ln1_g"], p[prefix + "ln1_b"])
    a, c_att = _attention_fwd(
        h1, p[prefix + "wq"], p[prefix + "wk"], p[prefix + "wv"], p[prefix + "wo"],
        heads, key_mask,
    )
    y1 = x + a
    h2, c_ln2 = _layernorm_fwd(y1, p[prefix + "ln2_g"], p[prefix + "ln2_b"])
    u, c_fc1 = _linear_fwd(h2, p[prefix + "ffn_w1"], p[prefix + "ffn_b1"])
    act = np.maximum(u, 0.0)
    f, c_fc2 = _linear_fwd(act, p[prefix + "ffn_w2"], p[prefix + "ffn_b2"])
    y = y1 + f
    cache = (c_ln1, c_att, c_ln2, c_fc1, u, c_fc2, prefix)
    return y, cache


def _block_bwd(d_y, cache, p: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
    c_ln1, c_att, c_ln2, c_fc1, u, c_fc2, prefix = cache
    # FFN branch
    d_act, d_w2, d_b2 = _linear_bwd(d_y, c_fc2, p[prefix + "ffn_w2"])
    d_u = d_act * (u > 0.0)
    d_h2, d_w1, d_b1 = _linear_bwd(d_u, c_fc1, p[prefix + "ffn_w1"])
    d_y1, d_g2, d_bb2 = _layernorm_bwd(d_h2, c_ln2)
    d_y1 = d_y1 + d_y
    # attention branch
    d_h1, d_wq, d_wk, d_wv, d_wo = _attention_bwd(d_y1, c_att)
    d_x, d_g1, d_bb1 = _layernorm_bwd(d_h1, c_ln1)
    d_x = d_x + d_y1

    grads[prefix + "ffn_w2"] += d_w2
    grads[prefix + "ffn_b2"] += d_b2
    grads[prefix + "ffn_w1"] += d_w1
    grads[prefix + "ffn_b1"] += d_b1
    grads[prefix + "ln2_g"] += d_g2
    grads[prefix + "ln2_b"] += d_bb2
    grads[prefix + "wq"] += d_wq
    grads[prefix + "wk"] += d_wk
    grads[prefix + "wv"] += d_wv
    grads[prefix + "wo"] += d_wo
    grads[prefix + "ln1_g"] += d_g1
    grads[prefix + "ln1_b"] += d_bb1
    return d_x


# ---- parameter container ----

class ParamSet:
    """Ordered name -> array map with flat-vector views.

    Insertion order defines the flat layout, so two ParamSets built from the
    same config always agree on it.
    """

    def __init__(self, arrays: Dict[str, np.ndarray]):
        self.arrays = dict(arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.arrays[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def names(self) -> List[str]:
        return list(self.arrays.keys())

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        if vec.size != self.size:
            raise DimensionMismatch(f"expected {self.size} values, got {vec.size}")
        offset = 0
        for name, a in self.arrays.items():
            chunk = vec[offset : offset + a.size]
            # np.array keeps 0-d shapes; ascontiguousarray would promote them to 1-D
            self.arrays[name] = np.array(chunk.reshape(a.shape), dtype=a.dtype)
            offset += a.size

    def zeros_like(self) -> "ParamSet":
        return ParamSet({n: np.zeros_like(a) for n, a in self.arrays.items()})

    def copy(self) -> "ParamSet":
        return ParamSet({n: a.copy() for n, a in self.arrays.items()})

    def decay_mask_flat(self) -> np.ndarray:
        """True for entries of 2-D matrices; biases, gains and the logit
        scale are excluded from weight decay."""
        parts = [
            np.full(a.size, a.ndim == 2, dtype=bool) for a in self.arrays.values()
        ]
        return np.concatenate(parts)


# ---- the model ----

def _logit_scale_init(dtype) -> np.ndarray:
    """Log-scale parameter s with exp(-s) == 0.07 exactly in `dtype`."""
    target = dtype(0.07)
    s = dtype(-np.log(np.float64(target)))
    best, best_err = s, abs(np.float64(np.exp(-s)) - np.float64(target))
    probe = s
    for _ in range(8):
        probe = np.nextafter(probe, dtype(np.inf), dtype=dtype)
        err = abs(np.float64(np.exp(-probe)) - np.float64(target))
        if err < best_err:
            best, best_err = probe, err
    probe = s
    for _ in range(8):
        probe = np.nextafter(probe, dtype(-np.inf), dtype=dtype)
        err = abs(np.float64(np.exp(-probe)) - np.float64(target))
        if err < best_err:
            best, best_err = probe, err
    return np.array(best, dtype=dtype)


def param_count_formula(config: EncoderConfig, vocab_size: int) -> int:
    """Closed-form parameter count; asserted equal to the runtime count.

    block = 4d^2 + 2dF + F + 5d (QKVO, FFN with biases, two LayerNorms)
    text  = V*d + depth*block + d^2 + d
    image = P*d + d + depth*block + d^2 + d, with P = channels*ph*pw
    total = text + image + 1 (logit scale)
    """
    d = config.embed_dim
    f = config.hidden_dim
    block = 4 * d * d + 2 * d * f + f + 5 * d
    text = vocab_size * d + config.depth * block + d * d + d
    image = config.patch_dim * d + d + config.depth * block + d * d + d
    return text + image + 1


class DualEncoder:
    """Text and image encoders sharing a config and one parameter set.

    Parameters live in one ParamSet; names are prefixed txt./img. and the
    shared learnable temperature is stored as logit_s with tau = exp(-s).
    """

    def __init__(self, config: EncoderConfig, vocab_size: int, dtype=np.float32):
        if vocab_size < 2:
            raise ValueError("vocab_size must be >= 2 (pad + unk)")
        self.config = config
        self.vocab_size = vocab_size
        self.dtype = np.dtype(dtype).type
        self.params = self._init_params()
        d = config.embed_dim
        self._pos_text = sinusoidal_positions(config.max_len, d, self.dtype)
        self._pos_image = sinusoidal_positions(config.patch_hw, d, self.dtype)

    # -- construction --

    def _init_params(self) -> ParamSet:
        """uniform(-a, a) with a = sqrt(6/(fan_in+fan_out)) on matrices
        (embedding table included), zeros for biases, ones for LN gains."""
        cfg = self.config
        d = cfg.embed_dim
        f = cfg.hidden_dim
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.param_seed)))

        def mat(fan_in, fan_out):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(self.dtype)

        def zeros(*shape):
            return np.zeros(shape, dtype=self.dtype)

        def ones(*shape):
            return np.ones(shape, dtype=self.dtype)

        arrays: Dict[str, np.ndarray] = {}
        arrays["txt.embed"] = mat(self.vocab_size, d)
        for i in range(cfg.depth):
            self._init_block(arrays, f"txt.b{i}.", mat, zeros, ones, d, f)
        arrays["txt.proj_w"] = mat(d, d)
        arrays["txt.proj_b"] = zeros(d)
        arrays["img.patch_w"] = mat(cfg.patch_dim, d)
        arrays["img.patch_b"] = zeros(d)
        for i in range(cfg.depth):
            self._init_block(arrays, f"img.b{i}.", mat, zeros, ones, d, f)
        arrays["img.proj_w"] = mat(d, d)
        arrays["img.proj_b"] = zeros(d)
        arrays["logit_s"] = _logit_scale_init(self.dtype)
        return ParamSet(arrays)

    @staticmethod
    def _init_block(arrays, prefix, mat, zeros, ones, d, f):
        arrays[prefix + "ln1_g"] = ones(d)
        arrays[prefix + "ln1_b"] = zeros(d)
        arrays[prefix + "wq"] = mat(d, d)
        arrays[prefix + "wk"] = mat(d, d)
        arrays[prefix + "wv"] = mat(d, d)
        arrays[prefix + "wo"] = mat(d, d)
        arrays[prefix + "ln2_g"] = ones(d)
        arrays[prefix + "ln2_b"] = zeros(d)
        arrays[prefix + "ffn_w1"] = mat(d, f)
        arrays[prefix + "ffn_b1"] = zeros(f)
        arrays[prefix + "ffn_w2"] = mat(f, d)
        arrays[prefix + "ffn_b2"] = zeros(d)

    def param_count(self) -> int:
        return self.params.size

    # -- temperature --

    @property
    def tau(self) -> float:
        return float(np.exp(-self.params["logit_s"]))

    def clamp_logit_scale(self) -> None:
        """Keep tau = exp(-s) inside [1e-3, 10]."""
        s = self.params["logit_s"]
        lo = self.dtype(-np.log(TAU_MAX))
        hi = self.dtype(-np.log(TAU_MIN))
        self.params["logit_s"] = np.array(np.clip(s, lo, hi), dtype=self.dtype)

    # -- text --

    def encode_text(self, tokens: np.ndarray):
        """tokens: (B, L) int ids with L <= max_len; pad positions are
        excluded from attention keys and from the mean pool, so trailing
        padding never changes the result. Returns (vectors (B, d), cache)."""
        p = self.params.arrays
        cfg = self.config
        if tokens.ndim != 2:
            raise DimensionMismatch(f"tokens must be (B, L), got {tokens.shape}")
        if tokens.shape[1] > cfg.max_len or tokens.shape[1] < 1:
            raise DimensionMismatch(
                f"token length {tokens.shape[1]} outside [1, {cfg.max_len}]"
            )
        if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= self.vocab_size:
            raise DimensionMismatch("token id out of vocabulary range")
        mask = tokens != Tokenizer.PAD_ID  # (B, L)
        counts = mask.sum(axis=1)
        if np.any(counts == 0):
            raise DimensionMismatch("all-pad token sequence")

        x = p["txt.embed"][tokens]  # (B, L, d)
        if cfg.depth > 0:
            x = x + self._pos_text[: tokens.shape[1]][None]
        block_caches = []
        for i in range(cfg.depth):
            x, c = _block_fwd(x, p, f"txt.b{i}.", cfg.heads, mask)
            block_caches.append(c)
        counts_f = counts.astype(x.dtype)[:, None]
        pooled = (x * mask[:, :, None]).sum(axis=1) / counts_f  # (B, d)
        proj, c_proj = _linear_fwd(pooled, p["txt.proj_w"], p["txt.proj_b"])
        out, c_norm = _l2norm_fwd(proj)
        cache = (tokens, mask, counts_f, block_caches, c_proj, c_norm)
        return out, cache

    def encode_text_backward(self, d_out: np.ndarray, cache, grads: ParamSet) -> None:
        """Accumulate d(loss)/d(params) into `grads` given d(loss)/d(vectors)."""
        p = self.params.arrays
        g = grads.arrays
        tokens, mask, counts_f, block_caches, c_proj, c_norm = cache
        d_proj = _l2norm_bwd(d_out, c_norm)
        d_pooled, d_w, d_b = _linear_bwd(d_proj, c_proj, p["txt.proj_w"])
        g["txt.proj_w"] += d_w
        g["txt.proj_b"] += d_b
        d_x = mask[:, :, None] * (d_pooled[:, None, :] / counts_f[:, None, :])
        for i in reversed(range(self.config.depth)):
            d_x = _block_bwd(d_x, block_caches[i], p, g)
        np.add.at(g["txt.embed"], tokens, d_x)

    # -- image --

    def _patchify(self, images: np.ndarray) -> np.ndarray:
        cfg = self.config
        b, c, h, w = images.shape
        gh, gw = cfg.patch_grid
        ph, pw = cfg.patch_pixels
        x = images.reshape(b, c, gh, ph, gw, pw)
        x = x.transpose(0, 2, 4, 1, 3, 5)  # (B, gh, gw, C, ph, pw)
        return x.reshape(b, gh * gw, c * ph * pw)

    def _unpatchify_grad(self, d_patches: np.ndarray, b: int) -> np.ndarray:
        cfg = self.config
        gh, gw = cfg.patch_grid
        ph, pw = cfg.patch_pixels
        c = cfg.channels
        x = d_patches.reshape(b, gh, gw, c, ph, pw)
        x = x.transpose(0, 3, 1, 4, 2, 5)
        return x.reshape(b, c, gh * ph, gw * pw)

    def encode_image(self, images: np.ndarray):
        """images: (B, C, H, W) floats. Returns (globals (B, d),
        patches (B, HW, d), cache); every output row is unit-norm."""
        p = self.params.arrays
        cfg = self.config
        if images.ndim != 4:
            raise DimensionMismatch(f"images must be (B, C, H, W), got {images.shape}")
        b, c, h, w = images.shape
        if c != cfg.channels or (h, w) != tuple(cfg.image_size):
            raise ShapeError(
                f"image shape {(c, h, w)} does not match config "
                f"({cfg.channels}, {cfg.image_size[0]}, {cfg.image_size[1]})"
            )
        pix = self._patchify(images.astype(self.dtype, copy=False))  # (B, HW, P)
        x, c_patch = _linear_fwd(pix, p["img.patch_w"], p["img.patch_b"])
        if cfg.depth > 0:
            x = x + self._pos_image[None]
        block_caches = []
        for i in range(cfg.depth):
            x, cb = _block_fwd(x, p, f"img.b{i}.", cfg.heads, None)
            block_caches.append(cb)
        patches, c_pnorm = _l2norm_fwd(x)  # per-token normalize
        mean_tok = x.mean(axis=1)  # (B, d)
        proj, c_proj = _linear_fwd(mean_tok, p["img.proj_w"], p["img.proj_b"])
        g_out, c_gnorm = _l2norm_fwd(proj)
        cache = (b, block_caches, c_patch, c_pnorm, c_proj, c_gnorm, x.shape[1])
        return g_out, patches, cache

    def encode_image_backward(
        self, d_global: np.ndarray, d_patches: np.ndarray, cache, grads: ParamSet
    ) -> None:
        p = self.params.arrays
        g = grads.arrays
        b, block_caches, c_patch, c_pnorm, c_proj, c_gnorm, hw = cache
        d_proj = _l2norm_bwd(d_global, c_gnorm)
        d_mean, d_w, d_bias = _linear_bwd(d_proj, c_proj, p["img.proj_w"])
        g["img.proj_w"] += d_w
        g["img.proj_b"] += d_bias
        d_x = np.broadcast_to(d_mean[:, None, :] / hw, (b, hw, d_mean.shape[-1])).copy()
        d_x += _l2norm_bwd(d_patches, c_pnorm)
        for i in reversed(range(self.config.depth)):
            d_x = _block_bwd(d_x, block_caches[i], p, g)
        _, d_pw, d_pb = _linear_bwd(d_x, c_patch, p["img.patch_w"])
        g["img.patch_w"] += d_pw
        g["img.patch_b"] += d_pb


# ---- weights file ----
#
# Byte layout, little-endian:
#   magic   4 bytes  "DLIP"
#   version u32      1
#   hlen    u32      length of the JSON header in bytes
#   header  hlen bytes, UTF-8 JSON: config, vocab token list, param names
#   count   u64      number of parameters
#   payload count * 4 bytes of f32, parameters concatenated in name order

_MAGIC = b"DLIP"
_WEIGHTS_VERSION = 1


def save_weights(path, model: DualEncoder, tokenizer: Tokenizer) -> None:
    header = {
        "config": model.config.to_dict(),
        "vocab": tokenizer.id_to_token(),
        "param_names": model.params.names(),
    }
    hbytes = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    flat = model.params.flat().astype("<f4")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _WEIGHTS_VERSION))
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(struct.pack("<Q", flat.size))
        f.write(flat.tobytes())


def load_weights(path, dtype=np.float32) -> Tuple[DualEncoder, Tokenizer]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != _WEIGHTS_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {_WEIGHTS_VERSION}")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen + 8:
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"{path}: bad header: {e}") from e
    (count,) = struct.unpack("<Q", blob[12 + hlen : 20 + hlen])
    payload = blob[20 + hlen :]
    if len(payload) != count * 4:
        raise CorruptCheckpoint(
            f"{path}: payload has {len(payload)} bytes, expected {count * 4}"
        )
    config = EncoderConfig.from_dict(header["config"])
    tokenizer = Tokenizer.from_token_list(header["vocab"], config.max_len)
    model = DualEncoder(config, tokenizer.vocab_size, dtype=dtype)
    if model.params.size != count:
        raise CorruptCheckpoint(
            f"{path}: config implies {model.params.size} params, file has {count}"
        )
    if header.get("param_names") != model.params.names():
        raise CorruptCheckpoint(f"{path}: parameter name order mismatch")
    flat = np.frombuffer(payload, dtype="<f4").astype(model.dtype)
    model.params.load_flat(flat)
    return model, tokenizer


# ---- image tensor file ----
#
# ASCII header line "f32 <ndim> <d0> <d1> ...", then row-major little-endian
# 32-bit floats.

def save_image_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = "f32 " + str(arr.ndim) + " " + " ".join(str(s) for s in arr.shape) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(arr.tobytes())


def load_image_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: missing tensor header line")
    fields = blob[:nl].decode("ascii", errors="replace").split()
    if len(fields) < 2 or fields[0] != "f32":
        raise DataError(f"{path}: bad tensor header {fields!r}")
    try:
        ndim = int(fields[1])
        shape = tuple(int(x) for x in fields[2:])
    except ValueError as e:
        raise DataError(f"{path}: bad tensor header: {e}") from e
    if len(shape) != ndim:
        raise DataError(f"{path}: header declares {ndim} dims, lists {len(shape)}")
    payload = blob[nl + 1 :]
    expected = int(np.prod(shape)) * 4 if shape else 4
    if len(payload) != expected:
        raise DataError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
