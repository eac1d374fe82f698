"""Contrastive losses with analytic gradients, plus their verification tools.

Three objectives over L2-normalized embeddings:

  clip_infonce   symmetric InfoNCE between N image globals and N text vectors.
  mpcl           multi-positive InfoNCE: each image has K sampled sub-caption
                 vectors, all positives for its global embedding.
  grouping_loss  per sub-caption, patch tokens are pooled by thresholded
                 text-patch cosine weights; each sub-caption must identify its
                 own pooled token among the K pooled tokens of the same image.

All losses are means over their -log-softmax terms so values are batch-size
comparable, share one temperature tau, and return d(value)/d(every input)
including d/d(tau). Each loss has a naive-loop oracle (plain Python floats,
no vectorization) and the module ends with a central finite-difference
checker used by the test suite and the gradcheck CLI.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import NonFiniteInput, ShapeMismatch


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput(f"{name} contains NaN or Inf")


def _require_tau(tau: float) -> float:
    tau = float(tau)
    if not math.isfinite(tau) or tau <= 0.0:
        raise NonFiniteInput(f"tau must be finite and positive, got {tau}")
    return tau


@dataclass
class LossOutput:
    """Value plus gradients mirroring the input shapes; unused slots are None."""

    value: float
    grad_image_globals: Optional[np.ndarray] = None
    grad_text_vectors: Optional[np.ndarray] = None
    grad_patches: Optional[np.ndarray] = None
    grad_tau: float = 0.0
    parts: Dict[str, float] = field(default_factory=dict)


def _softmax_cols(s: np.ndarray) -> np.ndarray:
    """Column-wise softmax of a 2-D array (softmax over axis 0)."""
    m = np.max(s, axis=0, keepdims=True)
    e = np.exp(s - m)
    return e / np.sum(e, axis=0, keepdims=True)


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    m = np.max(s, axis=1, keepdims=True)
    e = np.exp(s - m)
    return e / np.sum(e, axis=1, keepdims=True)


# ---- CLIP InfoNCE ----

def clip_infonce(image_globals: np.ndarray, text_vectors: np.ndarray, tau: float) -> LossOutput:
    """Symmetric InfoNCE over N aligned (image, text) pairs.

    value = (L_t2v + L_v2t) / 2 where L_t2v averages -log softmax over images
    for each text and L_v2t mirrors it. N=1 gives exactly 0.
    """
    v, t = image_globals, text_vectors
    if v.ndim != 2 or t.ndim != 2 or v.shape != t.shape:
        raise ShapeMismatch(f"expected matching (N, d) inputs, got {v.shape} and {t.shape}")
    if v.shape[0] < 1:
        raise ShapeMismatch("batch must contain at least one pair")
    _require_finite("image_globals", v)
    _require_finite("text_vectors", t)
    tau = _require_tau(tau)

    n = v.shape[0]
    z = v @ t.T  # z[i, j] = v_i . t_j
    s = z / tau
    p_t2v = _softmax_cols(s)  # over images, per text column
    p_v2t = _softmax_rows(s)  # over texts, per image row
    diag = np.arange(n)
    l_t2v = float(-np.mean(np.log(p_t2v[diag, diag])))
    l_v2t = float(-np.mean(np.log(p_v2t[diag, diag])))
    value = 0.5 * (l_t2v + l_v2t)

    eye = np.eye(n, dtype=z.dtype)
    d_z = ((p_t2v - eye) + (p_v2t - eye)) / (2.0 * n * tau)
    grad_v = d_z @ t
    grad_t = d_z.T @ v
    grad_tau = float(-np.sum(d_z * z) / tau)
    return LossOutput(
        value=value,
        grad_image_globals=grad_v,
        grad_text_vectors=grad_t,
        grad_tau=grad_tau,
        parts={"t2v": l_t2v, "v2t": l_v2t},
    )


# ---- multi-positive contrastive loss ----

def mpcl(image_globals: np.ndarray, text_vectors: np.ndarray, tau: float) -> LossOutput:
    """Multi-positive InfoNCE over K sampled sub-captions per image.

    t2v: each (i, j) pair treats v_i as the positive among all N image
    globals. v2t: each (i, j) treats t_{i,j} as the positive among all N*K
    text vectors. Both directions are means over N*K terms; value is their
    average. K=1 reduces to clip_infonce termwise.
    """
    v, t = image_globals, text_vectors
    if v.ndim != 2 or t.ndim != 3:
        raise ShapeMismatch(f"expected (N, d) and (N, K, d), got {v.shape} and {t.shape}")
    n, d = v.shape
    if t.shape[0] != n or t.shape[2] != d:
        raise ShapeMismatch(f"text {t.shape} does not match images {v.shape}")
    k = t.shape[1]
    if n < 1 or k < 1:
        raise ShapeMismatch("need N >= 1 and K >= 1")
    _require_finite("image_globals", v)
    _require_finite("text_vectors", t)
    tau = _require_tau(tau)

    tf = t.reshape(n * k, d)
    z = v @ tf.T  # (N, N*K), z[i, m] = v_i . t_m
    s = z / tau
    owner = np.repeat(np.arange(n), k)  # owner[m] = image of text column m
    onehot = np.zeros((n, n * k), dtype=z.dtype)
    onehot[owner, np.arange(n * k)] = 1.0

    p_t2v = _softmax_cols(s)  # over images per text column
    p_v2t = _softmax_rows(s)  # over all N*K texts per image row
    l_t2v = float(-np.mean(np.log(p_t2v[owner, np.arange(n * k)])))
    # v2t: image row i has K positive columns (its own sub-captions)
    l_v2t = float(-np.sum(np.log(p_v2t[owner, np.arange(n * k)])) / (n * k))
    value = 0.5 * (l_t2v + l_v2t)

    # t2v: each column contributes (p - e_owner); v2t: each of row i's K
    # positive terms contributes (p_row - e_m), summing to K*p_row - onehot.
    d_z = ((p_t2v - onehot) + (k * p_v2t - onehot)) / (2.0 * n * k * tau)
    grad_v = d_z @ tf
    grad_t = (d_z.T @ v).reshape(n, k, d)
    grad_tau = float(-np.sum(d_z * z) / tau)
    return LossOutput(
        value=value,
        grad_image_globals=grad_v,
        grad_text_vectors=grad_t,
        grad_tau=grad_tau,
        parts={"t2v": l_t2v, "v2t": l_v2t},
    )


# ---- sub-caption grouping ----

@dataclass
class AttentionGrouping:
    """Thresholded text-to-patch attention and the pooled tokens, one image.

    raw_weights[j, n] = max(0, cos<t_j, patch_n>); sparse_weights keeps
    entries >= sigma; coefficients normalizes each nonzero sparse row to sum
    1; rows with no surviving weight fall back to a one-hot on the argmax
    raw weight (lowest index on ties). pooled[j] is the L2-normalized convex
    combination of patches under coefficients[j].
    """

    raw_weights: np.ndarray       # (K, HW), clamped cosines
    sparse_weights: np.ndarray    # (K, HW)
    sigma: float
    pooled: np.ndarray            # (K, d), unit rows
    coefficients: np.ndarray      # (K, HW), rows sum to 1
    fallback: np.ndarray          # (K,) bool, rows that used the argmax patch
    cosines: np.ndarray           # (K, HW), unclamped, for boundary checks
    pooled_norms: np.ndarray      # (K, 1), norms of the pre-normalized pool


def attention_grouping(text_vectors: np.ndarray, patches: np.ndarray, sigma: float) -> AttentionGrouping:
    """Group one image's patches under each of its K sub-captions."""
    t, p = text_vectors, patches
    if t.ndim != 2 or p.ndim != 2 or t.shape[1] != p.shape[1]:
        raise ShapeMismatch(f"expected (K, d) and (HW, d), got {t.shape} and {p.shape}")
    if not 0.0 <= sigma < 1.0:
        raise ValueError(f"sigma must be in [0, 1), got {sigma}")
    _require_finite("text_vectors", t)
    _require_finite("patches", p)

    cos = t @ p.T  # (K, HW)
    raw = np.maximum(cos, 0.0)
    keep = raw >= sigma
    sparse = np.where(keep, raw, 0.0)
    rowsum = sparse.sum(axis=1)
    fallback = rowsum <= 0.0

    coeff = np.zeros_like(sparse)
    alive = ~fallback
    if np.any(alive):
        coeff[alive] = sparse[alive] / rowsum[alive, None]
    if np.any(fallback):
        coeff[fallback, np.argmax(raw[fallback], axis=1)] = 1.0

    pooled_raw = coeff @ p  # (K, d), convex combination of patch rows
    norms = np.sqrt(np.sum(pooled_raw * pooled_raw, axis=1, keepdims=True))
    # a surviving row has a strictly positive weight on a patch with positive
    # cosine against t_j, so the pool cannot vanish; fallback rows are unit
    pooled = pooled_raw / norms
    return AttentionGrouping(
        raw_weights=raw,
        sparse_weights=sparse,
        sigma=float(sigma),
        pooled=pooled,
        coefficients=coeff,
        fallback=fallback,
        cosines=cos,
        pooled_norms=norms,
    )


def _grouping_pool_backward(
    g: AttentionGrouping, patches: np.ndarray, text_vectors: np.ndarray, d_pooled: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Backprop d(loss)/d(pooled) through normalize, coefficients, weights.

    Returns (d_text, d_patches) for one image. The threshold indicator and
    the fallback selection are constant in backward; the clamp kills entries
    with nonpositive cosine.
    """
    # through y = x / ||x||
    d_raw = (d_pooled - g.pooled * np.sum(g.pooled * d_pooled, axis=1, keepdims=True)) / g.pooled_norms
    # through pooled_raw = coeff @ patches
    d_coeff = d_raw @ patches.T  # (K, HW)
    d_patches = g.coefficients.T @ d_raw  # direct path, fallback rows included
    # through coeff = sparse / rowsum on live rows
    alive = ~g.fallback
    d_sparse = np.zeros_like(d_coeff)
    if np.any(alive):
        rowsum = g.sparse_weights[alive].sum(axis=1, keepdims=True)
        inner = np.sum(d_coeff[alive] * g.coefficients[alive], axis=1, keepdims=True)
        d_sparse[alive] = (d_coeff[alive] - inner) / rowsum
    # through sparse = keep(raw) and raw = max(cos, 0)
    d_cos = np.where((g.raw_weights >= g.sigma) & (g.cosines > 0.0), d_sparse, 0.0)
    d_text = d_cos @ patches
    d_patches += d_cos.T @ text_vectors
    return d_text, d_patches


def grouping_loss(
    text_vectors: np.ndarray,
    patches: np.ndarray,
    sigma: float,
    tau: float,
    cross_image: bool = False,
) -> LossOutput:
    """Sub-caption to pooled-token contrastive loss.

    For each image, its K sub-captions pool its patches into K tokens; the
    loss asks sub-caption j to rank its own pooled token first. Negatives
    are the other pooled tokens of the same image by default; cross_image
    widens the denominator to all N*K pooled tokens. One direction only.
    K=1 within-image gives exactly 0.
    """
    t, p = text_vectors, patches
    if t.ndim != 3 or p.ndim != 3:
        raise ShapeMismatch(f"expected (N, K, d) and (N, HW, d), got {t.shape} and {p.shape}")
    if t.shape[0] != p.shape[0] or t.shape[2] != p.shape[2]:
        raise ShapeMismatch(f"text {t.shape} does not match patches {p.shape}")
    _require_finite("text_vectors", t)
    _require_finite("patches", p)
    tau = _require_tau(tau)
    n, k, d = t.shape

    groups = [attention_grouping(t[i], p[i], sigma) for i in range(n)]
    pooled = np.stack([g.pooled for g in groups])  # (N, K, d)

    if not cross_image:
        logits = np.einsum("ind,ijd->inj", pooled, t)  # [i, pooled n, text j]
        s = logits / tau
        m = np.max(s, axis=1, keepdims=True)
        e = np.exp(s - m)
        p_sm = e / np.sum(e, axis=1, keepdims=True)  # softmax over pooled index n
        diag = np.arange(k)
        value = float(-np.mean(np.log(p_sm[:, diag, diag])))
        d_logits = (p_sm - np.eye(k, dtype=s.dtype)[None]) / (n * k * tau)
        d_pooled = np.einsum("inj,ijd->ind", d_logits, t)
        d_text = np.einsum("inj,ind->ijd", d_logits, pooled)
        grad_tau = float(-np.sum(d_logits * logits) / tau)
    else:
        pf = pooled.reshape(n * k, d)
        tf = t.reshape(n * k, d)
        logits = pf @ tf.T  # [pooled m', text m]
        s = logits / tau
        p_sm = _softmax_cols(s)
        diag = np.arange(n * k)
        value = float(-np.mean(np.log(p_sm[diag, diag])))
        d_logits = (p_sm - np.eye(n * k, dtype=s.dtype)) / (n * k * tau)
        d_pooled = (d_logits @ tf).reshape(n, k, d)
        d_text = (d_logits.T @ pf).reshape(n, k, d)
        grad_tau = float(-np.sum(d_logits * logits) / tau)

    d_text = d_text.copy()
    d_patches = np.zeros_like(p)
    for i in range(n):
        dt_i, dp_i = _grouping_pool_backward(groups[i], p[i], t[i], d_pooled[i])
        d_text[i] += dt_i
        d_patches[i] = dp_i
    return LossOutput(
        value=value,
        grad_text_vectors=d_text,
        grad_patches=d_patches,
        grad_tau=grad_tau,
        parts={},
    )


# ---- total objective ----

def total_loss(
    image_globals: np.ndarray,
    text_vectors: np.ndarray,
    patches: np.ndarray,
    sigma: float,
    tau: float,
    lambda_mpcl: float = 1.0,
    lambda_s: float = 0.7,
    cross_image: bool = False,
) -> LossOutput:
    """lambda_mpcl * mpcl + lambda_s * grouping_loss, gradients combined.

    A branch with weight 0 is skipped entirely, so zero weights give exact
    zeros. parts stores the unweighted branch values.
    """
    if lambda_mpcl < 0 or lambda_s < 0:
        raise ValueError("loss weights must be nonnegative")
    value = 0.0
    grad_v = np.zeros_like(image_globals)
    grad_t = np.zeros_like(text_vectors)
    grad_p = np.zeros_like(patches)
    grad_tau = 0.0
    parts = {"mpcl": 0.0, "grouping": 0.0}
    if lambda_mpcl > 0:
        out_m = mpcl(image_globals, text_vectors, tau)
        parts["mpcl"] = out_m.value
        value += lambda_mpcl * out_m.value
        grad_v += lambda_mpcl * out_m.grad_image_globals
        grad_t += lambda_mpcl * out_m.grad_text_vectors
        grad_tau += lambda_mpcl * out_m.grad_tau
    if lambda_s > 0:
        out_s = grouping_loss(text_vectors, patches, sigma, tau, cross_image)
        parts["grouping"] = out_s.value
        value += lambda_s * out_s.value
        grad_t += lambda_s * out_s.grad_text_vectors
        grad_p += lambda_s * out_s.grad_patches
        grad_tau += lambda_s * out_s.grad_tau
    return LossOutput(
        value=value,
        grad_image_globals=grad_v,
        grad_text_vectors=grad_t,
        grad_patches=grad_p,
        grad_tau=grad_tau,
        parts=parts,
    )


# ---- naive-loop oracles ----
#
# Deliberately unvectorized: Python floats, math.exp/math.log, index loops.
# These exist to catch vectorization mistakes in the implementations above.

def _dot(a, b) -> float:
    return float(sum(float(x) * float(y) for x, y in zip(a, b)))


def clip_infonce_oracle(image_globals, text_vectors, tau: float) -> float:
    n = len(image_globals)
    t2v = 0.0
    v2t = 0.0
    for i in range(n):
        num = math.exp(_dot(image_globals[i], text_vectors[i]) / tau)
        den_images = 0.0
        for j in range(n):
            den_images += math.exp(_dot(image_globals[j], text_vectors[i]) / tau)
        t2v += -math.log(num / den_images)
        den_texts = 0.0
        for j in range(n):
            den_texts += math.exp(_dot(image_globals[i], text_vectors[j]) / tau)
        v2t += -math.log(num / den_texts)
    return (t2v / n + v2t / n) / 2.0


def mpcl_oracle(image_globals, text_vectors, tau: float) -> float:
    n = len(image_globals)
    k = len(text_vectors[0])
    t2v = 0.0
    v2t = 0.0
    for i in range(n):
        for j in range(k):
            pos = math.exp(_dot(image_globals[i], text_vectors[i][j]) / tau)
            den = 0.0
            for m in range(n):
                den += math.exp(_dot(image_globals[m], text_vectors[i][j]) / tau)
            t2v += -math.log(pos / den)
            den = 0.0
            for m in range(n):
                for jp in range(k):
                    den += math.exp(_dot(image_globals[i], text_vectors[m][jp]) / tau)
            v2t += -math.log(pos / den)
    terms = n * k
    return (t2v / terms + v2t / terms) / 2.0


def attention_grouping_oracle(text_vectors, patches, sigma: float):
    """Pooled unit vectors per sub-caption, computed with explicit loops."""
    k = len(text_vectors)
    hw = len(patches)
    d = len(patches[0])
    pooled = []
    for j in range(k):
        weights = []
        for nidx in range(hw):
            c = _dot(text_vectors[j], patches[nidx])
            w = c if c > 0.0 else 0.0
            weights.append(w if w >= sigma else 0.0)
        total = sum(weights)
        vec = [0.0] * d
        if total > 0.0:
            for nidx in range(hw):
                for a in range(d):
                    vec[a] += (weights[nidx] / total) * float(patches[nidx][a])
        else:
            best, best_w = 0, None
            for nidx in range(hw):
                c = _dot(text_vectors[j], patches[nidx])
                w = c if c > 0.0 else 0.0
                if best_w is None or w > best_w:
                    best, best_w = nidx, w
            vec = [float(x) for x in patches[best]]
        norm = math.sqrt(sum(x * x for x in vec))
        pooled.append([x / norm for x in vec])
    return pooled


def grouping_loss_oracle(text_vectors, patches, sigma: float, tau: float, cross_image: bool = False) -> float:
    n = len(text_vectors)
    k = len(text_vectors[0])
    pooled = [attention_grouping_oracle(text_vectors[i], patches[i], sigma) for i in range(n)]
    total = 0.0
    for i in range(n):
        for j in range(k):
            pos = math.exp(_dot(pooled[i][j], text_vectors[i][j]) / tau)
            den = 0.0
            if cross_image:
                for m in range(n):
                    for nn in range(k):
                        den += math.exp(_dot(pooled[m][nn], text_vectors[i][j]) / tau)
            else:
                for nn in range(k):
                    den += math.exp(_dot(pooled[i][nn], text_vectors[i][j]) / tau)
            total += -math.log(pos / den)
    return total / (n * k)


def total_loss_oracle(
    image_globals, text_vectors, patches, sigma, tau, lambda_mpcl=1.0, lambda_s=0.7,
    cross_image=False,
) -> float:
    value = 0.0
    if lambda_mpcl > 0:
        value += lambda_mpcl * mpcl_oracle(image_globals, text_vectors, tau)
    if lambda_s > 0:
        value += lambda_s * grouping_loss_oracle(text_vectors, patches, sigma, tau, cross_image)
    return value


# ---- finite-difference checker ----

LossFn = Callable[[List[np.ndarray]], Tuple[float, List[np.ndarray]]]


@dataclass
class DirectionCheck:
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    name: str
    checks: List[DirectionCheck]
    redraws: int

    @property
    def max_rel_err(self) -> float:
        return max(c.rel_err for c in self.checks) if self.checks else 0.0

    @property
    def worst(self) -> Optional[DirectionCheck]:
        return max(self.checks, key=lambda c: c.rel_err) if self.checks else None

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol

    def text(self, tol: float = 1e-4) -> str:
        w = self.worst
        lines = [
            f"{self.name}: {len(self.checks)} directions, "
            f"max rel err {self.max_rel_err:.3e} "
            f"[{'PASS' if self.passed(tol) else 'FAIL'} at {tol:g}]"
        ]
        if w is not None:
            lines.append(
                f"  worst direction {w.index}: analytic {w.analytic:.12e}, "
                f"numeric {w.numeric:.12e}"
            )
        if self.redraws:
            lines.append(f"  redrew {self.redraws} boundary-crossing directions")
        return "\n".join(lines)


def _rel_err(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    if scale < 1e-12:
        return 0.0
    return abs(a - b) / scale


def finite_diff_check(
    loss_fn: LossFn,
    inputs: Sequence[np.ndarray],
    directions: int = 32,
    h: float = 1e-5,
    seed: int = 0,
    boundary_state: Optional[Callable[[List[np.ndarray]], np.ndarray]] = None,
    name: str = "loss",
) -> GradCheckReport:
    """Compare analytic directional derivatives with central differences.

    loss_fn maps a list of float64 arrays to (value, gradients). Directions
    are random unit vectors over the concatenated inputs. When a
    boundary_state callback is given, a direction whose +/-h evaluations land
    in a different piecewise region (threshold mask, clamp sign, fallback
    argmax) is redrawn, since the loss is only piecewise differentiable.
    """
    inputs = [np.asarray(x) for x in inputs]
    for x in inputs:
        if x.dtype != np.float64:
            raise ValueError("finite_diff_check requires float64 inputs")
    value0, grads = loss_fn([x.copy() for x in inputs])
    if len(grads) != len(inputs):
        raise ValueError("loss_fn must return one gradient per input")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    state0 = boundary_state(inputs) if boundary_state is not None else None

    checks: List[DirectionCheck] = []
    redraws = 0
    max_redraws = 100
    for idx in range(directions):
        while True:
            u = [rng.standard_normal(x.shape) for x in inputs]
            norm = math.sqrt(sum(float(np.sum(p * p)) for p in u))
            if norm < 1e-12:
                continue
            u = [p / norm for p in u]
            plus = [x + h * p for x, p in zip(inputs, u)]
            minus = [x - h * p for x, p in zip(inputs, u)]
            if boundary_state is not None and redraws < max_redraws:
                s_plus = boundary_state(plus)
                s_minus = boundary_state(minus)
                if not (np.array_equal(s_plus, state0) and np.array_equal(s_minus, state0)):
                    redraws += 1
                    continue
            break
        f_plus, _ = loss_fn(plus)
        f_minus, _ = loss_fn(minus)
        numeric = (f_plus - f_minus) / (2.0 * h)
        analytic = sum(float(np.sum(g * p)) for g, p in zip(grads, u))
        checks.append(DirectionCheck(idx, analytic, numeric, _rel_err(analytic, numeric)))
    return GradCheckReport(name=name, checks=checks, redraws=redraws)


def grouping_boundary_state(text_vectors: np.ndarray, patches: np.ndarray, sigma: float) -> np.ndarray:
    """Discrete state of the grouping loss: active-weight mask, fallback rows,
    and fallback argmax choices. Used to reject boundary-crossing directions."""
    n = text_vectors.shape[0]
    bits = []
    for i in range(n):
        cos = text_vectors[i] @ patches[i].T
        raw = np.maximum(cos, 0.0)
        keep = (raw >= sigma) & (cos > 0.0)
        sparse = np.where(raw >= sigma, raw, 0.0)
        fallback = sparse.sum(axis=1) <= 0.0
        arg = np.where(fallback, np.argmax(raw, axis=1), -1)
        bits.append(keep.ravel().astype(np.int64))
        bits.append(fallback.astype(np.int64))
        bits.append(arg.astype(np.int64))
    return np.concatenate(bits)


def grouping_boundary_margin(text_vectors: np.ndarray, patches: np.ndarray, sigma: float) -> float:
    """Distance of the closest raw cosine to a threshold (sigma or the clamp
    at 0). Instances with margin < 10h sit too close to a kink to
    finite-difference reliably and should be redrawn."""
    margin = math.inf
    for i in range(text_vectors.shape[0]):
        cos = text_vectors[i] @ patches[i].T
        margin = min(margin, float(np.min(np.abs(cos - sigma))), float(np.min(np.abs(cos))))
    return margin


# ---- randomized gradient-check suite ----

SIGMA_SWEEP = (0.0, 0.1, 0.3, 0.5, 0.7)


def _unit_rows(rng, *shape) -> np.ndarray:
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _clip_fn(inputs):
    v, t, tau = inputs
    out = clip_infonce(v, t, float(tau))
    return out.value, [out.grad_image_globals, out.grad_text_vectors, np.array(out.grad_tau)]


def _mpcl_fn(inputs):
    v, t, tau = inputs
    out = mpcl(v, t, float(tau))
    return out.value, [out.grad_image_globals, out.grad_text_vectors, np.array(out.grad_tau)]


def _grouping_fn(sigma, cross_image=False):
    def fn(inputs):
        t, p, tau = inputs
        out = grouping_loss(t, p, sigma, float(tau), cross_image)
        return out.value, [out.grad_text_vectors, out.grad_patches, np.array(out.grad_tau)]

    return fn


def _total_fn(sigma, lambda_mpcl, lambda_s):
    def fn(inputs):
        v, t, p, tau = inputs
        out = total_loss(v, t, p, sigma, float(tau), lambda_mpcl, lambda_s)
        return out.value, [
            out.grad_image_globals,
            out.grad_text_vectors,
            out.grad_patches,
            np.array(out.grad_tau),
        ]

    return fn


@dataclass
class SuiteReport:
    reports: List[GradCheckReport]

    @property
    def max_rel_err(self) -> float:
        return max(r.max_rel_err for r in self.reports) if self.reports else 0.0

    def passed(self, tol: float) -> bool:
        return all(r.passed(tol) for r in self.reports)

    def text(self, tol: float = 1e-4) -> str:
        lines = [r.text(tol) for r in self.reports]
        lines.append(
            f"overall max rel err {self.max_rel_err:.3e} "
            f"[{'PASS' if self.passed(tol) else 'FAIL'} at {tol:g}]"
        )
        return "\n".join(lines)


def run_gradient_checks(
    instances: int = 20,
    directions: int = 32,
    h: float = 1e-5,
    seed: int = 0,
    max_n: int = 8,
    max_k: int = 6,
    max_hw: int = 16,
    max_d: int = 8,
) -> SuiteReport:
    """Randomized instances for every loss, all float64.

    Grouping-dependent instances are redrawn while any raw cosine sits
    within 10h of sigma or of the clamp at zero.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    reports: List[GradCheckReport] = []
    for inst in range(instances):
        n = int(rng.integers(2, max_n + 1))
        k = int(rng.integers(1, max_k + 1))
        hw = int(rng.integers(1, max_hw + 1))
        d = int(rng.integers(2, max_d + 1))
        tau = float(rng.uniform(0.2, 1.5))
        sigma = float(SIGMA_SWEEP[int(rng.integers(len(SIGMA_SWEEP)))])
        tau_arr = np.array(tau, dtype=np.float64)

        v = _unit_rows(rng, n, d)
        t_flat = _unit_rows(rng, n, d)
        reports.append(
            finite_diff_check(
                _clip_fn, [v, t_flat, tau_arr], directions, h,
                seed=seed * 1000 + inst, name=f"clip_infonce[{inst}]",
            )
        )

        t = _unit_rows(rng, n, k, d)
        reports.append(
            finite_diff_check(
                _mpcl_fn, [v, t, tau_arr], directions, h,
                seed=seed * 1000 + inst, name=f"mpcl[{inst}]",
            )
        )

        for _ in range(200):
            t = _unit_rows(rng, n, k, d)
            p = _unit_rows(rng, n, hw, d)
            if grouping_boundary_margin(t, p, sigma) >= 10.0 * h:
                break
        state = lambda inputs, s=sigma: grouping_boundary_state(inputs[0], inputs[1], s)
        reports.append(
            finite_diff_check(
                _grouping_fn(sigma), [t, p, tau_arr], directions, h,
                seed=seed * 1000 + inst, boundary_state=state,
                name=f"grouping_loss[{inst}] sigma={sigma:g}",
            )
        )

        state_total = lambda inputs, s=sigma: grouping_boundary_state(inputs[1], inputs[2], s)
        reports.append(
            finite_diff_check(
                _total_fn(sigma, 1.0, 0.7), [v, t, p, tau_arr], directions, h,
                seed=seed * 1000 + inst, boundary_state=state_total,
                name=f"total_loss[{inst}] sigma={sigma:g}",
            )
        )
    return SuiteReport(reports)
