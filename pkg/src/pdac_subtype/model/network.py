"""Forward pass, loss and hand-written gradients of the dual-scale MIL model.

Per patch, the cells inside it are pooled by a single-head self-attention
layer whose CLS row is read out; raw scores are penalized by
``lambda_dist`` times the Euclidean distance to the CLS position. The pooled
cell vector is fused with the patch embedding through a projected outer
product and the fused patch vectors are aggregated by gated attention-MIL.
"""

import enum
from dataclasses import dataclass

import numpy as np

from ..exceptions import InputValidationError
from .bags import assign_cells_to_patches

BCE_EPS = 1e-12


class Mode(str, enum.Enum):
    PANSUBNET = "pansubnet"
    ATTMIL_BASELINE = "attmil"


class ClsPosition(str, enum.Enum):
    # CLS sits at the mean centroid of the patch's cells
    CENTROID = "centroid"
    # CLS carries no position: zero bias on every CLS pair
    NONE = "none"


@dataclass(frozen=True)
class ModelConfig:
    mode: Mode = Mode.PANSUBNET
    cls_position: ClsPosition = ClsPosition.CENTROID
    pos_enc: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "cls_position", ClsPosition(self.cls_position))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softmax(s):
    e = np.exp(s - np.max(s))
    return e / e.sum()


def sinusoidal_2d(grid, dim, base=10000.0):
    """2-D sinusoidal encoding: first half of ``dim`` encodes gx, second half gy."""
    grid = np.asarray(grid, dtype=np.float64).reshape(-1, 2)
    half = dim // 2
    n_freq = half // 2
    out = np.zeros((grid.shape[0], dim))
    if n_freq == 0:
        return out
    freq = base ** (-np.arange(n_freq) / n_freq)
    for axis in range(2):
        ang = grid[:, axis : axis + 1] * freq[None, :]
        start = axis * half
        out[:, start : start + n_freq] = np.sin(ang)
        out[:, start + n_freq : start + 2 * n_freq] = np.cos(ang)
    return out


def _cls_distances(centroids, cls_position):
    if len(centroids) == 0 or cls_position is ClsPosition.NONE:
        return np.zeros(len(centroids) + 1)
    anchor = centroids.mean(axis=0)
    return np.concatenate(([0.0], np.sqrt(((centroids - anchor) ** 2).sum(axis=1))))


def spatial_attention_pool(cell_emb, centroids, params, cls_position=ClsPosition.CENTROID, _cache=None):
    """CLS readout of distance-biased self-attention over one patch's cells."""
    cell_emb = np.asarray(cell_emb, dtype=np.float64).reshape(-1, params.d_cell) if len(cell_emb) else np.zeros((0, params.d_cell))
    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    if cell_emb.shape[1] != params.d_cell:
        raise InputValidationError(f"cell embedding dim {cell_emb.shape[1]} != d_cell {params.d_cell}")
    if centroids.shape[0] != cell_emb.shape[0]:
        raise InputValidationError("one centroid per cell required")
    cls_position = ClsPosition(cls_position)

    d = params.d_cell
    tokens = np.vstack([params.cls_token[None, :], cell_emb])
    q = params.W_q @ params.cls_token
    keys = tokens @ params.W_k.T
    values = tokens @ params.W_v.T
    dist = _cls_distances(centroids, cls_position)
    scores = keys @ q / np.sqrt(d) - params.lambda_dist * dist
    a = softmax(scores)
    out = a @ values
    if _cache is not None:
        _cache.update(tokens=tokens, q=q, keys=keys, values=values, dist=dist, a=a)
    return out


def _pool_backward(g_out, c, params, grads):
    """Accumulate gradients of one pooled CLS output into the ``grads`` dict."""
    d = params.d_cell
    tokens, q, keys, values, dist, a = (c[k] for k in ("tokens", "q", "keys", "values", "dist", "a"))
    u = a @ tokens
    grads["W_v"] += np.outer(g_out, u)
    du = params.W_v.T @ g_out
    da = values @ g_out
    ds = a * (da - a @ da)
    grads["lambda_dist"] -= ds @ dist
    dq = ds @ keys / np.sqrt(d)
    dkeys = np.outer(ds, q) / np.sqrt(d)
    grads["W_k"] += dkeys.T @ tokens
    grads["W_q"] += np.outer(dq, params.cls_token)
    # only the CLS token (row 0) is a parameter
    grads["cls_token"] += a[0] * du + params.W_k.T @ dkeys[0] + params.W_q.T @ dq


def fuse(patch_emb, cls_out, W_fuse):
    """Project the row-major flattened outer product ``patch_emb (x) cls_out``."""
    patch_emb = np.asarray(patch_emb, dtype=np.float64)
    cls_out = np.asarray(cls_out, dtype=np.float64)
    if W_fuse.shape != (W_fuse.shape[0], patch_emb.size * cls_out.size):
        raise InputValidationError(
            f"W_fuse shape {W_fuse.shape} incompatible with {patch_emb.size}x{cls_out.size}"
        )
    return W_fuse @ np.outer(patch_emb, cls_out).ravel()


def attmil_aggregate(h, params, grid=None, pos_enc=False, _cache=None):
    """Gated attention-MIL pooling; returns ``(slide_emb, weights)``."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise InputValidationError("attmil_aggregate needs a non-empty (k, P) instance matrix")
    if pos_enc:
        if grid is None:
            raise InputValidationError("positional encoding needs grid coordinates")
        h = h + sinusoidal_2d(grid, h.shape[1])
    gate_t = np.tanh(h @ params.attn_V.T)
    gate_s = sigmoid(h @ params.attn_U.T)
    scores = (gate_t * gate_s) @ params.attn_w
    a = softmax(scores)
    z = a @ h
    if _cache is not None:
        _cache.update(h=h, gate_t=gate_t, gate_s=gate_s, a=a, z=z)
    return z, a


def _cell_groups(bag):
    groups = getattr(bag, "_cell_groups", None)
    if groups is None:
        groups, _ = assign_cells_to_patches(bag)
        bag._cell_groups = groups
    return groups


def _forward(bag, params, config):
    cache = {"pools": []}
    if config.mode is Mode.ATTMIL_BASELINE:
        h = bag.patch_emb
    else:
        if bag.n_cells and bag.d_cell != params.d_cell:
            raise InputValidationError(f"{bag.slide_id}: cell dim {bag.d_cell} != d_cell {params.d_cell}")
        pooled = np.empty((bag.n_patches, params.d_cell))
        for i, idx in enumerate(_cell_groups(bag)):
            pc = {}
            pooled[i] = spatial_attention_pool(
                bag.cell_emb[idx] if idx else np.zeros((0, params.d_cell)),
                bag.centroids[idx] if idx else np.zeros((0, 2)),
                params,
                config.cls_position,
                _cache=pc,
            )
            cache["pools"].append(pc)
        outer = (bag.patch_emb[:, :, None] * pooled[:, None, :]).reshape(bag.n_patches, -1)
        h = outer @ params.W_fuse.T
        cache.update(pooled=pooled, outer=outer)
    mil = {}
    z, a = attmil_aggregate(h, params, bag.grid, config.pos_enc, _cache=mil)
    logit = float(params.head_w @ z + params.head_b)
    p = float(sigmoid(logit))
    cache.update(mil=mil, logit=logit, p=p)
    return p, a, cache


def forward(bag, params, mode=Mode.PANSUBNET, config=None):
    """Probability of BASAL for one bag and the per-patch MIL attention weights."""
    config = config or ModelConfig(mode=mode)
    p, a, _ = _forward(bag, params, config)
    return p, a


def bce_loss(p, y, eps=BCE_EPS):
    p = min(max(float(p), eps), 1.0 - eps)
    return -(y * np.log(p) + (1 - y) * np.log(1.0 - p))


_LOGIT_EPS = float(np.log(BCE_EPS) - np.log1p(-BCE_EPS))


def _bce_from_logit(logit, y):
    """``bce_loss(sigmoid(logit), y)`` without cancellation near p = 0 or 1."""
    z = min(max(logit, _LOGIT_EPS), -_LOGIT_EPS)
    # -log(sigmoid(z)) = log1p(exp(-z)), written stably for both signs
    signed = -z if y == 1 else z
    return max(signed, 0.0) + np.log1p(np.exp(-abs(signed)))


def backward(bag, params, y, mode=Mode.PANSUBNET, config=None, out=None):
    """Exact gradients of ``bce_loss(forward(bag), y)`` for every parameter.

    Returns ``(loss, grads)`` with ``grads`` a :class:`ModelParams`; parameters
    unused by the mode get zero gradients. Passing a preallocated ``out``
    writes the gradients there instead, avoiding a fresh fusion-sized buffer
    per call.
    """
    config = config or ModelConfig(mode=mode)
    p, _, cache = _forward(bag, params, config)
    logit = cache["logit"]
    loss = _bce_from_logit(logit, y)
    g = {}

    # clamped region of the loss is flat
    dlogit = p - y if _LOGIT_EPS <= logit <= -_LOGIT_EPS else 0.0
    mil = cache["mil"]
    h, gate_t, gate_s, a, z = (mil[k] for k in ("h", "gate_t", "gate_s", "a", "z"))
    g["head_b"] = np.array(dlogit)
    g["head_w"] = dlogit * z
    dz = dlogit * params.head_w

    dh = np.outer(a, dz)
    da = h @ dz
    ds = a * (da - a @ da)
    g["attn_w"] = ds @ (gate_t * gate_s)
    dgated = np.outer(ds, params.attn_w)
    dpre_t = dgated * gate_s * (1.0 - gate_t**2)
    dpre_s = dgated * gate_t * gate_s * (1.0 - gate_s)
    g["attn_V"] = dpre_t.T @ h
    g["attn_U"] = dpre_s.T @ h
    dh += dpre_t @ params.attn_V + dpre_s @ params.attn_U

    d = params.d_cell
    cell = {
        "cls_token": np.zeros(d),
        "W_q": np.zeros((d, d)),
        "W_k": np.zeros((d, d)),
        "W_v": np.zeros((d, d)),
        "lambda_dist": np.zeros(()),
    }
    if config.mode is Mode.PANSUBNET:
        # positional encoding is additive, so dh passes through unchanged
        g["W_fuse"] = np.matmul(dh.T, cache["outer"], out=None if out is None else out.W_fuse)
        douter = (dh @ params.W_fuse).reshape(bag.n_patches, params.d_patch, d)
        dpooled = np.einsum("kpd,kp->kd", douter, bag.patch_emb)
        for i, pc in enumerate(cache["pools"]):
            _pool_backward(dpooled[i], pc, params, cell)
    elif out is None:
        g["W_fuse"] = np.zeros_like(params.W_fuse)
    else:
        out.W_fuse[...] = 0.0
        g["W_fuse"] = out.W_fuse
    g.update(cell)
    if out is None:
        return loss, type(params)(**g)
    for name, arr in g.items():
        if name != "W_fuse":
            getattr(out, name)[...] = arr
    return loss, out


def export_attention(bag, params, mode=Mode.PANSUBNET, config=None):
    """Per-patch rows ``(gx, gy, weight, mask_value)`` with weights min-max scaled to 0..255."""
    _, w = forward(bag, params, mode, config)
    return [
        (int(gx), int(gy), float(wi), int(m))
        for (gx, gy), wi, m in zip(bag.grid, w, attention_mask_values(w))
    ]


def attention_mask_values(weights):
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = w.min(), w.max()
    if hi == lo:
        return np.full(w.shape, 255, dtype=np.int64)
    return np.round(255.0 * (w - lo) / (hi - lo)).astype(np.int64)
