"""Model parameters, initialization and the binary checkpoint format."""

import hashlib
import json
import struct
from dataclasses import dataclass, fields

import numpy as np

from ..exceptions import DataIOError, InputValidationError

CHECKPOINT_MAGIC = b"PDSUBCK\x00"
CHECKPOINT_VERSION = 1

# cell branch: cls_token, W_q, W_k, W_v, lambda_dist, W_fuse
CELL_BRANCH = ("cls_token", "W_q", "W_k", "W_v", "lambda_dist", "W_fuse")


@dataclass
class ModelParams:
    cls_token: np.ndarray  # (d_cell,)
    W_q: np.ndarray  # (d_cell, d_cell)
    W_k: np.ndarray
    W_v: np.ndarray
    lambda_dist: np.ndarray  # 0-d
    W_fuse: np.ndarray  # (P, P * d_cell), columns ordered patch-index major
    attn_V: np.ndarray  # (d_att, P)
    attn_U: np.ndarray  # (d_att, P)
    attn_w: np.ndarray  # (d_att,)
    head_w: np.ndarray  # (P,)
    head_b: np.ndarray  # 0-d

    @classmethod
    def names(cls):
        return tuple(f.name for f in fields(cls))

    def items(self):
        return ((n, getattr(self, n)) for n in self.names())

    @property
    def d_cell(self):
        return self.cls_token.shape[0]

    @property
    def d_patch(self):
        return self.head_w.shape[0]

    @property
    def d_att(self):
        return self.attn_w.shape[0]

    def copy(self):
        return ModelParams(**{n: np.array(a, dtype=np.float64, copy=True) for n, a in self.items()})

    def zeros_like(self):
        return ModelParams(**{n: np.zeros_like(a) for n, a in self.items()})

    def map(self, fn):
        return ModelParams(**{n: fn(a) for n, a in self.items()})

    def freeze(self):
        for _, a in self.items():
            a.setflags(write=False)
        return self

    def validate(self):
        d, p, h = self.d_cell, self.d_patch, self.d_att
        expected = {
            "cls_token": (d,),
            "W_q": (d, d),
            "W_k": (d, d),
            "W_v": (d, d),
            "lambda_dist": (),
            "W_fuse": (p, p * d),
            "attn_V": (h, p),
            "attn_U": (h, p),
            "attn_w": (h,),
            "head_w": (p,),
            "head_b": (),
        }
        for name, arr in self.items():
            if arr.shape != expected[name]:
                raise InputValidationError(f"{name}: shape {arr.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise InputValidationError(f"{name}: non-finite values")
        if self.lambda_dist < 0:
            raise InputValidationError("lambda_dist must be >= 0")
        return self


def _glorot(rng, shape):
    fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (1, shape[0])
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_params(d_patch=768, d_cell=32, d_att=128, seed=0, lambda_dist=1.0 / 512):
    """Glorot-uniform matrices, N(0, 0.02^2) CLS token, zero head bias."""
    rng = np.random.default_rng(seed)
    return ModelParams(
        cls_token=rng.normal(0.0, 0.02, size=d_cell),
        W_q=_glorot(rng, (d_cell, d_cell)),
        W_k=_glorot(rng, (d_cell, d_cell)),
        W_v=_glorot(rng, (d_cell, d_cell)),
        lambda_dist=np.array(float(lambda_dist)),
        W_fuse=_glorot(rng, (d_patch, d_patch * d_cell)),
        attn_V=_glorot(rng, (d_att, d_patch)),
        attn_U=_glorot(rng, (d_att, d_patch)),
        attn_w=_glorot(rng, (d_att,)),
        head_w=_glorot(rng, (d_patch,)),
        head_b=np.array(0.0),
    )


def checkpoint_bytes(params, meta):
    """Serialize to: magic, u32 version, u32 header length, JSON header, LE float32 payload."""
    header = dict(meta)
    header["dims"] = {"d_patch": params.d_patch, "d_cell": params.d_cell, "d_att": params.d_att}
    header["arrays"] = [[n, list(a.shape)] for n, a in params.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in params.items())
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blob)) + blob + payload


def save_checkpoint(path, params, meta):
    data = checkpoint_bytes(params, meta)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path):
    """Return ``(params, header)``; parameters are widened back to float64."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != CHECKPOINT_MAGIC:
        raise InputValidationError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise InputValidationError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputValidationError(f"{path}: corrupt header") from exc
    offset = 16 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape, dtype=np.int64))
        if offset + 4 * n > len(data):
            raise InputValidationError(f"{path}: truncated payload")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).astype(np.float64)
        arrays[name] = arr.reshape(shape)
        offset += 4 * n
    if offset != len(data):
        raise InputValidationError(f"{path}: trailing or truncated payload")
    missing = set(ModelParams.names()) - set(arrays)
    if missing:
        raise InputValidationError(f"{path}: missing arrays {sorted(missing)}")
    return ModelParams(**{n: arrays[n] for n in ModelParams.names()}).validate(), header
