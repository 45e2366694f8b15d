"""Learnable parameters and initial node embeddings.

Users and outfits get ID embedding tables.  Items are embedded by fusing
pre-extracted visual and textual feature vectors: a two-layer map reduces
the visual vector to d/2 dimensions, an affine map reduces the textual
vector to d/2, and a final affine layer projects the concatenation to the
shared d-dimensional space.

Checkpoint format: magic ``FGATCKPT``, u32 version, u32 section count,
then per section a u32 name length, utf-8 name, u32 ndim, ndim x u32 dims,
and a row-major little-endian f32 payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import substream

CHECKPOINT_MAGIC = b"FGATCKPT"
CHECKPOINT_VERSION = 1

LEVELS = ("item_item", "item_outfit", "outfit_user")


@dataclass(frozen=True)
class ModelDims:
    d: int = 64  # shared embedding dimension (even; halves hold each modality)
    d_v: int = 2048
    d_t: int = 768
    d_h: int = 256  # hidden width of the visual reducer
    heads: int = 4
    r_views: int = 6
    view_hidden: int = 32
    leaky_slope: float = 0.2
    per_category_visual: bool = False  # optional per-category affine on the visual half
    uniform_attention: bool = False  # debug: constant 1/|N| attention (no softmax)
    linear_compat: bool = False  # debug: drop the tanh in the compatibility map

    @property
    def half(self) -> int:
        return self.d // 2


class ModelState:
    """All learnable parameters with gradient slots and a flat view."""

    def __init__(
        self,
        n_users: int,
        n_outfits: int,
        n_categories: int,
        dims: ModelDims,
        dtype=np.float64,
    ):
        if min(n_users, n_outfits, n_categories) <= 0:
            raise ValueError("counts must be positive")
        if dims.d % 2 != 0 or dims.d <= 0:
            raise ValueError("embedding dimension must be a positive even number")
        self.n_users = n_users
        self.n_outfits = n_outfits
        self.n_categories = n_categories
        self.dims = dims
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}

    def _add(self, name: str, array: np.ndarray):
        self.params[name] = Tensor(np.ascontiguousarray(array, dtype=self.dtype), requires_grad=True)

    def parameters(self):
        return self.params.items()

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    @property
    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def set_flat_parameters(self, flat: np.ndarray):
        if flat.size != self.n_parameters:
            raise ValueError(f"flat vector has {flat.size} entries, model has {self.n_parameters}")
        offset = 0
        for p in self.params.values():
            n = p.data.size
            p.data = flat[offset : offset + n].reshape(p.data.shape).astype(self.dtype)
            offset += n

    def flat_gradients(self) -> np.ndarray:
        chunks = []
        for p in self.params.values():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            chunks.append(np.asarray(g).ravel())
        return np.concatenate(chunks)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            if arrays[name].shape != p.data.shape:
                raise ValueError(
                    f"parameter {name!r}: checkpoint shape {arrays[name].shape} "
                    f"!= model shape {p.data.shape}"
                )
            p.data = np.ascontiguousarray(arrays[name], dtype=self.dtype)


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def init_model(
    n_users: int,
    n_outfits: int,
    n_categories: int,
    dims: ModelDims,
    seed: int,
    dtype=np.float64,
) -> ModelState:
    """Create a ModelState with uniform(+-sqrt(6/(fan_in+fan_out))) affine
    weights, zero biases, and N(0, 0.01) ID tables.  Each parameter draws
    from its own named substream, so the layout of one never shifts
    another."""
    m = ModelState(n_users, n_outfits, n_categories, dims, dtype=dtype)
    d, half, d_h = dims.d, dims.half, dims.d_h

    def rng_for(name):
        return substream(seed, "init", name)

    m._add("user_table", rng_for("user_table").normal(0.0, 0.01, size=(n_users, d)))
    m._add("outfit_table", rng_for("outfit_table").normal(0.0, 0.01, size=(n_outfits, d)))

    m._add("visual_w1", _glorot(rng_for("visual_w1"), (d_h, dims.d_v), dims.d_v, d_h))
    m._add("visual_b1", np.zeros(d_h))
    m._add("visual_w2", _glorot(rng_for("visual_w2"), (half, d_h), d_h, half))
    m._add("visual_b2", np.zeros(half))
    if dims.per_category_visual:
        m._add(
            "visual_cat_w",
            _glorot(rng_for("visual_cat_w"), (n_categories, half, half), half, half),
        )
        m._add("visual_cat_b", np.zeros((n_categories, half)))
    m._add("textual_w", _glorot(rng_for("textual_w"), (half, dims.d_t), dims.d_t, half))
    m._add("textual_b", np.zeros(half))
    m._add("fusion_w", _glorot(rng_for("fusion_w"), (d, 2 * half), 2 * half, d))
    m._add("fusion_b", np.zeros(d))

    for level in LEVELS:
        m._add(
            f"attn_w_{level}",
            _glorot(rng_for(f"attn_w_{level}"), (dims.heads, d, d), d, d),
        )
        m._add(
            f"attn_a_{level}",
            _glorot(rng_for(f"attn_a_{level}"), (dims.heads, 2 * d), 2 * d, 1),
        )
        m._add(f"msg_w_{level}", _glorot(rng_for(f"msg_w_{level}"), (d, d), d, d))

    R, v = dims.r_views, dims.view_hidden
    m._add("view_attn_in", _glorot(rng_for("view_attn_in"), (v, d), d, v))
    m._add("view_attn_out", _glorot(rng_for("view_attn_out"), (R, v), v, R))
    m._add("view_compat_in", _glorot(rng_for("view_compat_in"), (v, d), d, v))
    m._add("view_compat_out", _glorot(rng_for("view_compat_out"), (R, v), v, R))
    return m


# ---------------------------------------------------------------------------
# item fusion


@dataclass(frozen=True)
class ItemEmbedding:
    reduced_visual: np.ndarray  # (d/2,)
    reduced_textual: np.ndarray  # (d/2,)
    fused: np.ndarray  # (d,), the item's initial embedding


def fuse_items_tensor(m: ModelState, X_v, X_t, categories=None) -> Tensor:
    """Fused embeddings for a batch of items; differentiable.

    ``X_v``: (n, d_v), ``X_t``: (n, d_t); returns (n, d).
    """
    slope = m.dims.leaky_slope
    X_v = Tensor(np.ascontiguousarray(X_v, dtype=m.dtype))
    X_t = Tensor(np.ascontiguousarray(X_t, dtype=m.dtype))
    if X_v.shape[1] != m.dims.d_v or X_t.shape[1] != m.dims.d_t:
        raise ValueError(
            f"feature dims {X_v.shape[1]}/{X_t.shape[1]} do not match model "
            f"dims {m.dims.d_v}/{m.dims.d_t}"
        )
    hidden = ad.leaky_relu(
        ad.matmul(X_v, ad.transpose(m.params["visual_w1"], (1, 0))) + m.params["visual_b1"],
        slope,
    )
    e_v = ad.matmul(hidden, ad.transpose(m.params["visual_w2"], (1, 0))) + m.params["visual_b2"]
    if m.dims.per_category_visual:
        if categories is None:
            raise ValueError("per-category fusion needs item categories")
        W = ad.gather(m.params["visual_cat_w"], categories, axis=0)  # (n, half, half)
        b = ad.gather(m.params["visual_cat_b"], categories, axis=0)
        e_v = ad.reshape(ad.matmul(W, ad.reshape(e_v, (*e_v.shape, 1))), e_v.shape) + b
    e_t = ad.matmul(X_t, ad.transpose(m.params["textual_w"], (1, 0))) + m.params["textual_b"]
    both = ad.concat([e_v, e_t], axis=1)
    return ad.matmul(both, ad.transpose(m.params["fusion_w"], (1, 0))) + m.params["fusion_b"]


def fuse_item(x_v, x_t, m: ModelState, category: int | None = None) -> ItemEmbedding:
    """Fuse one item's visual/textual features into its initial embedding."""
    x_v = np.asarray(x_v, dtype=m.dtype)
    x_t = np.asarray(x_t, dtype=m.dtype)
    if x_v.shape != (m.dims.d_v,) or x_t.shape != (m.dims.d_t,):
        raise ValueError(
            f"feature dims {x_v.shape}/{x_t.shape} do not match model "
            f"dims ({m.dims.d_v},)/({m.dims.d_t},)"
        )
    cats = None if category is None else np.array([category])
    with ad.no_grad():
        slope = m.dims.leaky_slope
        hidden = ad.leaky_relu(
            ad.matmul(Tensor(x_v[None, :]), ad.transpose(m.params["visual_w1"], (1, 0)))
            + m.params["visual_b1"],
            slope,
        )
        e_v = (
            ad.matmul(hidden, ad.transpose(m.params["visual_w2"], (1, 0)))
            + m.params["visual_b2"]
        )
        if m.dims.per_category_visual:
            if cats is None:
                raise ValueError("per-category fusion needs the item category")
            W = ad.gather(m.params["visual_cat_w"], cats, axis=0)
            b = ad.gather(m.params["visual_cat_b"], cats, axis=0)
            e_v = ad.reshape(ad.matmul(W, ad.reshape(e_v, (*e_v.shape, 1))), e_v.shape) + b
        e_t = (
            ad.matmul(Tensor(x_t[None, :]), ad.transpose(m.params["textual_w"], (1, 0)))
            + m.params["textual_b"]
        )
        fused = (
            ad.matmul(ad.concat([e_v, e_t], axis=1), ad.transpose(m.params["fusion_w"], (1, 0)))
            + m.params["fusion_b"]
        )
    return ItemEmbedding(
        reduced_visual=e_v.data[0].copy(),
        reduced_textual=e_t.data[0].copy(),
        fused=fused.data[0].copy(),
    )


# ---------------------------------------------------------------------------
# checkpoints


def write_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays as f32 sections; insertion order is preserved."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_arrays(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:8]!r}")
    version, n_sections = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    offset = 16
    for _ in range(n_sections):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        out[name] = arr.copy()
        offset += 4 * count
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return out


def save_checkpoint(m: ModelState, path: str | Path, extra: dict[str, np.ndarray] | None = None):
    """Write model parameters (plus optional extra sections, e.g. optimizer
    state) to ``path``."""
    arrays = m.to_arrays()
    if extra:
        for name, arr in extra.items():
            arrays[name] = arr
    write_arrays(path, arrays)


def load_checkpoint(m: ModelState, path: str | Path) -> dict[str, np.ndarray]:
    """Load parameters into ``m``; returns any non-parameter extra sections."""
    arrays = read_arrays(path)
    m.load_arrays({k: v for k, v in arrays.items() if k in m.params})
    return {k: v for k, v in arrays.items() if k not in m.params}
