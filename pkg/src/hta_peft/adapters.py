"""Adaptation mechanisms attachable to a frozen linear projection.

Row-vector convention throughout: a linear layer maps ``x (..., D_in)`` to
``x @ W + b`` with ``W`` of shape ``(D_in, D_out)``.

Kinds
-----
hta
    ``(I - v_l v_l^T) diag(d) (I - v_r v_r^T)`` plus an optional rank-r
    ``w_down @ w_up`` addend.
lora
    ``w_down @ w_up``.
bottleneck
    ``act(out @ w_down) @ w_up`` applied to a module output.
full
    A dense trainable delta (full fine-tuning of the attachment site).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Union

import numpy as np

from .linalg import (
    ShapeError,
    SvdResult,
    apply_householder_right,
    jacobi_svd,
    project_to_reflector,
)

INIT_STD = 0.02
_GELU_C = np.sqrt(2.0 / np.pi)

ADDITIVE_POSITIONS = ("q", "k", "v", "o")
MULTIPLICATIVE_POSITIONS = ("post_mha", "post_ffn", "fc1", "fc2")
POSITIONS = ADDITIVE_POSITIONS + MULTIPLICATIVE_POSITIONS
KINDS = ("hta", "lora", "bottleneck", "full", "none")
ACTIVATIONS = ("gelu", "relu", "identity")

# fixed per-slot RNG keys so that equally named factors of different kinds
# (e.g. the w_down of HTA r=1 and of LoRA r=1) get identical draws
_SLOTS = {"v_left": 0, "v_right": 1, "w_down": 2, "w_up": 3, "d": 4, "delta": 5}


class ConfigError(ValueError):
    """Invalid adapter or attachment configuration."""


class UnsupportedMergeError(ValueError):
    """The adapter cannot be folded into the frozen weight."""


def _gauss(key: tuple, slot: str, shape) -> np.ndarray:
    rng = np.random.default_rng([*key, _SLOTS[slot]])
    return rng.normal(0.0, INIT_STD, size=shape)


def gelu_and_tanh(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """tanh-approximated GELU and the tanh term (reused by the backward pass)."""
    t = x * x
    t *= 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5
    return y, t


def gelu(x: np.ndarray) -> np.ndarray:
    return gelu_and_tanh(x)[0]


def activate(x: np.ndarray, name: str) -> np.ndarray:
    if name == "gelu":
        return gelu(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "identity":
        return x
    raise ConfigError(f"unknown activation {name!r}")


# --------------------------------------------------------------------------
# parameter bundles
# --------------------------------------------------------------------------


@dataclass
class HtaAdapter:
    v_left: np.ndarray
    v_right: np.ndarray
    d: np.ndarray
    w_down: Optional[np.ndarray] = None
    w_up: Optional[np.ndarray] = None
    normalize_v: bool = False

    def __post_init__(self):
        dim = self.d.shape[0]
        if self.v_left.shape != (dim,) or self.v_right.shape != (dim,) or self.d.ndim != 1:
            raise ShapeError("v_left, v_right and d must be vectors of equal length")
        if (self.w_down is None) != (self.w_up is None):
            raise ConfigError("w_down and w_up must be given together")
        if self.w_down is not None:
            r = self.w_down.shape[1]
            if r == 0:
                self.w_down = self.w_up = None
            elif self.w_down.shape != (dim, r) or self.w_up.shape != (r, dim):
                raise ShapeError(
                    f"low-rank factors must be ({dim}, r) and (r, {dim}), "
                    f"got {self.w_down.shape} and {self.w_up.shape}"
                )

    kind = "hta"

    @property
    def dim(self) -> int:
        return self.d.shape[0]

    @property
    def rank_r(self) -> int:
        return 0 if self.w_down is None else self.w_down.shape[1]

    @classmethod
    def init(cls, dim: int, r: int = 1, key: tuple = (0,), normalize_v: bool = False) -> "HtaAdapter":
        """Zero adaptation at step 0: ``d = 0`` and ``w_up = 0``; ``v`` and ``w_down`` random."""
        a = cls(
            v_left=_gauss(key, "v_left", dim),
            v_right=_gauss(key, "v_right", dim),
            d=np.zeros(dim),
            w_down=_gauss(key, "w_down", (dim, r)) if r > 0 else None,
            w_up=np.zeros((r, dim)) if r > 0 else None,
            normalize_v=normalize_v,
        )
        if normalize_v:
            a.renormalize()
        return a

    def params(self) -> dict[str, np.ndarray]:
        out = {"v_left": self.v_left, "v_right": self.v_right, "d": self.d}
        if self.w_down is not None:
            out["w_down"] = self.w_down
            out["w_up"] = self.w_up
        return out

    def renormalize(self) -> None:
        """Rescale both reflector vectors in place to ``||v||^2 == 2``."""
        self.v_left[...] = project_to_reflector(self.v_left)
        self.v_right[...] = project_to_reflector(self.v_right)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """``x @ adaptation_matrix`` via the factored form."""
        if x.shape[-1] != self.dim:
            raise ShapeError(f"input last axis {x.shape[-1]} != adapter dim {self.dim}")
        y = apply_householder_right(apply_householder_right(x, self.v_left) * self.d, self.v_right)
        if self.w_down is not None:
            y = y + (x @ self.w_down) @ self.w_up
        return y


@dataclass
class LoraAdapter:
    w_down: np.ndarray
    w_up: np.ndarray

    kind = "lora"

    def __post_init__(self):
        if self.w_down.ndim != 2 or self.w_up.ndim != 2 or self.w_down.shape[1] != self.w_up.shape[0]:
            raise ShapeError(f"incompatible LoRA factors {self.w_down.shape} @ {self.w_up.shape}")
        if self.w_down.shape[1] < 1:
            raise ConfigError("LoRA rank must be >= 1")

    @property
    def rank_r(self) -> int:
        return self.w_down.shape[1]

    @classmethod
    def init(cls, d_in: int, d_out: int, r: int, key: tuple = (0,)) -> "LoraAdapter":
        return cls(w_down=_gauss(key, "w_down", (d_in, r)), w_up=np.zeros((r, d_out)))

    def params(self) -> dict[str, np.ndarray]:
        return {"w_down": self.w_down, "w_up": self.w_up}

    def apply(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.w_down.shape[0]:
            raise ShapeError(f"input last axis {x.shape[-1]} != {self.w_down.shape[0]}")
        return (x @ self.w_down) @ self.w_up


@dataclass
class BottleneckAdapter:
    w_down: np.ndarray
    w_up: np.ndarray
    activation: str = "gelu"

    kind = "bottleneck"

    def __post_init__(self):
        dim, r = self.w_down.shape
        if self.w_up.shape != (r, dim):
            raise ShapeError(f"bottleneck factors must be (D, r) and (r, D), got {self.w_down.shape}, {self.w_up.shape}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def dim(self) -> int:
        return self.w_down.shape[0]

    @property
    def rank_r(self) -> int:
        return self.w_down.shape[1]

    @classmethod
    def init(cls, dim: int, r: int, key: tuple = (0,), activation: str = "gelu") -> "BottleneckAdapter":
        return cls(_gauss(key, "w_down", (dim, r)), np.zeros((r, dim)), activation)

    def params(self) -> dict[str, np.ndarray]:
        return {"w_down": self.w_down, "w_up": self.w_up}

    def apply(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"input last axis {x.shape[-1]} != adapter dim {self.dim}")
        return activate(x @ self.w_down, self.activation) @ self.w_up


@dataclass
class FullDelta:
    """Dense trainable update of an attachment site, initialised to zero."""

    delta: np.ndarray

    kind = "full"
    rank_r = 0

    @classmethod
    def init(cls, d_in: int, d_out: int) -> "FullDelta":
        return cls(np.zeros((d_in, d_out)))

    def params(self) -> dict[str, np.ndarray]:
        return {"delta": self.delta}

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.delta


Adapter = Union[HtaAdapter, LoraAdapter, BottleneckAdapter, FullDelta]


# --------------------------------------------------------------------------
# adaptation matrices
# --------------------------------------------------------------------------


def compose_hta(a: HtaAdapter) -> np.ndarray:
    """Dense ``H_left diag(d) H_right`` built from rank-1 updates in O(D^2)."""
    m = np.diag(a.d) - np.outer(a.d * a.v_right, a.v_right)  # diag(d) H_right
    return m - np.outer(a.v_left, a.v_left @ m)  # H_left (...)


def hta_full_adaptation(a: HtaAdapter) -> np.ndarray:
    w = compose_hta(a)
    if a.w_down is not None:
        w = w + a.w_down @ a.w_up
    return w


def adaptation_matrix(a: Adapter) -> np.ndarray:
    """Dense matrix ``A`` such that the adapter contribution is ``x @ A``."""
    if isinstance(a, HtaAdapter):
        return hta_full_adaptation(a)
    if isinstance(a, LoraAdapter):
        return a.w_down @ a.w_up
    if isinstance(a, FullDelta):
        return a.delta.copy()
    if isinstance(a, BottleneckAdapter):
        if a.activation != "identity":
            raise UnsupportedMergeError(f"bottleneck with {a.activation} activation is not linear")
        return a.w_down @ a.w_up
    raise TypeError(f"not an adapter: {type(a).__name__}")


def adaptation_spectrum(a: Adapter) -> SvdResult:
    return jacobi_svd(adaptation_matrix(a))


def forward_adapter_style(module_out: np.ndarray, a: Union[HtaAdapter, BottleneckAdapter]) -> np.ndarray:
    """Contribution of a post-module adapter: ``out @ A`` for HTA, ``act(out @ W_down) @ W_up`` for a bottleneck."""
    return a.apply(np.asarray(module_out, dtype=np.float64))


# --------------------------------------------------------------------------
# adapted linear layer
# --------------------------------------------------------------------------


@dataclass
class AdaptedLinear:
    """A frozen affine map with an optional adapter.

    ``style="lora_additive"``:          ``y = x W + b + x A``
    ``style="adapter_multiplicative"``: ``y = z + z A`` with ``z = x W + b``,
    or ``y = z A`` when ``eq7_literal`` is set (no residual path).
    """

    base_w: np.ndarray
    base_b: np.ndarray
    adapter: Optional[Adapter] = None
    style: str = "lora_additive"
    eq7_literal: bool = False
    mode: str = "branched"
    merged_w: Optional[np.ndarray] = None
    merged_b: Optional[np.ndarray] = None

    def __post_init__(self):
        d_in, d_out = self.base_w.shape
        if self.base_b.shape != (d_out,):
            raise ShapeError(f"bias shape {self.base_b.shape} does not match weight {self.base_w.shape}")
        if self.style not in ("lora_additive", "adapter_multiplicative"):
            raise ConfigError(f"unknown style {self.style!r}")
        a = self.adapter
        if isinstance(a, BottleneckAdapter) and self.style != "adapter_multiplicative":
            raise ConfigError("bottleneck adapters attach only to module outputs")
        if isinstance(a, HtaAdapter):
            need = d_out if self.style == "adapter_multiplicative" else d_in
            if self.style == "lora_additive" and d_in != d_out:
                raise ConfigError("additive HTA needs a square frozen weight")
            if a.dim != need:
                raise ShapeError(f"HTA dim {a.dim} does not match layer ({d_in}, {d_out})")

    @property
    def d_in(self) -> int:
        return self.base_w.shape[0]

    @property
    def d_out(self) -> int:
        return self.base_w.shape[1]


def forward_branched(layer: AdaptedLinear, x: np.ndarray, dropout_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Adapted forward keeping the adapter as a separate low-cost branch."""
    if layer.mode != "branched":
        raise ConfigError("forward_branched called on a merged layer")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.d_in:
        raise ShapeError(f"input last axis {x.shape[-1]} != layer input dim {layer.d_in}")
    z = x @ layer.base_w + layer.base_b
    a = layer.adapter
    if a is None:
        return z
    branch = a.apply(x if layer.style == "lora_additive" else z)
    if dropout_mask is not None:
        branch = branch * dropout_mask
    if layer.style == "adapter_multiplicative" and layer.eq7_literal:
        return branch
    return z + branch


def forward_merged(layer: AdaptedLinear, x: np.ndarray) -> np.ndarray:
    if layer.mode != "merged":
        raise ConfigError("layer is not merged")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.d_in:
        raise ShapeError(f"input last axis {x.shape[-1]} != layer input dim {layer.d_in}")
    return x @ layer.merged_w + layer.merged_b


def forward(layer: AdaptedLinear, x: np.ndarray) -> np.ndarray:
    if layer.mode == "merged":
        return forward_merged(layer, x)
    return forward_branched(layer, x)


def merge(layer: AdaptedLinear) -> AdaptedLinear:
    """Fold the adapter into the frozen weights; the result runs a single affine map."""
    a = layer.adapter
    if a is None:
        raise UnsupportedMergeError("nothing to merge: layer has no adapter")
    if isinstance(a, HtaAdapter) and layer.style == "lora_additive" and layer.d_in != layer.d_out:
        raise UnsupportedMergeError("additive HTA merge needs a square frozen weight")
    adapt = adaptation_matrix(a)
    w, b = layer.base_w, layer.base_b
    if layer.style == "lora_additive":
        mw, mb = w + adapt, b.copy()
    elif layer.eq7_literal:
        mw, mb = w @ adapt, b @ adapt
    else:
        mw, mb = w + w @ adapt, b + b @ adapt
    return replace(layer, mode="merged", merged_w=mw, merged_b=mb)


# --------------------------------------------------------------------------
# attachment configuration and parameter accounting
# --------------------------------------------------------------------------


def style_for(position: str) -> str:
    if position in ADDITIVE_POSITIONS:
        return "lora_additive"
    if position in MULTIPLICATIVE_POSITIONS:
        return "adapter_multiplicative"
    raise ConfigError(f"unknown position {position!r}; expected one of {POSITIONS}")


@dataclass(frozen=True)
class AttachmentConfig:
    """Which sites get which adapter.

    ``style`` is inferred per position when left as ``None``: ``q, k, v, o``
    are additive, ``post_mha, post_ffn, fc1, fc2`` multiplicative on the
    output side.
    """

    positions: tuple = ()
    kind: str = "hta"
    r: int = 1
    style: Optional[str] = None
    eq7_literal: bool = False
    normalize_v: bool = False
    activation: str = "gelu"
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(self.positions))
        if self.kind not in KINDS:
            raise ConfigError(f"unknown adapter kind {self.kind!r}")
        if self.r < 0:
            raise ConfigError("r must be >= 0")
        if self.kind in ("lora", "bottleneck") and self.r < 1:
            raise ConfigError(f"{self.kind} needs r >= 1")
        if len(set(self.positions)) != len(self.positions):
            raise ConfigError(f"duplicate positions in {self.positions}")
        if {"post_ffn", "fc2"} <= set(self.positions):
            raise ConfigError("post_ffn and fc2 name the same output-side site")
        for p in self.positions:
            inferred = style_for(p)
            if self.style is not None and self.style != inferred:
                raise ConfigError(f"style {self.style!r} is not allowed on position {p!r}")
            if self.kind in ("lora", "full") and inferred != "lora_additive":
                raise ConfigError(f"{self.kind} attaches only to {ADDITIVE_POSITIONS}")
            if self.kind == "bottleneck" and inferred != "adapter_multiplicative":
                raise ConfigError(f"bottleneck attaches only to {MULTIPLICATIVE_POSITIONS}")
        if self.kind == "none" and self.positions:
            raise ConfigError("kind 'none' takes no positions")
        if not self.name:
            object.__setattr__(self, "name", self.default_name())

    def default_name(self) -> str:
        if self.kind == "none" or not self.positions:
            return "linear_probe"
        return f"{self.kind}_r{self.r}_" + "-".join(self.positions)

    def to_dict(self) -> dict:
        return {
            "positions": list(self.positions),
            "kind": self.kind,
            "r": self.r,
            "style": self.style,
            "eq7_literal": self.eq7_literal,
            "normalize_v": self.normalize_v,
            "activation": self.activation,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AttachmentConfig":
        return cls(**{**d, "positions": tuple(d.get("positions", ()))})


def position_dim(position: str, dim: int, mlp_ratio: float = 4.0) -> int:
    """Width of the adapted space at a site: the fc1 output is the FFN hidden width."""
    return int(round(mlp_ratio * dim)) if position == "fc1" else dim


def adapter_param_count(kind: str, dim: int, r: int) -> int:
    """Trainable parameters of one adapter on a ``dim``-wide (square) site."""
    if kind == "hta":
        return 3 * dim + 2 * dim * r
    if kind in ("lora", "bottleneck"):
        return 2 * dim * r
    if kind == "full":
        return dim * dim
    if kind == "none":
        return 0
    raise ConfigError(f"unknown adapter kind {kind!r}")


def param_count(
    config: AttachmentConfig,
    dim: int,
    depth: int,
    mlp_ratio: float = 4.0,
    head_classes: Optional[int] = None,
    position_dims: Optional[Mapping[str, int]] = None,
) -> int:
    """Exact trainable-parameter count for an attachment over ``depth`` blocks.

    ``position_dims`` overrides the per-site width; ``head_classes`` adds a
    ``dim -> classes`` affine head.
    """
    dims = dict(position_dims or {})
    per_block = sum(
        adapter_param_count(config.kind, dims.get(p, position_dim(p, dim, mlp_ratio)), config.r)
        for p in config.positions
    )
    total = per_block * depth
    if head_classes is not None:
        total += head_classes * dim + head_classes
    return total


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_VERSION = 1
_MAGIC = b"HTAC"
_KIND_CODES = {"hta": 1, "lora": 2, "bottleneck": 3, "full": 4}
# binary layout (little endian): magic, u32 version, u32 kind, u32 dim_in,
# u32 dim_out, u32 r, then float64 arrays in FIELD_ORDER, each row-major
FIELD_ORDER = ("v_left", "v_right", "d", "w_down", "w_up", "delta")
_HEADER = struct.Struct("<4s5I")


def _dims(a: Adapter) -> tuple[int, int]:
    if isinstance(a, HtaAdapter):
        return a.dim, a.dim
    if isinstance(a, FullDelta):
        return a.delta.shape
    return a.w_down.shape[0], a.w_up.shape[1]


def adapter_to_dict(a: Adapter) -> dict:
    d_in, d_out = _dims(a)
    out = {"version": CHECKPOINT_VERSION, "kind": a.kind, "dim": d_in, "dim_out": d_out, "r": a.rank_r}
    params = a.params()
    for name in FIELD_ORDER:
        if name in params:
            out[name] = params[name].tolist()
    if isinstance(a, HtaAdapter):
        out["normalize_v"] = a.normalize_v
    if isinstance(a, BottleneckAdapter):
        out["activation"] = a.activation
    return out


def adapter_from_dict(d: Mapping) -> Adapter:
    if d.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {d.get('version')!r}")
    kind, dim, dim_out, r = d["kind"], d["dim"], d.get("dim_out", d["dim"]), d["r"]
    arr = lambda name, shape: np.array(d[name], dtype=np.float64).reshape(shape)  # noqa: E731
    if kind == "hta":
        low = r > 0
        return HtaAdapter(
            arr("v_left", dim), arr("v_right", dim), arr("d", dim),
            arr("w_down", (dim, r)) if low else None,
            arr("w_up", (r, dim)) if low else None,
            normalize_v=bool(d.get("normalize_v", False)),
        )
    if kind == "lora":
        return LoraAdapter(arr("w_down", (dim, r)), arr("w_up", (r, dim_out)))
    if kind == "bottleneck":
        return BottleneckAdapter(arr("w_down", (dim, r)), arr("w_up", (r, dim)), d.get("activation", "gelu"))
    if kind == "full":
        return FullDelta(arr("delta", (dim, dim_out)))
    raise ConfigError(f"unknown adapter kind {kind!r}")


def adapter_to_json(a: Adapter) -> str:
    return json.dumps(adapter_to_dict(a))


def adapter_from_json(text: str) -> Adapter:
    return adapter_from_dict(json.loads(text))


def adapter_to_bytes(a: Adapter) -> bytes:
    """Byte-stable binary checkpoint (flags such as ``normalize_v`` are not stored)."""
    if isinstance(a, BottleneckAdapter):
        raise ConfigError("binary checkpoints do not carry the bottleneck activation; use JSON")
    d_in, d_out = _dims(a)
    chunks = [_HEADER.pack(_MAGIC, CHECKPOINT_VERSION, _KIND_CODES[a.kind], d_in, d_out, a.rank_r)]
    params = a.params()
    for name in FIELD_ORDER:
        if name in params:
            chunks.append(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return b"".join(chunks)


def adapter_from_bytes(blob: bytes) -> Adapter:
    magic, version, code, d_in, d_out, r = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC or version != CHECKPOINT_VERSION:
        raise ConfigError("not an adapter checkpoint or unsupported version")
    kind = {v: k for k, v in _KIND_CODES.items()}[code]
    shapes = {
        "hta": [("v_left", (d_in,)), ("v_right", (d_in,)), ("d", (d_in,))]
        + ([("w_down", (d_in, r)), ("w_up", (r, d_in))] if r else []),
        "lora": [("w_down", (d_in, r)), ("w_up", (r, d_out))],
        "full": [("delta", (d_in, d_out))],
    }[kind]
    offset = _HEADER.size
    fields: dict = {"version": version, "kind": kind, "dim": d_in, "dim_out": d_out, "r": r}
    for name, shape in shapes:
        n = int(np.prod(shape))
        fields[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
    if offset != len(blob):
        raise ConfigError(f"trailing bytes in checkpoint ({len(blob) - offset})")
    return adapter_from_dict(fields)
