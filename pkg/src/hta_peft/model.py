"""A small pre-LN Vision-Transformer encoder acting as the frozen backbone.

Every block exposes the six projections ``q, k, v, o, fc1, fc2`` as
:class:`~hta_peft.adapters.AdaptedLinear` wrappers.  Output-side sites map
onto them as ``post_mha -> o`` and ``post_ffn -> fc2`` so that merging always
folds into an existing frozen weight.

Two forward paths exist on purpose: :func:`forward` is plain numpy (used for
evaluation and merged inference), :func:`forward_tape` records on an autodiff
tape for training.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from . import adapters as ad
from .adapters import AdaptedLinear, AttachmentConfig, ConfigError
from .autodiff import Node, Tape
from .linalg import ShapeError

SITES = ("q", "k", "v", "o", "fc1", "fc2")
_SITE_OF = {"q": "q", "k": "k", "v": "v", "o": "o", "post_mha": "o", "fc1": "fc1", "fc2": "fc2", "post_ffn": "fc2"}
LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    tokens: int = 17
    classes: int = 10
    adaptation: Optional[AttachmentConfig] = None
    positional: bool = False

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1 or self.tokens < 1 or self.classes < 1 or self.depth < 0:
            raise ConfigError("dim, heads, tokens and classes must be >= 1 and depth >= 0")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.hidden < 1:
            raise ConfigError("mlp_ratio gives an empty FFN")

    @property
    def hidden(self) -> int:
        return int(round(self.mlp_ratio * self.dim))

    def with_adaptation(self, attach: Optional[AttachmentConfig]) -> "ModelConfig":
        return replace(self, adaptation=attach)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adaptation"] = self.adaptation.to_dict() if self.adaptation else None
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        if d.get("adaptation") is not None:
            d["adaptation"] = AttachmentConfig.from_dict(d["adaptation"])
        return cls(**d)


@dataclass
class Block:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    layers: dict[str, AdaptedLinear]


@dataclass
class Backbone:
    config: ModelConfig
    embed_w: np.ndarray
    embed_b: np.ndarray
    cls_token: np.ndarray
    pos_embed: Optional[np.ndarray]
    blocks: list[Block]
    norm_g: np.ndarray
    norm_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    adapter_seed: int = 0
    sites: dict = field(default_factory=dict)  # adapted site -> attachment position


def _frozen_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0, *path])


def build_backbone(config: ModelConfig, seed: int, adapter_seed: Optional[int] = None) -> Backbone:
    """Deterministic synthetic backbone; adapters from ``config.adaptation`` are attached zero-initialised."""
    dim, hidden = config.dim, config.hidden
    rng = _frozen_rng(seed)

    def lin(d_in, d_out):
        w = rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)
        b = rng.normal(0.0, 0.02, d_out)
        return AdaptedLinear(w, b)

    embed = lin(dim, dim)
    cls_token = rng.normal(0.0, 0.02, dim)
    pos = rng.normal(0.0, 0.02, (config.tokens, dim)) if config.positional else None
    blocks = []
    for _ in range(config.depth):
        layers = {"q": lin(dim, dim), "k": lin(dim, dim), "v": lin(dim, dim), "o": lin(dim, dim),
                  "fc1": lin(dim, hidden), "fc2": lin(hidden, dim)}
        blocks.append(Block(np.ones(dim), np.zeros(dim), np.ones(dim), np.zeros(dim), layers))
    head = lin(dim, config.classes)
    b = Backbone(
        config=replace(config, adaptation=None),
        embed_w=embed.base_w,
        embed_b=embed.base_b,
        cls_token=cls_token,
        pos_embed=pos,
        blocks=blocks,
        norm_g=np.ones(dim),
        norm_b=np.zeros(dim),
        head_w=head.base_w,
        head_b=head.base_b,
    )
    if config.adaptation is not None:
        attach(b, config.adaptation, seed if adapter_seed is None else adapter_seed)
    return b


def attach(b: Backbone, attach_cfg: AttachmentConfig, adapter_seed: int) -> Backbone:
    """Attach freshly initialised adapters in place (replacing any existing ones)."""
    detach(b)
    b.config = replace(b.config, adaptation=attach_cfg)
    b.adapter_seed = adapter_seed
    for li, block in enumerate(b.blocks):
        for pi, pos in enumerate(attach_cfg.positions):
            site = _SITE_OF[pos]
            layer = block.layers[site]
            key = (adapter_seed, 1, li, ad.POSITIONS.index(pos))
            style = ad.style_for(pos)
            width = layer.d_in if style == "lora_additive" else layer.d_out
            kind = attach_cfg.kind
            if kind == "hta":
                adapter = ad.HtaAdapter.init(width, attach_cfg.r, key, attach_cfg.normalize_v)
            elif kind == "lora":
                adapter = ad.LoraAdapter.init(layer.d_in, layer.d_out, attach_cfg.r, key)
            elif kind == "bottleneck":
                adapter = ad.BottleneckAdapter.init(width, attach_cfg.r, key, attach_cfg.activation)
            elif kind == "full":
                adapter = ad.FullDelta.init(layer.d_in, layer.d_out)
            else:
                raise ConfigError(f"cannot attach kind {kind!r}")
            block.layers[site] = AdaptedLinear(
                layer.base_w, layer.base_b, adapter, style=style, eq7_literal=attach_cfg.eq7_literal
            )
            b.sites[(li, site)] = pos
    return b


def detach(b: Backbone) -> Backbone:
    for block in b.blocks:
        for site, layer in block.layers.items():
            block.layers[site] = AdaptedLinear(layer.base_w, layer.base_b)
    b.sites = {}
    b.config = replace(b.config, adaptation=None)
    return b


def merge_all(b: Backbone) -> Backbone:
    """Copy of ``b`` with every adapted projection folded into its frozen weight."""
    blocks = []
    for block in b.blocks:
        layers = {s: (ad.merge(l) if l.adapter is not None else l) for s, l in block.layers.items()}
        blocks.append(replace(block, layers=layers))
    return replace(b, blocks=blocks)


# --------------------------------------------------------------------------
# numpy forward
# --------------------------------------------------------------------------


def layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    return xc * inv * g + b


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def embed(b: Backbone, features: np.ndarray) -> np.ndarray:
    """Map ``(batch, tokens - 1, D)`` features to ``(batch, tokens, D)`` with the class token first."""
    features = np.asarray(features, dtype=np.float64)
    cfg = b.config
    if features.ndim != 3 or features.shape[1:] != (cfg.tokens - 1, cfg.dim):
        raise ShapeError(f"features must be (batch, {cfg.tokens - 1}, {cfg.dim}), got {features.shape}")
    x = features @ b.embed_w + b.embed_b
    cls = np.broadcast_to(b.cls_token, (x.shape[0], 1, cfg.dim))
    x = np.concatenate([cls, x], axis=1)
    if b.pos_embed is not None:
        x = x + b.pos_embed
    return x


def _linear(layer: AdaptedLinear, x: np.ndarray, use_adapters: bool) -> np.ndarray:
    if not use_adapters:
        return x @ layer.base_w + layer.base_b
    return ad.forward(layer, x)


def _attention(q, k, v, heads):
    bsz, t, dim = q.shape
    dh = dim // heads
    split = lambda a: a.reshape(bsz, t, heads, dh).transpose(0, 2, 1, 3)  # noqa: E731
    qh, kh, vh = split(q), split(k), split(v)
    att = softmax((qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)))
    return (att @ vh).transpose(0, 2, 1, 3).reshape(bsz, t, dim)


def forward(b: Backbone, x: np.ndarray, use_adapters: bool = True) -> np.ndarray:
    """Logits ``(batch, classes)`` for an embedded token batch ``(batch, tokens, D)``.

    ``use_adapters=False`` evaluates the frozen backbone alone.
    """
    x = np.asarray(x, dtype=np.float64)
    cfg = b.config
    if x.ndim != 3 or x.shape[2] != cfg.dim:
        raise ShapeError(f"token batch must be (batch, tokens, {cfg.dim}), got {x.shape}")
    for block in b.blocks:
        L = block.layers
        h = layernorm(x, block.ln1_g, block.ln1_b)
        q = _linear(L["q"], h, use_adapters)
        k = _linear(L["k"], h, use_adapters)
        v = _linear(L["v"], h, use_adapters)
        x = x + _linear(L["o"], _attention(q, k, v, cfg.heads), use_adapters)
        h = layernorm(x, block.ln2_g, block.ln2_b)
        h = ad.gelu(_linear(L["fc1"], h, use_adapters))
        x = x + _linear(L["fc2"], h, use_adapters)
    cls = layernorm(x[:, 0], b.norm_g, b.norm_b)
    return cls @ b.head_w + b.head_b


def predict(b: Backbone, features: np.ndarray, use_adapters: bool = True) -> np.ndarray:
    return forward(b, embed(b, features), use_adapters)


# --------------------------------------------------------------------------
# tape forward
# --------------------------------------------------------------------------


def _linear_tape(
    t: Tape, layer: AdaptedLinear, x: Node, pn: Mapping[str, Node], prefix: str,
    dropout: float, rng: Optional[np.random.Generator],
) -> Node:
    z = t.add(t.matmul(x, t.const(layer.base_w)), t.const(layer.base_b))
    a = layer.adapter
    if a is None:
        return z
    if layer.mode != "branched":
        raise ConfigError("cannot train through a merged layer")
    src = x if layer.style == "lora_additive" else z
    p = lambda name: pn[f"{prefix}.{name}"]  # noqa: E731
    if isinstance(a, ad.HtaAdapter):
        branch = t.householder(t.diag_scale(t.householder(src, p("v_left")), p("d")), p("v_right"))
        if a.w_down is not None:
            branch = t.add(branch, t.matmul(t.matmul(src, p("w_down")), p("w_up")))
    elif isinstance(a, ad.LoraAdapter):
        branch = t.matmul(t.matmul(src, p("w_down")), p("w_up"))
    elif isinstance(a, ad.BottleneckAdapter):
        hid = t.matmul(src, p("w_down"))
        if a.activation == "gelu":
            hid = t.gelu(hid)
        elif a.activation == "relu":
            hid = t.relu(hid)
        branch = t.matmul(hid, p("w_up"))
    elif isinstance(a, ad.FullDelta):
        branch = t.matmul(src, p("delta"))
    else:
        raise TypeError(type(a).__name__)
    if dropout > 0.0 and rng is not None:
        keep = (rng.random(branch.shape) >= dropout) / (1.0 - dropout)
        branch = t.mul(branch, t.const(keep))
    if layer.style == "adapter_multiplicative" and layer.eq7_literal:
        return branch
    return t.add(z, branch)


def forward_tape(
    t: Tape,
    b: Backbone,
    x: np.ndarray,
    params: Mapping[str, Node],
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Node:
    """Record the forward pass of an embedded batch; ``params`` maps registry names to tape leaves."""
    cfg = b.config
    bsz, ntok, dim = x.shape
    heads, dh = cfg.heads, dim // cfg.heads
    h_node = t.const(x)
    for li, block in enumerate(b.blocks):
        L = block.layers
        lin = lambda site, inp: _linear_tape(t, L[site], inp, params, f"blocks.{li}.{site}", dropout, rng)  # noqa: E731
        h = t.layernorm(h_node, t.const(block.ln1_g), t.const(block.ln1_b), LN_EPS)

        def split(node):
            return t.transpose(t.reshape(node, (bsz, ntok, heads, dh)), (0, 2, 1, 3))

        q, k, v = split(lin("q", h)), split(lin("k", h)), split(lin("v", h))
        att = t.softmax(t.scale(t.matmul(q, t.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh)))
        ctx = t.reshape(t.transpose(t.matmul(att, v), (0, 2, 1, 3)), (bsz, ntok, dim))
        h_node = t.add(h_node, lin("o", ctx))
        h = t.layernorm(h_node, t.const(block.ln2_g), t.const(block.ln2_b), LN_EPS)
        h = t.gelu(lin("fc1", h))
        h_node = t.add(h_node, lin("fc2", h))
    cls = t.select(h_node, (slice(None), 0))
    cls = t.layernorm(cls, t.const(b.norm_g), t.const(b.norm_b), LN_EPS)
    return t.add(t.matmul(cls, params["head.w"]), params["head.b"])


# --------------------------------------------------------------------------
# parameter registry
# --------------------------------------------------------------------------

NO_DECAY_SUFFIXES = (".v_left", ".v_right", ".d", ".b")


def trainable_parameters(b: Backbone) -> dict[str, np.ndarray]:
    """Adapter parameters then the classifier head, by name; arrays are live references."""
    reg: dict[str, np.ndarray] = {}
    for li, block in enumerate(b.blocks):
        for site in SITES:
            a = block.layers[site].adapter
            if a is None:
                continue
            for name, arr in a.params().items():
                reg[f"blocks.{li}.{site}.{name}"] = arr
    reg["head.w"] = b.head_w
    reg["head.b"] = b.head_b
    return reg


def decays(name: str, decay_head: bool = False) -> bool:
    """Weight decay only on matrix-shaped adapter factors (and the head weight if asked)."""
    if name == "head.w":
        return decay_head
    if name.startswith("head."):
        return False
    return name.rsplit(".", 1)[1] in ("w_down", "w_up", "delta")


def frozen_tensors(b: Backbone) -> dict[str, np.ndarray]:
    out = {"embed_w": b.embed_w, "embed_b": b.embed_b, "cls_token": b.cls_token,
           "norm_g": b.norm_g, "norm_b": b.norm_b}
    if b.pos_embed is not None:
        out["pos_embed"] = b.pos_embed
    for li, block in enumerate(b.blocks):
        for name in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            out[f"blocks.{li}.{name}"] = getattr(block, name)
        for site, layer in block.layers.items():
            out[f"blocks.{li}.{site}.w"] = layer.base_w
            out[f"blocks.{li}.{site}.b"] = layer.base_b
    return out


def frozen_digest(b: Backbone) -> str:
    h = hashlib.sha256()
    for name, arr in frozen_tensors(b).items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def save_checkpoint(b: Backbone, path) -> None:
    """JSON checkpoint of the trainable state: model config header, head and every adapter."""
    doc = {"model_config": b.config.to_dict(), "adapter_seed": b.adapter_seed,
           "head": {"w": b.head_w.tolist(), "b": b.head_b.tolist()}, "adapters": []}
    for li, block in enumerate(b.blocks):
        for site in SITES:
            a = block.layers[site].adapter
            if a is not None:
                doc["adapters"].append({"layer": li, "site": site, "adapter": ad.adapter_to_dict(a)})
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path, backbone_seed: int) -> Backbone:
    """Rebuild the frozen backbone from its seed and restore adapters and head from ``path``."""
    with open(path) as fh:
        doc = json.load(fh)
    b = build_backbone(ModelConfig.from_dict(doc["model_config"]), backbone_seed, doc["adapter_seed"])
    b.head_w[...] = np.asarray(doc["head"]["w"])
    b.head_b[...] = np.asarray(doc["head"]["b"])
    for entry in doc["adapters"]:
        layer = b.blocks[entry["layer"]].layers[entry["site"]]
        b.blocks[entry["layer"]].layers[entry["site"]] = replace(layer, adapter=ad.adapter_from_dict(entry["adapter"]))
    return b
