"""Synthetic classification tasks with a known teacher perturbation rank."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

import numpy as np

from .. import model as mdl
from ..adapters import ConfigError
from ..linalg import jacobi_svd


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    meta: dict = field(default_factory=dict)

    def check_disjoint(self) -> bool:
        tr = set(self.meta.get("train_index", ()))
        ev = set(self.meta.get("eval_index", ()))
        return not (tr & ev)


@dataclass(frozen=True)
class TaskSpec:
    """Parameters of :func:`gen_planted_task` (the ``task`` block of an experiment config)."""

    generator: str = "planted"
    planted_rank: int = 4
    noise: float = 0.0
    n_train: int = 512
    n_eval: int = 512
    scale: float = 1.0
    block: Optional[int] = None
    backbone_seed: int = 0
    task_seed: int = 1000

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskSpec":
        return cls(**d)


def _orthonormal_columns(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    return jacobi_svd(rng.standard_normal((n, k))).u


def planted_perturbation(dim: int, k: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Rank-``k`` matrix ``scale * U diag(s) V^T`` with singular values spread over [0.5, 1] * scale."""
    if k == 0:
        return np.zeros((dim, dim))
    u = _orthonormal_columns(rng, dim, k)
    v = _orthonormal_columns(rng, dim, k)
    s = scale * np.linspace(1.0, 0.5, k)
    return (u * s) @ v.T


def teacher_backbone(config: mdl.ModelConfig, backbone_seed: int, delta: np.ndarray, block: int) -> mdl.Backbone:
    teacher = mdl.build_backbone(config.with_adaptation(None), backbone_seed)
    layer = teacher.blocks[block].layers["v"]
    layer.base_w = layer.base_w + delta
    return teacher


def gen_planted_task(
    config: mdl.ModelConfig,
    backbone_seed: int,
    task_seed: int,
    planted_rank: int,
    noise: float = 0.0,
    n_train: int = 512,
    n_eval: int = 512,
    scale: float = 1.0,
    block: Optional[int] = None,
) -> Dataset:
    """Label random token sequences with a teacher whose ``W_v`` differs from the frozen backbone's by rank ``k``.

    Teacher logits are centred per class over the generated pool before the
    argmax so that the classes stay roughly balanced.  A fraction ``noise`` of
    labels is then replaced by uniformly random classes.
    """
    dim = config.dim
    if not 0 <= planted_rank <= dim:
        raise ConfigError(f"planted rank {planted_rank} must lie in [0, {dim}]")
    if config.depth < 1 and planted_rank > 0:
        raise ConfigError("a planted perturbation needs depth >= 1")
    if not 0.0 <= noise <= 1.0:
        raise ConfigError("noise must be in [0, 1]")
    blk = config.depth // 2 if block is None else block
    rng = np.random.default_rng([task_seed, 7])
    delta = planted_perturbation(dim, planted_rank, scale, rng)
    teacher = teacher_backbone(config, backbone_seed, delta, blk) if config.depth else mdl.build_backbone(
        config.with_adaptation(None), backbone_seed)

    total = n_train + n_eval
    feats = rng.standard_normal((total, config.tokens - 1, dim))
    logits = mdl.predict(teacher, feats)
    labels = np.argmax(logits - logits.mean(axis=0), axis=1)
    flip = rng.random(total) < noise
    labels = np.where(flip, rng.integers(0, config.classes, total), labels)

    perm = rng.permutation(total)
    tr, ev = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    return Dataset(
        train_x=feats[tr],
        train_y=labels[tr],
        eval_x=feats[ev],
        eval_y=labels[ev],
        meta={
            "generator": "planted",
            "backbone_seed": backbone_seed,
            "task_seed": task_seed,
            "classes": config.classes,
            "planted_rank": planted_rank,
            "planted_block": blk,
            "noise": noise,
            "scale": scale,
            "train_index": tr.tolist(),
            "eval_index": ev.tolist(),
        },
    )


def make_task(spec: TaskSpec, config: mdl.ModelConfig, trial: int = 0) -> Dataset:
    if spec.generator != "planted":
        raise ConfigError(f"unknown task generator {spec.generator!r}")
    return gen_planted_task(
        config,
        spec.backbone_seed + trial,
        spec.task_seed + trial,
        spec.planted_rank,
        spec.noise,
        spec.n_train,
        spec.n_eval,
        spec.scale,
        spec.block,
    )
