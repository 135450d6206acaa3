"""Fast self-checks behind the ``selftest`` and ``gradcheck`` subcommands."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import model as mdl
from ..adapters import AttachmentConfig, HtaAdapter, compose_hta, param_count
from ..autodiff import GradCheckReport, grad_check
from ..linalg import householder_matrix, jacobi_svd, numerical_rank, project_to_reflector
from ..trainer import TrainConfig, lr_at

GRAD_CLASSES = ("v_left", "v_right", "d", "w_down", "w_up", "head")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def randomize_adapters(b: mdl.Backbone, seed: int, scale: float = 0.3) -> None:
    """Overwrite every adapter parameter in place with ``scale``-sized noise (reflector vectors stay at norm^2 2)."""
    rng = np.random.default_rng([seed, 99])
    for block in b.blocks:
        for layer in block.layers.values():
            a = layer.adapter
            if a is None:
                continue
            for name, arr in a.params().items():
                arr[...] = scale * rng.standard_normal(arr.shape)
            if isinstance(a, HtaAdapter):
                a.renormalize()


def grad_check_model(seed: int = 0, h: float = 1e-5, tolerance: float = 1e-5) -> GradCheckReport:
    """Tape vs central differences on a 1-block model carrying HTA (q, v, fc2) and the head.

    Discrepancies are reported per parameter class, each the worst relative
    error over the tensors of that class.
    """
    att = AttachmentConfig(("q", "v", "post_ffn"), "hta", 2)
    cfg = mdl.ModelConfig(depth=1, dim=8, heads=2, tokens=4, classes=3, adaptation=att)
    b = mdl.build_backbone(cfg, seed)
    randomize_adapters(b, seed)
    rng = np.random.default_rng([seed, 5])
    x = mdl.embed(b, rng.standard_normal((4, cfg.tokens - 1, cfg.dim)))
    y = rng.integers(0, cfg.classes, 4)
    params = mdl.trainable_parameters(b)

    def loss(t, nodes):
        return t.cross_entropy(mdl.forward_tape(t, b, x, nodes), y)

    full = grad_check(loss, params, h, tolerance)
    report = GradCheckReport(tolerance=tolerance)
    for cls in GRAD_CLASSES:
        errs = [v for k, v in full.discrepancy.items() if _grad_class(k) == cls]
        report.discrepancy[cls] = max(errs) if errs else math.inf
    return report


def _grad_class(name: str) -> str:
    return "head" if name.startswith("head.") else name.rsplit(".", 1)[1]


def check_householder(dims=(4, 16, 64), draws: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, sym = 0.0, True
    for dim in dims:
        for _ in range(draws):
            h = householder_matrix(project_to_reflector(rng.standard_normal(dim)))
            sym &= bool(np.array_equal(h, h.T))
            worst = max(worst, np.abs(h @ h - np.eye(dim)).max())
    ok = sym and worst <= 1e-10
    return CheckResult("householder", ok, f"symmetric={sym} max|HH-I|={worst:.2e}")


def check_rank_law(dim: int = 6, draws: int = 5, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for mask in itertools.product((0, 1), repeat=dim):
        for _ in range(draws):
            a = HtaAdapter.init(dim, 0, (seed, bad, *mask), normalize_v=True)
            a.d[...] = np.array(mask) * rng.uniform(0.5, 2.0, dim) * rng.choice((-1, 1), dim)
            if numerical_rank(jacobi_svd(compose_hta(a)).sigma) != sum(mask):
                bad += 1
    return CheckResult("rank_law", bad == 0, f"D={dim}, {2**dim * draws} matrices, {bad} mismatches")


def check_merge(seed: int = 0) -> CheckResult:
    att = AttachmentConfig(("q", "v", "post_ffn"), "hta", 1)
    b = mdl.build_backbone(mdl.ModelConfig(depth=2, dim=16, heads=2, tokens=5, adaptation=att), seed)
    randomize_adapters(b, seed)
    x = np.random.default_rng(seed).standard_normal((8, 4, 16))
    ref = mdl.predict(b, x)
    err = float(np.abs(mdl.predict(mdl.merge_all(b), x) - ref).max() / np.abs(ref).max())
    return CheckResult("merge", err <= 1e-8, f"max relative error {err:.2e}")


def check_zero_init(seed: int = 0) -> CheckResult:
    cfg = mdl.ModelConfig(depth=2, dim=16, heads=2, tokens=5)
    x = np.random.default_rng(seed).standard_normal((4, 4, 16))
    ref = mdl.predict(mdl.build_backbone(cfg, seed), x)
    variants = [
        AttachmentConfig(("q", "v"), "hta", 1),
        AttachmentConfig(("q", "v"), "hta", 0),
        AttachmentConfig(("q", "v"), "lora", 4),
        AttachmentConfig(("post_mha", "post_ffn"), "bottleneck", 4),
        AttachmentConfig(("fc1", "post_ffn"), "hta", 1),
        AttachmentConfig(("v",), "full", 0),
    ]
    bad = [v.name for v in variants
           if not np.array_equal(mdl.predict(mdl.build_backbone(cfg.with_adaptation(v), seed), x), ref)]
    return CheckResult("zero_init", not bad, f"{len(variants) - len(bad)}/{len(variants)} bitwise equal")


def check_schedule(epochs: int = 100, warmup: int = 10, steps_per_epoch: int = 4) -> CheckResult:
    cfg = TrainConfig(epochs=epochs, warmup_epochs=warmup)
    total = epochs * steps_per_epoch
    w = warmup * steps_per_epoch
    err = 0.0
    for s in range(total):
        want = s / w if s < w else 0.5 * (1 + math.cos(math.pi * (s - w) / (total - w)))
        err = max(err, abs(lr_at(cfg, s, total) - cfg.base_lr * want))
    return CheckResult("schedule", err <= 1e-12, f"max deviation {err:.2e}")


def check_paramcount() -> CheckResult:
    qv = ("q", "v")
    got = (
        param_count(AttachmentConfig(qv, "hta", 1), 768, 12),
        param_count(AttachmentConfig(qv, "lora", 8), 768, 12),
        param_count(AttachmentConfig(("fc1", "fc2"), "hta", 0), 768, 12, position_dims={"fc1": 768, "fc2": 768}),
    )
    want = (92_160, 294_912, 55_296)
    return CheckResult("paramcount", got == want, f"got {got}, want {want}")


def check_gradients(seed: int = 0) -> CheckResult:
    rep = grad_check_model(seed)
    worst = max(rep.discrepancy.values())
    return CheckResult("gradcheck", rep.passed, f"worst relative error {worst:.2e}")


SELFTESTS: dict[str, Callable[[], CheckResult]] = {
    "householder": check_householder,
    "rank_law": check_rank_law,
    "merge": check_merge,
    "zero_init": check_zero_init,
    "schedule": check_schedule,
    "paramcount": check_paramcount,
    "gradcheck": check_gradients,
}
