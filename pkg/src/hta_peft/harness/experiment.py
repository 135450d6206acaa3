"""Comparative runs, the bottleneck sweep and spectrum reports.

Every file written here is a pure function of the config: floats are written
with ``repr`` and wall-clock times are kept out of the artifacts, so reruns
are byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .. import model as mdl
from ..adapters import (
    AttachmentConfig,
    ConfigError,
    UnsupportedMergeError,
    adaptation_matrix,
    param_count,
)
from ..linalg import SvdConvergenceError, jacobi_svd, numerical_rank
from ..trainer import RunRecord, TrainConfig, train
from .tasks import Dataset, TaskSpec, make_task

log = logging.getLogger(__name__)

SUMMARY_HEADER = ("variant", "positions", "kind", "r", "params", "trial", "seed", "best_eval_acc", "final_train_loss")
AGGREGATE_HEADER = (
    "variant", "params", "trials", "median_eval_acc", "min_eval_acc", "max_eval_acc",
    "mean_eval_acc", "median_final_train_loss", "aborted",
)
SPECTRUM_HEADER = ("layer", "position", "sv_index", "sigma", "numerical_rank")
SWEEP_HEADER = (
    "r", "variant", "params_adapters", "params_with_head", "median_eval_acc",
    "min_eval_acc", "max_eval_acc", "median_final_train_loss",
)
REFERENCE_HEADER = ("r", "params_adapters", "params_with_head", "paper_params_m", "paper_mean_acc")

# bottleneck-dimension figure / appendix sweep table: (r, params in M, mean accuracy)
PAPER_SWEEP = ((0, 0.15, 72.0), (1, 0.22, 74.7), (2, 0.30, 74.5), (4, 0.44, 75.0))
VITB_DIM = 768
VITB_DEPTH = 12
VITB_POSITIONS = ("q", "k", "v", "o")


def _ablation_variants() -> tuple[AttachmentConfig, ...]:
    pos = ("v",)
    return (
        AttachmentConfig(pos, "hta", 1),
        AttachmentConfig(pos, "hta", 0),
        AttachmentConfig(pos, "lora", 1),
    )


@dataclass(frozen=True)
class ExperimentConfig:
    model: mdl.ModelConfig = field(default_factory=lambda: mdl.ModelConfig(tokens=5))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=12, warmup_epochs=1, batch_size=256))
    task: TaskSpec = field(default_factory=lambda: TaskSpec(n_train=8192, n_eval=1024, scale=4.0, block=1))
    variants: tuple = field(default_factory=_ablation_variants)
    trials: int = 5
    output_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(self.variants))
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.variants:
            raise ConfigError("at least one variant is required")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate variant names: {names}")
        for v in self.variants:
            if v.kind != "none" and not v.positions:
                raise ConfigError(f"variant {v.name!r} names no positions")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "task": self.task.to_dict(),
            "variants": [v.to_dict() for v in self.variants],
            "trials": self.trials,
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        known = {"model", "train", "task", "variants", "trials", "output_dir", "seed"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        base = cls()
        return cls(
            model=mdl.ModelConfig.from_dict(d["model"]) if "model" in d else base.model,
            train=TrainConfig.from_dict(d["train"]) if "train" in d else base.train,
            task=TaskSpec.from_dict(d["task"]) if "task" in d else base.task,
            variants=tuple(AttachmentConfig.from_dict(v) for v in d["variants"]) if "variants" in d else base.variants,
            trials=d.get("trials", base.trials),
            output_dir=d.get("output_dir", base.output_dir),
            seed=d.get("seed", base.seed),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def select(self, names: Iterable[str]) -> "ExperimentConfig":
        """Keep only the named variants, in config order."""
        wanted = list(names)
        missing = set(wanted) - {v.name for v in self.variants}
        if missing:
            raise ConfigError(f"unknown variant(s) {sorted(missing)}; have {[v.name for v in self.variants]}")
        return replace(self, variants=tuple(v for v in self.variants if v.name in wanted))


@dataclass
class TrialResult:
    variant: AttachmentConfig
    trial: int
    seed: int
    params: int  # adapters only; the head adds classes * (dim + 1)
    record: RunRecord
    spectra: list = field(default_factory=list)


@dataclass
class ComparisonResult:
    config: ExperimentConfig
    trials: list[TrialResult] = field(default_factory=list)
    files: list[Path] = field(default_factory=list)

    def by_variant(self) -> dict[str, list[TrialResult]]:
        out: dict[str, list[TrialResult]] = {}
        for t in self.trials:
            out.setdefault(t.variant.name, []).append(t)
        return out

    def summary_csv(self) -> str:
        rows = [
            (t.variant.name, "-".join(t.variant.positions), t.variant.kind, t.variant.r, t.params, t.trial, t.seed,
             repr(t.record.best_eval_acc), repr(t.record.final_train_loss))
            for t in self.trials
        ]
        return _csv(SUMMARY_HEADER, rows)

    def aggregate_rows(self) -> list[tuple]:
        rows = []
        for name, ts in self.by_variant().items():
            accs = [t.record.final_eval_acc for t in ts]
            losses = [t.record.final_train_loss for t in ts]
            rows.append((
                name, ts[0].params, len(ts), statistics.median(accs), min(accs), max(accs),
                statistics.fmean(accs), statistics.median(losses), sum(t.record.aborted for t in ts),
            ))
        return rows

    def aggregate_csv(self) -> str:
        return _csv(AGGREGATE_HEADER, [tuple(_fmt(x) for x in r) for r in self.aggregate_rows()])


def _fmt(x):
    return repr(x) if isinstance(x, float) else x


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def spectrum_rows(b: mdl.Backbone, rel_tol: float = 1e-10) -> list[tuple]:
    """``(layer, position, sv_index, sigma, numerical_rank)`` for every adapted site of ``b``.

    Sites whose adaptation is not a linear map (bottleneck with a nonlinear
    activation) are skipped; SVD failures are logged and reported with a NaN
    sigma and rank -1 so that one bad entry does not sink the report.
    """
    rows = []
    for li, block in enumerate(b.blocks):
        for site in mdl.SITES:
            adapter = block.layers[site].adapter
            if adapter is None:
                continue
            pos = b.sites.get((li, site), site)
            try:
                sigma = jacobi_svd(adaptation_matrix(adapter)).sigma
            except UnsupportedMergeError:
                continue
            except SvdConvergenceError as exc:
                log.warning("spectrum of layer %d %s: %s", li, pos, exc)
                rows.append((li, pos, 0, float("nan"), -1))
                continue
            rank = numerical_rank(sigma, rel_tol)
            rows.extend((li, pos, i, float(s), rank) for i, s in enumerate(sigma))
    return rows


def report_spectra(b: mdl.Backbone, path=None, rel_tol: float = 1e-10) -> str:
    """Spectrum CSV of a (trained) backbone's adaptation matrices; written to ``path`` if given."""
    text = _csv(SPECTRUM_HEADER, [(l, p, i, repr(s), k) for l, p, i, s, k in spectrum_rows(b, rel_tol)])
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def trial_seed(cfg: ExperimentConfig, trial: int) -> int:
    return cfg.seed + trial


def run_trial(cfg: ExperimentConfig, variant: AttachmentConfig, trial: int, task: Optional[Dataset] = None):
    """Train one variant on one trial's task; returns the result and the trained backbone."""
    task = make_task(cfg.task, cfg.model, trial) if task is None else task
    seed = trial_seed(cfg, trial)
    attach = variant if variant.kind != "none" else None
    b = mdl.build_backbone(cfg.model.with_adaptation(attach), cfg.task.backbone_seed + trial, adapter_seed=seed)
    rec = train(b, task, replace(cfg.train, seed=cfg.train.seed + seed))
    m = cfg.model
    params = param_count(variant, m.dim, m.depth, m.mlp_ratio)
    with_head = param_count(variant, m.dim, m.depth, m.mlp_ratio, head_classes=m.classes)
    if rec.trainable_params != with_head:
        raise AssertionError(f"{variant.name}: trainer sees {rec.trainable_params} params, param_count {with_head}")
    return TrialResult(variant, trial, seed, params, rec, spectrum_rows(b)), b


def _write(path: Path, text: str, files: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    files.append(path)


def run_comparison(cfg: ExperimentConfig, out_dir=None, progress=None) -> ComparisonResult:
    """Train every variant on every trial and write the report files.

    Layout under ``out_dir`` (default ``cfg.output_dir``)::

        config.json  summary.csv  aggregate.csv
        <variant>/trial<k>/epochs.csv  summary.json  spectra.csv

    A trial that aborts on a non-finite loss is recorded and the run goes on.
    """
    out = Path(cfg.output_dir if out_dir is None else out_dir)
    res = ComparisonResult(cfg)
    for trial in range(cfg.trials):
        task = make_task(cfg.task, cfg.model, trial)
        if not task.check_disjoint():
            raise AssertionError("train and eval indices overlap")
        for variant in cfg.variants:
            tr, _ = run_trial(cfg, variant, trial, task)
            res.trials.append(tr)
            if progress is not None:
                progress(tr)
    res.trials.sort(key=lambda t: ([v.name for v in cfg.variants].index(t.variant.name), t.trial))

    _write(out / "config.json", cfg.to_json(), res.files)
    _write(out / "summary.csv", res.summary_csv(), res.files)
    _write(out / "aggregate.csv", res.aggregate_csv(), res.files)
    for t in res.trials:
        d = out / t.variant.name / f"trial{t.trial}"
        _write(d / "epochs.csv", t.record.epoch_csv(), res.files)
        summary = t.record.summary(extra={"variant": t.variant.to_dict(), "trial": t.trial, "seed": t.seed,
                                          "params": t.params})
        summary.pop("wall_time")
        _write(d / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n", res.files)
        _write(d / "spectra.csv",
               _csv(SPECTRUM_HEADER, [(l, p, i, repr(s), k) for l, p, i, s, k in t.spectra]), res.files)
    return res


@dataclass
class SweepResult:
    rows: list[tuple]
    reference: list[tuple]
    comparison: ComparisonResult

    def sweep_csv(self) -> str:
        return _csv(SWEEP_HEADER, [tuple(_fmt(x) for x in r) for r in self.rows])

    def reference_csv(self) -> str:
        return _csv(REFERENCE_HEADER, self.reference)


def vitb_reference(r_values: Sequence[int] = (0, 1, 2, 4), head_classes: int = 0) -> list[tuple]:
    """ViT-B/16 parameter columns for HTA on four 768-wide positions next to the figure's values.

    ``head_classes`` sizes the head in the ``params_with_head`` column; the
    figure does not say whether its counts include one.
    """
    paper = {r: (p, a) for r, p, a in PAPER_SWEEP}
    rows = []
    for r in r_values:
        att = AttachmentConfig(VITB_POSITIONS, "hta", r)
        adapters = param_count(att, VITB_DIM, VITB_DEPTH)
        with_head = param_count(att, VITB_DIM, VITB_DEPTH, head_classes=head_classes) if head_classes else adapters
        p, a = paper.get(r, ("", ""))
        rows.append((r, adapters, with_head, p, a))
    return rows


def sweep_bottleneck(
    cfg: ExperimentConfig,
    r_values: Sequence[int] = (0, 1, 2, 4),
    out_dir=None,
    reference_head_classes: int = 50,
    progress=None,
) -> SweepResult:
    """HTA at each addend rank ``r``: accuracy against adapter-only and adapter+head params.

    Positions, activation and flags come from the first HTA variant of
    ``cfg`` (``{v}`` if there is none).
    """
    if not r_values:
        raise ConfigError("r_values must be nonempty")
    base = next((v for v in cfg.variants if v.kind == "hta"), AttachmentConfig(("v",), "hta", 1))
    variants = tuple(replace(base, r=r, name=f"hta_r{r}_" + "-".join(base.positions)) for r in r_values)
    out = Path(cfg.output_dir if out_dir is None else out_dir)
    comp = run_comparison(replace(cfg, variants=variants), out, progress)
    agg = {row[0]: row for row in comp.aggregate_rows()}
    rows = []
    for r, v in zip(r_values, variants):
        a = agg[v.name]
        adapters = param_count(v, cfg.model.dim, cfg.model.depth, cfg.model.mlp_ratio)
        m = cfg.model
        with_head = param_count(v, m.dim, m.depth, m.mlp_ratio, head_classes=m.classes)
        rows.append((r, v.name, adapters, with_head, a[3], a[4], a[5], a[7]))
    res = SweepResult(rows, vitb_reference(r_values, reference_head_classes), comp)
    _write(out / "sweep.csv", res.sweep_csv(), comp.files)
    _write(out / "vitb_reference.csv", res.reference_csv(), comp.files)
    return res
