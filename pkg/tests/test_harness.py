import csv
import io
import json
from dataclasses import replace

import numpy as np
import pytest

from hta_peft import model as mdl
from hta_peft.adapters import AttachmentConfig, ConfigError, param_count
from hta_peft.harness import cli
from hta_peft.harness.experiment import (
    SPECTRUM_HEADER,
    SUMMARY_HEADER,
    ExperimentConfig,
    report_spectra,
    run_comparison,
    sweep_bottleneck,
    vitb_reference,
)
from hta_peft.harness.tasks import TaskSpec, gen_planted_task, make_task, planted_perturbation
from hta_peft.linalg import jacobi_svd, numerical_rank
from hta_peft.trainer import TrainConfig

SMALL = mdl.ModelConfig(depth=2, dim=16, heads=2, tokens=4, classes=4)


def tiny_config(tmp_path, variants=None, trials=2) -> ExperimentConfig:
    return ExperimentConfig(
        model=SMALL,
        train=TrainConfig(epochs=2, warmup_epochs=1, batch_size=32),
        task=TaskSpec(n_train=64, n_eval=32, scale=4.0, block=0),
        variants=variants or (AttachmentConfig(("q", "v"), "hta", 1), AttachmentConfig((), "none", 0)),
        trials=trials,
        output_dir=str(tmp_path / "out"),
    )


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# --- tasks -------------------------------------------------------------------


@pytest.mark.parametrize("k", [0, 1, 4, 16])
def test_planted_perturbation_has_rank_k(k):
    delta = planted_perturbation(16, k, 2.0, np.random.default_rng(0))
    sigma = jacobi_svd(delta).sigma
    assert numerical_rank(sigma) == k
    if k:
        assert sigma[0] == pytest.approx(2.0, rel=1e-12)
    if k > 1:
        assert sigma[k - 1] == pytest.approx(1.0, rel=1e-12)


def test_planted_task_labels_split_and_meta():
    ds = gen_planted_task(SMALL, 0, 5, 4, noise=0.1, n_train=100, n_eval=50, scale=3.0)
    assert ds.train_x.shape == (100, 3, 16) and ds.eval_x.shape == (50, 3, 16)
    assert ds.check_disjoint()
    assert set(ds.meta["train_index"]).isdisjoint(ds.meta["eval_index"])
    assert sorted(ds.meta["train_index"] + ds.meta["eval_index"]) == list(range(150))
    for y in (ds.train_y, ds.eval_y):
        assert y.min() >= 0 and y.max() < SMALL.classes
    assert ds.meta["planted_rank"] == 4 and ds.meta["planted_block"] == 1


def test_rank_zero_teacher_is_the_frozen_backbone():
    ds = gen_planted_task(SMALL, 3, 9, 0, n_train=40, n_eval=40)
    b = mdl.build_backbone(SMALL, 3)
    x = np.concatenate([ds.train_x, ds.eval_x])
    y = np.concatenate([ds.train_y, ds.eval_y])
    idx = np.concatenate([ds.meta["train_index"], ds.meta["eval_index"]])
    logits = mdl.predict(b, x)
    # labels are argmax of class-centred logits over the whole generated pool
    centred = np.argmax(logits - logits.mean(axis=0), axis=1)
    assert np.array_equal(centred[np.argsort(idx)], y[np.argsort(idx)])


def test_task_generation_is_deterministic_and_trial_dependent():
    spec = TaskSpec(n_train=20, n_eval=10)
    a, b, c = make_task(spec, SMALL, 0), make_task(spec, SMALL, 0), make_task(spec, SMALL, 1)
    assert np.array_equal(a.train_x, b.train_x) and np.array_equal(a.train_y, b.train_y)
    assert not np.array_equal(a.train_x, c.train_x)


def test_task_errors():
    with pytest.raises(ConfigError):
        gen_planted_task(SMALL, 0, 0, 17)
    with pytest.raises(ConfigError):
        gen_planted_task(SMALL, 0, 0, 1, noise=1.5)
    with pytest.raises(ConfigError):
        make_task(TaskSpec(generator="images"), SMALL)


# --- config ------------------------------------------------------------------


def test_experiment_config_json_roundtrip(tmp_path):
    cfg = tiny_config(tmp_path)
    path = tmp_path / "cfg.json"
    cfg.save(path)
    assert ExperimentConfig.load(path) == cfg
    assert set(json.loads(path.read_text())) == {"model", "train", "task", "variants", "trials", "output_dir", "seed"}


def test_experiment_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        tiny_config(tmp_path, trials=0)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    cfg = tiny_config(tmp_path)
    assert [v.name for v in cfg.select(["linear_probe"]).variants] == ["linear_probe"]
    with pytest.raises(ConfigError):
        cfg.select(["nope"])
    dup = AttachmentConfig(("q",), "hta", 1)
    with pytest.raises(ConfigError):
        replace(cfg, variants=(dup, dup))


# --- comparison ----------------------------------------------------------------


def test_run_comparison_outputs_and_determinism(tmp_path):
    cfg = tiny_config(tmp_path)
    a = run_comparison(cfg, tmp_path / "a")
    b = run_comparison(cfg, tmp_path / "b")
    rows = read_csv(tmp_path / "a" / "summary.csv")
    assert tuple(rows[0]) == SUMMARY_HEADER
    assert (tmp_path / "a" / "summary.csv").read_text().splitlines()[0] == \
        "variant,positions,kind,r,params,trial,seed,best_eval_acc,final_train_loss"
    assert len(rows) == 1 + 2 * 2
    for row in rows[1:]:
        variant = next(v for v in cfg.variants if v.name == row[0])
        assert int(row[4]) == param_count(variant, SMALL.dim, SMALL.depth, SMALL.mlp_ratio)
    assert [p.relative_to(tmp_path / "a") for p in a.files] == [p.relative_to(tmp_path / "b") for p in b.files]
    for pa, pb in zip(a.files, b.files):
        assert pa.read_bytes() == pb.read_bytes(), pa.name
    spectra = read_csv(tmp_path / "a" / "hta_r1_q-v" / "trial0" / "spectra.csv")
    assert tuple(spectra[0]) == SPECTRUM_HEADER
    assert len(spectra) == 1 + 2 * 2 * SMALL.dim
    epochs = read_csv(tmp_path / "a" / "hta_r1_q-v" / "trial1" / "epochs.csv")
    assert epochs[0] == ["epoch", "lr", "train_loss", "train_acc", "eval_acc"] and len(epochs) == 3
    summary = json.loads((tmp_path / "a" / "linear_probe" / "trial0" / "summary.json").read_text())
    assert summary["params"] == 0 and "wall_time" not in summary


def test_params_ratio_hta_r1_vs_lora_r8_is_five_sixteenths(tmp_path):
    variants = (AttachmentConfig(("q", "v"), "hta", 1), AttachmentConfig(("q", "v"), "lora", 8))
    cfg = replace(tiny_config(tmp_path, variants, trials=1), model=mdl.ModelConfig(depth=1, tokens=2),
                  train=TrainConfig(epochs=1, warmup_epochs=0, batch_size=64))
    res = run_comparison(cfg)
    params = {row[0]: row[1] for row in res.aggregate_rows()}
    assert params["hta_r1_q-v"] * 16 == params["lora_r8_q-v"] * 5


def test_report_spectra_zero_init_ranks_are_zero(tmp_path):
    b = mdl.build_backbone(SMALL.with_adaptation(AttachmentConfig(("q", "post_ffn"), "hta", 1)), 0)
    text = report_spectra(b, tmp_path / "s.csv")
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0]) == SPECTRUM_HEADER
    assert {r[4] for r in rows[1:]} == {"0"}
    assert {(r[0], r[1]) for r in rows[1:]} == {(str(l), p) for l in range(2) for p in ("q", "post_ffn")}
    assert (tmp_path / "s.csv").read_text() == text


def test_sweep_bottleneck_columns(tmp_path):
    cfg = tiny_config(tmp_path, trials=1)
    res = sweep_bottleneck(cfg, (0, 1, 2))
    assert [r[0] for r in res.rows] == [0, 1, 2]
    adapters = [r[2] for r in res.rows]
    # r = 0 has exactly 2 * D * positions * depth fewer parameters than r = 1
    assert adapters[1] - adapters[0] == 2 * SMALL.dim * 2 * SMALL.depth
    head = SMALL.classes * (SMALL.dim + 1)
    assert all(r[3] == r[2] + head for r in res.rows)
    assert read_csv(tmp_path / "out" / "sweep.csv")[0][:4] == ["r", "variant", "params_adapters", "params_with_head"]
    with pytest.raises(ConfigError):
        sweep_bottleneck(cfg, ())


def test_vitb_reference_numbers():
    rows = vitb_reference((0, 1, 2, 4), head_classes=0)
    assert [r[1] for r in rows] == [110_592, 184_320, 258_048, 405_504]
    assert [r[3] for r in rows] == [0.15, 0.22, 0.30, 0.44]
    assert [r[4] for r in rows] == [72.0, 74.7, 74.5, 75.0]


# --- CLI -----------------------------------------------------------------------


@pytest.mark.parametrize("cmd", ["paramcount", "gradcheck", "selftest"])
def test_cli_checks_exit_zero(cmd, capsys):
    assert cli.main([cmd]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_cli_compare_spectra_and_sweep(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    tiny_config(tmp_path, trials=1).save(cfg_path)
    assert cli.main(["compare", "--config", str(cfg_path), "--out", str(tmp_path / "c"), "--seed", "3"]) == 0
    rows = read_csv(tmp_path / "c" / "summary.csv")
    assert {r[6] for r in rows[1:]} == {"3"}
    assert cli.main(["compare", "--config", str(cfg_path), "--out", str(tmp_path / "d"),
                     "--variant", "linear_probe"]) == 0
    assert {r[0] for r in read_csv(tmp_path / "d" / "summary.csv")[1:]} == {"linear_probe"}
    assert cli.main(["spectra", "--config", str(cfg_path), "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "spectra_hta_r1_q-v.csv").exists()
    assert cli.main(["sweep", "--config", str(cfg_path), "--out", str(tmp_path / "w"), "--r", "0", "1"]) == 0
    out = capsys.readouterr().out
    assert "params_adapters" in out and "params_with_head" in out


def test_cli_errors(tmp_path):
    assert cli.main(["compare", "--config", str(tmp_path / "missing.json")]) == 2
    cfg_path = tmp_path / "cfg.json"
    tiny_config(tmp_path).save(cfg_path)
    assert cli.main(["compare", "--config", str(cfg_path), "--variant", "nope"]) == 2
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])
