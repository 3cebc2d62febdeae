import json
import math

import numpy as np
import pytest

from emargin import config as config_mod
from emargin.cli import compare_reports, main
from emargin.errors import ConfigError
from emargin.evaluation import METRIC_FIELDS, REPORT_FIELDS
from emargin.signals import RawSeries, read_batch, save_csv

TINY = {
    "dataset": {"synth": {"num_seqs": 10, "T": 30, "D": 8, "regime_dwell": 8.0}},
    "encoder": {"hidden_dims": [16, 16], "output_dim": 8},
    "train": {"iterations": 5},
    "eval": {"per_class": 30, "probe": {"epochs": 30}},
}


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def run(*argv):
    return main([str(a) for a in argv])


def test_synth_files_and_labels(tmp_path, tiny_cfg, capsys):
    assert run("synth", "--config", tiny_cfg, "--out", tmp_path / "a") == 0
    assert run("synth", "--config", tiny_cfg, "--out", tmp_path / "b") == 0
    for name in ("train.emsb", "test.emsb", "manifest.json"):
        a = (tmp_path / "a" / "data" / name).read_bytes()
        assert a == (tmp_path / "b" / "data" / name).read_bytes()
    tr, head = read_batch(tmp_path / "a" / "data" / "train.emsb")
    te, _ = read_batch(tmp_path / "a" / "data" / "test.emsb")
    assert (len(tr), len(te)) == (8, 2)
    assert set(np.unique(np.concatenate([tr.labels.ravel(), te.labels.ravel()]))) == {0, 1, 2}
    assert head["source"] == "synth"


def test_synth_seed_changes_data(tmp_path, tiny_cfg):
    run("synth", "--config", tiny_cfg, "--out", tmp_path / "a", "--seed", 1)
    run("synth", "--config", tiny_cfg, "--out", tmp_path / "b", "--seed", 2)
    assert (tmp_path / "a/data/train.emsb").read_bytes() != (tmp_path / "b/data/train.emsb").read_bytes()


def test_invalid_spec_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dataset": {"synth": {"num_classes": 1}}}))
    assert run("synth", "--config", bad, "--out", tmp_path) == 2
    bad.write_text(json.dumps({"nonsense": 1}))
    assert run("synth", "--config", bad, "--out", tmp_path) == 2
    bad.write_text("{not json")
    assert run("synth", "--config", bad, "--out", tmp_path) == 2
    assert "error" in capsys.readouterr().err.lower()


def write_recordings(tmp_path, n=2, length=1200):
    rng = np.random.default_rng(0)
    paths = []
    for i in range(n):
        labels = np.repeat([0, 1, 2, 1], length // 4)
        s = RawSeries(
            {"ax": rng.standard_normal(length) + labels, "ay": np.sin(np.arange(length) * (0.1 + 0.1 * labels))},
            50.0,
            labels,
        )
        p = tmp_path / f"rec{i}.csv"
        save_csv(s, p)
        paths.append(p)
    return paths


def test_preprocess_manifest(tmp_path, capsys):
    csvs = write_recordings(tmp_path)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dataset": {"name": "rec", "source": "csv"}, "seq_len": 10}))
    assert run("preprocess", "--config", cfg, "--out", tmp_path / "o1", "--csv", *csvs) == 0
    assert run("preprocess", "--config", cfg, "--out", tmp_path / "o2", "--csv", *csvs) == 0
    m1 = (tmp_path / "o1/data/manifest.json").read_text()
    assert m1 == (tmp_path / "o2/data/manifest.json").read_text()
    manifest = json.loads(m1)
    assert manifest["D"] == 52
    # 1200 samples -> 47 frames -> 4 sequences of 10 per file
    tr, _ = read_batch(tmp_path / "o1/data/train.emsb")
    te, _ = read_batch(tmp_path / "o1/data/test.emsb")
    assert len(tr) + len(te) == 8 and tr.shape[1:] == (10, 52)


def test_preprocess_sequence_too_long_is_data_error(tmp_path, capsys):
    csvs = write_recordings(tmp_path, n=1)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dataset": {"source": "csv"}, "seq_len": 100}))
    assert run("preprocess", "--config", cfg, "--out", tmp_path, "--csv", *csvs) == 1


def test_preprocess_bad_csv_is_data_error(tmp_path, capsys):
    p = tmp_path / "broken.csv"
    p.write_text("ax,label\n1,0\nfoo,0\n")
    assert run("preprocess", "--out", tmp_path, "--csv", p) == 1
    assert "row 2" in capsys.readouterr().err


@pytest.fixture
def synth_out(tmp_path, tiny_cfg):
    out = tmp_path / "out"
    assert run("synth", "--config", tiny_cfg, "--out", out) == 0
    return out


def test_pretrain_deterministic(synth_out, tiny_cfg, tmp_path):
    assert run("pretrain", "--config", tiny_cfg, "--out", synth_out, "--seed", 1) == 0
    run_dir = synth_out / "runs/emargin-seed1"
    trace = (run_dir / "loss_trace.csv").read_text()
    ckpt = (run_dir / "checkpoint.emgn").read_bytes()
    assert trace.splitlines()[0] == "step,loss" and len(trace.splitlines()) == 6
    assert run("pretrain", "--config", tiny_cfg, "--out", synth_out, "--seed", 1) == 0
    assert (run_dir / "loss_trace.csv").read_text() == trace
    assert (run_dir / "checkpoint.emgn").read_bytes() == ckpt


def test_pretrain_infonce_and_iterations_flag(synth_out, tiny_cfg):
    assert run("pretrain", "--config", tiny_cfg, "--out", synth_out, "--loss", "infonce", "--iterations", 3) == 0
    lines = (synth_out / "runs/infonce-seed1/loss_trace.csv").read_text().splitlines()
    assert len(lines) == 4


def test_pretrain_missing_data(tmp_path, tiny_cfg, capsys):
    assert run("pretrain", "--config", tiny_cfg, "--out", tmp_path) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_pretrain_nonfinite_loss_exit_3(synth_out, tmp_path, capsys):
    cfg = dict(TINY, train={"iterations": 3, "learning_rate": 1e300})
    p = tmp_path / "huge.json"
    p.write_text(json.dumps(cfg))
    assert run("pretrain", "--config", p, "--out", synth_out) == 3


def test_eval_reports(synth_out, tiny_cfg):
    run("pretrain", "--config", tiny_cfg, "--out", synth_out, "--seed", 2)
    run_dir = synth_out / "runs/emargin-seed2"
    assert run("eval", "--config", tiny_cfg, "--out", synth_out, "--seed", 2, "--export-embeddings") == 0
    assert run("eval", "--config", tiny_cfg, "--out", synth_out, "--seed", 2, "--assignment", "labels") == 0
    km = json.loads((run_dir / "report-kmeans.json").read_text())
    lab = json.loads((run_dir / "report-labels.json").read_text())
    for rep in (km, lab):
        assert set(REPORT_FIELDS) <= set(rep)
        assert all(math.isfinite(rep[f]) for f in METRIC_FIELDS)
    assert (km["assignment"], lab["assignment"]) == ("kmeans", "labels")
    assert km["loss_kind"] == "emargin" and km["seed"] == 2
    header = (run_dir / "embeddings.csv").read_text().splitlines()[0]
    assert header == "seq_id,t,label," + ",".join(f"dim_{j}" for j in range(8))


def test_eval_checkpoint_path_uses_its_seed(synth_out, tiny_cfg):
    run("pretrain", "--config", tiny_cfg, "--out", synth_out, "--seed", 3)
    ck = synth_out / "runs/emargin-seed3/checkpoint.emgn"
    assert run("eval", "--config", tiny_cfg, "--out", synth_out, "--checkpoint", ck) == 0
    assert json.loads((synth_out / "runs/emargin-seed3/report-kmeans.json").read_text())["seed"] == 3


def test_eval_random_init(synth_out, tiny_cfg):
    assert run("eval", "--config", tiny_cfg, "--out", synth_out, "--random-init") == 0
    rep = json.loads((synth_out / "runs/random_init-seed1/report-kmeans.json").read_text())
    assert rep["loss_kind"] == "random_init"


def test_eval_k_mismatch_exit_2(synth_out, tmp_path):
    cfg = dict(TINY, eval={"per_class": 30, "k": 5, "probe": {"epochs": 5}})
    p = tmp_path / "k.json"
    p.write_text(json.dumps(cfg))
    assert run("eval", "--config", p, "--out", synth_out, "--random-init") == 2


def test_eval_missing_checkpoint(synth_out, tiny_cfg, capsys):
    assert run("eval", "--config", tiny_cfg, "--out", synth_out, "--seed", 9) == 1


def report(seed, value, loss="emargin", dataset="synth", k=3):
    r = {f: value for f in METRIC_FIELDS}
    r.update(dataset=dataset, seed=seed, loss_kind=loss, assignment="kmeans", k=k)
    return r


def test_compare_formatting():
    table = compare_reports([report(1, 1.0), report(2, 2.0), report(3, 3.0), report(1, 0.5, "infonce")])
    row = next(l for l in table.splitlines() if l.startswith("| emargin"))
    assert row.count("2.00±1.00") == len(METRIC_FIELDS)
    row = next(l for l in table.splitlines() if l.startswith("| infonce"))
    assert "0.50±0.00" in row


def test_compare_one_table_per_dataset():
    table = compare_reports([report(1, 1.0, dataset="ecg"), report(1, 1.0, dataset="harth")])
    assert "### ecg" in table and "### harth" in table


def test_compare_inconsistent_group():
    with pytest.raises(ConfigError):
        compare_reports([report(1, 1.0), report(1, 2.0)])
    with pytest.raises(ConfigError):
        compare_reports([report(1, 1.0), report(2, 2.0, k=4)])


def test_compare_command(tmp_path, capsys):
    for s in (1, 2, 3):
        d = tmp_path / "runs" / f"emargin-seed{s}"
        d.mkdir(parents=True)
        (d / "report-kmeans.json").write_text(json.dumps(report(s, float(s))))
    assert run("compare", "--out", tmp_path) == 0
    assert "2.00±1.00" in (tmp_path / "compare.md").read_text()
    assert run("compare", "--out", tmp_path, tmp_path / "nope.json") == 1


def test_config_presets_and_digest():
    harth = config_mod.resolve({"dataset": {"name": "harth"}})
    assert (harth["seq_len"], harth["split"]["train_fraction"], harth["train"]["loss"]["temperature"]) == (119, 0.5, 0.05)
    ecg = config_mod.resolve({"dataset": {"name": "ecg"}})
    assert ecg["train"]["loss"]["temperature"] == 0.5
    assert config_mod.digest(harth) == config_mod.digest(config_mod.resolve({"dataset": {"name": "harth"}}))
    assert config_mod.digest(harth) != config_mod.digest(ecg)
    with pytest.raises(ConfigError):
        config_mod.resolve({"train": {"batchsize": 4}})
