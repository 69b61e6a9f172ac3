import json

import numpy as np
import pytest

from tppgen.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser, main
from tppgen.data import load_jsonl
from tppgen.errors import SchemaError
from tppgen.inference import read_dynamics_csv
from tppgen.model import ModelConfig, TPPModel
from tppgen.training import read_log


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A small simulated dataset plus a briefly trained model shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--types", "3", "--n", "30", "--horizon", "40", "--seed", "7",
                 "--out", str(root / "sim")]) == EXIT_OK
    assert main(["train", "--data", str(root / "sim" / "data.jsonl"), "--out", str(root / "run"),
                 "--decoder", "tcddm", "--dim", "8", "--epochs", "2", "--batch-size", "8",
                 "--seed", "1"]) == EXIT_OK
    return root


def test_zero_sequences_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--n", "0", "--out", str(tmp_path)])
    assert exc.value.code == EXIT_USAGE


def test_unknown_flag_rejected(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", "x", "--out", str(tmp_path), "--bogus"])
    assert exc.value.code == EXIT_USAGE


def test_help_lists_every_subcommand(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--help"])
    text = capsys.readouterr().out
    for name in ("simulate", "train", "evaluate", "sample", "dynamics", "grid"):
        assert name in text


def test_simulate_outputs_and_determinism(workdir, tmp_path):
    sim = workdir / "sim"
    ds = load_jsonl(sim / "data.jsonl")
    assert len(ds) == 30 and ds.num_marks <= 3
    kernels = json.loads((sim / "kernels.json").read_text())
    assert np.array(kernels["kinds"]).shape == (3, 3)
    assert kernels["spectral_radius"] < 1
    stats = json.loads((sim / "stats.json").read_text())
    assert stats["num_sequences"] == 30
    assert main(["simulate", "--types", "3", "--n", "30", "--horizon", "40", "--seed", "7",
                 "--out", str(tmp_path)]) == EXIT_OK
    for name in ("data.jsonl", "kernels.json", "stats.json"):
        assert (tmp_path / name).read_bytes() == (sim / name).read_bytes()


def test_train_artifacts(workdir):
    run = workdir / "run"
    rows = read_log(run / "train_log.csv")
    assert [r["epoch"] for r in rows] == [1, 2]
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["decoder"] == "tcddm" and cfg["dim"] == 8
    model, header = TPPModel.load(run / "model.ckpt")
    assert header["split_seed"] == 1 and header["t_max"] > 0
    assert set(json.loads((run / "stats.json").read_text())) >= {"mean_log", "var_log", "t_max"}


def test_evaluate_report_and_similarity(workdir, tmp_path):
    out = tmp_path / "report.json"
    args = ["evaluate", "--ckpt", str(workdir / "run" / "model.ckpt"), "--data",
            str(workdir / "sim" / "data.jsonl"), "-S", "20", "--out", str(out)]
    assert main(args) == EXIT_OK
    rep = json.loads(out.read_text())
    assert set(rep) >= {"mape", "crps", "qqp_dev", "top1_acc", "top3_acc", "S", "n_events", "exclusions"}
    assert rep["S"] == 20
    sim = np.loadtxt(tmp_path / "report_similarity.csv", delimiter=",", ndmin=2)
    np.testing.assert_allclose(np.diag(sim), 1.0)
    first = out.read_text()
    assert main(args) == EXIT_OK
    assert out.read_text() == first


def test_evaluate_untrained_model(workdir, tmp_path):
    ck = tmp_path / "fresh.ckpt"
    ref, header = TPPModel.load(workdir / "run" / "model.ckpt")
    fresh = TPPModel(ref.config, ref.stats, seed=9)
    fresh.save(ck, {k: header[k] for k in ("split_seed", "t_max", "num_marks")})
    assert main(["evaluate", "--ckpt", str(ck), "--data", str(workdir / "sim" / "data.jsonl"),
                 "-S", "10", "--out", str(tmp_path / "r.json")]) == EXIT_OK


def test_sample_deterministic_rollout(workdir, tmp_path):
    base = ["sample", "--ckpt", str(workdir / "run" / "model.ckpt"), "--n", "2", "--horizon", "5",
            "-S", "10", "--seed", "3"]
    assert main(base + ["--deter", "--out", str(tmp_path / "a.jsonl")]) == EXIT_OK
    assert main(base + ["--deter", "--out", str(tmp_path / "b.jsonl")]) == EXIT_OK
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()
    ds = load_jsonl(tmp_path / "a.jsonl")
    for s in ds:
        assert np.all(np.diff(s.timestamps) > 0) and (len(s) == 0 or s.timestamps[-1] <= 5)


def test_dynamics_csv(workdir, tmp_path):
    out = tmp_path / "dyn.csv"
    assert main(["dynamics", "--ckpt", str(workdir / "run" / "model.ckpt"), "--chains", "200",
                 "--every", "10", "--out", str(out)]) == EXIT_OK
    rows = read_dynamics_csv(out)
    assert [r["step"] for r in rows] == list(range(0, 101, 10))
    assert all(sum(r["hist_counts"]) == 200 for r in rows)


def test_grid_table(workdir, tmp_path):
    out = tmp_path / "grid.csv"
    assert main(["grid", "--data", str(workdir / "sim" / "data.jsonl"), "--out", str(out),
                 "--lrs", "1e-3", "--dims", "8", "--layer-grid", "1", "2", "--epochs", "1",
                 "--decoder", "gauss", "--batch-size", "8"]) == EXIT_OK
    assert len(out.read_text().strip().splitlines()) == 3


def test_missing_data_is_data_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == EXIT_DATA


def test_bad_dim_is_usage_error(workdir, tmp_path):
    assert main(["train", "--data", str(workdir / "sim" / "data.jsonl"), "--out", str(tmp_path),
                 "--dim", "10"]) == EXIT_USAGE


def test_checkpoint_mismatch(workdir, tmp_path):
    ck = workdir / "run" / "model.ckpt"
    with pytest.raises(SchemaError):
        TPPModel.load(ck, expect=ModelConfig(decoder="tcnsn", dim=8, num_marks=3))
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(ck.read_bytes()[:-16])
    assert main(["evaluate", "--ckpt", str(bad), "--data", str(workdir / "sim" / "data.jsonl"),
                 "--out", str(tmp_path / "r.json")]) == EXIT_DATA
