import csv

import pytest

from caap.cli import build_config, build_parser, main

TINY = ["--epochs", "1", "--freq-sea", "1", "--batch-size", "8", "--policy-lr", "0.01"]


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.bin"
    assert main(["gen-data", "--seed", "1", "--out", str(path), "--counts", "6,6,6"]) == 0
    return path


def run_args(cmd, data, out, *extra):
    return [cmd, "--seed", "2", "--data", str(data), "--out", str(out), *TINY, *extra]


def test_seed_is_mandatory(data_file, tmp_path):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["search", "--data", str(data_file), "--out", str(tmp_path)])


def test_flags_override_config(tmp_path):
    (tmp_path / "c.yaml").write_text("epochs: 9\nalpha: 0.2\nsearch:\n  n_ops: 3\n")
    args = build_parser().parse_args(
        ["search", "--seed", "5", "--data", "synthetic", "--out", str(tmp_path), "--config", str(tmp_path / "c.yaml"),
         "--epochs", "4", "--no-info-region", "--scaling", "--thres", "50"]
    )
    cfg = build_config(args)
    assert (cfg.seed, cfg.epochs, cfg.alpha, cfg.search.n_ops) == (5, 4, 0.2, 3)
    assert cfg.use_info_region is False and cfg.enable_scaling_transform is True
    assert cfg.region.thres == 50.0 and cfg.use_regulation is True


def test_gen_data_csv(tmp_path, capsys):
    assert main(["gen-data", "--seed", "0", "--out", str(tmp_path / "d.csv"), "--format", "csv", "--counts", "3,3,3"]) == 0
    assert "oracle nearest-centroid accuracy" in capsys.readouterr().out
    assert (tmp_path / "d.meta.json").exists()
    with open(tmp_path / "d.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 10 and rows[0][:3] == ["id", "label", "c0_t0"]


def test_search_train_baseline_eval_flow(data_file, tmp_path, capsys):
    s, t, b, e = (tmp_path / n for n in ("s", "t", "b", "e"))
    assert main(run_args("search", data_file, s)) == 0
    for name in ("search_model.ckpt", "policy_net.ckpt", "regulation.json", "search_log.csv", "config.json"):
        assert (s / name).exists()
    assert main(run_args("train", data_file, t, "--search-dir", str(s))) == 0
    assert (t / "policies.csv").exists() and (t / "predictions_caap.csv").exists()
    assert main(run_args("baseline", data_file, b, "--kind", "noaug")) == 0
    assert main(run_args("baseline", data_file, b, "--kind", "uniform")) == 0
    capsys.readouterr()
    assert main(["eval", "--noaug", str(b / "predictions_noaug.csv"), "--preds", str(t / "predictions_caap.csv"),
                 str(b / "predictions_uniform.csv"), "--num-classes", "3", "--out", str(e)]) == 0
    out = capsys.readouterr().out
    assert "caap.swise_macro_gain=" in out and "uniform.accuracy=" in out
    assert "noaug.swise_macro_bias=0.000000" in out


def test_sweep_command(data_file, tmp_path):
    out = tmp_path / "sw"
    assert main(run_args("sweep-noaug", data_file, out, "--percentages", "0,50,100")) == 0
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert [float(r["q"]) for r in rows] == [0.0, 50.0, 100.0]
    assert rows[-1]["swise_bias"] == "0.000000" and rows[-1]["swise_improve"] == "0.000000"
    assert "argmax_q_accuracy=" in (out / "summary.txt").read_text()
    assert (out / "sweep.svg").read_text().startswith("<svg")


def test_report_command(data_file, tmp_path):
    out = tmp_path / "r"
    assert main(run_args("report", data_file, out, "--fold-only", "--methods", "noaug,uniform")) == 0
    assert (out / "metrics.csv").exists() and (out / "summary.txt").exists()
    methods = {r["method"] for r in csv.DictReader(open(out / "metrics.csv"))}
    assert methods == {"noaug", "uniform"}
