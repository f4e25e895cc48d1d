import json

import pytest

from weakseg3d.cli import (ConfigError, RunConfig, emit_plot_data, load_config, load_run, main)
from weakseg3d.evaluation import REPORT_COLUMNS, EvalReport
from weakseg3d.model import Hyperparams

FAST = ["--epochs", "12", "--pseudo-start", "6", "--hidden", "16", "--lr", "0.1"]


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A scene, clicks, a partition, one click and one weak run, and their reports."""
    d = tmp_path_factory.mktemp("cli")
    assert _run("gen", "--out", d / "s.cs", "--scene-num-instances", 3, "--scene-seed", 4) == 0
    assert _run("annotate", "--scene", d / "s.cs", "--out", d / "c.txt", "--m", 1) == 0
    assert _run("partition", "--scene", d / "s.cs", "--clicks", d / "c.txt", "--out", d / "p.txt") == 0
    for v in ("click", "weak"):
        assert _run("train", "--scenes", d / "s.cs", "--clicks", d / "c.txt", "--out", d / v,
                    "--version", v, *FAST) == 0
        assert _run("eval", "--run", d / v, "--scenes", d / "s.cs", "--out", d / f"{v}_eval") == 0
    return d


def test_chain_produces_report(workdir):
    rep = EvalReport.from_json((workdir / "click_eval.json").read_text())
    assert 0.0 <= rep.map50 <= 1.0 and 0.0 <= rep.miou <= 1.0
    assert rep.meta["version"] == "click" and rep.meta["similarity"] == "emb+spa+sem"
    assert EvalReport.from_json((workdir / "weak_eval.json").read_text()).meta["similarity"] == "weak"
    assert (workdir / "s.cs.config.json").exists()
    assert (workdir / "p.txt.weak").exists()


def test_run_directory_round_trip(workdir):
    run, cfg = load_run(workdir / "click")
    assert cfg.version == "click" and cfg.hyperparams.epochs == 12
    assert len(run.records) == 12
    assert run.pseudo_curve()[0][0] == 6


def test_infer_outputs(workdir):
    assert _run("infer", "--run", workdir / "click", "--scene", workdir / "s.cs", "--out", workdir / "pred") == 0
    points = (workdir / "pred.points.txt").read_text().splitlines()
    assert points[0] == "point cluster class"
    assert len(points) - 1 == sum(1 for line in (workdir / "s.cs").read_text().splitlines()[1:] if line)
    assert (workdir / "pred.instances.txt").read_text().startswith("cluster class confidence size\n")


def test_report_rows_share_schema(workdir, capsys):
    assert _run("report", "--runs", workdir / "click_eval.json", workdir / "weak_eval.json") == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split("\t") == list(REPORT_COLUMNS)
    assert [line.split("\t")[0] for line in lines[1:]] == ["click_eval", "weak_eval"]
    assert {len(line.split("\t")) for line in lines} == {len(REPORT_COLUMNS)}


def test_plot_data_copies_records(workdir):
    assert _run("plot-data", "--runs", workdir / "click", "--reports", workdir / "click_eval.json",
                "--out", workdir / "fig") == 0
    rows = [r.split("\t") for r in (workdir / "fig.curve.tsv").read_text().splitlines()]
    assert rows[0] == ["epoch", "click"]
    run, _ = load_run(workdir / "click")
    assert [(int(e), float(a)) for e, a in rows[1:]] == run.pseudo_curve()
    assert all(int(e) >= 6 for e, _ in rows[1:])
    bars = (workdir / "fig.bars.tsv").read_text().splitlines()
    assert bars[0] == "name\tmap50\tmiou\tpseudo_acc" and len(bars) == 2


def test_plot_data_two_runs(workdir):
    runs = [("a", load_run(workdir / "click")[0]), ("b", load_run(workdir / "weak")[0])]
    emit_plot_data(runs, workdir / "two")
    rows = (workdir / "two.curve.tsv").read_text().splitlines()
    assert rows[0] == "epoch\ta\tb"
    assert all(r.endswith("\tnan") for r in rows[1:])
    with pytest.raises(ValueError):
        emit_plot_data([], workdir / "none")


def test_config_file_and_flag_override(tmp_path):
    cfg = RunConfig(hyperparams=Hyperparams(lr=0.05), version="weak")
    (tmp_path / "cfg.json").write_text(cfg.to_json())
    assert load_config(tmp_path / "cfg.json") == cfg
    assert _run("gen", "--config", tmp_path / "cfg.json", "--scene-seed", 9, "--out", tmp_path / "s.cs") == 0
    written = load_config(tmp_path / "s.cs.config.json")
    assert written.scene.seed == 9 and written.hyperparams.lr == 0.05 and written.version == "weak"


def test_config_round_trip_and_unknown_fields():
    cfg = RunConfig().with_overrides({"scene": {"classes": ["ball"], "points_per_instance": [5, 9]}})
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg
    with pytest.raises(ConfigError, match="scene.colour: unknown field"):
        RunConfig.from_dict({"scene": {"colour": 1}})
    with pytest.raises(ConfigError, match="unknown config section"):
        RunConfig.from_dict({"model": {}})
    with pytest.raises(ConfigError, match="hyperparams"):
        RunConfig.from_dict({"hyperparams": {"delta_v": 5.0}})


def test_output_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("WEAKSEG3D_OUTPUT_DIR", str(tmp_path))
    assert _run("gen", "--out", "rel.cs", "--scene-num-instances", 2) == 0
    assert (tmp_path / "rel.cs").exists()
    assert _run("annotate", "--scene", "rel.cs", "--out", "rel_c.txt") == 0
    assert (tmp_path / "rel_c.txt").exists()


def _err(capsys):
    return capsys.readouterr().err.strip()


def test_unknown_flag(capsys):
    assert _run("gen", "--out", "x.cs", "--colour", 3) == 2
    msg = _err(capsys)
    assert msg.startswith("weakseg3d: error: usage:") and "--colour" in msg and "\n" not in msg


def test_missing_file(tmp_path, capsys):
    assert _run("annotate", "--scene", tmp_path / "nope.cs", "--out", tmp_path / "c.txt") == 1
    assert "missing-file" in _err(capsys)


def test_invariant_violation(tmp_path, capsys):
    assert _run("gen", "--out", tmp_path / "x.cs", "--delta-v", 3.0) == 1
    assert "config: hyperparams" in _err(capsys)


def test_bad_scene_file(tmp_path, capsys):
    (tmp_path / "bad.cs").write_text("")
    assert _run("annotate", "--scene", tmp_path / "bad.cs", "--out", tmp_path / "c.txt") == 1
    assert "missing header" in _err(capsys)


def test_suite_generation(tmp_path):
    assert _run("gen", "--suite", "easy", "--split", "eval", "--out", tmp_path / "easy") == 0
    assert len(list((tmp_path / "easy").glob("scene_*.cs"))) == 20
    assert len(list((tmp_path / "easy").glob("clicks_*.txt"))) == 20
