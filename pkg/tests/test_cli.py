import csv
from pathlib import Path

import pytest

from flipsim import cli, guidance as gd
from flipsim.errors import ConfigurationError, ParseError
from flipsim.federation import FederationConfig
from flipsim.metrics import read_reports_csv

SMALL = """\
[federation]
C = 10
K = 3
R = {R}
E = 1
lr = 0.01
E_exp = 3
patience = 2
hidden = 8
{extra}
[data]
num_classes = 5
per_class = 20
n_features = 8

[experiment]
repeat = {repeat}
{sweep}"""


def write_config(tmp_path, R=3, repeat=1, extra="", sweep="", name="exp.ini"):
    path = tmp_path / name
    path.write_text(SMALL.format(R=R, repeat=repeat, extra=extra, sweep=sweep))
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- parsing


def test_preset_holds_reference_values():
    spec = cli.parse_config("preset:mnist_like_pathological")
    c = spec.config
    assert (c.C, c.K, c.R, c.B, c.E, c.lr, c.E_exp, c.patience, c.T_p) == (20, 5, 200, 32, 10, 0.001, 150, 20, 0.3)
    assert spec.data["source"] == "synthetic_blobs" and spec.repeat == 1


def test_parse_types(tmp_path):
    spec = cli.parse_config(write_config(tmp_path, extra="C_exp = 4\nserver_momentum = none\nweighted_aggregation = yes\n"))
    assert spec.config.C_exp == 4 and isinstance(spec.config.C_exp, int)
    assert spec.config.server_momentum is None and spec.config.weighted_aggregation is True
    spec = cli.parse_config(write_config(tmp_path, extra="C_exp = 0.5\n"))
    assert spec.config.n_explorers == 5


@pytest.mark.parametrize("extra,needle", [("T_p = 1.5\n", "T_p"), ("C_exp = 11\n", "C_exp"), ("gamma = 3\n", "gamma"),
                                          ("weight_decay = heavy\n", "weight_decay")])
def test_federation_errors_name_field(tmp_path, extra, needle):
    with pytest.raises(ConfigurationError, match=needle):
        cli.parse_config(write_config(tmp_path, extra=extra))


def test_empty_and_missing_files(tmp_path):
    (tmp_path / "empty.ini").write_text("  \n")
    with pytest.raises(ConfigurationError, match="empty"):
        cli.parse_config(tmp_path / "empty.ini")
    with pytest.raises(ConfigurationError, match="not found"):
        cli.parse_config(tmp_path / "nope.ini")
    (tmp_path / "junk.ini").write_text("no section header\n")
    with pytest.raises(ParseError):
        cli.parse_config(tmp_path / "junk.ini")


def test_unknown_sections_and_keys(tmp_path):
    (tmp_path / "a.ini").write_text("[federation]\nC = 4\nK = 2\n[extras]\nx = 1\n")
    with pytest.raises(ConfigurationError, match="extras"):
        cli.parse_config(tmp_path / "a.ini")
    (tmp_path / "b.ini").write_text("[data]\nsource = synthetic_blobs\ncolour = red\n")
    with pytest.raises(ConfigurationError, match="colour"):
        cli.parse_config(tmp_path / "b.ini")
    (tmp_path / "c.ini").write_text("[experiment]\nrepeat = 0\n")
    with pytest.raises(ConfigurationError, match="repeat"):
        cli.parse_config(tmp_path / "c.ini")


def test_sweep_axes_validated(tmp_path):
    spec = cli.parse_config(write_config(tmp_path, sweep="[sweep]\nT_p = 0.1, 0.2, 0.3, 0.4, 0.5\n"))
    assert spec.sweep == {"T_p": [0.1, 0.2, 0.3, 0.4, 0.5]}
    with pytest.raises(ConfigurationError, match="T_p"):
        cli.parse_config(write_config(tmp_path, sweep="[sweep]\nT_p = 0.1, 2.0\n"))
    with pytest.raises(ConfigurationError, match="empty"):
        cli.parse_config(write_config(tmp_path, sweep="[sweep]\nT_p = ,\n"))


def test_csv_path_resolves_next_to_config(tmp_path):
    (tmp_path / "px.csv").write_text("0,0.1,0.2\n1,0.9,0.8\n")
    (tmp_path / "csv.ini").write_text("[data]\nsource = image_csv\npath = px.csv\n")
    spec = cli.parse_config(tmp_path / "csv.ini")
    assert len(cli.load_dataset(spec.data)) == 2


# ---------------------------------------------------------------- commands


def test_run_writes_artifacts_and_refuses_rerun(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("rounds.csv", "guidance.afg", "summary.txt", "costs.csv", "repeat_00/rounds.csv"):
        assert (out / name).exists()
    assert len(read_reports_csv(out / "rounds.csv")) == 3
    assert gd.load_guidance(out / "guidance.afg").round == 3
    assert "final_accuracy_std = 0\n" in (out / "summary.txt").read_text(encoding="utf-8")
    assert cli.main(["run", "--config", str(cfg), "--out", str(out)]) == 2
    assert "--force" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(cfg), "--out", str(out), "--force"]) == 0


def test_run_repeats_use_consecutive_seeds(tmp_path):
    out = tmp_path / "run"
    cli.main(["run", "--config", str(write_config(tmp_path, repeat=3)), "--out", str(out), "--seed", "7"])
    summary = cli.read_summary(out)
    assert summary["seeds"] == "7 8 9" and summary["repeats"] == "3"
    finals = [read_reports_csv(out / f"repeat_{i:02d}" / "rounds.csv")[-1].test_accuracy for i in range(3)]
    assert float(summary["final_accuracy_mean"]) == pytest.approx(sum(finals) / 3, rel=1e-5)


def test_invalid_config_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path, extra="T_p = 1.5\n")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "T_p" in capsys.readouterr().err


def test_outputs_are_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    for name in ("a", "b"):
        cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / name)])
    for f in ("rounds.csv", "guidance.afg", "costs.csv", "summary.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_sweep_cells_and_seeds(tmp_path):
    cfg = write_config(tmp_path, R=2, sweep="[sweep]\nT_p = 0.1, 0.2, 0.3, 0.4, 0.5\n")
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(out), "--threads", "2"]) == 0
    table = rows(out / "sweep.csv")
    assert [r["T_p"] for r in table] == ["0.1", "0.2", "0.3", "0.4", "0.5"]
    assert cli.read_summary(out / "cell_003")["seeds"] == "3000"


def test_noise_grid_layout(tmp_path):
    sweep = "[sweep]\nnoise_sigma = 0.01, 0.1\nnoise_client_fraction = 0.2, 0.4\n"
    cfg = write_config(tmp_path, R=1, extra="noise = gaussian\nalgorithm = fedavg\n", sweep=sweep)
    out = tmp_path / "grid"
    cli.main(["sweep", "--config", str(cfg), "--out", str(out)])
    table = rows(out / "sweep.csv")
    assert [(r["noise_sigma"], r["noise_client_fraction"]) for r in table] == \
        [("0.01", "0.2"), ("0.01", "0.4"), ("0.1", "0.2"), ("0.1", "0.4")]


def test_single_point_sweep_equals_run(tmp_path):
    cfg = write_config(tmp_path, repeat=2, sweep="[sweep]\nT_p = 0.3\n")
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "run")])
    cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "sw")])
    for f in ("rounds.csv", "summary.txt", "repeat_01/rounds.csv"):
        assert (tmp_path / "run" / f).read_bytes() == (tmp_path / "sw" / "cell_000" / f).read_bytes()


def test_sweep_without_axes(tmp_path):
    assert cli.main(["sweep", "--config", str(write_config(tmp_path)), "--out", str(tmp_path / "x")]) == 2


def test_compare_self_and_exploration_items(tmp_path, capsys):
    cfg = write_config(tmp_path)
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "auto")])
    fed_cfg = write_config(tmp_path, extra="algorithm = fedavg\n", name="fed.ini")
    cli.main(["run", "--config", str(fed_cfg), "--out", str(tmp_path / "fed")])
    run = str(tmp_path / "auto")
    assert cli.main(["compare", run, run, str(tmp_path / "fed"), "--out", str(tmp_path), "--target", "0"]) == 0
    table = rows(tmp_path / "compare.csv")
    a, b, f = table
    assert {k: v for k, v in a.items()} == {k: v for k, v in b.items()}
    assert a["rounds_to_target"] == "1"
    costs = {r["item"]: r for r in rows(tmp_path / "auto" / "costs.csv")}
    explore = int(costs["exploration"]["comm_up_bytes"]) + int(costs["exploration"]["comm_down_bytes"])
    assert int(a["exploration_comm_bytes"]) == explore > 0
    assert int(a["total_comm_bytes"]) == explore + int(a["training_comm_bytes"])
    assert int(a["total_flops"]) > int(a["training_flops"])
    assert f["exploration_comm_bytes"] == "0" and f["total_flops"] == f["training_flops"]


def test_compare_missing_dir(tmp_path, capsys):
    assert cli.main(["compare", str(tmp_path / "ghost")]) == 2
    assert "ghost" in capsys.readouterr().err


def test_explore_only(tmp_path):
    out = tmp_path / "ex"
    assert cli.main(["explore-only", "--config", str(write_config(tmp_path)), "--out", str(out)]) == 0
    state = gd.load_guidance(out / "guidance.afg")
    assert state.round == 0 and 0.0 <= state.G.min() and state.G.max() <= 1.0
    assert len(rows(out / "exploration.csv")) == 10


def test_debug_logging_turns_on_transport_check(tmp_path, monkeypatch, caplog):
    monkeypatch.setenv("FLIPSIM_LOG", "debug")
    with caplog.at_level("DEBUG"):
        cli.main(["run", "--config", str(write_config(tmp_path, R=1)), "--out", str(tmp_path / "dbg")])
    assert "sparse/dense aggregation match" in caplog.text
    monkeypatch.setenv("FLIPSIM_LOG", "loud")
    assert cli.main(["run", "--config", str(write_config(tmp_path)), "--out", str(tmp_path / "z")]) == 2


def test_resume_continues_checkpoint(tmp_path):
    first = write_config(tmp_path, R=2, extra="", name="a.ini")
    (tmp_path / "a.ini").write_text(first.read_text() + "checkpoint_every = 1\n")
    out = tmp_path / "r"
    cli.main(["run", "--config", str(tmp_path / "a.ini"), "--out", str(out)])
    longer = write_config(tmp_path, R=4, name="b.ini")
    (tmp_path / "b.ini").write_text(longer.read_text() + "checkpoint_every = 1\n")
    cli.main(["run", "--config", str(tmp_path / "b.ini"), "--out", str(out), "--resume"])
    cli.main(["run", "--config", str(tmp_path / "b.ini"), "--out", str(tmp_path / "straight")])
    assert (out / "rounds.csv").read_bytes() == (tmp_path / "straight" / "rounds.csv").read_bytes()


def test_readme_schema_documents_defaults(tmp_path):
    readme = (Path(__file__).resolve().parents[1] / "README.md").read_text()
    block = readme.split("```ini\n", 1)[1].split("```", 1)[0]
    (tmp_path / "schema.ini").write_text(block)
    spec = cli.parse_config(tmp_path / "schema.ini")
    assert spec.config == FederationConfig()
    assert spec.sweep == {"T_p": [0.1, 0.2, 0.3]}
    assert (spec.repeat, spec.target_accuracy, spec.checkpoint_every) == (1, 0.75, 0)


def test_summary_reports_rounds_to_target(tmp_path):
    cfg = write_config(tmp_path, repeat=2)
    (tmp_path / "t.ini").write_text(cfg.read_text() + "target_accuracy = 0\n")
    cli.main(["run", "--config", str(tmp_path / "t.ini"), "--out", str(tmp_path / "o")])
    summary = cli.read_summary(tmp_path / "o")
    assert summary["rounds_to_target"] == "1 1"
