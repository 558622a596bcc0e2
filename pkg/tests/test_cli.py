import csv
import subprocess
import sys

import pytest

from qope.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main, read_config_file
from qope.core import ConfigError

FAST = ["--mdn-epochs", "20", "--mdn-hidden", "8", "--mdn-components", "2", "--mc-samples", "5",
        "--gbdt-rounds", "20", "--grid-size", "19"]


def data_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))


def test_evaluate_single_tau(tmp_path, capsys):
    code = main(["evaluate", "--dgp", "single", "--df", "3", "--n", "500", "--tau", "0.5",
                 "--out", str(tmp_path)] + FAST)
    assert code == EXIT_OK
    rows = data_rows(tmp_path / "quantiles.csv")
    assert len(rows) == 1 and rows[0]["method"] == "dr"
    assert float(rows[0]["ci_lo"]) < float(rows[0]["eta_hat"]) < float(rows[0]["ci_hi"])
    mean = data_rows(tmp_path / "mean.csv")
    assert set(mean[0]) == {"Rquantile", "Rmean"}
    assert "tau=0.5" in capsys.readouterr().out


def test_evaluate_from_csv_with_three_taus(tmp_path):
    data = tmp_path / "d.csv"
    assert main(["simulate", "--dgp", "single", "--n", "400", "--out", str(data)]) == EXIT_OK
    out = tmp_path / "res"
    code = main(["evaluate", "--data", str(data), "--taus", "0.25,0.5,0.75", "--method", "ipw",
                 "--out", str(out)] + FAST)
    assert code == EXIT_OK
    rows = data_rows(out / "quantiles.csv")
    assert [float(r["tau"]) for r in rows] == [0.25, 0.5, 0.75]
    etas = [float(r["eta_hat"]) for r in rows]
    assert etas == sorted(etas)


def test_missing_tau_is_config_error(tmp_path, capsys):
    assert main(["evaluate", "--dgp", "single", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "usage" in capsys.readouterr().err


def test_malformed_csv_is_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("traj_id,stage,x_0,action,reward\n0,1,0.1,1,oops\n")
    assert main(["evaluate", "--data", str(bad), "--tau", "0.5", "--out", str(tmp_path)]) == EXIT_DATA
    assert "row 2" in capsys.readouterr().err


def test_unknown_preset(tmp_path):
    assert main(["experiment", "table9", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# quick run\ndgp = single\nn = 300\ntau = 0.25\nmethod=dm\nmdn-epochs = 20\n"
                   "mc_samples = 5\ngbdt-rounds = 20\ngrid-size = 9\n")
    code = main(["evaluate", "--config", str(cfg), "--tau", "0.75", "--out", str(tmp_path)])
    assert code == EXIT_OK
    rows = data_rows(tmp_path / "quantiles.csv")
    assert float(rows[0]["tau"]) == 0.75 and rows[0]["method"] == "dm"
    header = (tmp_path / "quantiles.csv").read_text()
    assert "# mdn.epochs=20" in header and "# dgp.n=300" in header


def test_bad_config_key(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("colour = blue\n")
    assert main(["evaluate", "--config", str(cfg), "--tau", "0.5"]) == EXIT_CONFIG
    cfg.write_text("no equals sign\n")
    with pytest.raises(ConfigError):
        read_config_file(cfg)


def test_experiment_is_deterministic(tmp_path):
    args = ["experiment", "table1", "--replicates", "1", "--dfs", "2", "--n", "300", "--seed", "3",
            "--threads", "1"] + FAST
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("table1_records.csv", "table1_summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fig3_preset(tmp_path):
    code = main(["experiment", "fig3", "--n", "400", "--taus", "0.25,0.75", "--out", str(tmp_path)] + FAST)
    assert code == EXIT_OK
    rows = data_rows(tmp_path / "fig3_records.csv")
    assert len(rows) == 2 and all(float(r["abs_error"]) < 0.2 for r in rows)


def test_inspect(tmp_path, capsys):
    data = tmp_path / "d.csv"
    main(["simulate", "--dgp", "two", "--n", "50", "--out", str(data)])
    assert main(["inspect", "--data", str(data)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "trajectories: 50" in out and "stages: 2" in out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "qope", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "evaluate" in res.stdout
