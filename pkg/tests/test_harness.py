import csv
import json

import numpy as np
import pytest

from sobdiff import harness as H
from sobdiff.buffer import Buffer
from sobdiff.cli import main

TINY = ["system_overrides={\"T\": 40}", "n_traj=2", "n_eval=3", "seeds=[0, 1]", "train.T_h=8", "train.T_a=4",
        "rollout.T_a=4", "train.n_pl=2", "train.hidden=[16, 16]", "bench_n_traj=[1, 2]",
        "bench_methods=[\"sob_diff\", \"mlp\", \"to_only\"]", "ta_sweep=[1, 2, 4]", "k_sweep=[1, 5]", "n_algo=2"]


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv(H.OUT_ENV, str(tmp_path / "out"))
    monkeypatch.delenv(H.TIMING_ENV, raising=False)
    return tmp_path / "out"


def tiny(name="r", **extra):
    over = TINY + [f"name={name}"] + [f"{k}={json.dumps(v)}" for k, v in extra.items()]
    return H.load_config(None, "pendulum", over)


def test_config_roundtrip_and_overrides(tmp_path):
    cfg = H.default_config("double_pendulum")
    assert cfg.n_max == 300 and cfg.train.T_h == 16 and cfg.rollout.T_a == 4
    assert H.RunConfig.from_dict(cfg.to_dict()) == cfg
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"system": "double_pendulum", "train": {"alpha_sob": 0.5}}))
    cfg = H.load_config(p, overrides=["train.n_pl=7", "seeds=[3]"])
    assert cfg.train.alpha_sob == 0.5 and cfg.train.n_pl == 7 and cfg.train.T_h == 16 and cfg.seeds == (3,)
    with pytest.raises(ValueError):
        H.load_config(None, "pendulum", ["train.nope=1"])
    with pytest.raises(ValueError):
        H.load_config(None, "pendulum", ["method=pid"])
    with pytest.raises(ValueError):
        H.load_config(None, "pendulum", ["seeds=[]"])


def test_cost_cap():
    assert H.cap_cost(12.0) == (12.0, False)
    assert H.cap_cost(2e5) == (H.COST_CAP, True)
    assert H.cap_cost(float("inf")) == (H.COST_CAP, True)


def test_histogram_accounts_for_every_instance():
    rng = np.random.default_rng(0)
    it = rng.integers(0, 301, size=57)
    h = H.iteration_histogram(it, 300, 20)
    assert sum(c for _, _, c in h) == 57
    assert h[0][0] == 0.0 and h[-1][1] == 300.0


def test_collect_writes_records_and_is_deterministic(out):
    cfg = tiny("c")
    paths = H.cmd_collect(cfg)
    first = [p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()]
    buf = Buffer.load(paths[0], cfg.spec)
    assert len(buf) == 2
    stats = json.loads((paths[0].parent / "collect_stats.json").read_text())
    assert stats["accepted"] == 2
    assert np.isclose(stats["rejection_rate"], stats["rejected"] / (stats["accepted"] + stats["rejected"]))
    H.cmd_collect(cfg)
    assert first == [p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()]


def test_train_and_eval_need_their_inputs(out):
    cfg = tiny("missing")
    with pytest.raises(FileNotFoundError):
        H.cmd_train(cfg)
    with pytest.raises(FileNotFoundError):
        H.cmd_eval(cfg)


def test_to_only_eval_converges(out):
    cfg = tiny("to")
    cfg.method = "to_only"
    paths = H.cmd_eval(cfg)
    rows = H.read_csv(paths[0])
    assert all(float(r["converged_rate"]) == 1.0 and float(r["mean_cost"]) < H.COST_CAP for r in rows)
    hist = H.read_csv(paths[2])
    for s in cfg.seeds:
        assert sum(int(r["count"]) for r in hist if int(r["seed"]) == s) == cfg.n_eval


def snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_cli_pipeline_is_byte_identical(out, tmp_path, monkeypatch, capsys):
    args = ["--system", "pendulum", "--name", "cli"] + sum((["--set", s] for s in TINY), [])
    for rep in range(2):
        monkeypatch.setenv(H.OUT_ENV, str(tmp_path / f"rep{rep}"))
        assert main(["collect"] + args) == 0
        assert main(["train"] + args) == 0
        assert main(["eval"] + args) == 0
        assert main(["eval"] + args + ["--sweep", "ta"]) == 0
        assert main(["eval"] + args + ["--sweep", "k"]) == 0
        assert main(["interplay"] + args) == 0
        assert main(["bench"] + args) == 0
        run = tmp_path / f"rep{rep}" / "cli"
        csvs = [run / "bench_summary.csv", run / "interplay_sob_diff.csv", run / "hist_interplay_sob_diff.csv",
                run / "ta_sweep_sob_diff.csv"]
        assert main(["plot"] + [str(c) for c in csvs]) == 0
    a, b = snapshot(tmp_path / "rep0"), snapshot(tmp_path / "rep1")
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []
    assert any(k.endswith(".svg") for k in a)
    rows = H.read_csv(tmp_path / "rep0" / "cli" / "interplay_sob_diff.csv")
    assert [int(r["iteration"]) for r in rows] == [1, 2, 1, 2]
    bench = H.read_csv(tmp_path / "rep0" / "cli" / "bench.csv")
    assert len(bench) == 2 * 2 * 3


def write(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)
    return path


def test_plot_edge_cases(tmp_path):
    cols = H.PLOT_KINDS["bench_summary"]
    empty = write(tmp_path / "bench_summary_empty.csv", cols, [])
    one = write(tmp_path / "bench_summary_one.csv", cols, [["sob_diff", 3, 10.0, 9.0, 11.0],
                                                             ["diff", 3, 20.0, 18.0, 22.0]])
    svgs = H.cmd_plot([empty, one])
    assert all(p.exists() and p.read_text().startswith("<?xml") for p in svgs)
    first = [p.read_bytes() for p in svgs]
    assert first == [p.read_bytes() for p in H.cmd_plot([empty, one])]
    bad = write(tmp_path / "bench_summary_bad.csv", ("method", "n_traj"), [["diff", 3]])
    with pytest.raises(ValueError, match="ci_lo"):
        H.cmd_plot([bad])
    with pytest.raises(ValueError):
        H.cmd_plot([write(tmp_path / "other.csv", ("a",), [])])


def test_timing_columns_only_when_requested(out, monkeypatch):
    cfg = tiny("tm")
    cfg.method = "to_only"
    cfg.seeds = (0,)
    header = H.read_csv(H.cmd_eval(cfg)[0])[0].keys()
    assert "wall_s" not in header
    monkeypatch.setenv(H.TIMING_ENV, "1")
    header = H.read_csv(H.cmd_eval(cfg)[0])[0].keys()
    assert "wall_s" in header
