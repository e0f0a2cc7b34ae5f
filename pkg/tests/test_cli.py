import csv
import json
import os

import numpy as np
import pytest

from bonsai.cli import main, read_history
from bonsai.space import architecture_statistics, parse_genotype
from helpers import tiny_cfg


def write_cfg(path, **changes):
    doc = tiny_cfg(**changes).to_dict()
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def search_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root / "cfg.json", budget_bytes=10**9, cells=3, sections=3, epoch_budget=3)
    out = root / "search"
    assert main(["search", "--config", cfg, "--out", str(out)]) == 0
    return root, out


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_search_writes_the_run_directory(search_dir):
    _, out = search_dir
    for name in ("config.json", "history.csv", "final.genotype.json", "pruner_health.csv",
                 "checkpoint.bin", "summary.json"):
        assert (out / name).exists(), name
    assert len(read_history(out / "history.csv")) == 3
    saved = json.loads((out / "config.json").read_text())
    assert saved["output_dir"] == str(out) and saved["kind"] == "bonsai"


def test_rerun_from_archived_config_is_bit_identical(search_dir, tmp_path):
    _, out = search_dir
    again = tmp_path / "again"
    assert main(["search", "--config", str(out / "config.json"), "--out", str(again)]) == 0
    assert (again / "history.csv").read_bytes() == (out / "history.csv").read_bytes()
    assert (again / "final.genotype.json").read_bytes() == (out / "final.genotype.json").read_bytes()


def test_missing_config_is_a_usage_error(tmp_path, capsys):
    assert main(["search", "--config", str(tmp_path / "nope.json")]) == 1
    assert "does not exist" in capsys.readouterr().err


def test_bad_config_key_is_a_usage_error(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"celss": 3}))
    assert main(["search", "--config", str(p)]) == 1
    assert "celss" in capsys.readouterr().err


def test_no_command_is_a_usage_error(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1


def test_infeasible_budget_reports_minimum(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "cfg.json", budget_bytes=1000)
    assert main(["search", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "minimum budget" in err


def test_unconverged_search_exits_three(tmp_path, capsys):
    from test_scheduler import _budget_for_target
    base = tiny_cfg(epoch_budget=2, lambda_autoscale=False, lambda0=1e-4)
    cfg = write_cfg(tmp_path / "cfg.json", epoch_budget=2, lambda_autoscale=False, lambda0=1e-4,
                    budget_bytes=_budget_for_target(base, 0.02))
    out = tmp_path / "o"
    assert main(["search", "--config", cfg, "--out", str(out)]) == 3
    assert "did not converge" in capsys.readouterr().err
    assert json.loads((out / "summary.json").read_text())["failed_to_converge"] is True


def test_random_level_two(search_dir):
    root, out = search_dir
    assert main(["random", "--level", "2", "--reference", str(out), "--seed", "1"]) == 0
    rdir = root / "random-l2-seed1"
    rows = read_history(rdir / "history.csv")
    assert len(rows) == 3
    assert all(float(r["loss_comp"]) == 0.0 for r in rows)
    a = json.loads((out / "config.json").read_text())
    b = json.loads((rdir / "config.json").read_text())
    diff = {k for k in a if a[k] != b[k]}
    assert diff <= {"kind", "level", "seed", "output_dir"}, diff


def test_random_level_two_full_reference_keeps_every_gate(search_dir, capsys):
    root, out = search_dir
    # the open search ran with all targets at 1.0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["cell_ratios"] == [1.0, 1.0, 1.0]
    dest = root / "full-l2"
    assert main(["random", "--level", "2", "--reference", str(out), "--out", str(dest)]) == 0
    rs = json.loads((dest / "summary.json").read_text())
    assert rs["cell_ratios"] == [1.0, 1.0, 1.0]


def test_random_without_reference_fails(tmp_path, capsys):
    assert main(["random", "--level", "1", "--reference", str(tmp_path)]) == 1
    assert "summary.json" in capsys.readouterr().err


def test_enumerate_output(capsys):
    assert main(["enumerate", "--nodes", "1", "--ops", "2", "--cells", "2"]) == 0
    out = capsys.readouterr().out
    assert "first cell (1 input slot):   4 " in out
    assert "inter-cell connection sets, 2 cells: 1 " in out
    assert main(["enumerate"]) == 0
    out = capsys.readouterr().out
    assert "3e+29" in out and "254" in out


def test_report_single_run(search_dir, tmp_path):
    _, out = search_dir
    rep = tmp_path / "rep"
    assert main(["report", str(out), "--out", str(rep)]) == 0
    table = _rows(rep / "table1.csv")
    assert len(table) == 1 and table[0]["runs"] == "1" and table[0]["val_acc_sem"] == ""
    genotype = parse_genotype((out / "final.genotype.json").read_text())
    surviving = sum(len(e.ops) for c in genotype.cells for n in c.nodes for e in n.edges)
    assert sum(int(r["count"]) for r in _rows(rep / "op_frequency.csv")) == surviving
    optional = sum(len(c.optional_inputs) for c in genotype.cells)
    assert sum(int(r["count"]) for r in _rows(rep / "distance_histogram.csv")) == optional
    assert len(_rows(rep / "series.csv")) == 3


def test_report_aggregates_seeds(search_dir, tmp_path):
    _, out = search_dir
    dirs = []
    for s, acc in enumerate((0.5, 0.6, 0.9)):
        d = tmp_path / f"r{s}"
        d.mkdir()
        for name in ("final.genotype.json", "history.csv"):
            (d / name).write_bytes((out / name).read_bytes())
        summary = json.loads((out / "summary.json").read_text())
        summary["final_val_acc"] = acc
        (d / "summary.json").write_text(json.dumps(summary))
        dirs.append(str(d))
    rep = tmp_path / "rep"
    assert main(["report", *dirs, "--out", str(rep)]) == 0
    row = _rows(rep / "table1.csv")[0]
    assert float(row["val_acc_mean"]) == pytest.approx(2 / 3)
    assert float(row["val_acc_sem"]) == pytest.approx(np.std([0.5, 0.6, 0.9], ddof=1) / np.sqrt(3))


def test_report_skips_malformed_dirs(search_dir, tmp_path, capsys):
    _, out = search_dir
    junk = tmp_path / "junk"
    junk.mkdir()
    assert main(["report", str(junk), "--out", str(tmp_path / "a")]) == 2
    assert main(["report", str(junk), str(out), "--out", str(tmp_path / "b")]) == 0
    assert "skipping" in capsys.readouterr().err
