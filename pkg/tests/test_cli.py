import csv
import json

import numpy as np
import pytest

from fedst.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from fedst.config import dump_config, load_config, parse_config
from fedst.errors import ConfigError

from _oracles import TINY_INI as TINY


@pytest.fixture
def cfg_path(tmp_path, monkeypatch):
    monkeypatch.delenv("FEDST_OUTPUT_DIR", raising=False)
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


@pytest.fixture
def generated(cfg_path):
    assert main(["gen", str(cfg_path)]) == EXIT_OK
    return cfg_path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# =================================================================== config

def test_config_parses_keys_and_resolves_paths(cfg_path):
    cfg = load_config(cfg_path)
    assert cfg.train.rounds == 2 and cfg.train.local_steps == 2
    assert cfg.model.pools == (7, 2, 1, 1) and cfg.model.frames == 4
    assert [s.name for s in cfg.sites] == ["A", "B"] and cfg.sites[1].family == "C"
    assert cfg.data.dir == cfg_path.parent / "data"
    again = parse_config(dump_config(cfg), base_dir="/elsewhere")
    assert again.train == cfg.train and again.model == cfg.model and again.data == cfg.data


@pytest.mark.parametrize("old,new", [("T = 2", "T = -1"), ("T = 2", "T = 2\nbogus = 1"),
                                     ("h0 = 28", "h0 = many"), ("seed = 0", "seed = 0\nmu = 2"),
                                     ("[serq]", "[indicator]\nkind = psychic\n\n[serq]"),
                                     ("id = 1", "id = 0"), ("[site.B]", "[site.E]")])
def test_invalid_configs_raise(old, new):
    assert old in TINY
    with pytest.raises(ConfigError):
        parse_config(TINY.replace(old, new, 1))


def test_output_dir_override(cfg_path, monkeypatch, tmp_path):
    monkeypatch.setenv("FEDST_OUTPUT_DIR", str(tmp_path / "elsewhere"))
    assert load_config(cfg_path).output_dir == tmp_path / "elsewhere"


# ====================================================================== gen

def test_gen_writes_k_plus_two_files_and_refuses_overwrite(generated, capsys):
    files = sorted(p.name for p in (generated.parent / "data").iterdir())
    assert files == ["outfed_E.fstd", "site_A.fstd", "site_B.fstd", "synth.fstd"]
    before = (generated.parent / "data" / "site_A.fstd").read_bytes()
    assert main(["gen", str(generated)]) == EXIT_DATA
    assert "force" in capsys.readouterr().err
    assert main(["gen", str(generated), "--force"]) == EXIT_OK
    assert (generated.parent / "data" / "site_A.fstd").read_bytes() == before


def test_gen_rejects_clip_counts_that_split_a_video(cfg_path):
    cfg_path.write_text(TINY.replace("clips = 8\nseed = 1", "clips = 6\nseed = 1"))
    assert main(["gen", str(cfg_path)]) == EXIT_CONFIG


# ====================================================================== run

def test_run_writes_the_run_directory(generated):
    assert main(["run", str(generated), "--method", "fedst"]) == EXIT_OK
    run = generated.parent / "runs" / "tiny" / "fedst"
    for name in ("config.ini", "seeds.json", "metrics.csv", "outfed.csv", "traffic.csv", "curves.svg",
                 "server.json", "checkpoints/site_A.npz", "checkpoints/site_B.npz", "checkpoints/global.npz"):
        assert (run / name).is_file(), name
    rows = _rows(run / "metrics.csv")
    assert len(rows) == 2 * 2 * 3   # rounds x sites x classes
    traffic = _rows(run / "traffic.csv")
    assert [r["round"] for r in traffic] == ["1", "2", "final"]
    assert int(traffic[-1]["messages"]) == 2 * 2 * 2 + 2
    assert json.loads((run / "server.json").read_text())["steps"] == 2 * 2
    assert json.loads((run / "seeds.json").read_text())["site_streams"]["B"] == [0, 1, 1]
    assert main(["run", str(generated), "--method", "fedst"]) == EXIT_DATA   # no silent overwrite


def test_local_method_sends_zero_bytes(generated):
    assert main(["run", str(generated), "--method", "local"]) == EXIT_OK
    run = generated.parent / "runs" / "tiny" / "local"
    assert all(r["bytes_up"] == r["bytes_down"] == "0" for r in _rows(run / "traffic.csv"))
    assert not (run / "server.json").exists()


def test_eval_of_site_checkpoint_matches_final_logged_scores(generated, capsys, tmp_path):
    assert main(["run", str(generated), "--method", "fedst"]) == EXIT_OK
    run = generated.parent / "runs" / "tiny" / "fedst"
    out_csv = tmp_path / "eval.csv"
    code = main(["eval", str(run), str(generated.parent / "data" / "site_B.fstd"), "--site", "B",
                 "--csv", str(out_csv)])
    assert code == EXIT_OK
    logged = {r["class"]: r for r in _rows(run / "metrics.csv") if r["round"] == "2" and r["site"] == "B"}
    evaluated = {r["class"]: r for r in _rows(out_csv)}
    assert set(logged) == set(evaluated) == {"1", "2", "3"}
    for cls in logged:
        for key in ("dice", "iou", "hd95", "assd"):
            assert logged[cls][key] == evaluated[cls][key]
    assert "mean" in capsys.readouterr().out


def test_eval_global_on_outfed_matches_outfed_csv(generated, tmp_path):
    assert main(["run", str(generated), "--method", "fedst"]) == EXIT_OK
    run = generated.parent / "runs" / "tiny" / "fedst"
    out_csv = tmp_path / "g.csv"
    assert main(["eval", str(run / "checkpoints" / "global.npz"),
                 str(generated.parent / "data" / "outfed_E.fstd"), "--global", "--csv", str(out_csv)]) == EXIT_OK
    logged = [(r["class"], r["dice"]) for r in _rows(run / "outfed.csv")]
    assert [(r["class"], r["dice"]) for r in _rows(out_csv)] == logged


def test_error_exit_codes(generated, tmp_path, capsys):
    assert main(["eval", str(tmp_path / "none.npz"), str(generated.parent / "data" / "site_A.fstd"),
                 "--global"]) == EXIT_DATA
    assert main(["run", str(tmp_path / "absent.ini")]) == EXIT_CONFIG
    bad = tmp_path / "bad.ini"
    bad.write_text(TINY.replace("T = 2", "T = two"))
    assert main(["run", str(bad)]) == EXIT_CONFIG
    nodata = tmp_path / "nodata.ini"
    nodata.write_text(TINY.replace("dir = data", "dir = missing"))
    assert main(["run", str(nodata)]) == EXIT_DATA
    with pytest.raises(SystemExit):
        main(["run", str(generated), "--method", "magic"])


# =================================================================== ablate

def test_ablate_without_serq_has_no_server_steps(generated):
    assert main(["ablate", str(generated), "--toggle", "serq"]) == EXIT_OK
    table = _rows(generated.parent / "runs" / "tiny" / "ablation.csv")
    assert [r["config"] for r in table] == ["ablate-full", "ablate-no-serq"]
    assert table[0]["server_steps"] == "4" and table[1]["server_steps"] == "0"
    assert not (generated.parent / "runs" / "tiny" / "ablate-no-serq" / "server.json").exists()


# ============================================================== determinism

def test_rerun_from_snapshot_is_byte_identical(generated, monkeypatch, tmp_path):
    assert main(["run", str(generated), "--method", "fedst"]) == EXIT_OK
    first = generated.parent / "runs" / "tiny" / "fedst"
    snapshot = first / "config.ini"
    monkeypatch.setenv("FEDST_OUTPUT_DIR", str(tmp_path / "second"))
    assert main(["run", str(snapshot), "--method", "fedst"]) == EXIT_OK
    second = tmp_path / "second" / "tiny" / "fedst"
    for name in ("metrics.csv", "outfed.csv", "traffic.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name
    a = np.load(first / "checkpoints" / "global.npz")
    b = np.load(second / "checkpoints" / "global.npz")
    assert all(np.array_equal(a[k], b[k]) for k in a.files)
