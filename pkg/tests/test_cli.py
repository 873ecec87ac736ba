import json

import numpy as np
import pytest

from rdunet.cli import main
from rdunet.data import read_manifest, read_pgm, read_pgm_bytes, write_pgm

TINY = ["--set", "model.height=16", "--set", "model.width=16", "--set", "model.base_width=4",
        "--set", "model.growth_base=1"]


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--seed", "7", "--count", "16", "--size", "16", "--out-dir", str(out)]) == 0
    return out


def test_gen_data_contract_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["gen-data", "--seed", "7", "--count", "16", "--size", "64", "--out-dir", str(out)]) == 0
    assert len(list((a / "images").glob("*.pgm"))) == len(list((a / "masks").glob("*.pgm"))) == 16
    for f in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    entries = read_manifest(a / "manifest.tsv")
    assert sum(len(v) for v in entries.values()) == 16


def test_gen_data_bad_size(tmp_path, capsys):
    assert main(["gen-data", "--size", "60", "--out-dir", str(tmp_path)]) == 2
    assert "multiple of 16" in capsys.readouterr().err


def test_config_errors(tmp_path, capsys):
    assert main(["analyze", "--set", "analyze.bogus=1", "--out-dir", str(tmp_path)]) == 2
    assert "bogus" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["analyze", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as info:
        main(["analyze", "--no-such-flag"])
    assert info.value.code == 2


def test_config_file_and_flags_resolution(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "analyze": {"L_max": 3, "schemes": ["chain"]}}))
    out = tmp_path / "run"
    assert main(["analyze", "--config", str(cfg), "--set", "analyze.L_max=4", "--seed", "9",
                 "--out-dir", str(out)]) == 0
    snap = json.loads((out / "resolved_config.json").read_text())
    assert snap["command"] == "analyze"
    assert snap["config"]["seed"] == 9 and snap["config"]["analyze"]["L_max"] == 4
    assert (out / "connectivity.csv").read_text().splitlines()[-1] == "chain,4,4,4"


def test_unwritable_out_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen-data", "--out-dir", str(blocker / "sub")]) == 3


def test_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("RDUNET_THREADS", "0")
    assert main(["analyze", "--L", "3", "--out-dir", str(tmp_path)]) == 0
    monkeypatch.setenv("RDUNET_THREADS", "many")
    assert main(["analyze", "--L", "3", "--out-dir", str(tmp_path)]) == 2


@pytest.mark.parametrize("scheme, edges, mbd", [("log-dense", 14, 2), ("full", 21, 1)])
def test_analyze_rows(tmp_path, scheme, edges, mbd):
    assert main(["analyze", "--scheme", scheme, "--L", "6", "--out-dir", str(tmp_path)]) == 0
    lines = (tmp_path / "connectivity.csv").read_text().splitlines()
    assert lines[0] == "scheme,L,edges,MBD"
    _, L, e, m = lines[1].split(",")
    assert (int(L), int(e), int(m)) == (6, edges, mbd)
    assert (tmp_path / "connectivity.txt").exists()


def test_gradcheck_pass_and_fail(tmp_path, capsys):
    assert main(["gradcheck", "--out-dir", str(tmp_path / "ok")]) == 0
    rows = (tmp_path / "ok" / "gradcheck.csv").read_text().splitlines()
    assert any(r.startswith("dense_block,") for r in rows)
    assert main(["gradcheck", "--tolerance", "1e-14", "--out-dir", str(tmp_path / "strict")]) == 5
    assert "worst" in capsys.readouterr().err


def test_train_predict_eval_flow(tmp_path, dataset):
    manifest = str(dataset / "manifest.tsv")
    logs = []
    for run in ("t1", "t2"):
        out = tmp_path / run
        assert main(["train", "--manifest", manifest, "--max-steps", "2", "--batch-size", "4",
                     "--out-dir", str(out)] + TINY) == 0
        logs.append((out / "train_log.csv").read_bytes())
    assert logs[0] == logs[1]
    ckpt = tmp_path / "t1" / "checkpoint_final.rdun"
    assert ckpt.read_bytes()[:4] == b"RDUN"

    pred = tmp_path / "pred"
    assert main(["predict", "--manifest", manifest, "--checkpoint", str(ckpt), "--out-dir", str(pred)] + TINY) == 0
    written = sorted((pred / "predictions").glob("*.pgm"))
    assert len(written) == len(read_manifest(manifest)["test"])
    for p in written:
        assert set(np.unique(read_pgm_bytes(p))) <= {0, 255}

    ev = tmp_path / "ev"
    assert main(["eval", "--manifest", manifest, "--pred-dir", str(pred / "predictions"), "--out-dir", str(ev)]) == 0
    assert (ev / "metrics.csv").read_text().startswith("class,precision,recall,f1")


def test_eval_self_and_inverted(tmp_path, dataset):
    manifest = dataset / "manifest.tsv"
    ev = tmp_path / "self"
    assert main(["eval", "--manifest", str(manifest), "--pred-dir", str(dataset / "masks"), "--out-dir", str(ev)]) == 0
    summary = (ev / "metrics.csv").read_text().splitlines()[-1]
    assert float(summary.split(",")[0]) == 1.0
    inv = tmp_path / "inv"
    inv.mkdir()
    for _, mask_path in read_manifest(manifest)["test"]:
        write_pgm(inv / mask_path.name, 1 - read_pgm(mask_path, mask=True), mask=True)
    assert main(["eval", "--manifest", str(manifest), "--pred-dir", str(inv), "--out-dir", str(tmp_path / "e2")]) == 0
    summary = (tmp_path / "e2" / "metrics.csv").read_text().splitlines()[-1]
    assert float(summary.split(",")[0]) == 0.0


def test_zero_epoch_train_writes_initial_checkpoint(tmp_path, dataset):
    from rdunet.network import NetworkConfig, build_network, load_checkpoint
    out = tmp_path / "z"
    assert main(["train", "--manifest", str(dataset / "manifest.tsv"), "--epochs", "0", "--seed", "3",
                 "--out-dir", str(out)] + TINY) == 0
    saved = load_checkpoint(out / "checkpoint_final.rdun")
    initial = build_network(NetworkConfig(16, 16, base_width=4, growth_base=1), 3).state_dict()
    assert all(np.array_equal(saved[k], v) for k, v in initial.items())


def test_io_and_numeric_failures(tmp_path, dataset, capsys):
    manifest = str(dataset / "manifest.tsv")
    assert main(["train", "--manifest", str(tmp_path / "missing.tsv"), "--out-dir", str(tmp_path / "m")]) == 3
    out = tmp_path / "ok"
    assert main(["train", "--manifest", manifest, "--max-steps", "1", "--out-dir", str(out)] + TINY) == 0
    capsys.readouterr()
    wide = ["--set", "model.height=16", "--set", "model.width=16", "--set", "model.base_width=8",
            "--set", "model.growth_base=1"]
    assert main(["predict", "--manifest", manifest, "--checkpoint", str(out / "checkpoint_final.rdun"),
                 "--out-dir", str(tmp_path / "p")] + wide) == 3
    assert "down1/conv_in/weight" in capsys.readouterr().err
    with np.errstate(all="ignore"):
        code = main(["train", "--manifest", manifest, "--max-steps", "4", "--lr", "1e300", "--no-augment",
                     "--out-dir", str(tmp_path / "nan")] + TINY)
    assert code == 4
