import json
import os

import numpy as np
import pytest

from shapemem.cli import main
from shapemem.config import ExperimentConfig
from shapemem.data import read_cloud, write_cloud


def tiny_config_file(tmp_path, **kw):
    base = dict(
        feature_dim=8, hidden_dim=12, decoder_hidden=16, num_centers=8,
        expansion=4, prior_count=2, strata=2, batch_size=4,
        epochs=1, pretrain_epochs=1,
        categories=["box", "torus"], samples_per_category=5,
        complete_points=96, partial_points=24,
        data_dir=str(tmp_path / "data"), out_dir=str(tmp_path / "runs"),
    )
    base.update(kw)
    ExperimentConfig(**base).validate()
    path = tmp_path / "config.json"
    path.write_text(json.dumps(base))
    return path


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("cli")
    cfg_path = tiny_config_file(tmp_path)
    assert main(["gen-data", "--config", str(cfg_path)]) == 0
    assert main(["pretrain", "--config", str(cfg_path)]) == 0
    assert main(["train", "--config", str(cfg_path), "--label", "run"]) == 0
    return tmp_path, cfg_path


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_selfcheck_passes():
    assert main(["selfcheck"]) == 0


def test_gen_data_writes_dataset(cli_workspace):
    tmp_path, cfg_path = cli_workspace
    manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
    assert len(manifest["samples"]) == 10


def test_train_then_eval_writes_report(cli_workspace, capsys):
    tmp_path, cfg_path = cli_workspace
    assert main(["eval", "--config", str(cfg_path), "--label", "run"]) == 0
    out = capsys.readouterr().out
    summary = json.loads(out.strip().splitlines()[-1])
    assert {"cd_l1", "cd_l2", "fscore", "cd_s", "cd_m", "cd_h"} <= set(summary)
    assert (tmp_path / "runs" / "train" / "run" / "eval_test.jsonl").exists()


def test_complete_roundtrip(cli_workspace, tmp_path):
    ws, cfg_path = cli_workspace
    run_dir = ws / "runs" / "train" / "run"
    manifest = json.loads((ws / "data" / "manifest.json").read_text())
    sample = manifest["samples"][0]
    complete = read_cloud(ws / "data" / sample["file"])
    from shapemem.data import make_partial
    partial = make_partial(complete, 0, 0.5, 24)
    partial_path = tmp_path / "part.npc"
    write_cloud(partial_path, partial)
    out_path = tmp_path / "full.npc"
    xyz_path = tmp_path / "full.xyz"
    code = main([
        "complete", "--config", str(cfg_path),
        "--in", str(partial_path),
        "--weights", str(run_dir / "weights.ppcw"),
        "--bank", str(run_dir / "bank.ppcm"),
        "--out", str(out_path), "--xyz", str(xyz_path),
    ])
    assert code == 0
    dense = read_cloud(out_path)
    assert dense.shape == (8 * 4, 3)
    assert len(xyz_path.read_text().strip().splitlines()) == 32
    # inputs untouched
    assert np.array_equal(read_cloud(partial_path),
                          partial.astype(np.float32).astype(np.float64))


def test_complete_missing_weights_exits_1(cli_workspace, tmp_path, capsys):
    ws, cfg_path = cli_workspace
    code = main([
        "complete", "--config", str(cfg_path),
        "--in", str(tmp_path / "missing.npc"),
        "--weights", str(tmp_path / "none.ppcw"),
        "--out", str(tmp_path / "out.npc"),
    ])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_memory_dump_lists_slots(cli_workspace, capsys):
    ws, cfg_path = cli_workspace
    bank_path = ws / "runs" / "train" / "run" / "bank.ppcm"
    assert main(["memory-dump", "--bank", str(bank_path)]) == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.startswith("slot ")]
    header = out.splitlines()[0]
    count = int(header.split()[1])
    assert len(lines) == count
    assert all("key-norm 1.000" in l for l in lines)
    assert "top key similarities:" in out


def test_memory_dump_deterministic(cli_workspace, capsys):
    ws, cfg_path = cli_workspace
    bank_path = ws / "runs" / "train" / "run" / "bank.ppcm"
    main(["memory-dump", "--bank", str(bank_path)])
    first = capsys.readouterr().out
    main(["memory-dump", "--bank", str(bank_path)])
    assert capsys.readouterr().out == first


def test_memory_dump_corrupt_bank_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.ppcm"
    bad.write_bytes(b"NOPE" + b"\0" * 32)
    assert main(["memory-dump", "--bank", str(bad)]) == 1


def test_config_echo_and_set_overrides(tmp_path, capsys):
    cfg_path = tiny_config_file(tmp_path)
    code = main(["gen-data", "--config", str(cfg_path), "--set", "seed=7",
                 "--set", 'categories=["box"]'])
    assert code == 0
    err = capsys.readouterr().err
    echo = json.loads(err.splitlines()[0].removeprefix("config: "))
    assert echo["seed"] == 7
    assert echo["categories"] == ["box"]


def test_unknown_config_key_exits_1(tmp_path, capsys):
    cfg_path = tiny_config_file(tmp_path)
    assert main(["gen-data", "--config", str(cfg_path), "--set", "bogus=1"]) == 1


def test_env_seed_override(tmp_path, capsys, monkeypatch):
    cfg_path = tiny_config_file(tmp_path)
    monkeypatch.setenv("PPC_SEED", "123")
    assert main(["gen-data", "--config", str(cfg_path)]) == 0
    err = capsys.readouterr().err
    echo = json.loads(err.splitlines()[0].removeprefix("config: "))
    assert echo["seed"] == 123


def test_gen_data_idempotent_inputs(tmp_path):
    cfg_path = tiny_config_file(tmp_path)
    before = cfg_path.read_bytes()
    main(["gen-data", "--config", str(cfg_path)])
    assert cfg_path.read_bytes() == before
