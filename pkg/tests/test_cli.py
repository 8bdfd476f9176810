import pytest

from retroplan.cli import RunConfig, ConfigError, main

SMALL = """[data]
n_train = 24
n_test = 6
route_depth = 4
test_min_depth = 2

[pretrain]
epochs = 2
hidden = 32

[mcts]
simulations = 8

[train]
target_batch = 12
epochs = 1
hidden = 16

[eval]
budget = 30
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "small.ini").write_text(SMALL)
    assert main(["gen-world", "--seed", "1", "--out", str(d / "world.txt")]) == 0
    assert main(["pretrain", "--config", str(d / "small.ini"), "--world", str(d / "world.txt"),
                 "--out", str(d / "pre")]) == 0
    return d


def run(ws, *args):
    return main([*args, "--config", str(ws / "small.ini")])


def test_gen_world_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-world", "--seed", "4", "--rules", "40", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert "config_hash" in (tmp_path / "a").read_text()


def test_pretrain_outputs(workspace):
    pre = workspace / "pre"
    for name in ("reference.mlp", "train_targets.txt", "test_targets.txt", "pretrain.csv"):
        assert (pre / name).exists()
    assert (pre / "pretrain.csv").read_text().startswith("# retroplan config_hash=")


def test_eval_retro0_without_trained_checkpoint(workspace, capsys):
    ws = workspace
    assert run(ws, "eval", "--world", str(ws / "world.txt"), "--targets", str(ws / "pre" / "test_targets.txt"),
               "--pretrained", str(ws / "pre"), "--planners", "retro0,dfs", "--out", str(ws / "ev0")) == 0
    text = (ws / "ev0" / "eval.csv").read_text()
    assert "retro0-sl" in text and "dfs-sl" in text
    assert "solved by all" in capsys.readouterr().out


def test_retro_value_needs_value_networks(workspace, capsys):
    ws = workspace
    assert run(ws, "eval", "--world", str(ws / "world.txt"), "--targets", str(ws / "pre" / "test_targets.txt"),
               "--pretrained", str(ws / "pre"), "--planners", "retro-value", "--out", str(ws / "ev1")) == 2
    assert "needs value networks" in capsys.readouterr().err


def test_train_and_eval_are_deterministic(workspace):
    ws = workspace
    outputs = []
    for name in ("t1", "t2"):
        assert run(ws, "train", "--world", str(ws / "world.txt"), "--pretrained", str(ws / "pre"),
                   "--out", str(ws / name), "--no-timing") == 0
        assert run(ws, "eval", "--world", str(ws / "world.txt"), "--targets",
                   str(ws / "pre" / "test_targets.txt"), "--checkpoint", str(ws / name / "model"),
                   "--planners", "retro0,retro-value", "--out", str(ws / name / "eval")) == 0
        outputs.append(((ws / name / "train_log.csv").read_bytes(), (ws / name / "eval" / "eval.csv").read_bytes()))
    assert outputs[0] == outputs[1]
    assert b"retro-value-pdvn" in outputs[0][1]


def test_corrupt_checkpoint_is_reported(workspace, tmp_path, capsys):
    import shutil
    ws = workspace
    bad = tmp_path / "bad"
    shutil.copytree(ws / "pre", bad)
    blob = bytearray((bad / "reference.mlp").read_bytes())
    blob[-5] ^= 0xFF
    (bad / "reference.mlp").write_bytes(bytes(blob))
    assert run(ws, "eval", "--world", str(ws / "world.txt"), "--targets", str(ws / "pre" / "test_targets.txt"),
               "--pretrained", str(bad), "--out", str(tmp_path / "ev")) == 2
    err = capsys.readouterr().err
    assert err.startswith("retroplan eval: error:") and "checksum" in err
    assert not (tmp_path / "ev").exists()


def test_missing_world_file(tmp_path, capsys):
    assert main(["pretrain", "--world", str(tmp_path / "none.txt"), "--out", str(tmp_path / "p")]) == 2
    assert "cannot read world file" in capsys.readouterr().err


def test_config_conflicts_rejected_before_work(tmp_path, capsys):
    assert main(["gen-world", "--c-rxn", "6", "--c-dead", "5", "--out", str(tmp_path / "w")]) == 2
    assert not (tmp_path / "w").exists()
    (tmp_path / "bad.ini").write_text("[mcts]\nsimulationz = 3\n")
    assert main(["gen-world", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path / "w")]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_precedence_flags_over_file(tmp_path):
    (tmp_path / "c.ini").write_text("[mcts]\nsimulations = 7\nc_puct = 2.0\n")
    cfg = RunConfig.resolve(str(tmp_path / "c.ini"), {"simulations": 9})
    assert cfg.mcts().simulations == 9 and cfg.mcts().c_puct == 2.0
    assert RunConfig.resolve(None, {}).mcts().simulations == 100
    with pytest.raises(ConfigError):
        RunConfig.resolve(None, {"budget": 0})


def test_digest_ignores_workers():
    assert RunConfig.resolve(None, {"workers": 4}).digest() == RunConfig.resolve(None, {}).digest()
    assert RunConfig.resolve(None, {"seed": 1}).digest() != RunConfig.resolve(None, {}).digest()


def test_report(workspace, capsys):
    ws = workspace
    assert main(["report", str(ws / "ev0" / "eval.csv"), "--at", "30", "--out", str(ws / "rep.txt")]) == 0
    assert "retro0-sl" in (ws / "rep.txt").read_text()
