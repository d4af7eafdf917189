import json

import numpy as np
import pytest

from latent_poison import cli
from latent_poison.cli import config as cfgmod
from latent_poison.cli import report as report_mod
from latent_poison.cli.grids import emit_grid, quantize, read_pgm, tile, write_pgm
from latent_poison.errors import ConfigError


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        cfgmod.resolve("train-vae", {}, ["betta=4"])
    with pytest.raises(ConfigError):
        cfgmod.resolve("train-vae", {"train-vae": {"nonsense": "1"}}, [])


def test_unknown_section_rejected(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train-vea]\nepochs = 1\n")
    with pytest.raises(ConfigError):
        cfgmod.read_config_file(p)


def test_override_precedence_and_types(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train-vae]\nepochs = 3\nbeta = 2\n[evaluate]\ntest_limit = none\n")
    file_values = cfgmod.read_config_file(p)
    c = cfgmod.resolve("train-vae", file_values, ["epochs=5", "evaluate.grid_rows=3"])
    assert c.epochs == 5 and c.beta == 2.0 and c.capacity is False
    assert cfgmod.resolve("evaluate", file_values, []).test_limit is None
    with pytest.raises(ConfigError):
        cfgmod.resolve("train-vae", {}, ["epochs=many"])


def test_cli_config_error_exit_code(tmp_path, capsys):
    code = cli.run(["train-vae", "--out-dir", str(tmp_path / "o"), "--override", "bogus=1"])
    assert code != 0
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ConfigError"
    assert (tmp_path / "o" / "error.json").exists()


def test_missing_checkpoint_exit_code(tmp_path, capsys):
    code = cli.run(["fit-stats", "--out-dir", str(tmp_path), "--override", f"vae={tmp_path / 'nope.ckpt'}"])
    assert code != 0
    assert json.loads(capsys.readouterr().err.strip())["error"] == "MissingCheckpoint"


def test_grid_dimensions_and_quantization(tmp_path):
    imgs = np.zeros((2, 28, 28))
    imgs[0, 0, 0] = 1.0
    path = emit_grid(imgs, ["a", "b"], tmp_path / "g.pgm")
    px = read_pgm(path)
    assert px.shape == (28, 57)
    assert px[0, 0] == 255 and px[0, 1] == 0
    assert (px[:, 28] == 128).all()
    assert (tmp_path / "g.txt").read_text().count("\n") == 2


def test_tile_shape_multirow():
    assert tile(np.zeros((5, 28, 28)), ncols=2).shape == (3 * 28 + 2, 2 * 28 + 1)


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).random((13, 17))
    q = quantize(img)
    assert np.array_equal(read_pgm(write_pgm(img, tmp_path / "r.pgm")), q)
    assert np.abs(q / 255 - img).max() <= 0.5 / 255 + 1e-12


def test_report_without_runs(tmp_path):
    tables = report_mod.build_tables(report_mod.load_runs([tmp_path]))
    md = report_mod.render_markdown(tables)
    for header in ["Table 1", "Table 2", "Table 3"]:
        assert header in md
    assert "absent" in md


TINY = """
[train-vae]
epochs = 1
train_limit = 256
val_limit = 128
[train-inference]
epochs = 1
train_limit = 256
test_limit = 200
[train-robust]
epochs = 1
train_limit = 128
test_limit = 64
pgd_steps = 2
eval_steps = 2
[fit-stats]
vae = {root}/vae/model.ckpt
train_limit = 300
[train-attack]
vae = {root}/vae/model.ckpt
inference = {root}/inf/model.ckpt
stats = {root}/stats/stats.json
epochs = 1
train_limit = 128
[evaluate]
vae = {root}/vae/model.ckpt
inference = {root}/inf/model.ckpt
robust = {root}/rob/model.ckpt
stats = {root}/stats/stats.json
attack = {root}/atk/attack.ckpt
test_limit = 40
batch_size = 20
pgd_steps = 2
grid_rows = 4
interp_pairs = 2
interp_steps = 5
"""


def _pipeline(root, data):
    root.mkdir(parents=True)
    cfg = root / "tiny.ini"
    cfg.write_text(TINY.format(root=root))
    for sub, out in [("train-vae", "vae"), ("train-inference", "inf"), ("train-robust", "rob"),
                     ("fit-stats", "stats"), ("train-attack", "atk"), ("evaluate", "eval")]:
        code = cli.run([sub, "--config", str(cfg), "--data-root", str(data), "--out-dir", str(root / out), "--seed", "7"])
        assert code == 0, sub
    return root


def test_tiny_pipeline_reproducible(tmp_path, mnist_root):
    a = _pipeline(tmp_path / "a", mnist_root)
    b = _pipeline(tmp_path / "b", mnist_root)
    for sub in ["vae", "inf", "rob", "atk", "eval"]:
        sa = json.loads((a / sub / "summary.json").read_text())
        sb = json.loads((b / sub / "summary.json").read_text())
        assert sa == sb, sub
    assert (a / "eval/summary.json").read_bytes() == (b / "eval/summary.json").read_bytes()
    assert (a / "eval/grids/adversarial.pgm").read_bytes() == (b / "eval/grids/adversarial.pgm").read_bytes()

    summary = json.loads((a / "eval/summary.json").read_text())
    assert summary["test_classifier_gradient_queries"] == 0
    assert summary["n"] == 40
    assert read_pgm(a / "eval/grids/adversarial.pgm").shape == (4 * 28 + 3, 57)
    assert len((a / "eval/results.jsonl").read_text().splitlines()) == 40
    manifest = json.loads((a / "eval/manifest.json").read_text())
    assert set(manifest) >= {"config", "seed", "code_version", "inputs", "outputs", "wall_time_s"}
    assert all(len(d) == 64 for d in manifest["inputs"].values())

    code = cli.run(["report", str(a), "--out-dir", str(a / "report")])
    assert code == 0
    md = (a / "report/report.md").read_text()
    assert "Table 1" in md and "MNIST" in md
