import json
import subprocess
import sys

import pytest

from stylevar.checkpoint import save_training_state
from stylevar.cli import main
from stylevar.config import ModelSection, RunConfig
from stylevar.data import write_image
from stylevar.model import StyleVAR


def run(*argv):
    return subprocess.run([sys.executable, "-m", "stylevar", *argv], capture_output=True, text=True)


def test_panw_table_prints_published_row(capsys):
    assert main(["panw-table", "--alpha", "0.7"]) == 0
    out = capsys.readouterr().out.splitlines()
    weights = [line.split()[2] for line in out[1:11]]
    assert weights == ["3.37", "1.28", "0.72", "0.48", "0.35", "0.27", "0.18", "0.13", "0.09", "0.07"]
    assert "tokens=680" in out[-1]


def test_panw_table_custom_schedule_json(capsys):
    assert main(["panw-table", "--schedule", "1,2,3,4", "--alpha", "0", "--json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["tokens"] for r in rows] == [1, 4, 9, 16]
    assert all(abs(r["per_token_x100"] - 100 / 30) < 1e-12 for r in rows)


def test_unknown_command_exits_2():
    r = run("frobnicate")
    assert r.returncode == 2 and "error: UsageError:" in r.stderr


def test_unknown_flag_exits_2():
    r = run("panw-table", "--wat")
    assert r.returncode == 2


def test_missing_config_reports_path(tmp_path):
    missing = tmp_path / "missing.json"
    r = run("sft", "--config", str(missing), "--out", str(tmp_path / "o"))
    assert r.returncode == 1
    lines = r.stderr.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error: ConfigError:") and str(missing) in lines[0]


def test_help_documents_config_keys():
    r = run("--help")
    assert r.returncode == 0 and "grpo.panw_alpha = 0.7" in r.stdout and "sft.epochs = 10" in r.stdout


def test_gen_data(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--n", "4", "--seed", "2"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["n"] == 4 and len(info["sha256"]) == 64


@pytest.fixture
def sample_inputs(tmp_path, tokenizer, triplets):
    cfg = RunConfig(model=ModelSection(embed_dim=32, num_heads=2, num_layers=2, encoder_channels=(8, 8)))
    ckpt = tmp_path / "m.ckpt"
    save_training_state(ckpt, cfg, tokenizer, StyleVAR(cfg.model_config()))
    write_image(tmp_path / "c.ppm", triplets[0].content)
    write_image(tmp_path / "s.png", triplets[0].style)
    return ckpt, tmp_path / "c.ppm", tmp_path / "s.png"


def test_sample_twice_identical(tmp_path, sample_inputs):
    ckpt, c, s = sample_inputs
    outs = []
    for i in range(2):
        out = tmp_path / f"o{i}.ppm"
        assert main(["sample", "--ckpt", str(ckpt), "--content", str(c), "--style", str(s), "--out", str(out),
                     "--seed", "7"]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_sample_rejects_wrong_size(tmp_path, sample_inputs):
    import numpy as np
    ckpt, c, s = sample_inputs
    write_image(tmp_path / "big.ppm", np.zeros((8, 8, 3)))
    r = run("sample", "--ckpt", str(ckpt), "--content", str(tmp_path / "big.ppm"), "--style", str(s),
            "--out", str(tmp_path / "o.ppm"))
    assert r.returncode == 1 and r.stderr.startswith("error: ValueError:")


def test_missing_checkpoint(tmp_path, sample_inputs):
    _, c, s = sample_inputs
    r = run("sample", "--ckpt", str(tmp_path / "none.ckpt"), "--content", str(c), "--style", str(s),
            "--out", str(tmp_path / "o.ppm"))
    assert r.returncode == 1 and "none.ckpt" in r.stderr
