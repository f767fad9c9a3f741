import json
import subprocess
import sys

import numpy as np

from autofocus.cli import main
from autofocus.data_io import read_volume
from autofocus.models import attention_head_count

PHANTOM_CFG = """[phantom]
grid = 24
noise = 0.1
seed = 4

[class a]
radius = 3 4
intensity = 2

[class b]
radius = 3 4
intensity = -1.5
"""

TRAIN_CFG = """[train]
profile = desk
arch = afn1
channels = 4 4 4 4
rates = 1 2
segment = 12
batch = 1
epochs = 2
steps_per_epoch = 2
checkpoint_every = 1
target_loss = none
manifest = data/manifest.txt
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def csv_rows(text):
    lines = text.strip().splitlines()
    return [dict(zip(lines[0].split(","), l.split(","))) for l in lines[1:]]


def test_params(capsys):
    totals = {}
    for arch in ("basic", "afn1"):
        code, out, err = run(capsys, "params", "-a", arch)
        assert code == 0
        totals[arch] = int(csv_rows(out)[-1]["count"])
    assert totals["basic"] == 311_290
    assert totals["afn1"] - totals["basic"] == attention_head_count(50, 4)


def test_params_reports_residual(capsys):
    _, _, err = run(capsys, "params", "-a", "basic")
    assert "vs reported 315725" in err


def test_rf(capsys):
    code, out, _ = run(capsys, "rf", "-a", "basic")
    assert code == 0
    rows = csv_rows(out)
    assert rows[7]["phi_max"] == "29" and rows[-1]["kind"] == "classifier"
    _, out, _ = run(capsys, "rf", "-a", "afn1")
    last = csv_rows(out)[7]
    assert (last["phi_min"], last["phi_max"]) == ("29", "53")


def test_usage_errors(capsys):
    assert run(capsys, "params", "-a", "basic", "--frobnicate")[0] == 1
    assert run(capsys, "nonsense")[0] == 1
    assert run(capsys)[0] == 1


def test_runtime_errors(capsys, tmp_path):
    code, _, err = run(capsys, "params", "-a", "afn9")
    assert code == 2 and "error" in err
    code, _, err = run(capsys, "eval", "-w", tmp_path / "missing.afnw", "-m", tmp_path / "m.txt")
    assert code == 2


def test_pipeline(capsys, tmp_path):
    (tmp_path / "phantom.cfg").write_text(PHANTOM_CFG)
    (tmp_path / "train.cfg").write_text(TRAIN_CFG)
    data = tmp_path / "data"
    code, out, _ = run(capsys, "gen-phantoms", "-c", tmp_path / "phantom.cfg", "-n", 2, "-o", data)
    assert code == 0 and len(out.strip().splitlines()) == 2
    assert (data / "manifest.txt").read_text().split() == ["phantom000.afnv", "phantom001.afnv"]

    run_dir = tmp_path / "run"
    code, out, _ = run(capsys, "train", "-c", tmp_path / "train.cfg", "-o", run_dir, "--max-steps", 3)
    assert code == 0
    records = [json.loads(l) for l in out.strip().splitlines()]
    assert records[-1]["step"] == 3
    weights = run_dir / "final.afnw"
    assert weights.exists()

    code, out, err = run(capsys, "eval", "-w", weights, "-m", data / "manifest.txt", "--window", 16)
    assert code == 0 and "mean foreground dice" in err
    rows = csv_rows(out)
    assert {r["volume_id"] for r in rows} >= {"phantom000", "phantom001", "mean", "std"}
    assert all(0.0 <= float(r["dice"]) <= 1.0 for r in rows)

    code, out, _ = run(capsys, "eval", "-w", weights, "-m", data / "manifest.txt",
                       "-c", tmp_path / "train.cfg")
    assert code == 0

    maps = tmp_path / "maps"
    code, out, _ = run(capsys, "export-attention", "-w", weights, "-i", data / "phantom000.afnv",
                       "-l", 4, "-o", maps)
    assert code == 0
    paths = [json.loads(l)["attention_map"] for l in out.strip().splitlines()]
    stack = np.stack([read_volume(p).image[0] for p in paths]).astype(np.float64)
    assert stack.shape == (2, 24, 24, 24)
    assert np.allclose(stack.sum(axis=0), 1, atol=1e-5)
    assert run(capsys, "export-attention", "-w", weights, "-i", data / "phantom000.afnv",
               "-l", 1, "-o", maps)[0] == 2


def test_gradcheck_subset(capsys, monkeypatch):
    import autofocus.gradcheck as gc
    subset = {k: gc.CASES[k] for k in ("add", "relu", "softmax")}
    monkeypatch.setattr(gc, "CASES", subset)
    code, out, _ = run(capsys, "gradcheck", "--seeds", 1)
    assert code == 0
    assert [json.loads(l)["passed"] for l in out.strip().splitlines()] == [True] * 3


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "autofocus.cli", "rf", "-a", "basic"],
                          capture_output=True, text=True, env={"AFN_THREADS": "1", "PATH": ""})
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[0] == "layer,kind,phi_min,phi_max,eta"
