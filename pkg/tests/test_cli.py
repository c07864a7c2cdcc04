import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from mgalign.cli import main, read_unit_png
from mgalign.data import AnnotatedImage, save_dataset
from mgalign.fusion import BRANCHES

TINY = {
    "model": {"channels": 16, "disc_channels": 16, "gn_groups": 4},
    "train": {"stage1_iters": 3, "stage2_iters": 3, "seed": 5},
    "synth": {"image_size": 64, "size_range": [10, 48], "seed": 5},
    "splits": {"source_train": 4, "target_train": 4, "target_eval": 6, "source_eval": 2},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


@pytest.fixture
def run_dir(tmp_path, tiny_config):
    out = tmp_path / "run"
    assert main(["synth", "--config", str(tiny_config), "--output-dir", str(out)]) == 0
    return out


@pytest.fixture
def trained(run_dir, tiny_config):
    assert main(["train", "--config", str(tiny_config), "--output-dir", str(run_dir)]) == 0
    return run_dir


class TestSynth:
    def test_splits_and_counts(self, run_dir, capsys):
        for split, n in TINY["splits"].items():
            doc = json.loads((run_dir / "data" / split / "annotations.json").read_text())
            assert len(doc["records"]) == n
        assert (run_dir / "data" / "config.yaml").exists()

    def test_rerun_byte_identical(self, run_dir, tiny_config, tmp_path):
        other = tmp_path / "again"
        assert main(["synth", "--config", str(tiny_config), "--output-dir", str(other)]) == 0
        for split in TINY["splits"]:
            a = (run_dir / "data" / split / "annotations.json").read_bytes()
            b = (other / "data" / split / "annotations.json").read_bytes()
            assert a == b

    def test_zero_images_is_an_error(self, tiny_config, tmp_path, capsys):
        code = main(["synth", "--config", str(tiny_config), "--output-dir", str(tmp_path / "z"),
                     "--set", "splits.target_eval=0"])
        assert code != 0
        assert "target_eval" in capsys.readouterr().err

    def test_output_root_env(self, tiny_config, tmp_path, monkeypatch):
        monkeypatch.setenv("MGALIGN_OUTPUT_ROOT", str(tmp_path / "root"))
        assert main(["synth", "--config", str(tiny_config), "--output-dir", "rel"]) == 0
        assert (tmp_path / "root" / "rel" / "data" / "source_train" / "annotations.json").exists()


class TestTrain:
    def test_artifacts(self, trained):
        lines = (trained / "metrics.jsonl").read_text().splitlines()
        recs = [json.loads(x) for x in lines]
        assert len(recs) == 6 and [r["iteration"] for r in recs] == list(range(6))
        assert all(r["cat"] == 0.0 for r in recs if r["stage"] == 1)
        assert any(r["cat"] != 0.0 for r in recs if r["stage"] == 2)
        for name in ("loss_curves.png", "config.yaml", "checkpoints/final.pt", "gates.npz"):
            assert (trained / name).exists(), name
        cfg = yaml.safe_load((trained / "config.yaml").read_text())
        assert cfg["train"]["stage1_iters"] == 3 and cfg["model"]["channels"] == 16

    def test_average_fusion_exports_uniform_gates(self, run_dir, tiny_config, tmp_path):
        out = tmp_path / "avg"
        code = main(["train", "--config", str(tiny_config), "--output-dir", str(out),
                     "--data-root", str(run_dir / "data"), "--fusion-mode", "average"])
        assert code == 0
        gates = np.load(out / "gates.npz")
        assert str(gates["fusion_mode"]) == "average"
        for key in ("level3", "level4", "level5"):
            assert np.allclose(gates[key], 1 / 6)
        assert yaml.safe_load((out / "config.yaml").read_text())["model"]["fusion_mode"] == "average"

    def test_resume_keeps_checkpoint_settings(self, run_dir, tiny_config, tmp_path):
        first = tmp_path / "first"
        assert main(["train", "--config", str(tiny_config), "--output-dir", str(first), "--data-root", str(run_dir / "data"),
                     "--set", "train.checkpoint_every=2"]) == 0
        full = [json.loads(x) for x in (first / "metrics.jsonl").read_text().splitlines()]
        # no config file on resume: schedule and architecture come from the checkpoint
        resumed = tmp_path / "resumed"
        assert main(["train", "--output-dir", str(resumed), "--data-root", str(run_dir / "data"),
                     "--resume", str(first / "checkpoints" / "iter_000002.pt")]) == 0
        tail = [json.loads(x) for x in (resumed / "metrics.jsonl").read_text().splitlines()]
        assert [r["iteration"] for r in tail] == [2, 3, 4, 5]
        assert tail == full[2:]
        cfg = yaml.safe_load((resumed / "config.yaml").read_text())
        assert cfg["train"]["stage2_iters"] == 3 and cfg["model"]["channels"] == 16

    def test_exclusive_fusion_switches(self, tiny_config):
        with pytest.raises(SystemExit):
            main(["train", "--config", str(tiny_config), "--fusion-mode", "average", "--no-gated-fusion"])

    def test_missing_dataset(self, tiny_config, tmp_path, capsys):
        assert main(["train", "--config", str(tiny_config), "--output-dir", str(tmp_path / "none")]) != 0
        assert "synth" in capsys.readouterr().err

    def test_nan_abort_names_component(self, run_dir, tiny_config, capsys):
        code = main(["train", "--config", str(tiny_config), "--output-dir", str(run_dir), "--set", "train.lr=1e30"])
        assert code != 0
        assert "non-finite loss component" in capsys.readouterr().err


class TestEval:
    def test_report_and_oracle(self, trained, tiny_config, capsys):
        ckpt = trained / "checkpoints" / "final.pt"
        assert main(["eval", "--config", str(tiny_config), "--output-dir", str(trained),
                     "--checkpoint", str(ckpt), "--oracle-check", "--set", "score_threshold=0.0"]) == 0
        assert "micro-instances agree" in capsys.readouterr().out
        out = trained / "eval" / "target_eval"
        report = json.loads((out / "report.json").read_text())
        for key in ("map", "ap_small", "ap_medium", "ap_large"):
            assert report[key] is None or 0.0 <= report[key] <= 1.0
        assert all(v is None or 0 <= v <= 1 for v in report["per_category_ap"])
        for name in ("disk", "square", "triangle"):
            assert (out / f"pr_{name}.png").exists()

    def test_untrained_model_near_zero(self, run_dir, tiny_config, tmp_path):
        code = main(["train", "--config", str(tiny_config), "--output-dir", str(tmp_path / "u"),
                     "--data-root", str(run_dir / "data"), "--set", "train.stage1_iters=0", "--set", "train.stage2_iters=0"])
        assert code == 0
        assert main(["eval", "--config", str(tiny_config), "--output-dir", str(tmp_path / "u"),
                     "--data-root", str(run_dir / "data"), "--checkpoint", str(tmp_path / "u/checkpoints/final.pt")]) == 0
        assert json.loads((tmp_path / "u/eval/target_eval/report.json").read_text())["map"] < 0.05

    def test_architecture_mismatch(self, trained, tiny_config, capsys):
        code = main(["eval", "--config", str(tiny_config), "--output-dir", str(trained),
                     "--checkpoint", str(trained / "checkpoints/final.pt"), "--set", "model.channels=32"])
        assert code != 0
        assert "channels" in capsys.readouterr().err


def _inspect_dataset(root, side, box):
    pixels = np.full((side, side, 3), 0.1, np.float32)
    x1, y1, x2, y2 = (int(v) for v in box)
    pixels[y1:y2, x1:x2] = 0.9
    img = AnnotatedImage("probe", pixels, "target", np.array([box], np.float32), np.array([1]))
    save_dataset([img], root / "target_eval")


class TestInspect:
    def test_heatmaps(self, trained, tiny_config):
        assert main(["inspect", "--config", str(tiny_config), "--output-dir", str(trained),
                     "--checkpoint", str(trained / "checkpoints/final.pt"), "--index", "1"]) == 0
        out = trained / "inspect" / "target_eval_1"
        for lvl in (3, 4, 5):
            files = sorted(out.glob(f"gate_level{lvl}_*.png"))
            assert len(files) == 6
            maps = np.stack([read_unit_png(f) for f in files])
            assert maps.min() >= 0 and maps.max() <= 1
            assert np.abs(maps.sum(axis=0) - 1).max() <= 1e-4
        assert (out / "selection_overlay.png").exists() and (out / "inspect.npz").exists()

    @pytest.mark.parametrize("side,box,stream", [(256, (28, 28, 228, 228), "high"), (64, (26, 26, 38, 38), "low")])
    def test_routing_follows_object_size(self, trained, tiny_config, tmp_path, side, box, stream):
        data = tmp_path / f"probe{side}"
        _inspect_dataset(data, side, box)
        assert main(["inspect", "--config", str(tiny_config), "--output-dir", str(trained), "--data-root", str(data),
                     "--checkpoint", str(trained / "checkpoints/final.pt"), "--guidance", "annotations"]) == 0
        arrays = np.load(trained / "inspect" / "target_eval_0" / "inspect.npz")
        # the object's center cell on its assigned level
        lvl = 5 if stream == "high" else 3
        stride = 2**lvl
        cx = int((box[0] + box[2]) / 2 // stride)
        gate = arrays[f"level{lvl}"][:, cx, cx]
        assert BRANCHES[int(gate.argmax())].stream == stream
        high = sum(g for g, b in zip(gate, BRANCHES) if b.stream == "high")
        assert (high > 0.5) == (stream == "high")


def test_console_script_exit_status(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "mgalign.cli", "eval", "--checkpoint", str(tmp_path / "missing.pt"),
         "--output-dir", str(tmp_path / "o")],
        capture_output=True, text=True,
    )
    assert proc.returncode != 0 and "error" in proc.stderr
