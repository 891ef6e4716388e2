import hashlib
from pathlib import Path

import pytest
import torch

from resage import data as D
from resage import evaluation as E
from resage.cli import EXIT_OK, EXIT_VALIDATION, main
from resage.networks import load_checkpoint
from resage.profiles import SizeProfile


def tree_hash(root):
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            digest.update(path.relative_to(root).as_posix().encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset + a one-epoch trained checkpoint reused across CLI tests."""
    root = tmp_path_factory.mktemp("cliws")
    data_dir = root / "data"
    assert main(["synth-data", "--out", str(data_dir), "--identities", "10",
                 "--per-identity", "3", "--seed", "7"]) == EXIT_OK
    run_dir = root / "run"
    assert main(["train", "--manifest", str(data_dir / "manifest.csv"),
                 "--out", str(run_dir), "--epochs", "1",
                 "--decay-start-epoch", "1", "--batch-size", "9",
                 "--seed", "2"]) == EXIT_OK
    ckpt = run_dir / "checkpoints" / "epoch_0000.pt"
    assert ckpt.exists()
    image = next((data_dir / "id00000").glob("*.png"))
    return {"root": root, "data": data_dir, "run": run_dir,
            "manifest": data_dir / "manifest.csv", "ckpt": ckpt, "image": image}


class TestSynthData:
    def test_counts(self, workspace):
        manifest = D.load_manifest(workspace["manifest"])
        assert len(manifest) == 30
        assert sum(e.split == "test" for e in manifest) == 3
        pngs = list(workspace["data"].rglob("*.png"))
        assert len(pngs) == 30

    def test_deterministic(self, tmp_path, workspace):
        out = tmp_path / "again"
        assert main(["synth-data", "--out", str(out), "--identities", "10",
                     "--per-identity", "3", "--seed", "7"]) == EXIT_OK
        assert tree_hash(out) == tree_hash(workspace["data"])

    def test_creates_nested_dirs(self, tmp_path):
        out = tmp_path / "a" / "b" / "c"
        assert main(["synth-data", "--out", str(out), "--identities", "2",
                     "--per-identity", "1"]) == EXIT_OK
        assert out.exists()


class TestTrain:
    def test_artifacts(self, workspace):
        run = workspace["run"]
        assert (run / "train_log.jsonl").exists()
        assert (run / "samples_epoch_0000.png").exists()

    def test_zero_epochs_saves_init(self, tmp_path, workspace):
        out = tmp_path / "init"
        assert main(["train", "--manifest", str(workspace["manifest"]),
                     "--out", str(out), "--epochs", "0",
                     "--decay-start-epoch", "0"]) == EXIT_OK
        bundle, _ = load_checkpoint(out / "checkpoints_init.pt")
        assert bundle.step == 0

    def test_missing_manifest(self, tmp_path):
        assert main(["train", "--manifest", str(tmp_path / "nope.csv"),
                     "--out", str(tmp_path / "run")]) == EXIT_VALIDATION

    def test_bad_config_value(self, tmp_path, workspace):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("batch_size = -1\n")
        assert main(["train", "--manifest", str(workspace["manifest"]),
                     "--config", str(cfg),
                     "--out", str(tmp_path / "run")]) == EXIT_VALIDATION


class TestInfer:
    def test_roundtrip(self, tmp_path, workspace, capsys):
        out = tmp_path / "aged.png"
        rc = main(["infer", "--checkpoint", str(workspace["ckpt"]),
                   "--image", str(workspace["image"]),
                   "--target-age", "40.5", "--out", str(out)])
        assert rc == EXIT_OK and out.exists()
        printed = capsys.readouterr().out
        assert "self_estimated_age=" in printed

    def test_matches_library_call(self, tmp_path, workspace):
        out = tmp_path / "aged.png"
        assert main(["infer", "--checkpoint", str(workspace["ckpt"]),
                     "--image", str(workspace["image"]),
                     "--target-age", "40", "--out", str(out)]) == EXIT_OK
        bundle, _ = load_checkpoint(workspace["ckpt"])
        entry = D.ManifestEntry(path=str(workspace["image"]), age=0,
                                gender="", split="test")
        image = D.load_image(entry, bundle.profile)
        expected = E.generate(bundle, image.unsqueeze(0), 40)[0]
        # compare through the same save/load quantization
        D.save_image(expected, tmp_path / "expected.png")
        assert (tmp_path / "expected.png").read_bytes() == out.read_bytes()

    def test_target_out_of_range(self, tmp_path, workspace):
        rc = main(["infer", "--checkpoint", str(workspace["ckpt"]),
                   "--image", str(workspace["image"]),
                   "--target-age", "120", "--out", str(tmp_path / "x.png")])
        assert rc == EXIT_VALIDATION
        assert not (tmp_path / "x.png").exists()

    def test_missing_checkpoint(self, tmp_path, workspace):
        rc = main(["infer", "--checkpoint", str(tmp_path / "none.pt"),
                   "--image", str(workspace["image"]),
                   "--target-age", "40", "--out", str(tmp_path / "x.png")])
        assert rc != EXIT_OK


class TestSweep:
    def test_strip_geometry_and_infer_agreement(self, tmp_path, workspace):
        out = tmp_path / "strip.png"
        assert main(["sweep", "--checkpoint", str(workspace["ckpt"]),
                     "--image", str(workspace["image"]),
                     "--lo", "20", "--hi", "36", "--step", "4",
                     "--out", str(out)]) == EXIT_OK
        from PIL import Image
        with Image.open(out) as im:
            width, height = im.size
        side = SizeProfile.desk().image_side
        assert (width, height) == (5 * side, side)
        # first frame bit-identical to a single inference at the same target
        single = tmp_path / "single.png"
        assert main(["infer", "--checkpoint", str(workspace["ckpt"]),
                     "--image", str(workspace["image"]),
                     "--target-age", "20", "--out", str(single)]) == EXIT_OK
        entry = D.ManifestEntry(path=str(out), age=0, gender="", split="test")
        from PIL import Image as PILImage
        with PILImage.open(out) as im:
            frame = im.crop((0, 0, side, side))
        with PILImage.open(single) as im:
            assert list(frame.getdata()) == list(im.getdata())

    def test_invalid_grid(self, tmp_path, workspace):
        rc = main(["sweep", "--checkpoint", str(workspace["ckpt"]),
                   "--image", str(workspace["image"]),
                   "--lo", "50", "--hi", "30", "--out", str(tmp_path / "s.png")])
        assert rc == EXIT_VALIDATION


class TestEval:
    @pytest.mark.parametrize("suite,expected", [
        ("fid", ["fid.txt"]),
        ("age-table", ["age_table_embedded.txt", "age_table_oracle.txt"]),
        ("interp", ["interp.png"]),
        ("confusion", ["confusion_self_estimated.txt",
                       "confusion_self_estimated_summary.txt",
                       "confusion_self_estimated.png",
                       "confusion_interpolated.txt",
                       "confusion_interpolated_summary.txt",
                       "confusion_interpolated.png"]),
    ])
    def test_suites_emit_files(self, tmp_path, workspace, suite, expected):
        out = tmp_path / suite
        assert main(["eval", "--checkpoint", str(workspace["ckpt"]),
                     "--manifest", str(workspace["manifest"]),
                     "--suite", suite, "--out", str(out)]) == EXIT_OK
        for name in expected:
            assert (out / name).exists(), name

    def test_fid_value_parses(self, tmp_path, workspace):
        out = tmp_path / "fidval"
        assert main(["eval", "--checkpoint", str(workspace["ckpt"]),
                     "--manifest", str(workspace["manifest"]),
                     "--suite", "fid", "--out", str(out)]) == EXIT_OK
        text = (out / "fid.txt").read_text()
        value = float(text.split("=", 1)[1])
        assert value >= 0.0

    def test_unknown_suite_rejected_by_argparse(self, workspace):
        with pytest.raises(SystemExit):
            main(["eval", "--checkpoint", str(workspace["ckpt"]),
                  "--manifest", str(workspace["manifest"]),
                  "--suite", "nonsense", "--out", "x"])
