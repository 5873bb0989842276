"""The lvseg command line, driven through main() for speed."""

import json
import struct

import numpy as np
import pytest

from lvseg.cli import main
from lvseg.data import load_dataset
from lvseg.metrics import parse_report_csv

from test_data import build_dicom, pixels16


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestSynth:
    def test_writes_dataset(self, tmp_path, capsys):
        out = tmp_path / "data"
        code, stdout, _ = run(capsys, "synth", "--out", str(out), "--count", "5",
                              "--size", "32", "--seed", "1")
        assert code == 0
        assert "wrote 5 cases" in stdout
        assert len(list(out.glob("*.json"))) == 5
        assert len(load_dataset(out)) == 5

    def test_bad_count_is_one_line_error(self, tmp_path, capsys):
        code, stdout, stderr = run(capsys, "synth", "--out", str(tmp_path / "d"),
                                   "--count", "0")
        assert code == 2
        assert stderr.startswith("error:")
        assert len(stderr.strip().splitlines()) == 1


class TestImportDicom:
    def test_imports_with_and_without_contour(self, tmp_path, capsys):
        px = pixels16(1, (16, 16))
        (tmp_path / "pat1-003.dcm").write_bytes(build_dicom(px, spacing=(1.4, 1.1)))
        (tmp_path / "pat1-003.contour.txt").write_text("4 4\n11 4\n11 11\n4 11\n")
        (tmp_path / "pat2-000.dcm").write_bytes(build_dicom(px))
        out = tmp_path / "data"
        code, stdout, _ = run(capsys, "import-dicom",
                              str(tmp_path / "pat1-003.dcm"),
                              str(tmp_path / "pat2-000.dcm"),
                              "--out", str(out))
        assert code == 0 and "imported 2 slices" in stdout
        samples = load_dataset(out)
        assert [(s.case_id, s.slice_id) for s in samples] == [
            ("pat1", "003"), ("pat2", "000")]
        with_contour = samples[0]
        assert with_contour.truth_contour is not None
        assert with_contour.mask.sum() == 64  # 8x8 block from the polygon
        assert with_contour.spacing_mm == (1.1, 1.4)  # (sx, sy) from (row, col)
        assert samples[1].mask.sum() == 0

    def test_unreadable_file_reports_error(self, tmp_path, capsys):
        bad = tmp_path / "x.dcm"
        bad.write_bytes(b"not dicom at all")
        code, _, stderr = run(capsys, "import-dicom", str(bad),
                              "--out", str(tmp_path / "d"))
        assert code == 2 and "error:" in stderr


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--count", "12",
                 "--size", "32", "--seed", "3"]) == 0
    ckpt = root / "model.ckpt"
    hist = root / "history.csv"
    assert main(["train", "--data", str(data), "--out", str(ckpt),
                 "--history", str(hist), "--epochs", "2",
                 "--batch-size", "4", "--depth", "2", "--base-channels", "4",
                 "--groups", "2", "--split-ratio", "4:1:1",
                 "--seed", "0"]) == 0
    return root, data, ckpt, hist


class TestTrainEval:
    def test_train_prints_resolved_config(self, workspace, capsys):
        root, data, ckpt, hist = workspace
        # rerun a no-op-ish train to capture its stdout
        code, stdout, _ = run(capsys, "train", "--data", str(data),
                              "--out", str(root / "again.ckpt"), "--epochs", "1",
                              "--batch-size", "4", "--depth", "2",
                              "--base-channels", "4", "--groups", "2",
                              "--split-ratio", "4:1:1")
        assert code == 0
        resolved = json.loads(stdout[:stdout.index("}") + 1])
        assert resolved["split_ratio"] == "4:1:1"
        assert resolved["n_train_slices"] == 8  # 12 cases at 4:1:1
        assert resolved["n_val_slices"] == 2
        assert "saved checkpoint" in stdout

    def test_history_file(self, workspace):
        _, _, _, hist = workspace
        lines = hist.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_dice"
        assert len(lines) == 3

    def test_eval_writes_report_with_metadata(self, workspace, tmp_path, capsys):
        _, data, ckpt, _ = workspace
        out = tmp_path / "test.csv"
        code, stdout, _ = run(capsys, "eval", "--ckpt", str(ckpt), "--data",
                              str(data), "--split", "test", "--out", str(out))
        assert code == 0 and "dice" in stdout
        report = parse_report_csv(out.read_text())
        assert len(report.records) == 2  # the split's test share of 12
        assert report.extra["split"] == "test"

    def test_eval_splits_are_disjoint(self, workspace, tmp_path, capsys):
        _, data, ckpt, _ = workspace
        seen = {}
        for split in ("train", "val", "test"):
            out = tmp_path / f"{split}.csv"
            assert run(capsys, "eval", "--ckpt", str(ckpt), "--data", str(data),
                       "--split", split, "--out", str(out))[0] == 0
            rep = parse_report_csv(out.read_text())
            seen[split] = {r.case_id for r in rep.records}
        assert len(seen["train"] | seen["val"] | seen["test"]) == 12
        assert not (seen["train"] & seen["test"])
        assert not (seen["train"] & seen["val"])

    def test_report_renders_table(self, workspace, tmp_path, capsys):
        _, data, ckpt, _ = workspace
        out = tmp_path / "r.csv"
        run(capsys, "eval", "--ckpt", str(ckpt), "--data", str(data),
            "--split", "val", "--out", str(out))
        code, stdout, _ = run(capsys, "report", str(out))
        assert code == 0
        assert "r.csv" in stdout and "split=val" in stdout

    def test_eval_missing_checkpoint(self, workspace, capsys):
        _, data, _, _ = workspace
        code, _, stderr = run(capsys, "eval", "--ckpt", "/nonexistent.ckpt",
                              "--data", str(data))
        assert code == 2 and "error:" in stderr

    def test_eval_rejects_non_checkpoint(self, workspace, tmp_path, capsys):
        _, data, _, _ = workspace
        fake = tmp_path / "fake.ckpt"
        fake.write_bytes(b"\x00" * 64)
        code, _, stderr = run(capsys, "eval", "--ckpt", str(fake),
                              "--data", str(data))
        assert code == 2 and "magic" in stderr


class TestAugmentPreview:
    def test_writes_pgm_files(self, tmp_path, capsys):
        data = tmp_path / "data"
        main(["synth", "--out", str(data), "--count", "2", "--size", "32"])
        out = tmp_path / "prev"
        code, stdout, _ = run(capsys, "augment-preview", "--data", str(data),
                              "--out", str(out), "--copies", "2", "--index", "1")
        assert code == 0
        files = sorted(out.glob("*.pgm"))
        assert len(files) == 6  # original + 2 copies, image and mask each
        head = files[0].read_bytes()[:15]
        assert head.startswith(b"P5\n32 32\n255\n")

    def test_index_out_of_range(self, tmp_path, capsys):
        data = tmp_path / "data"
        main(["synth", "--out", str(data), "--count", "1", "--size", "32"])
        code, _, stderr = run(capsys, "augment-preview", "--data", str(data),
                              "--out", str(tmp_path / "p"), "--index", "5")
        assert code == 2 and "out of range" in stderr


class TestArgparse:
    def test_bad_split_ratio_exits(self, capsys):
        with pytest.raises(SystemExit):
            main(["train", "--data", "d", "--out", "o", "--split-ratio", "4:1"])
        with pytest.raises(SystemExit):
            main(["train", "--data", "d", "--out", "o", "--split-ratio", "a:b:c"])

    def test_unknown_command_exits(self, capsys):
        with pytest.raises(SystemExit):
            main(["frobnicate"])
