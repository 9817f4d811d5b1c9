import hashlib
import json
from pathlib import Path

import pytest

from pyagseg.cli import main
from pyagseg.metrics import MetricsReport

TINY_CFG = """
method = pyag
lr = 0.001
batch_size = 3
max_steps = 2
val_every = 0
seed = 0
model.depth = 3
model.base_filters = 4
model.classes = 3
"""


def tree_digest(root: Path) -> str:
    digest = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            digest.update(str(p.relative_to(root)).encode())
            digest.update(p.read_bytes())
    return digest.hexdigest()


class TestGenerateData:
    def test_writes_subject_folders(self, tmp_path, capsys):
        out = tmp_path / "data"
        assert main(["generate-data", "--subjects", "20", "--size", "64",
                     "--seed", "7", "--out", str(out)]) == 0
        subjects = [p for p in out.iterdir() if p.is_dir()]
        assert len(subjects) == 20

    def test_refuses_nonempty_without_force(self, tmp_path, capsys):
        out = tmp_path / "data"
        main(["generate-data", "--subjects", "3", "--out", str(out)])
        assert main(["generate-data", "--subjects", "3", "--out", str(out)]) == 1
        err = capsys.readouterr().err
        assert "force" in err

    def test_force_regenerates_bit_identical(self, tmp_path):
        out = tmp_path / "data"
        main(["generate-data", "--subjects", "3", "--seed", "9", "--out", str(out)])
        first = tree_digest(out)
        assert main(["generate-data", "--subjects", "3", "--seed", "9",
                     "--out", str(out), "--force"]) == 0
        assert tree_digest(out) == first


class TestUsageAndErrors:
    def test_unknown_flag_exits_2(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["generate-data", "--out", str(tmp_path), "--frobnicate"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_command_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_json_error_channel(self, tmp_path, capsys):
        out = tmp_path / "data"
        out.mkdir()
        (out / "junk.txt").write_text("x")
        code = main(["generate-data", "--subjects", "3", "--out", str(out), "--json"])
        assert code == 1
        captured = capsys.readouterr()
        blob = json.loads(captured.out.strip().splitlines()[-1])
        assert blob["ok"] is False and "message" in blob
        assert "error" in captured.err


class TestPipeline:
    @pytest.fixture()
    def dataset(self, tmp_path):
        data = tmp_path / "data"
        main(["generate-data", "--subjects", "8", "--size", "64", "--seed", "3",
              "--out", str(data)])
        main(["make-scribbles", "--labels", str(data), "--out", str(data),
              "--seed", "3"])
        return data

    def test_make_scribbles_stats(self, dataset):
        stats = (dataset / "scribble_stats.csv").read_text().splitlines()
        assert stats[0] == "subject,image,labeled_fraction"
        assert len(stats) == 9
        fracs = [float(line.split(",")[2]) for line in stats[1:]]
        assert all(0 < f < 0.2 for f in fracs)

    def test_train_evaluate_predict(self, tmp_path, dataset):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(TINY_CFG)
        run = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--data", str(dataset),
                     "--out", str(run), "--split-fractions", "0.5,0.25,0.25"]) == 0
        assert (run / "best.ckpt").exists() and (run / "last.ckpt").exists()

        assert main(["evaluate", "--checkpoint", str(run / "last.ckpt"),
                     "--data", str(dataset), "--split", "test"]) == 0
        report = MetricsReport.from_csv(run / "eval_test" / "report.csv")
        assert len(report.rows) == 2 * 2  # 2 test subjects x 2 fg classes

        preds = tmp_path / "preds"
        assert main(["predict", "--checkpoint", str(run / "last.ckpt"),
                     "--data", str(dataset), "--out", str(preds)]) == 0
        assert len(list(preds.rglob("label_*.png"))) == 8

    def test_train_noop_on_same_manifest(self, tmp_path, dataset, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(TINY_CFG)
        run = tmp_path / "run"
        args = ["train", "--config", str(cfg), "--data", str(dataset), "--out", str(run)]
        assert main(args) == 0
        marker = (run / "last.ckpt").stat().st_mtime_ns
        assert main(args) == 0
        assert "skipping" in capsys.readouterr().out
        assert (run / "last.ckpt").stat().st_mtime_ns == marker
        # --force retrains
        assert main(args + ["--force"]) == 0
        assert (run / "last.ckpt").stat().st_mtime_ns != marker


class TestReport:
    def fake_report(self, path: Path, dices, subjects=None):
        rows = []
        for i, d in enumerate(dices):
            rows.append({
                "subject": (subjects or [f"s{i}" for i in range(len(dices))])[i],
                "image": 0,
                "class": 1,
                "dice": d,
                "iou": d / (2 - d),
                "hausdorff": 1.0 - d,
            })
        path.mkdir(parents=True, exist_ok=True)
        MetricsReport(rows=rows, num_classes=2).to_csv(path / "report.csv")

    def test_single_run_plots_only(self, tmp_path):
        self.fake_report(tmp_path / "runA", [0.5] * 10)
        out = tmp_path / "cmp"
        assert main(["report", str(tmp_path / "runA"), "--out", str(out)]) == 0
        assert (out / "box_dice.png").exists()
        assert not (out / "significance.csv").exists()

    def test_identical_scores_not_significant(self, tmp_path):
        scores = [0.1 * i for i in range(1, 11)]
        self.fake_report(tmp_path / "runA", scores)
        self.fake_report(tmp_path / "runB", scores)
        out = tmp_path / "cmp"
        assert main(["report", str(tmp_path / "runA"), str(tmp_path / "runB"),
                     "--out", str(out)]) == 0
        summary = json.loads((out / "report_summary.json").read_text())
        assert all(c["p_value"] == 1.0 for c in summary["comparisons"])
        assert not any(c["significant"] for c in summary["comparisons"])

    def test_constant_shift_is_significant(self, tmp_path):
        base = [0.3 + 0.05 * i for i in range(10)]
        self.fake_report(tmp_path / "runA", [b + 0.05 for b in base])
        self.fake_report(tmp_path / "runB", base)
        out = tmp_path / "cmp"
        assert main(["report", str(tmp_path / "runA"), str(tmp_path / "runB"),
                     "--out", str(out)]) == 0
        summary = json.loads((out / "report_summary.json").read_text())
        dice_cmp = [c for c in summary["comparisons"] if c["metric"] == "dice"][0]
        assert dice_cmp["p_value"] == pytest.approx(2 / 1024, abs=1e-12)
        assert dice_cmp["significant"]
        stars = (out / "significance.csv").read_text()
        assert ",*" in stars

    def test_mismatched_sets_skip_tests_but_plot(self, tmp_path, capsys):
        self.fake_report(tmp_path / "runA", [0.5] * 6)
        self.fake_report(tmp_path / "runB", [0.5] * 6,
                         subjects=[f"other{i}" for i in range(6)])
        out = tmp_path / "cmp"
        assert main(["report", str(tmp_path / "runA"), str(tmp_path / "runB"),
                     "--out", str(out)]) == 0
        assert "different test sets" in capsys.readouterr().err
        summary = json.loads((out / "report_summary.json").read_text())
        assert summary["comparisons"] == []
        assert (out / "box_iou.png").exists()
