import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from adafgrad import SyntheticSpec, forward, load_manifest, synth_sequence
from adafgrad.cli import load_checkpoint, main

SMALL_SPEC = {
    "class_counts": [2, 2], "slides_per_class": 10, "n_regions_range": [2, 4],
    "d_vis": 8, "c_text": 6,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synthetic dataset plus two trained runs, shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(SMALL_SPEC))
    data = root / "data"
    assert main(["synth", "--spec", str(spec_path), "--out", str(data),
                 "--seed", "4"]) == 0
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps({"epochs_per_task": 1, "seed": 0}))
    runs = {}
    for method in ("finetune", "adafgrad"):
        out = root / f"run_{method}"
        code = main(["train", "--manifest", str(data / "manifest.json"),
                     "--config", str(cfg_path), "--method", method,
                     "--out", str(out)])
        assert code == 0
        runs[method] = out
    return {"root": root, "data": data, "runs": runs, "config": cfg_path}


class TestSynth:
    def test_writes_task_directories(self, workspace):
        task_dirs = sorted(p.name for p in workspace["data"].iterdir()
                           if p.is_dir())
        assert task_dirs == ["task0", "task1"]
        assert (workspace["data"] / "manifest.json").is_file()
        assert (workspace["data"] / "prototypes.wsp").is_file()

    def test_refuses_nonempty_without_force(self, workspace):
        assert main(["synth", "--out", str(workspace["data"])]) == 2

    def test_bad_spec_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["synth", "--spec", str(bad),
                     "--out", str(tmp_path / "o")]) == 2

    def test_seed_repeatable(self, tmp_path):
        spec = tmp_path / "s.json"
        spec.write_text(json.dumps(SMALL_SPEC))
        for name in ("a", "b"):
            assert main(["synth", "--spec", str(spec), "--seed", "9",
                         "--out", str(tmp_path / name)]) == 0
        files_a = sorted((tmp_path / "a").rglob("*.wsf"))
        files_b = sorted((tmp_path / "b").rglob("*.wsf"))
        assert [f.read_bytes() for f in files_a] == [f.read_bytes() for f in files_b]

    def test_missing_subcommand_exits_2(self):
        assert main([]) == 2


class TestTrain:
    def test_report_contains_all_metrics(self, workspace):
        report = json.loads(
            (workspace["runs"]["finetune"] / "report.json").read_text())
        for key in ("acc", "masked_acc", "auc", "macc", "bwt", "fwt", "fgt"):
            assert key in report["metrics"]
            assert report["metrics"][key] is not None

    def test_artifacts_written(self, workspace):
        out = workspace["runs"]["adafgrad"]
        for name in ("report.json", "acc_matrix.csv", "loss_log.csv",
                     "params.npz"):
            assert (out / name).is_file()

    def test_missing_manifest_exits_2(self, tmp_path):
        assert main(["train", "--manifest", str(tmp_path / "none.json"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_loss_log_finetune_only_ce(self, workspace):
        lines = (workspace["runs"]["finetune"] / "loss_log.csv").read_text() \
            .splitlines()
        header = lines[0].split(",")
        idx = {name: header.index(name) for name in
               ("ce", "infonce", "self_sim", "replay_ce", "ppgd")}
        for line in lines[1:]:
            cells = line.split(",")
            assert cells[idx["ce"]] != ""
            for name in ("infonce", "self_sim", "replay_ce", "ppgd"):
                assert cells[idx[name]] == ""


class TestReport:
    def test_comparison_table_and_svgs(self, workspace, tmp_path):
        out = tmp_path / "agg"
        runs = [str(p) for p in workspace["runs"].values()]
        assert main(["report", "--runs", *runs, "--out", str(out)]) == 0
        table = (out / "comparison.csv").read_text().splitlines()
        assert len(table) == 1 + len(runs)
        svgs = list(out.glob("*.svg"))
        assert len(svgs) == 1 + 2 * len(runs)
        for svg in svgs:
            ET.fromstring(svg.read_text())   # must be well-formed XML

    def test_scatter_points_match_reports(self, workspace, tmp_path):
        out = tmp_path / "agg2"
        runs = list(workspace["runs"].values())
        assert main(["report", "--runs", *[str(p) for p in runs],
                     "--out", str(out)]) == 0
        ns = {"svg": "http://www.w3.org/2000/svg"}
        tree = ET.fromstring((out / "acc_fgt_scatter.svg").read_text())
        points = {
            (c.get("data-method"), float(c.get("data-fgt")),
             float(c.get("data-acc")))
            for c in tree.iter("{http://www.w3.org/2000/svg}circle")
            if c.get("data-fgt") is not None
        }
        expected = set()
        for run in runs:
            rep = json.loads((run / "report.json").read_text())
            if rep["metrics"]["fgt"] is not None:
                expected.add((rep["method"], rep["metrics"]["fgt"],
                              rep["metrics"]["acc"]))
        assert points == expected

    def test_incompatible_task_counts_rejected(self, workspace, tmp_path):
        other_data = tmp_path / "d1"
        spec = dict(SMALL_SPEC, class_counts=[2])
        spec_path = tmp_path / "s.json"
        spec_path.write_text(json.dumps(spec))
        assert main(["synth", "--spec", str(spec_path),
                     "--out", str(other_data)]) == 0
        run1 = tmp_path / "r1"
        assert main(["train", "--manifest", str(other_data / "manifest.json"),
                     "--config", str(workspace["config"]), "--method",
                     "finetune", "--out", str(run1)]) == 0
        assert main(["report", "--runs", str(run1),
                     str(workspace["runs"]["finetune"]),
                     "--out", str(tmp_path / "agg")]) == 2


class TestDumpEmbeddings:
    def test_rows_and_recompute(self, workspace, tmp_path):
        out = tmp_path / "emb.csv"
        manifest_path = workspace["data"] / "manifest.json"
        assert main(["dump-embeddings", "--run",
                     str(workspace["runs"]["adafgrad"]),
                     "--manifest", str(manifest_path), "--out", str(out)]) == 0
        manifest = load_manifest(manifest_path)
        n_test = sum(len(manifest.split_entries(t, "test")) for t in range(2))
        lines = out.read_text().splitlines()
        assert len(lines) == 1 + n_test
        width = len(lines[0].split(",")) - 3
        assert width == 16  # d_model default

        params = load_checkpoint(workspace["runs"]["adafgrad"] / "params.npz")
        first = lines[1].split(",")
        slide = next(s for t in range(2) for s in manifest.load_split(t, "test")
                     if s.slide_id == first[0])
        emb = forward(params, slide).slide_embedding
        got = np.array([float(v) for v in first[3:]])
        np.testing.assert_allclose(got, emb, atol=1e-6)

    def test_mismatched_checkpoint_exits_2(self, workspace, tmp_path):
        other = tmp_path / "d2"
        spec_path = tmp_path / "s2.json"
        spec_path.write_text(json.dumps(dict(SMALL_SPEC, d_vis=10)))
        assert main(["synth", "--spec", str(spec_path), "--out", str(other)]) == 0
        assert main(["dump-embeddings", "--run",
                     str(workspace["runs"]["adafgrad"]),
                     "--manifest", str(other / "manifest.json"),
                     "--out", str(tmp_path / "e.csv")]) == 2
