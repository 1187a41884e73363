import json
import subprocess
import sys

import numpy as np
import pytest

from meshclass.cli import EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_OK, SEED_ENV, main, parse_overrides
from meshclass.decimation import load_hierarchy
from meshclass.io import load_mesh, read_edge_attr, save_mesh
from meshclass.mesh import TriMesh, icosphere, tetrahedron
from meshclass.spiral import load_spirals

TINY_DATA = {"subdivision": 2, "counts_per_class": [8, 8], "seed": 2}
# small per-model settings for the 162-vertex template
TINY_RUN = {
    "come": {"widths": [8, 8, 8], "pool_factors": [0.5, 0.5]},
    "spiralnet": {"widths": [8, 8, 8], "pool_factors": [0.5, 0.5]},
    "meshcnn": {"widths": [8, 8], "edge_pool_ratios": [0.8, 0.8], "head": [8]},
    "meshnet": {"widths": [8], "spatial_width": 8, "fuse_width": 16, "head": [8], "kc_kernels": 4},
    "pointnet": {"widths": [8, 16], "head": [8]},
}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write(root / "data.json", TINY_DATA)
    assert main(["generate-data", "--config", cfg, "--out", str(root / "data")]) == EXIT_OK
    return root / "data"


def train_run(tmp_path, data_dir, model, name=None, *overrides):
    cfg = write(tmp_path / f"{model}.json", {**TINY_RUN[model], "epochs": 2, "lr": 1e-2})
    out = tmp_path / (name or model)
    code = main(["train", "--model", model, "--config", cfg, "--data", str(data_dir),
                 "--out", str(out), "--quiet", *overrides])
    return code, out


def test_parse_overrides():
    assert parse_overrides(["a=1", "data.seed=2", "name=x", "w=[1, 2]"]) == {
        "a": 1, "data": {"seed": 2}, "name": "x", "w": [1, 2]
    }


def test_generate_data_writes_manifest(data_dir):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["spec"]["seed"] == 2
    assert len(manifest["samples"]) == 16
    assert (data_dir / "template.off").exists()


def test_train_twice_identical_metrics(tmp_path, data_dir):
    code_a, a = train_run(tmp_path, data_dir, "spiralnet", "a")
    code_b, b = train_run(tmp_path, data_dir, "spiralnet", "b")
    assert code_a == code_b == EXIT_OK
    assert (a / "metrics.json").read_text() == (b / "metrics.json").read_text()
    for name in ("config.json", "checkpoint.bin", "timing.json"):
        assert (a / name).exists()
    assert len(json.loads((a / "timing.json").read_text())["epoch_times"]) == 2


def test_eval_reproduces_stored_metrics(tmp_path, data_dir, capsys):
    _, run = train_run(tmp_path, data_dir, "meshnet")
    capsys.readouterr()
    assert main(["eval", "--run", str(run)]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    stored = json.loads((run / "metrics.json").read_text())["final"]
    assert printed["test"] == stored["test"] and printed["train"] == stored["train"]
    assert json.loads((run / "eval.json").read_text()) == printed


def test_overrides_echo_into_config(tmp_path, data_dir):
    code, run = train_run(tmp_path, data_dir, "pointnet", None, "seed=7", "batch_size=4")
    assert code == EXIT_OK
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["seed"] == 7 and cfg["batch_size"] == 4 and cfg["model"] == "pointnet"
    assert "lr" in cfg["provenance"]


def test_seed_from_environment(tmp_path, data_dir, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "11")
    code, run = train_run(tmp_path, data_dir, "pointnet", "env")
    assert code == EXIT_OK
    assert json.loads((run / "config.json").read_text())["seed"] == 11
    # explicit values win over the environment
    code, run = train_run(tmp_path, data_dir, "pointnet", "explicit", "seed=3")
    assert json.loads((run / "config.json").read_text())["seed"] == 3
    assert main(["generate-data", "--out", str(tmp_path / "d"), "subdivision=1",
                 "counts_per_class=[2, 2]"]) == EXIT_OK
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["spec"]["seed"] == 11


def test_report_five_models(tmp_path, data_dir, capsys):
    runs = tmp_path / "runs"
    runs.mkdir()
    for model in TINY_RUN:
        code, _ = train_run(runs, data_dir, model)
        assert code == EXIT_OK
    capsys.readouterr()
    assert main(["report", "--runs", str(runs)]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    header, rows = lines[0], lines[2:]
    for col in ("Method", "Template", "Acc", "Prec", "Rec", "#Params"):
        assert col in header
    assert [r.split()[0] for r in rows] == ["PointNet", "MeshCNN", "MeshNet", "CoME", "SpiralNet++"]


def test_export_importance(tmp_path, data_dir):
    _, run = train_run(tmp_path, data_dir, "meshcnn")
    out = tmp_path / "imp"
    assert main(["export-importance", "--run", str(run), "--out", str(out), "--limit", "3"]) == EXIT_OK
    files = sorted(out.glob("*.edgeattr"))
    assert len(files) == 3
    edges, values = read_edge_attr(files[0])
    assert len(edges) == icosphere(2).n_edges and (values >= 0).all()
    _, other = train_run(tmp_path, data_dir, "pointnet", "p")
    assert main(["export-importance", "--run", str(other), "--out", str(out)]) == EXIT_CONFIG


def test_decimate_target_and_hierarchy(tmp_path):
    src = tmp_path / "s.off"
    save_mesh(icosphere(2), src)
    assert main(["decimate", "--input", str(src), "--out", str(tmp_path / "c.ply"), "target=80"]) == EXIT_OK
    assert load_mesh(tmp_path / "c.ply").n_vertices == 80
    cfg = write(tmp_path / "h.json", {"factors": [0.5, 0.5]})
    hier = tmp_path / "hier"
    assert main(["decimate", "--input", str(src), "--config", cfg, "--out", str(hier), "spiral_length=5"]) == EXIT_OK
    h = load_hierarchy(hier)
    assert [m.n_vertices for m in h.levels] == [162, 81, 40]
    assert load_spirals(hier / "spiral_1.txt").indices.shape == (81, 5)


# --- exit codes ----------------------------------------------------------------


def test_config_errors(tmp_path, data_dir, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["generate-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["generate-data", "--out", str(tmp_path / "x"), "colour=red"]) == EXIT_CONFIG
    assert main(["generate-data", "--out", str(tmp_path / "x"), "novalue"]) == EXIT_CONFIG
    code, _ = train_run(tmp_path, data_dir, "pointnet", None, "learning_rate=0.1")
    assert code == EXIT_CONFIG
    assert main(["train", "--config", write(tmp_path / "n.json", {}), "--out", str(tmp_path / "r")]) == EXIT_CONFIG
    assert main(["decimate", "--input", "x.off", "--out", str(tmp_path / "o.off")]) == EXIT_CONFIG
    assert "error: config" in capsys.readouterr().err


def test_data_errors(tmp_path, data_dir):
    missing = tmp_path / "nowhere"
    assert main(["train", "--model", "pointnet", "--data", str(missing), "--out", str(tmp_path / "r")]) == EXIT_DATA
    assert main(["decimate", "--input", str(missing / "m.off"), "--out", str(tmp_path / "o.off"),
                 "target=10"]) == EXIT_DATA
    # two disjoint tetrahedra cannot lose a vertex
    t = tetrahedron()
    pair = TriMesh(np.r_[t.vertices, t.vertices + 5], np.r_[t.faces, t.faces + 4])
    save_mesh(pair, tmp_path / "t.off")
    assert main(["decimate", "--input", str(tmp_path / "t.off"), "--out", str(tmp_path / "o.off"),
                 "target=6"]) == EXIT_DATA
    varied = tmp_path / "varied"
    assert main(["generate-data", "--out", str(varied), "subdivision=1", "counts_per_class=[2, 2]",
                 "vary_topology=true"]) == EXIT_OK
    assert main(["train", "--model", "come", "--data", str(varied), "--out", str(tmp_path / "r"),
                 "pool_factors=[0.5]", "widths=[4, 4]"]) == EXIT_DATA
    assert main(["report", "--runs", str(tmp_path)]) == EXIT_DATA


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path, data_dir):
    code, _ = train_run(tmp_path, data_dir, "pointnet", None, "lr=1e200")
    assert code == EXIT_DIVERGED


def test_module_entry_point(tmp_path):
    done = subprocess.run([sys.executable, "-m", "meshclass", "report", "--runs", str(tmp_path)],
                          capture_output=True, text=True)
    assert done.returncode == EXIT_DATA and "error: data" in done.stderr
