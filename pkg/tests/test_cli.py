import csv
import io
import json
import subprocess
import sys
from contextlib import redirect_stdout

import numpy as np
import pytest

from dbksvd.cli import main
from dbksvd.core import load_codes, load_matrix, store_matrix
from dbksvd.driver import TrainingHistory
from dbksvd.reference import PlantedSpec, generate_planted, recovery_score


@pytest.fixture
def planted_file(tmp_path):
    p = generate_planted(PlantedSpec(16, 32, 3, 2048, sigma_noise=0.01, seed=1))
    path = tmp_path / "y.emb1"
    store_matrix(path, p.data.astype(np.float32))
    return path, p


def run(*argv):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = main([str(a) for a in argv])
    return code, buf.getvalue()


def test_train_smoke(tmp_path, planted_file):
    data, _ = planted_file
    out = tmp_path / "dict.emb1"
    code, _ = run("train", "--data", data, "--atoms", 64, "--sparsity", 4, "--iters", 10,
                  "--batch", 1024, "--seed", 1, "--out", out, "--workers", 1)
    assert code == 0
    D = load_matrix(out)
    assert D.shape == (16, 64) and D.dtype == np.float32
    hist = TrainingHistory.read_csv(tmp_path / "dict.history.csv")
    assert len(hist) == 10
    manifest = json.loads((tmp_path / "dict.manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["config"]["sparsity"] == 4
    assert manifest["config"]["precision"] == "f32" and str(data) in manifest["inputs"]


def test_train_requires_sparsity(tmp_path, planted_file, capsys):
    code, _ = run("train", "--data", planted_file[0], "--atoms", 8, "--out", tmp_path / "d.emb1")
    assert code == 2
    assert "usage" in capsys.readouterr().err


def test_train_groups(tmp_path, planted_file):
    code, _ = run("train", "--data", planted_file[0], "--atoms", 32, "--sparsity", 4, "--iters", 2,
                  "--batch", 512, "--groups", "8,24", "--out", tmp_path / "d.emb1", "--workers", 1)
    assert code == 0
    manifest = json.loads((tmp_path / "d.manifest.json").read_text())
    assert manifest["config"]["groups"] == "8,24"
    bad, _ = run("train", "--data", planted_file[0], "--atoms", 32, "--sparsity", 4,
                 "--groups", "8,8", "--out", tmp_path / "e.emb1")
    assert bad == 2


def test_missing_input_is_io_error(tmp_path):
    code, _ = run("train", "--data", tmp_path / "nope.emb1", "--atoms", 8, "--sparsity", 2,
                  "--out", tmp_path / "d.emb1")
    assert code == 3


def test_eval_orthonormal(tmp_path):
    Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((8, 8)))
    store_matrix(tmp_path / "q.emb1", Q)
    code, out = run("eval", "--dict", tmp_path / "q.emb1", "--hist", tmp_path / "h.csv")
    assert code == 0
    assert "mutual_coherence,0\n" in out
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["bin_lo", "bin_hi", "count"] and len(rows) == 101


def test_synth_train_eval_pipeline(tmp_path):
    prefix = tmp_path / "p"
    assert run("synth", "--d", 32, "--atoms", 64, "--sparsity", 4, "--n", 8192,
               "--sigma-noise", 0.01, "--seed", 2, "--out", prefix)[0] == 0
    side = json.loads((tmp_path / "p.json").read_text())
    assert side["snr"] == pytest.approx(1e4) and load_codes(side["files"]["codes"]).k == 4
    assert run("train", "--data", side["files"]["data"], "--atoms", 64, "--sparsity", 4,
               "--iters", 12, "--batch", 2048, "--out", tmp_path / "d.emb1", "--workers", 1)[0] == 0
    code, out = run("eval", "--dict", tmp_path / "d.emb1", "--data", side["files"]["data"],
                    "--sparsity", 4, "--workers", 1)
    assert code == 0
    metrics = dict(row for row in csv.reader(io.StringIO(out)))
    assert float(metrics["mean_relative_error"]) < 0.5
    assert 0.5 < float(metrics["variance_explained"]) <= 1
    D, Dstar = load_matrix(tmp_path / "d.emb1"), load_matrix(side["files"]["dictionary"])
    assert recovery_score(D, Dstar) > 0.3


def test_encode_and_mismatch(tmp_path, planted_file):
    data, p = planted_file
    store_matrix(tmp_path / "D.emb1", p.dictionary)
    assert run("encode", "--dict", tmp_path / "D.emb1", "--data", data, "--sparsity", 3,
               "--batch", 500, "--out", tmp_path / "x.spx1", "--workers", 1)[0] == 0
    X = load_codes(tmp_path / "x.spx1")
    assert X.shape == (32, 2048) and X.column_counts().max() <= 3
    store_matrix(tmp_path / "D9.emb1", np.eye(9))
    assert run("encode", "--dict", tmp_path / "D9.emb1", "--data", data, "--sparsity", 3,
               "--out", tmp_path / "y.spx1")[0] == 2


def test_bench_summary_shape(tmp_path):
    out = tmp_path / "bench.csv"
    code, _ = run("bench", "--d", 32, "--atoms", 64, "--sparsity", 4, "--batch", 512,
                  "--trials", 2, "--workers", "1,8", "--out", out)
    assert code == 0
    rows = list(csv.DictReader(open(out)))
    assert {r["phase"] for r in rows} >= {"encode", "eigen"}
    summary = list(csv.DictReader(open(tmp_path / "bench.summary.csv")))
    assert len(summary) == 2 and [s["workers"] for s in summary] == ["1", "8"]
    assert run("bench", "--d", 0, "--out", out)[0] == 2


def test_config_file_and_flag_override(tmp_path, planted_file):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# desk run\ndata = {planted_file[0]}\natoms = 32\nsparsity = 3\niters = 3\nbatch = 512\n"
                   f"out = {tmp_path / 'a.emb1'}\nworkers = 1\n")
    assert run("train", "--config", cfg, "--iters", 2)[0] == 0
    assert len(TrainingHistory.read_csv(tmp_path / "a.history.csv")) == 2
    cfg.write_text("atoms 32\n")
    assert run("train", "--config", cfg)[0] == 2


def test_manifest_rerun_reproduces_history(tmp_path, planted_file):
    base = ["--data", planted_file[0], "--atoms", 32, "--sparsity", 3, "--iters", 4,
            "--batch", 512, "--seed", 7, "--workers", 1]
    assert run("train", *base, "--out", tmp_path / "a.emb1")[0] == 0
    assert run("train", "--config", tmp_path / "a.manifest.json", "--out", tmp_path / "b.emb1",
               "--history", tmp_path / "b.history.csv", "--manifest", tmp_path / "b.manifest.json")[0] == 0
    ha = TrainingHistory.read_csv(tmp_path / "a.history.csv")
    hb = TrainingHistory.read_csv(tmp_path / "b.history.csv")
    for col in ("mre_train", "varexp_train", "mre_val", "varexp_val"):
        np.testing.assert_allclose(ha.column(col), hb.column(col), atol=1e-6)
    assert load_matrix(tmp_path / "a.emb1").tobytes() == load_matrix(tmp_path / "b.emb1").tobytes()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "dbksvd.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "dbksvd" in res.stdout
