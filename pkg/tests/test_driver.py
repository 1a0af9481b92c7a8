import csv
import tracemalloc

import numpy as np
import pytest

from dbksvd.core import ConfigError, DimensionMismatch, NonFiniteState, TrainingConfig, store_matrix
from dbksvd.driver import (
    HISTORY_HEADER,
    DataSource,
    TrainingHistory,
    derive_seed,
    encode,
    evaluate,
    fit,
    initialize_dictionary,
    memory_estimate,
)
from dbksvd.metrics import mean_relative_error
from dbksvd.reference import PlantedSpec, generate_planted


def test_init_deterministic_unit_norm():
    a = initialize_dictionary(32, 64, seed=3)
    b = initialize_dictionary(32, 64, seed=3)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, initialize_dictionary(32, 64, seed=4))
    np.testing.assert_allclose(np.linalg.norm(a, axis=0), 1, atol=1e-12)


def test_init_is_centered():
    D = initialize_dictionary(256, 512, seed=0)
    assert abs(D.mean()) < 0.02


def test_derive_seed_stable():
    assert derive_seed(1, "epoch", 2) == derive_seed(1, "epoch", 2)
    assert derive_seed(1, "epoch", 2) != derive_seed(1, "epoch", 3)
    assert 0 <= derive_seed(0, "x") < 2**63


def test_schedule_covers_pool():
    Y = np.arange(40.0).reshape(1, 40)
    src = DataSource(Y, 10, seed=2)
    sched = src.schedule(9, exclude=(0,))
    assert [b.window for b in sched[:3]] == [1, 2, 3]
    epoch1 = np.concatenate([b.samples for b in sched[3:6]])
    assert sorted(epoch1) == list(range(10, 40))
    assert not np.array_equal(epoch1, np.arange(10, 40))
    assert not np.array_equal(epoch1, np.concatenate([b.samples for b in sched[6:9]]))


def test_file_gather_matches_memory(tmp_path, rng):
    A, B = rng.standard_normal((4, 25)), rng.standard_normal((4, 13))
    store_matrix(tmp_path / "a.emb1", A)
    store_matrix(tmp_path / "b.emb1", B)
    src_f = DataSource([tmp_path / "a.emb1", tmp_path / "b.emb1"], 8, dtype=np.float64)
    src_m = DataSource([A, B], 8, dtype=np.float64)
    assert len(src_f) == 6 and src_f.windows[3] == (0, 24, 25)
    ids = rng.permutation(38)[:20]
    np.testing.assert_allclose(src_f.gather(ids), src_m.gather(ids), rtol=1e-6)
    np.testing.assert_allclose(src_m.gather(ids), np.hstack([A, B])[:, ids])


def test_source_dimension_mismatch(rng):
    with pytest.raises(DimensionMismatch):
        DataSource([rng.standard_normal((3, 5)), rng.standard_normal((4, 5))], 2)


def test_identity_data_learned_exactly():
    d = 16
    cfg = TrainingConfig(atoms=d, sparsity=1, batch_size=d, iterations=10, precision="f64")
    res = fit(DataSource(np.eye(d), d, dtype=np.float64), cfg)
    assert res.history.records[-1].mre_train < 1e-3


def test_zero_iterations_returns_init():
    cfg = TrainingConfig(atoms=12, sparsity=2, batch_size=10, iterations=0, seed=5)
    Y = np.random.default_rng(0).standard_normal((6, 30))
    res = fit(DataSource(Y, 10), cfg)
    np.testing.assert_array_equal(res.dictionary, initialize_dictionary(6, 12, derive_seed(5, "init"), np.float32))
    assert len(res.history) == 0


def test_fit_deterministic_and_history(tmp_path):
    p = generate_planted(PlantedSpec(12, 24, 3, 600, sigma_noise=0.01, seed=1))
    cfg = TrainingConfig(atoms=24, sparsity=3, batch_size=200, iterations=6, seed=9)
    a = fit(DataSource(p.data, 200), cfg, history_path=tmp_path / "h.csv")
    b = fit(DataSource(p.data, 200), cfg)
    assert a.dictionary.tobytes() == b.dictionary.tobytes()
    with open(tmp_path / "h.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == HISTORY_HEADER and len(rows) == 7
    back = TrainingHistory.read_csv(tmp_path / "h.csv")
    np.testing.assert_array_equal(back.column("mre_train"), a.history.column("mre_train"))
    assert a.history.column("mre_train")[-1] < a.history.column("mre_train")[0]
    assert np.all(a.history.column("encode_s") > 0)


def test_encode_reproduces_last_training_metric():
    p = generate_planted(PlantedSpec(12, 24, 3, 600, sigma_noise=0.01, seed=2))
    src = DataSource(p.data, 200, dtype=np.float32)
    cfg = TrainingConfig(atoms=24, sparsity=3, batch_size=200, iterations=4, seed=1)
    res = fit(src, cfg)
    sched = src.schedule(4, exclude=(0,))
    Y = src.load_batch(sched[-1])
    _, mre, _ = evaluate(Y, res.dictionary, 3)
    assert abs(mre - res.history.records[-1].mre_train) < 1e-6


def test_encode_source(rng):
    p = generate_planted(PlantedSpec(8, 16, 2, 50, seed=3))
    codes = encode(p.dictionary, DataSource(p.data, 16, dtype=np.float64), 2)
    assert codes.n == 50
    assert mean_relative_error(p.data, p.dictionary, codes) < 0.5
    empty = encode(p.dictionary, DataSource([], 16), 2)
    assert empty.n == 0
    with pytest.raises(DimensionMismatch):
        encode(p.dictionary, DataSource(rng.standard_normal((5, 4)), 2), 2)


def test_more_sparsity_never_hurts():
    p = generate_planted(PlantedSpec(16, 32, 4, 300, sigma_noise=0.05, seed=6))
    src = DataSource(p.data, 300, dtype=np.float64)
    errs = [mean_relative_error(p.data, p.dictionary, encode(p.dictionary, src, k)) for k in (1, 2, 4, 8)]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_nonfinite_input_raises():
    Y = np.random.default_rng(0).standard_normal((4, 20))
    Y[1, 3] = np.nan
    cfg = TrainingConfig(atoms=8, sparsity=2, batch_size=20, iterations=2)
    with pytest.raises(NonFiniteState):
        fit(DataSource(Y, 20), cfg)


def test_bad_config():
    with pytest.raises(ConfigError):
        TrainingConfig(atoms=8, sparsity=0).validate()
    with pytest.raises(ConfigError):
        TrainingConfig(atoms=8, sparsity=9).validate()


def test_empty_source_rejected():
    with pytest.raises(ValueError):
        fit(DataSource([], 4), TrainingConfig(atoms=4, sparsity=1))


def test_early_stop():
    cfg = TrainingConfig(atoms=4, sparsity=1, batch_size=4, iterations=50, precision="f64",
                         early_stop=True, early_stop_window=3, early_stop_tol=1e-6)
    res = fit(DataSource(np.eye(4), 4, dtype=np.float64), cfg)
    assert len(res.history) < 50


def test_memory_estimate_tracks_peak():
    d, m, n_b = 64, 256, 2048
    Y = np.random.default_rng(0).standard_normal((d, n_b)).astype(np.float32)
    cfg = TrainingConfig(atoms=m, sparsity=8, batch_size=n_b, iterations=1, precision="f32")
    src = DataSource(Y, n_b)
    fit(src, cfg)  # warm up compiled kernels
    tracemalloc.start()
    fit(src, cfg)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    est = memory_estimate(d, m, n_b, workers=1, itemsize=4)
    assert est / 2 <= peak <= 2 * est, (peak, est)
