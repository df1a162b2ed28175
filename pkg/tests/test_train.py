import dataclasses

import numpy as np
import pytest
from scipy import ndimage

from bindesc import model as M
from bindesc.cache import ENV_VAR
from bindesc import train as TR
from bindesc.data import archive as A


def toy_archive(n_pairs, seed=0):
    """Pairs are a smooth texture and a lightly perturbed copy of it."""
    rng = np.random.default_rng(seed)
    a = ndimage.gaussian_filter(rng.random((n_pairs, 32, 32)), (0, 2, 2))
    a = (a - a.min(axis=(1, 2), keepdims=True)) / np.ptp(a, axis=(1, 2), keepdims=True)
    b = np.clip(a + 0.03 * rng.standard_normal(a.shape), 0, 1)
    patches = np.round(255 * np.stack([a, b], 1).reshape(-1, 32, 32)).astype(np.uint8)
    pairs = np.zeros(n_pairs, A.PAIR_DTYPE)
    pairs["patch_a"] = 2 * np.arange(n_pairs)
    pairs["patch_b"] = 2 * np.arange(n_pairs) + 1
    pairs["point"] = np.arange(n_pairs)
    pairs["gt_ratio"] = pairs["est_ratio"] = 1.0
    return A.PatchArchive(patches, pairs)


@pytest.mark.slow
def test_smoke_two_epochs(tmp_path):
    ar = toy_archive(1024)
    cfg = TR.TrainConfig(variant="didymos", epochs=2)
    res = TR.train(cfg, ar, tmp_path)
    assert res.epochs_run == 2
    assert res.history[1]["total"] <= res.history[0]["total"]
    rows = TR.read_loss_csv(tmp_path / "loss.csv")
    assert len(rows) == 4
    assert (rows[0]["t"], rows[0]["k"]) == (pytest.approx(0.1), pytest.approx(10.0))
    assert list(rows[0]) == TR.LOSS_COLUMNS
    assert M.load(tmp_path / "last.ckpt").epoch == 2


class Interrupt(Exception):
    pass


def test_resume_is_bitwise_identical(tmp_path):
    ar = toy_archive(192)
    cfg = TR.TrainConfig(variant="didymos_pm", epochs=3, batch_pairs=64)
    full = TR.train(cfg, ar, tmp_path / "full")

    def stop(epoch, b, comps):
        if epoch == 1 and b == 1:
            raise Interrupt
    with pytest.raises(Interrupt):
        TR.train(cfg, ar, tmp_path / "cut", progress=stop)
    assert M.load(tmp_path / "cut" / "last.ckpt").epoch == 1
    part = TR.train(cfg, ar, tmp_path / "cut")
    assert part.epochs_run == 2
    for p, q in zip(full.network.params(), part.network.params()):
        assert p.value.tobytes() == q.value.tobytes()
    a = TR.read_loss_csv(tmp_path / "full" / "loss.csv")
    b = TR.read_loss_csv(tmp_path / "cut" / "loss.csv")
    assert [r["total"] for r in a] == [r["total"] for r in b]


def test_resume_rejects_other_architecture(tmp_path):
    ar = toy_archive(64)
    TR.train(TR.TrainConfig(variant="didymos", epochs=1, batch_pairs=64), ar, tmp_path)
    with pytest.raises(TR.TrainingError):
        TR.train(TR.TrainConfig(variant="didymos_pm", epochs=2, batch_pairs=64), ar, tmp_path)


def test_nan_loss_aborts_with_dump(tmp_path, monkeypatch):
    real = TR.total_loss

    def poisoned(batch, cfg):
        return dataclasses.replace(real(batch, cfg), total=float("nan"))
    monkeypatch.setattr(TR, "total_loss", poisoned)
    with pytest.raises(TR.TrainingError, match="non-finite"):
        TR.train(TR.TrainConfig(variant="didymos", epochs=1, batch_pairs=32), toy_archive(64),
                 tmp_path)
    dumps = list(tmp_path.glob("nan_dump_*.npz"))
    assert len(dumps) == 1
    with np.load(dumps[0]) as z:
        assert len(z["pair_indices"]) == 32
        assert np.isnan(z["components"][0])


def test_too_few_pairs():
    with pytest.raises(A.ArchiveError):
        TR.train(TR.TrainConfig(epochs=1), toy_archive(100), None)


def test_cached_run_reuses_finished(tmp_path, monkeypatch):
    monkeypatch.setenv(ENV_VAR, str(tmp_path / "cache"))
    path = tmp_path / "a.dpat"
    A.archive_write(path, toy_archive(64))
    cfg = TR.TrainConfig(variant="didymos", epochs=1, batch_pairs=32)
    net1, out1 = TR.cached_run(cfg, path)
    stamp = (out1 / "last.ckpt").stat().st_mtime_ns
    net2, out2 = TR.cached_run(cfg, path)
    assert out1 == out2
    assert (out1 / "last.ckpt").stat().st_mtime_ns == stamp
    for p, q in zip(net1.params(), net2.params()):
        np.testing.assert_array_equal(p.value, q.value)
