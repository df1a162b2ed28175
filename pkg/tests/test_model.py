import numpy as np
import pytest

from bindesc import binquant as bq
from bindesc import model as M
from bindesc import tensor as T
from gradcheck import net_grad_check


def patches(rng, n=6):
    return T.normalize_patches(rng.integers(0, 256, (n, 32, 32)).astype(np.uint8))


@pytest.mark.parametrize("variant,dim", [("hynet_ref", 128), ("didymos", 128),
                                         ("didymos_pm", 256), ("didymos_pm_prime", 256)])
def test_forward_shapes_and_heads(rng, variant, dim):
    net = M.Network(M.build(variant), seed=0)
    d, pre = net.forward(patches(rng), train=True)
    assert d.shape == (6, dim) and pre.shape == (6, dim)
    if net.spec.binary_descriptor:
        assert set(np.unique(d)) <= {-1.0, 1.0}
        bt = net.describe(patches(rng))
        assert bt.words.shape == (6, 4)   # 256 bits = 32 bytes per descriptor
    else:
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1, atol=1e-5)


def test_build_rejects_unknown():
    with pytest.raises(ValueError):
        M.build("resnet")
    with pytest.raises(ValueError):
        M.build("didymos", "per_pixel")


def test_forward_rejects_wrong_patch_size():
    net = M.Network(M.build("didymos"))
    with pytest.raises(T.DimensionError):
        net.forward(np.zeros((2, 1, 31, 31)))


def test_binary_layers_placement():
    kinds = [l.kind for l in M.build("didymos").layers if l.kind.endswith("conv")]
    assert kinds[0] == "conv" and kinds[-1] == "conv"
    assert all(k == "binary_conv" for k in kinds[1:-1])
    kinds = [l.kind for l in M.build("didymos_pm_prime").layers if l.kind.endswith("conv")]
    assert kinds[0] == "conv" and all(k == "binary_conv" for k in kinds[1:])
    assert all(l.kind == "conv" for l in M.build("hynet_ref").layers if l.kind.endswith("conv"))


def test_op_counts():
    hy = M.count_ops(M.build("hynet_ref")).mflops_equiv
    assert hy == pytest.approx(39.67, rel=0.05)
    assert M.count_ops(M.build("didymos_pm_prime")).mflops_equiv == pytest.approx(1.49, rel=0.05)
    for v in ("didymos", "didymos_pm", "didymos_pm_prime"):
        assert M.count_ops(M.build(v)).mflops_equiv <= 0.10 * hy


def test_op_count_bops_scale():
    oc = M.count_ops(M.build("didymos"))
    assert oc.mflops_equiv == pytest.approx((oc.flops + oc.bops / 64) / 1e6)
    assert oc.bops > 0


# --- gradients -------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["didymos", "didymos_pm"])
def test_full_network_gradient(variant):
    assert net_grad_check(variant, 0) < 1e-3


def test_input_gradient(rng):
    with T.extended_precision():
        net = M.Network(M.build("didymos"), seed=1, relaxed=True)
    net.need_input_grad = True
    x = T.normalize_patches(rng.integers(0, 256, (3, 32, 32)), dtype=np.float64)
    g = rng.standard_normal((3, 128))
    stats = (net.bn_stats.mean.copy(), net.bn_stats.var.copy())

    def f():
        d, _ = net.forward(x, train=True)
        net.bn_stats.mean[...], net.bn_stats.var[...] = stats
        return float(np.sum(d * g))

    f()
    gx = net.backward(g)
    for idx in [(0, 0, 5, 7), (1, 0, 16, 16), (2, 0, 31, 0)]:
        old = x[idx]
        x[idx] = old + 1e-6
        fp = f()
        x[idx] = old - 1e-6
        fm = f()
        x[idx] = old
        assert gx[idx] == pytest.approx((fp - fm) / 2e-6, rel=1e-4, abs=1e-9)


# --- serialization ----------------------------------------------------------------

def _trained_ish(variant, rng):
    net = M.Network(M.build(variant), seed=3)
    for p in net.params():
        p.value += 0.01 * rng.standard_normal(p.value.shape).astype(p.value.dtype)
    net.forward(patches(rng, 16), train=True)   # move BN running stats
    return net


@pytest.mark.parametrize("variant", M.VARIANTS)
def test_checkpoint_round_trip_bit_exact(tmp_path, rng, variant):
    net = _trained_ish(variant, rng)
    x = patches(rng, 20)
    before, _ = net.forward(x, train=False)
    M.save(M.Checkpoint.from_network(net, 7, 2, {"note": "x"}), tmp_path / "a.ckpt")
    ck = M.load(tmp_path / "a.ckpt")
    assert ck.epoch == 2 and ck.optimizer["step"] == 7 and ck.meta == {"note": "x"}
    after, _ = ck.to_network().forward(x, train=False)
    np.testing.assert_array_equal(before, after)


@pytest.mark.parametrize("variant", ["didymos", "didymos_pm", "didymos_pm_prime"])
def test_packed_export_matches_network(tmp_path, rng, variant):
    net = _trained_ish(variant, rng)
    x = patches(rng, 20)
    ref = net.describe(x)
    M.export_packed(net, tmp_path / "m.bin")
    pm = M.load_packed(tmp_path / "m.bin")
    out = pm.describe(x)
    if net.spec.binary_descriptor:
        assert out == ref
    else:
        np.testing.assert_allclose(out, ref, atol=1e-5)


def test_packed_size_pm_prime(tmp_path):
    M.export_packed(M.Network(M.build("didymos_pm_prime")), tmp_path / "m.bin")
    assert (tmp_path / "m.bin").stat().st_size < 150 * 1024


@pytest.mark.parametrize("damage", ["flip", "truncate", "magic"])
def test_corrupted_files_rejected(tmp_path, damage):
    path = tmp_path / "a.ckpt"
    M.save(M.Checkpoint.from_network(M.Network(M.build("didymos"))), path)
    raw = bytearray(path.read_bytes())
    if damage == "flip":
        raw[len(raw) // 2] ^= 0x10
    elif damage == "truncate":
        raw = raw[: len(raw) - 100]
    else:
        raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(M.CheckpointError):
        M.load(path)


def test_load_model_dispatch(tmp_path):
    net = M.Network(M.build("didymos_pm"))
    M.save(M.Checkpoint.from_network(net), tmp_path / "a.ckpt")
    M.export_packed(net, tmp_path / "b.bin")
    assert isinstance(M.load_model(tmp_path / "a.ckpt"), M.Network)
    assert isinstance(M.load_model(tmp_path / "b.bin"), M.PackedModel)
    with pytest.raises(M.CheckpointError):
        M.load(tmp_path / "b.bin")
