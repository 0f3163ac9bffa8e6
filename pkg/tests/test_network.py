import numpy as np
import pytest

from crlsr import autodiff as ad
from crlsr import losses as L
from crlsr import network as net
from crlsr import training as T
from crlsr.autodiff import DimensionError, Tensor
from crlsr.rng import Rng

SMALL = dict(channels=4, num_blocks=1, proj_dim=8, pool=4)


def batch(cfg, n=2, lr_side=8, seed=0):
    r = Rng(seed)
    side = lr_side * cfg.scale
    return (Tensor(r.uniform(0, 1, (n, 3, side, side)).astype(np.float32)),
            Tensor(r.uniform(0, 1, (n, 3, side, side)).astype(np.float32)))


@pytest.mark.parametrize("scale", [2, 3, 4])
def test_forward_train_shapes(scale):
    cfg = net.NetConfig(scale=scale, **SMALL)
    u_l, i_h = batch(cfg)
    out = net.forward_train(u_l, i_h, net.init_params(cfg), cfg)
    assert out.i_s.shape == i_h.shape and out.recon.shape == i_h.shape
    assert out.fmap_l.shape == out.fmap_h.shape == (2, cfg.channels) + i_h.shape[2:]
    m = (i_h.shape[2] // cfg.pool) * (i_h.shape[3] // cfg.pool)
    for group in (out.fbar_l, out.fbar_h, out.f_h, out.f_s):
        assert len(group) == 2
        for fs in group:
            assert fs.vectors.shape == (m, cfg.proj_dim)
            assert fs.spatial_map[0] * fs.spatial_map[1] == fs.m
            np.testing.assert_allclose(np.linalg.norm(fs.vectors.data, axis=1), 1.0, atol=1e-5)


def test_param_count_is_pure():
    cfg = net.NetConfig()
    assert net.param_count(cfg) == net.init_params(cfg).count() == net.param_count(net.NetConfig())
    assert net.param_count(net.NetConfig(num_blocks=4)) > net.param_count(cfg)
    # E_f is stored once although it is applied twice.
    assert sum(1 for n in net.init_params(cfg).names() if n.startswith("ef.head.w")) == 1


def test_init_is_seeded():
    a, b = net.init_params(net.NetConfig(), 3), net.init_params(net.NetConfig(), 3)
    for (na, ta), (nb, tb) in zip(a.items(), b.items()):
        assert na == nb and np.array_equal(ta.data, tb.data)


def _activations(p, cfg, x):
    acts = []
    h = net._conv(ad.add_scalar(x, -0.5), p, "enc_l.head")
    acts.append(h)
    for i in range(cfg.num_blocks):
        h = net._resblock(h, p, f"enc_l.block{i}", cfg.leaky_slope)
        acts.append(h)
    for prefix in ("dref", "drec"):
        y = ad.leaky_relu(net._conv(ad.pixel_unshuffle(h, cfg.scale), p, f"{prefix}.fold"), cfg.leaky_slope)
        acts.append(y)
        for i in range(cfg.dec_blocks):
            y = net._resblock(y, p, f"{prefix}.block{i}", cfg.leaky_slope)
            acts.append(y)
        y = ad.pixel_shuffle(net._conv(y, p, f"{prefix}.up"), cfg.scale)
        acts.append(y)
        acts.append(ad.add(net._conv(ad.leaky_relu(y, cfg.leaky_slope), p, f"{prefix}.out"),
                           net._conv(h, p, f"{prefix}.skip")))
    return acts


@pytest.mark.parametrize("seed", [0, 1])
def test_init_activation_scale(seed):
    cfg = net.NetConfig()
    p = net.init_params(cfg, seed)
    x = Tensor(Rng(10 + seed).normal((2, 3, 32, 32)).astype(np.float32))
    with ad.no_grad():
        for a in _activations(p, cfg, x):
            assert np.all(np.isfinite(a.data))
            assert 0.1 <= float(a.data.std()) <= 10.0


def test_every_parameter_receives_gradient():
    cfg = net.NetConfig(**SMALL)
    p = net.init_params(cfg, 1)
    u_l, i_h = batch(cfg, seed=2)
    out = net.forward_train(u_l, i_h, p, cfg)
    total, _ = L.total_cfrs(T.compute_terms(out, i_h, L.LossConfig()), L.LossConfig())
    ad.backward(total)
    for name, t in p.items():
        assert t.grad is not None and np.linalg.norm(t.grad) > 0, name


def test_bidirectional_loss_reaches_both_encoders():
    cfg = net.NetConfig(**SMALL)
    p = net.init_params(cfg, 4)
    u_l, i_h = batch(cfg, seed=5)
    fl, fh = net.encode_cde(u_l, i_h, p, cfg)
    loss = L.bidirectional_contrastive(net.project(fh, p, "proj_h", cfg)[0], net.project(fl, p, "proj_l", cfg)[0])
    loss.backward()
    assert np.linalg.norm(p["enc_l.head.w"].grad) > 0 and np.linalg.norm(p["enc_h.head.w"].grad) > 0


def test_encode_cde_rejects_mismatch():
    cfg = net.NetConfig(**SMALL)
    p = net.init_params(cfg)
    with pytest.raises(DimensionError):
        net.encode_cde(Tensor(np.zeros((1, 3, 16, 16))), Tensor(np.zeros((1, 3, 8, 8))), p, cfg)


def test_project_is_position_independent():
    cfg = net.NetConfig(**SMALL)
    p = net.init_params(cfg)
    fmap = np.zeros((1, cfg.channels, 8, 8), dtype=np.float32)
    fmap[:, :, :4, :4] = fmap[:, :, 4:, 4:] = Rng(0).normal((cfg.channels, 1, 1))
    fs = net.project(Tensor(fmap), p, "proj_l", cfg)[0]
    np.testing.assert_array_equal(fs.vectors.data[0], fs.vectors.data[3])


def test_project_gradient_check():
    cfg = net.NetConfig(**SMALL)
    with ad.precision(np.float64):
        p = net.init_params(cfg, 2, np.float64)
        a = Tensor(Rng(3).normal((1, cfg.channels, 8, 8)))
        b = Tensor(Rng(4).normal((1, cfg.channels, 8, 8)))

        def f(x, y):
            return L.bidirectional_contrastive(net.project(x, p, "proj_h", cfg)[0],
                                               net.project(y, p, "proj_l", cfg)[0], 0.5)
        assert ad.grad_check(f, [a, b]) < 1e-6


def test_refine_gradient_check_on_toy_input():
    cfg = net.NetConfig(**SMALL)
    with ad.precision(np.float64):
        p = net.init_params(cfg, 5, np.float64)
        fmap = Tensor(Rng(6).normal((1, cfg.channels, 4, 4)))
        w = Rng(7).normal((1, 3, 4, 4))
        names = ["dref.fold.w", "dref.up.w", "dref.out.w", "dref.skip.b"]

        def f(fm, *ws):
            q = net.ModelParams(type(p.tensors)(p.tensors), cfg)
            for n, t in zip(names, ws):
                q.tensors[n] = t
            return ad.sum(ad.mul(net.refine(fm, q, cfg), Tensor(w)))
        # Finite differences straddle LeakyReLU kinks, hence the looser bound.
        assert ad.grad_check(f, [fmap] + [Tensor(p[n].data.copy()) for n in names]) < 1e-3


@pytest.mark.parametrize("scale", [2, 3, 4])
def test_forward_infer_isolation_and_size(scale, tmp_path):
    cfg = net.NetConfig(scale=scale, **SMALL)
    p = net.init_params(cfg, 8)
    lr = Rng(9).uniform(0, 1, (3, 6, 7))
    full = net.forward_infer(lr, p, cfg)
    assert full.shape == (3, 6 * scale, 7 * scale)
    np.testing.assert_array_equal(net.forward_infer(lr, p.subset(net.INFER_MODULES), cfg), full)
    net.save_checkpoint(tmp_path / "m.ckpt", p)
    q, _, _ = net.load_checkpoint(tmp_path / "m.ckpt", modules=net.INFER_MODULES)
    assert set(q.modules()) == set(net.INFER_MODULES)
    np.testing.assert_array_equal(net.forward_infer(lr, q, cfg), full)
    assert np.all(np.isfinite(net.forward_infer(np.zeros((3, 5, 5)), p, cfg)))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = net.NetConfig(**SMALL)
    p = net.init_params(cfg, 11)
    extra = {"adam.m/x": np.arange(5, dtype=np.float64), "count": np.array([3], dtype=np.int64)}
    net.save_checkpoint(tmp_path / "c.ckpt", p, extra, {"step": 7})
    q, meta, ex = net.load_checkpoint(tmp_path / "c.ckpt")
    assert q.config == cfg and meta == {"step": 7} and q.names() == p.names()
    for (_, a), (_, b) in zip(p.items(), q.items()):
        assert a.data.dtype == b.data.dtype and a.data.tobytes() == b.data.tobytes()
    for k, v in extra.items():
        assert ex[k].dtype == v.dtype and np.array_equal(ex[k], v)
    raw = (tmp_path / "c.ckpt").read_bytes()
    net.save_checkpoint(tmp_path / "d.ckpt", q, ex, meta)
    assert (tmp_path / "d.ckpt").read_bytes() == raw


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(ValueError, match="magic"):
        net.load_checkpoint(tmp_path / "x.ckpt")


def test_config_validation():
    for kw in ({"channels": 2}, {"num_blocks": 0}, {"proj_dim": 4}, {"scale": 5}):
        with pytest.raises(ValueError):
            net.NetConfig(**kw)
