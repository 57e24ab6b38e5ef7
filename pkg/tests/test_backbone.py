import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from motionforcing.backbone import (
    AdaLN, DualAdaLN, LatentCodec, MotionForcingDiT, TimestepEmbedder, load_checkpoint, save_checkpoint,
    timestep_embedding,
)
from conftest import tiny_config


def test_patchify_roundtrip_exact(rng):
    codec = LatentCodec(4, 3)
    x = rng.random((2, 3, 16, 8, 3)).astype(np.float32)
    z = codec.patchify(x)
    assert z.shape == (2, 3, 4, 2, 48)
    assert np.array_equal(codec.unpatchify(z), x)


def test_patchify_layout():
    codec = LatentCodec(2, 1)
    x = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
    z = codec.patchify(x)
    # top-left token holds the 2x2 block in row-major order
    assert z[0, 0].tolist() == [0, 1, 4, 5]
    assert z[1, 1].tolist() == [10, 11, 14, 15]


def test_codec_video_and_depth_roundtrip(rng):
    codec = LatentCodec(4, 3, 0.0, 30.0)
    video = rng.random((3, 8, 8, 3)).astype(np.float32)
    np.testing.assert_allclose(codec.decode_video(codec.encode_video(video)), video, atol=1e-6)
    depth = rng.uniform(0, 30, (3, 8, 8)).astype(np.float32)
    np.testing.assert_allclose(codec.decode_depth(codec.encode_depth(depth)), depth, atol=1e-5)
    z = codec.encode_depth(depth)
    assert z.shape == (3, 2, 2, 48)
    # padding channels carry nothing
    assert not codec.unpatchify(z)[..., 1:].any()
    assert codec.normalize_depth(0.0) == -1.0 and codec.normalize_depth(30.0) == 1.0


def test_codec_rejects_bad_sizes():
    with pytest.raises(ValueError):
        LatentCodec(4).patchify(np.zeros((6, 8, 3)))
    with pytest.raises(ValueError):
        LatentCodec(4, 3, 5.0, 5.0)


def _dual(width=16, seed=0):
    torch.manual_seed(seed)
    layer = DualAdaLN(width).double()
    with torch.no_grad():
        layer.modulation.weight.normal_()
        layer.modulation.bias.normal_()
    return layer


def test_fresh_dual_adaln_is_layernorm():
    layer = DualAdaLN(8).double()
    h = torch.randn(2, 6, 8, dtype=torch.float64)
    e = torch.randn(2, 8, dtype=torch.float64)
    ref = torch.nn.functional.layer_norm(h, (8,), eps=1e-6)
    assert torch.equal(layer(h, e, e * 3, 3), ref)


def test_equal_timesteps_match_single_adaln():
    layer = _dual()
    h = torch.randn(2, 6, 5, 16, dtype=torch.float64)
    emb = TimestepEmbedder(16).double()(torch.tensor([17, 300]))
    dual = layer(h, emb, emb, 2)
    single = AdaLN(layer)(h, emb)
    assert torch.allclose(dual, single, atol=1e-12, rtol=0)


def test_dual_adaln_isolation_by_autograd():
    layer = _dual()
    h = torch.randn(1, 4, 3, 16, dtype=torch.float64)
    e_d = torch.randn(1, 16, dtype=torch.float64, requires_grad=True)
    e_v = torch.randn(1, 16, dtype=torch.float64, requires_grad=True)
    out = layer(h, e_d, e_v, 2)
    g_v, = torch.autograd.grad(out[:, :2].sum(), e_v, allow_unused=True, retain_graph=True)
    g_d, = torch.autograd.grad(out[:, 2:].sum(), e_d, allow_unused=True, retain_graph=True)
    assert g_v is None or torch.count_nonzero(g_v) == 0
    assert g_d is None or torch.count_nonzero(g_d) == 0
    # and the coupling is real in the other direction
    g, = torch.autograd.grad(out[:, 2:].sum(), e_v)
    assert torch.count_nonzero(g) > 0


def test_dual_adaln_boundary_checked():
    layer = DualAdaLN(4)
    h = torch.randn(1, 4, 4)
    e = torch.randn(1, 4)
    for b in (0, 4, -1):
        with pytest.raises(ValueError):
            layer(h, e, e, b)


def _inputs(cfg, B=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    h, w = cfg.grid
    C = cfg.latent_channels
    shape = (B, cfg.frames, h, w, C)
    return (torch.randn(shape, generator=g), torch.randn(shape, generator=g),
            torch.randn(shape[:-1] + (3 * C,), generator=g))


@pytest.mark.parametrize("frames,size,patch", [(2, 8, 4), (3, 16, 4), (5, 16, 8)])
def test_output_shapes(frames, size, patch):
    cfg = tiny_config(frames=frames, height=size, width=size, patch=patch)
    model = MotionForcingDiT(cfg)
    zd, zv, cond = _inputs(cfg)
    ed, ev = model(zd, zv, torch.tensor([3, 9]), torch.tensor([100, 0]), cond)
    assert ed.shape == zd.shape and ev.shape == zv.shape
    assert torch.isfinite(ed).all() and torch.isfinite(ev).all()


def test_shape_mismatch_rejected():
    cfg = tiny_config()
    model = MotionForcingDiT(cfg)
    zd, zv, cond = _inputs(cfg)
    with pytest.raises(ValueError):
        model(zd, zv[:, :1], 0, 0, cond)
    with pytest.raises(ValueError):
        model(zd, zv, 0, 0, cond[..., :5])


def test_deterministic_forward():
    cfg = tiny_config()
    torch.manual_seed(0)
    model = MotionForcingDiT(cfg).eval()
    zd, zv, cond = _inputs(cfg)
    a = model(zd, zv, 5, 7, cond)
    b = model(zd, zv, 5, 7, cond)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_points_condition_reaches_depth_stream():
    # after one optimiser step the modulation is no longer zero and the
    # conditioning path must influence the depth prediction
    cfg = tiny_config()
    torch.manual_seed(0)
    model = MotionForcingDiT(cfg)
    zd, zv, cond = _inputs(cfg)
    opt = torch.optim.SGD(model.parameters(), lr=1e-2)
    loss = sum(x.pow(2).mean() for x in model(zd, zv, 3, 256, cond))
    loss.backward()
    opt.step()
    C = cfg.latent_channels
    no_points = cond.clone()
    no_points[..., C:2 * C] = 0
    with torch.no_grad():
        a, _ = model(zd, zv, 3, 256, cond)
        b, _ = model(zd, zv, 3, 256, no_points)
    assert (a - b).abs().max() > 1e-6


@given(st.integers(0, 1000), st.integers(0, 1000))
def test_sinusoidal_embedding_distinguishes(t1, t2):
    e = timestep_embedding(torch.tensor([t1, t2]), 128)
    assert torch.equal(e[0], e[1]) == (t1 == t2)


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_config()
    model = MotionForcingDiT(cfg)
    save_checkpoint(tmp_path / "m.pt", model, extra={"step": 3}, config_snapshot={"train": {"lr": 1.0}})
    loaded, payload = load_checkpoint(tmp_path / "m.pt", expected=cfg)
    assert payload["step"] == 3 and payload["config"]["train"]["lr"] == 1.0
    for (k, v), (k2, v2) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    assert not (tmp_path / "m.pt.tmp").exists()


def test_checkpoint_config_mismatch(tmp_path):
    save_checkpoint(tmp_path / "m.pt", MotionForcingDiT(tiny_config()))
    with pytest.raises(ValueError, match="incompatible"):
        load_checkpoint(tmp_path / "m.pt", expected=tiny_config(hidden=64))


def test_pure_noise_stream_returns_its_input():
    # alpha_bar(T_max) = 0, so the noise estimate of that stream is its latent
    cfg = tiny_config(T_max=40)
    torch.manual_seed(0)
    model = MotionForcingDiT(cfg)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn_like(p))
    zd, zv, cond = _inputs(cfg)
    ed, ev = model(zd, zv, torch.tensor([3, 9]), 40, cond)
    assert torch.equal(ev, zv)
    assert not torch.equal(ed, zd)


def test_timestep_range_checked():
    cfg = tiny_config(T_max=40)
    model = MotionForcingDiT(cfg)
    zd, zv, cond = _inputs(cfg)
    with pytest.raises(ValueError, match="timestep"):
        model(zd, zv, 41, 0, cond)
    with pytest.raises(ValueError, match="timestep"):
        model(zd, zv, 0, -1, cond)


def test_conditioning_guess_is_the_implied_clean_latent():
    # with the transformer head and noise gain silenced, a noise-free latent
    # sqrt(ab) * L(cond) must decode back to L(cond) at any timestep
    cfg = tiny_config(T_max=40)
    torch.manual_seed(1)
    model = MotionForcingDiT(cfg).double()
    C = cfg.latent_channels
    with torch.no_grad():
        model.out.weight.zero_()
        model.out.bias.zero_()
        model.cond_skip.weight.normal_(0, 0.1)
        model.cond_skip.bias.normal_(0, 0.1)
    _, _, cond = _inputs(cfg)
    cond = cond.double()
    guess_d, guess_v = model.cond_skip(cond).detach().chunk(2, dim=-1)
    ab = model.alpha_bar.double()
    for td, tv in [(1, 39), (20, 5)]:
        zd, zv = ab[td].sqrt() * guess_d, ab[tv].sqrt() * guess_v
        ed, ev = model(zd, zv, td, tv, cond)
        x0_d = (zd - (1 - ab[td]).sqrt() * ed) / ab[td].sqrt()
        x0_v = (zv - (1 - ab[tv]).sqrt() * ev) / ab[tv].sqrt()
        assert torch.allclose(x0_d, guess_d, atol=1e-10)
        assert torch.allclose(x0_v, guess_v, atol=1e-10)
    assert guess_d.shape[-1] == C


def test_conditioning_guess_starts_silent_but_trainable():
    cfg = tiny_config(T_max=40)
    model = MotionForcingDiT(cfg)
    assert not model.cond_skip.weight.any() and not model.skip_gain.weight.any()
    zd, zv, cond = _inputs(cfg)
    ed, ev = model(zd, zv, 10, 30, cond)
    (ed.square().mean() + ev.square().mean()).backward()
    assert model.cond_skip.weight.grad.abs().sum() > 0
