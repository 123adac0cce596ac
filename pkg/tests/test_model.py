import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fhvae import tensor as tn
from fhvae.gaussian import DiagGaussian, kl, log_pdf
from fhvae.model import (FhvaeParams, ModelConfig, Segment, checkpoint_bytes, decode_x, encode_z1, encode_z2,
                         infer_svector_map, init_params, load_checkpoint, map_svector, param_shapes,
                         save_checkpoint, z2_means, zero_params)
from fhvae.objective import segment_lower_bound
from fhvae.tensor import Tensor, gradient_check

TINY = ModelConfig(frame_dim=3, seg_len=2, z1_dim=2, z2_dim=2, hidden=3, layers=2)


@pytest.fixture
def small():
    return init_params(ModelConfig(frame_dim=4, seg_len=5, z1_dim=3, z2_dim=3, hidden=8, layers=2),
                       np.random.default_rng(0))


def test_head_widths_are_twice_the_dims():
    c = ModelConfig.full_scale()
    s = param_shapes(c)
    assert s["z2_head.W"] == (2 * 256, 64) and s["z1_head.W"] == (2 * 256, 64) and s["x_head.W"] == (256, 160)
    assert s["z1_enc.l0.W"][0] == 80 + 32 and s["dec.l0.W"][0] == 64


def test_init_forget_bias_and_bounds():
    p = init_params(ModelConfig(), np.random.default_rng(0))
    b = p["z2_enc.l0.b"].data
    H = 64
    assert np.all(b[H:2 * H] == 1.0) and not np.any(b[:H]) and not np.any(b[2 * H:])
    W = p["z2_enc.l0.W"].data
    assert np.abs(W).max() <= 1 / np.sqrt(W.shape[0])
    assert all(np.all(np.isfinite(t.data)) for t in p.named().values())


def test_zero_weights_give_standard_posteriors():
    c = ModelConfig(frame_dim=4, seg_len=5, z1_dim=3, z2_dim=3, hidden=8)
    p = zero_params(c)
    x = np.random.default_rng(0).standard_normal((2, 5, 4))
    for q in (encode_z2(p, x), encode_z1(p, x, np.ones((2, 3)))):
        assert np.all(q.mean.data == 0)
        np.testing.assert_allclose(q.var.data, 1.0, atol=1e-6)
    px = decode_x(p, np.ones((2, 3)), np.ones((2, 3)))
    frames = px.per_frame()
    assert len(frames) == 5
    for f in frames:
        assert np.all(f.mean.data == 0)
        np.testing.assert_allclose(f.var.data, 1.0, atol=1e-6)


def test_default_output_dims():
    c = ModelConfig.full_scale()
    p = init_params(c, np.random.default_rng(0))
    x = np.zeros((20, 80))
    q2 = encode_z2(p, x)
    assert q2.mean.shape == (1, 32) and q2.var.shape == (1, 32)
    frames = decode_x(p, np.zeros(32), np.zeros(32)).per_frame()
    assert len(frames) == 20 and all(f.mean.shape == (1, 80) for f in frames)


def test_shape_errors(small):
    with pytest.raises(tn.DimensionError):
        encode_z2(small, np.zeros((5, 3)))
    with pytest.raises(tn.DimensionError):
        encode_z1(small, np.zeros((5, 4)), np.zeros(4))
    with pytest.raises(tn.DimensionError):
        decode_x(small, np.zeros(2), np.zeros(3))


def test_z1_depends_on_z2_sample(small):
    x = np.random.default_rng(1).standard_normal((5, 4))
    a = encode_z1(small, x, np.zeros(3)).mean.data
    b = encode_z1(small, x, np.full(3, 0.5)).mean.data
    assert np.abs(a - b).max() > 0


def test_encode_z2_is_pure_function_of_frames(small):
    x = np.random.default_rng(2).standard_normal((5, 4))
    a = encode_z2(small, Segment(x, "a", 0)).mean.data
    b = encode_z2(small, Segment(x.copy(), "zz", 9)).mean.data
    assert np.array_equal(a, b)


def _leaf(a):
    return Tensor(a, requires_grad=True)


def test_encode_z2_mean_gradient_wrt_input():
    p = init_params(TINY, np.random.default_rng(3))
    x = _leaf(np.random.default_rng(4).standard_normal((1, 2, 3)))
    rep = gradient_check(lambda x: tn.sum(encode_z2(p, x).mean), [x])
    assert rep.max_rel_error < 1e-4


def test_z1_encoder_pipeline_gradient():
    p = init_params(TINY, np.random.default_rng(5))
    r = np.random.default_rng(6)
    x = r.standard_normal((2, 2, 3))
    eps = r.standard_normal((2, 2))
    names = ["z2_enc.l0.W", "z2_head.W", "z1_enc.l1.U", "z1_head.b"]

    def f(*ts):
        q2 = encode_z2(p, x)
        z2 = tn.add(q2.mean, tn.mul(tn.sqrt(q2.var), Tensor(eps)))
        q1 = encode_z1(p, x, z2)
        return tn.sum(tn.add(tn.square(q1.mean), q1.var))

    assert gradient_check(f, [p[n] for n in names]).max_rel_error < 1e-4


def test_reconstruction_likelihood_gradient():
    p = init_params(TINY, np.random.default_rng(7))
    r = np.random.default_rng(8)
    x = r.standard_normal((2, 2, 3))
    z1, z2 = _leaf(r.standard_normal((2, 2))), _leaf(r.standard_normal((2, 2)))

    def f(z1, z2, W, Wx):
        return tn.sum(log_pdf(decode_x(p, z1, z2), x))

    assert gradient_check(f, [z1, z2, p["dec.l0.W"], p["x_head.W"]]).max_rel_error < 1e-4


@pytest.mark.parametrize("n,val,expect", [(1, 0.5, 0.4), (2, 1.0, 2 / 2.25)])
def test_map_examples(n, val, expect):
    np.testing.assert_allclose(map_svector(np.full(3, val) * n, n, 0.25), np.full(3, expect))


def test_map_approaches_sample_mean():
    r = np.random.default_rng(0)
    g = r.uniform(-1, 1, (100_000, 2))
    np.testing.assert_allclose(map_svector(g.sum(0), len(g), 0.25), g.mean(0), atol=1e-5)


def _segments(seq_id, n, c, seed):
    r = np.random.default_rng(seed)
    return [Segment(r.standard_normal((c.seg_len, c.frame_dim)), seq_id, i) for i in range(n)]


def test_infer_svector_map_formula(small):
    segs = _segments("s", 4, small.config, 0)
    means = z2_means(small, np.stack([s.frames for s in segs]))
    np.testing.assert_allclose(infer_svector_map(small, segs), means.sum(0) / (4 + 0.25), rtol=1e-13)


def test_infer_svector_map_errors(small):
    with pytest.raises(ValueError):
        infer_svector_map(small, [])
    with pytest.raises(ValueError):
        infer_svector_map(small, _segments("a", 1, small.config, 0) + _segments("b", 1, small.config, 1))


@given(st.permutations(range(5)))
def test_infer_svector_map_permutation_invariant(order):
    p = init_params(ModelConfig(frame_dim=2, seg_len=3, z1_dim=2, z2_dim=2, hidden=4), np.random.default_rng(0))
    segs = _segments("s", 5, p.config, 3)
    base = infer_svector_map(p, segs)
    np.testing.assert_allclose(infer_svector_map(p, [segs[i] for i in order]), base, rtol=1e-12, atol=1e-15)


def test_encoders_are_deterministic():
    outs = []
    for _ in range(2):
        p = init_params(ModelConfig(frame_dim=4, seg_len=5, hidden=8), np.random.default_rng(11))
        x = np.random.default_rng(12).standard_normal((3, 5, 4))
        outs.append(encode_z2(p, x).mean.data)
    assert np.array_equal(*outs)


def test_table_one_coverage(small):
    """Each of the seven model distributions is produced by exactly one entry point."""
    c = small.config
    r = np.random.default_rng(0)
    x = r.standard_normal((2, c.seg_len, c.frame_dim))
    mu2 = r.standard_normal((2, c.z2_dim))
    eps2, eps1 = r.standard_normal((2, c.z2_dim)), r.standard_normal((2, c.z1_dim))
    rows = {
        "p(z1)": DiagGaussian.standard((2, c.z1_dim)),
        "p(z2|mu2)": DiagGaussian(Tensor(mu2), Tensor(c.sigma_sq_z2)),
        "q(z2|x)": encode_z2(small, x),
        "q(z1|x,z2)": encode_z1(small, x, mu2),
        "p(x|z1,z2)": decode_x(small, eps1, eps2),
        "p(mu2)": DiagGaussian.standard((2, c.z2_dim)),
    }
    for g in rows.values():
        assert isinstance(g, DiagGaussian) and np.all(g.var.data > 0)
    sv = infer_svector_map(small, _segments("s", 3, c, 1))  # q(mu2|X), point estimate
    assert sv.shape == (c.z2_dim,)
    # the bound is assembled from exactly these rows
    terms = segment_lower_bound(small, x, mu2, [3, 3], eps2, eps1)
    q2 = rows["q(z2|x)"]
    np.testing.assert_allclose(terms.kl_z2.data, kl(q2, rows["p(z2|mu2)"]).data, rtol=1e-12)
    np.testing.assert_allclose(terms.log_prior_mu2.data * 3, log_pdf(rows["p(mu2)"], mu2).data, rtol=1e-12)


def test_checkpoint_roundtrip(tmp_path, small):
    save_checkpoint(small, tmp_path / "m.fhck", {"note": "x"})
    p, extra = load_checkpoint(tmp_path / "m.fhck")
    assert p.config == small.config and extra == {"note": "x"}
    assert set(p.tensors) == set(small.tensors)
    assert all(np.array_equal(p[k].data, small[k].data) for k in p.tensors)
    assert checkpoint_bytes(p, extra) == (tmp_path / "m.fhck").read_bytes()


def test_checkpoint_header_is_self_describing(tmp_path, small):
    import json
    import struct
    buf = checkpoint_bytes(small)
    assert buf[:4] == b"FHCK"
    (n,) = struct.unpack_from("<I", buf, 4)
    head = json.loads(buf[8:8 + n])
    assert head["config"]["hidden"] == 8
    off, length = head["tensors"]["x_head.W"]
    t, end = tn.from_bytes(buf, 8 + n + off)
    assert end - (8 + n + off) == length and np.array_equal(t.data, small["x_head.W"].data)


def test_checkpoint_rejects_other_files(tmp_path):
    (tmp_path / "junk").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "junk")


def test_copy_is_deep(small):
    c = small.copy()
    c["x_head.b"].data[0] += 1
    assert c["x_head.b"].data[0] != small["x_head.b"].data[0]
    assert isinstance(c, FhvaeParams)
