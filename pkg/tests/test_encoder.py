import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuroencode import encoder as enc
from neuroencode.gradcore import Tensor

SMALL = enc.EncoderConfig(n_layers=3, d_model=8, n_heads=2, d_ff=16, sample_rate=200, frame_size=20,
                          frame_stride=20, window_s=0.5, readout_layer=3, seed=5)


def windows(cfg, n=4, seed=0):
    return np.random.default_rng(seed).normal(0, 0.3, (n, cfg.window_samples))


def random_lora(cfg, rank=4, seed=1, scale=0.3):
    ad = enc.init_lora(cfg, rank, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for k, (a, b) in ad.factors.items():
        ad.factors[k] = (rng.normal(0, scale, a.shape), rng.normal(0, scale, b.shape))
    return ad


# ---------------------------------------------------------------------------
# independent dense oracle (loops, no shared code with the graph engine)


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def oracle_forward(w, window):
    cfg = w.config
    p = w.params
    nf, d = cfg.n_frames, cfg.d_model
    frames = np.array([window[i * cfg.frame_stride:i * cfg.frame_stride + cfg.frame_size] for i in range(nf)])
    pos = np.zeros((nf, d))
    for t in range(nf):
        for i in range(d):
            k = i // 2
            ang = t / 10000 ** (2 * k / d)
            pos[t, i] = np.sin(ang) if i % 2 == 0 else np.cos(ang)
    x = _ln(frames @ p["frame.w"].T, p["frame.ln.g"], p["frame.ln.b"]) + pos
    out = [x]
    dh = d // cfg.n_heads
    for layer in range(1, cfg.n_layers + 1):
        pre = f"L{layer}."
        a = _ln(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q, k, v = (a @ p[pre + "w" + t].T for t in "qkv")
        ctx = np.zeros_like(x)
        for h in range(cfg.n_heads):
            sl = slice(h * dh, (h + 1) * dh)
            for i in range(nf):
                s = np.array([q[i, sl] @ k[j, sl] / np.sqrt(dh) for j in range(nf)])
                e = np.exp(s - s.max())
                att = e / e.sum()
                ctx[i, sl] = sum(att[j] * v[j, sl] for j in range(nf))
        r = x + ctx @ p[pre + "wo"].T
        b = _ln(r, p[pre + "ln2.g"], p[pre + "ln2.b"])
        x = r + _gelu(b @ p[pre + "w1"].T) @ p[pre + "w2"].T
        out.append(x)
    return out


class TestInit:
    def test_deterministic(self):
        assert enc.init_encoder(SMALL).checksum() == enc.init_encoder(SMALL).checksum()

    def test_seed_changes_weights(self):
        other = enc.EncoderConfig(**{**SMALL.to_dict(), "seed": 6})
        assert enc.init_encoder(SMALL).checksum() != enc.init_encoder(other).checksum()

    def test_activation_scale_at_init(self):
        cfg = enc.EncoderConfig()
        hs = enc.forward(enc.init_encoder(cfg), None, windows(cfg, 8))
        for h in hs:
            assert 0.1 <= h.var() <= 10.0

    @pytest.mark.parametrize("kw", [dict(d_model=10, n_heads=4), dict(readout_layer=4, n_layers=3),
                                    dict(frame_size=0)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            enc.EncoderConfig(**{**SMALL.to_dict(), **kw})

    def test_lora_init(self):
        ad = enc.init_lora(enc.EncoderConfig(), seed=3)
        a = np.concatenate([a.ravel() for a, _ in ad.factors.values()])
        assert all((b == 0).all() for _, b in ad.factors.values())
        assert abs(a.std() - 0.02) < 0.001 and abs(a.mean()) < 0.001
        assert ad.rank == 4 and ad.scale == 1.0

    def test_lora_parameter_count(self):
        cfg = enc.EncoderConfig()
        ad = enc.init_lora(cfg)
        assert ad.parameter_count() == enc.lora_parameter_formula(9, 32, 4) == 9 * 3 * 2 * 4 * 32


class TestForward:
    def test_matches_dense_oracle_tiny(self):
        cfg = enc.EncoderConfig(n_layers=1, d_model=2, n_heads=1, d_ff=4, sample_rate=10, frame_size=2,
                                frame_stride=2, window_s=0.6, readout_layer=1, seed=2)
        assert cfg.n_frames == 3
        w = enc.init_encoder(cfg)
        x = np.random.default_rng(0).normal(size=cfg.window_samples)
        for got, ref in zip(enc.forward(w, None, x), oracle_forward(w, x)):
            np.testing.assert_allclose(got, ref, atol=1e-10)

    def test_matches_dense_oracle_multihead(self):
        w = enc.init_encoder(SMALL)
        x = windows(SMALL, 1)[0]
        for got, ref in zip(enc.forward(w, None, x), oracle_forward(w, x)):
            np.testing.assert_allclose(got, ref, atol=1e-10)

    def test_zero_b_bit_identical(self):
        w = enc.init_encoder(SMALL)
        x = windows(SMALL)
        ad = enc.init_lora(SMALL, seed=4)
        for a, b in zip(enc.forward(w, ad, x), enc.forward(w, None, x)):
            assert a.tobytes() == b.tobytes()

    def test_alpha_sensitivity(self):
        w = enc.init_encoder(SMALL)
        x = windows(SMALL)
        ad = random_lora(SMALL)
        doubled = enc.LoraAdapterSet(ad.rank, 2 * ad.alpha, ad.factors)
        assert not np.allclose(enc.forward(w, ad, x)[-1], enc.forward(w, doubled, x)[-1])
        zero = enc.init_lora(SMALL)
        zero2 = enc.LoraAdapterSet(zero.rank, 2 * zero.alpha, zero.factors)
        assert enc.forward(w, zero, x)[-1].tobytes() == enc.forward(w, zero2, x)[-1].tobytes()

    def test_wrong_window_length(self):
        with pytest.raises(ValueError):
            enc.forward(enc.init_encoder(SMALL), None, np.zeros(SMALL.window_samples + 1))

    def test_output_shapes(self):
        hs = enc.forward(enc.init_encoder(SMALL), None, windows(SMALL, 1)[0])
        assert len(hs) == SMALL.n_layers + 1
        assert all(h.shape == (SMALL.n_frames, SMALL.d_model) for h in hs)

    def test_windows_independent(self):
        w = enc.init_encoder(SMALL)
        x = windows(SMALL, 5)
        perm = np.array([3, 0, 4, 1, 2])
        a = enc.encode_readout(w, None, x)
        b = enc.encode_readout(w, None, x[perm])
        np.testing.assert_allclose(b[np.argsort(perm)], a, atol=1e-13)


class TestReadout:
    def test_default_layer(self):
        assert enc.EncoderConfig().readout_layer == 9

    def test_final_frame(self):
        w = enc.init_encoder(SMALL)
        hs = enc.forward(w, None, windows(SMALL, 1)[0])
        np.testing.assert_array_equal(enc.readout(hs, 2), hs[2][-1])

    def test_single_frame_input(self):
        cfg = enc.EncoderConfig(**{**SMALL.to_dict(), "window_s": 0.1})
        assert cfg.n_frames == 1
        hs = enc.forward(enc.init_encoder(cfg), None, np.ones(cfg.window_samples))
        np.testing.assert_array_equal(enc.readout(hs, 1), hs[1][0])

    def test_out_of_range(self):
        hs = enc.forward(enc.init_encoder(SMALL), None, windows(SMALL, 1)[0])
        with pytest.raises(IndexError):
            enc.readout(hs, SMALL.n_layers + 1)

    @pytest.mark.parametrize("layer", [0, 1, 3])
    def test_encode_readout_matches_forward(self, layer):
        w = enc.init_encoder(SMALL)
        ad = random_lora(SMALL)
        x = windows(SMALL, 6)
        full = enc.forward(w, ad, x)
        np.testing.assert_allclose(enc.encode_readout(w, ad, x, layer, chunk=4), full[layer][:, -1], atol=1e-12)

    def test_encode_all_layers(self):
        w = enc.init_encoder(SMALL)
        x = windows(SMALL, 3)
        full = enc.forward(w, None, x)
        allf = enc.encode_all_layers(w, None, x)
        for layer in range(SMALL.n_layers + 1):
            np.testing.assert_allclose(allf[layer], full[layer][:, -1], atol=1e-12)


class TestMerge:
    def test_zero_b_merge_equals_base(self):
        w = enc.init_encoder(SMALL)
        merged = enc.merge_lora(w, enc.init_lora(SMALL))
        assert merged.checksum() == w.checksum()

    def test_merged_matches_dynamic(self):
        w = enc.init_encoder(SMALL)
        ad = random_lora(SMALL)
        x = windows(SMALL)
        for a, b in zip(enc.forward(enc.merge_lora(w, ad), None, x), enc.forward(w, ad, x)):
            np.testing.assert_allclose(a, b, atol=1e-10)

    def test_update_rank(self):
        w = enc.init_encoder(SMALL)
        ad = random_lora(SMALL)
        merged = enc.merge_lora(w, ad)
        for layer, t in ad.keys():
            key = f"L{layer}.w{t}"
            assert np.linalg.matrix_rank(merged.params[key] - w.params[key]) <= 4

    def test_dimension_mismatch(self):
        w = enc.init_encoder(SMALL)
        bad = enc.LoraAdapterSet(2, 2.0, {(1, "q"): (np.zeros((2, 5)), np.zeros((8, 2)))})
        with pytest.raises(ValueError):
            enc.merge_lora(w, bad)

    def test_merge_does_not_touch_base(self):
        w = enc.init_encoder(SMALL)
        before = w.checksum()
        enc.merge_lora(w, random_lora(SMALL))
        assert w.checksum() == before


class TestHead:
    def test_identity_blocks(self):
        f = np.random.default_rng(0).normal(size=(7, 5))
        head = enc.BottleneckHead(np.eye(5), np.eye(5))
        np.testing.assert_array_equal(enc.head_predict(head, f), f)

    def test_default_rank(self):
        assert enc.init_head(128, 200).rank == 100

    def test_rank_clamped_to_dimensions(self):
        assert enc.init_head(128, 40).rank == 40

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 1000))
    def test_prediction_rank_bounded(self, k, seed):
        rng = np.random.default_rng(seed)
        head = enc.BottleneckHead(rng.normal(size=(8, k)), rng.normal(size=(k, 9)))
        f = rng.normal(size=(20, 8))
        assert np.linalg.matrix_rank(enc.head_predict(head, f)) <= k

    def test_invalid_rank(self):
        with pytest.raises(ValueError):
            enc.BottleneckHead(np.zeros((3, 4)), np.zeros((4, 10)))

    def test_shape_mismatch(self):
        head = enc.init_head(5, 6, 3)
        with pytest.raises(ValueError):
            enc.head_predict(head, np.zeros((2, 4)))

    def test_from_weights_exact_when_full_rank(self):
        beta = np.random.default_rng(0).normal(size=(6, 4))
        head = enc.head_from_weights(beta, 100)
        np.testing.assert_allclose(head.down @ head.up, beta, atol=1e-12)


class TestCheckpoints:
    def test_adapter_round_trip(self, tmp_path):
        ad = random_lora(SMALL)
        head = enc.init_head(32, 10, 5)
        enc.save_adapters(tmp_path / "a.bin", ad, SMALL, head, {"epoch": 3})
        ad2, cfg2, head2, header = enc.load_adapters(tmp_path / "a.bin")
        assert cfg2 == SMALL and header["epoch"] == 3 and ad2.alpha == ad.alpha
        for k in ad.factors:
            np.testing.assert_array_equal(ad2.factors[k][0], ad.factors[k][0])
            np.testing.assert_array_equal(ad2.factors[k][1], ad.factors[k][1])
        np.testing.assert_array_equal(head2.up, head.up)

    def test_payload_order(self):
        names = list(enc.adapter_arrays(random_lora(SMALL)))
        assert names[:6] == ["L1.q.A", "L1.q.B", "L1.k.A", "L1.k.B", "L1.v.A", "L1.v.B"]

    def test_weights_round_trip(self, tmp_path):
        w = enc.init_encoder(SMALL)
        enc.save_weights(tmp_path / "w.bin", w)
        assert enc.load_weights(tmp_path / "w.bin").checksum() == w.checksum()

    def test_leaves_graph_gradients_reach_lora(self):
        w = enc.init_encoder(SMALL)
        ad = random_lora(SMALL)
        p = enc.leaves(w, ad, train_lora=True)
        from neuroencode import gradcore as gc
        hs = enc.run_graph(p, SMALL, ad.scale, windows(SMALL, 2))
        g = gc.backward(gc.sum(hs[-1]))
        assert np.abs(g[p["lora.1.q.A"]]).sum() > 0
        assert not p["L1.wq"].requires_grad
