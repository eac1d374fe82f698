import numpy as np
import pytest

from dlip.encoders import (
    DualEncoder,
    EncoderConfig,
    ParamSet,
    Tokenizer,
    l2_normalize,
    load_image_tensor,
    load_weights,
    param_count_formula,
    save_image_tensor,
    save_weights,
    sinusoidal_positions,
)
from dlip.errors import (
    CorruptCheckpoint,
    DataError,
    DegenerateVector,
    DimensionMismatch,
    ShapeError,
    VersionMismatch,
)

CFG = dict(embed_dim=16, patch_grid=(2, 2), image_size=(8, 8), channels=3,
           depth=1, heads=2, hidden_mult=2, max_len=10)


def small_model(dtype=np.float64, **overrides):
    cfg = EncoderConfig(**{**CFG, **overrides})
    tok = Tokenizer.from_token_list(
        ["red", "blue", "dot", "grid", "a", "the", "row", "column"], cfg.max_len
    )
    return DualEncoder(cfg, vocab_size=tok.vocab_size, dtype=dtype), tok


class TestTokenizer:
    def test_build_sorted_stable(self):
        tok = Tokenizer.build(["b a", "c a"], max_len=4)
        assert tok.id_to_token() == ["a", "b", "c"]
        assert tok.vocab_size == 5

    def test_encode_fixed_length(self):
        tok = Tokenizer.build(["red blue dot"], max_len=5)
        ids = tok.encode("red dot")
        assert ids.shape == (5,)
        assert ids[2:].tolist() == [Tokenizer.PAD_ID] * 3

    def test_truncation(self):
        tok = Tokenizer.build(["a b c d e"], max_len=3)
        assert len(tok.encode("a b c d e")) == 3
        assert Tokenizer.PAD_ID not in tok.encode("a b c d e")

    def test_unknown_token_maps_to_unk(self):
        tok = Tokenizer.build(["red"], max_len=3)
        assert tok.encode("purple")[0] == Tokenizer.UNK_ID

    def test_empty_text_yields_unk(self):
        tok = Tokenizer.build(["red"], max_len=3)
        ids = tok.encode("...")
        assert ids[0] == Tokenizer.UNK_ID
        assert ids[1] == Tokenizer.PAD_ID

    def test_lowercase_and_punctuation(self):
        tok = Tokenizer.build(["Red, Blue!"], max_len=4)
        assert tok.id_to_token() == ["blue", "red"]
        assert tok.encode("RED blue").tolist()[:2] == tok.encode("red BLUE").tolist()[:2]

    def test_round_trip_through_token_list(self):
        tok = Tokenizer.build(["the red dot on a grid"], max_len=8)
        clone = Tokenizer.from_token_list(tok.id_to_token(), tok.max_len)
        assert clone.vocab == tok.vocab

    def test_batch_shape(self):
        tok = Tokenizer.build(["red blue"], max_len=6)
        assert tok.encode_batch(["red", "blue red"]).shape == (2, 6)
        assert tok.encode_batch([]).shape == (0, 6)


class TestConfig:
    def test_indivisible_image_raises(self):
        with pytest.raises(ShapeError):
            EncoderConfig(**{**CFG, "image_size": (9, 8)})

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            EncoderConfig(**{**CFG, "embed_dim": 15})

    def test_depth0_skips_heads_check(self):
        EncoderConfig(**{**CFG, "embed_dim": 15, "depth": 0, "heads": 4})

    def test_round_trip(self):
        cfg = EncoderConfig(**CFG)
        assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


class TestNumericHelpers:
    def test_l2_normalize_rows(self, rng):
        x = rng.normal(size=(5, 7))
        y = l2_normalize(x)
        assert np.allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-12)

    def test_l2_normalize_degenerate(self):
        with pytest.raises(DegenerateVector):
            l2_normalize(np.zeros((2, 3)))

    def test_sinusoidal_shape_and_determinism(self):
        a = sinusoidal_positions(6, 8, np.float64)
        b = sinusoidal_positions(6, 8, np.float64)
        assert a.shape == (6, 8)
        assert np.array_equal(a, b)
        assert not np.array_equal(a[0], a[1])


class TestParamSet:
    def test_flat_round_trip(self, rng):
        ps = ParamSet({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)})
        flat = ps.flat()
        clone = ps.zeros_like()
        clone.load_flat(flat)
        assert np.array_equal(clone["a"], ps["a"])
        assert np.array_equal(clone["b"], ps["b"])

    def test_load_flat_size_check(self):
        ps = ParamSet({"a": np.zeros((2, 2))})
        with pytest.raises(DimensionMismatch):
            ps.load_flat(np.zeros(5))

    def test_decay_mask_matrices_only(self):
        ps = ParamSet({
            "w": np.zeros((2, 3)),
            "b": np.zeros(3),
            "s": np.zeros(()),
        })
        mask = ps.decay_mask_flat()
        assert mask.tolist() == [True] * 6 + [False] * 4


class TestModelContracts:
    def test_param_count_matches_formula(self):
        for depth in (0, 1, 2):
            model, tok = small_model(depth=depth)
            assert model.params.size == param_count_formula(model.config, tok.vocab_size)

    def test_tau_exact_both_dtypes(self):
        for dtype in (np.float32, np.float64):
            model, _ = small_model(dtype=dtype)
            assert np.exp(-model.params["logit_s"]) == dtype(0.07)

    def test_clamp_logit_scale(self):
        model, _ = small_model()
        model.params["logit_s"] = np.array(50.0)
        model.clamp_logit_scale()
        assert model.tau == pytest.approx(1e-3)
        model.params["logit_s"] = np.array(-50.0)
        model.clamp_logit_scale()
        assert model.tau == pytest.approx(10.0)

    def test_init_deterministic(self):
        a, _ = small_model()
        b, _ = small_model()
        assert np.array_equal(a.params.flat(), b.params.flat())

    def test_param_seed_changes_init(self):
        a, _ = small_model()
        b, _ = small_model(param_seed=1)
        assert not np.array_equal(a.params.flat(), b.params.flat())

    def test_text_output_unit_norm(self, rng):
        model, tok = small_model()
        vecs, _ = model.encode_text(tok.encode_batch(["red dot", "a blue row"]))
        assert vecs.shape == (2, 16)
        assert np.allclose(np.linalg.norm(vecs, axis=-1), 1.0, atol=1e-12)

    def test_image_outputs_unit_norm(self, rng):
        model, _ = small_model()
        imgs = rng.uniform(size=(3, 3, 8, 8))
        g, p, _ = model.encode_image(imgs)
        assert g.shape == (3, 16)
        assert p.shape == (3, 4, 16)
        assert np.allclose(np.linalg.norm(g, axis=-1), 1.0, atol=1e-12)
        assert np.allclose(np.linalg.norm(p, axis=-1), 1.0, atol=1e-12)

    def test_trailing_padding_is_inert(self):
        model, tok = small_model()
        full = tok.encode_batch(["red dot"])
        trimmed = full[:, :4]
        a, _ = model.encode_text(full)
        b, _ = model.encode_text(trimmed)
        assert np.allclose(a, b, atol=1e-12)

    def test_pad_only_row_rejected(self):
        model, _ = small_model()
        with pytest.raises(DimensionMismatch):
            model.encode_text(np.zeros((1, 5), dtype=np.int32))

    def test_bad_token_ids_rejected(self):
        model, tok = small_model()
        ids = tok.encode_batch(["red"])
        ids[0, 0] = tok.vocab_size + 5
        with pytest.raises(DimensionMismatch):
            model.encode_text(ids)

    def test_text_batch_row_independence(self):
        model, tok = small_model()
        both, _ = model.encode_text(tok.encode_batch(["red dot", "blue grid"]))
        solo, _ = model.encode_text(tok.encode_batch(["blue grid"]))
        assert np.allclose(both[1], solo[0], atol=1e-12)

    def test_image_shape_checks(self, rng):
        model, _ = small_model()
        with pytest.raises(DimensionMismatch):
            model.encode_image(rng.uniform(size=(3, 8, 8)))
        with pytest.raises(ShapeError):
            model.encode_image(rng.uniform(size=(1, 3, 8, 9)))

    def test_constant_image_patches_identical_at_depth0(self):
        model, _ = small_model(depth=0)
        img = np.full((1, 3, 8, 8), 0.5)
        _, p, _ = model.encode_image(img)
        assert np.allclose(p[0], p[0][0], atol=1e-12)

    def test_position_table_breaks_patch_symmetry_at_depth1(self):
        model, _ = small_model(depth=1)
        img = np.full((1, 3, 8, 8), 0.5)
        _, p, _ = model.encode_image(img)
        assert not np.allclose(p[0][0], p[0][1], atol=1e-6)


def _directional_check(model, fn, directions=24, h=1e-5, seed=0, tol=1e-6):
    """Central-difference check of d(fn)/d(params) along random directions."""
    rng = np.random.default_rng(seed)
    theta = model.params.flat()
    value, grad = fn(theta)
    max_err = 0.0
    for _ in range(directions):
        u = rng.normal(size=theta.size)
        u /= np.linalg.norm(u)
        fp, _ = fn(theta + h * u)
        fm, _ = fn(theta - h * u)
        numeric = (fp - fm) / (2 * h)
        analytic = float(grad @ u)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        max_err = max(max_err, err)
    assert max_err < tol, f"max relative error {max_err:.3e}"


class TestBackwardPasses:
    def test_text_backward_matches_fd(self):
        model, tok = small_model(dtype=np.float64)
        tokens = tok.encode_batch(["red dot on the grid", "a blue row"])
        w = np.random.default_rng(1).normal(size=(2, 16))

        def fn(theta):
            model.params.load_flat(theta)
            vecs, cache = model.encode_text(tokens)
            grads = model.params.zeros_like()
            model.encode_text_backward(w, cache, grads)
            return float(np.sum(w * vecs)), grads.flat()

        _directional_check(model, fn)

    def test_image_backward_matches_fd(self):
        model, _ = small_model(dtype=np.float64)
        rng = np.random.default_rng(2)
        imgs = rng.uniform(size=(2, 3, 8, 8))
        wg = rng.normal(size=(2, 16))
        wp = rng.normal(size=(2, 4, 16))

        def fn(theta):
            model.params.load_flat(theta)
            g, p, cache = model.encode_image(imgs)
            grads = model.params.zeros_like()
            model.encode_image_backward(wg, wp, cache, grads)
            return float(np.sum(wg * g) + np.sum(wp * p)), grads.flat()

        _directional_check(model, fn)

    def test_depth0_backward_matches_fd(self):
        model, tok = small_model(dtype=np.float64, depth=0)
        tokens = tok.encode_batch(["red dot", "blue"])
        w = np.random.default_rng(3).normal(size=(2, 16))

        def fn(theta):
            model.params.load_flat(theta)
            vecs, cache = model.encode_text(tokens)
            grads = model.params.zeros_like()
            model.encode_text_backward(w, cache, grads)
            return float(np.sum(w * vecs)), grads.flat()

        _directional_check(model, fn)


class TestWeightsIO:
    def test_round_trip(self, tmp_path):
        model, tok = small_model(dtype=np.float32)
        path = tmp_path / "m.dlip"
        save_weights(path, model, tok)
        loaded, tok2 = load_weights(path)
        assert np.array_equal(loaded.params.flat(), model.params.flat())
        assert loaded.config == model.config
        assert tok2.vocab == tok.vocab
        assert tok2.max_len == tok.max_len

    def test_save_load_save_identical_bytes(self, tmp_path):
        model, tok = small_model(dtype=np.float32)
        p1, p2 = tmp_path / "a.dlip", tmp_path / "b.dlip"
        save_weights(p1, model, tok)
        loaded, tok2 = load_weights(p1)
        save_weights(p2, loaded, tok2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.dlip"
        path.write_bytes(b"NOPE" + bytes(32))
        with pytest.raises(CorruptCheckpoint):
            load_weights(path)

    def test_bad_version(self, tmp_path):
        model, tok = small_model(dtype=np.float32)
        path = tmp_path / "m.dlip"
        save_weights(path, model, tok)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatch):
            load_weights(path)

    def test_truncated_payload(self, tmp_path):
        model, tok = small_model(dtype=np.float32)
        path = tmp_path / "m.dlip"
        save_weights(path, model, tok)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CorruptCheckpoint):
            load_weights(path)

    def test_trailing_garbage(self, tmp_path):
        model, tok = small_model(dtype=np.float32)
        path = tmp_path / "m.dlip"
        save_weights(path, model, tok)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(CorruptCheckpoint):
            load_weights(path)


class TestImageTensorIO:
    def test_round_trip(self, tmp_path, rng):
        x = rng.uniform(size=(3, 8, 8)).astype(np.float32)
        path = tmp_path / "img.dlt"
        save_image_tensor(path, x)
        y = load_image_tensor(path)
        assert np.array_equal(x, y)
        assert y.dtype == np.float32

    def test_header_readable(self, tmp_path, rng):
        x = rng.uniform(size=(3, 4, 5)).astype(np.float32)
        path = tmp_path / "img.dlt"
        save_image_tensor(path, x)
        header = path.read_bytes().split(b"\n", 1)[0]
        assert header == b"f32 3 3 4 5"

    def test_missing_header(self, tmp_path):
        path = tmp_path / "img.dlt"
        path.write_bytes(b"no newline at all")
        with pytest.raises(DataError):
            load_image_tensor(path)

    def test_wrong_payload_size(self, tmp_path, rng):
        x = rng.uniform(size=(3, 4, 4)).astype(np.float32)
        path = tmp_path / "img.dlt"
        save_image_tensor(path, x)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(DataError):
            load_image_tensor(path)

    def test_bad_dims(self, tmp_path):
        path = tmp_path / "img.dlt"
        path.write_bytes(b"f32 2 3 x\n" + bytes(8))
        with pytest.raises(DataError):
            load_image_tensor(path)
