"""Model construction, shape, determinism and consistency tests."""

import numpy as np
import pytest

from speechsum import autodiff as ad
from speechsum.model import (
    ConfigError,
    ModelConfig,
    SpeechToTextModel,
    TextToTextModel,
    VocabError,
    Vocabulary,
    build_model,
    decoder_spec,
    full_scale_reference,
    param_count,
    speech_encoder_spec,
    subsampled_length,
    text_encoder_spec,
)


def tiny_config(vocab_size=16) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        feature_dim=4,
        subsample_rate=2,
        subsample_layers=1,
        enc_layers=1,
        enc_dim=8,
        enc_heads=2,
        enc_ff=16,
        conv_kernel=3,
        rel_clip=4,
        dec_layers=1,
        dec_dim=8,
        dec_heads=2,
        dec_ff=16,
        text_enc_layers=1,
        max_decode_len=16,
    ).validate()


def tiny_vocab(n_words=12) -> Vocabulary:
    return Vocabulary([f"w{i:02d}" for i in range(n_words)])


# -------------------------------------------------------------- config


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=16, subsample_rate=3).validate()
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=16, enc_dim=50, enc_heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=16, conv_kernel=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=3).validate()
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=16, subsample_rate=8, subsample_layers=2).validate()


def test_config_roundtrip():
    cfg = tiny_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_full_scale_reference_is_valid():
    ref = full_scale_reference()
    assert ref.vocab_size == 50_265
    assert ref.feature_dim == 43
    # Too big to instantiate; just sanity-check the documented scale.
    n = param_count(speech_encoder_spec(ref) + decoder_spec(ref, ref.enc_dim))
    assert n > 100_000_000


# -------------------------------------------------------------- vocab


def test_vocab_bijection_and_specials():
    v = tiny_vocab()
    assert len(v) == 16
    assert v.id_of("<pad>") == Vocabulary.PAD == 0
    assert v.id_of("w00") == 4
    assert v.token_of(4) == "w00"
    assert v.decode(v.encode(["w03", "w00"])) == ["w03", "w00"]


def test_vocab_errors():
    with pytest.raises(VocabError):
        Vocabulary(["a", "a"])
    with pytest.raises(VocabError):
        Vocabulary(["<pad>"])
    with pytest.raises(VocabError):
        Vocabulary(["has space"])
    v = tiny_vocab()
    with pytest.raises(VocabError):
        v.id_of("nope")
    with pytest.raises(VocabError):
        v.token_of(99)


def test_vocab_hash_depends_on_order():
    a = Vocabulary(["x", "y"])
    b = Vocabulary(["y", "x"])
    assert a.content_hash() != b.content_hash()
    assert a.content_hash() == Vocabulary(["x", "y"]).content_hash()
    assert len(a.content_hash()) == 64


# -------------------------------------------------------------- shapes


def test_parameter_count_regressions():
    cfg = ModelConfig(vocab_size=64).validate()
    assert param_count(speech_encoder_spec(cfg) + decoder_spec(cfg, cfg.enc_dim)) == 148_420
    assert param_count(text_encoder_spec(cfg) + decoder_spec(cfg, cfg.dec_dim)) == 110_464


def test_decoder_spec_identical_across_families():
    cfg = ModelConfig(vocab_size=64).validate()
    for_speech = decoder_spec(cfg, cfg.enc_dim)
    for_text = decoder_spec(cfg, cfg.dec_dim)
    assert for_speech == for_text
    assert all(name.startswith("decoder.") for name, _, _ in for_speech)


def test_encoder_output_length_is_ceil_div():
    cfg = tiny_config()
    model = SpeechToTextModel(cfg, tiny_vocab(), seed=0)
    for frames in (2, 3, 5, 8, 13):
        out = model.encode(np.zeros((frames, 4)))
        assert out.shape == (subsampled_length(cfg, frames), cfg.enc_dim)
        assert out.shape[0] == -(-frames // cfg.subsample_rate)


def test_encoder_input_validation():
    model = SpeechToTextModel(tiny_config(), tiny_vocab(), seed=0)
    with pytest.raises(ad.ShapeError):
        model.encode(np.zeros((5, 3)))
    with pytest.raises(ad.ShapeError):
        model.encode(np.zeros((1, 4)))


def test_text_encoder_validation():
    model = TextToTextModel(tiny_config(), tiny_vocab(), seed=0)
    with pytest.raises(ad.ShapeError):
        model.encode([])
    with pytest.raises(VocabError):
        model.encode([99])
    out = model.encode([4, 5, 6])
    assert out.shape == (3, 8)


def test_vocab_size_mismatch_rejected():
    with pytest.raises(ConfigError):
        SpeechToTextModel(tiny_config(vocab_size=20), tiny_vocab(12), seed=0)


# ----------------------------------------------------------- decoding


def test_distribution_rows_are_simplex():
    model = SpeechToTextModel(tiny_config(), tiny_vocab(), seed=1)
    dists = model.teacher_forced(np.random.default_rng(0).normal(size=(6, 4)), [4, 5, Vocabulary.EOS])
    assert dists.shape == (3, 16)
    assert np.allclose(dists.data.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(dists.data >= 0)


def test_teacher_forced_requires_end_token():
    model = SpeechToTextModel(tiny_config(), tiny_vocab(), seed=1)
    src = np.zeros((4, 4))
    with pytest.raises(VocabError):
        model.teacher_forced(src, [4, 5])
    with pytest.raises(VocabError):
        model.teacher_forced(src, [])


def test_decode_step_matches_teacher_forcing():
    # Stepwise prefixes and the full teacher-forced pass must agree; the
    # causal mask makes position t blind to positions after t.
    rng = np.random.default_rng(7)
    for kind in ("speech", "text"):
        model = build_model(kind, tiny_config(), tiny_vocab(), seed=3)
        source = rng.normal(size=(7, 4)) if kind == "speech" else [4, 6, 8]
        targets = [5, 9, 7, Vocabulary.EOS]
        full = model.teacher_forced(source, targets).data
        memory = model.encode(source)
        prefix = [Vocabulary.SOS]
        for t, tok in enumerate(targets):
            step = model.decode_step(prefix, memory).data
            assert np.max(np.abs(step - full[t])) <= 1e-10
            prefix.append(tok)


def test_decode_step_requires_start_token():
    model = TextToTextModel(tiny_config(), tiny_vocab(), seed=0)
    memory = model.encode([4, 5])
    with pytest.raises(VocabError):
        model.decode_step([4], memory)


def test_decoder_rejects_overlong_input():
    cfg = tiny_config()
    model = TextToTextModel(cfg, tiny_vocab(), seed=0)
    memory = model.encode([4])
    too_long = [Vocabulary.SOS] + [4] * cfg.max_decode_len
    with pytest.raises(ad.ShapeError):
        model.decode_step(too_long, memory)


def test_long_input_uses_clipped_relative_positions():
    cfg = tiny_config()
    model = SpeechToTextModel(cfg, tiny_vocab(), seed=0)
    # 2 * rel_clip frames after subsampling exceeds the clip distance.
    out = model.encode(np.random.default_rng(1).normal(size=(4 * cfg.rel_clip, 4)))
    assert out.shape[0] == 2 * cfg.rel_clip


# -------------------------------------------------------- determinism


def test_init_is_seed_deterministic():
    cfg = tiny_config()
    a = SpeechToTextModel(cfg, tiny_vocab(), seed=11).param_arrays()
    b = SpeechToTextModel(cfg, tiny_vocab(), seed=11).param_arrays()
    c = SpeechToTextModel(cfg, tiny_vocab(), seed=12).param_arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_param_roundtrip_and_shape_check():
    model = SpeechToTextModel(tiny_config(), tiny_vocab(), seed=2)
    arrays = model.param_arrays()
    other = SpeechToTextModel(tiny_config(), tiny_vocab(), seed=9)
    other.load_param_arrays(arrays)
    assert all(np.array_equal(arrays[k], other.params[k].data) for k in arrays)
    bad = dict(arrays)
    bad["decoder.out_proj.b"] = np.zeros(3)
    with pytest.raises(ConfigError):
        other.load_param_arrays(bad)
    del bad["decoder.out_proj.b"]
    with pytest.raises(ConfigError):
        other.load_param_arrays(bad)


def test_forward_is_repeatable():
    model = SpeechToTextModel(tiny_config(), tiny_vocab(), seed=4)
    src = np.random.default_rng(5).normal(size=(6, 4))
    a = model.teacher_forced(src, [4, Vocabulary.EOS]).data
    b = model.teacher_forced(src, [4, Vocabulary.EOS]).data
    assert np.array_equal(a, b)


# ---------------------------------------------------- gradient plumbing


def test_full_model_gradient_smoke():
    # A handful of coordinates of the end-to-end gradient vs central
    # differences; the exhaustive version lives in the acceptance suite.
    cfg = tiny_config()
    model = SpeechToTextModel(cfg, tiny_vocab(), seed=6)
    rng = np.random.default_rng(8)
    src = rng.normal(size=(5, 4))
    targets = [4, 7, Vocabulary.EOS]
    weights = rng.normal(size=(3, 16))

    def loss_value() -> float:
        return ad.sum_all(ad.mul(model.teacher_forced(src, targets), ad.Tensor(weights))).item()

    with ad.Tape() as tape:
        model.watch_all(tape)
        loss = ad.sum_all(ad.mul(model.teacher_forced(src, targets), ad.Tensor(weights)))
        grads = tape.gradients(loss)
        named = {name: grads[t.node] for name, t in model.params.items()}

    step = 1e-5
    checked = 0
    for name in ("encoder.subsample.0.kernel", "encoder.blocks.0.attn.wq",
                 "encoder.rel_bias", "decoder.embed.tok", "decoder.out_proj.w",
                 "decoder.blocks.0.cross_attn.wk", "encoder.blocks.0.conv.dw.kernel"):
        param = model.params[name]
        flat_idx = rng.integers(param.size)
        orig = param.data.reshape(-1)[flat_idx]
        param.data.reshape(-1)[flat_idx] = orig + step
        hi = loss_value()
        param.data.reshape(-1)[flat_idx] = orig - step
        lo = loss_value()
        param.data.reshape(-1)[flat_idx] = orig
        fd = (hi - lo) / (2 * step)
        an = named[name].reshape(-1)[flat_idx]
        assert abs(an - fd) <= 1e-8 + 1e-4 * max(abs(an), abs(fd)), name
        checked += 1
    assert checked == 7


def test_gradients_flow_to_every_parameter():
    cfg = tiny_config()
    model = TextToTextModel(cfg, tiny_vocab(), seed=6)
    with ad.Tape() as tape:
        model.watch_all(tape)
        dists = model.teacher_forced([4, 5, 6], [7, 8, Vocabulary.EOS])
        loss = ad.sum_all(ad.log(ad.clamp_min(dists, 1e-12)))
        grads = tape.gradients(loss)
        dead = [name for name, t in model.params.items()
                if not np.any(grads[t.node])]
    # Unused embedding rows legitimately get zero gradient; whole-tensor
    # zeros elsewhere would mean a disconnected module.
    assert dead == []
