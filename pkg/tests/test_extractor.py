import numpy as np
import pytest
import torch

from braintalker import extractor as ex
from braintalker.extractor import ExtractorSpec

SMALL = ExtractorSpec(dim=32, n_blocks=2, ffn_dim=64, heads=4, conv_dim=16)


@pytest.fixture(scope="module")
def small():
    torch.manual_seed(0)
    return ex.build_extractor(SMALL).eval()


def test_one_second_gives_49_frames():
    torch.manual_seed(0)
    full = ex.build_extractor(ExtractorSpec()).eval()
    z = ex.extract_features(np.random.default_rng(0).uniform(-1, 1, 16000), full)
    assert tuple(z.shape) == (49, 512)


def test_frame_count_matches_stride_oracle():
    # conv output length with no padding: floor((n - k) / s) + 1 applied per layer
    for n in (400, 719, 720, 16000, 12800, 32000):
        m = n
        for k, s in zip(ex.CONV_KERNELS, ex.CONV_STRIDES):
            m = (m - k) // s + 1
        assert ex.frontend_frames(n) == m
    assert ex.frontend_frames(399) == 0 and ex.frontend_frames(400) == 1
    assert ex.frontend_frames(16000) == 49 and ex.frontend_frames(12800) == 39


def test_frames_monotone_in_length():
    counts = [ex.frontend_frames(n) for n in range(0, 5000, 7)]
    assert all(a <= b for a, b in zip(counts, counts[1:]))


def test_actual_output_matches_frontend_frames(small):
    for n in (400, 1000, 3333):
        assert ex.extract_features(np.zeros(n), small).shape[0] == ex.frontend_frames(n)


def test_deterministic_in_eval(small):
    x = np.random.default_rng(1).standard_normal(4000)
    assert torch.equal(ex.extract_features(x, small), ex.extract_features(x, small))


def test_channel_permutation_equivariance(small):
    x = np.random.default_rng(2).standard_normal((3, 3200))
    perm = [2, 0, 1]
    with torch.no_grad():
        z = ex.extract_ecog(x, small)
        zp = ex.extract_ecog(x[perm], small)
    torch.testing.assert_close(zp, z[perm], rtol=1e-5, atol=1e-5)


def test_ecog_channels_must_agree(small):
    with pytest.raises(ValueError, match="disagree"):
        ex.extract_ecog([np.zeros(1000), np.zeros(1200)], small)


def test_too_short_input(small):
    with pytest.raises(ValueError, match="too short"):
        ex.extract_features(np.zeros(300), small)


def test_speech_latent_trim_and_mismatch(small):
    s = ex.extract_speech_latent(np.zeros(16000), small, ecog_frames=48)
    assert s.shape[0] == 48 and not s.requires_grad
    with pytest.raises(ValueError, match="mismatch"):
        ex.extract_speech_latent(np.zeros(32000), small, ecog_frames=49)


def test_align_pair():
    c, s = torch.zeros(50, 4), torch.ones(49, 4)
    c2, s2 = ex.align_pair(c, s)
    assert c2.shape[0] == s2.shape[0] == 49
    with pytest.raises(ValueError):
        ex.align_pair(torch.zeros(52, 4), s)


def test_pretrained_requires_frozen():
    with pytest.raises(ValueError, match="frozen"):
        ExtractorSpec(kind="pretrained", frozen=False)


def test_pretrained_missing_directory(tmp_path, monkeypatch):
    pytest.importorskip("transformers")
    monkeypatch.delenv(ex.CACHE_ENV, raising=False)
    with pytest.raises(FileNotFoundError, match=ex.CACHE_ENV):
        ex.build_extractor(ExtractorSpec.pretrained(str(tmp_path / "missing")))


def test_pretrained_adapter_on_local_checkpoint(tmp_path, monkeypatch):
    transformers = pytest.importorskip("transformers")
    cfg = transformers.Wav2Vec2Config(
        hidden_size=32, num_hidden_layers=2, num_attention_heads=4, intermediate_size=64,
        conv_dim=(16,) * 7, num_conv_pos_embeddings=16, num_conv_pos_embedding_groups=4,
    )
    torch.manual_seed(0)
    transformers.Wav2Vec2Model(cfg).save_pretrained(tmp_path)
    monkeypatch.setenv(ex.CACHE_ENV, str(tmp_path))
    model = ex.build_extractor(ExtractorSpec.pretrained(dim=32))
    before = ex.parameter_checksum(model)
    model.train()
    assert not model.model.training
    assert all(not p.requires_grad for p in model.parameters())
    z = ex.extract_features(np.random.default_rng(0).standard_normal(16000), model)
    assert tuple(z.shape) == (49, 32)
    assert ex.parameter_checksum(model) == before
