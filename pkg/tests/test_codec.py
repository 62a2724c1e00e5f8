import numpy as np
import pytest

from src.models.config import SpectraConfig
from src.services.codec import CodecError, LatentCodec
from src.services.spectra import MelSpectrogram, SpectrogramMeta

META = SpectrogramMeta.from_config(SpectraConfig())


def _clip(rng: np.random.Generator, frames: int = 16, bins: int = 16) -> MelSpectrogram:
    return MelSpectrogram(rng.random((frames, bins)) * 3.0, META)


def test_decode_inverts_encode():
    rng = np.random.default_rng(0)
    codec = LatentCodec.create(4, 4, seed=1).fit_normalization([_clip(rng) for _ in range(10)])
    for _ in range(100):
        clip = _clip(rng)
        decoded = codec.decode(codec.encode(clip))
        np.testing.assert_allclose(decoded.raw, clip.data, atol=1e-5)
        np.testing.assert_allclose(decoded.spectrogram.data, clip.data, atol=1e-5)


def test_encoding_is_an_isometry_of_the_normalized_input():
    rng = np.random.default_rng(2)
    codec = LatentCodec.create(4, 4, seed=3, mean=0.5, scale=2.0)
    a, b = _clip(rng), _clip(rng)

    latent_distance = np.linalg.norm(codec.encode(a).tokens - codec.encode(b).tokens)
    input_distance = np.linalg.norm(codec.normalize(a.data) - codec.normalize(b.data))

    assert latent_distance == pytest.approx(input_distance, rel=1e-5)


def test_decode_clamps_negative_values_only_in_the_spectrogram_view():
    codec = LatentCodec.create(2, 2, seed=0)
    data = np.array([[-1.0, 2.0], [0.5, -0.25]])

    decoded = codec.decode(codec.encode_array(data, META))

    np.testing.assert_allclose(decoded.raw, data, atol=1e-5)
    assert decoded.spectrogram.data.min() >= 0.0
    assert decoded.spectrogram.data[0, 0] == 0.0


def test_latent_from_another_codec_is_rejected():
    rng = np.random.default_rng(4)
    ours, theirs = LatentCodec.create(4, 4, seed=0), LatentCodec.create(4, 4, seed=1)
    assert ours.codec_id != theirs.codec_id

    with pytest.raises(CodecError):
        ours.decode(theirs.encode(_clip(rng)))


def test_indivisible_spectrogram_is_rejected():
    codec = LatentCodec.create(4, 4, seed=0)
    with pytest.raises(CodecError):
        codec.encode(MelSpectrogram(np.ones((10, 16)), META))


def test_grid_shape():
    assert LatentCodec.create(8, 8).grid_for(64, 64) == (8, 8)
    assert LatentCodec.create(4, 4).grid_for(32, 16) == (8, 4)


def test_saved_codec_behaves_identically(tmp_path):
    rng = np.random.default_rng(5)
    clips = [_clip(rng) for _ in range(4)]
    codec = LatentCodec.create(4, 4, seed=9).fit_normalization(clips)

    loaded = LatentCodec.load(codec.save(tmp_path / "codec.mcdc"))

    assert loaded.codec_id == codec.codec_id
    np.testing.assert_array_equal(loaded.encode(clips[0]).tokens, codec.encode(clips[0]).tokens)


def test_tampered_codec_blob_is_rejected(tmp_path):
    path = LatentCodec.create(2, 2, seed=0).save(tmp_path / "codec.mcdc")
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))

    with pytest.raises(CodecError):
        LatentCodec.load(path)
