import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffsurprisal.audio import (MelClip, MelConfig, TooShortError, UnsupportedCodecError,
                                 WavFormatError, Waveform, chunk_blocks, decode_wav, hz_to_mel,
                                 mel_filterbank, mel_spectrogram, mel_to_hz, n_frames_for,
                                 read_melc, resample, write_melc, write_wav)


# -- decode_wav ---------------------------------------------------------------

def test_decode_silence(tmp_path):
    p = tmp_path / "zeros.wav"
    write_wav(p, np.zeros(22050), 22050)
    w = decode_wav(p)
    assert w.sample_rate == 22050
    assert len(w.samples) == 22050
    assert np.all(w.samples == 0.0)


def test_decode_int16_scaling(tmp_path):
    p = tmp_path / "half.wav"
    write_wav(p, np.array([0.5, -0.5, -1.0]), 8000)
    np.testing.assert_array_equal(decode_wav(p).samples, [0.5, -0.5, -1.0])


def test_decode_stereo_downmix(tmp_path):
    p = tmp_path / "stereo.wav"
    write_wav(p, np.array([[0.2, 0.6], [-0.4, 0.0]]), 8000, encoding="float32")
    w = decode_wav(p)
    np.testing.assert_allclose(w.samples, [0.4, -0.2], atol=1e-7)


def test_decode_float32_clipped_to_unit_range(tmp_path):
    p = tmp_path / "loud.wav"
    write_wav(p, np.array([1.5, -2.0, 0.25]), 8000, encoding="float32")
    np.testing.assert_array_equal(decode_wav(p).samples, [1.0, -1.0, 0.25])


def test_decode_rejects_garbage(tmp_path):
    p = tmp_path / "junk.wav"
    p.write_bytes(b"RIFX0000WAVEfmt ")
    with pytest.raises(WavFormatError):
        decode_wav(p)


def test_decode_rejects_missing_data_chunk(tmp_path):
    p = tmp_path / "nodata.wav"
    fmt = struct.pack("<HHIIHH", 1, 1, 8000, 16000, 2, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    p.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    with pytest.raises(WavFormatError):
        decode_wav(p)


def test_decode_rejects_mulaw(tmp_path):
    p = tmp_path / "ulaw.wav"
    fmt = struct.pack("<HHIIHH", 7, 1, 8000, 8000, 1, 8)
    data = bytes(100)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(data)) + data
    p.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    with pytest.raises(UnsupportedCodecError):
        decode_wav(p)


# -- resample -------------------------------------------------------------------

def test_resample_identity_is_bit_identical():
    x = np.random.default_rng(1).uniform(-1, 1, 1000)
    w = Waveform(x, 16000)
    out = resample(w, 16000)
    assert out.sample_rate == 16000
    assert out.samples.tobytes() == x.tobytes()


def test_resample_sine_peak():
    sr = 44100
    t = np.arange(sr) / sr
    w = Waveform(0.5 * np.sin(2 * np.pi * 440.0 * t), sr)
    out = resample(w, 22050)
    spec = np.abs(np.fft.rfft(out.samples))
    freqs = np.fft.rfftfreq(len(out.samples), 1.0 / 22050)
    bin_width = freqs[1]
    assert abs(freqs[np.argmax(spec)] - 440.0) <= bin_width


@pytest.mark.parametrize("src,dst", [(44100, 22050), (16000, 22050), (22050, 8000)])
def test_resample_preserves_dc(src, dst):
    w = Waveform(np.full(3000, 0.3), src)
    out = resample(w, dst)
    np.testing.assert_allclose(out.samples, 0.3, atol=1e-3)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(10, 3000), src=st.sampled_from([8000, 11025, 16000, 44100, 48000]),
       dst=st.sampled_from([8000, 22050, 24000]))
def test_resample_duration(n, src, dst):
    out = resample(Waveform(np.zeros(n), src), dst)
    assert abs(out.duration - n / src) <= 1.0 / dst


def test_resample_attenuates_above_new_nyquist():
    sr = 44100
    t = np.arange(sr // 2) / sr
    w = Waveform(0.5 * np.sin(2 * np.pi * 15000.0 * t), sr)
    out = resample(w, 22050)
    assert np.sqrt(np.mean(out.samples[500:-500] ** 2)) < 1e-3


# -- mel_spectrogram --------------------------------------------------------------

def test_mel_formula_at_700hz():
    assert hz_to_mel(700.0) == pytest.approx(2595.0 * math.log10(2.0), rel=1e-12)
    assert float(hz_to_mel(700.0)) == pytest.approx(781.17, abs=0.01)
    assert mel_to_hz(hz_to_mel(1234.5)) == pytest.approx(1234.5)


def test_silence_maps_to_minus_one():
    cfg = MelConfig(n_mels=64)
    clip = mel_spectrogram(Waveform(np.zeros(22050), 22050), cfg)
    assert np.all(clip.values == -1.0)


def test_frame_count_for_six_second_clip():
    # 5.944 s at 22050 Hz -> 131065 samples; floor(131065 / 512) + 1 = 256 frames
    cfg = MelConfig()
    n = int(5.944 * 22050)
    assert n == 131065
    assert n_frames_for(n, cfg) == 131065 // 512 + 1 == 256
    clip = mel_spectrogram(Waveform(np.zeros(n), 22050), cfg)
    assert clip.values.shape == (256, 256)


def test_default_front_end():
    cfg = MelConfig()
    assert (cfg.sample_rate, cfg.window_len, cfg.hop_len, cfg.n_mels) == (22050, 2048, 512, 256)
    assert cfg.fmax == 11025.0


@settings(max_examples=30, deadline=None)
@given(n=st.integers(256, 5000), hop=st.sampled_from([32, 64, 100, 256]))
def test_frame_count_formula(n, hop):
    cfg = MelConfig(sample_rate=8000, window_len=256, hop_len=hop, n_mels=16)
    rng = np.random.default_rng(n)
    clip = mel_spectrogram(Waveform(rng.uniform(-0.5, 0.5, n), 8000), cfg)
    assert clip.n_frames == (n + 2 * (256 // 2) - 256) // hop + 1


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), amp=st.floats(1e-3, 1.0))
def test_values_in_unit_range_and_peak_is_one(seed, amp):
    cfg = MelConfig(sample_rate=8000, window_len=256, hop_len=64, n_mels=32)
    x = amp * np.random.default_rng(seed).uniform(-1, 1, 2000)
    clip = mel_spectrogram(Waveform(x, 8000), cfg)
    assert clip.values.min() >= -1.0
    assert clip.values.max() == 1.0


def test_top_db_floor():
    cfg = MelConfig(sample_rate=8000, window_len=256, hop_len=64, n_mels=32, top_db=40.0)
    t = np.arange(4000) / 8000
    x = 0.5 * np.sin(2 * np.pi * 1000 * t)
    clip = mel_spectrogram(Waveform(x, 8000), cfg)
    # Bands far from 1 kHz are more than 40 dB down and sit on the floor.
    assert np.isclose(clip.values.min(), -1.0)


@pytest.mark.parametrize("n_mels,window", [(256, 2048), (1024, 2048), (40, 512), (128, 256)])
def test_filterbank_rows_positive(n_mels, window):
    cfg = MelConfig(window_len=window, hop_len=window // 4, n_mels=n_mels)
    fb = mel_filterbank(cfg)
    assert fb.shape == (n_mels, window // 2 + 1)
    assert np.all(fb >= 0)
    assert np.all(fb.sum(axis=1) > 0)


def test_filterbank_covers_band():
    cfg = MelConfig(f_min=300.0, f_max=8000.0, n_mels=40)
    fb = mel_filterbank(cfg)
    freqs = np.arange(fb.shape[1]) * cfg.sample_rate / cfg.window_len
    active = freqs[fb.sum(axis=0) > 0]
    assert active.min() <= 300.0 + cfg.sample_rate / cfg.window_len
    assert active.max() >= 8000.0 - cfg.sample_rate / cfg.window_len


def test_too_short():
    with pytest.raises(TooShortError):
        mel_spectrogram(Waveform(np.zeros(100), 22050), MelConfig())


def test_rate_mismatch_rejected():
    with pytest.raises(ValueError):
        mel_spectrogram(Waveform(np.zeros(4096), 44100), MelConfig())


@pytest.mark.parametrize("kwargs", [dict(hop_len=0), dict(hop_len=4096), dict(n_mels=0),
                                    dict(f_min=12000.0), dict(f_max=20000.0)])
def test_mel_config_validation(kwargs):
    with pytest.raises(ValueError):
        MelConfig(**kwargs)


# -- chunk_blocks -----------------------------------------------------------------

def _clip(n_frames, n_mels=4):
    vals = np.arange(n_mels * n_frames, dtype=float).reshape(n_mels, n_frames) / (n_mels * n_frames)
    return MelClip("c", vals, MelConfig(n_mels=n_mels), 256)


def test_chunk_exact_division():
    blocks = chunk_blocks(_clip(512), 256)
    assert len(blocks) == 2
    assert not any(b.padded for b in blocks)


def test_chunk_partial_block_padded():
    clip = _clip(300)
    blocks = chunk_blocks(clip, 256)
    assert len(blocks) == 2
    assert not blocks[0].padded and blocks[1].padded
    assert blocks[1].n_valid == 44
    np.testing.assert_array_equal(blocks[1].values[:, 44:], np.zeros((4, 212)))


def test_chunk_identity():
    clip = _clip(256)
    blocks = chunk_blocks(clip, 256)
    assert len(blocks) == 1
    np.testing.assert_array_equal(blocks[0].values, clip.values)


def test_chunk_rejects_zero():
    with pytest.raises(ValueError):
        chunk_blocks(_clip(10), 0)


@given(n_frames=st.integers(1, 600), bf=st.integers(1, 300))
def test_chunk_roundtrip(n_frames, bf):
    clip = _clip(n_frames, n_mels=3)
    blocks = chunk_blocks(clip, bf)
    assert len(blocks) == math.ceil(n_frames / bf)
    joined = np.concatenate([b.values[:, :b.n_valid] for b in blocks], axis=1)
    np.testing.assert_array_equal(joined, clip.values)


# -- MELC1 files --------------------------------------------------------------------

def test_melc_roundtrip(tmp_path):
    cfg = MelConfig(sample_rate=16000, window_len=512, hop_len=128, n_mels=8)
    vals = np.random.default_rng(0).uniform(-1, 1, (8, 13))
    clip = MelClip("song-1", vals, cfg, 4)
    path = tmp_path / "song-1.melc"
    write_melc(path, clip)
    raw = path.read_bytes()
    assert raw.startswith(b"MELC1 8 13 16000 128\n")
    assert len(raw) == len(b"MELC1 8 13 16000 128\n") + 8 * 13 * 4
    back = read_melc(path)
    assert back.clip_id == "song-1"
    assert back.config == cfg
    assert back.block_frames == 4
    np.testing.assert_allclose(back.values, vals.astype(np.float32))
