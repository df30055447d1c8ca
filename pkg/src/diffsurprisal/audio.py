"""Audio front end: WAV decoding, band-limited resampling, log-mel spectrograms
and block chunking.

The mel front end follows the configuration used for the pretrained
audio-diffusion spectrograms (22050 Hz, 2048-sample window, hop 512, 256 mel
bands).  Output values are log power mapped affinely onto [-1, 1].
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MELC_MAGIC = "MELC1"
WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE

AMIN = 1e-10
RESAMPLE_ZERO_CROSSINGS = 64
KAISER_BETA = 8.6


class WavFormatError(ValueError):
    """The file is not a well-formed RIFF/WAVE container."""


class UnsupportedCodecError(WavFormatError):
    """The container is valid but the sample encoding is not supported."""


class TooShortError(ValueError):
    """Waveform is shorter than a single analysis window."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform samples must be one-dimensional")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 22050
    window_len: int = 2048
    hop_len: int = 512
    n_mels: int = 256
    f_min: float = 0.0
    f_max: float | None = None
    top_db: float = 80.0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not 0 < self.hop_len <= self.window_len:
            raise ValueError("need 0 < hop_len <= window_len")
        if self.n_mels < 1:
            raise ValueError("n_mels must be at least 1")
        if not 0 <= self.f_min < self.fmax <= self.sample_rate / 2:
            raise ValueError("need 0 <= f_min < f_max <= sample_rate / 2")
        if self.top_db <= 0:
            raise ValueError("top_db must be positive")

    @property
    def fmax(self) -> float:
        return self.sample_rate / 2 if self.f_max is None else float(self.f_max)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> MelConfig:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class MelClip:
    clip_id: str
    values: np.ndarray
    config: MelConfig = field(default_factory=MelConfig)
    block_frames: int = 256

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class Block:
    values: np.ndarray
    padded: bool
    n_valid: int


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def _read_chunks(data: bytes):
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("missing RIFF/WAVE header")
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size and cid != b"data":
            raise WavFormatError(f"truncated {cid!r} chunk")
        yield cid, body
        pos += 8 + size + (size & 1)


def decode_wav(path: str | Path) -> Waveform:
    """Decode a PCM16 or float32 WAV file to a mono waveform in [-1, 1]."""
    data = Path(path).read_bytes()
    fmt = None
    payload = None
    for cid, body in _read_chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavFormatError("fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == WAVE_FORMAT_EXTENSIBLE:
                if len(body) < 26:
                    raise WavFormatError("extensible fmt chunk too short")
                (sub,) = struct.unpack("<H", body[24:26])
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            payload = body
    if fmt is None or payload is None:
        raise WavFormatError("missing fmt or data chunk")

    codec, channels, sample_rate, _, block_align, bits = fmt
    if channels < 1 or sample_rate <= 0:
        raise WavFormatError(f"bad channel count {channels} or rate {sample_rate}")
    if channels > 2:
        raise UnsupportedCodecError(f"{channels}-channel audio is not supported")
    if codec == WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif codec == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedCodecError(f"unsupported encoding: format tag {codec:#06x}, {bits} bits")

    frame_bytes = dtype.itemsize * channels
    usable = len(payload) - len(payload) % frame_bytes
    x = np.frombuffer(payload[:usable], dtype=dtype).astype(np.float64) * scale
    x = x.reshape(-1, channels).mean(axis=1)
    if not np.all(np.isfinite(x)):
        raise WavFormatError("non-finite float samples")
    return Waveform(np.clip(x, -1.0, 1.0), sample_rate)


def write_wav(path: str | Path, samples, sample_rate: int, *, encoding: str = "pcm16",
              channels: int = 1) -> None:
    """Write samples (shape ``(n,)`` or ``(n, channels)``) as a WAV file."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = np.repeat(x[:, None], channels, axis=1)
    channels = x.shape[1]
    if encoding == "pcm16":
        raw = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = WAVE_FORMAT_PCM, 16
    elif encoding == "float32":
        raw = x.astype("<f4").tobytes()
        tag, bits = WAVE_FORMAT_IEEE_FLOAT, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block_align = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate, sample_rate * block_align,
                      block_align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(raw)) + raw + (b"\0" if len(raw) & 1 else b"")
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def resample(w: Waveform, target_sr: int, *, chunk: int = 4096) -> Waveform:
    """Band-limited resampling with a Kaiser-windowed sinc kernel.

    The kernel spans 64 zero crossings of the (lower) cutoff on each side.
    Output samples are normalised by the sum of in-range kernel weights, so
    constant signals are reproduced exactly, including at the edges.
    """
    target_sr = int(target_sr)
    if target_sr <= 0:
        raise ValueError(f"target_sr must be positive, got {target_sr}")
    if target_sr == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)

    x = w.samples
    n_in = len(x)
    ratio = target_sr / w.sample_rate
    n_out = int(round(n_in * ratio))
    cutoff = min(1.0, ratio)
    half = int(math.ceil(RESAMPLE_ZERO_CROSSINGS / cutoff))
    offsets = np.arange(-half + 1, half + 1)
    norm = np.i0(KAISER_BETA)

    out = np.empty(n_out)
    for start in range(0, n_out, chunk):
        t = np.arange(start, min(start + chunk, n_out)) / ratio
        idx = np.floor(t).astype(np.int64)[:, None] + offsets[None, :]
        d = t[:, None] - idx
        r = np.clip(d / half, -1.0, 1.0)
        kern = cutoff * np.sinc(cutoff * d) * np.i0(KAISER_BETA * np.sqrt(1.0 - r * r)) / norm
        valid = (idx >= 0) & (idx < n_in)
        kern = np.where(valid, kern, 0.0)
        vals = x[np.clip(idx, 0, n_in - 1)]
        out[start:start + len(t)] = (kern * vals).sum(axis=1) / kern.sum(axis=1)
    return Waveform(np.clip(out, -1.0, 1.0), target_sr)


# ---------------------------------------------------------------------------
# Mel spectrogram
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _triangle_integral(x, lo, ctr, hi):
    """Antiderivative of a unit-peak triangle on [lo, hi], zero at lo."""
    x = np.clip(x, lo, hi)
    rising = (x - lo) ** 2 / (2.0 * (ctr - lo))
    falling = (ctr - lo) / 2.0 + ((hi - ctr) ** 2 - (hi - x) ** 2) / (2.0 * (hi - ctr))
    return np.where(x <= ctr, rising, falling)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular HTK-mel filterbank, shape ``(n_mels, window_len // 2 + 1)``.

    Each weight is the mean of the triangle over the frequency interval owned
    by the FFT bin, rather than the triangle sampled at the bin centre.  Narrow
    low-frequency filters therefore never collapse to all-zero rows.
    """
    n_bins = cfg.window_len // 2 + 1
    df = cfg.sample_rate / cfg.window_len
    centres = np.arange(n_bins) * df
    edges_lo, edges_hi = centres - df / 2, centres + df / 2
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    fb = np.empty((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        lo, ctr, hi = pts[m], pts[m + 1], pts[m + 2]
        fb[m] = (_triangle_integral(edges_hi, lo, ctr, hi)
                 - _triangle_integral(edges_lo, lo, ctr, hi)) / df
    return fb


def periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def n_frames_for(n_samples: int, cfg: MelConfig) -> int:
    pad = cfg.window_len // 2
    return (n_samples + 2 * pad - cfg.window_len) // cfg.hop_len + 1


def power_spectrogram(w: Waveform, cfg: MelConfig) -> np.ndarray:
    if len(w.samples) < cfg.window_len:
        raise TooShortError(
            f"need at least {cfg.window_len} samples, got {len(w.samples)}")
    pad = cfg.window_len // 2
    x = np.pad(w.samples, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_len)[::cfg.hop_len]
    spec = np.fft.rfft(frames * periodic_hann(cfg.window_len), axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def mel_spectrogram(w: Waveform, cfg: MelConfig, clip_id: str = "",
                    block_frames: int = 256) -> MelClip:
    """Log-mel spectrogram normalised to [-1, 1].

    The loudest cell maps to 1 and anything ``top_db`` below it (or quieter)
    maps to -1.  A silent input maps to -1 everywhere.
    """
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"waveform rate {w.sample_rate} != configured rate {cfg.sample_rate}; resample first")
    mel = mel_filterbank(cfg) @ power_spectrogram(w, cfg)
    peak = mel.max()
    if peak <= AMIN:
        values = -np.ones_like(mel)
    else:
        db = 10.0 * np.log10(np.maximum(mel, AMIN))
        floor = 10.0 * np.log10(peak) - cfg.top_db
        values = 2.0 * (np.maximum(db, floor) - floor) / cfg.top_db - 1.0
        values = np.clip(values, -1.0, 1.0)
    return MelClip(clip_id, values, cfg, block_frames)


def chunk_blocks(clip: MelClip, block_frames: int | None = None) -> list[Block]:
    """Split a clip into consecutive non-overlapping blocks of ``block_frames``.

    A trailing partial block is zero-padded and flagged.
    """
    bf = clip.block_frames if block_frames is None else int(block_frames)
    if bf < 1:
        raise ValueError("block_frames must be at least 1")
    blocks = []
    for start in range(0, clip.n_frames, bf):
        part = clip.values[:, start:start + bf]
        n_valid = part.shape[1]
        if n_valid < bf:
            part = np.concatenate([part, np.zeros((clip.n_mels, bf - n_valid))], axis=1)
        blocks.append(Block(np.array(part, dtype=np.float64), n_valid < bf, n_valid))
    return blocks


# ---------------------------------------------------------------------------
# MELC1 tensor files
# ---------------------------------------------------------------------------

def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def write_melc(path: str | Path, clip: MelClip) -> None:
    path = Path(path)
    cfg = clip.config
    header = f"{MELC_MAGIC} {clip.n_mels} {clip.n_frames} {cfg.sample_rate} {cfg.hop_len}\n"
    path.write_bytes(header.encode("ascii")
                     + np.ascontiguousarray(clip.values, dtype="<f4").tobytes())
    meta = {"clip_id": clip.clip_id, "block_frames": clip.block_frames, "mel": cfg.to_dict()}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def is_melc(path: str | Path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(len(MELC_MAGIC)) == MELC_MAGIC.encode("ascii")


def read_melc(path: str | Path) -> MelClip:
    path = Path(path)
    data = path.read_bytes()
    nl = data.find(b"\n")
    parts = data[:nl].decode("ascii", errors="replace").split() if nl > 0 else []
    if len(parts) != 5 or parts[0] != MELC_MAGIC:
        raise ValueError(f"{path}: not a {MELC_MAGIC} file")
    n_mels, n_frames, sr, hop = (int(p) for p in parts[1:])
    values = np.frombuffer(data[nl + 1:], dtype="<f4")
    if values.size != n_mels * n_frames:
        raise ValueError(f"{path}: expected {n_mels * n_frames} values, found {values.size}")
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        cfg = MelConfig.from_dict(meta["mel"])
        clip_id, block_frames = meta["clip_id"], int(meta["block_frames"])
    else:
        cfg = MelConfig(sample_rate=sr, hop_len=hop, window_len=max(hop, 2048), n_mels=n_mels)
        clip_id, block_frames = path.stem, 256
    return MelClip(clip_id, values.reshape(n_mels, n_frames).astype(np.float64), cfg, block_frames)


def load_clip(path: str | Path, cfg: MelConfig, clip_id: str, block_frames: int) -> MelClip:
    """Load a MELC1 tensor as-is, or decode/resample/transform a WAV file."""
    if is_melc(path):
        clip = read_melc(path)
        clip.clip_id = clip_id
        clip.block_frames = block_frames
        return clip
    w = decode_wav(path)
    if w.sample_rate != cfg.sample_rate:
        w = resample(w, cfg.sample_rate)
    return mel_spectrogram(w, cfg, clip_id, block_frames)
