"""Synthetic IQ modulation datasets and the ``SIGD`` binary container.

Every sample draws its randomness (payload bits, roll-off, phase offset,
carrier frequency offset, noise) from its own Philox stream keyed by
``(seed, scheme, snr, index)``, so any sample can be regenerated in isolation
and the dataset does not depend on generation order.

Container layout (``SIGD`` v1, little-endian)::

    magic "SIGD" | version u16 | N u32 | num_samples u64 | num_classes u16
    class names: (u16 byte length + UTF-8) * num_classes
    SNR grid:    count u16 + i16 * count
    payload:     (label u16, snr i16, I f32*N, Q f32*N) * num_samples
    CRC32 u32 over the payload bytes
"""

from __future__ import annotations

import hashlib
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    ContainerError,
    DegenerateInputError,
    TruncatedError,
    VersionMismatchError,
)

SCHEMES = (
    "BPSK", "QPSK", "8PSK", "OQPSK",
    "2FSK", "4FSK", "8FSK",
    "16QAM", "32QAM", "64QAM",
    "4PAM", "8PAM",
)

_ORDER = {
    "BPSK": 2, "QPSK": 4, "8PSK": 8, "OQPSK": 4,
    "2FSK": 2, "4FSK": 4, "8FSK": 8,
    "16QAM": 16, "32QAM": 32, "64QAM": 64,
    "4PAM": 4, "8PAM": 8,
}

MAGIC = b"SIGD"
VERSION = 1
RC_SPAN = 6


@dataclass
class IQSample:
    i: np.ndarray
    q: np.ndarray
    label: int = 0
    snr_db: int = 0

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.i.shape != self.q.shape or self.i.ndim != 1:
            raise ValueError(f"I and Q must be equal-length vectors, got {self.i.shape}, {self.q.shape}")

    def __len__(self):
        return len(self.i)

    def as_array(self):
        return np.stack([self.i, self.q])


# -- bits to symbols ----------------------------------------------------------


def bits_per_symbol(scheme):
    return int(math.log2(_order(scheme)))


def _order(scheme):
    try:
        return _ORDER[scheme]
    except KeyError:
        raise ConfigError(f"unknown modulation scheme {scheme!r}; known: {', '.join(SCHEMES)}") from None


def _gray_inverse(g):
    g = np.asarray(g, dtype=np.int64)
    n = g.copy()
    shift = g >> 1
    while np.any(shift):
        n ^= shift
        shift >>= 1
    return n


def _gray_pam_levels(M):
    # level for each bit pattern b; adjacent levels differ by one bit
    k = _gray_inverse(np.arange(M))
    return (2 * k - (M - 1)).astype(np.float64)


def constellation(scheme):
    """Unit-average-power alphabet indexed by the integer value of each bit group.

    FSK schemes have no complex alphabet and raise ConfigError.
    """
    M = _order(scheme)
    if scheme.endswith("FSK"):
        raise ConfigError(f"{scheme} has no complex constellation")
    if scheme.endswith("PSK"):
        k = _gray_inverse(np.arange(M))
        offset = 0.0 if M == 2 else np.pi / M
        pts = np.exp(1j * (2 * np.pi * k / M + offset))
    elif scheme.endswith("PAM"):
        pts = _gray_pam_levels(M).astype(np.complex128)
    elif scheme == "32QAM":
        # 6x6 square grid without its four corners, row-major order
        lv = np.arange(-5, 6, 2, dtype=np.float64)
        pts = np.array([complex(a, b) for a in lv for b in lv if not (abs(a) == 5 and abs(b) == 5)])
    else:
        L = int(round(math.sqrt(M)))
        half = int(math.log2(L))
        lv = _gray_pam_levels(L)
        b = np.arange(M)
        pts = lv[b >> half] + 1j * lv[b & (L - 1)]
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


def bits_to_ints(bits, scheme):
    bps = bits_per_symbol(scheme)
    bits = np.asarray(bits, dtype=np.int64)
    if bits.ndim != 1 or len(bits) % bps:
        raise ConfigError(f"{scheme} needs a bit count divisible by {bps}, got {bits.shape}")
    groups = bits.reshape(-1, bps)
    weights = 1 << np.arange(bps - 1, -1, -1)
    return groups @ weights


def modulate(bits, scheme):
    """Map bits (MSB first per symbol) to complex symbols.

    FSK schemes return integer tone indices instead; they are turned into a
    phase-continuous waveform by :func:`synthesize_waveform`.
    """
    ints = bits_to_ints(bits, scheme)
    if scheme.endswith("FSK"):
        return _gray_inverse(ints)
    return constellation(scheme)[ints]


# -- waveform -----------------------------------------------------------------


def raised_cosine(t, rolloff):
    """Raised-cosine impulse response at ``t`` measured in symbol periods."""
    t = np.asarray(t, dtype=np.float64)
    a = float(rolloff)
    if not 0 < a < 1:
        raise ConfigError(f"roll-off must lie in (0, 1), got {rolloff}")
    x = 2 * a * t
    singular = np.abs(np.abs(x) - 1) < 1e-10
    denom = np.where(singular, 1.0, 1 - x * x)
    h = np.sinc(t) * np.cos(np.pi * a * t) / denom
    return np.where(singular, np.pi / 4 * np.sinc(1 / (2 * a)), h)


def rc_taps(rolloff, oversampling, span=RC_SPAN):
    n = np.arange(-span * oversampling, span * oversampling + 1)
    return raised_cosine(n / oversampling, rolloff)


def _shape_full(symbols, rolloff, oversampling):
    up = np.zeros(len(symbols) * oversampling, dtype=np.asarray(symbols).dtype)
    up[::oversampling] = symbols
    return np.convolve(up, rc_taps(rolloff, oversampling))


def pulse_shape(symbols, rolloff, oversampling):
    """Upsample and filter with a raised cosine truncated at +-6 symbols.

    The filter delay is removed so ``out[k * oversampling] == symbols[k]``;
    output length is ``len(symbols) * oversampling``.
    """
    symbols = np.asarray(symbols)
    full = _shape_full(symbols, rolloff, oversampling)
    d = RC_SPAN * oversampling
    return full[d : d + len(symbols) * oversampling]


def fsk_waveform(tones, order, oversampling):
    """Phase-continuous unit-amplitude FSK; adjacent tones are 1/oversampling cycles/sample apart."""
    tones = np.asarray(tones)
    freq = (np.repeat(tones, oversampling) - (order - 1) / 2) / oversampling
    phase = 2 * np.pi * np.concatenate([[0.0], np.cumsum(freq)[:-1]])
    return np.exp(1j * phase)


def synthesize_waveform(scheme, symbols, rolloff, oversampling):
    if scheme.endswith("FSK"):
        return fsk_waveform(symbols, _order(scheme), oversampling)
    if scheme == "OQPSK":
        # Q rail lags by half a symbol
        n = len(symbols) * oversampling
        d = RC_SPAN * oversampling
        lag = oversampling // 2
        i = _shape_full(symbols.real, rolloff, oversampling)[d : d + n]
        q = _shape_full(symbols.imag, rolloff, oversampling)[d - lag : d - lag + n]
        return i + 1j * q
    return pulse_shape(symbols, rolloff, oversampling)


def apply_impairments(waveform, phase_offset=0.0, cfo=0.0):
    """Rotate by ``exp(j(2*pi*cfo*n + phase_offset))``; ``cfo`` in cycles per sample."""
    x = np.asarray(waveform, dtype=np.complex128)
    n = np.arange(len(x))
    return x * np.exp(1j * (2 * np.pi * cfo * n + phase_offset))


def add_awgn(waveform, snr_db, rng):
    """Add complex white Gaussian noise at ``snr_db`` relative to the measured signal power."""
    x = np.asarray(waveform, dtype=np.complex128)
    power = np.mean(np.abs(x) ** 2)
    if power == 0:
        raise DegenerateInputError("cannot set SNR on a zero-power waveform")
    if np.isposinf(snr_db):
        return x.copy()
    sigma2 = power / 10 ** (snr_db / 10)
    noise = rng.standard_normal(len(x)) + 1j * rng.standard_normal(len(x))
    return x + np.sqrt(sigma2 / 2) * noise


def minmax(x):
    """Map a channel to [-1, 1] via ``(x - min) / (max - min) * 2 - 1``."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if not hi > lo:
        raise DegenerateInputError("constant channel cannot be min-max normalized")
    return (x - lo) / (hi - lo) * 2 - 1


def normalize_minmax(sample: IQSample) -> IQSample:
    """Normalize I and Q independently, each with its own min and max."""
    return IQSample(minmax(sample.i), minmax(sample.q), sample.label, sample.snr_db)


# -- datasets ---------------------------------------------------------------


@dataclass
class SynthConfig:
    schemes: tuple = SCHEMES
    symbols_per_sample: int = 64
    oversampling: int = 8
    rolloff_range: tuple = (0.2, 0.7)
    phase_offset_range: tuple = (-math.pi, math.pi)
    cfo_range: tuple = (-0.1, 0.1)
    snr_grid_db: tuple = tuple(range(-20, 31, 2))
    samples_per_class_per_snr: int = 1500
    seed: int = 0
    normalize: bool = True

    @property
    def length(self):
        return self.symbols_per_sample * self.oversampling

    def validate(self):
        if not self.schemes:
            raise ConfigError("at least one scheme is required")
        for s in self.schemes:
            _order(s)
        if len(set(self.schemes)) != len(self.schemes):
            raise ConfigError("duplicate schemes")
        lo, hi = self.rolloff_range
        if not 0 < lo <= hi < 1:
            raise ConfigError(f"rolloff_range must lie within (0, 1), got {self.rolloff_range}")
        lo, hi = self.phase_offset_range
        if not -math.pi <= lo <= hi <= math.pi:
            raise ConfigError(f"phase_offset_range must lie within [-pi, pi], got {self.phase_offset_range}")
        lo, hi = self.cfo_range
        if not -0.5 <= lo <= hi <= 0.5:
            raise ConfigError(f"cfo_range must lie within [-0.5, 0.5], got {self.cfo_range}")
        if not self.snr_grid_db:
            raise ConfigError("snr grid must be non-empty")
        if len(set(self.snr_grid_db)) != len(self.snr_grid_db):
            raise ConfigError("duplicate SNR values")
        if self.symbols_per_sample < 1 or self.oversampling < 1 or self.samples_per_class_per_snr < 1:
            raise ConfigError("symbols_per_sample, oversampling and samples_per_class_per_snr must be >= 1")
        if self.oversampling % 2 and "OQPSK" in self.schemes:
            raise ConfigError("OQPSK needs an even oversampling factor")
        return self

    def digest(self):
        text = repr(sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def sample_rng(seed, scheme, snr_db, index):
    key = np.random.SeedSequence([seed & (2**64 - 1), zlib.crc32(scheme.encode()), int(snr_db) & 0xFFFFFFFF, index])
    return np.random.Generator(np.random.Philox(key))


def generate_sample(config: SynthConfig, scheme: str, snr_db: int, index: int, label: int = 0) -> IQSample:
    rng = sample_rng(config.seed, scheme, snr_db, index)
    bits = rng.integers(0, 2, size=config.symbols_per_sample * bits_per_symbol(scheme))
    rolloff = rng.uniform(*config.rolloff_range)
    phase = rng.uniform(*config.phase_offset_range)
    cfo = rng.uniform(*config.cfo_range)
    wave = synthesize_waveform(scheme, modulate(bits, scheme), rolloff, config.oversampling)
    wave = add_awgn(apply_impairments(wave, phase, cfo), snr_db, rng)
    sample = IQSample(wave.real, wave.imag, label, int(snr_db))
    return normalize_minmax(sample) if config.normalize else sample


@dataclass
class SignalDataset:
    """Samples stored as a dense (n, 2, N) array with per-sample label and SNR tags."""

    X: np.ndarray
    labels: np.ndarray
    snrs: np.ndarray
    class_names: list
    snr_grid: list
    provenance: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.snrs = np.asarray(self.snrs, dtype=np.int64)
        self.class_names = list(self.class_names)
        self.snr_grid = [int(s) for s in self.snr_grid]
        if self.X.ndim != 3 or self.X.shape[1] != 2:
            raise ValueError(f"X must have shape (n, 2, N), got {self.X.shape}")
        n = len(self.X)
        if self.labels.shape != (n,) or self.snrs.shape != (n,):
            raise ValueError("labels and snrs must have one entry per sample")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label outside class vocabulary")
        if n and not np.isin(self.snrs, self.snr_grid).all():
            raise ValueError("sample SNR outside the SNR grid")

    def __len__(self):
        return len(self.X)

    def __getitem__(self, idx) -> IQSample:
        return IQSample(self.X[idx, 0], self.X[idx, 1], int(self.labels[idx]), int(self.snrs[idx]))

    @property
    def length(self):
        return self.X.shape[2]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return SignalDataset(
            self.X[indices], self.labels[indices], self.snrs[indices],
            self.class_names, self.snr_grid, self.provenance,
        )

    def cells(self):
        """Map each (label, snr) pair to the sorted indices of its samples."""
        out = {}
        for idx, key in enumerate(zip(self.labels.tolist(), self.snrs.tolist())):
            out.setdefault(key, []).append(idx)
        return {k: np.asarray(v) for k, v in sorted(out.items())}

    def __eq__(self, other):
        if not isinstance(other, SignalDataset):
            return NotImplemented
        return (
            np.array_equal(self.X, other.X)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.snrs, other.snrs)
            and self.class_names == other.class_names
            and self.snr_grid == other.snr_grid
        )


def generate_dataset(config: SynthConfig) -> SignalDataset:
    """Scheme-major, then SNR, then index. Values are rounded to float32
    precision so the in-memory dataset equals what the container stores."""
    config.validate()
    per = config.samples_per_class_per_snr
    n = len(config.schemes) * len(config.snr_grid_db) * per
    X = np.empty((n, 2, config.length))
    labels = np.empty(n, dtype=np.int64)
    snrs = np.empty(n, dtype=np.int64)
    pos = 0
    for label, scheme in enumerate(config.schemes):
        for snr in config.snr_grid_db:
            for j in range(per):
                s = generate_sample(config, scheme, snr, j, label)
                X[pos, 0], X[pos, 1] = s.i, s.q
                labels[pos], snrs[pos] = label, snr
                pos += 1
    X = X.astype(np.float32).astype(np.float64)
    return SignalDataset(
        X, labels, snrs, list(config.schemes), list(config.snr_grid_db),
        provenance=f"{config.digest()}:{config.seed}",
    )


def from_arrays(X, labels, snrs, class_names, snr_grid=None) -> SignalDataset:
    """Wrap externally prepared arrays, e.g. a converted RML2016.10a archive
    (X[n, 0] = I row, X[n, 1] = Q row, label index, integer SNR)."""
    snrs = np.asarray(snrs, dtype=np.int64)
    grid = sorted(set(snrs.tolist())) if snr_grid is None else list(snr_grid)
    return SignalDataset(X, labels, snrs, class_names, grid, provenance="external")


# -- container I/O -----------------------------------------------------------


def _record_dtype(n):
    return np.dtype([("label", "<u2"), ("snr", "<i2"), ("i", "<f4", (n,)), ("q", "<f4", (n,))])


def dataset_bytes(ds: SignalDataset) -> bytes:
    names = b"".join(struct.pack("<H", len(b)) + b for b in (c.encode("utf-8") for c in ds.class_names))
    grid = struct.pack("<H", len(ds.snr_grid)) + struct.pack(f"<{len(ds.snr_grid)}h", *ds.snr_grid)
    header = MAGIC + struct.pack("<HIQH", VERSION, ds.length, len(ds), len(ds.class_names)) + names + grid
    rec = np.empty(len(ds), dtype=_record_dtype(ds.length))
    rec["label"] = ds.labels
    rec["snr"] = ds.snrs
    rec["i"] = ds.X[:, 0]
    rec["q"] = ds.X[:, 1]
    payload = rec.tobytes()
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def write_dataset(ds: SignalDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"container truncated while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_dataset(buf: bytes) -> SignalDataset:
    r = _Reader(buf)
    if len(buf) < 4 or r.take(4, "magic") != MAGIC:
        raise BadMagicError("not a SIGD container")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported SIGD version {version} (expected {VERSION})")
    n, count, n_classes = r.unpack("<IQH", "header")
    names = []
    for _ in range(n_classes):
        (ln,) = r.unpack("<H", "class name length")
        names.append(r.take(ln, "class name").decode("utf-8"))
    (n_snr,) = r.unpack("<H", "snr grid count")
    grid = list(r.unpack(f"<{n_snr}h", "snr grid"))
    dt = _record_dtype(n)
    payload = r.take(count * dt.itemsize, "payload")
    (crc,) = r.unpack("<I", "checksum")
    if zlib.crc32(payload) != crc:
        raise ChecksumError("payload CRC32 mismatch")
    rec = np.frombuffer(payload, dtype=dt, count=count)
    X = np.empty((count, 2, n))
    X[:, 0] = rec["i"]
    X[:, 1] = rec["q"]
    try:
        return SignalDataset(X, rec["label"], rec["snr"], names, grid)
    except ValueError as exc:
        raise ContainerError(str(exc)) from None


def read_dataset(path) -> SignalDataset:
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())
