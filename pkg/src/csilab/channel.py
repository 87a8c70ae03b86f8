"""Synthetic multipath channel data, the delay-domain preprocessing pipeline,
and the reconstruction metrics (NMSE, cosine similarity, beamforming gain).

The downlink channel is an N_c x N_t complex matrix in the frequency-spatial
domain. A unitary 2D-DFT moves it to the angular-delay domain, where multipath
makes it sparse: almost all energy sits in the first N_c' delay rows. Models
train on the truncated N_c' x N_t matrix, split into real/imaginary channels
and affinely mapped into [0,1] to match the decoder's sigmoid output.

Synthetic samples are built directly on the truncated delay-angle grid as a
small number of clusters of complex-Gaussian taps with exponential amplitude
decay away from each cluster center, standing in for a full geometry-based
channel model. Generation is per-sample seeded, so datasets are reproducible
and parallelizable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from csilab.tensor import FormatError, ShapeError, Tensor4, tensor_read, tensor_write

N_C = 256  # subcarriers in the frequency domain
META_VERSION = 1


# ---------------------------------------------------------------------------
# unitary 2D-DFT pipeline


@lru_cache(maxsize=None)
def _dft_matrix(n: int) -> np.ndarray:
    i = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(i, i) / n) / math.sqrt(n)


def dft_transform(h_freq: np.ndarray) -> np.ndarray:
    """Frequency-spatial -> angular-delay domain: H' = F_d H F_a (unitary)."""
    h_freq = np.asarray(h_freq)
    if h_freq.ndim != 2:
        raise ShapeError(f"channel matrix must be 2-D, got {h_freq.ndim}-D")
    nc, nt = h_freq.shape
    return _dft_matrix(nc) @ h_freq @ _dft_matrix(nt)


def inverse_dft(h_prime: np.ndarray) -> np.ndarray:
    h_prime = np.asarray(h_prime)
    if h_prime.ndim != 2:
        raise ShapeError(f"channel matrix must be 2-D, got {h_prime.ndim}-D")
    nc, nt = h_prime.shape
    return _dft_matrix(nc).conj().T @ h_prime @ _dft_matrix(nt).conj().T


def truncate_delay(h_prime: np.ndarray, nc_prime: int) -> np.ndarray:
    """Keep the first nc_prime delay rows."""
    if nc_prime > h_prime.shape[0]:
        raise ShapeError(f"cannot keep {nc_prime} rows of a {h_prime.shape[0]}-row matrix")
    return np.array(h_prime[:nc_prime])


def pad_delay(h_delay: np.ndarray, nc: int = N_C) -> np.ndarray:
    """Zero-pad the truncated delay matrix back to nc rows."""
    if h_delay.shape[0] > nc:
        raise ShapeError(f"{h_delay.shape[0]} rows will not fit in {nc}")
    out = np.zeros((nc, h_delay.shape[1]), dtype=complex)
    out[: h_delay.shape[0]] = h_delay
    return out


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class NormalizationInfo:
    """Global affine map x -> x*scale + offset taking the training split into [0,1]."""

    scale: float
    offset: float = 0.5

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def fit_normalization(h_delays: np.ndarray) -> NormalizationInfo:
    """Symmetric scaling around 0.5 from the training split's extreme value."""
    peak = float(np.max(np.abs(np.stack([h_delays.real, h_delays.imag]))))
    if peak == 0.0:
        raise ValueError("cannot normalize an all-zero training split")
    return NormalizationInfo(scale=0.5 / peak, offset=0.5)


def normalize(h_delay: np.ndarray, info: NormalizationInfo) -> tuple[np.ndarray, int]:
    """Map a complex delay-domain matrix to a real (2, H, W) array in [0,1].

    Returns the array and the number of clipped entries (values outside the
    training split's range).
    """
    x = np.stack([h_delay.real, h_delay.imag]).astype(np.float64)
    x = x * info.scale + info.offset
    clipped = int(np.count_nonzero((x < 0.0) | (x > 1.0)))
    return np.clip(x, 0.0, 1.0).astype(np.float32), clipped


def denormalize(x_norm: np.ndarray, info: NormalizationInfo) -> np.ndarray:
    x = (np.asarray(x_norm, dtype=np.float64) - info.offset) / info.scale
    return x[..., 0, :, :] + 1j * x[..., 1, :, :]


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SyntheticProfile:
    """Cluster layout for the surrogate multipath generator."""

    clusters_min: int = 3
    clusters_max: int = 5
    delay_span: float = 10.0  # cluster centers fall in delay rows [0, delay_span]
    delay_spread: float = 4.0
    angle_spread: float = 4.0
    decay: float = 0.0  # per-cluster power decay rate
    seed: int = 0

    def __post_init__(self):
        if self.clusters_min < 1 or self.clusters_max < self.clusters_min:
            raise ValueError("cluster count range must satisfy 1 <= min <= max")
        if self.delay_spread < 0 or self.angle_spread < 0 or self.delay_span < 0:
            raise ValueError("spreads must be nonnegative")


@dataclass
class ChannelSample:
    h_freq: np.ndarray  # (N_C, nt) complex, frequency-spatial domain
    h_delay: np.ndarray  # (nc_prime, nt) complex, truncated angular-delay domain


def _cluster_envelope(nc_prime, nt, dc, ac, dspread, aspread):
    d = np.abs(np.arange(nc_prime) - dc)
    a = np.abs(np.arange(nt) - ac)
    a = np.minimum(a, nt - a)  # angle axis wraps
    if dspread == 0:
        ed = (d == d.min()).astype(float)
    else:
        ed = np.exp(-d / dspread)
    if aspread == 0:
        ea = (a == a.min()).astype(float)
    else:
        ea = np.exp(-a / aspread)
    return np.outer(ed, ea)


def generate_synthetic_channel(
    profile: SyntheticProfile, rng: np.random.Generator, nc_prime: int = 32, nt: int = 32
) -> ChannelSample:
    """One sample: clustered taps on the delay-angle grid, transformed to frequency."""
    k = int(rng.integers(profile.clusters_min, profile.clusters_max + 1))
    h = np.zeros((nc_prime, nt), dtype=complex)
    for ci in range(k):
        dc = float(rng.uniform(0.0, min(profile.delay_span, nc_prime - 1)))
        ac = float(rng.uniform(0.0, nt))
        env = _cluster_envelope(nc_prime, nt, dc, ac, profile.delay_spread, profile.angle_spread)
        taps = (rng.standard_normal((nc_prime, nt)) + 1j * rng.standard_normal((nc_prime, nt))) / math.sqrt(2)
        h += math.exp(-profile.decay * ci) * env * taps
    h /= math.sqrt(k)
    return ChannelSample(h_freq=inverse_dft(pad_delay(h)), h_delay=h)


def sample_rng(profile: SyntheticProfile, index: int) -> np.random.Generator:
    """Per-sample generator: reproducible and order-independent across workers."""
    return np.random.default_rng([profile.seed, index])


def generate_batch(
    profile: SyntheticProfile, count: int, start: int = 0, nc_prime: int = 32, nt: int = 32
) -> np.ndarray:
    """Stack of `count` truncated delay-domain matrices, samples start..start+count."""
    if count < 1:
        raise ValueError("need at least one sample")
    out = np.empty((count, nc_prime, nt), dtype=complex)
    for i in range(count):
        out[i] = generate_synthetic_channel(profile, sample_rng(profile, start + i), nc_prime, nt).h_delay
    return out


# ---------------------------------------------------------------------------
# metrics


_NMSE_FLOOR_DB = float("-inf")


def nmse(h_true: np.ndarray, h_hat: np.ndarray) -> float:
    """10*log10 of the batch-mean per-sample squared-error ratio (dB)."""
    h_true = np.asarray(h_true)
    h_hat = np.asarray(h_hat)
    if h_true.shape != h_hat.shape:
        raise ShapeError(f"shape mismatch: {h_true.shape} vs {h_hat.shape}")
    axes = tuple(range(1, h_true.ndim))
    num = np.sum(np.abs(h_true - h_hat) ** 2, axis=axes)
    den = np.sum(np.abs(h_true) ** 2, axis=axes)
    if np.any(den == 0):
        raise ValueError("zero-norm ground-truth sample")
    ratio = float(np.mean(num / den))
    if ratio == 0.0:
        return _NMSE_FLOOR_DB
    return 10.0 * math.log10(ratio)


def rho(h_true_delay: np.ndarray, h_hat_delay: np.ndarray, nc: int = N_C) -> float:
    """Mean per-subcarrier cosine similarity, evaluated in the frequency domain.

    Both arguments are (n, nc_prime, nt) truncated delay-domain stacks; they are
    zero-padded and inverse-transformed before comparing row vectors per
    subcarrier. Zero-norm subcarrier vectors are skipped.
    """
    h_true_delay = np.asarray(h_true_delay)
    h_hat_delay = np.asarray(h_hat_delay)
    if h_true_delay.shape != h_hat_delay.shape:
        raise ShapeError(f"shape mismatch: {h_true_delay.shape} vs {h_hat_delay.shape}")
    if h_true_delay.ndim == 2:
        h_true_delay = h_true_delay[None]
        h_hat_delay = h_hat_delay[None]
    ncp, nt = h_true_delay.shape[1:]
    fd = _dft_matrix(nc).conj().T[:, :ncp]  # only the kept delay rows contribute
    fa = _dft_matrix(nt).conj().T
    ht = np.einsum("ck,nkt,tu->ncu", fd, h_true_delay, fa)
    hh = np.einsum("ck,nkt,tu->ncu", fd, h_hat_delay, fa)
    inner = np.abs(np.sum(hh.conj() * ht, axis=2))
    norms = np.linalg.norm(ht, axis=2) * np.linalg.norm(hh, axis=2)
    valid = norms > 0
    if not np.any(valid):
        raise ValueError("all subcarrier vectors have zero norm")
    return float(np.mean(inner[valid] / norms[valid]))


def equivalent_channel_gain(h_n: np.ndarray, v_n: np.ndarray) -> float:
    """|h^H v| for one subcarrier; with v = h/||h|| this is the channel norm."""
    h_n = np.asarray(h_n).reshape(-1)
    v_n = np.asarray(v_n).reshape(-1)
    if h_n.shape != v_n.shape:
        raise ShapeError(f"shape mismatch: {h_n.shape} vs {v_n.shape}")
    return float(np.abs(np.vdot(h_n, v_n)))


def beamformer(h_hat_n: np.ndarray) -> np.ndarray:
    """Unit-norm matched beamformer from an estimated subcarrier vector."""
    h_hat_n = np.asarray(h_hat_n).reshape(-1)
    norm = np.linalg.norm(h_hat_n)
    if norm == 0:
        raise ValueError("cannot beamform from a zero channel estimate")
    return h_hat_n / norm


# ---------------------------------------------------------------------------
# dataset persistence: <name>.csib + <name>.meta


def _meta_path(path) -> Path:
    return Path(path).with_suffix(".meta")


def _csib_path(path) -> Path:
    return Path(path).with_suffix(".csib")


def dataset_write(path, x_norm: np.ndarray, info: NormalizationInfo, meta: dict | None = None) -> None:
    """Write a normalized dataset: tensor file plus plain-text sidecar."""
    x_norm = np.asarray(x_norm, dtype=np.float32)
    if x_norm.ndim != 4 or x_norm.shape[1] != 2:
        raise ShapeError(f"dataset tensor must be (n, 2, h, w), got {x_norm.shape}")
    tensor_write(_csib_path(path), Tensor4(x_norm))
    lines = {
        "version": META_VERSION,
        "count": x_norm.shape[0],
        "nc": N_C,
        "ncp": x_norm.shape[2],
        "nt": x_norm.shape[3],
        "scale": repr(info.scale),
        "offset": repr(info.offset),
    }
    lines.update(meta or {})
    with open(_meta_path(path), "w", encoding="utf-8") as fh:
        for k, v in lines.items():
            fh.write(f"{k}={v}\n")


def dataset_read(path) -> tuple[np.ndarray, NormalizationInfo, dict]:
    """Read a dataset pair; returns (tensor, normalization, remaining metadata)."""
    meta_file = _meta_path(path)
    if not meta_file.exists():
        raise FormatError(f"missing dataset sidecar {meta_file}")
    meta: dict[str, str] = {}
    for lineno, line in enumerate(meta_file.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"{meta_file}:{lineno}: expected key=value, got {line!r}")
        k, _, v = line.partition("=")
        meta[k.strip()] = v.strip()
    for key in ("version", "count", "scale", "offset"):
        if key not in meta:
            raise FormatError(f"{meta_file}: missing required key {key!r}")
    if int(meta.pop("version")) != META_VERSION:
        raise FormatError(f"{meta_file}: unsupported metadata version")
    x = tensor_read(_csib_path(path)).data
    count = int(meta.pop("count"))
    if count != x.shape[0]:
        raise FormatError(f"metadata count {count} != tensor samples {x.shape[0]}")
    info = NormalizationInfo(scale=float(meta.pop("scale")), offset=float(meta.pop("offset")))
    return x, info, meta


# ---------------------------------------------------------------------------
# split builder


@dataclass
class DatasetStats:
    clip_fraction: float
    energy_retained: float
    peak_cell_energy: float  # largest single-cell share of total delay-domain energy


def build_splits(
    profile: SyntheticProfile,
    train: int,
    val: int,
    test: int,
    nc_prime: int = 32,
    nt: int = 32,
) -> tuple[dict[str, np.ndarray], NormalizationInfo, DatasetStats]:
    """Generate train/val/test tensors with normalization fit on the train split."""
    counts = {"train": train, "val": val, "test": test}
    for name, c in counts.items():
        if c < 1:
            raise ValueError(f"{name} split needs at least one sample")
    offsets = {"train": 0, "val": train, "test": train + val}
    delays = {k: generate_batch(profile, c, offsets[k], nc_prime, nt) for k, c in counts.items()}
    info = fit_normalization(delays["train"])
    splits: dict[str, np.ndarray] = {}
    clipped = total = 0
    for name, h in delays.items():
        xs = np.empty((h.shape[0], 2, nc_prime, nt), dtype=np.float32)
        for i in range(h.shape[0]):
            xs[i], c = normalize(h[i], info)
            clipped += c
        total += xs.size
        splits[name] = xs
    energy = np.abs(delays["train"]) ** 2
    per_sample = energy.reshape(energy.shape[0], -1)
    stats = DatasetStats(
        clip_fraction=clipped / total,
        energy_retained=1.0,  # samples are built on the kept delay rows
        peak_cell_energy=float(np.mean(per_sample.max(axis=1) / per_sample.sum(axis=1))),
    )
    return splits, info, stats


def profile_meta(profile: SyntheticProfile) -> dict:
    return {f"profile.{f.name}": getattr(profile, f.name) for f in fields(profile)}


def profile_from_meta(meta: dict) -> SyntheticProfile:
    kwargs = {}
    for f in fields(SyntheticProfile):
        key = f"profile.{f.name}"
        if key in meta:
            cast = int if f.type == "int" else float
            kwargs[f.name] = cast(meta[key])
    return SyntheticProfile(**kwargs)
