"""Synthetic paired-modality data from a discrete latent factor model.

Each sample is generated from three independent categorical latents: a
shared symbol s seen by both modalities and one unique symbol per
modality. Tokens are codebook embeddings of (s, u_m) plus Gaussian
noise; labels are modular sums of a configurable subset of the latents.
"""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc


class DatasetParseError(ValueError):
    def __init__(self, path, line_no: int, reason: str):
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


def _validate_dist(dist, n: int, name: str) -> np.ndarray:
    if dist is None:
        return np.full(n, 1.0 / n)
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape != (n,) or np.any(dist < 0) or not np.isclose(dist.sum(), 1.0, atol=1e-6):
        raise ValueError(f"{name}: probabilities must be length {n} and sum to 1")
    return dist / dist.sum()


@dataclass(frozen=True)
class FactorSpec:
    n_shared_symbols: int
    n_unique_symbols: int
    seq_len: int = 4
    d_in: int = 16
    embed_noise_sigma: float = 0.05
    shared_dist: tuple | None = None
    unique_dist_m1: tuple | None = None
    unique_dist_m2: tuple | None = None

    def __post_init__(self):
        if self.n_shared_symbols < 1 or self.n_unique_symbols < 1:
            raise ValueError("symbol cardinalities must be positive")
        if self.seq_len < 1 or self.d_in < 1:
            raise ValueError("seq_len and d_in must be positive")
        if self.embed_noise_sigma < 0:
            raise ValueError("embed_noise_sigma must be nonnegative")
        self.dist_shared
        self.dist_unique(1)
        self.dist_unique(2)

    @property
    def dist_shared(self) -> np.ndarray:
        return _validate_dist(self.shared_dist, self.n_shared_symbols, "shared_dist")

    def dist_unique(self, modality: int) -> np.ndarray:
        raw = self.unique_dist_m1 if modality == 1 else self.unique_dist_m2
        return _validate_dist(raw, self.n_unique_symbols, f"unique_dist_m{modality}")


LABEL_MODES = ("shared-only", "unique-only", "mixed")


@dataclass(frozen=True)
class TaskSpec:
    mode: str
    n_classes: int

    def __post_init__(self):
        if self.mode not in LABEL_MODES:
            raise ValueError(f"unknown task mode {self.mode!r}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")


@dataclass
class MultimodalSample:
    tokens_m1: np.ndarray
    tokens_m2: np.ndarray
    label: int | None = None
    latents: tuple[int, int, int] | None = None


def sample_latents(spec: FactorSpec, rng: dc.RngState) -> tuple[int, int, int]:
    """Three independent categorical draws: (shared, unique_m1, unique_m2)."""
    s = rng.choice(spec.n_shared_symbols, p=spec.dist_shared)
    u1 = rng.choice(spec.n_unique_symbols, p=spec.dist_unique(1))
    u2 = rng.choice(spec.n_unique_symbols, p=spec.dist_unique(2))
    return int(s), int(u1), int(u2)


@dataclass
class Codebooks:
    """Frozen unit-Gaussian embedding tables, one per factor per modality."""

    shared: np.ndarray
    unique_m1: np.ndarray
    unique_m2: np.ndarray

    @classmethod
    def create(cls, spec: FactorSpec, seed: int = 0) -> "Codebooks":
        rng = dc.RngState(seed)
        return cls(
            shared=rng.stream(0).normal((spec.n_shared_symbols, spec.d_in)),
            unique_m1=rng.stream(1).normal((spec.n_unique_symbols, spec.d_in)),
            unique_m2=rng.stream(2).normal((spec.n_unique_symbols, spec.d_in)),
        )


def render(latents: tuple[int, int, int], spec: FactorSpec, codebooks: Codebooks, rng: dc.RngState) -> MultimodalSample:
    """Realize a sample: every position carries code(s) + code(u_m) + noise."""
    s, u1, u2 = latents
    if not (0 <= s < spec.n_shared_symbols and 0 <= u1 < spec.n_unique_symbols and 0 <= u2 < spec.n_unique_symbols):
        raise ValueError(f"latents {latents} outside factor ranges")

    def tokens(unique_code):
        base = codebooks.shared[s] + unique_code
        noise = rng.normal((spec.seq_len, spec.d_in), sigma=spec.embed_noise_sigma) if spec.embed_noise_sigma else 0.0
        return (np.tile(base, (spec.seq_len, 1)) + noise).astype(np.float32)

    return MultimodalSample(tokens_m1=tokens(codebooks.unique_m1[u1]), tokens_m2=tokens(codebooks.unique_m2[u2]), latents=latents)


def label(latents: tuple[int, int, int], task: TaskSpec) -> int:
    s, u1, u2 = latents
    if task.mode == "shared-only":
        return s % task.n_classes
    if task.mode == "unique-only":
        return (u1 + u2) % task.n_classes
    return (s + u1) % task.n_classes


def generate_dataset(
    n: int, spec: FactorSpec, task: TaskSpec | None, seed: int = 0, codebook_seed: int | None = None
) -> list[MultimodalSample]:
    """n samples with per-sample RNG streams so generation order is immaterial."""
    books = Codebooks.create(spec, seed if codebook_seed is None else codebook_seed)
    root = dc.RngState(seed)
    out = []
    for i in range(n):
        r = root.stream(i)
        latents = sample_latents(spec, r)
        sample = render(latents, spec, books, r)
        if task is not None:
            sample.label = label(latents, task)
        out.append(sample)
    return out


def _open(path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t")
    return open(path, mode)


def write_dataset(samples: list[MultimodalSample], path) -> None:
    """JSON-lines serialization; float32 tokens round-trip bit-exactly."""
    with _open(path, "w") as f:
        for s in samples:
            rec = {
                "m1": [[float(v) for v in row] for row in s.tokens_m1],
                "m2": [[float(v) for v in row] for row in s.tokens_m2],
                "y": s.label,
                "latents": list(s.latents) if s.latents is not None else None,
            }
            f.write(json.dumps(rec) + "\n")


def read_dataset(path) -> list[MultimodalSample]:
    samples = []
    with _open(path, "r") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                samples.append(
                    MultimodalSample(
                        tokens_m1=np.asarray(rec["m1"], dtype=np.float32),
                        tokens_m2=np.asarray(rec["m2"], dtype=np.float32),
                        label=rec["y"],
                        latents=tuple(rec["latents"]) if rec["latents"] is not None else None,
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DatasetParseError(path, line_no, str(e)) from e
    return samples


def as_arrays(samples: list[MultimodalSample]):
    """Stack a dataset into (X1, X2, y, latents) training arrays."""
    x1 = np.stack([s.tokens_m1 for s in samples])
    x2 = np.stack([s.tokens_m2 for s in samples])
    y = np.array([s.label for s in samples]) if samples and samples[0].label is not None else None
    latents = (
        np.array([s.latents for s in samples]) if samples and samples[0].latents is not None else None
    )
    return x1, x2, y, latents
