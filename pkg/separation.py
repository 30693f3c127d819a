"""Mask-based separation with oracle masks and the utterance-level PIT loss."""

import csv
import logging
import os
from dataclasses import dataclass
from itertools import permutations

import numpy as np

from audio_io import read_wav, write_wav
from dsp_stft import HOP, WINDOW_LEN, istft, magnitude, stft
from errors import (ConfigError, GeometryError, InputNotFoundError,
                    SizeLimitError)
from manifest import atomic_open

logger = logging.getLogger(__name__)

MASK_KINDS = ("irm", "ibm")
IRM_EPS = 1e-8
MAX_SOURCES = 8


@dataclass(frozen=True)
class MaskSet:
    """S masks of shape T x F, stacked as an S x T x F array."""
    masks: np.ndarray

    def __post_init__(self):
        masks = np.asarray(self.masks, dtype=np.float64)
        if masks.ndim != 3 or masks.shape[0] < 1:
            raise GeometryError(f"mask set must be S x T x F, got shape {masks.shape}")
        if not np.all(np.isfinite(masks)) or masks.min() < 0 or masks.max() > 1:
            raise GeometryError("mask entries must lie in [0, 1]")
        object.__setattr__(self, "masks", masks)

    @property
    def n_sources(self):
        return self.masks.shape[0]

    def reordered(self, perm):
        return MaskSet(self.masks[list(perm)])


@dataclass(frozen=True)
class SourceMagnitudes:
    a_mix: np.ndarray
    a_src: np.ndarray

    def __post_init__(self):
        a_mix = np.asarray(self.a_mix, dtype=np.float64)
        a_src = np.asarray(self.a_src, dtype=np.float64)
        if a_mix.ndim != 2 or a_src.ndim != 3 or a_src.shape[1:] != a_mix.shape:
            raise GeometryError(
                f"mixture {a_mix.shape} and source {a_src.shape} magnitudes disagree")
        for name, a in (("mixture", a_mix), ("source", a_src)):
            if not np.all(np.isfinite(a)) or a.min(initial=0.0) < 0:
                raise GeometryError(f"{name} magnitudes must be finite and non-negative")
        object.__setattr__(self, "a_mix", a_mix)
        object.__setattr__(self, "a_src", a_src)

    @property
    def n_sources(self):
        return self.a_src.shape[0]


def ideal_masks(refs, kind="irm"):
    """Oracle masks from reference magnitudes.

    irm: each source's share of the summed magnitude; bins where every
    source is (numerically) silent get 1/S for each source.
    ibm: 1 for the loudest source per bin, ties to the lower index.
    """
    if kind not in MASK_KINDS:
        raise ConfigError(f"mask kind must be one of {MASK_KINDS}, got {kind!r}")
    n = refs.n_sources
    if n < 2:
        raise ConfigError(f"ideal masks need at least two sources, got {n}")

    if kind == "irm":
        total = refs.a_src.sum(axis=0)
        live = total > IRM_EPS
        masks = np.where(live, refs.a_src / np.where(live, total, 1.0), 1.0 / n)
        return MaskSet(np.clip(masks, 0.0, 1.0))

    winner = np.argmax(refs.a_src, axis=0)
    return MaskSet((np.arange(n)[:, None, None] == winner[None]).astype(np.float64))


def apply_masks(mix, masks, out_len=None):
    """Mask the mixture spectrogram (keeping its phase) and resynthesize each source."""
    if masks.masks.shape[1:] != mix.frames.shape:
        raise GeometryError(
            f"mask geometry {masks.masks.shape[1:]} does not match spectrogram {mix.frames.shape}")
    return [istft(mix.scaled(m), out_len) for m in masks.masks]


def _check_pair(masks, refs):
    if masks.masks.shape != refs.a_src.shape:
        raise GeometryError(
            f"mask set {masks.masks.shape} does not match references {refs.a_src.shape}")


def pairwise_errors(masks, refs):
    """E[s, k] = squared Frobenius error of mask k applied to the mixture against source s."""
    _check_pair(masks, refs)
    n = refs.n_sources
    errors = np.empty((n, n))
    for k in range(n):
        estimate = masks.masks[k] * refs.a_mix
        for s in range(n):
            errors[s, k] = np.sum((estimate - refs.a_src[s]) ** 2)
    return errors


def _loss_from_errors(errors, perm, n_coeffs):
    total = 0.0
    for s, k in enumerate(perm):
        total += errors[s, k]
    return total / n_coeffs


def upit_loss(masks, refs, perm):
    """Mean squared magnitude error with mask perm[s] assigned to source s."""
    n = refs.n_sources
    if sorted(perm) != list(range(n)):
        raise ConfigError(f"{perm} is not a permutation of {n} sources")
    return _loss_from_errors(pairwise_errors(masks, refs), perm, refs.a_src.size)


def best_permutation(masks, refs):
    """Exhaustive search; the first permutation (lexicographic) with the lowest loss wins."""
    n = refs.n_sources
    if n > MAX_SOURCES:
        raise SizeLimitError(f"{n} sources: permutation search is limited to {MAX_SOURCES}")
    errors = pairwise_errors(masks, refs)

    best, best_loss = None, np.inf
    for perm in permutations(range(n)):
        loss = _loss_from_errors(errors, perm, refs.a_src.size)
        if loss < best_loss:
            best, best_loss = perm, loss
    return best, best_loss


# External mask tensors: int32 header (ndim, S, T, F), then float32 data, row-major,
# little-endian throughout.

def write_masks(path, masks):
    header = np.array((3,) + masks.masks.shape, dtype="<i4")
    with atomic_open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(masks.masks.astype("<f4").tobytes())


def read_masks(path):
    if not os.path.exists(path):
        raise InputNotFoundError(path, "mask file")
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise GeometryError(f"{path}: truncated mask header")
    ndim, *shape = np.frombuffer(raw[:16], dtype="<i4").tolist()
    if ndim != 3 or min(shape) <= 0:
        raise GeometryError(f"{path}: bad mask header {[ndim] + shape}")
    data = np.frombuffer(raw[16:], dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise GeometryError(f"{path}: expected {int(np.prod(shape))} values, found {data.size}")
    return MaskSet(data.reshape(shape).astype(np.float64))


def source_magnitudes(mix, sources, window_len=WINDOW_LEN, hop=HOP):
    """(mixture spectrogram, SourceMagnitudes) from time-domain signals."""
    spec = stft(mix, window_len, hop)
    a_src = np.stack([magnitude(stft(s, window_len, hop)) for s in sources])
    return spec, SourceMagnitudes(magnitude(spec), a_src)


def separate(mix, sources, kind="irm", masks=None, window_len=WINDOW_LEN, hop=HOP):
    """Separate one mixture with oracle (or supplied) masks.

    Returns (estimates, perm, loss): estimates in mask order, and the best
    permutation with its loss against the references.
    """
    spec, refs = source_magnitudes(mix, sources, window_len, hop)
    if masks is None:
        masks = ideal_masks(refs, kind)
    estimates = apply_masks(spec, masks, out_len=len(mix))
    perm, loss = best_permutation(masks, refs)
    logger.debug(f"Separated {len(sources)} sources: perm {perm}, loss {loss:.6g}")
    return estimates, perm, loss


def separate_files(job):
    """Pool worker for one mixture on disk; writes `<outdir>/est<k>/<name>.wav`."""
    name, mix_path, source_paths, outdir, kind, mask_path, window_len, hop = job
    mix = read_wav(mix_path)
    sources = [read_wav(p) for p in source_paths]
    masks = read_masks(mask_path) if mask_path else None
    estimates, perm, loss = separate(mix, sources, kind, masks, window_len, hop)
    for k, est in enumerate(estimates, 1):
        write_wav(os.path.join(outdir, f"est{k}", f"{name}.wav"), est, float_output=True)
    return name, perm, loss


def write_log(path, rows):
    """TSV: mixture name, best permutation, its loss."""
    with atomic_open(path) as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(["mixname", "perm", "upit_loss"])
        for name, perm, loss in rows:
            writer.writerow([name, "-".join(str(k) for k in perm), f"{loss:.6e}"])
    logger.info(f"Separated {len(rows)} mixtures, log in {path}")
