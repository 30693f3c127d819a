"""Scale-invariant SDR and permutation-resolved separation reports."""

import csv
import logging
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from audio_io import read_wav
from errors import ConfigError, DegenerateInputError, LengthMismatchError
from manifest import atomic_open

logger = logging.getLogger(__name__)

SDR_CAP_DB = 100.0
# Larger length disagreements between references and estimates are a pipeline fault
LENGTH_TOLERANCE = 0.01


def si_sdr(ref, est):
    """SI-SDR in dB of `est` against `ref` (no mean removal), clipped to +-100 dB."""
    r = ref.samples if hasattr(ref, "samples") else np.asarray(ref, dtype=np.float64)
    e = est.samples if hasattr(est, "samples") else np.asarray(est, dtype=np.float64)
    if r.shape != e.shape:
        raise LengthMismatchError(f"reference has {r.shape[0]} samples, estimate {e.shape[0]}")

    ref_energy = float(np.dot(r, r))
    if ref_energy == 0:
        raise DegenerateInputError("reference signal is all zeros")
    if not np.any(e):
        return -SDR_CAP_DB

    alpha = float(np.dot(e, r)) / ref_energy
    target = alpha * r
    noise = e - target
    target_energy = float(np.dot(target, target))
    noise_energy = float(np.dot(noise, noise))
    if noise_energy == 0:
        return SDR_CAP_DB
    if target_energy == 0:
        return -SDR_CAP_DB
    return float(np.clip(10 * np.log10(target_energy / noise_energy), -SDR_CAP_DB, SDR_CAP_DB))


@dataclass(frozen=True)
class EvalRow:
    mix_id: str
    perm: tuple
    sdr_per_source: tuple
    sdri_per_source: tuple

    @property
    def sdr_mean(self):
        return sum(self.sdr_per_source) / len(self.sdr_per_source)

    @property
    def sdri_mean(self):
        return sum(self.sdri_per_source) / len(self.sdri_per_source)


@dataclass
class EvalReport:
    per_mixture: list = field(default_factory=list)

    def aggregate(self):
        """Mean, median and (population) std of per-mixture mean SDRi."""
        values = np.array([row.sdri_mean for row in self.per_mixture])
        if values.size == 0:
            return {"count": 0, "mean": 0.0, "median": 0.0, "std": 0.0}
        return {"count": int(values.size), "mean": float(values.mean()),
                "median": float(np.median(values)), "std": float(values.std())}


def _truncate(signals):
    lengths = [s.shape[0] for s in signals]
    shortest, longest = min(lengths), max(lengths)
    if longest - shortest > LENGTH_TOLERANCE * longest:
        raise LengthMismatchError(
            f"signal lengths {shortest}..{longest} differ by more than {LENGTH_TOLERANCE:.0%}")
    return [s[:shortest] for s in signals]


def _samples(w):
    return w.samples if hasattr(w, "samples") else np.asarray(w, dtype=np.float64)


def eval_separation(refs, ests, mix, mix_id=""):
    """Pick the permutation maximizing mean SI-SDR and report SDR improvements over the mixture.

    perm[s] is the estimate assigned to reference s.
    """
    if len(refs) != len(ests):
        raise ConfigError(f"{len(refs)} references but {len(ests)} estimates")
    if not refs:
        raise ConfigError("nothing to evaluate")

    n = len(refs)
    signals = _truncate([_samples(x) for x in list(refs) + list(ests) + [mix]])
    r, e, m = signals[:n], signals[n:2 * n], signals[-1]

    sdr = np.array([[si_sdr(r[s], e[k]) for k in range(n)] for s in range(n)])
    best, best_score = None, -np.inf
    for perm in permutations(range(n)):
        score = sum(sdr[s, k] for s, k in enumerate(perm)) / n
        if score > best_score:
            best, best_score = perm, score

    baseline = [si_sdr(r[s], m) for s in range(n)]
    per_source = tuple(float(sdr[s, k]) for s, k in enumerate(best))
    improvements = tuple(per_source[s] - baseline[s] for s in range(n))
    return EvalRow(mix_id, best, per_source, improvements)


def eval_files(job):
    """Evaluate one mixture from WAV paths: (mix_id, ref_paths, est_paths, mix_path)."""
    mix_id, ref_paths, est_paths, mix_path = job
    row = eval_separation([read_wav(p) for p in ref_paths], [read_wav(p) for p in est_paths],
                          read_wav(mix_path), mix_id)
    logger.debug(f"{mix_id}: perm {row.perm}, sdri {row.sdri_mean:.2f} dB")
    return row


def write_report(path, report, csv_format=False):
    """Per-mixture rows, then a `#`-prefixed summary block."""
    delimiter = "," if csv_format else "\t"
    n = len(report.per_mixture[0].perm) if report.per_mixture else 2
    with atomic_open(path) as f:
        writer = csv.writer(f, delimiter=delimiter, lineterminator="\n")
        writer.writerow(["mix_id", "perm"] + [f"sdr_{k + 1}" for k in range(n)]
                        + [f"sdri_{k + 1}" for k in range(n)] + ["sdr_mean", "sdri_mean"])
        for row in report.per_mixture:
            writer.writerow([row.mix_id, "-".join(str(k) for k in row.perm)]
                            + [f"{v:.4f}" for v in row.sdr_per_source]
                            + [f"{v:.4f}" for v in row.sdri_per_source]
                            + [f"{row.sdr_mean:.4f}", f"{row.sdri_mean:.4f}"])
        summary = report.aggregate()
        f.write(f"# count{delimiter}{summary['count']}\n")
        for key in ("mean", "median", "std"):
            f.write(f"# sdri_{key}{delimiter}{summary[key]:.4f}\n")

    logger.info(f"Wrote evaluation of {len(report.per_mixture)} mixtures to {path}")
