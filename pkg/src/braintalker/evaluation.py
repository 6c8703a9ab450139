"""Objective mel-spectrogram metrics, t-based confidence intervals and MOS aggregation.

MCD is computed on cepstra obtained by an orthonormal DCT-II of each log-mel
frame, excluding the 0th (energy) coefficient, scaled by 10*sqrt(2)/ln(10).
PCC is Pearson correlation over the flattened utterance matrix; per-utterance
values are then averaged with a 95% CI across utterances.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.stats import t as student_t

from .dataio import MELBIN_SUFFIX, read_mel

MCD_CONST = 10.0 * math.sqrt(2.0) / math.log(10.0)
METRICS = ("rmse", "mcd", "pcc")


def _pair(pred, ref):
    a = np.asarray(getattr(pred, "values", pred), dtype=np.float64)
    b = np.asarray(getattr(ref, "values", ref), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(pred, ref) -> float:
    a, b = _pair(pred, ref)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def mcd(pred, ref) -> float:
    a, b = _pair(pred, ref)
    ca = dct(np.atleast_2d(a), type=2, norm="ortho", axis=-1)[:, 1:]
    cb = dct(np.atleast_2d(b), type=2, norm="ortho", axis=-1)[:, 1:]
    return float(MCD_CONST * np.mean(np.linalg.norm(ca - cb, axis=-1)))


def pcc(pred, ref) -> float:
    a, b = _pair(pred, ref)
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0.0:
        raise ValueError("PCC is undefined for a constant input")
    return float(np.clip(a @ b / denom, -1.0, 1.0))


def confidence_interval(values, level: float = 0.95):
    """(mean, half-width) of a Student-t interval."""
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValueError(f"a confidence interval needs at least 2 values, got {n}")
    half = student_t.ppf(0.5 + level / 2, n - 1) * x.std(ddof=1) / math.sqrt(n)
    return float(x.mean()), float(half)


@dataclass
class MetricReport:
    per_utterance: list = field(default_factory=list)

    def add(self, uid: str, pred, ref):
        self.per_utterance.append(
            {"id": uid, "rmse": rmse(pred, ref), "mcd": mcd(pred, ref), "pcc": pcc(pred, ref)}
        )

    @property
    def summary(self) -> dict:
        out = {}
        for m in METRICS:
            vals = [r[m] for r in self.per_utterance]
            if len(vals) >= 2:
                out[m] = confidence_interval(vals)
            elif vals:
                out[m] = (vals[0], None)
        return out

    def to_dict(self) -> dict:
        return {
            "mcd_definition": "10*sqrt(2)/ln(10) * mean_t ||DCT-II_ortho(logmel_t)[1:] diff||_2",
            "pcc_definition": "Pearson over the flattened frames x bins matrix, per utterance",
            "per_utterance": self.per_utterance,
            "summary": {m: {"mean": v[0], "ci95": v[1]} for m, v in self.summary.items()},
        }

    def write(self, path) -> tuple:
        """Write ``<path>`` (JSON) and the matching ``.csv``; returns both paths."""
        path = Path(path)
        json_path = path if path.suffix == ".json" else path.with_suffix(".json")
        csv_path = json_path.with_suffix(".csv")
        json_path.write_text(json.dumps(self.to_dict(), indent=2))
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("id",) + METRICS)
            for r in self.per_utterance:
                w.writerow([r["id"]] + [repr(r[m]) for m in METRICS])
            summary = self.summary
            if all(v[1] is not None for v in summary.values()) and summary:
                w.writerow(["mean"] + [repr(summary[m][0]) for m in METRICS])
                w.writerow(["ci95"] + [repr(summary[m][1]) for m in METRICS])
        return json_path, csv_path


def evaluate_dirs(pred_dir, ref_dir) -> MetricReport:
    """Compare every ``.melbin`` in ``pred_dir`` with the same stem in ``ref_dir``."""
    pred = {p.name[: -len(MELBIN_SUFFIX)]: p for p in Path(pred_dir).glob(f"*{MELBIN_SUFFIX}")}
    ref = {p.name[: -len(MELBIN_SUFFIX)]: p for p in Path(ref_dir).glob(f"*{MELBIN_SUFFIX}")}
    if pred.keys() != ref.keys():
        only_pred = sorted(pred.keys() - ref.keys())
        only_ref = sorted(ref.keys() - pred.keys())
        raise ValueError(f"unmatched stems: only in pred {only_pred}, only in ref {only_ref}")
    if not pred:
        raise ValueError(f"no {MELBIN_SUFFIX} files in {pred_dir}")
    report = MetricReport()
    for stem in sorted(pred):
        report.add(stem, read_mel(pred[stem]), read_mel(ref[stem]))
    return report


def aggregate_mos(rows) -> dict:
    """Mean opinion score with 95% CI, overall and per split.

    ``rows`` are mappings with ``respondent_id``, ``item_id``, ``split`` and
    ``score`` (integer 1-5).
    """
    by_split, scores = {}, []
    for r in rows:
        score = int(r["score"])
        if not 1 <= score <= 5 or float(r["score"]) != score:
            raise ValueError(
                f"score {r['score']!r} from respondent {r['respondent_id']} on item {r['item_id']} is outside 1..5"
            )
        scores.append(score)
        by_split.setdefault(str(r["split"]), []).append(score)
    if not scores:
        raise ValueError("no MOS scores given")

    def summarise(vals):
        mean, half = confidence_interval(vals) if len(vals) >= 2 else (float(vals[0]), None)
        return {"mean": mean, "ci95": half, "n": len(vals)}

    return {"total": summarise(scores), "splits": {k: summarise(v) for k, v in sorted(by_split.items())}}


def read_mos_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = {"respondent_id", "item_id", "split", "score"} - set(rows[0] if rows else {})
    if rows and missing:
        raise ValueError(f"MOS file {path} lacks column(s): {sorted(missing)}")
    return rows
