"""Dual-criterion pool scoring and deterministic batch selection.

Each pool sample gets a record holding Shannon entropy of the predictive
distribution, attention misalignment (1 - Dice between the predicted
class's attention map and the expert mask), and their convex combination
score = lambda * H_norm + (1 - lambda) * D_exp. Entropy is normalized by
ln(n_classes) so both criteria share the [0, 1] range; raw nats remain
available behind a flag. Ties in selection break toward the lower
sample id so runs are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import explain
from .model import SmallCnn, forward_batch
from .tensor import ContractError

STRATEGIES = ("random", "uncertainty", "explanation", "composite")
PATTERNS = ("HU-HM", "HU-LM", "LU-HM", "LU-LM")


@dataclass(frozen=True)
class AcquisitionRecord:
    sample_id: int
    entropy: float        # nats
    entropy_norm: float   # entropy / ln(n_classes)
    misalignment: float   # in [0, 1]
    score: float
    pred_class: int
    pattern: str


def strategy_lambda(strategy: str, lam: float) -> float:
    """The mixing weight each named strategy scores with."""
    if strategy == "uncertainty":
        return 1.0
    if strategy == "explanation":
        return 0.0
    if strategy == "composite":
        return lam
    raise ContractError(f"strategy {strategy!r} does not score the pool")


def entropy(p) -> float:
    """Shannon entropy in nats, with 0*ln(0) = 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ContractError(f"entropy needs a probability vector, got shape {p.shape}")
    if np.any(p < -1e-9) or abs(p.sum() - 1.0) > 1e-9:
        raise ContractError("entropy input is not a probability vector")
    pos = p[p > 0.0]
    return float(-(pos * np.log(pos)).sum())


def classify_pattern(entropy_norm: float, misalignment: float,
                     tau_h: float = 0.5, tau_d: float = 0.5) -> str:
    """Quadrant label; values exactly at a threshold count as High."""
    hu = "HU" if entropy_norm >= tau_h else "LU"
    hm = "HM" if misalignment >= tau_d else "LM"
    return f"{hu}-{hm}"


def score_pool(model: SmallCnn, pool: Sequence, lam: float, head: str = "linear",
               protos=None, normalize_entropy: bool = True,
               cam_threshold: Optional[float] = None,
               tau_h: float = 0.5, tau_d: float = 0.5,
               chunk: int = 120) -> list[AcquisitionRecord]:
    """One record per pool sample, in sample-id order.

    Every pool sample must carry an expert mask; misalignment uses the
    attention map of the predicted class, even when that prediction is
    wrong.
    """
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda {lam} outside [0, 1]")
    samples = sorted(pool, key=lambda s: s.id)
    if not samples:
        return []
    missing = [s.id for s in samples if s.esm is None]
    if missing:
        raise ContractError(f"pool samples without expert masks: {missing[:5]}")

    log_n = math.log(model.n_classes)
    pv = None
    if head == "prototypical":
        from .model import _proto_vectors
        pv = _proto_vectors(model, protos)

    records: list[AcquisitionRecord] = []
    for start in range(0, len(samples), chunk):
        batch = samples[start:start + chunk]
        images = np.stack([np.asarray(s.image, dtype=np.float64) for s in batch])
        a_data, probs = forward_batch(model, images, head=head, protos=pv)
        preds = probs.argmax(axis=1)
        cams = explain.cam_from_activations(model, a_data, preds, images.shape[-2],
                                            images.shape[-1], head=head, protos=pv)
        for i, s in enumerate(batch):
            h_val = entropy(probs[i])
            h_norm = h_val / log_n
            grid = cams[i]
            if cam_threshold is not None:
                grid = (grid >= cam_threshold).astype(np.float64)
            d_exp = 1.0 - explain.dice(grid, s.esm)
            h_term = h_norm if normalize_entropy else h_val
            records.append(AcquisitionRecord(
                sample_id=s.id,
                entropy=h_val,
                entropy_norm=h_norm,
                misalignment=d_exp,
                score=lam * h_term + (1.0 - lam) * d_exp,
                pred_class=int(preds[i]),
                pattern=classify_pattern(h_norm, d_exp, tau_h, tau_d),
            ))
    return records


def select_top_k(records: Sequence[AcquisitionRecord], k: int) -> list[int]:
    """Ids of the K highest-scoring records, score descending, ties by id."""
    if k > len(records):
        raise ContractError(f"asked for {k} of {len(records)} records")
    ranked = sorted(records, key=lambda r: (-r.score, r.sample_id))
    return [r.sample_id for r in ranked[:k]]


RECORD_COLUMNS = ("id", "H", "H_norm", "D_exp", "score", "pred_class", "pattern")


def records_csv(records: Sequence[AcquisitionRecord]) -> str:
    lines = [",".join(RECORD_COLUMNS)]
    for r in records:
        lines.append(",".join([str(r.sample_id), repr(r.entropy), repr(r.entropy_norm),
                               repr(r.misalignment), repr(r.score), str(r.pred_class),
                               r.pattern]))
    return "\n".join(lines) + "\n"


def write_records_csv(records: Sequence[AcquisitionRecord], path) -> None:
    Path(path).write_text(records_csv(records))
