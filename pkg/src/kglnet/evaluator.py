"""Scoring and the false-positive-rate-at-95%-recall protocol.

A trained network scores evaluation pair lists either with the match
classifier (sigmoid of the logit, higher = match) or with descriptor
distance (lower = match). The headline number is the fraction of negative
pairs that pass the most selective threshold still accepting at least 95%
of positives; reports quote it in percent.
"""

from __future__ import annotations

import datetime as _dt
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import PatchPack
from .errors import ConfigError, DataError, NumericDomainError
from .network import KglNet, metric_branch_forward

HIGHER_IS_MATCH = "higher_is_match"
LOWER_IS_MATCH = "lower_is_match"
ORIENTATIONS = (HIGHER_IS_MATCH, LOWER_IS_MATCH)
SCORE_HEADS = ("metric", "descriptor")
REPORT_FORMAT = "kglnet-evalreport-v1"


@dataclass
class ScoredPairs:
    scores: np.ndarray  # [M] float64
    labels: np.ndarray  # [M] int, 1 = match
    orientation: str = HIGHER_IS_MATCH
    pair_indices: Optional[np.ndarray] = None  # [M, 2] (idx_a, idx_b) when known

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise DataError("scores and labels must be matching 1-D arrays")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        if self.orientation not in ORIENTATIONS:
            raise ConfigError(f"orientation must be one of {ORIENTATIONS}")
        if not np.isfinite(self.scores).all():
            raise NumericDomainError("pair scores must be finite")

    @property
    def positives(self) -> np.ndarray:
        return self.scores[self.labels == 1]

    @property
    def negatives(self) -> np.ndarray:
        return self.scores[self.labels == 0]


def fpr95(pairs: ScoredPairs) -> float:
    """Fraction of negatives accepted at 95% positive recall.

    The threshold is the k-th best positive score with k = ceil(0.95 * P):
    the tightest cut that still accepts at least 95% of positives.
    Acceptance is inclusive (score >= threshold for higher-is-match, <=
    for lower-is-match), so tied scores are accepted together. Because the
    threshold is drawn from score ranks, any strictly increasing transform
    of the scores leaves the result unchanged.
    """
    pos, neg = pairs.positives, pairs.negatives
    if pos.size == 0 or neg.size == 0:
        raise DataError(
            f"need both classes to evaluate: {pos.size} positives, {neg.size} negatives"
        )
    k = math.ceil(0.95 * pos.size)
    if pairs.orientation == HIGHER_IS_MATCH:
        threshold = np.sort(pos)[::-1][k - 1]
        accepted = neg >= threshold
    else:
        threshold = np.sort(pos)[k - 1]
        accepted = neg <= threshold
    return float(accepted.mean())


def recall95_threshold(pairs: ScoredPairs) -> float:
    """The acceptance threshold used by :func:`fpr95` (for sample dumps)."""
    pos = pairs.positives
    if pos.size == 0:
        raise DataError("no positive pairs")
    k = math.ceil(0.95 * pos.size)
    ordered = np.sort(pos)
    return float(ordered[::-1][k - 1] if pairs.orientation == HIGHER_IS_MATCH else ordered[k - 1])


def roc_points(pairs: ScoredPairs) -> tuple:
    """(fpr, tpr) arrays swept over all distinct thresholds, both
    monotone nondecreasing and anchored at (0,0) and (1,1)."""
    scores = pairs.scores if pairs.orientation == HIGHER_IS_MATCH else -pairs.scores
    order = np.argsort(-scores, kind="stable")
    labels = pairs.labels[order]
    sorted_scores = scores[order]
    cum_tp = np.cumsum(labels == 1)
    cum_fp = np.cumsum(labels == 0)
    # keep one point per distinct threshold: the last entry of each tie run
    distinct = np.r_[sorted_scores[1:] != sorted_scores[:-1], True]
    tpr = np.r_[0.0, cum_tp[distinct] / max(cum_tp[-1], 1)]
    fpr = np.r_[0.0, cum_fp[distinct] / max(cum_fp[-1], 1)]
    return fpr, tpr


def score_pairs(net: KglNet, pack: PatchPack, head: str = "metric", batch_size: int = 512) -> ScoredPairs:
    """Score the pack's evaluation pair list.

    Features are computed once per unique patch index and gathered per
    pair, so heavily reused patches cost one forward pass each.
    """
    if head not in SCORE_HEADS:
        raise ConfigError(f"score head must be one of {SCORE_HEADS}")
    if head == "descriptor" and not net.include_descriptor:
        raise ConfigError("this network has no descriptor side to score with")
    if pack.labels is None or len(pack.labels) == 0:
        raise DataError(f"pack '{pack.name}' has no evaluation pair list (labels.csv)")

    pairs = pack.labels
    uniq_a, inv_a = np.unique(pairs[:, 0], return_inverse=True)
    uniq_b, inv_b = np.unique(pairs[:, 1], return_inverse=True)

    def features(indices: np.ndarray, spectrum: str):
        metric_chunks, desc_chunks = [], []
        with torch.no_grad():
            for lo in range(0, len(indices), batch_size):
                chunk = indices[lo : lo + batch_size]
                patches = pack.patches_float(spectrum, chunk)
                metric_map, descriptor = net.spectrum_features(patches, spectrum)
                if head == "metric":
                    metric_chunks.append(metric_map)
                else:
                    desc_chunks.append(descriptor)
        return torch.cat(metric_chunks) if head == "metric" else torch.cat(desc_chunks)

    feats_a = features(uniq_a, "a")
    feats_b = features(uniq_b, "b")

    scores = np.empty(len(pairs), dtype=np.float64)
    with torch.no_grad():
        for lo in range(0, len(pairs), batch_size):
            hi = min(lo + batch_size, len(pairs))
            fa = feats_a[inv_a[lo:hi]]
            fb = feats_b[inv_b[lo:hi]]
            if head == "metric":
                logits = metric_branch_forward(net, fa, fb)
                scores[lo:hi] = torch.sigmoid(logits).double().numpy()
            else:
                scores[lo:hi] = (fa - fb).norm(p=2, dim=1).double().numpy()

    return ScoredPairs(
        scores=scores,
        labels=pairs[:, 2].copy(),
        orientation=HIGHER_IS_MATCH if head == "metric" else LOWER_IS_MATCH,
        pair_indices=pairs[:, :2].copy(),
    )


@dataclass
class EvalReport:
    subsets: tuple
    fpr95_percent: tuple
    mean_percent: float
    positives: tuple
    negatives: tuple
    head: str
    checkpoint: str
    packs: tuple
    timestamp: str

    def to_dict(self) -> dict:
        out = asdict(self)
        out["format"] = REPORT_FORMAT
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        data = dict(data)
        if data.pop("format", None) != REPORT_FORMAT:
            raise DataError(f"not an evaluation report (expected format {REPORT_FORMAT!r})")
        for key in ("subsets", "fpr95_percent", "positives", "negatives", "packs"):
            data[key] = tuple(data[key])
        return cls(**data)


def evaluate(
    net: KglNet,
    packs,
    head: str = "metric",
    batch_size: int = 512,
    checkpoint_id: str = "",
) -> EvalReport:
    """Score one pack or several (one report row per pack/subset) and
    average the per-subset results arithmetically."""
    if isinstance(packs, PatchPack):
        packs = [packs]
    if not packs:
        raise DataError("no packs to evaluate")
    subsets, rates, n_pos, n_neg, pack_ids = [], [], [], [], []
    for pack in packs:
        scored = score_pairs(net, pack, head=head, batch_size=batch_size)
        subsets.append(pack.subset or pack.name)
        rates.append(100.0 * fpr95(scored))
        n_pos.append(int((scored.labels == 1).sum()))
        n_neg.append(int((scored.labels == 0).sum()))
        pack_ids.append(f"{pack.name}:{pack.digest()[:16]}")
    return EvalReport(
        subsets=tuple(subsets),
        fpr95_percent=tuple(rates),
        mean_percent=float(np.mean(rates)),
        positives=tuple(n_pos),
        negatives=tuple(n_neg),
        head=head,
        checkpoint=checkpoint_id,
        packs=tuple(pack_ids),
        timestamp=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    )


def write_report(report: EvalReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_report(path) -> EvalReport:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable report {path}: {exc}") from exc
    return EvalReport.from_dict(data)


def write_scores_csv(scored: ScoredPairs, path) -> Path:
    """Dump (idx_a, idx_b, label, score) rows at full float precision so
    the headline number can be recomputed from the file exactly."""
    if scored.pair_indices is None:
        raise DataError("scored pairs carry no source indices to dump")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["idx_a,idx_b,label,score"]
    for (ia, ib), label, score in zip(scored.pair_indices, scored.labels, scored.scores):
        lines.append(f"{ia},{ib},{label},{float(score)!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_scores_csv(path, orientation: str) -> ScoredPairs:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"score file not found: {path}")
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    if not lines or lines[0] != "idx_a,idx_b,label,score":
        raise DataError(f"{path} is not a score dump (bad header)")
    rows = [line.split(",") for line in lines[1:]]
    return ScoredPairs(
        scores=np.array([float(r[3]) for r in rows]),
        labels=np.array([int(r[2]) for r in rows]),
        orientation=orientation,
        pair_indices=np.array([[int(r[0]), int(r[1])] for r in rows], dtype=np.int64)
        if rows
        else None,
    )


def write_roc_csv(scored: ScoredPairs, path) -> Path:
    fpr, tpr = roc_points(scored)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["fpr,tpr"] + [f"{f:.8f},{t:.8f}" for f, t in zip(fpr, tpr)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def emit_samples(
    net: KglNet,
    pack: PatchPack,
    out_dir,
    head: str = "metric",
    per_category: int = 8,
) -> dict:
    """Write image grids of the four judgment categories at the 95%-recall
    operating point: hits, misses, false alarms, correct rejections.

    Each grid row shows one pair, spectrum A left, spectrum B right.
    Returns {category: path-or-None}; empty categories write nothing.
    """
    from PIL import Image

    scored = score_pairs(net, pack, head=head)
    threshold = recall95_threshold(scored)
    if scored.orientation == HIGHER_IS_MATCH:
        accepted = scored.scores >= threshold
    else:
        accepted = scored.scores <= threshold
    is_pos = scored.labels == 1

    categories = {
        "match_accepted": is_pos & accepted,
        "match_rejected": is_pos & ~accepted,
        "nonmatch_accepted": ~is_pos & accepted,
        "nonmatch_rejected": ~is_pos & ~accepted,
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    index = {}
    for name, mask in categories.items():
        rows = np.flatnonzero(mask)
        if rows.size == 0:
            written[name] = None
            index[name] = []
            continue
        # most extreme scores first, deterministically
        order = np.argsort(-scored.scores[rows] if scored.orientation == HIGHER_IS_MATCH else scored.scores[rows], kind="stable")
        chosen = rows[order[:per_category]]
        tiles = []
        for r in chosen:
            ia, ib = scored.pair_indices[r]
            tiles.append(np.concatenate([pack.a[ia], pack.b[ib]], axis=1))
        grid = np.concatenate(tiles, axis=0)
        path = out_dir / f"{name}.png"
        Image.fromarray(grid).save(path)
        written[name] = path
        index[name] = [
            {"idx_a": int(scored.pair_indices[r][0]), "idx_b": int(scored.pair_indices[r][1]), "score": float(scored.scores[r])}
            for r in chosen
        ]
    (out_dir / "samples.json").write_text(
        json.dumps({"threshold": threshold, "head": head, "samples": index}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return written
