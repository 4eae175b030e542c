"""Retrieval metrics on an unseen domain and a linear domain-probe diagnostic."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, make_eval_split
from .model import ModelState, embed


@dataclass
class EvalConfig:
    trials: int = 10
    max_rank: int = 10
    seed: int = 0
    normalize: bool = True
    probe_holdout: float = 0.25
    probe_steps: int = 500
    probe_lr: float = 0.1

    def validate(self) -> None:
        if self.trials < 1 or self.max_rank < 1:
            raise ValueError("eval.trials and eval.max_rank must be >= 1")
        if not 0 < self.probe_holdout < 1:
            raise ValueError("eval.probe_holdout must lie in (0, 1)")
        if self.probe_steps < 1 or self.probe_lr <= 0:
            raise ValueError("eval.probe_steps must be >= 1 and eval.probe_lr > 0")


def l2_normalize(codes: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(codes, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("cannot l2-normalize a zero vector")
    return codes / norms


def distance_matrix(probe: np.ndarray, gallery: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Pairwise Euclidean distances, rows optionally l2-normalized first."""
    probe = np.asarray(probe, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if probe.ndim != 2 or gallery.ndim != 2 or probe.shape[1] != gallery.shape[1]:
        raise ValueError(f"code dimension mismatch: {probe.shape} vs {gallery.shape}")
    if normalize:
        probe, gallery = l2_normalize(probe), l2_normalize(gallery)
    diff = probe[:, None, :] - gallery[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def _ranking(dist: np.ndarray) -> np.ndarray:
    # stable sort: equal distances keep gallery order
    return np.argsort(dist, axis=1, kind="stable")


def cmc_curve(dist, probe_ids, gallery_ids, max_rank: int = 10) -> np.ndarray:
    """Fraction of probes whose first correct match ranks within 1..max_rank."""
    dist = np.asarray(dist)
    probe_ids, gallery_ids = np.asarray(probe_ids), np.asarray(gallery_ids)
    matches = gallery_ids[_ranking(dist)] == probe_ids[:, None]
    missing = ~matches.any(axis=1)
    if missing.any():
        raise ValueError(f"probe identity {probe_ids[np.argmax(missing)]} is absent from the gallery")
    first = matches.argmax(axis=1)
    counts = np.bincount(first, minlength=max(max_rank, dist.shape[1]))[:max_rank]
    return np.cumsum(counts) / len(probe_ids)


def average_precision(ranked_matches: np.ndarray) -> float:
    relevant = int(ranked_matches.sum())
    if relevant == 0:
        raise ValueError("probe has no relevant gallery entry")
    hits = np.cumsum(ranked_matches)
    ranks = np.flatnonzero(ranked_matches) + 1
    return math.fsum((hits[ranks - 1] / ranks).tolist()) / relevant


def mean_average_precision(dist, probe_ids, gallery_ids) -> float:
    dist = np.asarray(dist)
    probe_ids, gallery_ids = np.asarray(probe_ids), np.asarray(gallery_ids)
    matches = gallery_ids[_ranking(dist)] == probe_ids[:, None]
    return math.fsum(average_precision(row) for row in matches) / len(probe_ids)


@dataclass
class EvalReport:
    cmc: list[float]
    mAP: float
    trials: list[dict] = field(default_factory=list)
    domain_probe_accuracy: float | None = None
    config: dict = field(default_factory=dict)

    def rank(self, r: int) -> float:
        return self.cmc[r - 1]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        ranks = len(self.cmc)
        writer.writerow(["trial", "mAP"] + [f"rank{r}" for r in range(1, ranks + 1)])
        for t in self.trials:
            writer.writerow([t["trial"], repr(t["mAP"])] + [repr(v) for v in t["cmc"]])
        writer.writerow(["mean", repr(self.mAP)] + [repr(v) for v in self.cmc])
        return buf.getvalue()


def trial_seeds(seed: int, trials: int) -> list[int]:
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**31 - 1, size=trials)]


def evaluate_codes(
    codes: np.ndarray,
    domain: Dataset,
    trials: int = 10,
    max_rank: int = 10,
    seed: int = 0,
    normalize: bool = True,
) -> EvalReport:
    """Average CMC and mAP over ``trials`` random single-shot probe/gallery splits.

    ``codes`` holds one row per sample of ``domain``.
    """
    codes = np.asarray(codes, dtype=np.float64)
    if len(codes) != len(domain):
        raise ValueError(f"{len(codes)} codes for {len(domain)} samples")
    rows = []
    for t, trial_seed in enumerate(trial_seeds(seed, trials)):
        probe, gallery = make_eval_split(domain, trial_seed)
        dist = distance_matrix(codes[probe], codes[gallery], normalize)
        ids_p, ids_g = domain.identities[probe], domain.identities[gallery]
        rows.append({
            "trial": t,
            "seed": trial_seed,
            "cmc": cmc_curve(dist, ids_p, ids_g, max_rank).tolist(),
            "mAP": mean_average_precision(dist, ids_p, ids_g),
        })
    cmc = np.mean([r["cmc"] for r in rows], axis=0).tolist()
    mean_ap = math.fsum(r["mAP"] for r in rows) / len(rows)
    return EvalReport(
        cmc, mean_ap, rows,
        config={"trials": trials, "max_rank": max_rank, "seed": seed, "normalize": normalize},
    )


def run_protocol(
    state: ModelState,
    domain: Dataset,
    trials: int = 10,
    max_rank: int = 10,
    seed: int = 0,
    normalize: bool = True,
) -> EvalReport:
    """Evaluate eval-mode hidden codes of ``domain`` (see :func:`evaluate_codes`)."""
    return evaluate_codes(embed(state, domain.features), domain, trials, max_rank, seed, normalize)


def probe_domain_accuracy(
    codes,
    domain_labels,
    holdout: float = 0.25,
    seed: int = 0,
    groups=None,
    steps: int = 500,
    lr: float = 0.1,
) -> float:
    """Held-out accuracy of a linear softmax classifier predicting domain from frozen codes.

    Rows are l2-normalized (zero rows stay zero).  With ``groups`` (identity
    labels) the held-out split is made over whole groups, so the probe cannot
    score by recognizing identities it saw during fitting.
    """
    x = np.asarray(codes, dtype=np.float64)
    y_raw = np.asarray(domain_labels)
    classes, y = np.unique(y_raw, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("domain probe needs at least 2 domains")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    rng = np.random.default_rng(seed)
    keys = np.asarray(groups) if groups is not None else np.arange(len(x))
    units = np.unique(keys)
    n_hold = int(round(holdout * len(units)))
    n_hold = min(max(n_hold, 1), len(units) - 1)
    held_units = rng.permutation(units)[:n_hold]
    test = np.isin(keys, held_units)
    train = ~test
    xtr, ytr = x[train], y[train]
    k = len(classes)
    onehot = np.eye(k)[ytr]
    w = np.zeros((x.shape[1], k))
    b = np.zeros(k)
    for _ in range(steps):
        z = xtr @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(xtr)
        w -= lr * (xtr.T @ g)
        b -= lr * g.sum(axis=0)
    pred = (x[test] @ w + b).argmax(axis=1)
    return float((pred == y[test]).mean())
