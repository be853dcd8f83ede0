"""Accuracy, margin diagnostics, attention dumps and multi-seed aggregation."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ContractError, MIPLError
from .model import predict_bag


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: list
    margin_stats: dict = field(default_factory=dict)
    n_test: int = 0
    n_correct: int = 0

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "n_correct": self.n_correct,
            "n_test": self.n_test,
            # classes absent from the test set have no accuracy
            "per_class_accuracy": [None if np.isnan(a) else a for a in self.per_class_accuracy],
            "margin_stats": self.margin_stats,
        }


def margin_of(probs, candidates):
    """``phi = 1 - (max over candidates - max over non-candidates)``, or None if undefined."""
    probs = np.asarray(probs)
    mask = np.zeros(probs.size, dtype=bool)
    mask[list(candidates)] = True
    if mask.all():
        return None
    return 1.0 - (probs[mask].max() - probs[~mask].max())


def margin_statistics(prob_rows, candidate_sets):
    phis = []
    violations = 0
    for probs, cands in zip(prob_rows, candidate_sets):
        phi = margin_of(probs, cands)
        if phi is None:
            continue
        phis.append(phi)
        probs = np.asarray(probs)
        mask = np.zeros(probs.size, dtype=bool)
        mask[list(cands)] = True
        violations += bool(probs[~mask].max() > probs[mask].max())
    if not phis:
        return {"mean_phi": None, "std_phi": None, "violation_rate": None, "n_margin": 0}
    phis = np.asarray(phis)
    return {
        "mean_phi": float(phis.mean()),
        "std_phi": float(phis.std()),
        "violation_rate": violations / phis.size,
        "n_margin": int(phis.size),
    }


def evaluate(params, ds, tau_final):
    """Accuracy against ``true_label`` plus margin statistics against candidate sets."""
    k = ds.meta.k
    correct = np.zeros(k)
    total = np.zeros(k)
    rows = []
    for bag in ds.bags:
        if bag.true_label is None:
            raise ContractError(f"bag {bag.id} has no true_label to evaluate against")
        probs, _, _ = predict_bag(params, bag.instances, tau_final)
        rows.append(probs)
        total[bag.true_label] += 1
        correct[bag.true_label] += int(np.argmax(probs)) == bag.true_label
    n_correct = int(correct.sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(total > 0, correct / np.maximum(total, 1), np.nan)
    return EvalReport(
        accuracy=n_correct / len(ds),
        per_class_accuracy=per_class.tolist(),
        margin_stats=margin_statistics(rows, [bag.candidates for bag in ds.bags]),
        n_test=len(ds),
        n_correct=n_correct,
    )


def dump_attention(params, ds, tau_final, out_path=None):
    """Raw and normalized attention per bag, one JSON object per line.

    Bags carrying instance flags also get ``separation`` = min positive
    score - max negative score (None unless both kinds are present).
    """
    records = []
    for bag in ds.bags:
        _, raw, norm = predict_bag(params, bag.instances, tau_final)
        rec = {"id": bag.id, "raw": raw.tolist(), "normalized": norm.tolist()}
        if bag.positive is not None:
            flags = np.asarray(bag.positive)
            rec["positive"] = flags.tolist()
            if flags.any() and (~flags).any():
                rec["separation"] = float(raw[flags].min() - raw[~flags].max())
            else:
                rec["separation"] = None
        records.append(rec)
    if out_path is not None:
        try:
            with Path(out_path).open("w", encoding="utf-8") as fh:
                for rec in records:
                    fh.write(json.dumps(rec) + "\n")
        except OSError as exc:
            raise MIPLError(f"cannot write attention dump to {out_path}: {exc}") from exc
    return records


def multi_seed(runner, seeds):
    """Run ``runner(seed) -> {metric: value}`` per seed; returns ``{metric: (mean, std)}``.

    ``std`` is the sample deviation (ddof=1), 0 for a single seed.
    """
    seeds = list(seeds)
    if not seeds:
        raise ContractError("multi_seed needs at least one seed")
    results = [runner(s) for s in seeds]
    out = {}
    for key in results[0]:
        vals = np.array([r[key] for r in results], dtype=np.float64)
        std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        out[key] = (float(vals.mean()), std)
    return out
