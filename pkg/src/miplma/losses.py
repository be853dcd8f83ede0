"""Disambiguation weights and the training objectives.

All losses take per-bag probability nodes (``1 x k`` rows on one tape) and
return ``1 x 1`` nodes.  Disambiguation weights enter the graph as constants.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .exceptions import ConfigurationError, ContractError, NumericAbort

MARGIN_VARIANTS = ("distribution", "mean", "off")
DENOM_EPS = 1e-3


class DisambiguationWeights:
    """Per-bag probability mass over candidate labels.

    Entries off the candidate set stay exactly zero; candidate entries sum
    to one.
    """

    def __init__(self, k):
        self.k = k
        self._w = {}
        self._cands = {}

    def __getitem__(self, bag_id):
        return self._w[bag_id]

    def __contains__(self, bag_id):
        return bag_id in self._w

    def __len__(self):
        return len(self._w)

    def items(self):
        return self._w.items()

    def set_uniform(self, bag_id, candidates):
        cands = np.asarray(sorted(candidates), dtype=np.intp)
        w = np.zeros(self.k)
        w[cands] = 1.0 / cands.size
        self._w[bag_id] = w
        self._cands[bag_id] = cands

    def update(self, bag_id, probs, t, T):
        """Blend old weights with candidate-renormalised predictions.

        ``alpha = (T - t) / T`` with ``1 <= t <= T``.
        """
        if not 1 <= t <= T:
            raise ContractError(f"epoch index t={t} outside [1, T={T}]")
        probs = np.asarray(probs, dtype=np.float64).ravel()
        cands = self._cands[bag_id]
        mass = probs[cands].sum()
        if not mass > 1e-300:
            raise NumericAbort(f"bag {bag_id}: predicted candidate mass {mass!r} collapsed to zero")
        alpha = (T - t) / T
        old = self._w[bag_id]
        blended = alpha * old[cands] + (1.0 - alpha) * probs[cands] / mass
        new = np.zeros(self.k)
        new[cands] = blended / blended.sum()
        self._w[bag_id] = new
        return new

    def check(self, atol=1e-10):
        """Raise ContractError if any bag violates the simplex invariants."""
        for bag_id, w in self._w.items():
            off = np.ones(self.k, dtype=bool)
            off[self._cands[bag_id]] = False
            if np.any(w[off] != 0.0):
                raise ContractError(f"bag {bag_id}: nonzero weight off the candidate set")
            if np.any(w < 0):
                raise ContractError(f"bag {bag_id}: negative weight")
            if abs(w.sum() - 1.0) > atol:
                raise ContractError(f"bag {bag_id}: weights sum to {w.sum()!r}")

    def dump_jsonl(self, path):
        with Path(path).open("w", encoding="utf-8") as fh:
            for bag_id, w in self._w.items():
                fh.write(json.dumps({"bag_id": bag_id, "weights": w.tolist()}) + "\n")

    @classmethod
    def load_jsonl(cls, path, ds):
        weights = init_weights(ds)
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                weights._w[rec["bag_id"]] = np.asarray(rec["weights"], dtype=np.float64)
        weights.check()
        return weights


def init_weights(ds):
    weights = DisambiguationWeights(ds.meta.k)
    for bag in ds.bags:
        weights.set_uniform(bag.id, bag.candidates)
    return weights


# ---------------------------------------------------------------------------
# losses


def disambiguation_loss(weight_rows, probs, candidate_sets):
    """``-(1/m) sum_i sum_{c in S_i} w_ic log p_ic`` over the batch."""
    terms = []
    for w, p, cands in zip(weight_rows, probs, candidate_sets):
        cands = list(cands)
        picked = dc.gather(p, cands)
        w_c = p.tape.const(np.asarray(w, dtype=np.float64)[cands].reshape(1, -1))
        terms.append(dc.reduce_sum(dc.mul(w_c, dc.log(picked))))
    return dc.scale(dc.reduce_mean(dc.concat(terms)), -1.0)


def margin_terms(probs, candidate_sets, k):
    """Per-bag ``phi_i = 1 - (max_{S_i} p - max_{not S_i} p)`` as a ``1 x m`` row."""
    phis = []
    for p, cands in zip(probs, candidate_sets):
        cands = set(int(c) for c in cands)
        others = [c for c in range(k) if c not in cands]
        if not others:
            raise ContractError("margin undefined: candidate set covers the whole label space")
        gap = dc.sub(dc.max_over_index_set(p, cands), dc.max_over_index_set(p, others))
        phis.append(dc.add_const(dc.scale(gap, -1.0), 1.0))
    return dc.concat(phis)


def margin_loss(probs, candidate_sets, k):
    return dc.reduce_mean(margin_terms(probs, candidate_sets, k))


def distribution_from_terms(phi):
    """``mean / max(1 - sqrt(population variance), DENOM_EPS)`` of a margin row."""
    mean = dc.reduce_mean(phi)
    centered = dc.sub(phi, dc.broadcast(mean, phi.shape))
    var = dc.reduce_mean(dc.mul(centered, centered))
    denom = dc.maximum_const(dc.add_const(dc.scale(dc.sqrt(var), -1.0), 1.0), DENOM_EPS)
    return dc.div(mean, denom)


def margin_distribution_loss(probs, candidate_sets, k):
    return distribution_from_terms(margin_terms(probs, candidate_sets, k))


@dataclass
class LossConfig:
    lam: float = 1.0
    margin_variant: str = "distribution"
    T: int = 100

    def __post_init__(self):
        if self.margin_variant not in MARGIN_VARIANTS:
            raise ConfigurationError(f"margin_variant must be one of {MARGIN_VARIANTS}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigurationError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.T < 1:
            raise ConfigurationError("T must be >= 1")


def full_loss(cfg, weight_rows, probs, candidate_sets, k):
    """``L_d + lam * L_margin``; returns ``(total node, {"L_d", "L_m", "L"})``.

    Bags whose candidate set is the whole label space have no margin and are
    left out of the margin term.  If no bag in the batch has one, the margin
    term is zero.
    """
    l_d = disambiguation_loss(weight_rows, probs, candidate_sets)
    if cfg.margin_variant == "off" or cfg.lam == 0:
        l_m = None
    else:
        keep = [i for i, c in enumerate(candidate_sets) if len(set(c)) < k]
        if not keep:
            l_m = None
        else:
            p_keep = [probs[i] for i in keep]
            c_keep = [candidate_sets[i] for i in keep]
            if cfg.margin_variant == "mean":
                l_m = margin_loss(p_keep, c_keep, k)
            else:
                l_m = margin_distribution_loss(p_keep, c_keep, k)
    if l_m is None:
        total = l_d
        lm_val = 0.0
    else:
        total = dc.add(l_d, dc.scale(l_m, cfg.lam))
        lm_val = l_m.item()
    return total, {"L_d": l_d.item(), "L_m": lm_val, "L": total.item()}
