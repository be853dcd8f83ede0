"""Toy problems for gradient checking the full objective."""

import numpy as np

from . import diffcore as dc
from .data import Bag, Dataset, DatasetMeta
from .losses import LossConfig, full_loss, init_weights
from .model import _Bound, AttentionParams, ClassifierParams, ExtractorParams, forward, init_params


def toy_problem(seed=0, n_sizes=(2, 3, 3), d=4, l=5, a=4, k=3):
    """A 3-bag dataset and small model with every candidate set a proper subset."""
    rng = np.random.default_rng(seed)
    bags = []
    for i, n in enumerate(n_sizes):
        size = int(rng.integers(1, k))
        cands = rng.choice(k, size=size, replace=False)
        bags.append(Bag(f"toy-{i}", rng.standard_normal((n, d)), cands.tolist(), int(cands[0])))
    ds = Dataset(DatasetMeta(d, k, "toy"), tuple(bags))
    params = init_params(d, k, feature_dim=l, attention_dim=a, seed=seed)
    # spread the weights so the objective is not flat at initialisation
    for arr in params.named().values():
        arr *= 3.0
    return ds, params


def unflatten(template, leaves):
    """Rebuild a parameter structure from leaves ordered like ``template.named()``."""
    it = iter(leaves)
    n = len(template.extractor.weights)
    ws, bs = [], []
    for _ in range(n):
        ws.append(next(it))
        bs.append(next(it))
    att = AttentionParams(next(it), next(it), next(it))
    clf = ClassifierParams(next(it), next(it))
    return _Bound(ExtractorParams(ws, bs, template.extractor.activation), att, clf)


def full_objective(ds, template, tau=2.0, lam=1.0, variant="distribution"):
    """``f(tape, *leaves)`` evaluating the full loss over ``ds`` in one batch."""
    weights = init_weights(ds)
    cfg = LossConfig(lam, variant, 1)

    def f(tape, *leaves):
        bound = unflatten(template, leaves)
        probs = [forward(tape, bound, bag.instances, tau)[0] for bag in ds.bags]
        total, _ = full_loss(cfg, [weights[b.id] for b in ds.bags], probs,
                             [b.candidates for b in ds.bags], ds.meta.k)
        return total

    return f


def check_full_loss(seed=0, h=1e-5, tol=1e-4, **kw):
    ds, params = toy_problem(seed)
    f = full_objective(ds, params, **kw)
    return dc.gradcheck(f, list(params.named().values()), h=h, tol=tol)
