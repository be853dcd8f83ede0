"""The bag classifier: instance extractor, margin-aware attention and softmax head.

Feature matrices are stored column-per-instance (``H`` is ``l x n``), so the
attention logits ``W^T (tanh(W1^T H) * sigm(W2^T H))`` come out as a ``1 x n``
row.  Parameter containers hold plain arrays; :func:`bind` mirrors them onto a
tape as leaf nodes for one forward pass.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .exceptions import ConfigurationError, DimensionError, SchemaError

NORM_EPS = 1e-12


@dataclass
class ExtractorParams:
    weights: list = field(default_factory=list)   # layer j: (out_j x in_j)
    biases: list = field(default_factory=list)    # layer j: (out_j x 1)
    activation: str = "tanh"

    @property
    def out_dim(self):
        return self.weights[-1].shape[0] if self.weights else None


@dataclass
class AttentionParams:
    W1: np.ndarray   # l x a
    W2: np.ndarray   # l x a
    W: np.ndarray    # a x 1


@dataclass
class ClassifierParams:
    Wc: np.ndarray   # l x k
    bc: np.ndarray   # 1 x k


@dataclass
class ModelParams:
    extractor: ExtractorParams
    attention: AttentionParams
    classifier: ClassifierParams

    def __post_init__(self):
        l = self.classifier.Wc.shape[0]
        if self.extractor.weights and self.extractor.out_dim != l:
            raise DimensionError(f"extractor emits {self.extractor.out_dim} features, classifier expects {l}")
        if self.attention.W1.shape[0] != l or self.attention.W2.shape[0] != l:
            raise DimensionError("attention W1/W2 rows must equal the feature width l")
        if self.attention.W1.shape != self.attention.W2.shape:
            raise DimensionError("attention W1 and W2 must share a shape")
        if self.attention.W.shape != (self.attention.W1.shape[1], 1):
            raise DimensionError(f"attention W must be a x 1, got {self.attention.W.shape}")

    @property
    def feature_dim(self):
        return self.classifier.Wc.shape[0]

    @property
    def n_classes(self):
        return self.classifier.Wc.shape[1]

    @property
    def attention_dim(self):
        return self.attention.W1.shape[1]

    def named(self):
        """Ordered ``name -> array`` view; arrays are shared, not copied."""
        out = {}
        for j, (w, b) in enumerate(zip(self.extractor.weights, self.extractor.biases)):
            out[f"extractor.W{j}"] = w
            out[f"extractor.b{j}"] = b
        out["attention.W1"] = self.attention.W1
        out["attention.W2"] = self.attention.W2
        out["attention.W"] = self.attention.W
        out["classifier.Wc"] = self.classifier.Wc
        out["classifier.bc"] = self.classifier.bc
        return out

    def map(self, fn):
        """Apply ``fn`` to every parameter, returning a structure of the results."""
        ext = ExtractorParams([fn(w) for w in self.extractor.weights],
                              [fn(b) for b in self.extractor.biases], self.extractor.activation)
        att = AttentionParams(fn(self.attention.W1), fn(self.attention.W2), fn(self.attention.W))
        clf = ClassifierParams(fn(self.classifier.Wc), fn(self.classifier.bc))
        return _Bound(ext, att, clf)

    def copy(self):
        m = self.map(np.array)
        return ModelParams(m.extractor, m.attention, m.classifier)


@dataclass
class _Bound:
    # same layout as ModelParams but holding Nodes; skips shape validation
    extractor: ExtractorParams
    attention: AttentionParams
    classifier: ClassifierParams

    def named(self):
        return ModelParams.named(self)


def bind(tape, params):
    """Leaf nodes for every parameter of ``params`` on ``tape``."""
    return params.map(tape.leaf)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(d, k, feature_dim=32, hidden_sizes=(), attention_dim=128,
                activation="tanh", seed=0, identity_extractor=False):
    """Seeded uniform(+-1/sqrt(fan_in)) initialisation.

    The extractor maps ``d -> hidden_sizes... -> feature_dim`` with
    ``activation`` after every layer.  ``identity_extractor`` drops all layers
    so that ``H = X^T`` and ``feature_dim = d``.
    """
    if activation not in ("tanh", "relu", "sigmoid"):
        raise ConfigurationError(f"unknown extractor activation {activation!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    if identity_extractor:
        feature_dim = d
    else:
        sizes = [d, *hidden_sizes, feature_dim]
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(_uniform(rng, (fan_out, fan_in), fan_in))
            biases.append(_uniform(rng, (fan_out, 1), fan_in))
    l, a = feature_dim, attention_dim
    attention = AttentionParams(_uniform(rng, (l, a), l), _uniform(rng, (l, a), l), _uniform(rng, (a, 1), a))
    classifier = ClassifierParams(_uniform(rng, (l, k), l), _uniform(rng, (1, k), l))
    return ModelParams(ExtractorParams(weights, biases, activation), attention, classifier)


# ---------------------------------------------------------------------------
# pipeline stages


def extract(tape, ext, instances):
    """``H = psi(X)`` as an ``l x n`` node, one column per instance."""
    x = np.asarray(instances, dtype=np.float64)
    if ext.weights:
        d_in = ext.weights[0].value.shape[1]
        if x.shape[1] != d_in:
            raise SchemaError(f"bag width {x.shape[1]} does not match extractor input {d_in}")
    h = tape.const(x.T)
    act = getattr(dc, ext.activation)
    for w, b in zip(ext.weights, ext.biases):
        pre = dc.matmul(w, h)
        h = act(dc.add(pre, dc.broadcast(b, pre.shape)))
    return h


def attention_logits(att, H):
    gate_t = dc.tanh(dc.matmul(dc.transpose(att.W1), H))
    gate_s = dc.sigmoid(dc.matmul(dc.transpose(att.W2), H))
    return dc.matmul(dc.transpose(att.W), dc.mul(gate_t, gate_s))


def attention_scores(att, H, tau):
    """Gated attention logits divided by ``tau`` and softmaxed over instances."""
    return dc.softmax_with_temperature(attention_logits(att, H), tau)


def normalize_scores(A):
    """Zero-mean, unit-sample-deviation rescaling of a ``1 x n`` score row.

    Singleton rows come back as ``[1]`` and constant rows as zeros; in both
    cases no gradient reaches ``A``.
    """
    tape = A.tape
    n = A.value.shape[1]
    if n == 1:
        return tape.const([[1.0]])
    if np.ptp(A.value) == 0:
        return tape.const(np.zeros_like(A.value))
    centered = dc.sub(A, dc.broadcast(dc.reduce_mean(A), A.shape))
    var = dc.scale(dc.reduce_sum(dc.mul(centered, centered)), 1.0 / (n - 1))
    std = dc.maximum_const(dc.sqrt(var), NORM_EPS)
    return dc.div(centered, dc.broadcast(std, A.shape))


def aggregate(H, A_norm):
    """``z = H A'^T`` as an ``l x 1`` column."""
    return dc.matmul(H, dc.transpose(A_norm))


def classify(clf, z):
    """Softmax class probabilities as a ``1 x k`` row."""
    logits = dc.add(dc.matmul(dc.transpose(z), clf.Wc), clf.bc)
    return dc.softmax_with_temperature(logits, 1.0)


def forward(tape, bound, instances, tau):
    """Full pipeline for one bag; returns ``(probs 1xk, raw scores 1xn)``."""
    H = extract(tape, bound.extractor, instances)
    A = attention_scores(bound.attention, H, tau)
    z = aggregate(H, normalize_scores(A))
    return classify(bound.classifier, z), A


def predict_bag(params, instances, tau):
    """Probabilities, raw scores and normalized scores for one bag as arrays."""
    tape = dc.Tape()
    bound = params.map(tape.const)
    H = extract(tape, bound.extractor, instances)
    A = attention_scores(bound.attention, H, tau)
    A_norm = normalize_scores(A)
    probs = classify(bound.classifier, aggregate(H, A_norm))
    return probs.value.ravel(), A.value.ravel(), A_norm.value.ravel()


# ---------------------------------------------------------------------------
# temperature annealing


@dataclass
class TemperatureSchedule:
    """``tau_t = max(tau_min, tau_{t-1} * decay)`` evaluated in closed form."""

    tau0: float = 5.0
    tau_min: float = 0.1
    decay: float = 0.95
    step_count: int = 0

    def __post_init__(self):
        if not (self.tau0 > 0 and self.tau_min > 0):
            raise ConfigurationError("temperatures must be positive")
        if not 0 < self.decay <= 1:
            raise ConfigurationError(f"decay must lie in (0, 1], got {self.decay}")

    @property
    def current(self):
        return self.at(self.step_count)

    def at(self, t):
        return max(self.tau_min, self.tau0 * self.decay ** t)

    def step(self):
        self.step_count += 1
        return self.current


# ---------------------------------------------------------------------------
# checkpoints


def _encode(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": arr.ravel().tolist()}


def _decode(obj):
    try:
        return np.array(obj["data"], dtype=np.float64).reshape(obj["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed matrix record: {exc}") from None


def save_checkpoint(path, params, tau_final, schedule=None, extra=None):
    doc = {
        "format": "miplma-checkpoint/1",
        "hyperparameters": {
            "d": params.extractor.weights[0].shape[1] if params.extractor.weights else params.feature_dim,
            "k": params.n_classes,
            "l": params.feature_dim,
            "a": params.attention_dim,
            "hidden_sizes": [w.shape[0] for w in params.extractor.weights[:-1]],
            "activation": params.extractor.activation,
            "identity_extractor": not params.extractor.weights,
            "tau_final": float(tau_final),
        },
        "schedule": None if schedule is None else {
            "tau0": schedule.tau0, "tau_min": schedule.tau_min,
            "decay": schedule.decay, "step_count": schedule.step_count,
        },
        "params": {name: _encode(arr) for name, arr in params.named().items()},
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path):
    """Returns ``(params, tau_final, doc)``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        hp = doc["hyperparameters"]
        raw = {name: _decode(obj) for name, obj in doc["params"].items()}
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: not a checkpoint ({exc})") from None
    n_layers = sum(1 for name in raw if name.startswith("extractor.W"))
    ext = ExtractorParams([raw[f"extractor.W{j}"] for j in range(n_layers)],
                          [raw[f"extractor.b{j}"] for j in range(n_layers)], hp.get("activation", "tanh"))
    params = ModelParams(
        ext,
        AttentionParams(raw["attention.W1"], raw["attention.W2"], raw["attention.W"]),
        ClassifierParams(raw["classifier.Wc"], raw["classifier.bc"]),
    )
    return params, float(hp["tau_final"]), doc
