"""Small dense classifier with exact reverse-mode gradients.

Plain-numpy feedforward nets with optional low-rank adapters on the hidden
layers.  Forward passes retain a trace; ``backward`` turns a trace plus a
loss definition into parameter gradients and an input gradient.  Inputs may
be a single vector ``(d,)`` or a row-stacked batch ``(n, d)``; batch losses
are weighted sums of per-row losses.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import NonFiniteError, RngStream

CHECKPOINT_FORMAT_VERSION = 1

_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("layer_dims needs at least an input and an output dim")
        if any(d < 1 for d in dims):
            raise ValueError(f"layer_dims must be positive, got {dims}")
        if dims[-1] < 2:
            raise ValueError(f"output dim must be >= 2, got {dims[-1]}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}, got {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    scale: float = 4.0

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError(f"adapter rank must be >= 1, got {self.rank}")
        if self.scale <= 0:
            raise ValueError(f"adapter scale must be positive, got {self.scale}")


@dataclass
class LoraAdapter:
    """Additive low-rank update: the layer output gains (scale/rank) * B @ A @ x."""

    a: np.ndarray  # (rank, fan_in)
    b: np.ndarray  # (fan_out, rank)
    rank: int
    scale: float


@dataclass
class Classifier:
    spec: MlpSpec
    weights: list[np.ndarray]            # per layer, shape (fan_out, fan_in)
    biases: list[np.ndarray]             # per layer, shape (fan_out,)
    adapters: dict[int, LoraAdapter] = field(default_factory=dict)
    adapter_only: bool = False           # base weights frozen; adapters + head train

    def copy(self) -> "Classifier":
        return copy.deepcopy(self)


def init_classifier(spec: MlpSpec, seed: int, lora: LoraConfig | None = None) -> Classifier:
    """Fan-in-scaled uniform init for base weights; adapter A uniform, B zeros.

    With adapters attached the base weights are frozen (``adapter_only``)
    except for the final classification layer, and the all-zero B makes the
    initial forward pass identical to the adapter-free model.
    """
    root = RngStream(seed).child("net-init")
    weights, biases = [], []
    for layer in range(spec.num_layers):
        fan_in = spec.layer_dims[layer]
        fan_out = spec.layer_dims[layer + 1]
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(root.child("w", layer).generator().uniform(-bound, bound, (fan_out, fan_in)))
        biases.append(root.child("b", layer).generator().uniform(-bound, bound, fan_out))
    clf = Classifier(spec=spec, weights=weights, biases=biases)
    if lora is not None:
        clf = attach_adapters(clf, lora, seed)
    return clf


def attach_adapters(clf: Classifier, lora: LoraConfig, seed: int) -> Classifier:
    """Wrap a (typically pretrained) model with adapters on every hidden layer.

    A is fan-in-scaled uniform, B all zeros, so the wrapped forward pass is
    identical to the base model's until training moves B.  Base weights
    freeze except the classification head.
    """
    spec = clf.spec
    root = RngStream(seed).child("lora-init")
    adapters: dict[int, LoraAdapter] = {}
    for layer in range(spec.num_layers - 1):  # head stays adapter-free and trainable
        fan_in = spec.layer_dims[layer]
        fan_out = spec.layer_dims[layer + 1]
        if lora.rank > min(fan_in, fan_out):
            raise ValueError(
                f"adapter rank {lora.rank} exceeds min(fan_in, fan_out)="
                f"{min(fan_in, fan_out)} at layer {layer}"
            )
        bound = 1.0 / math.sqrt(fan_in)
        a = root.child("a", layer).generator().uniform(-bound, bound, (lora.rank, fan_in))
        b = np.zeros((fan_out, lora.rank))
        adapters[layer] = LoraAdapter(a=a, b=b, rank=lora.rank, scale=lora.scale)
    wrapped = clf.copy()
    wrapped.adapters = adapters
    wrapped.adapter_only = True
    return wrapped


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass
class Trace:
    """Retained intermediates of one forward pass, consumed by ``backward``."""

    xs: list[np.ndarray]      # layer inputs, xs[l] has shape (n, dims[l])
    zs: list[np.ndarray]      # pre-activations, zs[l] has shape (n, dims[l+1])
    single: bool              # input was a single vector

    @property
    def logits(self) -> np.ndarray:
        out = self.zs[-1]
        return out[0] if self.single else out


def _affine(clf: Classifier, layer: int, x: np.ndarray) -> np.ndarray:
    z = x @ clf.weights[layer].T + clf.biases[layer]
    ad = clf.adapters.get(layer)
    if ad is not None:
        z = z + (ad.scale / ad.rank) * ((x @ ad.a.T) @ ad.b.T)
    return z


def forward(clf: Classifier, x: np.ndarray) -> Trace:
    """Run the network on ``x`` (vector or batch), retaining a trace."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != clf.spec.input_dim:
        raise ValueError(f"input has shape {x.shape}, expected (*, {clf.spec.input_dim})")
    xs, zs = [x], []
    for layer in range(clf.spec.num_layers):
        z = _affine(clf, layer, xs[-1])
        zs.append(z)
        if layer < clf.spec.num_layers - 1:
            xs.append(np.maximum(z, 0.0) if clf.spec.activation == "relu" else np.tanh(z))
    return Trace(xs=xs, zs=zs, single=single)


def logits(clf: Classifier, x: np.ndarray) -> np.ndarray:
    return forward(clf, x).logits


def predict_labels(clf: Classifier, x: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties break toward the smallest class index."""
    out = forward(clf, x).zs[-1]
    return np.argmax(out, axis=1)


@dataclass
class GradientBundle:
    """Gradients of a scalar loss w.r.t. trainable parameters and the input.

    ``param_grads`` is keyed like :func:`trainable_keys`; frozen parameters
    (base weights in adapter-only mode) are absent.  ``input_grad`` matches
    the shape passed to ``forward``.
    """

    param_grads: dict[str, np.ndarray]
    input_grad: np.ndarray


def _act_deriv(clf: Classifier, z: np.ndarray) -> np.ndarray:
    if clf.spec.activation == "relu":
        return (z > 0.0).astype(float)
    t = np.tanh(z)
    return 1.0 - t * t


def backward(clf: Classifier, trace: Trace, loss: str, *, y=None, target=None,
             dlogits=None, weights=None, with_param_grads: bool = True) -> GradientBundle:
    """Exact reverse-mode gradients of a scalar loss through the traced pass.

    ``loss`` selects how the logit gradient is formed:

    * ``"cross_entropy"``  -- needs ``y`` (class index, or per-row indices)
    * ``"kl_to_target"``   -- needs ``target`` (probability vector or rows);
      the target is a constant, no gradient flows into it
    * ``"dlogits"``        -- raw vector-Jacobian product with ``dlogits``

    For batches the loss is ``sum_r weights[r] * loss_r`` (weights default
    to 1).  In adapter-only mode the frozen base-weight gradients are
    omitted; the classification head stays trainable.
    """
    n, num_classes = trace.zs[-1].shape
    if loss == "dlogits":
        d = np.asarray(dlogits, dtype=float)
        if d.ndim == 1:
            d = d[None, :]
        if d.shape != trace.zs[-1].shape:
            raise ValueError(f"dlogits shape {d.shape} does not match logits {trace.zs[-1].shape}")
    elif loss in ("cross_entropy", "kl_to_target"):
        probs = softmax(trace.zs[-1])
        if loss == "cross_entropy":
            ys = np.atleast_1d(np.asarray(y, dtype=int))
            if ys.shape != (n,):
                raise ValueError(f"y has shape {ys.shape}, expected ({n},)")
            if np.any(ys < 0) or np.any(ys >= num_classes):
                raise ValueError("class index out of range")
            d = probs.copy()
            d[np.arange(n), ys] -= 1.0
        else:
            t = np.asarray(target, dtype=float)
            if t.ndim == 1:
                t = np.broadcast_to(t, (n, num_classes))
            _check_target(t)
            d = probs - t
        if weights is not None:
            d = d * np.asarray(weights, dtype=float)[:, None]
    else:
        raise ValueError(f"unknown loss kind {loss!r}")

    head = clf.spec.num_layers - 1
    param_grads: dict[str, np.ndarray] = {}
    g = d
    for layer in range(head, -1, -1):
        x_in = trace.xs[layer]
        base_trainable = not clf.adapter_only or layer == head
        if with_param_grads:
            if base_trainable:
                param_grads[f"W{layer}"] = g.T @ x_in
                param_grads[f"b{layer}"] = g.sum(axis=0)
            ad = clf.adapters.get(layer)
            if ad is not None:
                s = ad.scale / ad.rank
                ax = x_in @ ad.a.T                      # (n, rank)
                param_grads[f"B{layer}"] = s * (g.T @ ax)
                param_grads[f"A{layer}"] = s * (ad.b.T @ g.T) @ x_in
        ad = clf.adapters.get(layer)
        gx = g @ clf.weights[layer]
        if ad is not None:
            gx = gx + (ad.scale / ad.rank) * ((g @ ad.b) @ ad.a)
        if layer > 0:
            g = gx * _act_deriv(clf, trace.zs[layer - 1])
    input_grad = gx[0] if trace.single else gx
    return GradientBundle(param_grads=param_grads, input_grad=input_grad)


# ---------------------------------------------------------------------------
# Loss primitives
# ---------------------------------------------------------------------------

def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def cross_entropy(z: np.ndarray, y: int) -> float:
    """-log softmax_y of a single logit vector."""
    z = np.asarray(z, dtype=float)
    if not (0 <= y < z.shape[-1]):
        raise ValueError(f"class index {y} out of range for {z.shape[-1]} classes")
    return float(-log_softmax(z)[..., y])


def cross_entropy_rows(z: np.ndarray, y: int | np.ndarray) -> np.ndarray:
    """Per-row cross-entropy of a logit matrix against one label (or per-row labels)."""
    ls = log_softmax(np.asarray(z, dtype=float))
    ys = np.broadcast_to(np.asarray(y, dtype=int), (ls.shape[0],))
    return -ls[np.arange(ls.shape[0]), ys]


def _check_target(t: np.ndarray) -> None:
    if np.any(t < 0):
        raise ValueError("target distribution has negative entries")
    sums = t.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise ValueError(f"target distribution must sum to 1 within 1e-9, got sums {sums}")


def kl_to_target(z: np.ndarray, target: np.ndarray) -> float:
    """KL(target || softmax(z)) for a single logit vector, with 0*log 0 := 0."""
    z = np.asarray(z, dtype=float)
    t = np.asarray(target, dtype=float)
    if t.shape != z.shape:
        raise ValueError(f"target shape {t.shape} does not match logits {z.shape}")
    _check_target(t)
    ls = log_softmax(z)
    mask = t > 0
    return float(np.sum(t[mask] * (np.log(t[mask]) - ls[mask])))


def kl_to_target_rows(z: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-row KL(target || softmax(z)); target may be one row or a matching matrix."""
    z = np.asarray(z, dtype=float)
    t = np.asarray(target, dtype=float)
    if t.ndim == 1:
        t = np.broadcast_to(t, z.shape)
    _check_target(t)
    ls = log_softmax(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(t > 0, t * (np.log(np.where(t > 0, t, 1.0)) - ls), 0.0)
    return term.sum(axis=-1)


# ---------------------------------------------------------------------------
# Parameter bookkeeping
# ---------------------------------------------------------------------------

def trainable_keys(clf: Classifier) -> list[str]:
    """Canonical ordering of trainable parameter names."""
    head = clf.spec.num_layers - 1
    keys: list[str] = []
    for layer in range(clf.spec.num_layers):
        if not clf.adapter_only or layer == head:
            keys += [f"W{layer}", f"b{layer}"]
        if layer in clf.adapters:
            keys += [f"A{layer}", f"B{layer}"]
    return keys


def get_param(clf: Classifier, key: str) -> np.ndarray:
    kind, layer = key[0], int(key[1:])
    if kind == "W":
        return clf.weights[layer]
    if kind == "b":
        return clf.biases[layer]
    if kind == "A":
        return clf.adapters[layer].a
    if kind == "B":
        return clf.adapters[layer].b
    raise KeyError(key)


def num_params(clf: Classifier, trainable_only: bool = False) -> int:
    if trainable_only:
        return sum(get_param(clf, k).size for k in trainable_keys(clf))
    total = sum(w.size for w in clf.weights) + sum(b.size for b in clf.biases)
    total += sum(ad.a.size + ad.b.size for ad in clf.adapters.values())
    return total


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_adam_state(clf: Classifier) -> AdamState:
    keys = trainable_keys(clf)
    return AdamState(
        step=0,
        m={k: np.zeros_like(get_param(clf, k)) for k in keys},
        v={k: np.zeros_like(get_param(clf, k)) for k in keys},
    )


def optimizer_step(clf: Classifier, grads: GradientBundle, state: AdamState,
                   hyper: AdamHyper) -> tuple[Classifier, AdamState]:
    """One decoupled-weight-decay adaptive-moment update, in place.

    The decay ``w -= weight_decay * w`` is applied independently of the
    learning rate, so ``lr = 0`` still decays and ``lr = weight_decay = 0``
    leaves parameters untouched.
    """
    state.step += 1
    t = state.step
    for key in trainable_keys(clf):
        g = grads.param_grads.get(key)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {key}")
        p = get_param(clf, key)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {key} shape {p.shape}")
        m = state.m[key]
        v = state.v[key]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * (g * g)
        m_hat = m / (1.0 - hyper.beta1 ** t)
        v_hat = v / (1.0 - hyper.beta2 ** t)
        p -= hyper.lr * (m_hat / (np.sqrt(v_hat) + hyper.eps))
        if hyper.weight_decay != 0.0:
            p -= hyper.weight_decay * p
    return clf, state


def accumulate_grads(total: dict[str, np.ndarray], part: dict[str, np.ndarray],
                     scale: float = 1.0) -> dict[str, np.ndarray]:
    """total += scale * part, creating entries as needed."""
    for key, g in part.items():
        if key in total:
            total[key] += scale * g
        else:
            total[key] = scale * g
    return total


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def checkpoint_dict(clf: Classifier) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "classifier-checkpoint",
        "spec": {"layer_dims": list(clf.spec.layer_dims), "activation": clf.spec.activation},
        "adapter_only": clf.adapter_only,
        "weights": [w.tolist() for w in clf.weights],
        "biases": [b.tolist() for b in clf.biases],
        "adapters": {
            str(layer): {"rank": ad.rank, "scale": ad.scale,
                         "a": ad.a.tolist(), "b": ad.b.tolist()}
            for layer, ad in sorted(clf.adapters.items())
        },
        "optimizer": None,
    }


def classifier_from_dict(doc: dict) -> Classifier:
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}, "
                         f"expected {CHECKPOINT_FORMAT_VERSION}")
    spec = MlpSpec(tuple(doc["spec"]["layer_dims"]), doc["spec"]["activation"])
    weights = [np.asarray(w, dtype=float) for w in doc["weights"]]
    biases = [np.asarray(b, dtype=float) for b in doc["biases"]]
    adapters = {
        int(layer): LoraAdapter(a=np.asarray(entry["a"], dtype=float),
                                b=np.asarray(entry["b"], dtype=float),
                                rank=int(entry["rank"]), scale=float(entry["scale"]))
        for layer, entry in doc.get("adapters", {}).items()
    }
    for layer, (w, b) in enumerate(zip(weights, biases)):
        expect = (spec.layer_dims[layer + 1], spec.layer_dims[layer])
        if w.shape != expect or b.shape != (expect[0],):
            raise ValueError(f"checkpoint layer {layer} has shape {w.shape}, expected {expect}")
    return Classifier(spec=spec, weights=weights, biases=biases,
                      adapters=adapters, adapter_only=bool(doc.get("adapter_only", False)))


def save_checkpoint(clf: Classifier, path: str | Path) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(clf), indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> Classifier:
    return classifier_from_dict(json.loads(Path(path).read_text()))
