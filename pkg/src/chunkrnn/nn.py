"""Minimal dense recurrent kernel.

Plain float64 numpy building blocks shared by every learner in the package:
recurrent cells, a linear output head with fused softmax cross-entropy (or a
scalar sigmoid head for binary targets), exact truncated-backpropagation
gradients over an unrolled window, SGD with optional global-norm clipping,
bit-exact JSON checkpoints, and a finite-difference gradient checker.

Everything here is batch-free (one time step = one vector) and deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "relu")


@dataclass
class RnnLayerParams:
    """One recurrent layer: h = act(x @ w_xh + h_prev @ w_hh + b_h)."""

    w_xh: np.ndarray
    w_hh: np.ndarray
    b_h: np.ndarray
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        d, h = self.w_xh.shape
        if self.w_hh.shape != (h, h) or self.b_h.shape != (h,):
            raise ValueError(
                f"inconsistent layer shapes: w_xh {self.w_xh.shape}, "
                f"w_hh {self.w_hh.shape}, b_h {self.b_h.shape}"
            )

    @property
    def input_dim(self) -> int:
        return self.w_xh.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_xh.shape[1]


@dataclass
class OutputHead:
    """Linear readout; softmax (or sigmoid) is fused into the loss."""

    w_ho: np.ndarray
    b_o: np.ndarray

    def __post_init__(self) -> None:
        if self.w_ho.shape[1] != self.b_o.shape[0]:
            raise ValueError(
                f"inconsistent head shapes: w_ho {self.w_ho.shape}, b_o {self.b_o.shape}"
            )

    @property
    def n_out(self) -> int:
        return self.w_ho.shape[1]


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    bptt_window: int = 7
    init_scale: float = 0.2
    seed: int = 0
    gradient_clip: float | None = 5.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.bptt_window < 1:
            raise ValueError("bptt_window must be >= 1")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be positive")
        if self.gradient_clip is not None and self.gradient_clip <= 0:
            raise ValueError("gradient_clip must be positive when set")


def init_layer(
    rng: np.random.Generator,
    input_dim: int,
    hidden_dim: int,
    activation: str = "tanh",
    scale: float = 0.2,
) -> RnnLayerParams:
    """Uniform [-scale, scale] initialisation for all layer tensors."""
    return RnnLayerParams(
        w_xh=rng.uniform(-scale, scale, size=(input_dim, hidden_dim)),
        w_hh=rng.uniform(-scale, scale, size=(hidden_dim, hidden_dim)),
        b_h=rng.uniform(-scale, scale, size=hidden_dim),
        activation=activation,
    )


def init_head(
    rng: np.random.Generator, hidden_dim: int, n_out: int, scale: float = 0.2
) -> OutputHead:
    return OutputHead(
        w_ho=rng.uniform(-scale, scale, size=(hidden_dim, n_out)),
        b_o=rng.uniform(-scale, scale, size=n_out),
    )


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(pre)
    return np.maximum(pre, 0.0)


def _activation_grad(pre: np.ndarray, h: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return 1.0 - h * h
    return (pre > 0.0).astype(np.float64)


def cell_forward(
    params: RnnLayerParams, x: np.ndarray, h_prev: np.ndarray
) -> np.ndarray:
    """One recurrent step; rejects mismatched dimensions loudly."""
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x.shape != (params.input_dim,):
        raise ValueError(f"input has shape {x.shape}, expected ({params.input_dim},)")
    if h_prev.shape != (params.hidden_dim,):
        raise ValueError(
            f"hidden state has shape {h_prev.shape}, expected ({params.hidden_dim},)"
        )
    return _activate(x @ params.w_xh + h_prev @ params.w_hh + params.b_h, params.activation)


def head_forward(head: OutputHead, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (head.w_ho.shape[0],):
        raise ValueError(
            f"hidden state has shape {h.shape}, expected ({head.w_ho.shape[0]},)"
        )
    return h @ head.w_ho + head.b_o


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax; valid distribution for any finite logits."""
    shifted = logits - np.max(logits)
    e = np.exp(shifted)
    return e / np.sum(e)


def softmax_xent(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against a class index.

    Returns (loss, dloss/dlogits); the gradient is softmax - onehot(target).
    """
    if not 0 <= target < len(logits):
        raise ValueError(f"target {target} out of range for {len(logits)} classes")
    shifted = logits - np.max(logits)
    log_z = np.log(np.sum(np.exp(shifted)))
    loss = float(log_z - shifted[target])
    dlogits = np.exp(shifted - log_z)
    dlogits[target] -= 1.0
    return loss, dlogits


def sigmoid_bce(logit: float, target: int) -> tuple[float, float]:
    """Binary cross-entropy on a single logit; returns (loss, dloss/dlogit)."""
    z = float(logit)
    # log(1 + e^z) - z*y, computed without overflow
    loss = max(z, 0.0) - z * target + np.log1p(np.exp(-abs(z)))
    p = 1.0 / (1.0 + np.exp(-z))
    return float(loss), p - target


@dataclass
class LayerTape:
    """Per-layer unrolled records over one BPTT window.

    The entering hidden state is a constant for gradient purposes: nothing
    propagates past the window boundary.
    """

    h_in: np.ndarray
    xs: list[np.ndarray] = field(default_factory=list)
    pres: list[np.ndarray] = field(default_factory=list)
    hs: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.xs)


def forward_window(
    layers: Sequence[RnnLayerParams],
    head: OutputHead,
    h_in: Sequence[np.ndarray],
    xs: Sequence[np.ndarray] | np.ndarray,
    extras: dict[int, np.ndarray] | None = None,
) -> tuple[list[LayerTape], list[np.ndarray]]:
    """Unroll the stack over a window of inputs.

    `extras` optionally maps a layer index (>= 1) to an array of per-step
    feature vectors concatenated onto that layer's input, e.g. context tags
    injected above the first layer.
    """
    tapes = [LayerTape(h_in=np.array(h, dtype=np.float64)) for h in h_in]
    logits: list[np.ndarray] = []
    carried = [tape.h_in for tape in tapes]
    for t in range(len(xs)):
        inp = np.asarray(xs[t], dtype=np.float64)
        for li, layer in enumerate(layers):
            if extras is not None and li in extras:
                inp = np.concatenate([inp, extras[li][t]])
            pre = inp @ layer.w_xh + carried[li] @ layer.w_hh + layer.b_h
            h = _activate(pre, layer.activation)
            tape = tapes[li]
            tape.xs.append(inp)
            tape.pres.append(pre)
            tape.hs.append(h)
            carried[li] = h
            inp = h
        logits.append(inp @ head.w_ho + head.b_o)
    return tapes, logits


@dataclass
class LayerGrads:
    w_xh: np.ndarray
    w_hh: np.ndarray
    b_h: np.ndarray


@dataclass
class Gradients:
    layers: list[LayerGrads]
    w_ho: np.ndarray
    b_o: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for g in self.layers:
            out.extend([g.w_xh, g.w_hh, g.b_h])
        out.extend([self.w_ho, self.b_o])
        return out

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays())))

    def zero_layer(self, index: int) -> None:
        g = self.layers[index]
        g.w_xh[...] = 0.0
        g.w_hh[...] = 0.0
        g.b_h[...] = 0.0

    def zero_head(self) -> None:
        self.w_ho[...] = 0.0
        self.b_o[...] = 0.0


def backprop_window(
    layers: Sequence[RnnLayerParams],
    head: OutputHead,
    tapes: Sequence[LayerTape],
    dlogits: Sequence[np.ndarray],
) -> Gradients:
    """Exact gradients of the window loss given per-step output gradients.

    No gradient flows into the entering hidden states.
    """
    steps = len(tapes[0])
    grads = Gradients(
        layers=[
            LayerGrads(
                np.zeros_like(layer.w_xh),
                np.zeros_like(layer.w_hh),
                np.zeros_like(layer.b_h),
            )
            for layer in layers
        ],
        w_ho=np.zeros_like(head.w_ho),
        b_o=np.zeros_like(head.b_o),
    )
    carry = [np.zeros(layer.hidden_dim) for layer in layers]
    for t in range(steps - 1, -1, -1):
        dlog = np.asarray(dlogits[t], dtype=np.float64)
        top_h = tapes[-1].hs[t]
        grads.w_ho += np.outer(top_h, dlog)
        grads.b_o += dlog
        dfrom_above = head.w_ho @ dlog
        for li in range(len(layers) - 1, -1, -1):
            layer = layers[li]
            tape = tapes[li]
            dh = dfrom_above + carry[li]
            dpre = dh * _activation_grad(tape.pres[t], tape.hs[t], layer.activation)
            h_prev = tape.hs[t - 1] if t > 0 else tape.h_in
            lg = grads.layers[li]
            lg.w_xh += np.outer(tape.xs[t], dpre)
            lg.w_hh += np.outer(h_prev, dpre)
            lg.b_h += dpre
            carry[li] = layer.w_hh @ dpre
            if li > 0:
                # Layer input may carry appended extra features; only the
                # leading hidden_dim components flow down the stack.
                dfrom_above = (layer.w_xh @ dpre)[: layers[li - 1].hidden_dim]
    return grads


def bptt_gradients(
    layers: Sequence[RnnLayerParams],
    head: OutputHead,
    tapes: Sequence[LayerTape],
    targets: Sequence[int],
    loss_mask: Sequence[float] | None = None,
) -> tuple[Gradients, float]:
    """Summed softmax cross-entropy over the window, with exact gradients.

    `loss_mask` optionally weights per-step losses (0 silences a step).
    """
    steps = len(tapes[0])
    if len(targets) != steps:
        raise ValueError(f"{len(targets)} targets for a {steps}-step window")
    dlogits: list[np.ndarray] = []
    total = 0.0
    for t in range(steps):
        logit = head_forward(head, tapes[-1].hs[t])
        loss, dlog = softmax_xent(logit, int(targets[t]))
        weight = 1.0 if loss_mask is None else float(loss_mask[t])
        total += weight * loss
        dlogits.append(weight * dlog)
    return backprop_window(layers, head, tapes, dlogits), total


def clip_gradients(grads: Gradients, max_norm: float | None) -> Gradients:
    """Scale all gradients down when the global norm exceeds max_norm."""
    if max_norm is None:
        return grads
    norm = grads.global_norm()
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    for a in grads.arrays():
        a *= scale
    return grads


def sgd_step(
    layers: Sequence[RnnLayerParams],
    head: OutputHead,
    grads: Gradients,
    config: TrainConfig,
) -> tuple[list[RnnLayerParams], OutputHead]:
    """theta <- theta - lr * g after optional clipping; inputs untouched."""
    grads = clip_gradients(grads, config.gradient_clip)
    lr = config.learning_rate
    new_layers = [
        replace(
            layer,
            w_xh=layer.w_xh - lr * g.w_xh,
            w_hh=layer.w_hh - lr * g.w_hh,
            b_h=layer.b_h - lr * g.b_h,
        )
        for layer, g in zip(layers, grads.layers)
    ]
    new_head = OutputHead(w_ho=head.w_ho - lr * grads.w_ho, b_o=head.b_o - lr * grads.b_o)
    return new_layers, new_head


def _param_entries(
    layers: Sequence[RnnLayerParams], head: OutputHead
) -> list[tuple[str, np.ndarray]]:
    entries: list[tuple[str, np.ndarray]] = []
    for i, layer in enumerate(layers):
        entries.append((f"layer{i}.w_xh", layer.w_xh))
        entries.append((f"layer{i}.w_hh", layer.w_hh))
        entries.append((f"layer{i}.b_h", layer.b_h))
    entries.append(("head.w_ho", head.w_ho))
    entries.append(("head.b_o", head.b_o))
    return entries


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    worst: str


def grad_check(
    layers: Sequence[RnnLayerParams],
    head: OutputHead,
    loss_fn: Callable[[Sequence[RnnLayerParams], OutputHead], tuple[float, Gradients]],
    eps: float = 1e-5,
    tolerance: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `loss_fn` maps the current parameters to (loss, Gradients); each parameter
    entry is perturbed by +-eps in place and restored. The reported relative
    error is |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|), maximised over every
    entry.
    """
    _, analytic = loss_fn(layers, head)
    grad_arrays = analytic.arrays()
    worst = 0.0
    worst_name = ""
    for (name, arr), g in zip(_param_entries(layers, head), grad_arrays):
        for idx in np.ndindex(arr.shape):
            original = arr[idx]
            arr[idx] = original + eps
            loss_plus = loss_fn(layers, head)[0]
            arr[idx] = original - eps
            loss_minus = loss_fn(layers, head)[0]
            arr[idx] = original
            fd = (loss_plus - loss_minus) / (2.0 * eps)
            rel = abs(g[idx] - fd) / max(1e-8, abs(g[idx]) + abs(fd))
            if rel > worst:
                worst = rel
                worst_name = f"{name}[{idx}]"
    return GradCheckReport(
        max_rel_error=worst,
        tolerance=tolerance,
        passed=worst <= tolerance,
        worst=worst_name,
    )


CHECKPOINT_FORMAT = "chunkrnn-params-v1"


def save_checkpoint(
    path: str | Path,
    layers: Sequence[RnnLayerParams],
    head: OutputHead,
    meta: dict | None = None,
) -> None:
    """Self-describing JSON checkpoint; float64 values round-trip bit-exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "layers": [
            {
                "activation": layer.activation,
                "input_dim": layer.input_dim,
                "hidden_dim": layer.hidden_dim,
                "w_xh": layer.w_xh.tolist(),
                "w_hh": layer.w_hh.tolist(),
                "b_h": layer.b_h.tolist(),
            }
            for layer in layers
        ],
        "head": {"w_ho": head.w_ho.tolist(), "b_o": head.b_o.tolist()},
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[list[RnnLayerParams], OutputHead, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint: {path}")
    layers = [
        RnnLayerParams(
            w_xh=np.asarray(spec["w_xh"], dtype=np.float64),
            w_hh=np.asarray(spec["w_hh"], dtype=np.float64),
            b_h=np.asarray(spec["b_h"], dtype=np.float64),
            activation=spec["activation"],
        )
        for spec in doc["layers"]
    ]
    head = OutputHead(
        w_ho=np.asarray(doc["head"]["w_ho"], dtype=np.float64),
        b_o=np.asarray(doc["head"]["b_o"], dtype=np.float64),
    )
    return layers, head, doc.get("meta", {})
