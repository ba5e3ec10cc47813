"""Sleep-phase machinery.

Replays buffered experience through the trained first layer, locates
community entries as peaks of the consecutive hidden-state cosine distance
(a step whose backward distance exceeds its forward distance), derives the
binary mask, trains the small mask-predicting tagger network, and streams
context tags online: the tag carries until the tagger fires, at which point
it becomes the firing token.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .environment import HUB, N_TOKENS
from .nn import (
    OutputHead,
    RnnLayerParams,
    TrainConfig,
    backprop_window,
    forward_window,
    init_head,
    init_layer,
    sgd_step,
    sigmoid_bce,
)

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12
TAGGER_HIDDEN_UNITS = 5


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cos(u, v), in [0, 2]; returns 1 when either norm is near zero."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < DEGENERATE_NORM or nv < DEGENERATE_NORM:
        return 1.0
    return float(1.0 - float(u @ v) / (nu * nv))


def consecutive_cosine_distances(
    hiddens: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Distances between h_t and h_{t+1} plus a per-step degenerate flag."""
    h = np.asarray(hiddens, dtype=np.float64)
    norms = np.linalg.norm(h, axis=1)
    degenerate = norms < DEGENERATE_NORM
    safe = np.where(degenerate, 1.0, norms)
    dots = np.sum(h[:-1] * h[1:], axis=1)
    dists = 1.0 - dots / (safe[:-1] * safe[1:])
    dists[degenerate[:-1] | degenerate[1:]] = 1.0
    return dists, degenerate


def transition_mean_distances(
    dists: np.ndarray,
    tokens: np.ndarray,
    degenerate: np.ndarray | None = None,
) -> np.ndarray:
    """Replace each consecutive distance by the mean over its transition type.

    The distance between the states at steps t and t+1 is pooled with every
    other occurrence of the same (token_t, token_{t+1}) pair, so the result
    is the typical hidden-state jump for that transition rather than one
    noisy draw. Distances touching degenerate states are left out of the
    pooled means.
    """
    tokens = np.asarray(tokens)
    if len(tokens) != len(dists) + 1:
        raise ValueError("need one token per hidden state")
    keep = np.ones(len(dists), dtype=bool)
    if degenerate is not None:
        keep &= ~(degenerate[:-1] | degenerate[1:])
    pair = tokens[:-1].astype(np.int64) * N_TOKENS + tokens[1:].astype(np.int64)
    sums = np.bincount(pair[keep], weights=dists[keep], minlength=N_TOKENS * N_TOKENS)
    counts = np.bincount(pair[keep], minlength=N_TOKENS * N_TOKENS)
    means = np.divide(sums, counts, out=np.ones_like(sums), where=counts > 0)
    return means[pair]


def detect_peaks(
    hiddens: np.ndarray, tokens: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Mark steps whose backward cosine distance beats their forward one.

    With `tokens` given, the comparison runs on per-transition-type mean
    distances instead of raw single-step ones: individual hidden-state jumps
    carry heavy history-induced jitter, while their per-transition means
    expose the periodic structure (a large typical jump into a community
    entry, small jumps after it) cleanly.

    Returns (mask bits, flagged) aligned with the hidden states; boundary
    steps are always 0 and steps whose own hidden state has a near-zero norm
    are flagged so peak statistics can skip them.
    """
    h = np.asarray(hiddens, dtype=np.float64)
    n = len(h)
    if n < 3:
        raise ValueError("need at least 3 hidden states to detect peaks")
    dists, degenerate = consecutive_cosine_distances(h)
    if tokens is not None:
        dists = transition_mean_distances(dists, tokens, degenerate)
    bits = np.zeros(n, dtype=np.uint8)
    bits[1:-1] = dists[:-1] > dists[1:]
    flagged = degenerate.copy()
    bits[flagged] = 0
    return bits, flagged


def mask_scores(
    detected: np.ndarray,
    truth: np.ndarray,
    flagged: np.ndarray | None = None,
) -> dict[str, float]:
    """Precision / recall / F1 of a detected mask against the true entry mask.

    Flagged (degenerate) steps are excluded from the statistics.
    """
    detected = np.asarray(detected, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    keep = np.ones(len(detected), dtype=bool)
    if flagged is not None:
        keep &= ~np.asarray(flagged, dtype=bool)
    d = detected[keep]
    t = truth[keep]
    tp = float(np.sum(d & t))
    fp = float(np.sum(d & ~t))
    fn = float(np.sum(~d & t))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = (
        2 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return {"precision": precision, "recall": recall, "f1": f1}


class ReplayBuffer:
    """FIFO token store for the pre-sleep wake phase."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._tokens: list[int] = []

    def extend(self, tokens: Sequence[int] | np.ndarray) -> None:
        self._tokens.extend(int(t) for t in tokens)
        if len(self._tokens) > self.capacity:
            self._tokens = self._tokens[-self.capacity:]

    def tokens(self) -> np.ndarray:
        return np.asarray(self._tokens, dtype=np.int8)

    def __len__(self) -> int:
        return len(self._tokens)


@dataclass
class ContextTagger:
    """Small recurrent net deciding whether a token starts a community.

    One recurrent layer over one-hot tokens plus a single sigmoid logit;
    outputs are thresholded to a bit. Once trained it is never updated again.
    """

    layer: RnnLayerParams
    head: OutputHead
    threshold: float = 0.5
    hidden: np.ndarray = field(default_factory=lambda: np.zeros(TAGGER_HIDDEN_UNITS))
    trained_on_degenerate_mask: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie strictly between 0 and 1")

    def reset(self) -> None:
        self.hidden = np.zeros(self.layer.hidden_dim)

    def fire_probability(self, token: int) -> float:
        """Advance the recurrent state by one token; returns P(boundary)."""
        x = np.zeros(self.layer.input_dim)
        x[token] = 1.0
        pre = x @ self.layer.w_xh + self.hidden @ self.layer.w_hh + self.layer.b_h
        self.hidden = np.tanh(pre) if self.layer.activation == "tanh" else np.maximum(pre, 0.0)
        z = float(self.hidden @ self.head.w_ho[:, 0] + self.head.b_o[0])
        return 1.0 / (1.0 + np.exp(-z))

    def step(self, token: int) -> bool:
        return self.fire_probability(token) >= self.threshold


class OracleTagger:
    """Reference tagger that fires exactly on community entries.

    An entry is any token immediately following the hub, which is the ground
    truth the learned tagger approximates.
    """

    def __init__(self) -> None:
        self._previous: int | None = None

    def reset(self) -> None:
        self._previous = None

    def step(self, token: int) -> bool:
        fired = self._previous == HUB
        self._previous = int(token)
        return fired


@dataclass
class TaggerReport:
    epochs: int
    holdout_accuracy: float
    degenerate_mask: bool


def _tagger_bits(tagger: ContextTagger, tokens: np.ndarray) -> np.ndarray:
    tagger.reset()
    return np.asarray([tagger.step(int(t)) for t in tokens], dtype=np.uint8)


def train_tagger(
    tokens: np.ndarray,
    mask: np.ndarray,
    config: TrainConfig | None = None,
    *,
    holdout_fraction: float = 0.1,
    max_epochs: int = 50,
    patience: int = 3,
) -> tuple[ContextTagger, TaggerReport]:
    """Supervise the tagger on (token, mask-bit) pairs.

    Trains with per-step binary cross-entropy in truncated-BPTT windows until
    the held-out bit accuracy plateaus (no gain for `patience` evaluations),
    capped at `max_epochs` passes. Degenerate all-zero / all-one masks are
    accepted but flagged, since the resulting tagger is constant.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.int64)
    if len(tokens) != len(mask):
        raise ValueError("tokens and mask must align")
    if len(tokens) < 10:
        raise ValueError("need at least 10 steps to train the tagger")
    if config is None:
        config = TrainConfig(learning_rate=0.25, bptt_window=8, init_scale=0.2, seed=0)
    degenerate = bool(mask.min() == mask.max())
    if degenerate:
        log.warning("train_tagger: degenerate mask (all %d); tagger will be constant",
                    int(mask[0]))

    split = max(1, int(len(tokens) * (1.0 - holdout_fraction)))
    rng = np.random.default_rng(config.seed)
    layer = init_layer(rng, N_TOKENS, TAGGER_HIDDEN_UNITS, "tanh", config.init_scale)
    head = init_head(rng, TAGGER_HIDDEN_UNITS, 1, config.init_scale)
    eye = np.eye(N_TOKENS)
    train_inputs = eye[tokens[:split]]
    train_labels = mask[:split]

    layers = [layer]
    best_acc = -1.0
    stale = 0
    epochs_run = 0
    w = config.bptt_window
    for epoch in range(max_epochs):
        epochs_run = epoch + 1
        hidden = [np.zeros(TAGGER_HIDDEN_UNITS)]
        i = 0
        n = len(train_labels)
        while i < n:
            j = min(i + w, n)
            tapes, logits = forward_window(layers, head, hidden, train_inputs[i:j])
            dlogits = []
            for t in range(j - i):
                _, dz = sigmoid_bce(logits[t][0], int(train_labels[i + t]))
                dlogits.append(np.array([dz]))
            grads = backprop_window(layers, head, tapes, dlogits)
            layers, head = sgd_step(layers, head, grads, config)
            hidden = [tapes[0].hs[-1].copy()]
            i = j
        candidate = ContextTagger(
            layer=layers[0], head=head, trained_on_degenerate_mask=degenerate
        )
        bits = _tagger_bits(candidate, tokens[split:]) if split < len(tokens) else \
            _tagger_bits(candidate, tokens[:split])
        labels = mask[split:] if split < len(tokens) else mask[:split]
        acc = float(np.mean(bits == labels))
        if acc > best_acc + 1e-4:
            best_acc = acc
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    tagger = ContextTagger(
        layer=layers[0], head=head, trained_on_degenerate_mask=degenerate
    )
    tagger.reset()
    return tagger, TaggerReport(
        epochs=epochs_run, holdout_accuracy=best_acc, degenerate_mask=degenerate
    )


@dataclass
class TagStream:
    """Online context-tag state: carry the tag, adopt the token on a fire."""

    current: int | None = None
    fires: int = 0

    def step(self, tagger, token: int) -> int:
        """Process one token; returns the post-fire tag for this step."""
        token = int(token)
        if self.current is None:
            self.current = token
        if tagger.step(token):
            self.current = token
            self.fires += 1
        return self.current


def tag_stream_step(tagger, state: TagStream, token: int) -> tuple[int, TagStream]:
    """Functional wrapper over TagStream.step for one-off use."""
    tag = state.step(tagger, token)
    return tag, state


def tags_used_for_inputs(
    tagger, tokens: Sequence[int] | np.ndarray, stream: TagStream | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Tags paired with each step's input, plus the post-fire tag stream.

    The input at step t carries the tag as it stood before this step's fire
    decision (the previous step's post-fire value; the very first tag is the
    first token itself).
    """
    stream = stream if stream is not None else TagStream()
    used = np.zeros(len(tokens), dtype=np.int8)
    emitted = np.zeros(len(tokens), dtype=np.int8)
    for i, token in enumerate(tokens):
        used[i] = stream.current if stream.current is not None else int(token)
        emitted[i] = stream.step(tagger, int(token))
    return used, emitted


def replay_hidden_states(layer: RnnLayerParams, inputs: np.ndarray) -> np.ndarray:
    """Forward-only replay through a single layer from a zero hidden state."""
    n = len(inputs)
    h = np.zeros(layer.hidden_dim)
    out = np.zeros((n, layer.hidden_dim))
    for i in range(n):
        pre = inputs[i] @ layer.w_xh + h @ layer.w_hh + layer.b_h
        h = np.tanh(pre) if layer.activation == "tanh" else np.maximum(pre, 0.0)
        out[i] = h
    return out
