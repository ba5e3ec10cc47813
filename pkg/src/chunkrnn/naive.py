"""Baseline online next-token learner.

A one-hot-input recurrent predictor trained online with truncated BPTT:
the stream is consumed in consecutive windows of `bptt_window` steps, every
step in a window contributes a cross-entropy loss, one SGD update is applied
per window, and the hidden state entering the next window is the last hidden
state of the previous one, detached. Predictions are recorded before the
update that sees their targets (predict-then-train), and quality is tracked
as the sliding-window error over the trailing `win` predictions.
"""

from __future__ import annotations

from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace as dc_replace
from typing import Sequence

import numpy as np

from .analysis import per_position_accuracy
from .environment import N_TOKENS, EnvConfig, Environment
from .nn import (
    OutputHead,
    RnnLayerParams,
    TrainConfig,
    bptt_gradients,
    forward_window,
    head_forward,
    init_head,
    init_layer,
    sgd_step,
    softmax,
)

DEFAULT_EVAL_WINDOW = 1000
POSITION_TAIL = 10_000


@dataclass
class RunMetrics:
    """Time-indexed outcome of one online training (or evaluation) run."""

    win: int
    correct: np.ndarray            # per-prediction correctness bits
    error_series: np.ndarray       # sliding-window error, one entry per prediction after warm-up
    predicted: np.ndarray
    targets: np.ndarray
    target_positions: np.ndarray | None = None
    phase: str | None = None

    @property
    def n_predictions(self) -> int:
        return len(self.correct)

    @property
    def final_error(self) -> float:
        if len(self.error_series) == 0:
            raise ValueError("run too short for a windowed error")
        return float(self.error_series[-1])

    def per_position(self, tail: int = POSITION_TAIL) -> list[tuple[int, float, int]]:
        """Accuracy per cycle position over the trailing `tail` predictions."""
        if self.target_positions is None:
            raise ValueError("run was trained without position labels")
        n = min(tail, self.n_predictions)
        return per_position_accuracy(
            self.predicted[-n:], self.targets[-n:], self.target_positions[-n:]
        )


class OnlineEvalState:
    """Ring buffer of the last `win` correctness bits and the error series."""

    def __init__(self, win: int = DEFAULT_EVAL_WINDOW):
        if win < 1:
            raise ValueError("win must be >= 1")
        self.win = win
        self._bits: deque[int] = deque(maxlen=win)
        self._sum = 0
        self.series: list[float] = []

    def push(self, correct: bool) -> float | None:
        """Record one prediction outcome; returns the windowed error once
        `win` predictions have been seen, else None."""
        if len(self._bits) == self.win:
            self._sum -= self._bits[0]
        self._bits.append(int(correct))
        self._sum += int(correct)
        if len(self._bits) < self.win:
            return None
        error = 1.0 - self._sum / self.win
        self.series.append(error)
        return error


def windowed_error_series(correct: np.ndarray, win: int) -> np.ndarray:
    """Vectorised sliding-window error: entry i is 1 - mean(bits[i..i+win))."""
    if len(correct) < win:
        return np.empty(0, dtype=np.float64)
    cs = np.concatenate([[0], np.cumsum(correct, dtype=np.float64)])
    return 1.0 - (cs[win:] - cs[:-win]) / win


@dataclass
class NaiveModel:
    layers: list[RnnLayerParams]
    head: OutputHead
    hidden: list[np.ndarray]


def build_naive_model(
    neurons: int,
    n_layers: int = 1,
    seed: int = 0,
    init_scale: float = 0.2,
    activation: str = "tanh",
    input_dim: int = N_TOKENS,
    n_out: int = N_TOKENS,
) -> NaiveModel:
    if n_layers not in (1, 2):
        raise ValueError("naive model supports 1 or 2 layers")
    rng = np.random.default_rng(seed)
    layers = []
    dim = input_dim
    for _ in range(n_layers):
        layers.append(init_layer(rng, dim, neurons, activation, init_scale))
        dim = neurons
    head = init_head(rng, neurons, n_out, init_scale)
    return NaiveModel(layers=layers, head=head, hidden=[np.zeros(neurons) for _ in layers])


def one_hot_rows(tokens: Sequence[int] | np.ndarray, size: int = N_TOKENS) -> np.ndarray:
    return np.eye(size, dtype=np.float64)[np.asarray(tokens, dtype=np.int64)]


def predict_next(
    model: NaiveModel, token: int
) -> tuple[int, np.ndarray, list[np.ndarray]]:
    """Feed one token; returns (predicted, probs, new hidden states).

    The model is not mutated; ties in the argmax resolve to the lowest token
    index.
    """
    x = one_hot_rows([token])[0]
    new_hidden = []
    inp = x
    for layer, h in zip(model.layers, model.hidden):
        h_new = np.tanh(inp @ layer.w_xh + h @ layer.w_hh + layer.b_h) \
            if layer.activation == "tanh" else np.maximum(inp @ layer.w_xh + h @ layer.w_hh + layer.b_h, 0.0)
        new_hidden.append(h_new)
        inp = h_new
    probs = softmax(head_forward(model.head, inp))
    return int(np.argmax(probs)), probs, new_hidden


def train_stream(
    layers: list[RnnLayerParams],
    head: OutputHead,
    hidden: list[np.ndarray],
    inputs: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig,
    *,
    extras: dict[int, np.ndarray] | None = None,
    freeze_layers: Sequence[int] = (),
    freeze_head: bool = False,
    target_positions: np.ndarray | None = None,
    win: int = DEFAULT_EVAL_WINDOW,
    phase: str | None = None,
) -> tuple[list[RnnLayerParams], OutputHead, list[np.ndarray], RunMetrics]:
    """Generic online loop shared by the naive and chunked learners.

    `inputs` is an (n, d) array of per-step input vectors and `targets` the
    aligned next-token indices. Frozen tensors have their gradients zeroed
    before the update, so their values stay bit-identical.
    """
    n = len(targets)
    if len(inputs) != n:
        raise ValueError("inputs and targets must align")
    w = config.bptt_window
    correct = np.zeros(n, dtype=np.uint8)
    predicted = np.zeros(n, dtype=np.int16)
    hidden = [np.array(h, dtype=np.float64) for h in hidden]
    i = 0
    while i < n:
        j = min(i + w, n)
        window_extras = (
            {li: ex[i:j] for li, ex in extras.items()} if extras is not None else None
        )
        tapes, logits = forward_window(layers, head, hidden, inputs[i:j], window_extras)
        for t in range(j - i):
            k = int(np.argmax(logits[t]))
            predicted[i + t] = k
            correct[i + t] = k == targets[i + t]
        grads, _ = bptt_gradients(layers, head, tapes, targets[i:j])
        for li in freeze_layers:
            grads.zero_layer(li)
        if freeze_head:
            grads.zero_head()
        layers, head = sgd_step(layers, head, grads, config)
        hidden = [tape.hs[-1].copy() for tape in tapes]
        i = j
    metrics = RunMetrics(
        win=win,
        correct=correct,
        error_series=windowed_error_series(correct, win),
        predicted=predicted,
        targets=np.asarray(targets, dtype=np.int16),
        target_positions=target_positions,
        phase=phase,
    )
    return layers, head, hidden, metrics


def train_online(
    model: NaiveModel,
    tokens: np.ndarray,
    config: TrainConfig,
    *,
    positions: np.ndarray | None = None,
    win: int = DEFAULT_EVAL_WINDOW,
) -> RunMetrics:
    """Online predict-then-train over a token stream; mutates the model."""
    if len(tokens) < 2:
        raise ValueError("token stream must contain at least 2 tokens")
    inputs = one_hot_rows(tokens[:-1])
    targets = np.asarray(tokens[1:], dtype=np.int64)
    target_positions = np.asarray(positions[1:]) if positions is not None else None
    model.layers, model.head, model.hidden, metrics = train_stream(
        model.layers,
        model.head,
        model.hidden,
        inputs,
        targets,
        config,
        target_positions=target_positions,
        win=win,
    )
    return metrics


@dataclass
class HiddenSnapshot:
    """Per-step (token, position, first-layer hidden state) records."""

    tokens: np.ndarray
    positions: np.ndarray | None
    hiddens: np.ndarray


def hidden_snapshot(
    model: NaiveModel,
    tokens: np.ndarray,
    positions: np.ndarray | None = None,
    n: int | None = None,
) -> HiddenSnapshot:
    """Forward-only pass recording first-layer hidden states; no updates."""
    n = len(tokens) if n is None else min(n, len(tokens))
    layer = model.layers[0]
    h = np.array(model.hidden[0], dtype=np.float64)
    hiddens = np.zeros((n, layer.hidden_dim))
    eye = np.eye(layer.input_dim)
    for i in range(n):
        pre = eye[tokens[i]] @ layer.w_xh + h @ layer.w_hh + layer.b_h
        h = np.tanh(pre) if layer.activation == "tanh" else np.maximum(pre, 0.0)
        hiddens[i] = h
    return HiddenSnapshot(
        tokens=np.asarray(tokens[:n]),
        positions=np.asarray(positions[:n]) if positions is not None else None,
        hiddens=hiddens,
    )


MODEL_SEED_SALT = 0x9E3779B97F4A7C15  # entropy split between env stream and weight init


def derive_run_seed(root_seed: int, run_index: int) -> int:
    """Per-run seed derivation: root XOR run-index."""
    return (root_seed ^ run_index) & 0xFFFFFFFFFFFFFFFF


def model_seed(run_seed: int) -> int:
    return (run_seed ^ MODEL_SEED_SALT) & 0xFFFFFFFFFFFFFFFF


def run_naive_once(
    env_config: EnvConfig,
    neurons: int,
    n_layers: int,
    window: int,
    steps: int,
    *,
    run_seed: int,
    learning_rate: float = 0.05,
    init_scale: float = 0.2,
    gradient_clip: float | None = 5.0,
    win: int = DEFAULT_EVAL_WINDOW,
) -> RunMetrics:
    """One complete seeded naive run on a fresh environment stream."""
    env = Environment(dc_replace(env_config, seed=run_seed))
    tokens, positions, _ = env.generate(steps)
    model = build_naive_model(
        neurons, n_layers, seed=model_seed(run_seed), init_scale=init_scale
    )
    config = TrainConfig(
        learning_rate=learning_rate,
        bptt_window=window,
        init_scale=init_scale,
        seed=model_seed(run_seed),
        gradient_clip=gradient_clip,
    )
    return train_online(model, tokens, config, positions=positions, win=win)


def _sweep_worker(task: tuple) -> tuple[tuple[int, int, int], int, np.ndarray]:
    env_config, neurons, n_layers, window, steps, run_seed, lr, init_scale, clip, win = task
    metrics = run_naive_once(
        env_config,
        neurons,
        n_layers,
        window,
        steps,
        run_seed=run_seed,
        learning_rate=lr,
        init_scale=init_scale,
        gradient_clip=clip,
        win=win,
    )
    return (neurons, n_layers, window), run_seed, metrics.error_series


@dataclass
class SweepCellSummary:
    neurons: int
    layers: int
    window: int
    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    final_errors: list[float]


def ablation_sweep(
    neurons_grid: Sequence[int],
    layers_grid: Sequence[int],
    window_grid: Sequence[int],
    replicates: int,
    *,
    env_config: EnvConfig,
    steps: int,
    root_seed: int = 0,
    learning_rate: float = 0.05,
    init_scale: float = 0.2,
    gradient_clip: float | None = 5.0,
    win: int = DEFAULT_EVAL_WINDOW,
    jobs: int | None = None,
    replicate_seeds: Sequence[int] | None = None,
) -> list[SweepCellSummary]:
    """Median and interquartile error curves per (neurons, layers, window) cell.

    Replicate r of cell c runs with seed root XOR (c * replicates + r) unless
    `replicate_seeds` overrides the derivation outright.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    cells = [
        (n, l, w) for n in neurons_grid for l in layers_grid for w in window_grid
    ]
    tasks = []
    for ci, (n, l, w) in enumerate(cells):
        for r in range(replicates):
            seed = (
                replicate_seeds[r]
                if replicate_seeds is not None
                else derive_run_seed(root_seed, ci * replicates + r)
            )
            tasks.append(
                (env_config, n, l, w, steps, seed, learning_rate, init_scale,
                 gradient_clip, win)
            )
    if jobs is not None and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_worker, tasks))
    else:
        results = [_sweep_worker(t) for t in tasks]
    by_cell: dict[tuple[int, int, int], list[np.ndarray]] = {c: [] for c in cells}
    for key, _, series in results:
        by_cell[key].append(series)
    summaries = []
    for (n, l, w) in cells:
        stack = np.vstack(by_cell[(n, l, w)])
        summaries.append(
            SweepCellSummary(
                neurons=n,
                layers=l,
                window=w,
                median=np.median(stack, axis=0),
                q25=np.quantile(stack, 0.25, axis=0),
                q75=np.quantile(stack, 0.75, axis=0),
                final_errors=[float(s[-1]) for s in stack],
            )
        )
    return summaries
