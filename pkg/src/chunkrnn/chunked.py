"""Two-layer chunked recurrent model.

The wake/sleep/wake protocol: a pre-sleep phase trains layer 1 with layer 2
and the head frozen while buffering experience; the sleep phase replays the
buffer through layer 1, detects community entries from cosine-distance
peaks, and trains a frozen context tagger; the post-sleep phase trains both
layers jointly with the tag stream appended to the input. Also provides the
constant-tag ablation, an oracle-tag reference, and the source-to-target
transfer harness with a size-matched plain-RNN baseline.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .chunking import (
    ContextTagger,
    OracleTagger,
    ReplayBuffer,
    TagStream,
    TaggerReport,
    detect_peaks,
    replay_hidden_states,
    tags_used_for_inputs,
    train_tagger,
)
from .environment import N_TOKENS, EnvConfig, Environment
from .naive import (
    DEFAULT_EVAL_WINDOW,
    NaiveModel,
    RunMetrics,
    build_naive_model,
    derive_run_seed,
    model_seed,
    one_hot_rows,
    train_stream,
    windowed_error_series,
)
from .nn import OutputHead, RnnLayerParams, TrainConfig, init_head, init_layer

log = logging.getLogger(__name__)

TAG_MODES = ("learned", "constant", "oracle")
TAG_INJECTIONS = ("input", "layer2")
CONSTANT_TAG = 0  # token A
TAGGER_SEED_SALT = 0xD1B54A32D192ED03


@dataclass
class PhaseSchedule:
    """Environment steps per phase; the sleep phase consumes none."""

    pre_sleep_steps: int = 20_000
    sleep_buffer_len: int = 20_000
    post_sleep_steps: int = 180_000

    def __post_init__(self) -> None:
        if min(self.pre_sleep_steps, self.sleep_buffer_len, self.post_sleep_steps) < 1:
            raise ValueError("all schedule entries must be >= 1")


@dataclass
class ChunkedModel:
    """Two stacked recurrent layers, a token head, and an attached tagger.

    With `tag_injection="input"` the first layer reads a 14-dim vector
    (one-hot token then one-hot tag); with "layer2" the tag one-hot is
    appended to layer 2's input instead.
    """

    layers: list[RnnLayerParams]
    head: OutputHead
    hidden: list[np.ndarray]
    tagger: ContextTagger | None = None
    freeze_layer2: bool = False
    tag_injection: str = "input"


def build_chunked_model(
    units: int,
    seed: int = 0,
    init_scale: float = 0.2,
    tag_injection: str = "input",
    activation: str = "tanh",
) -> ChunkedModel:
    if tag_injection not in TAG_INJECTIONS:
        raise ValueError(f"tag_injection must be one of {TAG_INJECTIONS}")
    rng = np.random.default_rng(seed)
    layer1_in = 2 * N_TOKENS if tag_injection == "input" else N_TOKENS
    layer2_in = units + N_TOKENS if tag_injection == "layer2" else units
    layers = [
        init_layer(rng, layer1_in, units, activation, init_scale),
        init_layer(rng, layer2_in, units, activation, init_scale),
    ]
    head = init_head(rng, units, N_TOKENS, init_scale)
    return ChunkedModel(
        layers=layers,
        head=head,
        hidden=[np.zeros(units), np.zeros(units)],
        tag_injection=tag_injection,
    )


def _model_inputs(
    model: ChunkedModel, tokens: np.ndarray, tags: np.ndarray | None
) -> tuple[np.ndarray, dict[int, np.ndarray] | None]:
    """Build per-step input vectors; a None tag stream means an all-zero
    tag slice (the pre-sleep placeholder)."""
    token_hot = one_hot_rows(tokens)
    tag_hot = (
        one_hot_rows(tags) if tags is not None else np.zeros((len(tokens), N_TOKENS))
    )
    if model.tag_injection == "input":
        return np.concatenate([token_hot, tag_hot], axis=1), None
    return token_hot, {1: tag_hot}


def _tags_for_phase(
    model: ChunkedModel,
    tokens: np.ndarray,
    tag_mode: str,
    stream: TagStream | None,
) -> tuple[np.ndarray, TagStream | None]:
    if tag_mode == "constant":
        return np.full(len(tokens), CONSTANT_TAG, dtype=np.int8), stream
    if tag_mode == "oracle":
        tagger = OracleTagger()
        used, _ = tags_used_for_inputs(tagger, tokens, stream or TagStream())
        return used, stream
    if tag_mode == "learned":
        if model.tagger is None:
            raise ValueError("no tagger attached; run the sleep phase first")
        stream = stream if stream is not None else TagStream()
        used, _ = tags_used_for_inputs(model.tagger, tokens, stream)
        return used, stream
    raise ValueError(f"tag_mode must be one of {TAG_MODES}")


def phase1_pre_sleep(
    model: ChunkedModel,
    env: Environment,
    schedule: PhaseSchedule,
    config: TrainConfig,
    win: int = DEFAULT_EVAL_WINDOW,
) -> tuple[ReplayBuffer, RunMetrics]:
    """Brief wake training of layer 1 with layer 2 and the head frozen.

    The tag slice stays all-zero (no tagger exists yet) and every observed
    token lands in the replay buffer.
    """
    tokens, positions, _ = env.generate(schedule.pre_sleep_steps)
    buffer = ReplayBuffer(schedule.sleep_buffer_len)
    buffer.extend(tokens)
    inputs, extras = _model_inputs(model, tokens[:-1], None)
    model.layers, model.head, model.hidden, metrics = train_stream(
        model.layers,
        model.head,
        model.hidden,
        inputs,
        np.asarray(tokens[1:], dtype=np.int64),
        config,
        extras=extras,
        freeze_layers=(1,),
        freeze_head=True,
        target_positions=np.asarray(positions[1:]),
        win=win,
        phase="pre_sleep",
    )
    return buffer, metrics


@dataclass
class SleepReport:
    tagger: ContextTagger
    tagger_report: TaggerReport
    detected_mask: np.ndarray
    flagged: np.ndarray
    replay_tokens: np.ndarray
    emitted_tags: np.ndarray


def phase2_sleep(
    model: ChunkedModel,
    buffer: ReplayBuffer,
    tagger_config: TrainConfig | None = None,
    *,
    replay_tags: np.ndarray | None = None,
) -> SleepReport:
    """Offline chunk discovery: no environment access, no weight changes.

    The buffer is replayed through layer 1 alone (normal hidden carry,
    matching the wake-phase input convention), peaks of the consecutive
    cosine distance become the mask, and the tagger is trained on it and
    attached frozen. `replay_tags` reconstructs the tag slice the wake phase
    saw; by default the slice is all-zero as in the pre-sleep phase.
    """
    if len(buffer) == 0:
        raise ValueError("empty replay buffer")
    tokens = buffer.tokens()
    # With layer-2 injection the first layer never sees tags, so _model_inputs
    # already yields exactly what layer 1 consumed during wake.
    inputs, _ = _model_inputs(model, tokens, replay_tags)
    hiddens = replay_hidden_states(model.layers[0], inputs)
    mask, flagged = detect_peaks(hiddens, tokens)
    tagger, report = train_tagger(tokens, mask, tagger_config)
    _, emitted = tags_used_for_inputs(tagger, tokens, TagStream())
    tagger.reset()
    model.tagger = tagger
    return SleepReport(
        tagger=tagger,
        tagger_report=report,
        detected_mask=mask,
        flagged=flagged,
        replay_tokens=tokens,
        emitted_tags=emitted,
    )


def phase3_post_sleep(
    model: ChunkedModel,
    env: Environment,
    schedule: PhaseSchedule,
    config: TrainConfig,
    *,
    tag_mode: str = "learned",
    steps: int | None = None,
    tag_stream: TagStream | None = None,
    win: int = DEFAULT_EVAL_WINDOW,
    phase_name: str = "post_sleep",
) -> RunMetrics:
    """Joint wake training with the tag stream appended to the input.

    The tagger is frozen: it only feeds the tag stream, whose input pairing
    carries each step's pre-fire tag.
    """
    n = schedule.post_sleep_steps if steps is None else steps
    tokens, positions, _ = env.generate(n)
    tags, _ = _tags_for_phase(model, tokens[:-1], tag_mode, tag_stream)
    inputs, extras = _model_inputs(model, tokens[:-1], tags)
    model.layers, model.head, model.hidden, metrics = train_stream(
        model.layers,
        model.head,
        model.hidden,
        inputs,
        np.asarray(tokens[1:], dtype=np.int64),
        config,
        extras=extras,
        target_positions=np.asarray(positions[1:]),
        win=win,
        phase=phase_name,
    )
    return metrics


def constant_tag_ablation(
    model: ChunkedModel,
    env: Environment,
    schedule: PhaseSchedule,
    config: TrainConfig,
    win: int = DEFAULT_EVAL_WINDOW,
) -> RunMetrics:
    """Post-sleep training with the tag pinned to a constant token."""
    return phase3_post_sleep(
        model, env, schedule, config, tag_mode="constant", win=win,
        phase_name="constant_tag",
    )


@dataclass
class ProtocolResult:
    model: ChunkedModel
    pre_sleep: RunMetrics
    sleep: SleepReport | None
    post_sleep: RunMetrics
    env_steps: int


def run_protocol(
    env_config: EnvConfig,
    units: int,
    schedule: PhaseSchedule,
    config: TrainConfig,
    *,
    tag_mode: str = "learned",
    tag_injection: str = "input",
    win: int = DEFAULT_EVAL_WINDOW,
    tagger_config: TrainConfig | None = None,
) -> ProtocolResult:
    """All three phases on a fresh environment stream."""
    env = Environment(env_config)
    model = build_chunked_model(
        units, seed=config.seed, init_scale=config.init_scale,
        tag_injection=tag_injection,
    )
    buffer, pre_metrics = phase1_pre_sleep(model, env, schedule, config, win=win)
    sleep = None
    if tag_mode == "learned":
        if tagger_config is None:
            tagger_config = TrainConfig(
                learning_rate=0.25, bptt_window=8, init_scale=config.init_scale,
                seed=(config.seed ^ TAGGER_SEED_SALT) & 0xFFFFFFFFFFFFFFFF,
            )
        sleep = phase2_sleep(model, buffer, tagger_config)
    post_metrics = phase3_post_sleep(
        model, env, schedule, config, tag_mode=tag_mode, win=win
    )
    return ProtocolResult(
        model=model,
        pre_sleep=pre_metrics,
        sleep=sleep,
        post_sleep=post_metrics,
        env_steps=env.steps_consumed,
    )


def _combined_series(parts: Sequence[RunMetrics], win: int) -> np.ndarray:
    bits = np.concatenate([p.correct for p in parts])
    return windowed_error_series(bits, win)


@dataclass
class TransferResult:
    chunked_source: ProtocolResult
    chunked_target_series: np.ndarray
    chunked_target_parts: list[RunMetrics]
    naive_target_series: np.ndarray
    naive_source_metrics: RunMetrics
    target_sleep: SleepReport


def auc_first_steps(series: np.ndarray, limit: int, win: int) -> float:
    """Mean windowed error over the first `limit` predictions of a run."""
    count = max(1, min(len(series), limit - win + 1))
    return float(np.mean(series[:count]))


def transfer(
    source_config: EnvConfig,
    target_config: EnvConfig,
    units: int,
    schedule: PhaseSchedule,
    config: TrainConfig,
    *,
    target_steps: int = 100_000,
    brief_steps: int = 20_000,
    win: int = DEFAULT_EVAL_WINDOW,
    tag_injection: str = "input",
    tagger_config: TrainConfig | None = None,
) -> TransferResult:
    """Source-task protocol, then fine-tuning on the target task.

    On the target the chunked model first trains jointly with the source
    tagger's tags (layer 2 is never frozen again), re-derives the tagger from
    a fresh target buffer after `brief_steps`, and continues jointly with the
    new tagger. The baseline is a plain RNN with the same layer/unit counts
    trained on the source stream for the same number of steps and fine-tuned
    on the target.
    """
    source = run_protocol(
        source_config, units, schedule, config,
        tag_injection=tag_injection, tagger_config=tagger_config, win=win,
    )
    model = source.model

    target_env = Environment(target_config)
    brief = min(brief_steps, target_steps)
    stream = TagStream()
    part_a = phase3_post_sleep(
        model, target_env, schedule, config,
        tag_mode="learned", steps=brief, tag_stream=stream, win=win,
        phase_name="target_source_tags",
    )
    target_buffer = ReplayBuffer(schedule.sleep_buffer_len)
    target_buffer.extend(part_a.targets)  # the observed target stream
    # Replay must see the same inputs the wake phase saw: rebuild the tag
    # slice with the frozen source tagger before swapping in the new one.
    replay_tagger = model.tagger
    replay_tagger.reset()
    replay_tags, _ = tags_used_for_inputs(replay_tagger, target_buffer.tokens(), TagStream())
    if tagger_config is None:
        tagger_config = TrainConfig(
            learning_rate=0.25, bptt_window=8, init_scale=config.init_scale,
            seed=(config.seed ^ TAGGER_SEED_SALT ^ 1) & 0xFFFFFFFFFFFFFFFF,
        )
    target_sleep = phase2_sleep(model, target_buffer, tagger_config, replay_tags=replay_tags)
    remaining = target_steps - brief
    parts = [part_a]
    if remaining > 0:
        part_b = phase3_post_sleep(
            model, target_env, schedule, config,
            tag_mode="learned", steps=remaining, tag_stream=stream, win=win,
            phase_name="target_new_tags",
        )
        parts.append(part_b)
    chunked_series = _combined_series(parts, win)

    # Size-matched plain baseline: same stacking, token input only.
    naive = build_naive_model(
        units, n_layers=2, seed=config.seed, init_scale=config.init_scale
    )
    source_env = Environment(source_config)
    source_tokens, source_positions, _ = source_env.generate(
        schedule.pre_sleep_steps + schedule.post_sleep_steps
    )
    from .naive import train_online  # local import to avoid a cycle at module load

    naive_source = train_online(
        naive, source_tokens, config, positions=source_positions, win=win
    )
    naive_env = Environment(target_config)
    naive_tokens, naive_positions, _ = naive_env.generate(target_steps)
    naive_target = train_online(
        naive, naive_tokens, config, positions=naive_positions, win=win
    )
    return TransferResult(
        chunked_source=source,
        chunked_target_series=chunked_series,
        chunked_target_parts=parts,
        naive_target_series=naive_target.error_series,
        naive_source_metrics=naive_source,
        target_sleep=target_sleep,
    )


def _protocol_worker(task: tuple) -> tuple[int, float, np.ndarray]:
    (env_config, units, schedule, base_config, tag_mode, tag_injection, win,
     run_seed) = task
    config = replace(base_config, seed=model_seed(run_seed))
    result = run_protocol(
        replace(env_config, seed=run_seed), units, schedule, config,
        tag_mode=tag_mode, tag_injection=tag_injection, win=win,
    )
    return run_seed, result.post_sleep.final_error, result.post_sleep.error_series


def protocol_sweep(
    env_config: EnvConfig,
    units: int,
    schedule: PhaseSchedule,
    config: TrainConfig,
    *,
    tag_mode: str,
    replicates: int,
    root_seed: int = 0,
    tag_injection: str = "input",
    win: int = DEFAULT_EVAL_WINDOW,
    jobs: int | None = None,
) -> list[tuple[int, float, np.ndarray]]:
    """Seed-replicated protocol runs; returns (seed, final error, series)."""
    tasks = [
        (env_config, units, schedule, config, tag_mode, tag_injection, win,
         derive_run_seed(root_seed, r))
        for r in range(replicates)
    ]
    if jobs is not None and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_protocol_worker, tasks))
    return [_protocol_worker(t) for t in tasks]


def _transfer_worker(task: tuple) -> tuple[int, float, float, np.ndarray, np.ndarray]:
    (source_config, target_config, units, schedule, base_config, target_steps,
     brief_steps, win, run_seed) = task
    config = replace(base_config, seed=model_seed(run_seed))
    result = transfer(
        replace(source_config, seed=run_seed),
        replace(target_config, seed=derive_run_seed(run_seed, 0x5EED)),
        units, schedule, config,
        target_steps=target_steps, brief_steps=brief_steps, win=win,
    )
    limit = min(50_000, target_steps)
    return (
        run_seed,
        auc_first_steps(result.chunked_target_series, limit, win),
        auc_first_steps(result.naive_target_series, limit, win),
        result.chunked_target_series,
        result.naive_target_series,
    )


def transfer_sweep(
    source_config: EnvConfig,
    target_config: EnvConfig,
    units: int,
    schedule: PhaseSchedule,
    config: TrainConfig,
    *,
    replicates: int,
    root_seed: int = 0,
    target_steps: int = 100_000,
    brief_steps: int = 20_000,
    win: int = DEFAULT_EVAL_WINDOW,
    jobs: int | None = None,
) -> list[tuple[int, float, float, np.ndarray, np.ndarray]]:
    """Seed-replicated transfer runs; rows are
    (seed, chunked AUC, naive AUC, chunked series, naive series)."""
    tasks = [
        (source_config, target_config, units, schedule, config, target_steps,
         brief_steps, win, derive_run_seed(root_seed, r))
        for r in range(replicates)
    ]
    if jobs is not None and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_transfer_worker, tasks))
    return [_transfer_worker(t) for t in tasks]
