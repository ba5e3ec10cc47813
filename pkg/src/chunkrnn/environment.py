"""Community-structured token environment.

Seven tokens: two communities {A,B,C} and {D,E,F} bridged by a hub token G.
From the hub the next token is a random community entry; the chosen community
is then traversed for exactly three tokens before control returns to the hub.
Traversal runs counterclockwise when the last two community visits match the
current community, clockwise otherwise, so while three of every four
transitions are deterministic, resolving them exactly requires a memory of
the last seven tokens.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TOKEN_SYMBOLS = "ABCDEFG"
N_TOKENS = 7
HUB = 6  # token G

HUB_COMMUNITY = 0
CLOCKWISE = 1
COUNTERCLOCKWISE = -1

FULL_ENTRIES = (0, 1, 2, 3, 4, 5)

_COMMUNITY_OF = (1, 1, 1, 2, 2, 2, HUB_COMMUNITY)


class InsufficientHistoryError(ValueError):
    """Token history too short to resolve the generator state."""


def token_index(symbol: str) -> int:
    idx = TOKEN_SYMBOLS.find(symbol.upper())
    if idx < 0:
        raise ValueError(f"unknown token symbol {symbol!r}")
    return idx


def token_symbol(index: int) -> str:
    return TOKEN_SYMBOLS[index]


def tokens_from_string(symbols: str) -> tuple[int, ...]:
    """'ABDE' -> (0, 1, 3, 4); separators and whitespace are ignored."""
    return tuple(token_index(s) for s in symbols if s.strip() and s not in ",;")


def community_of(token: int) -> int:
    """Community id: 1 for A/B/C, 2 for D/E/F, 0 for the hub."""
    return _COMMUNITY_OF[token]


def cycle_next(token: int, direction: int) -> int:
    """Successor of a community token along its 3-cycle.

    Clockwise order is A->B->C->A and D->E->F->D; counterclockwise is the
    reverse.
    """
    base = 0 if token < 3 else 3
    return base + (token - base + direction) % 3


def direction_rule(current: int, last: int | None, penultimate: int | None) -> int:
    """Traversal direction when entering community `current`.

    Counterclockwise only when both recorded visits were to the same
    community as the current one; clockwise otherwise, including when either
    history slot is still empty.
    """
    if current not in (1, 2):
        raise ValueError(f"current must be a community id (1 or 2), got {current}")
    if last == current and penultimate == current:
        return COUNTERCLOCKWISE
    return CLOCKWISE


@dataclass(frozen=True)
class EnvConfig:
    """Entry distribution and seed for one generator instance."""

    entry_tokens: tuple[int, ...] = FULL_ENTRIES
    entry_probs: tuple[float, ...] = (1.0 / 6,) * 6
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.entry_tokens) == 0:
            raise ValueError("entry_tokens must be non-empty")
        if len(set(self.entry_tokens)) != len(self.entry_tokens):
            raise ValueError("entry_tokens contains duplicates")
        if any(t < 0 or t >= HUB for t in self.entry_tokens):
            raise ValueError("entry tokens must be community tokens (A..F)")
        if len(self.entry_probs) != len(self.entry_tokens):
            raise ValueError("entry_probs must match entry_tokens in length")
        if any(p <= 0.0 for p in self.entry_probs):
            raise ValueError("entry probabilities must be strictly positive")
        if abs(sum(self.entry_probs) - 1.0) > 1e-12:
            raise ValueError("entry probabilities must sum to 1")


def full_environment(seed: int = 0) -> EnvConfig:
    """All six entries, uniform 1/6 each."""
    return EnvConfig(seed=seed)


def restricted_environment(symbols: str = "ABDE", seed: int = 0) -> EnvConfig:
    """Uniform distribution over a chosen entry subset, e.g. 'ABDE'."""
    entries = tokens_from_string(symbols)
    probs = (1.0 / len(entries),) * len(entries)
    return EnvConfig(entry_tokens=entries, entry_probs=probs, seed=seed)


@dataclass
class EnvState:
    """Generator state; a compressed equivalent of the last seven tokens.

    `position` is 0 at the hub and 1..3 inside a community visit; it always
    refers to the most recently emitted token.
    """

    position: int = 0
    current: int = HUB
    direction: int | None = None
    last_visit: int | None = None
    penultimate_visit: int | None = None
    rng: np.random.Generator | None = None


def initial_state(config: EnvConfig) -> EnvState:
    return EnvState(rng=np.random.default_rng(config.seed))


@lru_cache(maxsize=None)
def _entry_cdf(config: EnvConfig) -> np.ndarray:
    return np.cumsum(np.asarray(config.entry_probs, dtype=np.float64))


def _advance(state: EnvState, config: EnvConfig, cdf: np.ndarray) -> tuple[int, int]:
    """Mutate `state` by one transition; returns (token, position)."""
    if state.position == 0:
        # Inverse-CDF sampling; strictly positive probs rule out ties.
        u = state.rng.random()
        entry = config.entry_tokens[int(np.searchsorted(cdf, u, side="right"))]
        current_community = community_of(entry)
        state.direction = direction_rule(
            current_community, state.last_visit, state.penultimate_visit
        )
        state.penultimate_visit = state.last_visit
        state.last_visit = current_community
        state.position = 1
        state.current = entry
    elif state.position < 3:
        state.position += 1
        state.current = cycle_next(state.current, state.direction)
    else:
        state.position = 0
        state.current = HUB
        state.direction = None
    return state.current, state.position


def next_token(state: EnvState, config: EnvConfig) -> tuple[int, EnvState]:
    """Pure single-step transition: the caller's state is left untouched."""
    if state.rng is None:
        raise ValueError("state carries no RNG; build it with initial_state()")
    new_state = copy.deepcopy(state)
    token, _ = _advance(new_state, config, _entry_cdf(config))
    return token, new_state


class Environment:
    """Streaming generator that owns one EnvState and advances it in place."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.state = initial_state(config)
        self.steps_consumed = 0
        self._cdf = _entry_cdf(config)

    def step(self) -> tuple[int, int]:
        token, position = _advance(self.state, self.config, self._cdf)
        self.steps_consumed += 1
        return token, position

    def generate(self, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Emit n tokens; returns (tokens, positions, entry_mask) arrays."""
        if n < 1:
            raise ValueError("n must be >= 1")
        tokens = np.empty(n, dtype=np.int8)
        positions = np.empty(n, dtype=np.int8)
        for i in range(n):
            tokens[i], positions[i] = self.step()
        entry_mask = (positions == 1).astype(np.uint8)
        return tokens, positions, entry_mask


def generate(config: EnvConfig, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fresh deterministic sequence for (config, n); see Environment.generate."""
    return Environment(config).generate(n)


def decode_state(history: Sequence[int] | np.ndarray) -> EnvState:
    """Reconstruct the generator state (minus RNG) from the last 7 tokens.

    The hub token recurs every fourth step, which fixes the cycle alignment;
    seven tokens then pin down the current traversal direction and the two
    most recent community visits.
    """
    tokens = [int(t) for t in history]
    if len(tokens) < 7:
        raise InsufficientHistoryError(
            f"need at least 7 tokens to resolve the state, got {len(tokens)}"
        )
    h = tokens[-7:]
    if any(t < 0 or t >= N_TOKENS for t in h):
        raise ValueError("token index out of range")

    if h[6] == HUB:
        position = 0
    elif h[5] == HUB:
        position = 1
    elif h[4] == HUB:
        position = 2
    elif h[3] == HUB:
        position = 3
    else:
        raise ValueError("no hub token within the last four steps; invalid history")

    if position == 0:
        if h[2] != HUB:
            raise ValueError("hub tokens misaligned; invalid history")
        return EnvState(
            position=0,
            current=HUB,
            direction=None,
            last_visit=community_of(h[5]),
            penultimate_visit=community_of(h[1]),
        )
    if position == 1:
        current_community = community_of(h[6])
        direction = direction_rule(
            current_community, community_of(h[4]), community_of(h[0])
        )
        return EnvState(
            position=1,
            current=h[6],
            direction=direction,
            last_visit=current_community,
            penultimate_visit=community_of(h[4]),
        )
    if position == 2:
        entry, second = h[5], h[6]
        penultimate = community_of(h[3])
    else:
        entry, second = h[4], h[5]
        penultimate = community_of(h[2])
    if second == cycle_next(entry, CLOCKWISE):
        direction = CLOCKWISE
    elif second == cycle_next(entry, COUNTERCLOCKWISE):
        direction = COUNTERCLOCKWISE
    else:
        raise ValueError("tokens do not follow a community cycle; invalid history")
    return EnvState(
        position=position,
        current=h[6],
        direction=direction,
        last_visit=community_of(entry),
        penultimate_visit=penultimate,
    )


def oracle_distribution(
    state: EnvState | Sequence[int], config: EnvConfig
) -> np.ndarray:
    """Exact next-token distribution given the generator state or >=7 tokens."""
    if not isinstance(state, EnvState):
        state = decode_state(state)
    probs = np.zeros(N_TOKENS, dtype=np.float64)
    if state.position == 0:
        probs[list(config.entry_tokens)] = config.entry_probs
    elif state.position == 3:
        probs[HUB] = 1.0
    else:
        probs[cycle_next(state.current, state.direction)] = 1.0
    return probs


def oracle_predict(state: EnvState | Sequence[int], config: EnvConfig) -> int:
    """Most likely next token; ties broken toward the lowest token index."""
    return int(np.argmax(oracle_distribution(state, config)))


def theoretical_ceiling(config: EnvConfig) -> float:
    """Best achievable top-1 accuracy: (3 + max entry probability) / 4."""
    return (3.0 + max(config.entry_probs)) / 4.0


def measure_oracle_accuracy(config: EnvConfig, n: int) -> float:
    """Empirical top-1 accuracy of the exact oracle over n generated tokens."""
    env = Environment(config)
    hits = 0
    for _ in range(n):
        predicted = oracle_predict(env.state, config)
        token, _ = env.step()
        hits += int(predicted == token)
    return hits / n


def write_sequence(
    path: str | Path,
    tokens: Iterable[int],
    positions: Iterable[int] | None = None,
    entry_mask: Iterable[int] | None = None,
) -> None:
    """Dump a sequence: one symbol per line, or TSV rows
    `token<TAB>position<TAB>entry_mask` when the extra columns are given."""
    tokens = list(tokens)
    if positions is None:
        lines = [token_symbol(int(t)) for t in tokens]
    else:
        positions = list(positions)
        entry_mask = list(entry_mask) if entry_mask is not None else [
            1 if p == 1 else 0 for p in positions
        ]
        lines = [
            f"{token_symbol(int(t))}\t{int(p)}\t{int(m)}"
            for t, p, m in zip(tokens, positions, entry_mask)
        ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_sequence(path: str | Path) -> np.ndarray:
    """Parse either dump flavour back into a token index array."""
    tokens = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        tokens.append(token_index(line.split("\t")[0]))
    return np.asarray(tokens, dtype=np.int8)
