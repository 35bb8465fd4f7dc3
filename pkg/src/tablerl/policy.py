"""Tabular softmax policy over a small vocabulary.

One logit row per state; a token's logprob is log softmax(row / T). This
is the smallest policy surface on which the clipped-objective math is
exactly differentiable and therefore falsifiable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class TabularPolicy:
    params: np.ndarray  # (n_states, vocab) logits
    temperature: float = 1.0

    def __post_init__(self) -> None:
        params = np.asarray(self.params, dtype=np.float64)
        if params.ndim != 2:
            raise ValueError("policy params must be a 2-D (n_states, vocab) array")
        if not np.all(np.isfinite(params)):
            raise ValueError("policy logits must be finite")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        object.__setattr__(self, "params", params)

    @classmethod
    def uniform(cls, n_states: int, vocab: int, temperature: float = 1.0) -> "TabularPolicy":
        return cls(np.zeros((n_states, vocab), dtype=np.float64), temperature)

    @property
    def n_states(self) -> int:
        return self.params.shape[0]

    @property
    def vocab(self) -> int:
        return self.params.shape[1]

    def log_probs_row(self, state: int, temperature: Optional[float] = None) -> np.ndarray:
        t = self.temperature if temperature is None else temperature
        x = self.params[state] / t
        x = x - np.max(x)
        return x - np.log(np.sum(np.exp(x)))

    def probs_row(self, state: int, temperature: Optional[float] = None) -> np.ndarray:
        return np.exp(self.log_probs_row(state, temperature))

    def logprob(self, state: int, token: int) -> float:
        return float(self.log_probs_row(state)[token])

    def sequence_logprobs(self, states: Sequence[int], tokens: Sequence[int]) -> list[float]:
        if len(states) != len(tokens):
            raise ValueError("states and tokens must have equal length")
        return [float(self.log_probs_row(s)[v]) for s, v in zip(states, tokens)]

    def sample(self, state: int, rng: np.random.Generator, temperature: Optional[float] = None) -> int:
        return int(rng.choice(self.vocab, p=self.probs_row(state, temperature)))

    def replace_params(self, params: np.ndarray) -> "TabularPolicy":
        return TabularPolicy(params, self.temperature)

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.params.copy(), self.temperature)

    def equals(self, other: "TabularPolicy") -> bool:
        return (
            self.temperature == other.temperature
            and self.params.shape == other.params.shape
            and bool(np.array_equal(self.params, other.params))
        )

    def to_dict(self) -> dict:
        return {"params": self.params.tolist(), "temperature": self.temperature}

    @classmethod
    def from_dict(cls, d: dict) -> "TabularPolicy":
        return cls(np.asarray(d["params"], dtype=np.float64), float(d["temperature"]))
