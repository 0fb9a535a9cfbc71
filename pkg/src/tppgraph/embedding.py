"""Event embedding: a time encoding concatenated with a type embedding.

The time part is either a learned affine map of the timestamp or a
trigonometric positional code with a fixed per-pair frequency on the event
index and a learnable per-pair frequency on the timestamp:
``[sin(w1*i + w2*t); cos(w1*i + w2*t)]`` per pair.  The type part is a row
of a learned table; mark 0 (padding) maps to the structurally frozen zero
vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass
class EmbeddingConfig:
    num_types: int
    embed_dim: int
    time_mode: str = "trig"      # "trig" | "linear"

    def __post_init__(self):
        if self.num_types < 1:
            raise ValueError("num_types must be >= 1")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError("embed_dim must be an even integer >= 2")
        if self.time_mode not in ("trig", "linear"):
            raise ValueError(f"unknown time_mode {self.time_mode!r}")
        # equal split between time part and type part (configurable via subclassing)
        self.time_dim = self.embed_dim // 2
        self.type_dim = self.embed_dim - self.time_dim
        if self.time_mode == "trig" and self.time_dim % 2:
            raise ValueError("trig mode needs an even time sub-dimension (sin/cos pairs)")


class EventEmbedder:
    """Maps (t, position, mark) triples to embedding rows."""

    def __init__(self, cfg: EmbeddingConfig, rng: np.random.Generator):
        self.cfg = cfg
        scale = 1.0 / np.sqrt(cfg.type_dim)
        self.type_table = Tensor(rng.normal(0.0, scale, (cfg.num_types, cfg.type_dim)),
                                 requires_grad=True)
        if cfg.time_mode == "trig":
            pairs = cfg.time_dim // 2
            # fixed geometric ladder on the positional term, learnable time frequency
            self.pos_freq = np.power(10000.0, -np.arange(pairs) * 2.0 / cfg.time_dim)
            self.time_freq = Tensor(np.ones((1, pairs)), requires_grad=True)
            self._named = [("embed.type_table", self.type_table),
                           ("embed.time_freq", self.time_freq)]
        else:
            self.time_w = Tensor(rng.normal(0.0, 1.0, (1, cfg.time_dim)), requires_grad=True)
            self.time_b = Tensor(np.zeros((1, cfg.time_dim)), requires_grad=True)
            self._named = [("embed.type_table", self.type_table),
                           ("embed.time_w", self.time_w),
                           ("embed.time_b", self.time_b)]

    @property
    def out_dim(self) -> int:
        return self.cfg.embed_dim

    def named_params(self):
        return list(self._named)

    def params(self):
        return [t for _, t in self._named]

    def embed(self, times, positions, marks) -> Tensor:
        """Embed n events into an (n, embed_dim) tensor.

        ``times`` may be a plain array or an (n, 1) tensor leaf (the latter
        lets callers differentiate with respect to the timestamps).
        Positions are 0-based event indices; marks are 0..M with 0 meaning
        padding.
        """
        marks = np.asarray(marks, dtype=np.int64)
        if np.any(marks > self.cfg.num_types) or np.any(marks < 0):
            raise IndexError(f"mark outside 0..{self.cfg.num_types}")
        n = marks.shape[0]
        if isinstance(times, Tensor):
            t_col = times if times.value.ndim == 2 else dc.reshape(times, (n, 1))
        else:
            t_col = Tensor(np.asarray(times, dtype=np.float64).reshape(n, 1))

        if self.cfg.time_mode == "trig":
            pos = np.asarray(positions, dtype=np.float64).reshape(n, 1)
            phase_pos = Tensor(pos * self.pos_freq[None, :])       # (n, pairs), constant
            angle = dc.matmul(t_col, self.time_freq) + phase_pos   # (n, pairs)
            time_part = dc.concat([dc.sin(angle), dc.cos(angle)], axis=1)
        else:
            time_part = dc.matmul(t_col, self.time_w) + self.time_b

        onehot = np.zeros((n, self.cfg.num_types))
        real = marks >= 1
        onehot[np.flatnonzero(real), marks[real] - 1] = 1.0
        type_part = dc.matmul(Tensor(onehot), self.type_table)
        return dc.concat([time_part, type_part], axis=1)

    def embed_event(self, t: float, position: int, mark: int) -> Tensor:
        """Single-event convenience wrapper returning a (1, embed_dim) row."""
        return self.embed(np.array([t]), np.array([position]), np.array([mark]))
