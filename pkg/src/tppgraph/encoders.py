"""History encoders: map event embeddings to per-event history vectors.

Row ``i`` (0-based) of an encoder's output is the encoding of everything
strictly before event ``i``; row 0 therefore carries no event information
(the zero vector for recurrent kinds, a shared learned state for the
attention and spectral kinds).  All kinds guarantee exact causality: the
forward value of row ``i`` is bit-for-bit independent of events ``j >= i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .events import PaddedBatch

RECURRENT_KINDS = ("rnn", "lstm", "gru")
ENCODER_KINDS = RECURRENT_KINDS + ("attention", "fnet")

_NEG_INF = -1e9   # additive mask; exp underflows to exactly 0 after the row-max shift


@dataclass
class EncoderConfig:
    kind: str
    input_dim: int
    hidden_dim: int
    num_layers: int = 1
    num_heads: int = 1
    top_k: int = 8
    fnet_exclude_dc: bool = False

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if self.num_layers not in (1, 2, 3):
            raise ValueError("num_layers must be 1, 2 or 3")
        if self.kind == "fnet" and self.input_dim != self.hidden_dim:
            raise ValueError("fnet requires input_dim == hidden_dim")
        if self.kind == "attention" and self.num_heads > 1 and self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")


def _glorot(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out))


class HistoryEncoder:
    """Interface shared by all encoder kinds."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        self._named: list[tuple[str, Tensor]] = []

    @property
    def out_dim(self) -> int:
        return self.cfg.hidden_dim

    def named_params(self):
        return list(self._named)

    def params(self):
        return [t for _, t in self._named]

    def _register(self, name: str, value, requires_grad=True) -> Tensor:
        t = Tensor(value, requires_grad=requires_grad)
        self._named.append((f"{self.cfg.kind}.{name}", t))
        return t

    def encode_sequence(self, emb: Tensor) -> Tensor:
        """(N, input_dim) embeddings -> (N, hidden_dim) history encodings."""
        raise NotImplementedError

    def encode_inclusive(self, emb: Tensor) -> Tensor:
        """Like :meth:`encode_sequence`, but row i covers events 0..i inclusive."""
        raise NotImplementedError

    def encode_padded(self, emb_flat: Tensor, batch: PaddedBatch) -> Tensor:
        """Encode a padded batch given sequence-major flattened embeddings.

        ``emb_flat`` row ``b * N_max + t`` is the embedding of cell (b, t).
        Returns valid events only, sequence-major: all events of sequence 0,
        then of sequence 1, ...
        """
        raise NotImplementedError


# ---------------------------------------------------------------------------
# recurrent kinds
# ---------------------------------------------------------------------------

class RecurrentEncoder(HistoryEncoder):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__(cfg)
        d = cfg.hidden_dim
        n_gates = {"rnn": 1, "gru": 3, "lstm": 4}[cfg.kind]
        self.layers = []
        for layer in range(cfg.num_layers):
            d_in = cfg.input_dim if layer == 0 else d
            w = self._register(f"l{layer}.w", _glorot(rng, d_in, n_gates * d))
            u = self._register(f"l{layer}.u", _glorot(rng, d, n_gates * d))
            b = self._register(f"l{layer}.b", np.zeros((1, n_gates * d)))
            self.layers.append((w, u, b))

    def _cell(self, layer, x: Tensor, h: Tensor, c: Tensor | None):
        w, u, b = layer
        d = self.cfg.hidden_dim
        pre = dc.matmul(x, w) + dc.matmul(h, u) + b
        kind = self.cfg.kind
        if kind == "rnn":
            return dc.tanh(pre), None
        cols = lambda g: dc.gather(pre, np.arange(g * d, (g + 1) * d), axis=1)
        if kind == "gru":
            z = dc.sigmoid(cols(0))
            r = dc.sigmoid(cols(1))
            # candidate uses the reset-gated recurrent term only
            n = dc.tanh(dc.matmul(x, dc.gather(w, np.arange(2 * d, 3 * d), axis=1))
                        + r * dc.matmul(h, dc.gather(u, np.arange(2 * d, 3 * d), axis=1))
                        + dc.gather(b, np.arange(2 * d, 3 * d), axis=1))
            return (1.0 - z) * n + z * h, None
        # lstm
        i = dc.sigmoid(cols(0))
        f = dc.sigmoid(cols(1))
        o = dc.sigmoid(cols(2))
        g = dc.tanh(cols(3))
        c_new = f * c + i * g
        return o * dc.tanh(c_new), c_new

    def _run_steps(self, steps: list[Tensor]) -> list[Tensor]:
        """States after each event; caller shifts to history alignment."""
        b = steps[0].value.shape[0]
        d = self.cfg.hidden_dim
        seq = steps
        for layer in self.layers:
            h = Tensor(np.zeros((b, d)))
            c = Tensor(np.zeros((b, d))) if self.cfg.kind == "lstm" else None
            outs = []
            for x in seq:
                h, c = self._cell(layer, x, h, c)
                outs.append(h)
            seq = outs
        return seq

    def encode_sequence(self, emb: Tensor) -> Tensor:
        n = emb.value.shape[0]
        steps = [dc.gather(emb, [i]) for i in range(n)]
        states = self._run_steps(steps)
        rows = [Tensor(np.zeros((1, self.cfg.hidden_dim)))] + states[:-1]
        return dc.concat(rows, axis=0)

    def encode_inclusive(self, emb: Tensor) -> Tensor:
        n = emb.value.shape[0]
        steps = [dc.gather(emb, [i]) for i in range(n)]
        return dc.concat(self._run_steps(steps), axis=0)

    def encode_padded(self, emb_flat: Tensor, batch: PaddedBatch,
                      inclusive: bool = False) -> Tensor:
        b, n_max = batch.batch_size, batch.max_len
        steps = [dc.gather(emb_flat, np.arange(b) * n_max + t) for t in range(n_max)]
        states = self._run_steps(steps)
        if inclusive:
            tm = dc.concat(states, axis=0)
        else:
            # prepend the zero-history state, drop the last update
            tm = dc.concat([Tensor(np.zeros((b, self.cfg.hidden_dim)))] + states[:-1], axis=0)
        # tm row (t * b + r) holds the state for cell (r, t); pick valid cells
        rows = []
        for r in range(b):
            n_r = int(batch.valid_mask[r].sum())
            rows.append(np.arange(n_r) * b + r)
        return dc.gather(tm, np.concatenate(rows))


# ---------------------------------------------------------------------------
# attention kind
# ---------------------------------------------------------------------------

class AttentionEncoder(HistoryEncoder):
    """Causal self-attention over event embeddings.

    With one head, the output is the bare normalized attention combination
    of value projections (the weights form a convex combination over the
    history).  With several heads each block adds the transformer trimmings:
    head concat + output projection, feed-forward, residuals and layer norm.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__(cfg)
        d = cfg.hidden_dim
        self.multihead = cfg.num_heads > 1
        self.h0 = self._register("h0", rng.normal(0.0, 0.1, (1, d)))
        self.blocks = []
        if self.multihead:
            self.w_in = self._register("w_in", _glorot(rng, cfg.input_dim, d))
            d_h = d // cfg.num_heads
            for layer in range(cfg.num_layers):
                heads = []
                for h in range(cfg.num_heads):
                    heads.append((
                        self._register(f"l{layer}.h{h}.wq", _glorot(rng, d, d_h)),
                        self._register(f"l{layer}.h{h}.wk", _glorot(rng, d, d_h)),
                        self._register(f"l{layer}.h{h}.wv", _glorot(rng, d, d_h)),
                    ))
                block = {
                    "heads": heads,
                    "wo": self._register(f"l{layer}.wo", _glorot(rng, d, d)),
                    "bo": self._register(f"l{layer}.bo", np.zeros((1, d))),
                    "w1": self._register(f"l{layer}.ff1", _glorot(rng, d, 2 * d)),
                    "b1": self._register(f"l{layer}.ffb1", np.zeros((1, 2 * d))),
                    "w2": self._register(f"l{layer}.ff2", _glorot(rng, 2 * d, d)),
                    "b2": self._register(f"l{layer}.ffb2", np.zeros((1, d))),
                    "g1": self._register(f"l{layer}.ln1g", np.ones((1, d))),
                    "c1": self._register(f"l{layer}.ln1b", np.zeros((1, d))),
                    "g2": self._register(f"l{layer}.ln2g", np.ones((1, d))),
                    "c2": self._register(f"l{layer}.ln2b", np.zeros((1, d))),
                }
                self.blocks.append(block)
        else:
            for layer in range(cfg.num_layers):
                d_in = cfg.input_dim if layer == 0 else d
                self.blocks.append((
                    self._register(f"l{layer}.wq", _glorot(rng, d_in, d)),
                    self._register(f"l{layer}.wk", _glorot(rng, d_in, d)),
                    self._register(f"l{layer}.wv", _glorot(rng, d_in, d)),
                ))
        self.last_weights: np.ndarray | None = None   # debug hook, plain path only

    def _attend(self, x: Tensor, wq, wk, wv, mask_add: np.ndarray, record=False):
        q = dc.matmul(x, wq)
        k = dc.matmul(x, wk)
        v = dc.matmul(x, wv)
        scale = 1.0 / np.sqrt(q.value.shape[1])
        scores = dc.matmul(q, _transpose(k)) * scale
        weights = dc.softmax(scores + Tensor(mask_add), axis=1)
        if record:
            self.last_weights = weights.value.copy()
        return dc.matmul(weights, v)

    @staticmethod
    def _causal_mask(n: int) -> np.ndarray:
        # inclusive mask: position p may attend to positions j <= p
        return np.where(np.tril(np.ones((n, n), dtype=bool)), 0.0, _NEG_INF)

    def _layernorm(self, x: Tensor, g: Tensor, b: Tensor) -> Tensor:
        mu = dc.tmean(x, axis=1, keepdims=True)
        xc = x - mu
        var = dc.tmean(xc * xc, axis=1, keepdims=True)
        return xc / dc.power(var + 1e-5, 0.5) * g + b

    def encode_sequence(self, emb: Tensor) -> Tensor:
        n = emb.value.shape[0]
        mask_add = self._causal_mask(n)
        if self.multihead:
            x = dc.matmul(emb, self.w_in)
            for blk in self.blocks:
                outs = [self._attend(x, wq, wk, wv, mask_add) for wq, wk, wv in blk["heads"]]
                att = dc.matmul(dc.concat(outs, axis=1), blk["wo"]) + blk["bo"]
                x = self._layernorm(x + att, blk["g1"], blk["c1"])
                ff = dc.matmul(dc.tanh(dc.matmul(x, blk["w1"]) + blk["b1"]), blk["w2"]) + blk["b2"]
                x = self._layernorm(x + ff, blk["g2"], blk["c2"])
        else:
            x = emb
            for li, (wq, wk, wv) in enumerate(self.blocks):
                x = self._attend(x, wq, wk, wv, mask_add, record=(li == len(self.blocks) - 1))
        if n == 1:
            return self.h0
        return dc.concat([self.h0, dc.gather(x, np.arange(n - 1))], axis=0)

    def encode_inclusive(self, emb: Tensor) -> Tensor:
        n = emb.value.shape[0]
        mask_add = self._causal_mask(n)
        if self.multihead:
            x = dc.matmul(emb, self.w_in)
            for blk in self.blocks:
                outs = [self._attend(x, wq, wk, wv, mask_add) for wq, wk, wv in blk["heads"]]
                att = dc.matmul(dc.concat(outs, axis=1), blk["wo"]) + blk["bo"]
                x = self._layernorm(x + att, blk["g1"], blk["c1"])
                ff = dc.matmul(dc.tanh(dc.matmul(x, blk["w1"]) + blk["b1"]), blk["w2"]) + blk["b2"]
                x = self._layernorm(x + ff, blk["g2"], blk["c2"])
        else:
            x = emb
            for wq, wk, wv in self.blocks:
                x = self._attend(x, wq, wk, wv, mask_add)
        return x

    def encode_padded(self, emb_flat: Tensor, batch: PaddedBatch,
                      inclusive: bool = False) -> Tensor:
        outs = []
        n_max = batch.max_len
        run = self.encode_inclusive if inclusive else self.encode_sequence
        for r in range(batch.batch_size):
            n_r = int(batch.valid_mask[r].sum())
            rows = dc.gather(emb_flat, r * n_max + np.arange(n_r))
            outs.append(run(rows))
        return dc.concat(outs, axis=0)


def _transpose(t: Tensor) -> Tensor:
    """2-d transpose built on reshape/gather semantics."""
    n, m = t.value.shape
    flat = dc.reshape(t, (n * m,))
    idx = (np.arange(n * m).reshape(n, m).T).reshape(-1)
    return dc.reshape(dc.gather(flat, idx), (m, n))


# ---------------------------------------------------------------------------
# spectral kind
# ---------------------------------------------------------------------------

class FNetEncoder(HistoryEncoder):
    """Spectral history encoder.

    Each embedding vector is mapped to its magnitude spectrum, then for
    every event the causal prefix of spectra is transformed again along the
    sequence axis.  The ``top_k`` sequence-frequency rows with the largest
    magnitude are selected (spectrum zero-padded when the prefix is shorter
    than ``top_k``) and summed into the history vector.  Selection indices
    are treated as constants; gradients flow through the selected
    magnitudes only.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__(cfg)
        self.h0 = self._register("h0", rng.normal(0.0, 0.1, (1, cfg.hidden_dim)))

    def select_indices(self, spectrum: np.ndarray, prefix_len: int) -> np.ndarray:
        """Rank sequence frequencies by row magnitude, descending."""
        scores = np.sqrt((spectrum * spectrum).sum(axis=1))
        candidates = np.arange(prefix_len)
        if self.cfg.fnet_exclude_dc and prefix_len >= 2:
            candidates = candidates[1:]
        order = candidates[np.argsort(-scores[candidates], kind="stable")]
        return order[: min(self.cfg.top_k, len(order))]

    def _spectral_row(self, stage1: Tensor, prefix_len: int) -> Tensor:
        prefix = dc.gather(stage1, np.arange(prefix_len))
        spectrum = dc.dft_magnitude(prefix, axis=0)
        sel = self.select_indices(spectrum.value, prefix_len)
        return dc.tsum(dc.gather(spectrum, sel), axis=0, keepdims=True)

    def encode_sequence(self, emb: Tensor) -> Tensor:
        n = emb.value.shape[0]
        stage1 = dc.dft_magnitude(emb, axis=1)
        rows = [self.h0] + [self._spectral_row(stage1, i) for i in range(1, n)]
        return dc.concat(rows, axis=0)

    def encode_inclusive(self, emb: Tensor) -> Tensor:
        n = emb.value.shape[0]
        stage1 = dc.dft_magnitude(emb, axis=1)
        return dc.concat([self._spectral_row(stage1, i) for i in range(1, n + 1)], axis=0)

    def encode_padded(self, emb_flat: Tensor, batch: PaddedBatch,
                      inclusive: bool = False) -> Tensor:
        outs = []
        n_max = batch.max_len
        run = self.encode_inclusive if inclusive else self.encode_sequence
        for r in range(batch.batch_size):
            n_r = int(batch.valid_mask[r].sum())
            rows = dc.gather(emb_flat, r * n_max + np.arange(n_r))
            outs.append(run(rows))
        return dc.concat(outs, axis=0)


def make_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> HistoryEncoder:
    if cfg.kind in RECURRENT_KINDS:
        return RecurrentEncoder(cfg, rng)
    if cfg.kind == "attention":
        return AttentionEncoder(cfg, rng)
    return FNetEncoder(cfg, rng)
