"""Composed sequence models: embedding -> history encoder -> intensity head.

``PointProcessModel`` covers the overall-CIF and type-wise-CIF modes where
every type shares the same inter-type history encoding.  The latent-graph
variant lives in :mod:`tppgraph.granger`.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from . import intensity
from .diffcore import Tensor
from .embedding import EmbeddingConfig, EventEmbedder
from .encoders import EncoderConfig, make_encoder
from .events import EventSequence, PaddedBatch, pad_batch
from .intensity import FNNIntegralHead, MixtureHead


class TypeHead:
    """Affine map from history vectors to per-type logit scores."""

    def __init__(self, in_dim: int, num_types: int, rng: np.random.Generator):
        self.w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, num_types)),
                        requires_grad=True)
        self.b = Tensor(np.zeros((1, num_types)), requires_grad=True)
        self.num_types = num_types

    def logits(self, h: Tensor) -> Tensor:
        return dc.matmul(h, self.w) + self.b

    def named_params(self):
        return [("type_head.w", self.w), ("type_head.b", self.b)]

    def params(self):
        return [self.w, self.b]


def cross_entropy(logits: Tensor, marks: np.ndarray) -> Tensor:
    """Mean categorical cross-entropy of 1-based marks given logit rows."""
    n, m = logits.value.shape
    onehot = np.zeros((n, m), dtype=bool)
    onehot[np.arange(n), np.asarray(marks) - 1] = True
    lse = dc.logsumexp_rows(logits)
    true_logit = dc.mask_select(logits, onehot)
    return dc.tmean(dc.reshape(lse, (n,)) - true_logit)


class PointProcessModel:
    """Overall or type-wise conditional-intensity model with a type classifier."""

    def __init__(self, num_types: int, family: str, encoder_kind: str,
                 embed_dim: int = 16, hidden_dim: int | None = None,
                 num_layers: int = 1, num_heads: int = 1, top_k: int = 8,
                 K: int = 16, mode: str = "overall", time_mode: str = "trig",
                 t_ref: float = intensity.TIME_SCALE, fnn_hidden: int = 32,
                 seed: int = 0):
        if mode not in ("overall", "typewise"):
            raise ValueError(f"unknown mode {mode!r}")
        if family == "fnn_integral" and mode == "typewise":
            raise intensity.ConfigError("fnn_integral cannot model type-wise intensities")
        hidden_dim = hidden_dim or embed_dim
        rng = np.random.default_rng(seed)
        self.mode = mode
        self.family = family
        self.num_types = num_types
        self.config = {
            "kind": "plain", "num_types": num_types, "family": family,
            "encoder_kind": encoder_kind, "embed_dim": embed_dim,
            "hidden_dim": hidden_dim, "num_layers": num_layers,
            "num_heads": num_heads, "top_k": top_k, "K": K, "mode": mode,
            "time_mode": time_mode, "t_ref": t_ref, "fnn_hidden": fnn_hidden,
            "seed": seed,
        }
        self.embedder = EventEmbedder(EmbeddingConfig(num_types, embed_dim, time_mode), rng)
        self.encoder = make_encoder(
            EncoderConfig(encoder_kind, input_dim=embed_dim, hidden_dim=hidden_dim,
                          num_layers=num_layers, num_heads=num_heads, top_k=top_k), rng)
        if family == "fnn_integral":
            self.head = FNNIntegralHead(hidden_dim, hidden=fnn_hidden, rng=rng)
        else:
            self.head = MixtureHead(family, K, hidden_dim,
                                    num_types=(num_types if mode == "typewise" else 1),
                                    rng=rng, t_ref=t_ref)
        self.type_head = TypeHead(hidden_dim, num_types, rng)

    # -- parameters ---------------------------------------------------------

    def named_params(self):
        out = []
        for part in (self.embedder, self.encoder, self.head, self.type_head):
            out.extend(part.named_params())
        return out

    def params(self):
        return [t for _, t in self.named_params()]

    # -- forward pieces -----------------------------------------------------

    def _flatten_constants(self, batch: PaddedBatch):
        """Valid events in sequence-major order: tau, marks."""
        taus, marks = [], []
        iv = batch.intervals()
        for r in range(batch.batch_size):
            n_r = int(batch.valid_mask[r].sum())
            taus.append(iv[r, :n_r])
            marks.append(batch.marks[r, :n_r])
        return np.concatenate(taus), np.concatenate(marks)

    def encode_batch(self, batch: PaddedBatch) -> Tensor:
        """History encodings of every valid event, sequence-major."""
        b, n_max = batch.batch_size, batch.max_len
        positions = np.tile(np.arange(n_max), b)
        emb = self.embedder.embed(batch.times.reshape(-1), positions,
                                  batch.marks.reshape(-1))
        return self.encoder.encode_padded(emb, batch)

    def loss_batch(self, batch: PaddedBatch):
        """Joint loss (time NLL + type cross-entropy) over a padded batch."""
        tau, marks = self._flatten_constants(batch)
        h = self.encode_batch(batch)
        valid = np.ones(len(tau), dtype=bool)
        if self.mode == "overall":
            nll = intensity.nll_overall(self.head, h, tau, valid)
        else:
            nll = intensity.nll_typewise(self.head, h, tau, valid, marks)
        logits = self.type_head.logits(h)
        ce = cross_entropy(logits, marks)
        loss = nll + ce
        return loss, {"nll": float(nll.value), "ce": float(ce.value), "n_events": len(tau)}

    # -- trainer protocol ---------------------------------------------------

    def training_loss(self, seqs: list[EventSequence], rng=None, temperature=None):
        loss, stats = self.loss_batch(pad_batch(seqs))
        return loss, stats

    def evaluate_nll(self, seqs: list[EventSequence]) -> tuple[float, int]:
        """Total NLL over valid events and the event count (no gradients)."""
        total, count = 0.0, 0
        with dc.no_grad():
            for chunk in _chunks(seqs, 64):
                batch = pad_batch(chunk)
                tau, marks = self._flatten_constants(batch)
                h = self.encode_batch(batch)
                valid = np.ones(len(tau), dtype=bool)
                if self.mode == "overall":
                    nll = intensity.nll_overall(self.head, h, tau, valid)
                else:
                    nll = intensity.nll_typewise(self.head, h, tau, valid, marks)
                total += float(nll.value) * len(tau)
                count += len(tau)
        return total, count

    def predict(self, seqs: list[EventSequence]):
        """Per-event next-interval expectations and type logits (no gradients).

        Returns (tau_hat, logits, tau_true, marks), all aligned
        sequence-major over valid events.
        """
        with dc.no_grad():
            batch = pad_batch(seqs)
            tau, marks = self._flatten_constants(batch)
            h = self.encode_batch(batch)
            logits = self.type_head.logits(h).value
            if isinstance(self.head, FNNIntegralHead):
                tau_hat = self._predict_fnn(h)
            elif self.mode == "overall":
                rows = intensity.params_to_rows(self.head.forward(h))
                tau_hat = np.array([intensity.predict_next_time(self.family, r) for r in rows])
            else:
                per_type = [intensity.params_to_rows(self.head.forward_type(h, m))
                            for m in range(1, self.num_types + 1)]
                tau_hat = np.array([
                    intensity.predict_next_time_typewise(
                        self.family, [per_type[m][i] for m in range(self.num_types)])
                    for i in range(len(tau))])
        return tau_hat, logits, tau, marks

    def _predict_fnn(self, h: Tensor) -> np.ndarray:
        """E[tau] = integral of the survival exp(-Lambda) on a doubling grid."""
        out = np.empty(h.value.shape[0])
        for i, row in enumerate(h.value):
            h_row = Tensor(row.reshape(1, -1))
            hi = 1.0
            for _ in range(60):
                lam = float(self.head.chf(h_row, Tensor([[hi]])).value)
                if lam > -np.log(intensity.TAIL_MASS):
                    break
                hi *= 2.0
            grid = np.linspace(0.0, hi, 512)
            chf = self.head.chf(h_row, Tensor(grid.reshape(-1, 1))).value
            out[i] = np.trapezoid(np.exp(-chf[:, 0]), grid)
        return out


def _chunks(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def predicted_times(seqs: list[EventSequence], tau_hat: np.ndarray) -> np.ndarray:
    """Absolute next-time predictions t_hat_i = t_{i-1} + E[tau_i]."""
    prev = np.concatenate([np.concatenate([[0.0], s.times[:-1]]) for s in seqs])
    return prev + tau_hat
