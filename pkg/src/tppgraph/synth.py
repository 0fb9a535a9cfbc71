"""Ground-truth point-process generators and their exact oracles.

Homogeneous Poisson, multivariate exponential-kernel mutually-exciting
processes (with a known causal graph), and the self-correcting process.
Each generator is paired with its closed-form compensator so sequences can
be validated by time rescaling, and the mutually-exciting generator also
exposes the exact log-likelihood of a sequence under its own parameters,
which serves as the fitting oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .events import EventSequence


class StabilityError(ValueError):
    """Raised when a generator specification is non-stationary."""


@dataclass
class HawkesSpec:
    """Parameters of a multivariate exponential-kernel self/mutually-exciting process.

    lambda_m'(t) = base[m'] + sum_{t_j < t} excite[m', m_j] * exp(-decay[m', m_j] (t - t_j))

    The causal graph has an edge m -> m' exactly where excite[m', m] > 0.
    """

    base: np.ndarray          # (M,) background rates > 0
    excite: np.ndarray        # (M, M) jump sizes >= 0, row = target, column = source
    decay: np.ndarray         # (M, M) decay rates > 0
    horizon: float

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=np.float64)
        self.excite = np.asarray(self.excite, dtype=np.float64)
        self.decay = np.asarray(self.decay, dtype=np.float64)
        if np.any(self.base <= 0) or np.any(self.excite < 0) or np.any(self.decay <= 0):
            raise ValueError("base > 0, excite >= 0, decay > 0 required")
        if self.branching_radius() >= 1.0:
            raise StabilityError(
                f"branching-matrix spectral radius {self.branching_radius():.3f} >= 1")

    @property
    def num_types(self) -> int:
        return len(self.base)

    def branching_radius(self) -> float:
        return float(np.abs(np.linalg.eigvals(self.excite / self.decay)).max())

    def true_graph(self) -> np.ndarray:
        return (self.excite > 0).astype(float)


def default_hawkes_spec(horizon: float = 40.0) -> HawkesSpec:
    """Two-type test process: self-excitation on both types plus a 1 -> 2 edge."""
    excite = np.array([[0.5, 0.0],
                       [0.8, 0.5]])
    return HawkesSpec(base=np.array([0.2, 0.2]),
                      excite=excite,
                      decay=np.ones((2, 2)),
                      horizon=horizon)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def gen_poisson(rate: float, horizon: float, rng: np.random.Generator,
                mark: int = 1) -> EventSequence | None:
    """Homogeneous Poisson stream on (0, horizon]; None when no event lands."""
    if rate <= 0 or horizon <= 0:
        raise ValueError("rate and horizon must be positive")
    times = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / rate)
        if t >= horizon:
            break
        times.append(t)
    if not times:
        return None
    return EventSequence(np.array(times), np.full(len(times), mark, dtype=np.int64))


def gen_hawkes(spec: HawkesSpec, rng: np.random.Generator) -> EventSequence | None:
    """Exact thinning with a piecewise-constant bound.

    Between events every intensity decays, so the total intensity right
    after the latest accepted or rejected candidate is a valid upper bound
    until the next candidate.
    """
    m_types = spec.num_types
    state = np.zeros((m_types, m_types))     # decaying excitation per (target, source)
    t = 0.0
    times: list[float] = []
    marks: list[int] = []
    while True:
        lam = spec.base + state.sum(axis=1)
        bound = float(lam.sum())
        if not np.isfinite(bound) or bound > 1e12:
            raise StabilityError(
                f"intensity bound overflow (branching radius {spec.branching_radius():.3f})")
        t_next = t + rng.exponential(1.0 / bound)
        if t_next >= spec.horizon:
            break
        state = state * np.exp(-spec.decay * (t_next - t))
        t = t_next
        lam_new = spec.base + state.sum(axis=1)
        total = float(lam_new.sum())
        if rng.uniform() * bound <= total:
            mark = int(rng.choice(m_types, p=lam_new / total)) + 1
            times.append(t)
            marks.append(mark)
            state[:, mark - 1] += spec.excite[:, mark - 1]
    if not times:
        return None
    return EventSequence(np.array(times), np.array(marks, dtype=np.int64))


def gen_selfcorrecting(mu: float, alpha: float, horizon: float,
                       rng: np.random.Generator, mark: int = 1) -> EventSequence | None:
    """Self-correcting process lambda(t) = exp(mu t - alpha N(t)) by thinning.

    The intensity increases deterministically between events, so candidates
    are proposed on short windows using the bound at the window's right end.
    """
    if mu <= 0 or alpha <= 0:
        raise ValueError("mu and alpha must be positive")
    times: list[float] = []
    t, n = 0.0, 0
    while t < horizon:
        window = min(1.0 / mu, horizon - t) if mu > 0 else horizon - t
        bound = np.exp(mu * (t + window) - alpha * n)
        t_next = t + rng.exponential(1.0 / bound)
        if t_next > t + window:
            t = t + window
            continue
        t = t_next
        if t >= horizon:
            break
        if rng.uniform() * bound <= np.exp(mu * t - alpha * n):
            times.append(t)
            n += 1
    if not times:
        return None
    return EventSequence(np.array(times), np.full(len(times), mark, dtype=np.int64))


def gen_dataset(generator, n_sequences: int, seed: int) -> list[EventSequence]:
    """Independent sequences with per-sequence seeds (parallel-safe)."""
    out = []
    i = 0
    attempt = 0
    while len(out) < n_sequences:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, attempt])))
        seq = generator(rng)
        attempt += 1
        if seq is not None:
            out.append(seq)
            i += 1
        if attempt > 100 * max(n_sequences, 1) + 1000:
            raise RuntimeError("generator keeps producing empty sequences")
    return out


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def hawkes_intensity(spec: HawkesSpec, seq: EventSequence, t: float) -> np.ndarray:
    """Exact lambda_m(t) for every target type, conditioning on events < t."""
    lam = spec.base.copy()
    before = seq.times < t
    for tj, mj in zip(seq.times[before], seq.marks[before]):
        lam += spec.excite[:, mj - 1] * np.exp(-spec.decay[:, mj - 1] * (t - tj))
    return lam


def hawkes_loglik(spec: HawkesSpec, seq: EventSequence, horizon: float | None = None) -> float:
    """Exact log-likelihood via the exponential-kernel recursion.

    sum_i ln lambda_{m_i}(t_i) - sum_m [ base_m T + sum_j excite[m, m_j]/decay[m, m_j]
    * (1 - exp(-decay[m, m_j] (T - t_j))) ].
    """
    T = seq.window_end if horizon is None else horizon
    m_types = spec.num_types
    state = np.zeros((m_types, m_types))
    t_prev = 0.0
    ll = 0.0
    for t_i, m_i in zip(seq.times, seq.marks):
        state *= np.exp(-spec.decay * (t_i - t_prev))
        lam_i = spec.base[m_i - 1] + state[m_i - 1].sum()
        ll += np.log(lam_i)
        state[:, m_i - 1] += spec.excite[:, m_i - 1]
        t_prev = t_i
    ll -= float(spec.base.sum()) * T
    decay_t = 1.0 - np.exp(-spec.decay[:, seq.marks - 1] * (T - seq.times))
    ll -= float((spec.excite[:, seq.marks - 1] / spec.decay[:, seq.marks - 1] * decay_t).sum())
    return float(ll)


def hawkes_compensator(spec: HawkesSpec, seq: EventSequence, m: int, t: float) -> float:
    """Integral of lambda_m over (0, t]."""
    before = seq.times < t
    val = spec.base[m - 1] * t
    src = seq.marks[before] - 1
    dt = t - seq.times[before]
    val += float((spec.excite[m - 1, src] / spec.decay[m - 1, src]
                  * (1.0 - np.exp(-spec.decay[m - 1, src] * dt))).sum())
    return float(val)


def poisson_rescaled(seq: EventSequence, rate: float) -> np.ndarray:
    """Unit-exponential residuals of a homogeneous Poisson sequence."""
    return rate * seq.intervals()


def hawkes_rescaled(spec: HawkesSpec, seq: EventSequence) -> np.ndarray:
    """Residuals of the merged process: total compensator increments."""
    comp = np.array([sum(hawkes_compensator(spec, seq, m, t) for m in range(1, spec.num_types + 1))
                     for t in seq.times])
    return np.diff(comp, prepend=0.0)


def selfcorrecting_rescaled(seq: EventSequence, mu: float, alpha: float) -> np.ndarray:
    """Residuals of the self-correcting process (closed-form compensator)."""
    res = []
    t_prev = 0.0
    for n, t_i in enumerate(seq.times):
        res.append(np.exp(-alpha * n) * (np.exp(mu * t_i) - np.exp(mu * t_prev)) / mu)
        t_prev = t_i
    return np.array(res)


def poisson_nll_oracle(seqs: list[EventSequence]) -> float:
    """Best per-event NLL any constant-rate model can reach: 1 - ln(N/T)."""
    n = sum(len(s) for s in seqs)
    t = sum(s.window_end for s in seqs)
    return 1.0 - float(np.log(n / t))
