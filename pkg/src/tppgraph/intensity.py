"""Conditional intensity and density families over inter-event intervals.

Six mixture families with closed-form likelihoods (log-normal, Gompertz,
exponential-decay, Weibull, log-Cauchy, Gaussian) plus a monotone neural
cumulative-hazard head.  Two parallel surfaces are provided:

* graph functions on :class:`~tppgraph.diffcore.Tensor` parameters, used by
  the likelihoods (``mixture_log_pdf`` / ``mixture_log_survival`` and the
  ``nll_*`` assemblies), and
* plain-numpy "row" functions (``log_pdf`` / ``cdf`` / ``cif`` / ``chf`` /
  ``predict_next_time`` / ``sample_next``) on single parameter bundles,
  used for evaluation, prediction and sampling.

The hazard and cumulative hazard are constructed through the survival
identities lambda = f/(1-F) and Lambda = -ln(1-F); for the families whose
hazard also has a direct closed form the two routes agree to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import DomainError, Tensor
from .events import TIME_SCALE

MIXTURE_KINDS = ("lognorm", "gompertz", "expdecay", "weibull", "logcauchy", "gaussian")
FAMILY_KINDS = MIXTURE_KINDS + ("fnn_integral",)
POSITIVE_SUPPORT = ("lognorm", "gompertz", "expdecay", "weibull", "logcauchy")

# parameter groups per family, mixture weights first
GROUPS = {
    "lognorm": ("w", "mu", "sigma"),
    "gompertz": ("w", "eta", "beta"),
    "expdecay": ("w", "eta", "beta", "alpha"),
    "weibull": ("w", "eta", "beta"),
    "logcauchy": ("w", "mu", "sigma"),
    "gaussian": ("w", "mu", "sigma"),
}

BETA_CLAMP = (1e-7, 1e7)          # Gompertz / exp-decay rate bounds
GOMPERTZ_EXP_CAP = 50.0           # exp(beta * t_ref) stays below this
SURVIVAL_FLOOR = 1e-12
LOGCAUCHY_TRUNC_Q = 0.99          # horizon for the (otherwise undefined) mean
TAIL_MASS = 1e-4                  # expectation integrates to the 1-TAIL_MASS quantile
TRAPEZOID_POINTS = 10_000

_LOG_2PI = math.log(2.0 * math.pi)


class ConfigError(ValueError):
    """Raised for invalid family / mode combinations."""


class TrainingInstabilityError(RuntimeError):
    """Raised when a likelihood evaluates to a non-finite value."""

    def __init__(self, message, params=None):
        super().__init__(message)
        self.params = params


@dataclass
class Diagnostics:
    survival_floor_hits: int = 0

    def reset(self):
        self.survival_floor_hits = 0


DIAGNOSTICS = Diagnostics()


# ---------------------------------------------------------------------------
# parameter heads
# ---------------------------------------------------------------------------

class MixtureHead:
    """Affine map from a history vector to valid mixture parameters.

    One weight matrix produces all ``len(groups) * K`` fields per type
    (types stacked for the type-wise mode); a softmax normalizes the
    weights and an exp map makes scale/rate fields positive.  The Gompertz
    and exp-decay rates are additionally clamped for stability, with the
    Gompertz upper bound chosen so exp(beta * t_ref) stays under
    ``GOMPERTZ_EXP_CAP``.
    """

    def __init__(self, kind: str, K: int, in_dim: int, num_types: int = 1,
                 rng: np.random.Generator | None = None, t_ref: float = TIME_SCALE):
        if kind not in MIXTURE_KINDS:
            raise ConfigError(f"unknown mixture kind {kind!r}")
        if K < 1:
            raise ConfigError("K must be >= 1")
        self.kind = kind
        self.K = K
        self.num_types = num_types
        self.groups = GROUPS[kind]
        self.t_ref = t_ref
        rng = rng or np.random.default_rng(0)
        width = len(self.groups) * K * num_types
        self.w = Tensor(rng.normal(0.0, 0.3 / np.sqrt(in_dim), (in_dim, width)),
                        requires_grad=True)
        b0 = rng.normal(0.0, 0.3, (1, width))
        self.b = Tensor(b0, requires_grad=True)

    def named_params(self):
        return [(f"head.{self.kind}.w", self.w), (f"head.{self.kind}.b", self.b)]

    def params(self):
        return [self.w, self.b]

    @property
    def beta_hi(self) -> float:
        return min(BETA_CLAMP[1], math.log(GOMPERTZ_EXP_CAP) / self.t_ref)

    def _transform(self, raw: Tensor) -> dict[str, Tensor]:
        k = self.K
        out: dict[str, Tensor] = {}
        for g, name in enumerate(self.groups):
            block = dc.gather(raw, np.arange(g * k, (g + 1) * k), axis=1)
            if name == "w":
                shift = Tensor(block.value.max(axis=1, keepdims=True))
                z = block - shift
                out["log_w"] = z - dc.logsumexp_rows(z)
                out["w"] = dc.exp(out["log_w"])
            elif name in ("sigma", "eta", "alpha"):
                out[name] = dc.exp(block)
            elif name == "beta":
                hi = self.beta_hi if self.kind == "gompertz" else BETA_CLAMP[1]
                out[name] = dc.clamp(dc.exp(block), BETA_CLAMP[0], hi)
            else:  # mu, unconstrained
                out[name] = block
        return out

    def forward(self, h: Tensor) -> dict[str, Tensor]:
        """Overall-mode parameters from (N, D) history vectors."""
        if self.num_types != 1:
            raise ConfigError("forward() is overall-mode; use forward_type()")
        return self._transform(dc.matmul(h, self.w) + self.b)

    def forward_type(self, h: Tensor, m: int) -> dict[str, Tensor]:
        """Parameters of type ``m`` (1-based) from that type's history vectors."""
        if not 1 <= m <= self.num_types:
            raise ConfigError(f"type {m} outside 1..{self.num_types}")
        k = self.K
        width = len(self.groups) * k
        cols = np.arange((m - 1) * width, m * width)
        w_m = dc.gather(self.w, cols, axis=1)
        b_m = dc.gather(self.b, cols, axis=1)
        return self._transform(dc.matmul(h, w_m) + b_m)


class FNNIntegralHead:
    """Monotone neural cumulative hazard over [t_{i-1}, t).

    Three tanh layers on [tau; h] with elementwise non-negative weights
    (softplus of free parameters) plus a strictly positive linear term
    b_t * tau, which forces the hazard above b_t and the cumulative hazard
    to infinity.  Valid in overall-CIF mode only.
    """

    kind = "fnn_integral"
    num_types = 1

    def __init__(self, in_dim: int, hidden: int = 32,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.in_dim = in_dim
        self.hidden = hidden

        def free(shape, scale):
            # softplus(raw) starts near |N(0,scale)| without huge magnitudes
            return Tensor(rng.normal(-1.0, scale, shape), requires_grad=True)

        self.w1_t = free((1, hidden), 0.5)
        self.w1_h = free((in_dim, hidden), 0.5)
        self.b1 = Tensor(np.zeros((1, hidden)), requires_grad=True)
        self.w2 = free((hidden, hidden), 0.5)
        self.b2 = Tensor(np.zeros((1, hidden)), requires_grad=True)
        self.w3 = free((hidden, 1), 0.5)
        self.b3 = Tensor(np.zeros((1, 1)), requires_grad=True)
        self.bt = Tensor(np.array(-1.0), requires_grad=True)
        self._named = [("fnn.w1_t", self.w1_t), ("fnn.w1_h", self.w1_h),
                       ("fnn.b1", self.b1), ("fnn.w2", self.w2), ("fnn.b2", self.b2),
                       ("fnn.w3", self.w3), ("fnn.b3", self.b3), ("fnn.bt", self.bt)]

    def named_params(self):
        return list(self._named)

    def params(self):
        return [t for _, t in self._named]

    def _stages(self, h: Tensor, tau_col: Tensor):
        w1t = dc.softplus(self.w1_t)
        w1h = dc.softplus(self.w1_h)
        w2 = dc.softplus(self.w2)
        w3 = dc.softplus(self.w3)
        bt = dc.softplus(self.bt)
        u1 = dc.matmul(tau_col, w1t) + dc.matmul(h, w1h) + self.b1
        a1 = dc.tanh(u1)
        u2 = dc.matmul(a1, w2) + self.b2
        a2 = dc.tanh(u2)
        u3 = dc.matmul(a2, w3) + self.b3
        return w1t, w2, w3, bt, a1, a2, u3

    def chf_raw(self, h: Tensor, tau_col: Tensor) -> Tensor:
        """The network cumulative hazard (no offset subtraction)."""
        *_, bt, _, _, u3 = self._stages(h, tau_col)
        return dc.softplus(u3) + tau_col * bt

    def chf(self, h: Tensor, tau_col: Tensor) -> Tensor:
        """Proper cumulative hazard with Lambda(0) = 0."""
        zero = Tensor(np.zeros_like(tau_col.value))
        return self.chf_raw(h, tau_col) - self.chf_raw(h, zero)

    def intensity(self, h: Tensor, tau_col: Tensor) -> Tensor:
        """d Lambda / d tau, written out so it stays reverse-differentiable."""
        w1t, w2, w3, bt, a1, a2, u3 = self._stages(h, tau_col)
        v1 = (1.0 - a1 * a1) * w1t                       # (N, H) row-broadcast
        v2 = dc.matmul(v1, w2) * (1.0 - a2 * a2)
        du3 = dc.matmul(v2, w3)
        return dc.sigmoid(u3) * du3 + bt

    def log_pdf(self, h: Tensor, tau_col: Tensor) -> Tensor:
        return dc.log(self.intensity(h, tau_col)) - self.chf(h, tau_col)


# ---------------------------------------------------------------------------
# graph-side mixture math on (N, K) tensors
# ---------------------------------------------------------------------------

def _component_log_pdf(kind: str, p: dict[str, Tensor], tau: Tensor) -> Tensor:
    if kind == "lognorm":
        lt = dc.log(tau)
        z = (lt - p["mu"]) / p["sigma"]
        return dc.negate(lt) - dc.log(p["sigma"]) - 0.5 * _LOG_2PI - 0.5 * z * z
    if kind == "gompertz":
        return dc.log(p["eta"]) + p["beta"] * tau + _component_log_survival(kind, p, tau)
    if kind == "expdecay":
        lam = dc.clamp(p["eta"] * dc.exp(dc.negate(p["beta"]) * tau) + p["alpha"],
                       SURVIVAL_FLOOR, np.inf)
        return dc.log(lam) + _component_log_survival(kind, p, tau)
    if kind == "weibull":
        log_et = dc.log(p["eta"]) + dc.log(tau)
        return (dc.log(p["eta"]) + dc.log(p["beta"]) + (p["beta"] - 1.0) * log_et
                - dc.exp(p["beta"] * log_et))
    if kind == "logcauchy":
        lt = dc.log(tau)
        d2 = (lt - p["mu"]) * (lt - p["mu"])
        return (dc.negate(lt) - math.log(math.pi) + dc.log(p["sigma"])
                - dc.log(d2 + p["sigma"] * p["sigma"]))
    if kind == "gaussian":
        z = (tau - p["mu"]) / p["sigma"]
        return dc.negate(dc.log(p["sigma"])) - 0.5 * _LOG_2PI - 0.5 * z * z
    raise ConfigError(f"unknown kind {kind!r}")


def _component_log_survival(kind: str, p: dict[str, Tensor], tau: Tensor) -> Tensor:
    """log(1 - F_k); only the families where it is closed in log space."""
    if kind == "gompertz":
        return dc.negate(p["eta"] / p["beta"] * (dc.exp(p["beta"] * tau) - 1.0))
    if kind == "expdecay":
        return dc.negate(p["eta"] / p["beta"] * (1.0 - dc.exp(dc.negate(p["beta"]) * tau))
                         + p["alpha"] * tau)
    if kind == "weibull":
        return dc.negate(dc.exp(p["beta"] * (dc.log(p["eta"]) + dc.log(tau))))
    raise ConfigError(f"no closed log-survival for {kind!r}")


def _component_survival(kind: str, p: dict[str, Tensor], tau: Tensor) -> Tensor:
    if kind == "lognorm":
        z = (dc.log(tau) - p["mu"]) / (p["sigma"] * math.sqrt(2.0))
        return 0.5 * (1.0 - dc.erf(z))
    if kind == "logcauchy":
        z = (dc.log(tau) - p["mu"]) / p["sigma"]
        return 0.5 - dc.arctan(z) * (1.0 / math.pi)
    if kind == "gaussian":
        z = (tau - p["mu"]) / (p["sigma"] * math.sqrt(2.0))
        return 0.5 * (1.0 - dc.erf(z))
    return dc.exp(_component_log_survival(kind, p, tau))


def mixture_log_pdf(kind: str, params: dict[str, Tensor], tau_col: Tensor) -> Tensor:
    """(N, 1) log density of the mixture at per-row intervals (tau > 0)."""
    comp = _component_log_pdf(kind, params, tau_col)
    return dc.logsumexp_rows(params["log_w"] + comp)


def mixture_log_survival(kind: str, params: dict[str, Tensor], tau_col: Tensor) -> Tensor:
    """(N, 1) log(1 - F) of the mixture; floored at SURVIVAL_FLOOR."""
    if kind in ("gompertz", "expdecay", "weibull"):
        return dc.logsumexp_rows(params["log_w"] + _component_log_survival(kind, params, tau_col))
    surv = dc.tsum(params["w"] * _component_survival(kind, params, tau_col),
                   axis=1, keepdims=True)
    hits = int((surv.value < SURVIVAL_FLOOR).sum())
    if hits:
        DIAGNOSTICS.survival_floor_hits += hits
    return dc.log(dc.clamp(surv, SURVIVAL_FLOOR, 1.0))


def mixture_log_cif(kind: str, params: dict[str, Tensor], tau_col: Tensor) -> Tensor:
    """log lambda = log f - log(1 - F)."""
    return mixture_log_pdf(kind, params, tau_col) - mixture_log_survival(kind, params, tau_col)


def mixture_chf(kind: str, params: dict[str, Tensor], tau_col: Tensor) -> Tensor:
    """Lambda = -log(1 - F)."""
    return dc.negate(mixture_log_survival(kind, params, tau_col))


# ---------------------------------------------------------------------------
# likelihood assemblies
# ---------------------------------------------------------------------------

def _safe_tau(tau: np.ndarray, valid: np.ndarray, kind: str) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if kind in POSITIVE_SUPPORT or kind == "fnn_integral":
        if np.any(valid & (tau <= 0.0)):
            raise DomainError("non-positive interval at a valid event")
        return np.where(valid, tau, 1.0)
    return np.where(valid, tau, 0.0 * tau + 1.0)


def _check_finite(t: Tensor, what: str, params=None):
    if not np.all(np.isfinite(t.value)):
        raise TrainingInstabilityError(f"non-finite {what}", params=params)


def nll_overall(head, h: Tensor, tau: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean negative log-likelihood per valid event, overall-CIF mode."""
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid events")
    kind = head.kind
    tau_col = Tensor(_safe_tau(tau, valid, kind).reshape(-1, 1))
    if isinstance(head, FNNIntegralHead):
        logf = head.log_pdf(h, tau_col)
    else:
        logf = mixture_log_pdf(kind, head.forward(h), tau_col)
    _check_finite(logf, "log density", params=head)
    picked = dc.mask_select(logf, valid.reshape(-1, 1))
    return dc.negate(dc.tsum(picked) / n)


def nll_typewise(head: MixtureHead, hs, tau: np.ndarray, valid: np.ndarray,
                 marks: np.ndarray) -> Tensor:
    """Mean NLL per event under per-type intensities.

    First term: log intensity of the realized type at each event, picked
    with a one-hot mask after evaluating all types.  Second term: the
    cumulative hazard of every type over every inter-event interval (all
    intensities update at every event, whatever its type).

    ``hs`` is a single (N, D) tensor shared by all types or a list with one
    per-type (N, D) tensor.
    """
    if isinstance(head, FNNIntegralHead):
        raise ConfigError("fnn_integral cannot be used in type-wise mode")
    valid = np.asarray(valid, dtype=bool)
    marks = np.asarray(marks)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid events")
    tau_col = Tensor(_safe_tau(tau, valid, head.kind).reshape(-1, 1))
    shared = not isinstance(hs, (list, tuple))
    valid_col = valid.reshape(-1, 1)

    total = None
    for m in range(1, head.num_types + 1):
        h_m = hs if shared else hs[m - 1]
        params = head.forward_type(h_m, m)
        log_surv = mixture_log_survival(head.kind, params, tau_col)
        log_lam = mixture_log_pdf(head.kind, params, tau_col) - log_surv
        _check_finite(log_lam, f"log intensity of type {m}", params=head)
        onehot = ((marks == m) & valid).reshape(-1, 1).astype(float)
        picked = dc.tsum(log_lam * Tensor(onehot))
        hazard = dc.tsum(dc.negate(log_surv) * Tensor(valid_col.astype(float)))
        contrib = picked - hazard
        total = contrib if total is None else total + contrib
    return dc.negate(total / n)


# ---------------------------------------------------------------------------
# numpy row math: evaluation, prediction, sampling
# ---------------------------------------------------------------------------

def random_params(kind: str, K: int, rng: np.random.Generator,
                  t_ref: float = TIME_SCALE) -> dict[str, np.ndarray]:
    """A random valid parameter bundle (proper density for every family)."""
    w = rng.dirichlet(np.ones(K))
    row = {"w": w}
    if kind == "lognorm":
        row["mu"] = rng.normal(0.0, 1.0, K)
        row["sigma"] = rng.uniform(0.2, 1.5, K)
    elif kind == "logcauchy":
        # scale capped so the 1-1e-4 quantile stays float64-representable
        # (the tail needs exp(mu + sigma*tan(pi*(1/2 - 1e-4))))
        row["mu"] = rng.normal(0.0, 1.0, K)
        row["sigma"] = rng.uniform(0.05, 0.2, K)
    elif kind == "gaussian":
        # keep essentially all mass above zero so the density is proper on (0, inf)
        row["mu"] = rng.uniform(3.0, 6.0, K)
        row["sigma"] = rng.uniform(0.2, 0.6, K)
    elif kind == "gompertz":
        row["eta"] = rng.uniform(0.2, 2.0, K)
        hi = min(BETA_CLAMP[1], math.log(GOMPERTZ_EXP_CAP) / t_ref)
        row["beta"] = rng.uniform(0.3 * hi, hi, K)
    elif kind == "weibull":
        row["eta"] = rng.uniform(0.2, 2.0, K)
        row["beta"] = rng.uniform(0.5, 3.0, K)
    elif kind == "expdecay":
        row["eta"] = rng.uniform(0.2, 2.0, K)
        row["beta"] = rng.uniform(0.2, 2.0, K)
        row["alpha"] = rng.uniform(0.05, 1.0, K)
    else:
        raise ConfigError(f"unknown kind {kind!r}")
    return row


def _row_component_log_pdf(kind: str, row: dict, tau: np.ndarray) -> np.ndarray:
    t = tau[..., None]
    if kind == "lognorm":
        with np.errstate(divide="ignore"):
            lt = np.log(t)
        z = (lt - row["mu"]) / row["sigma"]
        return -lt - np.log(row["sigma"]) - 0.5 * _LOG_2PI - 0.5 * z * z
    if kind == "gompertz":
        eta, beta = row["eta"], row["beta"]
        return np.log(eta) + beta * t - eta / beta * (np.exp(beta * t) - 1.0)
    if kind == "expdecay":
        eta, beta, alpha = row["eta"], row["beta"], row["alpha"]
        lam = np.maximum(eta * np.exp(-beta * t) + alpha, SURVIVAL_FLOOR)
        return np.log(lam) - (eta / beta * (1.0 - np.exp(-beta * t)) + alpha * t)
    if kind == "weibull":
        eta, beta = row["eta"], row["beta"]
        with np.errstate(divide="ignore"):
            let = np.log(eta * t)
        return np.log(eta) + np.log(beta) + (beta - 1.0) * let - np.exp(beta * let)
    if kind == "logcauchy":
        mu, sigma = row["mu"], row["sigma"]
        with np.errstate(divide="ignore"):
            lt = np.log(t)
        return -lt - math.log(math.pi) + np.log(sigma) - np.log((lt - mu) ** 2 + sigma ** 2)
    if kind == "gaussian":
        z = (t - row["mu"]) / row["sigma"]
        return -np.log(row["sigma"]) - 0.5 * _LOG_2PI - 0.5 * z * z
    raise ConfigError(f"unknown kind {kind!r}")


def _row_component_cdf(kind: str, row: dict, tau: np.ndarray) -> np.ndarray:
    t = tau[..., None]
    if kind == "lognorm":
        out = np.zeros(np.broadcast_shapes(t.shape, row["mu"].shape))
        pos = np.broadcast_to(t > 0, out.shape)
        z = (np.log(np.where(t > 0, t, 1.0)) - row["mu"]) / (row["sigma"] * math.sqrt(2.0))
        out[pos] = (0.5 * (1.0 + _erf_np(z)))[pos]
        return out
    if kind == "gompertz":
        eta, beta = row["eta"], row["beta"]
        return 1.0 - np.exp(-eta / beta * (np.exp(beta * t) - 1.0))
    if kind == "expdecay":
        eta, beta, alpha = row["eta"], row["beta"], row["alpha"]
        return 1.0 - np.exp(-(eta / beta * (1.0 - np.exp(-beta * t)) + alpha * t))
    if kind == "weibull":
        return 1.0 - np.exp(-np.power(np.maximum(row["eta"] * t, 0.0), row["beta"]))
    if kind == "logcauchy":
        out = np.zeros(np.broadcast_shapes(t.shape, row["mu"].shape))
        pos = np.broadcast_to(t > 0, out.shape)
        z = (np.log(np.where(t > 0, t, 1.0)) - row["mu"]) / row["sigma"]
        out[pos] = (0.5 + np.arctan(z) / math.pi)[pos]
        return out
    if kind == "gaussian":
        z = (t - row["mu"]) / (row["sigma"] * math.sqrt(2.0))
        return 0.5 * (1.0 + _erf_np(z))
    raise ConfigError(f"unknown kind {kind!r}")


def _erf_np(x):
    from .diffcore import _erf_values
    return _erf_values(np.asarray(x, dtype=np.float64))


def log_pdf(kind: str, row: dict, tau) -> np.ndarray | float:
    """Log mixture density at tau (> 0 for positive-support families)."""
    tau_arr = np.asarray(tau, dtype=np.float64)
    if kind in POSITIVE_SUPPORT and np.any(tau_arr <= 0):
        raise DomainError(f"{kind} density requires tau > 0")
    comp = _row_component_log_pdf(kind, row, tau_arr)
    top = comp.max(axis=-1, keepdims=True)
    out = np.log((row["w"] * np.exp(comp - top)).sum(axis=-1)) + top[..., 0]
    return out if out.ndim else float(out)


def cdf(kind: str, row: dict, tau) -> np.ndarray | float:
    """Mixture CDF at tau >= 0 (Gaussian also accepts negative tau)."""
    tau_arr = np.asarray(tau, dtype=np.float64)
    if kind in POSITIVE_SUPPORT and np.any(tau_arr < 0):
        raise DomainError("cdf requires tau >= 0")
    out = (row["w"] * _row_component_cdf(kind, row, tau_arr)).sum(axis=-1)
    return out if out.ndim else float(out)


def cif(kind: str, row: dict, tau) -> np.ndarray | float:
    """Hazard via f / (1 - F), with the survival floored at SURVIVAL_FLOOR."""
    f = np.exp(log_pdf(kind, row, tau))
    surv = 1.0 - np.asarray(cdf(kind, row, tau))
    hits = int((surv < SURVIVAL_FLOOR).sum())
    if hits:
        DIAGNOSTICS.survival_floor_hits += hits
    out = f / np.maximum(surv, SURVIVAL_FLOOR)
    return out if out.ndim else float(out)


def chf(kind: str, row: dict, tau) -> np.ndarray | float:
    """Cumulative hazard -ln(1 - F), floored like :func:`cif`."""
    surv = 1.0 - np.asarray(cdf(kind, row, tau))
    hits = int((surv < SURVIVAL_FLOOR).sum())
    if hits:
        DIAGNOSTICS.survival_floor_hits += hits
    out = -np.log(np.maximum(surv, SURVIVAL_FLOOR))
    return out if out.ndim else float(out)


def closed_form_cif(kind: str, row: dict, tau) -> np.ndarray | float:
    """Direct hazard assembly from per-component closed forms.

    lambda_mix = sum_k w_k lambda_k S_k / sum_k w_k S_k with the component
    hazards written out explicitly (Weibull / Gompertz / exp-decay only).
    """
    tau_arr = np.asarray(tau, dtype=np.float64)
    t = tau_arr[..., None]
    if kind == "weibull":
        lam_k = row["eta"] * row["beta"] * np.power(row["eta"] * t, row["beta"] - 1.0)
    elif kind == "gompertz":
        lam_k = row["eta"] * np.exp(row["beta"] * t)
    elif kind == "expdecay":
        lam_k = row["eta"] * np.exp(-row["beta"] * t) + row["alpha"]
    else:
        raise ConfigError(f"no closed-form hazard for {kind!r}")
    surv_k = 1.0 - _row_component_cdf(kind, row, tau_arr)
    num = (row["w"] * lam_k * surv_k).sum(axis=-1)
    den = (row["w"] * surv_k).sum(axis=-1)
    out = num / den
    return out if out.ndim else float(out)


def quantile(kind: str, row: dict, q: float, hi0: float = 1.0,
             hi_cap: float = 1e300) -> float:
    """CDF inverse by doubling + bisection (capped at the float ceiling)."""
    hi = hi0
    while cdf(kind, row, hi) < q:
        if hi >= hi_cap:
            import warnings
            warnings.warn(f"quantile search exhausted at q={q}; returning partial bound")
            return hi
        hi = min(hi * 2.0, hi_cap)
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if cdf(kind, row, mid) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def predict_next_time(kind: str, row: dict) -> float:
    """Expected inter-event interval.

    Closed forms where they exist; otherwise a trapezoid of tau*f(tau) on a
    TRAPEZOID_POINTS grid up to the (1 - TAIL_MASS) quantile.  The
    log-Cauchy mean does not exist, so its expectation is truncated at the
    LOGCAUCHY_TRUNC_Q quantile.
    """
    w = row["w"]
    if kind == "lognorm":
        return float((w * np.exp(row["mu"] + 0.5 * row["sigma"] ** 2)).sum())
    if kind == "weibull":
        return float((w * np.array([math.gamma(1.0 + 1.0 / b) for b in row["beta"]])
                      / row["eta"]).sum())
    if kind == "gaussian":
        return float((w * row["mu"]).sum())
    q = LOGCAUCHY_TRUNC_Q if kind == "logcauchy" else 1.0 - TAIL_MASS
    hi = quantile(kind, row, q)
    grid = np.linspace(0.0, hi, TRAPEZOID_POINTS)
    f = np.zeros_like(grid)
    f[1:] = np.exp(_row_mix_log_pdf(kind, row, grid[1:]))
    return float(np.trapezoid(grid * f, grid))


def _row_mix_log_pdf(kind, row, tau):
    comp = _row_component_log_pdf(kind, row, np.asarray(tau, dtype=np.float64))
    top = comp.max(axis=-1, keepdims=True)
    return np.log((row["w"] * np.exp(comp - top)).sum(axis=-1)) + top[..., 0]


def sample_next(kind: str, row: dict, rng: np.random.Generator) -> float:
    """One draw from the mixture (component, then conditional)."""
    k = int(rng.choice(len(row["w"]), p=row["w"] / row["w"].sum()))
    u = float(rng.uniform())
    if kind == "lognorm":
        return float(np.exp(rng.normal(row["mu"][k], row["sigma"][k])))
    if kind == "gompertz":
        eta, beta = row["eta"][k], row["beta"][k]
        return float(np.log1p(-beta / eta * np.log1p(-u)) / beta)
    if kind == "weibull":
        return float(np.power(-np.log1p(-u), 1.0 / row["beta"][k]) / row["eta"][k])
    if kind == "logcauchy":
        return float(np.exp(row["mu"][k] + row["sigma"][k] * math.tan(math.pi * (u - 0.5))))
    if kind == "gaussian":
        # positive support enforced by rejection; biases the density toward
        # its positive part (the family itself allows tau <= 0)
        for _ in range(10_000):
            x = rng.normal(row["mu"][k], row["sigma"][k])
            if x > 0:
                return float(x)
        raise RuntimeError("gaussian rejection sampling failed to find tau > 0")
    if kind == "expdecay":
        if row["alpha"][k] < 0:
            raise DomainError("exp-decay sampling requires alpha >= 0 for a valid hazard")
        sub = {key: np.array([row[key][k]]) for key in row}
        sub["w"] = np.array([1.0])
        return quantile(kind, sub, u)
    raise ConfigError(f"unknown kind {kind!r}")


def predict_next_time_typewise(kind: str, rows: list[dict], grid_points: int = 4096) -> float:
    """Expected time to the next event of any type.

    Under independent per-type hazards the merged survival is the product
    of the type survivals; E[tau] = integral of that product.
    """
    his = [quantile(kind, row, 1.0 - TAIL_MASS) for row in rows]
    hi = max(his)
    grid = np.linspace(0.0, hi, grid_points)
    surv = np.ones_like(grid)
    for row in rows:
        surv *= 1.0 - np.asarray(cdf(kind, row, grid))
    return float(np.trapezoid(surv, grid))


def params_to_rows(params: dict[str, Tensor]) -> list[dict[str, np.ndarray]]:
    """Split (N, K) tensor parameters into per-event numpy rows."""
    keys = [k for k in params if k != "log_w"]
    n = params["w"].value.shape[0]
    return [{k: params[k].value[i].copy() for k in keys} for i in range(n)]
