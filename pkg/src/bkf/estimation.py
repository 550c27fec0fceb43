"""Bayesian reduced-form regression of updated expectations.

Model (no intercept)::

    updated = b_prior * prior + b_mic * s_mic + b_mac * s_mac
              + b_int * s_mic * s_mac + eps,      eps ~ N(0, sigma^2)

with priors ``b ~ N(0, scale * I)`` and ``sigma^2 ~ InvGamma(shape, rate)``.
Both full conditionals are conjugate, so the sampler is a two-block Gibbs
alternation.  Signals enter as levels (baseline + shock).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .design import PersonaKind, TrialRecord

COEF_NAMES = ("beta_prior", "beta_mic", "beta_mac", "beta_int")


class EstimationError(RuntimeError):
    pass


class RankDeficient(EstimationError):
    pass


class NumericalFailure(EstimationError):
    def __init__(self, message: str, chain: int | None = None, iteration: int | None = None):
        self.chain = chain
        self.iteration = iteration
        where = f" (chain {chain}, iteration {iteration})" if iteration is not None else ""
        super().__init__(message + where)


class TooFewDraws(ValueError):
    pass


# -- design ------------------------------------------------------------------


@dataclass(frozen=True)
class DesignMatrix:
    X: np.ndarray
    y: np.ndarray
    rank: int
    names: tuple[str, ...] = COEF_NAMES
    selection: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.X.shape[0]


def design_rows(prior, s_mic, s_mac) -> np.ndarray:
    prior, s_mic, s_mac = (np.asarray(v, dtype=float) for v in (prior, s_mic, s_mac))
    return np.column_stack([prior, s_mic, s_mac, s_mic * s_mac])


def build_design(
    records: Iterable[TrialRecord],
    persona: str | PersonaKind | None = None,
    model: str | None = None,
    scenarios: Sequence[str] | None = None,
) -> DesignMatrix:
    """Stack the selected records into the regression design.

    Raises :class:`RankDeficient` when the selection cannot identify all four
    coefficients (for instance when it covers a single scenario).
    """
    kind = None
    if persona is not None:
        kind = persona if isinstance(persona, PersonaKind) else PersonaKind.parse(persona)
    selected = [
        r
        for r in records
        if (kind is None or r.persona == kind.value)
        and (model is None or r.model_id == model)
        and (scenarios is None or r.scenario_id in scenarios)
    ]
    selection = {
        "persona": None if kind is None else kind.value,
        "model": model,
        "scenarios": None if scenarios is None else list(scenarios),
    }
    if not selected:
        raise EstimationError(f"no records match selection {selection}")
    X = design_rows(
        [r.prior for r in selected],
        [r.signal_mic_level for r in selected],
        [r.signal_mac_level for r in selected],
    )
    y = np.array([r.updated_expectation for r in selected], dtype=float)
    rank = int(np.linalg.matrix_rank(X))
    if rank < X.shape[1]:
        raise RankDeficient(
            f"design has rank {rank} < {X.shape[1]} for selection {selection}; "
            "all four scenarios are needed to identify the coefficients"
        )
    return DesignMatrix(X=X, y=y, rank=rank, selection=selection)


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class PriorSpec:
    beta_prior_cov_scale: float = 100.0
    sigma2_shape: float = 2.0
    sigma2_rate: float = 1.0

    def __post_init__(self) -> None:
        for name in ("beta_prior_cov_scale", "sigma2_shape", "sigma2_rate"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be a positive finite number, got {value}")


@dataclass(frozen=True)
class McmcConfig:
    chains: int = 4
    iterations: int = 5000
    burn_in: int = 1000
    thin: int = 1
    seed: int = 0
    chain_seeds: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.chains < 2:
            raise ValueError(f"chains must be >= 2, got {self.chains}")
        if self.thin < 1:
            raise ValueError(f"thin must be >= 1, got {self.thin}")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError(
                f"need 0 <= burn_in < iterations, got burn_in={self.burn_in}, "
                f"iterations={self.iterations}"
            )
        if self.chain_seeds is not None and len(self.chain_seeds) != self.chains:
            raise ValueError("chain_seeds must have one entry per chain")

    def chain_rng(self, chain: int) -> np.random.Generator:
        if self.chain_seeds is not None:
            return np.random.default_rng(self.chain_seeds[chain])
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(chain,)))

    @property
    def retained_per_chain(self) -> int:
        return len(range(self.burn_in, self.iterations, self.thin))


# -- summaries ---------------------------------------------------------------


def hdi(draws, mass: float = 0.95) -> tuple[float, float]:
    """Shortest interval over the sorted draws that contains ``ceil(mass * n)`` of them."""
    if not 0 < mass < 1:
        raise ValueError(f"mass must lie in (0, 1), got {mass}")
    x = np.sort(np.asarray(draws, dtype=float).ravel())
    n = x.size
    if n < 100:
        raise TooFewDraws(f"need at least 100 draws for an HDI, got {n}")
    k = min(n, math.ceil(mass * n - 1e-9))
    widths = x[k - 1 :] - x[: n - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


def split_rhat(chains) -> float:
    """Split potential scale reduction factor for one scalar parameter.

    ``chains`` has shape ``(n_chains, n_draws)``.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < 2:
        raise ValueError("split_rhat needs an array of shape (n_chains >= 2, n_draws)")
    half = chains.shape[1] // 2
    if half < 2:
        raise ValueError("chains are too short to split")
    halves = np.concatenate([chains[:, :half], chains[:, -half:]], axis=0)
    n = halves.shape[1]
    within = halves.var(axis=1, ddof=1).mean()
    between_over_n = halves.mean(axis=1).var(ddof=1)
    if within == 0:
        return 1.0 if between_over_n == 0 else math.inf
    var_plus = (n - 1) / n * within + between_over_n
    return float(math.sqrt(var_plus / within))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.size
    centered = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(centered, size)
    return np.fft.irfft(spec * np.conj(spec), size)[:n] / n


def ess(chains) -> float:
    """Effective sample size with Geyer's initial positive sequence truncation.

    Accepts a single chain (1-D) or an array ``(n_chains, n_draws)``; the
    combined autocorrelation uses the multi-chain variance estimate.
    """
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    m, n = chains.shape
    if n < 4:
        raise ValueError("chains are too short for an ESS estimate")
    acov = np.array([_autocov(c) for c in chains])
    chain_var = acov[:, 0] * n / (n - 1)
    mean_var = chain_var.mean()
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += chains.mean(axis=1).var(ddof=1)
    if var_plus == 0:
        return float(m * n)
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    tau = -1.0
    prev = math.inf
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair < 0:
            break
        pair = min(pair, prev)  # initial monotone sequence
        tau += 2.0 * pair
        prev = pair
    return float(m * n / max(tau, 1.0 / math.log10(max(m * n, 10))))


def diagnostics(chain_draws: np.ndarray, names: Sequence[str] = COEF_NAMES) -> dict:
    """Split R-hat and ESS per parameter for draws shaped ``(chains, draws, params)``."""
    chain_draws = np.asarray(chain_draws, dtype=float)
    if chain_draws.ndim == 2:
        chain_draws = chain_draws[:, :, None]
    m, n, _ = chain_draws.shape
    if m < 2 or n < 100:
        raise TooFewDraws(f"diagnostics need >= 2 chains of >= 100 draws, got {m} x {n}")
    return {
        "r_hat": {name: split_rhat(chain_draws[:, :, j]) for j, name in enumerate(names)},
        "ess": {name: ess(chain_draws[:, :, j]) for j, name in enumerate(names)},
    }


@dataclass(frozen=True)
class CoefficientSummary:
    name: str
    mean: float
    sd: float
    hdi_low: float
    hdi_high: float

    @classmethod
    def from_draws(cls, name: str, draws, mass: float = 0.95) -> "CoefficientSummary":
        draws = np.asarray(draws, dtype=float)
        lo, hi = hdi(draws, mass)
        return cls(name, float(draws.mean()), float(draws.std(ddof=1)), lo, hi)

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "mean": self.mean,
            "sd": self.sd,
            "hdi_low": self.hdi_low,
            "hdi_high": self.hdi_high,
        }


RHAT_WARNING = 1.05


@dataclass
class PosteriorSummary:
    coefficients: list[CoefficientSummary]
    sigma: CoefficientSummary
    r_hat: dict[str, float]
    ess: dict[str, float]
    chain_draws: np.ndarray  # (chains, draws, 4)
    sigma2_draws: np.ndarray  # (chains, draws)
    config_echo: dict = field(default_factory=dict)

    @property
    def draws(self) -> np.ndarray:
        """Pooled coefficient draws, shape ``(chains * draws, 4)``."""
        return self.chain_draws.reshape(-1, self.chain_draws.shape[-1])

    @property
    def max_r_hat(self) -> float:
        return max(self.r_hat.values())

    @property
    def converged(self) -> bool:
        return self.max_r_hat <= RHAT_WARNING

    def coef(self, name: str) -> CoefficientSummary:
        for c in self.coefficients:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def means(self) -> np.ndarray:
        return np.array([c.mean for c in self.coefficients])

    @property
    def sds(self) -> np.ndarray:
        return np.array([c.sd for c in self.coefficients])

    def to_json(self, verdict: "RationalityVerdict | None" = None) -> dict:
        return {
            "coefficients": [
                {**c.as_dict(), "r_hat": self.r_hat[c.name], "ess": self.ess[c.name]}
                for c in self.coefficients
            ],
            "sigma": self.sigma.as_dict(),
            "diagnostics": {
                "r_hat": self.r_hat,
                "ess": self.ess,
                "max_r_hat": self.max_r_hat,
                "converged": self.converged,
                "r_hat_warning_threshold": RHAT_WARNING,
            },
            "verdict": None if verdict is None else verdict.as_dict(),
            "config_echo": self.config_echo,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PosteriorSummary":
        """Rebuild a summary (without draws) from :meth:`to_json` output."""
        fields = ("name", "mean", "sd", "hdi_low", "hdi_high")
        coefs = [CoefficientSummary(**{k: c[k] for k in fields}) for c in doc["coefficients"]]
        return cls(
            coefficients=coefs,
            sigma=CoefficientSummary(**{k: doc["sigma"][k] for k in fields}),
            r_hat=dict(doc["diagnostics"]["r_hat"]),
            ess=dict(doc["diagnostics"]["ess"]),
            chain_draws=np.empty((0, 0, len(coefs))),
            sigma2_draws=np.empty((0, 0)),
            config_echo=dict(doc.get("config_echo") or {}),
        )

    def draws_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([c.name for c in self.coefficients] + ["sigma"])
        sigma = np.sqrt(self.sigma2_draws.ravel())
        for row, s in zip(self.draws, sigma):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(s))])
        return buf.getvalue()


# -- sampler -----------------------------------------------------------------


def _run_chain(
    X: np.ndarray,
    y: np.ndarray,
    prior: PriorSpec,
    mcmc: McmcConfig,
    rng: np.random.Generator,
    chain: int,
) -> tuple[np.ndarray, np.ndarray]:
    n, p = X.shape
    XtX = X.T @ X
    Xty = X.T @ y
    # isotropic prior precision, so one eigendecomposition of X'X diagonalises
    # every conditional precision  X'X / s2 + I / scale
    evals, Q = np.linalg.eigh(XtX)
    evals = np.clip(evals, 0.0, None)
    Qt_Xty = Q.T @ Xty
    prior_prec = 1.0 / prior.beta_prior_cov_scale
    shape = prior.sigma2_shape + n / 2.0

    keep = mcmc.retained_per_chain
    betas = np.empty((keep, p))
    sigma2s = np.empty(keep)
    beta = rng.normal(0.0, 1.0, size=p)
    sigma2 = 1.0
    j = 0
    for it in range(mcmc.iterations):
        prec = evals / sigma2 + prior_prec
        if not np.all(np.isfinite(prec)) or np.any(prec <= 0):
            raise NumericalFailure("conditional precision of beta is not positive definite",
                                   chain=chain, iteration=it)
        mean = Q @ (Qt_Xty / sigma2 / prec)
        beta = mean + Q @ (rng.standard_normal(p) / np.sqrt(prec))
        resid = y - X @ beta
        rate = prior.sigma2_rate + 0.5 * float(resid @ resid)
        sigma2 = rate / rng.gamma(shape)
        if not (math.isfinite(sigma2) and sigma2 > 0):
            raise NumericalFailure(f"invalid sigma^2 draw {sigma2!r}", chain=chain, iteration=it)
        if it >= mcmc.burn_in and (it - mcmc.burn_in) % mcmc.thin == 0:
            betas[j] = beta
            sigma2s[j] = sigma2
            j += 1
    return betas, sigma2s


def gibbs_fit(
    design: DesignMatrix,
    prior: PriorSpec | None = None,
    mcmc: McmcConfig | None = None,
    *,
    standardize: bool = False,
    mass: float = 0.95,
) -> PosteriorSummary:
    """Sample the posterior with independent chains and summarise the pooled draws.

    With ``standardize=True`` columns are divided by their root mean square
    before sampling (the prior then applies to the rescaled coefficients) and
    draws are mapped back to the raw regressor units before summarising.
    """
    prior = prior or PriorSpec()
    mcmc = mcmc or McmcConfig()
    X, y = design.X, design.y
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficient("design is rank deficient")
    scales = np.sqrt((X**2).mean(axis=0)) if standardize else np.ones(X.shape[1])
    Xs = X / scales

    chain_betas, chain_sigma2 = [], []
    for c in range(mcmc.chains):
        b, s2 = _run_chain(Xs, y, prior, mcmc, mcmc.chain_rng(c), c)
        chain_betas.append(b / scales)
        chain_sigma2.append(s2)
    chain_draws = np.stack(chain_betas)
    sigma2_draws = np.stack(chain_sigma2)
    pooled = chain_draws.reshape(-1, chain_draws.shape[-1])

    names = design.names
    coefs = [CoefficientSummary.from_draws(nm, pooled[:, j], mass) for j, nm in enumerate(names)]
    sigma = CoefficientSummary.from_draws("sigma", np.sqrt(sigma2_draws.ravel()), mass)
    all_draws = np.concatenate([chain_draws, np.sqrt(sigma2_draws)[:, :, None]], axis=2)
    diag = diagnostics(all_draws, list(names) + ["sigma"])
    return PosteriorSummary(
        coefficients=coefs,
        sigma=sigma,
        r_hat=diag["r_hat"],
        ess=diag["ess"],
        chain_draws=chain_draws,
        sigma2_draws=sigma2_draws,
        config_echo={
            "n": design.n,
            "selection": design.selection,
            "prior": {
                "beta_prior_cov_scale": prior.beta_prior_cov_scale,
                "sigma2_shape": prior.sigma2_shape,
                "sigma2_rate": prior.sigma2_rate,
            },
            "mcmc": {
                "chains": mcmc.chains,
                "iterations": mcmc.iterations,
                "burn_in": mcmc.burn_in,
                "thin": mcmc.thin,
                "seed": mcmc.seed,
            },
            "standardize": standardize,
            "hdi_mass": mass,
        },
    )


# -- rationality -------------------------------------------------------------


@dataclass(frozen=True)
class RationalityVerdict:
    sum_mean: float
    sum_hdi: tuple[float, float]
    contains_one: bool
    int_mean: float
    int_hdi: tuple[float, float]
    contains_zero: bool

    @property
    def rational(self) -> bool:
        return self.contains_one and self.contains_zero

    def as_dict(self) -> dict:
        return {
            "sum_of_weights": {
                "mean": self.sum_mean,
                "hdi": list(self.sum_hdi),
                "contains_one": self.contains_one,
            },
            "interaction": {
                "mean": self.int_mean,
                "hdi": list(self.int_hdi),
                "contains_zero": self.contains_zero,
            },
            "rational": self.rational,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RationalityVerdict":
        s, i = data["sum_of_weights"], data["interaction"]
        return cls(
            s["mean"], tuple(s["hdi"]), bool(s["contains_one"]),
            i["mean"], tuple(i["hdi"]), bool(i["contains_zero"]),
        )


def rationality_test(draws, mass: float = 0.95) -> RationalityVerdict:
    """Check weights-sum-to-one and zero interaction against posterior HDIs.

    ``draws`` is a :class:`PosteriorSummary` or an array ``(n, 4)`` in
    coefficient order.  The sum is taken draw by draw before the HDI.
    """
    if isinstance(draws, PosteriorSummary):
        draws = draws.draws
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2 or draws.shape[1] != 4:
        raise ValueError("draws must have shape (n, 4)")
    total = draws[:, :3].sum(axis=1)
    s_lo, s_hi = hdi(total, mass)
    i_lo, i_hi = hdi(draws[:, 3], mass)
    return RationalityVerdict(
        sum_mean=float(total.mean()),
        sum_hdi=(s_lo, s_hi),
        contains_one=s_lo <= 1.0 <= s_hi,
        int_mean=float(draws[:, 3].mean()),
        int_hdi=(i_lo, i_hi),
        contains_zero=i_lo <= 0.0 <= i_hi,
    )
