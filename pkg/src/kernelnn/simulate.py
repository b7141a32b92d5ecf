"""Scenario generators and a seeded Monte Carlo harness comparing the
kernel neural network against the linear mixed model baseline.

Every generator is a pure function of its inputs and a seed.  The
harness derives the iteration-i stream as ``default_rng(master_seed + i)``
and draws genotypes, then the response, from that single stream, so runs
are reproducible and iterations can execute in parallel in any order.

Scenarios
---------
linear / sine / invlogit / quadratic
    y = 1 + 2*zeta + f(a) + eps with a drawn from the product-kernel
    covariance of fresh genotypes; fits use covariates Z = [1, zeta].
interaction
    y = sum of pairwise Hadamard products of 10 causal SNP columns plus
    noise; fits adjust the mean through an intercept-only Z.
dominant / recessive
    y = a + eps with a drawn from the product kernel of the recoded
    matrix; fits use the additive kernels (inheritance misspecified by
    design) and no covariates.
t2 / chisq1
    The linear scenario with heavy-tailed t(2) or centered chi-square(1)
    errors.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import pandas as pd

from . import knn, lmm
from .genotype import GenotypeMatrix, recode
from .kernels import KernelMatrix, OutputKernelSpec, polynomial_input_kernel, product_kernel

logger = logging.getLogger(__name__)

NONLINEAR_SCENARIOS = ("linear", "sine", "invlogit", "quadratic")
CODING_SCENARIOS = ("dominant", "recessive")
ERROR_SCENARIOS = ("t2", "chisq1")
VALID_SCENARIOS = NONLINEAR_SCENARIOS + ("interaction",) + CODING_SCENARIOS + ERROR_SCENARIOS

DEFAULT_METHODS = (
    "lmm",
    "knn:product:product",
    "knn:product:poly2",
    "knn:poly2:product",
    "knn:poly2:poly2",
)

RESULT_COLUMNS = ("scenario", "method", "iteration", "pe_total", "pe_avg", "flags")


def _rng(seed: int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _effect_function(name: str):
    return {
        "linear": lambda x: x,
        "sine": lambda x: np.sin(2.0 * np.pi * x),
        "invlogit": lambda x: 1.0 / (1.0 + np.exp(-x)),
        "quadratic": lambda x: x ** 2,
    }[name]


def sample_gaussian_with_cov(cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw N(0, cov) through the symmetric square root; directions with
    (numerically) nonpositive variance contribute nothing."""
    eigenvalues, Q = np.linalg.eigh((cov + cov.T) / 2.0)
    root = Q * np.sqrt(np.maximum(eigenvalues, 0.0))
    return root @ rng.standard_normal(cov.shape[0])


def gen_genotypes(n: int, p: int, seed: int | np.random.Generator) -> GenotypeMatrix:
    """Independent SNPs with per-SNP MAF ~ Uniform(0.05, 0.5) and
    genotypes Binomial(2, MAF)."""
    if n < 2 or p < 1:
        raise ValueError("need n >= 2 and p >= 1")
    rng = _rng(seed)
    maf = rng.uniform(0.05, 0.5, size=p)
    values = rng.binomial(2, maf, size=(n, p)).astype(np.float64)
    return GenotypeMatrix(
        values=values,
        sample_ids=[f"s{i:04d}" for i in range(n)],
        snp_ids=[f"snp{j:04d}" for j in range(p)],
    )


def gen_nonlinear(
    G: GenotypeMatrix,
    func: str,
    seed: int | np.random.Generator,
    include_noise: bool = True,
    include_covariate: bool = True,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """y = 1 + 2*zeta + f(a) + eps, a ~ N(0, p^{-1} G G^T).

    Returns (y, Z, components) where Z is [1, zeta] (or just the
    intercept when the covariate term is disabled) and components holds
    the individual draws for moment checks.
    """
    if G.coding != "additive":
        raise ValueError("nonlinear scenario draws effects from additive genotypes")
    f = _effect_function(func)
    rng = _rng(seed)
    n = G.n
    K = product_kernel(G.values).values
    a = sample_gaussian_with_cov(K, rng)
    ones = np.ones(n)
    if include_covariate:
        zeta = rng.standard_normal(n)
        Z = np.column_stack([ones, zeta])
    else:
        zeta = np.zeros(n)
        Z = ones[:, None]
    eps = rng.standard_normal(n) if include_noise else np.zeros(n)
    fa = f(a)
    y = ones + 2.0 * zeta + fa + eps
    return y, Z, {"a": a, "f_a": fa, "zeta": zeta, "eps": eps}


def gen_interaction(
    G: GenotypeMatrix, n_causal: int = 10, seed: int | np.random.Generator = 0
) -> tuple[np.ndarray, dict]:
    """y = sum over pairs of causal columns of their Hadamard product,
    plus standard normal noise."""
    if G.p < n_causal:
        raise ValueError(f"need p >= {n_causal} SNPs, got {G.p}")
    rng = _rng(seed)
    causal = np.sort(rng.choice(G.p, size=n_causal, replace=False))
    cols = G.values[:, causal]
    signal = np.zeros(G.n)
    for j1 in range(n_causal):
        for j2 in range(j1 + 1, n_causal):
            signal += cols[:, j1] * cols[:, j2]
    eps = rng.standard_normal(G.n)
    return signal + eps, {"signal": signal, "causal_indices": causal, "eps": eps}


def gen_coding(
    G: GenotypeMatrix, mode: str, seed: int | np.random.Generator
) -> tuple[np.ndarray, dict]:
    """y = a + eps with a ~ N(0, p^{-1} G' G'^T) for the recoded matrix G'."""
    rng = _rng(seed)
    recoded = recode(G, mode)
    K = product_kernel(recoded.values).values
    a = sample_gaussian_with_cov(K, rng)
    eps = rng.standard_normal(G.n)
    return a + eps, {"a": a, "eps": eps, "kernel": K}


def gen_error_dist(
    G: GenotypeMatrix, dist: str, seed: int | np.random.Generator
) -> tuple[np.ndarray, np.ndarray, dict]:
    """The linear scenario with non-normal errors: eps ~ t(2) or
    centered chi-square(1)."""
    if dist not in ERROR_SCENARIOS:
        raise ValueError(f"dist must be one of {ERROR_SCENARIOS}, got {dist!r}")
    rng = _rng(seed)
    n = G.n
    K = product_kernel(G.values).values
    a = sample_gaussian_with_cov(K, rng)
    zeta = rng.standard_normal(n)
    eps = rng.standard_t(2, size=n) if dist == "t2" else rng.chisquare(1, size=n) - 1.0
    ones = np.ones(n)
    y = ones + 2.0 * zeta + a + eps
    return y, np.column_stack([ones, zeta]), {"a": a, "zeta": zeta, "eps": eps}


def sample_hidden_kernel(
    sigma: np.ndarray,
    m: int,
    spec: OutputKernelSpec,
    seed: int | np.random.Generator,
) -> KernelMatrix:
    """Draw m hidden columns iid N(0, Sigma) and return f[m^{-1} U U^T].

    As m grows the Gram matrix converges to Sigma, so the result
    converges entrywise to f[Sigma].
    """
    if m < 1:
        raise ValueError("need m >= 1 hidden units")
    rng = _rng(seed)
    sigma = np.asarray(sigma, dtype=np.float64)
    eigenvalues, Q = np.linalg.eigh((sigma + sigma.T) / 2.0)
    root = Q * np.sqrt(np.maximum(eigenvalues, 0.0))
    U = root @ rng.standard_normal((sigma.shape[0], m))
    gram = U @ U.T / m
    return KernelMatrix(values=np.asarray(spec.apply(gram), dtype=np.float64),
                        label=f"hidden(m={m})")


@dataclass(frozen=True)
class MethodSpec:
    """One comparison arm: 'lmm' or 'knn:<input>:<output>' with input and
    output each 'product' or 'poly2'."""

    label: str
    kind: str
    input_kernel: str | None = None
    output_kernel: str | None = None

    @classmethod
    def parse(cls, text: str) -> "MethodSpec":
        parts = text.strip().split(":")
        if parts == ["lmm"]:
            return cls(label="lmm", kind="lmm")
        if len(parts) == 3 and parts[0] == "knn":
            _, inp, out = parts
            if inp not in ("product", "poly2") or out not in ("product", "poly2"):
                raise ValueError(
                    f"unknown method {text!r}: kernels must be 'product' or 'poly2'"
                )
            return cls(label=text.strip(), kind="knn", input_kernel=inp, output_kernel=out)
        raise ValueError(f"unknown method {text!r}; expected 'lmm' or 'knn:<input>:<output>'")

    def output_spec(self) -> OutputKernelSpec:
        if self.output_kernel == "poly2":
            return OutputKernelSpec(kind="polynomial", c=1.0, d=2)
        return OutputKernelSpec(kind="identity")


@dataclass
class SimulationConfig:
    """Harness configuration; defaults mirror the reference protocol of
    100 individuals and 500 Monte Carlo iterations."""

    scenario: str
    n: int = 100
    p: int = 500
    iterations: int = 500
    methods: tuple[str, ...] = DEFAULT_METHODS
    master_seed: int = 0
    n_causal: int = 10
    holdout_fraction: float = 0.0

    def __post_init__(self):
        if self.scenario not in VALID_SCENARIOS:
            raise ValueError(
                f"unknown scenario {self.scenario!r}; valid: {', '.join(VALID_SCENARIOS)}"
            )
        if self.n < 2:
            raise ValueError("need n >= 2")
        if self.iterations < 1:
            raise ValueError("need iterations >= 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")
        self.methods = tuple(self.methods)
        self.parsed_methods()  # validate early

    def parsed_methods(self) -> list[MethodSpec]:
        return [MethodSpec.parse(m) for m in self.methods]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["methods"] = list(self.methods)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SimulationConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown simulation config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "methods" in kwargs:
            kwargs["methods"] = tuple(kwargs["methods"])
        return cls(**kwargs)


@dataclass
class ResultsTable:
    """Row-per-(method, iteration) prediction errors."""

    rows: list[dict] = field(default_factory=list)

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(RESULT_COLUMNS))

    def write_csv(self, path: str | Path) -> None:
        self.to_dataframe().to_csv(path, index=False)

    def summary(self) -> dict:
        """Boxplot quantiles (min, q1, median, q3, max) per method."""
        df = self.to_dataframe()
        out: dict = {}
        for (scenario, method), group in df.groupby(["scenario", "method"], sort=False):
            values = group["pe_avg"].dropna()
            block = out.setdefault(scenario, {})
            if values.empty:
                block[method] = None
                continue
            q = values.quantile([0.0, 0.25, 0.5, 0.75, 1.0])
            block[method] = {
                "min": float(q.iloc[0]),
                "q1": float(q.iloc[1]),
                "median": float(q.iloc[2]),
                "q3": float(q.iloc[3]),
                "max": float(q.iloc[4]),
                "n": int(values.size),
                "n_failed": int(group["pe_avg"].isna().sum()),
            }
        return out

    def save_summary(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2))


def _scenario_data(config: SimulationConfig, G: GenotypeMatrix, rng: np.random.Generator):
    """Returns (y, Z) for a fresh iteration."""
    s = config.scenario
    if s in NONLINEAR_SCENARIOS:
        y, Z, _ = gen_nonlinear(G, s, rng)
        return y, Z
    if s == "interaction":
        y, _ = gen_interaction(G, config.n_causal, rng)
        return y, np.ones((G.n, 1))
    if s in CODING_SCENARIOS:
        y, _ = gen_coding(G, s, rng)
        return y, None
    y, Z, _ = gen_error_dist(G, s, rng)
    return y, Z


def _input_kernel(name: str, G: GenotypeMatrix) -> KernelMatrix:
    if name == "product":
        return product_kernel(G.values)
    return polynomial_input_kernel(G.values, c=1.0, degree=2)


def _holdout_split(n: int, fraction: float, rng: np.random.Generator):
    n_test = max(1, int(round(fraction * n)))
    test = np.sort(rng.choice(n, size=n_test, replace=False))
    train = np.setdiff1d(np.arange(n), test)
    return train, test


def _subset_design(Z: np.ndarray | None, idx: np.ndarray) -> np.ndarray | None:
    return None if Z is None else Z[idx]


def _run_lmm(method, y, Z, kernels, train=None, test=None):
    flags = []
    if train is None:
        fitted = lmm.reml_fit(y, Z, kernels)
        yhat, degenerate = lmm.blup(fitted, y, Z, kernels)
        gap = y - yhat
    else:
        k_train = [K.values[np.ix_(train, train)] for K in kernels]
        fitted = lmm.reml_fit(y[train], _subset_design(Z, train), k_train)
        degenerate = False
        fixed_tr = np.zeros(train.size)
        fixed_te = np.zeros(test.size)
        if Z is not None:
            fixed_tr = Z[train] @ fitted.beta
            fixed_te = Z[test] @ fitted.beta
        signal_cross = np.zeros((test.size, train.size))
        signal_train = np.zeros((train.size, train.size))
        for t, K in zip(fitted.tau, kernels):
            signal_cross += t * K.values[np.ix_(test, train)]
            signal_train += t * K.values[np.ix_(train, train)]
        rhs = np.linalg.solve(signal_train + fitted.tau_err * np.eye(train.size),
                              y[train] - fixed_tr)
        yhat = fixed_te + signal_cross @ rhs
        gap = y[test] - yhat
    if not fitted.converged:
        flags.append("reml_nonconverged")
    if fitted.damped:
        flags.append("damped")
    if degenerate:
        flags.append("blup_degenerate")
    pe_total = float(gap @ gap)
    return pe_total, pe_total / gap.size, flags


def _run_knn(method: MethodSpec, y, Z, G, train=None, test=None):
    flags = []
    kernel_full = _input_kernel(method.input_kernel, G)
    spec_out = method.output_spec()
    if train is None:
        fitted = knn.fit(knn.KnnSpec([kernel_full], spec_out), y, Z)
        pe = knn.prediction_error(fitted, y, Z)
        pe_total, pe_avg = pe.total, pe.average
    else:
        k_train = KernelMatrix(
            values=kernel_full.values[np.ix_(train, train)],
            label=kernel_full.label,
            psd_checked=kernel_full.psd_checked,
        )
        fitted = knn.fit(knn.KnnSpec([k_train], spec_out), y[train], _subset_design(Z, train))
        theta = fitted.theta.theta
        basis_full = knn.expand_output_basis([kernel_full], spec_out)
        signal_full = np.zeros((G.n, G.n))
        for t, H in zip(theta[1:], basis_full.matrices[1:]):
            signal_full += t * H
        phi = max(theta[0], np.finfo(float).tiny)
        s_hat = signal_full / phi
        fixed_tr = np.zeros(train.size)
        fixed_te = np.zeros(test.size)
        if Z is not None:
            fixed_tr = Z[train] @ fitted.beta
            fixed_te = Z[test] @ fitted.beta
        rhs = np.linalg.solve(s_hat[np.ix_(train, train)] + np.eye(train.size),
                              y[train] - fixed_tr)
        yhat = fixed_te + s_hat[np.ix_(test, train)] @ rhs
        gap = y[test] - yhat
        pe_total = float(gap @ gap)
        pe_avg = pe_total / gap.size
    diag = fitted.diagnostics
    if diag.get("clamped_indices"):
        tags = [fitted.basis.monomial_tags[i] for i in diag["clamped_indices"]]
        flags.append("clamped=" + "|".join(tags))
    if diag.get("dropped_monomials"):
        flags.append("dropped=" + "|".join(diag["dropped_monomials"]))
    if diag.get("error_projected"):
        flags.append("error_projected")
    if diag.get("error_floored"):
        flags.append("error_floored")
    return pe_total, pe_avg, flags


def run_iteration(config: SimulationConfig, iteration: int) -> list[dict]:
    """All method rows for one Monte Carlo iteration (0-based)."""
    rng = np.random.default_rng(config.master_seed + iteration)
    G = gen_genotypes(config.n, config.p, rng)
    y, Z = _scenario_data(config, G, rng)
    train = test = None
    if config.holdout_fraction > 0.0:
        train, test = _holdout_split(config.n, config.holdout_fraction, rng)

    product = product_kernel(G.values)
    rows = []
    for method in config.parsed_methods():
        try:
            if method.kind == "lmm":
                pe_total, pe_avg, flags = _run_lmm(method, y, Z, [product], train, test)
            else:
                pe_total, pe_avg, flags = _run_knn(method, y, Z, G, train, test)
        except Exception as exc:  # noqa: BLE001 - failures become flagged rows
            logger.warning("iteration %d method %s failed: %s", iteration, method.label, exc)
            pe_total, pe_avg, flags = float("nan"), float("nan"), [f"failed={type(exc).__name__}"]
        if train is not None:
            flags = ["holdout"] + flags
        rows.append({
            "scenario": config.scenario,
            "method": method.label,
            "iteration": iteration,
            "pe_total": pe_total,
            "pe_avg": pe_avg,
            "flags": ";".join(flags),
        })
    return rows


def run_monte_carlo(
    config: SimulationConfig, threads: int = 1, progress=None
) -> ResultsTable:
    """Execute the full grid; rows are ordered by iteration regardless
    of worker scheduling.  ``progress`` may be a callable taking the
    completed iteration count."""
    table = ResultsTable()
    if threads <= 1:
        for i in range(config.iterations):
            table.rows.extend(run_iteration(config, i))
            if progress is not None:
                progress(i + 1)
        return table
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(run_iteration, config, i) for i in range(config.iterations)]
        done = 0
        for fut in futures:
            table.rows.extend(fut.result())
            done += 1
            if progress is not None:
                progress(done)
    return table
