"""Genotype ingestion, quality control, and inheritance-mode recoding.

Genotypes are held as an n x p float64 matrix of allele-count codes with
NaN marking missing calls.  Additive coding counts copies of the minor
allele (0/1/2); dominant coding flags carriers of at least one minor
allele (0/1); recessive coding flags minor-allele homozygotes (0/1).

QC filters columns by call rate, minor allele frequency and a
Hardy-Weinberg chi-square goodness-of-fit test (1 df), in that order,
then mean-imputes any remaining missing entries per SNP.  Class counts
for MAF/HWE only consider exact 0/1/2 entries, so mean-imputed dosages
never perturb a second QC pass: ``apply_qc`` is idempotent.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import _accel

logger = logging.getLogger(__name__)

CODINGS = ("additive", "dominant", "recessive")
MISSING_TOKENS = ("", "NA")


class GenotypeParseError(ValueError):
    """Malformed genotype file (ragged rows, bad header, ...)."""


class GenotypeValueError(ValueError):
    """A cell holds a value outside the allowed genotype codes."""


class CodingStateError(RuntimeError):
    """An operation received genotypes in the wrong coding state."""


class EmptyResultError(RuntimeError):
    """Quality control removed every SNP."""


@dataclass
class GenotypeMatrix:
    """n x p genotype codes plus sample/SNP labels and the coding mode.

    Missing entries are NaN (allowed pre-QC).  Additive entries may be
    fractional after mean imputation; recoded matrices are strictly 0/1.
    """

    values: np.ndarray
    sample_ids: list[str]
    snp_ids: list[str]
    coding: str = "additive"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("genotype values must be a 2-D matrix")
        n, p = self.values.shape
        if n < 2 or p < 1:
            raise ValueError(f"need n >= 2 samples and p >= 1 SNPs, got {n} x {p}")
        if len(self.sample_ids) != n or len(self.snp_ids) != p:
            raise ValueError("label lengths do not match matrix dimensions")
        if self.coding not in CODINGS:
            raise ValueError(f"coding must be one of {CODINGS}, got {self.coding!r}")
        observed = self.values[~np.isnan(self.values)]
        if self.coding == "additive":
            if observed.size and (observed.min() < 0.0 or observed.max() > 2.0):
                raise GenotypeValueError("additive codes must lie in [0, 2]")
        else:
            if observed.size and not np.isin(observed, (0.0, 1.0)).all():
                raise GenotypeValueError(f"{self.coding} codes must be 0 or 1")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def save(self, path: str | Path) -> None:
        save_genotypes(self, path)


@dataclass
class QcThresholds:
    """Column filters: call rate >= min_call_rate, MAF >= min_maf,
    HWE p-value >= hwe_alpha."""

    min_call_rate: float = 0.9
    min_maf: float = 0.01
    hwe_alpha: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.min_call_rate <= 1.0:
            raise ValueError("min_call_rate must lie in [0, 1]")
        if not 0.0 <= self.min_maf <= 0.5:
            raise ValueError("min_maf must lie in [0, 0.5]")
        if not 0.0 < self.hwe_alpha < 1.0:
            raise ValueError("hwe_alpha must lie in (0, 1)")


@dataclass
class QcReport:
    """Per-rule drop lists plus per-SNP call-rate/MAF/HWE tables."""

    n_input: int
    n_retained: int
    dropped_call_rate: list[str] = field(default_factory=list)
    dropped_maf: list[str] = field(default_factory=list)
    dropped_hwe: list[str] = field(default_factory=list)
    call_rate: dict[str, float] = field(default_factory=dict)
    maf: dict[str, float] = field(default_factory=dict)
    hwe_pvalue: dict[str, float] = field(default_factory=dict)
    imputed_entries: int = 0

    def __post_init__(self):
        dropped = len(self.dropped_call_rate) + len(self.dropped_maf) + len(self.dropped_hwe)
        if dropped + self.n_retained != self.n_input:
            raise ValueError("dropped + retained must equal the input SNP count")

    @property
    def n_dropped(self) -> int:
        return self.n_input - self.n_retained

    def to_dict(self) -> dict:
        return {
            "n_input": self.n_input,
            "n_retained": self.n_retained,
            "dropped": {
                "call_rate": self.dropped_call_rate,
                "maf": self.dropped_maf,
                "hwe": self.dropped_hwe,
            },
            "call_rate": self.call_rate,
            "maf": self.maf,
            "hwe_pvalue": self.hwe_pvalue,
            "imputed_entries": self.imputed_entries,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _delimiter_for(path: Path, fmt: str | None) -> str:
    if fmt is None:
        fmt = "tsv" if path.suffix.lower() in (".tsv", ".txt") else "csv"
    if fmt not in ("csv", "tsv"):
        raise ValueError(f"format must be 'csv' or 'tsv', got {fmt!r}")
    return "\t" if fmt == "tsv" else ","


def _parse_code(token: str, row: int, col: int) -> float:
    token = token.strip()
    if token in MISSING_TOKENS:
        return np.nan
    try:
        value = float(token)
    except ValueError:
        raise GenotypeValueError(
            f"invalid genotype {token!r} at (row {row}, col {col}); expected 0, 1, 2 or NA"
        ) from None
    if value not in (0.0, 1.0, 2.0):
        raise GenotypeValueError(
            f"genotype {token!r} at (row {row}, col {col}) is outside {{0, 1, 2}}"
        )
    return value


def load_genotypes(path: str | Path, fmt: str | None = None) -> GenotypeMatrix:
    """Read an additive genotype table.

    Expected layout: header row of SNP ids with an id column first; each
    data row starts with a sample id followed by codes in {0, 1, 2},
    missing encoded as an empty cell or "NA".

    Raises
    ------
    GenotypeParseError
        For ragged rows or an empty/short header; the message carries
        the offending row index.
    GenotypeValueError
        For out-of-domain cell values; the message carries (row, col).
    """
    path = Path(path)
    delim = _delimiter_for(path, fmt)
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delim)
        try:
            header = next(reader)
        except StopIteration:
            raise GenotypeParseError(f"{path}: file is empty") from None
        if len(header) < 2:
            raise GenotypeParseError(f"{path}: header must hold an id column plus SNP ids")
        snp_ids = [h.strip() for h in header[1:]]
        p = len(snp_ids)
        sample_ids: list[str] = []
        rows: list[list[float]] = []
        for r, record in enumerate(reader, start=1):
            if not record or (len(record) == 1 and not record[0].strip()):
                continue  # trailing blank line
            if len(record) != p + 1:
                raise GenotypeParseError(
                    f"{path}: row {r} has {len(record)} fields, expected {p + 1}"
                )
            sample_ids.append(record[0].strip())
            rows.append([_parse_code(tok, r, c) for c, tok in enumerate(record[1:], start=1)])
    if not rows:
        raise GenotypeParseError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float64)
    logger.info("loaded %d samples x %d SNPs from %s", values.shape[0], p, path)
    return GenotypeMatrix(values=values, sample_ids=sample_ids, snp_ids=snp_ids)


def save_genotypes(G: GenotypeMatrix, path: str | Path, fmt: str | None = None) -> None:
    """Write a genotype table in the layout ``load_genotypes`` reads."""
    path = Path(path)
    delim = _delimiter_for(path, fmt)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delim)
        writer.writerow(["sample_id", *G.snp_ids])
        for sid, row in zip(G.sample_ids, G.values):
            cells = ["NA" if np.isnan(v) else format(v, ".17g") for v in row]
            writer.writerow([sid, *cells])


def _hwe_pvalues(counts: np.ndarray) -> np.ndarray:
    """Chi-square (1 df) goodness-of-fit p-values from genotype counts.

    counts columns are (n0, n1, n2, n_missing).  Monomorphic columns get
    p = 1 (no testable deviation; the MAF filter owns them).
    """
    n0 = counts[:, 0].astype(float)
    n1 = counts[:, 1].astype(float)
    n2 = counts[:, 2].astype(float)
    n_obs = n0 + n1 + n2
    pvals = np.ones(counts.shape[0])
    ok = n_obs > 0
    q = np.zeros_like(pvals)
    q[ok] = (n1[ok] + 2.0 * n2[ok]) / (2.0 * n_obs[ok])
    poly = ok & (q > 0.0) & (q < 1.0)
    if poly.any():
        e0 = n_obs[poly] * (1.0 - q[poly]) ** 2
        e1 = n_obs[poly] * 2.0 * q[poly] * (1.0 - q[poly])
        e2 = n_obs[poly] * q[poly] ** 2
        stat = (
            (n0[poly] - e0) ** 2 / e0
            + (n1[poly] - e1) ** 2 / e1
            + (n2[poly] - e2) ** 2 / e2
        )
        pvals[poly] = stats.chi2.sf(stat, df=1)
    return pvals


def apply_qc(G: GenotypeMatrix, thresholds: QcThresholds | None = None) -> tuple[GenotypeMatrix, QcReport]:
    """Filter SNP columns and mean-impute remaining missing entries.

    Filters run in order: call rate, then MAF on observed entries, then
    the HWE test on survivors.  Sample order and retained SNP order are
    preserved.

    Raises
    ------
    CodingStateError
        If ``G`` is not additive-coded.
    EmptyResultError
        If no SNP survives; the report is attached to the exception.
    """
    if G.coding != "additive":
        raise CodingStateError("QC runs on additive-coded genotypes")
    t = thresholds if thresholds is not None else QcThresholds()
    n = G.n
    counts = _accel.genotype_counts(G.values)
    n_obs = counts[:, :3].sum(axis=1).astype(float)
    call_rate = 1.0 - counts[:, 3] / float(n)

    with np.errstate(invalid="ignore", divide="ignore"):
        q = np.where(n_obs > 0, (counts[:, 1] + 2.0 * counts[:, 2]) / (2.0 * n_obs), 0.0)
    maf = np.minimum(q, 1.0 - q)

    keep = np.ones(G.p, dtype=bool)
    fail_cr = call_rate < t.min_call_rate
    keep &= ~fail_cr
    fail_maf = keep & (maf < t.min_maf)
    keep &= ~fail_maf

    hwe_p = _hwe_pvalues(counts)
    fail_hwe = keep & (hwe_p < t.hwe_alpha)
    keep &= ~fail_hwe

    snp_ids = np.asarray(G.snp_ids)
    report = QcReport(
        n_input=G.p,
        n_retained=int(keep.sum()),
        dropped_call_rate=list(snp_ids[fail_cr]),
        dropped_maf=list(snp_ids[fail_maf]),
        dropped_hwe=list(snp_ids[fail_hwe]),
        call_rate={s: float(c) for s, c in zip(G.snp_ids, call_rate)},
        maf={s: float(m) for s, m in zip(G.snp_ids, maf)},
        hwe_pvalue={s: float(p) for s, p in zip(G.snp_ids, hwe_p)},
    )
    if not keep.any():
        exc = EmptyResultError("all SNPs failed quality control")
        exc.report = report
        raise exc

    values = G.values[:, keep].copy()
    missing = np.isnan(values)
    n_imputed = int(missing.sum())
    if n_imputed:
        col_means = np.nanmean(values, axis=0)
        values[missing] = np.broadcast_to(col_means, values.shape)[missing]
    report.imputed_entries = n_imputed

    filtered = GenotypeMatrix(
        values=values,
        sample_ids=list(G.sample_ids),
        snp_ids=list(snp_ids[keep]),
        coding="additive",
    )
    logger.info(
        "QC kept %d/%d SNPs (call-rate %d, MAF %d, HWE %d dropped; %d entries imputed)",
        report.n_retained, report.n_input, len(report.dropped_call_rate),
        len(report.dropped_maf), len(report.dropped_hwe), n_imputed,
    )
    return filtered, report


def recode(G: GenotypeMatrix, mode: str) -> GenotypeMatrix:
    """Map additive minor-allele counts to a 0/1 inheritance coding.

    dominant:  carriers of >= 1 minor allele -> 1   (0,1,2) -> (0,1,1)
    recessive: minor-allele homozygotes -> 1        (0,1,2) -> (0,0,1)

    Missing entries stay missing.  Requires exact class codes, so recode
    before imputation.
    """
    if mode not in ("dominant", "recessive"):
        raise ValueError(f"mode must be 'dominant' or 'recessive', got {mode!r}")
    if G.coding != "additive":
        raise CodingStateError(f"input is already {G.coding}-coded")
    observed = G.values[~np.isnan(G.values)]
    if observed.size and not np.isin(observed, (0.0, 1.0, 2.0)).all():
        raise GenotypeValueError("recode needs exact 0/1/2 codes (found fractional dosages)")
    if mode == "dominant":
        values = np.where(G.values >= 1.0, 1.0, 0.0)
    else:
        values = np.where(G.values == 2.0, 1.0, 0.0)
    values[np.isnan(G.values)] = np.nan
    return GenotypeMatrix(
        values=values,
        sample_ids=list(G.sample_ids),
        snp_ids=list(G.snp_ids),
        coding=mode,
    )


def load_phenotype(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Read a two-column (sample_id, value) table with a header row."""
    path = Path(path)
    delim = _delimiter_for(path, None)
    ids: list[str] = []
    values: list[float] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delim)
        next(reader, None)
        for r, record in enumerate(reader, start=1):
            if not record:
                continue
            if len(record) < 2:
                raise GenotypeParseError(f"{path}: row {r} needs (sample_id, value)")
            ids.append(record[0].strip())
            try:
                values.append(float(record[1]))
            except ValueError:
                raise GenotypeParseError(
                    f"{path}: non-numeric phenotype {record[1]!r} at row {r}"
                ) from None
    return ids, np.asarray(values, dtype=np.float64)


def load_covariates(path: str | Path) -> tuple[list[str], np.ndarray, list[str]]:
    """Read a covariate table: sample_id column then numeric columns."""
    path = Path(path)
    delim = _delimiter_for(path, None)
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delim)
        header = next(reader, None)
        if header is None or len(header) < 2:
            raise GenotypeParseError(f"{path}: need a sample_id column plus covariates")
        names = [h.strip() for h in header[1:]]
        ids: list[str] = []
        rows: list[list[float]] = []
        for r, record in enumerate(reader, start=1):
            if not record:
                continue
            if len(record) != len(names) + 1:
                raise GenotypeParseError(
                    f"{path}: row {r} has {len(record)} fields, expected {len(names) + 1}"
                )
            ids.append(record[0].strip())
            try:
                rows.append([float(tok) for tok in record[1:]])
            except ValueError:
                raise GenotypeParseError(f"{path}: non-numeric covariate at row {r}") from None
    return ids, np.asarray(rows, dtype=np.float64), names


def align_to_samples(
    sample_ids: list[str], other_ids: list[str], values: np.ndarray, what: str = "table"
) -> np.ndarray:
    """Reorder rows of ``values`` (indexed by other_ids) to sample_ids."""
    index = {sid: i for i, sid in enumerate(other_ids)}
    missing = [sid for sid in sample_ids if sid not in index]
    if missing:
        raise ValueError(f"{what} is missing samples: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    order = [index[sid] for sid in sample_ids]
    return values[order]
