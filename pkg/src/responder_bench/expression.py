"""Expression-matrix preprocessing: log TPM, gene-set filtering, and
batch-effect handling (whole-frame scaling, per-source scaling, or
empirical-Bayes batch adjustment), plus a 2-component PCA diagnostic.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import pandas as pd


class ScalingMethod(enum.Enum):
    WHOLE_FRAME = "whole"
    SOURCE_SCALED = "source"
    COMBAT = "combat"


@dataclass(frozen=True)
class ExpressionMatrix:
    """Dense samples-by-genes expression block with per-sample source labels."""

    gene_ids: tuple[str, ...]
    sample_ids: tuple[str, ...]
    values: np.ndarray  # (n_samples, n_genes)
    source_of: dict[str, str]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        if values.shape != (len(self.sample_ids), len(self.gene_ids)):
            raise ValueError(
                f"values shape {values.shape} does not match "
                f"{len(self.sample_ids)} samples x {len(self.gene_ids)} genes"
            )
        if len(set(self.gene_ids)) != len(self.gene_ids):
            raise ValueError("duplicate gene ids")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("duplicate sample ids")
        missing = [s for s in self.sample_ids if s not in self.source_of]
        if missing:
            raise ValueError(f"samples without a source label: {missing[:5]}")
        if not np.all(np.isfinite(values)):
            raise ValueError("expression values must be finite")

    @property
    def sources(self) -> np.ndarray:
        return np.array([self.source_of[s] for s in self.sample_ids])

    def with_values(self, values: np.ndarray) -> "ExpressionMatrix":
        return ExpressionMatrix(self.gene_ids, self.sample_ids, values, self.source_of)


@dataclass(frozen=True)
class GeneSet:
    """Named gene list; ``full`` means no filtering."""

    name: str
    genes: frozenset[str] = field(default_factory=frozenset)

    FULL = "full"

    @property
    def is_full(self) -> bool:
        return self.name == self.FULL


def fpkm_to_log_tpm(matrix: ExpressionMatrix) -> ExpressionMatrix:
    """Convert per-sample FPKM rows to log2(TPM + 1).

    TPM rescales each sample so its values sum to 1e6; an all-zero sample
    stays all-zero.  Negative input raises.
    """
    vals = matrix.values
    if np.any(vals < 0):
        raise ValueError("FPKM values must be non-negative")
    totals = vals.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        tpm = np.where(totals > 0, vals * 1e6 / totals, 0.0)
    return matrix.with_values(np.log2(tpm + 1.0))


def filter_gene_set(matrix: ExpressionMatrix, gene_set: GeneSet) -> ExpressionMatrix:
    """Restrict columns to the gene set, preserving the matrix's gene order."""
    if gene_set.is_full:
        return matrix
    if not gene_set.genes:
        raise ValueError(f"gene set {gene_set.name!r} is empty")
    keep = [i for i, g in enumerate(matrix.gene_ids) if g in gene_set.genes]
    if not keep:
        raise ValueError(
            f"gene set {gene_set.name!r} shares no genes with the matrix"
        )
    return ExpressionMatrix(
        gene_ids=tuple(matrix.gene_ids[i] for i in keep),
        sample_ids=matrix.sample_ids,
        values=matrix.values[:, keep].copy(),
        source_of=matrix.source_of,
    )


def _zscore(values: np.ndarray) -> np.ndarray:
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    out = np.zeros_like(values)
    ok = std > 0
    out[:, ok] = (values[:, ok] - mean[ok]) / std[ok]
    return out


def scale(matrix: ExpressionMatrix, method: ScalingMethod) -> ExpressionMatrix:
    """Standardize each gene by the chosen method.

    WHOLE_FRAME z-scores over all samples; SOURCE_SCALED z-scores within
    each source group; COMBAT additionally shrinks per-batch location and
    scale effects toward batch-level priors before reconstruction.
    Zero-variance genes come out as zeros in every method.
    """
    if method is ScalingMethod.WHOLE_FRAME:
        return matrix.with_values(_zscore(matrix.values))
    if method is ScalingMethod.SOURCE_SCALED:
        out = np.zeros_like(matrix.values)
        sources = matrix.sources
        for src in np.unique(sources):
            rows = sources == src
            out[rows] = _zscore(matrix.values[rows])
        return matrix.with_values(out)
    if method is ScalingMethod.COMBAT:
        return combat(matrix)
    raise ValueError(f"unknown scaling method: {method!r}")


def _combat_iterate(
    z_batch: np.ndarray,
    gamma_hat: np.ndarray,
    delta_hat_sq: np.ndarray,
    gamma_bar: float,
    tau_sq: float,
    lam: float,
    theta: float,
    tol: float = 1e-6,
    max_iter: int = 500,
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior location/scale estimates for one batch via fixed-point
    iteration of the conditional means."""
    n = z_batch.shape[0]
    gamma = gamma_hat.copy()
    delta_sq = delta_hat_sq.copy()
    for _ in range(max_iter):
        gamma_new = (n * tau_sq * gamma_hat + delta_sq * gamma_bar) / (
            n * tau_sq + delta_sq
        )
        resid_sq = ((z_batch - gamma_new) ** 2).sum(axis=0)
        delta_new = (theta + 0.5 * resid_sq) / (n / 2.0 + lam - 1.0)
        change = max(
            np.max(np.abs(gamma_new - gamma) / np.maximum(np.abs(gamma), 1e-12)),
            np.max(np.abs(delta_new - delta_sq) / np.maximum(np.abs(delta_sq), 1e-12)),
        )
        gamma, delta_sq = gamma_new, delta_new
        if change < tol:
            break
    return gamma, delta_sq


def combat(matrix: ExpressionMatrix) -> ExpressionMatrix:
    """Parametric empirical-Bayes batch adjustment across source labels.

    Per gene, data are standardized against the batch-size-weighted grand
    mean and pooled within-batch variance; per-batch additive and
    multiplicative effects are estimated, shrunk toward batch-level
    normal / inverse-gamma priors by iterating their posterior means, and
    removed before reconstruction.  Zero-variance genes pass through as
    zeros.

    Raises
    ------
    ValueError
        Fewer than two sources, or any source with fewer than two samples
        (the error names that source).
    """
    sources = matrix.sources
    labels = list(dict.fromkeys(sources))  # stable order of appearance
    if len(labels) < 2:
        raise ValueError("batch adjustment requires at least 2 sources")
    batch_rows = {lab: np.flatnonzero(sources == lab) for lab in labels}
    for lab in labels:
        if batch_rows[lab].size < 2:
            raise ValueError(
                f"source {lab!r} has a single sample; "
                "batch adjustment needs at least 2 per source"
            )

    X = matrix.values
    n_total = X.shape[0]
    batch_means = np.stack([X[batch_rows[lab]].mean(axis=0) for lab in labels])
    sizes = np.array([batch_rows[lab].size for lab in labels], dtype=float)
    grand_mean = (sizes / n_total) @ batch_means

    resid = X.copy()
    for i, lab in enumerate(labels):
        resid[batch_rows[lab]] -= batch_means[i]
    var_pooled = (resid ** 2).sum(axis=0) / n_total

    ok = var_pooled > 0
    out = np.zeros_like(X)
    if not np.any(ok):
        return matrix.with_values(out)

    sd = np.sqrt(var_pooled[ok])
    Z = (X[:, ok] - grand_mean[ok]) / sd

    adjusted = np.empty_like(Z)
    for i, lab in enumerate(labels):
        rows = batch_rows[lab]
        zb = Z[rows]
        gamma_hat = zb.mean(axis=0)
        delta_hat_sq = zb.var(axis=0, ddof=1)
        gamma_bar = float(gamma_hat.mean())
        tau_sq = float(gamma_hat.var(ddof=1))
        m = float(delta_hat_sq.mean())
        s2 = float(delta_hat_sq.var(ddof=1))
        if s2 <= 0:
            # Degenerate hyperprior (e.g., one gene): skip shrinkage.
            gamma_star, delta_star_sq = gamma_hat, delta_hat_sq
        else:
            lam = (2.0 * s2 + m ** 2) / s2
            theta = (m * s2 + m ** 3) / s2
            gamma_star, delta_star_sq = _combat_iterate(
                zb, gamma_hat, delta_hat_sq, gamma_bar, tau_sq, lam, theta
            )
        adjusted[rows] = (zb - gamma_star) / np.sqrt(delta_star_sq)

    out[:, ok] = adjusted * sd + grand_mean[ok]
    return matrix.with_values(out)


def pca2(matrix: ExpressionMatrix) -> tuple[np.ndarray, np.ndarray]:
    """First two principal components by power iteration with deflation.

    Returns per-sample coordinates (n_samples, 2) and the two explained
    variance fractions.  Component signs are canonicalized so the
    largest-magnitude gene loading is positive.  A rank-0 (constant)
    matrix raises.
    """
    if len(matrix.sample_ids) < 2 or len(matrix.gene_ids) < 2:
        raise ValueError("PCA needs at least 2 samples and 2 genes")
    X = matrix.values - matrix.values.mean(axis=0)
    total_var = float((X ** 2).sum())
    if total_var <= 0:
        raise ValueError("matrix has rank 0 (all samples identical)")

    rng = np.random.default_rng(0)
    coords = np.empty((X.shape[0], 2))
    fractions = np.empty(2)
    work = X.copy()
    for k in range(2):
        v = rng.normal(size=X.shape[1])
        v /= np.linalg.norm(v)
        for _ in range(1000):
            w = work.T @ (work @ v)
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            w /= norm
            if abs(w @ v) > 1.0 - 1e-13:
                v = w
                break
            v = w
        pivot = int(np.argmax(np.abs(v)))
        if v[pivot] < 0:
            v = -v
        # Project onto the deflated residual so a rank-deficient second
        # component yields zero coordinates rather than arbitrary ones.
        scores = work @ v
        coords[:, k] = scores
        fractions[k] = float(scores @ scores) / total_var
        work = work - np.outer(scores, v)
    return coords, fractions


# ---------------------------------------------------------------------------
# CSV / gene-set file interfaces
# ---------------------------------------------------------------------------


def read_expression_csv(path: str) -> ExpressionMatrix:
    """Load a SAMPLE, SOURCE, gene... CSV into an ExpressionMatrix."""
    frame = pd.read_csv(path)
    if list(frame.columns[:2]) != ["SAMPLE", "SOURCE"]:
        raise ValueError("expression CSV must start with SAMPLE, SOURCE columns")
    samples = tuple(str(s) for s in frame["SAMPLE"])
    sources = {str(s): str(src) for s, src in zip(frame["SAMPLE"], frame["SOURCE"])}
    genes = tuple(str(g) for g in frame.columns[2:])
    values = frame.iloc[:, 2:].to_numpy(dtype=float)
    return ExpressionMatrix(genes, samples, values, sources)


def write_expression_csv(matrix: ExpressionMatrix, path: str) -> None:
    frame = pd.DataFrame(matrix.values, columns=list(matrix.gene_ids))
    frame.insert(0, "SOURCE", [matrix.source_of[s] for s in matrix.sample_ids])
    frame.insert(0, "SAMPLE", list(matrix.sample_ids))
    frame.to_csv(path, index=False)


def read_gene_set(path: str, name: str | None = None) -> GeneSet:
    """Load a plain-text gene list (one id per line, blanks ignored)."""
    with open(path) as fh:
        genes = frozenset(line.strip() for line in fh if line.strip())
    if name is None:
        name = path.rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return GeneSet(name=name, genes=genes)


def write_gene_set(gene_set: GeneSet, path: str) -> None:
    with open(path, "w") as fh:
        for gene in sorted(gene_set.genes):
            fh.write(gene + "\n")
