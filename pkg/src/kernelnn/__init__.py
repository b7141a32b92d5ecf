"""Kernel neural network and linear mixed model toolkit for
high-dimensional genomic prediction.

Pipeline: genotype ingestion and QC (``genotype``), kernel construction
and output-kernel basis expansion (``kernels``), MINQUE variance
components (``minque``), fixed-effect restriction machinery
(``restrict``), the kernel neural network model (``knn``), the REML/BLUP
baseline (``lmm``), and a seeded Monte Carlo harness (``simulate``).
"""

__version__ = "0.1.0"

from .genotype import (  # noqa: F401
    GenotypeMatrix,
    QcReport,
    QcThresholds,
    apply_qc,
    load_genotypes,
    recode,
    save_genotypes,
)
from .kernels import (  # noqa: F401
    KernelBasis,
    KernelMatrix,
    OutputKernelSpec,
    covariance_kernel,
    expand_output_basis,
    hadamard_power,
    ibs_kernel,
    polynomial_input_kernel,
    product_kernel,
    psd_project,
)
from .knn import (  # noqa: F401
    FittedKnn,
    KnnSpec,
    pe_bound_check,
    predict,
    prediction_error,
    predictor_matrix,
    schur_positivity_threshold,
)
from .knn import fit as fit_knn  # noqa: F401
from .lmm import FittedLmm, blup, pe_closed_form, reml_fit  # noqa: F401
from .minque import MinqueSystem, VarianceComponents, build_system, estimate  # noqa: F401
from .restrict import Restriction, aitken_beta, projection_pv, restriction_matrix, transform  # noqa: F401
from .simulate import ResultsTable, SimulationConfig, run_monte_carlo  # noqa: F401
