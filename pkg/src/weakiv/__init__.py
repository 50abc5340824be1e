"""Weak-instrument-robust tests for linear IV regression with general error variance."""

from .conditional import (
    ConditionalQuantileSpec,
    ConfidenceSet,
    TestReport,
    conditional_quantile,
    confidence_set,
    run_test,
)
from .designs import DesignSpec, DrawBatch, assemble, draw_r0
from .kronecker import (
    KroneckerForm,
    QStat,
    c_d_coefficients,
    detect_kronecker,
    q_density,
    q_stat,
    structural_action,
)
from .model import (
    AlternativePoint,
    DataError,
    GroupElement,
    Hypothesis,
    IVDataset,
    NullRotated,
    ReducedForm,
    STDecomposition,
    act,
    act_params,
    estimate_sigma_plugin,
    null_rotate,
    partial_out,
    reduce,
    st_decompose,
)
from .numerics import (
    NumericalError,
    QuadratureRule,
    RngStream,
    SymPD,
    empirical_quantile,
    gauss_legendre,
    projection,
    sym_inv_sqrt,
)
from .statistics import (
    LROptConfig,
    StatValue,
    ar,
    il,
    il0,
    il_original,
    lc,
    lm,
    lr,
    lr_equivalence_check,
    qlr,
    wald,
)

__version__ = "0.1.0"
