//! Error taxonomy for the numerical core.

use thiserror::Error;

/// Errors surfaced by the numerical core. Variant names follow the
/// stable identifiers used in reports and logs.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension-mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unsupported-structure: {0}")]
    UnsupportedStructure(String),
    #[error("unknown-model: {0}")]
    UnknownModel(String),
    #[error("newton-diverged: {0}")]
    NewtonDiverged(String),
    #[error("singular-jacobian: {0}")]
    SingularJacobian(String),
    #[error("fold-detected: {0}")]
    FoldDetected(String),
    #[error("kernel-dimension-mismatch: {0}")]
    KernelDimensionMismatch(String),
    #[error("adjoint-kernel-too-large: {0}")]
    AdjointKernelTooLarge(String),
    #[error("truncation-too-small: {0}")]
    TruncationTooSmall(String),
    #[error("branch-collision: {0}")]
    BranchCollision(String),
    #[error("projector-discontinuity: {0}")]
    ProjectorDiscontinuity(String),
    #[error("domain-not-commensurate: {0}")]
    DomainNotCommensurate(String),
    #[error("bordered-singular: {0}")]
    BorderedSingular(String),
    #[error("patch-too-small: {0}")]
    PatchTooSmall(String),
    #[error("phase-not-invertible: {0}")]
    PhaseNotInvertible(String),
    #[error("non-diagonalizable: {0}")]
    NonDiagonalizable(String),
    #[error("nonstrict-hyperbolic: {0}")]
    NonstrictHyperbolic(String),
    #[error("nonparabolic: {0}")]
    Nonparabolic(String),
    #[error("blow-up: {0}")]
    BlowUp(String),
    #[error("fit-out-of-patch: {0}")]
    FitOutOfPatch(String),
    #[error("fit-ill-conditioned: {0}")]
    FitIllConditioned(String),
    #[error("linalg: {0}")]
    Linalg(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serialization(String),
}
