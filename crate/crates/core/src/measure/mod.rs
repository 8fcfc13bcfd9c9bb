//! The MEASURE monitoring language: parsing, decomposition rewriting and the
//! aggregation-point runtime.

pub mod ast;
pub mod export;
pub mod parser;
mod pretty;
pub mod plan;
pub mod rewrite;
pub mod units;

pub use ast::{Action, AggKind, Cmp, Combiner, MExpr, PayloadItem, Program, Trigger};
pub use parser::{parse, validate};
pub use plan::{
    compile, window_aggregate, ActiveZone, AggregationPlan, CompileError, EmptyBuffer, IngestError, IngestOutcome,
    MfBinding, MonitorResult, Notification, Windowed,
};
pub use rewrite::{rewrite_for_decomposition, DecompositionRule, RewriteError};
pub use units::{Dimension, Quantity, Unit};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MeasureError {
    #[error("{line}:{col}: syntax error, expected {expected}")]
    Syntax { line: u32, col: u32, expected: String },
    #[error("{line}:{col}: {id:?} is declared twice")]
    DuplicateId { id: String, line: u32, col: u32 },
    #[error("{line}:{col}: unknown reference {id:?}")]
    UnknownReference { id: String, line: u32, col: u32 },
    #[error("{line}:{col}: unit mismatch: {detail}")]
    UnitMismatch { detail: String, line: u32, col: u32 },
}
