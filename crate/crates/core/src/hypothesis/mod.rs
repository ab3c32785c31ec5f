//! Rate-law language for ODE structures: mass action, saturating (Michaelis–Menten
//! with competition), constant scaling, negation and sums.

mod eval;
mod expr;
pub mod generate;
mod parser;
mod structure;

pub use eval::{eval_rate, rhs_vector, BoundModel, CompiledModel, DesignConstants, EvalError};
pub use expr::{render_rate_expr, CompetitionTerm, Factor, NameRole, RateExpr, Scalar};
pub use parser::{parse_equations, parse_rate_expr, ParseError, ParseErrorKind};
pub use structure::{
    free_parameters, ModelStructure, ParameterAssignment, SlotBoxes, SlotSpec, StructureError,
    DEFAULT_MAX_DEPTH, DEFAULT_SLOT_BOX,
};
