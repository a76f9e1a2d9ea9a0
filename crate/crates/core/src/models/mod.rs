//! Vector fields: neural NDDE/NODE fields, the analytic delayed systems, and
//! the constructive representations.
pub mod constructions;
pub mod field;
pub mod spec;

#[cfg(test)]
mod tests;

pub use constructions::{
    augment_state, build_annulus_separator, build_annulus_separator_with_time,
    build_universal_representation, linear_residual_network, AnnulusConstruction,
    UniversalRepresentation, ANNULUS_DEFAULT_TIME,
};
pub use field::{
    field_eval, field_vjp, AnnulusSeparator, DelayedNeural, FieldVjp, LinearTanh, MackeyGlass,
    NeuralNdde, NeuralNode, Population, ScalarDelay, VectorField,
};
pub use spec::{FieldKind, HistoryKind, ModelSpec};
