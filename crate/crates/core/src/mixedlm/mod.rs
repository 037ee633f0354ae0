//! Linear mixed-effects models for log death rates: formulas, design
//! construction and (RE)ML fitting.

pub mod design;
pub mod fit;
pub mod formula;
pub mod optimize;
pub mod reml;

pub use design::{build_design, DesignLayout, DesignMatrices, RandomTermDesign};
pub use formula::{candidate_formula, Atom, Factor, FixedTerm, GroupFactor, ModelFormula, RandomTerm};
pub use fit::{fit, fit_reml, FitOptions, FittedMixedModel, FixedEffect, RandomComponent};
pub use optimize::NelderMeadOptions;
pub use reml::{Method, RemlProblem};
