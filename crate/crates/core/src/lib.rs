//! Synthetic laboratory for Fisher's-Linear-Discriminant analysis of
//! counterfactually augmented data (CAD) and for ECF training, which adds an
//! invariant-risk gradient penalty and an orthogonal-component-distance
//! penalty to the usual prediction loss.
//!
//! Layout of the crate:
//!
//! - [`feature_model`]: Gaussian block feature law, counterfactual
//!   augmentation and correlated-feature shifts.
//! - [`fisher`]: empirical and closed-form Fisher discriminants, myopia
//!   cosines and the interpolated classifier.
//! - [`ecf`]: linear encoder + label-vector classifier trained with
//!   `L_P + alpha * L_IRM + beta * L_OCD` using exact gradients.
//! - [`eval`]: accuracy reports, shift suites, ablation and data-efficiency
//!   experiments.
//! - [`experiment`]: the command layer behind the `ecf-lab` binary (config
//!   files, presets, CSV/JSON outputs and run manifests).

pub mod ecf;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod feature_model;
pub mod fisher;
pub mod numeric;
pub mod seed;

pub use ecf::{ModelParams, TrainConfig, TrainHistory};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use feature_model::{BlockDims, Environment, FeatureSpec, OodShift, PairedDataset, Sample};
pub use fisher::LinearClassifier;
