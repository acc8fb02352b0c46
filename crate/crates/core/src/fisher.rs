//! Fisher's Linear Discriminant under the Gaussian block model.
//!
//! With diagonal covariances the three optimal classifiers are blockwise
//! `mu / var`:
//!
//! ```text
//! phi_ori = [phi_e, phi_u, phi_r]   (original data)
//! phi_cad = [phi_e, 0,     0    ]   (counterfactually augmented data)
//! phi_rob = [phi_e, phi_u, 0    ]   (causal features only)
//! ```
//!
//! `phi_cad` drops the unedited causal block (myopia); `phi_ori` leans on the
//! correlated block. Cosine similarity to `phi_rob` measures both failures,
//! and a convex combination of the two can beat either.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_model::{BlockDims, FeatureSpec, Sample};
use crate::numeric::{cosine, dot, norm, norm_sq};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub block_dims: BlockDims,
    pub weights: Vec<f64>,
}

impl LinearClassifier {
    pub fn new(block_dims: BlockDims, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != block_dims.total() {
            return Err(Error::DimensionMismatch {
                expected: block_dims.total(),
                actual: weights.len(),
            });
        }
        Ok(Self {
            block_dims,
            weights,
        })
    }

    pub fn edited(&self) -> &[f64] {
        &self.weights[self.block_dims.edited_range()]
    }

    pub fn unedited(&self) -> &[f64] {
        &self.weights[self.block_dims.unedited_range()]
    }

    pub fn correlated(&self) -> &[f64] {
        &self.weights[self.block_dims.correlated_range()]
    }

    pub fn causal(&self) -> &[f64] {
        &self.weights[self.block_dims.causal_range()]
    }

    /// `(|phi_e|, |phi_u|, |phi_r|)`.
    pub fn block_norms(&self) -> (f64, f64, f64) {
        (
            norm(self.edited()),
            norm(self.unedited()),
            norm(self.correlated()),
        )
    }

    pub fn score(&self, features: &[f64]) -> f64 {
        dot(&self.weights, features)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            block_dims: self.block_dims,
            weights: self.weights.iter().map(|w| w * c).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("classifier serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: LinearClassifier = serde_json::from_str(text)?;
        Self::new(c.block_dims, c.weights)
    }
}

/// Empirical Fisher discriminant `S_w^-1 (mean+ - mean-)`, where
/// `S_w = diag(var+) + diag(var-)` from unbiased per-class sample variances.
pub fn fld_fit(samples: &[Sample], block_dims: BlockDims) -> Result<LinearClassifier> {
    let d = block_dims.total();
    if let Some(s) = samples.iter().find(|s| s.features.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: s.features.len(),
        });
    }
    let class_stats = |label: i8| -> Result<(Vec<f64>, Vec<f64>)> {
        let members: Vec<&Sample> = samples.iter().filter(|s| s.label == label).collect();
        let n = members.len();
        if n < 2 {
            return Err(Error::InsufficientData { label, count: n });
        }
        let mut mean = vec![0.0; d];
        for s in &members {
            for (m, x) in mean.iter_mut().zip(&s.features) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for s in &members {
            for ((v, x), m) in var.iter_mut().zip(&s.features).zip(&mean) {
                let c = x - m;
                *v += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= (n - 1) as f64);
        Ok((mean, var))
    };
    let (mean_pos, var_pos) = class_stats(1)?;
    let (mean_neg, var_neg) = class_stats(-1)?;
    let weights = (0..d)
        .map(|j| {
            let scatter = var_pos[j] + var_neg[j];
            if scatter == 0.0 {
                Err(Error::Singular { dim: j })
            } else {
                Ok((mean_pos[j] - mean_neg[j]) / scatter)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LinearClassifier::new(block_dims, weights)
}

fn ratio(mu: &[f64], var: &[f64]) -> Vec<f64> {
    mu.iter().zip(var).map(|(m, v)| m / v).collect()
}

fn assemble(spec: &FeatureSpec, unedited: bool, correlated: bool) -> Result<LinearClassifier> {
    spec.validate()?;
    let mut w = ratio(&spec.mu_edited, &spec.var_edited);
    if unedited {
        w.extend(ratio(&spec.mu_unedited, &spec.var_unedited));
    } else {
        w.extend(std::iter::repeat_n(0.0, spec.d_unedited));
    }
    if correlated {
        w.extend(ratio(&spec.mu_correlated, &spec.var_correlated));
    } else {
        w.extend(std::iter::repeat_n(0.0, spec.d_correlated));
    }
    LinearClassifier::new(spec.dims(), w)
}

pub fn closed_form_ori(spec: &FeatureSpec) -> Result<LinearClassifier> {
    assemble(spec, true, true)
}

pub fn closed_form_cad(spec: &FeatureSpec) -> Result<LinearClassifier> {
    assemble(spec, false, false)
}

pub fn closed_form_rob(spec: &FeatureSpec) -> Result<LinearClassifier> {
    assemble(spec, true, false)
}

pub fn cosine_to_robust(classifier: &LinearClassifier, spec: &FeatureSpec) -> Result<f64> {
    let rob = closed_form_rob(spec)?;
    if classifier.block_dims != rob.block_dims {
        return Err(Error::DimensionMismatch {
            expected: rob.weights.len(),
            actual: classifier.weights.len(),
        });
    }
    if norm(&classifier.weights) == 0.0 {
        return Err(Error::ZeroNorm("classifier"));
    }
    cosine(&classifier.weights, &rob.weights).ok_or(Error::ZeroNorm("phi_rob"))
}

/// Squared block norms `(|phi_e|^2, |phi_u|^2, |phi_r|^2)` of `phi_ori`.
fn squared_norms(spec: &FeatureSpec) -> Result<(f64, f64, f64)> {
    let ori = closed_form_ori(spec)?;
    Ok((
        norm_sq(ori.edited()),
        norm_sq(ori.unedited()),
        norm_sq(ori.correlated()),
    ))
}

/// `cos(theta_ori) = 1 / sqrt(1 + |phi_r|^2 / (|phi_e|^2 + |phi_u|^2))`.
pub fn cos_ori_formula(spec: &FeatureSpec) -> Result<f64> {
    let (e, u, r) = squared_norms(spec)?;
    if e + u == 0.0 {
        return Err(Error::ZeroNorm("phi_rob"));
    }
    Ok(1.0 / (1.0 + r / (e + u)).sqrt())
}

/// `cos(theta_cad) = 1 / sqrt(1 + |phi_u|^2 / |phi_e|^2)`.
pub fn cos_cad_formula(spec: &FeatureSpec) -> Result<f64> {
    let (e, u, _) = squared_norms(spec)?;
    if e == 0.0 {
        return Err(Error::ZeroNorm("phi_cad"));
    }
    Ok(1.0 / (1.0 + u / e).sqrt())
}

/// `lambda * phi_ori + (1 - lambda) * phi_cad`.
pub fn interpolate(
    phi_ori: &LinearClassifier,
    phi_cad: &LinearClassifier,
    lambda: f64,
) -> Result<LinearClassifier> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::LambdaDomain(lambda));
    }
    if phi_ori.block_dims != phi_cad.block_dims {
        return Err(Error::DimensionMismatch {
            expected: phi_ori.weights.len(),
            actual: phi_cad.weights.len(),
        });
    }
    let weights = phi_ori
        .weights
        .iter()
        .zip(&phi_cad.weights)
        .map(|(o, c)| lambda * o + (1.0 - lambda) * c)
        .collect();
    LinearClassifier::new(phi_ori.block_dims, weights)
}

/// `|phi_u|^2 / (|phi_u|^2 + |phi_r|^2)`, the interpolation weight that
/// maximizes cosine similarity to `phi_rob`.
pub fn optimal_lambda(spec: &FeatureSpec) -> Result<f64> {
    let (_, u, r) = squared_norms(spec)?;
    if u + r == 0.0 {
        return Err(Error::DegenerateInterpolation);
    }
    Ok(u / (u + r))
}

/// Closed-form cosine of the optimally interpolated classifier:
///
/// ```text
///            |phi_e|^2 + |phi_u|^4 / (|phi_u|^2 + |phi_r|^2)
/// cos_I = -----------------------------------------------------------------------------
///         sqrt(|phi_e|^2 + |phi_u|^2) * sqrt(|phi_e|^2 + (|phi_u|^6 + |phi_u|^4 |phi_r|^2) / (|phi_u|^2 + |phi_r|^2)^2)
/// ```
pub fn cosine_interpolated(spec: &FeatureSpec) -> Result<f64> {
    let (e, u, r) = squared_norms(spec)?;
    if u + r == 0.0 {
        return Err(Error::DegenerateInterpolation);
    }
    if e + u == 0.0 {
        return Err(Error::ZeroNorm("phi_rob"));
    }
    let s = u + r;
    let num = e + u * u / s;
    let den = ((e + u) * (e + (u * u * u + u * u * r) / (s * s))).sqrt();
    Ok(num / den)
}

/// Correlated-block weights that a CAD-trained discriminant picks up when
/// pairs are misaligned by `delta_hr = sum h_r^+ - sum h_r^-`:
/// `(2 (diag(mu_r^2) + var_r))^-1 * delta_hr / (2 n)`.
pub fn misaligned_cad_block(spec: &FeatureSpec, delta_hr: &[f64], n: usize) -> Result<Vec<f64>> {
    spec.validate()?;
    if delta_hr.len() != spec.d_correlated {
        return Err(Error::DimensionMismatch {
            expected: spec.d_correlated,
            actual: delta_hr.len(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    Ok(delta_hr
        .iter()
        .zip(&spec.mu_correlated)
        .zip(&spec.var_correlated)
        .map(|((d, m), v)| d / (2.0 * n as f64) / (2.0 * (m * m + v)))
        .collect())
}

/// Closed-form myopia summary of a spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MyopiaAnalysis {
    pub norm_e: f64,
    pub norm_u: f64,
    pub norm_r: f64,
    pub cos_ori: f64,
    pub cos_cad: f64,
    /// `None` when `|phi_u| = |phi_r| = 0`.
    pub lambda_star: Option<f64>,
    pub cos_interp: Option<f64>,
    pub phi_ori: LinearClassifier,
    pub phi_cad: LinearClassifier,
    pub phi_rob: LinearClassifier,
}

pub fn analyze(spec: &FeatureSpec) -> Result<MyopiaAnalysis> {
    let phi_ori = closed_form_ori(spec)?;
    let phi_cad = closed_form_cad(spec)?;
    let phi_rob = closed_form_rob(spec)?;
    let (norm_e, norm_u, norm_r) = phi_ori.block_norms();
    let cos_ori = cosine_to_robust(&phi_ori, spec)?;
    let cos_cad = cosine_to_robust(&phi_cad, spec)?;
    let (lambda_star, cos_interp) = match (optimal_lambda(spec), cosine_interpolated(spec)) {
        (Ok(l), Ok(c)) => (Some(l), Some(c)),
        (Err(Error::DegenerateInterpolation), _) => (None, None),
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    Ok(MyopiaAnalysis {
        norm_e,
        norm_u,
        norm_r,
        cos_ori,
        cos_cad,
        lambda_star,
        cos_interp,
        phi_ori,
        phi_cad,
        phi_rob,
    })
}
