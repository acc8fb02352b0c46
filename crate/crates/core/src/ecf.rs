//! ECF training: a linear encoder under a two-row label-vector classifier,
//! optimized on counterfactual pairs with
//!
//! ```text
//! L = L_P + alpha * L_IRM + beta * L_OCD
//! ```
//!
//! - `L_P`: mean cross-entropy over every sentence of the batch.
//! - `L_IRM`: sum over the ORIGINAL and EDITED environments of the squared
//!   derivative of the environment risk with respect to a scalar `omega`
//!   multiplying the logits, taken at `omega = 1`.
//! - `L_OCD`: mean over pairs of `|h_perp(Y) - h*_perp(Y*)|^2`, where
//!   `h_perp(Y)` is the representation minus its projection on the unit
//!   label vector of the sample's gold class.
//!
//! Class index 0 is the negative label, index 1 the positive label.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_model::{BlockDims, PairedDataset, Sample};
use crate::fisher::LinearClassifier;
use crate::numeric::compensated_mean;
use crate::seed::{derive_seed, derived_rng, domain};

pub const CLASS_NEG: usize = 0;
pub const CLASS_POS: usize = 1;
pub const N_CLASSES: usize = 2;

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.05;

pub fn class_index(label: i8) -> usize {
    if label > 0 {
        CLASS_POS
    } else {
        CLASS_NEG
    }
}

/// Encoder `W` (`d_repr x d_input`), classifier rows `C` (`2 x d_repr`) and
/// bias `b`. Logits are `C W x + b`. The same struct holds gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: Array2<f64>,
    pub classifier: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    d_repr: usize,
    d_input: usize,
    /// Row-major `d_repr x d_input`.
    encoder: Vec<f64>,
    /// Row-major `2 x d_repr`; row k is the label vector of class k.
    classifier: Vec<f64>,
    bias: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(d_input: usize, d_repr: usize) -> Self {
        Self {
            encoder: Array2::zeros((d_repr, d_input)),
            classifier: Array2::zeros((N_CLASSES, d_repr)),
            bias: Array1::zeros(N_CLASSES),
        }
    }

    /// Every entry uniform in `[-INIT_SCALE, INIT_SCALE]`.
    pub fn init(d_input: usize, d_repr: usize, seed: u64) -> Self {
        let mut rng = derived_rng(seed, domain::INIT, 0);
        let mut p = Self::zeros(d_input, d_repr);
        for v in p
            .encoder
            .iter_mut()
            .chain(p.classifier.iter_mut())
            .chain(p.bias.iter_mut())
        {
            *v = rng.random_range(-INIT_SCALE..=INIT_SCALE);
        }
        p
    }

    pub fn d_input(&self) -> usize {
        self.encoder.ncols()
    }

    pub fn d_repr(&self) -> usize {
        self.encoder.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.encoder.len() + self.classifier.len() + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    fn iter(&self) -> impl Iterator<Item = &f64> {
        self.encoder
            .iter()
            .chain(self.classifier.iter())
            .chain(self.bias.iter())
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.encoder
            .iter_mut()
            .chain(self.classifier.iter_mut())
            .chain(self.bias.iter_mut())
    }

    /// Encoder, classifier and bias entries in row-major order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn from_flat(d_input: usize, d_repr: usize, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(d_input, d_repr);
        if flat.len() != p.n_params() {
            return Err(Error::DimensionMismatch {
                expected: p.n_params(),
                actual: flat.len(),
            });
        }
        p.iter_mut().zip(flat).for_each(|(d, s)| *d = *s);
        Ok(p)
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        self.encoder.scaled_add(scale, &other.encoder);
        self.classifier.scaled_add(scale, &other.classifier);
        self.bias.scaled_add(scale, &other.bias);
    }

    pub fn representation(&self, features: &[f64]) -> Array1<f64> {
        self.encoder.dot(&Array1::from(features.to_vec()))
    }

    pub fn logits(&self, features: &[f64]) -> Array1<f64> {
        self.classifier.dot(&self.representation(features)) + &self.bias
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.d_input() {
            return Err(Error::DimensionMismatch {
                expected: self.d_input(),
                actual: features.len(),
            });
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite("features".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let rec = ModelRecord {
            d_repr: self.d_repr(),
            d_input: self.d_input(),
            encoder: self.encoder.iter().copied().collect(),
            classifier: self.classifier.iter().copied().collect(),
            bias: self.bias.to_vec(),
        };
        serde_json::to_string_pretty(&rec).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: ModelRecord = serde_json::from_str(text)?;
        let shape_err =
            |what: &str| Error::Config(format!("model JSON: {what} has the wrong length"));
        let encoder = Array2::from_shape_vec((rec.d_repr, rec.d_input), rec.encoder)
            .map_err(|_| shape_err("encoder"))?;
        let classifier = Array2::from_shape_vec((N_CLASSES, rec.d_repr), rec.classifier)
            .map_err(|_| shape_err("classifier"))?;
        if rec.bias.len() != N_CLASSES {
            return Err(shape_err("bias"));
        }
        let p = Self {
            encoder,
            classifier,
            bias: Array1::from(rec.bias),
        };
        if !p.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(p)
    }
}

fn default_alpha() -> f64 {
    1.6
}
fn default_beta() -> f64 {
    0.1
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    100
}
fn default_batch_pairs() -> usize {
    32
}

/// Optimization settings. Defaults follow the BiLSTM sentiment row of the
/// reference hyperparameter table: alpha 1.6, beta 0.1, learning rate 1e-3,
/// 100 epochs, batches of 32 pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_pairs")]
    pub batch_pairs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Representation width; `None` uses the input dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_repr: Option<usize>,
    /// Freeze the encoder to the identity (requires `d_repr` = input dimension).
    #[serde(default)]
    pub identity_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            beta: default_beta(),
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            batch_pairs: default_batch_pairs(),
            seed: 0,
            d_repr: None,
            identity_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if self.batch_pairs == 0 {
            return bad("batch_pairs must be >= 1".into());
        }
        if self.d_repr == Some(0) {
            return bad("d_repr must be >= 1".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("TrainConfig is always representable as TOML")
    }

    pub fn with_weights(&self, alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub prediction: f64,
    pub irm: f64,
    pub ocd: f64,
    pub total: f64,
}

impl LossComponents {
    fn assemble(prediction: f64, irm: f64, ocd: f64, alpha: f64, beta: f64) -> Self {
        Self {
            prediction,
            irm,
            ocd,
            total: prediction + alpha * irm + beta * ocd,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossComponents,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Columns `epoch, loss_p, loss_irm, loss_ocd, loss_total, train_acc`,
    /// floats at 5 decimals.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "epoch",
            "loss_p",
            "loss_irm",
            "loss_ocd",
            "loss_total",
            "train_acc",
        ])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                format!("{:.5}", r.loss.prediction),
                format!("{:.5}", r.loss.irm),
                format!("{:.5}", r.loss.ocd),
                format!("{:.5}", r.loss.total),
                format!("{:.5}", r.train_accuracy),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn softmax(z: &Array1<f64>) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = z.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

fn log_sum_exp(z: &Array1<f64>) -> f64 {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_sample(params: &ModelParams, s: &Sample) -> Result<()> {
    params.check_features(&s.features)?;
    if s.label != 1 && s.label != -1 {
        return Err(Error::InvalidArgument(format!(
            "label must be +1 or -1, got {}",
            s.label
        )));
    }
    Ok(())
}

/// Softmax of `C W x + b`, ordered `[negative, positive]`.
pub fn predict_proba(params: &ModelParams, features: &[f64]) -> Result<[f64; 2]> {
    params.check_features(features)?;
    let p = softmax(&params.logits(features));
    Ok([p[CLASS_NEG], p[CLASS_POS]])
}

/// Predicted label; ties go to the positive class.
pub fn predict_label(params: &ModelParams, features: &[f64]) -> Result<i8> {
    let p = predict_proba(params, features)?;
    Ok(if p[CLASS_POS] >= p[CLASS_NEG] { 1 } else { -1 })
}

/// Backpropagates `dz` (gradient w.r.t. logits) and `extra_dh` (gradient
/// w.r.t. the representation) of one sample into `grad`.
fn backprop(
    params: &ModelParams,
    x: &[f64],
    h: &Array1<f64>,
    dz: Option<&Array1<f64>>,
    extra_dh: Option<&Array1<f64>>,
    grad: &mut ModelParams,
) {
    let mut dh = Array1::zeros(params.d_repr());
    if let Some(dz) = dz {
        for k in 0..N_CLASSES {
            grad.bias[k] += dz[k];
            for j in 0..h.len() {
                grad.classifier[[k, j]] += dz[k] * h[j];
            }
        }
        dh += &params.classifier.t().dot(dz);
    }
    if let Some(e) = extra_dh {
        dh += e;
    }
    for (i, dhi) in dh.iter().enumerate() {
        if *dhi == 0.0 {
            continue;
        }
        for (j, xj) in x.iter().enumerate() {
            grad.encoder[[i, j]] += dhi * xj;
        }
    }
}

fn prediction_impl(
    params: &ModelParams,
    batch: &[&Sample],
    grad: Option<&mut ModelParams>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut losses = Vec::with_capacity(batch.len());
    let mut grad = grad;
    for s in batch {
        check_sample(params, s)?;
        let h = params.representation(&s.features);
        let z = params.classifier.dot(&h) + &params.bias;
        let gold = class_index(s.label);
        losses.push(log_sum_exp(&z) - z[gold]);
        if let Some(g) = grad.as_deref_mut() {
            let mut dz = softmax(&z);
            dz[gold] -= 1.0;
            dz /= n;
            backprop(params, &s.features, &h, Some(&dz), None, g);
        }
    }
    Ok(compensated_mean(losses))
}

/// Derivative of the environment risk `R(omega * logits)` at `omega = 1`:
/// mean over samples of `sum_k p_k z_k - z_gold`. With `grad`, adds
/// `weight * d(derivative)/d(params)`.
fn omega_derivative(
    params: &ModelParams,
    env: &[&Sample],
    weight_grad: Option<(f64, &mut ModelParams)>,
) -> Result<f64> {
    if env.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = env.len() as f64;
    let mut terms = Vec::with_capacity(env.len());
    let mut weight_grad = weight_grad;
    for s in env {
        check_sample(params, s)?;
        let h = params.representation(&s.features);
        let z = params.classifier.dot(&h) + &params.bias;
        let p = softmax(&z);
        let gold = class_index(s.label);
        let zbar = p.dot(&z);
        terms.push(zbar - z[gold]);
        if let Some((w, g)) = weight_grad.as_mut() {
            // d(p.z - z_gold)/dz_j = p_j (1 + z_j - zbar) - [j == gold]
            let mut dz = Array1::from_shape_fn(N_CLASSES, |j| p[j] * (1.0 + z[j] - zbar));
            dz[gold] -= 1.0;
            dz *= *w / n;
            backprop(params, &s.features, &h, Some(&dz), None, g);
        }
    }
    Ok(compensated_mean(terms))
}

fn irm_impl(
    params: &ModelParams,
    envs: &[Vec<&Sample>],
    grad: Option<&mut ModelParams>,
) -> Result<f64> {
    if envs.len() < 2 {
        return Err(Error::TooFewEnvironments(envs.len()));
    }
    let mut grad = grad;
    let mut penalty = 0.0;
    for env in envs {
        let g = omega_derivative(params, env, None)?;
        penalty += g * g;
        if let Some(acc) = grad.as_deref_mut() {
            omega_derivative(params, env, Some((2.0 * g, acc)))?;
        }
    }
    Ok(penalty)
}

fn unit_rows(params: &ModelParams) -> Result<(Vec<Array1<f64>>, Vec<f64>)> {
    let mut units = Vec::with_capacity(N_CLASSES);
    let mut norms = Vec::with_capacity(N_CLASSES);
    for k in 0..N_CLASSES {
        let row = params.classifier.row(k).to_owned();
        let n = row.dot(&row).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateClassifier { class: k });
        }
        units.push(row / n);
        norms.push(n);
    }
    Ok((units, norms))
}

fn ocd_impl(
    params: &ModelParams,
    pairs: &[(&Sample, &Sample)],
    grad: Option<&mut ModelParams>,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (units, norms) = unit_rows(params)?;
    let n = pairs.len() as f64;
    let mut grad = grad;
    let mut d_units: Vec<Array1<f64>> = vec![Array1::zeros(params.d_repr()); N_CLASSES];
    let mut losses = Vec::with_capacity(pairs.len());
    for (index, (orig, edit)) in pairs.iter().enumerate() {
        check_sample(params, orig)?;
        check_sample(params, edit)?;
        if orig.label == edit.label {
            return Err(Error::PairLabels { index });
        }
        let members = [*orig, *edit];
        let hs: Vec<Array1<f64>> = members
            .iter()
            .map(|s| params.representation(&s.features))
            .collect();
        let ks: Vec<usize> = members.iter().map(|s| class_index(s.label)).collect();
        let perp: Vec<Array1<f64>> = hs
            .iter()
            .zip(&ks)
            .map(|(h, &k)| h - &(&units[k] * h.dot(&units[k])))
            .collect();
        let diff = &perp[0] - &perp[1];
        losses.push(diff.dot(&diff));
        if let Some(g) = grad.as_deref_mut() {
            for (m, sign) in [(0usize, 1.0), (1usize, -1.0)] {
                let u = &units[ks[m]];
                let h = &hs[m];
                // gradient w.r.t. this member's orthogonal component
                let ga = &diff * (2.0 * sign / n);
                let ga_u = ga.dot(u);
                let h_u = h.dot(u);
                let dh = &ga - &(u * ga_u);
                d_units[ks[m]] -= &(h * ga_u + &ga * h_u);
                backprop(params, &members[m].features, h, None, Some(&dh), g);
            }
        }
    }
    if let Some(g) = grad {
        for k in 0..N_CLASSES {
            let u = &units[k];
            let du = &d_units[k];
            let dc = (du - &(u * du.dot(u))) / norms[k];
            let mut row = g.classifier.row_mut(k);
            row += &dc;
        }
    }
    Ok(compensated_mean(losses))
}

fn refs(samples: &[Sample]) -> Vec<&Sample> {
    samples.iter().collect()
}

/// Mean cross-entropy of [`predict_proba`] against the gold labels.
pub fn prediction_loss(params: &ModelParams, batch: &[Sample]) -> Result<f64> {
    prediction_impl(params, &refs(batch), None)
}

pub fn prediction_loss_grad(params: &ModelParams, batch: &[Sample]) -> Result<(f64, ModelParams)> {
    let mut g = ModelParams::zeros(params.d_input(), params.d_repr());
    let v = prediction_impl(params, &refs(batch), Some(&mut g))?;
    Ok((v, g))
}

/// `d R_env(omega * M) / d omega` at `omega = 1` for one environment.
pub fn omega_gradient(params: &ModelParams, env: &[Sample]) -> Result<f64> {
    omega_derivative(params, &refs(env), None)
}

/// Sum over environments of the squared omega-derivative of each risk.
pub fn irm_penalty(params: &ModelParams, env_batches: &[Vec<Sample>]) -> Result<f64> {
    let envs: Vec<Vec<&Sample>> = env_batches.iter().map(|e| refs(e)).collect();
    irm_impl(params, &envs, None)
}

pub fn irm_penalty_grad(
    params: &ModelParams,
    env_batches: &[Vec<Sample>],
) -> Result<(f64, ModelParams)> {
    let envs: Vec<Vec<&Sample>> = env_batches.iter().map(|e| refs(e)).collect();
    let mut g = ModelParams::zeros(params.d_input(), params.d_repr());
    let v = irm_impl(params, &envs, Some(&mut g))?;
    Ok((v, g))
}

/// Mean squared distance between the gold-label orthogonal components of
/// each pair's representations.
pub fn ocd_penalty(params: &ModelParams, pairs: &[(Sample, Sample)]) -> Result<f64> {
    let p: Vec<(&Sample, &Sample)> = pairs.iter().map(|(a, b)| (a, b)).collect();
    ocd_impl(params, &p, None)
}

pub fn ocd_penalty_grad(
    params: &ModelParams,
    pairs: &[(Sample, Sample)],
) -> Result<(f64, ModelParams)> {
    let p: Vec<(&Sample, &Sample)> = pairs.iter().map(|(a, b)| (a, b)).collect();
    let mut g = ModelParams::zeros(params.d_input(), params.d_repr());
    let v = ocd_impl(params, &p, Some(&mut g))?;
    Ok((v, g))
}

fn total_impl(
    params: &ModelParams,
    pairs: &[(&Sample, &Sample)],
    alpha: f64,
    beta: f64,
    grad: Option<&mut ModelParams>,
) -> Result<LossComponents> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let originals: Vec<&Sample> = pairs.iter().map(|(o, _)| *o).collect();
    let edited: Vec<&Sample> = pairs.iter().map(|(_, e)| *e).collect();
    let sentences: Vec<&Sample> = pairs.iter().flat_map(|(o, e)| [*o, *e]).collect();
    let mut grad = grad;

    let prediction = prediction_impl(params, &sentences, grad.as_deref_mut())?;

    let irm = if alpha > 0.0 {
        let envs = vec![originals, edited];
        match grad.as_deref_mut() {
            Some(g) => {
                let mut gi = ModelParams::zeros(params.d_input(), params.d_repr());
                let v = irm_impl(params, &envs, Some(&mut gi))?;
                g.add_scaled(&gi, alpha);
                v
            }
            None => irm_impl(params, &envs, None)?,
        }
    } else {
        irm_impl(params, &[originals, edited], None)?
    };

    let ocd = if beta > 0.0 {
        match grad {
            Some(g) => {
                let mut go = ModelParams::zeros(params.d_input(), params.d_repr());
                let v = ocd_impl(params, pairs, Some(&mut go))?;
                g.add_scaled(&go, beta);
                v
            }
            None => ocd_impl(params, pairs, None)?,
        }
    } else {
        // OCD is still reported when beta = 0 so ablation rows stay
        // comparable; a degenerate classifier row only matters if it is used.
        match ocd_impl(params, pairs, None) {
            Ok(v) => v,
            Err(Error::DegenerateClassifier { .. }) => f64::NAN,
            Err(e) => return Err(e),
        }
    };

    let ocd_term = if beta > 0.0 { ocd } else { 0.0 };
    let mut c = LossComponents::assemble(prediction, irm, ocd_term, alpha, beta);
    c.ocd = ocd;
    Ok(c)
}

/// `L_P` over all 2B sentences, `L_IRM` over the ORIGINAL/EDITED
/// environments and `L_OCD` over the pairs, combined with `config.alpha`
/// and `config.beta`. `components.total` is the returned scalar.
pub fn total_loss(
    params: &ModelParams,
    batch_pairs: &[(Sample, Sample)],
    config: &TrainConfig,
) -> Result<(f64, LossComponents)> {
    let p: Vec<(&Sample, &Sample)> = batch_pairs.iter().map(|(a, b)| (a, b)).collect();
    let c = total_impl(params, &p, config.alpha, config.beta, None)?;
    Ok((c.total, c))
}

pub fn total_loss_grad(
    params: &ModelParams,
    batch_pairs: &[(Sample, Sample)],
    config: &TrainConfig,
) -> Result<(LossComponents, ModelParams)> {
    let p: Vec<(&Sample, &Sample)> = batch_pairs.iter().map(|(a, b)| (a, b)).collect();
    let mut g = ModelParams::zeros(params.d_input(), params.d_repr());
    let c = total_impl(params, &p, config.alpha, config.beta, Some(&mut g))?;
    Ok((c, g))
}

/// Decision vector `(row_pos - row_neg) W` over the input features.
pub fn effective_linear_map(params: &ModelParams, dims: BlockDims) -> Result<LinearClassifier> {
    let diff = &params.classifier.row(CLASS_POS) - &params.classifier.row(CLASS_NEG);
    let w = diff.dot(&params.encoder);
    LinearClassifier::new(dims, w.to_vec())
}

pub fn accuracy(params: &ModelParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut correct = 0usize;
    for s in samples {
        if predict_label(params, &s.features)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn initial_params(d_input: usize, config: &TrainConfig) -> Result<ModelParams> {
    let d_repr = config.d_repr.unwrap_or(d_input);
    let mut p = ModelParams::init(d_input, d_repr, config.seed);
    if config.identity_encoder {
        if d_repr != d_input {
            return Err(Error::Config(format!(
                "identity_encoder needs d_repr = {d_input}, got {d_repr}"
            )));
        }
        p.encoder = Array2::eye(d_input);
    }
    Ok(p)
}

fn sgd_step(
    params: &mut ModelParams,
    grad: &mut ModelParams,
    config: &TrainConfig,
    epoch: usize,
) -> Result<()> {
    if config.identity_encoder {
        grad.encoder.fill(0.0);
    }
    if !grad.is_finite() {
        return Err(Error::Divergence {
            epoch,
            learning_rate: config.learning_rate,
            what: "gradient",
        });
    }
    params.add_scaled(grad, -config.learning_rate);
    if !params.is_finite() {
        return Err(Error::Divergence {
            epoch,
            learning_rate: config.learning_rate,
            what: "parameters",
        });
    }
    Ok(())
}

fn check_record(loss: &LossComponents, epoch: usize, config: &TrainConfig) -> Result<()> {
    if !loss.total.is_finite() {
        return Err(Error::Divergence {
            epoch,
            learning_rate: config.learning_rate,
            what: "total loss",
        });
    }
    Ok(())
}

/// Minibatch gradient descent on [`total_loss`] over shuffled batches of
/// `config.batch_pairs` pairs. After every epoch the loss components are
/// recomputed on the whole dataset and recorded.
pub fn train_ecf(
    data: &PairedDataset,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d_input = data.spec.dimension();
    let mut params = initial_params(d_input, config)?;
    let all: Vec<(&Sample, &Sample)> = data.pairs.iter().map(|(a, b)| (a, b)).collect();
    let pooled: Vec<Sample> = data.pooled();
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 1..=config.epochs {
        let mut rng = derived_rng(config.seed, domain::SHUFFLE, epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_pairs) {
            let batch: Vec<(&Sample, &Sample)> = chunk.iter().map(|&i| all[i]).collect();
            let mut g = ModelParams::zeros(d_input, params.d_repr());
            let c = total_impl(&params, &batch, config.alpha, config.beta, Some(&mut g))?;
            check_record(&c, epoch, config)?;
            sgd_step(&mut params, &mut g, config, epoch)?;
        }
        let loss = total_impl(&params, &all, config.alpha, config.beta, None)?;
        check_record(&loss, epoch, config)?;
        history.records.push(EpochRecord {
            epoch,
            loss,
            train_accuracy: accuracy(&params, &pooled)?,
        });
    }
    Ok((params, history))
}

/// Prediction-loss-only training on unpaired sentences, batches of
/// `2 * batch_pairs` sentences so step counts match [`train_ecf`] on the
/// same number of sentences. Needs `alpha = beta = 0`: the invariance
/// penalty has a single environment and OCD has no pairs.
pub fn train_original(
    samples: &[Sample],
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    if config.alpha != 0.0 || config.beta != 0.0 {
        return Err(Error::InvalidArgument(
            "original-only training requires alpha = beta = 0".into(),
        ));
    }
    let first = samples.first().ok_or(Error::EmptyBatch)?;
    let d_input = first.features.len();
    let mut params = initial_params(d_input, config)?;
    let all: Vec<&Sample> = samples.iter().collect();
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut history = TrainHistory::default();
    for epoch in 1..=config.epochs {
        let mut rng = derived_rng(config.seed, domain::SHUFFLE, epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(2 * config.batch_pairs) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| all[i]).collect();
            let mut g = ModelParams::zeros(d_input, params.d_repr());
            let p = prediction_impl(&params, &batch, Some(&mut g))?;
            check_record(
                &LossComponents::assemble(p, 0.0, 0.0, 0.0, 0.0),
                epoch,
                config,
            )?;
            sgd_step(&mut params, &mut g, config, epoch)?;
        }
        let p = prediction_impl(&params, &all, None)?;
        let loss = LossComponents::assemble(p, 0.0, 0.0, 0.0, 0.0);
        check_record(&loss, epoch, config)?;
        history.records.push(EpochRecord {
            epoch,
            loss,
            train_accuracy: accuracy(&params, samples)?,
        });
    }
    Ok((params, history))
}

/// Seed of an independent training run `index` under a master seed.
pub fn run_seed(master: u64, index: u64) -> u64 {
    derive_seed(master, domain::TRAIN, index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_model::{make_paired_dataset, Environment, FeatureSpec};
    use rand::Rng;

    fn sample(features: Vec<f64>, label: i8) -> Sample {
        Sample {
            features,
            label,
            pair_id: None,
            environment: Environment::Original,
        }
    }

    fn random_params(d_input: usize, d_repr: usize, rng: &mut impl Rng) -> ModelParams {
        let flat: Vec<f64> = (0..(d_repr * d_input + 2 * d_repr + 2))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        ModelParams::from_flat(d_input, d_repr, &flat).unwrap()
    }

    fn random_pairs(n: usize, d: usize, rng: &mut impl Rng) -> Vec<(Sample, Sample)> {
        (0..n)
            .map(|i| {
                let y: i8 = if i % 2 == 0 { 1 } else { -1 };
                let a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
                let b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
                (sample(a, y), sample(b, -y))
            })
            .collect()
    }

    /// Central finite differences over every parameter.
    fn finite_difference<F: Fn(&ModelParams) -> f64>(p: &ModelParams, f: F) -> Vec<f64> {
        let h = 1e-5;
        let base = p.to_flat();
        (0..base.len())
            .map(|i| {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[i] += h;
                minus[i] -= h;
                let fp = f(&ModelParams::from_flat(p.d_input(), p.d_repr(), &plus).unwrap());
                let fm = f(&ModelParams::from_flat(p.d_input(), p.d_repr(), &minus).unwrap());
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let p = ModelParams::init(3, 2, 1);
        let mut p = p;
        p.classifier.fill(0.0);
        p.bias.fill(0.0);
        assert_eq!(predict_proba(&p, &[1.0, -3.0, 7.0]).unwrap(), [0.5, 0.5]);
        let batch = vec![
            sample(vec![1.0, 2.0, 3.0], 1),
            sample(vec![0.0, 1.0, -1.0], -1),
        ];
        let l = prediction_loss(&p, &batch).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn softmax_hand_values_and_shift_invariance() {
        let mut p = ModelParams::zeros(1, 1);
        p.bias[CLASS_NEG] = 3f64.ln();
        let probs = predict_proba(&p, &[0.0]).unwrap();
        assert!((probs[0] - 0.75).abs() < 1e-12 && (probs[1] - 0.25).abs() < 1e-12);
        assert!((probs[0] + probs[1] - 1.0).abs() < 1e-12);
        let mut q = p.clone();
        q.bias += 123.0;
        let shifted = predict_proba(&q, &[0.0]).unwrap();
        assert!((shifted[0] - probs[0]).abs() < 1e-12);
        let batch = vec![sample(vec![0.0], -1), sample(vec![0.0], -1)];
        let l = prediction_loss(&p, &batch).unwrap();
        assert!((l + 0.75f64.ln()).abs() < 1e-12);
        assert!((prediction_loss(&q, &batch).unwrap() - l).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = ModelParams::init(2, 2, 0);
        assert!(matches!(
            predict_proba(&p, &[f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(prediction_loss(&p, &[]), Err(Error::EmptyBatch)));
        let env = vec![sample(vec![1.0, 1.0], 1)];
        assert_eq!(irm_penalty(&p, &[env]), Err(Error::TooFewEnvironments(1)));
        let mut z = p.clone();
        z.classifier.row_mut(1).fill(0.0);
        let pair = vec![(sample(vec![1.0, 0.0], 1), sample(vec![0.0, 1.0], -1))];
        assert_eq!(
            ocd_penalty(&z, &pair),
            Err(Error::DegenerateClassifier { class: 1 })
        );
        let same = vec![(sample(vec![1.0, 0.0], 1), sample(vec![0.0, 1.0], 1))];
        assert_eq!(ocd_penalty(&p, &same), Err(Error::PairLabels { index: 0 }));
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let mut rng = crate::seed::rng_from_seed(3);
        let p = random_params(4, 3, &mut rng);
        let mut batch: Vec<Sample> = random_pairs(50, 4, &mut rng)
            .into_iter()
            .flat_map(|(a, b)| [a, b])
            .collect();
        let a = prediction_loss(&p, &batch).unwrap();
        batch.reverse();
        batch.swap(3, 70);
        let b = prediction_loss(&p, &batch).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn irm_zero_at_zero_logits_and_sums_over_environments() {
        let mut p = ModelParams::init(2, 2, 0);
        p.classifier.fill(0.0);
        p.bias.fill(0.0);
        let env = vec![sample(vec![1.0, 2.0], 1), sample(vec![-1.0, 0.5], -1)];
        assert_eq!(irm_penalty(&p, &[env.clone(), env.clone()]).unwrap(), 0.0);

        let mut rng = crate::seed::rng_from_seed(5);
        let p = random_params(2, 2, &mut rng);
        let d = omega_gradient(&p, &env).unwrap();
        let two = irm_penalty(&p, &[env.clone(), env.clone()]).unwrap();
        let three = irm_penalty(&p, &[env.clone(), env.clone(), env.clone()]).unwrap();
        assert!((two - 2.0 * d * d).abs() < 1e-15);
        assert!((three - two - d * d).abs() < 1e-15);
    }

    #[test]
    fn omega_derivative_matches_finite_difference() {
        let mut rng = crate::seed::rng_from_seed(9);
        for _ in 0..20 {
            let p = random_params(4, 3, &mut rng);
            let env: Vec<Sample> = random_pairs(6, 4, &mut rng)
                .into_iter()
                .flat_map(|(a, b)| [a, b])
                .collect();
            let risk = |omega: f64| {
                let mut q = p.clone();
                q.classifier *= omega;
                q.bias *= omega;
                prediction_loss(&q, &env).unwrap()
            };
            let h = 1e-5;
            let numeric = (risk(1.0 + h) - risk(1.0 - h)) / (2.0 * h);
            let analytic = omega_gradient(&p, &env).unwrap();
            assert!(
                (numeric - analytic).abs() <= 1e-4 * analytic.abs().max(1e-6),
                "{numeric} vs {analytic}"
            );
        }
    }

    #[test]
    fn ocd_hand_projections() {
        let mut p = ModelParams::zeros(2, 2);
        p.encoder = Array2::eye(2);
        p.classifier = ndarray::array![[1.0, 0.0], [1.0, 0.0]];
        let pair = |a: [f64; 2], b: [f64; 2]| vec![(sample(a.to_vec(), 1), sample(b.to_vec(), -1))];
        assert_eq!(ocd_penalty(&p, &pair([3.0, 4.0], [3.0, 4.0])).unwrap(), 0.0);
        assert_eq!(ocd_penalty(&p, &pair([3.0, 4.0], [7.0, 4.0])).unwrap(), 0.0);
        assert!((ocd_penalty(&p, &pair([3.0, 4.0], [7.0, 6.0])).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn component_gradients_match_finite_differences() {
        let mut rng = crate::seed::rng_from_seed(12);
        for _ in 0..20 {
            let p = random_params(5, 3, &mut rng);
            let pairs = random_pairs(8, 5, &mut rng);
            let sentences: Vec<Sample> = pairs
                .iter()
                .flat_map(|(a, b)| [a.clone(), b.clone()])
                .collect();
            let envs = vec![
                pairs.iter().map(|(a, _)| a.clone()).collect::<Vec<_>>(),
                pairs.iter().map(|(_, b)| b.clone()).collect::<Vec<_>>(),
            ];

            let (_, g) = prediction_loss_grad(&p, &sentences).unwrap();
            let n = finite_difference(&p, |q| prediction_loss(q, &sentences).unwrap());
            assert!(max_rel_err(&g.to_flat(), &n) <= 1e-4);

            let (_, g) = irm_penalty_grad(&p, &envs).unwrap();
            let n = finite_difference(&p, |q| irm_penalty(q, &envs).unwrap());
            assert!(max_rel_err(&g.to_flat(), &n) <= 1e-4);

            let (_, g) = ocd_penalty_grad(&p, &pairs).unwrap();
            let n = finite_difference(&p, |q| ocd_penalty(q, &pairs).unwrap());
            assert!(max_rel_err(&g.to_flat(), &n) <= 1e-4);

            let cfg = TrainConfig::default();
            let (_, g) = total_loss_grad(&p, &pairs, &cfg).unwrap();
            let n = finite_difference(&p, |q| total_loss(q, &pairs, &cfg).unwrap().0);
            assert!(max_rel_err(&g.to_flat(), &n) <= 1e-4);
        }
    }

    #[test]
    fn total_loss_bookkeeping_and_ablation_identities() {
        let mut rng = crate::seed::rng_from_seed(4);
        let p = random_params(3, 3, &mut rng);
        let pairs = random_pairs(10, 3, &mut rng);
        let sentences: Vec<Sample> = pairs
            .iter()
            .flat_map(|(a, b)| [a.clone(), b.clone()])
            .collect();
        let lp = prediction_loss(&p, &sentences).unwrap();
        let base = TrainConfig::default();

        let (t, c) = total_loss(&p, &pairs, &base.with_weights(0.0, 0.0)).unwrap();
        assert_eq!(t, lp);
        assert_eq!(c.prediction, lp);

        let (t, c) = total_loss(&p, &pairs, &base.with_weights(0.0, 0.1)).unwrap();
        assert_eq!(t, c.prediction + 0.1 * c.ocd);
        let (t, c) = total_loss(&p, &pairs, &base.with_weights(1.6, 0.0)).unwrap();
        assert_eq!(t, c.prediction + 1.6 * c.irm);

        let (t, c) = total_loss(&p, &pairs, &base).unwrap();
        assert!((c.prediction + 1.6 * c.irm + 0.1 * c.ocd - t).abs() <= 1e-10);
    }

    #[test]
    fn effective_map_composition() {
        let mut p = ModelParams::zeros(3, 3);
        p.encoder = Array2::eye(3);
        let w = ndarray::array![0.5, -1.0, 2.0];
        p.classifier.row_mut(CLASS_POS).assign(&w);
        p.classifier.row_mut(CLASS_NEG).assign(&(-&w));
        let dims = BlockDims::new(1, 1, 1);
        assert_eq!(
            effective_linear_map(&p, dims).unwrap().weights,
            vec![1.0, -2.0, 4.0]
        );
        let mut q = p.clone();
        for k in 0..2 {
            let mut r = q.classifier.row_mut(k);
            r += &ndarray::array![3.0, 1.0, -7.0];
        }
        assert_eq!(
            effective_linear_map(&q, dims).unwrap(),
            effective_linear_map(&p, dims).unwrap()
        );
    }

    #[test]
    fn config_defaults_follow_reference_table() {
        let c = TrainConfig::from_toml_str("epochs = 3\n").unwrap();
        assert_eq!(
            (c.alpha, c.beta, c.learning_rate, c.batch_pairs),
            (1.6, 0.1, 1e-3, 32)
        );
        assert_eq!(c.epochs, 3);
        assert!(TrainConfig::from_toml_str("alpha = -1.0\n").is_err());
        assert!(TrainConfig::from_toml_str("gamma = 1.0\n").is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let p = ModelParams::init(4, 3, 77);
        assert_eq!(ModelParams::from_json(&p.to_json()).unwrap(), p);
    }

    #[test]
    fn training_is_deterministic_and_records_every_epoch() {
        let spec = FeatureSpec::uniform(BlockDims::new(2, 1, 2), [1.0, 0.5, 0.5], [1.0; 3]);
        let data = make_paired_dataset(&spec, 64, 0.0, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_pairs: 16,
            learning_rate: 0.05,
            seed: 3,
            ..TrainConfig::default()
        };
        let (pa, ha) = train_ecf(&data, &cfg).unwrap();
        let (pb, hb) = train_ecf(&data, &cfg).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ha, hb);
        assert_eq!(ha.records.len(), 5);
        for r in &ha.records {
            let l = r.loss;
            assert!((l.prediction + cfg.alpha * l.irm + cfg.beta * l.ocd - l.total).abs() <= 1e-10);
        }
    }

    #[test]
    fn separable_data_is_learned_without_penalties() {
        let spec = FeatureSpec::uniform(BlockDims::new(2, 1, 1), [2.5, 0.5, 0.5], [0.25; 3]);
        let data = make_paired_dataset(&spec, 256, 0.0, 1).unwrap();
        let cfg = TrainConfig {
            alpha: 0.0,
            beta: 0.0,
            learning_rate: 0.05,
            seed: 1,
            ..TrainConfig::default()
        };
        let (_, h) = train_ecf(&data, &cfg).unwrap();
        assert!(h.last().unwrap().train_accuracy >= 0.99);
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let spec = FeatureSpec::uniform(BlockDims::new(2, 2, 2), [1.0; 3], [1.0; 3]);
        let data = make_paired_dataset(&spec, 32, 0.0, 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e6,
            beta: 50.0,
            epochs: 50,
            ..TrainConfig::default()
        };
        match train_ecf(&data, &cfg) {
            Err(Error::Divergence {
                epoch,
                learning_rate,
                ..
            }) => {
                assert!(epoch >= 1);
                assert_eq!(learning_rate, 1e6);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn identity_encoder_stays_frozen() {
        let spec = FeatureSpec::uniform(BlockDims::new(1, 1, 1), [1.0; 3], [1.0; 3]);
        let data = make_paired_dataset(&spec, 16, 0.0, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            identity_encoder: true,
            ..TrainConfig::default()
        };
        let (p, _) = train_ecf(&data, &cfg).unwrap();
        assert_eq!(p.encoder, Array2::<f64>::eye(3));
    }

    proptest::proptest! {
        #[test]
        fn penalties_are_nonnegative_and_components_reassemble(
            seed in 0u64..10_000,
            alpha in 0.0..5.0f64,
            beta in 0.0..5.0f64,
        ) {
            let mut rng = crate::seed::rng_from_seed(seed);
            let p = random_params(4, 3, &mut rng);
            let pairs = random_pairs(6, 4, &mut rng);
            let cfg = TrainConfig::default().with_weights(alpha, beta);
            let (total, c) = total_loss(&p, &pairs, &cfg).unwrap();
            proptest::prop_assert!(c.prediction >= 0.0 && c.irm >= 0.0 && c.ocd >= 0.0);
            let re = c.prediction + alpha * c.irm + beta * c.ocd;
            proptest::prop_assert!((total - re).abs() <= 1e-10);
        }

        #[test]
        fn bias_shift_leaves_predictions_unchanged(seed in 0u64..10_000, k in -20.0..20.0f64) {
            let mut rng = crate::seed::rng_from_seed(seed);
            let p = random_params(3, 2, &mut rng);
            let mut q = p.clone();
            q.bias += k;
            let batch: Vec<Sample> = random_pairs(3, 3, &mut rng)
                .into_iter()
                .flat_map(|(a, b)| [a, b])
                .collect();
            for s in &batch {
                let (a, b) = (predict_proba(&p, &s.features).unwrap(), predict_proba(&q, &s.features).unwrap());
                proptest::prop_assert!((a[0] - b[0]).abs() <= 1e-12);
            }
            let d = prediction_loss(&p, &batch).unwrap() - prediction_loss(&q, &batch).unwrap();
            proptest::prop_assert!(d.abs() <= 1e-12);
        }
    }
}
