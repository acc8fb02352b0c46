//! Accuracy reports under correlated-feature shifts, plus the ablation and
//! data-efficiency experiments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecf::{self, ModelParams, TrainConfig};
use crate::error::{Error, Result};
use crate::feature_model::{
    make_ood_spec, make_paired_dataset, sample_class_shifted, sample_dataset, BlockDims,
    FeatureSpec, OodShift, PairedDataset, Sample,
};
use crate::fisher::LinearClassifier;
use crate::numeric::norm;
use crate::seed::{derive_seed, domain};

/// Something that assigns a `+1`/`-1` label to a feature vector.
pub trait Decision: Sync {
    fn input_dim(&self) -> usize;
    fn predict(&self, features: &[f64]) -> Result<i8>;
}

/// Sign of the score; a zero score is classified positive.
impl Decision for LinearClassifier {
    fn input_dim(&self) -> usize {
        self.weights.len()
    }

    fn predict(&self, features: &[f64]) -> Result<i8> {
        Ok(if self.score(features) >= 0.0 { 1 } else { -1 })
    }
}

/// Argmax probability; ties are classified positive.
impl Decision for ModelParams {
    fn input_dim(&self) -> usize {
        self.d_input()
    }

    fn predict(&self, features: &[f64]) -> Result<i8> {
        ecf::predict_label(self, features)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub environment: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Gold positive, predicted negative.
    pub errors_pos_to_neg: usize,
    /// Gold negative, predicted positive.
    pub errors_neg_to_pos: usize,
}

pub fn evaluate<D: Decision + ?Sized>(
    decision: &D,
    samples: &[Sample],
    environment: &str,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (mut correct, mut p2n, mut n2p) = (0usize, 0usize, 0usize);
    for s in samples {
        if s.features.len() != decision.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: decision.input_dim(),
                actual: s.features.len(),
            });
        }
        let pred = decision.predict(&s.features)?;
        match (s.label > 0, pred > 0) {
            (true, true) | (false, false) => correct += 1,
            (true, false) => p2n += 1,
            (false, true) => n2p += 1,
        }
    }
    Ok(EvalReport {
        environment: environment.to_string(),
        n: samples.len(),
        correct,
        accuracy: correct as f64 / samples.len() as f64,
        errors_pos_to_neg: p2n,
        errors_neg_to_pos: n2p,
    })
}

pub const IN_DISTRIBUTION: &str = "in_distribution";

/// In-distribution baseline followed by one report per shift. Every dataset
/// is drawn with the same evaluation seed, so the causal blocks coincide
/// across shifts and only the correlated block differs.
pub fn ood_suite<D: Decision + ?Sized>(
    decision: &D,
    spec: &FeatureSpec,
    shifts: &[OodShift],
    n: usize,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let eval_seed = derive_seed(seed, domain::EVAL, 0);
    let mut reports = vec![evaluate(
        decision,
        &sample_dataset(spec, n, eval_seed)?,
        IN_DISTRIBUTION,
    )?];
    for shift in shifts {
        let shifted = make_ood_spec(spec, *shift);
        let data = sample_dataset(&shifted, n, eval_seed)?;
        reports.push(evaluate(decision, &data, &shift.name())?);
    }
    Ok(reports)
}

/// Error-type breakdown when only one class's correlated mean is flipped:
/// one report for a flipped positive class, one for a flipped negative
/// class. A heuristic stand-in for class-asymmetric distribution shift.
pub fn class_shift_reports<D: Decision + ?Sized>(
    decision: &D,
    spec: &FeatureSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let eval_seed = derive_seed(seed, domain::EVAL, 1);
    [(1i8, "flip_pos_only"), (-1i8, "flip_neg_only")]
        .iter()
        .map(|(label, name)| {
            let data = sample_class_shifted(spec, *label, n, eval_seed)?;
            evaluate(decision, &data, name)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MyopiaProfile {
    pub norm_e: f64,
    pub norm_u: f64,
    pub norm_r: f64,
    /// `1 / sqrt(1 + r^2 / (e^2 + u^2))`; NaN when `e = u = 0`.
    pub cos_ori_form: f64,
    /// `1 / sqrt(1 + u^2 / e^2)`; NaN when `e = u = 0`.
    pub cos_cad_form: f64,
}

impl MyopiaProfile {
    /// `|phi_u| / |phi_e|`.
    pub fn unedited_ratio(&self) -> f64 {
        self.norm_u / self.norm_e
    }
}

pub fn myopia_profile(weights: &[f64], block_dims: BlockDims) -> Result<MyopiaProfile> {
    if weights.len() != block_dims.total() {
        return Err(Error::DimensionMismatch {
            expected: block_dims.total(),
            actual: weights.len(),
        });
    }
    let e = norm(&weights[block_dims.edited_range()]);
    let u = norm(&weights[block_dims.unedited_range()]);
    let r = norm(&weights[block_dims.correlated_range()]);
    let c = (e * e + u * u).sqrt();
    let (cos_ori_form, cos_cad_form) = if c == 0.0 {
        (f64::NAN, f64::NAN)
    } else {
        (c / (c * c + r * r).sqrt(), e / c)
    };
    Ok(MyopiaProfile {
        norm_e: e,
        norm_u: u,
        norm_r: r,
        cos_ori_form,
        cos_cad_form,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ecf,
    NoIrm,
    NoOcd,
    CadOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Ecf,
        Variant::NoIrm,
        Variant::NoOcd,
        Variant::CadOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Ecf => "ecf",
            Variant::NoIrm => "no_irm",
            Variant::NoOcd => "no_ocd",
            Variant::CadOnly => "cad_only",
        }
    }

    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        match self {
            Variant::Ecf => base.clone(),
            Variant::NoIrm => base.with_weights(0.0, base.beta),
            Variant::NoOcd => base.with_weights(base.alpha, 0.0),
            Variant::CadOnly => base.with_weights(0.0, 0.0),
        }
    }
}

/// One trained model evaluated under one shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    /// Variant or arm name.
    pub variant: String,
    /// Number of training pairs (data efficiency) or dataset pairs (ablation).
    pub size: usize,
    pub seed: u64,
    pub shift: String,
    pub report: EvalReport,
    pub in_distribution_accuracy: f64,
    pub profile: MyopiaProfile,
}

pub fn write_rows_csv<W: std::io::Write>(rows: &[ExperimentRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "variant",
        "size",
        "shift",
        "seed",
        "accuracy",
        "err_p2n",
        "err_n2p",
        "norm_e",
        "norm_u",
        "norm_r",
        "id_accuracy",
    ])?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.size.to_string(),
            r.shift.clone(),
            r.seed.to_string(),
            format!("{:.5}", r.report.accuracy),
            r.report.errors_pos_to_neg.to_string(),
            r.report.errors_neg_to_pos.to_string(),
            format!("{:.5}", r.profile.norm_e),
            format!("{:.5}", r.profile.norm_u),
            format!("{:.5}", r.profile.norm_r),
            format!("{:.5}", r.in_distribution_accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Seed mean and sample standard deviation of a group of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub variant: String,
    pub size: usize,
    pub n_seeds: usize,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
    pub mean_unedited_ratio: f64,
    pub mean_id_accuracy: f64,
}

/// Groups rows by `(variant, size)` in order of first appearance.
pub fn summarize(rows: &[ExperimentRow]) -> Vec<Summary> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in rows {
        let k = (r.variant.clone(), r.size);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(variant, size)| {
            let group: Vec<&ExperimentRow> = rows
                .iter()
                .filter(|r| r.variant == variant && r.size == size)
                .collect();
            let n = group.len() as f64;
            let mean = group.iter().map(|r| r.report.accuracy).sum::<f64>() / n;
            let sd = if group.len() > 1 {
                (group
                    .iter()
                    .map(|r| (r.report.accuracy - mean).powi(2))
                    .sum::<f64>()
                    / (n - 1.0))
                    .sqrt()
            } else {
                0.0
            };
            Summary {
                variant,
                size,
                n_seeds: group.len(),
                mean_accuracy: mean,
                sd_accuracy: sd,
                mean_unedited_ratio: group
                    .iter()
                    .map(|r| r.profile.unedited_ratio())
                    .sum::<f64>()
                    / n,
                mean_id_accuracy: group
                    .iter()
                    .map(|r| r.in_distribution_accuracy)
                    .sum::<f64>()
                    / n,
            }
        })
        .collect()
}

pub fn write_summary_csv<W: std::io::Write>(summary: &[Summary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "variant",
        "size",
        "n_seeds",
        "mean_accuracy",
        "sd_accuracy",
        "mean_ratio_u_e",
        "mean_id_accuracy",
    ])?;
    for s in summary {
        w.write_record([
            s.variant.clone(),
            s.size.to_string(),
            s.n_seeds.to_string(),
            format!("{:.5}", s.mean_accuracy),
            format!("{:.5}", s.sd_accuracy),
            format!("{:.5}", s.mean_unedited_ratio),
            format!("{:.5}", s.mean_id_accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate_model(
    params: &ModelParams,
    dims: BlockDims,
    variant: &str,
    size: usize,
    seed: u64,
    id_data: &[Sample],
    ood_data: &[Sample],
    shift_name: &str,
) -> Result<ExperimentRow> {
    let map = ecf::effective_linear_map(params, dims)?;
    Ok(ExperimentRow {
        variant: variant.to_string(),
        size,
        seed,
        shift: shift_name.to_string(),
        report: evaluate(params, ood_data, shift_name)?,
        in_distribution_accuracy: evaluate(params, id_data, IN_DISTRIBUTION)?.accuracy,
        profile: myopia_profile(&map.weights, dims)?,
    })
}

/// Trains full ECF and its three ablations once per seed on `paired_data`
/// and evaluates each on the same OOD sample. The seed becomes the training
/// seed, so the `cad_only` row equals a plain `alpha = beta = 0` run with
/// that seed.
pub fn ablation_grid(
    paired_data: &PairedDataset,
    config: &TrainConfig,
    ood_spec: &FeatureSpec,
    shift_name: &str,
    seeds: &[u64],
    eval_n: usize,
) -> Result<Vec<ExperimentRow>> {
    let dims = paired_data.spec.dims();
    if ood_spec.dims() != dims {
        return Err(Error::DimensionMismatch {
            expected: dims.total(),
            actual: ood_spec.dimension(),
        });
    }
    let cells: Vec<(u64, Variant)> = seeds
        .iter()
        .flat_map(|&s| Variant::ALL.into_iter().map(move |v| (s, v)))
        .collect();
    cells
        .par_iter()
        .map(|&(seed, variant)| {
            let eval_seed = derive_seed(seed, domain::EVAL, 0);
            let id_data = sample_dataset(&paired_data.spec, eval_n, eval_seed)?;
            let ood_data = sample_dataset(ood_spec, eval_n, eval_seed)?;
            let cfg = TrainConfig {
                seed,
                ..variant.config(config)
            };
            let (params, _) = ecf::train_ecf(paired_data, &cfg)?;
            evaluate_model(
                &params,
                dims,
                variant.name(),
                paired_data.len(),
                seed,
                &id_data,
                &ood_data,
                shift_name,
            )
        })
        .collect()
}

pub const ARM_CAD: &str = "cad";
pub const ARM_ORIGINAL: &str = "original";

/// For every size `m` and seed: `m` CAD pairs trained with `config` against
/// `2m` original sentences trained with `alpha = beta = 0`, both evaluated
/// under `shift`. Rows are ordered by size, then seed, then arm.
pub fn data_efficiency_curve(
    spec: &FeatureSpec,
    pair_counts: &[usize],
    config: &TrainConfig,
    alignment_noise_sd: f64,
    shift: OodShift,
    seeds: &[u64],
    eval_n: usize,
) -> Result<Vec<ExperimentRow>> {
    if pair_counts.is_empty() {
        return Err(Error::InvalidArgument(
            "pair_counts must be nonempty".into(),
        ));
    }
    let dims = spec.dims();
    let ood_spec = make_ood_spec(spec, shift);
    let cells: Vec<(usize, u64)> = pair_counts
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let nested: Vec<Vec<ExperimentRow>> = cells
        .par_iter()
        .map(|&(m, seed)| {
            let eval_seed = derive_seed(seed, domain::EVAL, 0);
            let id_data = sample_dataset(spec, eval_n, eval_seed)?;
            let ood_data = sample_dataset(&ood_spec, eval_n, eval_seed)?;
            let train_seed = derive_seed(seed, domain::TRAIN, 0);
            let data_seed = derive_seed(seed, domain::DATA, m as u64);

            let pairs = make_paired_dataset(spec, m, alignment_noise_sd, data_seed)?;
            let cad_cfg = TrainConfig {
                seed: train_seed,
                ..config.clone()
            };
            let (cad, _) = ecf::train_ecf(&pairs, &cad_cfg)?;

            let originals = sample_dataset(spec, 2 * m, derive_seed(data_seed, domain::DATA, 1))?;
            let ori_cfg = TrainConfig {
                seed: train_seed,
                ..config.with_weights(0.0, 0.0)
            };
            let (ori, _) = ecf::train_original(&originals, &ori_cfg)?;

            let name = shift.name();
            Ok(vec![
                evaluate_model(&cad, dims, ARM_CAD, m, seed, &id_data, &ood_data, &name)?,
                evaluate_model(
                    &ori,
                    dims,
                    ARM_ORIGINAL,
                    m,
                    seed,
                    &id_data,
                    &ood_data,
                    &name,
                )?,
            ])
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}
