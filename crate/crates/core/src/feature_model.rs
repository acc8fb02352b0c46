//! Gaussian block feature model, counterfactual augmentation and
//! correlated-feature shifts.
//!
//! A sample's features are laid out as `[edited | unedited | correlated]`.
//! Given a label `y` in `{-1, +1}`, block `b` is drawn from
//! `N(y * mu_b, diag(var_b))`. The edited and unedited blocks together form
//! the causal features; the correlated block carries a dataset-specific
//! association with the label that can change out of distribution.

use std::io::Write;
use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, derived_rng, domain, rng_from_seed};

/// Samples generated per independently seeded chunk. Part of the
/// reproducibility contract: chunk `k` always uses
/// `derive_seed(seed, SAMPLE_CHUNK, k)`, so output never depends on the
/// number of worker threads.
pub const SAMPLE_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockDims {
    pub edited: usize,
    pub unedited: usize,
    pub correlated: usize,
}

impl BlockDims {
    pub const fn new(edited: usize, unedited: usize, correlated: usize) -> Self {
        Self {
            edited,
            unedited,
            correlated,
        }
    }

    pub fn total(&self) -> usize {
        self.edited + self.unedited + self.correlated
    }

    pub fn edited_range(&self) -> Range<usize> {
        0..self.edited
    }

    pub fn unedited_range(&self) -> Range<usize> {
        self.edited..self.edited + self.unedited
    }

    pub fn correlated_range(&self) -> Range<usize> {
        self.edited + self.unedited..self.total()
    }

    /// Edited and unedited blocks together.
    pub fn causal_range(&self) -> Range<usize> {
        0..self.edited + self.unedited
    }
}

/// The generative law. Covariances are diagonal and stored as variance
/// vectors; keys mirror the config-file field names exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub d_edited: usize,
    pub d_unedited: usize,
    pub d_correlated: usize,
    pub mu_edited: Vec<f64>,
    pub mu_unedited: Vec<f64>,
    pub mu_correlated: Vec<f64>,
    pub var_edited: Vec<f64>,
    pub var_unedited: Vec<f64>,
    pub var_correlated: Vec<f64>,
}

impl FeatureSpec {
    /// Spec with the same mean and variance in every dimension of a block.
    pub fn uniform(dims: BlockDims, mu: [f64; 3], var: [f64; 3]) -> Self {
        Self {
            d_edited: dims.edited,
            d_unedited: dims.unedited,
            d_correlated: dims.correlated,
            mu_edited: vec![mu[0]; dims.edited],
            mu_unedited: vec![mu[1]; dims.unedited],
            mu_correlated: vec![mu[2]; dims.correlated],
            var_edited: vec![var[0]; dims.edited],
            var_unedited: vec![var[1]; dims.unedited],
            var_correlated: vec![var[2]; dims.correlated],
        }
    }

    pub fn dims(&self) -> BlockDims {
        BlockDims::new(self.d_edited, self.d_unedited, self.d_correlated)
    }

    pub fn dimension(&self) -> usize {
        self.dims().total()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_edited + self.d_unedited == 0 {
            return Err(Error::InvalidSpec(
                "at least one causal dimension is required (d_edited + d_unedited >= 1)".into(),
            ));
        }
        let blocks: [(&str, usize, &[f64], &[f64]); 3] = [
            ("edited", self.d_edited, &self.mu_edited, &self.var_edited),
            (
                "unedited",
                self.d_unedited,
                &self.mu_unedited,
                &self.var_unedited,
            ),
            (
                "correlated",
                self.d_correlated,
                &self.mu_correlated,
                &self.var_correlated,
            ),
        ];
        for (name, d, mu, var) in blocks {
            if mu.len() != d {
                return Err(Error::InvalidSpec(format!(
                    "mu_{name} has length {} but d_{name} = {d}",
                    mu.len()
                )));
            }
            if var.len() != d {
                return Err(Error::InvalidSpec(format!(
                    "var_{name} has length {} but d_{name} = {d}",
                    var.len()
                )));
            }
            if let Some(i) = mu.iter().position(|m| !m.is_finite()) {
                return Err(Error::InvalidSpec(format!("mu_{name}[{i}] is not finite")));
            }
            if let Some(i) = var.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidSpec(format!(
                    "var_{name}[{i}] = {} must be finite and > 0",
                    var[i]
                )));
            }
        }
        Ok(())
    }

    /// Full-length mean vector `mu_e ++ mu_u ++ mu_r`.
    pub fn mean(&self) -> Vec<f64> {
        [&self.mu_edited[..], &self.mu_unedited, &self.mu_correlated].concat()
    }

    pub fn variance(&self) -> Vec<f64> {
        [
            &self.var_edited[..],
            &self.var_unedited,
            &self.var_correlated,
        ]
        .concat()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: FeatureSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("FeatureSpec is always representable as TOML")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Environment {
    Original,
    Edited,
    Ood,
}

impl Environment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Environment::Original => "ORIGINAL",
            Environment::Edited => "EDITED",
            Environment::Ood => "OOD",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    /// `+1` or `-1`.
    pub label: i8,
    pub pair_id: Option<u64>,
    pub environment: Environment,
}

/// Original sentences paired with their counterfactual edits.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub pairs: Vec<(Sample, Sample)>,
    pub spec: FeatureSpec,
    pub alignment_noise_sd: f64,
    pub seed: u64,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn originals(&self) -> Vec<Sample> {
        self.pairs.iter().map(|(o, _)| o.clone()).collect()
    }

    pub fn edited(&self) -> Vec<Sample> {
        self.pairs.iter().map(|(_, e)| e.clone()).collect()
    }

    /// Originals followed by their edits, pair by pair.
    pub fn pooled(&self) -> Vec<Sample> {
        self.pairs
            .iter()
            .flat_map(|(o, e)| [o.clone(), e.clone()])
            .collect()
    }
}

/// Label of sample `i` in a generated dataset: alternating `+1, -1, ...`.
fn label_for_index(i: usize) -> i8 {
    if i.is_multiple_of(2) {
        1
    } else {
        -1
    }
}

/// Draws `n` samples where a `+1` sample has mean `mean_pos` and a `-1`
/// sample has mean `mean_neg`.
fn sample_with_means(
    mean_pos: &[f64],
    mean_neg: &[f64],
    variance: &[f64],
    n: usize,
    seed: u64,
    environment: Environment,
) -> Vec<Sample> {
    let sd: Vec<f64> = variance.iter().map(|v| v.sqrt()).collect();
    let n_chunks = n.div_ceil(SAMPLE_CHUNK);
    (0..n_chunks)
        .into_par_iter()
        .flat_map_iter(|chunk| {
            let mut rng = derived_rng(seed, domain::SAMPLE_CHUNK, chunk as u64);
            let start = chunk * SAMPLE_CHUNK;
            let end = (start + SAMPLE_CHUNK).min(n);
            let sd = &sd;
            (start..end)
                .map(|i| {
                    let label = label_for_index(i);
                    let mean = if label > 0 { mean_pos } else { mean_neg };
                    let features = mean
                        .iter()
                        .zip(sd)
                        .map(|(m, s)| {
                            let z: f64 = rng.sample(StandardNormal);
                            m + s * z
                        })
                        .collect();
                    Sample {
                        features,
                        label,
                        pair_id: None,
                        environment,
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Draws `n` class-balanced samples from `spec`. Labels alternate
/// `+1, -1, ...`; all samples are tagged `ORIGINAL`.
pub fn sample_dataset(spec: &FeatureSpec, n: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    if !n.is_multiple_of(2) {
        return Err(Error::ClassBalance(n));
    }
    let mean_pos = spec.mean();
    let mean_neg: Vec<f64> = mean_pos.iter().map(|m| -m).collect();
    Ok(sample_with_means(
        &mean_pos,
        &mean_neg,
        &spec.variance(),
        n,
        seed,
        Environment::Original,
    ))
}

/// Like [`sample_dataset`] but the correlated-block mean of class
/// `flipped_label` only is negated, leaving the other class untouched.
/// Used for the error-type asymmetry experiment; samples are tagged `OOD`.
pub fn sample_class_shifted(
    spec: &FeatureSpec,
    flipped_label: i8,
    n: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::ClassBalance(n));
    }
    if flipped_label != 1 && flipped_label != -1 {
        return Err(Error::InvalidArgument(format!(
            "label must be +1 or -1, got {flipped_label}"
        )));
    }
    let dims = spec.dims();
    let mut mean_pos = spec.mean();
    let mut mean_neg: Vec<f64> = mean_pos.iter().map(|m| -m).collect();
    let target = if flipped_label > 0 {
        &mut mean_pos
    } else {
        &mut mean_neg
    };
    for m in &mut target[dims.correlated_range()] {
        *m = -*m;
    }
    Ok(sample_with_means(
        &mean_pos,
        &mean_neg,
        &spec.variance(),
        n,
        seed,
        Environment::Ood,
    ))
}

/// Counterfactual edit of an original sample: label flipped, edited block
/// negated, unedited block copied, correlated block copied plus i.i.d.
/// `N(0, alignment_noise_sd^2)` misalignment. The edit inherits the
/// original's `pair_id`.
///
/// The misalignment noise is generated as `sd * z` with `z` from the seeded
/// stream, so runs that differ only in `sd` share their random numbers.
pub fn augment_counterfactual(
    original: &Sample,
    dims: BlockDims,
    alignment_noise_sd: f64,
    seed: u64,
) -> Result<Sample> {
    if original.environment != Environment::Original {
        return Err(Error::AlreadyEdited {
            pair_id: original.pair_id,
        });
    }
    if original.features.len() != dims.total() {
        return Err(Error::DimensionMismatch {
            expected: dims.total(),
            actual: original.features.len(),
        });
    }
    if !(alignment_noise_sd.is_finite() && alignment_noise_sd >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alignment_noise_sd must be finite and >= 0, got {alignment_noise_sd}"
        )));
    }
    let mut features = original.features.clone();
    for f in &mut features[dims.edited_range()] {
        *f = -*f;
    }
    if alignment_noise_sd > 0.0 {
        let mut rng = rng_from_seed(seed);
        for f in &mut features[dims.correlated_range()] {
            let z: f64 = rng.sample(StandardNormal);
            *f += alignment_noise_sd * z;
        }
    }
    Ok(Sample {
        features,
        label: -original.label,
        pair_id: original.pair_id,
        environment: Environment::Edited,
    })
}

/// Samples `n_pairs` originals and augments each one. With odd `n_pairs` the
/// originals carry one more `+1` than `-1`; the pooled dataset is always
/// exactly balanced.
pub fn make_paired_dataset(
    spec: &FeatureSpec,
    n_pairs: usize,
    alignment_noise_sd: f64,
    seed: u64,
) -> Result<PairedDataset> {
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be >= 1".into()));
    }
    let dims = spec.dims();
    let mut originals = sample_dataset(
        spec,
        n_pairs + n_pairs % 2,
        derive_seed(seed, domain::PAIR_ORIGINALS, 0),
    )?;
    originals.truncate(n_pairs);
    let pairs = originals
        .into_par_iter()
        .enumerate()
        .map(|(i, mut original)| {
            original.pair_id = Some(i as u64);
            let edited = augment_counterfactual(
                &original,
                dims,
                alignment_noise_sd,
                derive_seed(seed, domain::ALIGNMENT, i as u64),
            )?;
            Ok((original, edited))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairedDataset {
        pairs,
        spec: spec.clone(),
        alignment_noise_sd,
        seed,
    })
}

/// Out-of-distribution shift of the correlated block's mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "factor", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OodShift {
    FlipCorrelated,
    ScaleCorrelated(f64),
    ZeroCorrelated,
}

impl OodShift {
    pub fn name(&self) -> String {
        match self {
            OodShift::FlipCorrelated => "flip".to_string(),
            OodShift::ScaleCorrelated(k) => format!("scale({k})"),
            OodShift::ZeroCorrelated => "zero".to_string(),
        }
    }
}

impl std::str::FromStr for OodShift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "flip" => Ok(OodShift::FlipCorrelated),
            "zero" => Ok(OodShift::ZeroCorrelated),
            _ => {
                let k = s
                    .strip_prefix("scale(")
                    .and_then(|r| r.strip_suffix(')'))
                    .or_else(|| s.strip_prefix("scale:"))
                    .and_then(|k| k.parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown shift '{s}'")))?;
                Ok(OodShift::ScaleCorrelated(k))
            }
        }
    }
}

/// Applies `shift` to `mu_correlated`; every other field is copied.
pub fn make_ood_spec(spec: &FeatureSpec, shift: OodShift) -> FeatureSpec {
    let mut out = spec.clone();
    match shift {
        OodShift::FlipCorrelated => out.mu_correlated.iter_mut().for_each(|m| *m = -*m),
        OodShift::ScaleCorrelated(k) => out.mu_correlated.iter_mut().for_each(|m| *m *= k),
        OodShift::ZeroCorrelated => out.mu_correlated.iter_mut().for_each(|m| *m = 0.0),
    }
    out
}

/// Writes samples as CSV. The first row names the block of every feature
/// column, the second holds the column names
/// `pair_id, environment, label, f_0 .. f_{D-1}`.
pub fn write_dataset_csv<W: Write>(samples: &[Sample], dims: BlockDims, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(false).from_writer(out);
    let d = dims.total();
    let mut blocks = vec!["block".to_string(), String::new(), String::new()];
    blocks.extend(std::iter::repeat_n("edited".to_string(), dims.edited));
    blocks.extend(std::iter::repeat_n("unedited".to_string(), dims.unedited));
    blocks.extend(std::iter::repeat_n(
        "correlated".to_string(),
        dims.correlated,
    ));
    w.write_record(&blocks)?;
    let mut header = vec![
        "pair_id".to_string(),
        "environment".to_string(),
        "label".to_string(),
    ];
    header.extend((0..d).map(|i| format!("f_{i}")));
    w.write_record(&header)?;
    for s in samples {
        if s.features.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: s.features.len(),
            });
        }
        let mut row = Vec::with_capacity(d + 3);
        row.push(s.pair_id.map(|p| p.to_string()).unwrap_or_default());
        row.push(s.environment.as_str().to_string());
        row.push(s.label.to_string());
        row.extend(s.features.iter().map(|f| f.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
