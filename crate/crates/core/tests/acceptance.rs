//! Acceptance criteria 1-9. Each test prints one `criterion N: PASS|FAIL`
//! line straight to stdout (bypassing the harness capture) and then asserts.

// Expected values below are the published five-decimal figures, not library constants.
#![allow(clippy::approx_constant)]

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ecf_core::ecf::{self, ModelParams, TrainConfig};
use ecf_core::eval::{summarize, ExperimentRow, Summary, Variant, ARM_CAD, ARM_ORIGINAL};
use ecf_core::experiment::{self, AblateArgs, EfficiencyArgs};
use ecf_core::feature_model::{
    make_paired_dataset, sample_dataset, BlockDims, FeatureSpec, OodShift, Sample,
};
use ecf_core::fisher;
use ecf_core::numeric::{norm, relative_l2};

fn report(n: u32, pass: bool, elapsed: Duration, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "criterion {n}: {verdict} ({:.2}s) {detail}\n",
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn criterion_1_closed_form_myopia_numbers() {
    let t = Instant::now();
    let a = fisher::analyze(&experiment::reference_spec()).unwrap();
    let lambda = a.lambda_star.unwrap();
    let interp = a.cos_interp.unwrap();
    let elapsed = t.elapsed();
    let pass = close(a.cos_ori, 0.81650, 1e-5)
        && close(a.cos_cad, 0.70711, 1e-5)
        && close(lambda, 0.5, 1e-5)
        && close(interp, 0.86603, 1e-5)
        && elapsed < Duration::from_secs(1);
    report(
        1,
        pass,
        elapsed,
        &format!(
            "cos_ori={:.5} cos_cad={:.5} lambda*={:.5} cos_interp={:.5}",
            a.cos_ori, a.cos_cad, lambda, interp
        ),
    );
    assert!(pass);
}

fn random_spec(rng: &mut ChaCha8Rng) -> FeatureSpec {
    let dims = BlockDims::new(
        rng.random_range(1..=4),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
    );
    let mut draw_mu = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let m: f64 = rng.random_range(0.05..2.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect()
    };
    let (mu_e, mu_u, mu_r) = (
        draw_mu(dims.edited),
        draw_mu(dims.unedited),
        draw_mu(dims.correlated),
    );
    let mut draw_var =
        |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(0.25..4.0)).collect() };
    FeatureSpec {
        d_edited: dims.edited,
        d_unedited: dims.unedited,
        d_correlated: dims.correlated,
        mu_edited: mu_e,
        mu_unedited: mu_u,
        mu_correlated: mu_r,
        var_edited: draw_var(dims.edited),
        var_unedited: draw_var(dims.unedited),
        var_correlated: draw_var(dims.correlated),
    }
}

#[test]
fn criterion_2_interpolation_dominance() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut dominated = 0;
    let mut worst_lambda_gap: f64 = 0.0;
    for _ in 0..100 {
        let spec = random_spec(&mut rng);
        let a = fisher::analyze(&spec).unwrap();
        assert!(a.norm_e > 0.0 && a.norm_u > 0.0 && a.norm_r > 0.0);
        let interp = a.cos_interp.unwrap();
        if interp > a.cos_ori.max(a.cos_cad) {
            dominated += 1;
        }
        let (mut best, mut best_cos) = (0.0, f64::NEG_INFINITY);
        for k in 0..=1000 {
            let lambda = k as f64 / 1000.0;
            let c = fisher::interpolate(&a.phi_ori, &a.phi_cad, lambda).unwrap();
            let cos = fisher::cosine_to_robust(&c, &spec).unwrap();
            if cos > best_cos {
                best_cos = cos;
                best = lambda;
            }
        }
        worst_lambda_gap = worst_lambda_gap.max((best - a.lambda_star.unwrap()).abs());
    }
    let elapsed = t.elapsed();
    let pass = dominated == 100 && worst_lambda_gap <= 2e-3 && elapsed < Duration::from_secs(5);
    report(
        2,
        pass,
        elapsed,
        &format!("strict dominance {dominated}/100, max |lambda* - grid argmax| = {worst_lambda_gap:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_monte_carlo_matches_closed_form() {
    let t = Instant::now();
    let spec = experiment::reference_spec();
    let dims = spec.dims();
    let data = sample_dataset(&spec, 200_000, 31).unwrap();
    let fitted = fisher::fld_fit(&data, dims).unwrap();
    let err = relative_l2(
        &fitted.weights,
        &fisher::closed_form_ori(&spec).unwrap().weights,
    );

    let paired = make_paired_dataset(&spec, 100_000, 0.0, 32).unwrap();
    let cad = fisher::fld_fit(&paired.pooled(), dims).unwrap();
    let ratio = norm(cad.correlated()) / norm(cad.edited());
    let elapsed = t.elapsed();
    let pass = err <= 0.02 && ratio <= 0.02 && elapsed < Duration::from_secs(30);
    report(
        3,
        pass,
        elapsed,
        &format!("original rel L2 error {err:.5}, CAD |w_r|/|w_e| = {ratio:.2e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_misalignment_direction() {
    let t = Instant::now();
    let spec = experiment::reference_spec();
    let sds = [0.0, 0.25, 0.5, 1.0];
    let seeds = 5;
    let mut mean_norm = [0.0; 4];
    for seed in 0..seeds {
        for (k, &sd) in sds.iter().enumerate() {
            let paired = make_paired_dataset(&spec, 10_000, sd, 400 + seed).unwrap();
            let fit = fisher::fld_fit(&paired.pooled(), spec.dims()).unwrap();
            mean_norm[k] += norm(fit.correlated()) / seeds as f64;
        }
    }
    let elapsed = t.elapsed();
    let increasing = mean_norm.windows(2).all(|w| w[0] < w[1]);
    let pass = increasing && elapsed < Duration::from_secs(60);
    report(
        4,
        pass,
        elapsed,
        &format!(
            "seed-mean correlated norm over sd {{0, 0.25, 0.5, 1}}: {:.2e} {:.2e} {:.2e} {:.2e}",
            mean_norm[0], mean_norm[1], mean_norm[2], mean_norm[3]
        ),
    );
    assert!(pass);
}

fn finite_difference<F: Fn(&ModelParams) -> f64>(p: &ModelParams, f: F) -> Vec<f64> {
    let h = 1e-5;
    let flat = p.to_flat();
    (0..flat.len())
        .map(|i| {
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[i] += h;
            minus[i] -= h;
            let fp = f(&ModelParams::from_flat(p.d_input(), p.d_repr(), &plus).unwrap());
            let fm = f(&ModelParams::from_flat(p.d_input(), p.d_repr(), &minus).unwrap());
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Elementwise `|a - n| / max(|a|, |n|, 1e-6)`.
fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_5_gradient_exactness() {
    let t = Instant::now();
    let spec = experiment::hard_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = [0.0f64; 4];
    let draws = 20;
    for draw in 0..draws {
        let d_repr = rng.random_range(2..=6);
        let mut params = ModelParams::init(spec.dimension(), d_repr, 1000 + draw);
        // move away from the small-init regime so every term is exercised
        for v in params
            .encoder
            .iter_mut()
            .chain(params.classifier.iter_mut())
        {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in params.bias.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let n_pairs = rng.random_range(2..=8);
        let data = make_paired_dataset(&spec, n_pairs, 0.3, 2000 + draw).unwrap();
        let pairs = data.pairs.clone();
        let sentences = data.pooled();
        let envs: Vec<Vec<Sample>> = vec![data.originals(), data.edited()];
        let config = TrainConfig::default();

        let (_, g) = ecf::prediction_loss_grad(&params, &sentences).unwrap();
        let n = finite_difference(&params, |p| ecf::prediction_loss(p, &sentences).unwrap());
        worst[0] = worst[0].max(max_rel_err(&g.to_flat(), &n));

        let (_, g) = ecf::irm_penalty_grad(&params, &envs).unwrap();
        let n = finite_difference(&params, |p| ecf::irm_penalty(p, &envs).unwrap());
        worst[1] = worst[1].max(max_rel_err(&g.to_flat(), &n));

        let (_, g) = ecf::ocd_penalty_grad(&params, &pairs).unwrap();
        let n = finite_difference(&params, |p| ecf::ocd_penalty(p, &pairs).unwrap());
        worst[2] = worst[2].max(max_rel_err(&g.to_flat(), &n));

        let (_, g) = ecf::total_loss_grad(&params, &pairs, &config).unwrap();
        let n = finite_difference(&params, |p| ecf::total_loss(p, &pairs, &config).unwrap().0);
        worst[3] = worst[3].max(max_rel_err(&g.to_flat(), &n));
    }
    let elapsed = t.elapsed();
    let pass = worst.iter().all(|w| *w <= 1e-4) && elapsed < Duration::from_secs(30);
    report(
        5,
        pass,
        elapsed,
        &format!(
            "{draws} draws, max rel error L_P {:.1e} L_IRM {:.1e} L_OCD {:.1e} total {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    );
    assert!(pass);
}

/// Default hyperparameters except the step size. The default 1e-3 leaves
/// plain SGD from the small uniform init at the zero saddle (training loss
/// ~ln 2 after 100 epochs at 50 pairs). 0.1 is the smallest rate on the grid
/// {1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1} at which every arm on the datasets
/// below ends with a training-loss change under 2% over its last 10 epochs;
/// 0.3 diverges for full ECF on the hard preset.
fn acceptance_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.1,
        ..TrainConfig::default()
    }
}

/// The ablation grid shared by criteria 6 and 7: hard preset, 1000 pairs,
/// no misalignment, [`acceptance_config`], 10 seeds, flipped correlated
/// means.
struct Ablation {
    rows: Vec<ExperimentRow>,
    summary: BTreeMap<String, Summary>,
    elapsed: Duration,
}

fn ablation() -> &'static Ablation {
    static CELL: OnceLock<Ablation> = OnceLock::new();
    CELL.get_or_init(|| {
        let t = Instant::now();
        let args = AblateArgs {
            pairs: 1000,
            noise_sd: 0.0,
            n_seeds: 10,
            shift: OodShift::FlipCorrelated,
            eval_n: 20_000,
        };
        let rows =
            experiment::ablation(&experiment::hard_spec(), &acceptance_config(), &args, 0).unwrap();
        let summary = summarize(&rows)
            .into_iter()
            .map(|s| (s.variant.clone(), s))
            .collect();
        Ablation {
            rows,
            summary,
            elapsed: t.elapsed(),
        }
    })
}

#[test]
fn criterion_6_myopia_mitigation_end_to_end() {
    let a = ablation();
    assert_eq!(a.rows.len(), 40);
    let ecf = &a.summary[Variant::Ecf.name()];
    let cad = &a.summary[Variant::CadOnly.name()];
    let gain_pp = 100.0 * (ecf.mean_accuracy - cad.mean_accuracy);
    let pass = gain_pp >= 2.0
        && ecf.mean_unedited_ratio > cad.mean_unedited_ratio
        && a.elapsed < Duration::from_secs(300);
    report(
        6,
        pass,
        a.elapsed,
        &format!(
            "OOD acc ecf {:.4} vs cad_only {:.4} (gain {gain_pp:+.2}pp, need >= +2pp); \
             |w_u|/|w_e| ecf {:.4} vs cad_only {:.4}",
            ecf.mean_accuracy, cad.mean_accuracy, ecf.mean_unedited_ratio, cad.mean_unedited_ratio
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_ablation_direction() {
    let a = ablation();
    let acc = |v: Variant| a.summary[v.name()].mean_accuracy;
    let full = acc(Variant::Ecf);
    let pass = acc(Variant::NoIrm) <= full
        && acc(Variant::NoOcd) <= full
        && a.elapsed < Duration::from_secs(600);
    report(
        7,
        pass,
        a.elapsed,
        &format!(
            "OOD acc ecf {:.4}, no_irm {:.4}, no_ocd {:.4}, cad_only {:.4}",
            full,
            acc(Variant::NoIrm),
            acc(Variant::NoOcd),
            acc(Variant::CadOnly)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_data_efficiency_direction() {
    let t = Instant::now();
    let args = EfficiencyArgs {
        sizes: vec![50, 100, 200, 400],
        noise_sd: 0.0,
        n_seeds: 10,
        shift: OodShift::FlipCorrelated,
        eval_n: 20_000,
    };
    let rows = experiment::efficiency(
        &experiment::reference_spec(),
        &acceptance_config(),
        &args,
        0,
    )
    .unwrap();
    assert_eq!(rows.len(), 4 * 10 * 2);
    let summary = summarize(&rows);
    let mean = |arm: &str, m: usize| {
        summary
            .iter()
            .find(|s| s.variant == arm && s.size == m)
            .unwrap()
            .mean_accuracy
    };
    let mut detail = Vec::new();
    let mut pass = true;
    for &m in &args.sizes {
        let (cad, ori) = (mean(ARM_CAD, m), mean(ARM_ORIGINAL, m));
        pass &= cad > ori;
        detail.push(format!("m={m}: cad {cad:.4} / original {ori:.4}"));
    }
    let elapsed = t.elapsed();
    pass &= elapsed < Duration::from_secs(600);
    report(8, pass, elapsed, &detail.join(", "));
    assert!(pass);
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

#[test]
fn criterion_9_cli_reproducibility() {
    let t = Instant::now();
    let work = tempfile::tempdir().unwrap();
    let config = work.path().join("config.toml");
    std::fs::write(&config, "epochs = 4\nlearning_rate = 0.01\n").unwrap();
    let spec = work.path().join("spec.toml");
    std::fs::write(&spec, experiment::hard_spec().to_toml_string()).unwrap();
    let cfg = config.to_str().unwrap();
    let spec_path = spec.to_str().unwrap();

    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("analyze", vec!["analyze"]),
        ("analyze-file", vec!["analyze", "--spec", spec_path]),
        (
            "simulate",
            vec![
                "simulate",
                "--n",
                "4000",
                "--noise",
                "0,0.25",
                "--export-data",
            ],
        ),
        (
            "train",
            vec![
                "--preset", "hard", "train", "--config", cfg, "--pairs", "200", "--eval-n", "2000",
            ],
        ),
        (
            "ablate",
            vec![
                "ablate", "--config", cfg, "--pairs", "100", "--seeds", "2", "--eval-n", "1000",
            ],
        ),
        (
            "efficiency",
            vec![
                "efficiency",
                "--config",
                cfg,
                "--sizes",
                "20,40",
                "--seeds",
                "2",
                "--eval-n",
                "1000",
            ],
        ),
    ];
    let mut failures = Vec::new();
    let mut files = 0;
    for (name, args) in &commands {
        let mut trees = Vec::new();
        for run in 0..2 {
            let out = work.path().join(format!("{name}-{run}"));
            let status = Command::new(env!("CARGO_BIN_EXE_ecf-lab"))
                .env("SOURCE_DATE_EPOCH", "1700000000")
                .args(["--seed", "11", "--out-dir"])
                .arg(&out)
                .args(args)
                .output()
                .unwrap();
            assert!(
                status.status.success(),
                "{name} failed: {}",
                String::from_utf8_lossy(&status.stderr)
            );
            trees.push(read_tree(&out));
        }
        files += trees[0].len();
        if trees[0] != trees[1] || trees[0].is_empty() {
            failures.push(*name);
        }
    }
    let elapsed = t.elapsed();
    let pass = failures.is_empty();
    report(
        9,
        pass,
        elapsed,
        &format!(
            "{} commands, {files} files compared byte-for-byte, mismatches: {failures:?}",
            commands.len()
        ),
    );
    assert!(pass);
}
