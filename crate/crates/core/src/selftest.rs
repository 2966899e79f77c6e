//! Built-in checks runnable from the command line: gradients of every tape
//! operation, gradients of the four miniature network variants, and a few
//! metric values with known answers.

use serde::Serialize;

use crate::contour::{efd_compute, efd_normalize, efd_truncation_errors, hu_moments, trace_boundary};
use crate::data::{BinaryMask, RgbImage};
use crate::error::Result;
use crate::model::{build_model, ArchConfig, Model, VariantFlags};
use crate::region::compare_masks;
use crate::stats::{rank_sum_test, RankSumMethod};
use crate::tensor::op_gradient_suite;
use crate::training::{parameter_gradient_check, FocalLossParams};

/// Tolerance on relative gradient error.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn error(name: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Self::new(name, false, format!("error: {err}"))
    }
}

fn tolerance_check(name: String, value: f64, tol: f64) -> CheckOutcome {
    CheckOutcome::new(name, value < tol, format!("{value:.3e} (limit {tol:.0e})"))
}

/// Finite-difference check of each differentiable tape operation.
pub fn op_gradient_checks(seed: u64) -> Vec<CheckOutcome> {
    match op_gradient_suite(seed) {
        Ok(list) => list
            .into_iter()
            .map(|(op, err)| tolerance_check(format!("grad/{op}"), err, GRADIENT_TOLERANCE))
            .collect(),
        Err(e) => vec![CheckOutcome::error("grad/ops", e)],
    }
}

/// 16x16 two-stage configuration used for the variant gradient checks.
pub fn miniature_config() -> ArchConfig {
    ArchConfig {
        input_h: 16,
        input_w: 16,
        depth: 2,
        stage_widths: vec![4, 8],
        ..Default::default()
    }
}

fn miniature_sample(seed: u64) -> (RgbImage, BinaryMask) {
    use rand::Rng;
    let mut rng = crate::rng::stream_rng(seed, 0);
    let img = RgbImage::from_fn(16, 16, |_, _| [rng.random(), rng.random(), rng.random()]);
    let cx = 6.0 + seed as f64 % 4.0;
    let mask = BinaryMask::from_fn(16, 16, |r, c| (r as f64 - 7.5).hypot(c as f64 - cx) < 5.0);
    (img, mask)
}

/// Worst relative error between the analytic and numeric loss gradient on
/// `samples` random parameters of a miniature model of each variant.
pub fn variant_gradient_errors(samples: usize, seed: u64) -> Result<Vec<(VariantFlags, f64)>> {
    let (i1, m1) = miniature_sample(1);
    let (i2, m2) = miniature_sample(2);
    VariantFlags::ALL
        .iter()
        .map(|&flags| {
            let model: Model<f64> = build_model(&miniature_config(), flags, seed)?;
            let err = parameter_gradient_check(
                &model,
                &[&i1, &i2],
                &[&m1, &m2],
                &FocalLossParams::default(),
                samples,
                seed,
                1e-6,
            )?;
            Ok((flags, err))
        })
        .collect()
}

pub fn variant_gradient_checks(samples: usize, seed: u64) -> Vec<CheckOutcome> {
    match variant_gradient_errors(samples, seed) {
        Ok(list) => list
            .into_iter()
            .map(|(f, err)| tolerance_check(format!("grad/model_{}", f.label()), err, GRADIENT_TOLERANCE))
            .collect(),
        Err(e) => vec![CheckOutcome::error("grad/model", e)],
    }
}

/// Metric values with hand-computed answers.
pub fn metric_checks() -> Vec<CheckOutcome> {
    let mut out = Vec::new();

    // 4x4: truth is the left half, prediction the top-left 3x2 block plus one stray pixel.
    let truth = BinaryMask::from_fn(4, 4, |_, c| c < 2);
    let pred = BinaryMask::from_fn(4, 4, |r, c| (r < 3 && c < 2) || (r == 0 && c == 3));
    out.push(match compare_masks(&truth, &pred) {
        Ok(rep) => {
            // tp 6, fp 1, fn 2, tn 7
            let want = [6.0 / 8.0, 1.0 / 8.0, 7.0 / 8.0, 2.0 / 8.0, 12.0 / 15.0, 6.0 / 9.0];
            let worst = rep.values().iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            CheckOutcome::new("region/confusion", worst < 1e-12, format!("max deviation {worst:.1e}"))
        }
        Err(e) => CheckOutcome::error("region/confusion", e),
    });

    let blob = BinaryMask::from_fn(40, 40, |r, c| {
        let (y, x) = (r as f64 - 18.0, c as f64 - 21.0);
        (x / 12.0).powi(2) + (y / 7.0).powi(2) < 1.0 || (x > 0.0 && x < 4.0 && y > 0.0 && y < 14.0)
    });
    let turned = BinaryMask::from_fn(40, 40, |r, c| blob.get(39 - c, r));
    out.push(match (hu_moments(&blob), hu_moments(&turned)) {
        (Ok(a), Ok(b)) => {
            let worst = a.phi.iter().zip(&b.phi).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            CheckOutcome::new("hu/quarter_turn", worst < 1e-9, format!("max deviation {worst:.1e}"))
        }
        (Err(e), _) | (_, Err(e)) => CheckOutcome::error("hu/quarter_turn", e),
    });

    out.push(
        match trace_boundary(&blob).and_then(|ch| {
            let raw = efd_compute(&ch, 30)?;
            let norm = efd_normalize(&raw)?;
            let errs = efd_truncation_errors(&ch.xy(), &raw)?;
            Ok((norm, errs))
        }) {
            Ok((norm, errs)) => {
                let c1 = norm.coefficients[0];
                let canonical = (c1[0] - 1.0).abs() < 1e-12 && c1[1].abs() < 1e-12 && c1[2].abs() < 1e-12;
                let monotone = errs.windows(2).all(|w| w[1] <= w[0] + 1e-12);
                CheckOutcome::new(
                    "efd/normalised_and_monotone",
                    canonical && monotone,
                    format!("first harmonic {c1:?}, error at N=30 {:.3e}", errs.last().copied().unwrap_or(f64::NAN)),
                )
            }
            Err(e) => CheckOutcome::error("efd/normalised_and_monotone", e),
        },
    );

    out.push(match rank_sum_test(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], RankSumMethod::Exact) {
        Ok(r) => CheckOutcome::new(
            "stats/exact_rank_sum",
            (r.p_two_sided - 0.1).abs() < 1e-12,
            format!("p = {}", r.p_two_sided),
        ),
        Err(e) => CheckOutcome::error("stats/exact_rank_sum", e),
    });
    out
}

/// Every check: operations, miniature variants and metrics.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let mut out = op_gradient_checks(seed);
    out.extend(variant_gradient_checks(10, seed));
    out.extend(metric_checks());
    out
}
