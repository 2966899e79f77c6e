//! Boundary shape descriptors and their distances.
//!
//! Masks are traced into closed 8-connected chains, expanded into elliptic
//! Fourier descriptors (normalised for start point, rotation and scale) and
//! summarised by the seven Hu moment invariants. Prediction and ground truth
//! are then compared per image with Mahalanobis and Euclidean distances.

mod covariance;
mod efd;
mod moments;
mod trace;

use serde::{Deserialize, Serialize};

use crate::data::BinaryMask;
use crate::error::{Error, Result};
use crate::par::parallel_map;

pub use covariance::{euclidean, fit_covariance, mahalanobis, CovarianceModel, EIGEN_FLOOR};
pub use efd::{
    efd_compute, efd_from_points, efd_normalize, efd_reconstruct, efd_truncation_errors, mean_distance_to_polyline,
    EfdDescriptor,
};
pub use moments::{hu_distance, hu_from_moments, hu_moments, log_transform, HuDescriptor, Moments, LOG_FLOOR};
pub use trace::{largest_component, trace_boundary, ContourChain};

pub const DEFAULT_HARMONICS: usize = 100;
pub const DEFAULT_SHRINKAGE: f64 = 0.1;

/// Which distance is reported as the headline number for each descriptor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistancePairing {
    /// EFD with Mahalanobis, Hu with Euclidean.
    #[default]
    Equations,
    /// EFD with Euclidean, Hu with Mahalanobis.
    Swapped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContourConfig {
    pub harmonics: usize,
    pub shrinkage: f64,
    pub pairing: DistancePairing,
}

impl Default for ContourConfig {
    fn default() -> Self {
        ContourConfig {
            harmonics: DEFAULT_HARMONICS,
            shrinkage: DEFAULT_SHRINKAGE,
            pairing: DistancePairing::Equations,
        }
    }
}

impl ContourConfig {
    pub fn validate(&self) -> Result<()> {
        if self.harmonics == 0 {
            return Err(Error::Config("harmonics must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.shrinkage) {
            return Err(Error::Config(format!("shrinkage must lie in [0, 1], got {}", self.shrinkage)));
        }
        Ok(())
    }
}

/// Normalised EFD and Hu descriptors of one mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeFeatures {
    pub efd: EfdDescriptor,
    pub hu: HuDescriptor,
}

pub fn shape_features(mask: &BinaryMask, harmonics: usize) -> Result<ShapeFeatures> {
    let chain = trace_boundary(mask)?;
    let efd = efd_normalize(&efd_compute(&chain, harmonics)?)?;
    Ok(ShapeFeatures {
        efd,
        hu: hu_moments(mask)?,
    })
}

pub const CONTOUR_COLUMNS: [&str; 4] = ["efd_mahalanobis", "efd_euclidean", "hu_euclidean", "hu_mahalanobis"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourRow {
    pub image_id: String,
    pub efd_mahalanobis: f64,
    pub efd_euclidean: f64,
    pub hu_euclidean: f64,
    pub hu_mahalanobis: f64,
}

impl ContourRow {
    pub fn column(&self, name: &str) -> Option<f64> {
        Some(match name {
            "efd_mahalanobis" => self.efd_mahalanobis,
            "efd_euclidean" => self.efd_euclidean,
            "hu_euclidean" => self.hu_euclidean,
            "hu_mahalanobis" => self.hu_mahalanobis,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourReport {
    pub config: ContourConfig,
    pub rows: Vec<ContourRow>,
    /// Image ids excluded because a mask was empty or too small to trace.
    pub skipped: Vec<String>,
    pub mean_efd_mahalanobis: f64,
    pub mean_efd_euclidean: f64,
    pub mean_hu_euclidean: f64,
    pub mean_hu_mahalanobis: f64,
}

impl ContourReport {
    /// Headline `(EFD, Hu)` means under the configured pairing.
    pub fn headline(&self) -> (f64, f64) {
        match self.config.pairing {
            DistancePairing::Equations => (self.mean_efd_mahalanobis, self.mean_hu_euclidean),
            DistancePairing::Swapped => (self.mean_efd_euclidean, self.mean_hu_mahalanobis),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("image_id,{}\n", CONTOUR_COLUMNS.join(","));
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.image_id, r.efd_mahalanobis, r.efd_euclidean, r.hu_euclidean, r.hu_mahalanobis
            ));
        }
        out
    }
}

/// Per-image EFD and Hu distances between ground truth and prediction.
///
/// Both Mahalanobis covariances are fitted on the ground-truth descriptors
/// of the pairs that could be traced. Pairs with an empty or untraceable mask
/// are listed in `skipped`.
pub fn contour_report(
    ids: &[String],
    truth: &[&BinaryMask],
    pred: &[&BinaryMask],
    config: &ContourConfig,
    jobs: usize,
) -> Result<ContourReport> {
    config.validate()?;
    if truth.len() != pred.len() || ids.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "contour report needs paired inputs, got {} ids, {} truths, {} predictions",
            ids.len(),
            truth.len(),
            pred.len()
        )));
    }
    let idx: Vec<usize> = (0..truth.len()).collect();
    if let Some(i) = idx.iter().find(|&&i| truth[i].dims() != pred[i].dims()) {
        return Err(Error::ShapeMismatch {
            op: "contour_report",
            lhs: vec![truth[*i].height(), truth[*i].width()],
            rhs: vec![pred[*i].height(), pred[*i].width()],
        });
    }
    let features = parallel_map(&idx, jobs, |&i| -> Option<(ShapeFeatures, ShapeFeatures)> {
        Some((
            shape_features(truth[i], config.harmonics).ok()?,
            shape_features(pred[i], config.harmonics).ok()?,
        ))
    });
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for (i, f) in features.into_iter().enumerate() {
        match f {
            Some(pair) => kept.push((i, pair)),
            None => skipped.push(ids[i].clone()),
        }
    }
    if kept.len() < 2 {
        return Err(Error::Empty(format!(
            "contour report needs at least 2 traceable pairs for the covariance fit, got {}",
            kept.len()
        )));
    }
    let efd_cov = fit_covariance(
        &kept.iter().map(|(_, (t, _))| t.efd.flatten()).collect::<Vec<_>>(),
        config.shrinkage,
    )?;
    let hu_cov = fit_covariance(
        &kept.iter().map(|(_, (t, _))| t.hu.phi.to_vec()).collect::<Vec<_>>(),
        config.shrinkage,
    )?;
    let mut rows = Vec::with_capacity(kept.len());
    for (i, (t, p)) in &kept {
        let (te, pe) = (t.efd.flatten(), p.efd.flatten());
        rows.push(ContourRow {
            image_id: ids[*i].clone(),
            efd_mahalanobis: mahalanobis(&te, &pe, &efd_cov)?,
            efd_euclidean: euclidean(&te, &pe),
            hu_euclidean: hu_distance(&t.hu, &p.hu),
            hu_mahalanobis: mahalanobis(&t.hu.phi, &p.hu.phi, &hu_cov)?,
        });
    }
    let mean = |f: fn(&ContourRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    Ok(ContourReport {
        config: config.clone(),
        mean_efd_mahalanobis: mean(|r| r.efd_mahalanobis),
        mean_efd_euclidean: mean(|r| r.efd_euclidean),
        mean_hu_euclidean: mean(|r| r.hu_euclidean),
        mean_hu_mahalanobis: mean(|r| r.hu_mahalanobis),
        rows,
        skipped,
    })
}
