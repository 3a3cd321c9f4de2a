//! Attention-imbalance diagnostics.
//!
//! Measures how much attention each modality's queries spend on their own
//! modality versus the others, how that cross-modal activation decays with
//! depth, and the cumulative error `E = Π_l γ^l ε_l` built from the decay fit.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::modality::{ModalityId, ModalityPair, Segmentation};
use crate::numerics::Matrix;
use crate::{Error, Result};

/// Tolerance for the row-normalization invariant of recorded weights.
pub const ROW_SUM_TOLERANCE: f64 = 1e-10;

/// Attention weights of one layer over real token positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLayer {
    pub layer_index: usize,
    /// `N × N`.
    pub weights: Matrix,
    /// Mass per query row held by sink columns that have no token position.
    pub sink_mass: Vec<f64>,
    pub segmentation: Segmentation,
}

/// Per-layer attention maps recorded during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    layers: Vec<TraceLayer>,
}

impl AttentionTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a layer after checking index order and row normalization.
    pub fn push(&mut self, layer: TraceLayer) -> Result<()> {
        let n = layer.segmentation.len();
        if layer.weights.shape() != (n, n) || layer.sink_mass.len() != n {
            return Err(Error::ShapeMismatch {
                op: "trace layer",
                lhs: (n, n),
                rhs: layer.weights.shape(),
            });
        }
        if let Some(last) = self.layers.last() {
            if layer.layer_index <= last.layer_index {
                return Err(Error::InvalidConfig(alloc::format!(
                    "trace layer index {} after {}",
                    layer.layer_index,
                    last.layer_index
                )));
            }
        }
        for i in 0..n {
            let s: f64 = layer.weights.row(i).iter().sum::<f64>() + layer.sink_mass[i];
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidConfig(alloc::format!(
                    "trace layer {} row {i} sums to {s}",
                    layer.layer_index
                )));
            }
        }
        self.layers.push(layer);
        Ok(())
    }

    pub fn layers(&self) -> &[TraceLayer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Mean attention weight on focus→focus entries and on focus→rest entries.
///
/// Means run over every entry of the respective block, including entries a
/// causal mask zeroes out. The cross mean is 0 when there is no rest
/// modality.
pub fn modality_activation(
    weights: &Matrix,
    seg: &Segmentation,
    pair: &ModalityPair,
) -> Result<(f64, f64)> {
    let n = seg.len();
    if weights.shape() != (n, n) {
        return Err(Error::ShapeMismatch {
            op: "modality_activation",
            lhs: (n, n),
            rhs: weights.shape(),
        });
    }
    let fi = seg.focus_indices(pair)?;
    let ri = seg.rest_indices(pair)?;
    let block_mean = |keys: &[usize]| -> f64 {
        if keys.is_empty() {
            return 0.0;
        }
        let mut s = 0.0;
        for &i in &fi {
            for &j in keys {
                s += weights[(i, j)];
            }
        }
        s / (fi.len() * keys.len()) as f64
    };
    Ok((block_mean(&fi), block_mean(&ri)))
}

/// `100·|self − cross| / max(self, cross)`, in `[0, 100]`.
pub fn disparity(self_mean: f64, cross_mean: f64) -> Result<f64> {
    if self_mean < 0.0 || cross_mean < 0.0 {
        return Err(Error::InvalidConfig(alloc::format!(
            "activations must be nonnegative: {self_mean}, {cross_mean}"
        )));
    }
    let hi = self_mean.max(cross_mean);
    if hi == 0.0 {
        return Err(Error::BothZero);
    }
    Ok(100.0 * (self_mean - cross_mean).abs() / hi)
}

/// Least-squares exponential fit `v_l ≈ c·γ^l`, layers numbered from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub gamma: f64,
    pub scale: f64,
    /// Multiplicative residuals `v_l / (c·γ^l)`.
    pub residuals: Vec<f64>,
}

pub fn fit_decay(series: &[f64]) -> Result<DecayFit> {
    if series.len() < 2 || series.iter().any(|v| *v <= 0.0 || !v.is_finite()) {
        return Err(Error::NonPositiveSeries);
    }
    let n = series.len() as f64;
    let ys: Vec<f64> = series.iter().map(|v| libm::log(*v)).collect();
    let x_mean = (n + 1.0) / 2.0;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (l, y) in ys.iter().enumerate() {
        let dx = (l + 1) as f64 - x_mean;
        sxy += dx * (y - y_mean);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let residuals = ys
        .iter()
        .enumerate()
        .map(|(l, y)| libm::exp(y - intercept - slope * (l + 1) as f64))
        .collect();
    Ok(DecayFit {
        gamma: libm::exp(slope),
        scale: libm::exp(intercept),
        residuals,
    })
}

/// `Π_{l=1..L} γ^l·ε_l`, accumulated in log space.
pub fn cumulative_dda(gamma: f64, eps: &[f64]) -> f64 {
    if gamma == 0.0 || eps.contains(&0.0) {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut negative = false;
    let log_gamma = libm::log(gamma.abs());
    for (idx, e) in eps.iter().enumerate() {
        let l = (idx + 1) as f64;
        log_sum += l * log_gamma + libm::log(e.abs());
        if gamma < 0.0 && (idx + 1) % 2 == 1 {
            negative = !negative;
        }
        if *e < 0.0 {
            negative = !negative;
        }
    }
    let mag = libm::exp(log_sum);
    if negative {
        -mag
    } else {
        mag
    }
}

/// Decay rate, per-layer residuals and the cumulative error built from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayProfile {
    pub gamma: f64,
    pub residuals: Vec<f64>,
    pub e_dda: f64,
}

impl DecayProfile {
    pub fn from_series(series: &[f64]) -> Result<Self> {
        let fit = fit_decay(series)?;
        let e_dda = cumulative_dda(fit.gamma, &fit.residuals);
        Ok(DecayProfile {
            gamma: fit.gamma,
            residuals: fit.residuals,
            e_dda,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusSummary {
    pub focus: ModalityId,
    pub self_mean: f64,
    pub cross_mean: f64,
    /// `None` when both means are zero.
    pub disparity: Option<f64>,
}

impl FocusSummary {
    pub fn new(focus: ModalityId, self_mean: f64, cross_mean: f64) -> Self {
        FocusSummary {
            focus,
            self_mean,
            cross_mean,
            disparity: disparity(self_mean, cross_mean).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer_index: usize,
    pub foci: Vec<FocusSummary>,
}

impl LayerSummary {
    pub fn focus(&self, m: ModalityId) -> Option<&FocusSummary> {
        self.foci.iter().find(|f| f.focus == m)
    }
}

/// Self/cross activation and disparity for every layer and focus modality.
pub fn summarize(trace: &AttentionTrace) -> Result<Vec<LayerSummary>> {
    trace
        .layers()
        .iter()
        .map(|layer| {
            let seg = &layer.segmentation;
            let foci = seg
                .modalities()
                .map(|m| {
                    let pair = ModalityPair::focus_on(seg, m)?;
                    let (s, c) = modality_activation(&layer.weights, seg, &pair)?;
                    Ok(FocusSummary::new(m, s, c))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LayerSummary {
                layer_index: layer.layer_index,
                foci,
            })
        })
        .collect()
}

/// Element-wise mean of several summaries with identical layout; disparity
/// is recomputed from the averaged means.
pub fn average_summaries(runs: &[Vec<LayerSummary>]) -> Vec<LayerSummary> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    let k = runs.len() as f64;
    first
        .iter()
        .enumerate()
        .map(|(l, layer)| LayerSummary {
            layer_index: layer.layer_index,
            foci: layer
                .foci
                .iter()
                .enumerate()
                .map(|(f, fs)| {
                    let (s, c) = runs.iter().fold((0.0, 0.0), |(s, c), r| {
                        (s + r[l].foci[f].self_mean, c + r[l].foci[f].cross_mean)
                    });
                    FocusSummary::new(fs.focus, s / k, c / k)
                })
                .collect(),
        })
        .collect()
}

/// Mean disparity over every (layer, focus) entry where it is defined.
pub fn mean_disparity(summaries: &[LayerSummary]) -> Option<f64> {
    let vals: Vec<f64> = summaries
        .iter()
        .flat_map(|l| l.foci.iter().filter_map(|f| f.disparity))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Per-layer disparity, averaged over focus modalities.
pub fn layer_disparities(summaries: &[LayerSummary]) -> Vec<f64> {
    summaries
        .iter()
        .map(|l| {
            let v: Vec<f64> = l.foci.iter().filter_map(|f| f.disparity).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        })
        .collect()
}

/// Which activation series a decay fit runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Series {
    SelfMean,
    CrossMean,
    Disparity,
}

/// Extracts `series` for `focus` across layers.
pub fn layer_series(summaries: &[LayerSummary], focus: ModalityId, series: Series) -> Vec<f64> {
    summaries
        .iter()
        .filter_map(|l| l.focus(focus))
        .map(|f| match series {
            Series::SelfMean => f.self_mean,
            Series::CrossMean => f.cross_mean,
            Series::Disparity => f.disparity.unwrap_or(f64::NAN),
        })
        .collect()
}
