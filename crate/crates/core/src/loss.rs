//! InfoNCE, per-scale spatial and temporal contrast, and the weighted
//! compound objective.
//!
//! All losses are sums over the batch and anchored on the query clip: row `i`
//! of the similarity matrix compares query `i` against every candidate `j`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{
    self, BoundParams, EmbeddingSet, EncoderConfig, PoolMode, Role, ScaleEmbedding,
};
use crate::error::{HdcError, Result};
use crate::tensor::{Element, GradTape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    /// Spatial contrast weight per scale.
    pub alphas: BTreeMap<usize, f64>,
    /// Temporal contrast weight per scale.
    pub betas: BTreeMap<usize, f64>,
    /// Scales at which spatial contrast is enabled.
    pub spatial_scales: Vec<usize>,
    /// Scales at which temporal contrast is enabled.
    pub temporal_scales: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        let weights: BTreeMap<usize, f64> = [(3, 0.25), (4, 0.5), (5, 1.0)].into();
        LossConfig {
            tau: 0.07,
            alphas: weights.clone(),
            betas: weights,
            spatial_scales: vec![3, 4, 5],
            temporal_scales: vec![3, 4, 5],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HdcError::Config(format!("loss: {m}")));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        for (k, w) in self.alphas.iter().chain(&self.betas) {
            if !(*w >= 0.0 && w.is_finite()) {
                return fail(format!(
                    "weight for scale {k} must be finite and >= 0, got {w}"
                ));
            }
        }
        for k in &self.spatial_scales {
            if !self.alphas.contains_key(k) {
                return fail(format!(
                    "spatial contrast enabled at scale {k} without an alpha"
                ));
            }
        }
        for k in &self.temporal_scales {
            if !self.betas.contains_key(k) {
                return fail(format!(
                    "temporal contrast enabled at scale {k} without a beta"
                ));
            }
        }
        Ok(())
    }

    /// Enabled scales with a positive weight, as `(spatial, temporal)`.
    /// Zero-weight terms are left out of the graph entirely.
    pub fn active_scales(&self) -> (Vec<usize>, Vec<usize>) {
        let pick = |scales: &[usize], w: &BTreeMap<usize, f64>| {
            let mut v: Vec<usize> = scales
                .iter()
                .copied()
                .filter(|k| w.get(k).is_some_and(|x| *x > 0.0))
                .collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        (
            pick(&self.spatial_scales, &self.alphas),
            pick(&self.temporal_scales, &self.betas),
        )
    }

    pub fn scale_weights(&mut self, factor: f64) {
        self.alphas.values_mut().for_each(|w| *w *= factor);
        self.betas.values_mut().for_each(|w| *w *= factor);
    }
}

/// `-sum_i log softmax_j(cos(a_i, p_j) / tau)[i]`, with row-max subtraction.
pub fn info_nce<F: Element>(
    tape: &mut GradTape<F>,
    anchors: Var,
    positives: Var,
    tau: f64,
) -> Result<Var> {
    let b = tape.shape(anchors).first().copied().unwrap_or(0);
    if b < 2 {
        return Err(HdcError::InvalidArgument(format!(
            "info_nce needs at least 2 instances for negatives, got {b}"
        )));
    }
    if !(tau > 0.0) {
        return Err(HdcError::InvalidArgument(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let sim = tape.cosine_similarity_matrix(anchors, positives)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    tape.diag_cross_entropy(logits)
}

/// Mean over temporal slots of the per-slot InfoNCE between spatial-mode sets.
pub fn spatial_contrast_loss<F: Element>(
    tape: &mut GradTape<F>,
    original: &EmbeddingSet,
    spatial: &EmbeddingSet,
    scale: usize,
    tau: f64,
) -> Result<Var> {
    let (ScaleEmbedding::Spatial(a), ScaleEmbedding::Spatial(p)) =
        (original.get(scale)?, spatial.get(scale)?)
    else {
        return Err(HdcError::InvalidArgument(
            "spatial contrast needs spatial-mode embeddings".into(),
        ));
    };
    if a.len() != p.len() || a.is_empty() {
        return Err(HdcError::InvalidArgument(format!(
            "spatial contrast slot count mismatch: {} vs {}",
            a.len(),
            p.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (x, y) in a.iter().zip(p) {
        let term = info_nce(tape, *x, *y, tau)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    tape.scale(total.expect("non-empty"), 1.0 / a.len() as f64)
}

/// InfoNCE between global-mode embeddings of the query and temporal variant.
pub fn temporal_contrast_loss<F: Element>(
    tape: &mut GradTape<F>,
    original: &EmbeddingSet,
    temporal: &EmbeddingSet,
    scale: usize,
    tau: f64,
) -> Result<Var> {
    let (ScaleEmbedding::Global(a), ScaleEmbedding::Global(p)) =
        (original.get(scale)?, temporal.get(scale)?)
    else {
        return Err(HdcError::InvalidArgument(
            "temporal contrast needs global-mode embeddings".into(),
        ));
    };
    info_nce(tape, *a, *p, tau)
}

/// Per-scale subtask losses; `None` marks a term that was not computed.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScaleLosses {
    pub spatial: Option<f64>,
    pub temporal: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub spatial: BTreeMap<usize, f64>,
    pub temporal: BTreeMap<usize, f64>,
    pub total: f64,
}

/// `sum_k alpha_k * L_s^k + beta_k * L_t^k` over the provided terms.
pub fn hd_nce(
    per_scale: &BTreeMap<usize, ScaleLosses>,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let mut out = LossBreakdown::default();
    for (k, l) in per_scale {
        if let Some(v) = l.spatial {
            let a = config
                .alphas
                .get(k)
                .ok_or_else(|| HdcError::InvalidArgument(format!("no alpha for scale {k}")))?;
            out.spatial.insert(*k, v);
            out.total += a * v;
        }
        if let Some(v) = l.temporal {
            let b = config
                .betas
                .get(k)
                .ok_or_else(|| HdcError::InvalidArgument(format!("no beta for scale {k}")))?;
            out.temporal.insert(*k, v);
            out.total += b * v;
        }
    }
    Ok(out)
}

/// The compound objective recorded on a tape.
pub struct Objective {
    /// `None` when no term is active, in which case there is nothing to optimize.
    pub total: Option<Var>,
    pub breakdown: LossBreakdown,
}

/// Batches for the three clip variants, each `[B, T, H, W, C]`.
pub struct VariantBatches {
    pub original: Var,
    pub spatial: Var,
    pub temporal: Var,
}

/// Encodes the variants and assembles the weighted objective. Roles whose
/// subtasks are all inactive are not encoded.
pub fn hdc_objective<F: Element>(
    tape: &mut GradTape<F>,
    encoder_config: &EncoderConfig,
    loss_config: &LossConfig,
    params: &BoundParams,
    batches: &VariantBatches,
) -> Result<Objective> {
    let (sc, tc) = loss_config.active_scales();
    if sc.is_empty() && tc.is_empty() {
        return Ok(Objective {
            total: None,
            breakdown: LossBreakdown::default(),
        });
    }
    let tau = loss_config.tau;
    let pyr_o = encoder::forward(tape, encoder_config, params, batches.original)?;
    let mut per_scale: BTreeMap<usize, (Option<Var>, Option<Var>)> = BTreeMap::new();

    if !sc.is_empty() {
        let pyr_s = encoder::forward(tape, encoder_config, params, batches.spatial)?;
        let eo = encoder::pool_and_project(
            tape,
            &pyr_o,
            &sc,
            Role::Original,
            PoolMode::Spatial,
            params,
        )?;
        let es =
            encoder::pool_and_project(tape, &pyr_s, &sc, Role::Spatial, PoolMode::Spatial, params)?;
        for &k in &sc {
            per_scale.entry(k).or_default().0 =
                Some(spatial_contrast_loss(tape, &eo, &es, k, tau)?);
        }
    }
    if !tc.is_empty() {
        let pyr_t = encoder::forward(tape, encoder_config, params, batches.temporal)?;
        let eo =
            encoder::pool_and_project(tape, &pyr_o, &tc, Role::Original, PoolMode::Global, params)?;
        let et =
            encoder::pool_and_project(tape, &pyr_t, &tc, Role::Temporal, PoolMode::Global, params)?;
        for &k in &tc {
            per_scale.entry(k).or_default().1 =
                Some(temporal_contrast_loss(tape, &eo, &et, k, tau)?);
        }
    }

    let mut total: Option<Var> = None;
    let mut values = BTreeMap::new();
    for (k, (s, t)) in &per_scale {
        let mut entry = ScaleLosses::default();
        for (var, weights, slot) in [
            (s, &loss_config.alphas, &mut entry.spatial),
            (t, &loss_config.betas, &mut entry.temporal),
        ] {
            let Some(var) = var else { continue };
            *slot = Some(tape.value(*var).item().to_f64().unwrap_or(f64::NAN));
            let weighted = tape.scale(*var, weights[k])?;
            total = Some(match total {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
        }
        values.insert(*k, entry);
    }
    Ok(Objective {
        total,
        breakdown: hd_nce(&values, loss_config)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let mut missing = LossConfig::default();
        missing.alphas.remove(&4);
        assert!(missing.validate().is_err());
        let mut negative = LossConfig::default();
        negative.betas.insert(3, -1.0);
        assert!(negative.validate().is_err());
    }

    #[test]
    fn zero_weights_are_inactive() {
        let mut cfg = LossConfig::default();
        cfg.alphas.insert(3, 0.0);
        let (sc, tc) = cfg.active_scales();
        assert_eq!(sc, vec![4, 5]);
        assert_eq!(tc, vec![3, 4, 5]);
    }

    #[test]
    fn hd_nce_missing_weight() {
        let per: BTreeMap<usize, ScaleLosses> = [(
            7,
            ScaleLosses {
                spatial: Some(1.0),
                temporal: None,
            },
        )]
        .into();
        assert!(hd_nce(&per, &LossConfig::default()).is_err());
    }
}
