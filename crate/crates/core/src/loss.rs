//! Teacher-view cross-entropy, confidence-masked student-view cross-entropy and their
//! weighted sum.
//!
//! Probability and target tensors are `[n, 2, h, w]`. The mean reduction divides by the
//! pixel count `n * h * w` for both terms, so the student term is not renormalised by
//! the number of entries passing the mask.

use serde::{Deserialize, Serialize};

use crate::autograd::{weighted_neg_log, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Divide by the number of pixels.
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Teacher confidence threshold; entries pass when strictly above it.
    pub tau: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            tau: 0.8,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        for (name, v) in [("loss.lambda1", self.lambda1), ("loss.lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::config(format!("tau must lie in [0, 1], got {tau}")))
    }
}

/// Binary per pixel-class indicator of teacher confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMask {
    shape: Vec<usize>,
    values: Vec<u8>,
    tau: f64,
}

impl ConfidenceMask {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    /// Mask of ones; reduces the student term to plain cross-entropy.
    pub fn all_ones(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![1; shape.iter().product()],
            tau: 0.0,
        }
    }

    /// Share of pixel-class entries that pass the threshold.
    pub fn masked_fraction(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|&v| v as usize).sum::<usize>() as f64 / self.values.len() as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_ce_aug: f64,
    pub total: f64,
    pub masked_fraction: f64,
}

impl LossBreakdown {
    /// Fails on the first non-finite term.
    pub fn check_finite(&self) -> Result<()> {
        for (term, value) in [("l_ce", self.l_ce), ("l_ce_aug", self.l_ce_aug), ("total", self.total)] {
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { term, value });
            }
        }
        Ok(())
    }
}

fn check_pair(y: &Tensor, t: &Tensor) -> Result<()> {
    if y.shape() != t.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ in shape",
            y.shape(),
            t.shape()
        )));
    }
    if y.shape().len() != 4 || y.shape()[1] != 2 {
        return Err(Error::shape(format!("expected [n, 2, h, w], got {:?}", y.shape())));
    }
    Ok(())
}

fn denominator(shape: &[usize], reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Mean => (shape[0] * shape[2] * shape[3]) as f64,
        Reduction::Sum => 1.0,
    }
}

fn coefficients(t: &Tensor, mask: Option<&ConfidenceMask>, reduction: Reduction) -> Vec<f64> {
    let d = denominator(t.shape(), reduction);
    match mask {
        Some(m) => t
            .data()
            .iter()
            .zip(&m.values)
            .map(|(&t, &m)| if m == 1 { t / d } else { 0.0 })
            .collect(),
        None => t.data().iter().map(|&t| t / d).collect(),
    }
}

/// `-sum t log y` under the chosen reduction, with the log argument clamped at 1e-12.
pub fn cross_entropy_loss(y: &Tensor, t: &Tensor, reduction: Reduction) -> Result<f64> {
    check_pair(y, t)?;
    Ok(weighted_neg_log(y.data(), &coefficients(t, None, reduction)))
}

/// Indicator `y > tau` per entry; detached from any graph.
pub fn confidence_mask(y: &Tensor, tau: f64) -> Result<ConfidenceMask> {
    check_tau(tau)?;
    Ok(ConfidenceMask {
        shape: y.shape().to_vec(),
        values: y.data().iter().map(|&p| u8::from(p > tau)).collect(),
        tau,
    })
}

/// `-sum mask * t * log y_aug`, normalised like [`cross_entropy_loss`].
pub fn augmented_view_loss(
    y_aug: &Tensor,
    t: &Tensor,
    mask: &ConfidenceMask,
    reduction: Reduction,
) -> Result<f64> {
    check_pair(y_aug, t)?;
    if mask.shape != y_aug.shape() {
        return Err(Error::shape(format!(
            "mask {:?} does not match prediction {:?}",
            mask.shape,
            y_aug.shape()
        )));
    }
    Ok(weighted_neg_log(y_aug.data(), &coefficients(t, Some(mask), reduction)))
}

/// Builds the mask from the teacher view `y` and combines both terms.
pub fn total_loss(y: &Tensor, y_aug: &Tensor, t: &Tensor, config: &LossConfig) -> Result<LossBreakdown> {
    config.validate()?;
    let l_ce = cross_entropy_loss(y, t, config.reduction)?;
    let mask = confidence_mask(y, config.tau)?;
    let l_ce_aug = augmented_view_loss(y_aug, t, &mask, config.reduction)?;
    Ok(LossBreakdown {
        l_ce,
        l_ce_aug,
        total: config.lambda1 * l_ce + config.lambda2 * l_ce_aug,
        masked_fraction: mask.masked_fraction(),
    })
}

/// Graph-level total loss. `y_aug == None` drops the student term entirely.
/// The mask is computed from the teacher probabilities' values and carries no gradient.
pub fn total_loss_graph(
    g: &mut Graph,
    y: Var,
    y_aug: Option<Var>,
    t: &Tensor,
    config: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    config.validate()?;
    check_pair(g.value(y), t)?;
    let mask = confidence_mask(g.value(y), config.tau)?;
    let ce = g.nll(y, coefficients(t, None, config.reduction));
    let l_ce = g.value(ce).data()[0];
    let (root, l_ce_aug) = match y_aug {
        Some(ya) => {
            check_pair(g.value(ya), t)?;
            let aug = g.nll(ya, coefficients(t, Some(&mask), config.reduction));
            let l_aug = g.value(aug).data()[0];
            let root = g.weighted_sum(&[(ce, config.lambda1), (aug, config.lambda2)]);
            (root, l_aug)
        }
        None => (g.weighted_sum(&[(ce, config.lambda1)]), 0.0),
    };
    let breakdown = LossBreakdown {
        l_ce,
        l_ce_aug,
        total: g.value(root).data()[0],
        masked_fraction: mask.masked_fraction(),
    };
    Ok((root, breakdown))
}
