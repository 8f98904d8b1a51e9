//! Adversarial, content and feature-matching objectives and their weighting.
//!
//! The generator minimizes
//! `alpha * adv + (1 - alpha) * ((1 - beta1) * content + beta1 * fm)`
//! where `alpha` decays geometrically with the epoch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::FeatureExtractor;
use crate::tensor::{Float, Graph, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// `alpha(n) = alpha0 / decay^n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub alpha0: f64,
    pub decay: f64,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule {
            alpha0: 0.95,
            decay: 1.05,
        }
    }
}

impl AlphaSchedule {
    pub fn at(&self, epoch: u32) -> f64 {
        self.alpha0 / self.decay.powf(f64::from(epoch))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0 <= 1.0 && self.decay > 1.0) {
            return Err(Error::config(format!(
                "alpha schedule needs alpha0 in (0, 1] and decay > 1, got {} / {}",
                self.alpha0, self.decay
            )));
        }
        Ok(())
    }
}

pub fn alpha_at(schedule: &AlphaSchedule, epoch: u32) -> f64 {
    schedule.at(epoch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    /// `mean(log(1 - D(G(z))))`, minimized by the generator.
    #[default]
    Minimax,
    /// `-mean(log D(G(z)))`.
    NonSaturating,
}

impl std::str::FromStr for AdversarialForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minimax" => Ok(AdversarialForm::Minimax),
            "non_saturating" | "non-saturating" => Ok(AdversarialForm::NonSaturating),
            other => Err(Error::config(format!("unknown adversarial form `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossWeights {
    /// Share of the feature-matching term inside the perceptual part.
    pub beta1: f64,
    pub adversarial_form: AdversarialForm,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta1) {
            return Err(Error::config(format!(
                "beta1 must be in [0, 1], got {}",
                self.beta1
            )));
        }
        Ok(())
    }
}

/// Scalar values of each generator loss term for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub adversarial: f64,
    pub content: f64,
    pub feature_matching: f64,
    pub alpha_used: f64,
}

impl LossReport {
    /// Weighted total from the individual terms.
    pub fn combine(
        alpha: f64,
        beta1: f64,
        adversarial: f64,
        content: f64,
        feature_matching: f64,
    ) -> f64 {
        alpha * adversarial + (1.0 - alpha) * ((1.0 - beta1) * content + beta1 * feature_matching)
    }
}

pub struct GeneratorLoss {
    pub total: Var,
    pub report: LossReport,
}

/// `−mean(log D(x)) − mean(log(1 − D(G(z))))`.
pub fn discriminator_loss<F: Float>(g: &mut Graph<F>, d_on_real: Var, d_on_fake: Var) -> Var {
    let eps = F::from_f64_lossy(PROB_EPS);
    let log_real = g.log_clamped(d_on_real, eps);
    let real = g.mean_all(log_real);
    let one_minus_fake = g.affine(d_on_fake, -F::one(), F::one());
    let log_fake = g.log_clamped(one_minus_fake, eps);
    let fake = g.mean_all(log_fake);
    let sum = g.add(real, fake).expect("scalar terms");
    g.affine(sum, -F::one(), F::zero())
}

/// Builds the weighted generator objective on `g`.
///
/// The feature extractor is only invoked when `beta1 > 0`.
pub fn generator_loss<F: Float>(
    g: &mut Graph<F>,
    d_on_fake: Var,
    gen_hr: Var,
    target_hr: Var,
    features: Option<&dyn FeatureExtractor<F>>,
    weights: &LossWeights,
    alpha: f64,
) -> Result<GeneratorLoss> {
    weights.validate()?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    let eps = F::from_f64_lossy(PROB_EPS);
    let adv = match weights.adversarial_form {
        AdversarialForm::Minimax => {
            let one_minus = g.affine(d_on_fake, -F::one(), F::one());
            let logs = g.log_clamped(one_minus, eps);
            g.mean_all(logs)
        }
        AdversarialForm::NonSaturating => {
            let logs = g.log_clamped(d_on_fake, eps);
            let m = g.mean_all(logs);
            g.affine(m, -F::one(), F::zero())
        }
    };
    let content = g.l1_distance(target_hr, gen_hr)?;

    let beta1 = weights.beta1;
    let fm = if beta1 > 0.0 {
        let extractor =
            features.ok_or_else(|| Error::config("beta1 > 0 needs a feature extractor"))?;
        let target_features = extractor.extract(g, target_hr)?;
        let gen_features = extractor.extract(g, gen_hr)?;
        Some(g.l1_distance(target_features, gen_features)?)
    } else {
        None
    };

    let f = F::from_f64_lossy;
    let weighted_adv = g.affine(adv, f(alpha), F::zero());
    let weighted_content = g.affine(content, f((1.0 - alpha) * (1.0 - beta1)), F::zero());
    let mut total = g.add(weighted_adv, weighted_content)?;
    if let Some(fm) = fm {
        let weighted_fm = g.affine(fm, f((1.0 - alpha) * beta1), F::zero());
        total = g.add(total, weighted_fm)?;
    }

    let report = LossReport {
        total: g.value(total).item().as_f64(),
        adversarial: g.value(adv).item().as_f64(),
        content: g.value(content).item().as_f64(),
        feature_matching: fm.map_or(0.0, |v| g.value(v).item().as_f64()),
        alpha_used: alpha,
    };
    Ok(GeneratorLoss { total, report })
}
