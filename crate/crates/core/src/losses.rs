//! Loss terms of the zero-style objective.
//!
//! Each term has a differentiable form over a [`Graph`] (used in training) and
//! a plain-value form built on the same graph code (used in evaluation and
//! tests). All L1 and cross-entropy terms use mean reduction.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::datamodel::{Image, LabelMap, ProbabilityMap};
use crate::error::{Error, Result};
use crate::networks::StyleCode;

/// Lower clamp applied to probabilities before the logarithm.
pub const CE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdversarialRole {
    Generator,
    Discriminator,
}

/// Term weights of the overall objective plus per-class CE weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub zero: f64,
    pub zero_trans: f64,
    pub seg: f64,
    pub cycle: f64,
    pub rec: f64,
    pub adv_image: f64,
    pub adv_output: f64,
    pub seg_ct: f64,
    /// Weight of the target pseudo-label cross-entropy used for self-training.
    pub self_training: f64,
    /// β of the effective-number class balancing.
    pub class_balance_beta: f64,
    /// Explicit class weights; empty means "derive from source pixel counts".
    pub class_weights: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            zero: 1.0,
            zero_trans: 1.0,
            seg: 1.0,
            cycle: 10.0,
            rec: 10.0,
            adv_image: 1.0,
            adv_output: 0.01,
            seg_ct: 1.0,
            self_training: 1.0,
            class_balance_beta: 0.999,
            class_weights: Vec::new(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("zero", self.zero),
            ("zero_trans", self.zero_trans),
            ("seg", self.seg),
            ("cycle", self.cycle),
            ("rec", self.rec),
            ("adv_image", self.adv_image),
            ("adv_output", self.adv_output),
            ("seg_ct", self.seg_ct),
            ("self_training", self.self_training),
        ];
        if let Some((name, v)) = named.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "losses.{name} must be finite and non-negative, got {v}"
            )));
        }
        if !(0.0..1.0).contains(&self.class_balance_beta) {
            return Err(Error::Config(
                "losses.class_balance_beta must be in [0, 1)".into(),
            ));
        }
        if self
            .class_weights
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::Config(
                "losses.class_weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Values of every term for one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rec: f64,
    pub adv_image: f64,
    pub adv_output: f64,
    pub zero: f64,
    pub zero_trans: f64,
    pub seg: f64,
    pub cycle: f64,
    pub seg_ct: f64,
    pub self_training: f64,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, f64); 9] {
        [
            ("rec", self.rec),
            ("adv_image", self.adv_image),
            ("adv_output", self.adv_output),
            ("zero", self.zero),
            ("zero_trans", self.zero_trans),
            ("seg", self.seg),
            ("cycle", self.cycle),
            ("seg_ct", self.seg_ct),
            ("self_training", self.self_training),
        ]
    }
}

/// Unnormalized effective-number weight `(1 - β) / (1 - β^n)`.
pub fn effective_number_weight(count: u64, beta: f64) -> f64 {
    (1.0 - beta) / (1.0 - beta.powf(count as f64))
}

/// Class-balanced weights from pixel counts, rescaled to mean 1 over the
/// classes that occur. Absent classes get weight 0.
pub fn class_balanced_weights(counts: &[u64], beta: f64) -> Vec<f64> {
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| {
            if n == 0 {
                0.0
            } else {
                effective_number_weight(n, beta)
            }
        })
        .collect();
    let present = counts.iter().filter(|&&n| n > 0).count();
    let sum: f64 = raw.iter().sum();
    if present == 0 || sum == 0.0 {
        return vec![1.0; counts.len()];
    }
    let scale = present as f64 / sum;
    raw.iter().map(|w| w * scale).collect()
}

// ---- differentiable forms -------------------------------------------------

pub fn l1_zero_var(g: &mut Graph, code: Var) -> Var {
    g.mean_abs(code)
}

pub fn l1_image_var(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    g.mean_abs(d)
}

pub fn weighted_ce_var(g: &mut Graph, p: Var, labels: &[u8], weights: &[f64]) -> Var {
    g.cross_entropy_probs(p, labels, weights, CE_EPS)
}

/// Least-squares adversarial objective.
/// Discriminator: `mean((real - 1)^2) + mean(fake^2)`; generator: `mean((fake - 1)^2)`.
pub fn adversarial_var(g: &mut Graph, real: Option<Var>, fake: Var, role: AdversarialRole) -> Var {
    match role {
        AdversarialRole::Generator => g.mean_squared_to(fake, 1.0),
        AdversarialRole::Discriminator => {
            let f = g.mean_squared_to(fake, 0.0);
            match real {
                Some(r) => {
                    let r = g.mean_squared_to(r, 1.0);
                    g.add(r, f)
                }
                None => f,
            }
        }
    }
}

// ---- value forms -----------------------------------------------------------

fn scalar_of(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).item()
}

/// Mean absolute value of a style code (one `||E(I) - 0||_1` term).
pub fn l1_zero(code: &StyleCode) -> f64 {
    scalar_of(|g| {
        let c = g.constant(code.to_tensor());
        l1_zero_var(g, c)
    })
}

/// `l1_zero(E_t(I_s)) + l1_zero(E_s(I_t))`.
pub fn zero_loss(target_code_of_source: &StyleCode, source_code_of_target: &StyleCode) -> f64 {
    l1_zero(target_code_of_source) + l1_zero(source_code_of_target)
}

/// `l1_zero(E_s(I_s2t)) + l1_zero(E_t(I_t2s))`.
pub fn zero_trans_loss(source_code_of_s2t: &StyleCode, target_code_of_t2s: &StyleCode) -> f64 {
    l1_zero(source_code_of_s2t) + l1_zero(target_code_of_t2s)
}

fn check_same_grid(p: &ProbabilityMap, y: &LabelMap, w: &[f64]) -> Result<()> {
    if (p.height(), p.width(), p.num_classes()) != (y.height(), y.width(), y.num_classes()) {
        return Err(Error::contract(format!(
            "probabilities {}x{}x{} vs labels {}x{}x{}",
            p.height(),
            p.width(),
            p.num_classes(),
            y.height(),
            y.width(),
            y.num_classes()
        )));
    }
    if w.len() != p.num_classes() {
        return Err(Error::contract(format!(
            "{} class weights for {} classes",
            w.len(),
            p.num_classes()
        )));
    }
    Ok(())
}

/// `-(1/N_labeled) Σ w_k log max(P_k, ε)` over labeled pixels; 0 when none are labeled.
pub fn weighted_cross_entropy(p: &ProbabilityMap, y: &LabelMap, w: &[f64]) -> Result<f64> {
    check_same_grid(p, y, w)?;
    Ok(scalar_of(|g| {
        let pv = g.constant(p.to_tensor());
        weighted_ce_var(g, pv, y.indices(), w)
    }))
}

/// Rejects any `Y_s2t` that is not the very same label object as `Y_s`.
pub fn ensure_same_labels(y_s: &LabelMap, y_s2t: &LabelMap) -> Result<()> {
    if std::ptr::eq(y_s, y_s2t) {
        Ok(())
    } else {
        Err(Error::Invariant(
            "labels of the translated source must be the source label object itself".into(),
        ))
    }
}

/// `CE(P_s, Y_s) + CE(P_s2t, Y_s2t)` with `Y_s2t` required to be `Y_s`.
pub fn seg_loss(
    p_s: &ProbabilityMap,
    y_s: &LabelMap,
    p_s2t: &ProbabilityMap,
    y_s2t: &LabelMap,
    w: &[f64],
) -> Result<f64> {
    ensure_same_labels(y_s, y_s2t)?;
    Ok(weighted_cross_entropy(p_s, y_s, w)? + weighted_cross_entropy(p_s2t, y_s, w)?)
}

/// Components of the zero-style objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ZeroStyleParts {
    pub zero: f64,
    pub zero_trans: f64,
    pub seg: f64,
}

pub fn zero_style_loss(parts: ZeroStyleParts) -> f64 {
    parts.zero + parts.zero_trans + parts.seg
}

fn check_same_image_size(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::contract(format!(
            "image sizes {}x{} and {}x{} differ",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Mean absolute pixel difference.
pub fn l1_image(a: &Image, b: &Image) -> Result<f64> {
    check_same_image_size(a, b)?;
    Ok(scalar_of(|g| {
        let av = g.constant(a.to_tensor());
        let bv = g.constant(b.to_tensor());
        l1_image_var(g, av, bv)
    }))
}

/// `|I_s2t2s - I_s| + |I_t2s2t - I_t|`.
pub fn cycle_loss(i_s2t2s: &Image, i_s: &Image, i_t2s2t: &Image, i_t: &Image) -> Result<f64> {
    Ok(l1_image(i_s2t2s, i_s)? + l1_image(i_t2s2t, i_t)?)
}

/// `|I_s2s - I_s| + |I_t2t - I_t|`.
pub fn rec_loss(i_s2s: &Image, i_s: &Image, i_t2t: &Image, i_t: &Image) -> Result<f64> {
    Ok(l1_image(i_s2s, i_s)? + l1_image(i_t2t, i_t)?)
}

pub fn adversarial_loss(
    real: Option<&Tensor>,
    fake: &Tensor,
    role: AdversarialRole,
) -> Result<f64> {
    if role == AdversarialRole::Discriminator && real.is_none() {
        return Err(Error::contract("discriminator loss needs real scores"));
    }
    Ok(scalar_of(|g| {
        let r = real.map(|r| g.constant(r.clone()));
        let f = g.constant(fake.clone());
        adversarial_var(g, r, f, role)
    }))
}

/// Cross-entropy of the content-transferred prediction against its refined pseudo label.
pub fn seg_ct_loss(p_t_ct: &ProbabilityMap, y_t_ct_refined: &LabelMap, w: &[f64]) -> Result<f64> {
    weighted_cross_entropy(p_t_ct, y_t_ct_refined, w)
}

/// Weighted sum of all terms.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> f64 {
    w.rec * terms.rec
        + w.adv_image * terms.adv_image
        + w.adv_output * terms.adv_output
        + w.zero * terms.zero
        + w.zero_trans * terms.zero_trans
        + w.seg * terms.seg
        + w.cycle * terms.cycle
        + w.seg_ct * terms.seg_ct
        + w.self_training * terms.self_training
}
