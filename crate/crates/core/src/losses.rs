//! Adversarial, cycle, identity, aggregate generator and discriminator losses.
//!
//! Every norm is mean-reduced over pixels (or score-map cells) and batch.

use uqgan_autograd::{Array, Tensor};

use crate::error::{Error, Result};
use crate::networks::DiscriminatorParams;
use crate::params::BoundParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_cycle: f64,
    pub lambda_id: f64,
    pub lambda_per: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 1.0,
            lambda_cycle: 12.0,
            lambda_id: 1.0,
            lambda_per: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_adv, self.lambda_cycle, self.lambda_id, self.lambda_per];
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {all:?}")));
        }
        Ok(())
    }
}

/// Which generator outputs the adversarial term scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvTarget {
    /// Cycle reconstructions H̄ = G_H(G_L(H)), L̄ = G_L(G_H(L)).
    Cycled,
    /// First-pass translations H′ = G_H(L), L′ = G_L(H).
    Translated,
}

impl std::str::FromStr for AdvTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cycled" => Ok(Self::Cycled),
            "translated" => Ok(Self::Translated),
            other => Err(Error::Config(format!(
                "unknown adv_on value `{other}` (expected cycled|translated)"
            ))),
        }
    }
}

impl std::fmt::Display for AdvTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cycled => "cycled",
            Self::Translated => "translated",
        })
    }
}

/// Real-label target selection for the discriminator loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothingPolicy {
    pub threshold: f64,
    pub soft_target: f64,
    pub hard_target: f64,
}

impl Default for SmoothingPolicy {
    fn default() -> Self {
        Self {
            threshold: 0.9,
            soft_target: 0.9,
            hard_target: 1.0,
        }
    }
}

impl SmoothingPolicy {
    /// Hard target only while both mean real scores stay strictly below the threshold.
    pub fn target(&self, mean_high: f64, mean_low: f64) -> f64 {
        if mean_high < self.threshold && mean_low < self.threshold {
            self.hard_target
        } else {
            self.soft_target
        }
    }
}

/// Unweighted loss terms of one generator update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub adv: f64,
    pub cycle: f64,
    pub id: f64,
    pub per: f64,
}

/// Everything recorded for one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossLedger {
    pub adv: f64,
    pub cycle: f64,
    pub id: f64,
    pub per: f64,
    pub total_gen: f64,
    pub d_high: f64,
    pub d_low: f64,
    pub d_total: f64,
    pub smoothing_target_used: f64,
}

impl LossLedger {
    pub fn parts(&self) -> LossParts {
        LossParts {
            adv: self.adv,
            cycle: self.cycle,
            id: self.id,
            per: self.per,
        }
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `mean((scores - target)^2)`.
pub fn mse_to(scores: &Tensor, target: f64) -> Tensor {
    scores.add_scalar(-target).square().mean()
}

/// `mean(|a - b|)`.
pub fn l1(a: &Tensor, b: &Tensor) -> Tensor {
    a.sub(b).abs().mean()
}

/// Generator-side least-squares term from precomputed score maps.
pub fn adversarial_from_scores(scores_high: &Tensor, scores_low: &Tensor) -> Tensor {
    mse_to(scores_high, 1.0).add(&mse_to(scores_low, 1.0))
}

/// `MSE(1, D_H(H̄)) + MSE(1, D_L(L̄))`. Discriminator weights enter as
/// constants and their power-iteration state is left untouched.
pub fn adversarial_loss(
    d_h: &DiscriminatorParams,
    d_l: &DiscriminatorParams,
    h_bar: &Tensor,
    l_bar: &Tensor,
) -> Result<Tensor> {
    Ok(adversarial_from_scores(
        &d_h.score_frozen(h_bar)?,
        &d_l.score_frozen(l_bar)?,
    ))
}

/// `mean|H - H̄| + mean|L - L̄|`.
pub fn cycle_loss(high: &Tensor, h_bar: &Tensor, low: &Tensor, l_bar: &Tensor) -> Result<Tensor> {
    check_same(high, h_bar, "cycle loss (high)")?;
    check_same(low, l_bar, "cycle loss (low)")?;
    Ok(l1(high, h_bar).add(&l1(low, l_bar)))
}

/// `mean|H - G_H(H)| + mean|L - G_L(L)|`.
pub fn identity_loss(
    g_h: &dyn Fn(&Tensor) -> Result<Tensor>,
    g_l: &dyn Fn(&Tensor) -> Result<Tensor>,
    high: &Tensor,
    low: &Tensor,
) -> Result<Tensor> {
    let same_h = g_h(high)?;
    let same_l = g_l(low)?;
    check_same(high, &same_h, "identity loss (high)")?;
    check_same(low, &same_l, "identity loss (low)")?;
    Ok(l1(high, &same_h).add(&l1(low, &same_l)))
}

fn check_finite(parts: &LossParts) -> Result<()> {
    for (name, v) in [
        ("adv", parts.adv),
        ("cycle", parts.cycle),
        ("id", parts.id),
        ("per", parts.per),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
    }
    Ok(())
}

/// `λ_adv·adv + λ_cycle·cycle + λ_id·id + λ_per·per`; fails on a non-finite term.
pub fn total_generator_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    check_finite(parts)?;
    Ok(w.lambda_adv * parts.adv
        + w.lambda_cycle * parts.cycle
        + w.lambda_id * parts.id
        + w.lambda_per * parts.per)
}

/// Graph form of [`total_generator_loss`]; its value equals the scalar form bitwise.
pub fn weighted_generator_loss(
    adv: &Tensor,
    cycle: &Tensor,
    id: &Tensor,
    per: &Tensor,
    w: &LossWeights,
) -> Result<(Tensor, LossParts, f64)> {
    let parts = LossParts {
        adv: adv.value().item(),
        cycle: cycle.value().item(),
        id: id.value().item(),
        per: per.value().item(),
    };
    let total_value = total_generator_loss(&parts, w)?;
    let total = adv
        .scale(w.lambda_adv)
        .add(&cycle.scale(w.lambda_cycle))
        .add(&id.scale(w.lambda_id))
        .add(&per.scale(w.lambda_per));
    if !total.value().item().is_finite() {
        return Err(Error::NonFinite {
            term: "total_gen".into(),
        });
    }
    Ok((total, parts, total_value))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorTerms {
    pub d_high: f64,
    pub d_low: f64,
    pub d_total: f64,
    pub target: f64,
}

/// Discriminator loss from precomputed score maps.
///
/// The real target comes from the mean real scores through `policy`; fake
/// targets are always 0.
pub fn discriminator_from_scores(
    real_high: &Tensor,
    fake_high: &Tensor,
    real_low: &Tensor,
    fake_low: &Tensor,
    policy: &SmoothingPolicy,
) -> Result<(Tensor, DiscriminatorTerms)> {
    let t = policy.target(real_high.value().mean(), real_low.value().mean());
    let high = mse_to(real_high, t).add(&mse_to(fake_high, 0.0));
    let low = mse_to(real_low, t).add(&mse_to(fake_low, 0.0));
    let total = high.add(&low);
    let terms = DiscriminatorTerms {
        d_high: high.value().item(),
        d_low: low.value().item(),
        d_total: total.value().item(),
        target: t,
    };
    if !terms.d_total.is_finite() {
        return Err(Error::NonFinite {
            term: "d_total".into(),
        });
    }
    Ok((total, terms))
}

/// Scores a real and a fake batch in a single pass, so the power-iteration
/// vectors advance exactly once. Fakes are detached here regardless of how
/// they were produced.
fn score_real_fake(
    d: &mut DiscriminatorParams,
    bound: &BoundParams,
    real: &Tensor,
    fake: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let n = real.shape()[0];
    let both = Tensor::concat_batch(&[real, &fake.detach()]);
    let (scores, fresh) = d.forward_graph(bound, &both)?;
    d.commit_u(fresh);
    let m = scores.shape()[0];
    Ok((scores.slice_batch(0, n), scores.slice_batch(n, m)))
}

/// Least-squares discriminator loss with label smoothing for both domains.
/// Refreshes each discriminator's power-iteration vectors once.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_loss(
    d_h: &mut DiscriminatorParams,
    bound_h: &BoundParams,
    d_l: &mut DiscriminatorParams,
    bound_l: &BoundParams,
    real_high: &Tensor,
    real_low: &Tensor,
    fake_high: &Tensor,
    fake_low: &Tensor,
    policy: &SmoothingPolicy,
) -> Result<(Tensor, DiscriminatorTerms)> {
    check_same(real_high, fake_high, "discriminator loss (high)")?;
    check_same(real_low, fake_low, "discriminator loss (low)")?;
    let (rh, fh) = score_real_fake(d_h, bound_h, real_high, fake_high)?;
    let (rl, fl) = score_real_fake(d_l, bound_l, real_low, fake_low)?;
    discriminator_from_scores(&rh, &fh, &rl, &fl, policy)
}

/// Zero-valued scalar used when a term is switched off.
pub fn zero() -> Tensor {
    Tensor::constant(Array::scalar(0.0))
}
