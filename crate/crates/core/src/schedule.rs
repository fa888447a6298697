//! Noise schedules and closed-form forward-process quantities.
//!
//! Step indices run 1..=T externally; t=0 denotes clean data. All
//! coefficients are precomputed in 64-bit precision at construction.

use crate::error::{Error, Result};
use ndarray::ArrayD;

/// Immutable diffusion noise schedule: per-step variances β_t, their
/// complements α_t = 1−β_t and the cumulative products ᾱ_t = ∏ α_i.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Builds a schedule with β linearly interpolated from `beta_start` (t=1)
/// to `beta_end` (t=T). `T=1` uses `beta_start` alone.
pub fn make_linear_schedule(t_count: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_count < 1 {
        return Err(Error::invalid("schedule: T must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "schedule: need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = if t_count == 1 {
        vec![beta_start]
    } else {
        (0..t_count)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_count - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule: beta list is empty"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for (t, (&b, &a)) in betas.iter().zip(&alphas).enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!(
                    "schedule: beta_{} = {b} outside (0, 1)",
                    t + 1
                )));
            }
            let next = prod * a;
            // Strict decrease fails only when beta underflows the product
            // update; reject rather than return a schedule violating it.
            if !(next < prod) {
                return Err(Error::invalid(format!(
                    "schedule: beta_{} = {b} too small to decrease alpha_bar",
                    t + 1
                )));
            }
            prod = next;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Total step count T.
    pub fn t_count(&self) -> usize {
        self.betas.len()
    }

    /// β_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_count(), "beta: t={t} out of range");
        self.betas[t - 1]
    }

    /// α_t for t in 1..=T.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_count(), "alpha: t={t} out of range");
        self.alphas[t - 1]
    }

    /// ᾱ_t for t in 0..=T, with ᾱ_0 = 1 (clean data).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_count(), "alpha_bar: t={t} out of range");
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_count() {
            return Err(Error::invalid(format!(
                "step t={t} outside 1..={}",
                self.t_count()
            )));
        }
        Ok(())
    }

    /// Closed-form forward marginal: √ᾱ_t·x0 + √(1−ᾱ_t)·eps.
    pub fn forward_marginal(
        &self,
        x0: &ArrayD<f64>,
        t: usize,
        eps: &ArrayD<f64>,
    ) -> Result<ArrayD<f64>> {
        self.check_step(t)?;
        check_same_shape(x0, eps)?;
        let ab = self.alpha_bar(t);
        let (cs, cn) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(zip_scaled(x0, cs, eps, cn))
    }

    /// One Markov-chain step: √(1−β_t)·x_{t−1} + √β_t·eps.
    pub fn forward_one_step(
        &self,
        x_prev: &ArrayD<f64>,
        t: usize,
        eps: &ArrayD<f64>,
    ) -> Result<ArrayD<f64>> {
        self.check_step(t)?;
        check_same_shape(x_prev, eps)?;
        let b = self.beta(t);
        Ok(zip_scaled(x_prev, (1.0 - b).sqrt(), eps, b.sqrt()))
    }
}

pub(crate) fn check_same_shape(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub(crate) fn zip_scaled(a: &ArrayD<f64>, ca: f64, b: &ArrayD<f64>, cb: f64) -> ArrayD<f64> {
    let mut out = a.mapv(|v| v * ca);
    out.zip_mut_with(b, |o, &bv| *o += cb * bv);
    out
}
