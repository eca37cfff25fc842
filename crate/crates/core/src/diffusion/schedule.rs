use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TIMESTEPS: usize = 1000;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub timesteps: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { kind: ScheduleKind::Linear, timesteps: DEFAULT_TIMESTEPS }
    }
}

/// DDPM variance schedule. Timesteps are 1-based; `alpha_bar(0) == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

pub fn make_schedule(timesteps: usize, kind: &str) -> Result<NoiseSchedule> {
    let kind = match kind {
        "linear" => ScheduleKind::Linear,
        other => return Err(Error::InvalidConfig(format!("unknown schedule kind {other:?}"))),
    };
    NoiseSchedule::new(ScheduleSpec { kind, timesteps })
}

impl NoiseSchedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        let t_max = spec.timesteps;
        if t_max < 2 {
            return Err(Error::InvalidConfig(format!("schedule needs at least 2 timesteps, got {t_max}")));
        }
        let betas: Vec<f64> = match spec.kind {
            ScheduleKind::Linear => (0..t_max)
                .map(|i| BETA_START + (BETA_END - BETA_START) * i as f64 / (t_max - 1) as f64)
                .collect(),
        };
        let mut alphas_cumprod = Vec::with_capacity(t_max + 1);
        alphas_cumprod.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        Ok(Self { spec, betas, alphas_cumprod })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn timesteps(&self) -> usize {
        self.spec.timesteps
    }

    /// β_t for `t` in `[1, T]`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// ᾱ_t for `t` in `[0, T]`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::TimestepOutOfRange { t, lo: 1, hi: self.timesteps() });
        }
        Ok(())
    }

    /// Per-batch-element `(√ᾱ_t, √(1-ᾱ_t))` as `(B, 1, 1, 1)` tensors.
    fn coefficients(&self, t: &[usize], like: &Tensor) -> Result<(Tensor, Tensor)> {
        for &ti in t {
            self.check_t(ti)?;
        }
        let a: Vec<f64> = t.iter().map(|&ti| self.alpha_bar(ti).sqrt()).collect();
        let s: Vec<f64> = t.iter().map(|&ti| (1.0 - self.alpha_bar(ti)).sqrt()).collect();
        let shape = (t.len(), 1, 1, 1);
        let a = Tensor::from_vec(a, shape, like.device())?.to_dtype(like.dtype())?;
        let s = Tensor::from_vec(s, shape, like.device())?.to_dtype(like.dtype())?;
        Ok((a, s))
    }
}

/// `z_t = √ᾱ_t · x0 + √(1-ᾱ_t) · ε`, batched over the leading axis.
pub fn q_sample(x0: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(Error::ShapeMismatch(format!("x0 {:?} vs noise {:?}", x0.dims(), eps.dims())));
    }
    if x0.dim(0)? != t.len() {
        return Err(Error::ShapeMismatch(format!("{} timesteps for batch of {}", t.len(), x0.dim(0)?)));
    }
    let (a, s) = schedule.coefficients(t, x0)?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_schedule_properties() {
        let s = make_schedule(1000, "linear").unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
        }
        assert!(s.alpha_bar(1000) < 0.01);
        assert!(make_schedule(1000, "cosine").is_err());
        assert!(make_schedule(1, "linear").is_err());
    }

    #[test]
    fn q_sample_zero_noise_scales() {
        let s = make_schedule(1000, "linear").unwrap();
        let x0 = Tensor::new(&[[[[0.5f64, -1.0]]]], &candle_core::Device::Cpu).unwrap();
        let z = q_sample(&x0, &[400], &x0.zeros_like().unwrap(), &s).unwrap();
        let got: Vec<f64> = z.flatten_all().unwrap().to_vec1().unwrap();
        let a = s.alpha_bar(400).sqrt();
        assert_eq!(got, vec![0.5 * a, -a]);
        assert!(q_sample(&x0, &[0], &x0, &s).is_err());
        assert!(q_sample(&x0, &[1001], &x0, &s).is_err());
    }
}
