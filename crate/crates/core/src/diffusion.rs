//! Forward noising on segmentation maps and the identities used to invert it.
//!
//! The noise schedule is linear, `beta_t = t / T`. A noising step adds fresh
//! standard-normal noise scaled by `beta_t` to the current estimate, and the
//! network is trained to predict the *total* noise `s_t - s_0`, so a clean
//! map is recovered from any noise level by a single subtraction.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{NoiseTensor, Real, SegMap, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    betas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter(
                "noise schedule needs at least one time step".into(),
            ));
        }
        let betas = (0..=steps).map(|t| t as f64 / steps as f64).collect();
        Ok(Self { steps, betas })
    }

    /// Number of time steps `T`.
    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `beta_0 ..= beta_T`.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.betas.get(t).copied().ok_or_else(|| {
            Error::InvalidParameter(format!("time step {t} outside [0, {}]", self.steps))
        })
    }
}

/// Alias kept for callers that think in terms of the operation.
pub fn make_schedule(steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::new(steps)
}

/// Fills a tensor of the given shape with i.i.d. standard normal draws.
pub fn standard_normal<F: Real, R: Rng + ?Sized>(
    channels: usize,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Tensor<F> {
    let mut out = Tensor::zeros(channels, height, width);
    for v in out.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = F::of(z);
    }
    out
}

/// Returns `(seg + z * t/T, z)` with `z ~ N(0, I)`.
pub fn diffuse<F: Real, R: Rng + ?Sized>(
    seg: &SegMap<F>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(SegMap<F>, NoiseTensor<F>)> {
    let scale = F::of(schedule.beta(t)?);
    let (c, h, w) = seg.shape();
    let z = standard_normal::<F, R>(c, h, w, rng);
    let noisy = seg.zip_map(&z, |s, n| s + n * scale)?;
    Ok((noisy, z))
}

/// Total noise carried by `noisy` relative to `clean`: `noisy - clean`.
pub fn total_noise<F: Real>(noisy: &SegMap<F>, clean: &SegMap<F>) -> Result<NoiseTensor<F>> {
    noisy
        .check_same_shape(clean, "total_noise")
        .and_then(|_| noisy.zip_map(clean, |a, b| a - b))
}

/// Clean-map estimate from a noisy map and a noise prediction:
/// `noisy - predicted_noise`.
pub fn recover_clean<F: Real>(
    noisy: &SegMap<F>,
    predicted_noise: &NoiseTensor<F>,
) -> Result<SegMap<F>> {
    noisy
        .check_same_shape(predicted_noise, "recover_clean")
        .and_then(|_| noisy.zip_map(predicted_noise, |a, b| a - b))
}

/// Mean squared error and its gradient with respect to `predicted`.
pub fn mse_loss<F: Real>(
    predicted: &NoiseTensor<F>,
    target: &NoiseTensor<F>,
) -> Result<(f64, NoiseTensor<F>)> {
    predicted.check_same_shape(target, "mse_loss")?;
    if predicted.is_empty() {
        return Err(Error::InvalidParameter("mse_loss of an empty tensor".into()));
    }
    let n = predicted.len() as f64;
    let loss = predicted
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &q)| {
            let d = p.f64() - q.f64();
            d * d
        })
        .sum::<f64>()
        / n;
    let scale = F::of(2.0 / n);
    let grad = predicted.zip_map(target, |p, q| (p - q) * scale)?;
    Ok((loss, grad))
}
