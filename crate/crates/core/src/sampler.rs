//! Inference: start from pure noise and walk a decreasing list of steps,
//! re-noising with `t/T` and subtracting the predicted noise at each one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{resize_image, LabelMap, Sample};
use crate::denoiser::DenoiserNetwork;
use crate::diffusion::{diffuse, recover_clean, standard_normal, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::tensor::{Image, NoiseTensor, Real, SegMap};

/// Anything that predicts the noise in a segmentation state.
pub trait NoisePredictor<F: Real> {
    fn num_classes(&self) -> usize;

    /// Spatial dimensions must be multiples of this.
    fn size_multiple(&self) -> usize {
        1
    }

    fn predict_noise(&self, noisy: &SegMap<F>, image: &Image<F>, t: usize) -> Result<NoiseTensor<F>>;
}

impl<F: Real> NoisePredictor<F> for DenoiserNetwork<F> {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn size_multiple(&self) -> usize {
        self.config().size_multiple()
    }

    fn predict_noise(&self, noisy: &SegMap<F>, image: &Image<F>, t: usize) -> Result<NoiseTensor<F>> {
        self.predict(noisy, image, t)
    }
}

/// Which steps of `T..=1` inference executes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSelection {
    /// `T, T - k, T - 2k, ...` down to the last value not below 1.
    Stride(usize),
    /// Strictly decreasing steps within `[1, T]`.
    Explicit(Vec<usize>),
}

impl Default for StepSelection {
    fn default() -> Self {
        StepSelection::Stride(1)
    }
}

impl StepSelection {
    pub fn steps(&self, total: usize) -> Result<Vec<usize>> {
        let steps = match self {
            StepSelection::Stride(0) => {
                return Err(Error::InvalidParameter("step stride must be at least 1".into()));
            }
            StepSelection::Stride(k) => (1..=total).rev().step_by(*k).collect(),
            StepSelection::Explicit(list) => list.clone(),
        };
        if steps.is_empty() {
            return Err(Error::InvalidParameter("the step list is empty".into()));
        }
        if let Some(&bad) = steps.iter().find(|&&t| t == 0 || t > total) {
            return Err(Error::InvalidParameter(format!(
                "step {bad} lies outside 1..={total}"
            )));
        }
        if steps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidParameter(format!(
                "steps must strictly decrease: {steps:?}"
            )));
        }
        Ok(steps)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: StepSelection,
    pub scales: usize,
    pub ensemble: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: StepSelection::Stride(1),
            scales: 1,
            ensemble: 1,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<Vec<usize>> {
        if self.scales == 0 {
            return Err(Error::InvalidParameter("scales must be at least 1".into()));
        }
        if self.ensemble == 0 {
            return Err(Error::InvalidParameter("ensemble size must be at least 1".into()));
        }
        self.steps.steps(schedule.steps())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput<F = f32> {
    pub soft: SegMap<F>,
    pub labels: LabelMap,
}

/// Resolutions visited per step, coarsest first: `W / 2^(m-1)` for
/// `m = M..=1`.
pub fn scale_ladder(width: usize, height: usize, scales: usize) -> Result<Vec<(usize, usize)>> {
    if scales == 0 {
        return Err(Error::InvalidParameter("scales must be at least 1".into()));
    }
    if scales > usize::BITS as usize {
        return Err(Error::InvalidParameter(format!("{scales} scales is too many")));
    }
    let div = 1usize << (scales - 1);
    if width % div != 0 || height % div != 0 || width == 0 || height == 0 {
        return Err(Error::Shape(format!(
            "{width}x{height} is not divisible by {div} as {scales} scales need"
        )));
    }
    Ok((1..=scales)
        .rev()
        .map(|m| (width >> (m - 1), height >> (m - 1)))
        .collect())
}

/// Seed of ensemble member `i`; member 0 uses `seed` itself.
pub fn member_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Per-pixel index of the largest channel; ties go to the lowest index.
pub fn argmax_decode<F: Real>(soft: &SegMap<F>) -> LabelMap {
    let (c, h, w) = soft.shape();
    let n = h * w;
    let data = (0..n)
        .map(|i| {
            let mut best = 0;
            let mut best_v = soft.data()[i];
            for k in 1..c {
                let v = soft.data()[k * n + i];
                if v > best_v || (best_v.is_nan() && !v.is_nan()) {
                    best = k;
                    best_v = v;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(w, h, data).expect("decoded map shape")
}

fn check_image<F: Real, P: NoisePredictor<F> + ?Sized>(
    net: &P,
    image: &Image<F>,
    scales: usize,
) -> Result<Vec<(usize, usize)>> {
    let ladder = scale_ladder(image.width(), image.height(), scales)?;
    let m = net.size_multiple();
    if let Some(&(w, h)) = ladder.iter().find(|(w, h)| w % m != 0 || h % m != 0) {
        return Err(Error::Shape(format!(
            "scale {w}x{h} is not a multiple of {m} as the network requires"
        )));
    }
    Ok(ladder)
}

/// One run from a single seed; returns the continuous map.
fn run_once<F: Real, P: NoisePredictor<F> + ?Sized>(
    net: &P,
    image: &Image<F>,
    schedule: &NoiseSchedule,
    steps: &[usize],
    ladder: &[(usize, usize)],
    seed: u64,
) -> Result<SegMap<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (image.width(), image.height());
    let images = ladder
        .iter()
        .map(|&(sw, sh)| resize_image(image, sw, sh))
        .collect::<Result<Vec<_>>>()?;
    let mut estimate: SegMap<F> = standard_normal(net.num_classes(), h, w, &mut rng);
    for &t in steps {
        for (&(sw, sh), img) in ladder.iter().zip(&images) {
            let current = resize_image(&estimate, sw, sh)?;
            let (noisy, _) = diffuse(&current, t, schedule, &mut rng)?;
            let eps = net.predict_noise(&noisy, img, t)?;
            estimate = recover_clean(&noisy, &eps)?;
        }
    }
    Ok(estimate)
}

/// Denoises `image` from pure noise along the configured steps and scales,
/// averaging `cfg.ensemble` runs with different seeds.
pub fn sample<F: Real, P: NoisePredictor<F> + ?Sized>(
    net: &P,
    image: &Image<F>,
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<SampleOutput<F>> {
    let seeds: Vec<u64> = (0..cfg.ensemble).map(|i| member_seed(cfg.seed, i)).collect();
    sample_with_seeds(net, image, schedule, cfg, &seeds)
}

/// Like [`sample`] with an explicit seed per ensemble member; the
/// configured ensemble size is ignored.
pub fn sample_with_seeds<F: Real, P: NoisePredictor<F> + ?Sized>(
    net: &P,
    image: &Image<F>,
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
    seeds: &[u64],
) -> Result<SampleOutput<F>> {
    let steps = cfg.validate(schedule)?;
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("no ensemble seeds".into()));
    }
    let ladder = check_image(net, image, cfg.scales)?;
    let mut mean: Option<SegMap<F>> = None;
    for (k, &seed) in seeds.iter().enumerate() {
        let run = run_once(net, image, schedule, &steps, &ladder, seed)?;
        mean = Some(match mean {
            None => run,
            Some(mut m) => {
                // running mean keeps replicated runs bit-identical
                let kf = F::of((k + 1) as f64);
                for (a, &b) in m.data_mut().iter_mut().zip(run.data()) {
                    *a += (b - *a) / kf;
                }
                m
            }
        });
    }
    let soft = mean.expect("at least one member");
    let labels = argmax_decode(&soft);
    Ok(SampleOutput { soft, labels })
}

/// Seed used for the `i`-th image of a dataset.
pub fn image_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add((i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Segments every sample and accumulates a confusion matrix.
pub fn evaluate<F: Real, P: NoisePredictor<F> + ?Sized>(
    net: &P,
    samples: &[Sample],
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(net.num_classes());
    for (i, s) in samples.iter().enumerate() {
        let cfg = SampleConfig {
            seed: image_seed(cfg.seed, i),
            ..cfg.clone()
        };
        let out = sample(net, &s.image.cast::<F>(), schedule, &cfg)?;
        cm.accumulate(&out.labels, &s.labels)?;
    }
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{one_hot_encode, resize_labels};
    use crate::denoiser::DenoiserConfig;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use std::cell::Cell;

    /// Knows the answer: returns exactly the noise separating its input from
    /// the truth at the input's resolution.
    struct Oracle {
        truth: LabelMap,
        classes: usize,
        calls: Cell<usize>,
    }

    impl Oracle {
        fn new(truth: LabelMap, classes: usize) -> Self {
            Self {
                truth,
                classes,
                calls: Cell::new(0),
            }
        }
    }

    impl NoisePredictor<f64> for Oracle {
        fn num_classes(&self) -> usize {
            self.classes
        }

        fn predict_noise(&self, noisy: &SegMap<f64>, _: &Image<f64>, _: usize) -> Result<NoiseTensor<f64>> {
            self.calls.set(self.calls.get() + 1);
            let truth = resize_labels(&self.truth, noisy.width(), noisy.height())?;
            let clean = one_hot_encode::<f64>(&truth, self.classes)?;
            noisy.zip_map(&clean, |a, b| a - b)
        }
    }

    fn tiny_net() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 4,
            depth: 1,
            embed_dim: 4,
            num_classes: 3,
            attention_at_bottleneck: true,
        }
    }

    fn truth() -> LabelMap {
        LabelMap::from_fn(8, 8, |x, y| ((x / 2 + y / 4) % 3) as u8)
    }

    #[test]
    fn stride_step_lists() {
        let s = StepSelection::Stride(2).steps(25).unwrap();
        assert_eq!(s.len(), 13);
        assert_eq!((s[0], s[12]), (25, 1));
        assert_eq!(StepSelection::Stride(1).steps(4).unwrap(), vec![4, 3, 2, 1]);
        assert_eq!(StepSelection::Stride(3).steps(4).unwrap(), vec![4, 1]);
        assert!(StepSelection::Stride(0).steps(4).is_err());
    }

    #[test]
    fn explicit_step_lists_are_validated() {
        assert!(StepSelection::Explicit(vec![]).steps(5).is_err());
        assert!(StepSelection::Explicit(vec![6, 1]).steps(5).is_err());
        assert!(StepSelection::Explicit(vec![3, 3]).steps(5).is_err());
        assert!(StepSelection::Explicit(vec![1, 3]).steps(5).is_err());
        assert!(StepSelection::Explicit(vec![2, 0]).steps(5).is_err());
        assert_eq!(StepSelection::Explicit(vec![5, 2]).steps(5).unwrap(), vec![5, 2]);
    }

    #[test]
    fn ladder() {
        assert_eq!(
            scale_ladder(64, 64, 3).unwrap(),
            vec![(16, 16), (32, 32), (64, 64)]
        );
        assert!(scale_ladder(6, 8, 3).is_err());
        assert!(scale_ladder(6, 8, 0).is_err());
    }

    #[test]
    fn argmax_examples() {
        let t = |v: Vec<f64>, c| Tensor::from_vec(c, 1, 1, v).unwrap();
        assert_eq!(argmax_decode(&t(vec![0.2, 0.2], 2)).data(), &[0]);
        assert_eq!(argmax_decode(&t(vec![0.1, 0.7, 0.3], 3)).data(), &[1]);
        let m = truth();
        assert_eq!(argmax_decode(&one_hot_encode::<f32>(&m, 3).unwrap()), m);
    }

    #[test]
    fn oracle_recovers_truth_in_one_step() {
        let schedule = NoiseSchedule::new(5).unwrap();
        let net = Oracle::new(truth(), 3);
        let image = Image::<f64>::zeros(3, 8, 8);
        let cfg = SampleConfig {
            steps: StepSelection::Explicit(vec![5]),
            ..Default::default()
        };
        let out = sample(&net, &image, &schedule, &cfg).unwrap();
        assert_eq!(out.labels, truth());
        // s - (s - s0) equals s0 up to one rounding of the subtraction
        let clean = one_hot_encode::<f64>(&truth(), 3).unwrap();
        for (a, b) in out.soft.data().iter().zip(clean.data()) {
            assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_pass_count_is_steps_times_scales() {
        let schedule = NoiseSchedule::new(6).unwrap();
        let net = Oracle::new(truth(), 3);
        let image = Image::<f64>::zeros(3, 8, 8);
        let cfg = SampleConfig {
            steps: StepSelection::Stride(2),
            scales: 3,
            ensemble: 2,
            seed: 1,
        };
        let out = sample(&net, &image, &schedule, &cfg).unwrap();
        assert_eq!(net.calls.get(), 3 * 3 * 2);
        assert_eq!(out.labels, truth());
    }

    #[test]
    fn ensemble_of_one_and_replicated_seeds() {
        let schedule = NoiseSchedule::new(4).unwrap();
        let net = DenoiserNetwork::<f32>::new(tiny_net(), 3).unwrap();
        let image = Image::<f32>::from_fn(3, 8, 8, |c, y, x| ((c + y * x) % 5) as f32 / 5.0);
        let cfg = SampleConfig {
            seed: 42,
            ..Default::default()
        };
        let single = sample(&net, &image, &schedule, &cfg).unwrap();
        assert_eq!(sample(&net, &image, &schedule, &cfg).unwrap(), single);
        let replicated = sample_with_seeds(&net, &image, &schedule, &cfg, &[42; 4]).unwrap();
        assert_eq!(replicated, single);
        let five = SampleConfig {
            ensemble: 5,
            ..cfg.clone()
        };
        let a = sample(&net, &image, &schedule, &five).unwrap();
        assert_eq!(sample(&net, &image, &schedule, &five).unwrap(), a);
        assert_ne!(a.soft, single.soft);
    }

    #[test]
    fn shape_errors() {
        let schedule = NoiseSchedule::new(4).unwrap();
        let net = DenoiserNetwork::<f32>::new(tiny_net(), 3).unwrap();
        let cfg = SampleConfig::default();
        // tiny nets need multiples of 2
        assert!(matches!(
            sample(&net, &Image::<f32>::zeros(3, 7, 8), &schedule, &cfg),
            Err(Error::Shape(_))
        ));
        let two_scales = SampleConfig {
            scales: 3,
            ..cfg
        };
        assert!(matches!(
            sample(&net, &Image::<f32>::zeros(3, 4, 4), &schedule, &two_scales),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn argmax_ignores_constant_shift(
            data in proptest::collection::vec(-4i32..4, 3 * 6),
            shift in -3i32..3,
        ) {
            // integer-valued entries keep the shift exact
            let soft = Tensor::from_vec(3, 2, 3, data.iter().map(|&v| f64::from(v)).collect()).unwrap();
            let shifted = soft.map(|v| v + f64::from(shift));
            prop_assert_eq!(argmax_decode(&soft), argmax_decode(&shifted));
        }

        #[test]
        fn oracle_is_exact_for_any_step_list(
            mask in 1u32..(1 << 7),
            scales in 1usize..3,
            seed in any::<u64>(),
        ) {
            let schedule = NoiseSchedule::new(7).unwrap();
            let steps: Vec<usize> = (1..=7).rev().filter(|t| mask & (1 << (t - 1)) != 0).collect();
            let net = Oracle::new(truth(), 3);
            let cfg = SampleConfig { steps: StepSelection::Explicit(steps), scales, ensemble: 1, seed };
            let out = sample(&net, &Image::<f64>::zeros(3, 8, 8), &schedule, &cfg).unwrap();
            prop_assert_eq!(out.labels, truth());
        }
    }
}
