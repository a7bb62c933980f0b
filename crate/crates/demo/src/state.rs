use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdseg::dataset::{generate_shapes_dataset, one_hot_encode, AugmentConfig, ClassPalette, LabelMap, Sample};
use rdseg::diffusion::diffuse;
use rdseg::metrics::ConfusionMatrix;
use rdseg::sampler::{member_seed, sample, SampleConfig, StepSelection};
use rdseg::trainer::{TrainConfig, Trainer};
use rdseg::{DenoiserConfig, Image, NoiseSchedule, Result, SegMap};

pub const SCENE_SIZE: usize = 32;
pub const TIME_STEPS: usize = 5;
const CLASSES: usize = 3;
const TRAIN_SCENES: usize = 16;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_rgba(image: &Image<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * image.plane_len());
    for y in 0..image.height() {
        for x in 0..image.width() {
            out.extend((0..3).map(|c| to_byte(image.get(c, y, x))));
            out.push(255);
        }
    }
    out
}

pub fn render_labels(labels: &LabelMap, palette: &ClassPalette) -> Vec<u8> {
    labels
        .data()
        .iter()
        .flat_map(|&c| {
            let [r, g, b] = palette.color(c as usize);
            [r, g, b, 255]
        })
        .collect()
}

/// Mixes class colors weighted by the clamped channel values.
pub fn render_soft(seg: &SegMap<f32>, palette: &ClassPalette) -> Vec<u8> {
    let image = Image::from_fn(3, seg.height(), seg.width(), |c, y, x| {
        (0..seg.channels())
            .map(|k| seg.get(k, y, x).clamp(0.0, 1.0) * f32::from(palette.color(k)[c]) / 255.0)
            .sum()
    });
    image_rgba(&image)
}

pub struct DemoState {
    train: Vec<Sample>,
    scene: Sample,
    prediction: Option<LabelMap>,
    trainer: Trainer,
    palette: ClassPalette,
    schedule: NoiseSchedule,
}

impl DemoState {
    pub fn new(seed: u64) -> Result<Self> {
        let model = DenoiserConfig {
            base_channels: 4,
            depth: 1,
            embed_dim: 8,
            num_classes: CLASSES,
            attention_at_bottleneck: true,
        };
        let cfg = TrainConfig {
            time_steps: TIME_STEPS,
            lr: 3e-3,
            lr_decay_gamma: 0.97,
            epochs: usize::MAX,
            seed,
            augment: AugmentConfig::none(),
            ..TrainConfig::default()
        };
        Ok(Self {
            train: generate_shapes_dataset(TRAIN_SCENES, SCENE_SIZE, SCENE_SIZE, CLASSES, seed)?,
            scene: generate_shapes_dataset(1, SCENE_SIZE, SCENE_SIZE, CLASSES, seed ^ 0xACE)?.remove(0),
            prediction: None,
            trainer: Trainer::new(model, cfg)?,
            palette: ClassPalette::synthetic(CLASSES)?,
            schedule: NoiseSchedule::new(TIME_STEPS)?,
        })
    }

    pub fn epochs(&self) -> usize {
        self.trainer.epoch
    }

    pub fn new_scene(&mut self, seed: u64) -> Result<()> {
        self.scene = generate_shapes_dataset(1, SCENE_SIZE, SCENE_SIZE, CLASSES, seed ^ 0xACE)?.remove(0);
        self.prediction = None;
        Ok(())
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        image_rgba(&self.scene.image)
    }

    pub fn labels_rgba(&self) -> Vec<u8> {
        render_labels(&self.scene.labels, &self.palette)
    }

    pub fn noised_rgba(&self, t: usize, seed: u64) -> Result<Vec<u8>> {
        let clean: SegMap<f32> = one_hot_encode(&self.scene.labels, CLASSES)?;
        let mut rng = ChaCha8Rng::seed_from_u64(member_seed(seed, t));
        let (noisy, _) = diffuse(&clean, t, &self.schedule, &mut rng)?;
        Ok(render_soft(&noisy, &self.palette))
    }

    pub fn train_epoch(&mut self) -> Result<f64> {
        self.trainer.run_epoch(&self.train, |_| {})
    }

    pub fn segment(&mut self, stride: usize, ensemble: usize) -> Result<f64> {
        let cfg = SampleConfig {
            steps: StepSelection::Stride(stride),
            ensemble,
            ..SampleConfig::default()
        };
        let out = sample(&self.trainer.net, &self.scene.image, &self.schedule, &cfg)?;
        let mut cm = ConfusionMatrix::new(CLASSES);
        cm.accumulate(&out.labels, &self.scene.labels)?;
        self.prediction = Some(out.labels);
        Ok(cm.miou().unwrap_or(0.0))
    }

    /// Black until [`segment`](Self::segment) has run.
    pub fn prediction_rgba(&self) -> Vec<u8> {
        match &self.prediction {
            Some(p) => render_labels(p, &self.palette),
            None => vec![0; 4 * SCENE_SIZE * SCENE_SIZE],
        }
    }
}
