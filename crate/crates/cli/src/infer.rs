use std::fs;
use std::path::Path;

use rdseg::checkpoint::load_checkpoint;
use rdseg::dataset::{
    load_image_png, save_label_png, DatasetIndex, INDEX_FILE, LABELS_DIR, PALETTE_FILE,
};
use rdseg::sampler::{image_seed, sample, scale_ladder, SampleConfig, StepSelection};
use rdseg::{Error, NoiseSchedule, SegMap};

use crate::config::{create_dir, output_dir, RunConfig};
use crate::error::{io_failure, Outcome};
use crate::inputs::{resolve_palette, PngSet};
use crate::InferArgs;

pub const SOFT_DIR: &str = "soft";

/// `C`, `H`, `W` as little-endian u32, then the map as little-endian f32 in
/// channel-major order.
pub fn write_soft(path: &Path, soft: &SegMap<f32>) -> Outcome<()> {
    let (c, h, w) = soft.shape();
    let mut bytes = Vec::with_capacity(12 + 4 * soft.len());
    for d in [c, h, w] {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in soft.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

fn resolve(args: &InferArgs) -> Outcome<RunConfig> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let s = &mut cfg.sample;
    if let Some(list) = &args.steps {
        s.steps = StepSelection::Explicit(list.clone());
    }
    if let Some(k) = args.stride {
        s.steps = StepSelection::Stride(k);
    }
    if let Some(v) = args.ensemble {
        s.ensemble = v;
    }
    if let Some(v) = args.scales {
        s.scales = v;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }
    cfg.data.test = Some(args.data.clone());
    cfg.output = Some(output_dir(args.out.as_deref(), cfg.output.as_deref(), "infer"));
    Ok(cfg)
}

pub fn run(args: &InferArgs) -> Outcome {
    let mut cfg = resolve(args)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let net = ck.net;
    cfg.model = net.config().clone();
    cfg.train = ck.train;
    let schedule = NoiseSchedule::new(cfg.train.time_steps)?;
    let steps = cfg.sample.validate(&schedule)?;

    let classes = net.config().num_classes;
    let palette = resolve_palette(args.palette.as_deref(), &[&args.data], Some(classes))?;
    if palette.len() != classes {
        return Err(Error::Incompatible(format!(
            "the palette has {} classes but the checkpoint predicts {classes}",
            palette.len()
        ))
        .into());
    }
    let inputs = PngSet::images(&args.data)?;
    let images = (0..inputs.names.len())
        .map(|i| load_image_png(&inputs.path(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let multiple = net.config().size_multiple();
    for (name, img) in inputs.names.iter().zip(&images) {
        let fits = scale_ladder(img.width(), img.height(), cfg.sample.scales)
            .map(|l| l.iter().all(|&(w, h)| w % multiple == 0 && h % multiple == 0));
        if !matches!(fits, Ok(true)) {
            return Err(Error::Incompatible(format!(
                "image {name} is {}x{}; the checkpoint with {} scales needs sides divisible by {}",
                img.width(),
                img.height(),
                cfg.sample.scales,
                multiple << (cfg.sample.scales - 1)
            ))
            .into());
        }
    }

    let out = cfg.output.clone().expect("resolved");
    for d in [out.clone(), out.join(LABELS_DIR), out.join(SOFT_DIR)] {
        create_dir(&d)?;
    }
    cfg.echo(&out)?;
    eprintln!(
        "segmenting {} images, steps {:?}, ensemble {}, scales {}",
        images.len(),
        steps,
        cfg.sample.ensemble,
        cfg.sample.scales
    );
    for (i, img) in images.iter().enumerate() {
        let run_cfg = SampleConfig {
            seed: image_seed(cfg.sample.seed, i),
            ..cfg.sample.clone()
        };
        let result = sample(&net, img, &schedule, &run_cfg)?;
        let name = &inputs.names[i];
        save_label_png(&out.join(LABELS_DIR).join(format!("{name}.png")), &result.labels, &palette)?;
        write_soft(&out.join(SOFT_DIR).join(format!("{name}.bin")), &result.soft)?;
    }
    let index = DatasetIndex {
        names: inputs.names.clone(),
    };
    for (file, text) in [(INDEX_FILE, index.to_text()), (PALETTE_FILE, palette.to_text())] {
        let p = out.join(file);
        fs::write(&p, text).map_err(|e| io_failure(&p, e))?;
    }
    println!("wrote {} predictions to {}", images.len(), out.display());
    Ok(())
}
