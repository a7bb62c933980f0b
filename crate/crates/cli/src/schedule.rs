use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdseg::dataset::{generate_shapes_dataset, one_hot_encode, save_image_png, ClassPalette};
use rdseg::diffusion::diffuse;
use rdseg::sampler::{scale_ladder, StepSelection};
use rdseg::{Image, NoiseSchedule, SegMap};

use crate::error::{Failure, Outcome};
use crate::ScheduleArgs;

const STRIP_CLASSES: usize = 3;

/// Colors a continuous map by mixing palette colors with the clamped channel
/// values, so a one-hot map shows its exact class colors.
fn render(seg: &SegMap<f32>, palette: &ClassPalette) -> Image<f32> {
    Image::from_fn(3, seg.height(), seg.width(), |c, y, x| {
        let v: f32 = (0..seg.channels())
            .map(|k| seg.get(k, y, x).clamp(0.0, 1.0) * f32::from(palette.color(k)[c]) / 255.0)
            .sum();
        v.clamp(0.0, 1.0)
    })
}

fn strip(args: &ScheduleArgs, schedule: &NoiseSchedule, at: &[usize]) -> Outcome {
    let path = args.strip.as_deref().expect("checked by caller");
    let (w, h) = (args.width as usize, args.height as usize);
    if w < 4 || h < 4 || w != h {
        return Err(Failure::Usage("--strip needs a square image of side >= 4".into()));
    }
    let sample = generate_shapes_dataset(1, w, h, STRIP_CLASSES, args.seed)?.remove(0);
    let palette = ClassPalette::synthetic(STRIP_CLASSES)?;
    let clean: SegMap<f32> = one_hot_encode(&sample.labels, STRIP_CLASSES)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut panels = vec![sample.image.clone(), render(&clean, &palette)];
    for &t in at {
        let (noisy, _) = diffuse(&clean, t, schedule, &mut rng)?;
        panels.push(render(&noisy, &palette));
    }
    let gap = 2;
    let total_w = panels.len() * (w + gap) - gap;
    let out = Image::from_fn(3, h, total_w, |c, y, x| {
        let (p, off) = (x / (w + gap), x % (w + gap));
        if off >= w {
            1.0
        } else {
            panels[p].get(c, y, off)
        }
    });
    save_image_png(path, &out)?;
    println!("strip: image, clean map, then t = {at:?} -> {}", path.display());
    Ok(())
}

pub fn run(args: &ScheduleArgs) -> Outcome {
    let total = args.time_steps as usize;
    let schedule = NoiseSchedule::new(total)?;
    let selection = match (&args.steps, args.stride) {
        (Some(list), _) => StepSelection::Explicit(list.clone()),
        (None, Some(k)) => StepSelection::Stride(k),
        (None, None) => StepSelection::Stride(1),
    };
    let steps = selection.steps(total).map_err(|e| Failure::Usage(e.to_string()))?;
    let ladder = scale_ladder(args.width as usize, args.height as usize, args.scales as usize)
        .map_err(|e| Failure::Usage(e.to_string()))?;

    println!("T = {total}");
    println!("{:>6}  {:>10}", "t", "beta");
    for (t, b) in schedule.betas().iter().enumerate() {
        println!("{t:>6}  {b:>10.6}");
    }
    let betas: Vec<String> = schedule.betas().iter().map(|b| b.to_string()).collect();
    println!("betas: [{}]", betas.join(", "));
    let list: Vec<String> = steps.iter().map(|t| t.to_string()).collect();
    println!("executed steps ({}): {}", steps.len(), list.join(", "));
    let res: Vec<String> = ladder.iter().map(|(w, h)| format!("{w}x{h}")).collect();
    println!(
        "scale ladder (M = {}, {}x{}): {}",
        args.scales,
        args.width,
        args.height,
        res.join(", ")
    );
    if args.strip.is_some() {
        let at = args.strip_at.clone().unwrap_or(steps);
        if let Some(&bad) = at.iter().find(|&&t| t > total) {
            return Err(Failure::Usage(format!("strip step {bad} exceeds T = {total}")));
        }
        strip(args, &schedule, &at)?;
    }
    Ok(())
}
