use std::fs;

use rdseg::dataset::{generate_shapes_dataset, write_dataset, ClassPalette};
use serde::Serialize;

use crate::config::{create_dir, output_dir, RESOLVED_CONFIG};
use crate::error::{io_failure, Failure, Outcome};
use crate::GenDataArgs;

#[derive(Serialize)]
struct Resolved {
    n: usize,
    size: u32,
    classes: u32,
    seed: u64,
}

pub fn run(args: &GenDataArgs) -> Outcome {
    let out = output_dir(args.out.as_deref(), None, "data");
    let occupied = out.is_dir()
        && fs::read_dir(&out)
            .map_err(|e| io_failure(&out, e))?
            .next()
            .is_some();
    if occupied {
        if !args.overwrite {
            return Err(Failure::Validation(format!(
                "{} is not empty; pass --overwrite to replace it",
                out.display()
            )));
        }
        fs::remove_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    } else if out.exists() && !out.is_dir() {
        return Err(Failure::Validation(format!("{} is not a directory", out.display())));
    }
    let size = args.size as usize;
    let classes = args.classes as usize;
    let samples = generate_shapes_dataset(args.n, size, size, classes, args.seed)?;
    let palette = ClassPalette::synthetic(classes)?;
    create_dir(&out)?;
    write_dataset(&out, &samples, &palette)?;
    let resolved = Resolved {
        n: args.n,
        size: args.size,
        classes: args.classes,
        seed: args.seed,
    };
    let text = toml::to_string(&resolved).map_err(|e| Failure::Internal(e.to_string()))?;
    let path = out.join(RESOLVED_CONFIG);
    fs::write(&path, text).map_err(|e| io_failure(&path, e))?;
    println!("wrote {} samples to {}", args.n, out.display());
    Ok(())
}
