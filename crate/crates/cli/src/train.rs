use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rdseg::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use rdseg::dataset::{read_dataset, AugmentConfig, PALETTE_FILE};
use rdseg::trainer::Trainer;
use rdseg::Error;
use serde::Serialize;

use crate::config::{create_dir, output_dir, RunConfig};
use crate::error::{io_failure, Failure, Outcome};
use crate::TrainArgs;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train.log";
pub const LOSSES_FILE: &str = "losses.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Serialize)]
struct Summary<'a> {
    epochs_run: usize,
    epoch_losses: &'a [f64],
    updates: u64,
    updates_per_sample: usize,
    wall_clock_secs: f64,
    checksum: String,
}

fn resolve(args: &TrainArgs) -> Outcome<RunConfig> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let m = &mut cfg.model;
    if let Some(v) = args.model.base_channels {
        m.base_channels = v;
    }
    if let Some(v) = args.model.depth {
        m.depth = v;
    }
    if let Some(v) = args.model.embed_dim {
        m.embed_dim = v;
    }
    if args.model.no_attention {
        m.attention_at_bottleneck = false;
    }
    let t = &mut cfg.train;
    if let Some(v) = args.time_steps {
        t.time_steps = v;
    }
    if let Some(v) = args.scales {
        t.scales = v;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.lr_decay {
        t.lr_decay_gamma = v;
    }
    if let Some(v) = args.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = args.clip_norm {
        t.clip_norm = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if args.no_augment {
        t.augment = AugmentConfig::none();
    }
    if let Some(d) = &args.data {
        cfg.data.train = Some(d.clone());
    }
    cfg.output = Some(output_dir(args.out.as_deref(), cfg.output.as_deref(), "train"));
    Ok(cfg)
}

/// Writes to a temporary name first so an interrupted save never replaces
/// the previous checkpoint with a partial file.
fn save_atomic(ck: &Checkpoint, path: &Path) -> rdseg::Result<()> {
    let tmp = path.with_extension("bin.tmp");
    save_checkpoint(ck, &tmp)?;
    fs::rename(&tmp, path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn snapshot(t: &Trainer) -> Checkpoint {
    Checkpoint {
        net: t.net.clone(),
        opt: t.opt.clone(),
        train: t.cfg.clone(),
        epoch: t.epoch,
    }
}

pub fn run(args: &TrainArgs) -> Outcome {
    let mut cfg = resolve(args)?;
    let data_dir = cfg
        .data
        .train
        .clone()
        .ok_or_else(|| Failure::Usage("no training data: pass --data or set data.train".into()))?;
    let (samples, palette, _) = read_dataset(&data_dir, None)?;
    if samples.is_empty() {
        return Err(Failure::Validation(format!("{} holds no samples", data_dir.display())));
    }
    // the class count always follows the data
    cfg.model.num_classes = palette.len();
    cfg.model.validate()?;
    cfg.train.validate()?;
    let multiple = cfg.model.size_multiple() << (cfg.train.scales - 1);
    for (i, s) in samples.iter().enumerate() {
        s.labels.check_classes(palette.len())?;
        if s.width() % multiple != 0 || s.height() % multiple != 0 {
            return Err(Failure::Validation(format!(
                "sample {i} is {}x{}; depth {} with {} scales needs multiples of {multiple}",
                s.width(),
                s.height(),
                cfg.model.depth,
                cfg.train.scales
            )));
        }
    }

    let out = cfg.output.clone().expect("resolved");
    create_dir(&out)?;
    cfg.echo(&out)?;
    fs::write(out.join(PALETTE_FILE), palette.to_text())
        .map_err(|e| io_failure(&out.join(PALETTE_FILE), e))?;

    let mut trainer = match &args.resume {
        None => Trainer::new(cfg.model.clone(), cfg.train.clone())?,
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.net.config() != &cfg.model {
                return Err(Error::Incompatible(format!(
                    "checkpoint model {:?} differs from the configured {:?}",
                    ck.net.config(),
                    cfg.model
                ))
                .into());
            }
            Trainer::resume(ck.net, ck.opt, cfg.train.clone(), ck.epoch)?
        }
    };
    let ck_path = out.join(CHECKPOINT_FILE);
    save_atomic(&snapshot(&trainer), &ck_path)?;

    let log_path = out.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_failure(&log_path, e))?);
    let losses_path = out.join(LOSSES_FILE);
    let mut losses = BufWriter::new(
        File::create(&losses_path).map_err(|e| io_failure(&losses_path, e))?,
    );
    writeln!(losses, "epoch,mean_loss,lr").map_err(|e| io_failure(&losses_path, e))?;

    let per_sample = cfg.train.time_steps * cfg.train.scales;
    eprintln!(
        "training on {} samples, {} updates per sample, epochs {}..{}",
        samples.len(),
        per_sample,
        trainer.epoch,
        cfg.train.epochs
    );
    let mut log_err = None;
    let result = trainer.run(
        &samples,
        |r| {
            if log_err.is_none() {
                log_err = writeln!(log, "{r}").err();
            }
        },
        |t, mean| {
            save_atomic(&snapshot(t), &ck_path)?;
            writeln!(losses, "{},{mean:.8e},{:e}", t.epoch, t.cfg.lr_at(t.epoch - 1))
                .and_then(|_| losses.flush())
                .map_err(|e| Error::Io {
                    path: losses_path.clone(),
                    source: e,
                })?;
            eprintln!("epoch {} mean loss {mean:.6e}", t.epoch);
            Ok(())
        },
    );
    log.flush().map_err(|e| io_failure(&log_path, e))?;
    if let Some(e) = log_err {
        return Err(io_failure(&log_path, e));
    }
    let report = match result {
        Ok(r) => r,
        Err(e @ Error::Diverged(_)) => {
            return Err(Failure::Diverged(format!(
                "{e}; last good checkpoint kept at {}",
                ck_path.display()
            )))
        }
        Err(e) => return Err(e.into()),
    };
    save_atomic(&snapshot(&trainer), &ck_path)?;
    let summary = Summary {
        epochs_run: report.epoch_losses.len(),
        epoch_losses: &report.epoch_losses,
        updates: report.updates,
        updates_per_sample: per_sample,
        wall_clock_secs: report.wall_clock_secs,
        checksum: report.checksum.clone(),
    };
    let report_path = out.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Failure::Internal(e.to_string()))?;
    fs::write(&report_path, json).map_err(|e| io_failure(&report_path, e))?;
    println!("checkpoint {} checksum {}", ck_path.display(), report.checksum);
    Ok(())
}
