use std::collections::BTreeSet;
use std::fs;

use rdseg::dataset::load_label_png;
use rdseg::metrics::ConfusionMatrix;

use crate::config::create_dir;
use crate::error::{io_failure, Failure, Outcome};
use crate::inputs::{resolve_palette, PngSet};
use crate::EvalArgs;

pub fn run(args: &EvalArgs) -> Outcome {
    let pred = PngSet::labels(&args.pred)?;
    let truth = PngSet::labels(&args.truth)?;
    let p: BTreeSet<&String> = pred.names.iter().collect();
    let t: BTreeSet<&String> = truth.names.iter().collect();
    let no_truth: Vec<&&String> = p.difference(&t).collect();
    let no_pred: Vec<&&String> = t.difference(&p).collect();
    if !no_truth.is_empty() || !no_pred.is_empty() {
        let mut msg = String::from("prediction and truth files do not match");
        for (label, list) in [("without ground truth", &no_truth), ("without prediction", &no_pred)] {
            if !list.is_empty() {
                let names: Vec<&str> = list.iter().map(|s| s.as_str()).collect();
                msg.push_str(&format!("\n  {label}: {}", names.join(", ")));
            }
        }
        return Err(Failure::Validation(msg));
    }
    let palette = resolve_palette(args.palette.as_deref(), &[&args.truth, &args.pred], None)?;
    let mut cm = ConfusionMatrix::new(palette.len());
    for (i, name) in truth.names.iter().enumerate() {
        let j = pred.names.iter().position(|n| n == name).expect("matched above");
        let gt = load_label_png(&truth.path(i), &palette)?;
        let pr = load_label_png(&pred.path(j), &palette)?;
        cm.accumulate(&pr, &gt)
            .map_err(|e| Failure::Validation(format!("{name}: {e}")))?;
    }
    let report = cm.report(palette.names());
    print!("{}", report.to_table());
    if let Some(out) = &args.out {
        create_dir(out)?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Internal(e.to_string()))?;
        for (file, text) in [("metrics.json", json), ("metrics.txt", report.to_key_value())] {
            let p = out.join(file);
            fs::write(&p, text).map_err(|e| io_failure(&p, e))?;
        }
    }
    Ok(())
}
