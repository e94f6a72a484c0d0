use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::trainer::{MetricsRecord, TrainSummary};
use crate::error::{Error, Result};

pub fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `metrics.jsonl` (one record per line, then `{"summary": …}`),
/// `metrics.csv`, and `summary.json` under `dir`.
pub fn write_metrics(dir: impl AsRef<Path>, records: &[MetricsRecord], summary: &TrainSummary) -> Result<()> {
    let dir = dir.as_ref();
    let mut jsonl = String::new();
    for r in records {
        jsonl.push_str(&serde_json::to_string(r).expect("record serializes"));
        jsonl.push('\n');
    }
    #[derive(Serialize)]
    struct Wrapped<'a> {
        summary: &'a TrainSummary,
    }
    jsonl.push_str(&serde_json::to_string(&Wrapped { summary }).expect("summary serializes"));
    jsonl.push('\n');
    let path = dir.join("metrics.jsonl");
    fs::write(&path, jsonl).map_err(|e| Error::io(&path, e))?;

    let mut csv = String::from("epoch,train_loss,val_acc,test_acc,lr_multiplier,seconds\n");
    for r in records {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_acc, r.test_acc, r.lr_multiplier, r.seconds
        )
        .expect("writing to a String");
    }
    let path = dir.join("metrics.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    write_json(dir.join("summary.json"), summary)
}
