use std::fs;
use std::io::Write;
use std::path::Path;

use super::adapt::{AdaptationReport, StepRecord};
use super::metrics::IouReport;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::Tensor;

pub const STEPS_CSV: &str = "report.csv";
pub const STEPS_HEADER: &str = "step,ce,swd,total";
pub const SUMMARY: &str = "summary.txt";
pub const DIAGNOSTICS: &str = "diagnostics.txt";
pub const RESOLVED_CONFIG: &str = "resolved_config.txt";
pub const EMB_GMM: &str = "emb_gmm_samples.emb1";
pub const EMB_TARGET_PRE: &str = "emb_target_pre.emb1";
pub const EMB_TARGET_POST: &str = "emb_target_post.emb1";

/// One CSV line per step; floats use the shortest round-trip form.
pub fn steps_csv(records: &[StepRecord]) -> String {
    let mut s = String::from(STEPS_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.ce, r.swd, r.total));
    }
    s
}

pub fn parse_steps_csv(text: &str) -> Result<Vec<StepRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(STEPS_HEADER) {
        return Err(Error::format("report csv", "missing header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::format("report csv", format!("bad line `{l}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(StepRecord {
                step: f[0].parse().map_err(|_| bad())?,
                ce: f[1].parse().map_err(|_| bad())?,
                swd: f[2].parse().map_err(|_| bad())?,
                total: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn write_steps_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    fs::write(path, steps_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn summary_kv(report: &AdaptationReport) -> KvMap {
    let mut kv = KvMap::new();
    kv.set("adapt_steps", report.records.len());
    kv.set("lambda", report.lambda);
    kv.set("tau_filter", report.tau_filter);
    kv.set("kept_fraction", report.kept_fraction);
    kv.set("wall_clock_secs", format!("{:.3}", report.wall_clock_secs));
    if let Some(last) = report.records.last() {
        kv.set("final_ce", last.ce);
        kv.set("final_swd", last.swd);
        kv.set("final_total", last.total);
    }
    kv
}

/// `prefix_miou` plus one `prefix_iou_<c>` entry per class (`undefined`
/// for classes absent from both prediction and truth).
pub fn put_iou(kv: &mut KvMap, prefix: &str, r: &IouReport) {
    kv.set(&format!("{prefix}_miou"), r.miou);
    kv.set(&format!("{prefix}_pixel_accuracy"), r.pixel_accuracy);
    for (c, v) in r.per_class.iter().enumerate() {
        let key = format!("{prefix}_iou_{c}");
        match v {
            Some(v) => kv.set(&key, v),
            None => kv.set(&key, "undefined"),
        }
    }
}

/// EMB1 export: a TNS1 tensor `[n x (d+2)]` holding each embedding followed
/// by its true label (`-1` when unknown) and its predicted label.
pub fn emb1_tensor(embeddings: &Tensor<f32>, truth: Option<&[usize]>, pred: &[usize]) -> Result<Tensor<f32>> {
    let (n, d) = (embeddings.rows(), embeddings.cols());
    if pred.len() != n || truth.is_some_and(|t| t.len() != n) {
        return Err(Error::dim("emb1", format!("{n} rows but label counts differ")));
    }
    let mut data = Vec::with_capacity(n * (d + 2));
    for i in 0..n {
        data.extend_from_slice(embeddings.row(i));
        data.push(truth.map_or(-1.0, |t| t[i] as f32));
        data.push(pred[i] as f32);
    }
    Tensor::new(vec![n, d + 2], data)
}

pub fn write_emb1(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    t.write_tns1(&mut f).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}
