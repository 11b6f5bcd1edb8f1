//! On-disk results layout and comparison tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::trainer::EpochRecord;

#[derive(Clone, Debug, Serialize)]
pub struct ArmResult {
    pub name: String,
    /// Evaluation split name to report.
    pub metrics: IndexMap<String, MetricReport>,
    #[serde(skip)]
    pub curves: Vec<EpochRecord>,
    pub config: serde_json::Value,
}

impl ArmResult {
    pub fn macro_auroc(&self, split: &str) -> Option<f64> {
        self.metrics.get(split).and_then(MetricReport::macro_auroc)
    }

    pub fn curves_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Validation(format!("curves csv: {e}"));
        w.write_record(["epoch", "train_loss", "val_loss", "val_macro_auroc"])
            .map_err(csv_err)?;
        for r in &self.curves {
            let auroc = r.val_macro.auroc.map_or_else(String::new, |v| v.to_string());
            w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_loss.to_string(), auroc])
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(format!("curves csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProtocolResult {
    pub protocol: String,
    pub seed: u64,
    pub arms: Vec<ArmResult>,
    pub config: serde_json::Value,
}

impl ProtocolResult {
    pub fn new(protocol: &str, seed: u64, arms: Vec<ArmResult>, config: serde_json::Value) -> Self {
        ProtocolResult {
            protocol: protocol.to_string(),
            seed,
            arms,
            config,
        }
    }

    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.name == name)
    }

    fn splits(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for a in &self.arms {
            for k in a.metrics.keys() {
                if !out.contains(k) {
                    out.push(k.clone());
                }
            }
        }
        out
    }

    /// One row per arm, one macro-AUROC and macro-AUC-PR column per split.
    pub fn to_markdown(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let splits = self.splits();
        let mut s = format!("## {} (seed {})\n\n| arm |", self.protocol, self.seed);
        for sp in &splits {
            let _ = write!(s, " {sp} auroc | {sp} auc_pr |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|---|".repeat(splits.len()));
        s.push('\n');
        for a in &self.arms {
            let _ = write!(s, "| {} |", a.name);
            for sp in &splits {
                let m = a.metrics.get(sp).map(|r| &r.macro_);
                let _ = write!(s, " {} | {} |", fmt(m.and_then(|m| m.auroc)), fmt(m.and_then(|m| m.auc_pr)));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let csv_err = |e: csv::Error| Error::Validation(format!("summary csv: {e}"));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["protocol", "arm", "split", "macro_auroc", "macro_auc_pr", "macro_f1", "macro_balanced_accuracy"])
            .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for a in &self.arms {
            for (sp, r) in &a.metrics {
                let m = &r.macro_;
                w.write_record([
                    self.protocol.clone(),
                    a.name.clone(),
                    sp.clone(),
                    opt(m.auroc),
                    opt(m.auc_pr),
                    opt(m.f1),
                    opt(m.balanced_accuracy),
                ])
                .map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(format!("summary csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `<out>/<protocol>/<arm>/{metrics.json,curves.csv,config.json}`
    /// and `<out>/<protocol>/summary.{md,csv}`.
    pub fn write(&self, out: &Path) -> Result<()> {
        let dir = out.join(&self.protocol);
        let write = |path: &Path, text: &str| fs::write(path, text).map_err(|e| Error::io(path, e));
        for a in &self.arms {
            let arm_dir = dir.join(&a.name);
            fs::create_dir_all(&arm_dir).map_err(|e| Error::io(&arm_dir, e))?;
            let metrics = serde_json::to_string_pretty(&a.metrics).expect("metrics serialize");
            write(&arm_dir.join("metrics.json"), &metrics)?;
            write(&arm_dir.join("curves.csv"), &a.curves_csv()?)?;
            let config = serde_json::json!({
                "protocol": self.protocol,
                "seed": self.seed,
                "arm": a.config,
                "run": self.config,
            });
            write(&arm_dir.join("config.json"), &serde_json::to_string_pretty(&config).expect("config serializes"))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write(&dir.join("summary.md"), &self.to_markdown())?;
        write(&dir.join("summary.csv"), &self.to_csv()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::metric_report;

    fn result() -> ProtocolResult {
        let names = vec!["a".to_string()];
        let report = metric_report(
            &[vec![0.9], vec![0.1], vec![0.8]],
            &[vec![Some(true)], vec![Some(false)], vec![Some(true)]],
            &names,
            0.5,
        )
        .unwrap();
        let mut metrics = IndexMap::new();
        metrics.insert("test".to_string(), report);
        let arm = ArmResult {
            name: "semantic".into(),
            metrics,
            curves: Vec::new(),
            config: serde_json::json!({}),
        };
        ProtocolResult::new("zero_shot", 3, vec![arm], serde_json::json!({}))
    }

    #[test]
    fn layout_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        result().write(dir.path()).unwrap();
        for f in ["metrics.json", "curves.csv", "config.json"] {
            assert!(dir.path().join("zero_shot/semantic").join(f).is_file(), "{f}");
        }
        let md = fs::read_to_string(dir.path().join("zero_shot/summary.md")).unwrap();
        assert!(md.contains("| semantic | 1.0000 |"), "{md}");
        let csv = fs::read_to_string(dir.path().join("zero_shot/summary.csv")).unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with("zero_shot,semantic,test,1,"));
    }
}
