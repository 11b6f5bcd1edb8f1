//! File-level train, eval and encode runs.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::autodiff::Parameters;
use crate::config::RunConfig;
use crate::encoder::{encode_dataset, SchemaEmbeddings};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{FusionConfig, FusionModel};
use crate::objectives::FocalParams;
use crate::schema::{compute_numeric_stats, ColumnKind, DatasetMatrix, SchemaDescriptor};
use crate::seed::{sub_seed, DATA, INIT};
use crate::split::split_stratified;
use crate::trainer::{evaluate, TrainData, Trainer};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const FINAL_CHECKPOINT: &str = "final.bin";
pub const TRAIN_LOG: &str = "train_log.ndjson";
pub const SCHEMA: &str = "schema.json";
pub const METRICS: &str = "metrics.json";

#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub best_epoch: usize,
    pub test: MetricReport,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn model_config(cfg: &RunConfig, schema: &SchemaDescriptor) -> FusionConfig {
    FusionConfig {
        num_labels: schema.num_labels(),
        ..cfg.model.clone()
    }
}

fn to_train_data(data: &DatasetMatrix, cfg: &RunConfig) -> Result<TrainData> {
    let provider = cfg.provider.build(cfg.variant)?;
    let emb = SchemaEmbeddings::build(&data.schema, cfg.variant, provider.as_ref())?;
    let enc = encode_dataset(data, &emb)?;
    TrainData::from_encoded(&enc, None, true, data.schema.label_columns.clone())
}

/// Split by subject, train, and write `config.json`, `schema.json` (with
/// training-split statistics), the training log, the best and final
/// checkpoints, and test metrics into `out`.
pub fn train_run(data: &DatasetMatrix, cfg: &RunConfig, out: &Path) -> Result<TrainArtifacts> {
    cfg.validate()?;
    data.validate()?;
    cfg.write_to(out)?;
    let subjects: Vec<String> = data.rows.iter().map(|r| r.subject_id.clone()).collect();
    let split = split_stratified(&subjects, cfg.train.split_fractions, sub_seed(cfg.seed, DATA))?;
    let schema = compute_numeric_stats(data, &split.train)?;
    write_file(&out.join(SCHEMA), schema.to_json().as_bytes())?;
    let data = DatasetMatrix {
        rows: data.rows.clone(),
        schema,
    };
    let all = to_train_data(&data, cfg)?;
    let (train, val, test) = (all.subset(&split.train), all.subset(&split.val), all.subset(&split.test));

    let mut model = FusionModel::new(model_config(cfg, &data.schema), sub_seed(cfg.seed, INIT))?;
    let mut trainer = Trainer::new(cfg.train.clone(), &model, &train)?;
    let log_path = out.join(TRAIN_LOG);
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let outcome = trainer.fit(&mut model, &train, &val, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    model.params.save(&out.join(FINAL_CHECKPOINT))?;
    let checkpoint = out.join(CHECKPOINT);
    outcome.best_params.save(&checkpoint)?;
    model.params = outcome.best_params;
    let focal = FocalParams::balanced(&train.labels, train.num_labels(), cfg.train.focal_gamma);
    let test = evaluate(&model, &test, cfg.train.batch_size, &focal, &cfg.train.contrast)?.report;
    write_file(&out.join(METRICS), test.to_json().as_bytes())?;
    Ok(TrainArtifacts {
        checkpoint,
        log: log_path,
        best_epoch: outcome.best_epoch,
        test,
    })
}

/// Evaluation schema: a numerical column also present by name in the
/// training schema takes its training statistics; the rest keep the
/// statistics from their own metadata.
pub fn eval_schema(data: &DatasetMatrix, trained: &SchemaDescriptor) -> SchemaDescriptor {
    let mut schema = data.schema.clone();
    for col in &mut schema.columns {
        if let Some((m, r)) = trained.columns.iter().find(|c| c.name == col.name).and_then(|c| c.stats()) {
            if col.kind == ColumnKind::Numerical {
                (col.mean, col.range) = (Some(m), Some(r));
            }
        }
    }
    schema
}

/// Evaluate the best checkpoint of the run in `run_dir` on `data`.
pub fn eval_run(run_dir: &Path, data: &DatasetMatrix) -> Result<MetricReport> {
    let cfg = RunConfig::load(&run_dir.join("config.json"))?;
    let trained_path = run_dir.join(SCHEMA);
    let text = fs::read_to_string(&trained_path).map_err(|e| Error::io(&trained_path, e))?;
    let trained = crate::schema::parse_schema(&text)?;
    if data.schema.num_labels() != trained.num_labels() {
        return Err(Error::Validation(format!(
            "data has {} label columns, the checkpoint was trained on {}",
            data.schema.num_labels(),
            trained.num_labels()
        )));
    }
    let data = DatasetMatrix {
        rows: data.rows.clone(),
        schema: eval_schema(data, &trained),
    };
    let mut model = FusionModel::new(model_config(&cfg, &data.schema), sub_seed(cfg.seed, INIT))?;
    model.params.load_values(&Parameters::load(&run_dir.join(CHECKPOINT))?)?;
    let eval = to_train_data(&data, &cfg)?;
    let focal = FocalParams::balanced(&eval.labels, eval.num_labels(), cfg.train.focal_gamma);
    Ok(evaluate(&model, &eval, cfg.train.batch_size, &focal, &cfg.train.contrast)?.report)
}

/// Human-readable dump of the first `max_rows` rows: one line per statement
/// followed by its token details.
pub fn encode_dump(data: &DatasetMatrix, cfg: &RunConfig, max_rows: usize) -> Result<String> {
    let provider = cfg.provider.build(cfg.variant)?;
    let emb = SchemaEmbeddings::build(&data.schema, cfg.variant, provider.as_ref())?;
    let mut s = String::new();
    for (i, row) in data.rows.iter().take(max_rows).enumerate() {
        let _ = writeln!(s, "# row {i} subject {}", row.subject_id);
        for t in emb.semantic_tokens(row)? {
            let norm = t.raw_embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
            let kind = match t.kind {
                ColumnKind::Categorical => "categorical",
                ColumnKind::Numerical => "numerical",
            };
            let _ = writeln!(s, "{}", t.statement);
            let _ = writeln!(s, "    column={} kind={kind} norm={norm:.6}", t.column);
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{parse_dataset, parse_schema};

    const SCHEMA_DOC: &str = r#"{
        "columns": [
            {"name": "SEX", "kind": "categorical",
             "refined_description": "Gender of the subject:",
             "vocabulary": {"1": "Male", "2": "Female"}},
            {"name": "AGE", "kind": "numerical",
             "refined_description": "Age of the subject", "mean": 75.0, "range": 10.0}
        ],
        "subject_id_column": "ID",
        "label_columns": ["AD"]
    }"#;

    #[test]
    fn dump_lists_statements_and_norms() {
        let schema = parse_schema(SCHEMA_DOC).unwrap();
        let data = parse_dataset("ID,SEX,AGE,AD\na,2,70,1\nb,1,80,0\n", &schema).unwrap();
        let cfg = RunConfig {
            provider: crate::config::ProviderSettings {
                dimension: 16,
                ..Default::default()
            },
            ..RunConfig::default()
        };
        let out = encode_dump(&data, &cfg, 1).unwrap();
        assert!(out.lines().any(|l| l == "Gender of the subject: Female"), "{out}");
        // mean 75, range 10: 70 maps to 0.5
        assert!(out.contains("column=AGE kind=numerical norm=0.500000"), "{out}");
        assert!(!out.contains("# row 1"));
    }
}
