//! Zero-shot, few-shot and ablation protocols on a benchmark pair.

use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generator::{BenchmarkPair, GeneratorConfig};
use super::report::{ArmResult, ProtocolResult};
use crate::config::ProviderSettings;
use crate::embedding::EmbeddingProvider;
use crate::encoder::{encode_dataset, EncoderVariant, ProjectionKind, SchemaEmbeddings};
use crate::error::{Error, Result};
use crate::model::{AuxTokenSource, FusionConfig, FusionModel, PlantedSignal};
use crate::schema::{compute_numeric_stats, DatasetMatrix};
use crate::seed::{sub_seed, DATA, INIT};
use crate::split::split_stratified;
use crate::trainer::{evaluate, EpochRecord, TrainConfig, TrainData, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewShotConfig {
    pub grid: Vec<usize>,
    /// Target rows generated for the few-shot pair.
    pub n_target: usize,
    /// Subject fractions of the target for (pool, val, test).
    pub target_split: [f64; 3],
    /// Optimizer steps per arm, identical for both arms.
    pub steps: usize,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            grid: vec![30, 100, 300, 1000],
            n_target: 2500,
            target_split: [0.6, 0.1, 0.3],
            steps: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Source rows used by the ablation arms.
    pub n_rows: usize,
    pub epochs: usize,
    pub aux_tokens: usize,
    pub aux_noise: f64,
    pub aux_effect: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            n_rows: 1000,
            epochs: 30,
            aux_tokens: 4,
            aux_noise: 1.0,
            aux_effect: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub seed: u64,
    pub provider: ProviderSettings,
    pub generator: GeneratorConfig,
    pub model: FusionConfig,
    pub train: TrainConfig,
    pub few_shot: FewShotConfig,
    pub ablation: AblationConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seed: 0,
            provider: ProviderSettings {
                dimension: 64,
                ..ProviderSettings::default()
            },
            generator: GeneratorConfig::default(),
            model: FusionConfig {
                d_model: 16,
                num_layers: 2,
                num_heads: 4,
                num_labels: 6,
                embed_dim: 64,
                ..FusionConfig::default()
            },
            train: TrainConfig {
                epochs: 12,
                learning_rate: 0.01,
                batch_size: 64,
                ..TrainConfig::default()
            },
            few_shot: FewShotConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl BenchConfig {
    fn model_config(&self, labels: usize) -> FusionConfig {
        FusionConfig {
            num_labels: labels,
            embed_dim: self.provider.dimension,
            ..self.model.clone()
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model_config(self.generator.num_labels).validate()?;
        self.train.validate()?;
        let grid = &self.few_shot.grid;
        if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!("few_shot.grid must be strictly ascending, got {grid:?}")));
        }
        crate::split::validate_fractions(self.few_shot.target_split)?;
        if self.few_shot.steps == 0 || self.ablation.epochs == 0 || self.ablation.n_rows == 0 {
            return Err(Error::Validation(
                "few_shot.steps, ablation.epochs and ablation.n_rows must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn variant_name(v: EncoderVariant) -> &'static str {
    match v {
        EncoderVariant::Semantic => "semantic",
        EncoderVariant::RandomEmbed => "random_embed",
        EncoderVariant::NameOnly => "pretrained_name_only",
    }
}

/// Encode `data` with numeric statistics taken from the rows in `stats_rows`.
fn encode(
    data: &DatasetMatrix,
    stats_rows: &[usize],
    variant: EncoderVariant,
    provider: &dyn EmbeddingProvider,
    aux: Option<&AuxTokenSource>,
    include_table: bool,
) -> Result<TrainData> {
    let schema = compute_numeric_stats(data, stats_rows)?;
    let data = DatasetMatrix {
        rows: data.rows.clone(),
        schema,
    };
    let emb = SchemaEmbeddings::build(&data.schema, variant, provider)?;
    let enc = encode_dataset(&data, &emb)?;
    TrainData::from_encoded(&enc, aux, include_table, data.schema.label_columns.clone())
}

fn subjects_of(data: &DatasetMatrix) -> Vec<String> {
    data.rows.iter().map(|r| r.subject_id.clone()).collect()
}

/// A model trained on the source side only.
pub struct SourceModel {
    pub model: FusionModel,
    pub test_report: crate::metrics::MetricReport,
    pub curves: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn fit(
    cfg: &BenchConfig,
    model_cfg: FusionConfig,
    train_cfg: TrainConfig,
    train: &TrainData,
    val: &TrainData,
    forbidden: &HashSet<String>,
    init: Option<&FusionModel>,
) -> Result<(FusionModel, crate::trainer::TrainOutcome)> {
    let mut model = FusionModel::new(model_cfg, sub_seed(cfg.seed, INIT))?;
    if let Some(src) = init {
        model.params.load_values(&src.params)?;
    }
    let mut trainer = Trainer::new(train_cfg, &model, train)?;
    trainer.forbidden_subjects = forbidden.clone();
    let outcome = trainer.fit(&mut model, train, val, None)?;
    Ok((model, outcome))
}

/// Train on the source side with the target's subjects on the leakage list.
pub fn train_source(pair: &BenchmarkPair, variant: EncoderVariant, cfg: &BenchConfig) -> Result<(SourceModel, TrainData)> {
    let src = &pair.source;
    let split = split_stratified(&subjects_of(src), cfg.train.split_fractions, sub_seed(cfg.seed, DATA))?;
    let provider = cfg.provider.build(variant)?;
    let all = encode(src, &split.train, variant, provider.as_ref(), None, true)?;
    let (train, val, test) = (all.subset(&split.train), all.subset(&split.val), all.subset(&split.test));
    let forbidden: HashSet<String> = subjects_of(&pair.target).into_iter().collect();
    let (mut model, outcome) = fit(
        cfg,
        cfg.model_config(src.schema.num_labels()),
        cfg.train_config(),
        &train,
        &val,
        &forbidden,
        None,
    )?;
    model.params = outcome.best_params;
    let trainer_focal = crate::objectives::FocalParams::balanced(&train.labels, train.num_labels(), cfg.train.focal_gamma);
    let test_report = evaluate(&model, &test, cfg.train.batch_size, &trainer_focal, &cfg.train.contrast)?.report;
    Ok((
        SourceModel {
            model,
            test_report,
            curves: outcome.history,
            best_epoch: outcome.best_epoch,
        },
        train,
    ))
}

/// Evaluate a source-trained model on every target row.
pub fn evaluate_on_target(
    source: &SourceModel,
    pair: &BenchmarkPair,
    variant: EncoderVariant,
    cfg: &BenchConfig,
) -> Result<crate::metrics::MetricReport> {
    let provider = cfg.provider.build(variant)?;
    let tgt = &pair.target;
    let all_rows: Vec<usize> = (0..tgt.len()).collect();
    let data = encode(tgt, &all_rows, variant, provider.as_ref(), None, true)?;
    let focal = crate::objectives::FocalParams::balanced(&data.labels, data.num_labels(), cfg.train.focal_gamma);
    Ok(evaluate(&source.model, &data, cfg.train.batch_size, &focal, &cfg.train.contrast)?.report)
}

pub fn run_zero_shot(pair: &BenchmarkPair, variant: EncoderVariant, cfg: &BenchConfig) -> Result<ArmResult> {
    let (source, _) = train_source(pair, variant, cfg)?;
    let target = evaluate_on_target(&source, pair, variant, cfg)?;
    let mut metrics = IndexMap::new();
    metrics.insert("target".to_string(), target);
    metrics.insert("source_test".to_string(), source.test_report.clone());
    Ok(ArmResult {
        name: variant_name(variant).to_string(),
        metrics,
        curves: source.curves,
        config: serde_json::json!({
            "variant": variant,
            "paraphrase": pair.paraphrase,
            "best_epoch": source.best_epoch,
            "bench": cfg,
        }),
    })
}

pub fn run_zero_shot_all(pair: &BenchmarkPair, cfg: &BenchConfig) -> Result<ProtocolResult> {
    let arms = [EncoderVariant::Semantic, EncoderVariant::RandomEmbed, EncoderVariant::NameOnly]
        .iter()
        .map(|&v| run_zero_shot(pair, v, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProtocolResult::new("zero_shot", cfg.seed, arms, serde_json::to_value(cfg).expect("config serializes")))
}

pub fn run_few_shot(pair: &BenchmarkPair, cfg: &BenchConfig) -> Result<ProtocolResult> {
    cfg.validate()?;
    let grid = &cfg.few_shot.grid;
    let variant = EncoderVariant::Semantic;
    let (source, _) = train_source(pair, variant, cfg)?;

    let tgt = &pair.target;
    let split = split_stratified(&subjects_of(tgt), cfg.few_shot.target_split, sub_seed(cfg.seed, DATA))?;
    let max = *grid.last().expect("non-empty grid");
    if max > split.train.len() {
        return Err(Error::Validation(format!(
            "few-shot size {max} exceeds the {} target rows available for training",
            split.train.len()
        )));
    }
    let provider = cfg.provider.build(variant)?;
    let mut pool = split.train.clone();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, DATA)));
    let stats: Vec<usize> = pool[..max].to_vec();
    let all = encode(tgt, &stats, variant, provider.as_ref(), None, true)?;
    let (val, test) = (all.subset(&split.val), all.subset(&split.test));
    let focal = crate::objectives::FocalParams::balanced(&test.labels, test.num_labels(), cfg.train.focal_gamma);

    let mut arms = Vec::new();
    for &n in grid {
        let train = all.subset(&pool[..n]);
        let batch = cfg.train.batch_size.min(n);
        let per_epoch = n.div_ceil(batch);
        let epochs = cfg.few_shot.steps.div_ceil(per_epoch);
        let tc = TrainConfig {
            epochs,
            batch_size: batch,
            ..cfg.train_config()
        };
        for (arm, init) in [("finetune", Some(&source.model)), ("scratch", None)] {
            let (model, outcome) = fit(
                cfg,
                cfg.model_config(tgt.schema.num_labels()),
                tc.clone(),
                &train,
                &val,
                &HashSet::new(),
                init,
            )?;
            let report = evaluate(&model, &test, cfg.train.batch_size, &focal, &cfg.train.contrast)?.report;
            let mut metrics = IndexMap::new();
            metrics.insert("target_test".to_string(), report);
            arms.push(ArmResult {
                name: format!("{arm}_n{n}"),
                metrics,
                curves: outcome.history,
                config: serde_json::json!({
                    "arm": arm,
                    "n": n,
                    "epochs": epochs,
                    "batch_size": batch,
                    "steps": epochs * per_epoch,
                }),
            });
        }
    }
    Ok(ProtocolResult::new("few_shot", cfg.seed, arms, serde_json::to_value(cfg).expect("config serializes")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Table,
    Aux,
    TableAux,
}

fn arm_specs() -> Vec<(&'static str, usize, ProjectionKind, Modality)> {
    use Modality::*;
    use ProjectionKind::*;
    vec![
        ("layers_1", 1, Linear, Table),
        ("layers_2", 2, Linear, Table),
        ("layers_3", 3, Linear, Table),
        ("proj_linear", 2, Linear, Table),
        ("proj_mlp", 2, Mlp, Table),
        ("modality_table", 2, Linear, Table),
        ("modality_aux", 2, Linear, Aux),
        ("modality_table_aux", 2, Linear, TableAux),
    ]
}

pub fn run_ablations(pair: &BenchmarkPair, cfg: &BenchConfig) -> Result<ProtocolResult> {
    let ab = &cfg.ablation;
    let src = &pair.source;
    let n = ab.n_rows.min(src.len());
    // Whole subjects only: cut at a subject boundary.
    let mut end = n;
    while end < src.len() && end > 0 && src.rows[end].subject_id == src.rows[end - 1].subject_id {
        end += 1;
    }
    let data = src.subset(&(0..end).collect::<Vec<_>>());
    let split = split_stratified(&subjects_of(&data), cfg.train.split_fractions, sub_seed(cfg.seed, DATA))?;
    let provider = cfg.provider.build(EncoderVariant::Semantic)?;

    let mut subject_labels: HashMap<String, Vec<Option<bool>>> = HashMap::new();
    for r in &data.rows {
        subject_labels.entry(r.subject_id.clone()).or_insert_with(|| r.labels.clone());
    }
    let l = data.schema.num_labels();
    let d = cfg.model.d_model;
    let aux = AuxTokenSource {
        count: ab.aux_tokens,
        dim: d,
        seed: sub_seed(cfg.seed, DATA),
        noise: ab.aux_noise,
        planted: Some(PlantedSignal::new(
            ab.aux_effect,
            d,
            l,
            &(0..l).collect::<Vec<_>>(),
            sub_seed(cfg.seed, DATA),
            subject_labels,
        )),
    };
    let tc = TrainConfig {
        epochs: ab.epochs,
        ..cfg.train_config()
    };
    let mut cache: HashMap<(usize, ProjectionKind, Modality), ArmResult> = HashMap::new();
    let mut arms = Vec::new();
    for (name, layers, proj, modality) in arm_specs() {
        let key = (layers, proj, modality);
        if !cache.contains_key(&key) {
            let (aux_src, table) = match modality {
                Modality::Table => (None, true),
                Modality::Aux => (Some(&aux), false),
                Modality::TableAux => (Some(&aux), true),
            };
            let all = encode(&data, &split.train, EncoderVariant::Semantic, provider.as_ref(), aux_src, table)?;
            let (train, val, test) = (all.subset(&split.train), all.subset(&split.val), all.subset(&split.test));
            let mc = FusionConfig {
                num_layers: layers,
                projection: proj,
                aux_tokens: if aux_src.is_some() { ab.aux_tokens } else { 0 },
                ..cfg.model_config(l)
            };
            let (mut model, outcome) = fit(cfg, mc, tc.clone(), &train, &val, &HashSet::new(), None)?;
            model.params = outcome.best_params.clone();
            let focal = crate::objectives::FocalParams::balanced(&train.labels, l, cfg.train.focal_gamma);
            let report = evaluate(&model, &test, cfg.train.batch_size, &focal, &cfg.train.contrast)?.report;
            let mut metrics = IndexMap::new();
            metrics.insert("test".to_string(), report);
            cache.insert(
                key,
                ArmResult {
                    name: String::new(),
                    metrics,
                    curves: outcome.history,
                    config: serde_json::json!({
                        "layers": layers,
                        "projection": proj,
                        "modality": modality,
                        "best_epoch": outcome.best_epoch,
                        "rows": data.len(),
                    }),
                },
            );
        }
        let mut arm = cache[&key].clone();
        arm.name = name.to_string();
        arms.push(arm);
    }
    Ok(ProtocolResult::new("ablation", cfg.seed, arms, serde_json::to_value(cfg).expect("config serializes")))
}

/// Validation minus training loss, averaged over the last `k` epochs.
pub fn generalization_gap(curves: &[EpochRecord], k: usize) -> Option<f64> {
    if curves.is_empty() || k == 0 {
        return None;
    }
    let tail = &curves[curves.len().saturating_sub(k)..];
    Some(tail.iter().map(|r| r.val_loss - r.train_loss).sum::<f64>() / tail.len() as f64)
}
