//! Pinned outputs of a small fixed model. A change in any value means the
//! numerics changed; refresh the constants only when that is intended.

use schemadapt::bench::{generate_pair, GeneratorConfig};
use schemadapt::embedding::OfflineEmbedder;
use schemadapt::encoder::{encode_dataset, EncoderVariant, SchemaEmbeddings};
use schemadapt::model::{FusionConfig, FusionModel};
use schemadapt::trainer::{TrainConfig, TrainData, Trainer};

fn fixture() -> (FusionModel, TrainData) {
    let g = GeneratorConfig {
        n_source: 60,
        n_target: 20,
        ..GeneratorConfig::default()
    };
    let data = generate_pair(&g, 21).unwrap().source;
    let provider = OfflineEmbedder::new(21, 16).unwrap();
    let emb = SchemaEmbeddings::build(&data.schema, EncoderVariant::Semantic, &provider).unwrap();
    let enc = encode_dataset(&data, &emb).unwrap();
    let train = TrainData::from_encoded(&enc, None, true, data.schema.label_columns.clone()).unwrap();
    let cfg = FusionConfig {
        d_model: 8,
        num_layers: 2,
        num_heads: 2,
        num_labels: data.schema.num_labels(),
        embed_dim: 16,
        gate_init: 0.5,
        ..FusionConfig::default()
    };
    (FusionModel::new(cfg, 21).unwrap(), train)
}

fn close(got: &[f64], want: &[f64]) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= 1e-9 * (1.0 + w.abs()), "entry {i}: got {g:.15}, pinned {w:.15}");
    }
}

const LOGITS: [f64; 6] = [
    -1.0780188424203212,
    -0.2605152274403595,
    0.029864265053371957,
    -1.4112992946237353,
    0.655109112751566,
    1.2415424352019708,
];
/// Summed task losses and min-norm value per step, then the first row's
/// logits after the third step.
const TRAJECTORY: [f64; 12] = [
    2.3228936338066664,
    2.5711906978026824e-10,
    1.9932588241808604,
    1.158683663961427e-9,
    1.3288136062090672,
    2.554601741153912e-10,
    -1.1504862118125867,
    -0.30501628686454507,
    -0.16807215623408908,
    -1.1519926370810734,
    0.35825296110726296,
    0.7154991672665952,
];

#[test]
fn first_row_logits() {
    let (model, data) = fixture();
    let out = model.predict(&data.table, &data.samples[..1]).unwrap();
    let logits = out[0].logits.clone();
    close(&logits, &LOGITS);
}

#[test]
fn three_step_trajectory() {
    let (mut model, data) = fixture();
    let cfg = TrainConfig {
        batch_size: 16,
        epochs: 1,
        learning_rate: 0.01,
        seed: 21,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg, &model, &data).unwrap();
    let mut seen = Vec::new();
    for step in 0..3 {
        let batch: Vec<usize> = (step * 16..step * 16 + 16).collect();
        let stats = trainer.train_step(&mut model, &data, &batch).unwrap();
        seen.push(stats.losses.iter().sum::<f64>());
        seen.push(stats.norm_sq);
    }
    seen.extend(model.predict(&data.table, &data.samples[..1]).unwrap()[0].logits.clone());
    close(&seen, &TRAJECTORY);
}
