//! Gated transformer over `[CLS_1..CLS_L, tabular tokens, aux tokens]`.
//!
//! Each layer is
//!
//! ```text
//! x = x + tanh(g_attn) * Attn(LN(x))
//! x = x + tanh(g_ffn)  * FFN(LN(x))
//! ```
//!
//! with scalar gates. Label `k` reads the final state of `CLS_k` through its
//! own classification head (one logit) and its own contrast head (linear map,
//! then L2 normalization). A batch is one ragged matrix of token rows; each
//! sample is a segment that attends only within itself.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Parameters, Tape, Tensor, Var};
use crate::encoder::{Projection, ProjectionKind, TokenRef};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_labels: usize,
    pub gate_init: f64,
    /// FFN hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,
    /// Width of the incoming embeddings.
    pub embed_dim: usize,
    pub projection: ProjectionKind,
    /// Number of learned aux position offsets; 0 disables aux tokens.
    pub aux_tokens: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            d_model: 256,
            num_layers: 2,
            num_heads: 4,
            num_labels: 1,
            gate_init: 0.0,
            ffn_mult: 4,
            embed_dim: 256,
            projection: ProjectionKind::Linear,
            aux_tokens: 0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return bad(format!(
                "d_model ({}) must be a positive multiple of num_heads ({})",
                self.d_model, self.num_heads
            ));
        }
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.num_labels == 0 {
            return bad("num_labels must be at least 1".into());
        }
        if self.ffn_mult == 0 || self.embed_dim == 0 {
            return bad("ffn_mult and embed_dim must be positive".into());
        }
        if !self.gate_init.is_finite() {
            return bad(format!("gate_init must be finite, got {}", self.gate_init));
        }
        Ok(())
    }
}

/// One sample: references into the embedding table plus optional aux tokens
/// (`count x d_model`, row-major).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleInput {
    pub tokens: Vec<TokenRef>,
    pub aux: Vec<f64>,
}

/// Per-sample outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelOutputs {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub contrast_reps: Vec<Vec<f64>>,
}

/// Tape handles produced by [`FusionModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Per label, a `B x 1` column.
    pub logits: Vec<Var>,
    pub probs: Vec<Var>,
    /// Per label, `B x d_model` unit rows.
    pub reps: Vec<Var>,
    /// Parameter handles, aligned with [`FusionModel::params`].
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub params: Parameters,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect())
        .expect("shape matches")
}

impl FusionModel {
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, e, l) = (config.d_model, config.embed_dim, config.num_labels);
        let h = d * config.ffn_mult;
        let mut p = Parameters::new();
        match config.projection {
            ProjectionKind::Linear => {
                p.insert("proj.w1", glorot(&mut rng, e, d), true);
            }
            ProjectionKind::Mlp => {
                p.insert("proj.w1", glorot(&mut rng, e, d), true);
                p.insert("proj.w2", glorot(&mut rng, d, d), true);
            }
        }
        p.insert("cls", glorot(&mut rng, l, d), true);
        if config.aux_tokens > 0 {
            p.insert("aux.pos", Tensor::zeros(vec![config.aux_tokens, d]), true);
        }
        for i in 0..config.num_layers {
            let n = |s: &str| format!("layer{i}.{s}");
            p.insert(&n("ln1.g"), Tensor::matrix(1, d, vec![1.0; d])?, true);
            p.insert(&n("ln1.b"), Tensor::zeros(vec![1, d]), true);
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(&n(&format!("attn.{w}")), glorot(&mut rng, d, d), true);
            }
            p.insert(&n("attn.gate"), Tensor::scalar(config.gate_init), true);
            p.insert(&n("ln2.g"), Tensor::matrix(1, d, vec![1.0; d])?, true);
            p.insert(&n("ln2.b"), Tensor::zeros(vec![1, d]), true);
            p.insert(&n("ffn.w1"), glorot(&mut rng, d, h), true);
            p.insert(&n("ffn.b1"), Tensor::zeros(vec![1, h]), true);
            p.insert(&n("ffn.w2"), glorot(&mut rng, h, d), true);
            p.insert(&n("ffn.b2"), Tensor::zeros(vec![1, d]), true);
            p.insert(&n("ffn.gate"), Tensor::scalar(config.gate_init), true);
        }
        for k in 0..l {
            p.insert(&format!("head{k}.w"), glorot(&mut rng, d, 1), false);
            p.insert(&format!("head{k}.b"), Tensor::zeros(vec![1, 1]), false);
            p.insert(&format!("contrast{k}.w"), glorot(&mut rng, d, d), false);
        }
        Ok(FusionModel { config, params: p })
    }

    /// Current projection weights.
    pub fn projection(&self) -> Projection {
        Projection {
            first: self.params.get("proj.w1").expect("projection exists").clone(),
            second: self.params.get("proj.w2").cloned(),
        }
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        vars[self.params.index_of(name).unwrap_or_else(|| panic!("missing parameter `{name}`"))]
    }

    /// Set every gate to `value`.
    pub fn set_gates(&mut self, value: f64) {
        for p in self.params.iter_mut() {
            if p.name.ends_with(".gate") {
                p.value.data_mut()[0] = value;
            }
        }
    }

    /// The transformer stack on an assembled token matrix.
    pub fn transform(&self, tape: &mut Tape, vars: &[Var], x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let mut x = x;
        for i in 0..self.config.num_layers {
            let n = |s: &str| format!("layer{i}.{s}");
            let h = tape.layer_norm(x)?;
            let h = tape.mul_row(h, self.var(vars, &n("ln1.g")))?;
            let h = tape.add_row(h, self.var(vars, &n("ln1.b")))?;
            let q = tape.matmul(h, self.var(vars, &n("attn.wq")))?;
            let k = tape.matmul(h, self.var(vars, &n("attn.wk")))?;
            let v = tape.matmul(h, self.var(vars, &n("attn.wv")))?;
            let a = tape.segment_attention(q, k, v, segments, self.config.num_heads)?;
            let a = tape.matmul(a, self.var(vars, &n("attn.wo")))?;
            let g = tape.tanh(self.var(vars, &n("attn.gate")))?;
            let a = tape.scale(a, g)?;
            x = tape.add(x, a)?;
            check_finite(tape, x, i, "attention")?;

            let h = tape.layer_norm(x)?;
            let h = tape.mul_row(h, self.var(vars, &n("ln2.g")))?;
            let h = tape.add_row(h, self.var(vars, &n("ln2.b")))?;
            let f = tape.matmul(h, self.var(vars, &n("ffn.w1")))?;
            let f = tape.add_row(f, self.var(vars, &n("ffn.b1")))?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, self.var(vars, &n("ffn.w2")))?;
            let f = tape.add_row(f, self.var(vars, &n("ffn.b2")))?;
            let g = tape.tanh(self.var(vars, &n("ffn.gate")))?;
            let f = tape.scale(f, g)?;
            x = tape.add(x, f)?;
            check_finite(tape, x, i, "ffn")?;
        }
        Ok(x)
    }

    /// Assemble `[CLS, tab, aux]` per sample into one matrix. Returns the
    /// matrix and the `(start, len)` segment of each sample.
    pub fn assemble(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        table: &Tensor,
        samples: &[SampleInput],
    ) -> Result<(Var, Vec<(usize, usize)>)> {
        let (d, l) = (self.config.d_model, self.config.num_labels);
        let (entries, width) = table.dims2();
        let total_tab: usize = samples.iter().map(|s| s.tokens.len()).sum();
        let mut sources = vec![self.var(vars, "cls")];

        let tab_src = if total_tab > 0 {
            if width != self.config.embed_dim {
                return Err(Error::structure(
                    "assemble_input",
                    format!("embedding width {width}, projection expects {}", self.config.embed_dim),
                ));
            }
            let t = tape.constant(table);
            let mut index = Vec::with_capacity(total_tab);
            let mut scales = Vec::with_capacity(total_tab * width);
            for s in samples {
                for tok in &s.tokens {
                    if tok.entry as usize >= entries {
                        return Err(Error::structure("assemble_input", format!("token entry {} outside table", tok.entry)));
                    }
                    index.push((0, tok.entry as usize));
                    scales.extend(std::iter::repeat_n(tok.scale, width));
                }
            }
            let raw = tape.gather_rows(&[t], &index)?;
            let sc = tape.constant(&Tensor::matrix(total_tab, width, scales)?);
            let raw = tape.mul(raw, sc)?;
            let mut p = tape.matmul(raw, self.var(vars, "proj.w1"))?;
            if self.config.projection == ProjectionKind::Mlp {
                p = tape.gelu(p)?;
                p = tape.matmul(p, self.var(vars, "proj.w2"))?;
            }
            sources.push(p);
            Some(sources.len() - 1)
        } else {
            None
        };

        let mut aux_counts = Vec::with_capacity(samples.len());
        for (b, s) in samples.iter().enumerate() {
            if s.aux.len() % d != 0 {
                return Err(Error::structure(
                    "assemble_input",
                    format!("sample {b} aux buffer of {} values is not a multiple of d_model {d}", s.aux.len()),
                ));
            }
            let c = s.aux.len() / d;
            if c > self.config.aux_tokens {
                return Err(Error::structure(
                    "assemble_input",
                    format!("sample {b} has {c} aux tokens, model supports {}", self.config.aux_tokens),
                ));
            }
            aux_counts.push(c);
        }
        let total_aux: usize = aux_counts.iter().sum();
        let aux_src = if total_aux > 0 {
            let data: Vec<f64> = samples.iter().flat_map(|s| s.aux.iter().copied()).collect();
            let a = tape.constant(&Tensor::matrix(total_aux, d, data)?);
            let pos_index: Vec<(usize, usize)> = aux_counts.iter().flat_map(|&c| (0..c).map(|i| (0, i))).collect();
            let pos = tape.gather_rows(&[self.var(vars, "aux.pos")], &pos_index)?;
            sources.push(tape.add(a, pos)?);
            Some(sources.len() - 1)
        } else {
            None
        };

        let mut index = Vec::new();
        let mut segments = Vec::with_capacity(samples.len());
        let (mut tab_row, mut aux_row) = (0, 0);
        for (s, &c) in samples.iter().zip(&aux_counts) {
            let start = index.len();
            index.extend((0..l).map(|k| (0, k)));
            for _ in &s.tokens {
                index.push((tab_src.expect("tab tokens present"), tab_row));
                tab_row += 1;
            }
            for _ in 0..c {
                index.push((aux_src.expect("aux tokens present"), aux_row));
                aux_row += 1;
            }
            segments.push((start, index.len() - start));
        }
        let x = tape.gather_rows(&sources, &index)?;
        Ok((x, segments))
    }

    /// Record the full forward pass for a batch.
    pub fn forward(&self, tape: &mut Tape, table: &Tensor, samples: &[SampleInput]) -> Result<ForwardVars> {
        if samples.is_empty() {
            return Err(Error::Precondition("forward called with an empty batch".into()));
        }
        let vars = self.params.bind(tape);
        let (x, segments) = self.assemble(tape, &vars, table, samples)?;
        let x = self.transform(tape, &vars, x, &segments)?;
        let mut out = ForwardVars {
            logits: Vec::new(),
            probs: Vec::new(),
            reps: Vec::new(),
            params: vars.clone(),
        };
        for k in 0..self.config.num_labels {
            let rows: Vec<(usize, usize)> = segments.iter().map(|&(s, _)| (0, s + k)).collect();
            let c = tape.gather_rows(&[x], &rows)?;
            let z = tape.matmul(c, self.var(&vars, &format!("head{k}.w")))?;
            let z = tape.add_row(z, self.var(&vars, &format!("head{k}.b")))?;
            let p = tape.sigmoid(z)?;
            let r = tape.matmul(c, self.var(&vars, &format!("contrast{k}.w")))?;
            let r = tape.l2_normalize_rows(r)?;
            out.logits.push(z);
            out.probs.push(p);
            out.reps.push(r);
        }
        Ok(out)
    }

    /// Forward without keeping the tape.
    pub fn predict(&self, table: &Tensor, samples: &[SampleInput]) -> Result<Vec<LabelOutputs>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, table, samples)?;
        let d = self.config.d_model;
        Ok((0..samples.len())
            .map(|b| {
                let logits: Vec<f64> = f.logits.iter().map(|&z| tape.value(z)[b]).collect();
                LabelOutputs {
                    probabilities: f.probs.iter().map(|&p| tape.value(p)[b]).collect(),
                    contrast_reps: f.reps.iter().map(|&r| tape.value(r)[b * d..(b + 1) * d].to_vec()).collect(),
                    logits,
                }
            })
            .collect())
    }
}

fn check_finite(tape: &Tape, x: Var, layer: usize, stage: &'static str) -> Result<()> {
    if tape.value(x).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation { layer, stage })
    }
}

/// Seeded per-subject Gaussian aux tokens, `count x dim` row-major.
pub fn synth_aux_tokens(subject_id: &str, count: usize, seed: u64, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(b"aux-tokens\0");
    h.update(seed.to_le_bytes());
    h.update(subject_id.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    (0..count * dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Aux tokens with an optional planted label signal: each token is shifted
/// by `+effect/2` along label `k`'s direction when the subject is positive
/// for `k` and by `-effect/2` when negative.
#[derive(Clone, Debug)]
pub struct AuxTokenSource {
    pub count: usize,
    pub dim: usize,
    pub seed: u64,
    pub noise: f64,
    pub planted: Option<PlantedSignal>,
}

#[derive(Clone, Debug)]
pub struct PlantedSignal {
    pub effect: f64,
    /// Unit direction per label; `None` leaves that label unplanted.
    pub directions: Vec<Option<Vec<f64>>>,
    pub subject_labels: HashMap<String, Vec<Option<bool>>>,
}

impl PlantedSignal {
    /// Random unit directions for the labels in `planted`.
    pub fn new(
        effect: f64,
        dim: usize,
        num_labels: usize,
        planted: &[usize],
        seed: u64,
        subject_labels: HashMap<String, Vec<Option<bool>>>,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let directions = (0..num_labels)
            .map(|k| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                planted.contains(&k).then(|| {
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.iter().map(|x| x / n).collect()
                })
            })
            .collect();
        PlantedSignal {
            effect,
            directions,
            subject_labels,
        }
    }
}

impl AuxTokenSource {
    pub fn tokens(&self, subject_id: &str) -> Vec<f64> {
        let mut t = synth_aux_tokens(subject_id, self.count, self.seed, self.dim);
        t.iter_mut().for_each(|v| *v *= self.noise);
        if let Some(p) = &self.planted {
            if let Some(labels) = p.subject_labels.get(subject_id) {
                for (dir, y) in p.directions.iter().zip(labels) {
                    let (Some(dir), Some(y)) = (dir, y) else { continue };
                    let s = if *y { 0.5 * p.effect } else { -0.5 * p.effect };
                    for row in t.chunks_mut(self.dim) {
                        row.iter_mut().zip(dir).for_each(|(v, u)| *v += s * u);
                    }
                }
            }
        }
        t
    }
}
