//! Synthetic schema-shift pairs.
//!
//! Latent features `z ~ N(0, I)` drive labels through a sparse logistic
//! model. The source and the target expose the same latents under different
//! column names, codes, units, bin boundaries and (optionally) paraphrased
//! descriptions.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{
    compute_numeric_stats, parse_dataset, parse_schema, Cell, ColumnSpec, DatasetMatrix, Row, SchemaDescriptor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paraphrase {
    Identical,
    Light,
    Heavy,
}

impl FromStr for Paraphrase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identical" => Ok(Paraphrase::Identical),
            "light" => Ok(Paraphrase::Light),
            "heavy" => Ok(Paraphrase::Heavy),
            other => Err(Error::Validation(format!(
                "paraphrase level must be identical, light or heavy, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Paraphrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Paraphrase::Identical => "identical",
            Paraphrase::Light => "light",
            Paraphrase::Heavy => "heavy",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Binned,
    Binary,
}

struct Concept {
    source: &'static str,
    target: &'static str,
    description: &'static str,
    kind: FeatureKind,
    /// (mean, sd) in source units, then in target units.
    units: [(f64, f64); 2],
}

const fn c(
    source: &'static str,
    target: &'static str,
    description: &'static str,
    kind: FeatureKind,
    units: [(f64, f64); 2],
) -> Concept {
    Concept {
        source,
        target,
        description,
        kind,
        units,
    }
}

use FeatureKind::{Binary, Binned, Numeric};

const CONCEPTS: &[Concept] = &[
    c("MMSE_TOTAL", "MMSCORE", "Total score of the mini mental state examination", Numeric, [(26.0, 3.0), (26.0, 3.0)]),
    c("CDR_SUM", "CDRSB", "Sum of boxes of the clinical dementia rating", Binned, [(2.0, 1.5), (2.0, 1.5)]),
    c("AGE_YRS", "AGE_MONTHS", "Age of the subject at the visit", Numeric, [(72.0, 8.0), (864.0, 96.0)]),
    c("EDUC", "PTEDUCAT", "Years of formal education completed by the subject", Numeric, [(14.0, 3.0), (14.0, 3.0)]),
    c("SYSBP", "BP_SYS_KPA", "Systolic blood pressure measured at the visit", Numeric, [(130.0, 15.0), (17.3, 2.0)]),
    c("BMI", "BMI_CALC", "Body mass index of the subject", Binned, [(27.0, 4.0), (27.0, 4.0)]),
    c("HDL", "HDL_MMOL", "Level of high density lipoprotein cholesterol in the blood", Numeric, [(55.0, 12.0), (1.42, 0.31)]),
    c("GLUC", "GLUCOSE_FAST", "Fasting glucose level in the blood", Binned, [(100.0, 15.0), (5.55, 0.83)]),
    c("DEP_GDS", "GDTOTAL", "Severity of depressive symptoms on the geriatric depression scale", Binned, [(3.0, 2.0), (3.0, 2.0)]),
    c("SLEEP", "SLEEP_QUAL", "Quality of sleep reported by the subject", Binned, [(0.0, 1.0), (0.0, 1.0)]),
    c("GAIT", "GAIT_SPEED", "Walking speed during the gait test", Numeric, [(1.1, 0.2), (3.96, 0.72)]),
    c("SMELL", "OLF_SCORE", "Score on the smell identification test", Binned, [(30.0, 5.0), (30.0, 5.0)]),
    c("TRAILS_A", "TMT_A", "Time to complete part A of the trail making test", Numeric, [(40.0, 12.0), (0.67, 0.2)]),
    c("TRAILS_B", "TMT_B", "Time to complete part B of the trail making test", Binned, [(100.0, 40.0), (1.67, 0.67)]),
    c("LOGMEM", "LDELTOTAL", "Delayed recall score on the logical memory test", Numeric, [(10.0, 4.0), (10.0, 4.0)]),
    c("DIGIT", "DSPAN", "Number of digits recalled on the digit span test", Binned, [(6.0, 1.5), (6.0, 1.5)]),
    c("NPI_AGIT", "NPIA", "Severity of agitation reported by the informant", Binned, [(0.0, 1.0), (0.0, 1.0)]),
    c("NPI_APATHY", "NPIG", "Severity of apathy reported by the informant", Binned, [(0.0, 1.0), (0.0, 1.0)]),
    c("HEARING", "HEAR_IMP", "History of hearing impairment", Binary, [(0.0, 1.0), (0.0, 1.0)]),
    c("DIABETES", "DIAB_HX", "History of diabetes diagnosis", Binary, [(0.0, 1.0), (0.0, 1.0)]),
    c("STROKE", "CVA_HX", "History of stroke or transient ischemic attack", Binary, [(0.0, 1.0), (0.0, 1.0)]),
    c("SMOKE", "TOB_HX", "History of tobacco smoking", Binary, [(0.0, 1.0), (0.0, 1.0)]),
    c("HYPERTEN", "HTN_HX", "History of high blood pressure diagnosis", Binary, [(0.0, 1.0), (0.0, 1.0)]),
    c("TBI", "HEADINJ", "History of traumatic brain injury", Binary, [(0.0, 1.0), (0.0, 1.0)]),
    c("TREMOR", "TREM_SEV", "Severity of resting tremor on motor examination", Binned, [(0.0, 1.0), (0.0, 1.0)]),
    c("RIGID", "RIGID_SEV", "Severity of rigidity on motor examination", Binned, [(0.0, 1.0), (0.0, 1.0)]),
    c("HIPPO", "HIPPVOL_CM3", "Volume of the hippocampus on brain imaging", Numeric, [(3500.0, 500.0), (3.5, 0.5)]),
    c("WMH", "WMH_LOAD", "Burden of white matter hyperintensities on brain imaging", Binned, [(0.0, 1.0), (0.0, 1.0)]),
    c("FAQ", "FAQTOTAL", "Total score of the functional activities questionnaire", Numeric, [(5.0, 4.0), (5.0, 4.0)]),
    c("NAMING", "BNT", "Score on the picture naming test", Binned, [(26.0, 3.0), (26.0, 3.0)]),
    c("ANIMALS", "CATANIMSC", "Number of animals named in one minute", Numeric, [(18.0, 5.0), (18.0, 5.0)]),
    c("VISION", "VIS_IMP", "History of vision impairment", Binary, [(0.0, 1.0), (0.0, 1.0)]),
];

/// Word-level synonyms used for paraphrasing. "light" rewrites the first
/// listed word found in a description, "heavy" rewrites all of them.
pub const SYNONYMS: &[(&str, &str)] = &[
    ("total", "overall"),
    ("score", "result"),
    ("subject", "participant"),
    ("visit", "assessment"),
    ("level", "concentration"),
    ("blood", "serum"),
    ("severity", "intensity"),
    ("history", "record"),
    ("test", "task"),
    ("examination", "exam"),
    ("reported", "described"),
    ("measured", "recorded"),
    ("number", "count"),
    ("time", "duration"),
    ("symptoms", "signs"),
    ("quality", "adequacy"),
    ("walking", "ambulation"),
    ("speed", "pace"),
    ("volume", "size"),
    ("brain", "cerebral"),
    ("imaging", "scan"),
    ("diagnosis", "condition"),
    ("informant", "caregiver"),
    ("recall", "retrieval"),
    ("memory", "remembering"),
    ("sum", "aggregate"),
    ("rating", "scale"),
    ("years", "duration"),
    ("age", "lifespan"),
    ("body", "physical"),
    ("fasting", "preprandial"),
    ("complete", "finish"),
    ("impairment", "deficit"),
    ("injury", "trauma"),
    ("smoking", "use"),
    ("named", "listed"),
    ("burden", "extent"),
];

const BIN_DISPLAY: [&str; 3] = ["Low", "Normal", "High"];
const BIN_DISPLAY_HEAVY: [&str; 3] = ["Reduced", "Typical", "Elevated"];
const BIN_EDGES: [[f64; 2]; 2] = [[-0.5, 0.5], [-0.3, 0.7]];
const BINARY_THRESHOLD: [f64; 2] = [0.4, 0.6];
const BIN_CODES: [[&str; 3]; 2] = [["1", "2", "3"], ["L", "M", "H"]];
const BINARY_CODES: [[&str; 2]; 2] = [["0", "1"], ["N", "Y"]];
const BINARY_DISPLAY: [[&str; 2]; 2] = [["No", "Yes"], ["Absent", "Present"]];

fn match_case(template: &str, word: &str) -> String {
    if template.chars().next().is_some_and(char::is_uppercase) {
        let mut c = word.chars();
        c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
    } else {
        word.to_string()
    }
}

/// Rewrite `text` at `level` using [`SYNONYMS`].
pub fn paraphrase(text: &str, level: Paraphrase) -> String {
    if level == Paraphrase::Identical {
        return text.to_string();
    }
    let words: Vec<&str> = text.split(' ').collect();
    let lookup = |w: &str| SYNONYMS.iter().find(|(a, _)| *a == w.to_lowercase()).map(|(_, b)| *b);
    let mut done = false;
    words
        .iter()
        .map(|w| match lookup(w) {
            Some(s) if level == Paraphrase::Heavy || !done => {
                done = true;
                match_case(w, s)
            }
            _ => w.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub source_name: String,
    pub target_name: String,
    pub source_kind: FeatureKind,
    pub target_kind: FeatureKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    /// `L x F` logistic coefficients.
    pub coefficients: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub prevalence: Vec<f64>,
    pub features: Vec<FeatureSpec>,
    pub visit_noise: f64,
    pub missing_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkPair {
    pub source: DatasetMatrix,
    pub target: DatasetMatrix,
    pub latent: LatentSpec,
    pub paraphrase: Paraphrase,
    pub seed: u64,
    /// Per-row latent vectors, aligned with the rows of each side.
    pub source_z: Vec<Vec<f64>>,
    pub target_z: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct PairMeta {
    seed: u64,
    paraphrase: Paraphrase,
    latent: LatentSpec,
    source_z: Vec<Vec<f64>>,
    target_z: Vec<Vec<f64>>,
}

impl BenchmarkPair {
    /// Writes `{source,target}/{schema.json,data.csv}` and `pair.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let write = |path: PathBuf, text: &str| fs::write(&path, text).map_err(|e| Error::io(&path, e));
        for (side, data) in [("source", &self.source), ("target", &self.target)] {
            let d = dir.join(side);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            write(d.join("schema.json"), &data.schema.to_json())?;
            write(d.join("data.csv"), &data.to_csv())?;
        }
        let meta = PairMeta {
            seed: self.seed,
            paraphrase: self.paraphrase,
            latent: self.latent.clone(),
            source_z: self.source_z.clone(),
            target_z: self.target_z.clone(),
        };
        write(dir.join("pair.json"), &serde_json::to_string(&meta).expect("pair metadata serializes"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |path: PathBuf| fs::read_to_string(&path).map_err(|e| Error::io(&path, e));
        let side = |name: &str| -> Result<DatasetMatrix> {
            let schema = parse_schema(&read(dir.join(name).join("schema.json"))?)?;
            parse_dataset(&read(dir.join(name).join("data.csv"))?, &schema)
        };
        let meta: PairMeta =
            serde_json::from_str(&read(dir.join("pair.json"))?).map_err(|e| Error::parse("pair.json", e))?;
        Ok(BenchmarkPair {
            source: side("source")?,
            target: side("target")?,
            latent: meta.latent,
            paraphrase: meta.paraphrase,
            seed: meta.seed,
            source_z: meta.source_z,
            target_z: meta.target_z,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub n_features: usize,
    pub num_labels: usize,
    pub paraphrase: Paraphrase,
    /// Prevalence of label 0; the others are drawn from `common_prevalence`.
    pub rare_prevalence: f64,
    pub common_prevalence: (f64, f64),
    /// Features feeding each label.
    pub features_per_label: usize,
    pub coefficient_range: (f64, f64),
    /// Share of features whose kind flips between numeric and binned.
    pub kind_switch_rate: f64,
    pub visit_noise: f64,
    pub missing_rate: f64,
    pub max_visits: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_source: 4000,
            n_target: 1000,
            n_features: 24,
            num_labels: 6,
            paraphrase: Paraphrase::Light,
            rare_prevalence: 0.05,
            common_prevalence: (0.2, 0.45),
            features_per_label: 4,
            coefficient_range: (2.0, 3.0),
            kind_switch_rate: 0.2,
            visit_noise: 0.2,
            missing_rate: 0.05,
            max_visits: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_features < 4 {
            return Err(Error::Precondition(format!("n_features must be at least 4, got {}", self.n_features)));
        }
        if self.num_labels < 2 {
            return Err(Error::Precondition(format!("at least 2 labels required, got {}", self.num_labels)));
        }
        if self.n_source == 0 || self.n_target == 0 {
            return Err(Error::Precondition("n_source and n_target must be positive".into()));
        }
        let (lo, hi) = self.common_prevalence;
        for p in [self.rare_prevalence, lo, hi] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Validation(format!("infeasible prevalence {p}: must lie strictly in (0, 1)")));
            }
        }
        if lo > hi {
            return Err(Error::Validation(format!("common_prevalence range ({lo}, {hi}) is reversed")));
        }
        if self.features_per_label == 0 || self.features_per_label > self.n_features {
            return Err(Error::Validation(format!(
                "features_per_label must lie in 1..={}, got {}",
                self.n_features, self.features_per_label
            )));
        }
        if !(0.0..1.0).contains(&self.missing_rate) || !(0.0..=1.0).contains(&self.kind_switch_rate) {
            return Err(Error::Validation("missing_rate and kind_switch_rate must be rates".into()));
        }
        if self.max_visits == 0 || !(self.visit_noise >= 0.0) {
            return Err(Error::Validation("max_visits must be positive and visit_noise non-negative".into()));
        }
        Ok(())
    }
}

/// `E[sigmoid(s + b)]` for `s ~ N(0, sd^2)`.
fn expected_prevalence(sd: f64, b: f64) -> f64 {
    let n = 801;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let t = -8.0 + 16.0 * i as f64 / (n - 1) as f64;
        let w = (-0.5 * t * t).exp();
        num += w * crate::autodiff::sigmoid(sd * t + b);
        den += w;
    }
    num / den
}

/// Intercept giving `prevalence` for a logit with standard deviation `sd`.
fn solve_bias(sd: f64, prevalence: f64) -> f64 {
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_prevalence(sd, mid) < prevalence {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

struct Side<'a> {
    which: usize,
    features: &'a [(&'a Concept, FeatureSpec)],
    paraphrase: Paraphrase,
}

impl Side<'_> {
    fn kind(&self, f: usize) -> FeatureKind {
        let s = &self.features[f].1;
        if self.which == 0 {
            s.source_kind
        } else {
            s.target_kind
        }
    }

    fn level(&self) -> Paraphrase {
        if self.which == 0 {
            Paraphrase::Identical
        } else {
            self.paraphrase
        }
    }

    fn schema(&self, num_labels: usize) -> SchemaDescriptor {
        let level = self.level();
        let heavy = level == Paraphrase::Heavy;
        let columns = self
            .features
            .iter()
            .enumerate()
            .map(|(f, (concept, spec))| {
                let name = if self.which == 0 { &spec.source_name } else { &spec.target_name };
                let desc = paraphrase(concept.description, level);
                match self.kind(f) {
                    FeatureKind::Numeric => ColumnSpec::numerical(name.clone(), desc, 0.0, 0.0),
                    FeatureKind::Binned => {
                        let shown = if heavy { BIN_DISPLAY_HEAVY } else { BIN_DISPLAY };
                        ColumnSpec::categorical(
                            name.clone(),
                            desc,
                            (0..3).map(|i| (BIN_CODES[self.which][i].to_string(), shown[i].to_string())),
                        )
                    }
                    FeatureKind::Binary => {
                        let shown = BINARY_DISPLAY[heavy as usize];
                        ColumnSpec::categorical(
                            name.clone(),
                            desc,
                            (0..2).map(|i| (BINARY_CODES[self.which][i].to_string(), shown[i].to_string())),
                        )
                    }
                }
            })
            .collect();
        SchemaDescriptor {
            columns,
            subject_id_column: if self.which == 0 { "SUBJECT_ID" } else { "RID" }.into(),
            label_columns: label_names(num_labels),
        }
    }

    fn cell(&self, f: usize, z: f64, schema: &SchemaDescriptor) -> Cell {
        let (mean, sd) = self.features[f].0.units[self.which];
        let spec = &schema.columns[f];
        let pick = |i: usize| {
            let (code, display) = spec.vocabulary.get_index(i).expect("code exists");
            Cell::Categorical {
                code: code.clone(),
                display: display.clone(),
            }
        };
        match self.kind(f) {
            FeatureKind::Numeric => Cell::Numerical(((mean + sd * z) * 1e4).round() / 1e4),
            FeatureKind::Binned => {
                let [a, b] = BIN_EDGES[self.which];
                pick(if z < a { 0 } else if z < b { 1 } else { 2 })
            }
            FeatureKind::Binary => pick((z > BINARY_THRESHOLD[self.which]) as usize),
        }
    }
}

pub fn label_names(num_labels: usize) -> Vec<String> {
    (0..num_labels).map(|k| format!("label_{k}")).collect()
}

/// Build a benchmark pair. Label 0 is the rare label.
pub fn generate_pair(config: &GeneratorConfig, seed: u64) -> Result<BenchmarkPair> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f_n, l) = (config.n_features, config.num_labels);

    let mut order: Vec<usize> = (0..CONCEPTS.len()).collect();
    order.shuffle(&mut rng);
    let features: Vec<(&Concept, FeatureSpec)> = (0..f_n)
        .map(|f| {
            let concept = &CONCEPTS[order[f % CONCEPTS.len()]];
            let round = f / CONCEPTS.len();
            let suffix = if round == 0 { String::new() } else { format!("_{}", round + 1) };
            let switch = rng.random::<f64>() < config.kind_switch_rate;
            let target_kind = match (concept.kind, switch) {
                (FeatureKind::Numeric, true) => FeatureKind::Binned,
                (FeatureKind::Binned, true) => FeatureKind::Numeric,
                (k, _) => k,
            };
            (
                concept,
                FeatureSpec {
                    source_name: format!("{}{suffix}", concept.source),
                    target_name: format!("{}{suffix}", concept.target),
                    source_kind: concept.kind,
                    target_kind,
                },
            )
        })
        .collect();

    let (c_lo, c_hi) = config.coefficient_range;
    let mut coefficients = vec![vec![0.0; f_n]; l];
    let mut prevalence = Vec::with_capacity(l);
    let mut bias = Vec::with_capacity(l);
    for (k, row) in coefficients.iter_mut().enumerate() {
        let mut idx: Vec<usize> = (0..f_n).collect();
        idx.shuffle(&mut rng);
        for &f in &idx[..config.features_per_label] {
            let mag = c_lo + (c_hi - c_lo) * rng.random::<f64>();
            row[f] = if rng.random::<bool>() { mag } else { -mag };
        }
        let p = if k == 0 {
            config.rare_prevalence
        } else {
            let (lo, hi) = config.common_prevalence;
            lo + (hi - lo) * rng.random::<f64>()
        };
        let sd = row.iter().map(|w| w * w).sum::<f64>().sqrt();
        prevalence.push(p);
        bias.push(solve_bias(sd, p));
    }
    let latent = LatentSpec {
        coefficients,
        bias,
        prevalence,
        features: features.iter().map(|(_, s)| s.clone()).collect(),
        visit_noise: config.visit_noise,
        missing_rate: config.missing_rate,
    };

    let mut sides = Vec::with_capacity(2);
    for (which, n) in [(0usize, config.n_source), (1, config.n_target)] {
        let side = Side {
            which,
            features: &features,
            paraphrase: config.paraphrase,
        };
        let mut schema = side.schema(l);
        let prefix = if which == 0 { "S" } else { "T" };
        let mut rows = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        let mut subject = 0usize;
        while rows.len() < n {
            subject += 1;
            let id = format!("{prefix}{subject:05}");
            let z: Vec<f64> = (0..f_n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let labels: Vec<Option<bool>> = (0..l)
                .map(|k| {
                    let s: f64 = latent.coefficients[k].iter().zip(&z).map(|(w, v)| w * v).sum();
                    Some(rng.random::<f64>() < crate::autodiff::sigmoid(s + latent.bias[k]))
                })
                .collect();
            let visits = rng.random_range(1..=config.max_visits);
            for _ in 0..visits {
                if rows.len() == n {
                    break;
                }
                let zv: Vec<f64> = z
                    .iter()
                    .map(|v| v + config.visit_noise * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect();
                let cells = (0..f_n)
                    .map(|f| {
                        let missing = rng.random::<f64>() < config.missing_rate;
                        if missing {
                            Cell::Missing
                        } else {
                            side.cell(f, zv[f], &schema)
                        }
                    })
                    .collect();
                rows.push(Row {
                    subject_id: id.clone(),
                    cells,
                    labels: labels.clone(),
                });
                zs.push(zv);
            }
        }
        let mut data = DatasetMatrix { rows, schema: schema.clone() };
        // Every row is available to describe its own schema's units.
        schema = compute_numeric_stats(&data, &(0..n).collect::<Vec<_>>())?;
        data.schema = schema;
        data.validate()?;
        sides.push((data, zs));
    }
    let (target, target_z) = sides.pop().expect("two sides");
    let (source, source_z) = sides.pop().expect("two sides");
    Ok(BenchmarkPair {
        source,
        target,
        latent,
        paraphrase: config.paraphrase,
        seed,
        source_z,
        target_z,
    })
}
