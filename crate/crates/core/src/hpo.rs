//! Random search over per-model hyperparameter grids, selecting the trial
//! with the highest validation Recall@3.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::eval::{evaluate, EvalConfig, EvalError, EvalReport};
use crate::models::{
    Activation, GruConfig, MlpConfig, ModelConfig, ModelKind, NarmConfig, Ranker, TransformerConfig,
};
use crate::training::{train, RunManifest, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum HpoError {
    #[error("config: {0}")]
    Config(String),
    #[error("all {0} trials diverged")]
    AllDiverged(usize),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One grid coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Real(f64),
    Cat(String),
}

/// A named dimension: integer range, stepped real range (both endpoints
/// included) or categorical set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Dim {
    Int { name: String, lo: i64, hi: i64, step: i64 },
    Real { name: String, lo: f64, hi: f64, step: f64 },
    Cat { name: String, values: Vec<String> },
}

/// Reals on a grid are rounded to this many decimals so `0.1 + 3 * 0.05`
/// reads back as `0.25`.
fn round_grid(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

impl Dim {
    fn int(name: &str, lo: i64, hi: i64, step: i64) -> Self {
        Dim::Int { name: name.into(), lo, hi, step }
    }

    fn real(name: &str, lo: f64, hi: f64, step: f64) -> Self {
        Dim::Real { name: name.into(), lo, hi, step }
    }

    fn cat(name: &str, values: &[&str]) -> Self {
        Dim::Cat {
            name: name.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Dim::Int { name, .. } | Dim::Real { name, .. } | Dim::Cat { name, .. } => name,
        }
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        match self {
            Dim::Int { lo, hi, step, .. } if *step > 0 && hi >= lo => ((hi - lo) / step + 1) as usize,
            Dim::Real { lo, hi, step, .. } if *step > 0.0 && hi >= lo => ((hi - lo) / step + 1e-9).floor() as usize + 1,
            Dim::Cat { values, .. } => values.len(),
            _ => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `i`-th grid point (`i < len()`).
    pub fn value(&self, i: usize) -> Value {
        match self {
            Dim::Int { lo, step, .. } => Value::Int(lo + step * i as i64),
            Dim::Real { lo, step, .. } => Value::Real(round_grid(lo + step * i as f64)),
            Dim::Cat { values, .. } => Value::Cat(values[i].clone()),
        }
    }

    pub fn contains(&self, v: &Value) -> bool {
        (0..self.len()).any(|i| self.value(i) == *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub kind: ModelKind,
    pub dims: Vec<Dim>,
}

pub type Point = BTreeMap<String, Value>;

impl ParamSpace {
    /// The search grid of each model; POP, Markov and LR have no
    /// hyperparameters. Transformer width is `heads * head_size`.
    pub fn for_model(kind: ModelKind) -> Self {
        let dropout = |name: &str| Dim::real(name, 0.1, 0.5, 0.05);
        let dims = match kind {
            ModelKind::Pop | ModelKind::Markov | ModelKind::Lr => vec![],
            ModelKind::Mlp => vec![Dim::int("hidden", 16, 256, 16), Dim::int("layers", 1, 3, 1)],
            ModelKind::Sasrec | ModelKind::Bert4rec => vec![
                Dim::int("heads", 1, 8, 1),
                Dim::int("layers", 1, 6, 1),
                Dim::int("head_size", 8, 32, 1),
                dropout("dropout"),
                Dim::cat("activation", &["relu", "tanh"]),
            ],
            ModelKind::Gru => vec![
                Dim::int("emb", 16, 64, 16),
                Dim::int("cell", 16, 256, 16),
                Dim::int("layers", 1, 2, 1),
                dropout("dropout"),
            ],
            ModelKind::Narm => vec![
                Dim::int("emb", 16, 64, 16),
                Dim::int("enc", 16, 256, 16),
                Dim::int("layers", 1, 2, 1),
                dropout("ctx_dropout"),
                dropout("emb_dropout"),
            ],
        };
        Self { kind, dims }
    }

    pub fn validate(&self) -> Result<(), HpoError> {
        match self.dims.iter().find(|d| d.is_empty()) {
            Some(d) => Err(HpoError::Config(format!("dimension {} has an empty grid", d.name()))),
            None => Ok(()),
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.len() == self.dims.len() && self.dims.iter().all(|d| p.get(d.name()).is_some_and(|v| d.contains(v)))
    }
}

/// Independent uniform draw per dimension.
pub fn sample_config<R: Rng>(space: &ParamSpace, rng: &mut R) -> Point {
    space
        .dims
        .iter()
        .map(|d| (d.name().to_string(), d.value(rng.random_range(0..d.len()))))
        .collect()
}

/// Builds the model configuration a point of `kind`'s space describes.
pub fn config_from_point(kind: ModelKind, p: &Point) -> Result<ModelConfig, HpoError> {
    let missing = |name: &str| HpoError::Config(format!("point lacks {name}"));
    let int = |name: &str| match p.get(name) {
        Some(Value::Int(v)) if *v > 0 => Ok(*v as usize),
        Some(v) => Err(HpoError::Config(format!("{name} = {v:?} is not a positive integer"))),
        None => Err(missing(name)),
    };
    let real = |name: &str| match p.get(name) {
        Some(Value::Real(v)) => Ok(*v),
        Some(Value::Int(v)) => Ok(*v as f64),
        Some(v) => Err(HpoError::Config(format!("{name} = {v:?} is not a number"))),
        None => Err(missing(name)),
    };
    let transformer = || -> Result<TransformerConfig, HpoError> {
        let activation = match p.get("activation") {
            Some(Value::Cat(a)) if a == "relu" => Activation::Relu,
            Some(Value::Cat(a)) if a == "tanh" => Activation::Tanh,
            Some(v) => return Err(HpoError::Config(format!("unknown activation {v:?}"))),
            None => return Err(missing("activation")),
        };
        Ok(TransformerConfig {
            heads: int("heads")?,
            layers: int("layers")?,
            head_size: int("head_size")?,
            dropout: real("dropout")?,
            activation,
        })
    };
    let config = match kind {
        ModelKind::Pop => ModelConfig::Pop,
        ModelKind::Markov => ModelConfig::Markov,
        ModelKind::Lr => ModelConfig::Lr,
        ModelKind::Mlp => ModelConfig::Mlp(MlpConfig {
            hidden: int("hidden")?,
            layers: int("layers")?,
        }),
        ModelKind::Gru => ModelConfig::Gru(GruConfig {
            emb: int("emb")?,
            cell: int("cell")?,
            layers: int("layers")?,
            dropout: real("dropout")?,
        }),
        ModelKind::Narm => ModelConfig::Narm(NarmConfig {
            emb: int("emb")?,
            enc: int("enc")?,
            layers: int("layers")?,
            ctx_dropout: real("ctx_dropout")?,
            emb_dropout: real("emb_dropout")?,
        }),
        ModelKind::Sasrec => ModelConfig::Sasrec(transformer()?),
        ModelKind::Bert4rec => ModelConfig::Bert4rec(transformer()?),
    };
    config.validate().map_err(|e| HpoError::Config(e.to_string()))?;
    Ok(config)
}

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `id` under `master`; seeds of distinct trials are
/// decorrelated.
pub fn trial_seed(master: u64, id: usize) -> u64 {
    mix(mix(master) ^ id as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub trials: usize,
    pub master_seed: u64,
    /// Training settings shared by all trials (`seed` is replaced per trial).
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Concurrent trials; 1 runs them one after another.
    pub jobs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            trials: 30,
            master_seed: 0,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: usize,
    pub point: Point,
    pub config: ModelConfig,
    pub seed: u64,
    pub manifest: RunManifest,
    /// Best validation Recall@3; `None` when training diverged.
    pub val_recall_at_3: Option<f64>,
}

/// The search summary persisted next to the manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub space: ParamSpace,
    pub master_seed: u64,
    pub trials: Vec<Trial>,
    pub best_trial: usize,
    pub test_metrics: EvalReport,
}

pub struct SearchOutcome {
    pub summary: SearchSummary,
    pub best_ranker: Ranker,
}

impl SearchOutcome {
    pub fn best(&self) -> &Trial {
        &self.summary.trials[self.summary.best_trial]
    }
}

/// Index of the best trial: highest validation Recall@3, earliest id on
/// ties, diverged trials never selected.
pub fn select_best(trials: &[Trial]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in trials.iter().enumerate() {
        if let Some(s) = t.val_recall_at_3 {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn run_trial(
    kind: ModelKind,
    id: usize,
    point: Point,
    cfg: &SearchConfig,
    train_split: &Dataset,
    val: &Dataset,
) -> Result<(Trial, Option<Ranker>), HpoError> {
    let config = config_from_point(kind, &point)?;
    let seed = trial_seed(cfg.master_seed, id);
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    let (manifest, ranker) = match train(&config, &tc, train_split, val) {
        Ok((r, m)) => (m, Some(r)),
        Err(TrainError::Diverged(m)) => (*m, None),
        Err(e) => return Err(e.into()),
    };
    let val_recall_at_3 = ranker
        .as_ref()
        .map(|_| manifest.val_recall_at_3.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    Ok((
        Trial {
            id,
            point,
            config,
            seed,
            manifest,
            val_recall_at_3,
        },
        ranker,
    ))
}

/// Trains `cfg.trials` sampled configurations, selects the best by
/// validation Recall@3 and evaluates only that one on `test`.
pub fn run_search(
    kind: ModelKind,
    cfg: &SearchConfig,
    train_split: &Dataset,
    val: &Dataset,
    test: &Dataset,
) -> Result<SearchOutcome, HpoError> {
    if cfg.trials == 0 || cfg.jobs == 0 {
        return Err(HpoError::Config("trials and jobs must be positive".into()));
    }
    cfg.eval.validate()?;
    let space = ParamSpace::for_model(kind);
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    let points: Vec<Point> = (0..cfg.trials).map(|_| sample_config(&space, &mut rng)).collect();

    let run = |(id, p): (usize, Point)| run_trial(kind, id, p, cfg, train_split, val);
    let results: Vec<(Trial, Option<Ranker>)> = if cfg.jobs == 1 {
        points.into_iter().enumerate().map(run).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| HpoError::Config(e.to_string()))?;
        pool.install(|| points.into_par_iter().enumerate().map(run).collect::<Result<_, _>>())?
    };

    let (mut trials, rankers): (Vec<Trial>, Vec<Option<Ranker>>) = results.into_iter().unzip();
    let best = select_best(&trials).ok_or(HpoError::AllDiverged(cfg.trials))?;
    let best_ranker = rankers.into_iter().nth(best).flatten().expect("selected trial has a ranker");
    let test_metrics = evaluate(&best_ranker, test, &cfg.eval)?;
    trials[best].manifest.test_metrics = Some(test_metrics.clone());
    Ok(SearchOutcome {
        summary: SearchSummary {
            space,
            master_seed: cfg.master_seed,
            trials,
            best_trial: best,
            test_metrics,
        },
        best_ranker,
    })
}
