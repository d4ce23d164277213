//! Generational evolutionary search with a hardware admissibility gate.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{check_constraints, Architecture, BnAccounting, HwCost, HwThresholds};
use crate::engine::{derive_seed, multi_start_train, EngineError, TrainConfig};
use crate::session::Dataset;
use crate::space::{spawn_admissible, SearchSpaceConfig, SpaceError};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "flownas-search";
const CHILD_SEED_SALT: u64 = 0x6368_696c_6473_6565;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub n_generations: usize,
    pub children_per_generation: usize,
    pub thresholds: HwThresholds,
    pub bn_accounting: BnAccounting,
    pub space: SearchSpaceConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Mutation attempts allowed per generation; `None` means 1000 per child.
    pub spawn_cap: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n_generations: 100,
            children_per_generation: 10,
            thresholds: HwThresholds::DEFAULT,
            bn_accounting: BnAccounting::default(),
            space: SearchSpaceConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            spawn_cap: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.n_generations == 0 || self.children_per_generation == 0 {
            return Err(SearchError::InvalidConfig(
                "n_generations and children_per_generation must be positive".into(),
            ));
        }
        self.thresholds.validate().map_err(SearchError::InvalidConfig)?;
        self.space.validate().map_err(SearchError::InvalidConfig)?;
        self.train.validate()?;
        Ok(())
    }
}

/// Validation score of one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

/// Scores admissible candidates. Implementations must be deterministic in `seed`.
pub trait Evaluator: Sync {
    fn evaluate(&self, arch: &Architecture, seed: u64) -> Result<Evaluation, SearchError>;
}

/// Multi-start training on a fixed train/validation split.
pub struct TrainerEvaluator<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub cfg: TrainConfig,
}

impl Evaluator for TrainerEvaluator<'_> {
    fn evaluate(&self, arch: &Architecture, seed: u64) -> Result<Evaluation, SearchError> {
        let cfg = TrainConfig {
            seed,
            ..self.cfg.clone()
        };
        let out = multi_start_train(arch, self.train, self.val, &cfg)?;
        Ok(Evaluation {
            val_accuracy: out.val_accuracy,
            val_loss: out.val_loss,
            seconds: out.seconds,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildRecord {
    /// Global id: `generation * children_per_generation + index`.
    pub id: usize,
    pub architecture: Architecture,
    pub cost: HwCost,
    pub seed: u64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub children: Vec<ChildRecord>,
    pub attempts: usize,
    pub rejected: usize,
    /// Child id of the parent these children were mutated from; `None` for the initial architecture.
    pub parent_id: Option<usize>,
    pub best_child_id: usize,
    pub new_global_best: bool,
    /// Global best validation accuracy after this generation.
    pub best_val_accuracy: f64,
}

impl GenerationRecord {
    pub fn mean_val_accuracy(&self) -> f64 {
        self.children.iter().map(|c| c.val_accuracy).sum::<f64>() / self.children.len() as f64
    }

    pub fn child(&self, id: usize) -> Option<&ChildRecord> {
        self.children.iter().find(|c| c.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub initial: Architecture,
    pub parent: Architecture,
    pub parent_id: Option<usize>,
    /// Best child so far. The initial architecture is never scored, so this is
    /// `None` until the first generation completes.
    pub best: Option<ChildRecord>,
    pub generations: Vec<GenerationRecord>,
    #[serde(with = "rng_serde")]
    pub rng: ChaCha8Rng,
}

impl SearchState {
    pub fn new(initial: Architecture, seed: u64) -> Self {
        Self {
            parent: initial.clone(),
            initial,
            parent_id: None,
            best: None,
            generations: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// The architecture currently held as a*.
    pub fn best_architecture(&self) -> &Architecture {
        self.best.as_ref().map(|b| &b.architecture).unwrap_or(&self.initial)
    }

    pub fn children(&self) -> impl Iterator<Item = &ChildRecord> {
        self.generations.iter().flat_map(|g| g.children.iter())
    }

    /// Copy with all wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut s = self.clone();
        for g in &mut s.generations {
            for c in &mut g.children {
                c.train_seconds = 0.0;
            }
        }
        if let Some(b) = &mut s.best {
            b.train_seconds = 0.0;
        }
        s
    }
}

mod rng_serde {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct RngState {
        seed: String,
        stream: u64,
        word_pos: String,
    }

    fn hex(bytes: &[u8]) -> String {
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn serialize<S: Serializer>(rng: &ChaCha8Rng, s: S) -> Result<S::Ok, S::Error> {
        RngState {
            seed: hex(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ChaCha8Rng, D::Error> {
        use serde::de::Error;
        let st = RngState::deserialize(d)?;
        if st.seed.len() != 64 {
            return Err(D::Error::custom("rng seed must be 32 hex bytes"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&st.seed[2 * i..2 * i + 2], 16).map_err(D::Error::custom)?;
        }
        let word_pos: u128 = st.word_pos.parse().map_err(D::Error::custom)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(st.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

/// Index of the best `(accuracy, loss)` pair: highest accuracy, then lowest loss, then lowest index.
fn best_index(children: &[ChildRecord]) -> usize {
    let mut best = 0;
    for (i, c) in children.iter().enumerate().skip(1) {
        let b = &children[best];
        if c.val_accuracy > b.val_accuracy || (c.val_accuracy == b.val_accuracy && c.val_loss < b.val_loss) {
            best = i;
        }
    }
    best
}

/// Runs one generation: spawn, score, select the next parent, update a*.
///
/// On error the state is left untouched.
pub fn step<E: Evaluator + ?Sized>(
    state: &mut SearchState,
    cfg: &SearchConfig,
    evaluator: &E,
) -> Result<(), SearchError> {
    let generation = state.generations.len();
    let n = cfg.children_per_generation;
    let mut rng = state.rng.clone();
    let spawned = spawn_admissible(
        &state.parent,
        &cfg.space,
        &cfg.thresholds,
        cfg.bn_accounting,
        n,
        cfg.spawn_cap,
        &mut rng,
    )?;
    let jobs: Vec<(usize, Architecture, HwCost, u64)> = spawned
        .children
        .into_iter()
        .enumerate()
        .map(|(i, (a, c))| {
            let id = generation * n + i;
            (id, a, c, derive_seed(cfg.seed ^ CHILD_SEED_SALT, id as u64))
        })
        .collect();
    let scores: Vec<Result<Evaluation, SearchError>> = jobs
        .par_iter()
        .map(|(_, a, _, seed)| evaluator.evaluate(a, *seed))
        .collect();
    let mut children = Vec::with_capacity(n);
    for ((id, architecture, cost, seed), score) in jobs.into_iter().zip(scores) {
        let e = score?;
        children.push(ChildRecord {
            id,
            architecture,
            cost,
            seed,
            val_accuracy: e.val_accuracy,
            val_loss: e.val_loss,
            train_seconds: e.seconds,
        });
    }

    let winner = children[best_index(&children)].clone();
    let new_global_best = match &state.best {
        None => true,
        Some(b) => winner.val_accuracy > b.val_accuracy,
    };
    let parent_id = state.parent_id;
    state.rng = rng;
    state.parent = winner.architecture.clone();
    state.parent_id = Some(winner.id);
    if new_global_best {
        state.best = Some(winner.clone());
    }
    let best_val_accuracy = state
        .best
        .as_ref()
        .map(|b| b.val_accuracy)
        .unwrap_or(winner.val_accuracy);
    state.generations.push(GenerationRecord {
        generation,
        children,
        attempts: spawned.attempts,
        rejected: spawned.rejected.len(),
        parent_id,
        best_child_id: winner.id,
        new_global_best,
        best_val_accuracy,
    });
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Checkpoint written after every generation.
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines log, one record appended per generation.
    pub log: Option<PathBuf>,
    /// Stop once this many generations exist in the state.
    pub stop_after: Option<usize>,
}

/// Continues `state` until `cfg.n_generations` (or `opts.stop_after`) generations exist.
pub fn run_search<E: Evaluator + ?Sized>(
    cfg: &SearchConfig,
    evaluator: &E,
    mut state: SearchState,
    opts: &RunOptions,
) -> Result<SearchState, SearchError> {
    cfg.validate()?;
    let target = opts.stop_after.map_or(cfg.n_generations, |k| k.min(cfg.n_generations));
    while state.generations.len() < target {
        step(&mut state, cfg, evaluator)?;
        if let Some(path) = &opts.log {
            append_log(path, state.generations.last().expect("generation just recorded"))?;
        }
        if let Some(path) = &opts.checkpoint {
            save_checkpoint(path, cfg, &state)?;
        }
    }
    Ok(state)
}

/// Fresh search from `initial` (or the search-space default when `None`).
pub fn search<E: Evaluator + ?Sized>(
    cfg: &SearchConfig,
    evaluator: &E,
    input_len: usize,
    n_classes: usize,
    initial: Option<Architecture>,
    opts: &RunOptions,
) -> Result<SearchState, SearchError> {
    let initial = initial.unwrap_or_else(|| cfg.space.initial_architecture(input_len, n_classes));
    if !check_constraints(&initial, &cfg.thresholds, cfg.bn_accounting).is_admissible() {
        return Err(SearchError::InvalidConfig(
            "initial architecture violates the hardware constraints".into(),
        ));
    }
    run_search(cfg, evaluator, SearchState::new(initial, cfg.seed), opts)
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: SearchConfig,
    state: SearchState,
}

pub fn save_checkpoint(path: &Path, cfg: &SearchConfig, state: &SearchState) -> Result<(), SearchError> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        state: state.clone(),
    };
    let text = serde_json::to_string(&file).map_err(|e| SearchError::CorruptCheckpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn parse_checkpoint(text: &str) -> Result<(SearchConfig, SearchState), SearchError> {
    let corrupt = |m: String| SearchError::CorruptCheckpoint(m);
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
    if value.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(corrupt("not a search checkpoint".into()));
    }
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => {
            return Err(corrupt(format!(
                "checkpoint version {v}, this build reads version {CHECKPOINT_VERSION}"
            )))
        }
        None => return Err(corrupt("missing checkpoint version".into())),
    }
    let file: CheckpointFile = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    Ok((file.config, file.state))
}

pub fn load_checkpoint(path: &Path) -> Result<(SearchConfig, SearchState), SearchError> {
    parse_checkpoint(&fs::read_to_string(path)?)
}

fn append_log(path: &Path, record: &GenerationRecord) -> Result<(), SearchError> {
    let line = serde_json::to_string(record).map_err(|e| SearchError::Io(io::Error::other(e)))?;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub generation: usize,
    pub best_val_acc: f64,
    pub mean_val_acc: f64,
    pub new_best: bool,
}

pub fn export_curve(state: &SearchState) -> Vec<CurveRow> {
    state
        .generations
        .iter()
        .map(|g| CurveRow {
            generation: g.generation,
            best_val_acc: g.best_val_accuracy,
            mean_val_acc: g.mean_val_accuracy(),
            new_best: g.new_global_best,
        })
        .collect()
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("generation,best_val_acc,mean_val_acc,new_best\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.generation, r.best_val_acc, r.mean_val_acc, r.new_best
        ));
    }
    out
}
