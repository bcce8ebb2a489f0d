//! Recipe runner: executes a back-end chain described by a flat text file,
//! one stage per line (`stage key=value ...`), persisting every fitted
//! artifact and score set into a work directory under content-hashed names.
//!
//! Roles (train / enroll / test / trials / cohort / indomain) bind either
//! through an `inputs role=path ...` line at the top of the recipe (paths
//! relative to the recipe file) or programmatically via
//! [`RecipeOptions::roles`], which takes precedence.
//!
//! ```text
//! inputs train=train.emb enroll=enroll.emb test=test.emb trials=key.txt indomain=adapt.emb
//! center fallback=global_mean
//! lda dim=16
//! coral ridge=1e-3
//! lengthnorm
//! plda iters=20
//! calibrate prior=0.01
//! evaluate profile=cmn2
//! ```

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::calibration;
use crate::data::io::{self, EmbFormat};
use crate::data::{EmbeddingSet, ScoreSet, TrialList};
use crate::error::{Error, Result};
use crate::metrics::{self, CostParams};
use crate::plda::{self, PldaScorer};
use crate::scoring::{self, AsNormConfig, AsNormVariant, Cohort, CosineScorer, PairScorer};
use crate::transforms::{self, CenterFallback};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Train,
    Enroll,
    Test,
    Trials,
    Cohort,
    Indomain,
}

impl Role {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Role::Train),
            "enroll" => Ok(Role::Enroll),
            "test" => Ok(Role::Test),
            "trials" => Ok(Role::Trials),
            "cohort" => Ok(Role::Cohort),
            "indomain" | "indomain-unlabeled" => Ok(Role::Indomain),
            other => Err(Error::Recipe(format!("unknown input role '{other}'"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Enroll => "enroll",
            Role::Test => "test",
            Role::Trials => "trials",
            Role::Cohort => "cohort",
            Role::Indomain => "indomain",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Center { fallback: CenterFallback },
    Lda { dim: usize },
    Lsda { dim: usize, k_neighbors: usize, alpha: f64 },
    Coral { ridge: f64 },
    Whiten { ridge: f64 },
    LengthNorm,
    Plda { iters: usize, seed: u64 },
    Cosine,
    AsNorm { variant: AsNormVariant, top_k: Option<usize> },
    Calibrate { prior: f64 },
    Fuse { extra_scores: Vec<PathBuf> },
    Evaluate { profile: CostParams },
}

impl Stage {
    fn name(&self) -> &'static str {
        match self {
            Stage::Center { .. } => "center",
            Stage::Lda { .. } => "lda",
            Stage::Lsda { .. } => "lsda",
            Stage::Coral { .. } => "coral",
            Stage::Whiten { .. } => "whiten",
            Stage::LengthNorm => "lengthnorm",
            Stage::Plda { .. } => "plda",
            Stage::Cosine => "cosine",
            Stage::AsNorm { variant: AsNormVariant::AsNorm1, .. } => "asnorm1",
            Stage::AsNorm { variant: AsNormVariant::AsNorm2, .. } => "asnorm2",
            Stage::Calibrate { .. } => "calibrate",
            Stage::Fuse { .. } => "fuse",
            Stage::Evaluate { .. } => "evaluate",
        }
    }

    fn is_scorer(&self) -> bool {
        matches!(self, Stage::Plda { .. } | Stage::Cosine)
    }

    fn is_transform(&self) -> bool {
        matches!(
            self,
            Stage::Center { .. }
                | Stage::Lda { .. }
                | Stage::Lsda { .. }
                | Stage::Coral { .. }
                | Stage::Whiten { .. }
                | Stage::LengthNorm
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    pub inputs: HashMap<Role, PathBuf>,
    pub stages: Vec<Stage>,
}

fn parse_kv(tokens: &[&str], line_no: usize) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for tok in tokens {
        let (k, v) = tok.split_once('=').ok_or_else(|| {
            Error::Recipe(format!("line {line_no}: expected key=value, got '{tok}'"))
        })?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Recipe(format!("line {line_no}: duplicate key '{k}'")));
        }
    }
    Ok(map)
}

struct KvReader {
    map: HashMap<String, String>,
    line_no: usize,
}

impl KvReader {
    fn get<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| {
                Error::Recipe(format!("line {}: bad value for '{key}': {e}", self.line_no))
            }),
        }
    }

    fn require<T: std::str::FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let v = self.map.remove(key).ok_or_else(|| {
            Error::Recipe(format!("line {}: missing required key '{key}'", self.line_no))
        })?;
        v.parse().map_err(|e| {
            Error::Recipe(format!("line {}: bad value for '{key}': {e}", self.line_no))
        })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn finish(self, stage: &str) -> Result<()> {
        if let Some(k) = self.map.keys().next() {
            return Err(Error::Recipe(format!(
                "line {}: unknown key '{k}' for stage '{stage}'",
                self.line_no
            )));
        }
        Ok(())
    }
}

/// Parse a recipe file. Stage-order constraints are validated here, before
/// anything runs: transforms precede the single scorer; score-normalization,
/// calibration and fusion follow it in that order; `evaluate` is last.
pub fn parse_recipe(path: impl AsRef<Path>) -> Result<Recipe> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut inputs: HashMap<Role, PathBuf> = HashMap::new();
    let mut stages = Vec::new();
    let mut seen_any_stage = false;

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_ascii_whitespace().collect();
        let (head, rest) = tokens.split_first().unwrap();
        let mut kv = KvReader {
            map: parse_kv(rest, line_no)?,
            line_no,
        };
        match *head {
            "inputs" => {
                if seen_any_stage {
                    return Err(Error::Recipe(format!(
                        "line {line_no}: 'inputs' must precede all stages"
                    )));
                }
                if !inputs.is_empty() {
                    return Err(Error::Recipe(format!(
                        "line {line_no}: duplicate 'inputs' line"
                    )));
                }
                for (k, v) in kv.map.drain() {
                    let role = Role::parse(&k)?;
                    inputs.insert(role, base.join(v));
                }
                if inputs.is_empty() {
                    return Err(Error::Recipe(format!("line {line_no}: empty 'inputs' line")));
                }
            }
            "center" => {
                let fb = kv.take("fallback").unwrap_or_else(|| "global_mean".into());
                let stage = Stage::Center {
                    fallback: CenterFallback::parse(&fb)
                        .map_err(|e| Error::Recipe(format!("line {line_no}: {e}")))?,
                };
                kv.finish("center")?;
                stages.push(stage);
                seen_any_stage = true;
            }
            "lda" => {
                let stage = Stage::Lda { dim: kv.require("dim")? };
                kv.finish("lda")?;
                stages.push(stage);
                seen_any_stage = true;
            }
            "lsda" => {
                let stage = Stage::Lsda {
                    dim: kv.require("dim")?,
                    k_neighbors: kv.get("k", 10)?,
                    alpha: kv.get("alpha", 0.5)?,
                };
                kv.finish("lsda")?;
                stages.push(stage);
                seen_any_stage = true;
            }
            "coral" => {
                let stage = Stage::Coral { ridge: kv.get("ridge", 1e-3)? };
                kv.finish("coral")?;
                stages.push(stage);
                seen_any_stage = true;
            }
            "whiten" => {
                let stage = Stage::Whiten { ridge: kv.get("ridge", 0.0)? };
                kv.finish("whiten")?;
                stages.push(stage);
                seen_any_stage = true;
            }
            "lengthnorm" => {
                kv.finish("lengthnorm")?;
                stages.push(Stage::LengthNorm);
                seen_any_stage = true;
            }
            "plda" => {
                let stage = Stage::Plda {
                    iters: kv.get("iters", 20)?,
                    seed: kv.get("seed", 0)?,
                };
                kv.finish("plda")?;
                stages.push(stage);
                seen_any_stage = true;
            }
            "cosine" => {
                kv.finish("cosine")?;
                stages.push(Stage::Cosine);
                seen_any_stage = true;
            }
            "asnorm1" | "asnorm2" => {
                let variant = AsNormVariant::parse(head)
                    .map_err(|e| Error::Recipe(format!("line {line_no}: {e}")))?;
                let top_k = match kv.take("top_k") {
                    None => None,
                    Some(v) => Some(v.parse().map_err(|e| {
                        Error::Recipe(format!("line {line_no}: bad value for 'top_k': {e}"))
                    })?),
                };
                kv.finish(head)?;
                stages.push(Stage::AsNorm { variant, top_k });
                seen_any_stage = true;
            }
            "calibrate" => {
                let stage = Stage::Calibrate { prior: kv.get("prior", 0.01)? };
                kv.finish("calibrate")?;
                stages.push(stage);
                seen_any_stage = true;
            }
            "fuse" => {
                let extra = match kv.take("scores") {
                    None => Vec::new(),
                    Some(v) => v.split(',').map(|p| base.join(p.trim())).collect(),
                };
                kv.finish("fuse")?;
                stages.push(Stage::Fuse { extra_scores: extra });
                seen_any_stage = true;
            }
            "evaluate" => {
                let profile = match kv.take("profile") {
                    None => CostParams::cmn2(),
                    Some(p) => CostParams::profile(&p)
                        .map_err(|e| Error::Recipe(format!("line {line_no}: {e}")))?,
                };
                kv.finish("evaluate")?;
                stages.push(Stage::Evaluate { profile });
                seen_any_stage = true;
            }
            other => {
                return Err(Error::Recipe(format!(
                    "line {line_no}: unknown stage '{other}'"
                )))
            }
        }
    }

    if stages.is_empty() {
        return Err(Error::Recipe("recipe contains no stages".into()));
    }
    validate_stage_order(&stages)?;
    Ok(Recipe { inputs, stages })
}

fn validate_stage_order(stages: &[Stage]) -> Result<()> {
    let mut scorer_seen = false;
    let mut asnorm_seen = false;
    let mut calibrate_seen = false;
    for (i, stage) in stages.iter().enumerate() {
        let pos = i + 1;
        let name = stage.name();
        if stage.is_scorer() {
            if scorer_seen {
                return Err(Error::Recipe(format!(
                    "stage {pos} ({name}): a scorer already ran; exactly one scorer is allowed"
                )));
            }
            scorer_seen = true;
        } else if stage.is_transform() {
            if scorer_seen {
                return Err(Error::Recipe(format!(
                    "stage {pos} ({name}): transform stages must precede the scorer"
                )));
            }
        } else {
            match stage {
                Stage::AsNorm { .. } => {
                    if !scorer_seen {
                        return Err(Error::Recipe(format!(
                            "stage {pos} ({name}): score normalization requires a scorer stage first"
                        )));
                    }
                    if calibrate_seen {
                        return Err(Error::Recipe(format!(
                            "stage {pos} ({name}): score normalization must precede calibration"
                        )));
                    }
                    asnorm_seen = true;
                }
                Stage::Calibrate { .. } => {
                    if !scorer_seen {
                        return Err(Error::Recipe(format!(
                            "stage {pos} ({name}): calibration requires a scorer stage first"
                        )));
                    }
                    calibrate_seen = true;
                }
                Stage::Fuse { .. } => {
                    if !calibrate_seen {
                        return Err(Error::Recipe(format!(
                            "stage {pos} ({name}): fusion requires calibrated scores; add a calibrate stage first"
                        )));
                    }
                }
                Stage::Evaluate { .. } => {
                    if !scorer_seen {
                        return Err(Error::Recipe(format!(
                            "stage {pos} ({name}): evaluation requires a scorer stage first"
                        )));
                    }
                    if i + 1 != stages.len() {
                        return Err(Error::Recipe(format!(
                            "stage {pos} ({name}): evaluate must be the last stage"
                        )));
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    let _ = asnorm_seen;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct RecipeOptions {
    /// Role bindings supplied by the caller; override the recipe's
    /// `inputs` line.
    pub roles: HashMap<Role, PathBuf>,
    /// Allow overwriting a workdir artifact whose content changed.
    pub force: bool,
    /// Embedding file format for the role inputs.
    pub format: EmbFormat,
}

impl RecipeOptions {
    pub fn new() -> Self {
        RecipeOptions {
            roles: HashMap::new(),
            force: false,
            format: EmbFormat::Binary,
        }
    }
}

impl Default for EmbFormat {
    fn default() -> Self {
        EmbFormat::Binary
    }
}

/// Execution report: one line per stage plus the final metrics, when an
/// `evaluate` stage ran.
#[derive(Debug, Clone)]
pub struct RecipeReport {
    pub lines: Vec<String>,
    pub report: Option<metrics::Report>,
    pub artifacts: Vec<PathBuf>,
}

struct Workdir {
    dir: PathBuf,
    force: bool,
    artifacts: Vec<PathBuf>,
}

impl Workdir {
    fn persist(
        &mut self,
        index: usize,
        stage: &str,
        what: &str,
        ext: &str,
        write: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<PathBuf> {
        let tmp = self.dir.join(format!(".tmp-{index:02}-{stage}-{what}"));
        write(&tmp)?;
        let bytes = std::fs::read(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        let hash: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        let name = format!("s{index:02}-{stage}-{what}-{hash}.{ext}");
        let path = self.dir.join(&name);
        if path.exists() {
            let existing = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if existing == bytes {
                std::fs::remove_file(&tmp).map_err(|e| Error::io(&tmp, e))?;
                self.artifacts.push(path.clone());
                return Ok(path);
            }
            if !self.force {
                return Err(Error::Recipe(format!(
                    "artifact {} already exists with different content; pass --force to overwrite",
                    path.display()
                )));
            }
        }
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        self.artifacts.push(path.clone());
        Ok(path)
    }
}

struct State {
    train: Option<EmbeddingSet>,
    enroll: Option<EmbeddingSet>,
    test: Option<EmbeddingSet>,
    cohort: Option<EmbeddingSet>,
    indomain: Option<EmbeddingSet>,
    trials: Option<TrialList>,
    scores: Option<ScoreSet>,
    scorer: Option<Box<dyn PairScorer>>,
    calibrated: bool,
}

impl State {
    fn role_set(&self, role: Role) -> Result<&EmbeddingSet> {
        let set = match role {
            Role::Train => &self.train,
            Role::Enroll => &self.enroll,
            Role::Test => &self.test,
            Role::Cohort => &self.cohort,
            Role::Indomain => &self.indomain,
            Role::Trials => {
                return Err(Error::Recipe("trials is not an embedding role".into()))
            }
        };
        set.as_ref().ok_or_else(|| {
            Error::Recipe(format!("missing role '{}' (bind it via inputs)", role.name()))
        })
    }

    /// Apply a function to every loaded embedding set.
    fn map_sets(&mut self, f: impl Fn(&EmbeddingSet) -> Result<EmbeddingSet>) -> Result<()> {
        for slot in [
            &mut self.train,
            &mut self.enroll,
            &mut self.test,
            &mut self.cohort,
            &mut self.indomain,
        ] {
            if let Some(set) = slot.as_ref() {
                *slot = Some(f(set)?);
            }
        }
        Ok(())
    }

    fn trials(&self) -> Result<&TrialList> {
        self.trials
            .as_ref()
            .ok_or_else(|| Error::Recipe("missing role 'trials' (bind it via inputs)".into()))
    }

    fn scores(&self) -> Result<&ScoreSet> {
        self.scores
            .as_ref()
            .ok_or_else(|| Error::Recipe("no scores yet; run a scorer stage first".into()))
    }

    fn scorer(&self) -> Result<&dyn PairScorer> {
        self.scorer
            .as_deref()
            .ok_or_else(|| Error::Recipe("no scorer available".into()))
    }
}

/// Execute a recipe. Every fitted artifact and score set is persisted into
/// `workdir`; the report collects one line per stage and the final metrics.
pub fn run_recipe(
    recipe_path: impl AsRef<Path>,
    workdir: impl AsRef<Path>,
    opts: &RecipeOptions,
) -> Result<RecipeReport> {
    let recipe = parse_recipe(recipe_path.as_ref())?;
    let workdir = workdir.as_ref();
    std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;

    let mut roles = recipe.inputs.clone();
    for (role, path) in &opts.roles {
        roles.insert(*role, path.clone());
    }

    let load_set = |role: Role| -> Result<Option<EmbeddingSet>> {
        match roles.get(&role) {
            None => Ok(None),
            Some(path) => Ok(Some(io::read_embeddings(path, opts.format)?)),
        }
    };
    let mut state = State {
        train: load_set(Role::Train)?,
        enroll: load_set(Role::Enroll)?,
        test: load_set(Role::Test)?,
        cohort: load_set(Role::Cohort)?,
        indomain: load_set(Role::Indomain)?,
        trials: match roles.get(&Role::Trials) {
            None => None,
            Some(path) => Some(io::read_trials(path)?),
        },
        scores: None,
        scorer: None,
        calibrated: false,
    };

    let mut work = Workdir {
        dir: workdir.to_path_buf(),
        force: opts.force,
        artifacts: Vec::new(),
    };
    let mut lines = Vec::new();
    let mut final_report = None;

    for (i, stage) in recipe.stages.iter().enumerate() {
        let index = i + 1;
        let name = stage.name();
        let stage_err = |e: Error| match e {
            Error::Recipe(msg) => Error::Recipe(format!("stage {index} ({name}): {msg}")),
            other => Error::Recipe(format!("stage {index} ({name}): {other}")),
        };
        run_stage(stage, index, &mut state, &mut work, &mut lines, &mut final_report)
            .map_err(stage_err)?;
    }

    Ok(RecipeReport {
        lines,
        report: final_report,
        artifacts: work.artifacts,
    })
}

fn run_stage(
    stage: &Stage,
    index: usize,
    state: &mut State,
    work: &mut Workdir,
    lines: &mut Vec<String>,
    final_report: &mut Option<metrics::Report>,
) -> Result<()> {
    let name = stage.name();
    match stage {
        Stage::Center { fallback } => {
            // Fit on everything that is "training-time" data: train plus the
            // unlabeled adaptation material, each dataset centered by its
            // own mean.
            let mut fit_set = EmbeddingSet::new(state.role_set(Role::Train)?.dim())?;
            for role in [Role::Train, Role::Indomain, Role::Cohort] {
                if let Ok(set) = state.role_set(role) {
                    for rec in set.iter() {
                        let mut rec = rec.clone();
                        rec.utt_id = format!("{}::{}", role.name(), rec.utt_id);
                        fit_set.push(rec)?;
                    }
                }
            }
            let means = transforms::fit_dataset_centering(&fit_set)?;
            work.persist(index, name, "means", "dmn", |p| {
                transforms::write_dataset_means(&means, p)
            })?;
            let fb = *fallback;
            state.map_sets(|set| transforms::apply_centering(set, &means, fb))?;
            lines.push(format!(
                "stage {index} {name}: centered {} datasets",
                means.datasets().count()
            ));
        }
        Stage::Lda { dim } => {
            let t = transforms::fit_lda(state.role_set(Role::Train)?, *dim)?;
            work.persist(index, name, "transform", "lxf", |p| {
                transforms::write_transform(&t, p)
            })?;
            state.map_sets(|set| t.apply_set(set))?;
            lines.push(format!("stage {index} {name}: projected to dim {dim}"));
        }
        Stage::Lsda { dim, k_neighbors, alpha } => {
            let t = transforms::fit_lsda(state.role_set(Role::Train)?, *dim, *k_neighbors, *alpha)?;
            work.persist(index, name, "transform", "lxf", |p| {
                transforms::write_transform(&t, p)
            })?;
            state.map_sets(|set| t.apply_set(set))?;
            lines.push(format!("stage {index} {name}: projected to dim {dim}"));
        }
        Stage::Coral { ridge } => {
            let t = transforms::fit_coral(
                state.role_set(Role::Train)?,
                state.role_set(Role::Indomain)?,
                *ridge,
            )?;
            work.persist(index, name, "transform", "lxf", |p| {
                transforms::write_transform(&t, p)
            })?;
            // Covariance alignment maps the out-of-domain training data into
            // the evaluation domain; trial-side sets stay untouched.
            state.train = Some(t.apply_set(state.role_set(Role::Train)?)?);
            lines.push(format!("stage {index} {name}: aligned train covariance"));
        }
        Stage::Whiten { ridge } => {
            let t = transforms::fit_whitening(state.role_set(Role::Indomain)?, *ridge)?;
            work.persist(index, name, "transform", "lxf", |p| {
                transforms::write_transform(&t, p)
            })?;
            state.map_sets(|set| t.apply_set(set))?;
            lines.push(format!("stage {index} {name}: whitened with in-domain stats"));
        }
        Stage::LengthNorm => {
            state.map_sets(transforms::length_normalize)?;
            lines.push(format!("stage {index} {name}: unit-normalized all sets"));
        }
        Stage::Plda { iters, seed } => {
            let training = plda::train_plda(state.role_set(Role::Train)?, *iters, *seed)?;
            work.persist(index, name, "model", "plda", |p| {
                plda::write_plda(&training.model, p)
            })?;
            let scorer = PldaScorer::new(&training.model)?;
            let scores = scoring::score_trials(
                state.trials()?,
                state.role_set(Role::Enroll)?,
                state.role_set(Role::Test)?,
                &scorer,
            )?;
            work.persist(index, name, "scores", "txt", |p| io::write_scores(&scores, p))?;
            let ll = *training.log_likelihoods.last().unwrap();
            lines.push(format!(
                "stage {index} {name}: trained {iters} iters (final ll {ll:.4}), scored {} trials",
                scores.len()
            ));
            state.scores = Some(scores);
            state.scorer = Some(Box::new(scorer));
        }
        Stage::Cosine => {
            let scorer = CosineScorer;
            let scores = scoring::score_trials(
                state.trials()?,
                state.role_set(Role::Enroll)?,
                state.role_set(Role::Test)?,
                &scorer,
            )?;
            work.persist(index, name, "scores", "txt", |p| io::write_scores(&scores, p))?;
            lines.push(format!("stage {index} {name}: scored {} trials", scores.len()));
            state.scores = Some(scores);
            state.scorer = Some(Box::new(scorer));
        }
        Stage::AsNorm { variant, top_k } => {
            let cohort = Cohort::new(state.role_set(Role::Cohort)?.clone(), "cohort")?;
            let cfg = match top_k {
                Some(k) => AsNormConfig { variant: *variant, top_k: *k },
                None => AsNormConfig::with_default_top_k(*variant),
            };
            let normalized = scoring::asnorm(
                state.scores()?,
                state.role_set(Role::Enroll)?,
                state.role_set(Role::Test)?,
                &cohort,
                cfg,
                state.scorer()?,
            )?;
            work.persist(index, name, "scores", "txt", |p| io::write_scores(&normalized, p))?;
            lines.push(format!(
                "stage {index} {name}: normalized with top_k={} of {} cohort segments",
                cfg.top_k,
                cohort.len()
            ));
            state.scores = Some(normalized);
        }
        Stage::Calibrate { prior } => {
            let cal = fit_on_labeled(state, |labeled| calibration::fit_calibration(labeled, *prior))?;
            work.persist(index, name, "calibration", "txt", |p| {
                calibration::write_calibration(&cal, p)
            })?;
            let calibrated = calibration::apply_calibration(state.scores()?, &cal)?;
            work.persist(index, name, "scores", "txt", |p| io::write_scores(&calibrated, p))?;
            lines.push(format!(
                "stage {index} {name}: a={:.4} b={:.4} prior={}",
                cal.scale, cal.bias, cal.effective_prior
            ));
            state.scores = Some(calibrated);
            state.calibrated = true;
        }
        Stage::Fuse { extra_scores } => {
            let mut systems = vec![with_labels(state)?];
            for path in extra_scores {
                // External systems are assumed calibrated already.
                systems.push(io::read_scores(path)?.with_labels_from(state.trials()?)?);
            }
            let fused = calibration::fuse(&systems)?;
            work.persist(index, name, "scores", "txt", |p| io::write_scores(&fused, p))?;
            lines.push(format!("stage {index} {name}: fused {} systems", systems.len()));
            state.scores = Some(fused);
        }
        Stage::Evaluate { profile } => {
            let labeled = with_labels(state)?;
            let report = metrics::evaluate(&labeled, profile)?;
            lines.push(report.table_line());
            *final_report = Some(report);
        }
    }
    Ok(())
}

/// Scores with labels joined from the trials role.
fn with_labels(state: &State) -> Result<ScoreSet> {
    state.scores()?.with_labels_from(state.trials()?)
}

fn fit_on_labeled<T>(state: &State, f: impl FnOnce(&ScoreSet) -> Result<T>) -> Result<T> {
    let labeled = with_labels(state)?;
    f(&labeled)
}
