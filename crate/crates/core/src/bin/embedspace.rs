//! Command-line front end: one subcommand per library operation, plus a
//! recipe runner for full back-end chains.
//!
//! Logs go to stderr, results to stdout. Every failure exits nonzero with a
//! single machine-parsable `error: ...` line.

use std::collections::HashMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ndarray::Array1;

use embedspace::calibration;
use embedspace::data::io::{self, EmbFormat};
use embedspace::encoders;
use embedspace::metrics::{self, CostParams};
use embedspace::plda::{self, PldaScorer};
use embedspace::recipe::{self, RecipeOptions, Role};
use embedspace::scoring::{self, AsNormConfig, AsNormVariant, Cohort, CosineScorer, PairScorer};
use embedspace::synth::{self, CovSpec, SynthConfig};
use embedspace::transforms;

#[derive(Parser)]
#[command(
    name = "embedspace",
    version,
    about = "Speaker-verification back-end toolkit over precomputed embeddings"
)]
struct Cli {
    /// Worker threads for parallel stages (0 = library default).
    /// Defaults to the EMBEDSPACE_THREADS environment variable.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Suppress progress logs on stderr.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct FormatArg {
    /// Embedding file format: binary | tsv.
    #[arg(long, default_value = "binary")]
    format: String,
}

impl FormatArg {
    fn get(&self) -> anyhow::Result<EmbFormat> {
        Ok(EmbFormat::parse(&self.format)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic embeddings from the two-covariance model.
    Synth {
        /// Flat key=value config file; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        utts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Between-speaker covariance: isotropic:<v> or matrix rows `a,b;c,d`.
        #[arg(long)]
        between_cov: Option<String>,
        /// Within-speaker covariance, same syntax.
        #[arg(long)]
        within_cov: Option<String>,
        /// Global mean vector `a,b,...`.
        #[arg(long)]
        mean: Option<String>,
        /// Domain-shift matrix rows `a,b;c,d` (marks output dataset "shifted").
        #[arg(long)]
        shift_matrix: Option<String>,
        /// Domain-shift offset `a,b,...`.
        #[arg(long)]
        shift_offset: Option<String>,
        #[arg(long)]
        dataset_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Sample a labeled trial list from a labeled embedding set.
    MakeTrials {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        targets: usize,
        #[arg(long)]
        nontargets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Fit per-dataset centering means.
    FitCenter {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Fit a linear discriminant projection.
    FitLda {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Fit a locality-sensitive discriminant projection.
    FitLsda {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 10)]
        k_neighbors: usize,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Fit a covariance-alignment map from source to target domain.
    FitCoral {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Relative ridge added to each covariance diagonal.
        #[arg(long, default_value_t = 1e-3)]
        ridge: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Fit in-domain whitening.
    FitWhiten {
        #[arg(long)]
        indomain: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        ridge: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Apply one preprocessing step to an embedding file.
    Apply {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Linear transform file(s); multiple compose left to right.
        #[arg(long)]
        transform: Vec<PathBuf>,
        /// Per-dataset centering means file.
        #[arg(long)]
        centering: Option<PathBuf>,
        /// Unseen-dataset behaviour for --centering: global_mean | error.
        #[arg(long, default_value = "global_mean")]
        fallback: String,
        /// Unit-length normalization.
        #[arg(long)]
        lengthnorm: bool,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Train a PLDA model on labeled embeddings.
    TrainPlda {
        #[arg(long)]
        train: PathBuf,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Score a trial list with cosine or PLDA.
    Score {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        enroll: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// cosine | plda
        #[arg(long)]
        scorer: String,
        /// PLDA model file (required for --scorer plda).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Adaptive symmetric score normalization.
    Asnorm {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        enroll: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        /// asnorm1 | asnorm2
        #[arg(long)]
        variant: String,
        /// Cohort subset size; defaults to 100 (asnorm1) or 200 (asnorm2).
        #[arg(long)]
        top_k: Option<usize>,
        /// cosine | plda — must match the scorer that produced --scores.
        #[arg(long)]
        scorer: String,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Fit score calibration on labeled trials and apply it.
    Calibrate {
        #[arg(long)]
        scores: PathBuf,
        /// Trial key with target/nontarget labels.
        #[arg(long)]
        key: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        prior: f64,
        /// Where to store the fitted `a= b= prior=` parameters.
        #[arg(long)]
        out_calibration: PathBuf,
        /// Where to store the calibrated scores.
        #[arg(long)]
        out: PathBuf,
    },
    /// Equal-weighted fusion of calibrated score files.
    Fuse {
        /// Two or more calibrated score files.
        #[arg(long, required = true, num_args = 1..)]
        scores: Vec<PathBuf>,
        /// Assert that the inputs are calibrated log-likelihood ratios.
        #[arg(long)]
        already_calibrated: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report EER / minC / actC for a labeled score file.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        /// Trial key with labels.
        #[arg(long)]
        key: PathBuf,
        /// cmn2 | vast | custom
        #[arg(long, default_value = "cmn2")]
        cost_profile: String,
        /// Target priors for --cost-profile custom, e.g. `0.01,0.005`.
        #[arg(long)]
        p_targets: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        c_miss: f64,
        #[arg(long, default_value_t = 1.0)]
        c_fa: f64,
        /// Print a machine-readable TSV line instead of the table format.
        #[arg(long)]
        tsv: bool,
    },
    /// Run the gradient finite-difference suite for the encoder kernels.
    EncodeCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Execute a recipe file stage by stage.
    RunRecipe {
        recipe: PathBuf,
        #[arg(long)]
        workdir: PathBuf,
        /// Overwrite artifacts whose content changed.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        enroll: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        indomain: Option<PathBuf>,
        #[command(flatten)]
        format: FormatArg,
    },
}

fn main() {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("EMBEDSPACE_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if n > 0 {
            // ignore failure: the pool may already be set in tests
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}

fn log(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("[embedspace] {}", msg.as_ref());
    }
}

fn build_scorer(name: &str, model: &Option<PathBuf>) -> anyhow::Result<Box<dyn PairScorer>> {
    match name {
        "cosine" => Ok(Box::new(CosineScorer)),
        "plda" => {
            let path = model
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("--scorer plda requires --model"))?;
            let model = plda::read_plda(path)?;
            Ok(Box::new(PldaScorer::new(&model)?))
        }
        other => anyhow::bail!("unknown scorer '{other}' (expected 'cosine' or 'plda')"),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Synth {
            config,
            dim,
            speakers,
            utts,
            seed,
            between_cov,
            within_cov,
            mean,
            shift_matrix,
            shift_offset,
            dataset_id,
            out,
            format,
        } => {
            let mut cfg = match config {
                Some(path) => SynthConfig::from_kv_file(path)?,
                None => {
                    let dim = dim.ok_or_else(|| anyhow::anyhow!("--dim required without --config"))?;
                    let speakers =
                        speakers.ok_or_else(|| anyhow::anyhow!("--speakers required without --config"))?;
                    let utts =
                        utts.ok_or_else(|| anyhow::anyhow!("--utts required without --config"))?;
                    SynthConfig::isotropic(dim, speakers, utts, 1.0, 1.0, seed.unwrap_or(0))
                }
            };
            if let Some(d) = dim {
                cfg.dim = d;
            }
            if let Some(s) = speakers {
                cfg.n_speakers = s;
            }
            if let Some(u) = utts {
                cfg.utts_per_speaker = u;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(b) = between_cov {
                cfg.between_cov = CovSpec::parse(&b)?;
            }
            if let Some(w) = within_cov {
                cfg.within_cov = CovSpec::parse(&w)?;
            }
            if let Some(m) = mean {
                cfg.global_mean = Some(synth::parse_vector(&m)?);
            }
            if shift_matrix.is_some() || shift_offset.is_some() {
                let matrix = match &shift_matrix {
                    Some(s) => synth::parse_matrix(s)?,
                    None => ndarray::Array2::eye(cfg.dim),
                };
                let offset = match &shift_offset {
                    Some(s) => synth::parse_vector(s)?,
                    None => Array1::zeros(cfg.dim),
                };
                cfg.shift = Some(synth::Shift { matrix, offset });
            }
            if let Some(d) = dataset_id {
                cfg.dataset_id = d;
            }
            let set = synth::generate(&cfg)?;
            io::write_embeddings(&set, &out, format.get()?)?;
            log(
                quiet,
                format!("wrote {} embeddings (dim {}) to {}", set.len(), set.dim(), out.display()),
            );
        }
        Command::MakeTrials {
            embeddings,
            targets,
            nontargets,
            seed,
            out,
            format,
        } => {
            let set = io::read_embeddings(&embeddings, format.get()?)?;
            let trials = synth::make_trials(&set, targets, nontargets, seed)?;
            io::write_trials(&trials, &out)?;
            log(quiet, format!("wrote {} trials to {}", trials.len(), out.display()));
        }
        Command::FitCenter { train, out, format } => {
            let set = io::read_embeddings(&train, format.get()?)?;
            let means = transforms::fit_dataset_centering(&set)?;
            transforms::write_dataset_means(&means, &out)?;
            log(
                quiet,
                format!("fitted means for {} datasets to {}", means.datasets().count(), out.display()),
            );
        }
        Command::FitLda { train, dim, out, format } => {
            let set = io::read_embeddings(&train, format.get()?)?;
            let t = transforms::fit_lda(&set, dim)?;
            transforms::write_transform(&t, &out)?;
            log(quiet, format!("fitted LDA {}x{} to {}", t.out_dim(), t.in_dim(), out.display()));
        }
        Command::FitLsda {
            train,
            dim,
            k_neighbors,
            alpha,
            out,
            format,
        } => {
            let set = io::read_embeddings(&train, format.get()?)?;
            let t = transforms::fit_lsda(&set, dim, k_neighbors, alpha)?;
            transforms::write_transform(&t, &out)?;
            log(quiet, format!("fitted LSDA {}x{} to {}", t.out_dim(), t.in_dim(), out.display()));
        }
        Command::FitCoral {
            source,
            target,
            ridge,
            out,
            format,
        } => {
            let fmt = format.get()?;
            let src = io::read_embeddings(&source, fmt)?;
            let tgt = io::read_embeddings(&target, fmt)?;
            let t = transforms::fit_coral(&src, &tgt, ridge)?;
            transforms::write_transform(&t, &out)?;
            log(quiet, format!("fitted CORAL map to {}", out.display()));
        }
        Command::FitWhiten {
            indomain,
            ridge,
            out,
            format,
        } => {
            let set = io::read_embeddings(&indomain, format.get()?)?;
            let t = transforms::fit_whitening(&set, ridge)?;
            transforms::write_transform(&t, &out)?;
            log(quiet, format!("fitted whitening to {}", out.display()));
        }
        Command::Apply {
            input,
            output,
            transform,
            centering,
            fallback,
            lengthnorm,
            format,
        } => {
            let fmt = format.get()?;
            let set = io::read_embeddings(&input, fmt)?;
            let chosen = usize::from(!transform.is_empty())
                + usize::from(centering.is_some())
                + usize::from(lengthnorm);
            if chosen != 1 {
                anyhow::bail!("choose exactly one of --transform, --centering, --lengthnorm");
            }
            let out_set = if let Some(means_path) = centering {
                let means = transforms::read_dataset_means(&means_path)?;
                let fb = transforms::CenterFallback::parse(&fallback)?;
                transforms::apply_centering(&set, &means, fb)?
            } else if lengthnorm {
                transforms::length_normalize(&set)?
            } else {
                let mut chain: Option<transforms::LinearTransform> = None;
                for path in &transform {
                    let t = transforms::read_transform(path)?;
                    chain = Some(match chain {
                        None => t,
                        Some(prev) => transforms::compose(&prev, &t)?,
                    });
                }
                chain.unwrap().apply_set(&set)?
            };
            io::write_embeddings(&out_set, &output, fmt)?;
            log(quiet, format!("wrote {} records to {}", out_set.len(), output.display()));
        }
        Command::TrainPlda {
            train,
            iters,
            seed,
            out,
            format,
        } => {
            let set = io::read_embeddings(&train, format.get()?)?;
            let training = plda::train_plda(&set, iters, seed)?;
            plda::write_plda(&training.model, &out)?;
            for (i, ll) in training.log_likelihoods.iter().enumerate() {
                log(quiet, format!("iter {i}: log-likelihood {ll:.6}"));
            }
            log(quiet, format!("wrote PLDA model (dim {}) to {}", training.model.dim(), out.display()));
        }
        Command::Score {
            trials,
            enroll,
            test,
            scorer,
            model,
            out,
            format,
        } => {
            let fmt = format.get()?;
            let trial_list = io::read_trials(&trials)?;
            let enroll_set = io::read_embeddings(&enroll, fmt)?;
            let test_set = io::read_embeddings(&test, fmt)?;
            let scorer = build_scorer(&scorer, &model)?;
            let scores = scoring::score_trials(&trial_list, &enroll_set, &test_set, scorer.as_ref())?;
            io::write_scores(&scores, &out)?;
            log(quiet, format!("scored {} trials to {}", scores.len(), out.display()));
        }
        Command::Asnorm {
            scores,
            enroll,
            test,
            cohort,
            variant,
            top_k,
            scorer,
            model,
            out,
            format,
        } => {
            let fmt = format.get()?;
            let raw = io::read_scores(&scores)?;
            let enroll_set = io::read_embeddings(&enroll, fmt)?;
            let test_set = io::read_embeddings(&test, fmt)?;
            let cohort = Cohort::new(io::read_embeddings(&cohort, fmt)?, "cohort")?;
            let variant = AsNormVariant::parse(&variant)?;
            let cfg = match top_k {
                Some(k) => AsNormConfig { variant, top_k: k },
                None => AsNormConfig::with_default_top_k(variant),
            };
            let scorer = build_scorer(&scorer, &model)?;
            let normalized = scoring::asnorm(&raw, &enroll_set, &test_set, &cohort, cfg, scorer.as_ref())?;
            io::write_scores(&normalized, &out)?;
            log(quiet, format!("normalized {} trials to {}", normalized.len(), out.display()));
        }
        Command::Calibrate {
            scores,
            key,
            prior,
            out_calibration,
            out,
        } => {
            let raw = io::read_scores(&scores)?;
            let key = io::read_trials(&key)?;
            let labeled = raw.with_labels_from(&key)?;
            let cal = calibration::fit_calibration(&labeled, prior)?;
            calibration::write_calibration(&cal, &out_calibration)?;
            let calibrated = calibration::apply_calibration(&labeled, &cal)?;
            io::write_scores(&calibrated, &out)?;
            log(
                quiet,
                format!("a={} b={} prior={} -> {}", cal.scale, cal.bias, cal.effective_prior, out.display()),
            );
        }
        Command::Fuse {
            scores,
            already_calibrated,
            out,
        } => {
            if !already_calibrated {
                anyhow::bail!(
                    "fuse requires calibrated LLR inputs; pass --already-calibrated to assert that"
                );
            }
            let systems: Result<Vec<_>, _> = scores.iter().map(io::read_scores).collect();
            let fused = calibration::fuse(&systems?)?;
            io::write_scores(&fused, &out)?;
            log(quiet, format!("fused {} systems to {}", scores.len(), out.display()));
        }
        Command::Evaluate {
            scores,
            key,
            cost_profile,
            p_targets,
            c_miss,
            c_fa,
            tsv,
        } => {
            let raw = io::read_scores(&scores)?;
            let key = io::read_trials(&key)?;
            let labeled = raw.with_labels_from(&key)?;
            let params = match cost_profile.as_str() {
                "custom" => {
                    let ps = p_targets
                        .ok_or_else(|| anyhow::anyhow!("--cost-profile custom requires --p-targets"))?;
                    let ps: Result<Vec<f64>, _> = ps.split(',').map(|t| t.trim().parse()).collect();
                    CostParams::new(c_miss, c_fa, ps.map_err(|e| anyhow::anyhow!("bad --p-targets: {e}"))?)?
                }
                name => CostParams::profile(name)?,
            };
            let report = metrics::evaluate(&labeled, &params)?;
            if tsv {
                println!("{}", report.tsv_line());
            } else {
                println!("{}", report.table_line());
            }
        }
        Command::EncodeCheck { seeds } => {
            let mut max_lde = 0.0f64;
            let mut max_asoft = 0.0f64;
            for seed in 0..seeds {
                max_lde = max_lde.max(encoders::fd_check_lde(seed)?);
                max_asoft = max_asoft.max(encoders::fd_check_asoftmax(seed)?);
            }
            println!("lde_backward max relative error: {max_lde:.3e}");
            println!("asoftmax_loss max relative error: {max_asoft:.3e}");
            let ok = max_lde <= 1e-4 && max_asoft <= 1e-4;
            println!("finite-difference suite: {}", if ok { "PASS" } else { "FAIL" });
            if !ok {
                anyhow::bail!("finite-difference check exceeded 1e-4");
            }
        }
        Command::RunRecipe {
            recipe,
            workdir,
            force,
            train,
            enroll,
            test,
            trials,
            cohort,
            indomain,
            format,
        } => {
            let mut roles: HashMap<Role, PathBuf> = HashMap::new();
            for (role, path) in [
                (Role::Train, train),
                (Role::Enroll, enroll),
                (Role::Test, test),
                (Role::Trials, trials),
                (Role::Cohort, cohort),
                (Role::Indomain, indomain),
            ] {
                if let Some(p) = path {
                    roles.insert(role, p);
                }
            }
            let opts = RecipeOptions {
                roles,
                force,
                format: format.get()?,
            };
            let out = recipe::run_recipe(&recipe, &workdir, &opts)?;
            for line in &out.lines {
                println!("{line}");
            }
            log(quiet, format!("{} artifacts in {}", out.artifacts.len(), workdir.display()));
        }
    }
    Ok(())
}
