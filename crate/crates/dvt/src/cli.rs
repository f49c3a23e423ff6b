//! Command-line front end: dataset generation, training, evaluation, and
//! the numerical verification suites, packaged as reproducible runs.
//!
//! Reproducibility contract: every command re-run with identical inputs and
//! seed produces byte-identical primary outputs. Manifests embed the config
//! verbatim, the SHA-256 of every input dataset, and a content hash of the
//! crate sources, and are written atomically before any training step runs.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 numerical verification
//! failure, 3 I/O or data error.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_moons, index_class_names, load_csv_features, shift_target, split_supervised,
    split_train_test, write_csv, Dataset, SupervisedSplit,
};
use crate::error::{Error, Result};
use crate::ioutil;
use crate::metrics::{argmax_rows, evaluate, prediction_entropy, EvalReport};
use crate::model::{
    build_model, load_checkpoint, save_checkpoint, ArchConfig, CheckpointMeta, DomainSpec,
    DvtModel, Likelihood,
};
use crate::tensor::Tensor;
use crate::train::{
    ensemble_predict, train_ensemble, train_multi_task, train_semi_supervised, train_transfer,
    write_trace_csv, EarlyStop, Regime, TraceRow, TrainConfig,
};
use crate::verify::{self, VerifyConfig};

/// Crate version plus a content hash of the sources, so manifests identify
/// the exact code that produced them.
pub fn code_version() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("DVT_SOURCE_HASH"))
}

// ── Argument surface ────────────────────────────────────────────────────

#[derive(Debug, Parser)]
#[command(
    name = "dvt",
    version,
    about = "Semi-supervised variational transfer learning experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the two-moons source/target dataset files plus a manifest.
    GenData(GenDataArgs),
    /// Train a model from a flat key=value config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or an ensemble directory) on a dataset CSV.
    Eval(EvalArgs),
    /// Run the numerical verification suites (gradients, KL, sampler law).
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Experiment family; `moons` is the only generator wired to this
    /// command (image experiments are driven through the library API).
    #[arg(long, default_value = "moons")]
    pub experiment: String,
    /// Output directory for the four CSVs and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Majority-class sample count in the source domain (the target domain
    /// reverses the class balance).
    #[arg(long, default_value_t = 10_000)]
    pub majority: usize,
    /// Minority-class sample count in the source domain.
    #[arg(long, default_value_t = 400)]
    pub minority: usize,
    /// Gaussian noise, in canonical half-circle units.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Fraction of source training rows whose label is visible (stratified
    /// per class).
    #[arg(long, default_value_t = 0.1)]
    pub sup_frac_source: f64,
    /// Fraction of target training rows whose label is visible.
    #[arg(long, default_value_t = 0.025)]
    pub sup_frac_target: f64,
    /// Overwrite existing output files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat key=value config file; relative paths inside it resolve against
    /// its own directory.
    pub config: PathBuf,
    /// Output directory for manifest, checkpoint(s), trace(s), and report.
    #[arg(long)]
    pub out: PathBuf,
    /// Starting checkpoint; required by (and only meaningful for) the
    /// transfer regime. Overrides the config's `from_checkpoint`.
    #[arg(long)]
    pub from_checkpoint: Option<PathBuf>,
    /// Train N independent members (seeds seed+0 .. seed+N-1) in parallel
    /// and report their averaged predictions.
    #[arg(long)]
    pub ensemble: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long, conflicts_with = "ensemble", required_unless_present = "ensemble")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `checkpoint*.json` members whose predicted class
    /// probabilities are averaged.
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
    /// Dataset CSV; every row must carry a label to score against.
    #[arg(long)]
    pub data: PathBuf,
    /// Domain the dataset belongs to.
    #[arg(long, default_value = "source")]
    pub domain: String,
    /// Where the report JSON is written.
    #[arg(long, default_value = "eval_report.json")]
    pub out: PathBuf,
    /// Also dump a per-point CSV: feature coordinates, true label,
    /// prediction, and prediction entropy in bits.
    #[arg(long)]
    pub entropy_dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Relative-error tolerance for the gradient checks.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Base seed for the first pass.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run this many fully independent passes over every suite.
    #[arg(long, default_value_t = 1)]
    pub sweep: u64,
    /// Monte-Carlo draws for the KL and sampler-law suites.
    #[arg(long, default_value_t = 100_000)]
    pub mc_samples: usize,
    /// Random models per pass in the gradient suite.
    #[arg(long, default_value_t = 5)]
    pub grad_seeds: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Verify(a) => cmd_verify(&a),
    }
}

// ── Run manifests ───────────────────────────────────────────────────────

/// What produced a run: the verbatim settings, every input dataset's hash,
/// and the code version. Contains no timestamps, so identical runs write
/// identical manifests.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    /// Config file text verbatim (train) or the effective generation
    /// settings in the same key=value syntax (gen-data).
    pub config: String,
    /// Dataset path → SHA-256 of the file bytes. Inputs for training runs,
    /// outputs for generation runs.
    pub datasets: BTreeMap<String, String>,
    /// Primary output paths this run produces.
    pub outputs: Vec<String>,
}

fn write_manifest(manifest: &RunManifest, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    ioutil::write_atomic(path, &bytes)
}

// ── Config files ────────────────────────────────────────────────────────

/// A parsed training config. Paths are kept as written; the caller resolves
/// them against the config file's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSpec {
    pub regime: Regime,
    pub cfg: TrainConfig,
    pub class_count: usize,
    pub likelihood: Likelihood,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    /// Held-out sets the post-training report scores; the supervised
    /// training rows stand in when absent.
    pub source_eval: Option<PathBuf>,
    pub target_eval: Option<PathBuf>,
    pub source_domain: String,
    pub target_domain: String,
    pub from_checkpoint: Option<PathBuf>,
    pub latent_dim: Option<usize>,
    pub shared_hidden: Option<Vec<usize>>,
    pub domain_hidden: Option<Vec<usize>>,
    pub shared_classifier: bool,
    pub mu_scale: Option<f64>,
    pub prior_sigma: Option<f64>,
}

fn parse_val<T: std::str::FromStr>(key: &str, val: &str, expect: &str) -> Result<T> {
    val.parse::<T>()
        .map_err(|_| Error::Config(format!("key '{}': expected {}, got '{}'", key, expect, val)))
}

fn parse_bool(key: &str, val: &str) -> Result<bool> {
    match val {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "key '{}': expected true or false, got '{}'",
            key, other
        ))),
    }
}

fn parse_usize_list(key: &str, val: &str) -> Result<Vec<usize>> {
    if val.is_empty() {
        return Ok(Vec::new());
    }
    val.split(',')
        .map(|p| parse_val::<usize>(key, p.trim(), "a comma-separated list of integers"))
        .collect()
}

impl TrainSpec {
    /// Parse flat `key = value` text: one pair per line, `#` lines and blank
    /// lines ignored, every key known and given at most once.
    pub fn parse(text: &str) -> Result<TrainSpec> {
        let mut regime: Option<Regime> = None;
        let mut class_count: Option<usize> = None;
        let mut cfg = TrainConfig::default();
        let mut likelihood = Likelihood::Gaussian;
        let mut source = None;
        let mut target = None;
        let mut source_eval = None;
        let mut target_eval = None;
        let mut source_domain = "source".to_string();
        let mut target_domain = "target".to_string();
        let mut from_checkpoint = None;
        let mut latent_dim = None;
        let mut shared_hidden = None;
        let mut domain_hidden = None;
        let mut shared_classifier = false;
        let mut mu_scale = None;
        let mut prior_sigma = None;
        let mut early_stop_kind: Option<String> = None;
        let mut patience = 5usize;
        let mut eval_every = 250usize;

        let mut seen = BTreeSet::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{}'", ln + 1, line))
            })?;
            let (key, val) = (key.trim(), val.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{}'", ln + 1, key)));
            }
            match key {
                "regime" => regime = Some(val.parse()?),
                "class_count" => class_count = Some(parse_val(key, val, "an integer")?),
                "likelihood" => likelihood = val.parse()?,
                "source" => source = Some(PathBuf::from(val)),
                "target" => target = Some(PathBuf::from(val)),
                "source_eval" => source_eval = Some(PathBuf::from(val)),
                "target_eval" => target_eval = Some(PathBuf::from(val)),
                "source_domain" => source_domain = val.to_string(),
                "target_domain" => target_domain = val.to_string(),
                "from_checkpoint" => from_checkpoint = Some(PathBuf::from(val)),
                "gamma" => cfg.weights.gamma = parse_val(key, val, "a number")?,
                "rho" => cfg.weights.rho = parse_val(key, val, "a number")?,
                "eta" => cfg.weights.eta = parse_val(key, val, "a number")?,
                "tau" => cfg.weights.tau = parse_val(key, val, "a number")?,
                "learning_rate" => cfg.learning_rate = parse_val(key, val, "a number")?,
                "beta1" => cfg.beta1 = parse_val(key, val, "a number")?,
                "beta2" => cfg.beta2 = parse_val(key, val, "a number")?,
                "epsilon" => cfg.epsilon = parse_val(key, val, "a number")?,
                "steps" => cfg.steps = parse_val(key, val, "an integer")?,
                "sup_batch_size" => cfg.sup_batch_size = parse_val(key, val, "an integer")?,
                "unsup_batch_size" => cfg.unsup_batch_size = parse_val(key, val, "an integer")?,
                "seed" => cfg.seed = parse_val(key, val, "an integer")?,
                "ensemble_size" => cfg.ensemble_size = parse_val(key, val, "an integer")?,
                "early_stop" => early_stop_kind = Some(val.to_string()),
                "patience" => patience = parse_val(key, val, "an integer")?,
                "eval_every" => eval_every = parse_val(key, val, "an integer")?,
                "latent_dim" => latent_dim = Some(parse_val(key, val, "an integer")?),
                "shared_hidden" => shared_hidden = Some(parse_usize_list(key, val)?),
                "domain_hidden" => domain_hidden = Some(parse_usize_list(key, val)?),
                "shared_classifier" => shared_classifier = parse_bool(key, val)?,
                "mu_scale" => mu_scale = Some(parse_val(key, val, "a number")?),
                "prior_sigma" => prior_sigma = Some(parse_val(key, val, "a number")?),
                other => {
                    return Err(Error::Config(format!("line {}: unknown key '{}'", ln + 1, other)))
                }
            }
        }

        let regime =
            regime.ok_or_else(|| Error::Config("config is missing 'regime'".into()))?;
        let class_count =
            class_count.ok_or_else(|| Error::Config("config is missing 'class_count'".into()))?;
        if class_count < 2 {
            return Err(Error::Config(format!("class_count must be >= 2, got {}", class_count)));
        }
        cfg.regime = regime;
        cfg.early_stop = match early_stop_kind.as_deref() {
            None | Some("off") => EarlyStop::Off,
            Some("cycle_consistency") => EarlyStop::CycleConsistency { patience, eval_every },
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown early_stop '{}' (expected off or cycle_consistency)",
                    other
                )))
            }
        };

        let spec = TrainSpec {
            regime,
            cfg,
            class_count,
            likelihood,
            source,
            target,
            source_eval,
            target_eval,
            source_domain,
            target_domain,
            from_checkpoint,
            latent_dim,
            shared_hidden,
            domain_hidden,
            shared_classifier,
            mu_scale,
            prior_sigma,
        };
        spec.check_required()?;
        Ok(spec)
    }

    fn check_required(&self) -> Result<()> {
        match self.regime {
            Regime::SemiSupervised => {
                if self.source.is_none() {
                    return Err(Error::Config(
                        "regime semi_supervised needs a 'source' dataset path".into(),
                    ));
                }
            }
            Regime::Transfer => {
                if self.target.is_none() {
                    return Err(Error::Config(
                        "regime transfer needs a 'target' dataset path".into(),
                    ));
                }
            }
            Regime::MultiTask => {
                if self.source.is_none() || self.target.is_none() {
                    return Err(Error::Config(
                        "regime multi_task needs both 'source' and 'target' dataset paths".into(),
                    ));
                }
            }
        }
        if self.source_domain == self.target_domain {
            return Err(Error::Config(format!(
                "source_domain and target_domain are both '{}'",
                self.source_domain
            )));
        }
        Ok(())
    }

    /// Architecture implied by the config, with input widths taken from the
    /// datasets actually present.
    fn arch(&self, source_dim: Option<usize>, target_dim: Option<usize>) -> Result<ArchConfig> {
        let mut domains = Vec::new();
        if let Some(d) = source_dim {
            domains.push(DomainSpec {
                id: self.source_domain.clone(),
                input_dim: d,
                likelihood: self.likelihood,
            });
        }
        if let Some(d) = target_dim {
            domains.push(DomainSpec {
                id: self.target_domain.clone(),
                input_dim: d,
                likelihood: self.likelihood,
            });
        }
        if domains.is_empty() {
            return Err(Error::Config("no datasets to size the model from".into()));
        }
        let mut arch = ArchConfig::defaults(self.class_count, domains);
        if let Some(j) = self.latent_dim {
            arch.latent_dim = j;
        }
        if let Some(h) = &self.shared_hidden {
            arch.shared_hidden = h.clone();
        }
        if let Some(h) = &self.domain_hidden {
            arch.domain_hidden = h.clone();
        }
        arch.shared_classifier = self.shared_classifier;
        if let Some(m) = self.mu_scale {
            arch.mu_scale = m;
        }
        if let Some(s) = self.prior_sigma {
            arch.prior_sigma = s;
        }
        Ok(arch)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

// ── gen-data ────────────────────────────────────────────────────────────

fn ensure_fresh(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    for p in paths {
        if p.exists() {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    if args.experiment != "moons" {
        return Err(Error::Config(format!(
            "unknown experiment '{}' (this command generates 'moons')",
            args.experiment
        )));
    }
    let out = &args.out;
    let files: Vec<PathBuf> = ["source_train.csv", "source_test.csv", "target_train.csv", "target_test.csv"]
        .iter()
        .map(|f| out.join(f))
        .collect();
    let manifest_path = out.join("manifest.json");
    let mut all = files.clone();
    all.push(manifest_path.clone());
    ensure_fresh(&all, args.force)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    // Source: majority/minority split; target: the same geometry with the
    // class balance reversed, rotated 30° and log-shifted.
    let source_full = generate_moons(args.majority, args.minority, args.noise, args.seed, "source")?;
    let (source_train, source_test) = split_train_test(&source_full, args.seed);
    let source_train = split_supervised(
        &source_train,
        SupervisedSplit::Fraction(args.sup_frac_source),
        true,
        args.seed,
    )?;

    let target_plain =
        generate_moons(args.minority, args.majority, args.noise, args.seed + 1, "target")?;
    let target_full = Dataset { x: shift_target(&target_plain.x)?, ..target_plain };
    let (target_train, target_test) = split_train_test(&target_full, args.seed + 1);
    let target_train = split_supervised(
        &target_train,
        SupervisedSplit::Fraction(args.sup_frac_target),
        true,
        args.seed + 1,
    )?;

    for (ds, path) in [&source_train, &source_test, &target_train, &target_test]
        .iter()
        .zip(&files)
    {
        write_csv(ds, path)?;
    }

    let mut config = String::new();
    for (k, v) in [
        ("experiment", args.experiment.clone()),
        ("majority", args.majority.to_string()),
        ("minority", args.minority.to_string()),
        ("noise", args.noise.to_string()),
        ("sup_frac_source", args.sup_frac_source.to_string()),
        ("sup_frac_target", args.sup_frac_target.to_string()),
    ] {
        let _ = writeln!(config, "{} = {}", k, v);
    }
    let mut datasets = BTreeMap::new();
    for p in &files {
        datasets.insert(p.display().to_string(), ioutil::sha256_file(p)?);
    }
    let manifest = RunManifest {
        command: "gen-data".into(),
        code_version: code_version(),
        seed: args.seed,
        config,
        datasets,
        outputs: all.iter().map(|p| p.display().to_string()).collect(),
    };
    write_manifest(&manifest, &manifest_path)?;

    for p in &all {
        println!("wrote {}", p.display());
    }
    println!(
        "source {} train / {} test rows ({} supervised); target {} train / {} test rows ({} supervised)",
        source_train.len(),
        source_test.len(),
        source_train.supervised_indices().len(),
        target_train.len(),
        target_test.len(),
        target_train.supervised_indices().len(),
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

fn load_config_dataset(path: &Path, class_count: usize, domain: &str) -> Result<Dataset> {
    load_csv_features(path, "label", &index_class_names(class_count), domain)
}

/// The split the report scores a domain on: the held-out file when the
/// config names one, otherwise the supervised training rows.
fn eval_split(
    train: &Dataset,
    eval_path: Option<&Path>,
    class_count: usize,
    domain: &str,
) -> Result<(Dataset, String)> {
    match eval_path {
        Some(p) => Ok((load_config_dataset(p, class_count, domain)?, p.display().to_string())),
        None => Ok((train.select(&train.supervised_indices()), "training supervised rows".into())),
    }
}

fn report_on(models: &[DvtModel], ds: &Dataset, domain: &str) -> Result<EvalReport> {
    let y_true = ds.true_labels()?;
    let preds = if models.len() == 1 {
        argmax_rows(&models[0].predict_probs(domain, &ds.x)?)
    } else {
        ensemble_predict(models, domain, &ds.x)?.0
    };
    evaluate(&y_true, &preds, ds.class_count, None)
}

fn print_report(domain: &str, scored_on: &str, r: &EvalReport) {
    println!(
        "{} ({}): accuracy {:.4}, unweighted mean F1 {:.4}",
        domain, scored_on, r.accuracy, r.mean_f1
    );
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let raw = std::fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
    let spec = TrainSpec::parse(&raw)?;
    let base = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();

    let mut cfg = spec.cfg.clone();
    let ensemble = args.ensemble.is_some();
    if let Some(n) = args.ensemble {
        cfg.ensemble_size = n;
    }
    cfg.validate()?;

    let from_checkpoint = args
        .from_checkpoint
        .clone()
        .or_else(|| spec.from_checkpoint.as_ref().map(|p| resolve(&base, p)));
    if spec.regime == Regime::Transfer && from_checkpoint.is_none() {
        return Err(Error::Config(
            "regime transfer needs a starting checkpoint; pass --from-checkpoint".into(),
        ));
    }

    let source = spec
        .source
        .as_ref()
        .map(|p| load_config_dataset(&resolve(&base, p), spec.class_count, &spec.source_domain))
        .transpose()?;
    let target = spec
        .target
        .as_ref()
        .map(|p| load_config_dataset(&resolve(&base, p), spec.class_count, &spec.target_domain))
        .transpose()?;

    // The starting model: fresh from the implied architecture, or the
    // transfer base checkpoint (whose architecture must already contain the
    // target domain).
    let (arch, base_model) = match spec.regime {
        Regime::Transfer => {
            let path = from_checkpoint.as_ref().expect("checked above");
            let (model, _) = load_checkpoint(path)?;
            let t = target.as_ref().expect("checked by parse");
            let di = model.domain_index(&t.domain_id)?;
            let want = model.domains[di].spec.input_dim;
            if t.dim() != want {
                return Err(Error::Data(format!(
                    "dataset '{}' is {}-dimensional but domain '{}' expects {}",
                    t.domain_id,
                    t.dim(),
                    t.domain_id,
                    want
                )));
            }
            (model.arch.clone(), Some(model))
        }
        _ => {
            let arch = spec.arch(source.as_ref().map(Dataset::dim), target.as_ref().map(Dataset::dim))?;
            (arch, None)
        }
    };

    // Record provenance before any training happens.
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut datasets = BTreeMap::new();
    for p in [&spec.source, &spec.target, &spec.source_eval, &spec.target_eval]
        .into_iter()
        .flatten()
    {
        let full = resolve(&base, p);
        datasets.insert(full.display().to_string(), ioutil::sha256_file(&full)?);
    }
    if let Some(p) = &from_checkpoint {
        datasets.insert(p.display().to_string(), ioutil::sha256_file(p)?);
    }
    let checkpoint_names: Vec<String> = if ensemble {
        (0..cfg.ensemble_size).map(|i| format!("checkpoint_{}.json", i)).collect()
    } else {
        vec!["checkpoint.json".into()]
    };
    let trace_names: Vec<String> = if ensemble {
        (0..cfg.ensemble_size).map(|i| format!("trace_{}.csv", i)).collect()
    } else {
        vec!["trace.csv".into()]
    };
    let mut outputs: Vec<String> = checkpoint_names
        .iter()
        .chain(trace_names.iter())
        .map(|n| args.out.join(n).display().to_string())
        .collect();
    outputs.push(args.out.join("report.json").display().to_string());
    let manifest = RunManifest {
        command: "train".into(),
        code_version: code_version(),
        seed: cfg.seed,
        config: raw.clone(),
        datasets,
        outputs,
    };
    write_manifest(&manifest, &args.out.join("manifest.json"))?;

    // Train.
    let trained: Vec<(DvtModel, Vec<TraceRow>)> = if ensemble {
        let (train_ds, target_ds): (&Dataset, Option<&Dataset>) = match spec.regime {
            Regime::SemiSupervised => (source.as_ref().expect("checked"), None),
            Regime::Transfer => (target.as_ref().expect("checked"), None),
            Regime::MultiTask => (source.as_ref().expect("checked"), target.as_ref()),
        };
        train_ensemble(&arch, &cfg, train_ds, target_ds, base_model.as_ref())?
    } else {
        let one = match spec.regime {
            Regime::SemiSupervised => train_semi_supervised(
                build_model(&arch, cfg.seed)?,
                source.as_ref().expect("checked"),
                &cfg,
            )?,
            Regime::Transfer => train_transfer(
                base_model.expect("checked above"),
                target.as_ref().expect("checked"),
                &cfg,
            )?,
            Regime::MultiTask => train_multi_task(
                build_model(&arch, cfg.seed)?,
                source.as_ref().expect("checked"),
                target.as_ref().expect("checked"),
                &cfg,
            )?,
        };
        vec![one]
    };

    for ((model, trace), (ck_name, tr_name)) in
        trained.iter().zip(checkpoint_names.iter().zip(&trace_names))
    {
        let meta = CheckpointMeta { seed: cfg.seed, regime: spec.regime.to_string() };
        save_checkpoint(model, &meta, &args.out.join(ck_name))?;
        write_trace_csv(trace, &args.out.join(tr_name))?;
    }
    let models: Vec<DvtModel> = trained.iter().map(|(m, _)| m.clone()).collect();

    // Score the trained domains.
    let mut reports: BTreeMap<String, EvalReport> = BTreeMap::new();
    let mut scored_on: Vec<(String, String)> = Vec::new();
    if spec.regime != Regime::Transfer {
        let src = source.as_ref().expect("checked");
        let (ds, label) = eval_split(
            src,
            spec.source_eval.as_ref().map(|p| resolve(&base, p)).as_deref(),
            spec.class_count,
            &spec.source_domain,
        )?;
        reports.insert(spec.source_domain.clone(), report_on(&models, &ds, &spec.source_domain)?);
        scored_on.push((spec.source_domain.clone(), label));
    }
    if spec.regime != Regime::SemiSupervised {
        let tgt = target.as_ref().expect("checked");
        let (ds, label) = eval_split(
            tgt,
            spec.target_eval.as_ref().map(|p| resolve(&base, p)).as_deref(),
            spec.class_count,
            &spec.target_domain,
        )?;
        reports.insert(spec.target_domain.clone(), report_on(&models, &ds, &spec.target_domain)?);
        scored_on.push((spec.target_domain.clone(), label));
    }
    let mut bytes = serde_json::to_vec_pretty(&reports)?;
    bytes.push(b'\n');
    ioutil::write_atomic(&args.out.join("report.json"), &bytes)?;

    let last = trained[0].1.last().expect("at least one step");
    println!(
        "trained {} for {} steps (final total loss {:.6})",
        spec.regime,
        trained[0].1.len(),
        last.total
    );
    for (domain, label) in &scored_on {
        print_report(domain, label, &reports[domain]);
    }
    println!("outputs in {}", args.out.display());
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

/// All `checkpoint*.json` members of an ensemble directory, in file-name
/// order so the average is deterministic.
fn load_ensemble_dir(dir: &Path) -> Result<Vec<DvtModel>> {
    let mut paths = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("checkpoint") && name.ends_with(".json") {
            paths.push(entry.path());
        }
    }
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "{}: no checkpoint*.json files to ensemble",
            dir.display()
        )));
    }
    paths.sort();
    paths.iter().map(|p| Ok(load_checkpoint(p)?.0)).collect()
}

fn format_float(v: f64) -> String {
    // Shortest round-trip form, matching the dataset writer.
    v.to_string()
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let models = match (&args.checkpoint, &args.ensemble) {
        (Some(p), None) => vec![load_checkpoint(p)?.0],
        (None, Some(dir)) => load_ensemble_dir(dir)?,
        _ => return Err(Error::Config("pass exactly one of --checkpoint or --ensemble".into())),
    };
    let k = models[0].arch.class_count;
    let ds = load_csv_features(&args.data, "label", &index_class_names(k), &args.domain)?;

    // Compatibility: the domain must exist and the widths must agree.
    let di = models[0].domain_index(&args.domain)?;
    let want = models[0].domains[di].spec.input_dim;
    if ds.dim() != want {
        return Err(Error::Data(format!(
            "{} is {}-dimensional but domain '{}' expects {}",
            args.data.display(),
            ds.dim(),
            args.domain,
            want
        )));
    }
    let y_true = ds.true_labels()?;

    let probs: Tensor = if models.len() == 1 {
        models[0].predict_probs(&args.domain, &ds.x)?
    } else {
        ensemble_predict(&models, &args.domain, &ds.x)?.1
    };
    let preds = argmax_rows(&probs);
    let entropy = prediction_entropy(&probs)?;
    let report = evaluate(&y_true, &preds, k, None)?;

    if let Some(dump) = &args.entropy_dump {
        let mut out = String::new();
        for d in 0..ds.dim() {
            let _ = write!(out, "x{},", d);
        }
        out.push_str("true,pred,entropy\n");
        for i in 0..ds.len() {
            for v in ds.x.row(i) {
                let _ = write!(out, "{},", format_float(*v));
            }
            let _ = writeln!(out, "{},{},{}", y_true[i], preds[i], format_float(entropy[i]));
        }
        ioutil::write_atomic(dump, out.as_bytes())?;
        println!("wrote {}", dump.display());
    }

    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    ioutil::write_atomic(&args.out, &bytes)?;

    let members = models.len();
    let source_desc = if members == 1 {
        "checkpoint".to_string()
    } else {
        format!("ensemble of {}", members)
    };
    print_report(&args.domain, &source_desc, &report);
    for (c, f1) in report.f1.iter().enumerate() {
        println!("  class {}: precision {:.4}, recall {:.4}, F1 {:.4}", c, report.precision[c], report.recall[c], f1);
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

// ── verify ──────────────────────────────────────────────────────────────

fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    if args.sweep == 0 {
        return Err(Error::Config("--sweep must be >= 1".into()));
    }
    let mut failed = Vec::new();
    let mut total = 0usize;
    for pass in 0..args.sweep {
        // Stride by the gradient seed count so no two passes share a seed.
        let cfg = VerifyConfig {
            tolerance: args.tolerance,
            base_seed: args.seed + pass * args.grad_seeds.max(1),
            grad_seeds: args.grad_seeds,
            mc_samples: args.mc_samples,
        };
        let lines = verify::run_all(&cfg)?;
        for line in &lines {
            if args.sweep > 1 {
                println!("[pass {}] {}", pass, line.render());
            } else {
                println!("{}", line.render());
            }
            total += 1;
            if !line.passed {
                failed.push(line.name.clone());
            }
        }
    }
    if failed.is_empty() {
        println!("ok: all {} checks passed", total);
        Ok(())
    } else {
        Err(Error::Verify(format!(
            "{} of {} checks failed: {}",
            failed.len(),
            total,
            failed.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = "\
# demo config
regime = multi_task
class_count = 2
likelihood = gaussian
source = data/source_train.csv
target = data/target_train.csv
source_eval = data/source_test.csv
target_eval = data/target_test.csv
gamma = 0.2
rho = 100
eta = 0.5
tau = 0.5
learning_rate = 0.005
beta1 = 0.5
beta2 = 0.5
epsilon = 0.001
steps = 100
sup_batch_size = 64
unsup_batch_size = 32
seed = 7
early_stop = cycle_consistency
patience = 3
eval_every = 20
latent_dim = 8
shared_hidden = 16,16
domain_hidden = 16
shared_classifier = false
mu_scale = 10
prior_sigma = 0.1
";

    #[test]
    fn parses_every_documented_key() {
        let spec = TrainSpec::parse(FULL).unwrap();
        assert_eq!(spec.regime, Regime::MultiTask);
        assert_eq!(spec.class_count, 2);
        assert_eq!(spec.cfg.weights.gamma, 0.2);
        assert_eq!(spec.cfg.weights.rho, 100.0);
        assert_eq!(spec.cfg.steps, 100);
        assert_eq!(spec.cfg.seed, 7);
        assert_eq!(
            spec.cfg.early_stop,
            EarlyStop::CycleConsistency { patience: 3, eval_every: 20 }
        );
        assert_eq!(spec.latent_dim, Some(8));
        assert_eq!(spec.shared_hidden, Some(vec![16, 16]));
        assert_eq!(spec.domain_hidden, Some(vec![16]));
        assert_eq!(spec.source, Some(PathBuf::from("data/source_train.csv")));
        spec.cfg.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = TrainSpec::parse("regime = semi_supervised\nclass_count = 2\nsource = a.csv\nlerning_rate = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("unknown key 'lerning_rate'"), "{}", err);
        assert!(err.contains("line 4"), "{}", err);
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = TrainSpec::parse("regime = semi_supervised\nregime = transfer\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("duplicate key 'regime'"), "{}", err);
    }

    #[test]
    fn bad_value_names_key_and_value() {
        let err =
            TrainSpec::parse("regime = semi_supervised\nclass_count = 2\nsource = a.csv\nsteps = soon\n")
                .unwrap_err()
                .to_string();
        assert!(err.contains("'steps'") && err.contains("'soon'"), "{}", err);
    }

    #[test]
    fn missing_regime_and_missing_datasets_are_rejected() {
        assert!(TrainSpec::parse("class_count = 2\n").unwrap_err().to_string().contains("regime"));
        let err = TrainSpec::parse("regime = transfer\nclass_count = 2\n").unwrap_err().to_string();
        assert!(err.contains("'target'"), "{}", err);
        let err = TrainSpec::parse("regime = multi_task\nclass_count = 2\nsource = a.csv\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("source") && err.contains("target"), "{}", err);
    }

    #[test]
    fn defaults_fill_unspecified_keys() {
        let spec =
            TrainSpec::parse("regime = semi_supervised\nclass_count = 2\nsource = a.csv\n").unwrap();
        let dflt = TrainConfig::default();
        assert_eq!(spec.cfg.learning_rate, dflt.learning_rate);
        assert_eq!(spec.cfg.steps, dflt.steps);
        assert_eq!(spec.cfg.weights, dflt.weights);
        assert_eq!(spec.cfg.early_stop, EarlyStop::Off);
        assert_eq!(spec.likelihood, Likelihood::Gaussian);
        assert_eq!(spec.source_domain, "source");
        assert_eq!(spec.target_domain, "target");
        assert!(spec.latent_dim.is_none() && spec.shared_hidden.is_none());
    }

    #[test]
    fn manifest_serialization_is_deterministic() {
        let mut datasets = BTreeMap::new();
        datasets.insert("b.csv".to_string(), "beef".to_string());
        datasets.insert("a.csv".to_string(), "feed".to_string());
        let m = RunManifest {
            command: "train".into(),
            code_version: code_version(),
            seed: 3,
            config: "regime = semi_supervised\n".into(),
            datasets,
            outputs: vec!["out/checkpoint.json".into()],
        };
        let a = serde_json::to_vec_pretty(&m).unwrap();
        let b = serde_json::to_vec_pretty(&m).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        // Sorted map keys and no timestamps anywhere.
        assert!(text.find("a.csv").unwrap() < text.find("b.csv").unwrap());
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.seed, 3);
        assert_eq!(back.config, m.config);
    }

    #[test]
    fn code_version_carries_package_and_source_hash() {
        let v = code_version();
        let (pkg, hash) = v.split_once('+').unwrap();
        assert_eq!(pkg, env!("CARGO_PKG_VERSION"));
        assert_eq!(hash.len(), 16);
        assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        assert_eq!(
            resolve(Path::new("configs"), Path::new("data/x.csv")),
            PathBuf::from("configs/data/x.csv")
        );
        assert_eq!(resolve(Path::new("configs"), Path::new("/abs/x.csv")), PathBuf::from("/abs/x.csv"));
    }

    #[test]
    fn arch_sizes_domains_from_present_datasets() {
        let spec =
            TrainSpec::parse("regime = semi_supervised\nclass_count = 2\nsource = a.csv\nlatent_dim = 6\n")
                .unwrap();
        let arch = spec.arch(Some(2), None).unwrap();
        assert_eq!(arch.domains.len(), 1);
        assert_eq!(arch.domains[0].id, "source");
        assert_eq!(arch.latent_dim, 6);
        let arch = spec.arch(Some(2), Some(3)).unwrap();
        assert_eq!(arch.domains.len(), 2);
        assert_eq!(arch.domains[1].input_dim, 3);
        assert!(spec.arch(None, None).is_err());
    }
}
