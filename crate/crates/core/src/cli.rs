//! The `rds` command line.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_grid, figure2_toy, transfer_matrix, ArchSpec, RunReport};
use crate::io::{read_dataset, records, write_atomic, write_dataset, write_model};
use crate::learn::{adversarially_train_reference, baseline_adv_dataset, learn_robust_dataset};
use crate::models::{sgd_train, Architecture};
use crate::rng::RngStream;
use crate::theory::{sample, verify_theory, DistributionSpec};

/// Prints a line to stdout, ignoring closed pipes.
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "rds", version, about = "Robust dataset learning and theory checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON); defaults apply to anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed; RDS_SEED is used when absent.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Checks the closed-form results against training runs; exit 2 on failure.
    TheoryVerify,
    /// Samples the natural dataset and learns the robust one.
    Learn,
    /// Adversarial datasets of a natural and of an adversarially trained classifier.
    Baseline {
        /// Natural dataset to attack; sampled from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Naturally trains fresh classifiers on a dataset and attacks them.
    Evaluate {
        /// Defaults to `<out>/robust.rds`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Architecture-by-seed grid at the configured budget.
    Transfer {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Natural-data control evaluated on the same grid.
        #[arg(long)]
        control: Option<PathBuf>,
    },
    /// The 2-D toy: robust classifier vs. a classifier trained on its adversarial examples.
    ToyFig2,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let env_seed = match std::env::var("RDS_SEED") {
        Ok(v) => match v.trim().parse::<u64>() {
            Ok(s) => Some(s),
            Err(_) => {
                eprintln!("error: RDS_SEED={v:?} is not an unsigned integer");
                return EXIT_USAGE;
            }
        },
        Err(_) => None,
    };
    match execute(&cli, cli.seed.or(env_seed)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    hash: String,
    out: PathBuf,
    root: RngStream,
}

impl Ctx {
    fn stamp(&self) -> Value {
        json!({ "config_hash": self.hash, "seed": self.cfg.seed })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        write_atomic(&p, text.as_bytes())?;
        say!("wrote={}", p.display());
        Ok(())
    }

    fn write_data(&self, name: &str, ds: &Dataset) -> Result<()> {
        let mut ds = ds.clone();
        let stamp = self.stamp();
        if let (Some(obj), Some(s)) = (ds.provenance_mut().as_object_mut(), stamp.as_object()) {
            obj.extend(s.clone());
            obj.insert("config".into(), self.cfg.canonical());
        }
        let p = self.path(name);
        write_dataset(&p, &ds)?;
        say!("wrote={}", p.display());
        Ok(())
    }

    fn write_report(&self, stem: &str, report: &RunReport) -> Result<()> {
        let mut r = report.clone();
        r.insert_provenance("config_hash", json!(self.hash));
        r.insert_provenance("seed", json!(self.cfg.seed));
        self.write_text(&format!("{stem}.csv"), &r.to_csv())?;
        self.write_text(&format!("{stem}.json"), &r.to_json())?;
        say!("{stem}.fingerprint={}", r.fingerprint());
        Ok(())
    }

    fn natural_dataset(&self) -> Result<Dataset> {
        let d = &self.cfg.distribution;
        sample(&d.spec(), d.n_train, &mut self.root.derive(1))
    }

    fn learner_arch(&self, width: usize, classes: usize) -> Architecture {
        ArchSpec::mlp(&self.cfg.model.hidden).resolve(width, classes)
    }
}

fn execute(cli: &Cli, seed: Option<u64>) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.theory.separation.seed = cfg.seed;
    cfg.toy.seed = cfg.seed;
    let ctx = Ctx {
        hash: cfg.hash(),
        root: RngStream::new(cfg.seed),
        out: cli.out.clone(),
        cfg,
    };
    say!("config_hash={}", ctx.hash);
    say!("seed={}", ctx.cfg.seed);
    match &cli.command {
        Command::TheoryVerify => theory_verify(&ctx),
        Command::Learn => learn(&ctx),
        Command::Baseline { dataset } => baseline(&ctx, dataset.as_deref()),
        Command::Evaluate { dataset } => evaluate(&ctx, dataset.as_deref()),
        Command::Transfer { dataset, control } => transfer(&ctx, dataset.as_deref(), control.as_deref()),
        Command::ToyFig2 => toy(&ctx),
    }
}

fn theory_verify(ctx: &Ctx) -> Result<i32> {
    let report = verify_theory(&ctx.cfg.theory)?;
    let mut doc = serde_json::to_value(&report).expect("report serializes");
    if let Some(obj) = doc.as_object_mut() {
        obj.insert("config_hash".into(), json!(ctx.hash));
        obj.insert("seed".into(), json!(ctx.cfg.seed));
    }
    let summary = json!({
        "natural_svm.natural_acc": report.separation.natural.natural_acc,
        "natural_svm.robust_acc": report.separation.natural.robust_acc,
        "natural_svm.epsilon": report.separation.natural.epsilon,
        "star_svm.natural_acc": report.separation.star.natural_acc,
        "star_svm.robust_acc": report.separation.star.robust_acc,
        "star_svm.epsilon": report.separation.star.epsilon,
        "check.lemma1_regime": report.separation.natural_regime,
        "check.theorem2_regime": report.separation.star_regime,
        "check.theorem1_structure": report.separation.star_structure,
        "check.weight_lemmas": report.separation.natural_structure,
        "check.lemma2_oracle": report.lemma2.passed,
        "check.closed_form_monte_carlo": report.closed_form.passed,
        "check.symmetric_sum": report.symmetric_sum.symmetric,
        "separation": report.separation.passed(),
        "passed": report.passed,
    });
    for line in records(&summary) {
        say!("{line}");
    }
    ctx.write_text("theory_report.json", &serde_json::to_string_pretty(&doc).expect("json"))?;
    ctx.write_text("theory_report.txt", &(records(&doc).join("\n") + "\n"))?;
    Ok(if report.passed { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn learn(ctx: &Ctx) -> Result<i32> {
    let natural = ctx.natural_dataset()?;
    let arch = ctx.learner_arch(natural.width(), natural.num_classes());
    let out = learn_robust_dataset(&natural, &arch, &ctx.cfg.robust_learn(), &ctx.root.derive(2))?;
    ctx.write_data("natural.rds", &natural)?;
    ctx.write_data("robust.rds", &out.dataset)?;
    ctx.write_text("learn_trace.csv", &out.trace.to_csv())?;
    let p = ctx.path("learn_model.rdm");
    write_model(&p, &out.model, &ctx.stamp())?;
    say!("wrote={}", p.display());
    if let (Some(first), Some(last)) = (out.trace.adv_loss.first(), out.trace.adv_loss.last()) {
        say!("adv_loss.first={first}");
        say!("adv_loss.last={last}");
    }
    Ok(EXIT_OK)
}

fn baseline(ctx: &Ctx, dataset: Option<&Path>) -> Result<i32> {
    let natural = match dataset {
        Some(p) => read_dataset(p)?,
        None => ctx.natural_dataset()?,
    };
    let arch = ctx.learner_arch(natural.width(), natural.num_classes());
    let train = &ctx.cfg.model.train;
    let init = arch.init(&mut RngStream::new(train.seed));
    let attack = ctx.cfg.attack();
    let natural_model = sgd_train(&init, &natural, train, arch.default_loss())?.model;
    let robust_model = adversarially_train_reference(&init, &natural, &attack, train, &ctx.root.derive(3))?.model;
    let adv_nat = baseline_adv_dataset(&natural_model, &natural, &attack, &ctx.root.derive(4))?;
    let adv_rob = baseline_adv_dataset(&robust_model, &natural, &attack, &ctx.root.derive(5))?;
    ctx.write_data("adv_natural.rds", &adv_nat)?;
    ctx.write_data("adv_robust.rds", &adv_rob)?;
    for (name, m) in [("natural_model.rdm", &natural_model), ("robust_model.rdm", &robust_model)] {
        let p = ctx.path(name);
        write_model(&p, m, &ctx.stamp())?;
        say!("wrote={}", p.display());
    }
    Ok(EXIT_OK)
}

/// The clean distribution a dataset was ultimately generated from.
pub fn source_distribution(provenance: &Value) -> Option<DistributionSpec> {
    if let Some(d) = provenance.get("distribution") {
        if let Ok(spec) = serde_json::from_value(d.clone()) {
            return Some(spec);
        }
    }
    provenance.get("source").and_then(source_distribution)
}

fn test_set(ctx: &Ctx, ds: &Dataset) -> Result<Dataset> {
    let spec = source_distribution(ds.provenance())
        .ok_or_else(|| Error::data("dataset provenance does not name its source distribution"))?;
    sample(&spec, ctx.cfg.eval.n_test, &mut ctx.root.derive(ctx.cfg.eval.test_seed))
}

/// File name and content digest; independent of the output directory.
fn file_identity(p: &Path) -> Result<Value> {
    let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
    let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    Ok(json!({
        "name": p.file_name().map(|n| n.to_string_lossy().into_owned()),
        "sha256": digest,
    }))
}

fn stem_of(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
}

fn evaluate(ctx: &Ctx, dataset: Option<&Path>) -> Result<i32> {
    let path = dataset.map(Path::to_path_buf).unwrap_or_else(|| ctx.path("robust.rds"));
    let ds = read_dataset(&path)?;
    let test = test_set(ctx, &ds)?;
    let e = &ctx.cfg.eval;
    let mut report = evaluate_grid(
        &ds,
        &test,
        &e.architectures,
        &e.seeds,
        &ctx.cfg.budgets(),
        &ctx.cfg.attack(),
        &e.train,
        &ctx.root.derive(6),
    )?;
    report.insert_provenance("dataset_file", file_identity(&path)?);
    ctx.write_report(&format!("{}_report", stem_of(&path)), &report)?;
    for b in ctx.cfg.budgets() {
        say!("mean_robust_acc@{b}={}", report.mean_robust(b));
    }
    Ok(EXIT_OK)
}

fn transfer(ctx: &Ctx, dataset: Option<&Path>, control: Option<&Path>) -> Result<i32> {
    let path = dataset.map(Path::to_path_buf).unwrap_or_else(|| ctx.path("robust.rds"));
    let mut runs = vec![("transfer", path)];
    if let Some(c) = control {
        runs.push(("control", c.to_path_buf()));
    }
    let e = &ctx.cfg.eval;
    let attack = ctx.cfg.attack();
    for (name, p) in runs {
        let ds = read_dataset(&p)?;
        let test = test_set(ctx, &ds)?;
        let mut report = transfer_matrix(&ds, &test, &e.architectures, &e.seeds, &attack, &e.train, &ctx.root.derive(7))?;
        report.insert_provenance("dataset_file", file_identity(&p)?);
        ctx.write_report(&format!("{name}_report"), &report)?;
        say!("{name}.mean_robust_acc={}", report.mean_robust(attack.epsilon));
    }
    Ok(EXIT_OK)
}

fn toy(ctx: &Ctx) -> Result<i32> {
    let out = figure2_toy(&ctx.cfg.toy, &ctx.root.derive(8))?;
    ctx.write_text("toy_points.csv", &out.points_csv())?;
    ctx.write_report("toy_report", &out.report)?;
    for c in &out.report.cells {
        say!("{}.natural_acc={}", c.arch, c.natural_acc);
        say!("{}.robust_acc={}", c.arch, c.robust_acc);
    }
    say!("robust_gap={}", out.robust_gap());
    say!("angle_degrees={}", out.angle_degrees);
    Ok(EXIT_OK)
}
