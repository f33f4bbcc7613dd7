//! Command-line front end: dataset generation, training, aggregation,
//! identification / verification evaluation and gradient checking.
//!
//! Every run prints its effective configuration and writes the same lines to
//! a `config.txt` next to its outputs, so artifacts are self-describing and
//! reproducible from the seed alone.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rean::aggregator::{
    avg_pool, AggregationMethod, AggregatorParams, FrameEmbeddingSet, QualityMlpParams,
    TemplateRepresentation,
};
use rean::data::{
    generate_synthetic, plan_splits, read_template, write_dataset, write_template,
    DatasetManifest, Split, SplitPlan, SyntheticDatasetSpec,
};
use rean::error::{Error, Result};
use rean::eval::{
    closed_set_identification, context_filtered_aggregate, open_set_identification,
    render_identification, render_open_set, render_verification, similarity_score,
    verification_kfold, ScoredPair,
};
use rean::model_io::{load_model, save_model};
use rean::numerics::Matrix;
use rean::training::{
    fit, full_gradient_check, BatchSpec, FitOptions, Model, TripletLossConfig,
};

#[derive(Parser)]
#[command(name = "rean", about = "Set-to-one embedding aggregation toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding dataset with a manifest
    Gen(GenArgs),
    /// Train an aggregation model on a manifest's train/val splits
    Train(TrainArgs),
    /// Aggregate one template file into a single representation
    Aggregate(AggregateArgs),
    /// Closed- and open-set identification over a manifest
    EvalIdentify(EvalIdentifyArgs),
    /// K-fold verification over probe-template pairs
    EvalVerify(EvalVerifyArgs),
    /// Finite-difference check of the analytic gradients
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 20)]
    subjects: usize,
    #[arg(long, default_value_t = 4)]
    templates: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Fraction of each template's frames that are near-duplicates
    #[arg(long, default_value_t = 0.75)]
    redundancy: f64,
    #[arg(long, default_value_t = 0.05)]
    clean_sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    corrupt_sigma: f64,
    #[arg(long, default_value_t = 1e-3)]
    jitter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Subjects assigned to train/val; the rest are held out (default: 80%)
    #[arg(long)]
    train_subjects: Option<usize>,
    /// Trailing templates per training subject used for validation
    #[arg(long, default_value_t = 1)]
    val_templates: usize,
    /// Held-out subjects enrolled in the gallery (default: all but ~20%)
    #[arg(long)]
    gallery_subjects: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the trained model
    #[arg(long)]
    out: PathBuf,
    /// rean | quality | naive_lstm
    #[arg(long, default_value = "rean")]
    method: String,
    /// LSTM hidden size (also the quality MLP hidden width)
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 3.0)]
    margin: f64,
    #[arg(long, default_value_t = 16)]
    subjects_per_batch: usize,
    #[arg(long, default_value_t = 3)]
    templates_per_subject: usize,
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long, default_value_t = 5.0)]
    clip_norm: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AggregateArgs {
    /// rean | avg | quality | naive_lstm | context_filter
    #[arg(long)]
    method: String,
    /// Model file, or "none" for parameter-free methods
    #[arg(long, default_value = "none")]
    model: String,
    #[arg(long, name = "in")]
    r#in: PathBuf,
    /// Output representation file (single-row template format)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalIdentifyArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// rean | avg | quality | naive_lstm | context_filter
    #[arg(long)]
    method: String,
    #[arg(long, default_value = "none")]
    model: String,
    /// Aggregation for gallery templates (enrollment stills)
    #[arg(long, default_value = "avg")]
    gallery_method: String,
    /// Comma-separated rank-k operating points
    #[arg(long, default_value = "1,5,10")]
    ks: String,
    /// Comma-separated FPIR targets for open-set scoring
    #[arg(long, default_value = "0.01,0.1")]
    fpir: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalVerifyArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    method: String,
    #[arg(long, default_value = "none")]
    model: String,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Seed for impostor-pair sampling and pair order
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    hidden: usize,
    #[arg(long, default_value_t = 3)]
    frames: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// rean | quality | naive_lstm
    #[arg(long, default_value = "rean")]
    method: String,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

/// Effective-configuration echo: printed to stdout and written to
/// `config.txt` in the output directory.
struct ConfigEcho {
    lines: Vec<String>,
}

impl ConfigEcho {
    fn new(subcommand: &str) -> Self {
        ConfigEcho {
            lines: vec![format!("subcommand = {subcommand}")],
        }
    }

    fn set(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.lines.push(format!("{key} = {value}"));
        self
    }

    fn emit(&self, dir: &Path) -> Result<()> {
        let text = self.lines.join("\n") + "\n";
        print!("{text}");
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), text)?;
        Ok(())
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} entry '{p}'")))
        })
        .collect()
}

fn run_gen(args: &GenArgs) -> Result<()> {
    let train_subjects = args
        .train_subjects
        .unwrap_or_else(|| (args.subjects * 4 / 5).max(1).min(args.subjects));
    let heldout = args.subjects - train_subjects;
    let gallery_subjects = args
        .gallery_subjects
        .unwrap_or_else(|| heldout.saturating_sub((heldout + 4) / 5));
    let val_templates = if args.templates > 1 { args.val_templates } else { 0 };

    let mut echo = ConfigEcho::new("gen");
    echo.set("subjects", args.subjects)
        .set("templates", args.templates)
        .set("frames", args.frames)
        .set("dim", args.dim)
        .set("redundancy", args.redundancy)
        .set("clean_sigma", args.clean_sigma)
        .set("corrupt_sigma", args.corrupt_sigma)
        .set("jitter", args.jitter)
        .set("seed", args.seed)
        .set("train_subjects", train_subjects)
        .set("val_templates", val_templates)
        .set("gallery_subjects", gallery_subjects)
        .set("out", args.out.display());
    echo.emit(&args.out)?;

    let spec = SyntheticDatasetSpec {
        num_subjects: args.subjects,
        templates_per_subject: args.templates,
        frames_per_template: args.frames,
        dim: args.dim,
        clean_sigma: args.clean_sigma,
        corrupt_sigma: args.corrupt_sigma,
        redundancy_ratio: args.redundancy,
        duplicate_jitter: args.jitter,
        seed: args.seed,
    };
    let ds = generate_synthetic(&spec)?;
    let plan = SplitPlan {
        train_subjects,
        val_templates_per_subject: val_templates,
        gallery_subjects,
    };
    let assignments = plan_splits(&ds, &plan)?;
    let manifest = write_dataset(&args.out, &assignments)?;
    println!("wrote {} templates under {}", manifest.entries.len(), args.out.display());
    Ok(())
}

fn build_model(method: &str, dim: usize, hidden: usize, seed: u64) -> Result<Model<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match method.parse::<AggregationMethod>()? {
        AggregationMethod::Rean => Model::Rean(AggregatorParams::init(dim, hidden, &mut rng)),
        AggregationMethod::Quality => {
            Model::QualityPool(QualityMlpParams::init(dim, hidden, &mut rng))
        }
        AggregationMethod::NaiveLstm => {
            Model::NaiveLstm(AggregatorParams::init(dim, hidden, &mut rng))
        }
        other => {
            return Err(Error::Config(format!(
                "method '{other}' is not trainable"
            )))
        }
    })
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let out_dir = args.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut echo = ConfigEcho::new("train");
    echo.set("manifest", args.manifest.display())
        .set("out", args.out.display())
        .set("method", &args.method)
        .set("hidden", args.hidden)
        .set("epochs", args.epochs)
        .set("lr", args.lr)
        .set("margin", args.margin)
        .set("subjects_per_batch", args.subjects_per_batch)
        .set("templates_per_subject", args.templates_per_subject)
        .set("frames", args.frames)
        .set(
            "batches_per_epoch",
            args.batches_per_epoch
                .map(|v| v.to_string())
                .unwrap_or_else(|| "auto".into()),
        )
        .set("clip_norm", args.clip_norm)
        .set("seed", args.seed);
    echo.emit(&out_dir)?;

    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let manifest = DatasetManifest::read(&args.manifest)?;
    let train: Vec<FrameEmbeddingSet<f64>> = manifest.load_split(base, Split::Train)?;
    let val: Vec<FrameEmbeddingSet<f64>> = manifest.load_split(base, Split::Val)?;
    if train.is_empty() {
        return Err(Error::Insufficient("manifest has no train templates".into()));
    }
    let dim = train[0].dim();

    let mut model = build_model(&args.method, dim, args.hidden, args.seed)?;
    let spec = BatchSpec {
        subjects_per_batch: args.subjects_per_batch,
        templates_per_subject: args.templates_per_subject,
        frames_per_template: args.frames,
        seed: args.seed,
    };
    let cfg = TripletLossConfig { margin: args.margin };
    let opts = FitOptions {
        epochs: args.epochs,
        lr: args.lr,
        seed: args.seed,
        batches_per_epoch: args.batches_per_epoch,
        clip_norm: args.clip_norm,
        ..FitOptions::default()
    };
    let report = fit(&train, &val, &mut model, &spec, &cfg, &opts)?;

    let mut log = String::from("epoch\tmean_loss\thard_triplets\tval_loss\n");
    for e in 0..report.epoch_loss.len() {
        let val = report
            .val_loss
            .get(e)
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "-".into());
        log.push_str(&format!(
            "{e}\t{:.6}\t{}\t{val}\n",
            report.epoch_loss[e], report.epoch_hard[e]
        ));
    }
    print!("{log}");
    fs::write(out_dir.join("train.log"), &log)?;
    save_model(&args.out, &model)?;
    if let Some(check) = &report.gradcheck {
        println!("gradcheck max relative error = {:.3e}", check.max_relative_error);
    }
    println!("model written to {}", args.out.display());
    Ok(())
}

/// Load and L2-normalize one template, then aggregate it with the requested
/// method (empty templates become the zero vector for every method but
/// context_filter, which requires frames).
fn aggregate_one(
    set: &FrameEmbeddingSet<f64>,
    method: AggregationMethod,
    model: Option<&Model<f64>>,
) -> Result<TemplateRepresentation<f64>> {
    match method {
        AggregationMethod::Avg => Ok(avg_pool(set)),
        AggregationMethod::Rean | AggregationMethod::Quality | AggregationMethod::NaiveLstm => {
            let model = model.ok_or_else(|| {
                Error::Config(format!("method '{method}' requires --model"))
            })?;
            if model.method() != method {
                return Err(Error::Config(format!(
                    "model file holds a '{}' model, requested '{method}'",
                    model.method()
                )));
            }
            model.aggregate(set)
        }
        AggregationMethod::ContextFilter => {
            let model = model.ok_or_else(|| {
                Error::Config("context_filter requires a quality --model".into())
            })?;
            match model {
                Model::QualityPool(mlp) => {
                    if set.is_empty() {
                        let mut rep = avg_pool(set);
                        rep.method = AggregationMethod::ContextFilter;
                        return Ok(rep);
                    }
                    context_filtered_aggregate(set, mlp)
                }
                _ => Err(Error::Config(
                    "context_filter requires a quality-pool model file".into(),
                )),
            }
        }
    }
}

fn load_model_arg(arg: &str) -> Result<Option<Model<f64>>> {
    if arg == "none" {
        Ok(None)
    } else {
        Ok(Some(load_model(Path::new(arg))?))
    }
}

fn run_aggregate(args: &AggregateArgs) -> Result<()> {
    let out_dir = args.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut echo = ConfigEcho::new("aggregate");
    echo.set("method", &args.method)
        .set("model", &args.model)
        .set("in", args.r#in.display())
        .set("out", args.out.display());
    echo.emit(&out_dir)?;

    let method: AggregationMethod = args.method.parse()?;
    let model = load_model_arg(&args.model)?;
    let mut set: FrameEmbeddingSet<f64> = read_template(&args.r#in)?;
    set.normalize_frames();
    let rep = aggregate_one(&set, method, model.as_ref())?;
    let out_set = FrameEmbeddingSet::new(
        rep.template_id.clone(),
        rep.subject_id.clone(),
        Matrix::from_rows(&[rep.vector.clone()])?,
    );
    write_template(&args.out, &out_set)?;
    println!("representation written to {}", args.out.display());
    Ok(())
}

fn aggregate_split(
    manifest: &DatasetManifest,
    base: &Path,
    split: Split,
    method: AggregationMethod,
    model: Option<&Model<f64>>,
) -> Result<Vec<TemplateRepresentation<f64>>> {
    let sets: Vec<FrameEmbeddingSet<f64>> = manifest.load_split(base, split)?;
    sets.iter()
        .map(|s| aggregate_one(s, method, model))
        .collect()
}

fn run_eval_identify(args: &EvalIdentifyArgs) -> Result<()> {
    let mut echo = ConfigEcho::new("eval-identify");
    echo.set("manifest", args.manifest.display())
        .set("method", &args.method)
        .set("model", &args.model)
        .set("gallery_method", &args.gallery_method)
        .set("ks", &args.ks)
        .set("fpir", &args.fpir)
        .set("out", args.out.display());
    echo.emit(&args.out)?;

    let ks: Vec<usize> = parse_list(&args.ks, "rank")?;
    let fpir: Vec<f64> = parse_list(&args.fpir, "FPIR")?;
    let method: AggregationMethod = args.method.parse()?;
    let gallery_method: AggregationMethod = args.gallery_method.parse()?;
    let model = load_model_arg(&args.model)?;

    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let manifest = DatasetManifest::read(&args.manifest)?;
    let gallery = aggregate_split(&manifest, base, Split::Gallery, gallery_method, model.as_ref())?;
    let probes = aggregate_split(&manifest, base, Split::Probe, method, model.as_ref())?;
    if gallery.is_empty() || probes.is_empty() {
        return Err(Error::Protocol("manifest needs gallery and probe templates".into()));
    }

    let enrolled: std::collections::BTreeSet<&str> =
        gallery.iter().map(|g| g.subject_id.as_str()).collect();
    let mated: Vec<TemplateRepresentation<f64>> = probes
        .iter()
        .filter(|p| enrolled.contains(p.subject_id.as_str()))
        .cloned()
        .collect();
    let non_mated = probes.len() - mated.len();

    let mut out = String::new();
    let closed = closed_set_identification(&mated, &gallery, &ks)?;
    out.push_str(&render_identification(&closed));
    if non_mated > 0 {
        let open = open_set_identification(&probes, &gallery, &fpir)?;
        out.push_str(&render_open_set(&open));
    }
    print!("{out}");
    fs::write(args.out.join("results.tsv"), &out)?;
    println!(
        "scored {} mated / {non_mated} non-mated probes against {} gallery entries",
        mated.len(),
        gallery.len()
    );
    Ok(())
}

fn run_eval_verify(args: &EvalVerifyArgs) -> Result<()> {
    let mut echo = ConfigEcho::new("eval-verify");
    echo.set("manifest", args.manifest.display())
        .set("method", &args.method)
        .set("model", &args.model)
        .set("folds", args.folds)
        .set("seed", args.seed)
        .set("out", args.out.display());
    echo.emit(&args.out)?;

    let method: AggregationMethod = args.method.parse()?;
    let model = load_model_arg(&args.model)?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let manifest = DatasetManifest::read(&args.manifest)?;
    let reps = aggregate_split(&manifest, base, Split::Probe, method, model.as_ref())?;
    if reps.len() < 2 {
        return Err(Error::Protocol("need at least two probe templates".into()));
    }

    // all genuine pairs, an equal number of sampled impostor pairs,
    // interleaved so every fold sees both classes
    let mut genuine = Vec::new();
    let mut impostor_pool = Vec::new();
    for i in 0..reps.len() {
        for j in i + 1..reps.len() {
            if reps[i].subject_id == reps[j].subject_id {
                genuine.push((i, j));
            } else {
                impostor_pool.push((i, j));
            }
        }
    }
    if genuine.is_empty() || impostor_pool.is_empty() {
        return Err(Error::Protocol(
            "probe split must contain both genuine and impostor pairs".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let take = genuine.len().min(impostor_pool.len());
    let picks = rand::seq::index::sample(&mut rng, impostor_pool.len(), take);
    let mut pairs = Vec::with_capacity(2 * take);
    for (g, pi) in genuine.iter().take(take).zip(picks.iter()) {
        let im = impostor_pool[pi];
        pairs.push(ScoredPair {
            score: similarity_score(&reps[g.0], &reps[g.1])?,
            same: true,
        });
        pairs.push(ScoredPair {
            score: similarity_score(&reps[im.0], &reps[im.1])?,
            same: false,
        });
    }
    let res = verification_kfold(&pairs, args.folds)?;
    let out = render_verification(&res);
    print!("{out}");
    fs::write(args.out.join("results.tsv"), &out)?;
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let mut echo = ConfigEcho::new("gradcheck");
    echo.set("dim", args.dim)
        .set("hidden", args.hidden)
        .set("frames", args.frames)
        .set("seed", args.seed)
        .set("method", &args.method)
        .set("tolerance", args.tolerance);
    let text = echo.lines.join("\n") + "\n";
    print!("{text}");

    let model = build_model(&args.method, args.dim, args.hidden, args.seed)?;
    let mut rng = StdRng::seed_from_u64(args.seed.wrapping_add(1));
    let mut batch = Vec::new();
    for s in 0..2 {
        for t in 0..2 {
            let data: Vec<f64> = (0..args.frames * args.dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            batch.push(FrameEmbeddingSet::new(
                format!("s{s}t{t}"),
                format!("s{s}"),
                Matrix::from_vec(args.frames, args.dim, data)?,
            ));
        }
    }
    let report = full_gradient_check(&model, &batch, &TripletLossConfig::default())?;
    println!("max relative error = {:.6e}", report.max_relative_error);
    Ok(report.max_relative_error < args.tolerance)
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Gen(args) => run_gen(args).map(|_| true),
        Command::Train(args) => run_train(args).map(|_| true),
        Command::Aggregate(args) => run_aggregate(args).map(|_| true),
        Command::EvalIdentify(args) => run_eval_identify(args).map(|_| true),
        Command::EvalVerify(args) => run_eval_verify(args).map(|_| true),
        Command::Gradcheck(args) => run_gradcheck(args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
