//! `gpm`: tokenizer and transformer training, generation and evaluation
//! from the command line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use gpm_core::config::{format_report, Config};
use gpm_core::data::{format_token_line, load_cloud, write_cloud, write_svg_projections, CloudFormat, Dataset, Item};
use gpm_core::downstream::{encode_dataset, few_shot_eval, finetune_classifier, untrained_baseline};
use gpm_core::dvae::DvaeModel;
use gpm_core::generation::{
    canonical_centers, format_trace, generate_masked_region, generate_unconditional, Generation, Models,
};
use gpm_core::geometry::{chamfer_l1, PointCloud};
use gpm_core::gradsuite::{run_gradient_suite, TOLERANCE};
use gpm_core::model::{mask_count, select_mask_region_with, GpmModel, SequenceOrder};
use gpm_core::training::{
    stream_rng, train_dvae, train_gpm, RunOptions, EVAL_PATCH_SEED,
};
use gpm_core::{GpmError, Result};
use gpm_nn::NnError;
use rand::Rng;

#[derive(Parser)]
#[command(name = "gpm", version, about = "Point-cloud tokenizer and dual-objective transformer")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "runs/gpm")]
    out: PathBuf,
    /// Base seed for data, initialization and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Checkpoints {
    /// Tokenizer checkpoint; defaults to `<out>/dvae.ckpt`.
    #[arg(long)]
    dvae: Option<PathBuf>,
    /// Transformer checkpoint; defaults to `<out>/gpm.ckpt`.
    #[arg(long)]
    gpm: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the point tokenizer.
    TrainDvae {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train the transformer on labels from a frozen tokenizer.
    TrainGpm {
        #[command(flatten)]
        ckpt: Checkpoints,
        #[arg(long)]
        resume: bool,
    },
    /// Write one token line per cloud.
    Tokenize {
        #[command(flatten)]
        ckpt: Checkpoints,
        /// A point file or a directory; the configured corpus otherwise.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Reconstruct clouds through their hard tokens.
    Reconstruct {
        #[command(flatten)]
        ckpt: Checkpoints,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Regenerate a masked region of a cloud, or generate from nothing.
    Generate {
        #[command(flatten)]
        ckpt: Checkpoints,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Fine-tune a classifier on labeled synthetic shapes.
    Classify {
        #[command(flatten)]
        ckpt: Checkpoints,
    },
    /// Episodic few-shot evaluation.
    FewShot {
        #[command(flatten)]
        ckpt: Checkpoints,
    },
    /// Train the transformer under both objectives and both orders.
    Ablate {
        #[command(flatten)]
        ckpt: Checkpoints,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
}

fn resolve_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string(), 0)?;
    }
    for o in &cli.overrides {
        cfg.set_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| GpmError::Io { path: path.display().to_string(), source })
}

fn file_stem(id: &str) -> String {
    id.replace(['/', '\\'], "_")
}

struct Ctx {
    cfg: Config,
    out: PathBuf,
}

impl Ctx {
    fn dvae(&self, ckpt: &Checkpoints) -> Result<DvaeModel> {
        let path = ckpt.dvae.clone().unwrap_or_else(|| self.out.join("dvae.ckpt"));
        if !path.exists() {
            return Err(GpmError::NotReady(format!("tokenizer checkpoint {} not found", path.display())));
        }
        DvaeModel::load(self.cfg.dvae.clone(), &path)
    }

    fn gpm(&self, ckpt: &Checkpoints) -> Result<GpmModel> {
        let path = ckpt.gpm.clone().unwrap_or_else(|| self.out.join("gpm.ckpt"));
        if !path.exists() {
            return Err(GpmError::NotReady(format!("transformer checkpoint {} not found", path.display())));
        }
        GpmModel::load(self.cfg.gpm.clone(), &path)
    }

    fn inputs(&self, input: &Option<PathBuf>) -> Result<Dataset> {
        match input {
            None => self.cfg.pretraining_data(),
            Some(path) if path.is_dir() => gpm_core::data::load_dataset_dir(path),
            Some(path) => {
                let cloud = load_cloud(path, CloudFormat::from_path(path)?)?;
                let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud").to_string();
                Dataset::new(vec![Item { id, cloud, label: None }], None)
            }
        }
    }

    fn report(&self, name: &str, pairs: &[(&str, String)]) -> Result<()> {
        let text = format_report(pairs);
        print!("{text}");
        write(&self.out.join(name), &text)
    }
}

fn run_train_dvae(ctx: &Ctx, resume: bool) -> Result<()> {
    let cfg = &ctx.cfg;
    let data = cfg.pretraining_data()?;
    let mut model = DvaeModel::new(cfg.dvae.clone(), cfg.seeds.model)?;
    let opts = RunOptions { out_dir: Some(ctx.out.clone()), resume, stop_at: None };
    let clock = Instant::now();
    let run = train_dvae(&mut model, &data, &cfg.dvae_train, cfg.seeds, &opts)?;
    let last = run.log.last();
    ctx.report(
        "dvae_metrics.txt",
        &[
            ("clouds", data.len().to_string()),
            ("steps", run.steps_done.to_string()),
            ("eval_chamfer_initial", run.initial_eval.to_string()),
            ("eval_chamfer_final", run.final_eval.to_string()),
            ("eval_chamfer_ratio", (run.final_eval / run.initial_eval).to_string()),
            ("train_chamfer_last", last.map_or(f64::NAN, |r| r.chamfer).to_string()),
            ("seconds", clock.elapsed().as_secs_f64().to_string()),
        ],
    )
}

fn run_train_gpm(ctx: &Ctx, ckpt: &Checkpoints, resume: bool) -> Result<()> {
    let cfg = &ctx.cfg;
    let dvae = ctx.dvae(ckpt)?;
    let data = cfg.pretraining_data()?;
    let mut model = GpmModel::new(cfg.gpm.clone(), cfg.seeds.model)?;
    let opts = RunOptions { out_dir: Some(ctx.out.clone()), resume, stop_at: None };
    let clock = Instant::now();
    let run = train_gpm(&mut model, &dvae, &data, &cfg.gpm_train, cfg.seeds, &opts)?;
    ctx.report(
        "gpm_metrics.txt",
        &[
            ("clouds", data.len().to_string()),
            ("steps", run.steps_done.to_string()),
            ("eval_loss_initial", run.initial_eval.to_string()),
            ("eval_loss_final", run.final_eval.to_string()),
            ("eval_loss_ratio", (run.final_eval / run.initial_eval).to_string()),
            ("eval_ae_final", run.final_eval_ae.to_string()),
            ("eval_ar_final", run.final_eval_ar.to_string()),
            ("tokenizer_unchanged", (run.tokenizer_checksum_before == run.tokenizer_checksum_after).to_string()),
            ("seconds", clock.elapsed().as_secs_f64().to_string()),
        ],
    )
}

fn run_tokenize(ctx: &Ctx, ckpt: &Checkpoints, input: &Option<PathBuf>) -> Result<()> {
    let dvae = ctx.dvae(ckpt)?;
    let data = ctx.inputs(input)?;
    let mut dump = String::new();
    for item in data.items() {
        let (tokens, _) = dvae.tokenize(&item.cloud, EVAL_PATCH_SEED)?;
        dump.push_str(&format_token_line(&item.id, &tokens.tokens));
        dump.push('\n');
    }
    write(&ctx.out.join("tokens.txt"), &dump)?;
    println!("tokenized {} clouds", data.len());
    Ok(())
}

fn run_reconstruct(ctx: &Ctx, ckpt: &Checkpoints, input: &Option<PathBuf>) -> Result<()> {
    let dvae = ctx.dvae(ckpt)?;
    let data = ctx.inputs(input)?;
    let dir = ctx.out.join("recon");
    fs::create_dir_all(&dir).map_err(|source| GpmError::Io { path: dir.display().to_string(), source })?;
    let mut total = 0.0;
    for item in data.items() {
        let (recon, _, patches) = dvae.reconstruct(&item.cloud, EVAL_PATCH_SEED)?;
        total += chamfer_l1(&recon, &PointCloud::new(patches.union_points())?);
        let stem = file_stem(&item.id);
        write_cloud(&dir.join(format!("{stem}.xyz")), &recon)?;
        write_svg_projections(recon.points(), &dir.join(format!("{stem}.svg")))?;
    }
    ctx.report(
        "reconstruct_metrics.txt",
        &[("clouds", data.len().to_string()), ("mean_chamfer", (total / data.len() as f64).to_string())],
    )
}

fn save_generation(dir: &Path, stem: &str, gen: &Generation) -> Result<()> {
    write_cloud(&dir.join(format!("{stem}.xyz")), &gen.cloud)?;
    write_svg_projections(gen.cloud.points(), &dir.join(format!("{stem}.svg")))?;
    write(&dir.join(format!("{stem}_trace.tsv")), &format_trace(&gen.trace))?;
    let mut tokens = format_token_line(stem, &gen.tokens.tokens);
    tokens.push('\n');
    write(&dir.join(format!("{stem}_tokens.txt")), &tokens)
}

fn run_generate(ctx: &Ctx, ckpt: &Checkpoints, input: &Option<PathBuf>) -> Result<()> {
    let cfg = &ctx.cfg;
    let (dvae, gpm) = (ctx.dvae(ckpt)?, ctx.gpm(ckpt)?);
    let models = Models { dvae: &dvae, gpm: &gpm };
    let gen_cfg = &cfg.generate;
    let dir = ctx.out.join("generated");
    fs::create_dir_all(&dir).map_err(|source| GpmError::Io { path: dir.display().to_string(), source })?;
    let mut pairs = Vec::new();
    if gen_cfg.unconditional {
        let centers = canonical_centers(cfg.dvae.groups)?;
        for i in 0..gen_cfg.count {
            let mut policy = gen_cfg.policy.clone();
            policy.seed = stream_rng(gen_cfg.policy.seed, i as u64).random();
            let gen = generate_unconditional(&centers, &policy, models)?;
            save_generation(&dir, &format!("unconditional_{i:03}"), &gen)?;
        }
        pairs.push(("mode", "unconditional".to_string()));
    } else {
        let data = ctx.inputs(input)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for item in data.items().iter().take(gen_cfg.count.max(1)) {
            let patches = dvae.patches(&item.cloud, EVAL_PATCH_SEED)?;
            let m = patches.num_groups();
            let seed_center = stream_rng(cfg.seeds.sampling, count as u64).random_range(0..m);
            let mask = select_mask_region_with(&patches.centers, gen_cfg.mask_ratio, seed_center)?;
            let gen = generate_masked_region(&item.cloud, &mask, &gen_cfg.policy, models, EVAL_PATCH_SEED)?;
            total += chamfer_l1(&gen.cloud, &PointCloud::new(patches.union_points())?);
            save_generation(&dir, &file_stem(&item.id), &gen)?;
            count += 1;
        }
        pairs.push(("mode", "masked_region".to_string()));
        pairs.push(("masked_patches", mask_count(gen_cfg.mask_ratio, cfg.dvae.groups).to_string()));
        pairs.push(("mean_chamfer_to_input", (total / count as f64).to_string()));
    }
    pairs.push(("count", gen_cfg.count.to_string()));
    ctx.report("generate_metrics.txt", &pairs)
}

fn run_classify(ctx: &Ctx, ckpt: &Checkpoints) -> Result<()> {
    let cfg = &ctx.cfg;
    let c = &cfg.classify;
    let (dvae, gpm) = (ctx.dvae(ckpt)?, ctx.gpm(ckpt)?);
    let train = cfg.corpus(&c.families, c.train_per_class, cfg.seeds.data ^ 0x7261_696e)?;
    let test = cfg.corpus(&c.families, c.test_per_class, cfg.seeds.data ^ 0x7465_7374)?;
    let classes = train.num_classes();
    let train_enc = encode_dataset(&dvae, &train, c.run.patch_seed)?;
    let test_enc = encode_dataset(&dvae, &test, c.run.patch_seed)?;
    let baseline = untrained_baseline(&gpm, &test_enc, classes, c.baseline_heads, cfg.seeds.model)?;
    let clock = Instant::now();
    let run = finetune_classifier(&gpm, &train_enc, Some(&test_enc), classes, &c.run, cfg.seeds.sampling)?;
    ctx.report(
        "classify_metrics.txt",
        &[
            ("classes", classes.to_string()),
            ("train_items", train.len().to_string()),
            ("test_items", test.len().to_string()),
            ("steps", c.run.optim.steps.to_string()),
            ("baseline_accuracy", baseline.to_string()),
            ("train_accuracy", run.train_accuracy.to_string()),
            ("test_accuracy", run.test_accuracy.unwrap_or(f64::NAN).to_string()),
            ("final_loss", run.losses.last().copied().unwrap_or(f64::NAN).to_string()),
            ("seconds", clock.elapsed().as_secs_f64().to_string()),
        ],
    )
}

fn run_few_shot(ctx: &Ctx, ckpt: &Checkpoints) -> Result<()> {
    let cfg = &ctx.cfg;
    let f = &cfg.few_shot;
    let (dvae, gpm) = (ctx.dvae(ckpt)?, ctx.gpm(ckpt)?);
    let data = cfg.corpus(&f.families, f.per_class, cfg.seeds.data ^ 0x6665_7773)?;
    let report = few_shot_eval(&gpm, &dvae, &data, f.way, f.shot, f.runs, &f.run, cfg.seeds.sampling)?;
    let runs = report.accuracies.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(",");
    ctx.report(
        "few_shot_metrics.txt",
        &[
            ("way", report.way.to_string()),
            ("shot", report.shot.to_string()),
            ("runs", report.accuracies.len().to_string()),
            ("mean_accuracy", report.mean.to_string()),
            ("std_accuracy", report.std.to_string()),
            ("accuracies", runs),
        ],
    )
}

fn run_ablate(ctx: &Ctx, ckpt: &Checkpoints) -> Result<()> {
    let cfg = &ctx.cfg;
    let dvae = ctx.dvae(ckpt)?;
    let data = cfg.pretraining_data()?;
    let w_ar = if cfg.gpm.w_ar > 0.0 { cfg.gpm.w_ar } else { 1.0 };
    let mut table = String::from("objective\torder\tinitial_loss\tfinal_loss\tfinal_ae\tfinal_ar\n");
    for (objective, weight) in [("ae_only", 0.0), ("ae_ar", w_ar)] {
        for order in [SequenceOrder::AThenB, SequenceOrder::BThenA] {
            let mut gcfg = cfg.gpm.clone();
            gcfg.w_ar = weight;
            gcfg.order = order;
            let mut model = GpmModel::new(gcfg, cfg.seeds.model)?;
            let run = train_gpm(&mut model, &dvae, &data, &cfg.gpm_train, cfg.seeds, &RunOptions::default())?;
            let order_name = match order {
                SequenceOrder::AThenB => "a_then_b",
                SequenceOrder::BThenA => "b_then_a",
            };
            let _ = writeln!(
                table,
                "{objective}\t{order_name}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                run.initial_eval, run.final_eval, run.final_eval_ae, run.final_eval_ar
            );
        }
    }
    print!("{table}");
    write(&ctx.out.join("ablation.tsv"), &table)
}

fn run_gradcheck(ctx: &Ctx) -> Result<bool> {
    let clock = Instant::now();
    let results = run_gradient_suite(ctx.cfg.seeds.model)?;
    let mut table = String::from("check\trelative_error\tpassed\n");
    for r in &results {
        let _ = writeln!(table, "{}\t{:e}\t{}", r.name, r.error, r.passed());
    }
    write(&ctx.out.join("gradcheck.tsv"), &table)?;
    let worst = results.iter().map(|r| r.error).fold(0.0, f64::max);
    let failed = results.iter().filter(|r| !r.passed()).count();
    ctx.report(
        "gradcheck_metrics.txt",
        &[
            ("checks", results.len().to_string()),
            ("failed", failed.to_string()),
            ("max_relative_error", format!("{worst:e}")),
            ("tolerance", format!("{TOLERANCE:e}")),
            ("seconds", clock.elapsed().as_secs_f64().to_string()),
        ],
    )?;
    Ok(failed == 0)
}

fn exit_code(e: &GpmError) -> u8 {
    match e {
        GpmError::Config { .. } | GpmError::Parse { .. } | GpmError::InvalidArgument(_) => 2,
        GpmError::NotReady(_) => 3,
        GpmError::Data(_) | GpmError::Io { .. } => 4,
        GpmError::Nn(NnError::NumericFailure { .. }) => 5,
        _ => 1,
    }
}

fn category(e: &GpmError) -> &'static str {
    match exit_code(e) {
        2 => "configuration error",
        3 => "missing checkpoint",
        4 => "data error",
        5 => "numeric failure",
        _ => "error",
    }
}

fn execute(cli: &Cli) -> Result<bool> {
    let cfg = resolve_config(cli)?;
    if let Some(n) = std::env::var("GPM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    fs::create_dir_all(&cli.out).map_err(|source| GpmError::Io { path: cli.out.display().to_string(), source })?;
    write(&cli.out.join("config.txt"), &cfg.to_text())?;
    let ctx = Ctx { cfg, out: cli.out.clone() };
    match &cli.command {
        Command::TrainDvae { resume } => run_train_dvae(&ctx, *resume)?,
        Command::TrainGpm { ckpt, resume } => run_train_gpm(&ctx, ckpt, *resume)?,
        Command::Tokenize { ckpt, input } => run_tokenize(&ctx, ckpt, input)?,
        Command::Reconstruct { ckpt, input } => run_reconstruct(&ctx, ckpt, input)?,
        Command::Generate { ckpt, input } => run_generate(&ctx, ckpt, input)?,
        Command::Classify { ckpt } => run_classify(&ctx, ckpt)?,
        Command::FewShot { ckpt } => run_few_shot(&ctx, ckpt)?,
        Command::Ablate { ckpt } => run_ablate(&ctx, ckpt)?,
        Command::Gradcheck => return run_gradcheck(&ctx),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("gpm: {}: {e}", category(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
