use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hli::ablate::{
    rows_to_csv, summarize, summary_to_csv, AblationHarness, Rung, LADDER,
};
use hli::config::RunConfig;
use hli::datagen::{generate_domain_pair, TargetView};
use hli::error::HliError;
use hli::model::{load_checkpoint, save_checkpoint};
use hli::plot::{plot_lines, Series};
use hli::rundir::{create_run_dir, RunManifest};
use hli::train::{adapt, evaluate_checkpoint, pretrain_source, BestRole};

#[derive(Parser)]
#[command(name = "hli", version, about = "Teacher-student domain adaptation for small-scale re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; defaults to $HLI_OUT_DIR, then ./runs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised pretraining on the labeled source domain.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Clustering + refinement adaptation on the unlabeled target domain.
    Adapt {
        #[command(flatten)]
        common: CommonArgs,
        /// Pretrained checkpoint to start from (path without extension).
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Retrieval evaluation of a checkpoint on the target benchmark.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to evaluate (path without extension).
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Component ladder and hyperparameter sweeps, seed-averaged.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated rungs (baseline,+alms,+alms+aulm,full) or "all".
        #[arg(long)]
        components: Option<String>,
        /// Comma-separated erase probabilities, e.g. 0,0.4,0.5,0.7.
        #[arg(long)]
        prob_sweep: Option<String>,
        /// Comma-separated cluster counts.
        #[arg(long)]
        k_sweep: Option<String>,
        /// Also compare adaptive vs uniform-random erase points.
        #[arg(long)]
        points: bool,
        /// Number of seeds per arm (seed, seed+1, ...).
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { common } => cmd_pretrain(&common),
        Command::Adapt { common, checkpoint } => cmd_adapt(&common, &checkpoint),
        Command::Eval { common, checkpoint } => cmd_eval(&common, &checkpoint),
        Command::Ablate {
            common,
            components,
            prob_sweep,
            k_sweep,
            points,
            seeds,
        } => cmd_ablate(
            &common,
            components.as_deref(),
            prob_sweep.as_deref(),
            k_sweep.as_deref(),
            points,
            seeds,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                HliError::Config { .. } | HliError::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, HliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_root(common: &CommonArgs) -> PathBuf {
    common
        .out_dir
        .clone()
        .or_else(|| std::env::var_os("HLI_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn check_checkpoint_path(path: &Path) -> Result<(), HliError> {
    if !path.with_extension("json").exists() {
        return Err(HliError::InvalidArgument(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    Ok(())
}

fn cmd_pretrain(common: &CommonArgs) -> Result<(), HliError> {
    let cfg = load_config(common)?;
    let dir = create_run_dir(&out_root(common), "pretrain")?;
    let mut manifest = RunManifest::new("pretrain", cfg.seed, cfg.to_toml());
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;

    let (source, _) = generate_domain_pair(&cfg.dataset)?;
    let out = pretrain_source(&source, &cfg)?;
    std::fs::write(dir.join("losses.csv"), out.losses_csv())?;
    save_checkpoint(&out.params, out.step_rows.len(), "student", &dir.join("pretrain"))?;

    manifest.artifact("config", "config.toml");
    manifest.artifact("losses", "losses.csv");
    manifest.artifact("checkpoint", "pretrain");
    manifest.metric("source_accuracy", out.source_accuracy);
    manifest.write(&dir)?;
    println!("run dir: {}", dir.display());
    println!("source top-1 accuracy: {:.4}", out.source_accuracy);
    Ok(())
}

fn cmd_adapt(common: &CommonArgs, checkpoint: &Path) -> Result<(), HliError> {
    let cfg = load_config(common)?;
    check_checkpoint_path(checkpoint)?;
    let (init, _, _) = load_checkpoint(checkpoint)?;
    let dir = create_run_dir(&out_root(common), "adapt")?;
    let mut manifest = RunManifest::new("adapt", cfg.seed, cfg.to_toml());
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;

    let (_, target) = generate_domain_pair(&cfg.dataset)?;
    let mut view = TargetView::new(&target);
    let out = adapt(&init, &mut view, &cfg, true)?;

    std::fs::write(dir.join("metrics.csv"), out.metrics_csv())?;
    std::fs::write(dir.join("losses.csv"), out.losses_csv())?;
    save_checkpoint(&out.student, out.step_rows.len(), "student", &dir.join("last_student"))?;
    save_checkpoint(
        &out.teacher.params,
        out.teacher.step,
        "teacher",
        &dir.join("last_teacher"),
    )?;
    let best_role = match out.best_role {
        BestRole::Student => "student",
        BestRole::Teacher => "teacher",
    };
    save_checkpoint(&out.best_params, out.best_epoch, best_role, &dir.join("best"))?;

    let retrieval = evaluate_checkpoint(&out.best_params, &view)?;
    let cmc_xs: Vec<f64> = (1..=retrieval.cmc_curve.len()).map(|k| k as f64).collect();
    plot_lines(
        &[Series::new(cmc_xs, retrieval.cmc_curve.clone())],
        &dir.join("cmc.png"),
    )?;

    manifest.artifact("config", "config.toml");
    manifest.artifact("metrics", "metrics.csv");
    manifest.artifact("losses", "losses.csv");
    manifest.artifact("best_checkpoint", "best");
    manifest.artifact("cmc_plot", "cmc.png");
    manifest.metric("best_map", out.best_map);
    manifest.metric("best_epoch", out.best_epoch as f64);
    let pretrain_top1 = out.epochs.first().map(|e| e.student_top1).unwrap_or(f64::NAN);
    manifest.metric("pretrain_top1", pretrain_top1);
    manifest.write(&dir)?;
    println!("run dir: {}", dir.display());
    println!("best mAP: {:.4} ({best_role}, epoch {})", out.best_map, out.best_epoch);
    Ok(())
}

fn cmd_eval(common: &CommonArgs, checkpoint: &Path) -> Result<(), HliError> {
    let cfg = load_config(common)?;
    check_checkpoint_path(checkpoint)?;
    let (params, _, _) = load_checkpoint(checkpoint)?;
    let dir = create_run_dir(&out_root(common), "eval")?;
    let mut manifest = RunManifest::new("eval", cfg.seed, cfg.to_toml());

    let (_, target) = generate_domain_pair(&cfg.dataset)?;
    let view = TargetView::new(&target);
    let res = evaluate_checkpoint(&params, &view)?;

    let mut csv = String::from("k,cmc\n");
    for (i, &v) in res.cmc_curve.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, v));
    }
    std::fs::write(dir.join("cmc.csv"), csv)?;
    let cmc_xs: Vec<f64> = (1..=res.cmc_curve.len()).map(|k| k as f64).collect();
    plot_lines(&[Series::new(cmc_xs, res.cmc_curve.clone())], &dir.join("cmc.png"))?;

    manifest.artifact("cmc", "cmc.csv");
    manifest.artifact("cmc_plot", "cmc.png");
    manifest.metric("map", res.map);
    manifest.metric("top1", res.top_k(1));
    manifest.metric("top5", res.top_k(5));
    manifest.write(&dir)?;
    println!("run dir: {}", dir.display());
    println!(
        "mAP: {:.6}  top-1: {:.4}  top-5: {:.4}",
        res.map,
        res.top_k(1),
        res.top_k(5)
    );
    Ok(())
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, HliError> {
    text.split(',')
        .map(|s| {
            s.trim().parse::<T>().map_err(|_| HliError::InvalidArgument(format!(
                "cannot parse '{}' in {what} list",
                s.trim()
            )))
        })
        .collect()
}

fn cmd_ablate(
    common: &CommonArgs,
    components: Option<&str>,
    prob_sweep: Option<&str>,
    k_sweep: Option<&str>,
    points: bool,
    n_seeds: usize,
) -> Result<(), HliError> {
    let cfg = load_config(common)?;
    if n_seeds == 0 {
        return Err(HliError::InvalidArgument("--seeds must be positive".into()));
    }
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| cfg.seed + i).collect();
    let dir = create_run_dir(&out_root(common), "ablate")?;
    let mut manifest = RunManifest::new("ablate", cfg.seed, cfg.to_toml());
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;

    let mut harness = AblationHarness::new(cfg)?;
    let mut rows = Vec::new();
    if let Some(spec) = components {
        let rungs: Vec<Rung> = if spec.trim().eq_ignore_ascii_case("all") {
            LADDER.to_vec()
        } else {
            spec.split(',').map(Rung::parse).collect::<Result<_, _>>()?
        };
        rows.extend(harness.run_components(&rungs, &seeds)?);
    }
    if let Some(spec) = prob_sweep {
        let probs: Vec<f64> = parse_list(spec, "prob")?;
        rows.extend(harness.run_prob_sweep(&probs, &seeds)?);
    }
    if let Some(spec) = k_sweep {
        let counts: Vec<usize> = parse_list(spec, "cluster-count")?;
        rows.extend(harness.run_cluster_sweep(&counts, &seeds)?);
    }
    if points {
        rows.extend(harness.run_point_comparison(&seeds)?);
    }
    if rows.is_empty() {
        return Err(HliError::InvalidArgument(
            "nothing to run: pass --components, --prob-sweep, --k-sweep, or --points".into(),
        ));
    }

    std::fs::write(dir.join("ablation.csv"), rows_to_csv(&rows))?;
    let summary = summarize(&rows);
    std::fs::write(dir.join("summary.csv"), summary_to_csv(&summary))?;

    // One series per arm, mean mAP against the setting index.
    let mut series = Vec::new();
    let mut current_arm = String::new();
    for (arm, _, map, _) in &summary {
        if *arm != current_arm {
            current_arm = arm.clone();
            series.push(Series::new(Vec::new(), Vec::new()));
        }
        let s = series.last_mut().unwrap();
        s.xs.push(s.xs.len() as f64);
        s.ys.push(*map);
    }
    plot_lines(&series, &dir.join("ablation.png"))?;

    manifest.artifact("rows", "ablation.csv");
    manifest.artifact("summary", "summary.csv");
    manifest.artifact("plot", "ablation.png");
    for (arm, setting, map, _) in &summary {
        manifest.metric(&format!("{arm}:{setting}:mean_map"), *map);
    }
    manifest.write(&dir)?;
    println!("run dir: {}", dir.display());
    for (arm, setting, map, top1) in &summary {
        println!("{arm:<11} {setting:<12} mean mAP {map:.4}  mean top-1 {top1:.4}");
    }
    Ok(())
}
