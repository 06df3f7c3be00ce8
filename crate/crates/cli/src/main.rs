//! `tgmtl`: runs the task-grouped adaptation pipeline step by step.
//!
//! Every subcommand reads and writes artifacts in one run directory,
//! `<root>/<experiment>/<seed>/` unless `--run-dir` names it directly.
//! Exit codes: 0 success, 1 invalid configuration or failed step,
//! 2 missing prerequisite artifact.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tgmtl::artifacts::{read_json, read_text, require, write_json};
use tgmtl::checkpoint::{self, Selection};
use tgmtl::config::{cost_mode, ExperimentConfig};
use tgmtl::cost::{compare_modes, schedule_cost_scan, CostFile, MAC_CONVENTION};
use tgmtl::grouping::{compute_tree, GroupsFile, SearchMode};
use tgmtl::network::BranchedNetwork;
use tgmtl::pipeline;
use tgmtl::report::Report;
use tgmtl::similarity::SimilarityMatrix;
use tgmtl::synthetic::Dataset;
use tgmtl::trainer::{evaluate, mode_layout, MetricsFile, RunMode, RunRecord, TaskMetric};
use tgmtl::tree::TaskTree;
use tgmtl::{Error, Result};

const RUN_ROOT_ENV: &str = "TGMTL_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(name = "tgmtl", version, about = "Task-grouped low-rank multi-task adaptation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (TOML). Defaults to the run directory's
    /// config.json, then to built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides `<root>/<experiment>/<seed>`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Root of all run directories.
    #[arg(long, global = true, env = RUN_ROOT_ENV, default_value = "runs")]
    run_root: PathBuf,
    /// Seed override; defaults to the first configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset into data/.
    GenData,
    /// Tune task heads on the frozen backbone into heads/.
    TuneHeads,
    /// Compute the task-similarity matrix into similarity.csv.
    Similarity {
        /// Number of examples averaged (defaults to the configured value).
        #[arg(long)]
        examples: Option<usize>,
    },
    /// Compute per-stage task groups into groups.json.
    Group,
    /// Train one mode, or every configured mode, into <mode>/.
    Train {
        #[arg(long, value_parser = parse_train_mode)]
        mode: Option<RunMode>,
    },
    /// Re-evaluate saved adapters of a mode into <mode>/eval.json.
    Eval {
        #[arg(long, value_parser = parse_train_mode)]
        mode: RunMode,
    },
    /// Count parameters and MACs into cost.json.
    Cost {
        #[arg(long, value_parser = parse_train_mode)]
        mode: Option<RunMode>,
    },
    /// Swap two tasks between groups and retrain into ablate-swap/.
    AblateSwap {
        /// Two task names, comma separated.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        swap: Option<Vec<String>>,
        /// Stages at which to swap, comma separated.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<usize>>,
    },
    /// Aggregate metrics.json files of every seed into report.csv and
    /// series.csv.
    Report,
}

fn parse_train_mode(s: &str) -> std::result::Result<RunMode, String> {
    match s.parse::<RunMode>() {
        Ok(m @ (RunMode::Individual | RunMode::Shared | RunMode::Progressive)) => Ok(m),
        _ => Err(format!("`{s}` is not one of individual, shared, progressive")),
    }
}

/// Resolved configuration and run location.
struct Ctx {
    cfg: ExperimentConfig,
    hash: String,
    seed: u64,
    dir: PathBuf,
    experiment_dir: PathBuf,
}

/// Holds `<dir>/.lock` while a subcommand writes.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Contract(format!(
                "{} is locked by another writer (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

impl Ctx {
    fn resolve(common: &Common) -> Result<Self> {
        let cfg = match &common.config {
            Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
                Error::MissingArtifact(_) => Error::Config(format!("config file {} not found", p.display())),
                e => e,
            })?,
            None => {
                let saved = common.run_dir.as_ref().map(|d| d.join("config.json"));
                match saved.filter(|p| p.exists()) {
                    Some(p) => {
                        let cfg: ExperimentConfig =
                            serde_json::from_str(&read_text(&p)?).map_err(|e| Error::Config(e.to_string()))?;
                        cfg.validate()?;
                        cfg
                    }
                    None => ExperimentConfig::default(),
                }
            }
        };
        let seed = common.seed.unwrap_or(cfg.seeds[0]);
        let experiment_dir = common.run_root.join(&cfg.name);
        let dir = common
            .run_dir
            .clone()
            .unwrap_or_else(|| experiment_dir.join(seed.to_string()));
        Ok(Self {
            hash: cfg.hash()?,
            cfg,
            seed,
            dir,
            experiment_dir,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn echo_config(&self) -> Result<()> {
        let mut s = self.cfg.canonical_json()?;
        s.push('\n');
        fs::create_dir_all(&self.dir)?;
        fs::write(self.path("config.json"), s)?;
        Ok(())
    }

    fn data(&self) -> Result<Dataset> {
        Dataset::load(&self.path("data"))
    }

    fn tree(&self) -> Result<TaskTree> {
        let text = read_text(&self.path("groups.json"))?;
        GroupsFile::from_json(&text)?.tree()
    }

    fn outputs(data: &Dataset) -> Vec<usize> {
        data.kinds.iter().map(|k| k.outputs()).collect()
    }
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let data = pipeline::generate_data(&ctx.cfg, ctx.seed)?;
    data.save(&ctx.path("data"), Some(&ctx.hash))?;
    println!(
        "wrote {} ({} train, {} val, {} tasks)",
        ctx.path("data").display(),
        data.n_train(),
        data.n_val(),
        data.task_count()
    );
    Ok(())
}

fn tune_heads(ctx: &Ctx) -> Result<()> {
    let data = ctx.data()?;
    let (probe, log) = pipeline::tuned_probe(&ctx.cfg, &data, ctx.seed)?;
    let dir = ctx.path("heads");
    checkpoint::save(&probe, ctx.seed, Selection::Heads, Some(ctx.hash.clone()), &dir)?;
    write_json(
        &dir.join("tuning.json"),
        &serde_json::json!({ "seed": ctx.seed, "config_hash": ctx.hash, "tuning": log }),
    )?;
    println!(
        "tuned heads for {} steps: joint loss {:.6} -> {:.6}",
        log.steps, log.initial_loss, log.final_loss
    );
    Ok(())
}

fn tuned_probe(ctx: &Ctx, data: &Dataset) -> Result<BranchedNetwork> {
    let (manifest, blob) = checkpoint::load_manifest(&ctx.path("heads"))?;
    let mut probe = pipeline::probe_network(&ctx.cfg, data, ctx.seed)?;
    checkpoint::apply(&mut probe, &manifest, &blob)?;
    Ok(probe)
}

fn similarity(ctx: &Ctx, examples: Option<usize>) -> Result<()> {
    let data = ctx.data()?;
    let mut probe = tuned_probe(ctx, &data)?;
    let n = examples.unwrap_or(ctx.cfg.similarity.examples);
    let sim = pipeline::similarity(&mut probe, &data, n, ctx.seed)?;
    fs::write(ctx.path("similarity.csv"), sim.to_csv()?)?;
    print!("{}", sim.pretty());
    Ok(())
}

fn group(ctx: &Ctx) -> Result<()> {
    let sim = SimilarityMatrix::from_csv(&read_text(&ctx.path("similarity.csv"))?)?;
    if sim.task_names != ctx.cfg.task_names() {
        return Err(Error::Config(format!(
            "similarity.csv tasks {:?} differ from configured {:?}",
            sim.task_names,
            ctx.cfg.task_names()
        )));
    }
    let grouped = pipeline::group(&ctx.cfg, &sim)?;
    let mut file = GroupsFile::from_grouped(&grouped);
    file.seed = Some(ctx.seed);
    file.config_hash = Some(ctx.hash.clone());
    write_json(&ctx.path("groups.json"), &file)?;
    for (s, (p, score)) in grouped.tree.stages.iter().zip(&grouped.scores).enumerate() {
        println!("stage {s}: {p}  score {score:.6}");
    }
    Ok(())
}

/// Trains `mode` on `tree` and writes its directory.
fn train_and_save(ctx: &Ctx, mode: RunMode, tree: &TaskTree, data: &Dataset, baseline: Option<&[f64]>) -> Result<RunRecord> {
    let (net, mut record) = pipeline::train_mode(&ctx.cfg, mode, tree, data, ctx.seed)?;
    let base = baseline.map(<[f64]>::to_vec).unwrap_or_else(|| record.metric_values());
    record.set_baseline(&base)?;
    let dir = ctx.path(mode.as_str());
    checkpoint::save(&net, ctx.seed, Selection::Trainable, Some(ctx.hash.clone()), &dir.join("adapters"))?;
    write_json(&dir.join("record.json"), &record.without_timing())?;
    write_json(&dir.join("timing.json"), &serde_json::json!({ "wall_time_secs": record.wall_time_secs }))?;
    write_json(&dir.join("metrics.json"), &MetricsFile::from_record(&record, Some(ctx.hash.clone())))?;
    Ok(record)
}

/// Reference metrics, training the reference run first if it is absent.
fn baseline(ctx: &Ctx, tree: &TaskTree, data: &Dataset) -> Result<Vec<f64>> {
    let path = ctx.path("reference/metrics.json");
    if path.exists() {
        let m: MetricsFile = MetricsFile::from_json(&read_text(&path)?)?;
        if m.config_hash.as_deref() == Some(ctx.hash.as_str()) && m.seed == ctx.seed {
            return Ok(m.per_task.iter().map(|t| t.value).collect());
        }
    }
    println!("training single-task reference");
    Ok(train_and_save(ctx, RunMode::Reference, tree, data, None)?.metric_values())
}

fn print_record(r: &RunRecord) {
    let metrics: Vec<String> = r.per_task.iter().map(|m| format!("{}={:.4}", m.task, m.value)).collect();
    println!(
        "{:<12} dm {:>+8.3}%  params {:>7}  {}",
        r.mode.as_str(),
        r.delta_m_percent.unwrap_or(f64::NAN),
        r.trainable_params,
        metrics.join(" ")
    );
}

fn train(ctx: &Ctx, mode: Option<RunMode>) -> Result<()> {
    let data = ctx.data()?;
    let tree = ctx.tree()?;
    let modes = match mode {
        Some(m) => vec![m],
        None => ctx.cfg.modes.clone(),
    };
    let base = baseline(ctx, &tree, &data)?;
    for m in modes {
        let tree = if m == RunMode::AblateSwap {
            pipeline::swapped_tree(&ctx.cfg, &tree)?
        } else {
            tree.clone()
        };
        print_record(&train_and_save(ctx, m, &tree, &data, Some(&base))?);
    }
    Ok(())
}

fn eval(ctx: &Ctx, mode: RunMode) -> Result<()> {
    let data = ctx.data()?;
    let tree = ctx.tree()?;
    let dir = ctx.path(mode.as_str());
    let (manifest, blob) = checkpoint::load_manifest(&dir.join("adapters"))?;
    let (tree, policy) = mode_layout(&ctx.cfg.model.network, mode, &tree, ctx.cfg.model.policy(), &Ctx::outputs(&data))?;
    if manifest.tree != tree || manifest.policy != policy {
        return Err(Error::Contract("checkpoint was saved for a different tree or rank policy".into()));
    }
    let mut net = BranchedNetwork::build(&ctx.cfg.model.network, &tree, policy, &data.task_names, &Ctx::outputs(&data), ctx.seed)?;
    checkpoint::apply(&mut net, &manifest, &blob)?;
    let specs = pipeline::task_specs(&data);
    let values = evaluate(&net, &specs, &data.x_val, &data.y_val)?;
    let reference: MetricsFile = MetricsFile::from_json(&read_text(&ctx.path("reference/metrics.json"))?)?;
    let base: Vec<f64> = reference.per_task.iter().map(|t| t.value).collect();
    let lower: Vec<bool> = specs.iter().map(|s| s.metric.lower_is_better()).collect();
    let out = MetricsFile {
        seed: ctx.seed,
        mode,
        per_task: specs
            .iter()
            .zip(&values)
            .map(|(s, &value)| TaskMetric {
                task: s.name.clone(),
                metric: s.metric,
                value,
            })
            .collect(),
        delta_m_percent: Some(tgmtl::trainer::delta_m(&values, &base, &lower)?),
        trainable_params: net.trainable_count(),
        config_hash: Some(ctx.hash.clone()),
    };
    write_json(&dir.join("eval.json"), &out)?;
    let saved = MetricsFile::from_json(&read_text(&dir.join("metrics.json"))?)?;
    let same = saved.per_task == out.per_task;
    println!(
        "{} dm {:+.3}% ({} metrics.json)",
        mode.as_str(),
        out.delta_m_percent.unwrap_or(f64::NAN),
        if same { "matches" } else { "differs from" }
    );
    if same {
        Ok(())
    } else {
        Err(Error::Contract("re-evaluation differs from the recorded metrics".into()))
    }
}

fn cost(ctx: &Ctx, mode: Option<RunMode>) -> Result<()> {
    let outputs = ctx.cfg.head_outputs();
    let policy = ctx.cfg.model.policy();
    let sim = if ctx.path("similarity.csv").exists() {
        Some(SimilarityMatrix::from_csv(&read_text(&ctx.path("similarity.csv"))?)?)
    } else {
        None
    };
    let tree = if ctx.path("groups.json").exists() {
        ctx.tree()?
    } else {
        let t = ctx.cfg.task_count();
        let zero = SimilarityMatrix::from_values((0..t).map(|i| (0..t).map(|j| f64::from(u8::from(i == j))).collect()).collect())?;
        compute_tree(sim.as_ref().unwrap_or(&zero), &ctx.cfg.schedule(), SearchMode::CountConstrained)?.tree
    };
    let mut reports = compare_modes(&ctx.cfg.model.network, &tree, policy, &outputs)?;
    if let Some(m) = mode.and_then(cost_mode) {
        reports.retain(|r| r.mode == m);
    }
    let mut scan = schedule_cost_scan(&ctx.cfg.model.network, policy, &outputs, &ctx.cfg.scan_schedules(), sim.as_ref())?;
    let progressive = ctx.path("progressive/metrics.json");
    if progressive.exists() {
        let m = MetricsFile::from_json(&read_text(&progressive)?)?;
        let counts = tree.group_counts();
        for row in scan.iter_mut().filter(|r| r.schedule == counts) {
            row.delta_m_percent = m.delta_m_percent;
        }
    }
    let file = CostFile {
        convention: MAC_CONVENTION.into(),
        reports,
        scan,
        seed: Some(ctx.seed),
        config_hash: Some(ctx.hash.clone()),
    };
    write_json(&ctx.path("cost.json"), &file)?;
    print!("{}", file.table());
    Ok(())
}

fn ablate_swap(ctx: &mut Ctx, swap: Option<Vec<String>>, stages: Option<Vec<usize>>) -> Result<()> {
    if let Some(names) = swap {
        let [a, b]: [String; 2] = names
            .try_into()
            .map_err(|_| Error::Config("--swap takes exactly two task names".into()))?;
        ctx.cfg.ablation.swap = Some([a, b]);
    }
    if stages.is_some() {
        ctx.cfg.ablation.stages = stages;
    }
    ctx.cfg.validate()?;
    let data = ctx.data()?;
    let tree = ctx.tree()?;
    let swapped = pipeline::swapped_tree(&ctx.cfg, &tree)?;
    for (s, p) in swapped.stages.iter().enumerate() {
        println!("stage {s}: {p}");
    }
    let base = baseline(ctx, &tree, &data)?;
    print_record(&train_and_save(ctx, RunMode::AblateSwap, &swapped, &data, Some(&base))?);
    Ok(())
}

fn report(ctx: &Ctx) -> Result<()> {
    let root = &ctx.experiment_dir;
    require(root)?;
    let mut runs = Vec::new();
    let mut seeds: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    seeds.sort();
    for seed_dir in seeds {
        for mode in [RunMode::Reference, RunMode::Individual, RunMode::Shared, RunMode::Progressive, RunMode::AblateSwap] {
            let p = seed_dir.join(mode.as_str()).join("metrics.json");
            if p.exists() {
                runs.push(read_json::<MetricsFile>(&p)?);
            }
        }
    }
    if runs.is_empty() {
        return Err(Error::MissingArtifact(root.join("<seed>/<mode>/metrics.json")));
    }
    let report = Report::build(&runs)?;
    fs::write(root.join("report.csv"), report.to_csv()?)?;
    fs::write(root.join("series.csv"), report.series_csv())?;
    print!("{}", report.to_csv()?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut ctx = Ctx::resolve(&cli.common)?;
    if let Command::Report = cli.command {
        return report(&ctx);
    }
    let _lock = Lock::acquire(&ctx.dir)?;
    ctx.echo_config()?;
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::TuneHeads => tune_heads(&ctx),
        Command::Similarity { examples } => similarity(&ctx, examples),
        Command::Group => group(&ctx),
        Command::Train { mode } => train(&ctx, mode),
        Command::Eval { mode } => eval(&ctx, mode),
        Command::Cost { mode } => cost(&ctx, mode),
        Command::AblateSwap { swap, stages } => ablate_swap(&mut ctx, swap, stages),
        Command::Report => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::MissingArtifact(p)) => {
            eprintln!("error: missing artifact {}", p.display());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
