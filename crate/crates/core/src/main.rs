use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use agrl::adjacency::{adaptive_adjacency, build_affinity_adjacency, build_pose_adjacency, matrix_to_csv};
use agrl::bench::evaluate;
use agrl::config::RunConfig;
use agrl::dataset::Dataset;
use agrl::evalkit::{
    baseline_representation, chunk_select, extract_representation, metrics_csv_row, metrics_table, Strategy,
    METRICS_HEADER,
};
use agrl::model::end_to_end_grad_check;
use agrl::pose::NUM_REGIONS;
use agrl::synth::generate;
use agrl::trainer::{train, TrainSet, TrainState, LOSS_HEADER};

const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "agrl", version, about = "Adaptive graph representations for video re-identification")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration. Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for both training and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into `paths.data`.
    Synth,
    /// Train on the manifest in `paths.data`, writing a checkpoint and a loss log.
    Train {
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Rank the query and gallery tracklets and write a metrics CSV.
    Eval {
        /// Checkpoint to evaluate. Defaults to the one `train` writes.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// 1 = first frame of each chunk, 2 = all sequences.
        #[arg(long)]
        strategy: Option<u8>,
        /// Also report the untrained temporal-mean baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Write the pose, affinity and combined adjacency of one tracklet as CSV.
    GraphDump {
        /// Tracklet id from the manifest. Defaults to the first one.
        #[arg(long)]
        tracklet: Option<String>,
    },
    /// Compare analytic and finite-difference gradients on a toy batch.
    GradCheck,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut cfg = RunConfig::load(cli.global.config.as_deref(), &cli.global.overrides)?;
    if let Some(seed) = cli.global.seed {
        cfg = cfg.with_seed(seed);
    }
    match cli.command {
        Command::Synth => synth(&cfg)?,
        Command::Train { resume } => train_cmd(&cfg, resume.as_deref())?,
        Command::Eval {
            checkpoint,
            strategy,
            baseline,
        } => {
            let strategy = match strategy {
                Some(s) => Strategy::parse(s)?,
                None => cfg.eval.strategy()?,
            };
            eval(&cfg, checkpoint.as_deref(), strategy, baseline)?
        }
        Command::GraphDump { tracklet } => graph_dump(&cfg, tracklet.as_deref())?,
        Command::GradCheck => return grad_check(cli.global.seed.unwrap_or(cfg.train.seed)),
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = generate(&cfg.synth)?;
    let manifest = data.write(&cfg.paths.data)?;
    println!("wrote {} tracklets to {}", data.records.len(), manifest.display());
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    Ok(Dataset::load_path(&cfg.paths.manifest(), cfg.train.conf_threshold)?)
}

fn create_out(cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&cfg.paths.out).with_context(|| format!("creating {}", cfg.paths.out.display()))
}

fn train_cmd(cfg: &RunConfig, resume: Option<&Path>) -> anyhow::Result<()> {
    let data = load_dataset(cfg)?;
    let set = TrainSet::new(&data)?;
    let state = match resume {
        Some(p) => {
            let s = TrainState::load(p)?;
            if s.model.dim() != set.dim || s.model.classes() != set.classes {
                bail!(
                    "{}: checkpoint has d={} and {} classes, dataset has d={} and {} classes",
                    p.display(),
                    s.model.dim(),
                    s.model.classes(),
                    set.dim,
                    set.classes
                );
            }
            s
        }
        None => TrainState::init(&cfg.train, set.dim, set.classes)?,
    };
    let first = state.epoch;
    let mut rows = Vec::new();
    let state = train(&cfg.train, &set, state, |r| rows.push(r.csv_row()))?;

    create_out(cfg)?;
    let log_path = cfg.paths.loss_log();
    let mut log = if resume.is_some() && log_path.exists() {
        fs::OpenOptions::new().append(true).open(&log_path)
    } else {
        fs::File::create(&log_path).and_then(|mut f| writeln!(f, "{LOSS_HEADER}").map(|_| f))
    }
    .with_context(|| format!("opening {}", log_path.display()))?;
    for row in &rows {
        writeln!(log, "{row}").with_context(|| format!("writing {}", log_path.display()))?;
    }
    state.save(&cfg.paths.checkpoint())?;
    println!(
        "trained epochs {}..={} ({} iterations), checkpoint {}",
        first + 1,
        state.epoch,
        rows.len(),
        cfg.paths.checkpoint().display()
    );
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, strategy: Strategy, baseline: bool) -> anyhow::Result<()> {
    let data = load_dataset(cfg)?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.checkpoint());
    let state = TrainState::load(&path)?;
    let t = cfg.train.frames;
    let mut rows = vec![(
        "model".to_string(),
        evaluate(&data, |tr| extract_representation(tr, &state.model, t, strategy))?,
    )];
    if baseline {
        rows.push((
            "baseline".to_string(),
            evaluate(&data, |tr| baseline_representation(tr, NUM_REGIONS, t, strategy))?,
        ));
    }
    create_out(cfg)?;
    let mut csv = format!("{METRICS_HEADER}\n");
    for (name, r) in &rows {
        csv.push_str(&metrics_csv_row(name, r));
        csv.push('\n');
    }
    let out = cfg.paths.metrics();
    fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", metrics_table(&rows));
    Ok(())
}

fn graph_dump(cfg: &RunConfig, id: Option<&str>) -> anyhow::Result<()> {
    let data = load_dataset(cfg)?;
    let tracklet = match id {
        Some(id) => data
            .tracklets
            .iter()
            .find(|t| t.record.tracklet_id == id)
            .with_context(|| format!("no tracklet `{id}` in {}", cfg.paths.manifest().display()))?,
        None => data.tracklets.first().context("dataset is empty")?,
    };
    let frames = chunk_select(tracklet.frames(), cfg.train.frames, Strategy::First)?.remove(0);
    let nodes = tracklet.nodes(&frames);
    let pose = build_pose_adjacency(&tracklet.node_part_sets(&frames));
    let affinity = build_affinity_adjacency(&nodes);
    let combined = adaptive_adjacency(&pose, &nodes, cfg.train.graph, cfg.train.gamma)?;

    let dir = cfg.paths.out.join("graphs").join(&tracklet.record.tracklet_id);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, m) in [("pose", pose.matrix()), ("affinity", affinity.matrix()), ("combined", combined.matrix())] {
        let p = dir.join(format!("{name}.csv"));
        fs::write(&p, matrix_to_csv(m)).with_context(|| format!("writing {}", p.display()))?;
    }
    let worst = (0..combined.size())
        .map(|i| (combined.matrix().row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    println!(
        "{} nodes from frames {:?}; combined row sums within {worst:.1e} of 1; wrote {}",
        combined.size(),
        frames,
        dir.display()
    );
    Ok(())
}

fn grad_check(seed: u64) -> anyhow::Result<ExitCode> {
    let start = std::time::Instant::now();
    let report = end_to_end_grad_check(seed)?;
    let secs = start.elapsed().as_secs_f64();
    if report.max_rel_error < GRAD_TOLERANCE {
        println!(
            "max rel err {:.3e} < {GRAD_TOLERANCE:.0e} over {} entries ({secs:.2} s)",
            report.max_rel_error, report.evaluations
        );
        Ok(ExitCode::SUCCESS)
    } else {
        println!(
            "FAILED: max rel err {:.3e} >= {GRAD_TOLERANCE:.0e}; per leaf {:?} ({secs:.2} s)",
            report.max_rel_error, report.per_leaf
        );
        Ok(ExitCode::FAILURE)
    }
}
