//! `glr`: constellation snapshots, labeled datasets, training, routing experiments
//! and the gradient check, driven by one TOML config plus flag overrides.

mod manifest;

use std::collections::VecDeque;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use glr_core::config::PipelineConfig;
use glr_core::constellation::{snapshot_at, IslPolicy};
use glr_core::gnn::{self, gradcheck, ModelShape};
use glr_core::graph::FeatureLayout;
use glr_core::oracle::{build_dataset, load_dataset, save_dataset, Dataset};
use glr_core::routing::Algorithm;
use glr_core::sim::{self, DecisionQuality, ExperimentReport, METRICS_CSV_HEADER};
use serde_json::json;

use manifest::{sidecar, RunManifest};

#[derive(Parser)]
#[command(name = "glr", version, about = "Learned hop-distance routing for LEO constellations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the inter-satellite link policy.
    #[arg(long, value_parser = parse_policy)]
    isl_policy: Option<IslPolicy>,
}

fn parse_policy(s: &str) -> Result<IslPolicy, String> {
    s.parse().map_err(|e: glr_core::Error| e.to_string())
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse().map_err(|e: glr_core::Error| e.to_string())
}

fn parse_layout(s: &str) -> Result<FeatureLayout, String> {
    s.parse().map_err(|e: glr_core::Error| e.to_string())
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        let mut config = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(policy) = self.isl_policy {
            config.isl_policy = policy;
        }
        Ok(config)
    }

    fn record(&self, m: &mut RunManifest) {
        if let Some(path) = &self.config {
            m.input("config", path);
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes one topology snapshot JSON per instant.
    Constellation {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Snapshot instants in seconds; defaults to the dataset schedule.
        #[arg(long = "time", value_delimiter = ',')]
        times: Vec<f64>,
        #[arg(long)]
        planes: Option<usize>,
        #[arg(long)]
        sats_per_plane: Option<usize>,
    },
    /// Builds the labeled dataset and re-checks every label with a breadth-first search.
    Dataset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the number of dataset snapshots.
        #[arg(long)]
        snapshots: Option<usize>,
        #[arg(long)]
        destinations: Option<usize>,
        #[arg(long, value_parser = parse_layout)]
        layout: Option<FeatureLayout>,
    },
    /// Trains the model on a dataset file.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Model parameter file to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV; defaults to `<out>.progress.csv`.
        #[arg(long)]
        progress: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Routes packets with every algorithm over interruption and scale sweeps.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Trained parameters; required when GLR is among the algorithms.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Sweep::All)]
        sweep: Sweep,
        #[arg(long)]
        packets: Option<usize>,
        /// Interruption probabilities of the sweep, comma separated.
        #[arg(long = "p", value_delimiter = ',')]
        probs: Vec<f64>,
        /// Plane counts of the scale sweep, comma separated.
        #[arg(long, value_delimiter = ',')]
        scale_planes: Vec<usize>,
        #[arg(long, value_delimiter = ',', value_parser = parse_algorithm)]
        algorithms: Vec<Algorithm>,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Compares analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        cases: usize,
        #[arg(long, default_value_t = 10)]
        max_nodes: usize,
        #[arg(long, default_value_t = 1e-4)]
        beta: f64,
        /// Offset added to every analytic gradient entry (test fixture).
        #[arg(long, default_value_t = 0.0, hide = true)]
        perturb: f64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Sweep {
    Interruption,
    Scale,
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Constellation {
            common,
            out,
            times,
            planes,
            sats_per_plane,
        } => cmd_constellation(&common, &out, &times, planes, sats_per_plane),
        Command::Dataset {
            common,
            out,
            snapshots,
            destinations,
            layout,
        } => cmd_dataset(&common, &out, snapshots, destinations, layout),
        Command::Train {
            common,
            dataset,
            out,
            progress,
            epochs,
            learning_rate,
            beta,
            hidden,
            patience,
        } => {
            let overrides = TrainOverrides {
                epochs,
                learning_rate,
                beta,
                hidden,
                patience,
            };
            cmd_train(&common, &dataset, &out, progress.as_deref(), overrides)
        }
        Command::Eval {
            common,
            model,
            out,
            sweep,
            packets,
            probs,
            scale_planes,
            algorithms,
            jobs,
        } => {
            let overrides = EvalOverrides {
                packets,
                probs,
                scale_planes,
                algorithms,
            };
            cmd_eval(&common, model.as_deref(), &out, sweep, overrides, jobs)
        }
        Command::Gradcheck {
            seed,
            cases,
            max_nodes,
            beta,
            perturb,
        } => cmd_gradcheck(seed, cases, max_nodes, beta, perturb),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_constellation(
    common: &Common,
    out: &Path,
    times: &[f64],
    planes: Option<usize>,
    sats_per_plane: Option<usize>,
) -> Result<()> {
    let mut config = common.load()?;
    if let Some(p) = planes {
        config.constellation.num_planes = p;
        config.constellation.phase_factor = config.constellation.phase_factor.min(p.saturating_sub(1));
    }
    if let Some(s) = sats_per_plane {
        config.constellation.sats_per_plane = s;
    }
    config.validate()?;
    let times = if times.is_empty() {
        config.dataset.snapshots.times()
    } else {
        times.to_vec()
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut m = RunManifest::start("constellation", &config);
    common.record(&mut m);
    let mut counts = Vec::new();
    for (k, &t) in times.iter().enumerate() {
        let snap = snapshot_at(&config.constellation, t, config.isl_policy)?;
        let path = out.join(format!("snapshot_{k:04}.json"));
        fs::write(&path, serde_json::to_string(&snap.to_json())? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        println!(
            "t={t}s: {} nodes, {} links, {} isolated",
            snap.node_count,
            snap.links.len(),
            snap.isolated.len()
        );
        counts.push(json!({"time_s": t, "nodes": snap.node_count, "links": snap.links.len()}));
        m.output(&path);
    }
    m.summary = json!({ "snapshots": counts });
    m.finish(&out.join("manifest.json"))
}

/// Breadth-first hop counts over the off-diagonal support of a stored sample, kept
/// separate from the library's labeling code.
fn label_mismatches(ds: &Dataset) -> usize {
    let mut mismatches = 0;
    for s in &ds.samples {
        let n = s.n();
        let mut nbrs = vec![Vec::new(); n];
        for (i, j, _) in s.adjacency.triplets() {
            if i != j {
                nbrs[i].push(j);
            }
        }
        let mut hops = vec![usize::MAX; n];
        hops[s.destination] = 0;
        let mut queue = VecDeque::from([s.destination]);
        while let Some(u) = queue.pop_front() {
            for &v in &nbrs[u] {
                if hops[v] == usize::MAX {
                    hops[v] = hops[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for v in 0..n {
            let ok = match hops[v] {
                usize::MAX => s.mask[v] == 0.0,
                h => s.mask[v] == 1.0 && s.labels[v] == h as f64,
            };
            if !ok {
                mismatches += 1;
            }
        }
    }
    mismatches
}

fn cmd_dataset(
    common: &Common,
    out: &Path,
    snapshots: Option<usize>,
    destinations: Option<usize>,
    layout: Option<FeatureLayout>,
) -> Result<()> {
    let mut config = common.load()?;
    if let Some(count) = snapshots {
        config.dataset.snapshots.count = count;
    }
    if let Some(k) = destinations {
        config.dataset.destinations_per_snapshot = k;
    }
    if let Some(layout) = layout {
        config.dataset.layout = layout;
    }
    ensure!(config.dataset.snapshots.count > 0, "at least one snapshot is required");
    let ds = build_dataset(&config.dataset_spec())?;
    let mismatches = label_mismatches(&ds);
    ensure!(mismatches == 0, "{mismatches} labels disagree with breadth-first search");
    save_dataset(&ds, out)?;
    let reread = load_dataset(out)?;
    ensure!(reread == ds, "dataset file does not read back identically");

    println!(
        "samples: {} (train {}, validation {}); skipped snapshots: {}",
        ds.samples.len(),
        ds.train.len(),
        ds.validation.len(),
        ds.provenance.skipped_snapshots.len()
    );
    let mut m = RunManifest::start("dataset", &config);
    common.record(&mut m);
    m.output(out);
    m.summary = json!({
        "samples": ds.samples.len(),
        "train": ds.train.len(),
        "validation": ds.validation.len(),
        "skipped_snapshots": ds.provenance.skipped_snapshots,
        "label_mismatches": mismatches,
    });
    m.finish(&sidecar(out))
}

struct TrainOverrides {
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    beta: Option<f64>,
    hidden: Option<usize>,
    patience: Option<usize>,
}

fn cmd_train(
    common: &Common,
    dataset: &Path,
    out: &Path,
    progress: Option<&Path>,
    o: TrainOverrides,
) -> Result<()> {
    let mut config = common.load()?;
    let t = &mut config.training;
    t.epochs = o.epochs.unwrap_or(t.epochs);
    t.learning_rate = o.learning_rate.unwrap_or(t.learning_rate);
    t.beta = o.beta.unwrap_or(t.beta);
    t.hidden = o.hidden.unwrap_or(t.hidden);
    t.early_stop_patience = o.patience.unwrap_or(t.early_stop_patience);
    config.validate()?;
    let hyper = config.hyperparameters();

    let ds = load_dataset(dataset).with_context(|| format!("loading {}", dataset.display()))?;
    let progress_path = progress.map_or_else(|| with_suffix(out, ".progress.csv"), Path::to_path_buf);
    let mut csv = fs::File::create(&progress_path)
        .with_context(|| format!("creating {}", progress_path.display()))?;
    writeln!(csv, "epoch,train_loss,validation_loss")?;
    let mut io_error = None;
    let (params, report) = gnn::train_with_progress(&ds, &hyper, |r| {
        if io_error.is_none() {
            if let Err(e) = writeln!(csv, "{},{},{}", r.epoch, r.train_loss, r.validation_loss) {
                io_error = Some(e);
            }
        }
        eprintln!("epoch {:>4}  train {:.6}  validation {:.6}", r.epoch, r.train_loss, r.validation_loss);
    })?;
    if let Some(e) = io_error {
        return Err(e).context("writing training progress");
    }
    gnn::save_params(&params, out)?;
    let shape = ModelShape {
        f_low: ds.layout().low_width(),
        f_high: ds.layout().high_width(),
        hidden: hyper.hidden,
    };
    let reread = gnn::load_params(out, Some(shape))?;
    ensure!(reread == params, "parameter file does not read back identically");

    let best = report.best();
    println!(
        "best epoch {} of {}: train {:.6}, validation {:.6}; |W|^2 = {:.6}",
        best.epoch,
        report.epochs.len(),
        best.train_loss,
        best.validation_loss,
        params.squared_weight_norm()
    );
    let mut m = RunManifest::start("train", &config);
    common.record(&mut m);
    m.input("dataset", dataset);
    m.output(out);
    m.output(&progress_path);
    m.summary = json!({
        "shape": shape.to_string(),
        "epochs_run": report.epochs.len(),
        "best_epoch": best.epoch,
        "best_train_loss": best.train_loss,
        "best_validation_loss": best.validation_loss,
        "squared_weight_norm": params.squared_weight_norm(),
        "wall_clock_s": report.wall_clock_s,
    });
    m.finish(&sidecar(out))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

struct EvalOverrides {
    packets: Option<usize>,
    probs: Vec<f64>,
    scale_planes: Vec<usize>,
    algorithms: Vec<Algorithm>,
}

fn write_rows(csv: &mut impl std::io::Write, report: &ExperimentReport) -> Result<()> {
    for metrics in &report.metrics {
        writeln!(
            csv,
            "{}",
            sim::metrics_csv_row(report.node_count, report.interruption_prob, metrics)
        )?;
    }
    Ok(())
}

fn cmd_eval(
    common: &Common,
    model_path: Option<&Path>,
    out: &Path,
    sweep: Sweep,
    o: EvalOverrides,
    jobs: usize,
) -> Result<()> {
    let mut config = common.load()?;
    let e = &mut config.experiment;
    e.packets = o.packets.unwrap_or(e.packets);
    if !o.probs.is_empty() {
        e.interruption_probs = o.probs;
    }
    if !o.scale_planes.is_empty() {
        e.scale_planes = o.scale_planes;
    }
    if !o.algorithms.is_empty() {
        e.algorithms = o.algorithms;
    }
    config.validate()?;
    let needs_model = config.experiment.algorithms.contains(&Algorithm::Glr);
    let model = match (needs_model, model_path) {
        (true, None) => bail!("GLR is among the algorithms but no --model was given"),
        (true, Some(path)) => Some(
            gnn::load_params(path, None).with_context(|| format!("loading {}", path.display()))?,
        ),
        (false, _) => None,
    };

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut m = RunManifest::start("eval", &config);
    common.record(&mut m);
    if let Some(path) = model_path {
        m.input("model", path);
    }
    let mut summary = serde_json::Map::new();

    if sweep != Sweep::Scale {
        let path = out.join("interruption.csv");
        let mut csv = fs::File::create(&path)?;
        writeln!(csv, "{METRICS_CSV_HEADER}")?;
        let base = config.experiment(config.constellation.clone(), 0.0, jobs);
        base.validate()?;
        let snapshots = sim::build_snapshots(&base)?;
        for &p in &config.experiment.interruption_probs {
            let exp = sim::ExperimentConfig {
                interruption_prob: p,
                ..base.clone()
            };
            let report = sim::run_on_snapshots(&exp, &snapshots, model.as_ref())?;
            write_rows(&mut csv, &report)?;
            print_report(&report);
            if p == 0.0 && needs_model {
                let within = report.within_stretch(Algorithm::Glr, 1.2);
                summary.insert(
                    "glr_within_1_2_stretch_at_p0".into(),
                    json!({ "packets": report.packets.len(), "within": within }),
                );
            }
        }
        if let Some(params) = &model {
            let mut q = DecisionQuality::default();
            for snap in &snapshots {
                let destinations: Vec<usize> = (0..snap.node_count).collect();
                q = q.merge(sim::decision_quality(params, snap, &destinations)?);
            }
            println!(
                "next hop on an optimal path: {} of {} decisions ({:.2}%)",
                q.on_optimal_path,
                q.decisions,
                100.0 * q.fraction()
            );
            summary.insert("decision_quality".into(), serde_json::to_value(q)?);
        }
        m.output(&path);
    }

    if sweep != Sweep::Interruption {
        let path = out.join("scale.csv");
        let mut csv = fs::File::create(&path)?;
        writeln!(csv, "{METRICS_CSV_HEADER}")?;
        for &planes in &config.experiment.scale_planes {
            let exp = config.experiment(
                config.scaled_constellation(planes),
                config.experiment.scale_interruption_prob,
                jobs,
            );
            let report = sim::run_experiment(&exp, model.as_ref())?;
            write_rows(&mut csv, &report)?;
            print_report(&report);
        }
        m.output(&path);
    }

    m.summary = serde_json::Value::Object(summary);
    m.finish(&out.join("manifest.json"))
}

fn print_report(report: &ExperimentReport) {
    for mt in &report.metrics {
        println!(
            "N={} p={} {}: delivered {}/{}, drop rate {:.4}, mean hops {}, median decision {}",
            report.node_count,
            report.interruption_prob,
            mt.algorithm,
            mt.delivered,
            mt.packets,
            mt.drop_rate,
            mt.mean_hops.map_or("-".into(), |h| format!("{h:.3}")),
            mt.median_packet_decision_s
                .map_or("-".into(), |t| format!("{:.1}us", t * 1e6)),
        );
    }
}

fn cmd_gradcheck(seed: u64, cases: usize, max_nodes: usize, beta: f64, perturb: f64) -> Result<()> {
    ensure!(cases > 0, "--cases must be >= 1");
    let report = gradcheck::run(seed, cases, max_nodes, beta, perturb)?;
    println!("{:<10} {:>8} {:>14}", "tensor", "entries", "max_rel_err");
    for t in &report.tensors {
        println!("{:<10} {:>8} {:>14.3e}", t.name, t.entries, t.max_relative_error);
    }
    if report.passed() {
        println!(
            "PASS: {} cases, max relative error {:.3e} < {:e}",
            report.cases,
            report.max_relative_error(),
            gradcheck::TOLERANCE
        );
        Ok(())
    } else {
        bail!(
            "max relative error {:.3e} is not below {:e}",
            report.max_relative_error(),
            gradcheck::TOLERANCE
        )
    }
}
