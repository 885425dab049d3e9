use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use breathprint::audio_io::{load_manifest, DatasetManifest, FeatureCache};
use breathprint::features::{assemble, ConfigMode, FeatureMatrix};
use breathprint::neuralnet::{
    argmax, ensemble_average, load_checkpoint, save_checkpoint, CheckpointMeta, Network,
    NetworkSpec,
};
use breathprint::pipeline::{
    derive_seed, extract_magnitudes, generate_synthetic, prepare_instances, run_experiment,
    segments_csv, task_data, train_network, EvalReport, ExperimentConfig, TaskData, TaskSpec,
    ENSEMBLE,
};
use breathprint::stationarity::{report_series, stationarity_report, LagPolicy};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "breathprint",
    version,
    about = "Speaker and posture classification from multichannel breath recordings"
)]
struct Cli {
    /// TOML configuration file; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed (also used for synthetic data).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Fixed-order gradient reduction; results do not depend on thread count.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic four-microphone dataset and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        per_cell: Option<usize>,
        #[arg(long)]
        sample_rate: Option<u32>,
    },
    /// Export breath segments as `recording_path,start_sample,end_sample` rows.
    Segment {
        #[command(flatten)]
        input: ManifestArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute HHT magnitude features for one channel mode into a feature cache.
    Extract {
        #[command(flatten)]
        input: ManifestArg,
        #[arg(long, default_value = "all_ordered")]
        mode: ConfigMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Augmented Dickey-Fuller test over breaths (manifest) or feature rows (cache).
    Adf {
        #[arg(long, conflicts_with = "cache")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Channel index for a manifest, feature row index for a cache.
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// `schwert` or a fixed lag order.
        #[arg(long, default_value = "schwert")]
        lag: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one network on the training split of a feature cache.
    Train {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        task: TaskSpec,
        /// 1, 2 or 3 for the configured models, or a layer stack such as
        /// `C1D(16,16,8,0.3) -> GRU(96,0.3) -> Dense(classes)`.
        #[arg(long, default_value = "1")]
        model: String,
        #[arg(long)]
        out: PathBuf,
        /// Loss history rows `epoch,split,loss,accuracy`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate checkpoints (and their ensemble) on the test split of a cache.
    Eval {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        task: TaskSpec,
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        /// Writes `reports.csv` and confusion grids here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Full run: conditioning, features, every mode x task x model, summary grid.
    Experiment {
        #[command(flatten)]
        input: OptionalManifestArg,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ManifestArg {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct OptionalManifestArg {
    /// Overrides the manifest named in the configuration.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    if cli.deterministic {
        cfg.deterministic = true;
        cfg.training.deterministic = true;
    }
    Ok(cfg)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn open_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn cache_task_data(
    cfg: &ExperimentConfig,
    cache: &FeatureCache,
    task: TaskSpec,
    min_len: usize,
) -> Result<TaskData> {
    Ok(task_data(
        &cache.series,
        &cache.speakers,
        task,
        min_len,
        cfg.test_fraction,
        derive_seed(cfg.seed, &[task as u64]),
    )?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth {
            out,
            speakers,
            per_cell,
            sample_rate,
        } => {
            let mut synth = cfg.synth.clone();
            if let Some(n) = speakers {
                synth.n_speakers = *n;
            }
            if let Some(n) = per_cell {
                synth.n_instances_per_cell = *n;
            }
            if let Some(fs) = sample_rate {
                synth.sample_rate = *fs;
            }
            let manifest = generate_synthetic(&synth, out)?;
            println!(
                "wrote {} recordings and {}",
                manifest.entries.len(),
                out.join("manifest.txt").display()
            );
        }
        Command::Segment { input, out } => {
            let manifest = open_manifest(&input.manifest)?;
            let prepared = prepare_instances(&manifest, &cfg)?;
            for (path, reason) in &prepared.skipped {
                eprintln!("skipped {}: {reason}", path.display());
            }
            write_or_print(out.as_deref(), &segments_csv(&prepared.segments))?;
        }
        Command::Extract { input, mode, out } => {
            let manifest = open_manifest(&input.manifest)?;
            let prepared = prepare_instances(&manifest, &cfg)?;
            let mags = extract_magnitudes(&prepared.instances, &cfg.hht, cfg.features.pool)?;
            let cache = FeatureCache {
                mode: *mode,
                k: cfg.hht.max_imfs,
                speakers: manifest.speakers.clone(),
                series: assemble(&mags, *mode, cfg.seed)?,
            };
            let bytes = cache.write(out)?;
            println!(
                "{} instances, {} series, {bytes} bytes -> {}",
                prepared.instances.len(),
                cache.series.len(),
                out.display()
            );
        }
        Command::Adf {
            manifest,
            cache,
            channel,
            lag,
            out,
        } => {
            let policy = match lag.as_str() {
                "schwert" => LagPolicy::Schwert,
                n => LagPolicy::Fixed(n.parse().with_context(|| format!("bad lag {n:?}"))?),
            };
            let report = match (manifest, cache) {
                (Some(m), None) => {
                    let prepared = prepare_instances(&open_manifest(m)?, &cfg)?;
                    stationarity_report(&prepared.instances, *channel, policy)?
                }
                (None, Some(c)) => {
                    let cache = FeatureCache::read(c)?;
                    if *channel >= cache.dimension() {
                        bail!(
                            "row {channel} out of range for dimension {}",
                            cache.dimension()
                        );
                    }
                    let rows: Vec<(u64, Vec<f64>)> = cache
                        .series
                        .iter()
                        .map(|s| {
                            (
                                s.instance_id,
                                s.matrix.row(*channel).iter().map(|&v| v as f64).collect(),
                            )
                        })
                        .collect();
                    report_series(
                        rows.iter()
                            .map(|(id, r)| (*id, r.as_slice()))
                            .collect::<Vec<_>>(),
                        policy,
                    )
                }
                _ => bail!("give exactly one of --manifest or --cache"),
            };
            write_or_print(out.as_deref(), &report.to_text())?;
        }
        Command::Train {
            cache,
            task,
            model,
            out,
            history,
        } => {
            let cache = FeatureCache::read(cache)?;
            let text = match model.as_str() {
                "1" | "2" | "3" => {
                    let i: usize = model.parse::<usize>()? - 1;
                    cfg.models
                        .get(i)
                        .with_context(|| format!("config defines {} models", cfg.models.len()))?
                        .clone()
                }
                spec => spec.to_string(),
            };
            let probe = NetworkSpec::parse(&text, cache.dimension(), 2)?;
            let mut data = cache_task_data(&cfg, &cache, *task, probe.min_sequence_len())?;
            let standardizer = data.standardizer.clone();
            data.apply_standardizer(&standardizer)?;
            let spec = NetworkSpec::parse(&text, cache.dimension(), data.labeled.classes.len())?;
            let mut tcfg = cfg.training.clone();
            tcfg.seed = derive_seed(cfg.seed, &[*task as u64, cache.mode as u64]);
            tcfg.deterministic |= cfg.deterministic;
            let (net, report) = train_network(spec, &data.train, &tcfg, cfg.seed)?;
            let meta = CheckpointMeta {
                seed: tcfg.seed,
                epochs: report.train_losses().len(),
                steps: report.steps,
                labels: data.labeled.classes.clone(),
                task: Some(task.to_string()),
                config_mode: Some(cache.mode.as_str().to_string()),
                pool: cfg.features.pool,
                standardizer: Some(standardizer),
            };
            save_checkpoint(&net, &meta, out)?;
            if let Some(h) = history {
                fs::write(h, report.to_csv())
                    .with_context(|| format!("writing {}", h.display()))?;
            }
            let last = report.history.last().expect("at least one epoch");
            println!(
                "{} train series, {} epochs, final loss {:.4}, train accuracy {:.4} -> {}",
                data.train.len(),
                last.epoch,
                last.loss,
                last.accuracy,
                out.display()
            );
        }
        Command::Eval {
            cache,
            task,
            checkpoints,
            out_dir,
        } => {
            let cache = FeatureCache::read(cache)?;
            let mut models: Vec<(String, Network, CheckpointMeta)> = Vec::new();
            for p in checkpoints {
                let (net, meta) =
                    load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
                let name = p
                    .file_stem()
                    .map_or("model".into(), |s| s.to_string_lossy().into_owned());
                models.push((name, net, meta));
            }
            let min_len = models
                .iter()
                .map(|m| m.1.spec().min_sequence_len())
                .max()
                .unwrap_or(1);
            let data = cache_task_data(&cfg, &cache, *task, min_len)?;
            let classes = data.labeled.classes.clone();
            let mut reports = Vec::new();
            let mut per_model: Vec<(String, Vec<usize>)> = Vec::new();
            let mut all_probs: Vec<Vec<Vec<f64>>> = Vec::new();
            for (name, net, meta) in &models {
                if meta.labels != classes {
                    bail!(
                        "{name} was trained on classes {:?}, cache task has {:?}",
                        meta.labels,
                        classes
                    );
                }
                let inputs: Vec<FeatureMatrix> = data
                    .test
                    .iter()
                    .map(|(s, _)| match &meta.standardizer {
                        Some(st) => st.apply(&s.matrix),
                        None => Ok(s.matrix.clone()),
                    })
                    .collect::<breathprint::Result<_>>()?;
                let probs: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|x| net.predict(x))
                    .collect::<breathprint::Result<_>>()?;
                per_model.push((name.clone(), probs.iter().map(|p| argmax(p)).collect()));
                all_probs.push(probs);
            }
            if models.len() > 1 {
                let preds = (0..data.test.len())
                    .map(|i| {
                        let member: Vec<Vec<f64>> =
                            all_probs.iter().map(|p| p[i].clone()).collect();
                        ensemble_average(&member).map(|v| argmax(&v))
                    })
                    .collect::<breathprint::Result<_>>()?;
                per_model.push((ENSEMBLE.to_string(), preds));
            }
            let truth: Vec<usize> = data.test.iter().map(|(_, l)| *l).collect();
            let mut csv = String::from("task,mode,model,accuracy\n");
            for (name, preds) in per_model {
                let r = EvalReport::from_predictions(
                    *task,
                    cache.mode,
                    &name,
                    classes.clone(),
                    &truth,
                    &preds,
                )?;
                csv.push_str(&r.csv_row());
                csv.push('\n');
                println!("{}\n{}", r.csv_row(), r.confusion_text());
                reports.push(r);
            }
            if let Some(dir) = out_dir {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("reports.csv"), csv)?;
                for r in &reports {
                    fs::write(
                        dir.join(format!(
                            "confusion_{}_{}_{}.txt",
                            r.task,
                            r.mode.as_str(),
                            r.model
                        )),
                        r.confusion_text(),
                    )?;
                }
            }
        }
        Command::Experiment { input, out_dir } => {
            let mut cfg = cfg.clone();
            if let Some(d) = out_dir {
                cfg.output_dir = Some(d.clone());
            }
            let manifest_path = input
                .manifest
                .clone()
                .or_else(|| cfg.manifest.clone())
                .context("no manifest: pass --manifest or set `manifest` in the config")?;
            let manifest = open_manifest(&manifest_path)?;
            let result = run_experiment(&cfg, &manifest)?;
            eprintln!(
                "{} breath instances, {} recordings skipped, {} series too short",
                result.instances, result.skipped_recordings, result.dropped_short
            );
            print!("{}", result.grid.to_text());
        }
    }
    Ok(())
}
