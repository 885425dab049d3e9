use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::report::{predict_models, EvalReport, SummaryGrid, ENSEMBLE};
use super::task::{build_task, stratified_split, LabeledDataset, SplitIds, TaskSpec};
use crate::audio_io::{load_recording, DatasetManifest, MultichannelRecording, PIPELINE_CHANNELS};
use crate::error::{Error, Result};
use crate::features::{
    assemble, redraw_permutation, ConfigMode, FeatureMatrix, FeatureSeries, InstanceMagnitudes,
    Standardizer,
};
use crate::hht::{hht_magnitudes, SiftingCriteria};
use crate::neuralnet::{
    save_checkpoint, train, Augment, CheckpointMeta, Network, NetworkSpec, Sample, TrainReport,
};
use crate::preprocess::{
    align_channels, apply_fir, design_highpass_fir, normalize_energy, segment_breaths,
    BreathInstance,
};

/// Mixes `parts` into `seed` (splitmix64 finalizer per part).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed;
    for &p in parts {
        x = x.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentRow {
    pub recording_path: PathBuf,
    pub start_sample: usize,
    pub end_sample: usize,
}

pub fn segments_csv(rows: &[SegmentRow]) -> String {
    let mut out = String::from("recording_path,start_sample,end_sample\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.recording_path.display(),
            r.start_sample,
            r.end_sample
        ));
    }
    out
}

/// Filters every channel of a recording as configured.
pub fn filter_recording(
    rec: &MultichannelRecording,
    cfg: &ExperimentConfig,
) -> Result<Vec<Vec<f64>>> {
    if !cfg.filter.enabled {
        return Ok(rec.channels.clone());
    }
    let fir = design_highpass_fir(
        cfg.filter.taps,
        cfg.filter.cutoff_hz,
        rec.sample_rate as f64,
    )?;
    rec.channels.iter().map(|c| apply_fir(&fir, c)).collect()
}

/// Breath instances found in one recording: filter, segment the reference
/// channel, align each segment's channels to it and normalize their energy.
pub fn breaths_in_recording(
    rec: &MultichannelRecording,
    cfg: &ExperimentConfig,
) -> Result<(Vec<(usize, usize)>, Vec<Vec<Vec<f64>>>)> {
    if rec.num_channels() != PIPELINE_CHANNELS {
        return Err(Error::Shape(format!(
            "recording has {} channels, pipeline needs {PIPELINE_CHANNELS}",
            rec.num_channels()
        )));
    }
    let fs = rec.sample_rate as f64;
    let filtered = filter_recording(rec, cfg)?;
    let reference = cfg.alignment.reference;
    let ref_signal = filtered.get(reference).ok_or_else(|| {
        Error::InvalidParameter(format!("reference channel {reference} out of range"))
    })?;
    let segments = segment_breaths(ref_signal, fs, &cfg.segmentation)?;
    let max_lag = (cfg.alignment.max_lag_ms * 1e-3 * fs).round() as usize;
    let mut kept = Vec::new();
    let mut breaths = Vec::new();
    for &(s, e) in &segments {
        let slices: Vec<Vec<f64>> = filtered.iter().map(|c| c[s..e].to_vec()).collect();
        let Ok(aligned) = align_channels(&slices, reference, max_lag) else {
            continue;
        };
        let Ok(normalized) = aligned
            .channels
            .iter()
            .map(|c| normalize_energy(c))
            .collect::<Result<Vec<_>>>()
        else {
            continue;
        };
        kept.push((s, e));
        breaths.push(normalized);
    }
    Ok((kept, breaths))
}

#[derive(Debug, Clone, Default)]
pub struct PreparedData {
    pub instances: Vec<BreathInstance>,
    pub segments: Vec<SegmentRow>,
    /// Recordings that could not be processed, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Runs conditioning over every manifest entry. Instance ids follow manifest
/// order, then segment order.
pub fn prepare_instances(
    manifest: &DatasetManifest,
    cfg: &ExperimentConfig,
) -> Result<PreparedData> {
    type PerEntry = std::result::Result<(Vec<(usize, usize)>, Vec<Vec<Vec<f64>>>, f64), String>;
    let per_entry: Vec<PerEntry> = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let rec = load_recording(&entry.recording_path).map_err(|e| e.to_string())?;
            let (segs, breaths) = breaths_in_recording(&rec, cfg).map_err(|e| e.to_string())?;
            Ok((segs, breaths, rec.sample_rate as f64))
        })
        .collect();
    let mut out = PreparedData::default();
    let mut next_id = 0u64;
    for (entry, result) in manifest.entries.iter().zip(per_entry) {
        match result {
            Ok((segs, breaths, fs)) => {
                for ((s, e), channels) in segs.into_iter().zip(breaths) {
                    out.segments.push(SegmentRow {
                        recording_path: entry.recording_path.clone(),
                        start_sample: s,
                        end_sample: e,
                    });
                    out.instances.push(BreathInstance::new(
                        next_id,
                        entry.speaker_id.clone(),
                        entry.posture,
                        channels,
                        fs,
                    )?);
                    next_id += 1;
                }
            }
            Err(reason) => out.skipped.push((entry.recording_path.clone(), reason)),
        }
    }
    Ok(out)
}

/// Per-channel `K x N` instantaneous-magnitude matrices, time-pooled by `pool`.
pub fn extract_magnitudes(
    instances: &[BreathInstance],
    criteria: &SiftingCriteria,
    pool: usize,
) -> Result<Vec<InstanceMagnitudes>> {
    instances
        .par_iter()
        .map(|inst| {
            let per_channel = hht_magnitudes(inst, criteria.max_imfs, criteria)?;
            let channels = per_channel
                .iter()
                .map(|rows| Ok(FeatureMatrix::from_rows_f64(rows)?.pool_time(pool)))
                .collect::<Result<_>>()?;
            Ok(InstanceMagnitudes {
                instance_id: inst.id,
                speaker: inst.speaker.clone(),
                posture: inst.posture,
                channels,
            })
        })
        .collect()
}

/// Series of one task and mode split into train and test sides, plus a
/// standardizer fitted on the train side (not yet applied).
pub struct TaskData {
    pub labeled: LabeledDataset,
    pub split: SplitIds,
    pub standardizer: Standardizer,
    pub train: Vec<(FeatureSeries, usize)>,
    pub test: Vec<(FeatureSeries, usize)>,
    /// Series shorter than the networks' receptive field, left out of both sides.
    pub dropped_short: usize,
}

pub fn task_data(
    series: &[FeatureSeries],
    speakers: &[String],
    task: TaskSpec,
    min_len: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<TaskData> {
    let labeled = build_task(series, speakers, task)?;
    let usable: Vec<usize> = (0..series.len())
        .filter(|&i| series[i].matrix.cols() >= min_len)
        .collect();
    let kept_series: Vec<FeatureSeries> = usable.iter().map(|&i| series[i].clone()).collect();
    let kept = LabeledDataset {
        labels: usable.iter().map(|&i| labeled.labels[i]).collect(),
        ..labeled.clone()
    };
    let split = stratified_split(&kept.instance_labels(&kept_series), test_fraction, seed)?;
    let (test, train): (Vec<_>, Vec<_>) = kept_series
        .into_iter()
        .zip(kept.labels)
        .partition(|(s, _)| split.is_test(s.instance_id));
    let tied = train
        .first()
        .filter(|(s, _)| s.mode == ConfigMode::AllShuffled)
        .map(|(s, _)| s.matrix.rows() / PIPELINE_CHANNELS);
    let fit_on: Vec<&FeatureMatrix> = train.iter().map(|(s, _)| &s.matrix).collect();
    let standardizer = Standardizer::fit(&fit_on, tied)?;
    Ok(TaskData {
        labeled,
        split,
        train,
        test,
        standardizer,
        dropped_short: series.len() - usable.len(),
    })
}

impl TaskData {
    /// Scales both sides in place.
    pub fn apply_standardizer(&mut self, standardizer: &Standardizer) -> Result<()> {
        for (s, _) in self.train.iter_mut().chain(self.test.iter_mut()) {
            s.matrix = standardizer.apply(&s.matrix)?;
        }
        Ok(())
    }
}

/// Trains one network; `AllShuffled` series get a fresh block permutation each epoch.
pub fn train_network(
    spec: NetworkSpec,
    train_set: &[(FeatureSeries, usize)],
    cfg: &crate::neuralnet::TrainConfig,
    permutation_seed: u64,
) -> Result<(Network, TrainReport)> {
    let mut net = Network::new(spec, cfg.seed)?;
    let samples: Vec<Sample> = train_set
        .iter()
        .map(|(s, l)| Sample {
            features: &s.matrix,
            label: *l,
        })
        .collect();
    let redraw = |i: usize, epoch: u64| -> Result<Option<FeatureMatrix>> {
        Ok(Some(
            redraw_permutation(&train_set[i].0, permutation_seed, epoch)?.matrix,
        ))
    };
    let shuffled = train_set
        .first()
        .is_some_and(|(s, _)| s.mode == ConfigMode::AllShuffled);
    let augment: Option<&Augment> = if shuffled { Some(&redraw) } else { None };
    let report = train(&mut net, &samples, &[], cfg, augment)?;
    Ok((net, report))
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub reports: Vec<EvalReport>,
    pub grid: SummaryGrid,
    pub instances: usize,
    pub skipped_recordings: usize,
    pub dropped_short: usize,
}

struct Outputs {
    dir: PathBuf,
    reports: File,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        for sub in ["confusion", "history", "checkpoints"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let path = dir.join("reports.csv");
        let mut reports = File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(reports, "task,mode,model,accuracy").map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            reports,
        })
    }

    fn write(&self, rel: impl AsRef<Path>, text: &str) -> Result<()> {
        let p = self.dir.join(rel);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn report(&mut self, r: &EvalReport) -> Result<()> {
        let path = self.dir.join("reports.csv");
        writeln!(self.reports, "{}", r.csv_row()).map_err(|e| Error::io(&path, e))?;
        self.reports.flush().map_err(|e| Error::io(&path, e))?;
        self.write(
            format!("confusion/{}_{}_{}.txt", r.task, r.mode.as_str(), r.model),
            &r.confusion_text(),
        )
    }
}

/// Conditioning, HHT features, then for every mode and task: split, train each
/// configured model, evaluate each and their ensemble. Report rows are flushed
/// to `output_dir` as they are produced.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut outputs = cfg.output_dir.as_deref().map(Outputs::create).transpose()?;

    let prepared = prepare_instances(manifest, cfg)?;
    if let Some(out) = &outputs {
        out.write("segments.csv", &segments_csv(&prepared.segments))?;
    }
    if prepared.instances.is_empty() {
        return Err(Error::Empty("no breath instances survived conditioning"));
    }
    let mags = extract_magnitudes(&prepared.instances, &cfg.hht, cfg.features.pool)?;
    let k = cfg.hht.max_imfs;

    let mut columns: Vec<String> = (0..cfg.models.len())
        .map(ExperimentConfig::model_name)
        .collect();
    let ensemble = cfg.models.len() > 1;
    if ensemble {
        columns.push(ENSEMBLE.to_string());
    }
    let mut grid = SummaryGrid::new(columns);
    let mut reports = Vec::new();
    let mut dropped_short = 0;

    for &mode in &cfg.modes {
        let series = assemble(&mags, mode, cfg.seed)?;
        let dim = mode.dimension(k);
        for &task in &cfg.tasks {
            let task_index = task as u64;
            let min_len = cfg
                .models
                .iter()
                .map(|m| NetworkSpec::parse(m, dim, 2).map(|s| s.min_sequence_len()))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .max()
                .unwrap_or(1);
            let mut data = task_data(
                &series,
                &manifest.speakers,
                task,
                min_len,
                cfg.test_fraction,
                derive_seed(cfg.seed, &[task_index]),
            )?;
            dropped_short += data.dropped_short;
            let standardizer = data.standardizer.clone();
            data.apply_standardizer(&standardizer)?;
            let classes = data.labeled.classes.len();

            let mut trained: Vec<(String, Network)> = Vec::new();
            for (mi, text) in cfg.models.iter().enumerate() {
                let name = ExperimentConfig::model_name(mi);
                let spec = NetworkSpec::parse(text, dim, classes)?;
                let mut tcfg = cfg.training.clone();
                tcfg.seed = derive_seed(cfg.seed, &[task_index, mode as u64, mi as u64]);
                tcfg.deterministic = cfg.deterministic || tcfg.deterministic;
                let (net, history) = train_network(spec, &data.train, &tcfg, cfg.seed)?;
                if let Some(out) = &outputs {
                    let stem = format!("{task}_{}_{name}", mode.as_str());
                    out.write(format!("history/{stem}.csv"), &history.to_csv())?;
                    if cfg.write_checkpoints {
                        let meta = CheckpointMeta {
                            seed: tcfg.seed,
                            epochs: history.train_losses().len(),
                            steps: history.steps,
                            labels: data.labeled.classes.clone(),
                            task: Some(task.to_string()),
                            config_mode: Some(mode.as_str().to_string()),
                            pool: cfg.features.pool,
                            standardizer: Some(data.standardizer.clone()),
                        };
                        save_checkpoint(
                            &net,
                            &meta,
                            out.dir.join(format!("checkpoints/{stem}.bhm")),
                        )?;
                    }
                }
                trained.push((name, net));
            }

            let inputs: Vec<&FeatureMatrix> = data.test.iter().map(|(s, _)| &s.matrix).collect();
            let truth: Vec<usize> = data.test.iter().map(|(_, l)| *l).collect();
            let named: Vec<(String, &Network)> =
                trained.iter().map(|(n, m)| (n.clone(), m)).collect();
            for (model, preds) in predict_models(&named, &inputs, ensemble)? {
                let report = EvalReport::from_predictions(
                    task,
                    mode,
                    &model,
                    data.labeled.classes.clone(),
                    &truth,
                    &preds,
                )?;
                if let Some(out) = outputs.as_mut() {
                    out.report(&report)?;
                }
                grid.insert(&report);
                reports.push(report);
            }
        }
    }
    if let Some(out) = &outputs {
        out.write("summary.txt", &grid.to_text())?;
    }
    Ok(ExperimentResult {
        reports,
        grid,
        instances: prepared.instances.len(),
        skipped_recordings: prepared.skipped.len(),
        dropped_short,
    })
}

/// Per-class counts, handy for sanity checks and CLI summaries.
pub fn class_counts(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}
