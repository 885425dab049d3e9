//! Seeded four-microphone breath-like recordings for desk-scale experiments.
//!
//! Each speaker owns a set of amplitude-modulated noise bands (centres and
//! modulation rates). Each posture owns a spectral tilt and gain per microphone.
//! Every microphone also picks up its own random interfering bands, strongest on
//! the close microphone, so channel 0 alone carries less speaker evidence than
//! the four channels together.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::{
    save_recording, DatasetManifest, ManifestEntry, MultichannelRecording, WavEncoding,
    PIPELINE_CHANNELS,
};
use crate::error::{Error, Result};
use crate::labels::Posture;

const PARTIALS: usize = 5;
const REFERENCE_HZ: f64 = 500.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub n_instances_per_cell: usize,
    pub sample_rate: u32,
    pub seed: u64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Noise-only lead-in and tail around each breath.
    pub padding_s: f64,
    pub snr_db: f64,
    /// Band centres of the lowest speaker; others are scaled up geometrically.
    pub base_centers_hz: Vec<f64>,
    /// Ratio between the highest and lowest speaker's band centres.
    pub center_spread: f64,
    /// Half-width of each band relative to its centre.
    pub relative_bandwidth: f64,
    pub modulation_hz: [f64; 2],
    /// Interfering bands per microphone, drawn independently per instance.
    pub distractors: usize,
    /// Interfering band level on the close microphone (channel 0).
    pub close_distractor_level: f64,
    /// Interfering band level on the far microphones.
    pub far_distractor_level: f64,
    /// Spread of the per-instance, per-microphone band level jitter (natural log units).
    pub level_jitter: f64,
    /// Largest posture tilt on the far microphones, dB per octave.
    pub max_tilt_db: f64,
    /// Largest posture tilt on the close microphone, dB per octave.
    pub close_tilt_db: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 4,
            n_instances_per_cell: 50,
            sample_rate: 4000,
            seed: 1,
            min_duration_s: 0.5,
            max_duration_s: 1.2,
            padding_s: 0.25,
            snr_db: 20.0,
            base_centers_hz: vec![160.0, 380.0, 800.0],
            center_spread: 2.0,
            relative_bandwidth: 0.08,
            modulation_hz: [5.0, 20.0],
            distractors: 2,
            close_distractor_level: 1.0,
            far_distractor_level: 0.15,
            level_jitter: 0.15,
            max_tilt_db: 8.0,
            close_tilt_db: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("synth: {m}")));
        if self.n_speakers < 2 {
            return bad("need at least 2 speakers");
        }
        if self.n_instances_per_cell == 0 {
            return bad("need at least one instance per cell");
        }
        if !(0.3..=1.5).contains(&self.min_duration_s)
            || !(self.min_duration_s..=1.5).contains(&self.max_duration_s)
        {
            return bad("durations must satisfy 0.3 <= min <= max <= 1.5 s");
        }
        if self.base_centers_hz.is_empty() || self.base_centers_hz.iter().any(|&c| c <= 0.0) {
            return bad("need positive band centres");
        }
        if !(self.center_spread >= 1.0) || !(0.0..0.5).contains(&self.relative_bandwidth) {
            return bad("center_spread must be >= 1 and relative_bandwidth in [0, 0.5)");
        }
        let top = self.base_centers_hz.iter().cloned().fold(0.0, f64::max)
            * self.center_spread
            * (1.0 + self.relative_bandwidth);
        if top >= 0.45 * self.sample_rate as f64 {
            return bad("highest band exceeds 0.45 x sample rate");
        }
        if !(self.modulation_hz[0] > 0.0 && self.modulation_hz[0] <= self.modulation_hz[1]) {
            return bad("modulation range must be positive and ordered");
        }
        if self.padding_s < 0.0 || !self.snr_db.is_finite() {
            return bad("padding must be non-negative and snr finite");
        }
        Ok(())
    }

    pub fn speaker_name(&self, s: usize) -> String {
        format!("spk{s:02}")
    }

    fn signature_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX - stream);
        rng
    }

    /// Band centres (Hz) and modulation rates (Hz) of speaker `s`. Centres and
    /// rates both grow geometrically with the speaker index; rates get a small
    /// per-band offset.
    pub fn speaker_signature(&self, s: usize) -> (Vec<f64>, Vec<f64>) {
        let frac = s as f64 / (self.n_speakers - 1) as f64;
        let ratio = self.center_spread.powf(frac);
        let centers = self.base_centers_hz.iter().map(|c| c * ratio).collect();
        let [lo, hi] = self.modulation_hz;
        let rate = lo * (hi / lo).powf(frac);
        let mut rng = self.signature_rng(s as u64);
        let rates = self
            .base_centers_hz
            .iter()
            .map(|_| rate * rng.gen_range(0.95..1.05))
            .collect();
        (centers, rates)
    }

    /// `(tilt dB/octave, gain)` for each microphone under posture `p`.
    pub fn posture_signature(&self, p: Posture) -> [(f64, f64); PIPELINE_CHANNELS] {
        let mut rng = self.signature_rng(1_000 + p.index() as u64);
        let mut out = [(0.0, 1.0); PIPELINE_CHANNELS];
        for (c, slot) in out.iter_mut().enumerate() {
            let limit = if c == 0 {
                self.close_tilt_db
            } else {
                self.max_tilt_db
            };
            let tilt = if limit > 0.0 {
                rng.gen_range(-limit..=limit)
            } else {
                0.0
            };
            *slot = (tilt, rng.gen_range(0.5..2.0));
        }
        out
    }
}

struct Band {
    freqs: [f64; PARTIALS],
    phases: [f64; PARTIALS],
    rate: f64,
    depth: f64,
    mod_phase: f64,
}

impl Band {
    fn draw(center: f64, rate: f64, bandwidth: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut freqs = [0.0; PARTIALS];
        let mut phases = [0.0; PARTIALS];
        for k in 0..PARTIALS {
            freqs[k] = center * (1.0 + rng.gen_range(-bandwidth..=bandwidth));
            phases[k] = rng.gen_range(0.0..2.0 * PI);
        }
        Self {
            freqs,
            phases,
            rate,
            depth: rng.gen_range(0.7..0.9),
            mod_phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    /// Adds `level * tilt(f) * env(t) * AM(t) * partials(t)` for `t` shifted by `delay_s`.
    fn render(
        &self,
        out: &mut [f64],
        fs: f64,
        delay_s: f64,
        start_s: f64,
        dur_s: f64,
        level: f64,
        tilt_db: f64,
    ) {
        let weights: Vec<f64> = self
            .freqs
            .iter()
            .map(|&f| {
                level * (f / REFERENCE_HZ).powf(tilt_db / (20.0 * 2f64.log10()))
                    / (PARTIALS as f64).sqrt()
            })
            .collect();
        for (i, o) in out.iter_mut().enumerate() {
            let t = i as f64 / fs - delay_s;
            let u = (t - start_s) / dur_s;
            if !(0.0..=1.0).contains(&u) {
                continue;
            }
            let env = 0.5 - 0.5 * (2.0 * PI * u).cos();
            let am = 1.0 + self.depth * (2.0 * PI * self.rate * t + self.mod_phase).sin();
            let mut s = 0.0;
            for k in 0..PARTIALS {
                s += weights[k] * (2.0 * PI * self.freqs[k] * t + self.phases[k]).sin();
            }
            *o += env * am * s;
        }
    }
}

/// The `index`-th recording of cell `(speaker, posture)`.
pub fn synthesize_instance(
    cfg: &SynthConfig,
    speaker: usize,
    posture: Posture,
    index: usize,
) -> Result<MultichannelRecording> {
    cfg.validate()?;
    if speaker >= cfg.n_speakers {
        return Err(Error::InvalidParameter(format!(
            "speaker {speaker} out of range"
        )));
    }
    let fs = cfg.sample_rate as f64;
    let global = ((speaker * Posture::ALL.len() + posture.index()) * cfg.n_instances_per_cell
        + index) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(global);

    let duration = rng.gen_range(cfg.min_duration_s..=cfg.max_duration_s);
    let max_delay = 0.006;
    let n = ((2.0 * cfg.padding_s + duration + max_delay) * fs).ceil() as usize;
    let (centers, rates) = cfg.speaker_signature(speaker);
    let shift = 1.0 + 0.02 * rng.sample::<f64, _>(StandardNormal);
    let bands: Vec<Band> = centers
        .iter()
        .zip(&rates)
        .map(|(&c, &r)| Band::draw(c * shift, r, cfg.relative_bandwidth, &mut rng))
        .collect();
    let posture_sig = cfg.posture_signature(posture);
    let lo = cfg
        .base_centers_hz
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = cfg.base_centers_hz.iter().cloned().fold(0.0, f64::max) * cfg.center_spread;
    let jitter = Normal::new(0.0, cfg.level_jitter.max(0.0)).expect("finite spread");

    let mut channels = Vec::with_capacity(PIPELINE_CHANNELS);
    for (c, &(tilt, gain)) in posture_sig.iter().enumerate() {
        let delay = if c == 0 {
            0.0
        } else {
            rng.gen_range(0.0..max_delay)
        };
        let mut x = vec![0.0; n];
        for band in &bands {
            let level = gain * jitter.sample(&mut rng).exp();
            band.render(&mut x, fs, delay, cfg.padding_s, duration, level, tilt);
        }
        for _ in 0..cfg.distractors {
            let center = lo * (hi / lo).powf(rng.gen::<f64>());
            let rate = rng.gen_range(cfg.modulation_hz[0]..=cfg.modulation_hz[1]);
            let band = Band::draw(center, rate, cfg.relative_bandwidth, &mut rng);
            let base = if c == 0 {
                cfg.close_distractor_level
            } else {
                cfg.far_distractor_level
            };
            let level = gain * base * jitter.sample(&mut rng).exp();
            band.render(&mut x, fs, delay, cfg.padding_s, duration, level, tilt);
        }
        let start = (cfg.padding_s * fs) as usize;
        let end = (((cfg.padding_s + duration) * fs) as usize).min(n);
        let power = x[start..end].iter().map(|v| v * v).sum::<f64>() / (end - start).max(1) as f64;
        let sigma = (power / 10f64.powf(cfg.snr_db / 10.0)).sqrt();
        for v in &mut x {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
        channels.push(x);
    }
    MultichannelRecording::new(channels, cfg.sample_rate)
}

/// Writes every cell's recordings as float WAV under `out_dir/audio` plus
/// `out_dir/manifest.txt`, and returns the manifest with absolute paths.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let audio = out_dir.join("audio");
    fs::create_dir_all(&audio).map_err(|e| Error::io(&audio, e))?;
    let cells: Vec<(usize, Posture, usize)> = (0..cfg.n_speakers)
        .flat_map(|s| {
            Posture::ALL
                .into_iter()
                .flat_map(move |p| (0..cfg.n_instances_per_cell).map(move |i| (s, p, i)))
        })
        .collect();
    let entries: Vec<ManifestEntry> = cells
        .par_iter()
        .map(|&(s, p, i)| {
            let rec = synthesize_instance(cfg, s, p, i)?;
            let name = format!("{}_{}_{i:04}.wav", cfg.speaker_name(s), p.as_str());
            save_recording(audio.join(&name), &rec, WavEncoding::Float32)?;
            Ok(ManifestEntry {
                recording_path: PathBuf::from("audio").join(name),
                speaker_id: cfg.speaker_name(s),
                posture: p,
                session: None,
            })
        })
        .collect::<Result<_>>()?;
    let mut manifest = DatasetManifest {
        speakers: (0..cfg.n_speakers).map(|s| cfg.speaker_name(s)).collect(),
        postures: Posture::ALL.to_vec(),
        entries,
    };
    let path = out_dir.join("manifest.txt");
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    for e in &mut manifest.entries {
        e.recording_path = out_dir.join(&e.recording_path);
    }
    Ok(manifest)
}
