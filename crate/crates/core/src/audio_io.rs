//! Recording, manifest and feature-cache I/O.
//!
//! Three on-disk formats live here:
//!
//! * RIFF/WAVE linear PCM (16/24/32-bit integer or 32-bit float), any channel count.
//! * Dataset manifests: a `#speakers=...;postures=...` vocabulary header followed by
//!   `recording_path,speaker_id,posture_id[,session]` rows. Relative paths resolve
//!   against the manifest's directory.
//! * Feature caches: magic `BHF1`, a `u32` little-endian header length, a UTF-8 JSON
//!   header, then the float32 little-endian payload (each series row-major, `d × N_p`).

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ConfigMode, FeatureMatrix, FeatureSeries};
use crate::labels::Posture;

/// Number of microphones the pipeline expects.
pub const PIPELINE_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelRole {
    /// Omnidirectional capsule next to the mouth (channel 0).
    Close,
    /// Cardioid microphones at a distance (channels 1..=3).
    Far,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelRecording {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl MultichannelRecording {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidParameter(
                "sample_rate must be positive".into(),
            ));
        }
        if channels.is_empty() {
            return Err(Error::Empty("recording has no channels"));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("channels differ in length".into()));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn role(&self, channel: usize) -> ChannelRole {
        if channel == 0 {
            ChannelRole::Close
        } else {
            ChannelRole::Far
        }
    }
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        hound::Error::Unsupported => Error::UnsupportedEncoding("unsupported wav subformat".into()),
        other => Error::Wav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Loads a WAV file, de-interleaving into per-channel `f64` buffers.
///
/// Integer samples map to `value / 2^(bits-1)`, so 16-bit full scale `32767` becomes
/// `32767/32768`. Float samples are widened exactly.
pub fn load_recording(path: impl AsRef<Path>) -> Result<MultichannelRecording> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let nch = spec.channels as usize;
    if nch == 0 {
        return Err(Error::UnsupportedEncoding("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (hound::SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(path, e))?
        }
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "{fmt:?} with {bits} bits per sample"
            )))
        }
    };
    if interleaved.is_empty() {
        return Err(Error::Empty("audio stream has zero frames"));
    }
    let frames = interleaved.len() / nch;
    let mut channels = vec![Vec::with_capacity(frames); nch];
    for frame in interleaved.chunks_exact(nch) {
        for (ch, &v) in channels.iter_mut().zip(frame) {
            ch.push(v);
        }
    }
    MultichannelRecording::new(channels, spec.sample_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Int16,
    Float32,
}

pub fn save_recording(
    path: impl AsRef<Path>,
    recording: &MultichannelRecording,
    encoding: WavEncoding,
) -> Result<()> {
    let path = path.as_ref();
    let (bits, format) = match encoding {
        WavEncoding::Int16 => (16, hound::SampleFormat::Int),
        WavEncoding::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: recording.num_channels() as u16,
        sample_rate: recording.sample_rate,
        bits_per_sample: bits,
        sample_format: format,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for i in 0..recording.len() {
        for ch in &recording.channels {
            let v = ch[i];
            match encoding {
                WavEncoding::Float32 => writer.write_sample(v as f32),
                WavEncoding::Int16 => {
                    writer.write_sample((v * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
                }
            }
            .map_err(|e| wav_err(path, e))?;
        }
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub recording_path: PathBuf,
    pub speaker_id: String,
    pub posture: Posture,
    pub session: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub speakers: Vec<String>,
    pub postures: Vec<Posture>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn speaker_index(&self, speaker: &str) -> Option<usize> {
        self.speakers.iter().position(|s| s == speaker)
    }

    /// Renders the manifest text. Paths are written as stored.
    pub fn to_text(&self) -> String {
        let postures: Vec<&str> = self.postures.iter().map(|p| p.as_str()).collect();
        let mut out = format!(
            "#speakers={};postures={}\n",
            self.speakers.join("|"),
            postures.join("|")
        );
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{}",
                e.recording_path.display(),
                e.speaker_id,
                e.posture
            ));
            if let Some(s) = &e.session {
                out.push(',');
                out.push_str(s);
            }
            out.push('\n');
        }
        out
    }
}

fn parse_header(line: &str) -> Option<(Vec<String>, Vec<String>)> {
    let body = line.strip_prefix('#')?.trim();
    let mut speakers = None;
    let mut postures = None;
    for part in body.split(';') {
        let (key, value) = part.split_once('=')?;
        let values: Vec<String> = value
            .split('|')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        match key.trim() {
            "speakers" => speakers = Some(values),
            "postures" => postures = Some(values),
            _ => return None,
        }
    }
    Some((speakers?, postures?))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let err = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut lines = text.lines().enumerate();
    let (speakers, posture_tokens) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .and_then(|(_, l)| parse_header(l))
        .ok_or_else(|| err(1, "missing `#speakers=...;postures=...` header".into()))?;
    let postures = posture_tokens
        .iter()
        .map(|t| t.parse::<Posture>())
        .collect::<Result<Vec<_>>>()
        .map_err(|e| err(1, e.to_string()))?;

    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.splitn(4, ',').map(str::trim).collect();
        if fields.len() < 3 || fields[..3].iter().any(|f| f.is_empty()) {
            return Err(err(
                lineno,
                "expected recording_path,speaker_id,posture_id".into(),
            ));
        }
        let speaker_id = fields[1];
        if !speakers.iter().any(|s| s == speaker_id) {
            return Err(err(lineno, format!("unknown speaker token {speaker_id:?}")));
        }
        let posture: Posture = fields[2]
            .parse()
            .map_err(|_| err(lineno, format!("unknown posture token {:?}", fields[2])))?;
        if !postures.contains(&posture) {
            return Err(err(
                lineno,
                format!("posture {posture} not declared in header"),
            ));
        }
        let rel = Path::new(fields[0]);
        let recording_path = if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            base.join(rel)
        };
        if !recording_path.is_file() {
            return Err(err(
                lineno,
                format!(
                    "recording {} is not a readable file",
                    recording_path.display()
                ),
            ));
        }
        if !seen.insert(recording_path.clone()) {
            return Err(err(
                lineno,
                format!("duplicate recording path {}", recording_path.display()),
            ));
        }
        entries.push(ManifestEntry {
            recording_path,
            speaker_id: speaker_id.to_string(),
            posture,
            session: fields.get(3).map(|s| s.to_string()),
        });
    }
    Ok(DatasetManifest {
        speakers,
        postures,
        entries,
    })
}

const CACHE_MAGIC: &[u8; 4] = b"BHF1";
pub const CACHE_VERSION: u32 = 1;

/// A set of feature series sharing one configuration mode.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub mode: ConfigMode,
    /// IMFs per channel.
    pub k: usize,
    /// Speaker label table; series refer to entries by value.
    pub speakers: Vec<String>,
    pub series: Vec<FeatureSeries>,
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    version: u32,
    config_mode: ConfigMode,
    q: usize,
    k: usize,
    d: usize,
    speakers: Vec<String>,
    postures: Vec<Posture>,
    instances: Vec<CacheEntry>,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    id: u64,
    speaker: usize,
    posture: Posture,
    len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin_channel: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    permutation: Option<[u8; 4]>,
}

impl FeatureCache {
    pub fn dimension(&self) -> usize {
        self.mode.dimension(self.k)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dimension();
        for s in &self.series {
            if s.mode != self.mode {
                return Err(Error::Shape(format!(
                    "series {} has mode {:?}, cache has {:?}",
                    s.instance_id, s.mode, self.mode
                )));
            }
            if s.matrix.rows() != d {
                return Err(Error::Shape(format!(
                    "series {} has {} rows, expected {d}",
                    s.instance_id,
                    s.matrix.rows()
                )));
            }
            if !self.speakers.contains(&s.speaker) {
                return Err(Error::UnknownLabel(format!("speaker {:?}", s.speaker)));
            }
        }
        Ok(())
    }

    /// Writes the cache and returns the number of bytes written.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<u64> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let n = self.write_to(&mut w).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(n)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<u64> {
        self.validate()?;
        let header = CacheHeader {
            version: CACHE_VERSION,
            config_mode: self.mode,
            q: PIPELINE_CHANNELS,
            k: self.k,
            d: self.dimension(),
            speakers: self.speakers.clone(),
            postures: Posture::ALL.to_vec(),
            instances: self
                .series
                .iter()
                .map(|s| CacheEntry {
                    id: s.instance_id,
                    speaker: self.speakers.iter().position(|x| x == &s.speaker).unwrap(),
                    posture: s.posture,
                    len: s.matrix.cols(),
                    origin_channel: s.origin_channel,
                    permutation: s.permutation,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("cache header serializes");
        let io = |e| Error::io("<cache>", e);
        w.write_all(CACHE_MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(&json).map_err(io)?;
        let mut written = (CACHE_MAGIC.len() + 4 + json.len()) as u64;
        for s in &self.series {
            for v in s.matrix.as_slice() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
            written += 4 * s.matrix.as_slice().len() as u64;
        }
        Ok(written)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let truncated = |_| Error::Cache("truncated file".into());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Cache("bad magic".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(truncated)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(truncated)?;
        let header: CacheHeader = serde_json::from_slice(&json)
            .map_err(|e| Error::Cache(format!("malformed header: {e}")))?;
        if header.version != CACHE_VERSION {
            return Err(Error::Cache(format!(
                "version mismatch: file {}, reader {CACHE_VERSION}",
                header.version
            )));
        }
        if header.d != header.config_mode.dimension(header.k) {
            return Err(Error::Cache(format!(
                "dimension {} inconsistent with {:?} and K={}",
                header.d, header.config_mode, header.k
            )));
        }
        let d = header.d;
        let mut series = Vec::with_capacity(header.instances.len());
        for entry in header.instances {
            let mut bytes = vec![0u8; 4 * d * entry.len];
            r.read_exact(&mut bytes).map_err(truncated)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let speaker = header
                .speakers
                .get(entry.speaker)
                .ok_or_else(|| {
                    Error::Cache(format!("speaker index {} out of range", entry.speaker))
                })?
                .clone();
            series.push(FeatureSeries {
                instance_id: entry.id,
                speaker,
                posture: entry.posture,
                mode: header.config_mode,
                origin_channel: entry.origin_channel,
                permutation: entry.permutation,
                matrix: FeatureMatrix::from_vec(d, entry.len, data)?,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io("<cache>", e))? != 0 {
            return Err(Error::Cache("trailing bytes after payload".into()));
        }
        Ok(Self {
            mode: header.config_mode,
            k: header.k,
            speakers: header.speakers,
            series,
        })
    }
}

pub fn write_feature_cache(cache: &FeatureCache, path: impl AsRef<Path>) -> Result<u64> {
    cache.write(path)
}

pub fn read_feature_cache(path: impl AsRef<Path>) -> Result<FeatureCache> {
    FeatureCache::read(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(id: u64, rows: usize, cols: usize, fill: f32) -> FeatureSeries {
        FeatureSeries {
            instance_id: id,
            speaker: "s0".into(),
            posture: Posture::Lying,
            mode: ConfigMode::AllOrdered,
            origin_channel: None,
            permutation: None,
            matrix: FeatureMatrix::from_vec(rows, cols, vec![fill; rows * cols]).unwrap(),
        }
    }

    #[test]
    fn sixteen_bit_full_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 4,
            sample_rate: 48000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..4 {
            w.write_sample(32767i16).unwrap();
        }
        w.finalize().unwrap();
        let rec = load_recording(&path).unwrap();
        assert_eq!(rec.num_channels(), 4);
        assert_eq!(rec.channels[2][0], 32767.0 / 32768.0);
        assert_eq!(rec.role(0), ChannelRole::Close);
        assert_eq!(rec.role(3), ChannelRole::Far);
    }

    #[test]
    fn mono_zeros_and_24_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..1000 {
            w.write_sample(0i32).unwrap();
        }
        w.finalize().unwrap();
        let rec = load_recording(&path).unwrap();
        assert_eq!(rec.channels, vec![vec![0.0; 1000]]);
    }

    #[test]
    fn zero_length_stream_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        hound::WavWriter::create(&path, spec)
            .unwrap()
            .finalize()
            .unwrap();
        assert!(matches!(load_recording(&path), Err(Error::Empty(_))));
        assert!(matches!(
            load_recording(dir.path().join("missing.wav")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn eight_bit_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 8,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(3i8).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            load_recording(&path),
            Err(Error::UnsupportedEncoding(_))
        ));
    }

    #[test]
    fn one_instance_payload_size() {
        let cache = FeatureCache {
            mode: ConfigMode::AllOrdered,
            k: 9,
            speakers: vec!["s0".into()],
            series: vec![series(0, 36, 100, 0.5)],
        };
        let mut buf = Vec::new();
        let n = cache.write_to(&mut buf).unwrap();
        assert_eq!(n as usize, buf.len());
        let header_len = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        assert_eq!(buf.len() - 8 - header_len, 14400);
    }

    #[test]
    fn empty_cache_round_trips() {
        let cache = FeatureCache {
            mode: ConfigMode::Channel0,
            k: 9,
            speakers: vec![],
            series: vec![],
        };
        let mut buf = Vec::new();
        cache.write_to(&mut buf).unwrap();
        let back = FeatureCache::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, cache);
    }

    #[test]
    fn cache_rejects_bad_input() {
        let mismatched = FeatureCache {
            mode: ConfigMode::AllOrdered,
            k: 9,
            speakers: vec!["s0".into()],
            series: vec![series(0, 36, 4, 1.0), series(1, 9, 4, 1.0)],
        };
        assert!(matches!(
            mismatched.write_to(&mut Vec::new()),
            Err(Error::Shape(_))
        ));

        let good = FeatureCache {
            series: vec![series(0, 36, 4, 1.0)],
            ..mismatched
        };
        let mut buf = Vec::new();
        good.write_to(&mut buf).unwrap();
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(
            FeatureCache::read_from(&mut &cut[..]),
            Err(Error::Cache(m)) if m.contains("truncated")
        ));

        let header_len = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&buf[8..8 + header_len]).unwrap();
        let bumped = json.replacen("\"version\":1", "\"version\":2", 1);
        let mut tampered = buf[..4].to_vec();
        tampered.extend_from_slice(&(bumped.len() as u32).to_le_bytes());
        tampered.extend_from_slice(bumped.as_bytes());
        tampered.extend_from_slice(&buf[8 + header_len..]);
        assert!(matches!(
            FeatureCache::read_from(&mut tampered.as_slice()),
            Err(Error::Cache(m)) if m.contains("version")
        ));
    }
}
