//! Channel-configuration embeddings of per-channel instantaneous-magnitude matrices.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::PIPELINE_CHANNELS;
use crate::error::{Error, Result};
use crate::labels::Posture;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigMode {
    /// Close microphone only.
    Channel0,
    /// Each microphone as its own series.
    SplitChannel,
    /// All microphones stacked in fixed order.
    AllOrdered,
    /// All microphones stacked, channel blocks randomly permuted.
    AllShuffled,
}

impl ConfigMode {
    pub const ALL: [ConfigMode; 4] = [
        ConfigMode::Channel0,
        ConfigMode::SplitChannel,
        ConfigMode::AllOrdered,
        ConfigMode::AllShuffled,
    ];

    /// Feature rows per time step for `k` IMFs per channel.
    pub fn dimension(self, k: usize) -> usize {
        match self {
            ConfigMode::Channel0 | ConfigMode::SplitChannel => k,
            ConfigMode::AllOrdered | ConfigMode::AllShuffled => PIPELINE_CHANNELS * k,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConfigMode::Channel0 => "channel0",
            ConfigMode::SplitChannel => "split_channel",
            ConfigMode::AllOrdered => "all_ordered",
            ConfigMode::AllShuffled => "all_shuffled",
        }
    }
}

impl std::str::FromStr for ConfigMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConfigMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown config mode {s:?}")))
    }
}

/// Row-major `rows × cols` matrix of `f32`; rows are features, columns are time.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows_f64(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().map(|&v| v as f32).collect();
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn vstack(parts: &[&FeatureMatrix]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::Shape(
                "vstack of matrices with different widths".into(),
            ));
        }
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.data.len()).sum());
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Self {
            rows: parts.iter().map(|m| m.rows).sum(),
            cols,
            data,
        })
    }

    /// Averages non-overlapping windows of `factor` columns; a trailing partial window
    /// is averaged over what it holds.
    pub fn pool_time(&self, factor: usize) -> Self {
        if factor <= 1 {
            return self.clone();
        }
        let cols = self.cols.div_ceil(factor);
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            for chunk in self.row(r).chunks(factor) {
                let sum: f64 = chunk.iter().map(|&v| v as f64).sum();
                data.push((sum / chunk.len() as f64) as f32);
            }
        }
        Self {
            rows: self.rows,
            cols,
            data,
        }
    }
}

/// Per-channel magnitude matrices of one breath instance, before embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMagnitudes {
    pub instance_id: u64,
    pub speaker: String,
    pub posture: Posture,
    /// One `K × N_p` matrix per channel, channel 0 first.
    pub channels: Vec<FeatureMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeries {
    pub instance_id: u64,
    pub speaker: String,
    pub posture: Posture,
    pub mode: ConfigMode,
    /// Source microphone, set for `SplitChannel`.
    pub origin_channel: Option<u8>,
    /// Block order applied, set for `AllShuffled`.
    pub permutation: Option<[u8; 4]>,
    pub matrix: FeatureMatrix,
}

/// Permutation of the four channel blocks. `order[i] = j` means output block `i` is
/// input block `j`, i.e. `P[i][j] = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockPermutation {
    order: [u8; 4],
}

impl BlockPermutation {
    pub const IDENTITY: BlockPermutation = BlockPermutation {
        order: [0, 1, 2, 3],
    };

    pub fn new(order: [u8; 4]) -> Result<Self> {
        let mut seen = [false; 4];
        for &o in &order {
            if o > 3 || std::mem::replace(&mut seen[o as usize], true) {
                return Err(Error::InvalidParameter(format!(
                    "{order:?} is not a permutation of 0..4"
                )));
            }
        }
        Ok(Self { order })
    }

    pub fn order(&self) -> [u8; 4] {
        self.order
    }

    pub fn transpose(&self) -> Self {
        let mut inv = [0u8; 4];
        for (i, &j) in self.order.iter().enumerate() {
            inv[j as usize] = i as u8;
        }
        Self { order: inv }
    }

    pub fn matrix(&self) -> [[f64; 4]; 4] {
        let mut p = [[0.0; 4]; 4];
        for (i, &j) in self.order.iter().enumerate() {
            p[i][j as usize] = 1.0;
        }
        p
    }

    /// Dense `P ⊗ I_k`, size `4k × 4k`.
    pub fn kron_identity(&self, k: usize) -> Vec<Vec<f64>> {
        let p = self.matrix();
        let n = 4 * k;
        let mut b = vec![vec![0.0; n]; n];
        for (bi, prow) in p.iter().enumerate() {
            for (bj, &v) in prow.iter().enumerate() {
                if v != 0.0 {
                    for t in 0..k {
                        b[bi * k + t][bj * k + t] = v;
                    }
                }
            }
        }
        b
    }
}

/// Draws a permutation uniformly from the 24 elements of S4.
pub fn random_permutation(rng: &mut impl Rng) -> BlockPermutation {
    let mut order = [0u8, 1, 2, 3];
    order.shuffle(rng);
    BlockPermutation { order }
}

/// Reorders the four `rows/4`-row blocks of `m` by `p` (row reindexing, no multiply).
pub fn block_permute(m: &FeatureMatrix, p: BlockPermutation) -> Result<FeatureMatrix> {
    if !m.rows.is_multiple_of(4) {
        return Err(Error::Shape(format!(
            "{} rows cannot be split into 4 channel blocks",
            m.rows
        )));
    }
    let block = m.rows / 4 * m.cols;
    let mut data = Vec::with_capacity(m.data.len());
    for &src in &p.order {
        let start = src as usize * block;
        data.extend_from_slice(&m.data[start..start + block]);
    }
    Ok(FeatureMatrix {
        rows: m.rows,
        cols: m.cols,
        data,
    })
}

/// Generator for one instance's permutation draws, independent of scheduling.
pub fn instance_rng(seed: u64, instance_id: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(instance_id);
    rng
}

pub fn assemble(
    instances: &[InstanceMagnitudes],
    mode: ConfigMode,
    seed: u64,
) -> Result<Vec<FeatureSeries>> {
    let per_instance: Vec<Vec<FeatureSeries>> = instances
        .par_iter()
        .map(|inst| assemble_one(inst, mode, seed))
        .collect::<Result<_>>()?;
    Ok(per_instance.into_iter().flatten().collect())
}

fn assemble_one(
    inst: &InstanceMagnitudes,
    mode: ConfigMode,
    seed: u64,
) -> Result<Vec<FeatureSeries>> {
    if inst.channels.len() != PIPELINE_CHANNELS {
        return Err(Error::Shape(format!(
            "instance {} has {} channels, expected {PIPELINE_CHANNELS}",
            inst.instance_id,
            inst.channels.len()
        )));
    }
    let (k, n) = (inst.channels[0].rows, inst.channels[0].cols);
    if inst.channels.iter().any(|m| m.rows != k || m.cols != n) {
        return Err(Error::Shape(format!(
            "instance {} has channel matrices of different shapes",
            inst.instance_id
        )));
    }
    let make = |matrix, origin_channel, permutation| FeatureSeries {
        instance_id: inst.instance_id,
        speaker: inst.speaker.clone(),
        posture: inst.posture,
        mode,
        origin_channel,
        permutation,
        matrix,
    };
    Ok(match mode {
        ConfigMode::Channel0 => vec![make(inst.channels[0].clone(), None, None)],
        ConfigMode::SplitChannel => inst
            .channels
            .iter()
            .enumerate()
            .map(|(c, m)| make(m.clone(), Some(c as u8), None))
            .collect(),
        ConfigMode::AllOrdered => {
            let parts: Vec<&FeatureMatrix> = inst.channels.iter().collect();
            vec![make(FeatureMatrix::vstack(&parts)?, None, None)]
        }
        ConfigMode::AllShuffled => {
            let parts: Vec<&FeatureMatrix> = inst.channels.iter().collect();
            let ordered = FeatureMatrix::vstack(&parts)?;
            let p = random_permutation(&mut instance_rng(seed, inst.instance_id, 0));
            vec![make(block_permute(&ordered, p)?, None, Some(p.order))]
        }
    })
}

/// Per-row affine scaling to zero mean and unit variance, fitted on training
/// series. With `tied_rows = Some(k)` rows `r` and `r + k·b` share statistics, so
/// the scaling commutes with channel-block permutations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(matrices: &[&FeatureMatrix], tied_rows: Option<usize>) -> Result<Self> {
        let rows = matrices
            .first()
            .ok_or(Error::Empty("standardizer fit set"))?
            .rows;
        if matrices.iter().any(|m| m.rows != rows) {
            return Err(Error::Shape(
                "standardizer fit on matrices of different heights".into(),
            ));
        }
        let group = |r: usize| tied_rows.map_or(r, |k| r % k);
        let groups = tied_rows.map_or(rows, |k| k.min(rows));
        let mut sum = vec![0.0; groups];
        let mut sq = vec![0.0; groups];
        let mut count = vec![0usize; groups];
        for m in matrices {
            for r in 0..rows {
                let g = group(r);
                for &v in m.row(r) {
                    sum[g] += v as f64;
                    sq[g] += (v as f64) * (v as f64);
                }
                count[g] += m.cols;
            }
        }
        let mut mean = Vec::with_capacity(rows);
        let mut scale = Vec::with_capacity(rows);
        for r in 0..rows {
            let g = group(r);
            let n = count[g].max(1) as f64;
            let mu = sum[g] / n;
            let var = (sq[g] / n - mu * mu).max(0.0);
            mean.push(mu);
            scale.push(if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 });
        }
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        if m.rows != self.mean.len() {
            return Err(Error::Shape(format!(
                "standardizer for {} rows applied to {}",
                self.mean.len(),
                m.rows
            )));
        }
        let mut out = m.clone();
        for r in 0..m.rows {
            let (mu, k) = (self.mean[r], self.scale[r]);
            for v in &mut out.data[r * m.cols..(r + 1) * m.cols] {
                *v = ((*v as f64 - mu) * k) as f32;
            }
        }
        Ok(out)
    }
}

/// Re-draws the channel permutation of an `AllShuffled` series for a training epoch.
pub fn redraw_permutation(series: &FeatureSeries, seed: u64, epoch: u64) -> Result<FeatureSeries> {
    let current = series
        .permutation
        .map(BlockPermutation::new)
        .transpose()?
        .ok_or_else(|| Error::InvalidParameter("series carries no permutation record".into()))?;
    let ordered = block_permute(&series.matrix, current.transpose())?;
    let p = random_permutation(&mut instance_rng(seed, series.instance_id, epoch));
    Ok(FeatureSeries {
        matrix: block_permute(&ordered, p)?,
        permutation: Some(p.order),
        ..series.clone()
    })
}
