//! Graph-structured training data built from simulated pilot exchanges.
//!
//! Each sample is a two-node graph: node 0 carries `Re{y1}`, node 1 carries
//! `Im{y1}`, the single edge carries the pilot `s1`, and the label is
//! `[h_1 … h_N, g_1 … g_N]` stored as `[Re h; Im h; Re g; Im g]`.
//!
//! # On-disk layout
//!
//! A dataset directory holds `manifest.json` and `samples.bin`. The blob is a
//! sequence of fixed-size records, one per sample, in manifest order:
//!
//! | field   | type        | count |
//! |---------|-------------|-------|
//! | seed    | u64 LE      | 1     |
//! | snr_db  | f64 LE      | 1     |
//! | x       | f32 LE      | 2·M (row 0 = Re y1, row 1 = Im y1) |
//! | label   | f32 LE      | 4·N   |
//!
//! The adjacency and the edge attributes are identical for every sample and
//! live in the manifest. `checksum` is the SHA-256 of `samples.bin`.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{
    gen_pn_sequence, pilot_exchange, ChannelRealization, Gf2Poly, LosPhase, NoiseSpec,
    PilotSequence, ReceivedPilots, RisConfig, SignalConfig,
};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seeding::{sample_seed, stream};

pub const ADJACENCY: [[u8; 2]; 2] = [[0, 1], [1, 0]];
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "samples.bin";
const FORMAT: &str = "risgat-dataset/1";

/// Scenario parameters attached to every sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub n_elements: usize,
    pub m_pilots: usize,
    pub k_factor: f64,
    pub epsilon: f64,
    pub seed: u64,
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSample {
    x: Vec<f32>,
    edge_attr: Vec<f32>,
    label: Vec<f32>,
    pub snr_db: f64,
    pub meta: SampleMeta,
}

/// `[Re h; Im h; Re g; Im g]` at storage precision.
pub fn encode_label(h: &[Complex64], g: &[Complex64]) -> Vec<f32> {
    h.iter()
        .map(|c| c.re)
        .chain(h.iter().map(|c| c.im))
        .chain(g.iter().map(|c| c.re))
        .chain(g.iter().map(|c| c.im))
        .map(|v| v as f32)
        .collect()
}

/// Inverse of [`encode_label`].
pub fn decode_label(label: &[f64], n: usize) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    if label.len() != 4 * n {
        return Err(Error::invalid(format!(
            "label of {} values for N = {n}",
            label.len()
        )));
    }
    let c = |re: &[f64], im: &[f64]| -> Vec<Complex64> {
        re.iter().zip(im).map(|(r, i)| Complex64::new(*r, *i)).collect()
    };
    Ok((
        c(&label[..n], &label[n..2 * n]),
        c(&label[2 * n..3 * n], &label[3 * n..]),
    ))
}

fn pilot_edges(s1: &PilotSequence) -> Vec<f32> {
    let m = s1.len();
    let mut e = vec![0f32; 4 * m];
    for (slot, row) in ADJACENCY.iter().flatten().enumerate() {
        if *row == 1 {
            for (k, s) in s1.symbols().iter().enumerate() {
                e[slot * m + k] = s.re as f32;
            }
        }
    }
    e
}

/// Assembles a graph sample from a received block and the channel it came from.
pub fn build_sample(
    y1: &[Complex64],
    s1: &PilotSequence,
    ch: &ChannelRealization,
    snr_db: f64,
    meta: SampleMeta,
) -> Result<GraphSample> {
    let m = y1.len();
    if s1.len() != m || meta.m_pilots != m || ch.n_elements() != meta.n_elements {
        return Err(Error::invalid(format!(
            "sample dimensions disagree: |y1| = {m}, |s1| = {}, M = {}, |h| = {}, N = {}",
            s1.len(),
            meta.m_pilots,
            ch.n_elements(),
            meta.n_elements
        )));
    }
    let x = y1
        .iter()
        .map(|y| y.re as f32)
        .chain(y1.iter().map(|y| y.im as f32))
        .collect();
    Ok(GraphSample {
        x,
        edge_attr: pilot_edges(s1),
        label: encode_label(&ch.h, &ch.g),
        snr_db,
        meta,
    })
}

impl GraphSample {
    /// Node features, `2 × M`.
    pub fn x(&self) -> &[f32] {
        &self.x
    }

    pub fn x_tensor(&self) -> Tensor {
        Tensor::matrix(2, self.meta.m_pilots, self.x.iter().map(|&v| f64::from(v)).collect())
            .expect("x is 2×M")
    }

    pub fn adjacency(&self) -> Tensor {
        adjacency_tensor()
    }

    /// Edge attributes, `2 × 2 × M`; zero where the adjacency is zero.
    pub fn edge_attr(&self) -> &[f32] {
        &self.edge_attr
    }

    pub fn edge_attr_tensor(&self) -> Tensor {
        Tensor::new(
            vec![2, 2, self.meta.m_pilots],
            self.edge_attr.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("edge attributes are 2×2×M")
    }

    /// `4N` label values, `[Re h; Im h; Re g; Im g]`.
    pub fn label(&self) -> &[f32] {
        &self.label
    }

    pub fn truth(&self) -> (Vec<Complex64>, Vec<Complex64>) {
        let v: Vec<f64> = self.label.iter().map(|&x| f64::from(x)).collect();
        decode_label(&v, self.meta.n_elements).expect("label is 4N")
    }
}

pub fn adjacency_tensor() -> Tensor {
    Tensor::matrix(
        2,
        2,
        ADJACENCY.iter().flatten().map(|&v| f64::from(v)).collect(),
    )
    .expect("2×2")
}

/// Both pilot sequences of an exchange.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotPair {
    pub s1: PilotSequence,
    pub s2: PilotSequence,
}

/// Physical setup shared by all samples of a dataset or an evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub n_elements: usize,
    pub m_pilots: usize,
    pub k_factor: f64,
    pub epsilon: f64,
    pub los_phase: LosPhase,
    pub signal: SignalConfig,
}

impl Scenario {
    /// Draws the channel and the received pilots for one coherence interval.
    /// Channel first, then impairments, all from the stream seeded by `seed`.
    pub fn draw(
        &self,
        pilots: &PilotPair,
        snr_db: f64,
        seed: u64,
    ) -> Result<(ChannelRealization, ReceivedPilots)> {
        let mut rng = stream(seed);
        let ch = ChannelRealization::sample(self.n_elements, self.k_factor, &self.los_phase, &mut rng)?;
        let ris = RisConfig::pilot(self.n_elements, self.epsilon)?;
        let ex = pilot_exchange(
            &ch,
            &ris,
            &pilots.s1,
            &pilots.s2,
            &self.signal,
            &NoiseSpec::Snr(snr_db),
            &mut rng,
        )?;
        Ok((ch, ex.received(&self.signal)))
    }

    pub fn sample(&self, pilots: &PilotPair, snr_db: f64, seed: u64) -> Result<GraphSample> {
        let (ch, rx) = self.draw(pilots, snr_db, seed)?;
        build_sample(&rx.y1, &pilots.s1, &ch, snr_db, self.meta(seed))
    }

    pub fn meta(&self, seed: u64) -> SampleMeta {
        SampleMeta {
            n_elements: self.n_elements,
            m_pilots: self.m_pilots,
            k_factor: self.k_factor,
            epsilon: self.epsilon,
            seed,
        }
    }
}

/// `start, start+step, …` up to and including `stop`.
pub fn snr_range(start: f64, step: f64, stop: f64) -> Vec<f64> {
    let count = ((stop - start) / step + 1e-9).floor() as i64 + 1;
    (0..count.max(0)).map(|i| start + step * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_elements: usize,
    pub m_pilots: usize,
    pub k_factor: f64,
    pub epsilon: f64,
    pub snr_grid_db: Vec<f64>,
    pub samples_per_snr: usize,
    pub master_seed: u64,
    pub polynomial: Gf2Poly,
    pub pn_seed: u32,
    /// LFSR seed for `s2`; `None` reuses `s1`.
    pub s2_seed: Option<u32>,
    pub los_phase: LosPhase,
    pub signal: SignalConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_elements: 128,
            m_pilots: 16,
            k_factor: 10.0,
            epsilon: 0.0,
            snr_grid_db: snr_range(-30.0, 2.0, 0.0),
            samples_per_snr: 1000,
            master_seed: 2021,
            polynomial: Gf2Poly::X4_X2_1,
            pn_seed: 0b0001,
            s2_seed: None,
            los_phase: LosPhase::default(),
            signal: SignalConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn scenario(&self) -> Scenario {
        Scenario {
            n_elements: self.n_elements,
            m_pilots: self.m_pilots,
            k_factor: self.k_factor,
            epsilon: self.epsilon,
            los_phase: self.los_phase.clone(),
            signal: self.signal,
        }
    }

    pub fn pilots(&self) -> Result<PilotPair> {
        let s1 = gen_pn_sequence(self.polynomial, self.pn_seed, self.m_pilots)?;
        let s2 = match self.s2_seed {
            None => s1.clone(),
            Some(seed) => gen_pn_sequence(self.polynomial, seed, self.m_pilots)?,
        };
        Ok(PilotPair { s1, s2 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_grid_db.is_empty() {
            return Err(Error::invalid("SNR grid is empty"));
        }
        if self.samples_per_snr == 0 {
            return Err(Error::invalid("samples_per_snr must be at least 1"));
        }
        if self.n_elements == 0 || self.m_pilots == 0 {
            return Err(Error::invalid("N and M must be positive"));
        }
        if let Some(bad) = self.snr_grid_db.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("SNR grid entry {bad} is not finite")));
        }
        Ok(())
    }
}

/// Per-row affine standardization of the node features, `(x − mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl InputScaling {
    /// Statistics of the Re and Im rows over `samples`.
    pub fn fit(samples: &[GraphSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("cannot fit scaling to an empty set"));
        }
        let mut sum = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        let mut count = 0usize;
        for s in samples {
            let m = s.meta.m_pilots;
            for r in 0..2 {
                for &v in &s.x[r * m..(r + 1) * m] {
                    sum[r] += f64::from(v);
                    sq[r] += f64::from(v) * f64::from(v);
                }
            }
            count += m;
        }
        let n = count as f64;
        let mean = [sum[0] / n, sum[1] / n];
        let std = [0, 1].map(|r| (sq[r] / n - mean[r] * mean[r]).max(0.0).sqrt().max(1e-12));
        Ok(InputScaling { mean, std })
    }

    pub fn apply(&self, row: usize, v: f64) -> f64 {
        (v - self.mean[row]) / self.std[row]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub n_elements: usize,
    pub m_pilots: usize,
    pub k_factor: f64,
    pub epsilon: f64,
    pub snr_grid_db: Vec<f64>,
    pub counts_per_snr: Vec<usize>,
    pub total_samples: usize,
    pub master_seed: u64,
    pub polynomial: Gf2Poly,
    pub pn_seed: u32,
    pub s2_seed: Option<u32>,
    pub pilot_s1: Vec<i8>,
    pub pilot_s2: Vec<i8>,
    pub adjacency: [[u8; 2]; 2],
    pub split_ratio: [usize; 2],
    pub los_phase: LosPhase,
    pub signal: SignalConfig,
    pub standardization: Option<InputScaling>,
    pub record_bytes: usize,
    pub checksum: String,
}

impl DatasetManifest {
    pub fn config(&self) -> DatasetConfig {
        DatasetConfig {
            n_elements: self.n_elements,
            m_pilots: self.m_pilots,
            k_factor: self.k_factor,
            epsilon: self.epsilon,
            snr_grid_db: self.snr_grid_db.clone(),
            samples_per_snr: self.counts_per_snr.first().copied().unwrap_or(0),
            master_seed: self.master_seed,
            polynomial: self.polynomial,
            pn_seed: self.pn_seed,
            s2_seed: self.s2_seed,
            los_phase: self.los_phase.clone(),
            signal: self.signal,
        }
    }
}

fn record_bytes(n: usize, m: usize) -> usize {
    8 + 8 + 4 * (2 * m) + 4 * (4 * n)
}

fn bpsk_signs(p: &PilotSequence) -> Vec<i8> {
    p.symbols().iter().map(|s| if s.re < 0.0 { -1 } else { 1 }).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<GraphSample>,
    pub manifest: DatasetManifest,
}

/// Generates every sample of `config`, grid-major and index-minor.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let pilots = config.pilots()?;
    let scenario = config.scenario();
    let per = config.samples_per_snr;

    let samples = (0..config.snr_grid_db.len() * per)
        .into_par_iter()
        .map(|k| {
            let (snr_idx, idx) = (k / per, k % per);
            let seed = sample_seed(config.master_seed, snr_idx as u64, idx as u64);
            scenario.sample(&pilots, config.snr_grid_db[snr_idx], seed)
        })
        .collect::<Result<Vec<_>>>()?;

    let blob = encode_samples(&samples);
    let manifest = DatasetManifest {
        format: FORMAT.into(),
        n_elements: config.n_elements,
        m_pilots: config.m_pilots,
        k_factor: config.k_factor,
        epsilon: config.epsilon,
        snr_grid_db: config.snr_grid_db.clone(),
        counts_per_snr: vec![per; config.snr_grid_db.len()],
        total_samples: samples.len(),
        master_seed: config.master_seed,
        polynomial: config.polynomial,
        pn_seed: config.pn_seed,
        s2_seed: config.s2_seed,
        pilot_s1: bpsk_signs(&pilots.s1),
        pilot_s2: bpsk_signs(&pilots.s2),
        adjacency: ADJACENCY,
        split_ratio: [4, 1],
        los_phase: config.los_phase.clone(),
        signal: config.signal,
        standardization: None,
        record_bytes: record_bytes(config.n_elements, config.m_pilots),
        checksum: checksum(&blob),
    };
    Ok(Dataset { samples, manifest })
}

/// Seeded shuffle followed by a `ratio[0] : ratio[1]` partition into
/// (train, validation).
pub fn split(
    samples: &[GraphSample],
    ratio: [usize; 2],
    seed: u64,
) -> Result<(Vec<GraphSample>, Vec<GraphSample>)> {
    let parts = ratio[0] + ratio[1];
    if ratio[0] == 0 || ratio[1] == 0 {
        return Err(Error::invalid(format!("split ratio {ratio:?} must be positive")));
    }
    if samples.len() < parts {
        return Err(Error::invalid(format!(
            "need at least {parts} samples to split {}:{}, got {}",
            ratio[0],
            ratio[1],
            samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut stream(seed));
    let n_val = samples.len() * ratio[1] / parts;
    let (val_idx, train_idx) = order.split_at(n_val);
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(train_idx), pick(val_idx)))
}

pub fn checksum(blob: &[u8]) -> String {
    hex::encode(Sha256::digest(blob))
}

/// Serializes samples into the record layout described in the module docs.
pub fn encode_samples(samples: &[GraphSample]) -> Vec<u8> {
    let rec = samples
        .first()
        .map_or(0, |s| record_bytes(s.meta.n_elements, s.meta.m_pilots));
    let mut out = Vec::with_capacity(rec * samples.len());
    for s in samples {
        out.extend_from_slice(&s.meta.seed.to_le_bytes());
        out.extend_from_slice(&s.snr_db.to_le_bytes());
        for v in s.x.iter().chain(&s.label) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob = encode_samples(&dataset.samples);
    let mut manifest = dataset.manifest.clone();
    manifest.total_samples = dataset.samples.len();
    manifest.checksum = checksum(&blob);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    write_file(&dir.join(BLOB_FILE), &blob)?;
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Parse(format!("unknown dataset format {:?}", manifest.format)));
    }

    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let (n, m) = (manifest.n_elements, manifest.m_pilots);
    let rec = record_bytes(n, m);
    if manifest.record_bytes != rec {
        return Err(Error::Inconsistent(format!(
            "manifest declares {}-byte records, N = {n} and M = {m} imply {rec}",
            manifest.record_bytes
        )));
    }
    if blob.len() % rec != 0 {
        return Err(Error::Truncated {
            path: blob_path,
            actual: blob.len() as u64,
            record: rec as u64,
        });
    }
    let records = blob.len() / rec;
    let declared: usize = manifest.counts_per_snr.iter().sum();
    if records != manifest.total_samples
        || declared != manifest.total_samples
        || manifest.counts_per_snr.len() != manifest.snr_grid_db.len()
    {
        return Err(Error::Inconsistent(format!(
            "blob holds {records} records, manifest declares {} (per-SNR counts sum to {declared})",
            manifest.total_samples
        )));
    }
    let actual = checksum(&blob);
    if actual != manifest.checksum {
        return Err(Error::ChecksumMismatch {
            expected: manifest.checksum.clone(),
            actual,
        });
    }
    if manifest.pilot_s1.len() != m {
        return Err(Error::Inconsistent(format!(
            "manifest pilot has {} symbols, M = {m}",
            manifest.pilot_s1.len()
        )));
    }

    let s1 = PilotSequence::from_symbols(
        manifest
            .pilot_s1
            .iter()
            .map(|&s| Complex64::new(f64::from(s), 0.0))
            .collect(),
    )?;
    let edge_attr = pilot_edges(&s1);
    let samples = blob
        .chunks_exact(rec)
        .map(|r| {
            let seed = u64::from_le_bytes(r[..8].try_into().expect("8 bytes"));
            let snr_db = f64::from_le_bytes(r[8..16].try_into().expect("8 bytes"));
            let floats = read_f32s(&r[16..]);
            let (x, label) = floats.split_at(2 * m);
            GraphSample {
                x: x.to_vec(),
                edge_attr: edge_attr.clone(),
                label: label.to_vec(),
                snr_db,
                meta: SampleMeta {
                    n_elements: n,
                    m_pilots: m,
                    k_factor: manifest.k_factor,
                    epsilon: manifest.epsilon,
                    seed,
                },
            }
        })
        .collect();
    Ok(Dataset { samples, manifest })
}
