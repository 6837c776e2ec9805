use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::EvalGrid;
use crate::channel::{rician_mean, ChannelRealization, LosPhase, SignalConfig};
use crate::dataset::{build_sample, DatasetConfig, GraphSample, PilotPair, Scenario};
use crate::error::{Error, Result};
use crate::estimators::{ls_estimate_pair, nmse};
use crate::nn::{forward_batch, Mode, ModelParameters};
use crate::seeding::{mix_seed, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    H,
    G,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::H => "h",
            Channel::G => "g",
        }
    }
}

/// Mean NMSE of one estimator on one channel at one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmseRecord {
    pub estimator: String,
    pub channel: Channel,
    pub snr_db: f64,
    pub n_elements: usize,
    pub m_pilots: usize,
    pub k_factor: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub nmse_linear: f64,
    pub nmse_db: f64,
}

pub fn to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub snr_db: f64,
    pub n_elements: usize,
    pub m_pilots: usize,
    pub k_factor: f64,
    pub epsilon: f64,
}

impl GridPoint {
    /// Seed of the test signals at this point; depends only on the point and
    /// `base`, so every estimator sees the same signals.
    pub fn seed(&self, base: u64) -> u64 {
        mix_seed(
            base,
            &[
                self.snr_db.to_bits(),
                self.n_elements as u64,
                self.m_pilots as u64,
                self.k_factor.to_bits(),
                self.epsilon.to_bits(),
            ],
        )
    }

    fn key(&self) -> (u64, usize, usize, u64, u64) {
        (
            self.snr_db.to_bits(),
            self.n_elements,
            self.m_pilots,
            self.k_factor.to_bits(),
            self.epsilon.to_bits(),
        )
    }
}

/// Which sweep a figure varies around the nominal operating point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Figure {
    /// SNR sweep, both channels, GAT against LS.
    Fig3,
    /// SNR sweep for every `(N, M)` pair.
    Fig4,
    /// SNR sweep for every K-factor.
    Fig5,
    /// SNR sweep for every switching error.
    Fig6,
}

impl Figure {
    pub const ALL: [Figure; 4] = [Figure::Fig3, Figure::Fig4, Figure::Fig5, Figure::Fig6];

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            3 => Ok(Figure::Fig3),
            4 => Ok(Figure::Fig4),
            5 => Ok(Figure::Fig5),
            6 => Ok(Figure::Fig6),
            _ => Err(Error::invalid(format!("no figure {n}; expected 3, 4, 5 or 6"))),
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Figure::Fig3 => "fig3",
            Figure::Fig4 => "fig4",
            Figure::Fig5 => "fig5",
            Figure::Fig6 => "fig6",
        }
    }
}

impl EvalGrid {
    fn nominal(&self, snr_db: f64, n: usize, m: usize) -> GridPoint {
        GridPoint {
            snr_db,
            n_elements: n,
            m_pilots: m,
            k_factor: self.nominal_k,
            epsilon: self.nominal_epsilon,
        }
    }

    /// Grid points of one figure, SNR-minor.
    pub fn points(&self, figure: Figure) -> Vec<GridPoint> {
        let (n0, m0) = (self.n_elements[0], self.m_pilots[0]);
        let mut out = Vec::new();
        match figure {
            Figure::Fig3 => out.extend(self.snr_db.iter().map(|&s| self.nominal(s, n0, m0))),
            Figure::Fig4 => {
                for &n in &self.n_elements {
                    for &m in &self.m_pilots {
                        out.extend(self.snr_db.iter().map(|&s| self.nominal(s, n, m)));
                    }
                }
            }
            Figure::Fig5 => {
                for &k in &self.k_factors {
                    out.extend(self.snr_db.iter().map(|&s| GridPoint {
                        k_factor: k,
                        ..self.nominal(s, n0, m0)
                    }));
                }
            }
            Figure::Fig6 => {
                for &e in &self.epsilons {
                    out.extend(self.snr_db.iter().map(|&s| GridPoint {
                        epsilon: e,
                        ..self.nominal(s, n0, m0)
                    }));
                }
            }
        }
        out
    }

    /// Union of the given figures' points without duplicates, first occurrence order.
    pub fn points_for(&self, figures: &[Figure]) -> Vec<GridPoint> {
        let mut seen = std::collections::HashSet::new();
        figures
            .iter()
            .flat_map(|&f| self.points(f))
            .filter(|p| seen.insert(p.key()))
            .collect()
    }
}

/// One synthesized test case: the stored graph sample, the true channel and
/// the raw received block.
#[derive(Clone, Debug)]
pub struct TestSignal {
    pub sample: GraphSample,
    pub channel: ChannelRealization,
    pub y1: Vec<Complex64>,
}

/// Signal model shared by the dataset and the test grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TestBench {
    pub pilots: PilotPair,
    pub los_phase: LosPhase,
    pub signal: SignalConfig,
    pub samples_per_point: usize,
    pub seed: u64,
}

impl TestBench {
    pub fn new(dataset: &DatasetConfig, samples_per_point: usize, seed: u64) -> Result<Self> {
        Ok(TestBench {
            pilots: dataset.pilots()?,
            los_phase: dataset.los_phase.clone(),
            signal: dataset.signal,
            samples_per_point,
            seed,
        })
    }

    pub fn scenario(&self, p: &GridPoint) -> Scenario {
        Scenario {
            n_elements: p.n_elements,
            m_pilots: p.m_pilots,
            k_factor: p.k_factor,
            epsilon: p.epsilon,
            los_phase: self.los_phase.clone(),
            signal: self.signal,
        }
    }

    /// The test signals at `p`; identical for every caller.
    pub fn signals(&self, p: &GridPoint) -> Result<Vec<TestSignal>> {
        if self.pilots.s1.len() != p.m_pilots {
            return Err(Error::invalid(format!(
                "bench pilots have {} symbols, grid point needs M = {}",
                self.pilots.s1.len(),
                p.m_pilots
            )));
        }
        let scenario = self.scenario(p);
        let base = p.seed(self.seed);
        (0..self.samples_per_point)
            .map(|i| {
                let seed = mix_seed(base, &[i as u64]);
                let (ch, rx) = scenario.draw(&self.pilots, p.snr_db, seed)?;
                let sample = build_sample(&rx.y1, &self.pilots.s1, &ch, p.snr_db, scenario.meta(seed))?;
                Ok(TestSignal {
                    sample,
                    channel: ch,
                    y1: rx.y1,
                })
            })
            .collect()
    }
}

pub type Estimate = (Vec<Complex64>, Vec<Complex64>);

/// Anything that turns received pilots into `(ĥ, ĝ)`.
pub trait Estimator: Sync {
    fn name(&self) -> &str;
    fn estimate(&self, point: &GridPoint, bench: &TestBench, signals: &[TestSignal]) -> Result<Vec<Estimate>>;
}

pub struct GatEstimator<'a> {
    pub model: &'a ModelParameters,
}

impl Estimator for GatEstimator<'_> {
    fn name(&self) -> &str {
        "gat"
    }

    fn estimate(&self, point: &GridPoint, _: &TestBench, signals: &[TestSignal]) -> Result<Vec<Estimate>> {
        let arch = &self.model.arch;
        if arch.n_elements != point.n_elements || arch.m_pilots != point.m_pilots {
            return Err(Error::invalid(format!(
                "model built for N = {}, M = {} evaluated at N = {}, M = {}",
                arch.n_elements, arch.m_pilots, point.n_elements, point.m_pilots
            )));
        }
        let mut out = Vec::with_capacity(signals.len());
        for chunk in signals.chunks(128) {
            let refs: Vec<&GraphSample> = chunk.iter().map(|s| &s.sample).collect();
            let pred = forward_batch(self.model, &refs, Mode::Eval, &mut stream(0))?;
            for row in 0..pred.rows() {
                out.push(arch.decode(pred.row(row))?);
            }
        }
        Ok(out)
    }
}

pub struct LsEstimator;

impl Estimator for LsEstimator {
    fn name(&self) -> &str {
        "ls"
    }

    fn estimate(&self, point: &GridPoint, bench: &TestBench, signals: &[TestSignal]) -> Result<Vec<Estimate>> {
        signals
            .iter()
            .map(|s| ls_estimate_pair(&s.y1, &bench.pilots.s1, &bench.pilots.s2, point.n_elements))
            .collect()
    }
}

/// Returns the true channel; useful to validate the evaluation plumbing.
pub struct OracleEstimator;

impl Estimator for OracleEstimator {
    fn name(&self) -> &str {
        "oracle"
    }

    fn estimate(&self, _: &GridPoint, _: &TestBench, signals: &[TestSignal]) -> Result<Vec<Estimate>> {
        Ok(signals
            .iter()
            .map(|s| (s.channel.h.clone(), s.channel.g.clone()))
            .collect())
    }
}

/// Ignores the observation and outputs the LOS mean of both channels.
pub struct PriorMeanEstimator;

impl Estimator for PriorMeanEstimator {
    fn name(&self) -> &str {
        "prior_mean"
    }

    fn estimate(&self, point: &GridPoint, bench: &TestBench, signals: &[TestSignal]) -> Result<Vec<Estimate>> {
        let mean: Vec<Complex64> = (0..point.n_elements)
            .map(|i| {
                let phase = match &bench.los_phase {
                    LosPhase::Fixed(p) => *p,
                    LosPhase::PerElement(p) => p[i],
                };
                rician_mean(point.k_factor, phase)
            })
            .collect();
        Ok(signals.iter().map(|_| (mean.clone(), mean.clone())).collect())
    }
}

fn score_point(est: &dyn Estimator, bench: &TestBench, p: &GridPoint) -> Result<[NmseRecord; 2]> {
    let signals = bench.signals(p)?;
    let estimates = est.estimate(p, bench, &signals)?;
    if estimates.len() != signals.len() {
        return Err(Error::InvalidState(format!(
            "{} returned {} estimates for {} signals",
            est.name(),
            estimates.len(),
            signals.len()
        )));
    }
    let (mut sum_h, mut sum_g) = (0.0, 0.0);
    for (s, (h_hat, g_hat)) in signals.iter().zip(&estimates) {
        sum_h += nmse(&s.channel.h, h_hat)?;
        sum_g += nmse(&s.channel.g, g_hat)?;
    }
    let count = signals.len() as f64;
    let record = |channel, total: f64| NmseRecord {
        estimator: est.name().to_string(),
        channel,
        snr_db: p.snr_db,
        n_elements: p.n_elements,
        m_pilots: p.m_pilots,
        k_factor: p.k_factor,
        epsilon: p.epsilon,
        seed: p.seed(bench.seed),
        nmse_linear: total / count,
        nmse_db: to_db(total / count),
    };
    Ok([record(Channel::H, sum_h), record(Channel::G, sum_g)])
}

/// Scores `estimator` at every point, points in parallel. Output holds the
/// `h` then the `g` record of each point, in point order.
pub fn evaluate_estimator(
    estimator: &dyn Estimator,
    bench: &TestBench,
    points: &[GridPoint],
) -> Result<Vec<NmseRecord>> {
    let per_point: Vec<[NmseRecord; 2]> = points
        .par_iter()
        .map(|p| score_point(estimator, bench, p))
        .collect::<Result<_>>()?;
    Ok(per_point.into_iter().flatten().collect())
}

/// GAT records for every point.
pub fn evaluate(model: &ModelParameters, bench: &TestBench, points: &[GridPoint]) -> Result<Vec<NmseRecord>> {
    evaluate_estimator(&GatEstimator { model }, bench, points)
}

/// LS records on the same test signals [`evaluate`] uses.
pub fn run_ls_baseline(bench: &TestBench, points: &[GridPoint]) -> Result<Vec<NmseRecord>> {
    evaluate_estimator(&LsEstimator, bench, points)
}
