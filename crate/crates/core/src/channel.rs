//! Pilot generation, Rician fading and the full-duplex received-signal model.
//!
//! Both end nodes transmit their pilots at the same time through an `N`-element
//! passive surface. The node `CN` therefore observes
//!
//! ```text
//! y1[m] = sqrt(P2) (gᵀΘh) s2[m] + sqrt(P1) (hᵀΘh) s1[m] + e1[m] + w1[m]
//! ```
//!
//! where the second term is the node's own pilot reflected back
//! (self-interference), `e1` is residual loop interference and `w1` is AWGN.
//! The channels are reciprocal, so one [`ChannelRealization`] serves both
//! directions.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// K-factors at or above this value are treated as a pure line-of-sight channel.
pub const LOS_ONLY_K: f64 = 1e6;

/// Feedback polynomial over GF(2). Bit `i` holds the coefficient of `x^i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Gf2Poly(pub u32);

impl Gf2Poly {
    /// `x^4 + x^2 + 1`. Reducible: `(x^2 + x + 1)^2`, so every orbit has period dividing 6.
    pub const X4_X2_1: Gf2Poly = Gf2Poly(0b10101);
    /// `x^4 + x + 1`, primitive, period 15.
    pub const X4_X_1: Gf2Poly = Gf2Poly(0b10011);

    pub fn degree(self) -> Option<u32> {
        (self.0 != 0).then(|| 31 - self.0.leading_zeros())
    }

    fn tap(self, i: u32) -> bool {
        self.0 >> i & 1 == 1
    }
}

impl Default for Gf2Poly {
    fn default() -> Self {
        Gf2Poly::X4_X2_1
    }
}

impl fmt::Display for Gf2Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0 {
            return f.write_str("0");
        }
        let mut first = true;
        for i in (0..32).rev().filter(|&i| self.tap(i)) {
            if !first {
                f.write_str("+")?;
            }
            first = false;
            match i {
                0 => f.write_str("1")?,
                1 => f.write_str("x")?,
                _ => write!(f, "x^{i}")?,
            }
        }
        Ok(())
    }
}

impl FromStr for Gf2Poly {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut mask = 0u32;
        for term in s.split('+').map(str::trim) {
            let power = match term {
                "1" => 0,
                "x" => 1,
                t => t
                    .strip_prefix("x^")
                    .and_then(|p| p.parse::<u32>().ok())
                    .filter(|&p| p < 32)
                    .ok_or_else(|| Error::Parse(format!("bad polynomial term {t:?} in {s:?}")))?,
            };
            mask ^= 1 << power;
        }
        Ok(Gf2Poly(mask))
    }
}

impl Serialize for Gf2Poly {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Gf2Poly {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// BPSK pilot symbols drawn from a PN sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotSequence {
    symbols: Vec<Complex64>,
    polynomial: Gf2Poly,
    seed_state: u32,
}

impl PilotSequence {
    pub fn symbols(&self) -> &[Complex64] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn polynomial(&self) -> Gf2Poly {
        self.polynomial
    }

    pub fn seed_state(&self) -> u32 {
        self.seed_state
    }

    /// The underlying bit stream (bit 0 ↦ +1, bit 1 ↦ −1).
    pub fn bits(&self) -> Vec<u8> {
        self.symbols.iter().map(|s| u8::from(s.re < 0.0)).collect()
    }

    /// Builds a pilot from arbitrary symbols, e.g. for experiments with non-PN pilots.
    pub fn from_symbols(symbols: Vec<Complex64>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::invalid("pilot sequence must not be empty"));
        }
        Ok(PilotSequence {
            symbols,
            polynomial: Gf2Poly(0),
            seed_state: 0,
        })
    }
}

/// Runs the Fibonacci LFSR defined by `poly` from `seed` and returns `length`
/// BPSK symbols.
///
/// Bit `i` of `seed` is the initial output `s_i`; afterwards
/// `s_k = XOR { s_{k-i} : coefficient of x^i is 1, i ≥ 1 }`, so `x^4+x^2+1`
/// gives `s_k = s_{k-2} ⊕ s_{k-4}`. The register is periodic, so long
/// sequences repeat its cycle.
pub fn gen_pn_sequence(poly: Gf2Poly, seed: u32, length: usize) -> Result<PilotSequence> {
    let degree = poly
        .degree()
        .filter(|&d| d >= 1)
        .ok_or_else(|| Error::invalid(format!("polynomial {poly} has no feedback taps")))?;
    if seed == 0 {
        return Err(Error::invalid("LFSR seed must be nonzero"));
    }
    if degree < 32 && seed >> degree != 0 {
        return Err(Error::invalid(format!(
            "seed {seed:#b} does not fit a {degree}-bit register"
        )));
    }
    if length == 0 {
        return Err(Error::invalid("pilot length must be at least 1"));
    }

    let degree = degree as usize;
    let mut bits: Vec<u8> = (0..degree).map(|i| (seed >> i & 1) as u8).collect();
    while bits.len() < length {
        let k = bits.len();
        let next = (1..=degree)
            .filter(|&i| poly.tap(i as u32))
            .fold(0u8, |acc, i| acc ^ bits[k - i]);
        bits.push(next);
    }
    bits.truncate(length);

    Ok(PilotSequence {
        symbols: bits
            .iter()
            .map(|&b| Complex64::new(1.0 - 2.0 * f64::from(b), 0.0))
            .collect(),
        polynomial: poly,
        seed_state: seed,
    })
}

/// Standard circularly-symmetric complex Gaussian sample, `E|z|² = 1`.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Line-of-sight phase profile of a link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LosPhase {
    Fixed(f64),
    PerElement(Vec<f64>),
}

impl Default for LosPhase {
    fn default() -> Self {
        LosPhase::Fixed(0.0)
    }
}

impl LosPhase {
    fn phase(&self, n: usize) -> f64 {
        match self {
            LosPhase::Fixed(p) => *p,
            LosPhase::PerElement(p) => p[n],
        }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        match self {
            LosPhase::PerElement(p) if p.len() != n => Err(Error::invalid(format!(
                "{} LOS phases for {n} elements",
                p.len()
            ))),
            _ => Ok(()),
        }
    }
}

fn check_k(k_factor: f64) -> Result<()> {
    if k_factor.is_nan() || k_factor < 0.0 {
        return Err(Error::invalid(format!("K-factor must be nonnegative, got {k_factor}")));
    }
    Ok(())
}

/// Draws `n` unit-power Rician coefficients with a common LOS phase.
pub fn sample_rician_channel<R: Rng + ?Sized>(
    n: usize,
    k_factor: f64,
    los_phase: f64,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    sample_rician(n, k_factor, &LosPhase::Fixed(los_phase), rng)
}

/// Draws `n` unit-power Rician coefficients:
/// `sqrt(K/(K+1)) e^{jφ_n} + sqrt(1/(K+1)) z`, `z ~ CN(0, 1)`.
pub fn sample_rician<R: Rng + ?Sized>(
    n: usize,
    k_factor: f64,
    los: &LosPhase,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    check_k(k_factor)?;
    if n == 0 {
        return Err(Error::invalid("channel needs at least one element"));
    }
    los.check_len(n)?;

    if k_factor >= LOS_ONLY_K {
        return Ok((0..n).map(|i| Complex64::from_polar(1.0, los.phase(i))).collect());
    }
    let los_amp = (k_factor / (k_factor + 1.0)).sqrt();
    let nlos_amp = (1.0 / (k_factor + 1.0)).sqrt();
    Ok((0..n)
        .map(|i| Complex64::from_polar(los_amp, los.phase(i)) + complex_normal(rng) * nlos_amp)
        .collect())
}

/// Mean of a unit-power Rician coefficient: the LOS component.
pub fn rician_mean(k_factor: f64, los_phase: f64) -> Complex64 {
    if k_factor >= LOS_ONLY_K {
        return Complex64::from_polar(1.0, los_phase);
    }
    Complex64::from_polar((k_factor / (k_factor + 1.0)).sqrt(), los_phase)
}

/// Coefficients of the `CN↔RIS` (`h`) and `RIS↔BS` (`g`) links for one
/// coherence interval.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub h: Vec<Complex64>,
    pub g: Vec<Complex64>,
    pub k_factor: f64,
}

impl ChannelRealization {
    pub fn new(h: Vec<Complex64>, g: Vec<Complex64>, k_factor: f64) -> Result<Self> {
        check_k(k_factor)?;
        if h.is_empty() || h.len() != g.len() {
            return Err(Error::invalid(format!(
                "channel lengths differ or are empty: |h| = {}, |g| = {}",
                h.len(),
                g.len()
            )));
        }
        Ok(ChannelRealization { h, g, k_factor })
    }

    /// Draws `h` then `g` from the same stream.
    pub fn sample<R: Rng + ?Sized>(
        n: usize,
        k_factor: f64,
        los: &LosPhase,
        rng: &mut R,
    ) -> Result<Self> {
        let h = sample_rician(n, k_factor, los, rng)?;
        let g = sample_rician(n, k_factor, los, rng)?;
        Ok(ChannelRealization { h, g, k_factor })
    }

    pub fn n_elements(&self) -> usize {
        self.h.len()
    }
}

/// Surface configuration: per-element phase shifts and a common amplitude gain.
#[derive(Clone, Debug, PartialEq)]
pub struct RisConfig {
    n_elements: usize,
    amplitude_gain: f64,
    phase_shifts: Vec<f64>,
    switching_error: f64,
}

impl RisConfig {
    /// Pilot-phase configuration: every element on with zero phase shift,
    /// amplitude `κ = 1 − ε`.
    pub fn pilot(n_elements: usize, switching_error: f64) -> Result<Self> {
        Self::with_phases(vec![0.0; n_elements], switching_error)
    }

    pub fn with_phases(phase_shifts: Vec<f64>, switching_error: f64) -> Result<Self> {
        if phase_shifts.is_empty() {
            return Err(Error::invalid("surface needs at least one element"));
        }
        // ε = 1 is admitted so that a fully attenuating surface (κ = 0) can be modelled.
        if !(0.0..=1.0).contains(&switching_error) {
            return Err(Error::invalid(format!(
                "switching error must lie in [0, 1], got {switching_error}"
            )));
        }
        if let Some(bad) = phase_shifts.iter().find(|t| !(0.0..TAU).contains(*t)) {
            return Err(Error::invalid(format!("phase shift {bad} outside [0, 2π)")));
        }
        Ok(RisConfig {
            n_elements: phase_shifts.len(),
            amplitude_gain: 1.0 - switching_error,
            phase_shifts,
            switching_error,
        })
    }

    pub fn n_elements(&self) -> usize {
        self.n_elements
    }

    pub fn amplitude_gain(&self) -> f64 {
        self.amplitude_gain
    }

    pub fn phase_shifts(&self) -> &[f64] {
        &self.phase_shifts
    }

    pub fn switching_error(&self) -> f64 {
        self.switching_error
    }
}

/// Diagonal complex operator `Θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalOperator(Vec<Complex64>);

impl DiagonalOperator {
    pub fn diagonal(&self) -> &[Complex64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.0.iter().zip(v).map(|(d, x)| d * x).collect()
    }

    /// `uᵀ Θ v` (plain transpose, no conjugation).
    pub fn bilinear(&self, u: &[Complex64], v: &[Complex64]) -> Complex64 {
        self.apply(v).iter().zip(u).map(|(tv, x)| x * tv).sum()
    }
}

/// `Θ = diag{κ e^{jθ_1}, …, κ e^{jθ_N}}`.
pub fn ris_phase_matrix(config: &RisConfig) -> DiagonalOperator {
    DiagonalOperator(
        config
            .phase_shifts
            .iter()
            .map(|&t| Complex64::from_polar(config.amplitude_gain, t))
            .collect(),
    )
}

/// How the impairment powers at a receiver are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSpec {
    Noiseless,
    /// Calibrate `σ²_e = σ²_w = P_d / (2ρ)` from the desired-term power `P_d`.
    Snr(f64),
    Powers { sigma_e_sq: f64, sigma_w_sq: f64 },
}

/// Resolved impairment powers for one receiver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    /// `None` for the noiseless sentinel or explicit powers.
    pub snr_db: Option<f64>,
    pub sigma_e_sq: f64,
    pub sigma_w_sq: f64,
}

impl NoiseParams {
    pub fn noiseless() -> Self {
        NoiseParams {
            snr_db: None,
            sigma_e_sq: 0.0,
            sigma_w_sq: 0.0,
        }
    }

    /// Splits the interference-plus-noise power `P_d / ρ` equally between
    /// loop interference and AWGN.
    pub fn calibrated(snr_db: f64, desired_power: f64) -> Result<Self> {
        if !snr_db.is_finite() {
            return Err(Error::invalid(format!("SNR must be finite, got {snr_db}")));
        }
        let rho = 10f64.powf(snr_db / 10.0);
        let total = desired_power / rho;
        Ok(NoiseParams {
            snr_db: Some(snr_db),
            sigma_e_sq: total / 2.0,
            sigma_w_sq: total / 2.0,
        })
    }

    fn resolve(spec: &NoiseSpec, desired_power: f64) -> Result<Self> {
        match *spec {
            NoiseSpec::Noiseless => Ok(Self::noiseless()),
            NoiseSpec::Snr(db) => Self::calibrated(db, desired_power),
            NoiseSpec::Powers {
                sigma_e_sq,
                sigma_w_sq,
            } => {
                if !(sigma_e_sq >= 0.0 && sigma_w_sq >= 0.0) {
                    return Err(Error::invalid("noise powers must be nonnegative"));
                }
                Ok(NoiseParams {
                    snr_db: None,
                    sigma_e_sq,
                    sigma_w_sq,
                })
            }
        }
    }
}

/// Transmit powers and which terms of the model are simulated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalConfig {
    pub p1: f64,
    pub p2: f64,
    /// Include the node's own reflected pilot. Off reduces the model to half-duplex reception.
    pub self_interference: bool,
    /// Also synthesize the signal at `BS`.
    pub with_y2: bool,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig {
            p1: 1.0,
            p2: 1.0,
            self_interference: true,
            with_y2: false,
        }
    }
}

/// The four additive terms seen by one receiver.
#[derive(Clone, Debug, PartialEq)]
pub struct ReceiverComponents {
    pub desired: Vec<Complex64>,
    pub self_interference: Vec<Complex64>,
    pub loop_interference: Vec<Complex64>,
    pub awgn: Vec<Complex64>,
    pub noise: NoiseParams,
}

impl ReceiverComponents {
    pub fn total(&self) -> Vec<Complex64> {
        (0..self.desired.len())
            .map(|m| {
                self.desired[m] + self.self_interference[m] + self.loop_interference[m] + self.awgn[m]
            })
            .collect()
    }
}

/// Received pilot blocks at `CN` (and optionally `BS`).
#[derive(Clone, Debug, PartialEq)]
pub struct ReceivedPilots {
    pub y1: Vec<Complex64>,
    pub y2: Option<Vec<Complex64>>,
    pub p1: f64,
    pub p2: f64,
    pub noise1: NoiseParams,
    pub noise2: Option<NoiseParams>,
}

/// Term-by-term decomposition of one pilot exchange.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotExchange {
    pub at_cn: ReceiverComponents,
    pub at_bs: Option<ReceiverComponents>,
}

impl PilotExchange {
    pub fn received(&self, config: &SignalConfig) -> ReceivedPilots {
        ReceivedPilots {
            y1: self.at_cn.total(),
            y2: self.at_bs.as_ref().map(ReceiverComponents::total),
            p1: config.p1,
            p2: config.p2,
            noise1: self.at_cn.noise,
            noise2: self.at_bs.as_ref().map(|c| c.noise),
        }
    }
}

fn scaled(pilot: &[Complex64], gain: Complex64) -> Vec<Complex64> {
    pilot.iter().map(|s| gain * s).collect()
}

fn draw_noise<R: Rng + ?Sized>(m: usize, power: f64, rng: &mut R) -> Vec<Complex64> {
    let amp = power.sqrt();
    (0..m).map(|_| complex_normal(rng) * amp).collect()
}

#[allow(clippy::too_many_arguments)]
fn receiver<R: Rng + ?Sized>(
    desired_gain: Complex64,
    desired_pilot: &[Complex64],
    self_gain: Complex64,
    own_pilot: &[Complex64],
    include_self: bool,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<ReceiverComponents> {
    let m = desired_pilot.len();
    let desired = scaled(desired_pilot, desired_gain);
    let self_interference = if include_self {
        scaled(own_pilot, self_gain)
    } else {
        vec![Complex64::new(0.0, 0.0); m]
    };
    let desired_power = desired.iter().map(|d| d.norm_sqr()).sum::<f64>() / m as f64;
    let params = NoiseParams::resolve(noise, desired_power)?;
    let (loop_interference, awgn) = if params.sigma_e_sq == 0.0 && params.sigma_w_sq == 0.0 {
        let zeros = vec![Complex64::new(0.0, 0.0); m];
        (zeros.clone(), zeros)
    } else {
        let e = draw_noise(m, params.sigma_e_sq, rng);
        let w = draw_noise(m, params.sigma_w_sq, rng);
        (e, w)
    };
    Ok(ReceiverComponents {
        desired,
        self_interference,
        loop_interference,
        awgn,
        noise: params,
    })
}

/// Synthesizes every term of the full-duplex pilot exchange.
///
/// Draw order from `rng`: `e1`, `w1`, then `e2`, `w2` when `y2` is requested.
pub fn pilot_exchange<R: Rng + ?Sized>(
    ch: &ChannelRealization,
    ris: &RisConfig,
    s1: &PilotSequence,
    s2: &PilotSequence,
    config: &SignalConfig,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<PilotExchange> {
    let n = ch.n_elements();
    if ch.g.len() != n || ris.n_elements() != n {
        return Err(Error::invalid(format!(
            "element counts disagree: |h| = {n}, |g| = {}, surface = {}",
            ch.g.len(),
            ris.n_elements()
        )));
    }
    if s1.len() != s2.len() {
        return Err(Error::invalid(format!(
            "pilot lengths differ: |s1| = {}, |s2| = {}",
            s1.len(),
            s2.len()
        )));
    }
    if !(config.p1 >= 0.0 && config.p2 >= 0.0) {
        return Err(Error::invalid("transmit powers must be nonnegative"));
    }

    let theta = ris_phase_matrix(ris);
    let cascade = theta.bilinear(&ch.g, &ch.h);
    let (a1, a2) = (config.p1.sqrt(), config.p2.sqrt());

    let at_cn = receiver(
        cascade * a2,
        s2.symbols(),
        theta.bilinear(&ch.h, &ch.h) * a1,
        s1.symbols(),
        config.self_interference,
        noise,
        rng,
    )?;
    let at_bs = if config.with_y2 {
        Some(receiver(
            cascade * a1,
            s1.symbols(),
            theta.bilinear(&ch.g, &ch.g) * a2,
            s2.symbols(),
            config.self_interference,
            noise,
            rng,
        )?)
    } else {
        None
    };
    Ok(PilotExchange { at_cn, at_bs })
}

/// Full-duplex received pilots for one coherence interval.
pub fn synthesize_received_pilots<R: Rng + ?Sized>(
    ch: &ChannelRealization,
    ris: &RisConfig,
    s1: &PilotSequence,
    s2: &PilotSequence,
    config: &SignalConfig,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<ReceivedPilots> {
    Ok(pilot_exchange(ch, ris, s1, s2, config, noise, rng)?.received(config))
}

/// Per-symbol SNR `|d|² / (|e|² + |w|²)`; a zero denominator yields `+∞`.
pub fn instantaneous_snr(
    desired: &[Complex64],
    interference: &[Complex64],
    noise: &[Complex64],
) -> Result<Vec<f64>> {
    if desired.len() != interference.len() || desired.len() != noise.len() {
        return Err(Error::invalid("SNR inputs must have equal lengths"));
    }
    Ok(desired
        .iter()
        .zip(interference)
        .zip(noise)
        .map(|((d, e), w)| {
            let den = e.norm_sqr() + w.norm_sqr();
            if den == 0.0 {
                f64::INFINITY
            } else {
                d.norm_sqr() / den
            }
        })
        .collect())
}

/// Symbol-averaged SNR of one block: `Σ|d|² / Σ(|e|² + |w|²)`.
pub fn block_snr(desired: &[Complex64], interference: &[Complex64], noise: &[Complex64]) -> f64 {
    let num: f64 = desired.iter().map(|d| d.norm_sqr()).sum();
    let den: f64 = interference
        .iter()
        .zip(noise)
        .map(|(e, w)| e.norm_sqr() + w.norm_sqr())
        .sum();
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn pn_hand_simulated_prefix() {
        let p = gen_pn_sequence(Gf2Poly::X4_X2_1, 0b0001, 6).unwrap();
        assert_eq!(p.bits(), vec![1, 0, 0, 0, 1, 0]);
        let expected: Vec<_> = [-1.0, 1.0, 1.0, 1.0, -1.0, 1.0].iter().map(|&r| c(r, 0.0)).collect();
        assert_eq!(p.symbols(), &expected[..]);
    }

    #[test]
    fn pn_repeats_with_period_six() {
        let p = gen_pn_sequence(Gf2Poly::X4_X2_1, 0b0001, 12).unwrap();
        let bits = p.bits();
        assert_eq!(&bits[..6], &bits[6..]);
        assert_eq!(&bits[..6], &[1, 0, 0, 0, 1, 0]);
    }

    #[test]
    fn pn_primitive_polynomial_has_period_fifteen() {
        let bits = gen_pn_sequence(Gf2Poly::X4_X_1, 0b0001, 45).unwrap().bits();
        assert_eq!(&bits[..15], &bits[15..30]);
        assert!((1..15).all(|p| bits[..15] != bits[p..p + 15]));
    }

    #[test]
    fn pn_rejects_bad_arguments() {
        assert!(matches!(
            gen_pn_sequence(Gf2Poly::X4_X2_1, 0, 8),
            Err(Error::InvalidArgument(_))
        ));
        assert!(gen_pn_sequence(Gf2Poly::X4_X2_1, 1, 0).is_err());
        assert!(gen_pn_sequence(Gf2Poly::X4_X2_1, 0b10000, 8).is_err());
        assert!(gen_pn_sequence(Gf2Poly(1), 1, 8).is_err());
    }

    #[test]
    fn polynomial_text_round_trip() {
        assert_eq!(Gf2Poly::X4_X2_1.to_string(), "x^4+x^2+1");
        assert_eq!("x^4+x+1".parse::<Gf2Poly>().unwrap(), Gf2Poly::X4_X_1);
        assert!("x^4+y".parse::<Gf2Poly>().is_err());
    }

    #[test]
    fn pure_los_channel_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = sample_rician_channel(16, LOS_ONLY_K, 0.0, &mut rng).unwrap();
        assert!(h.iter().all(|x| *x == c(1.0, 0.0)));
        let h = sample_rician_channel(4, f64::INFINITY, 0.0, &mut rng).unwrap();
        assert!(h.iter().all(|x| *x == c(1.0, 0.0)));
    }

    #[test]
    fn rayleigh_has_unit_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = sample_rician_channel(100_000, 0.0, 0.0, &mut rng).unwrap();
        let p = h.iter().map(|x| x.norm_sqr()).sum::<f64>() / h.len() as f64;
        assert!((0.99..=1.01).contains(&p), "{p}");
    }

    #[test]
    fn rician_moment_k_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = sample_rician_channel(100_000, 10.0, 0.0, &mut rng).unwrap();
        let n = h.len() as f64;
        let mean: Complex64 = h.iter().sum::<Complex64>() / n;
        let var = h.iter().map(|x| (x - mean).norm_sqr()).sum::<f64>() / n;
        let k_hat = mean.norm_sqr() / var;
        assert!((9.5..=10.5).contains(&k_hat), "{k_hat}");
    }

    #[test]
    fn negative_k_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_rician_channel(4, -1.0, 0.0, &mut rng).is_err());
        assert!(ChannelRealization::new(vec![c(1.0, 0.0)], vec![], 1.0).is_err());
    }

    #[test]
    fn phase_matrix_examples() {
        let theta = ris_phase_matrix(&RisConfig::pilot(8, 0.0).unwrap());
        assert!(theta.diagonal().iter().all(|d| *d == c(1.0, 0.0)));
        let theta = ris_phase_matrix(&RisConfig::pilot(8, 0.1).unwrap());
        assert!(theta.diagonal().iter().all(|d| (d.norm() - 0.9).abs() < 1e-15));
        assert!(RisConfig::pilot(0, 0.0).is_err());
        assert!(RisConfig::with_phases(vec![TAU], 0.0).is_err());
    }

    fn unit_pilots(m: usize) -> PilotSequence {
        gen_pn_sequence(Gf2Poly::X4_X2_1, 1, m).unwrap()
    }

    #[test]
    fn single_element_unit_channel_doubles_pilot() {
        let ch = ChannelRealization::new(vec![c(1.0, 0.0)], vec![c(1.0, 0.0)], 10.0).unwrap();
        let ris = RisConfig::pilot(1, 0.0).unwrap();
        let s = unit_pilots(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rx = synthesize_received_pilots(
            &ch,
            &ris,
            &s,
            &s,
            &SignalConfig::default(),
            &NoiseSpec::Noiseless,
            &mut rng,
        )
        .unwrap();
        for (y, s) in rx.y1.iter().zip(s.symbols()) {
            assert_eq!(*y, s * 2.0);
        }
    }

    #[test]
    fn opaque_surface_gives_silence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ch = ChannelRealization::sample(4, 10.0, &LosPhase::default(), &mut rng).unwrap();
        let ris = RisConfig::pilot(4, 1.0).unwrap();
        assert_eq!(ris.amplitude_gain(), 0.0);
        let s = unit_pilots(8);
        let rx = synthesize_received_pilots(
            &ch,
            &ris,
            &s,
            &s,
            &SignalConfig::default(),
            &NoiseSpec::Noiseless,
            &mut rng,
        )
        .unwrap();
        assert!(rx.y1.iter().all(|y| y.norm() == 0.0));
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ch = ChannelRealization::sample(4, 10.0, &LosPhase::default(), &mut rng).unwrap();
        let cfg = SignalConfig::default();
        let s8 = unit_pilots(8);
        let s6 = unit_pilots(6);
        let ris4 = RisConfig::pilot(4, 0.0).unwrap();
        let ris3 = RisConfig::pilot(3, 0.0).unwrap();
        assert!(synthesize_received_pilots(&ch, &ris4, &s8, &s6, &cfg, &NoiseSpec::Noiseless, &mut rng).is_err());
        assert!(synthesize_received_pilots(&ch, &ris3, &s8, &s8, &cfg, &NoiseSpec::Noiseless, &mut rng).is_err());
    }

    #[test]
    fn reciprocity_of_desired_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ch = ChannelRealization::sample(8, 4.0, &LosPhase::default(), &mut rng).unwrap();
        let ris = RisConfig::pilot(8, 0.0).unwrap();
        let s = unit_pilots(16);
        let cfg = SignalConfig {
            with_y2: true,
            ..SignalConfig::default()
        };
        let ex = pilot_exchange(&ch, &ris, &s, &s, &cfg, &NoiseSpec::Noiseless, &mut rng).unwrap();
        assert_eq!(ex.at_cn.desired, ex.at_bs.unwrap().desired);
    }

    #[test]
    fn calibration_splits_power_equally() {
        let p = NoiseParams::calibrated(10.0, 4.0).unwrap();
        assert!((p.sigma_e_sq - 0.2).abs() < 1e-15);
        assert_eq!(p.sigma_e_sq, p.sigma_w_sq);
    }

    #[test]
    fn snr_examples() {
        let m = 5;
        let d = vec![c(2.0, 0.0); m];
        let one = vec![c(0.0, 1.0); m];
        assert_eq!(instantaneous_snr(&d, &one, &one).unwrap(), vec![2.0; m]);
        let zero = vec![c(0.0, 0.0); m];
        assert_eq!(instantaneous_snr(&zero, &one, &one).unwrap(), vec![0.0; m]);
        assert_eq!(instantaneous_snr(&one, &zero, &one).unwrap(), vec![1.0; m]);
        assert_eq!(instantaneous_snr(&one, &zero, &zero).unwrap(), vec![f64::INFINITY; m]);
        assert!(instantaneous_snr(&one, &zero, &zero[..2]).is_err());
    }
}
