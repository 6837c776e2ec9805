use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::EvalGrid;
use super::evaluate::{Channel, Figure, NmseRecord};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "estimator,channel,snr_db,n_elements,m_pilots,k_factor,epsilon,seed,nmse_linear,nmse_db";

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

pub fn write_csv<W: Write>(records: &[NmseRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    if records.is_empty() {
        w.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))
}

pub fn records_to_csv(records: &[NmseRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
}

pub fn parse_csv(text: &str) -> Result<Vec<NmseRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Parse(format!("unexpected CSV header {:?}", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// One curve: NMSE against SNR for fixed estimator, channel and scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub estimator: String,
    pub channel: Channel,
    pub n_elements: usize,
    pub m_pilots: usize,
    pub k_factor: f64,
    pub epsilon: f64,
    pub snr_db: Vec<f64>,
    pub nmse_db: Vec<f64>,
}

/// Curves grouped the way the figures sweep their parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FigureSummary {
    pub fig3: Vec<Series>,
    pub fig4: Vec<Series>,
    pub fig5: Vec<Series>,
    pub fig6: Vec<Series>,
}

impl FigureSummary {
    pub fn get(&self, figure: Figure) -> &[Series] {
        match figure {
            Figure::Fig3 => &self.fig3,
            Figure::Fig4 => &self.fig4,
            Figure::Fig5 => &self.fig5,
            Figure::Fig6 => &self.fig6,
        }
    }
}

fn series_key(r: &NmseRecord) -> (String, Channel, usize, usize, u64, u64) {
    (
        r.estimator.clone(),
        r.channel,
        r.n_elements,
        r.m_pilots,
        r.k_factor.to_bits(),
        r.epsilon.to_bits(),
    )
}

fn collect_series(records: &[NmseRecord], keep: impl Fn(&NmseRecord) -> bool, label: impl Fn(&NmseRecord) -> String) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    let mut keys = Vec::new();
    for r in records.iter().filter(|r| keep(r)) {
        let key = series_key(r);
        let idx = match keys.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                keys.push(key);
                out.push(Series {
                    label: label(r),
                    estimator: r.estimator.clone(),
                    channel: r.channel,
                    n_elements: r.n_elements,
                    m_pilots: r.m_pilots,
                    k_factor: r.k_factor,
                    epsilon: r.epsilon,
                    snr_db: Vec::new(),
                    nmse_db: Vec::new(),
                });
                out.len() - 1
            }
        };
        out[idx].snr_db.push(r.snr_db);
        out[idx].nmse_db.push(r.nmse_db);
    }
    for s in &mut out {
        let mut pairs: Vec<(f64, f64)> = s.snr_db.iter().copied().zip(s.nmse_db.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        (s.snr_db, s.nmse_db) = pairs.into_iter().unzip();
    }
    out
}

/// Groups records into the four figure sweeps. Figures 4 to 6 use channel `h`.
pub fn summarize(records: &[NmseRecord], grid: &EvalGrid) -> FigureSummary {
    let (n0, m0) = (grid.n_elements[0], grid.m_pilots[0]);
    let nominal_k = |r: &NmseRecord| r.k_factor == grid.nominal_k;
    let nominal_e = |r: &NmseRecord| r.epsilon == grid.nominal_epsilon;
    let base = |r: &NmseRecord| r.n_elements == n0 && r.m_pilots == m0;
    FigureSummary {
        fig3: collect_series(
            records,
            |r| base(r) && nominal_k(r) && nominal_e(r),
            |r| format!("{} {}", r.estimator, r.channel.as_str()),
        ),
        fig4: collect_series(
            records,
            |r| {
                r.channel == Channel::H
                    && nominal_k(r)
                    && nominal_e(r)
                    && grid.n_elements.contains(&r.n_elements)
                    && grid.m_pilots.contains(&r.m_pilots)
            },
            |r| format!("{} N={} M={}", r.estimator, r.n_elements, r.m_pilots),
        ),
        fig5: collect_series(
            records,
            |r| r.channel == Channel::H && base(r) && nominal_e(r) && grid.k_factors.contains(&r.k_factor),
            |r| format!("{} K={}", r.estimator, r.k_factor),
        ),
        fig6: collect_series(
            records,
            |r| r.channel == Channel::H && base(r) && nominal_k(r) && grid.epsilons.contains(&r.epsilon),
            |r| format!("{} eps={}", r.estimator, r.epsilon),
        ),
    }
}

/// Writes `nmse.csv` and `summary.json` into `dir`.
pub fn report(records: &[NmseRecord], grid: &EvalGrid, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if records.is_empty() {
        return Err(Error::invalid("nothing to report"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("nmse.csv");
    let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_csv(records, file)?;
    let json_path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summarize(records, grid)).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}
