//! Experiment orchestration: configuration, training, evaluation over the
//! test grid, and result reporting.

mod config;
mod evaluate;
mod report;
mod train;

use std::collections::BTreeMap;
use std::path::Path;

pub use config::{EvalGrid, ExperimentConfig, OutputConfig, TrainingConfig, SEED_ENV};
pub use evaluate::{
    evaluate, evaluate_estimator, run_ls_baseline, to_db, Channel, Estimate, Estimator, Figure,
    GatEstimator, GridPoint, LsEstimator, NmseRecord, OracleEstimator, PriorMeanEstimator, TestBench,
    TestSignal,
};
pub use report::{parse_csv, records_to_csv, report, summarize, write_csv, FigureSummary, Series, CSV_HEADER};
pub use train::{train, validation_loss, EpochRecord, TrainingLog};

use crate::dataset::{generate_dataset, load_dataset, save_dataset, split, Dataset, InputScaling};
use crate::error::Result;
use crate::nn::{save_checkpoint, ModelParameters};
use crate::seeding::mix_seed;

impl ExperimentConfig {
    pub fn split_seed(&self) -> u64 {
        mix_seed(self.training_seed(), &[u64::MAX])
    }

    /// Test bench for the `(N, M)` pair; all pairs share the evaluation seed.
    pub fn bench(&self, n_elements: usize, m_pilots: usize) -> Result<TestBench> {
        TestBench::new(
            &self.dataset_for(n_elements, m_pilots),
            self.evaluation.samples_per_point,
            self.evaluation_seed(),
        )
    }

    pub fn hyperparameters(&self) -> BTreeMap<String, f64> {
        let t = &self.training;
        BTreeMap::from([
            ("batch_size".into(), t.batch_size as f64),
            ("dropout".into(), t.dropout),
            ("epochs".into(), t.epochs as f64),
            ("l2".into(), t.l2),
            ("lr".into(), t.lr),
            ("patience".into(), t.patience as f64),
        ])
    }
}

/// Trains on `dataset` after the configured split.
pub fn train_on(cfg: &ExperimentConfig, dataset: &Dataset, diagnostics: Option<&Path>) -> Result<(ModelParameters, TrainingLog)> {
    let (train_set, val_set) = split(&dataset.samples, cfg.training.split_ratio, cfg.split_seed())?;
    train(&train_set, &val_set, &cfg.training, cfg.training_seed(), diagnostics)
}

/// Generates the `(N, M)` dataset and trains on it.
pub fn train_for(cfg: &ExperimentConfig, n_elements: usize, m_pilots: usize) -> Result<(ModelParameters, TrainingLog)> {
    let dataset = generate_dataset(&cfg.dataset_for(n_elements, m_pilots))?;
    train_on(cfg, &dataset, None)
}

/// `generate`: writes the dataset and the resolved config to `out`.
pub fn run_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let mut dataset = generate_dataset(&cfg.dataset)?;
    if cfg.training.standardize_inputs {
        let (train_set, _) = split(&dataset.samples, cfg.training.split_ratio, cfg.split_seed())?;
        dataset.manifest.standardization = Some(InputScaling::fit(&train_set)?);
    }
    dataset.manifest.split_ratio = cfg.training.split_ratio;
    save_dataset(&dataset, out)?;
    cfg.write_resolved(out)?;
    Ok(dataset)
}

/// `train`: loads (or generates) the dataset, trains, and writes the
/// checkpoint, the training log and the resolved config to `out`.
pub fn run_train(cfg: &ExperimentConfig, data: Option<&Path>, out: &Path) -> Result<(ModelParameters, TrainingLog)> {
    cfg.validate()?;
    let dataset = match data {
        Some(dir) => load_dataset(dir)?,
        None => generate_dataset(&cfg.dataset)?,
    };
    let (model, mut log) = train_on(cfg, &dataset, Some(out))?;
    let ckpt = out.join("checkpoint");
    save_checkpoint(&model, cfg.training_seed(), cfg.hyperparameters(), &ckpt)?;
    log.checkpoint = Some(ckpt);
    log.save(&out.join("training_log.json"))?;
    cfg.write_resolved(out)?;
    Ok((model, log))
}

/// Trains one model per `(N, M)` pair the figures need, scores GAT and LS on
/// shared test signals, and writes the report to `out`.
pub fn reproduce(cfg: &ExperimentConfig, figures: &[Figure], out: &Path) -> Result<Vec<NmseRecord>> {
    cfg.validate()?;
    let points = cfg.evaluation.points_for(figures);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for p in &points {
        if !pairs.contains(&(p.n_elements, p.m_pilots)) {
            pairs.push((p.n_elements, p.m_pilots));
        }
    }
    let mut records = Vec::new();
    for (n, m) in pairs {
        let dir = out.join(format!("model_n{n}_m{m}"));
        let model_cfg = ExperimentConfig {
            dataset: cfg.dataset_for(n, m),
            ..cfg.clone()
        };
        let (model, _) = run_train(&model_cfg, None, &dir)?;
        let bench = cfg.bench(n, m)?;
        let here: Vec<GridPoint> = points
            .iter()
            .filter(|p| (p.n_elements, p.m_pilots) == (n, m))
            .copied()
            .collect();
        records.extend(evaluate(&model, &bench, &here)?);
        records.extend(run_ls_baseline(&bench, &here)?);
    }
    report(&records, &cfg.evaluation, out)?;
    cfg.write_resolved(out)?;
    Ok(records)
}
