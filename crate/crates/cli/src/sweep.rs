//! The scaling sweep: every (model, subsample fraction, epoch budget) cell is
//! trained, evaluated and appended to a runs CSV keyed by a hash of the cell.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{error, info};
use mlpscale::data::Dataset;
use mlpscale::scaling::{read_runs_csv, RunRecord};
use mlpscale::train::{evaluate, fine_tune, init_model, linear_probe, match_resolution, Checkpoint, TrainConfig, Trainer};
use mlpscale::Scalar;
use serde::Serialize;

use crate::config::{DatasetSpec, DownstreamSpec, ModelSpec, Precision, SweepSpec};
use crate::run::{append_locked, load_dataset, output_root, stable_hash};

/// Everything that determines a cell's results.
#[derive(Serialize)]
struct CellKey<'a> {
    model: &'a ModelSpec,
    dataset: &'a DatasetSpec,
    fraction: f64,
    epochs: usize,
    train: &'a TrainConfig,
    precision: &'a Precision,
    downstream: &'a Option<DownstreamSpec>,
}

pub fn cell_run_id(spec: &SweepSpec, model: &ModelSpec, fraction: f64, epochs: usize) -> String {
    let train = TrainConfig {
        epochs,
        ..spec.train.clone()
    };
    stable_hash(&CellKey {
        model,
        dataset: &spec.dataset,
        fraction,
        epochs,
        train: &train,
        precision: &spec.precision,
        downstream: &spec.downstream,
    })
}

#[derive(Debug, Default)]
pub struct SweepOutcome {
    pub records_written: usize,
    pub cells_skipped: usize,
    /// `(run ids, message)` per failed (model, fraction) group.
    pub failures: Vec<(Vec<String>, String)>,
    pub runs_csv: PathBuf,
}

pub fn sweep_output(spec: &SweepSpec, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| spec.output_dir.clone())
        .unwrap_or_else(|| output_root().join(format!("sweep-{}", stable_hash(spec))))
}

struct Downstream {
    spec: DownstreamSpec,
    train: Dataset,
    test: Dataset,
}

/// Runs every missing cell. Cells whose run id is already in `runs.csv` are
/// skipped, so an interrupted sweep resumes where it stopped.
pub fn run_sweep(spec: &SweepSpec, out: &Path) -> Result<SweepOutcome> {
    fs::create_dir_all(out.join("checkpoints")).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("effective_config.json"), format!("{}\n", spec.to_json()))?;
    let runs_csv = out.join("runs.csv");
    let done: BTreeSet<String> = if runs_csv.exists() {
        read_runs_csv(&runs_csv)
            .with_context(|| format!("reading {}", runs_csv.display()))?
            .into_iter()
            .map(|r| r.run_id)
            .collect()
    } else {
        BTreeSet::new()
    };
    let (train, test) = load_dataset(&spec.dataset, spec.train.seed)?;
    let downstream = match &spec.downstream {
        Some(d) => {
            let (dtrain, dtest) = load_dataset(&d.dataset, spec.train.seed)?;
            Some(Downstream {
                spec: d.clone(),
                train: dtrain,
                test: dtest,
            })
        }
        None => None,
    };

    let mut outcome = SweepOutcome {
        runs_csv: runs_csv.clone(),
        ..Default::default()
    };
    for model in &spec.models {
        for &fraction in &spec.fractions {
            let ids: Vec<(usize, String)> = spec
                .epochs
                .iter()
                .map(|&t| (t, cell_run_id(spec, model, fraction, t)))
                .collect();
            let missing: Vec<(usize, String)> = ids.iter().filter(|(_, id)| !done.contains(id)).cloned().collect();
            outcome.cells_skipped += ids.len() - missing.len();
            if missing.is_empty() {
                info!("{} at fraction {fraction}: all cells present", model.notation());
                continue;
            }
            let result = match spec.precision {
                Precision::F32 => run_group::<f32>(spec, model, fraction, &missing, &train, &test, downstream.as_ref(), out),
                Precision::F64 => run_group::<f64>(spec, model, fraction, &missing, &train, &test, downstream.as_ref(), out),
            };
            match result {
                Ok(n) => outcome.records_written += n,
                Err(e) => {
                    error!("{} at fraction {fraction} failed: {e:#}", model.notation());
                    outcome.failures.push((missing.into_iter().map(|(_, id)| id).collect(), format!("{e:#}")));
                }
            }
        }
    }
    Ok(outcome)
}

/// Trains one (model, fraction) pair up to the largest missing budget,
/// recording a run at each missing budget on the way.
#[allow(clippy::too_many_arguments)]
fn run_group<T: Scalar>(
    spec: &SweepSpec,
    model: &ModelSpec,
    fraction: f64,
    missing: &[(usize, String)],
    train: &Dataset,
    test: &Dataset,
    downstream: Option<&Downstream>,
    out: &Path,
) -> Result<usize> {
    let subset = train.subsample_proportional(fraction, spec.train.seed)?;
    let model_cfg = model.build(subset.height, subset.width, subset.channels, subset.num_classes);
    model_cfg.validate()?;
    let net = init_model::<T>(model_cfg.clone(), spec.train.seed)?;
    let subset = match_resolution(&net, &subset, true)?.into_owned();
    let test = match_resolution(&net, test, true)?.into_owned();
    let stats = mlpscale::data::ChannelStats::compute(&subset)?;
    let max_t = missing.iter().map(|(t, _)| *t).max().expect("non-empty");
    let config = TrainConfig {
        epochs: max_t,
        ..spec.train.clone()
    };
    let mut trainer = Trainer::new(net, config, stats)?;
    let mut written = 0;
    info!(
        "{} on {} examples for up to {max_t} epochs",
        model_cfg.notation(),
        subset.len()
    );
    while trainer.epoch() < max_t {
        trainer.train_epoch(&subset)?;
        let t = trainer.epoch();
        let Some((_, run_id)) = missing.iter().find(|(e, _)| *e == t) else {
            continue;
        };
        let mut rec = RunRecord::new(run_id.clone(), &model_cfg, subset.len() as u64, t as u64, spec.train.batch_size)?;
        rec.upstream_err = Some(evaluate(trainer.model(), &test, trainer.stats())?);
        if let Some(d) = downstream {
            if let Some(pc) = &d.spec.probe {
                rec.probe_err = Some(linear_probe(trainer.model(), &d.train, &d.test, pc)?.test_err);
            }
            if let Some(fc) = &d.spec.finetune {
                rec.finetune_err = Some(fine_tune(trainer.model(), &d.train, &d.test, fc)?.test_err);
            }
        }
        rec.validate()?;
        Checkpoint::capture(&trainer).save(out.join("checkpoints").join(format!("{run_id}.ckpt")))?;
        append_locked(&out.join("runs.csv"), std::slice::from_ref(&rec))?;
        info!(
            "recorded {run_id}: {} N={} T={t} upstream_err={:.4}",
            rec.notation(),
            rec.dataset_size,
            rec.upstream_err.unwrap_or(f64::NAN)
        );
        written += 1;
    }
    Ok(written)
}
