//! Single-run commands: training, fine-tuning, probing, filter export,
//! parameter accounting and scaling fits.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use mlpscale::data::{load_cifar10_dir, synth_dataset, ChannelStats, Dataset, Split, SynthSpec};
use mlpscale::model::{count_forward_flops, count_params, Linear, MlpModel, ModelConfig};
use mlpscale::report::{export_pgm, filter_grid, scaling_plot_svg, PlotSpec};
use mlpscale::scaling::{
    compute_cost, filter_epochs, fit_allocation_runs, fit_power_law, pareto_frontier, read_runs_csv, AllocationFit,
    ErrorField, PowerLawFit, RunRecord,
};
use mlpscale::train::{
    append_metrics_csv, fine_tune, init_model, linear_probe, match_resolution, Checkpoint, MetricsRecord, Trainer,
    TrainMode,
};
use mlpscale::Scalar;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{DatasetSpec, Precision, RunConfig};

/// Environment variable naming the root directory for outputs.
pub const OUTPUT_ENV: &str = "MLPSCALE_OUTPUT";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// First 16 hex digits of the SHA-256 of a value's JSON form.
pub fn stable_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("plain data serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Train and test splits for a dataset spec. `seed` drives synthetic data.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::Synth(s) => {
            let seed = s.seed.unwrap_or(seed);
            let base = SynthSpec {
                n: s.n,
                height: s.height,
                width: s.width,
                channels: s.channels,
                num_classes: s.num_classes,
                pattern: s.pattern,
                balanced: true,
            };
            let train = synth_dataset(&base, seed, Split::Train)?;
            let test = synth_dataset(&SynthSpec { n: s.test_n, ..base }, seed, Split::Test)?;
            Ok((train, test))
        }
        DatasetSpec::Cifar10(c) => {
            let train = load_cifar10_dir(&c.dir, Split::Train)
                .with_context(|| format!("loading CIFAR-10 training batches from {}", c.dir.display()))?;
            let test = load_cifar10_dir(&c.dir, Split::Test)
                .with_context(|| format!("loading CIFAR-10 test batch from {}", c.dir.display()))?;
            Ok((train, test))
        }
        DatasetSpec::Mlds(m) => Ok((
            Dataset::load_mlds(&m.train, Split::Train).with_context(|| format!("loading {}", m.train.display()))?,
            Dataset::load_mlds(&m.test, Split::Test).with_context(|| format!("loading {}", m.test.display()))?,
        )),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes the effective config, refusing to mix outputs of different configs.
fn prepare_output(out: &Path, effective: &str) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("effective_config.json");
    if let Ok(existing) = fs::read_to_string(&path) {
        if existing.trim_end() != effective.trim_end() {
            bail!(
                "{} holds outputs of a different configuration; choose another --out",
                out.display()
            );
        }
    }
    fs::write(&path, format!("{}\n", effective.trim_end()))?;
    Ok(())
}

pub fn default_output(cfg: &RunConfig) -> PathBuf {
    output_root().join(format!("{}-{}", cfg.train.mode.name(), stable_hash(cfg)))
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub mode: TrainMode,
    pub model: String,
    pub params: u64,
    pub flops_fwd: u64,
    pub dataset_size: usize,
    pub epochs: usize,
    pub compute_flops: Option<u128>,
    pub train_err: Option<f64>,
    pub test_err: f64,
    pub output_dir: PathBuf,
}

fn metrics_sink(out: &Path) -> Result<PathBuf> {
    let path = out.join("metrics.csv");
    if path.exists() {
        fs::remove_file(&path)?;
    }
    Ok(path)
}

/// `train` / `pretrain`: fits a fresh model, checkpointing after every epoch.
/// With `resume`, continues from `checkpoint.ckpt` in the output directory.
pub fn train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<RunSummary> {
    match cfg.precision {
        Precision::F32 => train_impl::<f32>(cfg, out, resume),
        Precision::F64 => train_impl::<f64>(cfg, out, resume),
    }
}

fn train_impl<T: Scalar>(cfg: &RunConfig, out: &Path, resume: bool) -> Result<RunSummary> {
    if matches!(cfg.train.mode, TrainMode::Finetune | TrainMode::Probe) {
        bail!("mode {} needs the {} command", cfg.train.mode.name(), cfg.train.mode.name());
    }
    prepare_output(out, &cfg.to_json())?;
    let (train, test) = load_dataset(&cfg.dataset, cfg.train.seed)?;
    let model_cfg = cfg.model.build(train.height, train.width, train.channels, train.num_classes);
    model_cfg.validate()?;
    let ckpt_path = out.join("checkpoint.ckpt");
    let metrics_path = out.join("metrics.csv");

    let mut trainer = if resume && ckpt_path.exists() {
        let ckpt = Checkpoint::<T>::load(&ckpt_path)
            .with_context(|| format!("loading {}", ckpt_path.display()))?;
        if ckpt.meta.model != model_cfg {
            bail!("checkpoint model differs from the configured one");
        }
        info!("resuming from epoch {}", ckpt.meta.epoch);
        ckpt.into_trainer(cfg.train.clone())?
    } else {
        metrics_sink(out)?;
        let model: MlpModel<T> = init_model(model_cfg.clone(), cfg.train.seed)?;
        let stats_src = match_resolution(&model, &train, true)?;
        let stats = ChannelStats::compute(&stats_src)?;
        Trainer::new(model, cfg.train.clone(), stats)?
    };
    let train = match_resolution(trainer.model(), &train, true)?.into_owned();
    let test = match_resolution(trainer.model(), &test, true)?.into_owned();

    let history = trainer.fit(&train, Some(&test), |t, rec| {
        append_metrics_csv(&metrics_path, std::slice::from_ref(rec))?;
        Checkpoint::capture(t).save(&ckpt_path)?;
        Ok(())
    })?;
    let last: Option<&MetricsRecord> = history.last();
    let test_err = match last.and_then(|r| r.test_err) {
        Some(e) => e,
        None => trainer.evaluate(&test)?,
    };
    let summary = RunSummary {
        mode: cfg.train.mode,
        model: model_cfg.notation(),
        params: count_params(&model_cfg),
        flops_fwd: count_forward_flops(&model_cfg),
        dataset_size: train.len(),
        epochs: trainer.epoch(),
        compute_flops: compute_cost(count_forward_flops(&model_cfg), train.len() as u64, trainer.epoch() as u64).ok(),
        train_err: last.map(|r| r.train_err),
        test_err,
        output_dir: out.to_path_buf(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn pretrained_path(cfg: &RunConfig, flag: Option<&Path>) -> Result<PathBuf> {
    match (flag, &cfg.pretrained) {
        (Some(p), _) => Ok(p.to_path_buf()),
        (None, Some(p)) => Ok(p.clone()),
        (None, None) => bail!("no pretrained checkpoint: pass --checkpoint or set \"pretrained\""),
    }
}

pub fn finetune(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<RunSummary> {
    match cfg.precision {
        Precision::F32 => finetune_impl::<f32>(cfg, checkpoint, out),
        Precision::F64 => finetune_impl::<f64>(cfg, checkpoint, out),
    }
}

fn finetune_impl<T: Scalar>(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<RunSummary> {
    let src = pretrained_path(cfg, checkpoint)?;
    prepare_output(out, &cfg.to_json())?;
    let pretrained = Checkpoint::<T>::load(&src)
        .with_context(|| format!("loading {}", src.display()))?
        .model()?;
    let (train, test) = load_dataset(&cfg.dataset, cfg.train.seed)?;
    let outcome = fine_tune(&pretrained, &train, &test, &cfg.train)?;
    let metrics_path = metrics_sink(out)?;
    append_metrics_csv(&metrics_path, &outcome.history)?;
    let last = outcome.history.last();
    Checkpoint::for_model(
        &outcome.model,
        cfg.train.optimizer,
        outcome.stats.clone(),
        cfg.train.seed,
        outcome.history.len(),
        last.map_or(0, |r| r.cum_flops),
    )
    .save(out.join("checkpoint.ckpt"))?;
    let mc = outcome.model.config();
    let summary = RunSummary {
        mode: TrainMode::Finetune,
        model: mc.notation(),
        params: count_params(mc),
        flops_fwd: count_forward_flops(mc),
        dataset_size: train.len(),
        epochs: outcome.history.len(),
        compute_flops: last.map(|r| r.cum_flops),
        train_err: last.map(|r| r.train_err),
        test_err: outcome.test_err,
        output_dir: out.to_path_buf(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn probe(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<RunSummary> {
    match cfg.precision {
        Precision::F32 => probe_impl::<f32>(cfg, checkpoint, out),
        Precision::F64 => probe_impl::<f64>(cfg, checkpoint, out),
    }
}

fn probe_impl<T: Scalar>(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<RunSummary> {
    let src = pretrained_path(cfg, checkpoint)?;
    prepare_output(out, &cfg.to_json())?;
    let model = Checkpoint::<T>::load(&src)
        .with_context(|| format!("loading {}", src.display()))?
        .model()?;
    let (train, test) = load_dataset(&cfg.dataset, cfg.train.seed)?;
    let outcome = linear_probe(&model, &train, &test, &cfg.train)?;
    let metrics_path = metrics_sink(out)?;
    append_metrics_csv(&metrics_path, &outcome.history)?;
    write_json(&out.join("probe_head.json"), &HeadJson::from(&outcome.head))?;
    let mc = model.config();
    let summary = RunSummary {
        mode: TrainMode::Probe,
        model: mc.notation(),
        params: count_params(mc),
        flops_fwd: count_forward_flops(mc),
        dataset_size: train.len(),
        epochs: outcome.history.len(),
        compute_flops: outcome.history.last().map(|r| r.cum_flops),
        train_err: Some(outcome.train_err),
        test_err: outcome.test_err,
        output_dir: out.to_path_buf(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// A probe head as plain JSON: `weight` is row-major `classes x features`.
#[derive(Serialize)]
struct HeadJson {
    classes: usize,
    features: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl<T: Scalar> From<&Linear<T>> for HeadJson {
    fn from(head: &Linear<T>) -> Self {
        let shape = head.weight.shape();
        Self {
            classes: shape[0],
            features: shape[1],
            weight: head.weight.data().iter().map(|v| v.as_f64()).collect(),
            bias: head.bias.data().iter().map(|v| v.as_f64()).collect(),
        }
    }
}

/// Writes the first `grid^2` embedding filters of a checkpoint as a PGM.
pub fn visualize(checkpoint: &Path, grid: usize, out: &Path) -> Result<(usize, usize)> {
    let bytes = fs::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let image = match Checkpoint::<f32>::decode(&bytes) {
        Ok(c) => grid_of(&c, grid)?,
        Err(first) => match Checkpoint::<f64>::decode(&bytes) {
            Ok(c) => grid_of(&c, grid)?,
            Err(_) => return Err(first).with_context(|| format!("decoding {}", checkpoint.display())),
        },
    };
    export_pgm(&image.image, out).with_context(|| format!("writing {}", out.display()))?;
    Ok((image.image.width, image.image.height))
}

fn grid_of<T: Scalar>(c: &Checkpoint<T>, grid: usize) -> Result<mlpscale::report::FilterGrid> {
    let input = c.meta.model.input;
    Ok(filter_grid(&c.params.embed.weight, input.height, input.width, input.channels, grid)?)
}

#[derive(Debug, Serialize)]
pub struct ParamReport {
    pub model: String,
    pub params: u64,
    pub flops_fwd: u64,
}

pub fn params(model: &ModelConfig) -> Result<ParamReport> {
    model.validate()?;
    Ok(ParamReport {
        model: model.notation(),
        params: count_params(model),
        flops_fwd: count_forward_flops(model),
    })
}

/// Output of `fit-scaling`.
#[derive(Debug, Serialize)]
pub struct ScalingReport {
    pub field: ErrorField,
    pub runs: usize,
    pub frontier: Vec<String>,
    pub power_law: PowerLawFit,
    /// Whether the fitted curve decreases strictly across the fit domain.
    pub monotone_decreasing: bool,
    pub allocation_epochs: Option<u64>,
    pub allocation: Option<[AllocationFit; 2]>,
}

pub fn parse_error_field(s: &str) -> Result<ErrorField> {
    Ok(s.strip_suffix("_err").unwrap_or(s).parse()?)
}

fn strictly_decreasing(fit: &PowerLawFit) -> bool {
    if fit.degenerate {
        return false;
    }
    let ys: Vec<f64> = fit.sample_domain(100).into_iter().map(|c| fit.predict(c)).collect();
    ys.windows(2).all(|w| w[1] < w[0])
}

/// Frontier, power-law fit, allocation fit and plot for a runs CSV.
pub fn fit_scaling(
    runs_csv: &Path,
    field: ErrorField,
    allocation_epochs: Option<u64>,
    json_out: &Path,
    svg_out: &Path,
) -> Result<ScalingReport> {
    let runs = read_runs_csv(runs_csv).with_context(|| format!("reading {}", runs_csv.display()))?;
    let frontier = pareto_frontier(&runs, field);
    if frontier.is_empty() {
        bail!("no runs in {} carry a {:?} error", runs_csv.display(), field);
    }
    let points: Vec<(f64, f64)> = frontier
        .iter()
        .filter_map(|r| r.error(field).map(|e| (r.compute_flops as f64, e)))
        .collect();
    let power_law = fit_power_law(&points)?;
    let (allocation, used_epochs) = allocation_fit(&runs, field, allocation_epochs);
    let svg = scaling_plot_svg(
        &runs,
        Some(&power_law),
        &PlotSpec {
            field,
            title: format!("{} error vs compute", field_name(field)),
            ..PlotSpec::default()
        },
    )?;
    fs::write(svg_out, svg).with_context(|| format!("writing {}", svg_out.display()))?;
    let report = ScalingReport {
        field,
        runs: runs.len(),
        frontier: frontier.iter().map(|r| r.run_id.clone()).collect(),
        monotone_decreasing: strictly_decreasing(&power_law),
        power_law,
        allocation_epochs: used_epochs,
        allocation,
    };
    write_json(json_out, &report)?;
    Ok(report)
}

fn field_name(f: ErrorField) -> &'static str {
    match f {
        ErrorField::Upstream => "upstream",
        ErrorField::Probe => "probe",
        ErrorField::Finetune => "finetune",
    }
}

/// Allocation fit over runs of one epoch budget: the requested one, else the
/// largest budget present.
fn allocation_fit(runs: &[RunRecord], field: ErrorField, epochs: Option<u64>) -> (Option<[AllocationFit; 2]>, Option<u64>) {
    let t = match epochs {
        Some(t) if runs.iter().any(|r| r.epochs == t) => t,
        requested => {
            let Some(max_t) = runs.iter().map(|r| r.epochs).max() else {
                return (None, None);
            };
            if let Some(t) = requested {
                warn!("no runs with {t} epochs; fitting allocation at {max_t}");
            }
            max_t
        }
    };
    match fit_allocation_runs(&filter_epochs(runs, t), field) {
        Ok((p, n)) => (Some([p, n]), Some(t)),
        Err(e) => {
            warn!("allocation fit skipped: {e}");
            (None, Some(t))
        }
    }
}

/// Appends rows to a CSV under an exclusive advisory lock; the header is
/// written only into an empty file.
pub fn append_locked<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    file.lock()?;
    let fresh = file.metadata()?.len() == 0;
    let result = (|| -> Result<()> {
        let mut w = csv_writer(&file, fresh);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    })();
    file.unlock()?;
    result
}

fn csv_writer(file: &File, header: bool) -> csv::Writer<&File> {
    csv::WriterBuilder::new().has_headers(header).from_writer(file)
}
