//! Experiment commands. Each one reads a resolved [`RunConfig`], writes its
//! outputs plus a `manifest.toml` that embeds the config, and returns a summary.

use super::checkpoint::Checkpoint;
use super::config::{Manifest, ProviderKind, RunConfig};
use super::dataset::{generate_dataset, load_dataset, write_dataset, Dataset, BANK_FILE};
use crate::alignment::{EpochReport, Model, Trainer, TrainingData};
use crate::error::{Error, Result};
use crate::features::{encode_views, FeatureProvider, SampleRequest, Split, SyntheticEncoder};
use crate::image::Image;
use crate::linalg::Matrix;
use crate::regulator::BlurScheduleState;
use crate::retrieval::{nway_evaluate, EvalReport};
use crate::rng::{derive_seed, stream};
use crate::transforms::{build_view_stack, View};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bick";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.toml";
pub const REPORT_FILE: &str = "report.md";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, outputs: &[PathBuf]) -> Result<PathBuf> {
    let manifest = Manifest {
        command: command.into(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        outputs: outputs
            .iter()
            .map(|p| p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned())
            .collect(),
        config: cfg.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    write_text(&path, &toml::to_string(&manifest).expect("manifest serializes"))?;
    Ok(path)
}

/// Renders the dataset into `cfg.paths.dataset`. Refuses to overwrite an
/// existing dataset unless `force` is set.
pub fn cmd_generate(cfg: &RunConfig, force: bool) -> Result<Dataset> {
    cfg.validate()?;
    let dir = &cfg.paths.dataset;
    if !force && [BANK_FILE, MANIFEST_FILE].iter().any(|f| dir.join(f).exists()) {
        return Err(Error::Config(format!(
            "{} already holds a dataset; pass --force to overwrite",
            dir.display()
        )));
    }
    let dataset = generate_dataset(cfg)?;
    create_dir(dir)?;
    let outputs = write_dataset(&dataset, dir)?;
    write_manifest(dir, "generate", cfg, &outputs[..1])?;
    Ok(dataset)
}

/// Writes the four views of one input image into `out_dir`.
pub fn cmd_transform(cfg: &RunConfig, input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let image = Image::<f64>::read_ppm(input)?;
    let fov = cfg.transforms.foveation::<f64>();
    fov.validate(image.height(), image.width())?;
    let vp = cfg
        .transforms
        .view_params::<f64>(derive_seed(cfg.seed, &[stream::NOISE, 0, 0]));
    let views = build_view_stack(&image, &fov, &vp)?;
    create_dir(out_dir)?;
    let mut outputs = Vec::new();
    for (view, img) in View::ALL.iter().zip(&views) {
        let path = out_dir.join(format!("{}.ppm", view.name()));
        img.write_ppm(&path)?;
        outputs.push(path);
    }
    write_manifest(out_dir, "transform", cfg, &outputs)?;
    Ok(outputs)
}

fn provider<'a>(cfg: &RunConfig, data: &'a Dataset) -> Result<FeatureProvider<'a, f64>> {
    Ok(match cfg.features.provider {
        ProviderKind::Bank => FeatureProvider::bank(&data.bank),
        ProviderKind::Synthetic => FeatureProvider::Synthetic {
            encoder: SyntheticEncoder::new(cfg.features.dim, cfg.data.channels, cfg.features.encoder_seed)?,
            images: &data.images,
            foveation: cfg.transforms.foveation(),
            view_params: cfg.transforms.view_params(0),
        },
    })
}

fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let data = load_dataset(&cfg.paths.dataset, cfg.data.channels)?;
    data.check_compatible(cfg)?;
    Ok(data)
}

pub fn initial_model(cfg: &RunConfig) -> Result<Model<f64>> {
    Model::init(
        cfg.features.dim,
        cfg.data.neural_dim,
        &cfg.fusion,
        cfg.alignment.temperature,
        derive_seed(cfg.seed, &[stream::INIT]),
    )
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub reports: Vec<EpochReport>,
    pub checkpoint: PathBuf,
    pub clamp_warnings: usize,
}

const METRICS_HEADER: [&str; 9] = [
    "epoch",
    "loss",
    "mean_smoothed_sim",
    "kernel_min",
    "kernel_mean",
    "kernel_max",
    "T_lower",
    "T_upper",
    "kernel_histogram",
];

fn histogram_cell(report: &EpochReport) -> String {
    report
        .kernel_histogram
        .iter()
        .map(|(k, n)| format!("{k}:{n}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Trains on the dataset at `cfg.paths.dataset` and writes the checkpoint,
/// per-epoch metrics and manifest into `cfg.paths.run`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = open_dataset(cfg)?;
    let views = cfg.views();
    let provider = provider(cfg, &data)?;
    let train_ids = data.bank.indices(Split::Train);
    let regulator = BlurScheduleState::from_config(
        data.len(),
        cfg.transforms.kernel_size,
        cfg.transforms.perturbation,
        &cfg.regulator,
    )?;
    let mut trainer = Trainer::new(
        initial_model(cfg)?,
        regulator,
        cfg.alignment.clone(),
        cfg.regulator.clone(),
        cfg.seed,
    )?;
    let dir = &cfg.paths.run;
    create_dir(dir)?;
    trainer.dump_dir = Some(dir.clone());

    let metrics_path = dir.join(METRICS_FILE);
    let mut metrics = csv::Writer::from_path(&metrics_path).map_err(|e| csv_error(&metrics_path, e))?;
    metrics
        .write_record(METRICS_HEADER)
        .map_err(|e| csv_error(&metrics_path, e))?;
    let training = TrainingData {
        provider: &provider,
        neural: &data.neural,
        train_ids: &train_ids,
        views: &views,
    };
    let mut reports = Vec::with_capacity(cfg.alignment.epochs);
    for _ in 0..cfg.alignment.epochs {
        let r = trainer.train_epoch(&training)?;
        metrics
            .write_record([
                r.epoch.to_string(),
                r.loss.to_string(),
                r.mean_smoothed_sim.to_string(),
                r.kernel_min.to_string(),
                r.kernel_mean.to_string(),
                r.kernel_max.to_string(),
                r.t_lower.to_string(),
                r.t_upper.to_string(),
                histogram_cell(&r),
            ])
            .map_err(|e| csv_error(&metrics_path, e))?;
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        reports.push(r);
    }
    drop(metrics);

    let checkpoint = dir.join(CHECKPOINT_FILE);
    Checkpoint::from_model(&trainer.model, cfg, cfg.alignment.epochs).save(&checkpoint)?;
    write_manifest(dir, "train", cfg, &[checkpoint.clone(), metrics_path])?;
    Ok(TrainOutcome {
        reports,
        checkpoint,
        clamp_warnings: provider.clamp_warnings(),
    })
}

/// Neural-side queries and visual-side gallery embeddings for the test split.
pub fn test_embeddings(
    cfg: &RunConfig,
    model: &Model<f64>,
    data: &Dataset,
    views: &[View],
) -> Result<(Matrix<f64>, Matrix<f64>)> {
    let provider = provider(cfg, data)?;
    let ids = data.bank.indices(Split::Test);
    let rows = ids
        .par_iter()
        .map(|&i| {
            let features = encode_views(
                &provider,
                views,
                SampleRequest {
                    index: i,
                    kernel_size: cfg.transforms.kernel_size,
                    noise_seed: derive_seed(cfg.seed, &[stream::NOISE, i as u64, stream::EVAL_EPOCH]),
                },
            )?;
            Ok((
                model.embed_neural(&data.neural[i]),
                model.embed_visual(&features)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (queries, gallery): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    if queries.is_empty() {
        return Err(Error::Config("dataset has no test samples".into()));
    }
    Ok((Matrix::from_rows(&queries), Matrix::from_rows(&gallery)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub subject: String,
    pub checkpoint: String,
    pub test_samples: usize,
    /// Configured gallery sizes larger than the test split.
    pub skipped_gallery_sizes: Vec<usize>,
    pub reports: Vec<EvalReport>,
}

/// Scores a checkpoint on every configured gallery size that fits in the test
/// split and writes `eval.csv`, `eval_summary.toml` and a manifest into
/// `cfg.paths.reports`.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalSummary> {
    cfg.validate()?;
    let ck_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.run.join(CHECKPOINT_FILE));
    let ck = Checkpoint::load(&ck_path)?;
    let views = ck.views()?;
    if views != cfg.views() {
        return Err(Error::Config(format!(
            "checkpoint was trained on views {:?} but the config enables {:?}",
            ck.manifest.views,
            cfg.views().iter().map(|v| v.name()).collect::<Vec<_>>()
        )));
    }
    let model = ck.to_model::<f64>(cfg)?;
    let data = open_dataset(cfg)?;
    let (queries, gallery) = test_embeddings(cfg, &model, &data, &views)?;
    let total = queries.rows();

    let (sizes, skipped): (Vec<usize>, Vec<usize>) =
        cfg.eval.gallery_sizes.iter().partition(|&&n| n <= total);
    if sizes.is_empty() {
        return Err(Error::Config(format!(
            "no configured gallery size {:?} fits the {total} test samples",
            cfg.eval.gallery_sizes
        )));
    }
    let reports = sizes
        .iter()
        .map(|&n| nway_evaluate(&queries, &gallery, n, cfg.eval.trials, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    if reports
        .iter()
        .any(|r| !(r.top1.is_finite() && r.similarity.is_finite()))
    {
        return Err(Error::Numeric {
            message: "non-finite evaluation metric".into(),
            dump: None,
        });
    }

    let dir = &cfg.paths.reports;
    create_dir(dir)?;
    let csv_path = dir.join(EVAL_FILE);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    w.write_record([
        "subject",
        "n",
        "seed",
        "trials",
        "top1",
        "top5",
        "map",
        "similarity",
    ])
    .map_err(|e| csv_error(&csv_path, e))?;
    for r in &reports {
        w.write_record([
            cfg.eval.subject.clone(),
            r.gallery_size.to_string(),
            r.seed.to_string(),
            r.trials.to_string(),
            r.top1.to_string(),
            r.top5.to_string(),
            r.map.to_string(),
            r.similarity.to_string(),
        ])
        .map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    drop(w);

    let summary = EvalSummary {
        subject: cfg.eval.subject.clone(),
        checkpoint: ck_path.to_string_lossy().into_owned(),
        test_samples: total,
        skipped_gallery_sizes: skipped,
        reports,
    };
    let summary_path = dir.join(EVAL_SUMMARY_FILE);
    write_text(
        &summary_path,
        &toml::to_string(&summary).expect("summary serializes"),
    )?;
    write_manifest(dir, "evaluate", cfg, &[csv_path, summary_path])?;
    Ok(summary)
}

/// Collects the training metrics and evaluation results into a Markdown
/// report in `cfg.paths.reports`.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let mut out = String::from("# Run report\n\n");
    out.push_str(&format!("config hash `{}`, seed {}\n\n", cfg.hash(), cfg.seed));
    out.push_str(&format!(
        "views: {}; dynamic blur: {}; evidence weighting: {}\n\n",
        cfg.views()
            .iter()
            .map(|v| v.name())
            .collect::<Vec<_>>()
            .join(", "),
        cfg.regulator.dynamic,
        cfg.fusion.evidence
    ));

    let metrics_path = cfg.paths.run.join(METRICS_FILE);
    if metrics_path.exists() {
        let mut r = csv::Reader::from_path(&metrics_path).map_err(|e| csv_error(&metrics_path, e))?;
        let rows: Vec<csv::StringRecord> = r
            .records()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| csv_error(&metrics_path, e))?;
        out.push_str(
            "## Training\n\n| epoch | loss | mean smoothed sim | kernel min/mean/max |\n|---|---|---|---|\n",
        );
        for row in &rows {
            out.push_str(&format!(
                "| {} | {} | {} | {}/{}/{} |\n",
                &row[0], &row[1], &row[2], &row[3], &row[4], &row[5]
            ));
        }
        out.push('\n');
    }

    let eval_path = cfg.paths.reports.join(EVAL_FILE);
    if eval_path.exists() {
        let mut r = csv::Reader::from_path(&eval_path).map_err(|e| csv_error(&eval_path, e))?;
        out.push_str("## Retrieval\n\n| subject | n | trials | top-1 | top-5 | mAP | similarity |\n|---|---|---|---|---|---|---|\n");
        for row in r.records() {
            let row = row.map_err(|e| csv_error(&eval_path, e))?;
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} |\n",
                &row[0], &row[1], &row[3], &row[4], &row[5], &row[6], &row[7]
            ));
        }
    }
    let dir = &cfg.paths.reports;
    create_dir(dir)?;
    let path = dir.join(REPORT_FILE);
    write_text(&path, &out)?;
    Ok(out)
}
