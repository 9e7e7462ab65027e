//! Command implementations. Each takes the resolved run configuration and a
//! sink for human-readable output, and writes machine-readable artifacts
//! under the configured directories.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use tdcn_core::analysis::{matched_tcn, summarize_model, ModelSummary};
use tdcn_core::checkpoint::{ensure_compatible, Checkpoint};
use tdcn_core::data::{generate_synthetic, load_dataset, write_dataset, Split, Subject};
use tdcn_core::model::BackboneKind;
use tdcn_core::train::{
    evaluate, train, tuning_split, write_metrics_csv, EpochRecord, Example, LogWriter, MetricsRow,
    Preprocessor, Strategy,
};
use tdcn_core::{Error, Network, Result};

use crate::config::RunConfig;

macro_rules! say {
    ($w:expr, $($arg:tt)*) => {
        writeln!($w, $($arg)*).map_err(|source| Error::Io { path: PathBuf::from("<output>"), source })?
    };
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthReport {
    pub dir: PathBuf,
    /// Subjects per `(split, label)`.
    pub counts: BTreeMap<(Split, u8), usize>,
}

/// Generates the configured synthetic dataset into `dir`.
pub fn cmd_synth(cfg: &RunConfig, dir: &Path, w: &mut dyn Write) -> Result<SynthReport> {
    let subjects = generate_synthetic(&cfg.synth)?;
    write_dataset(dir, &subjects, cfg.synth.metadata(), &cfg.schema()?)?;
    let mut counts = BTreeMap::new();
    for s in &subjects {
        *counts.entry((s.split, s.label)).or_insert(0) += 1;
    }
    say!(w, "wrote {} subjects to {}", subjects.len(), dir.display());
    for ((split, label), n) in &counts {
        say!(w, "  {split:<10} class {label}: {n}");
    }
    Ok(SynthReport {
        dir: dir.to_path_buf(),
        counts,
    })
}

fn load_subjects(cfg: &RunConfig) -> Result<Vec<Subject>> {
    let manifest = cfg.manifest()?;
    load_dataset(
        &cfg.data.dataset_dir,
        &manifest,
        &cfg.data.cues,
        &cfg.schema()?,
    )
}

fn in_split(subjects: &[Subject], split: Split) -> Vec<&Subject> {
    subjects.iter().filter(|s| s.split == split).collect()
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
}

/// Trains on the training split, logging every epoch and keeping the
/// checkpoint with the best validation F1.
pub fn cmd_train(cfg: &RunConfig, w: &mut dyn Write) -> Result<TrainReport> {
    let model = cfg.model_for_run()?;
    let subjects = load_subjects(cfg)?;
    let train_subjects = in_split(&subjects, Split::Train);
    let (fit, held_out) = match cfg.data.tuning_ratio {
        Some(ratio) => tuning_split(&train_subjects, ratio, cfg.train.seed)?,
        None => (train_subjects, in_split(&subjects, Split::Validation)),
    };
    let prep = Preprocessor::fit(&fit, &cfg.data.cues, model.sequence_length)?;
    let examples = |set: &[&Subject]| -> Result<Vec<Example>> {
        set.iter().map(|s| prep.head_first(s)).collect()
    };
    let train_set = examples(&fit)?;
    let validation = examples(&held_out)?;

    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("run_config.toml"), cfg.to_toml()?)?;
    let mut net = Network::new(model, cfg.train.seed)?;
    say!(
        w,
        "training on {} subjects, validating on {}, {} trainable parameters",
        train_set.len(),
        validation.len(),
        net.params().trainable_scalars()
    );
    let checkpoint = cfg.checkpoint_path();
    let log_path = cfg.log_path();
    let mut log = LogWriter::create(&log_path)?;
    let outcome = train(&mut net, &train_set, &validation, &cfg.train, |ev| {
        log.append(ev.record)?;
        let r = ev.record;
        let val = match (r.val_accuracy, r.val_f1) {
            (Some(a), Some(f)) => format!("  val_acc {a:.3}  val_f1 {f:.3}"),
            _ => String::new(),
        };
        let mark = if ev.improved { "  *" } else { "" };
        say!(
            w,
            "epoch {:>4}  loss {:.5}  train_acc {:.3}{val}{mark}",
            r.epoch,
            r.mean_loss,
            r.train_accuracy
        );
        if ev.improved {
            Checkpoint::from_network(ev.network, r.epoch as u32, prep.stats().clone())
                .save(&checkpoint)?;
        }
        Ok(ControlFlow::Continue(()))
    })?;
    say!(
        w,
        "best epoch {}; checkpoint {}; log {}",
        outcome.best_epoch,
        checkpoint.display(),
        log_path.display()
    );
    Ok(TrainReport {
        log: outcome.log,
        best_epoch: outcome.best_epoch,
        checkpoint,
        log_path,
    })
}

/// Scores every non-empty split under each strategy and writes one metrics
/// row per pair.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    strategies: &[Strategy],
    w: &mut dyn Write,
) -> Result<Vec<MetricsRow>> {
    let path = checkpoint.map_or_else(|| cfg.checkpoint_path(), Path::to_path_buf);
    let ckpt = Checkpoint::load(&path)?;
    ensure_compatible(&ckpt.config, &cfg.model_for_run()?)?;
    let net = ckpt.network()?;
    let prep = Preprocessor::from_stats(ckpt.config.sequence_length, ckpt.normalization.clone());
    let subjects = load_subjects(cfg)?;

    let mut rows = Vec::new();
    for &strategy in strategies {
        for split in Split::ALL {
            let set = in_split(&subjects, split);
            if set.is_empty() {
                continue;
            }
            let eval = evaluate(&net, &set, &prep, strategy, cfg.train.batch_size)?;
            rows.push(MetricsRow::new(strategy, split.name(), &eval));
        }
    }
    create_dir(&cfg.output_dir)?;
    write_metrics_csv(&cfg.metrics_path(), &rows)?;
    say!(
        w,
        "{:<11} {:<10} {:>8} {:>8} {:>9} {:>8} {:>4} {:>4} {:>4} {:>4}",
        "strategy",
        "split",
        "accuracy",
        "recall",
        "precision",
        "f1",
        "tp",
        "tn",
        "fp",
        "fn"
    );
    for r in &rows {
        say!(
            w,
            "{:<11} {:<10} {:>8.3} {:>8.3} {:>9.3} {:>8.3} {:>4} {:>4} {:>4} {:>4}",
            r.strategy.name(),
            r.split,
            r.accuracy,
            r.recall,
            r.precision,
            r.f1,
            r.tp,
            r.tn,
            r.fp,
            r.fn_
        );
    }
    say!(w, "metrics written to {}", cfg.metrics_path().display());
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzeReport {
    pub model: ModelSummary,
    pub baseline: ModelSummary,
    pub runtime_params: usize,
}

/// Prints the analysis of the configured model and of the same model with
/// causal baseline branches, then their FLOPs ordering.
pub fn cmd_analyze(cfg: &RunConfig, w: &mut dyn Write) -> Result<AnalyzeReport> {
    let model_cfg = cfg.model_for_run()?;
    let model = summarize_model(&model_cfg)?;
    let baseline = summarize_model(&matched_tcn(&model_cfg))?;
    let runtime_params = Network::new(model_cfg.clone(), 0)?
        .params()
        .trainable_scalars();

    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("analysis.csv"), model.to_csv()?)?;
    write_file(
        &cfg.output_dir.join("analysis_baseline.csv"),
        baseline.to_csv()?,
    )?;

    let label = |kind: BackboneKind| match kind {
        BackboneKind::Tdcn => "TDCN",
        BackboneKind::Tcn => "TCN",
    };
    say!(w, "configured model ({}):", label(model_cfg.backbone));
    write!(w, "{}", model.to_table()).map_err(|source| Error::Io {
        path: PathBuf::from("<output>"),
        source,
    })?;
    say!(w, "\nmatched causal baseline (TCN):");
    write!(w, "{}", baseline.to_table()).map_err(|source| Error::Io {
        path: PathBuf::from("<output>"),
        source,
    })?;
    let check = if model.total_params() == runtime_params {
        "=="
    } else {
        "!="
    };
    say!(
        w,
        "\nparameters: analyzer {} {check} runtime {}",
        model.total_params(),
        runtime_params
    );
    let (a, b) = (model.total_flops(), baseline.total_flops());
    let op = match a.cmp(&b) {
        std::cmp::Ordering::Less => "<",
        std::cmp::Ordering::Equal => "=",
        std::cmp::Ordering::Greater => ">",
    };
    say!(
        w,
        "ordering: {} {op} TCN ({a} vs {b} FLOPs)",
        label(model_cfg.backbone)
    );
    Ok(AnalyzeReport {
        model,
        baseline,
        runtime_params,
    })
}

/// Prints a checkpoint's header, configuration and tensor list.
pub fn cmd_inspect(path: &Path, w: &mut dyn Write) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    say!(w, "checkpoint {}", path.display());
    say!(
        w,
        "format version {}, epoch {}",
        tdcn_core::checkpoint::VERSION,
        ckpt.epoch
    );
    let config = toml::to_string(&ckpt.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    say!(w, "\n[model]\n{}", config.trim_end());
    say!(
        w,
        "\n{:<44} {:<16} {:>10} {}",
        "tensor",
        "shape",
        "values",
        "kind"
    );
    for e in ckpt.params.entries() {
        say!(
            w,
            "{:<44} {:<16} {:>10} {}",
            e.name,
            format!("{:?}", e.tensor.shape()),
            e.tensor.numel(),
            if e.trainable() { "param" } else { "buffer" }
        );
    }
    say!(
        w,
        "\n{} tensors, {} trainable scalars",
        ckpt.params.len(),
        ckpt.params.trainable_scalars()
    );
    for (cue, stats) in &ckpt.normalization {
        say!(w, "normalization for {cue}: {} features", stats.mean.len());
    }
    Ok(ckpt)
}
