//! `train` and `ablate`.

use std::fs;
use std::path::Path;

use abd_core::network::{checkpoint, run, Config, RetrievalMetrics, Run, Variant};
use sha2::{Digest, Sha256};

use crate::diagnose::{test_images, LayerCorrelation};
use crate::error::{CliError, Result};
use crate::{csv_writer, num};

pub const RUN_MANIFEST: &str = "run.manifest";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EPOCH_LOG: &str = "epoch_log.csv";
pub const LR_LOG: &str = "lr_log.csv";
pub const ABLATE_FILE: &str = "ablate.csv";

/// Layer whose channel correlation the ablation table reports.
pub const CORRELATION_LAYER: &str = "attentive_prepool";

/// Twelve hex digits of SHA-256 over the config text, variant flags and seed.
pub fn run_id(cfg: &Config, variant: Variant, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(cfg.to_text());
    h.update(format!("variant = {}\nseed = {seed}\n", variant.flags()));
    h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Records the manifest, refusing a directory that already holds a different run.
fn claim_dir(out: &Path, id: &str, config_path: Option<&Path>, variant: Variant, seed: u64) -> Result<()> {
    let manifest = out.join(RUN_MANIFEST);
    if let Ok(existing) = fs::read_to_string(&manifest) {
        if !existing.lines().any(|l| l == format!("run_id = {id}")) {
            return Err(CliError::Usage(format!("{} already holds a different run", out.display())));
        }
    }
    fs::create_dir_all(out)?;
    let config = config_path.map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
    let text = format!(
        "run_id = {id}\nconfig = {config}\nseed = {seed}\nvariant = {}\nout = {}\n",
        variant.flags(),
        out.display()
    );
    fs::write(manifest, text)?;
    Ok(())
}

/// Variant recorded in a run directory's manifest, if any.
pub fn recorded_variant(dir: &Path) -> Option<Variant> {
    let text = fs::read_to_string(dir.join(RUN_MANIFEST)).ok()?;
    let flags = text.lines().find_map(|l| l.strip_prefix("variant = "))?;
    Variant::parse(flags).ok()
}

pub struct TrainReport {
    pub run_id: String,
    pub run: Run,
}

pub fn cmd_train(cfg: &Config, config_path: Option<&Path>, variant: Variant, seed: u64, out: &Path) -> Result<TrainReport> {
    cfg.validate().map_err(CliError::Config)?;
    let id = run_id(cfg, variant, seed);
    claim_dir(out, &id, config_path, variant, seed)?;
    log::info!("run {id}: variant {} seed {seed}", variant.flags());
    let r = run(cfg, variant, seed)?;
    checkpoint::save(&r.outcome.model, out)?;

    let mut w = csv_writer(out, EPOCH_LOG)?;
    w.write_record(["stage", "epoch", "lr", "xent", "triplet", "of", "ow", "total", "train_top1"])?;
    for e in &r.outcome.log {
        w.write_record([
            e.stage.to_string(),
            e.epoch.to_string(),
            num(e.lr),
            num(e.xent),
            num(e.triplet),
            num(e.of),
            num(e.ow),
            num(e.total),
            num(e.train_top1),
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(out, LR_LOG)?;
    w.write_record(["step", "stage", "epoch", "lr"])?;
    for l in &r.outcome.lr_log {
        w.write_record([l.step.to_string(), l.stage.to_string(), l.epoch.to_string(), num(l.lr)])?;
    }
    w.flush()?;

    let mut w = csv_writer(out, METRICS_FILE)?;
    w.write_record(["variant", "seed", "top1", "top5", "map", "excluded_queries"])?;
    let m = r.metrics;
    w.write_record([variant.flags(), seed.to_string(), num(m.top1), num(m.top5), num(m.map), m.excluded.to_string()])?;
    w.flush()?;
    Ok(TrainReport { run_id: id, run: r })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: RetrievalMetrics,
    /// Mean absolute off-diagonal channel correlation at [`CORRELATION_LAYER`] over test images.
    pub corr_offdiag: f64,
}

/// Mean of the seed rows of `variant`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationMean {
    pub variant: Variant,
    pub top1: f64,
    pub top5: f64,
    pub map: f64,
    pub corr_offdiag: f64,
}

pub fn means(rows: &[AblationRow]) -> Vec<AblationMean> {
    let mut order: Vec<Variant> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant) {
            order.push(r.variant);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v).collect();
            let mean = |f: &dyn Fn(&AblationRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / sel.len() as f64;
            AblationMean {
                variant: v,
                top1: mean(&|r| r.metrics.top1),
                top5: mean(&|r| r.metrics.top5),
                map: mean(&|r| r.metrics.map),
                corr_offdiag: mean(&|r| r.corr_offdiag),
            }
        })
        .collect()
}

pub fn cmd_ablate(cfg: &Config, variants: &[Variant], seeds: &[u64], out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate().map_err(CliError::Config)?;
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for &variant in variants {
        for &seed in seeds {
            log::info!("ablate: variant {} seed {seed}", variant.flags());
            let r = run(cfg, variant, seed)?;
            let corr = LayerCorrelation::measure(&r.outcome.model, &test_images(&r.dataset)?, variant, &[CORRELATION_LAYER])?;
            rows.push(AblationRow { variant, seed, metrics: r.metrics, corr_offdiag: corr[0].mean_offdiag });
        }
    }
    let mut w = csv_writer(out, ABLATE_FILE)?;
    w.write_record(["variant", "seed", "top1", "top5", "map", "corr_offdiag"])?;
    for r in &rows {
        let m = r.metrics;
        w.write_record([r.variant.flags(), r.seed.to_string(), num(m.top1), num(m.top5), num(m.map), num(r.corr_offdiag)])?;
    }
    for m in means(&rows) {
        w.write_record([m.variant.flags(), "mean".into(), num(m.top1), num(m.top5), num(m.map), num(m.corr_offdiag)])?;
    }
    w.flush()?;
    Ok(rows)
}
