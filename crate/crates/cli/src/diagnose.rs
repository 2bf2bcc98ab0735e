//! `diagnose`: channel correlation and conditioning on the test split.

use std::path::{Path, PathBuf};

use abd_core::evaluate::{bin_lo, correlation_report, HISTOGRAM_BINS};
use abd_core::network::dataset::stack_images;
use abd_core::network::{checkpoint, make_toy_dataset, Config, Model, RunSeeds, ToyDataset, Variant, OW_LAYERS};
use abd_core::orthogonality::{condition_number, WeightMatrixView};
use abd_core::Tensor;

use crate::error::Result;
use crate::train::recorded_variant;
use crate::{csv_writer, num};

pub const CORRELATION_FILE: &str = "correlation.csv";
pub const HISTOGRAM_FILE: &str = "corr_hist.csv";
pub const CONDITIONING_FILE: &str = "conditioning.csv";

/// Activations reported by `diagnose`, in network order.
pub const LAYERS: [&str; 6] = ["cam_early", "t_g", "t_a", "cam", "pam", "attentive_prepool"];

/// Activations whose conditioning is reported.
pub const CONDITIONED: [&str; 2] = ["t_a", "t_g"];

/// Query and gallery images, stacked `[N, C, H, W]`.
pub fn test_images(ds: &ToyDataset) -> Result<Tensor> {
    Ok(stack_images(&ds.query.iter().chain(&ds.gallery).collect::<Vec<_>>())?)
}

/// Per-image channel correlation averaged over a batch of images.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCorrelation {
    pub layer: String,
    pub mean_offdiag: f64,
    pub mean_full: f64,
    /// Mean number of constant channels per image.
    pub constant_channels: f64,
    /// Off-diagonal |ρ| histogram summed over images.
    pub histogram: Vec<usize>,
}

impl LayerCorrelation {
    pub fn measure(model: &Model, images: &Tensor, variant: Variant, layers: &[&str]) -> Result<Vec<LayerCorrelation>> {
        let (_, acts) = model.infer(images, variant, layers)?;
        let n = images.shape()[0];
        layers
            .iter()
            .map(|&layer| {
                let a = &acts[layer];
                let mut out = LayerCorrelation {
                    layer: layer.to_string(),
                    mean_offdiag: 0.0,
                    mean_full: 0.0,
                    constant_channels: 0.0,
                    histogram: vec![0; HISTOGRAM_BINS],
                };
                for i in 0..n {
                    let rep = correlation_report(&a.index_axis0(i)?)?;
                    out.mean_offdiag += rep.mean_offdiag / n as f64;
                    out.mean_full += rep.mean_full / n as f64;
                    out.constant_channels += rep.constant_channels as f64 / n as f64;
                    for (h, c) in out.histogram.iter_mut().zip(&rep.histogram) {
                        *h += c;
                    }
                }
                Ok(out)
            })
            .collect()
    }
}

/// Condition number summary of one activation or weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub kind: &'static str,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Mean over images of the finite values; equals `max` for weights.
    pub mean: f64,
    pub max: f64,
    /// Images whose activation was rank deficient or all zero.
    pub degenerate: usize,
}

fn activation_conditioning(model: &Model, images: &Tensor, variant: Variant) -> Result<Vec<Conditioning>> {
    let (_, acts) = model.infer(images, variant, &CONDITIONED)?;
    let mut out = Vec::new();
    for name in CONDITIONED {
        let a = &acts[name];
        let (mut sum, mut max, mut finite, mut degenerate) = (0.0, 0.0f64, 0usize, 0usize);
        let mut dims = (0, 0);
        for i in 0..images.shape()[0] {
            let f = a.index_axis0(i)?.flatten_spatial()?;
            dims = (f.shape()[0], f.shape()[1]);
            match condition_number(&f) {
                Ok(k) if k.is_finite() => {
                    sum += k;
                    max = max.max(k);
                    finite += 1;
                }
                _ => degenerate += 1,
            }
        }
        let mean = if finite > 0 { sum / finite as f64 } else { f64::INFINITY };
        let max = if finite > 0 { max } else { f64::INFINITY };
        out.push(Conditioning { kind: "activation", name: name.into(), rows: dims.0, cols: dims.1, mean, max, degenerate });
    }
    Ok(out)
}

fn weight_conditioning(model: &Model) -> Result<Vec<Conditioning>> {
    OW_LAYERS
        .iter()
        .map(|layer| {
            let view = WeightMatrixView::from_conv_weight(model.store.get(&format!("{layer}.conv.weight"))?)?;
            let s = view.matrix.shape();
            let (rows, cols) = (s[0], s[1]);
            let (k, degenerate) = match condition_number(&view.matrix) {
                Ok(k) if k.is_finite() => (k, 0),
                _ => (f64::INFINITY, 1),
            };
            Ok(Conditioning { kind: "weight", name: layer.to_string(), rows, cols, mean: k, max: k, degenerate })
        })
        .collect()
}

pub enum Source {
    Checkpoint(PathBuf),
    Fresh(Box<Config>),
}

pub struct DiagnoseReport {
    pub variant: Variant,
    pub correlation: Vec<LayerCorrelation>,
    pub conditioning: Vec<Conditioning>,
}

pub fn cmd_diagnose(source: Source, seed: u64, variant: Option<Variant>, out: &Path) -> Result<DiagnoseReport> {
    let seeds = RunSeeds::from_master(seed);
    let (model, recorded) = match source {
        Source::Checkpoint(dir) => (checkpoint::load(&dir)?, recorded_variant(&dir)),
        Source::Fresh(cfg) => {
            cfg.validate().map_err(crate::CliError::Config)?;
            (Model::init(&cfg, cfg.data.train_ids, seeds.init)?, None)
        }
    };
    let variant = variant.or(recorded).unwrap_or(Variant::FULL);
    let ds = make_toy_dataset(&model.config.data, model.config.backbone.input, seeds.dataset)?;
    let images = test_images(&ds)?;
    let correlation = LayerCorrelation::measure(&model, &images, variant, &LAYERS)?;
    let mut conditioning = activation_conditioning(&model, &images, variant)?;
    conditioning.extend(weight_conditioning(&model)?);

    let mut w = csv_writer(out, CORRELATION_FILE)?;
    w.write_record(["variant", "layer", "mean_offdiag", "mean_full", "constant_channels"])?;
    for c in &correlation {
        w.write_record([variant.flags(), c.layer.clone(), num(c.mean_offdiag), num(c.mean_full), num(c.constant_channels)])?;
    }
    w.flush()?;

    let mut w = csv_writer(out, HISTOGRAM_FILE)?;
    w.write_record(["layer", "bin_lo", "bin_hi", "count"])?;
    for c in &correlation {
        for (b, count) in c.histogram.iter().enumerate() {
            w.write_record([c.layer.clone(), num(bin_lo(b)), num(bin_lo(b + 1)), count.to_string()])?;
        }
    }
    w.flush()?;

    let mut w = csv_writer(out, CONDITIONING_FILE)?;
    w.write_record(["kind", "name", "rows", "cols", "condition_mean", "condition_max", "degenerate"])?;
    for c in &conditioning {
        w.write_record([c.kind.into(), c.name.clone(), c.rows.to_string(), c.cols.to_string(), num(c.mean), num(c.max), c.degenerate.to_string()])?;
    }
    w.flush()?;
    Ok(DiagnoseReport { variant, correlation, conditioning })
}
