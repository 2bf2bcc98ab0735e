//! Two-stage training and retrieval evaluation.
//!
//! Stage 1 binds the backbone as tape constants and optimizes cross-entropy plus
//! the weighted triplet term. Stage 2 frees every parameter and adds the
//! orthogonality penalties enabled by the variant.

use log::info;
use rand_chacha::ChaCha8Rng;

use super::config::{Config, Variant};
use super::dataset::{make_toy_dataset, stack_images, Sample, ToyDataset};
use super::model::{ForwardOptions, Model, OfRequest, OF_SITES, OW_LAYERS};
use super::optim::{Adam, LrRecord};
use super::params::{Group, Param};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::evaluate::{cmc_topk, mean_ap, rank_gallery};
use crate::layers::{Mode, BN_MOMENTUM};
use crate::losses;
use crate::orthogonality;
use crate::seeds;
use crate::tensor::Tensor;

/// Sub-seeds fanned out from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub init: u64,
    pub dataset: u64,
    pub sampler: u64,
    pub power_iter: u64,
    pub dropout: u64,
}

impl RunSeeds {
    pub fn from_master(master: u64) -> Self {
        RunSeeds {
            init: seeds::derive(master, "init"),
            dataset: seeds::derive(master, "dataset"),
            sampler: seeds::derive(master, "sampler"),
            power_iter: seeds::derive(master, "power_iter"),
            dropout: seeds::derive(master, "dropout"),
        }
    }
}

/// Per-epoch means of the logged quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub xent: f64,
    pub triplet: f64,
    pub of: f64,
    pub ow: f64,
    pub total: f64,
    /// Fraction of training-batch images whose logits ranked their identity first.
    pub train_top1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub lr_log: Vec<LrRecord>,
}

pub struct Trainer<'d> {
    pub model: Model,
    dataset: &'d ToyDataset,
    variant: Variant,
    seeds: RunSeeds,
    sampler: ChaCha8Rng,
    adam: Adam,
    step: u64,
    of_q: Vec<Tensor>,
    ow_q: Vec<Tensor>,
    log: Vec<EpochRecord>,
}

#[derive(Default)]
struct Sums {
    n: usize,
    xent: f64,
    triplet: f64,
    of: f64,
    ow: f64,
    total: f64,
    correct: usize,
    seen: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(model: Model, dataset: &'d ToyDataset, variant: Variant, seeds: RunSeeds) -> Result<Self> {
        let s = &model.config.schedule;
        if dataset.num_train_ids < s.p || dataset.train_by_id().iter().filter(|g| g.len() >= s.k).count() < s.p {
            return Err(Error::Contract(format!("dataset cannot supply {} identities with {} instances", s.p, s.k)));
        }
        if dataset.num_train_ids != model.num_ids {
            return Err(Error::Contract(format!("classifier has {} outputs for {} identities", model.num_ids, dataset.num_train_ids)));
        }
        let shapes: Vec<&[usize]> = model.store.params().iter().map(|p| p.value.shape()).collect();
        let adam = Adam::new(&shapes, s.base_lr);
        let of_q = model.of_site_channels().iter().map(|&c| seeds::unit_column(c, seeds::derive(seeds.power_iter, "of_init"))).collect();
        let ow_q = model.ow_view_rows()?.iter().map(|&r| seeds::unit_column(r, seeds::derive(seeds.power_iter, "ow_init"))).collect();
        Ok(Trainer { model, dataset, variant, seeds, sampler: seeds::rng(seeds.sampler), adam, step: 0, of_q, ow_q, log: Vec::new() })
    }

    fn trainable(&self, stage: u8) -> impl Fn(&Param) -> bool {
        let freeze_gamma = self.model.config.freeze_gamma;
        move |p| match p.group {
            Group::Backbone => stage == 2,
            Group::Gamma => !freeze_gamma,
            Group::Head | Group::Attention => true,
        }
    }

    /// Start vectors for this step: fresh per step unless warm starts are on.
    fn starts(&self, site: &str, previous: &Tensor) -> Tensor {
        if self.model.config.warm_start {
            previous.clone()
        } else {
            seeds::unit_column(previous.numel(), seeds::derive_indexed(self.seeds.power_iter ^ self.model.config.svdo.seed, site, self.step))
        }
    }

    fn train_step(&mut self, stage: u8, epoch: usize, sums: &mut Sums) -> Result<()> {
        let cfg = self.model.config.clone();
        let s = &cfg.schedule;
        let idx = self.dataset.sample_batch(s.p, s.k, &mut self.sampler)?;
        let samples: Vec<&Sample> = idx.iter().map(|&i| &self.dataset.train[i]).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.id).collect();

        let of_starts: Vec<Tensor> = OF_SITES.iter().zip(&self.of_q).map(|(site, q)| self.starts(site, q)).collect();
        let ow_starts: Vec<Tensor> = OW_LAYERS.iter().zip(&self.ow_q).map(|(l, q)| self.starts(l, q)).collect();

        let mut tape = Tape::new();
        let binding = self.model.store.bind(&mut tape, self.trainable(stage));
        let x = tape.constant(stack_images(&samples)?);
        let opts = ForwardOptions {
            mode: Mode::Train,
            variant: self.variant,
            dropout_seed: seeds::derive_indexed(self.seeds.dropout, "step", self.step),
            of: Some(OfRequest { cfg: cfg.svdo, reduction: cfg.of_reduction, starts: &of_starts }),
        };
        let out = self.model.forward_on_tape(&mut tape, &binding, x, &opts)?;
        let xent = tape.cross_entropy(out.logits, &labels)?;
        let triplet = losses::batch_hard_triplet_on_tape(&mut tape, out.embeddings, &labels, cfg.loss.margin_alpha)?;
        let of_parts: Vec<Var> = out.of_terms.iter().map(|t| t.penalty).collect();
        let of = tape.add_n(&of_parts)?;
        let (ow, ow_final) = orthogonality::ow_on_tape(&mut tape, &Model::ow_weight_vars(&binding)?, &cfg.svdo, cfg.ow_reduction, &ow_starts)?;

        let v = self.variant;
        let use_of = stage == 2 && v.use_of;
        let use_ow = stage == 2 && v.use_ow;
        let total = losses::total_loss_on_tape(
            &mut tape,
            xent,
            v.use_triplet.then_some(triplet),
            use_of.then_some(of),
            use_ow.then_some(ow),
            &cfg.loss,
        )?;

        let mut grads = tape.backward(total)?;
        let grads = binding.gradients(&mut grads);
        self.step += 1;
        self.adam.step(&mut self.model.store.values_mut(), &grads, stage, epoch)?;
        for (name, st) in &out.bn_stats {
            if let Some(r) = self.model.store.running.get_mut(name) {
                r.update(st, BN_MOMENTUM);
            }
        }
        if cfg.warm_start {
            self.of_q = out.of_terms.iter().map(|t| t.q_final.clone()).collect();
            self.ow_q = ow_final;
        }

        let val = |v: Var| tape.value(v).item();
        sums.n += 1;
        sums.xent += val(xent)?;
        sums.triplet += val(triplet)?;
        sums.of += val(of)?;
        sums.ow += val(ow)?;
        sums.total += val(total)?;
        let logits = tape.value(out.logits);
        for (r, &l) in labels.iter().enumerate() {
            sums.seen += 1;
            sums.correct += usize::from(argmax(logits.row(r)) == l);
        }
        Ok(())
    }

    fn run_epoch(&mut self, stage: u8, epoch: usize) -> Result<EpochRecord> {
        let mut sums = Sums::default();
        let lr = self.adam.lr;
        for _ in 0..self.model.config.batches_per_epoch() {
            self.train_step(stage, epoch, &mut sums)?;
        }
        let n = sums.n as f64;
        let rec = EpochRecord {
            stage,
            epoch,
            lr,
            xent: sums.xent / n,
            triplet: sums.triplet / n,
            of: sums.of / n,
            ow: sums.ow / n,
            total: sums.total / n,
            train_top1: sums.correct as f64 / sums.seen as f64,
        };
        info!(
            "stage {stage} epoch {epoch}: lr {lr:e} xent {:.4} triplet {:.4} total {:.4} top1 {:.3}",
            rec.xent, rec.triplet, rec.total, rec.train_top1
        );
        self.log.push(rec);
        Ok(rec)
    }

    /// Frozen-backbone epochs at the base learning rate.
    pub fn run_stage1(&mut self) -> Result<()> {
        for epoch in 0..self.model.config.schedule.stage1_epochs {
            self.run_epoch(1, epoch)?;
        }
        Ok(())
    }

    /// All-parameter epochs; the learning rate decays at each milestone.
    pub fn run_stage2(&mut self) -> Result<()> {
        let s = self.model.config.schedule.clone();
        for epoch in 0..s.stage2_epochs {
            if s.milestones.contains(&epoch) {
                self.adam.decay(s.decay);
            }
            self.run_epoch(2, epoch)?;
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome { model: self.model, log: self.log, lr_log: self.adam.log }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn train(model: Model, dataset: &ToyDataset, variant: Variant, seeds: RunSeeds) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model, dataset, variant, seeds)?;
    t.run_stage1()?;
    t.run_stage2()?;
    Ok(t.finish())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalMetrics {
    pub top1: f64,
    pub top5: f64,
    pub map: f64,
    /// Queries without a true match in the gallery.
    pub excluded: usize,
}

fn images(samples: &[Sample]) -> Result<Tensor> {
    stack_images(&samples.iter().collect::<Vec<_>>())
}

/// Query-versus-gallery retrieval with eval-mode embeddings.
pub fn evaluate_retrieval(model: &Model, dataset: &ToyDataset, variant: Variant) -> Result<RetrievalMetrics> {
    let q = model.embed(&images(&dataset.query)?, variant)?;
    let g = model.embed(&images(&dataset.gallery)?, variant)?;
    let ql: Vec<usize> = dataset.query.iter().map(|s| s.id).collect();
    let gl: Vec<usize> = dataset.gallery.iter().map(|s| s.id).collect();
    let r = rank_gallery(&q, &g, &ql, &gl, None)?;
    let map = mean_ap(&r)?;
    Ok(RetrievalMetrics { top1: cmc_topk(&r, 1)?.value, top5: cmc_topk(&r, 5)?.value, map: map.value, excluded: map.excluded })
}

/// Eval-mode classification accuracy on the training split.
pub fn train_accuracy(model: &Model, dataset: &ToyDataset, variant: Variant) -> Result<f64> {
    let x = images(&dataset.train)?;
    let mut correct = 0;
    let bs = model.config.eval_batch.max(1);
    for start in (0..dataset.train.len()).step_by(bs) {
        let end = (start + bs).min(dataset.train.len());
        let batch: Vec<Tensor> = (start..end).map(|i| x.index_axis0(i)).collect::<Result<_>>()?;
        let mut tape = Tape::new();
        let binding = model.store.bind(&mut tape, |_| false);
        let xv = tape.constant(Tensor::stack(&batch)?);
        let out = model.forward_on_tape(&mut tape, &binding, xv, &ForwardOptions::eval(variant))?;
        let logits = tape.value(out.logits);
        for (r, s) in dataset.train[start..end].iter().enumerate() {
            correct += usize::from(argmax(logits.row(r)) == s.id);
        }
    }
    Ok(correct as f64 / dataset.train.len() as f64)
}

/// A trained model with the data it was trained and evaluated on.
#[derive(Debug, Clone)]
pub struct Run {
    pub dataset: ToyDataset,
    pub outcome: TrainOutcome,
    pub metrics: RetrievalMetrics,
}

/// Dataset, initialization, training and evaluation from one master seed.
pub fn run(config: &Config, variant: Variant, master_seed: u64) -> Result<Run> {
    config.validate()?;
    let seeds = RunSeeds::from_master(master_seed);
    let dataset = make_toy_dataset(&config.data, config.backbone.input, seeds.dataset)?;
    let model = Model::init(config, dataset.num_train_ids, seeds.init)?;
    let outcome = train(model, &dataset, variant, seeds)?;
    let metrics = evaluate_retrieval(&outcome.model, &dataset, variant)?;
    Ok(Run { dataset, outcome, metrics })
}
