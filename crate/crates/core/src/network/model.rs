//! The two-branch network.
//!
//! ```text
//! block1 → block2 → CAM [O.F.] → block3 → block4 ─┬─ block5g → GAP → linear reduction → k_g
//!                                                  └─ block5a → 1×1 reduction [O.F.] = T_a
//!                                                       T_a, CAM(T_a) [O.F.], PAM(T_a) [O.F.]
//!                                                       → concat → 1×1 reduction → GAP → k_a
//! embedding = [k_a, k_g]
//! ```
//!
//! Blocks are 3×3 conv → batch-norm → relu, with 2×2 max-pooling after blocks 1 to 3.
//! A disabled attention module passes its input through.

use std::collections::BTreeMap;

use rand::Rng;

use super::config::{Config, Variant};
use super::params::{Binding, Group, ParamStore};
use crate::attention::{self, PamHeadVars};
use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::layers::{self, BatchStats, ConvBnVars, Mode, RunningStats};
use crate::orthogonality::{self, Reduction, SvdoConfig};
use crate::seeds;
use crate::tensor::Tensor;

/// O.F. measurement points in forward order.
pub const OF_SITES: [&str; 4] = ["cam_early", "reduction", "cam", "pam"];

/// Convolutions registered for O.W.
pub const OW_LAYERS: [&str; 6] = ["block1", "block2", "block3", "block4", "block5g", "block5a"];

const PAM_HEADS: [&str; 3] = ["query", "key", "value"];

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: Config,
    pub num_ids: usize,
    pub store: ParamStore,
}

/// O.F. evaluation request: one start vector per entry of [`OF_SITES`].
#[derive(Debug, Clone, Copy)]
pub struct OfRequest<'a> {
    pub cfg: SvdoConfig,
    pub reduction: Reduction,
    pub starts: &'a [Tensor],
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    pub variant: Variant,
    pub dropout_seed: u64,
    pub of: Option<OfRequest<'a>>,
}

impl ForwardOptions<'_> {
    pub fn eval(variant: Variant) -> Self {
        ForwardOptions { mode: Mode::Eval, variant, dropout_seed: 0, of: None }
    }
}

#[derive(Debug, Clone)]
pub struct OfTerm {
    pub site: &'static str,
    pub penalty: Var,
    pub q_final: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub embeddings: Var,
    pub logits: Var,
    pub of_terms: Vec<OfTerm>,
    /// `cam_early`, `t_g`, `t_a`, `cam`, `pam`, `attentive_prepool`.
    pub activations: BTreeMap<&'static str, Var>,
    /// Batch statistics per batch-norm layer, in training mode.
    pub bn_stats: Vec<(String, BatchStats)>,
}

fn he(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

impl Model {
    /// Seeded He-style initialization.
    pub fn init(config: &Config, num_ids: usize, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = seeds::rng(seed);
        let mut store = ParamStore::default();
        let b = &config.backbone;
        let e = &config.embedding;
        let conv_bn = |store: &mut ParamStore, rng: &mut _, name: &str, c_in: usize, c_out: usize, k: usize, group: Group| {
            store.add(&format!("{name}.conv.weight"), seeds::normal_tensor(rng, &[c_out, c_in, k, k], he(c_in * k * k)), group);
            store.add(&format!("{name}.bn.gamma"), Tensor::filled(&[c_out], 1.0), group);
            store.add(&format!("{name}.bn.beta"), Tensor::zeros(&[c_out]), group);
            store.running.insert(format!("{name}.bn"), RunningStats::new(c_out));
        };
        let mut c_in = b.input.c;
        for (i, &w) in b.widths.iter().enumerate() {
            conv_bn(&mut store, &mut rng, &format!("block{}", i + 1), c_in, w, 3, Group::Backbone);
            c_in = w;
        }
        conv_bn(&mut store, &mut rng, "block5g", c_in, b.branch_width, 3, Group::Backbone);
        conv_bn(&mut store, &mut rng, "block5a", c_in, b.branch_width, 3, Group::Backbone);
        conv_bn(&mut store, &mut rng, "attentive.reduce", b.branch_width, e.k_a, 1, Group::Head);
        for head in PAM_HEADS {
            conv_bn(&mut store, &mut rng, &format!("pam.{head}"), e.k_a, e.k_a, 1, Group::Attention);
        }
        conv_bn(&mut store, &mut rng, "attentive.post", 3 * e.k_a, e.k_a, 1, Group::Head);
        for g in ["cam_early.gamma", "cam.gamma", "pam.gamma"] {
            store.add(g, Tensor::scalar(0.0), Group::Gamma);
        }
        store.add("global.reduce.weight", seeds::normal_tensor(&mut rng, &[b.branch_width, e.k_g], he(b.branch_width)), Group::Head);
        store.add("global.reduce.bn.gamma", Tensor::filled(&[e.k_g], 1.0), Group::Head);
        store.add("global.reduce.bn.beta", Tensor::zeros(&[e.k_g]), Group::Head);
        store.running.insert("global.reduce.bn".into(), RunningStats::new(e.k_g));
        let dim = e.dim();
        store.add("classifier.weight", seeds::normal_tensor(&mut rng, &[dim, num_ids], (1.0 / dim as f64).sqrt()), Group::Head);
        store.add("classifier.bias", Tensor::zeros(&[num_ids]), Group::Head);
        Ok(Model { config: config.clone(), num_ids, store })
    }

    /// Channel count of each O.F. site.
    pub fn of_site_channels(&self) -> [usize; 4] {
        let k_a = self.config.embedding.k_a;
        [self.config.backbone.widths[1], k_a, k_a, k_a]
    }

    /// Rows of the O.W. weight view of each registered conv.
    pub fn ow_view_rows(&self) -> Result<Vec<usize>> {
        OW_LAYERS
            .iter()
            .map(|l| {
                let s = self.store.get(&format!("{l}.conv.weight"))?.shape();
                Ok(s[1] * s[2] * s[3])
            })
            .collect()
    }

    /// Conv weights registered for O.W., in [`OW_LAYERS`] order.
    pub fn ow_weight_vars(binding: &Binding) -> Result<Vec<Var>> {
        OW_LAYERS.iter().map(|l| binding.var(&format!("{l}.conv.weight"))).collect()
    }

    fn conv_vars(b: &Binding, name: &str) -> Result<ConvBnVars> {
        Ok(ConvBnVars {
            weight: b.var(&format!("{name}.conv.weight"))?,
            bn_gamma: b.var(&format!("{name}.bn.gamma"))?,
            bn_beta: b.var(&format!("{name}.bn.beta"))?,
        })
    }

    /// Records the forward pass of `images: [B, C, H, W]`.
    pub fn forward_on_tape(&self, tape: &mut Tape, binding: &Binding, images: Var, opts: &ForwardOptions<'_>) -> Result<ForwardOutput> {
        let input = self.config.backbone.input;
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1..] != [input.c, input.h, input.w] {
            return dim_err("forward", format!("images {s:?}, configured {}x{}x{}", input.c, input.h, input.w));
        }
        if let Some(of) = &opts.of {
            if of.starts.len() != OF_SITES.len() {
                return dim_err("forward", format!("{} O.F. start vectors for {} sites", of.starts.len(), OF_SITES.len()));
            }
        }
        let mut f = Forward { model: self, tape, binding, opts, out_stats: Vec::new(), of_terms: Vec::new() };
        let v = opts.variant;
        let mut act = BTreeMap::new();

        let mut h = f.block(images, "block1", true)?;
        h = f.block(h, "block2", true)?;
        h = f.cam(h, "cam_early", v.use_cam)?;
        f.of_site(h, 0)?;
        act.insert("cam_early", h);
        h = f.block(h, "block3", true)?;
        h = f.block(h, "block4", false)?;

        let t_g = f.block(h, "block5g", false)?;
        act.insert("t_g", t_g);
        let g = f.tape.global_avg_pool(t_g)?;
        let g = f.linear_reduction(g, "global.reduce")?;

        let a5 = f.block(h, "block5a", false)?;
        let (t_a, st) = layers::conv_bn_relu(f.tape, a5, &Self::conv_vars(binding, "attentive.reduce")?, 0, self.store.running("attentive.reduce.bn")?, opts.mode)?;
        f.keep_stats("attentive.reduce", st);
        let t_a = f.dropout(t_a, "attentive.reduce")?;
        f.of_site(t_a, 1)?;
        act.insert("t_a", t_a);
        let cam = f.cam(t_a, "cam", v.use_cam)?;
        f.of_site(cam, 2)?;
        act.insert("cam", cam);
        let pam = f.pam(t_a, v.use_pam)?;
        f.of_site(pam, 3)?;
        act.insert("pam", pam);
        let cat = f.tape.concat(&[t_a, cam, pam])?;
        let (post, st) = layers::conv_bn_relu(f.tape, cat, &Self::conv_vars(binding, "attentive.post")?, 0, self.store.running("attentive.post.bn")?, opts.mode)?;
        f.keep_stats("attentive.post", st);
        act.insert("attentive_prepool", post);
        let a = f.tape.global_avg_pool(post)?;

        let embeddings = f.tape.concat(&[a, g])?;
        let logits = f.tape.matmul(embeddings, binding.var("classifier.weight")?)?;
        let logits = f.tape.add_bias(logits, binding.var("classifier.bias")?)?;
        Ok(ForwardOutput { embeddings, logits, of_terms: f.of_terms, activations: act, bn_stats: f.out_stats })
    }

    /// Eval-mode embeddings and named activations of `images`, in batches.
    pub fn infer(&self, images: &Tensor, variant: Variant, keep: &[&str]) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        let n = images.shape()[0];
        let bs = self.config.eval_batch.max(1);
        let mut embs = Vec::with_capacity(n);
        let mut acts: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
        for start in (0..n).step_by(bs) {
            let batch: Vec<Tensor> = (start..(start + bs).min(n)).map(|i| images.index_axis0(i)).collect::<Result<_>>()?;
            let mut tape = Tape::new();
            let binding = self.store.bind(&mut tape, |_| false);
            let x = tape.constant(Tensor::stack(&batch)?);
            let out = self.forward_on_tape(&mut tape, &binding, x, &ForwardOptions::eval(variant))?;
            let e = tape.value(out.embeddings);
            for i in 0..batch.len() {
                embs.push(e.index_axis0(i)?);
            }
            for &name in keep {
                let Some(&var) = out.activations.get(name) else {
                    return dim_err("infer", format!("no activation named {name}"));
                };
                let t = tape.value(var);
                let list = acts.entry(name.to_string()).or_default();
                for i in 0..batch.len() {
                    list.push(t.index_axis0(i)?);
                }
            }
        }
        let acts = acts.into_iter().map(|(k, v)| Ok((k, Tensor::stack(&v)?))).collect::<Result<_>>()?;
        Ok((Tensor::stack(&embs)?, acts))
    }

    pub fn embed(&self, images: &Tensor, variant: Variant) -> Result<Tensor> {
        Ok(self.infer(images, variant, &[])?.0)
    }
}

struct Forward<'m, 't, 'o> {
    model: &'m Model,
    tape: &'t mut Tape,
    binding: &'m Binding,
    opts: &'o ForwardOptions<'o>,
    out_stats: Vec<(String, BatchStats)>,
    of_terms: Vec<OfTerm>,
}

impl Forward<'_, '_, '_> {
    fn keep_stats(&mut self, layer: &str, stats: Option<BatchStats>) {
        if let Some(s) = stats {
            self.out_stats.push((format!("{layer}.bn"), s));
        }
    }

    fn block(&mut self, x: Var, name: &str, pool: bool) -> Result<Var> {
        let vars = Model::conv_vars(self.binding, name)?;
        let running = self.model.store.running(&format!("{name}.bn"))?;
        let (y, st) = layers::conv_bn_relu(self.tape, x, &vars, 1, running, self.opts.mode)?;
        self.keep_stats(name, st);
        if pool {
            self.tape.max_pool2(y)
        } else {
            Ok(y)
        }
    }

    fn dropout(&mut self, x: Var, layer: &str) -> Result<Var> {
        let p = self.model.config.dropout;
        if self.opts.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let mut rng = seeds::rng(seeds::derive(self.opts.dropout_seed, layer));
        let keep = 1.0 / (1.0 - p);
        let mask = Tensor::from_fn(self.tape.shape(x), |_| if rng.random_bool(1.0 - p) { keep } else { 0.0 });
        let m = self.tape.constant(mask);
        self.tape.mul(x, m)
    }

    fn linear_reduction(&mut self, x: Var, name: &str) -> Result<Var> {
        let y = self.tape.matmul(x, self.binding.var(&format!("{name}.weight"))?)?;
        let (y, st) = layers::batch_norm(
            self.tape,
            y,
            self.binding.var(&format!("{name}.bn.gamma"))?,
            self.binding.var(&format!("{name}.bn.beta"))?,
            self.model.store.running(&format!("{name}.bn"))?,
            self.opts.mode,
        )?;
        self.keep_stats(name, st);
        let y = self.tape.relu(y);
        self.dropout(y, name)
    }

    fn cam(&mut self, x: Var, name: &str, enabled: bool) -> Result<Var> {
        if !enabled {
            return Ok(x);
        }
        let gamma = self.binding.var(&format!("{name}.gamma"))?;
        Ok(attention::cam_batch_on_tape(self.tape, x, gamma)?.0)
    }

    fn pam(&mut self, x: Var, enabled: bool) -> Result<Var> {
        if !enabled {
            return Ok(x);
        }
        let store = &self.model.store;
        let heads = PamHeadVars::Projection {
            heads: [
                Model::conv_vars(self.binding, "pam.query")?,
                Model::conv_vars(self.binding, "pam.key")?,
                Model::conv_vars(self.binding, "pam.value")?,
            ],
            running: [store.running("pam.query.bn")?, store.running("pam.key.bn")?, store.running("pam.value.bn")?],
        };
        let gamma = self.binding.var("pam.gamma")?;
        let out = attention::pam_on_tape(self.tape, x, gamma, &heads, self.opts.mode)?;
        if let Some(stats) = out.head_stats {
            for (head, s) in PAM_HEADS.iter().zip(stats) {
                self.out_stats.push((format!("pam.{head}.bn"), s));
            }
        }
        Ok(out.out)
    }

    fn of_site(&mut self, x: Var, site: usize) -> Result<()> {
        if let Some(of) = &self.opts.of {
            let (penalty, q_final) = orthogonality::of_on_tape(self.tape, x, &of.cfg, of.reduction, &of.starts[site])?;
            self.of_terms.push(OfTerm { site: OF_SITES[site], penalty, q_final });
        }
        Ok(())
    }
}
