//! Seeded synthetic re-identification data.
//!
//! Each identity is a stack of horizontal bands, each band with a left and a
//! right colour. Instances scale the pattern by a brightness factor, mirror it
//! with probability 1/2 and add Gaussian noise.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::DataConfig;
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::{Shape3, Tensor};

pub const BANDS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`.
    pub image: Tensor,
    pub id: usize,
    /// Position of the instance within its identity.
    pub instance: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub shape: Shape3,
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
    /// Training identities are `0..num_train_ids`.
    pub num_train_ids: usize,
}

fn pattern(shape: Shape3, rng: &mut ChaCha8Rng) -> Vec<[Vec<f64>; 2]> {
    (0..BANDS)
        .map(|_| {
            let left: Vec<f64> = (0..shape.c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let right = if rng.random_bool(0.5) { left.clone() } else { (0..shape.c).map(|_| rng.random_range(-1.0..1.0)).collect() };
            [left, right]
        })
        .collect()
}

fn render(shape: Shape3, bands: &[[Vec<f64>; 2]], cfg: &DataConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let gain = 1.0 + cfg.jitter * rng.random_range(-1.0..1.0);
    let flip = rng.random_bool(0.5);
    let band_h = shape.h.div_ceil(BANDS);
    Tensor::from_fn(&[shape.c, shape.h, shape.w], |i| {
        let c = i / shape.spatial();
        let y = (i / shape.w) % shape.h;
        let mut x = i % shape.w;
        if flip {
            x = shape.w - 1 - x;
        }
        let side = usize::from(2 * x >= shape.w);
        let noise: f64 = StandardNormal.sample(rng);
        gain * bands[(y / band_h).min(BANDS - 1)][side][c] + cfg.noise * noise
    })
}

/// Builds train, query and gallery splits; identities `0..train_ids` train, the rest are split
/// per identity into `queries_per_id` queries and the remaining gallery instances.
pub fn make_toy_dataset(cfg: &DataConfig, shape: Shape3, seed: u64) -> Result<ToyDataset> {
    if cfg.num_ids < 2 || cfg.train_ids == 0 || cfg.train_ids >= cfg.num_ids {
        return Err(Error::Contract(format!("need 0 < train_ids < num_ids with num_ids >= 2, got {cfg:?}")));
    }
    if cfg.queries_per_id == 0 || cfg.queries_per_id >= cfg.instances_per_id {
        return Err(Error::Contract("queries_per_id must leave at least one gallery instance".into()));
    }
    let mut rng = seeds::rng(seed);
    let mut ds = ToyDataset { shape, train: Vec::new(), query: Vec::new(), gallery: Vec::new(), num_train_ids: cfg.train_ids };
    for id in 0..cfg.num_ids {
        let bands = pattern(shape, &mut rng);
        for instance in 0..cfg.instances_per_id {
            let s = Sample { image: render(shape, &bands, cfg, &mut rng), id, instance };
            if id < cfg.train_ids {
                ds.train.push(s);
            } else if instance < cfg.queries_per_id {
                ds.query.push(s);
            } else {
                ds.gallery.push(s);
            }
        }
    }
    Ok(ds)
}

impl ToyDataset {
    /// Training sample indices grouped by identity.
    pub fn train_by_id(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_train_ids];
        for (i, s) in self.train.iter().enumerate() {
            groups[s.id].push(i);
        }
        groups
    }

    /// `P` distinct identities with `K` distinct instances each, identity-major.
    pub fn sample_batch(&self, p: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let groups = self.train_by_id();
        let eligible: Vec<&Vec<usize>> = groups.iter().filter(|g| g.len() >= k).collect();
        if eligible.len() < p {
            return Err(Error::Contract(format!("only {} identities have {k} instances, need {p}", eligible.len())));
        }
        let mut out = Vec::with_capacity(p * k);
        for g in eligible.choose_multiple(rng, p) {
            out.extend(g.choose_multiple(rng, k).copied());
        }
        Ok(out)
    }
}

/// Stacks sample images into `[B, C, H, W]`.
pub fn stack_images(samples: &[&Sample]) -> Result<Tensor> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&images)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (DataConfig, Shape3) {
        (
            DataConfig { num_ids: 4, instances_per_id: 4, train_ids: 2, queries_per_id: 1, noise: 0.3, jitter: 0.2 },
            Shape3 { c: 3, h: 12, w: 4 },
        )
    }

    #[test]
    fn reproducible_and_split() {
        let (cfg, shape) = small();
        let a = make_toy_dataset(&cfg, shape, 9).unwrap();
        assert_eq!(a, make_toy_dataset(&cfg, shape, 9).unwrap());
        assert_ne!(a, make_toy_dataset(&cfg, shape, 10).unwrap());
        assert_eq!((a.train.len(), a.query.len(), a.gallery.len()), (8, 2, 6));
        for q in &a.query {
            assert!(a.gallery.iter().all(|g| (g.id, g.instance) != (q.id, q.instance)));
            assert!(q.id >= 2);
        }
    }

    #[test]
    fn clean_instances_only_differ_by_mirroring() {
        let (mut cfg, shape) = small();
        cfg.noise = 0.0;
        cfg.jitter = 0.0;
        let ds = make_toy_dataset(&cfg, shape, 1).unwrap();
        let first = &ds.train[0].image;
        let mirror = Tensor::from_fn(&[3, 12, 4], |i| first.data()[i - i % 4 + 3 - i % 4]);
        for s in ds.train.iter().filter(|s| s.id == 0) {
            assert!(s.image == *first || s.image == mirror);
        }
    }

    #[test]
    fn batches_are_p_by_k() {
        let (cfg, shape) = small();
        let ds = make_toy_dataset(&cfg, shape, 2).unwrap();
        let mut rng = seeds::rng(0);
        let b = ds.sample_batch(2, 3, &mut rng).unwrap();
        let ids: Vec<usize> = b.iter().map(|&i| ds.train[i].id).collect();
        assert_eq!(ids.len(), 6);
        assert_eq!(ids[0], ids[2]);
        assert_ne!(ids[0], ids[3]);
        assert!(ds.sample_batch(3, 2, &mut rng).is_err());
    }
}
