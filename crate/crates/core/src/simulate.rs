//! Seeded synthetic prediction sets with controllable top-1 accuracy, top-k
//! containment and confidence range.
//!
//! Exactly `round(n * top1_accuracy)` items have the true label at rank 1 and
//! `round(n * topk_containment)` have it somewhere in the top k (ranks 2..=k
//! drawn uniformly); the assignment is shuffled across items. The rank-1 score is
//! uniform in `[conf_min, conf_max)`, independent of correctness.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::store::{Candidate, Dataset, LabelMode, PredictionSet, Vocabulary};

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationConfig {
    pub n_items: usize,
    pub n_classes: usize,
    pub k: usize,
    pub top1_accuracy: f64,
    pub topk_containment: f64,
    pub conf_min: f64,
    pub conf_max: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_items: 1000,
            n_classes: 1000,
            k: 5,
            top1_accuracy: 0.33,
            topk_containment: 0.75,
            conf_min: 0.05,
            conf_max: 0.95,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k == 0 {
            return Err("k must be at least 1".into());
        }
        if self.n_classes <= self.k {
            return Err(format!(
                "need more than k={} classes, got {}",
                self.k, self.n_classes
            ));
        }
        if !(0.0..=1.0).contains(&self.top1_accuracy)
            || !(0.0..=1.0).contains(&self.topk_containment)
        {
            return Err("rates must be in [0, 1]".into());
        }
        if self.topk_containment < self.top1_accuracy {
            return Err("top-k containment cannot be below top-1 accuracy".into());
        }
        if self.k == 1 && self.topk_containment > self.top1_accuracy {
            return Err("with k=1 containment must equal top-1 accuracy".into());
        }
        if !(0.0 < self.conf_min && self.conf_min <= self.conf_max && self.conf_max <= 1.0) {
            return Err("confidence range must satisfy 0 < min <= max <= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Placement {
    Top1,
    Lower,
    Outside,
}

pub fn class_name(i: usize) -> String {
    format!("category {i:04}")
}

pub fn item_id(i: usize) -> String {
    format!("item-{i:07}")
}

pub fn synthetic_vocabulary(n_classes: usize) -> Vocabulary {
    Vocabulary::new((0..n_classes).map(class_name).collect()).expect("names are nonempty")
}

/// Strictly descending scores: rank 1 is `top`, the tail decays and is rescaled
/// so the slice sums to at most 1.
fn scores(rng: &mut ChaCha8Rng, top: f64, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(k);
    out.push(top);
    let mut s = top;
    for _ in 1..k {
        s *= rng.random_range(0.3..0.95);
        out.push(s);
    }
    let tail: f64 = out[1..].iter().sum();
    let room = (1.0 - top) * 0.999;
    if tail > room && tail > 0.0 {
        let f = room / tail;
        for v in &mut out[1..] {
            *v *= f;
        }
    }
    out
}

pub fn generate(cfg: &SimulationConfig) -> Result<Dataset, String> {
    cfg.validate()?;
    let vocab = synthetic_vocabulary(cfg.n_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_top1 = (cfg.n_items as f64 * cfg.top1_accuracy).round() as usize;
    let n_contained = ((cfg.n_items as f64 * cfg.topk_containment).round() as usize).max(n_top1);
    let mut placement: Vec<Placement> = (0..cfg.n_items)
        .map(|i| match i {
            i if i < n_top1 => Placement::Top1,
            i if i < n_contained => Placement::Lower,
            _ => Placement::Outside,
        })
        .collect();
    placement.shuffle(&mut rng);
    let mut items = Vec::with_capacity(cfg.n_items);
    for (i, place) in placement.into_iter().enumerate() {
        let picked = index::sample(&mut rng, cfg.n_classes, cfg.k + 1).into_vec();
        let (labels, outsider) = (&picked[..cfg.k], picked[cfg.k]);
        let truth = match place {
            Placement::Top1 => labels[0],
            Placement::Lower => labels[rng.random_range(1..cfg.k)],
            Placement::Outside => outsider,
        };
        let top = if cfg.conf_min == cfg.conf_max {
            cfg.conf_min
        } else {
            rng.random_range(cfg.conf_min..cfg.conf_max)
        };
        let candidates = labels
            .iter()
            .zip(scores(&mut rng, top, cfg.k))
            .map(|(&label, score)| Candidate { label, score })
            .collect();
        items.push(PredictionSet {
            item_id: item_id(i),
            candidates,
            true_labels: vec![truth],
        });
    }
    Dataset::new(vocab, items, LabelMode::Standard).map_err(|e| e.to_string())
}
