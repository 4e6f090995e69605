use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{forward, init_params, predict, sample_mode, ForwardOptions, Mode, ModelConfig, ModelInput};
use crate::error::{Error, Result};
use crate::geom::Conformer;
use crate::graph2d::{shortest_paths, MolGraph, SpdMatrix};
use crate::numcore::{Gradients, Params, Tape, Tensor};
use crate::synth::synthetic_molecule;

/// Gaussian jitter of every coordinate; atom types are untouched.
pub fn add_coordinate_noise<R: Rng + ?Sized>(c: &Conformer, scale: f64, rng: &mut R) -> Result<Conformer> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::contract(format!("noise scale {scale} must be finite and non-negative")));
    }
    if scale == 0.0 {
        return Ok(c.clone());
    }
    let dist = Normal::new(0.0, scale).expect("valid scale");
    let positions = c
        .positions()
        .iter()
        .map(|p| [p[0] + dist.sample(rng), p[1] + dist.sample(rng), p[2] + dist.sample(rng)])
        .collect();
    c.with_positions(positions)
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub graph: MolGraph,
    pub spd: SpdMatrix,
    pub conformer: Conformer,
    pub target: f64,
}

impl Sample {
    pub fn new(graph: MolGraph, conformer: Conformer, target: f64, spd_cap: u32) -> Result<Self> {
        let spd = shortest_paths(&graph, spd_cap)?;
        Ok(Self {
            graph,
            spd,
            conformer,
            target,
        })
    }
}

pub fn mean_pairwise_distance(c: &Conformer) -> f64 {
    let p = c.positions();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            total += crate::geom::norm(crate::geom::sub(p[i], p[j]));
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Synthetic molecules whose target is their mean pairwise distance (Å).
pub fn synthetic_dataset(count: usize, min_atoms: usize, max_atoms: usize, seed: u64, spd_cap: u32) -> Result<Vec<Sample>> {
    if min_atoms < 2 || max_atoms < min_atoms {
        return Err(Error::contract(format!("atom range {min_atoms}..={max_atoms} is empty or below 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(min_atoms..=max_atoms);
            let (g, c) = synthetic_molecule(n, rng.random());
            let target = mean_pairwise_distance(&c);
            Sample::new(g, c, target, spd_cap)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: applied to the weights directly, not through the gradient.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter adaptive step without momentum: each coordinate moves by
/// its gradient over a bias-corrected running RMS.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    second: BTreeMap<String, Tensor>,
    steps: i32,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        if !(cfg.lr >= 0.0 && (0.0..1.0).contains(&cfg.beta2) && cfg.eps > 0.0 && cfg.weight_decay >= 0.0) {
            return Err(Error::contract(format!("invalid optimizer settings {cfg:?}")));
        }
        Ok(Self {
            cfg,
            second: BTreeMap::new(),
            steps: 0,
        })
    }

    pub fn step(&mut self, params: &mut Params, grads: &Gradients, lr: f64) -> Result<()> {
        self.steps += 1;
        let b2 = self.cfg.beta2;
        let correction = 1.0 - b2.powi(self.steps);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let denom = (*vi / correction).sqrt() + self.cfg.eps;
                *w -= lr * (gi / denom + self.cfg.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_molecules: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub data_seed: u64,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_molecules: 2000,
            min_atoms: 4,
            max_atoms: 12,
            steps: 5000,
            warmup_steps: 100,
            batch_size: 8,
            data_seed: 7,
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Linear warmup, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.optimizer.lr;
        if step < self.warmup_steps {
            base * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            base
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyReport {
    /// Mean batch L1 per step.
    pub loss_curve: Vec<f64>,
    /// L1 of predicting the mean target everywhere.
    pub baseline_l1: f64,
    pub initial_l1: f64,
    pub final_l1: f64,
    pub params: Params,
}

pub fn baseline_l1(samples: &[Sample]) -> f64 {
    let mean = samples.iter().map(|s| s.target).sum::<f64>() / samples.len() as f64;
    samples.iter().map(|s| (s.target - mean).abs()).sum::<f64>() / samples.len() as f64
}

/// Mean absolute error on clean conformers in the given mode.
pub fn evaluate_l1(params: &Params, cfg: &ModelConfig, samples: &[Sample], mode: Mode) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let (pred, _) = predict(params, cfg, &s.graph, &s.spd, Some(&s.conformer), mode)?;
        total += (pred - s.target).abs();
    }
    Ok(total / samples.len() as f64)
}

/// L1 regression on the sample targets with sampled modes, coordinate noise
/// and dropout. Deterministic for a given config.
pub fn train_toy(samples: &[Sample], cfg: &ModelConfig, train: &TrainConfig) -> Result<ToyReport> {
    if samples.is_empty() {
        return Err(Error::contract("training needs samples"));
    }
    let mean = samples.iter().map(|s| s.target).sum::<f64>() / samples.len() as f64;
    train_toy_from(samples, cfg, train, init_params(cfg, mean)?)
}

/// As [`train_toy`], starting from the given parameters.
pub fn train_toy_from(samples: &[Sample], cfg: &ModelConfig, train: &TrainConfig, mut params: Params) -> Result<ToyReport> {
    if samples.is_empty() || train.batch_size == 0 {
        return Err(Error::contract("training needs samples and a positive batch size"));
    }
    let mut opt = Optimizer::new(train.optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let baseline = baseline_l1(samples);
    let initial = evaluate_l1(&params, cfg, samples, Mode::Joint)?;
    let mut curve = Vec::with_capacity(train.steps);

    for step in 0..train.steps {
        let mut grads: Option<Gradients> = None;
        let mut batch_loss = 0.0;
        for _ in 0..train.batch_size {
            let s = &samples[rng.random_range(0..samples.len())];
            let mode = sample_mode(cfg, &mut rng);
            let noisy = if mode.uses_3d() {
                Some(add_coordinate_noise(&s.conformer, cfg.noise_scale, &mut rng)?)
            } else {
                None
            };
            let opts = ForwardOptions {
                mode,
                training: true,
                dropout_seed: rng.random(),
            };
            let mut tape = Tape::new();
            let vars = tape.register_all(&params)?;
            let input = ModelInput {
                graph: &s.graph,
                spd: &s.spd,
                conformer: noisy.as_ref(),
            };
            let out = forward(&mut tape, &vars, cfg, &input, None, opts)?;
            let target = tape.constant(Tensor::new(vec![1], vec![s.target])?);
            let diff = tape.sub(out.prediction, target)?;
            let abs = tape.abs(diff);
            let loss = tape.sum(abs);
            batch_loss += tape.value(loss).item();
            let g = tape.backward(loss)?;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => acc.accumulate(&g),
            }
        }
        let mut grads = grads.expect("batch is non-empty");
        grads.scale(1.0 / train.batch_size as f64);
        let batch_loss = batch_loss / train.batch_size as f64;
        if !batch_loss.is_finite() || !grads.all_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("batch loss {batch_loss}"),
            });
        }
        curve.push(batch_loss);
        opt.step(&mut params, &grads, train.lr_at(step))?;
        if step % 500 == 0 {
            log::info!("step {step} loss {batch_loss:.5}");
        }
    }
    let final_l1 = evaluate_l1(&params, cfg, samples, Mode::Joint)?;
    Ok(ToyReport {
        loss_curve: curve,
        baseline_l1: baseline,
        initial_l1: initial,
        final_l1,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_is_identity() {
        let (_, c) = synthetic_molecule(6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = add_coordinate_noise(&c, 0.0, &mut rng).unwrap();
        assert_eq!(same, c);
        let noisy = add_coordinate_noise(&c, 0.2, &mut rng).unwrap();
        assert_eq!(noisy.atomic_numbers(), c.atomic_numbers());
        assert_ne!(noisy.positions(), c.positions());
        assert!(add_coordinate_noise(&c, -1.0, &mut rng).is_err());
    }

    #[test]
    fn warmup_then_constant() {
        let t = TrainConfig::default();
        assert!((t.lr_at(0) - 1e-5).abs() < 1e-18);
        assert_eq!(t.lr_at(99), 1e-3);
        assert_eq!(t.lr_at(4999), 1e-3);
    }

    #[test]
    fn optimizer_moves_against_gradient() {
        let mut p = Params::new();
        p.insert("w".into(), Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut tape = Tape::new();
        let vars = tape.register_all(&p).unwrap();
        let w = vars.get("w").unwrap();
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        opt.step(&mut p, &g, 0.1).unwrap();
        // first step of an RMS-normalised update has magnitude lr
        let w = p["w"].data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.1).abs() < 1e-6);
    }
}
