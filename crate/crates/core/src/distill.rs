//! Cross-modality distillation: a frozen encoder fed optimized conformers
//! supervises a student fed generated ones through embedding alignment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::{Conformer, Modality};
use crate::graph2d::{MolGraph, SpdMatrix};
use crate::model::{
    add_coordinate_noise, forward, init_params, predict, zero_graph_feature_params, Checkpoint, ForwardOptions, Mode, ModelConfig, ModelInput,
    Optimizer, OptimizerConfig, synthetic_dataset,
};
use crate::numcore::{Params, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Infonce,
    L1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    /// Fresh seeded weights with zeroed graph-feature tables.
    Random,
    /// Teacher weights plus zeroed graph-feature tables.
    TeacherCopy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub loss_kind: LossKind,
    pub temperature: f64,
    pub batch_size: usize,
    /// Weight of an extra supervised L1 term on targets; 0 disables it.
    pub gap_weight: f64,
    pub lr: f64,
    pub lr_factor: f64,
    pub lr_min: f64,
    pub lr_patience: usize,
    pub warmup_steps: usize,
    pub total_epochs: usize,
    pub student_init: StudentInit,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::Infonce,
            temperature: 0.1,
            batch_size: 32,
            gap_weight: 0.0,
            lr: 3e-4,
            lr_factor: 0.8,
            lr_min: 1e-7,
            lr_patience: 15,
            warmup_steps: 10,
            total_epochs: 20,
            student_init: StudentInit::Random,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::schema("temperature", "must be positive"));
        }
        let min_batch = if self.loss_kind == LossKind::Infonce { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::schema("batch_size", format!("must be at least {min_batch}")));
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::schema("lr", "need lr > 0, lr_min >= 0 and 0 < lr_factor < 1"));
        }
        if !(self.gap_weight >= 0.0) {
            return Err(Error::schema("gap_weight", "must be non-negative"));
        }
        Ok(())
    }
}

/// Warmup to the base rate over optimizer steps, then reduce-on-plateau
/// driven by the epoch loss.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    base: f64,
    factor: f64,
    min: f64,
    patience: usize,
    warmup: usize,
    steps: usize,
    current: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: &DistillConfig) -> Self {
        Self {
            base: cfg.lr,
            factor: cfg.lr_factor,
            min: cfg.lr_min,
            patience: cfg.lr_patience,
            warmup: cfg.warmup_steps,
            steps: 0,
            current: cfg.lr,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Rate for the next optimizer step.
    pub fn next_lr(&mut self) -> f64 {
        self.steps += 1;
        if self.steps <= self.warmup {
            self.base * self.steps as f64 / self.warmup as f64
        } else {
            self.current
        }
    }

    pub fn current(&self) -> f64 {
        self.current
    }

    /// Records an epoch loss; after `patience` epochs without a new best the
    /// rate shrinks by `factor`, never below `min`.
    pub fn end_epoch(&mut self, loss: f64) {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.current = (self.current * self.factor).max(self.min);
                self.stale = 0;
            }
        }
    }
}

fn check_pair_shapes(student: &Tensor, teacher: &Tensor) -> Result<(usize, usize)> {
    if student.shape() != teacher.shape() {
        return Err(Error::contract(format!(
            "embedding shapes differ: {:?} vs {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    student.dims2("embedding loss")
}

/// Symmetric InfoNCE on tape variables: rows are L2-normalised, scaled
/// cosine similarities form the logits and the matching rows are positives.
pub fn infonce_on_tape(tape: &mut Tape, student: Var, teacher: Var, temperature: f64) -> Result<Var> {
    let (b, _) = check_pair_shapes(tape.value(student), tape.value(teacher))?;
    if b < 2 {
        return Err(Error::contract("InfoNCE needs at least two pairs"));
    }
    let s = tape.l2_normalize_rows(student)?;
    let t = tape.l2_normalize_rows(teacher)?;
    let tt = tape.transpose(t)?;
    let sim = tape.matmul(s, tt)?;
    let logits = tape.scale(sim, 1.0 / temperature);
    let forward_dir = tape.log_softmax_rows(logits)?;
    let lt = tape.transpose(logits)?;
    let backward_dir = tape.log_softmax_rows(lt)?;
    let d1 = tape.diag(forward_dir)?;
    let d2 = tape.diag(backward_dir)?;
    let m1 = tape.mean(d1);
    let m2 = tape.mean(d2);
    let both = tape.add(m1, m2)?;
    Ok(tape.scale(both, -0.5))
}

pub fn l1_on_tape(tape: &mut Tape, student: Var, teacher: Var) -> Result<Var> {
    check_pair_shapes(tape.value(student), tape.value(teacher))?;
    let diff = tape.sub(student, teacher)?;
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

pub fn infonce_loss(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(student.clone());
    let t = tape.constant(teacher.clone());
    let l = infonce_on_tape(&mut tape, s, t, temperature)?;
    Ok(tape.value(l).item())
}

pub fn l1_embed_loss(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(student.clone());
    let t = tape.constant(teacher.clone());
    let l = l1_on_tape(&mut tape, s, t)?;
    Ok(tape.value(l).item())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// SHA-256 over parameter names, shapes and exact bits, plus the config.
pub fn params_hash(cfg: &ModelConfig, params: &Params) -> String {
    let mut h = Sha256::new();
    h.update(cfg.to_toml().as_bytes());
    for (name, t) in params {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Teacher graph embedding: 3D mode, atom types and coordinates only.
pub fn teacher_embed(teacher: &Checkpoint, graph: &MolGraph, spd: &SpdMatrix, optimized: &Conformer) -> Result<Tensor> {
    if teacher.config.use_graph_features {
        return Err(Error::contract("teacher must be configured without graph features"));
    }
    Ok(predict(&teacher.params, &teacher.config, graph, spd, Some(optimized), Mode::ThreeD)?.1)
}

/// Student graph embedding on a generated conformer, all channels active.
pub fn student_embed(cfg: &ModelConfig, params: &Params, graph: &MolGraph, spd: &SpdMatrix, generated: &Conformer) -> Result<Tensor> {
    Ok(predict(params, cfg, graph, spd, Some(generated), Mode::Joint)?.1)
}

#[derive(Clone, Debug)]
pub struct DistillPair {
    pub graph: MolGraph,
    pub spd: SpdMatrix,
    pub generated: Conformer,
    pub optimized: Conformer,
    pub target: Option<f64>,
}

impl DistillPair {
    pub fn new(graph: MolGraph, spd: SpdMatrix, generated: Conformer, optimized: Conformer) -> Result<Self> {
        for (what, id) in [("generated", generated.id()), ("optimized", optimized.id())] {
            if id != graph.id() {
                return Err(Error::Pairing(format!("{what} conformer `{id}` paired with molecule `{}`", graph.id())));
            }
        }
        if generated.atomic_numbers() != optimized.atomic_numbers() {
            return Err(Error::Pairing(format!("`{}`: conformers disagree on atoms", graph.id())));
        }
        let target = graph.gap_ev();
        Ok(Self {
            graph,
            spd,
            generated,
            optimized,
            target,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub loss: f64,
    pub mean_cosine: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct DistillReport {
    pub student: Checkpoint,
    /// Epoch 0 is the untrained student.
    pub trace: Vec<TraceRow>,
    pub teacher_hash: String,
}

impl DistillReport {
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("epoch,loss,mean_cosine,lr\n");
        for r in &self.trace {
            s.push_str(&format!("{},{:e},{:.15},{:e}\n", r.epoch, r.loss, r.mean_cosine, r.lr));
        }
        s
    }
}

/// Synthetic corpus: each optimized conformer is paired with a Gaussian
/// perturbation of itself standing in for the generated one.
pub fn noisy_pairs(count: usize, min_atoms: usize, max_atoms: usize, sigma: f64, seed: u64, spd_cap: u32) -> Result<Vec<DistillPair>> {
    let samples = synthetic_dataset(count, min_atoms, max_atoms, seed, spd_cap)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    samples
        .into_iter()
        .map(|s| {
            let optimized = s.conformer.with_modality(Modality::Optimized);
            let generated = add_coordinate_noise(&optimized, sigma, &mut rng)?.with_modality(Modality::Generated);
            DistillPair::new(s.graph, s.spd, generated, optimized)
        })
        .collect()
}

pub fn initial_student(teacher: &Checkpoint, student_cfg: &ModelConfig, init: StudentInit) -> Result<Params> {
    let mut params = init_params(student_cfg, 0.0)?;
    if init == StudentInit::TeacherCopy {
        for (name, t) in &teacher.params {
            match params.get_mut(name) {
                Some(slot) if slot.shape() == t.shape() => *slot = t.clone(),
                _ => {
                    return Err(Error::contract(format!("teacher parameter `{name}` has no matching student slot")));
                }
            }
        }
    }
    zero_graph_feature_params(&mut params);
    Ok(params)
}

fn embedding_loss(tape: &mut Tape, cfg: &DistillConfig, student: Var, teacher: Var) -> Result<Var> {
    match cfg.loss_kind {
        LossKind::Infonce => infonce_on_tape(tape, student, teacher, cfg.temperature),
        LossKind::L1 => l1_on_tape(tape, student, teacher),
    }
}

fn evaluate(pairs: &[DistillPair], teacher_emb: &[Tensor], cfg: &DistillConfig, student_cfg: &ModelConfig, params: &Params) -> Result<(f64, f64)> {
    let embs: Vec<Tensor> = pairs
        .iter()
        .map(|p| student_embed(student_cfg, params, &p.graph, &p.spd, &p.generated))
        .collect::<Result<_>>()?;
    let mean_cos = embs.iter().zip(teacher_emb).map(|(s, t)| cosine(s.data(), t.data())).sum::<f64>() / pairs.len() as f64;
    let mut total = 0.0;
    let mut batches = 0usize;
    for (chunk_s, chunk_t) in embs.chunks(cfg.batch_size).zip(teacher_emb.chunks(cfg.batch_size)) {
        if cfg.loss_kind == LossKind::Infonce && chunk_s.len() < 2 {
            continue;
        }
        let s = stack(chunk_s)?;
        let t = stack(chunk_t)?;
        total += match cfg.loss_kind {
            LossKind::Infonce => infonce_loss(&s, &t, cfg.temperature)?,
            LossKind::L1 => l1_embed_loss(&s, &t)?,
        };
        batches += 1;
    }
    Ok((total / batches.max(1) as f64, mean_cos))
}

fn stack(rows: &[Tensor]) -> Result<Tensor> {
    let f = rows[0].len();
    Tensor::new(vec![rows.len(), f], rows.iter().flat_map(|r| r.data().iter().copied()).collect())
}

/// Trains a student against the frozen teacher. The teacher is hashed
/// before and after; any change aborts with an integrity error.
pub fn distill_run(pairs: &[DistillPair], teacher: &Checkpoint, student_cfg: &ModelConfig, cfg: &DistillConfig) -> Result<DistillReport> {
    cfg.validate()?;
    student_cfg.validate()?;
    if !student_cfg.use_graph_features {
        return Err(Error::contract("student must be configured with graph features"));
    }
    if pairs.is_empty() {
        return Err(Error::contract("no distillation pairs"));
    }
    let hash_before = params_hash(&teacher.config, &teacher.params);
    let teacher_emb: Vec<Tensor> = pairs
        .iter()
        .map(|p| teacher_embed(teacher, &p.graph, &p.spd, &p.optimized))
        .collect::<Result<_>>()?;

    let mut params = initial_student(teacher, student_cfg, cfg.student_init)?;
    let mut opt = Optimizer::new(OptimizerConfig {
        lr: cfg.lr,
        ..OptimizerConfig::default()
    })?;
    let mut sched = PlateauScheduler::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (loss0, cos0) = evaluate(pairs, &teacher_emb, cfg, student_cfg, &params)?;
    let mut trace = vec![TraceRow {
        epoch: 0,
        loss: loss0,
        mean_cosine: cos0,
        lr: sched.current(),
    }];

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=cfg.total_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.loss_kind == LossKind::Infonce && chunk.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let vars = tape.register_all(&params)?;
            let mut rows = Vec::with_capacity(chunk.len());
            let mut preds = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let p = &pairs[k];
                let input = ModelInput {
                    graph: &p.graph,
                    spd: &p.spd,
                    conformer: Some(&p.generated),
                };
                let out = forward(&mut tape, &vars, student_cfg, &input, None, ForwardOptions::inference(Mode::Joint))?;
                rows.push(tape.reshape(out.embedding, &[1, student_cfg.hidden_dim])?);
                preds.push((out.prediction, p.target));
            }
            let s = tape.concat_rows(&rows)?;
            let t = tape.constant(stack(&chunk.iter().map(|&k| teacher_emb[k].clone()).collect::<Vec<_>>())?);
            let mut loss = embedding_loss(&mut tape, cfg, s, t)?;
            if cfg.gap_weight > 0.0 {
                for (pred, target) in preds {
                    let Some(y) = target else { continue };
                    let y = tape.constant(Tensor::new(vec![1], vec![y])?);
                    let d = tape.sub(pred, y)?;
                    let a = tape.abs(d);
                    let a = tape.sum(a);
                    let a = tape.scale(a, cfg.gap_weight / chunk.len() as f64);
                    loss = tape.add(loss, a)?;
                }
            }
            let value = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            if !value.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence {
                    step: epoch,
                    detail: format!("distillation loss {value}"),
                });
            }
            let lr = sched.next_lr();
            opt.step(&mut params, &grads, lr)?;
            epoch_loss += value;
            batches += 1;
        }
        let epoch_loss = epoch_loss / batches.max(1) as f64;
        sched.end_epoch(epoch_loss);
        let (_, mean_cos) = evaluate(pairs, &teacher_emb, cfg, student_cfg, &params)?;
        log::info!("epoch {epoch} loss {epoch_loss:.6} cosine {mean_cos:.6}");
        trace.push(TraceRow {
            epoch,
            loss: epoch_loss,
            mean_cosine: mean_cos,
            lr: sched.current(),
        });
    }

    let hash_after = params_hash(&teacher.config, &teacher.params);
    if hash_after != hash_before {
        return Err(Error::Integrity(format!("teacher changed during the run: {hash_before} -> {hash_after}")));
    }
    Ok(DistillReport {
        student: Checkpoint {
            config: student_cfg.clone(),
            params,
        },
        trace,
        teacher_hash: hash_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_hand_cases() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(l1_embed_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|x| x - 0.25);
        assert!((l1_embed_loss(&a, &b).unwrap() - 0.25).abs() < 1e-15);
        assert!(l1_embed_loss(&a, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn infonce_two_orthonormal_rows() {
        // student rows swapped against the teacher: positives have cosine 0, negatives 1
        let s = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let t = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln() + 1.0;
        assert!((infonce_loss(&s, &t, 1.0).unwrap() - expect).abs() < 1e-14);
        assert!(infonce_loss(&Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1, 2]), 1.0).is_err());
    }

    #[test]
    fn scheduler_warms_up_then_decays_on_plateau() {
        let cfg = DistillConfig {
            lr: 1e-3,
            warmup_steps: 4,
            lr_patience: 2,
            lr_factor: 0.5,
            lr_min: 3e-4,
            ..DistillConfig::default()
        };
        let mut s = PlateauScheduler::new(&cfg);
        let warm: Vec<f64> = (0..5).map(|_| s.next_lr()).collect();
        assert_eq!(warm, [2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3]);
        s.end_epoch(1.0);
        s.end_epoch(1.0);
        assert_eq!(s.current(), 1e-3);
        s.end_epoch(1.5);
        assert_eq!(s.current(), 5e-4);
        s.end_epoch(2.0);
        s.end_epoch(2.0);
        assert_eq!(s.current(), 3e-4);
    }

    #[test]
    fn hash_tracks_every_bit() {
        let cfg = ModelConfig {
            hidden_dim: 4,
            n_heads: 2,
            use_graph_features: false,
            ..ModelConfig::default()
        };
        let mut p = init_params(&cfg, 0.0).unwrap();
        let h = params_hash(&cfg, &p);
        assert_eq!(h.len(), 64);
        let w = &mut p.get_mut("decoder.out").unwrap().data_mut()[0];
        *w = f64::from_bits(w.to_bits() ^ 1);
        assert_ne!(params_hash(&cfg, &p), h);
    }
}
