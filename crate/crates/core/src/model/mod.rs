//! Geometry-aware graph transformer: categorical node embeddings, aggregated
//! direction vectors, angle node terms, distance and dihedral attention
//! biases, pre-norm attention blocks and a pooled MLP readout.

mod checkpoint;
pub mod forward;
mod train;

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Conformer;
use crate::graph2d::{self, MolGraph, BOND_FEATURE_ROWS, NODE_TABLES};
use crate::numcore::{Params, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use forward::{forward, predict, ForwardOptions, ForwardOutput, ModelInput};
pub use train::{
    add_coordinate_noise, baseline_l1, evaluate_l1, synthetic_dataset, train_toy, train_toy_from, Optimizer, OptimizerConfig, Sample,
    ToyReport, TrainConfig,
};

/// Which structural channels are active for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
    Joint,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::TwoD, Mode::ThreeD, Mode::Joint];

    pub fn uses_2d(self) -> bool {
        self != Mode::ThreeD
    }

    pub fn uses_3d(self) -> bool {
        self != Mode::TwoD
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::TwoD => "2d",
            Mode::ThreeD => "3d",
            Mode::Joint => "joint",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::schema("mode", format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVersion {
    /// Per-edge scales are the source-node features.
    V1,
    /// Per-edge scales are a linear map of source and target features.
    V2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutConfig {
    pub embedding: f64,
    pub activation: f64,
    pub attention: f64,
    pub drop_path: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            embedding: 0.0,
            activation: 0.1,
            attention: 0.1,
            drop_path: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    /// FFN width as a multiple of `hidden_dim`.
    pub ffn_mult: usize,
    pub decoder_dim: usize,
    pub n_rbf: usize,
    /// Largest Gaussian centre of the distance basis (Å).
    pub rbf_max: f64,
    pub spd_cap: u32,
    /// Probabilities of the 2D, 3D and joint modes.
    pub mode_probs: [f64; 3],
    pub noise_scale: f64,
    pub encoder_version: EncoderVersion,
    /// Off for encoders that see atom types and coordinates only.
    pub use_graph_features: bool,
    pub dropout: DropoutConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            hidden_dim: 64,
            n_heads: 4,
            ffn_mult: 2,
            decoder_dim: 64,
            n_rbf: 16,
            rbf_max: 8.0,
            spd_cap: graph2d::DEFAULT_SPD_CAP,
            mode_probs: [0.2, 0.2, 0.6],
            noise_scale: 0.2,
            encoder_version: EncoderVersion::V2,
            use_graph_features: true,
            dropout: DropoutConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::schema(field, msg));
        if self.n_blocks == 0 {
            return bad("n_blocks", "at least one block is required".into());
        }
        if self.hidden_dim == 0 || self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return bad(
                "hidden_dim",
                format!("{} is not a positive multiple of n_heads = {}", self.hidden_dim, self.n_heads),
            );
        }
        if self.ffn_mult == 0 || self.decoder_dim == 0 {
            return bad("ffn_mult", "FFN and decoder widths must be positive".into());
        }
        if self.n_rbf == 0 {
            return bad("n_rbf", "need at least one radial basis function".into());
        }
        if !(self.rbf_max > 0.0 && self.rbf_max.is_finite()) {
            return bad("rbf_max", format!("{} is not a positive distance", self.rbf_max));
        }
        if self.spd_cap == 0 {
            return bad("spd_cap", "cap must be at least 1".into());
        }
        if self.mode_probs.iter().any(|&p| !(p >= 0.0)) || (self.mode_probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return bad("mode_probs", format!("{:?} is not a probability vector", self.mode_probs));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale", format!("{} is negative or non-finite", self.noise_scale));
        }
        let d = &self.dropout;
        for (name, p) in [
            ("dropout.embedding", d.embedding),
            ("dropout.activation", d.activation),
            ("dropout.attention", d.attention),
            ("dropout.drop_path", d.drop_path),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(name, format!("rate {p} outside [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }
}

/// Categorical draw over the configured mode probabilities.
pub fn sample_mode<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Mode {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (mode, &p) in Mode::ALL.iter().zip(&cfg.mode_probs) {
        acc += p;
        if u < acc {
            return *mode;
        }
    }
    // rounding can leave `acc` a hair under 1; fall back to the last mode with mass
    *Mode::ALL
        .iter()
        .zip(&cfg.mode_probs)
        .rev()
        .find(|(_, &p)| p > 0.0)
        .map(|(m, _)| m)
        .unwrap_or(&Mode::Joint)
}

/// Names of the parameters fed by the 2D graph features.
pub fn is_graph_feature_param(name: &str) -> bool {
    name.starts_with("embed.graph.") || name.starts_with("bias.2d.")
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("finite samples")
}

/// Seeded parameter set for `cfg`. Matrices draw from `N(0, 1/fan_in)`,
/// normalisation gains start at one and biases at zero; the decoder output
/// starts near `output_bias` with small weights.
pub fn init_params(cfg: &ModelConfig, output_bias: f64) -> Result<Params> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let f = cfg.hidden_dim;
    let h = cfg.n_heads;
    let mut p = Params::new();
    let mut put = |name: String, t: Tensor| {
        p.insert(name, t);
    };
    let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

    put("embed.atomic".into(), normal_tensor(&[NODE_TABLES[0].1, f], 1.0, &mut rng));
    put("embed.graph_token".into(), normal_tensor(&[1, f], 1.0, &mut rng));
    if cfg.use_graph_features {
        for (name, rows) in &NODE_TABLES[1..] {
            put(format!("embed.graph.{name}"), normal_tensor(&[*rows, f], 0.5, &mut rng));
        }
        put("bias.2d.spd".into(), normal_tensor(&[cfg.spd_cap as usize + 2, h], 0.1, &mut rng));
        put("bias.2d.bond".into(), normal_tensor(&[BOND_FEATURE_ROWS, h], 0.1, &mut rng));
        put("bias.2d.token".into(), normal_tensor(&[1, h], 0.1, &mut rng));
    }
    // each distance lights up one or two basis functions, so this projection
    // is scaled like an embedding table rather than by fan-in
    put("embed.rbf".into(), normal_tensor(&[cfg.n_rbf, f], 1.0, &mut rng));
    put("embed.angle.source".into(), normal_tensor(&[f, f], std(f), &mut rng));
    put("embed.angle.target".into(), normal_tensor(&[f, f], std(f), &mut rng));
    if cfg.encoder_version == EncoderVersion::V2 {
        put("embed.edge_concat".into(), normal_tensor(&[2 * f, f], std(2 * f), &mut rng));
    }
    put("bias.3d.rbf".into(), normal_tensor(&[cfg.n_rbf, h], std(cfg.n_rbf), &mut rng));
    put("bias.3d.token".into(), normal_tensor(&[1, h], 0.1, &mut rng));

    let ff = cfg.ffn_mult * f;
    for b in 0..cfg.n_blocks {
        let name = |s: &str| format!("block{b}.{s}");
        put(name("ln_attn.gain"), Tensor::ones(&[f]));
        put(name("ln_attn.shift"), Tensor::zeros(&[f]));
        for w in ["query", "key", "value", "out"] {
            put(name(w), normal_tensor(&[f, f], std(f), &mut rng));
        }
        put(name("ln_ffn.gain"), Tensor::ones(&[f]));
        put(name("ln_ffn.shift"), Tensor::zeros(&[f]));
        put(name("ffn.in"), normal_tensor(&[f, ff], std(f), &mut rng));
        put(name("ffn.in_bias"), Tensor::zeros(&[ff]));
        put(name("ffn.out"), normal_tensor(&[ff, f], std(ff), &mut rng));
        put(name("ffn.out_bias"), Tensor::zeros(&[f]));
        put(name("dihedral.source"), normal_tensor(&[f, f], std(f), &mut rng));
        put(name("dihedral.target"), normal_tensor(&[f, f], std(f), &mut rng));
        put(name("dihedral.heads"), normal_tensor(&[f, h], std(f), &mut rng));
    }
    put("final_ln.gain".into(), Tensor::ones(&[f]));
    put("final_ln.shift".into(), Tensor::zeros(&[f]));
    put("decoder.hidden".into(), normal_tensor(&[f, cfg.decoder_dim], std(f), &mut rng));
    put("decoder.hidden_bias".into(), Tensor::zeros(&[cfg.decoder_dim]));
    put("decoder.out".into(), normal_tensor(&[cfg.decoder_dim, 1], 0.01, &mut rng));
    put("decoder.out_bias".into(), Tensor::scalar(output_bias).reshape(&[1])?);
    Ok(p)
}

/// Sets every graph-feature parameter to zero, so the 2D channels add
/// exact zeros until trained.
pub fn zero_graph_feature_params(params: &mut Params) {
    for (name, t) in params.iter_mut() {
        if is_graph_feature_param(name) {
            t.data_mut().fill(0.0);
        }
    }
}

/// Atom order used inside the model: new atom `k` is input atom `perm[k]`.
///
/// With coordinates in play atoms are sorted by atomic number, then
/// position, which is a total order for valid conformers. Without them
/// the key is the refined graph colour; atoms the refinement cannot tell
/// apart keep their input order.
pub fn canonical_order(g: &MolGraph, conformer: Option<&Conformer>) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..g.n_atoms()).collect();
    match conformer {
        Some(c) => {
            let z = c.atomic_numbers();
            let pos = c.positions();
            perm.sort_by(|&a, &b| {
                z[a].cmp(&z[b]).then_with(|| {
                    (0..3)
                        .map(|k| pos[a][k].total_cmp(&pos[b][k]))
                        .find(|o| *o != Ordering::Equal)
                        .unwrap_or(Ordering::Equal)
                })
            });
        }
        None => {
            let colors = graph2d::refined_colors(g, g.n_atoms());
            perm.sort_by_key(|&a| colors[a]);
        }
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthetic_molecule;

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ModelConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.n_heads = 4;
        cfg.mode_probs = [0.5, 0.5, 0.1];
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::from_toml("hidden_dim = 8\nbogus = 1\n").is_err());
    }

    #[test]
    fn degenerate_mode_probs() {
        let cfg = ModelConfig {
            mode_probs: [1.0, 0.0, 0.0],
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| sample_mode(&cfg, &mut rng) == Mode::TwoD));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        assert_eq!(init_params(&cfg, 1.0).unwrap(), init_params(&cfg, 1.0).unwrap());
        let other = ModelConfig { seed: 1, ..cfg.clone() };
        assert_ne!(init_params(&cfg, 1.0).unwrap(), init_params(&other, 1.0).unwrap());
        let teacher = ModelConfig {
            use_graph_features: false,
            ..cfg
        };
        assert!(init_params(&teacher, 0.0).unwrap().keys().all(|k| !is_graph_feature_param(k)));
    }

    #[test]
    fn canonical_order_ignores_input_labels() {
        let (g, c) = synthetic_molecule(9, 4);
        let perm = [3, 1, 4, 0, 8, 5, 2, 7, 6];
        let (gp, cp) = (g.permuted(&perm).unwrap(), c.permuted(&perm).unwrap());
        let a: Vec<usize> = canonical_order(&g, Some(&c));
        let b: Vec<usize> = canonical_order(&gp, Some(&cp));
        let ids_a: Vec<usize> = a.to_vec();
        let ids_b: Vec<usize> = b.iter().map(|&k| perm[k]).collect();
        assert_eq!(ids_a, ids_b);
    }
}
