use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{canonical_order, EncoderVersion, Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::geom::{direction_field_on_tape, Conformer};
use crate::graph2d::{self, MolGraph, SpdMatrix, NODE_TABLES};
use crate::numcore::{ParamVars, Params, Tape, Tensor, Var};
use crate::rgc;

const LN_EPS: f64 = 1e-5;

pub struct ModelInput<'a> {
    pub graph: &'a MolGraph,
    pub spd: &'a SpdMatrix,
    /// Required exactly when the mode uses 3D channels.
    pub conformer: Option<&'a Conformer>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub training: bool,
    /// Seeds dropout masks; unused at inference.
    pub dropout_seed: u64,
}

impl ForwardOptions {
    pub fn inference(mode: Mode) -> Self {
        Self {
            mode,
            training: false,
            dropout_seed: 0,
        }
    }
}

pub struct ForwardOutput {
    /// Scalar prediction, shape `[1]`.
    pub prediction: Var,
    /// Mean-pooled graph embedding, shape `[F]`.
    pub embedding: Var,
}

/// Inference on plain values. In 2D mode the conformer is ignored.
pub fn predict(params: &Params, cfg: &ModelConfig, graph: &MolGraph, spd: &SpdMatrix, conformer: Option<&Conformer>, mode: Mode) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let vars = tape.register_all(params)?;
    let input = ModelInput {
        graph,
        spd,
        conformer: if mode.uses_3d() { conformer } else { None },
    };
    let out = forward(&mut tape, &vars, cfg, &input, None, ForwardOptions::inference(mode))?;
    Ok((tape.value(out.prediction).item(), tape.value(out.embedding).clone()))
}

/// Full forward pass. `positions`, when given, is an `[N, 3]` variable in
/// input atom order that replaces the conformer coordinates, so gradients
/// can flow to it.
pub fn forward(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    input: &ModelInput<'_>,
    positions: Option<Var>,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    let g = input.graph;
    let n = g.n_atoms();
    if n == 0 {
        return Err(Error::contract(format!("{}: molecule has no atoms", g.id())));
    }
    if input.spd.n() != n {
        return Err(Error::contract(format!("{}: SPD matrix covers {} atoms, graph has {n}", g.id(), input.spd.n())));
    }
    match (opts.mode.uses_3d(), input.conformer) {
        (true, None) => return Err(Error::contract(format!("mode {} needs a conformer", opts.mode.as_str()))),
        (false, Some(_)) => return Err(Error::contract("2d mode must not receive a conformer")),
        (_, Some(c)) if c.atomic_numbers() != g.atomic_numbers().as_slice() => {
            return Err(Error::contract(format!("{}: conformer and graph disagree on atoms", g.id())))
        }
        _ => {}
    }
    if !cfg.use_graph_features && opts.mode.uses_2d() {
        return Err(Error::contract("graph-feature channels are disabled in this model; use 3d mode"));
    }

    let perm = canonical_order(g, input.conformer);
    let graph = g.permuted(&perm)?;
    let pos = match input.conformer {
        Some(c) => {
            let raw = match positions {
                Some(p) => {
                    if tape.value(p).shape() != [n, 3] {
                        return Err(Error::Dimension {
                            op: "forward.positions",
                            left: tape.value(p).shape().to_vec(),
                            right: vec![n, 3],
                        });
                    }
                    p
                }
                None => tape.constant(c.positions_tensor()),
            };
            Some(tape.gather_rows(raw, &perm)?)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.dropout_seed);
    let mut drop = Dropout {
        rng: &mut rng,
        training: opts.training,
    };

    let embedded = embed_nodes(tape, vars, cfg, &graph, pos)?;

    // pair biases accumulated as [N·N, heads] then laid out over the token-padded grid
    let h = cfg.n_heads;
    let mut pairs: Option<Var> = None;
    let mut token: Option<Var> = None;
    let accumulate = |tape: &mut Tape, slot: &mut Option<Var>, v: Var| -> Result<()> {
        *slot = Some(match slot.take() {
            None => v,
            Some(prev) => tape.add(prev, v)?,
        });
        Ok(())
    };
    if opts.mode.uses_2d() {
        let spd = input.spd.permuted(&perm)?;
        let table = vars.get("bias.2d.spd")?;
        let spd_bias = graph2d::psi2d_bias_on_tape(tape, &spd, table)?;
        let spd_pairs = heads_to_pairs(tape, spd_bias, n, h)?;
        accumulate(tape, &mut pairs, spd_pairs)?;
        let design = tape.constant(graph2d::bond_design(&graph));
        let bond = tape.matmul(design, vars.get("bias.2d.bond")?)?;
        accumulate(tape, &mut pairs, bond)?;
        accumulate(tape, &mut token, vars.get("bias.2d.token")?)?;
    }
    if let Some(geo) = &embedded.geometry {
        let dist = tape.matmul(geo.rbf, vars.get("bias.3d.rbf")?)?;
        accumulate(tape, &mut pairs, dist)?;
        accumulate(tape, &mut token, vars.get("bias.3d.token")?)?;
    }
    let static_bias = assemble_bias(tape, pairs, token, n, h)?;

    let tok = vars.get("embed.graph_token")?;
    let mut x = tape.concat_rows(&[tok, embedded.x0])?;
    x = drop.apply(tape, x, cfg.dropout.embedding);

    for b in 0..cfg.n_blocks {
        let bias = match &embedded.geometry {
            Some(geo) => {
                let src = vars.get(&format!("block{b}.dihedral.source"))?;
                let dst = vars.get(&format!("block{b}.dihedral.target"))?;
                let d = rgc::dihedral_on_tape(tape, geo.vectors, geo.dirs, src, dst)?;
                let flat = tape.reshape(d, &[n * n, cfg.hidden_dim])?;
                let per_head = tape.matmul(flat, vars.get(&format!("block{b}.dihedral.heads"))?)?;
                let grid = assemble_bias(tape, Some(per_head), None, n, h)?;
                tape.add(static_bias, grid)?
            }
            None => static_bias,
        };
        x = attention_block(tape, vars, cfg, b, x, bias, &mut drop)?;
    }

    let x = tape.layer_norm_rows(x, vars.get("final_ln.gain")?, vars.get("final_ln.shift")?, LN_EPS)?;
    let atoms: Vec<usize> = (1..=n).collect();
    let atom_rows = tape.gather_rows(x, &atoms)?;
    let embedding = tape.mean_rows(atom_rows)?;
    let row = tape.reshape(embedding, &[1, cfg.hidden_dim])?;
    let hid = tape.matmul(row, vars.get("decoder.hidden")?)?;
    let hid = tape.add_row_bias(hid, vars.get("decoder.hidden_bias")?)?;
    let hid = tape.silu(hid);
    let out = tape.matmul(hid, vars.get("decoder.out")?)?;
    let out = tape.add_row_bias(out, vars.get("decoder.out_bias")?)?;
    let prediction = tape.reshape(out, &[1])?;
    Ok(ForwardOutput { prediction, embedding })
}

/// Geometric intermediates shared by the embedding and the attention biases.
pub struct Geometry {
    /// `[N, N, 3]` unit directions.
    pub dirs: Var,
    /// `[N·N, n_rbf]` radial basis expansion of pair distances.
    pub rbf: Var,
    /// `[N, 3, F]` aggregated direction vectors.
    pub vectors: Var,
}

pub struct Embedded {
    /// `[N, F]` node features before the graph token is attached.
    pub x0: Var,
    pub geometry: Option<Geometry>,
}

/// Node features from atom types, categorical graph features and, given
/// positions, the angle and mean radial-basis terms; also the aggregated
/// direction vectors. Atoms are taken in the order given.
pub fn embed_nodes(tape: &mut Tape, vars: &ParamVars, cfg: &ModelConfig, graph: &MolGraph, positions: Option<Var>) -> Result<Embedded> {
    let n = graph.n_atoms();
    let f = cfg.hidden_dim;
    let rows = graph2d::node_feature_rows(graph);
    let mut x = tape.gather_rows(vars.get("embed.atomic")?, &rows[0])?;
    if cfg.use_graph_features {
        let tables: Vec<Var> = NODE_TABLES[1..]
            .iter()
            .map(|(name, _)| vars.get(&format!("embed.graph.{name}")))
            .collect::<Result<_>>()?;
        let tables: [Var; 6] = tables.try_into().expect("six tables");
        let cat = graph2d::psi2d_node_on_tape(tape, graph, &tables)?;
        x = tape.add(x, cat)?;
    }
    let Some(pos) = positions else {
        return Ok(Embedded { x0: x, geometry: None });
    };

    let (dirs, dists) = direction_field_on_tape(tape, pos)?;
    let rbf = rbf_on_tape(tape, dists, cfg.n_rbf, cfg.rbf_max)?;
    let src: Vec<usize> = (0..n * n).map(|k| k / n).collect();
    let scales = match cfg.encoder_version {
        EncoderVersion::V1 => tape.gather_rows(x, &src)?,
        EncoderVersion::V2 => {
            let dst: Vec<usize> = (0..n * n).map(|k| k % n).collect();
            let xs = tape.gather_rows(x, &src)?;
            let xd = tape.gather_rows(x, &dst)?;
            let both = tape.concat_cols(&[xs, xd])?;
            tape.matmul(both, vars.get("embed.edge_concat")?)?
        }
    };
    let scales = tape.reshape(scales, &[n, n, f])?;
    let vectors = rgc::aggregate_on_tape(tape, dirs, scales)?;
    let angle = rgc::angle_on_tape(tape, vectors, vars.get("embed.angle.source")?, vars.get("embed.angle.target")?)?;
    let around = neighbour_mean(tape, rbf, n)?;
    let radial = tape.matmul(around, vars.get("embed.rbf")?)?;
    let x = tape.add(x, angle)?;
    let x = tape.add(x, radial)?;
    Ok(Embedded {
        x0: x,
        geometry: Some(Geometry { dirs, rbf, vectors }),
    })
}

/// Evenly spaced Gaussian centres on `[0, rbf_max]` and their shared width.
pub fn rbf_centres(n_rbf: usize, rbf_max: f64) -> (Vec<f64>, f64) {
    let spacing = if n_rbf > 1 { rbf_max / (n_rbf - 1) as f64 } else { rbf_max };
    let centres = (0..n_rbf).map(|k| k as f64 * spacing).collect();
    (centres, 0.5 / (spacing * spacing))
}

/// `[N, N]` distances to `[N·N, n_rbf]` Gaussian features.
pub fn rbf_on_tape(tape: &mut Tape, dists: Var, n_rbf: usize, rbf_max: f64) -> Result<Var> {
    let d = tape.value(dists);
    let m = d.len();
    let (centres, gamma) = rbf_centres(n_rbf, rbf_max);
    let mut out = Vec::with_capacity(m * n_rbf);
    for &x in d.data() {
        out.extend(centres.iter().map(|c| (-gamma * (x - c) * (x - c)).exp()));
    }
    let value = Tensor::new(vec![m, n_rbf], out)?;
    Ok(tape.custom(
        &[dists],
        value,
        Box::new(move |ctx| {
            let (d, g, out) = (ctx.inputs[0], ctx.grad.data(), ctx.output.data());
            let grad = d
                .data()
                .iter()
                .enumerate()
                .map(|(p, &x)| {
                    (0..n_rbf)
                        .map(|k| g[p * n_rbf + k] * out[p * n_rbf + k] * (-2.0 * gamma * (x - centres[k])))
                        .sum()
                })
                .collect();
            vec![Tensor::new_permissive(d.shape().to_vec(), grad).expect("shape matches")]
        }),
    ))
}

/// `[N·N, K]` pair rows to `[N, K]` means over the other atoms.
pub fn neighbour_mean(tape: &mut Tape, pairs: Var, n: usize) -> Result<Var> {
    let (rows, k) = tape.value(pairs).dims2("neighbour_mean")?;
    if rows != n * n {
        return Err(Error::Dimension {
            op: "neighbour_mean",
            left: vec![rows, k],
            right: vec![n * n, k],
        });
    }
    let inv = if n > 1 { 1.0 / (n - 1) as f64 } else { 0.0 };
    let p = tape.value(pairs).data();
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            for c in 0..k {
                out[i * k + c] += p[(i * n + j) * k + c];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(tape.custom(
        &[pairs],
        Tensor::new(vec![n, k], out)?,
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut grad = vec![0.0; n * n * k];
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    for c in 0..k {
                        grad[(i * n + j) * k + c] = g[i * k + c] * inv;
                    }
                }
            }
            vec![Tensor::new_permissive(vec![n * n, k], grad).expect("shape matches")]
        }),
    ))
}

fn heads_to_pairs(tape: &mut Tape, bias: Var, n: usize, h: usize) -> Result<Var> {
    let flat = tape.reshape(bias, &[h, n * n])?;
    tape.transpose(flat)
}

/// Lays `[N·N, H]` atom-pair biases and a `[1, H]` graph-token bias out on
/// the `[H, N+1, N+1]` attention grid; the token occupies row and column 0.
pub fn assemble_bias(tape: &mut Tape, pairs: Option<Var>, token: Option<Var>, n: usize, h: usize) -> Result<Var> {
    let t = n + 1;
    let mut out = vec![0.0; h * t * t];
    if let Some(p) = pairs {
        let pd = tape.value(p);
        if pd.shape() != [n * n, h] {
            return Err(Error::Dimension {
                op: "assemble_bias",
                left: pd.shape().to_vec(),
                right: vec![n * n, h],
            });
        }
        for head in 0..h {
            for i in 0..n {
                for j in 0..n {
                    out[(head * t + i + 1) * t + j + 1] = pd.data()[(i * n + j) * h + head];
                }
            }
        }
    }
    if let Some(tk) = token {
        let td = tape.value(tk);
        if td.len() != h {
            return Err(Error::Dimension {
                op: "assemble_bias.token",
                left: td.shape().to_vec(),
                right: vec![1, h],
            });
        }
        for head in 0..h {
            for k in 0..t {
                out[(head * t) * t + k] = td.data()[head];
                out[(head * t + k) * t] = td.data()[head];
            }
        }
    }
    let value = Tensor::new(vec![h, t, t], out)?;
    let parents: Vec<Var> = pairs.into_iter().chain(token).collect();
    let has_pairs = pairs.is_some();
    if parents.is_empty() {
        return Ok(tape.constant(value));
    }
    Ok(tape.custom(
        &parents,
        value,
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut grads = Vec::with_capacity(2);
            if has_pairs {
                let mut gp = vec![0.0; n * n * h];
                for head in 0..h {
                    for i in 0..n {
                        for j in 0..n {
                            gp[(i * n + j) * h + head] = g[(head * t + i + 1) * t + j + 1];
                        }
                    }
                }
                grads.push(Tensor::new_permissive(vec![n * n, h], gp).expect("shape matches"));
            }
            if ctx.inputs.len() > grads.len() {
                let shape = ctx.inputs[grads.len()].shape().to_vec();
                let gt = (0..h)
                    .map(|head| {
                        let row: f64 = (0..t).map(|k| g[(head * t) * t + k]).sum();
                        let col: f64 = (1..t).map(|k| g[(head * t + k) * t]).sum();
                        row + col
                    })
                    .collect();
                grads.push(Tensor::new_permissive(shape, gt).expect("shape matches"));
            }
            grads
        }),
    ))
}

/// Inverted dropout and stochastic depth driven by one seeded stream.
pub struct Dropout<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub training: bool,
}

impl Dropout<'_> {
    pub fn apply(&mut self, tape: &mut Tape, x: Var, rate: f64) -> Var {
        if !self.training || rate == 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = tape.value(x).shape().to_vec();
        let mask: Vec<f64> = (0..tape.value(x).len())
            .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask).expect("finite mask"));
        tape.mul(x, mask).expect("mask matches input shape")
    }

    /// Drops the whole residual branch with probability `rate`.
    pub fn branch(&mut self, tape: &mut Tape, x: Var, rate: f64) -> Var {
        if !self.training || rate == 0.0 {
            return x;
        }
        let factor = if self.rng.random::<f64>() < rate { 0.0 } else { 1.0 / (1.0 - rate) };
        tape.scale(x, factor)
    }
}

/// Pre-norm block: `x + Attn(LN(x))`, then `+ FFN(LN(·))`. `bias` is the
/// `[H, T, T]` grid added to every head's scaled dot products.
pub fn attention_block(tape: &mut Tape, vars: &ParamVars, cfg: &ModelConfig, block: usize, x: Var, bias: Var, drop: &mut Dropout<'_>) -> Result<Var> {
    let p = |s: &str| vars.get(&format!("block{block}.{s}"));
    let d = cfg.head_dim();
    let xn = tape.layer_norm_rows(x, p("ln_attn.gain")?, p("ln_attn.shift")?, LN_EPS)?;
    let q = tape.matmul(xn, p("query")?)?;
    let k = tape.matmul(xn, p("key")?)?;
    let v = tape.matmul(xn, p("value")?)?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, head * d, d)?;
        let kh = tape.slice_cols(k, head * d, d)?;
        let vh = tape.slice_cols(v, head * d, d)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let bh = tape.select_first(bias, head)?;
        let scores = tape.add(scores, bh)?;
        let attn = tape.softmax_rows(scores)?;
        let attn = drop.apply(tape, attn, cfg.dropout.attention);
        heads.push(tape.matmul(attn, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let out = tape.matmul(cat, p("out")?)?;
    let out = drop.branch(tape, out, cfg.dropout.drop_path);
    let x = tape.add(x, out)?;

    let xn = tape.layer_norm_rows(x, p("ln_ffn.gain")?, p("ln_ffn.shift")?, LN_EPS)?;
    let hid = tape.matmul(xn, p("ffn.in")?)?;
    let hid = tape.add_row_bias(hid, p("ffn.in_bias")?)?;
    let hid = tape.silu(hid);
    let hid = drop.apply(tape, hid, cfg.dropout.activation);
    let out = tape.matmul(hid, p("ffn.out")?)?;
    let out = tape.add_row_bias(out, p("ffn.out_bias")?)?;
    let out = drop.branch(tape, out, cfg.dropout.drop_path);
    tape.add(x, out)
}

/// `[H, N, N]` distance bias from radial features and a `[n_rbf, H]` mix.
pub fn distance_bias(dists: &Tensor, mix: &Tensor, rbf_max: f64) -> Result<Tensor> {
    let n = dists.shape()[0];
    let (n_rbf, h) = mix.dims2("distance_bias")?;
    let mut tape = Tape::new();
    let d = tape.constant(dists.clone());
    let w = tape.constant(mix.clone());
    let rbf = rbf_on_tape(&mut tape, d, n_rbf, rbf_max)?;
    let pairs = tape.matmul(rbf, w)?;
    let t = tape.transpose(pairs)?;
    let out = tape.reshape(t, &[h, n, n])?;
    Ok(tape.value(out).clone())
}
