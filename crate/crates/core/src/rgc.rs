//! Runtime geometry calculation.
//!
//! Angle sums around a node and dihedral sums around an edge are obtained
//! from inner products of per-node aggregated direction vectors
//! `v⃗_i = Σ_j s_ij r̂_ij`, instead of enumerating triplets and quadruplets:
//!
//! * `⟨v⃗_i, v⃗_i⟩ = Σ_j Σ_k s_ij s_ik cos θ_jik`
//! * `⟨Rej_{r̂_ij} v⃗_i, Rej_{r̂_ji} v⃗_j⟩ = Σ_k Σ_l s_ik s_jl ‖rej_k‖ ‖rej_l‖ cos φ_kijl`
//!
//! With a fully connected graph the fast path is `O(N² F)` overall, while the
//! explicit oracles below are `O(N³)` and `O(N⁴)`.
//!
//! Channel mixing matrices act on the channel axis from the right:
//! `(W v⃗)[a, :] = v⃗[a, :] · W`. They carry no bias, which keeps the mixed
//! features equivariant.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::geom::{self, cross, dot, norm, DirectionField, Vec3, VecFeat};
use crate::numcore::{Tape, Tensor, Var};
use crate::synth;

/// Absolute tolerance for angle features against [`angle_oracle`].
pub const ANGLE_ORACLE_TOL: f64 = 1e-12;
/// Absolute tolerance for dihedral features against [`dihedral_oracle`].
pub const DIHEDRAL_ORACLE_TOL: f64 = 1e-11;

/// Sum of `terms` in an order fixed by their values, so any relabeling of
/// the neighbours yields the same floating-point result.
fn order_free_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

fn check_pair_tensor(t: &Tensor, n: usize, op: &'static str) -> Result<usize> {
    match t.shape() {
        [a, b, f] if *a == n && *b == n => Ok(*f),
        other => Err(Error::Dimension {
            op,
            left: other.to_vec(),
            right: vec![n, n, 0],
        }),
    }
}

/// `[N, N, F]` tensor of ones: the plain unit-vector sum.
pub fn unit_scales(n: usize, channels: usize) -> Tensor {
    Tensor::ones(&[n, n, channels])
}

/// `v⃗_i[:, f] = Σ_{j≠i} per_edge_scale[i][j][f] · r̂_ij`.
pub fn aggregate_vectors(df: &DirectionField, per_edge_scale: &Tensor) -> Result<VecFeat> {
    let n = df.n_atoms();
    let f = check_pair_tensor(per_edge_scale, n, "aggregate_vectors")?;
    VecFeat::new(aggregate_raw(&df.dirs_tensor(), per_edge_scale, n, f))
}

fn aggregate_raw(dirs: &Tensor, scales: &Tensor, n: usize, f: usize) -> Tensor {
    let d = dirs.data();
    let s = scales.data();
    let mut out = vec![0.0; n * 3 * f];
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        for a in 0..3 {
            for c in 0..f {
                terms.clear();
                terms.extend(
                    (0..n)
                        .filter(|&j| j != i)
                        .map(|j| s[(i * n + j) * f + c] * d[(i * n + j) * 3 + a]),
                );
                out[(i * 3 + a) * f + c] = order_free_sum(&mut terms);
            }
        }
    }
    Tensor::from_parts(vec![n, 3, f], out)
}

fn check_mix(w: &Tensor, f: usize, op: &'static str) -> Result<()> {
    if w.shape() != [f, f] {
        return Err(Error::Dimension {
            op,
            left: w.shape().to_vec(),
            right: vec![f, f],
        });
    }
    Ok(())
}

/// Applies a channel-mixing matrix to every node of a `[N, 3, F]` block.
pub fn mix_channels(v: &VecFeat, w: &Tensor) -> Result<VecFeat> {
    let (n, f) = (v.n_nodes(), v.channels());
    check_mix(w, f, "mix_channels")?;
    let flat = v.tensor().reshape(&[n * 3, f])?.matmul(w)?;
    VecFeat::new(flat.reshape(&[n, 3, f])?)
}

/// `out[i][f] = ⟨(W_as v⃗_i)[:, f], (W_at v⃗_i)[:, f]⟩`.
pub fn angle_feature(v: &VecFeat, was: &Tensor, wat: &Tensor) -> Result<Tensor> {
    let a = mix_channels(v, was)?;
    let b = mix_channels(v, wat)?;
    Ok(spatial_inner(a.tensor(), b.tensor()))
}

fn spatial_inner(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, f) = (a.shape()[0], a.shape()[2]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * f];
    for i in 0..n {
        for c in 0..f {
            out[i * f + c] = (0..3)
                .map(|ax| ad[(i * 3 + ax) * f + c] * bd[(i * 3 + ax) * f + c])
                .sum();
        }
    }
    Tensor::from_parts(vec![n, f], out)
}

/// `out[i][j][f] = ⟨(W_ds Rej_{r̂_ij} v⃗_i)[:, f], (W_dt Rej_{r̂_ji} v⃗_j)[:, f]⟩`,
/// zero on the diagonal. Mixing commutes with rejection (one acts on
/// channels, the other on space) and is applied first.
pub fn dihedral_feature(v: &VecFeat, df: &DirectionField, wds: &Tensor, wdt: &Tensor) -> Result<Tensor> {
    if v.n_nodes() != df.n_atoms() {
        return Err(Error::Dimension {
            op: "dihedral_feature",
            left: v.tensor().shape().to_vec(),
            right: vec![df.n_atoms()],
        });
    }
    let a = mix_channels(v, wds)?;
    let b = mix_channels(v, wdt)?;
    Ok(dihedral_pairs(a.tensor(), b.tensor(), &df.dirs_tensor()))
}

/// Rejected inner products of two mixed `[N, 3, F]` blocks about every
/// pair axis. Only `r̂_ij` is read: `r̂_ji` is its exact negation and the
/// rejection does not depend on the axis sign.
fn dihedral_pairs(a: &Tensor, b: &Tensor, dirs: &Tensor) -> Tensor {
    let (n, f) = (a.shape()[0], a.shape()[2]);
    let d = dirs.data();
    let mut out = vec![0.0; n * n * f];
    let mut ra = vec![0.0; 3 * f];
    let mut rb = vec![0.0; 3 * f];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let o = (i * n + j) * 3;
            let axis = [d[o], d[o + 1], d[o + 2]];
            ra.copy_from_slice(&a.data()[i * 3 * f..(i + 1) * 3 * f]);
            rb.copy_from_slice(&b.data()[j * 3 * f..(j + 1) * 3 * f]);
            geom::reject_block(&mut ra, f, axis);
            geom::reject_block(&mut rb, f, axis);
            for c in 0..f {
                out[(i * n + j) * f + c] = (0..3).map(|ax| ra[ax * f + c] * rb[ax * f + c]).sum();
            }
        }
    }
    Tensor::from_parts(vec![n, n, f], out)
}

/// Brute-force angle sums: `Σ_{j≠i} Σ_{k≠i} r̂_ij · r̂_ik`, `O(N³)`.
pub fn angle_oracle(df: &DirectionField) -> Tensor {
    let n = df.n_atoms();
    let out = (0..n)
        .map(|i| {
            let mut total = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                for k in (0..n).filter(|&k| k != i) {
                    total += dot(df.dir(i, j), df.dir(i, k));
                }
            }
            total
        })
        .collect();
    Tensor::from_parts(vec![n], out)
}

/// Brute-force dihedral sums over all `k–i–j–l` quadruplets, `O(N⁴)`.
///
/// Every term is assembled from its geometric pieces: the sines of the two
/// bond angles at the axis (`‖a × u‖`) and the cosine of the torsion angle
/// between the planes `(k, i, j)` and `(i, j, l)`.
pub fn dihedral_oracle(df: &DirectionField) -> Tensor {
    let n = df.n_atoms();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let axis = df.dir(i, j);
            let mut total = 0.0;
            for k in (0..n).filter(|&k| k != i && k != j) {
                // plane normal of (k, i, j): (i - k) × (j - i)
                let n1 = cross(neg(df.dir(i, k)), axis);
                let sin_k = norm(n1);
                for l in (0..n).filter(|&l| l != i && l != j) {
                    let n2 = cross(axis, df.dir(j, l));
                    let sin_l = norm(n2);
                    if sin_k == 0.0 || sin_l == 0.0 {
                        continue;
                    }
                    let cos_phi = dot(n1, n2) / (sin_k * sin_l);
                    total += sin_k * sin_l * cos_phi;
                }
            }
            out[i * n + j] = total;
        }
    }
    Tensor::from_parts(vec![n, n], out)
}

fn neg(v: Vec3) -> Vec3 {
    [-v[0], -v[1], -v[2]]
}

/// Channel-mixing matrices of the angle and dihedral features.
#[derive(Clone, Debug)]
pub struct RgcWeights {
    pub was: Tensor,
    pub wat: Tensor,
    pub wds: Tensor,
    pub wdt: Tensor,
}

impl RgcWeights {
    pub fn identity(channels: usize) -> Self {
        let i = Tensor::eye(channels);
        Self {
            was: i.clone(),
            wat: i.clone(),
            wds: i.clone(),
            wdt: i,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RgcFeatures {
    /// `[N, F]` node angle terms.
    pub angle_scalar: Tensor,
    /// `[N, N, F]` edge dihedral terms.
    pub dihedral_scalar: Tensor,
    pub agg_vec: VecFeat,
}

pub fn rgc_features(df: &DirectionField, per_edge_scale: &Tensor, weights: &RgcWeights) -> Result<RgcFeatures> {
    let agg_vec = aggregate_vectors(df, per_edge_scale)?;
    Ok(RgcFeatures {
        angle_scalar: angle_feature(&agg_vec, &weights.was, &weights.wat)?,
        dihedral_scalar: dihedral_feature(&agg_vec, df, &weights.wds, &weights.wdt)?,
        agg_vec,
    })
}

/// Bias-free two-layer SiLU MLPs of the node and edge updates. Without
/// biases `φ(0) = 0`, so zero geometric input leaves the features as they
/// were.
#[derive(Clone, Debug)]
pub struct VisIsParams {
    pub node_in: Tensor,
    pub node_out: Tensor,
    pub edge_in: Tensor,
    pub edge_out: Tensor,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn mlp(x: &Tensor, w_in: &Tensor, w_out: &Tensor) -> Result<Tensor> {
    x.matmul(w_in)?.map(silu).matmul(w_out)
}

/// Residual node and edge updates from the intersecting-node angle terms
/// and the intersecting-edge dihedral terms.
pub fn visis_update(h: &Tensor, f_edge: &Tensor, rgc: &RgcFeatures, params: &VisIsParams) -> Result<(Tensor, Tensor)> {
    let n = rgc.agg_vec.n_nodes();
    let node_msg = mlp(&rgc.angle_scalar, &params.node_in, &params.node_out)?;
    let h_new = h.zip_map(&node_msg, "visis_update.h", |a, b| a + b)?;

    let fc = rgc.dihedral_scalar.shape()[2];
    let flat = rgc.dihedral_scalar.reshape(&[n * n, fc])?;
    let mut edge_msg = mlp(&flat, &params.edge_in, &params.edge_out)?;
    let fe = edge_msg.shape()[1];
    for i in 0..n {
        edge_msg.data_mut()[(i * n + i) * fe..(i * n + i + 1) * fe].fill(0.0);
    }
    let edge_msg = edge_msg.reshape(f_edge.shape())?;
    let f_new = f_edge.zip_map(&edge_msg, "visis_update.f", |a, b| a + b)?;
    Ok((h_new, f_new))
}

// ---- differentiable versions ----------------------------------------------

/// [`aggregate_vectors`] on a tape: `dirs` is `[N, N, 3]`, `scales` `[N, N, F]`.
pub fn aggregate_on_tape(tape: &mut Tape, dirs: Var, scales: Var) -> Result<Var> {
    let n = tape.value(dirs).shape()[0];
    let f = check_pair_tensor(tape.value(scales), n, "aggregate_on_tape")?;
    let out = aggregate_raw(tape.value(dirs), tape.value(scales), n, f);
    Ok(tape.custom(
        &[dirs, scales],
        out,
        Box::new(move |ctx| {
            let (d, s, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let mut gd = vec![0.0; n * n * 3];
            let mut gs = vec![0.0; n * n * f];
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    for a in 0..3 {
                        let dij = d[(i * n + j) * 3 + a];
                        let mut acc = 0.0;
                        for c in 0..f {
                            let gia = g[(i * 3 + a) * f + c];
                            acc += gia * s[(i * n + j) * f + c];
                            gs[(i * n + j) * f + c] += gia * dij;
                        }
                        gd[(i * n + j) * 3 + a] = acc;
                    }
                }
            }
            vec![
                Tensor::from_parts(vec![n, n, 3], gd),
                Tensor::from_parts(vec![n, n, f], gs),
            ]
        }),
    ))
}

/// [`mix_channels`] on a tape.
pub fn mix_on_tape(tape: &mut Tape, v: Var, w: Var) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let [n, 3, f] = shape[..] else {
        return Err(Error::Dimension {
            op: "mix_on_tape",
            left: shape,
            right: vec![0, 3, 0],
        });
    };
    check_mix(tape.value(w), f, "mix_on_tape")?;
    let flat = tape.reshape(v, &[n * 3, f])?;
    let mixed = tape.matmul(flat, w)?;
    tape.reshape(mixed, &[n, 3, f])
}

/// [`angle_feature`] on a tape.
pub fn angle_on_tape(tape: &mut Tape, v: Var, was: Var, wat: Var) -> Result<Var> {
    let a = mix_on_tape(tape, v, was)?;
    let b = mix_on_tape(tape, v, wat)?;
    let out = spatial_inner(tape.value(a), tape.value(b));
    Ok(tape.custom(
        &[a, b],
        out,
        Box::new(|ctx| {
            let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
            let f = a.shape()[2];
            let g = ctx.grad.data();
            let mut ga = a.clone();
            let mut gb = b.clone();
            for (idx, (x, y)) in ga.data_mut().iter_mut().zip(gb.data_mut().iter_mut()).enumerate() {
                let i = idx / (3 * f);
                let c = idx % f;
                let gi = g[i * f + c];
                let (av, bv) = (*x, *y);
                *x = gi * bv;
                *y = gi * av;
            }
            vec![ga, gb]
        }),
    ))
}

/// [`dihedral_feature`] on a tape, from the `[N, N, 3]` direction variable.
pub fn dihedral_on_tape(tape: &mut Tape, v: Var, dirs: Var, wds: Var, wdt: Var) -> Result<Var> {
    let a = mix_on_tape(tape, v, wds)?;
    let b = mix_on_tape(tape, v, wdt)?;
    let out = dihedral_pairs(tape.value(a), tape.value(b), tape.value(dirs));
    Ok(tape.custom(
        &[a, b, dirs],
        out,
        Box::new(|ctx| {
            let (a, b, d) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
            let n = ctx.inputs[0].shape()[0];
            let f = ctx.inputs[0].shape()[2];
            let g = ctx.grad.data();
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            let mut gd = vec![0.0; d.len()];
            // F(A, B, u) = ⟨A - u(u·A), B - u(u·B)⟩ = A·B + (s - 2) pa pb, s = u·u
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    let o = (i * n + j) * 3;
                    let u = [d[o], d[o + 1], d[o + 2]];
                    let s = dot(u, u);
                    for c in 0..f {
                        let gij = g[(i * n + j) * f + c];
                        if gij == 0.0 {
                            continue;
                        }
                        let ai = |ax: usize| a[(i * 3 + ax) * f + c];
                        let bj = |ax: usize| b[(j * 3 + ax) * f + c];
                        let pa: f64 = (0..3).map(|ax| u[ax] * ai(ax)).sum();
                        let pb: f64 = (0..3).map(|ax| u[ax] * bj(ax)).sum();
                        for ax in 0..3 {
                            ga[(i * 3 + ax) * f + c] += gij * (bj(ax) + (s - 2.0) * u[ax] * pb);
                            gb[(j * 3 + ax) * f + c] += gij * (ai(ax) + (s - 2.0) * u[ax] * pa);
                            gd[o + ax] += gij * ((s - 2.0) * (ai(ax) * pb + bj(ax) * pa) + 2.0 * u[ax] * pa * pb);
                        }
                    }
                }
            }
            vec![
                Tensor::from_parts(ctx.inputs[0].shape().to_vec(), ga),
                Tensor::from_parts(ctx.inputs[1].shape().to_vec(), gb),
                Tensor::from_parts(ctx.inputs[2].shape().to_vec(), gd),
            ]
        }),
    ))
}

// ---- scaling benchmark ------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub fast_ns: u128,
    pub angle_oracle_ns: u128,
    pub dihedral_oracle_ns: u128,
    pub angle_max_diff: f64,
    pub dihedral_max_diff: f64,
}

#[derive(Clone, Debug)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    pub fast_slope: f64,
    pub angle_oracle_slope: f64,
    pub dihedral_oracle_slope: f64,
}

impl BenchTable {
    /// CSV with a trailing comment line carrying the fitted slopes.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("N,fast_ns,angle_oracle_ns,dihedral_oracle_ns\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.n, r.fast_ns, r.angle_oracle_ns, r.dihedral_oracle_ns));
        }
        s.push_str(&format!(
            "# slopes fast={:.4} angle_oracle={:.4} dihedral_oracle={:.4}\n",
            self.fast_slope, self.angle_oracle_slope, self.dihedral_oracle_slope
        ));
        s
    }
}

/// Cross-check tolerance for an `n`-atom instance. Beyond 16 atoms the
/// sums hold `O(N²)` terms whose magnitude also grows with `N`, so the
/// rounding bound grows cubically.
pub fn bench_tolerances(n: usize) -> (f64, f64) {
    let growth = ((n as f64 / 16.0).powi(3)).max(1.0);
    (ANGLE_ORACLE_TOL * growth, DIHEDRAL_ORACLE_TOL * growth)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.max(1.0).ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

fn median(mut v: Vec<u128>) -> u128 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Fast-path features with unit scales and identity mixing.
pub fn fast_path(df: &DirectionField) -> Result<(Tensor, Tensor)> {
    let n = df.n_atoms();
    let w = Tensor::eye(1);
    let v = aggregate_vectors(df, &unit_scales(n, 1))?;
    let angle = angle_feature(&v, &w, &w)?.reshape(&[n])?;
    let dihedral = dihedral_feature(&v, df, &w, &w)?.reshape(&[n, n])?;
    Ok((angle, dihedral))
}

/// Times the fast path and both oracles on prefix-seeded conformers.
pub fn scaling_benchmark(sizes: &[usize], repeats: usize, seed: u64) -> Result<BenchTable> {
    if sizes.len() < 4 || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("benchmark needs at least 4 strictly increasing sizes"));
    }
    if sizes[sizes.len() - 1] < 8 * sizes[0] {
        return Err(Error::contract("benchmark sizes must span at least a factor of 8"));
    }
    if repeats == 0 {
        return Err(Error::contract("benchmark needs at least one repeat"));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let conf = synth::random_conformer(n, seed);
        let df = geom::direction_field(&conf)?;
        let mut fast_t = Vec::new();
        let mut angle_t = Vec::new();
        let mut dihedral_t = Vec::new();
        let mut fast = None;
        let mut angle_ref = None;
        let mut dihedral_ref = None;
        for _ in 0..repeats {
            let t0 = Instant::now();
            fast = Some(std::hint::black_box(fast_path(&df)?));
            fast_t.push(t0.elapsed().as_nanos());
            let t0 = Instant::now();
            angle_ref = Some(std::hint::black_box(angle_oracle(&df)));
            angle_t.push(t0.elapsed().as_nanos());
            let t0 = Instant::now();
            dihedral_ref = Some(std::hint::black_box(dihedral_oracle(&df)));
            dihedral_t.push(t0.elapsed().as_nanos());
        }
        let (angle, dihedral) = fast.expect("repeats > 0");
        rows.push(BenchRow {
            n,
            fast_ns: median(fast_t),
            angle_oracle_ns: median(angle_t),
            dihedral_oracle_ns: median(dihedral_t),
            angle_max_diff: angle.max_abs_diff(&angle_ref.expect("repeats > 0")),
            dihedral_max_diff: dihedral.max_abs_diff(&dihedral_ref.expect("repeats > 0")),
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let slope = |pick: fn(&BenchRow) -> u128| loglog_slope(&xs, &rows.iter().map(|r| pick(r) as f64).collect::<Vec<_>>());
    Ok(BenchTable {
        fast_slope: slope(|r| r.fast_ns),
        angle_oracle_slope: slope(|r| r.angle_oracle_ns),
        dihedral_oracle_slope: slope(|r| r.dihedral_oracle_ns),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{direction_field, Conformer, Modality};

    fn conf(positions: Vec<Vec3>) -> Conformer {
        let n = positions.len();
        Conformer::new("t", vec![6; n], positions, Modality::Optimized).unwrap()
    }

    #[test]
    fn single_neighbour_and_cancellation() {
        let df = direction_field(&conf(vec![[0.0; 3], [0.0, 2.0, 0.0]])).unwrap();
        let v = aggregate_vectors(&df, &unit_scales(2, 1)).unwrap();
        assert_eq!([v.get(0, 0, 0), v.get(0, 1, 0), v.get(0, 2, 0)], [0.0, 1.0, 0.0]);

        let df = direction_field(&conf(vec![[0.0; 3], [1.5, 0.0, 0.0], [-1.5, 0.0, 0.0]])).unwrap();
        let v = aggregate_vectors(&df, &unit_scales(3, 2)).unwrap();
        for a in 0..3 {
            for c in 0..2 {
                assert_eq!(v.get(0, a, c), 0.0);
            }
        }
    }

    #[test]
    fn angle_feature_hand_cases() {
        let i = Tensor::eye(1);
        let df = direction_field(&conf(vec![[0.0; 3], [1.0, 0.0, 0.0]])).unwrap();
        let v = aggregate_vectors(&df, &unit_scales(2, 1)).unwrap();
        assert!((angle_feature(&v, &i, &i).unwrap().data()[0] - 1.0).abs() < 1e-15);

        // two neighbours at 90° from atom 0
        let df = direction_field(&conf(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.3, 0.0]])).unwrap();
        let v = aggregate_vectors(&df, &unit_scales(3, 1)).unwrap();
        let a = angle_feature(&v, &i, &i).unwrap();
        assert!((a.data()[0] - 2.0).abs() < 1e-15);
        assert!((angle_oracle(&df).data()[0] - 2.0).abs() < 1e-15);

        let zero = Tensor::zeros(&[1, 1]);
        assert!(angle_feature(&v, &zero, &i).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn equilateral_triangle_angles() {
        let h = 3f64.sqrt() / 2.0;
        let df = direction_field(&conf(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.5, h, 0.0]])).unwrap();
        for &x in angle_oracle(&df).data() {
            assert!((x - 3.0).abs() < 1e-14, "{x}");
        }
    }

    #[test]
    fn collinear_chain_has_no_dihedral() {
        let df = direction_field(&conf(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.2, 0.0, 0.0]])).unwrap();
        let v = aggregate_vectors(&df, &unit_scales(3, 1)).unwrap();
        let i = Tensor::eye(1);
        let d = dihedral_feature(&v, &df, &i, &i).unwrap();
        assert_eq!(d.at(&[0, 2, 0]), 0.0);
        assert_eq!(dihedral_oracle(&df).at(&[0, 2]), 0.0);
    }

    #[test]
    fn lone_axis_neighbour_is_rejected_away() {
        // atom 0 sees only atom 1 after masking the others: v⃗_0 = r̂_01
        let df = direction_field(&synth::random_conformer(5, 3)).unwrap();
        let mut s = Tensor::zeros(&[5, 5, 1]);
        s.set(&[0, 1, 0], 1.0);
        let v = aggregate_vectors(&df, &s).unwrap();
        let i = Tensor::eye(1);
        let d = dihedral_feature(&v, &df, &i, &i).unwrap();
        assert!(d.at(&[0, 1, 0]).abs() < 1e-15);
    }

    #[test]
    fn planar_four_atoms_match_oracle() {
        let df = direction_field(&conf(vec![
            [0.0; 3],
            [1.4, 0.0, 0.0],
            [-0.5, 1.1, 0.0],
            [1.9, -1.0, 0.0],
        ]))
        .unwrap();
        let (_, fast) = fast_path(&df).unwrap();
        let oracle = dihedral_oracle(&df);
        assert!(fast.max_abs_diff(&oracle) < DIHEDRAL_ORACLE_TOL);
        // k=2 and l=3 lie on opposite sides of the 0–1 axis: trans term
        assert!(oracle.at(&[0, 1]) < 0.0);
    }

    #[test]
    fn three_atoms_match_oracle() {
        let df = direction_field(&conf(vec![[0.0; 3], [1.2, 0.1, 0.0], [0.3, 1.0, 0.4]])).unwrap();
        let (_, fast) = fast_path(&df).unwrap();
        assert!(fast.max_abs_diff(&dihedral_oracle(&df)) < DIHEDRAL_ORACLE_TOL);
    }

    #[test]
    fn zero_geometry_leaves_features_unchanged() {
        let n = 3;
        let f = 2;
        let rgc = RgcFeatures {
            angle_scalar: Tensor::zeros(&[n, f]),
            dihedral_scalar: Tensor::zeros(&[n, n, f]),
            agg_vec: VecFeat::zeros(n, f),
        };
        let p = VisIsParams {
            node_in: Tensor::full(&[f, 4], 0.3),
            node_out: Tensor::full(&[4, f], -0.7),
            edge_in: Tensor::full(&[f, 4], 0.2),
            edge_out: Tensor::full(&[4, 3], 0.5),
        };
        let h = Tensor::full(&[n, f], 1.25);
        let e = Tensor::full(&[n, n, 3], -0.5);
        let (h2, e2) = visis_update(&h, &e, &rgc, &p).unwrap();
        assert_eq!(h2, h);
        assert_eq!(e2, e);
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [16.0, 32.0, 64.0, 128.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 7.0 * x.powi(3)).collect();
        assert!((loglog_slope(&xs, &ys) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn benchmark_rejects_narrow_sizes() {
        assert!(scaling_benchmark(&[4, 8, 12, 16], 1, 0).is_err());
        assert!(scaling_benchmark(&[4, 8, 16], 1, 0).is_err());
    }
}
