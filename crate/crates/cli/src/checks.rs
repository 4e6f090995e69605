//! Symmetry properties checked by `check-equiv` on user-supplied conformers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visgeo_core::geom::{direction_field, reject, sample_rotation, Conformer, Rotation, Vec3};
use visgeo_core::graph2d::{load_molgraph, shortest_paths, Atom, MolGraph, MolRecord};
use visgeo_core::model::{init_params, predict, Mode, ModelConfig};
use visgeo_core::numcore::{Params, Tensor};
use visgeo_core::rgc::{aggregate_vectors, angle_feature, dihedral_feature, RgcWeights};
use visgeo_core::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Rejection that projects out a fixed lab axis instead of the given one.
    BrokenRejection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub max_deviation: f64,
    pub tolerance: f64,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.max_deviation <= self.tolerance
    }
}

const PROPERTIES: [(&str, f64); 8] = [
    ("direction_field_equivariance", 1e-12),
    ("vecfeat_equivariance", 1e-12),
    ("vector_rejection_equivariance", 1e-12),
    ("angle_invariance", 1e-12),
    ("dihedral_invariance", 1e-12),
    ("rgc_permutation_equivariance", 0.0),
    ("model_rigid_motion_invariance", 1e-9),
    ("model_permutation_invariance", 0.0),
];

fn rejection(fault: Option<Fault>) -> impl Fn(&Tensor, Vec3) -> Result<Tensor> {
    move |v, axis| match fault {
        None => reject(v, axis),
        Some(Fault::BrokenRejection) => reject(v, [0.0, 0.0, 1.0]),
    }
}

/// Graph with the conformer's atoms and no bonds.
pub fn bare_graph(c: &Conformer) -> Result<MolGraph> {
    let atoms = c
        .atomic_numbers()
        .iter()
        .map(|&z| Atom {
            z,
            aromatic: false,
            charge: 0,
            chirality: 0,
            degree: 0,
            num_h: 0,
            hybridization: 0,
        })
        .collect();
    load_molgraph(MolRecord {
        id: c.id().to_string(),
        atoms,
        bonds: vec![],
        gap_ev: None,
    })
}

/// Relative max difference, floored at 1 so tiny features compare absolutely.
fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
    a.max_abs_diff(b) / scale
}

/// Rotates each channel column of a `[3, F]` block.
fn rotate_block(t: &Tensor, r: &Rotation) -> Tensor {
    let f = t.shape()[1];
    let mut out = t.clone();
    for c in 0..f {
        let v = r.apply([t.at(&[0, c]), t.at(&[1, c]), t.at(&[2, c])]);
        for (axis, x) in v.into_iter().enumerate() {
            out.set(&[axis, c], x);
        }
    }
    out
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for k in (1..n).rev() {
        perm.swap(k, rng.random_range(0..=k));
    }
    perm
}

fn loud_params(cfg: &ModelConfig) -> Result<Params> {
    let mut p = init_params(cfg, 0.5)?;
    // decoder boosted so the output reacts to its inputs
    if let Some(w) = p.get_mut("decoder.out") {
        for x in w.data_mut() {
            *x *= 100.0;
        }
    }
    Ok(p)
}

fn check_one(
    c: &Conformer,
    graph: &MolGraph,
    cfg: &ModelConfig,
    params: &Params,
    n_trials: usize,
    seed: u64,
    fault: Option<Fault>,
) -> Result<[f64; 8]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 8];
    let n = c.n_atoms();
    let channels = 4;
    let scales = Tensor::new(vec![n, n, channels], (0..n * n * channels).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let weights = RgcWeights::identity(channels);
    let reject_fn = rejection(fault);
    let spd = shortest_paths(graph, cfg.spd_cap)?;

    let df = direction_field(c)?;
    let v = aggregate_vectors(&df, &scales)?;
    let angle = angle_feature(&v, &weights.was, &weights.wat)?;
    let dihedral = dihedral_feature(&v, &df, &weights.wds, &weights.wdt)?;
    let (pred, _) = predict(params, cfg, graph, &spd, Some(c), Mode::Joint)?;

    for _ in 0..n_trials {
        let r = sample_rotation(&mut rng);
        let t = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let moved = c.transformed(&r, t)?;
        let df2 = direction_field(&moved)?;
        for i in 0..n {
            for j in 0..n {
                let a = r.apply(df.dir(i, j));
                let b = df2.dir(i, j);
                let d = (0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max);
                worst[0] = worst[0].max(d);
            }
        }
        let v2 = aggregate_vectors(&df2, &scales)?;
        worst[1] = worst[1].max(rel_diff(v.rotated(&r).tensor(), v2.tensor()));

        for i in 0..n {
            let axis = df.dir(i, (i + 1) % n);
            let rejected = reject_fn(&v.node(i), axis)?;
            let rejected_moved = reject_fn(&v2.node(i), r.apply(axis))?;
            worst[2] = worst[2].max(rel_diff(&rotate_block(&rejected, &r), &rejected_moved));
        }

        worst[3] = worst[3].max(rel_diff(&angle, &angle_feature(&v2, &weights.was, &weights.wat)?));
        worst[4] = worst[4].max(rel_diff(&dihedral, &dihedral_feature(&v2, &df2, &weights.wds, &weights.wdt)?));

        let (p2, _) = predict(params, cfg, graph, &spd, Some(&moved), Mode::Joint)?;
        worst[6] = worst[6].max((pred - p2).abs());

        let perm = shuffled(n, &mut rng);
        let pc = c.permuted(&perm)?;
        let pdf = direction_field(&pc)?;
        let pscales = Tensor::new(
            vec![n, n, channels],
            (0..n * n * channels)
                .map(|k| scales.at(&[perm[k / (n * channels)], perm[(k / channels) % n], k % channels]))
                .collect(),
        )?;
        let pv = aggregate_vectors(&pdf, &pscales)?;
        let pangle = angle_feature(&pv, &weights.was, &weights.wat)?;
        let pdih = dihedral_feature(&pv, &pdf, &weights.wds, &weights.wdt)?;
        let f = angle.shape()[1];
        for a in 0..n {
            for ch in 0..f {
                worst[5] = worst[5].max((pangle.at(&[a, ch]) - angle.at(&[perm[a], ch])).abs());
            }
            for b in 0..n {
                for ch in 0..f {
                    worst[5] = worst[5].max((pdih.at(&[a, b, ch]) - dihedral.at(&[perm[a], perm[b], ch])).abs());
                }
            }
        }
        let pg = graph.permuted(&perm)?;
        let pspd = shortest_paths(&pg, cfg.spd_cap)?;
        let (pp, _) = predict(params, cfg, &pg, &pspd, Some(&pc), Mode::Joint)?;
        worst[7] = worst[7].max((pp - pred).abs());
    }
    Ok(worst)
}

/// Runs every property on every conformer. Work is split over `threads`
/// workers; each conformer has its own seed so results do not depend on
/// the split.
pub fn check_equivariance(
    conformers: &[(Conformer, MolGraph)],
    cfg: &ModelConfig,
    n_trials: usize,
    seed: u64,
    threads: usize,
    fault: Option<Fault>,
) -> Result<Vec<PropertyResult>> {
    let params = loud_params(cfg)?;
    let per_conformer: Vec<Result<[f64; 8]>> = std::thread::scope(|scope| {
        let chunk = conformers.len().div_ceil(threads.max(1)).max(1);
        let handles: Vec<_> = conformers
            .chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                let params = &params;
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(k, (c, g))| check_one(c, g, cfg, params, n_trials, seed.wrapping_add((ci * chunk + k) as u64), fault))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut worst = [0.0f64; 8];
    for r in per_conformer {
        for (w, x) in worst.iter_mut().zip(r?) {
            *w = w.max(x);
        }
    }
    Ok(PROPERTIES
        .iter()
        .zip(worst)
        .map(|(&(name, tolerance), max_deviation)| PropertyResult {
            name,
            max_deviation,
            tolerance,
        })
        .collect())
}

pub fn report_csv(results: &[PropertyResult]) -> String {
    let mut s = String::from("property,max_deviation,tolerance,status\n");
    for r in results {
        s.push_str(&format!(
            "{},{:e},{:e},{}\n",
            r.name,
            r.max_deviation,
            r.tolerance,
            if r.passed() { "pass" } else { "fail" }
        ));
    }
    s
}
