//! Seeded random geometries for tests, benchmarks and toy corpora.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::geom::{add, norm, scale, sub, Conformer, Modality, Vec3};
use crate::graph2d::{load_molgraph, Atom, Bond, MolGraph, MolRecord, MAX_HYDROGENS};

/// Closest approach allowed between generated atoms (Å).
pub const MIN_GAP: f64 = 0.9;

/// Grows a branched, bond-length-like point cloud one atom at a time.
///
/// Atom `k` depends only on atoms `0..k` and the generator stream, so the
/// first `m` atoms of an `n`-atom draw equal an `m`-atom draw with the same
/// seed. Returns the positions and, for each atom after the first, the
/// index of the atom it was attached to.
pub fn grow_positions<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Vec<Vec3>, Vec<usize>) {
    let mut positions: Vec<Vec3> = Vec::with_capacity(n);
    let mut parents = Vec::with_capacity(n.saturating_sub(1));
    if n == 0 {
        return (positions, parents);
    }
    positions.push([0.0; 3]);
    while positions.len() < n {
        let anchor = rng.random_range(0..positions.len());
        let length = rng.random_range(1.0..1.6);
        let dir = random_unit(rng);
        let candidate = add(positions[anchor], scale(dir, length));
        if positions.iter().all(|&p| norm(sub(candidate, p)) >= MIN_GAP) {
            positions.push(candidate);
            parents.push(anchor);
        }
    }
    (positions, parents)
}

pub fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v: Vec3 = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = norm(v);
        if n > 1e-6 {
            return scale(v, 1.0 / n);
        }
    }
}

/// Carbon-only conformer from [`grow_positions`].
pub fn random_conformer(n: usize, seed: u64) -> Conformer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (positions, _) = grow_positions(n, &mut rng);
    Conformer::new(format!("rand-{n}-{seed}"), vec![6; n], positions, Modality::Optimized)
        .expect("generated atoms respect the minimum gap")
}

/// Conformer with mixed elements drawn from H, C, N, O.
pub fn random_mixed_conformer(n: usize, seed: u64) -> Conformer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (positions, _) = grow_positions(n, &mut rng);
    let z = (0..n).map(|_| [1, 6, 7, 8][rng.random_range(0..4)]).collect();
    Conformer::new(format!("mixed-{n}-{seed}"), z, positions, Modality::Optimized)
        .expect("generated atoms respect the minimum gap")
}

/// Tree-shaped molecule over C, N and O: bonds follow the attachment
/// parents of [`grow_positions`] and hydrogens fill the remaining valence.
pub fn synthetic_molecule(n: usize, seed: u64) -> (MolGraph, Conformer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (positions, parents) = grow_positions(n, &mut rng);
    let z: Vec<u32> = (0..n).map(|_| [6, 6, 6, 7, 8][rng.random_range(0..5)]).collect();
    let bonds: Vec<Bond> = parents
        .iter()
        .enumerate()
        .map(|(k, &p)| Bond {
            i: p,
            j: k + 1,
            dir: 0,
            bond_type: 0,
            in_ring: false,
        })
        .collect();
    let mut degree = vec![0u32; n];
    for b in &bonds {
        degree[b.i] += 1;
        degree[b.j] += 1;
    }
    let atoms = z
        .iter()
        .zip(&degree)
        .map(|(&z, &d)| {
            let valence: u32 = match z {
                6 => 4,
                7 => 3,
                _ => 2,
            };
            Atom {
                z,
                aromatic: false,
                charge: 0,
                chirality: 2,
                degree: d,
                num_h: valence.saturating_sub(d).min(MAX_HYDROGENS),
                hybridization: 3,
            }
        })
        .collect();
    let id = format!("syn-{n}-{seed}");
    let graph = load_molgraph(MolRecord {
        id: id.clone(),
        atoms,
        bonds,
        gap_ev: None,
    })
    .expect("generated records are valid");
    let conformer = Conformer::new(id, z, positions, Modality::Optimized).expect("generated atoms respect the minimum gap");
    (graph, conformer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_property() {
        let small = random_conformer(8, 11);
        let big = random_conformer(16, 11);
        assert_eq!(small.positions(), &big.positions()[..8]);
    }
}
