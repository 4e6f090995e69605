//! Elementary 3D geometry: conformers, pairwise direction fields, the
//! channel-wise tensor product, vector rejection and SO(3) sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

pub type Vec3 = [f64; 3];

/// Atoms closer than this are treated as coincident.
pub const MIN_SEPARATION: f64 = 1e-6;

/// Tolerance on `‖axis‖ = 1` accepted by [`reject`].
pub const UNIT_AXIS_TOL: f64 = 1e-9;

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, c: f64) -> Vec3 {
    [a[0] * c, a[1] * c, a[2] * c]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Optimized,
    Generated,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Optimized => "optimized",
            Modality::Generated => "generated",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimized" => Ok(Modality::Optimized),
            "generated" => Ok(Modality::Generated),
            other => Err(Error::schema("modality", format!("unknown modality `{other}`"))),
        }
    }
}

/// Atom positions (Å) and atomic numbers of one molecule.
#[derive(Clone, Debug, PartialEq)]
pub struct Conformer {
    id: String,
    atomic_numbers: Vec<u32>,
    positions: Vec<Vec3>,
    modality: Modality,
}

impl Conformer {
    pub fn new(
        id: impl Into<String>,
        atomic_numbers: Vec<u32>,
        positions: Vec<Vec3>,
        modality: Modality,
    ) -> Result<Self> {
        if atomic_numbers.is_empty() {
            return Err(Error::contract("conformer needs at least one atom"));
        }
        if atomic_numbers.len() != positions.len() {
            return Err(Error::Dimension {
                op: "conformer",
                left: vec![atomic_numbers.len()],
                right: vec![positions.len(), 3],
            });
        }
        if let Some(i) = atomic_numbers.iter().position(|&z| z == 0) {
            return Err(Error::schema("z", format!("atom {i} has atomic number 0")));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite coordinate"));
        }
        check_separation(&positions)?;
        Ok(Self {
            id: id.into(),
            atomic_numbers,
            positions,
            modality,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn n_atoms(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn atomic_numbers(&self) -> &[u32] {
        &self.atomic_numbers
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn with_positions(&self, positions: Vec<Vec3>) -> Result<Self> {
        Self::new(self.id.clone(), self.atomic_numbers.clone(), positions, self.modality)
    }

    /// Positions as an `[N, 3]` tensor.
    pub fn positions_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.n_atoms(), 3],
            self.positions.iter().flatten().copied().collect(),
        )
    }

    /// Applies `x ↦ R x + t` to every atom.
    pub fn transformed(&self, rotation: &Rotation, translation: Vec3) -> Result<Self> {
        let positions = self
            .positions
            .iter()
            .map(|&p| add(rotation.apply(p), translation))
            .collect();
        self.with_positions(positions)
    }

    /// Relabels atoms so that new atom `k` is old atom `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n_atoms())?;
        Self::new(
            self.id.clone(),
            perm.iter().map(|&k| self.atomic_numbers[k]).collect(),
            perm.iter().map(|&k| self.positions[k]).collect(),
            self.modality,
        )
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&k| k >= n || std::mem::replace(&mut seen[k], true)) {
        return Err(Error::contract(format!("not a permutation of 0..{n}: {perm:?}")));
    }
    Ok(())
}

fn check_separation(positions: &[Vec3]) -> Result<()> {
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            let distance = norm(sub(positions[j], positions[i]));
            if distance < MIN_SEPARATION {
                return Err(Error::DegenerateGeometry { i, j, distance });
            }
        }
    }
    Ok(())
}

/// Unit vectors `r̂_ij` and distances for every ordered atom pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionField {
    n: usize,
    unit_dirs: Vec<Vec3>,
    dists: Vec<f64>,
}

impl DirectionField {
    pub fn n_atoms(&self) -> usize {
        self.n
    }

    /// `r̂_ij`, pointing from atom `i` to atom `j`; zero when `i == j`.
    pub fn dir(&self, i: usize, j: usize) -> Vec3 {
        self.unit_dirs[i * self.n + j]
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.dists[i * self.n + j]
    }

    /// `[N, N, 3]` tensor of unit directions.
    pub fn dirs_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.n, self.n, 3],
            self.unit_dirs.iter().flatten().copied().collect(),
        )
    }

    /// `[N, N]` distance matrix.
    pub fn dists_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.n, self.n], self.dists.clone())
    }
}

pub fn direction_field(c: &Conformer) -> Result<DirectionField> {
    direction_field_from_positions(c.positions())
}

/// Each unordered pair is evaluated once for `i < j`; the reverse direction
/// is the exact negation.
pub fn direction_field_from_positions(positions: &[Vec3]) -> Result<DirectionField> {
    let n = positions.len();
    let mut unit_dirs = vec![[0.0; 3]; n * n];
    let mut dists = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sub(positions[j], positions[i]);
            let r = norm(d);
            if !(r >= MIN_SEPARATION) {
                return Err(Error::DegenerateGeometry { i, j, distance: r });
            }
            let u = [d[0] / r, d[1] / r, d[2] / r];
            unit_dirs[i * n + j] = u;
            unit_dirs[j * n + i] = [-u[0], -u[1], -u[2]];
            dists[i * n + j] = r;
            dists[j * n + i] = r;
        }
    }
    Ok(DirectionField { n, unit_dirs, dists })
}

fn positions_from_tensor(t: &Tensor) -> Result<Vec<Vec3>> {
    match t.shape() {
        [_, 3] => Ok(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()),
        other => Err(Error::Dimension {
            op: "positions",
            left: other.to_vec(),
            right: vec![0, 3],
        }),
    }
}

/// Records `[N, N, 3]` unit directions and `[N, N]` distances of an
/// `[N, 3]` position variable.
pub fn direction_field_on_tape(tape: &mut Tape, positions: Var) -> Result<(Var, Var)> {
    let pos = positions_from_tensor(tape.value(positions))?;
    let df = direction_field_from_positions(&pos)?;
    let n = df.n;

    let dirs = tape.custom(
        &[positions],
        df.dirs_tensor(),
        Box::new(move |ctx| {
            let u = ctx.output.data();
            let g = ctx.grad.data();
            let p = ctx.inputs[0].data();
            let mut gp = vec![0.0; n * 3];
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let o = (i * n + j) * 3;
                    let r = (0..3).map(|a| (p[j * 3 + a] - p[i * 3 + a]).powi(2)).sum::<f64>().sqrt();
                    let ug: f64 = (0..3).map(|a| u[o + a] * g[o + a]).sum();
                    for a in 0..3 {
                        let gd = (g[o + a] - u[o + a] * ug) / r;
                        gp[j * 3 + a] += gd;
                        gp[i * 3 + a] -= gd;
                    }
                }
            }
            vec![Tensor::from_parts(vec![n, 3], gp)]
        }),
    );
    let dir_values = df.dirs_tensor();
    let dists = tape.custom(
        &[positions],
        df.dists_tensor(),
        Box::new(move |ctx| {
            let u = dir_values.data();
            let g = ctx.grad.data();
            let mut gp = vec![0.0; n * 3];
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let gij = g[i * n + j];
                    for a in 0..3 {
                        let gd = gij * u[(i * n + j) * 3 + a];
                        gp[j * 3 + a] += gd;
                        gp[i * 3 + a] -= gd;
                    }
                }
            }
            vec![Tensor::from_parts(vec![n, 3], gp)]
        }),
    );
    Ok((dirs, dists))
}

/// Per-node equivariant features of shape `[N, 3, F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VecFeat(Tensor);

impl VecFeat {
    pub fn new(values: Tensor) -> Result<Self> {
        match values.shape() {
            [_, 3, _] => Ok(Self(values)),
            other => Err(Error::Dimension {
                op: "vecfeat",
                left: other.to_vec(),
                right: vec![0, 3, 0],
            }),
        }
    }

    pub fn zeros(n: usize, channels: usize) -> Self {
        Self(Tensor::zeros(&[n, 3, channels]))
    }

    pub fn n_nodes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn get(&self, i: usize, axis: usize, f: usize) -> f64 {
        self.0.data()[(i * 3 + axis) * self.channels() + f]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// The `[3, F]` block of node `i`.
    pub fn node(&self, i: usize) -> Tensor {
        let f = self.channels();
        Tensor::from_parts(vec![3, f], self.0.data()[i * 3 * f..(i + 1) * 3 * f].to_vec())
    }

    /// Applies `R` to the spatial axis of every node and channel.
    pub fn rotated(&self, rotation: &Rotation) -> Self {
        let (n, f) = (self.n_nodes(), self.channels());
        let mut out = self.0.clone();
        for i in 0..n {
            for c in 0..f {
                let v = [self.get(i, 0, c), self.get(i, 1, c), self.get(i, 2, c)];
                let rv = rotation.apply(v);
                for a in 0..3 {
                    out.data_mut()[(i * 3 + a) * f + c] = rv[a];
                }
            }
        }
        Self(out)
    }
}

/// Channel-wise tensor product `out[a][f] = v[a] · s[f]`.
pub fn tensor_product(s: &[f64], v: Vec3) -> Tensor {
    let f = s.len();
    let mut out = vec![0.0; 3 * f];
    for a in 0..3 {
        for (c, &sv) in s.iter().enumerate() {
            out[a * f + c] = v[a] * sv;
        }
    }
    Tensor::from_parts(vec![3, f], out)
}

/// Removes the component along the unit `axis` from every channel of a
/// `[3, F]` block.
pub fn reject(v: &Tensor, axis: Vec3) -> Result<Tensor> {
    let f = match v.shape() {
        [3, f] => *f,
        other => {
            return Err(Error::Dimension {
                op: "reject",
                left: other.to_vec(),
                right: vec![3, 0],
            })
        }
    };
    let len = norm(axis);
    if (len - 1.0).abs() > UNIT_AXIS_TOL {
        return Err(Error::contract(format!("rejection axis has norm {len}")));
    }
    let mut out = v.clone();
    reject_block(out.data_mut(), f, axis);
    Ok(out)
}

/// In-place rejection on a flat `[3, F]` block; the axis is assumed unit.
pub(crate) fn reject_block(block: &mut [f64], f: usize, axis: Vec3) {
    for c in 0..f {
        let proj = block[c] * axis[0] + block[f + c] * axis[1] + block[2 * f + c] * axis[2];
        for a in 0..3 {
            block[a * f + c] -= proj * axis[a];
        }
    }
}

/// Proper rotation stored as a row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation([[f64; 3]; 3]);

impl Rotation {
    pub fn identity() -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Rotation of a unit quaternion `(w, x, y, z)`; the input is normalised.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        Self([
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ])
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.0
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        dot(m[0], cross(m[1], m[2]))
    }

    /// `max |RᵀR − I|` over entries.
    pub fn orthogonality_error(&self) -> f64 {
        let m = &self.0;
        let mut worst: f64 = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let col_dot: f64 = (0..3).map(|k| m[k][a] * m[k][b]).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((col_dot - target).abs());
            }
        }
        worst
    }
}

/// Uniformly distributed rotation drawn from a seeded generator, via a
/// normalised 4D Gaussian quaternion. `fixed_identity` short-circuits to
/// the identity for harness debugging.
pub fn random_rotation(seed: u64, fixed_identity: bool) -> Rotation {
    if fixed_identity {
        return Rotation::identity();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_rotation(&mut rng)
}

pub fn sample_rotation<R: rand::Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        if q.iter().map(|v| v * v).sum::<f64>() > 1e-12 {
            return Rotation::from_quaternion(q);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conf(positions: Vec<Vec3>) -> Conformer {
        let n = positions.len();
        Conformer::new("t", vec![6; n], positions, Modality::Optimized).unwrap()
    }

    #[test]
    fn axis_aligned_pair() {
        let df = direction_field(&conf(vec![[0.0; 3], [1.0, 0.0, 0.0]])).unwrap();
        assert_eq!(df.dir(0, 1), [1.0, 0.0, 0.0]);
        assert_eq!(df.dir(1, 0), [-1.0, -0.0, -0.0]);
        assert_eq!(df.dist(0, 1), 1.0);
        assert_eq!(df.dir(0, 0), [0.0; 3]);
    }

    #[test]
    fn coincident_atoms_name_the_pair() {
        let err = Conformer::new(
            "x",
            vec![1, 1, 1],
            vec![[0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 5e-7]],
            Modality::Generated,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateGeometry { i: 1, j: 2, .. }), "{err}");
    }

    #[test]
    fn empty_conformer_is_rejected() {
        assert!(Conformer::new("e", vec![], vec![], Modality::Optimized).is_err());
    }

    #[test]
    fn tensor_product_cases() {
        let t = tensor_product(&[1.0, 1.0], [0.0, 0.0, 1.0]);
        assert_eq!(t.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        let z = tensor_product(&[0.0, 0.0, 0.0], [0.3, -2.0, 1.0]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reject_hand_cases() {
        let v = Tensor::new(vec![3, 1], vec![1.0, 1.0, 0.0]).unwrap();
        let r = reject(&v, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(r.data(), &[0.0, 1.0, 0.0]);

        let parallel = Tensor::new(vec![3, 1], vec![0.0, 0.0, -2.5]).unwrap();
        assert_eq!(reject(&parallel, [0.0, 0.0, 1.0]).unwrap().data(), &[0.0, 0.0, 0.0]);

        let perp = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(reject(&perp, [1.0, 0.0, 0.0]).unwrap(), perp);
    }

    #[test]
    fn reject_requires_unit_axis() {
        let v = Tensor::zeros(&[3, 1]);
        assert!(matches!(reject(&v, [2.0, 0.0, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_flag_and_orthonormality() {
        assert_eq!(random_rotation(42, true), Rotation::identity());
        for seed in 0..50 {
            let r = random_rotation(seed, false);
            assert!(r.orthogonality_error() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
            for col in 0..3 {
                let n: f64 = (0..3).map(|k| r.matrix()[k][col].powi(2)).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }
}
