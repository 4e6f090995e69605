//! 2D molecular graphs: categorical atom and bond features, degree and
//! shortest-path encodings.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

pub const MAX_ATOMIC_NUMBER: u32 = 118;
pub const CHARGE_RANGE: i32 = 5;
pub const MAX_HYDROGENS: u32 = 8;
/// Degrees above this share the last embedding row.
pub const DEGREE_CAP: u32 = 10;
pub const DEFAULT_SPD_CAP: u32 = 20;

/// Chirality tags.
pub const CHIRALITY: [&str; 4] = ["CW", "CCW", "unspecified", "other"];
/// Hybridization vocabulary; code 1 (SP) extends the usual five.
pub const HYBRIDIZATION: [&str; 6] = ["S", "SP", "SP2", "SP3", "SP3D", "SP3D2"];
pub const BOND_TYPE: [&str; 4] = ["single", "double", "triple", "aromatic"];
/// Bond stereo direction, kept as an opaque small enum.
pub const BOND_DIR: [&str; 4] = ["none", "begin-wedge", "begin-dash", "other"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub z: u32,
    pub aromatic: bool,
    pub charge: i32,
    pub chirality: u32,
    pub degree: u32,
    pub num_h: u32,
    pub hybridization: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub dir: u32,
    #[serde(rename = "type")]
    pub bond_type: u32,
    pub in_ring: bool,
}

/// One line of the molecule JSONL format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MolRecord {
    pub id: String,
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    pub gap_ev: Option<f64>,
}

/// Validated molecular graph. Bonds are stored with `i < j`, sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct MolGraph {
    id: String,
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    gap_ev: Option<f64>,
}

fn check_code(field: &str, value: u32, vocab: usize) -> Result<()> {
    if (value as usize) < vocab {
        Ok(())
    } else {
        Err(Error::schema(field, format!("code {value} outside 0..{vocab}")))
    }
}

pub fn load_molgraph(record: MolRecord) -> Result<MolGraph> {
    let n = record.atoms.len();
    for (k, a) in record.atoms.iter().enumerate() {
        if a.z == 0 || a.z > MAX_ATOMIC_NUMBER {
            return Err(Error::schema(format!("atoms[{k}].z"), format!("atomic number {} out of range", a.z)));
        }
        if a.charge.abs() > CHARGE_RANGE {
            return Err(Error::schema(format!("atoms[{k}].charge"), format!("charge {} outside [-5, 5]", a.charge)));
        }
        if a.num_h > MAX_HYDROGENS {
            return Err(Error::schema(format!("atoms[{k}].num_h"), format!("{} hydrogens", a.num_h)));
        }
        check_code(&format!("atoms[{k}].chirality"), a.chirality, CHIRALITY.len())?;
        check_code(&format!("atoms[{k}].hybridization"), a.hybridization, HYBRIDIZATION.len())?;
    }
    let mut seen = BTreeSet::new();
    let mut bonds = Vec::with_capacity(record.bonds.len());
    for (k, b) in record.bonds.into_iter().enumerate() {
        if b.i >= n || b.j >= n {
            return Err(Error::schema(format!("bonds[{k}]"), format!("endpoint outside 0..{n}")));
        }
        if b.i == b.j {
            return Err(Error::schema(format!("bonds[{k}]"), "self-loop"));
        }
        check_code(&format!("bonds[{k}].dir"), b.dir, BOND_DIR.len())?;
        check_code(&format!("bonds[{k}].type"), b.bond_type, BOND_TYPE.len())?;
        let (i, j) = (b.i.min(b.j), b.i.max(b.j));
        if !seen.insert((i, j)) {
            return Err(Error::schema(format!("bonds[{k}]"), format!("duplicate edge ({i}, {j})")));
        }
        bonds.push(Bond { i, j, ..b });
    }
    bonds.sort_by_key(|b| (b.i, b.j));

    let mut degree = vec![0u32; n];
    for b in &bonds {
        degree[b.i] += 1;
        degree[b.j] += 1;
    }
    for (k, (a, &d)) in record.atoms.iter().zip(&degree).enumerate() {
        if a.degree != d {
            return Err(Error::Consistency(format!(
                "{}: atom {k} stores degree {} but has {d} incident bonds",
                record.id, a.degree
            )));
        }
    }
    if let Some(g) = record.gap_ev {
        if !g.is_finite() {
            return Err(Error::schema("gap_ev", "non-finite target"));
        }
    }
    Ok(MolGraph {
        id: record.id,
        atoms: record.atoms,
        bonds,
        gap_ev: record.gap_ev,
    })
}

pub fn parse_molgraph(line: &str) -> Result<MolGraph> {
    let record: MolRecord = serde_json::from_str(line).map_err(|e| Error::Parse(format!("molecule record: {e}")))?;
    load_molgraph(record)
}

impl MolGraph {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn gap_ev(&self) -> Option<f64> {
        self.gap_ev
    }

    pub fn atomic_numbers(&self) -> Vec<u32> {
        self.atoms.iter().map(|a| a.z).collect()
    }

    pub fn to_record(&self) -> MolRecord {
        MolRecord {
            id: self.id.clone(),
            atoms: self.atoms.clone(),
            bonds: self.bonds.clone(),
            gap_ev: self.gap_ev,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("records always serialize")
    }

    /// Relabels atoms so that new atom `k` is old atom `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        crate::geom::check_permutation(perm, self.n_atoms())?;
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let mut record = self.to_record();
        record.atoms = perm.iter().map(|&p| self.atoms[p].clone()).collect();
        for b in &mut record.bonds {
            b.i = inverse[b.i];
            b.j = inverse[b.j];
        }
        load_molgraph(record)
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_atoms()];
        for b in &self.bonds {
            adj[b.i].push(b.j);
            adj[b.j].push(b.i);
        }
        adj
    }

    pub fn bond_between(&self, i: usize, j: usize) -> Option<&Bond> {
        let key = (i.min(j), i.max(j));
        self.bonds
            .binary_search_by_key(&key, |b| (b.i, b.j))
            .ok()
            .map(|k| &self.bonds[k])
    }
}

/// Hop counts between atoms, clipped to `cap`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpdMatrix {
    n: usize,
    cap: u32,
    spd: Vec<u32>,
}

impl SpdMatrix {
    pub const UNREACHABLE: u32 = u32::MAX;

    /// Relabels atoms so that new atom `k` is old atom `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        crate::geom::check_permutation(perm, self.n)?;
        let n = self.n;
        let spd = (0..n * n).map(|k| self.get(perm[k / n], perm[k % n])).collect();
        Ok(Self { n, cap: self.cap, spd })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cap(&self) -> u32 {
        self.cap
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.spd[i * self.n + j]
    }

    /// Row of the SPD embedding table: hop counts `0..=cap`, then one row
    /// for disconnected pairs.
    pub fn table_row(&self, i: usize, j: usize) -> usize {
        match self.get(i, j) {
            Self::UNREACHABLE => self.cap as usize + 1,
            d => d as usize,
        }
    }

    pub fn table_rows(&self) -> usize {
        self.cap as usize + 2
    }

    /// Builds a matrix from explicit entries, for callers that encode
    /// structure by other means.
    pub fn from_entries(n: usize, cap: u32, spd: Vec<u32>) -> Result<Self> {
        if spd.len() != n * n {
            return Err(Error::Dimension {
                op: "SpdMatrix::from_entries",
                left: vec![spd.len()],
                right: vec![n, n],
            });
        }
        if let Some(&bad) = spd.iter().find(|&&d| d > cap && d != Self::UNREACHABLE) {
            return Err(Error::contract(format!("hop count {bad} above cap {cap}")));
        }
        Ok(Self { n, cap, spd })
    }
}

/// Breadth-first hop counts from every atom.
pub fn shortest_paths(g: &MolGraph, cap: u32) -> Result<SpdMatrix> {
    if cap == 0 {
        return Err(Error::contract("SPD cap must be at least 1"));
    }
    let n = g.n_atoms();
    let adj = g.adjacency();
    let mut spd = vec![SpdMatrix::UNREACHABLE; n * n];
    let mut queue = VecDeque::new();
    for src in 0..n {
        let row = &mut spd[src * n..(src + 1) * n];
        row[src] = 0;
        queue.clear();
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if row[w] == SpdMatrix::UNREACHABLE {
                    row[w] = row[u] + 1;
                    queue.push_back(w);
                }
            }
        }
        for d in row.iter_mut() {
            if *d != SpdMatrix::UNREACHABLE {
                *d = (*d).min(cap);
            }
        }
    }
    Ok(SpdMatrix { n, cap, spd })
}

/// Colour refinement: atoms start from their feature tuple and repeatedly
/// absorb the sorted colours of their bonded neighbours. Colours are dense
/// ranks, so relabeling the atoms relabels the colours consistently.
pub fn refined_colors(g: &MolGraph, rounds: usize) -> Vec<usize> {
    fn rank<K: Ord + Clone>(keys: &[K]) -> Vec<usize> {
        let mut sorted: Vec<K> = keys.to_vec();
        sorted.sort();
        sorted.dedup();
        keys.iter().map(|k| sorted.binary_search(k).expect("key present")).collect()
    }
    let features: Vec<_> = g
        .atoms
        .iter()
        .map(|a| (a.z, a.aromatic, a.charge, a.chirality, a.degree, a.num_h, a.hybridization))
        .collect();
    let mut colors = rank(&features);
    let mut neighbours = vec![Vec::new(); g.n_atoms()];
    for b in &g.bonds {
        let label = (b.bond_type, b.dir, b.in_ring);
        neighbours[b.i].push((b.j, label));
        neighbours[b.j].push((b.i, label));
    }
    for _ in 0..rounds {
        let keys: Vec<_> = (0..g.n_atoms())
            .map(|i| {
                let mut around: Vec<_> = neighbours[i].iter().map(|&(j, l)| (colors[j], l)).collect();
                around.sort();
                (colors[i], around)
            })
            .collect();
        let next = rank(&keys);
        let done = next == colors;
        colors = next;
        if done {
            break;
        }
    }
    colors
}

/// Node embedding tables in the order their features are summed.
pub const NODE_TABLES: [(&str, usize); 7] = [
    ("atomic_number", MAX_ATOMIC_NUMBER as usize + 1),
    ("aromatic", 2),
    ("charge", 2 * CHARGE_RANGE as usize + 1),
    ("chirality", CHIRALITY.len()),
    ("degree", DEGREE_CAP as usize + 1),
    ("num_h", MAX_HYDROGENS as usize + 1),
    ("hybridization", HYBRIDIZATION.len()),
];

/// Per-table row indices of every atom, in [`NODE_TABLES`] order.
pub fn node_feature_rows(g: &MolGraph) -> [Vec<usize>; 7] {
    let mut rows: [Vec<usize>; 7] = Default::default();
    for (k, a) in g.atoms.iter().enumerate() {
        let degree = if a.degree > DEGREE_CAP {
            log::warn!("{}: atom {k} degree {} clipped to {DEGREE_CAP}", g.id, a.degree);
            DEGREE_CAP
        } else {
            a.degree
        };
        let values = [
            a.z as usize,
            a.aromatic as usize,
            (a.charge + CHARGE_RANGE) as usize,
            a.chirality as usize,
            degree as usize,
            a.num_h as usize,
            a.hybridization as usize,
        ];
        for (r, v) in rows.iter_mut().zip(values) {
            r.push(v);
        }
    }
    rows
}

/// Sum of all categorical node embeddings except the atomic number, which
/// the model embeds separately. `tables` follow [`NODE_TABLES`] from the
/// second entry on.
pub fn psi2d_node_on_tape(tape: &mut Tape, g: &MolGraph, tables: &[Var; 6]) -> Result<Var> {
    let rows = node_feature_rows(g);
    let mut acc: Option<Var> = None;
    for (table, idx) in tables.iter().zip(&rows[1..]) {
        let part = tape.gather_rows(*table, idx)?;
        acc = Some(match acc {
            None => part,
            Some(prev) => tape.add(prev, part)?,
        });
    }
    Ok(acc.expect("six tables"))
}

/// Plain-value counterpart of [`psi2d_node_on_tape`].
pub fn psi2d_node(g: &MolGraph, tables: &[Tensor; 6]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = tables.clone().map(|t| tape.constant(t));
    let out = psi2d_node_on_tape(&mut tape, g, &vars)?;
    Ok(tape.value(out).clone())
}

/// `bias[h][i][j] = table[row(spd[i][j])][h]`, from a `[cap + 2, heads]` table.
pub fn psi2d_bias_on_tape(tape: &mut Tape, spd: &SpdMatrix, table: Var) -> Result<Var> {
    let shape = tape.value(table).shape().to_vec();
    if shape.len() != 2 || shape[0] != spd.table_rows() {
        return Err(Error::Dimension {
            op: "psi2d_bias",
            left: shape,
            right: vec![spd.table_rows(), 0],
        });
    }
    let heads = shape[1];
    let n = spd.n();
    let idx: Vec<usize> = (0..n * n).map(|k| spd.table_row(k / n, k % n)).collect();
    let pairs = tape.gather_rows(table, &idx)?;
    let t = tape.transpose(pairs)?;
    tape.reshape(t, &[heads, n, n])
}

pub fn psi2d_bias(spd: &SpdMatrix, table: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let t = tape.constant(table.clone());
    let out = psi2d_bias_on_tape(&mut tape, spd, t)?;
    Ok(tape.value(out).clone())
}

/// Constant `[N·N, 10]` one-hot design of bond type, direction and ring
/// flag for bonded pairs; unbonded pairs get an all-zero row.
pub fn bond_design(g: &MolGraph) -> Tensor {
    let n = g.n_atoms();
    let width = BOND_FEATURE_ROWS;
    let mut out = Tensor::zeros(&[n * n, width]);
    for b in &g.bonds {
        for (i, j) in [(b.i, b.j), (b.j, b.i)] {
            let row = (i * n + j) * width;
            let d = out.data_mut();
            d[row + b.bond_type as usize] = 1.0;
            d[row + BOND_TYPE.len() + b.dir as usize] = 1.0;
            d[row + BOND_TYPE.len() + BOND_DIR.len() + b.in_ring as usize] = 1.0;
        }
    }
    out
}

/// Rows of the bond bias table: type, then direction, then ring flag.
pub const BOND_FEATURE_ROWS: usize = BOND_TYPE.len() + BOND_DIR.len() + 2;

/// Per-head bias of bonded pairs from a `[BOND_FEATURE_ROWS, heads]` table.
pub fn bond_bias_on_tape(tape: &mut Tape, g: &MolGraph, table: Var) -> Result<Var> {
    let n = g.n_atoms();
    let heads = tape.value(table).shape()[1];
    let design = tape.constant(bond_design(g));
    let pairs = tape.matmul(design, table)?;
    let t = tape.transpose(pairs)?;
    tape.reshape(t, &[heads, n, n])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atom(z: u32, degree: u32) -> Atom {
        Atom {
            z,
            aromatic: false,
            charge: 0,
            chirality: 2,
            degree,
            num_h: 0,
            hybridization: 3,
        }
    }

    fn single(i: usize, j: usize) -> Bond {
        Bond {
            i,
            j,
            dir: 0,
            bond_type: 0,
            in_ring: false,
        }
    }

    fn record(atoms: Vec<Atom>, bonds: Vec<Bond>) -> MolRecord {
        MolRecord {
            id: "m".into(),
            atoms,
            bonds,
            gap_ev: None,
        }
    }

    #[test]
    fn lone_carbon() {
        let g = load_molgraph(record(vec![atom(6, 0)], vec![])).unwrap();
        assert_eq!(g.atoms()[0].degree, 0);
        assert_eq!(shortest_paths(&g, 20).unwrap().get(0, 0), 0);
    }

    #[test]
    fn water_degrees() {
        let g = load_molgraph(record(vec![atom(8, 2), atom(1, 1), atom(1, 1)], vec![single(0, 1), single(2, 0)])).unwrap();
        assert_eq!(g.atoms().iter().map(|a| a.degree).collect::<Vec<_>>(), [2, 1, 1]);
        assert_eq!(g.bonds()[1], single(0, 2));
        let bad = load_molgraph(record(vec![atom(8, 1), atom(1, 1), atom(1, 1)], vec![single(0, 1), single(0, 2)]));
        assert!(matches!(bad, Err(Error::Consistency(_))));
    }

    #[test]
    fn out_of_range_codes_name_the_field() {
        let mut a = atom(6, 0);
        a.hybridization = 9;
        match load_molgraph(record(vec![a], vec![])) {
            Err(Error::Schema { field, .. }) => assert_eq!(field, "atoms[0].hybridization"),
            other => panic!("{other:?}"),
        }
        let mut a = atom(6, 0);
        a.charge = -6;
        assert!(load_molgraph(record(vec![a], vec![])).is_err());
        assert!(load_molgraph(record(vec![atom(6, 1)], vec![single(0, 0)])).is_err());
        assert!(load_molgraph(record(vec![atom(6, 1), atom(6, 1)], vec![single(0, 1), single(1, 0)])).is_err());
    }

    #[test]
    fn path_and_disconnected_pairs() {
        let g = load_molgraph(record(
            vec![atom(6, 1), atom(6, 2), atom(6, 1), atom(6, 0)],
            vec![single(0, 1), single(1, 2)],
        ))
        .unwrap();
        let spd = shortest_paths(&g, 20).unwrap();
        assert_eq!(spd.get(0, 2), 2);
        assert_eq!(spd.get(0, 3), SpdMatrix::UNREACHABLE);
        assert_eq!(spd.table_row(0, 3), 21);
        assert_eq!(shortest_paths(&g, 1).unwrap().get(0, 2), 1);
        assert!(shortest_paths(&g, 0).is_err());
    }

    #[test]
    fn zero_tables_give_zero_features() {
        let g = load_molgraph(record(vec![atom(6, 1), atom(6, 1)], vec![single(0, 1)])).unwrap();
        let tables = std::array::from_fn(|k| Tensor::zeros(&[NODE_TABLES[k + 1].1, 3]));
        assert!(psi2d_node(&g, &tables).unwrap().data().iter().all(|&x| x == 0.0));
        let spd = shortest_paths(&g, 20).unwrap();
        assert!(psi2d_bias(&spd, &Tensor::zeros(&[22, 2])).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn json_round_trip_is_canonical() {
        let line = r#"{"id":"w","atoms":[{"z":8,"aromatic":false,"charge":0,"chirality":2,"degree":2,"num_h":2,"hybridization":3},{"z":1,"aromatic":false,"charge":0,"chirality":2,"degree":1,"num_h":0,"hybridization":0},{"z":1,"aromatic":false,"charge":0,"chirality":2,"degree":1,"num_h":0,"hybridization":0}],"bonds":[{"i":2,"j":0,"dir":0,"type":0,"in_ring":false},{"i":0,"j":1,"dir":0,"type":0,"in_ring":false}],"gap_ev":7.5}"#;
        let g = parse_molgraph(line).unwrap();
        let again = parse_molgraph(&g.to_json()).unwrap();
        assert_eq!(again, g);
        assert_eq!(again.to_json(), g.to_json());
        assert_eq!(g.bonds()[0].j, 1);
    }
}
