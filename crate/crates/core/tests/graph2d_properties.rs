use proptest::prelude::*;
use visgeo_core::graph2d::*;
use visgeo_core::numcore::{finite_diff_check, Params, Tensor};

fn graph_from_edges(n: usize, edges: &[(usize, usize)]) -> MolGraph {
    let mut degree = vec![0u32; n];
    let mut bonds = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for &(a, b) in edges {
        if a == b || !seen.insert((a.min(b), a.max(b))) {
            continue;
        }
        degree[a] += 1;
        degree[b] += 1;
        bonds.push(Bond { i: a, j: b, dir: (a % 4) as u32, bond_type: ((a + b) % 4) as u32, in_ring: a % 2 == 0 });
    }
    let atoms = (0..n)
        .map(|k| Atom {
            z: [1, 6, 7, 8, 9][k % 5],
            aromatic: k % 3 == 0,
            charge: (k % 3) as i32 - 1,
            chirality: (k % 4) as u32,
            degree: degree[k],
            num_h: (k % 4) as u32,
            hybridization: (k % 6) as u32,
        })
        .collect();
    load_molgraph(MolRecord { id: "g".into(), atoms, bonds, gap_ev: Some(1.0) }).unwrap()
}

fn floyd_warshall(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<u64>> {
    const INF: u64 = u64::MAX / 4;
    let mut d = vec![vec![INF; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(a, b) in edges {
        if a != b {
            d[a][b] = 1;
            d[b][a] = 1;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d.into_iter().map(|r| r.into_iter().map(|x| if x >= INF { u64::MAX } else { x }).collect()).collect()
}

fn graph_strategy() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (1usize..=12).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 0..20)))
}

proptest! {
    #[test]
    fn bfs_matches_all_pairs_oracle((n, edges) in graph_strategy(), cap in 1u32..8) {
        let g = graph_from_edges(n, &edges);
        let spd = shortest_paths(&g, cap).unwrap();
        let oracle = floyd_warshall(n, &edges);
        for i in 0..n {
            for j in 0..n {
                let expect = if oracle[i][j] == u64::MAX { SpdMatrix::UNREACHABLE } else { oracle[i][j].min(cap as u64) as u32 };
                prop_assert_eq!(spd.get(i, j), expect);
                prop_assert_eq!(spd.get(i, j), spd.get(j, i));
            }
        }
    }

    #[test]
    fn json_round_trip((n, edges) in graph_strategy()) {
        let g = graph_from_edges(n, &edges);
        let again = parse_molgraph(&g.to_json()).unwrap();
        prop_assert_eq!(again.to_json(), g.to_json());
        prop_assert_eq!(again, g);
    }

    #[test]
    fn encodings_are_permutation_equivariant((n, edges) in graph_strategy(), seed in 0u64..1000) {
        let g = graph_from_edges(n, &edges);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for k in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(k, (s >> 33) as usize % (k + 1));
        }
        let p = g.permuted(&perm).unwrap();
        let tables: [Tensor; 6] = std::array::from_fn(|k| {
            let rows = NODE_TABLES[k + 1].1;
            Tensor::new(vec![rows, 3], (0..rows * 3).map(|x| ((x * 7 + k) % 11) as f64 * 0.1 - 0.5).collect()).unwrap()
        });
        let base = psi2d_node(&g, &tables).unwrap();
        let moved = psi2d_node(&p, &tables).unwrap();
        for (i, &pi) in perm.iter().enumerate() {
            for c in 0..3 {
                prop_assert_eq!(moved.at(&[i, c]).to_bits(), base.at(&[pi, c]).to_bits());
            }
        }
        let table = Tensor::new(vec![22, 2], (0..44).map(|x| x as f64 * 0.01).collect()).unwrap();
        let b0 = psi2d_bias(&shortest_paths(&g, 20).unwrap(), &table).unwrap();
        let b1 = psi2d_bias(&shortest_paths(&p, 20).unwrap(), &table).unwrap();
        for h in 0..2 {
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(b1.at(&[h, i, j]).to_bits(), b0.at(&[h, perm[i], perm[j]]).to_bits());
                    prop_assert_eq!(b0.at(&[h, i, j]).to_bits(), b0.at(&[h, j, i]).to_bits());
                }
            }
        }
    }
}

#[test]
fn identical_atoms_get_identical_rows() {
    let carbon = Atom { z: 6, aromatic: false, charge: 0, chirality: 2, degree: 1, num_h: 3, hybridization: 4 };
    let bond = Bond { i: 0, j: 1, dir: 0, bond_type: 0, in_ring: false };
    let g = load_molgraph(MolRecord { id: "ethane".into(), atoms: vec![carbon.clone(), carbon], bonds: vec![bond], gap_ev: None }).unwrap();
    let tables: [Tensor; 6] = std::array::from_fn(|k| {
        let rows = NODE_TABLES[k + 1].1;
        Tensor::new(vec![rows, 2], (0..rows * 2).map(|x| x as f64 * 0.3 + k as f64).collect()).unwrap()
    });
    let x = psi2d_node(&g, &tables).unwrap();
    assert_eq!(&x.data()[0..2], &x.data()[2..4]);
}

#[test]
fn embedding_gradients_match_finite_differences() {
    let g = graph_from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (1, 4)]);
    let spd = shortest_paths(&g, 20).unwrap();
    let mut params = Params::new();
    for (k, (name, rows)) in NODE_TABLES[1..].iter().enumerate() {
        let data = (0..rows * 2).map(|x| ((x * 13 + k * 5) % 17) as f64 * 0.07 - 0.5).collect();
        params.insert(name.to_string(), Tensor::new(vec![*rows, 2], data).unwrap());
    }
    params.insert("spd".into(), Tensor::new(vec![22, 2], (0..44).map(|x| (x % 9) as f64 * 0.1).collect()).unwrap());
    params.insert("bond".into(), Tensor::new(vec![BOND_FEATURE_ROWS, 2], (0..20).map(|x| x as f64 * 0.05 - 0.3).collect()).unwrap());
    let report = finite_diff_check(
        |tape, vars| {
            let tables = std::array::from_fn(|k| vars.get(NODE_TABLES[k + 1].0).unwrap());
            let x = psi2d_node_on_tape(tape, &g, &tables)?;
            let b = psi2d_bias_on_tape(tape, &spd, vars.get("spd")?)?;
            let e = bond_bias_on_tape(tape, &g, vars.get("bond")?)?;
            let x2 = tape.mul(x, x)?;
            let b2 = tape.mul(b, e)?;
            let sb = tape.sum(b2);
            let sx = tape.sum(x2);
            let sb2 = tape.sum(b);
            let t = tape.add(sx, sb)?;
            tape.add(t, sb2)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}
