use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visgeo_core::geom::{direction_field, direction_field_on_tape, random_rotation};
use visgeo_core::numcore::{finite_diff_check, ParamVars, Params, Tape, Tensor, Var};
use visgeo_core::rgc::*;
use visgeo_core::synth::{random_conformer, random_mixed_conformer};
use visgeo_core::Result;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn random_weights(f: usize, rng: &mut ChaCha8Rng) -> RgcWeights {
    RgcWeights {
        was: random_matrix(f, f, rng),
        wat: random_matrix(f, f, rng),
        wds: random_matrix(f, f, rng),
        wdt: random_matrix(f, f, rng),
    }
}

fn random_scales(n: usize, f: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..n * n * f).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![n, n, f], data).unwrap()
}

#[test]
fn fast_path_matches_oracles_on_random_conformers() {
    let mut worst = (0.0f64, 0.0f64);
    for k in 0..200u64 {
        let n = 3 + (k as usize % 14);
        let df = direction_field(&random_conformer(n, 1000 + k)).unwrap();
        let (angle, dihedral) = fast_path(&df).unwrap();
        let da = angle.max_abs_diff(&angle_oracle(&df));
        let dd = dihedral.max_abs_diff(&dihedral_oracle(&df));
        assert!(da < ANGLE_ORACLE_TOL, "angle n={n} seed={k}: {da:e}");
        assert!(dd < DIHEDRAL_ORACLE_TOL, "dihedral n={n} seed={k}: {dd:e}");
        worst = (worst.0.max(da), worst.1.max(dd));
    }
    println!("worst angle diff {:e}, dihedral diff {:e}", worst.0, worst.1);
}

#[test]
fn four_atom_dihedral_matches_oracle_tightly() {
    for seed in 0..20 {
        let df = direction_field(&random_conformer(4, seed)).unwrap();
        let (_, d) = fast_path(&df).unwrap();
        assert!(d.max_abs_diff(&dihedral_oracle(&df)) < 1e-12);
    }
}

#[test]
fn aggregation_matches_explicit_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, f) = (6, 3);
    let df = direction_field(&random_conformer(n, 77)).unwrap();
    let s = random_scales(n, f, &mut rng);
    let v = aggregate_vectors(&df, &s).unwrap();
    for i in 0..n {
        for a in 0..3 {
            for c in 0..f {
                let mut expect = 0.0;
                for j in 0..n {
                    if j != i {
                        expect += s.at(&[i, j, c]) * df.dir(i, j)[a];
                    }
                }
                assert!((v.get(i, a, c) - expect).abs() < 1e-13);
            }
        }
    }
}

#[test]
fn features_invariant_under_rigid_motion_and_vectors_rotate() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, f) = (9, 4);
    let conf = random_mixed_conformer(n, 21);
    let s = random_scales(n, f, &mut rng);
    let w = random_weights(f, &mut rng);
    let base = rgc_features(&direction_field(&conf).unwrap(), &s, &w).unwrap();
    for r in 0..20 {
        let rot = random_rotation(100 + r, false);
        let t = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let moved = conf.transformed(&rot, t).unwrap();
        let feats = rgc_features(&direction_field(&moved).unwrap(), &s, &w).unwrap();
        assert!(feats.angle_scalar.max_abs_diff(&base.angle_scalar) < 1e-10);
        assert!(feats.dihedral_scalar.max_abs_diff(&base.dihedral_scalar) < 1e-10);
        let expect = base.agg_vec.rotated(&rot);
        assert!(feats.agg_vec.tensor().max_abs_diff(expect.tensor()) < 1e-12);
    }
}

fn permute_pairs(t: &Tensor, perm: &[usize]) -> Tensor {
    let (n, f) = (t.shape()[0], t.shape()[2]);
    let mut out = Tensor::zeros(&[n, n, f]);
    for i in 0..n {
        for j in 0..n {
            for c in 0..f {
                out.set(&[i, j, c], t.at(&[perm[i], perm[j], c]));
            }
        }
    }
    out
}

#[test]
fn relabeling_permutes_features_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (n, f) = (8, 3);
    let conf = random_mixed_conformer(n, 4);
    let w = random_weights(f, &mut rng);
    let s = random_scales(n, f, &mut rng);
    let base = rgc_features(&direction_field(&conf).unwrap(), &s, &w).unwrap();
    let visis = VisIsParams {
        node_in: random_matrix(f, 5, &mut rng),
        node_out: random_matrix(5, f, &mut rng),
        edge_in: random_matrix(f, 5, &mut rng),
        edge_out: random_matrix(5, 2, &mut rng),
    };
    let h = random_matrix(n, f, &mut rng);
    let e = random_scales(n, 2, &mut rng);
    let (h1, e1) = visis_update(&h, &e, &base, &visis).unwrap();

    for trial in 0..10 {
        let mut perm: Vec<usize> = (0..n).collect();
        for k in (1..n).rev() {
            perm.swap(k, rng.random_range(0..=k));
        }
        let moved = conf.permuted(&perm).unwrap();
        let s_p = permute_pairs(&s, &perm);
        let feats = rgc_features(&direction_field(&moved).unwrap(), &s_p, &w).unwrap();
        for i in 0..n {
            for c in 0..f {
                assert_eq!(
                    feats.angle_scalar.at(&[i, c]).to_bits(),
                    base.angle_scalar.at(&[perm[i], c]).to_bits(),
                    "trial {trial}"
                );
            }
        }
        assert!(feats.dihedral_scalar.bitwise_eq(&permute_pairs(&base.dihedral_scalar, &perm)));

        let h_p = Tensor::new(vec![n, f], perm.iter().flat_map(|&p| h.data()[p * f..(p + 1) * f].to_vec()).collect()).unwrap();
        let (h2, e2) = visis_update(&h_p, &permute_pairs(&e, &perm), &feats, &visis).unwrap();
        for i in 0..n {
            for c in 0..f {
                assert_eq!(h2.at(&[i, c]).to_bits(), h1.at(&[perm[i], c]).to_bits());
            }
        }
        assert!(e2.bitwise_eq(&permute_pairs(&e1, &perm)));
    }
}

#[test]
fn visis_update_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (n, f) = (7, 3);
    let conf = random_conformer(n, 8);
    let w = random_weights(f, &mut rng);
    let s = random_scales(n, f, &mut rng);
    let p = VisIsParams {
        node_in: random_matrix(f, 4, &mut rng),
        node_out: random_matrix(4, f, &mut rng),
        edge_in: random_matrix(f, 4, &mut rng),
        edge_out: random_matrix(4, f, &mut rng),
    };
    let h = random_matrix(n, f, &mut rng);
    let e = random_scales(n, f, &mut rng);
    let run = |c: &visgeo_core::geom::Conformer| {
        let feats = rgc_features(&direction_field(c).unwrap(), &s, &w).unwrap();
        visis_update(&h, &e, &feats, &p).unwrap()
    };
    let (h0, e0) = run(&conf);
    for r in 0..5 {
        let (h1, e1) = run(&conf.transformed(&random_rotation(r, false), [1.0, -2.0, 0.5]).unwrap());
        assert!(h1.max_abs_diff(&h0) < 1e-10);
        assert!(e1.max_abs_diff(&e0) < 1e-10);
    }
}

fn rgc_loss(tape: &mut Tape, vars: &ParamVars, n: usize, f: usize) -> Result<Var> {
    let pos = vars.get("positions")?;
    let (dirs, _) = direction_field_on_tape(tape, pos)?;
    let v = aggregate_on_tape(tape, dirs, vars.get("scales")?)?;
    let angle = angle_on_tape(tape, v, vars.get("was")?, vars.get("wat")?)?;
    let dihedral = dihedral_on_tape(tape, v, dirs, vars.get("wds")?, vars.get("wdt")?)?;
    // fixed readout weights keep the loss from collapsing to symmetric sums
    let ra = tape.constant(Tensor::new(vec![f, 1], (0..f).map(|c| 0.3 + 0.2 * c as f64).collect())?);
    let rd = tape.constant(Tensor::new(vec![f, 1], (0..f).map(|c| 0.7 - 0.25 * c as f64).collect())?);
    let a = tape.matmul(angle, ra)?;
    let flat = tape.reshape(dihedral, &[n * n, f])?;
    let d = tape.matmul(flat, rd)?;
    let a2 = tape.mul(a, a)?;
    let sa = tape.sum(a2);
    let sd = tape.sum(d);
    let sd = tape.scale(sd, 0.5);
    tape.add(sa, sd)
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (n, f) = (5, 3);
    let conf = random_mixed_conformer(n, 31);
    let w = random_weights(f, &mut rng);
    let mut params = Params::new();
    params.insert("positions".into(), conf.positions_tensor());
    params.insert("scales".into(), random_scales(n, f, &mut rng));
    params.insert("was".into(), w.was);
    params.insert("wat".into(), w.wat);
    params.insert("wds".into(), w.wds);
    params.insert("wdt".into(), w.wdt);
    let report = finite_diff_check(|t, v| rgc_loss(t, v, n, f), &params, 1e-5).unwrap();
    println!("{report:?}");
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn tape_forward_equals_plain_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let (n, f) = (6, 2);
    let conf = random_conformer(n, 3);
    let w = random_weights(f, &mut rng);
    let s = random_scales(n, f, &mut rng);
    let plain = rgc_features(&direction_field(&conf).unwrap(), &s, &w).unwrap();

    let mut tape = Tape::new();
    let pos = tape.constant(conf.positions_tensor());
    let (dirs, _) = direction_field_on_tape(&mut tape, pos).unwrap();
    let sv = tape.constant(s.clone());
    let v = aggregate_on_tape(&mut tape, dirs, sv).unwrap();
    let was = tape.constant(w.was.clone());
    let wat = tape.constant(w.wat.clone());
    let wds = tape.constant(w.wds.clone());
    let wdt = tape.constant(w.wdt.clone());
    let a = angle_on_tape(&mut tape, v, was, wat).unwrap();
    let d = dihedral_on_tape(&mut tape, v, dirs, wds, wdt).unwrap();
    assert!(tape.value(v).bitwise_eq(plain.agg_vec.tensor()));
    assert!(tape.value(a).bitwise_eq(&plain.angle_scalar));
    assert!(tape.value(d).bitwise_eq(&plain.dihedral_scalar));
}

#[test]
fn prefix_seeded_benchmark_instances_share_values() {
    let small = direction_field(&random_conformer(16, 0)).unwrap();
    let big = direction_field(&random_conformer(32, 0)).unwrap();
    for i in 0..16 {
        for j in 0..16 {
            assert_eq!(small.dir(i, j), big.dir(i, j));
        }
    }
}

#[test]
fn benchmark_table_cross_checks() {
    let table = scaling_benchmark(&[2, 4, 8, 16], 1, 0).unwrap();
    assert_eq!(table.rows.len(), 4);
    for r in &table.rows {
        assert!(r.angle_max_diff < ANGLE_ORACLE_TOL);
        assert!(r.dihedral_max_diff < DIHEDRAL_ORACLE_TOL);
    }
    let csv = table.to_csv();
    assert!(csv.starts_with("N,fast_ns,angle_oracle_ns,dihedral_oracle_ns\n"));
    assert!(csv.lines().last().unwrap().starts_with("# slopes"));
}
