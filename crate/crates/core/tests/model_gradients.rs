use visgeo_core::graph2d::shortest_paths;
use visgeo_core::model::{forward, init_params, EncoderVersion, ForwardOptions, Mode, ModelConfig, ModelInput};
use visgeo_core::numcore::finite_diff_check;
use visgeo_core::synth::synthetic_molecule;

/// Small output scale keeps the finite-difference resolution ahead of the
/// smallest gradients.
fn check(version: EncoderVersion, mode: Mode, training: bool) {
    let cfg = ModelConfig {
        n_blocks: 2,
        hidden_dim: 16,
        n_heads: 4,
        decoder_dim: 16,
        n_rbf: 6,
        encoder_version: version,
        seed: 21,
        ..ModelConfig::default()
    };
    let (g, c) = synthetic_molecule(5, 30);
    let spd = shortest_paths(&g, cfg.spd_cap).unwrap();
    let mut params = init_params(&cfg, 0.0).unwrap();
    for w in params.get_mut("decoder.out").unwrap().data_mut() {
        *w *= 0.01;
    }
    if mode.uses_3d() {
        params.insert("positions".into(), c.positions_tensor());
    }
    let opts = ForwardOptions { mode, training, dropout_seed: 77 };
    let report = finite_diff_check(
        |tape, vars| {
            let input = ModelInput { graph: &g, spd: &spd, conformer: mode.uses_3d().then_some(&c) };
            let pos = if mode.uses_3d() { Some(vars.get("positions")?) } else { None };
            Ok(forward(tape, vars, &cfg, &input, pos, opts)?.prediction)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{version:?} {mode:?} {training}: {report:?}");
}

#[test]
fn v1_joint() {
    check(EncoderVersion::V1, Mode::Joint, false);
}

#[test]
fn v2_joint() {
    check(EncoderVersion::V2, Mode::Joint, false);
}

#[test]
fn v2_two_d() {
    check(EncoderVersion::V2, Mode::TwoD, false);
}

#[test]
fn v2_with_fixed_dropout_masks() {
    check(EncoderVersion::V2, Mode::ThreeD, true);
}
