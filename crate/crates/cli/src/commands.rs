use std::collections::HashMap;
use std::path::Path;

use serde_json::json;
use visgeo_core::distill::{distill_run, noisy_pairs};
use visgeo_core::ensemble::{format_routed_csv, parse_fallback_csv, parse_predictions_csv, route_and_predict, RoutingRule};
use visgeo_core::geom::direction_field;
use visgeo_core::model::{init_params, read_checkpoint, save_checkpoint, synthetic_dataset, Checkpoint};
use visgeo_core::rgc::{
    angle_oracle, bench_tolerances, dihedral_oracle, fast_path, scaling_benchmark, ANGLE_ORACLE_TOL, DIHEDRAL_ORACLE_TOL,
};
use visgeo_core::synth::random_conformer;
use visgeo_core::{io, Error};

use crate::checks::{bare_graph, check_equivariance, report_csv, Fault};
use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::Common;

/// Largest size accepted by the enumeration oracles on request.
pub const ORACLE_SIZE_GUARD: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Contract(_) | Error::Schema { .. }) => 2,
            CliError::Core(Error::Io { .. } | Error::Parse(_)) => 3,
            CliError::Core(_) => 1,
        }
    }
}

type Outcome = std::result::Result<bool, CliError>;

struct Run<'a> {
    common: &'a Common,
    cfg: RunConfig,
    manifest: RunManifest,
}

impl<'a> Run<'a> {
    fn start(command: &str, common: &'a Common) -> std::result::Result<Self, CliError> {
        let file_cfg = RunConfig::load(common.config.as_deref())?;
        let seed = common.seed.unwrap_or(file_cfg.seed);
        let cfg = file_cfg.with_seed(seed);
        let mut manifest = RunManifest::new(command, common.config.as_deref(), seed, common.threads as usize);
        if let Some(p) = &common.config {
            manifest.add_input(p)?;
        }
        Ok(Self { common, cfg, manifest })
    }

    fn input(&mut self, path: &Path) -> std::result::Result<(), CliError> {
        Ok(self.manifest.add_input(path)?)
    }

    fn output(&mut self, name: &str, text: &str) -> std::result::Result<(), CliError> {
        io::write_text(&self.common.out_dir.join(name), text)?;
        self.manifest.outputs.push(name.to_string());
        Ok(())
    }

    fn finish(self, passed: bool) -> Outcome {
        self.manifest.write(&self.common.out_dir, passed)?;
        Ok(passed)
    }
}

fn status(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

pub fn check_equiv(common: &Common, paths: &[std::path::PathBuf], molecules: Option<&Path>, n_trials: Option<usize>, fault: Option<Fault>) -> Outcome {
    let mut run = Run::start("check-equiv", common)?;
    let n_trials = n_trials.unwrap_or(run.cfg.check.n_trials);
    if n_trials == 0 {
        return Err(CliError::Usage("--n-trials must be at least 1".into()));
    }
    let graphs: HashMap<String, _> = match molecules {
        Some(p) => {
            run.input(p)?;
            io::read_molecules(p)?.into_iter().map(|g| (g.id().to_string(), g)).collect()
        }
        None => HashMap::new(),
    };
    let mut inputs = Vec::with_capacity(paths.len());
    for p in paths {
        run.input(p)?;
        let c = io::read_xyz(p)?;
        let g = match graphs.get(c.id()) {
            Some(g) if g.atomic_numbers() == c.atomic_numbers() => g.clone(),
            Some(_) => {
                return Err(Error::Consistency(format!("`{}`: graph and conformer disagree on atoms", c.id())).into());
            }
            None => bare_graph(&c)?,
        };
        inputs.push((c, g));
    }
    let results = check_equivariance(&inputs, &run.cfg.model, n_trials, run.cfg.seed, common.threads as usize, fault)?;
    for r in &results {
        println!("{:<32} {:>12.3e}  tol {:.0e}  {}", r.name, r.max_deviation, r.tolerance, status(r.passed()));
    }
    let passed = results.iter().all(|r| r.passed());
    run.output("equivariance_report.csv", &report_csv(&results))?;
    run.finish(passed)
}

pub fn oracle_diff(common: &Common, sizes: Option<Vec<usize>>) -> Outcome {
    let mut run = Run::start("oracle-diff", common)?;
    let sizes = sizes.unwrap_or_else(|| run.cfg.oracle.sizes.clone());
    if sizes.is_empty() {
        return Err(CliError::Usage("no sizes given".into()));
    }
    if let Some(&n) = sizes.iter().find(|&&n| n > ORACLE_SIZE_GUARD || n == 0) {
        return Err(CliError::Usage(format!(
            "size {n} refused: the dihedral oracle enumerates N^4 quadruplets and is limited to 1..={ORACLE_SIZE_GUARD} atoms here; use `bench` for larger sizes"
        )));
    }
    let mut csv = String::from("n,angle_max_diff,dihedral_max_diff,status\n");
    let mut passed = true;
    for (k, &n) in sizes.iter().enumerate() {
        let c = random_conformer(n, run.cfg.seed.wrapping_add(k as u64));
        let df = direction_field(&c)?;
        let (angle, dihedral) = fast_path(&df)?;
        let da = angle.max_abs_diff(&angle_oracle(&df));
        let dd = dihedral.max_abs_diff(&dihedral_oracle(&df));
        let ok = da < ANGLE_ORACLE_TOL && dd < DIHEDRAL_ORACLE_TOL;
        passed &= ok;
        println!("N={n:<3} angle {da:.3e}  dihedral {dd:.3e}  {}", status(ok));
        csv.push_str(&format!("{n},{da:e},{dd:e},{}\n", status(ok)));
    }
    run.output("oracle_diff.csv", &csv)?;
    run.finish(passed)
}

pub fn bench(common: &Common, sizes: Option<Vec<usize>>, repeats: Option<usize>) -> Outcome {
    let mut run = Run::start("bench", common)?;
    let sizes = sizes.unwrap_or_else(|| run.cfg.bench.sizes.clone());
    let repeats = repeats.unwrap_or(run.cfg.bench.repeats);
    if repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    if common.threads > 1 {
        log::warn!("timings are measured on one thread regardless of --threads");
    }
    let table = scaling_benchmark(&sizes, repeats, run.cfg.seed)?;
    let mut check = String::from("n,angle_max_diff,dihedral_max_diff,angle_tol,dihedral_tol,status\n");
    let mut passed = true;
    for r in &table.rows {
        let (ta, td) = bench_tolerances(r.n);
        let ok = r.angle_max_diff < ta && r.dihedral_max_diff < td;
        passed &= ok;
        check.push_str(&format!("{},{:e},{:e},{ta:e},{td:e},{}\n", r.n, r.angle_max_diff, r.dihedral_max_diff, status(ok)));
    }
    let gap = table.dihedral_oracle_slope - table.fast_slope;
    let slope_ok = gap >= run.cfg.bench.min_slope_gap;
    println!(
        "slopes: fast {:.3}  angle oracle {:.3}  dihedral oracle {:.3}  gap {gap:.3} (need >= {})  {}",
        table.fast_slope,
        table.angle_oracle_slope,
        table.dihedral_oracle_slope,
        run.cfg.bench.min_slope_gap,
        status(slope_ok)
    );
    run.output("bench.csv", &table.to_csv())?;
    run.output("bench_check.csv", &check)?;
    run.finish(passed && slope_ok)
}

pub fn train_toy(common: &Common) -> Outcome {
    let mut run = Run::start("train-toy", common)?;
    let (model, train) = (&run.cfg.model, &run.cfg.train);
    model.validate()?;
    let data = synthetic_dataset(train.n_molecules, train.min_atoms, train.max_atoms, train.data_seed, model.spd_cap)?;
    let report = visgeo_core::model::train_toy(&data, model, train)?;
    let ratio = report.final_l1 / report.baseline_l1;
    let passed = ratio < run.cfg.toy.max_ratio;
    println!(
        "baseline L1 {:.5}  initial {:.5}  final {:.5}  ratio {ratio:.4} (need < {})  {}",
        report.baseline_l1,
        report.initial_l1,
        report.final_l1,
        run.cfg.toy.max_ratio,
        status(passed)
    );
    let mut curve = String::from("step,loss\n");
    for (step, loss) in report.loss_curve.iter().enumerate() {
        curve.push_str(&format!("{step},{loss:e}\n"));
    }
    let summary = json!({
        "baseline_l1": report.baseline_l1,
        "initial_l1": report.initial_l1,
        "final_l1": report.final_l1,
        "ratio": ratio,
        "max_ratio": run.cfg.toy.max_ratio,
        "passed": passed,
    });
    let checkpoint = save_checkpoint(&Checkpoint {
        config: run.cfg.model.clone(),
        params: report.params,
    })?;
    run.output("loss_curve.csv", &curve)?;
    run.output("toy_report.json", &(serde_json::to_string_pretty(&summary).expect("json") + "\n"))?;
    run.output("checkpoint.json", &checkpoint)?;
    run.finish(passed)
}

pub fn distill_toy(common: &Common, teacher_path: Option<&Path>) -> Outcome {
    let mut run = Run::start("distill-toy", common)?;
    run.cfg.distill.validate()?;
    run.cfg.model.validate()?;
    let teacher = match teacher_path {
        Some(p) => {
            run.input(p)?;
            read_checkpoint(p)?
        }
        None => {
            let mut config = run.cfg.teacher_config();
            // distinct stream so a fresh student does not start as a copy
            config.seed = run.cfg.seed.wrapping_add(1);
            let params = init_params(&config, 0.0)?;
            Checkpoint { config, params }
        }
    };
    let corpus = &run.cfg.corpus;
    let pairs = noisy_pairs(corpus.n_pairs, corpus.min_atoms, corpus.max_atoms, corpus.sigma, run.cfg.seed, run.cfg.model.spd_cap)?;
    let report = distill_run(&pairs, &teacher, &run.cfg.model, &run.cfg.distill)?;
    let cos: Vec<f64> = report.trace.iter().map(|r| r.mean_cosine).collect();
    let increasing = cos.windows(2).all(|w| w[1] > w[0]);
    println!(
        "mean cosine {:.6} -> {:.6} over {} epochs, strictly increasing: {}",
        cos[0],
        cos[cos.len() - 1],
        cos.len() - 1,
        increasing
    );
    let summary = json!({
        "teacher_sha256": report.teacher_hash,
        "initial_mean_cosine": cos[0],
        "final_mean_cosine": cos[cos.len() - 1],
        "strictly_increasing": increasing,
    });
    run.output("trace.csv", &report.trace_csv())?;
    run.output("distill_report.json", &(serde_json::to_string_pretty(&summary).expect("json") + "\n"))?;
    run.output("student_checkpoint.json", &save_checkpoint(&report.student)?)?;
    if teacher_path.is_none() {
        run.output("teacher_checkpoint.json", &save_checkpoint(&teacher)?)?;
    }
    run.finish(increasing)
}

pub fn predict_ensemble(common: &Common, predictions: &Path, fallback: &Path, molecules: &Path, k: Option<usize>, threshold: Option<usize>) -> Outcome {
    let mut run = Run::start("predict-ensemble", common)?;
    let k = k.unwrap_or(run.cfg.ensemble.k);
    let threshold = threshold.unwrap_or(run.cfg.ensemble.min_atoms_threshold);
    if k == 0 || threshold == 0 {
        return Err(CliError::Usage("--k and --threshold must be at least 1".into()));
    }
    for p in [predictions, fallback, molecules] {
        run.input(p)?;
    }
    let graphs = io::read_molecules(molecules)?;
    let sets = parse_predictions_csv(&io::read_text(predictions)?, predictions)?;
    let table = parse_fallback_csv(&io::read_text(fallback)?, fallback)?;
    let rule = RoutingRule::new(threshold, &table)?;
    let known: std::collections::HashSet<&str> = graphs.iter().map(|g| g.id()).collect();
    for id in sets.keys().filter(|id| !known.contains(id.as_str())) {
        log::warn!("predictions for `{id}` have no molecule and are ignored");
    }
    let rows = graphs
        .iter()
        .map(|g| route_and_predict(g, sets.get(g.id()), &rule, k))
        .collect::<visgeo_core::Result<Vec<_>>>()?;
    for r in &rows {
        println!("{:<24} {:>10.4} eV  {:?}", r.sample_id, r.gap_ev, r.source);
    }
    run.output("ensemble.csv", &format_routed_csv(&rows))?;
    run.finish(true)
}
