//! The subcommands. Each reads a config, validates it before doing any work
//! and writes its artifacts to the configured output directory.

use std::path::Path;
use std::time::Instant;

use baryflow::datasets::{
    default_family, family_barycenter_map, gaussian_cloud, location_scatter_family, save_csv, swiss_roll,
    synthetic_msda, whiten, EvaluationLabels, TargetDomain,
};
use baryflow::flow_empirical::{fixed_point_baseline, run_flow, trace_csv, EmpiricalFlowConfig, Sampler, TraceRecord};
use baryflow::flow_gmm::run_gmm_flow;
use baryflow::gaussian::{em_fit, sample_reparam, EmOptions, LabeledGmm};
use baryflow::measures::{BarycentricCoordinates, EmpiricalMeasure, LabeledEmpiricalMeasure};
use baryflow::pipeline::{convergence_report, msda_adapt, w2_to_reference, MsdaConfig, MsdaReport, MIN_TRACE_LEN};
use baryflow::rng::child_seed;
use rayon::prelude::*;
use serde::Serialize;

use crate::artifacts::{create_dir, num, write_text, RunReport, Table};
use crate::config::{
    self, resolve, BarycenterConfig, Combo, FlowKind, GenConfig, GenDataset, MsdaRunConfig, ToyBase, ToyConfig,
    ToySolver,
};
use crate::error::{CliError, CliResult};
use crate::inputs::{load_inputs, read_dataset, Input};

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn convergence(trace: &[TraceRecord]) -> CliResult<Option<baryflow::pipeline::ConvergenceReport>> {
    if trace.len() < MIN_TRACE_LEN {
        return Ok(None);
    }
    Ok(Some(convergence_report(trace)?))
}

/// `baryflow barycenter`: one flow run on the configured inputs.
pub fn barycenter(config_path: &Path) -> CliResult<()> {
    let start = Instant::now();
    let cfg: BarycenterConfig = config::load(config_path)?;
    let base = config::base_dir(config_path);
    cfg.validate(&base)?;
    let out = resolve(&base, &cfg.output_dir);
    create_dir(&out)?;
    let mut report = RunReport::new("barycenter", &cfg)?;

    let t = Instant::now();
    let inputs = load_inputs(&cfg.inputs, &base, cfg.seed)?;
    let target = match &cfg.target {
        Some(p) => Some(read_dataset(&base, p, None)?.measure),
        None => None,
    };
    report.time("load", ms(t));
    println!("barycenter: {} inputs, {:?} flow", inputs.len(), cfg.flow);

    let t = Instant::now();
    let trace = match cfg.flow {
        FlowKind::Empirical => {
            let mut flow = cfg.empirical.clone();
            flow.seed = cfg.seed;
            flow.functional.target_measure = target;
            let samplers: Vec<&dyn Sampler> = inputs.iter().map(Input::sampler).collect();
            let result = run_flow(&samplers, &flow)?;
            let labels = (flow.label_weight > 0.0).then(|| result.measure.hard_labels());
            save_csv(out.join("barycenter.csv"), result.measure.points(), labels.as_deref())?;
            report.artifacts.push("barycenter.csv".into());
            result.trace
        }
        FlowKind::Gmm => {
            let mut flow = cfg.gmm.clone();
            flow.seed = cfg.seed;
            flow.functional.target_measure = target;
            let em = EmOptions { seed: child_seed(cfg.seed, 1), ..cfg.em.clone() };
            let mixtures = inputs.iter().map(|i| i.to_mixture(&em)).collect::<CliResult<Vec<_>>>()?;
            let result = run_gmm_flow(&mixtures, &flow, None)?;
            write_text(&out, "barycenter.json", &(result.gmm.to_json()? + "\n"))?;
            report.artifacts.push("barycenter.json".into());
            result.trace
        }
    };
    report.time("flow", ms(t));
    write_text(&out, "trace.csv", &trace_csv(&trace))?;
    report.artifacts.push("trace.csv".into());
    report.convergence = convergence(&trace)?;
    if let Some(last) = trace.last() {
        println!("barycenter: {} iterations, final F {:.6e}", trace.len(), last.f);
    }
    report.time("total", ms(start));
    report.write(&out)?;
    println!("barycenter: artifacts in {}", out.display());
    Ok(())
}

fn toy_base(cfg: &ToyConfig, n: usize, stream: u64) -> CliResult<LabeledEmpiricalMeasure> {
    let seed = child_seed(cfg.seed, stream);
    let q = match cfg.base {
        ToyBase::SwissRoll => swiss_roll(n, cfg.noise, seed)?,
        ToyBase::Gaussian => gaussian_cloud(n, 2, seed)?,
    };
    Ok(whiten(&q)?)
}

/// `baryflow toy`: solver comparison on a location-scatter family with a
/// closed-form barycenter.
pub fn toy(config_path: &Path) -> CliResult<()> {
    let start = Instant::now();
    let cfg: ToyConfig = config::load(config_path)?;
    let base = config::base_dir(config_path);
    cfg.validate()?;
    let out = resolve(&base, &cfg.output_dir);
    create_dir(&out)?;
    let mut report = RunReport::new("toy", &cfg)?;

    let maps = default_family();
    let q0 = toy_base(&cfg, cfg.n_samples, 0)?;
    let family = location_scatter_family(&q0, &maps)?;
    let lambda = BarycentricCoordinates::uniform(maps.len());
    let oracle = family_barycenter_map(&maps, &lambda)?;
    let fresh = toy_base(&cfg, cfg.reference_samples, 1)?;
    let reference = EmpiricalMeasure::uniform(oracle.apply(fresh.points())?)?;
    let w2 = |m: &EmpiricalMeasure| w2_to_reference(m, &reference, child_seed(cfg.seed, 9));

    let mut table = Table::new(&["solver", "w2_to_ref"]);
    let mut timings = Table::new(&["solver", "wall_ms"]);
    let samplers: Vec<&dyn Sampler> = family.iter().map(|m| m as &dyn Sampler).collect();
    let flow_cfg = EmpiricalFlowConfig { seed: child_seed(cfg.seed, 2), ..cfg.empirical.clone() };
    let init = run_flow(&samplers, &EmpiricalFlowConfig { n_iter: 0, ..flow_cfg.clone() })?.measure;
    table.push(vec!["init".into(), num(w2(init.base())?)]);
    println!("toy: init w2_to_ref {}", num(w2(init.base())?));

    for solver in &cfg.solvers {
        let t = Instant::now();
        let (result, trace) = match solver {
            ToySolver::Wgf => {
                let run = run_flow(&samplers, &flow_cfg)?;
                (run.measure.base().clone(), Some(run.trace))
            }
            ToySolver::WgfGmm => {
                let em = EmOptions { seed: child_seed(cfg.seed, 3), ..cfg.em.clone() };
                let fits = family
                    .iter()
                    .map(|m| Ok(em_fit(m.points(), None, &em)?.gmm))
                    .collect::<CliResult<Vec<LabeledGmm>>>()?;
                let gmm_cfg = baryflow::flow_gmm::GmmFlowConfig { seed: child_seed(cfg.seed, 4), ..cfg.gmm.clone() };
                let run = run_gmm_flow(&fits, &gmm_cfg, None)?;
                let draw = sample_reparam(&run.gmm, cfg.reference_samples, child_seed(cfg.seed, 5));
                (EmpiricalMeasure::uniform(draw.points)?, Some(run.trace))
            }
            ToySolver::FixedPoint => {
                let fp = EmpiricalFlowConfig { seed: child_seed(cfg.seed, 6), ..cfg.fixed_point.clone() };
                (fixed_point_baseline(&family, &fp)?.base().clone(), None)
            }
        };
        let wall = ms(t);
        let dist = w2(&result)?;
        println!("toy: {} w2_to_ref {} ({wall:.0} ms)", solver.name(), num(dist));
        table.push(vec![solver.name().into(), num(dist)]);
        timings.push(vec![solver.name().into(), format!("{wall:.1}")]);
        report.time(solver.name(), wall);
        if let Some(trace) = trace {
            let name = format!("trace_{}.csv", solver.name());
            write_text(&out, &name, &trace_csv(&trace))?;
            report.artifacts.push(name);
        }
    }
    write_text(&out, "table.csv", &table.to_csv())?;
    write_text(&out, "timings.csv", &timings.to_csv())?;
    report.artifacts.extend(["table.csv".to_string(), "timings.csv".to_string()]);
    report.time("total", ms(start));
    report.write(&out)?;
    println!("toy: artifacts in {}", out.display());
    Ok(())
}

/// Per-seed data of an adaptation run.
fn msda_data(cfg: &MsdaRunConfig, base: &Path, seed: u64) -> CliResult<(Vec<LabeledEmpiricalMeasure>, TargetDomain)> {
    if let Some(task) = &cfg.data.synthetic {
        let data = synthetic_msda(&task.specs()?, seed)?;
        return Ok((data.sources, data.target));
    }
    let column = Some(cfg.data.label_column.as_str());
    let sets = cfg.data.sources.iter().map(|p| read_dataset(base, p, column)).collect::<CliResult<Vec<_>>>()?;
    let names = sets[0].label_names.clone();
    if sets.iter().any(|s| s.label_names != names) {
        return Err(CliError::config("source files carry different label sets"));
    }
    let target_path = cfg.data.target.as_ref().ok_or_else(|| CliError::config("data.target is missing"))?;
    let target = read_dataset(base, target_path, column)?;
    let ids = target
        .labels
        .as_ref()
        .expect("read with a label column")
        .iter()
        .map(|&i| {
            let name = &target.label_names[i];
            names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| CliError::config(format!("target label \"{name}\" does not occur in the sources")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let sources = sets.iter().map(|s| s.labeled()).collect::<baryflow::Result<Vec<_>>>()?;
    Ok((sources, TargetDomain { features: target.measure, labels: EvaluationLabels::new(ids) }))
}

fn combo_config(cfg: &MsdaRunConfig, combo: Combo, seed: u64) -> MsdaConfig {
    let mut m = MsdaConfig { seed, ..cfg.msda.clone() };
    for f in [&mut m.flow.functional, &mut m.gmm.functional] {
        f.target_weight = if combo.uses_potential() { cfg.potential_weight } else { 0.0 };
        if combo.uses_interaction() {
            f.repulsion_weight = cfg.interaction_weight;
            f.repulsion_margin = cfg.interaction_margin;
        } else {
            f.repulsion_weight = 0.0;
        }
    }
    m
}

#[derive(Debug, Clone, Serialize)]
struct AblationRow {
    combo: &'static str,
    accuracy_source_only: f64,
    accuracy_adapted: f64,
    n_seeds: usize,
}

/// `baryflow msda`: adaptation accuracy for each functional combination,
/// averaged over seeds.
pub fn msda(config_path: &Path) -> CliResult<()> {
    let start = Instant::now();
    let cfg: MsdaRunConfig = config::load(config_path)?;
    let base = config::base_dir(config_path);
    cfg.validate(&base)?;
    let out = resolve(&base, &cfg.output_dir);
    create_dir(&out)?;
    let mut report = RunReport::new("msda", &cfg)?;
    println!("msda: {} combinations x {} seeds", cfg.combos.len(), cfg.n_seeds);

    let seeds: Vec<u64> = (0..cfg.n_seeds as u64).map(|s| child_seed(cfg.seed, s)).collect();
    let runs: Vec<Vec<MsdaReport>> = seeds
        .par_iter()
        .map(|&seed| {
            let (sources, target) = msda_data(&cfg, &base, seed)?;
            cfg.combos
                .iter()
                .map(|&combo| Ok(msda_adapt(&sources, &target, &combo_config(&cfg, combo, seed))?))
                .collect::<CliResult<Vec<_>>>()
        })
        .collect::<CliResult<_>>()?;

    let mut table = Table::new(&["combo", "accuracy_source_only", "accuracy_adapted", "n_seeds"]);
    let mut per_seed = Table::new(&["combo", "seed", "accuracy_source_only", "accuracy_adapted"]);
    let mut timings = Table::new(&["combo", "seed", "barycenter_ms", "alignment_ms", "classification_ms"]);
    let mut rows = Vec::new();
    for (c, combo) in cfg.combos.iter().enumerate() {
        let n = seeds.len() as f64;
        let src = runs.iter().map(|r| r[c].accuracy_source_only).sum::<f64>() / n;
        let adapted = runs.iter().map(|r| r[c].accuracy_adapted).sum::<f64>() / n;
        println!("msda: {:<6} source-only {} adapted {}", combo.name(), num(src), num(adapted));
        table.push(vec![combo.name().into(), num(src), num(adapted), seeds.len().to_string()]);
        rows.push(AblationRow { combo: combo.name(), accuracy_source_only: src, accuracy_adapted: adapted, n_seeds: seeds.len() });
        for (s, r) in runs.iter().enumerate() {
            let r = &r[c];
            per_seed.push(vec![combo.name().into(), s.to_string(), num(r.accuracy_source_only), num(r.accuracy_adapted)]);
            let t = r.timings;
            timings.push(vec![
                combo.name().into(),
                s.to_string(),
                format!("{:.1}", t.barycenter_ms),
                format!("{:.1}", t.alignment_ms),
                format!("{:.1}", t.classification_ms),
            ]);
        }
    }
    write_text(&out, "ablation.csv", &table.to_csv())?;
    write_text(&out, "runs.csv", &per_seed.to_csv())?;
    write_text(&out, "timings.csv", &timings.to_csv())?;
    report.artifacts.extend(["ablation.csv", "runs.csv", "timings.csv"].map(String::from));
    report.results = Some(serde_json::to_value(&rows).map_err(|e| baryflow::Error::Parse(e.to_string()))?);
    report.time("total", ms(start));
    report.write(&out)?;
    println!("msda: artifacts in {}", out.display());
    Ok(())
}

/// `baryflow gen`: write a generated dataset as CSV files.
pub fn gen(config_path: &Path) -> CliResult<()> {
    let start = Instant::now();
    let cfg: GenConfig = config::load(config_path)?;
    let base = config::base_dir(config_path);
    cfg.validate()?;
    let out = resolve(&base, &cfg.output_dir);
    create_dir(&out)?;
    let mut report = RunReport::new("gen", &cfg)?;
    let mut written = Vec::new();
    match &cfg.dataset {
        GenDataset::SwissRoll { n, noise } => {
            let m = swiss_roll(*n, *noise, cfg.seed)?;
            save_csv(out.join("swiss_roll.csv"), m.points(), Some(&m.hard_labels()))?;
            written.push("swiss_roll.csv".to_string());
        }
        GenDataset::GaussianCloud { n, d } => {
            let m = gaussian_cloud(*n, *d, cfg.seed)?;
            save_csv(out.join("gaussian_cloud.csv"), m.points(), None)?;
            written.push("gaussian_cloud.csv".to_string());
        }
        GenDataset::Family { base: kind, n, noise } => {
            let toy = ToyConfig { seed: cfg.seed, base: *kind, noise: *noise, ..ToyConfig::default() };
            let q0 = toy_base(&toy, *n, 0)?;
            let maps = default_family();
            let labels = q0.hard_labels();
            save_csv(out.join("base.csv"), q0.points(), Some(&labels))?;
            written.push("base.csv".to_string());
            for (k, m) in location_scatter_family(&q0, &maps)?.iter().enumerate() {
                let name = format!("member_{k}.csv");
                save_csv(out.join(&name), m.points(), Some(&labels))?;
                written.push(name);
            }
            let oracle = family_barycenter_map(&maps, &BarycentricCoordinates::uniform(maps.len()))?;
            save_csv(out.join("reference.csv"), &oracle.apply(q0.points())?, Some(&labels))?;
            let doc = serde_json::json!({ "maps": maps, "barycenter_map": oracle });
            let text = serde_json::to_string_pretty(&doc).map_err(|e| baryflow::Error::Parse(e.to_string()))?;
            write_text(&out, "maps.json", &(text + "\n"))?;
            written.extend(["reference.csv".to_string(), "maps.json".to_string()]);
        }
        GenDataset::Msda { task } => {
            let data = synthetic_msda(&task.specs()?, cfg.seed)?;
            for (k, s) in data.sources.iter().enumerate() {
                let name = format!("source_{k}.csv");
                save_csv(out.join(&name), s.points(), Some(&s.hard_labels()))?;
                written.push(name);
            }
            save_csv(out.join("target.csv"), data.target.features.points(), Some(data.target.labels.as_slice()))?;
            written.push("target.csv".to_string());
        }
    }
    println!("gen: wrote {}", written.join(", "));
    report.artifacts = written;
    report.time("total", ms(start));
    report.write(&out)?;
    Ok(())
}

/// Which schema `baryflow validate` checks a file against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ConfigKind {
    Barycenter,
    Toy,
    Msda,
    Gen,
}

/// `baryflow validate`: parse and check a config without running it.
pub fn validate(kind: ConfigKind, config_path: &Path) -> CliResult<()> {
    let base = config::base_dir(config_path);
    match kind {
        ConfigKind::Barycenter => config::load::<BarycenterConfig>(config_path)?.validate(&base)?,
        ConfigKind::Toy => config::load::<ToyConfig>(config_path)?.validate()?,
        ConfigKind::Msda => config::load::<MsdaRunConfig>(config_path)?.validate(&base)?,
        ConfigKind::Gen => config::load::<GenConfig>(config_path)?.validate()?,
    }
    println!("{}: ok", config_path.display());
    Ok(())
}
