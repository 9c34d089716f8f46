use std::io::Write;

use rand::seq::index::sample;
use serde::Serialize;
use subtomo::datasets::{
    gen_blobs, gen_blobs_with_test, gen_planted_manifold_classes, load_csv, permute_labels, subsample, write_csv,
    Dataset, Split,
};
use subtomo::fields::{ConfidenceField, SlabField};
use subtomo::fitting::{dstar_table, extract_dstar, CriticalDim, FitResult};
use subtomo::geometry::{
    affine_distance_stats, cap_gaussian_width, cap_miss_frequency, fit_distance_scale, gordon_miss_bound, sample_cut,
    AffineDistanceStats, DistanceScaleFit, GordonBound,
};
use subtomo::linalg::gaussian_vec;
use subtomo::metrics::{data_effective_dimension, SpectrumSummary};
use subtomo::neuralnet::{load_model, save_model, train as train_model, MlpModel, TrainConfig};
use subtomo::rng::{derive_rng, derive_seed};
use subtomo::studies::{analyze_sweep, run_study, serde_kind, StudyKindName, TrendSummary};
use subtomo::tomography::{make_target, sweep, OffsetPolicy, ProbeSetup};

use crate::config::{config_hash, DataSource, DimDataSource, FieldConfig};
use crate::output::{csv_writer, finish, write_json, Provenance};
use crate::{CliError, Context};

const TAG_FIELD: u64 = 11;
const TAG_SWEEP: u64 = 12;
const TAG_DISTANCE: u64 = 13;
const TAG_DATA: u64 = 14;
const TAG_INIT: u64 = 15;
const TAG_TRAIN: u64 = 16;
const TAG_PERMUTE: u64 = 17;
const TAG_SUBSAMPLE: u64 = 18;
const TAG_CENTERS: u64 = 19;
const TAG_WIDTH: u64 = 20;
const TAG_GORDON: u64 = 21;

#[derive(Serialize)]
struct ThresholdRow {
    threshold: f64,
    d_star: Option<CriticalDim>,
    error: Option<String>,
}

#[derive(Serialize)]
struct FitReport<'a> {
    config_hash: &'a str,
    master_seed: u64,
    field: String,
    target: String,
    fit: &'a FitResult,
    threshold: f64,
    d_star: Option<CriticalDim>,
    d_star_error: Option<String>,
    table: Vec<ThresholdRow>,
}

fn split_result(r: Result<CriticalDim, String>) -> (Option<CriticalDim>, Option<String>) {
    match r {
        Ok(c) => (Some(c), None),
        Err(e) => (None, Some(e)),
    }
}

pub fn tomography(ctx: &Context) -> Result<(), CliError> {
    let cfg = ctx.config.tomography.clone().unwrap_or_default();
    let hash = config_hash("tomography", &cfg);
    let mut rng = derive_rng(ctx.seed, &[TAG_FIELD]);

    let mut data: Option<Dataset> = None;
    let mut center: Option<(Vec<f64>, f64)> = None;
    let field: Box<dyn ConfidenceField> = match &cfg.field {
        FieldConfig::Slab { dim, manifold_dim, half_width, temperature, offset_sigma } => {
            let planted = sample_cut(*dim, *manifold_dim, *dim, &mut rng)?.with_offset(gaussian_vec(&mut rng, *dim))?;
            center = Some((planted.offset().to_vec(), *offset_sigma));
            let t = temperature.unwrap_or(half_width / 8.0);
            Box::new(SlabField::new(planted, *half_width, t, 0, 2)?)
        }
        FieldConfig::Model { model, data: path } => {
            let m = load_model(model).map_err(|e| CliError::Runtime(format!("{}: {e}", model.display())))?;
            let d = load_csv(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            data = Some(d);
            Box::new(m)
        }
        FieldConfig::Toy { data: spec, hidden, train } => {
            eprintln!("training toy model");
            let (m, d) = train_toy(spec, hidden, train, ctx.seed, &mut rng)?;
            data = Some(d);
            Box::new(m)
        }
    };
    let offsets = match (&data, center) {
        (Some(d), _) => OffsetPolicy::Dataset(d),
        (None, Some((c, sigma))) => OffsetPolicy::Gaussian { center: c, sigma },
        (None, None) => unreachable!("every field kind provides offsets"),
    };
    let setup = ProbeSetup { offsets, span: cfg.span };
    let target = make_target(cfg.target.clone(), field.class_count())?;
    eprintln!(
        "probing {} for {} over {} cut dimensions x {} repeats",
        field.describe(),
        target.label(),
        cfg.dims.len(),
        cfg.repeats
    );
    let seed = derive_seed(ctx.seed, &[TAG_SWEEP]);
    let result = sweep(field.as_ref(), &cfg.dims, cfg.repeats, &target, &setup, &cfg.probe, seed)?;

    let path = ctx.out_dir.join("sweep.csv");
    let mut w = csv_writer(&path, &hash, ctx.seed)?;
    result.write_csv(&mut w)?;
    finish(w)?;

    let dim = field.ambient_dim();
    let analysis = analyze_sweep(&result, cfg.threshold, dim)?;
    let (d_star, d_star_error) = split_result(
        extract_dstar(&analysis.fit, cfg.threshold, dim).map_err(|e| e.to_string()),
    );
    let table = dstar_table(&analysis.fit, dim)
        .into_iter()
        .map(|(threshold, r)| {
            let (critical, error) = split_result(r);
            ThresholdRow { threshold, d_star: critical, error }
        })
        .collect();
    let report = FitReport {
        config_hash: &hash,
        master_seed: ctx.seed,
        field: field.describe(),
        target: target.label(),
        fit: &analysis.fit,
        threshold: cfg.threshold,
        d_star,
        d_star_error,
        table,
    };
    write_json(&ctx.out_dir.join("fit_report.json"), &report)?;
    let mut prov = Provenance::new("tomography", &hash, ctx.seed);
    prov.field = Some(field.describe());
    prov.probes_failed = Some(result.failure_count());
    prov.offset_fallbacks = Some(result.fallback_count());
    write_json(&ctx.out_dir.join("provenance.json"), &prov)?;
    match &report.d_star {
        Some(c) => eprintln!("d* at {} = {:.3} (band {:.3}..{:.3})", cfg.threshold, c.d_star, c.band.0, c.band.1),
        None => eprintln!("no crossing at {}: {}", cfg.threshold, report.d_star_error.as_deref().unwrap_or("")),
    }
    Ok(())
}

fn train_toy(
    spec: &subtomo::datasets::BlobSpec,
    hidden: &[usize],
    train: &TrainConfig,
    master: u64,
    rng: &mut subtomo::rng::Rng,
) -> Result<(MlpModel, Dataset), CliError> {
    let data = gen_blobs(spec, rng)?;
    let mut dims = vec![spec.dim];
    dims.extend_from_slice(hidden);
    dims.push(spec.classes);
    let model = MlpModel::new_he(&dims, &mut derive_rng(master, &[TAG_INIT]))?;
    let cfg = TrainConfig { seed: derive_seed(master, &[TAG_TRAIN, train.seed]), ..train.clone() };
    let out = train_model(model, &data, None, &cfg)?;
    Ok((out.model, data))
}

#[derive(Serialize)]
struct DistanceFitReport<'a> {
    config_hash: &'a str,
    master_seed: u64,
    fit: DistanceScaleFit,
    relative_rmse: f64,
}

pub fn affine_distance(ctx: &Context) -> Result<(), CliError> {
    let cfg = ctx.config.affine_distance.clone().unwrap_or_default();
    let hash = config_hash("affine_distance", &cfg);
    let mut jobs = Vec::new();
    for &big_d in &cfg.ambient_dims {
        for &n in cfg.n_values.iter().filter(|&&n| n >= 1 && n <= big_d) {
            for &d in cfg.d_values.iter().filter(|&&d| d >= 1 && d <= big_d) {
                jobs.push((big_d, n, d));
            }
        }
    }
    if jobs.is_empty() {
        return Err(CliError::Config("affine_distance grid is empty".into()));
    }
    eprintln!("measuring {} grid points x {} pairs", jobs.len(), cfg.pairs);
    use rayon::prelude::*;
    let rows: Vec<AffineDistanceStats> = jobs
        .par_iter()
        .map(|&(big_d, n, d)| {
            let mut rng = derive_rng(ctx.seed, &[TAG_DISTANCE, big_d as u64, n as u64, d as u64]);
            affine_distance_stats(big_d, n, d, cfg.pairs, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    let mut w = csv_writer(&ctx.out_dir.join("affine_distance.csv"), &hash, ctx.seed)?;
    writeln!(w, "D,n,d,pairs,mean_dist,std,theory")?;
    for r in &rows {
        writeln!(w, "{},{},{},{},{},{},{}", r.ambient_dim, r.dim_a, r.dim_b, r.pairs, r.mean, r.std, r.theory)?;
    }
    finish(w)?;
    if let Ok(fit) = fit_distance_scale(&rows) {
        eprintln!("fitted scale {:.4}, rmse {:.2}% of curve range", fit.scale, 100.0 * fit.relative_rmse());
        let report = DistanceFitReport { config_hash: &hash, master_seed: ctx.seed, fit, relative_rmse: fit.relative_rmse() };
        write_json(&ctx.out_dir.join("affine_distance_fit.json"), &report)?;
    }
    write_json(&ctx.out_dir.join("provenance.json"), &Provenance::new("affine-distance", &hash, ctx.seed))?;
    Ok(())
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let cfg = ctx.config.train.clone().unwrap_or_default();
    let hash = config_hash("train", &cfg);
    let (mut train_set, test_set) = match &cfg.data {
        DataSource::Blobs { spec, test_per_class } => {
            let (tr, te) = gen_blobs_with_test(spec, *test_per_class, &mut derive_rng(ctx.seed, &[TAG_DATA]))?;
            (tr, Some(te))
        }
        DataSource::Csv { train, test } => {
            let load = |p: &std::path::Path| load_csv(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())));
            let te = match test {
                Some(p) => Some(load(p)?.with_split(Split::Test)),
                None => None,
            };
            (load(train)?, te)
        }
    };
    if let Some(n) = cfg.subsample {
        train_set = subsample(&train_set, n, &mut derive_rng(ctx.seed, &[TAG_SUBSAMPLE]))?;
    }
    if cfg.permute_labels {
        train_set = permute_labels(&train_set, &mut derive_rng(ctx.seed, &[TAG_PERMUTE]));
    }
    let classes = test_set.as_ref().map_or(0, |t| t.class_count()).max(train_set.class_count());
    let mut dims = vec![train_set.dim()];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(classes);
    let model = MlpModel::new_he(&dims, &mut derive_rng(ctx.seed, &[TAG_INIT]))?;
    let tcfg = TrainConfig { seed: derive_seed(ctx.seed, &[TAG_TRAIN, cfg.train.seed]), ..cfg.train.clone() };
    eprintln!("training mlp{dims:?} on {} samples for {} epochs", train_set.len(), tcfg.epochs);
    let out = train_model(model, &train_set, test_set.as_ref(), &tcfg)?;

    save_model(&out.model, &ctx.out_dir.join("model.bin"))?;
    let mut w = csv_writer(&ctx.out_dir.join("metrics.csv"), &hash, ctx.seed)?;
    writeln!(w, "epoch,train_loss,train_acc,test_acc")?;
    for m in &out.history {
        let test = m.test_acc.map(|a| a.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", m.epoch, m.train_loss, m.train_acc, test)?;
    }
    finish(w)?;
    let mut w = csv_writer(&ctx.out_dir.join("train.csv"), &hash, ctx.seed)?;
    write_csv(&train_set, &mut w)?;
    finish(w)?;
    if let Some(te) = &test_set {
        let mut w = csv_writer(&ctx.out_dir.join("test.csv"), &hash, ctx.seed)?;
        write_csv(te, &mut w)?;
        finish(w)?;
    }
    let mut prov = Provenance::new("train", &hash, ctx.seed);
    prov.field = Some(out.model.describe());
    write_json(&ctx.out_dir.join("provenance.json"), &prov)?;
    if let Some(last) = out.history.last() {
        eprintln!("final train accuracy {:.4}, test accuracy {:?}", last.train_acc, last.test_acc);
    }
    Ok(())
}

#[derive(Serialize)]
struct TrendReport<'a> {
    config_hash: &'a str,
    master_seed: u64,
    study: &'a str,
    threshold: f64,
    trend: &'a TrendSummary,
}

pub fn study(ctx: &Context, kind: StudyKindName) -> Result<(), CliError> {
    let cfg = ctx.config.study_or_default(kind);
    let name = serde_kind(kind);
    let hash = config_hash(&format!("study {name}"), &cfg);
    eprintln!("running {name} study");
    let report = run_study(kind, &cfg, ctx.seed)?;
    let mut w = csv_writer(&ctx.out_dir.join(format!("study_{name}.csv")), &hash, ctx.seed)?;
    report.write_csv(&mut w)?;
    finish(w)?;
    let trend = TrendReport { config_hash: &hash, master_seed: ctx.seed, study: name, threshold: report.threshold, trend: &report.trend };
    write_json(&ctx.out_dir.join(format!("study_{name}_trend.json")), &trend)?;
    write_json(&ctx.out_dir.join("provenance.json"), &Provenance::new("study", &hash, ctx.seed))?;
    eprintln!(
        "medians {:?} over grid {:?}: {} inversions, trend {}",
        report.trend.medians,
        report.trend.grid,
        report.trend.inversions,
        if report.trend.holds { "holds" } else { "does not hold" }
    );
    Ok(())
}

pub fn dataset_dim(ctx: &Context) -> Result<(), CliError> {
    let cfg = ctx.config.dataset_dim.clone().unwrap_or_default();
    let hash = config_hash("dataset_dim", &cfg);
    let mut rng = derive_rng(ctx.seed, &[TAG_DATA]);
    let data = match &cfg.data {
        DimDataSource::Planted { spec } => gen_planted_manifold_classes(spec, &mut rng)?,
        DimDataSource::Blobs { spec } => gen_blobs(spec, &mut rng)?,
        DimDataSource::Csv { path } => load_csv(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?,
    };
    if cfg.centers == 0 {
        return Err(CliError::Config("dataset_dim.centers must be at least 1".into()));
    }
    let mut w = csv_writer(&ctx.out_dir.join("metrics.csv"), &hash, ctx.seed)?;
    writeln!(w, "class,pca90,participation,d_effective_mean,d_effective_spread")?;
    for class in 0..data.class_count() {
        let inputs = data.class_inputs(class);
        if inputs.len() < 2 {
            eprintln!("class {class}: fewer than two samples, skipped");
            continue;
        }
        let spectrum = SpectrumSummary::new(&inputs)?;
        let others = data.indices_excluding(&[class]);
        if others.is_empty() {
            return Err(CliError::Config("effective dimension needs points of another class as centers".into()));
        }
        let mut crng = derive_rng(ctx.seed, &[TAG_CENTERS, class as u64]);
        let picks = sample(&mut crng, others.len(), cfg.centers.min(others.len()));
        let mut chosen: Vec<usize> = picks.iter().map(|i| others[i]).collect();
        chosen.sort_unstable();
        let centers: Vec<Vec<f64>> = chosen.iter().map(|&i| data.input(i).to_vec()).collect();
        let mut wrng = derive_rng(ctx.seed, &[TAG_WIDTH, class as u64]);
        let eff = data_effective_dimension(&inputs, &centers, cfg.n_directions, &mut wrng)?;
        writeln!(
            w,
            "{class},{},{},{},{}",
            spectrum.pca_dim(0.9),
            spectrum.participation_ratio().ratio,
            eff.mean,
            eff.spread
        )?;
        eprintln!("class {class}: d_eff {:.3} ± {:.3}", eff.mean, eff.spread);
    }
    finish(w)?;
    write_json(&ctx.out_dir.join("provenance.json"), &Provenance::new("dataset-dim", &hash, ctx.seed))?;
    Ok(())
}

pub fn gordon(ctx: &Context) -> Result<(), CliError> {
    let cfg = ctx.config.gordon.clone().unwrap_or_default();
    let hash = config_hash("gordon", &cfg);
    let big_d = cfg.ambient_dim;
    if cfg.codims.iter().any(|&k| k == 0 || k >= big_d) {
        return Err(CliError::Config(format!("gordon.codims must lie in 1..{big_d}")));
    }
    if cfg.angles.iter().any(|a| !(*a > 0.0 && *a < std::f64::consts::PI)) {
        return Err(CliError::Config("gordon.angles must lie in (0, π)".into()));
    }
    let mut w = csv_writer(&ctx.out_dir.join("gordon.csv"), &hash, ctx.seed)?;
    writeln!(w, "D,angle,width,codim,bound,miss_frequency")?;
    println!("{:>5} {:>7} {:>8} {:>6} {:>8} {:>8}", "D", "angle", "width", "codim", "bound", "miss");
    for (ai, &angle) in cfg.angles.iter().enumerate() {
        let width = cap_gaussian_width(big_d, angle);
        for &k in &cfg.codims {
            let bound = gordon_miss_bound(k, width);
            let miss = if cfg.trials > 0 {
                let mut rng = derive_rng(ctx.seed, &[TAG_GORDON, ai as u64, k as u64]);
                Some(cap_miss_frequency(big_d, angle, k, cfg.trials, &mut rng)?)
            } else {
                None
            };
            let bound_text = match bound {
                GordonBound::Bound(b) => b.to_string(),
                GordonBound::Vacuous => String::new(),
            };
            let miss_text = miss.map(|m| m.to_string()).unwrap_or_default();
            writeln!(w, "{big_d},{angle},{width},{k},{bound_text},{miss_text}")?;
            let shown = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            println!("{big_d:>5} {angle:>7.3} {width:>8.3} {k:>6} {:>8} {:>8}", shown(bound.value()), shown(miss));
        }
    }
    finish(w)?;
    write_json(&ctx.out_dir.join("provenance.json"), &Provenance::new("gordon", &hash, ctx.seed))?;
    Ok(())
}
