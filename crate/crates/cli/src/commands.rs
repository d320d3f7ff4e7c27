use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::Serialize;

use eba_core::config::ExperimentConfig;
use eba_core::data::{generate_rotated_benchmark, load_feature_csv, save_feature_csv, DomainDataset};
use eba_core::inference::{
    argmax, class_feature_centers, evaluate_dataset, predict_sample, step_sweep, EvalOptions,
    LatentMode,
};
use eba_core::seeds;
use eba_core::trainer::{load_bundle, ModelBundle, Trainer};

use crate::manifest::RunManifest;
use crate::{EvalArgs, GenArgs, SweepArgs, TraceArgs, TrainArgs};

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => {
            let cfg = ExperimentConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn gen(args: GenArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    fs::create_dir_all(&args.out)?;
    let mut man = RunManifest::start("gen", args.seed);
    if let Some(p) = &args.config {
        man.add_input(p)?;
    }
    man.set_config(&cfg)?;

    let (sources, targets) = generate_rotated_benchmark(&cfg.benchmark, args.seed)?;
    for (kind, angles, sets) in [
        ("source", &cfg.benchmark.source_angles, &sources),
        ("target", &cfg.benchmark.target_angles, &targets),
    ] {
        for (angle, ds) in angles.iter().zip(sets) {
            let path = args.out.join(ExperimentConfig::domain_file(kind, *angle));
            save_feature_csv(&path, ds)?;
            man.add_output(&path);
        }
    }
    println!(
        "wrote {} source and {} target domains to {}",
        sources.len(),
        targets.len(),
        args.out.display()
    );
    man.finish(&args.out, "ok")
}

fn load_domain_csv(
    path: &Path,
    expected_dim: Option<usize>,
    classes: u32,
    man: &mut RunManifest,
) -> Result<DomainDataset> {
    man.add_input(path)?;
    let ds = load_feature_csv(path, expected_dim)?;
    ds.validate(classes)?;
    Ok(ds)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = args.iterations {
        cfg.train.iterations = m;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(k) = args.steps {
        cfg.train.sgld.num_steps = k;
    }
    if args.no_latent {
        cfg.train.use_latent = false;
    }
    cfg.validate()?;

    fs::create_dir_all(&args.out)?;
    let mut man = RunManifest::start("train", cfg.train.seed);
    if let Some(p) = &args.config {
        man.add_input(p)?;
    }

    let classes = cfg.benchmark.classes;
    let (mut trainer, sources) = if let Some(ck) = &args.resume {
        man.add_input(ck)?;
        let mut t = Trainer::load_checkpoint(ck)?;
        if let Some(m) = args.iterations {
            t.cfg.iterations = m;
        }
        let mut sources = Vec::with_capacity(t.bundle.domain_ids.len());
        for &id in &t.bundle.domain_ids {
            let path = args
                .data
                .join(ExperimentConfig::domain_file("source", id as f64));
            sources.push(load_domain_csv(
                &path,
                Some(t.bundle.input_dim),
                t.bundle.num_classes as u32,
                &mut man,
            )?);
        }
        (t, sources)
    } else {
        let mut sources = Vec::with_capacity(cfg.benchmark.source_angles.len());
        for &angle in &cfg.benchmark.source_angles {
            let path = args.data.join(ExperimentConfig::domain_file("source", angle));
            sources.push(load_domain_csv(
                &path,
                Some(cfg.benchmark.dim),
                classes,
                &mut man,
            )?);
        }
        let ids: Vec<i32> = sources.iter().map(|d| d.domain).collect();
        let t = Trainer::new(
            cfg.train.clone(),
            cfg.benchmark.dim,
            classes as usize,
            &ids,
        )?;
        (t, sources)
    };
    man.set_config(&trainer.cfg)?;

    let loss_path = args.out.join("loss_history.csv");
    let mut w = csv::Writer::from_path(&loss_path)
        .with_context(|| format!("creating {}", loss_path.display()))?;
    w.write_record([
        "iteration",
        "domain",
        "classification",
        "kl",
        "pos_energy",
        "neg_energy",
        "adapted",
        "total",
    ])?;
    let outcome = trainer.train_observed(&sources, Some(&args.out), &mut |r| {
        w.write_record([
            r.iteration.to_string(),
            r.domain_id.to_string(),
            fmt(r.loss.classification),
            fmt(r.loss.kl),
            fmt(r.loss.pos_energy),
            fmt(r.loss.neg_energy),
            fmt(r.loss.adapted),
            fmt(r.loss.total),
        ])?;
        Ok(())
    });
    w.flush()?;
    man.add_output(&loss_path);
    let mut checkpoints: Vec<PathBuf> = fs::read_dir(&args.out)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("checkpoint_") && n.ends_with(".bin"))
                .unwrap_or(false)
        })
        .collect();
    checkpoints.sort();
    for p in &checkpoints {
        man.add_output(p);
    }

    match outcome {
        Ok(()) => {
            println!(
                "trained {} iterations over {} domains; final checkpoint at {}",
                trainer.iteration,
                trainer.bundle.num_domains(),
                args.out.join("checkpoint_final.bin").display()
            );
            man.finish(&args.out, "ok")
        }
        Err(e) => {
            man.finish(&args.out, "failed")?;
            Err(anyhow!(e).context("training aborted; partial loss history retained"))
        }
    }
}

fn discover_targets(data: &Path) -> Result<Vec<f64>> {
    let mut angles = Vec::new();
    for entry in fs::read_dir(data).with_context(|| format!("reading {}", data.display()))? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_prefix("target_").and_then(|s| s.strip_suffix(".csv")) {
            if let Ok(a) = stem.parse::<f64>() {
                angles.push(a);
            }
        }
    }
    if angles.is_empty() {
        return Err(eba_core::Error::usage(format!(
            "no target_*.csv files in {}",
            data.display()
        ))
        .into());
    }
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(angles)
}

fn load_targets(
    data: &Path,
    requested: Option<&[f64]>,
    bundle: &ModelBundle,
    limit: Option<usize>,
    man: &mut RunManifest,
) -> Result<Vec<DomainDataset>> {
    let angles = match requested {
        Some(a) => a.to_vec(),
        None => discover_targets(data)?,
    };
    let mut out = Vec::with_capacity(angles.len());
    for angle in angles {
        let path = data.join(ExperimentConfig::domain_file("target", angle));
        let mut ds = load_domain_csv(
            &path,
            Some(bundle.input_dim),
            bundle.num_classes as u32,
            man,
        )?;
        if let Some(n) = limit {
            let keep: Vec<usize> = (0..ds.len().min(n)).collect();
            ds = ds.subset(&keep);
        }
        out.push(ds);
    }
    Ok(out)
}

#[derive(Serialize)]
struct TargetMetrics {
    domain: i32,
    num_samples: usize,
    pre_ensemble_accuracy: f64,
    post_ensemble_accuracy: f64,
    pre_accuracy_per_source: Vec<f64>,
    post_accuracy_per_source: Vec<f64>,
    mean_pre_energy: f64,
    mean_post_energy: f64,
}

#[derive(Serialize)]
struct OverallMetrics {
    num_samples: usize,
    pre_ensemble_accuracy: f64,
    post_ensemble_accuracy: f64,
}

#[derive(Serialize)]
struct MetricsDoc {
    options: EvalOptions,
    source_domains: Vec<i32>,
    targets: Vec<TargetMetrics>,
    overall: OverallMetrics,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let mut man = RunManifest::start("eval", args.seed);
    man.add_input(&args.checkpoint)?;
    let (bundle, tcfg) = load_bundle(&args.checkpoint)?;

    let mut opts = EvalOptions {
        sgld: tcfg.sgld.clone(),
        num_draws: args.draws,
        latent: args.latent.into(),
        aggregation: args.aggregation.into(),
        seed: args.seed,
        record_traces: false,
    };
    opts.sgld.record_trace = false;
    if let Some(k) = args.steps {
        opts.sgld.num_steps = k;
    }
    man.set_config(&opts)?;

    let targets = load_targets(&args.data, args.targets.as_deref(), &bundle, args.limit, &mut man)?;

    let pred_path = args.out.join("predictions.csv");
    let mut w = csv::Writer::from_path(&pred_path)?;
    let mut header = vec!["target_domain".to_string(), "sample".into(), "true_label".into()];
    for id in &bundle.domain_ids {
        header.push(format!("pre_d{id}"));
    }
    for id in &bundle.domain_ids {
        header.push(format!("post_d{id}"));
    }
    header.push("ensemble_label".into());
    for c in 0..bundle.num_classes {
        header.push(format!("p{c}"));
    }
    w.write_record(&header)?;

    let mut docs = Vec::new();
    let mut total = 0usize;
    let mut pre_hits = 0.0;
    let mut post_hits = 0.0;
    for ds in &targets {
        let summary = evaluate_dataset(&bundle, ds, &opts)?;
        for (i, rec) in summary.records.iter().enumerate() {
            let mut row = vec![
                ds.domain.to_string(),
                i.to_string(),
                ds.labels[i].to_string(),
            ];
            for p in &rec.pre_per_source {
                row.push(argmax(p).to_string());
            }
            for p in &rec.post_per_source {
                row.push(argmax(p).to_string());
            }
            row.push(rec.label.to_string());
            for v in &rec.ensemble {
                row.push(fmt(*v));
            }
            w.write_record(&row)?;
        }
        total += summary.num_samples;
        pre_hits += summary.pre_ensemble_accuracy * summary.num_samples as f64;
        post_hits += summary.post_ensemble_accuracy * summary.num_samples as f64;
        docs.push(TargetMetrics {
            domain: ds.domain,
            num_samples: summary.num_samples,
            pre_ensemble_accuracy: summary.pre_ensemble_accuracy,
            post_ensemble_accuracy: summary.post_ensemble_accuracy,
            pre_accuracy_per_source: summary.pre_accuracy_per_source,
            post_accuracy_per_source: summary.post_accuracy_per_source,
            mean_pre_energy: summary.mean_pre_energy,
            mean_post_energy: summary.mean_post_energy,
        });
    }
    w.flush()?;
    man.add_output(&pred_path);

    let doc = MetricsDoc {
        options: opts,
        source_domains: bundle.domain_ids.clone(),
        targets: docs,
        overall: OverallMetrics {
            num_samples: total,
            pre_ensemble_accuracy: pre_hits / total as f64,
            post_ensemble_accuracy: post_hits / total as f64,
        },
    };
    let metrics_path = args.out.join("metrics.json");
    fs::write(&metrics_path, serde_json::to_string_pretty(&doc)? + "\n")?;
    man.add_output(&metrics_path);

    println!("target  pre      post     gain");
    for t in &doc.targets {
        println!(
            "{:<7} {:<8.4} {:<8.4} {:+.4}",
            t.domain,
            t.pre_ensemble_accuracy,
            t.post_ensemble_accuracy,
            t.post_ensemble_accuracy - t.pre_ensemble_accuracy
        );
    }
    println!(
        "overall {:<8.4} {:<8.4} {:+.4}",
        doc.overall.pre_ensemble_accuracy,
        doc.overall.post_ensemble_accuracy,
        doc.overall.post_ensemble_accuracy - doc.overall.pre_ensemble_accuracy
    );
    man.finish(&args.out, "ok")
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let mut man = RunManifest::start("sweep", args.seed);
    man.add_input(&args.checkpoint)?;
    let (bundle, tcfg) = load_bundle(&args.checkpoint)?;

    let base = EvalOptions {
        sgld: tcfg.sgld.clone(),
        num_draws: args.draws,
        latent: LatentMode::Prior,
        aggregation: eba_core::inference::Aggregation::Ensemble,
        seed: args.seed,
        record_traces: false,
    };
    man.set_config(&base)?;
    let targets = load_targets(&args.data, args.targets.as_deref(), &bundle, args.limit, &mut man)?;
    let total: usize = targets.iter().map(|d| d.len()).sum();

    let sweep_path = args.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&sweep_path)?;
    w.write_record(["mode", "steps", "mean_energy", "accuracy"])?;
    println!("mode    steps  energy      accuracy");
    for mode in &args.modes {
        let mut opts = base.clone();
        opts.latent = (*mode).into();
        let mut acc = vec![0.0; args.steps.len()];
        let mut energy = vec![0.0; args.steps.len()];
        for ds in &targets {
            let rows = step_sweep(&bundle, ds, &args.steps, &opts)?;
            let wgt = ds.len() as f64 / total as f64;
            for (i, row) in rows.iter().enumerate() {
                acc[i] += wgt * row.accuracy;
                energy[i] += wgt * row.mean_energy;
            }
        }
        for (i, &k) in args.steps.iter().enumerate() {
            w.write_record([
                opts.latent.to_string(),
                k.to_string(),
                fmt(energy[i]),
                fmt(acc[i]),
            ])?;
            println!(
                "{:<7} {:<6} {:<11.6} {:.4}",
                opts.latent.to_string(),
                k,
                energy[i],
                acc[i]
            );
        }
    }
    w.flush()?;
    man.add_output(&sweep_path);
    man.finish(&args.out, "ok")
}

pub fn trace(args: TraceArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let mut man = RunManifest::start("trace", args.seed);
    man.add_input(&args.checkpoint)?;
    let (bundle, tcfg) = load_bundle(&args.checkpoint)?;

    let angle = match args.target {
        Some(a) => a,
        None => discover_targets(&args.data)?[0],
    };
    let path = args.data.join(ExperimentConfig::domain_file("target", angle));
    let ds = load_domain_csv(&path, Some(bundle.input_dim), bundle.num_classes as u32, &mut man)?;

    let mut opts = EvalOptions {
        sgld: tcfg.sgld.clone(),
        num_draws: args.draws,
        latent: args.latent.into(),
        aggregation: eba_core::inference::Aggregation::Ensemble,
        seed: args.seed,
        record_traces: true,
    };
    opts.sgld.record_trace = true;
    if let Some(k) = args.steps {
        opts.sgld.num_steps = k;
    }
    man.set_config(&opts)?;

    let centers = if opts.latent == LatentMode::Oracle {
        Some(class_feature_centers(&bundle, &ds)?)
    } else {
        None
    };

    let trace_path = args.out.join("traces.csv");
    let mut w = csv::Writer::from_path(&trace_path)?;
    let mut header = vec![
        "sample".to_string(),
        "domain".into(),
        "chain".into(),
        "step".into(),
        "energy".into(),
        "predicted".into(),
    ];
    for j in 0..bundle.feature_dim {
        header.push(format!("f{j}"));
    }
    for c in 0..bundle.num_classes {
        header.push(format!("p{c}"));
    }
    w.write_record(&header)?;

    for &s in &args.samples {
        if s >= ds.len() {
            return Err(eba_core::Error::usage(format!(
                "sample {s} out of range; target has {} rows",
                ds.len()
            ))
            .into());
        }
        let center = centers.as_ref().map(|cs| cs[ds.labels[s] as usize].as_slice());
        let rec = predict_sample(
            &bundle,
            ds.features.row_slice(s),
            &opts,
            seeds::derive(opts.seed, s as u64),
            center,
        )?;
        let traces = rec
            .traces
            .as_ref()
            .ok_or_else(|| anyhow!("tracing was requested but no trace came back"))?;
        for (d_idx, trace) in traces.iter().enumerate() {
            for step in &trace.steps {
                let probs = step
                    .probs
                    .as_ref()
                    .ok_or_else(|| anyhow!("trace step lacks class probabilities"))?;
                for chain in 0..step.features.rows {
                    let mut row = vec![
                        s.to_string(),
                        bundle.domain_ids[d_idx].to_string(),
                        chain.to_string(),
                        step.step.to_string(),
                        fmt(step.energies.data[chain]),
                        argmax(probs.row_slice(chain)).to_string(),
                    ];
                    for v in step.features.row_slice(chain) {
                        row.push(fmt(*v));
                    }
                    for v in probs.row_slice(chain) {
                        row.push(fmt(*v));
                    }
                    w.write_record(&row)?;
                }
            }
        }
    }
    w.flush()?;
    man.add_output(&trace_path);
    println!(
        "traced {} samples across {} domains into {}",
        args.samples.len(),
        bundle.num_domains(),
        trace_path.display()
    );
    man.finish(&args.out, "ok")
}
