use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use scone::bench::{fit_exponent, peak_ratios, run_scaling, write_records, BenchConfig, EpochMode, ScalingField, SubsetRule};
use scone::clustering::{embedding_graph, resolution_sweep, SweepMode};
use scone::data::{generate_synthetic, Likelihood, OmicsView, SyntheticSpec};
use scone::evaluation::{ami, ari, logrank};
use scone::io::{read_labels, read_survival, write_atomic, write_labels, write_survival, KvConfig, Table};
use scone::model::{ModelConfig, SconeModel};
use scone::numerics::SeededRng;
use scone::training::{infer_latent, train_with, TrainConfig};
use scone::SconeError;

use crate::manifest::{manifest_path, verify_input, RunManifest};
use crate::{BenchArgs, CliError, ClusterArgs, EmbedArgs, EvaluateArgs, PreprocessArgs, SynthArgs, TrainArgs};

type CliResult = Result<(), CliError>;

/// Missing inputs are usage errors; inputs with a recorded digest must match it.
fn require(path: &Path) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("input file not found: {}", path.display())));
    }
    verify_input(path)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Runtime(SconeError::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn view_name(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

pub fn synth(args: &SynthArgs) -> CliResult {
    require(&args.spec)?;
    let mut cfg = KvConfig::load(&args.spec)?;
    if let Some(seed) = args.seed {
        cfg.set("seed", seed);
    }
    let spec = SyntheticSpec::from_config(&cfg)?;
    let data = generate_synthetic(&spec)?;
    create_dir(&args.out)?;
    let mut outputs = Vec::new();
    for v in &data.views {
        let path = args.out.join(format!("{}.tsv", v.name));
        v.save(&path)?;
        outputs.push(path);
    }
    let labels = args.out.join("labels.tsv");
    write_labels(&labels, &data.sample_ids, &data.labels)?;
    let survival = args.out.join("survival.tsv");
    write_survival(&survival, &data.survival)?;
    outputs.extend([labels, survival]);
    let mut manifest = RunManifest::new("synth", Some(spec.seed));
    for key in cfg.keys() {
        manifest = manifest.config(key, cfg.get_str(key).unwrap_or_default());
    }
    manifest.write(&args.out.join("manifest.json"), &[args.spec.clone()], &outputs)?;
    Ok(())
}

pub fn preprocess(args: &PreprocessArgs) -> CliResult {
    require(&args.input)?;
    let mut view = OmicsView::load(&args.input, Likelihood::Gaussian)?;
    for step in &args.steps {
        let step = step.trim();
        view = match step.split_once(':') {
            Some(("counts", target)) => {
                let target: f64 = target
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad counts target in step {step:?}")))?;
                view.normalize_counts(target)?
            }
            None if step == "clr" => view.clr_transform()?,
            None if step == "zscore" => view.zscore(),
            _ => return Err(CliError::Usage(format!("unknown preprocessing step {step:?}"))),
        };
    }
    view.save(&args.out)?;
    RunManifest::new("preprocess", None)
        .config("steps", args.steps.join(","))
        .write(&manifest_path(&args.out), &[args.input.clone()], &[args.out.clone()])?;
    Ok(())
}

fn parse_view_arg(arg: &str) -> Result<(PathBuf, Likelihood), CliError> {
    if let Some((prefix, rest)) = arg.split_once(':') {
        if let Ok(l) = prefix.parse::<Likelihood>() {
            return Ok((PathBuf::from(rest), l));
        }
    }
    Ok((PathBuf::from(arg), Likelihood::Gaussian))
}

pub fn train(args: &TrainArgs) -> CliResult {
    let specs = args.views.iter().map(|v| parse_view_arg(v)).collect::<Result<Vec<_>, _>>()?;
    for (path, _) in &specs {
        require(path)?;
    }
    let mut cfg = match &args.config {
        Some(path) => {
            require(path)?;
            KvConfig::load(path)?
        }
        None => KvConfig::default(),
    };
    let overrides: [(&str, Option<String>); 10] = [
        ("seed", args.seed.map(|v| v.to_string())),
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("k_s", args.k_s.clone()),
        ("k_k", args.k_k.map(|v| v.to_string())),
        ("learning_rate", args.learning_rate.map(|v| v.to_string())),
        ("alpha", args.alpha.map(|v| v.to_string())),
        ("beta", args.beta.map(|v| v.to_string())),
        ("hidden", args.hidden.map(|v| v.to_string())),
        ("latent", args.latent.map(|v| v.to_string())),
        ("checkpoint_interval", args.checkpoint_interval.map(|v| v.to_string())),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, v);
        }
    }
    let config = TrainConfig::from_config(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let views = specs
        .iter()
        .map(|(p, l)| OmicsView::load(p, *l))
        .collect::<scone::Result<Vec<_>>>()?;
    create_dir(&args.out)?;
    let interval = config.checkpoint_interval;
    let out = args.out.clone();
    let (model, log) = train_with(&views, &config, |record, model| {
        if interval > 0 && (record.epoch + 1) % interval == 0 {
            model.save(&out.join(format!("checkpoint_{:05}.json", record.epoch + 1)))?;
        }
        Ok(())
    })?;
    let checkpoint = args.out.join("checkpoint.json");
    model.save(&checkpoint)?;
    let log_path = args.out.join("train_log.jsonl");
    log.write(&log_path)?;
    let snapshot = config.to_config();
    let mut manifest = RunManifest::new("train", Some(config.seed));
    for key in snapshot.keys() {
        manifest = manifest.config(key, snapshot.get_str(key).unwrap_or_default());
    }
    let inputs: Vec<PathBuf> = specs.iter().map(|s| s.0.clone()).chain(args.config.clone()).collect();
    manifest.write(&manifest_path(&checkpoint), &inputs, &[checkpoint.clone(), log_path])?;
    Ok(())
}

pub fn embed(args: &EmbedArgs) -> CliResult {
    require(&args.checkpoint)?;
    for p in &args.views {
        require(p)?;
    }
    let model = SconeModel::load(&args.checkpoint)?;
    let by_name: HashMap<String, &PathBuf> = args.views.iter().map(|p| (view_name(p), p)).collect();
    let mut views = Vec::new();
    for d in &model.views {
        let path = by_name.get(&d.name).ok_or_else(|| {
            CliError::Usage(format!("no view file named {}.* for checkpoint view {}", d.name, d.name))
        })?;
        views.push(OmicsView::load(path, d.likelihood)?);
    }
    if views.len() != args.views.len() {
        return Err(CliError::Usage(format!(
            "{} view files given, the checkpoint has {} views",
            args.views.len(),
            views.len()
        )));
    }
    let latent = infer_latent(&model, &views)?;
    let table = Table {
        row_ids: latent.union_ids,
        columns: (0..latent.z.cols()).map(|c| format!("z{c}")).collect(),
        values: latent.z,
    };
    table.write(&args.out)?;
    let mut inputs = vec![args.checkpoint.clone()];
    inputs.extend(args.views.iter().cloned());
    RunManifest::new("embed", None)
        .config("k_k", model.config.k_k)
        .write(&manifest_path(&args.out), &inputs, &[args.out.clone()])?;
    Ok(())
}

pub fn cluster(args: &ClusterArgs) -> CliResult {
    require(&args.embedding)?;
    let mode = match args.target_k {
        Some(k) => SweepMode::TargetK(k),
        None => SweepMode::BestModularity,
    };
    let table = Table::read(&args.embedding)?;
    let graph = embedding_graph(&table.values, args.k_k)?;
    let p = resolution_sweep(&graph, mode, &mut SeededRng::new(args.seed))?;
    write_labels(&args.out, &table.row_ids, &p.labels)?;
    RunManifest::new("cluster", Some(args.seed))
        .config("mode", match mode {
            SweepMode::TargetK(k) => format!("target-k {k}"),
            SweepMode::BestModularity => "best-modularity".into(),
        })
        .config("k_k", args.k_k)
        .config("resolution", p.resolution)
        .config("communities", p.count)
        .config("modularity", p.modularity)
        .write(&manifest_path(&args.out), &[args.embedding.clone()], &[args.out.clone()])?;
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult {
    require(&args.partition)?;
    for p in args.truth.iter().chain(&args.survival) {
        require(p)?;
    }
    let partition = read_labels(&args.partition)?;
    let assigned: HashMap<&str, usize> = partition.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    let mut clusters: Vec<usize> = partition.iter().map(|p| p.1).collect();
    clusters.sort_unstable();
    clusters.dedup();
    let mut metrics = json!({
        "samples": partition.len(),
        "clusters": clusters.len(),
    });
    if let Some(path) = &args.truth {
        let truth: HashMap<String, usize> = read_labels(path)?.into_iter().collect();
        let mut t = Vec::with_capacity(partition.len());
        for (id, _) in &partition {
            let label = truth.get(id).ok_or_else(|| {
                SconeError::Contract(format!("sample {id} has no label in {}", path.display()))
            })?;
            t.push(*label);
        }
        let pred: Vec<usize> = partition.iter().map(|p| p.1).collect();
        metrics["ari"] = json!(ari(&t, &pred)?);
        metrics["ami"] = json!(ami(&t, &pred)?);
    }
    if let Some(path) = &args.survival {
        let records: Vec<_> = read_survival(path)?
            .into_iter()
            .filter_map(|mut r| {
                let g = *assigned.get(r.sample_id.as_str())?;
                r.group = g;
                Some(r)
            })
            .collect();
        let result = logrank(&records)?;
        metrics["logrank"] = json!({
            "samples": records.len(),
            "statistic": result.statistic,
            "degrees_of_freedom": result.degrees_of_freedom,
            "p_value": result.p_value,
            "neg_log10_p": result.neg_log10_p,
        });
    }
    let text = serde_json::to_string_pretty(&metrics).map_err(|e| SconeError::Format(e.to_string()))?;
    write_atomic(&args.out, format!("{text}\n").as_bytes())?;
    let inputs: Vec<PathBuf> = std::iter::once(args.partition.clone())
        .chain(args.truth.clone())
        .chain(args.survival.clone())
        .collect();
    RunManifest::new("evaluate", None).write(&manifest_path(&args.out), &inputs, &[args.out.clone()])?;
    Ok(())
}

pub fn bench(args: &BenchArgs) -> CliResult {
    let rule = match args.ks.as_str() {
        "half" => SubsetRule::Half,
        other => match other.parse::<f64>() {
            Ok(f) if f > 0.0 && f <= 0.5 => SubsetRule::Fraction(f),
            _ => return Err(CliError::Usage(format!("--ks must be `half` or a fraction in (0, 0.5], got {other:?}"))),
        },
    };
    let cfg = BenchConfig {
        model: ModelConfig {
            hidden: args.hidden,
            latent: args.latent,
            k_k: args.k_k,
        },
        seed: args.seed,
        ..BenchConfig::default()
    };
    let records = run_scaling(&args.n_list, rule, args.reps, &cfg).map_err(|e| match e {
        SconeError::Parameter(m) => CliError::Usage(m),
        other => CliError::Runtime(other),
    })?;
    write_records(&args.out, &records)?;
    for (n, ratio) in peak_ratios(&records) {
        println!("n={n}\tpeak ratio subset/full {ratio:.3}");
    }
    let mut manifest = RunManifest::new("bench", Some(args.seed))
        .config("n", args.n_list.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
        .config("ks", &args.ks)
        .config("reps", args.reps);
    for mode in [EpochMode::SubsetPair, EpochMode::FullGraph] {
        let subset: Vec<_> = records.iter().filter(|r| r.mode == mode).cloned().collect();
        for (field, name) in [(ScalingField::PeakBytes, "peak_bytes"), (ScalingField::EpochMs, "epoch_ms")] {
            if let Ok(e) = fit_exponent(&subset, field) {
                println!("{mode}\t{name} exponent {e:.3}");
                manifest = manifest.config(&format!("exponent.{mode}.{name}"), e);
            }
        }
    }
    manifest.write(&manifest_path(&args.out), &[], &[args.out.clone()])?;
    Ok(())
}
