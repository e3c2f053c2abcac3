use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use vidseg::augment::{apply_policy, rain_preset, AugmentConfig, Disturbance, DisturbancePolicy, NoiseKind};
use vidseg::bench::{bench as run_bench, BenchConfig};
use vidseg::checkpoint;
use vidseg::dataset::{generate_dataset, load_split, read_sample, write_sample, DatasetConfig, DatasetManifest};
use vidseg::flops::{network_cost_report, UnitComparison, UnitCostInputs};
use vidseg::seed::derive_seed;
use vidseg::train::{evaluate, summarize, train as run_train, EvalDisturbance, RunResult, TrainConfig};
use vidseg::{Error, Network, NetworkConfig, Result, UnitDesign, Version};

use crate::{BenchArgs, DisturbanceArgs, EvalArgs, FlopsArgs, GenerateArgs, PerturbArgs, TrainArgs};

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Refuses to write a dataset into a directory that already has content.
fn fresh_root(path: &Path) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(path) {
        if entries.next().is_some() {
            return Err(Error::Invalid(format!("{} exists and is not empty", path.display())));
        }
    }
    Ok(())
}

pub fn generate(base: &Path, a: GenerateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<DatasetConfig>(p)?,
        None => DatasetConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.n_train {
        cfg.n_train = v;
    }
    if let Some(v) = a.n_val {
        cfg.n_val = v;
    }
    if let Some(v) = a.classes {
        cfg.num_classes = v;
    }
    if let Some(v) = a.frames {
        cfg.frames = v;
    }
    if let Some(v) = a.height {
        cfg.height = v;
    }
    if let Some(v) = a.width {
        cfg.width = v;
    }
    if let Some(v) = a.max_speed {
        cfg.max_speed = v;
    }
    cfg.validate()?;
    let root = a.out.unwrap_or_else(|| base.join("data"));
    fresh_root(&root)?;
    let manifest = generate_dataset(&root, &cfg)?;
    println!(
        "wrote {} train and {} val sequences ({} frames, {}x{}, {} classes) to {}",
        cfg.n_train,
        cfg.n_val,
        manifest.frames,
        manifest.height,
        manifest.width,
        manifest.num_classes,
        root.display()
    );
    Ok(())
}

fn check_compatible(net: &NetworkConfig, manifest: &DatasetManifest) -> Result<()> {
    if net.num_classes != manifest.num_classes {
        return Err(Error::Config(format!(
            "network has {} classes but the dataset has {}",
            net.num_classes, manifest.num_classes
        )));
    }
    if (net.height, net.width) != (manifest.height, manifest.width) {
        return Err(Error::Config(format!(
            "network expects {}x{} frames but the dataset has {}x{}",
            net.height, net.width, manifest.height, manifest.width
        )));
    }
    Ok(())
}

pub fn train(base: &Path, a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = &a.net_version {
        cfg.network.version = v.parse::<Version>()?;
    }
    if let Some(v) = &a.design {
        cfg.network.unit_design = v.parse::<UnitDesign>()?;
    }
    if let Some(v) = a.iters {
        cfg.total_iters = v;
    }
    if let Some(v) = a.lr {
        cfg.initial_lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.repetitions {
        cfg.repetitions = v;
    }
    if let Some(v) = a.clip_norm {
        cfg.clip_norm = v;
    }
    if a.no_augment {
        cfg.augment = AugmentConfig::disabled();
    }
    let manifest = DatasetManifest::load(&a.data)?;
    // The architecture is extent-agnostic, so frames set the extents.
    cfg.network.height = manifest.height;
    cfg.network.width = manifest.width;
    check_compatible(&cfg.network, &manifest)?;
    cfg.validate()?;
    let warm = match &a.warm_start {
        Some(p) => Some(checkpoint::load(p)?.0),
        None => None,
    };
    let train_set = load_split(&a.data, &manifest, "train")?;
    let val_set = load_split(&a.data, &manifest, "val")?;

    let out = a.out.unwrap_or_else(|| base.join("train"));
    create_dir(&out)?;
    let mut runs = Vec::new();
    for r in 0..cfg.repetitions {
        let rep = TrainConfig {
            seed: cfg.repetition_seed(r),
            ..cfg.clone()
        };
        let log_every = a.log_every;
        let outcome = run_train(
            &rep,
            &train_set,
            warm.as_ref().map(|n: &Network<f32>| &n.params),
            &mut |it, loss| {
                if log_every > 0 && it % log_every == 0 {
                    eprintln!("rep {r} iter {it:>6} loss {loss:.5}");
                }
            },
        )?;
        let ckpt = out.join(format!("rep_{r}.ckpt"));
        checkpoint::save(&ckpt, &outcome.network, json!({ "train_config": rep, "repetition": r }))?;
        write_json(&out.join(format!("rep_{r}_losses.json")), &outcome.losses)?;
        let metrics = evaluate(&outcome.network, &val_set, None)?;
        write_json(&out.join(format!("rep_{r}_metrics.json")), &metrics)?;
        let mut flat = std::collections::BTreeMap::new();
        summarize("val", &metrics, &mut flat);
        runs.push(flat);
        eprintln!(
            "rep {r}: val mIoU {:.4}, accuracy {:.4}",
            metrics.miou, metrics.accuracy
        );
    }
    let result = RunResult::from_runs(runs)?;
    write_json(&out.join("result.json"), &json!({ "config": cfg, "result": result }))?;
    println!("{:<22} {:>10} {:>10}", "metric", "mean", "std");
    for (k, m) in &result.mean {
        println!("{k:<22} {m:>10.4} {:>10.4}", result.std[k]);
    }
    Ok(())
}

impl DisturbanceArgs {
    fn parse(&self) -> Result<Option<EvalDisturbance>> {
        let mut chosen = Vec::new();
        if let Some(level) = &self.rain {
            chosen.push(Disturbance::Rain(rain_preset(level.parse()?)));
        }
        if let Some(sigma) = self.gaussian {
            chosen.push(Disturbance::Noise(NoiseKind::Gaussian { sigma }));
        }
        if let Some(p) = self.salt_pepper {
            chosen.push(Disturbance::Noise(NoiseKind::SaltPepper { p }));
        }
        if let Some(f) = self.polygon {
            chosen.push(Disturbance::Polygon {
                max_vertices: 8,
                max_extent_fraction: f,
            });
        }
        if let Some(factor) = self.brightness {
            chosen.push(Disturbance::Brightness { factor });
        }
        if chosen.len() > 1 {
            return Err(Error::Invalid("choose at most one disturbance".into()));
        }
        let policy = match self.policy.as_str() {
            "last" => DisturbancePolicy::LastFrameOnly,
            "all" => DisturbancePolicy::AllFrames,
            other => match other.strip_prefix("subset:").map(str::parse::<f64>) {
                Some(Ok(p)) if (0.0..=1.0).contains(&p) => DisturbancePolicy::RandomSubset { p },
                _ => {
                    return Err(Error::Invalid(format!(
                        "policy must be last, all or subset:<p in [0,1]>, got {other:?}"
                    )))
                }
            },
        };
        Ok(chosen.pop().map(|disturbance| EvalDisturbance {
            policy,
            disturbance,
            seed: self.disturb_seed,
        }))
    }
}

pub fn eval(base: &Path, a: EvalArgs) -> Result<()> {
    let disturbance = a.disturbance.parse()?;
    let (net, _) = checkpoint::load(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.data)?;
    check_compatible(&net.config, &manifest)?;
    let samples = load_split(&a.data, &manifest, &a.split)?;
    let metrics = evaluate(&net, &samples, disturbance.as_ref())?;
    let out = a.out.unwrap_or_else(|| base.join("metrics.json"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(&out, &metrics)?;
    println!("accuracy {:.4}", metrics.accuracy);
    println!("mIoU     {:.4}", metrics.miou);
    if let Some(f) = metrics.mfip_percent {
        println!("mFIP     {f:.3}%");
    }
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(())
}

pub fn perturb(base: &Path, a: PerturbArgs) -> Result<()> {
    let d = a
        .disturbance
        .parse()?
        .ok_or_else(|| Error::Invalid("perturb needs a disturbance (--rain, --gaussian, ...)".into()))?;
    let manifest = DatasetManifest::load(&a.data)?;
    let out: PathBuf = a.out.unwrap_or_else(|| base.join("perturbed"));
    fresh_root(&out)?;
    for (split, entries) in &manifest.splits {
        for (i, entry) in entries.iter().enumerate() {
            let sample = read_sample(&a.data, &manifest, entry)?;
            let disturbed = apply_policy(&sample, d.policy, &d.disturbance, derive_seed(d.seed, i as u64))?;
            write_sample(&out.join(split).join(&entry.id), &disturbed)?;
        }
    }
    manifest.save(&out)?;
    write_json(
        &out.join("perturbation.json"),
        &json!({ "source": a.data, "policy": d.policy, "disturbance": d.disturbance, "seed": d.seed }),
    )?;
    println!("wrote disturbed copy to {}", out.display());
    Ok(())
}

pub fn flops(a: FlopsArgs) -> Result<()> {
    let inputs = UnitCostInputs {
        i: a.i,
        o: a.o,
        kx: a.k,
        ky: a.k,
        dx: a.dx.unwrap_or(a.d),
        dy: a.dy.unwrap_or(a.d),
    };
    let units = UnitComparison::new(inputs)?;
    print!("{}", units.table());
    let network = match &a.network {
        Some(p) => {
            let report = network_cost_report(&read_json::<NetworkConfig>(p)?)?;
            print!("{}", report.table());
            Some(report)
        }
        None => None,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({ "units": units, "network": network }))?
    );
    Ok(())
}

pub fn bench(base: &Path, a: BenchArgs) -> Result<()> {
    let designs = a
        .designs
        .split(',')
        .map(|s| s.trim().parse::<UnitDesign>())
        .collect::<Result<Vec<_>>>()?;
    let cfg = BenchConfig {
        designs,
        i: a.i,
        o: a.o,
        kx: a.kx.unwrap_or(a.k),
        ky: a.ky.unwrap_or(a.k),
        dx: a.dx.unwrap_or(a.d),
        dy: a.dy.unwrap_or(a.d),
        repeats: a.repeats,
        warmup: a.warmup,
        seed: 0,
    };
    let report = run_bench(&cfg)?;
    let out = a.out.unwrap_or_else(|| base.join("bench.json"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(&out, &report)?;
    print!("{}", report.table());
    let order: Vec<&str> = report.ordering.iter().map(|d| d.name()).collect();
    println!("fastest to slowest: {}", order.join(" < "));
    Ok(())
}
