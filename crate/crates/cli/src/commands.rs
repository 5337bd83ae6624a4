use std::fs;
use std::path::{Path, PathBuf};

use empnn::check::{run_suite, Suite};
use empnn::net::{ModelCheckpoint, ModelKind};
use empnn::train::{evaluate, synth_dataset, train as run_training, EvalMode, Family};
use empnn::{build_graph, lattice_params, read_materials, write_materials, GraphPolicy, Ingest, Material};

use crate::cli::{CheckArgs, EvalArgs, FamilyArg, GenArgs, InspectArgs, ModeArg, TrainArgs};
use crate::config::RunConfig;
use crate::Failure;

type Outcome = Result<(), Failure>;

fn ingest(wrap: bool) -> Ingest {
    if wrap {
        Ingest::Wrap
    } else {
        Ingest::Strict
    }
}

fn write(path: &Path, contents: &str) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))
}

fn load(path: &Path, wrap: bool) -> Result<Vec<Material>, Failure> {
    read_materials(path, ingest(wrap)).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

pub fn gen(args: &GenArgs) -> Outcome {
    let family = match args.family {
        FamilyArg::Cubic => Family::Cubic,
        FamilyArg::Orthorhombic => Family::Orthorhombic,
        FamilyArg::Triclinic => Family::Triclinic,
        FamilyArg::Mixed => Family::Mixed,
    };
    if args.n < 10 {
        return Err(Failure::Usage(format!("--n must be at least 10 for an 80/10/10 split, got {}", args.n)));
    }
    let data = synth_dataset(args.n, family, args.seed)?;
    let n_train = args.n * 8 / 10;
    let n_val = args.n / 10;
    create_dir(&args.out)?;
    let splits = [("train.jsonl", &data[..n_train]), ("val.jsonl", &data[n_train..n_train + n_val]), ("test.jsonl", &data[n_train + n_val..])];
    for (name, part) in splits {
        write_materials(&args.out.join(name), part)?;
        println!("{}: {} records", args.out.join(name).display(), part.len());
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Outcome {
    let cfg = RunConfig::resolve(args)?;
    let (data, out) = (cfg.data.clone().unwrap_or_default(), cfg.out.clone().unwrap_or_default());
    let train_set = load(&data.join("train.jsonl"), cfg.wrap)?;
    let val_path = data.join("val.jsonl");
    let val_set = if val_path.exists() { load(&val_path, cfg.wrap)? } else { Vec::new() };
    let init = ModelCheckpoint::init(cfg.model.clone(), cfg.train.seed)?;
    let outcome = run_training(init, &train_set, &val_set, &cfg.train)?;
    create_dir(&out)?;
    outcome.checkpoint.save(&out.join("checkpoint.json"))?;
    write(&out.join("curve.csv"), &outcome.curve_csv())?;
    let first = outcome.curve.first().map_or(f64::NAN, |p| p.loss);
    let last = outcome.curve.last().map_or(f64::NAN, |p| p.loss);
    println!("steps {}  initial loss {first:.6}  final loss {last:.6}", outcome.curve.len());
    if let Some(p) = outcome.curve.iter().rev().find(|p| p.val_length.is_some()) {
        println!("validation length {:.6}  angle {:.6}", p.val_length.unwrap_or(f64::NAN), p.val_angle.unwrap_or(f64::NAN));
    }
    println!("wrote {}", out.join("checkpoint.json").display());
    Ok(())
}

fn dataset_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("test.jsonl")
    } else {
        data.to_path_buf()
    }
}

pub fn eval(args: &EvalArgs) -> Outcome {
    if !args.checkpoint.is_file() {
        return Err(Failure::Usage(format!("checkpoint {} does not exist", args.checkpoint.display())));
    }
    let ckpt = ModelCheckpoint::load(&args.checkpoint).map_err(|e| Failure::Usage(format!("{}: {e}", args.checkpoint.display())))?;
    let is_ff = ckpt.config.kind == ModelKind::FfBaseline;
    if args.baseline.is_some() != is_ff {
        let what = if is_ff { "a baseline" } else { "an EMPNN" };
        return Err(Failure::Usage(format!("{} holds {what} model; pass --baseline ff exactly for baseline checkpoints", args.checkpoint.display())));
    }
    let data = load(&dataset_path(&args.data), args.wrap)?;
    let mode = match args.mode {
        ModeArg::Denoise => EvalMode::Denoise,
        ModeArg::Reconstruct => EvalMode::Reconstruct,
    };
    let report = evaluate(&ckpt, &data, args.sigma, args.seed, mode)?;
    let aggregate = serde_json::to_string_pretty(&report.aggregate_json()).map_err(|e| Failure::Run(e.to_string()))?;
    if let Some(out) = &args.out {
        create_dir(out)?;
        write(&out.join("metrics.csv"), &report.to_csv())?;
        write(&out.join("density.csv"), &report.density_csv())?;
        write(&out.join("aggregate.json"), &format!("{aggregate}\n"))?;
    }
    for (id, why) in &report.failures {
        eprintln!("sample {id} failed: {why}");
    }
    println!("{aggregate}");
    if report.n == 0 {
        return Err(Failure::Run("every sample failed".into()));
    }
    Ok(())
}

pub fn check(args: &CheckArgs) -> Outcome {
    let suites = if args.suite.is_empty() || args.suite.iter().any(|s| s == "all") {
        Suite::ALL.to_vec()
    } else {
        args.suite.iter().map(|s| Suite::parse(s)).collect::<empnn::Result<Vec<_>>>()?
    };
    println!("{:<22} {:>7} {:>9} {:>9}  result", "suite", "trials", "failures", "seconds");
    let mut failed = Vec::new();
    for suite in suites {
        let trials = args.trials.unwrap_or(suite.default_trials());
        let report = run_suite(suite, trials, args.seed);
        let verdict = if report.passed() { "PASS" } else { "FAIL" };
        println!("{:<22} {:>7} {:>9} {:>9.2}  {verdict}", suite.name(), trials, report.failures.len(), report.seconds);
        failed.extend(report.failures);
    }
    if failed.is_empty() {
        return Ok(());
    }
    for f in &failed {
        let record = serde_json::to_string(f).map_err(|e| Failure::Run(e.to_string()))?;
        eprintln!("{record}");
        eprintln!("  replay: empnn check --suite {} --trials 1 --seed {}", f.suite.name(), f.seed);
    }
    Err(Failure::Run(format!("{} failing trial(s)", failed.len())))
}

pub fn inspect(args: &InspectArgs) -> Outcome {
    let data = load(&args.data, args.wrap)?;
    let m = data.get(args.index).ok_or_else(|| Failure::Usage(format!("index {} out of range for {} records", args.index, data.len())))?;
    let policy = match args.cutoff {
        Some(c) => GraphPolicy::uniform_cutoff(c, m.n_atoms()),
        None => GraphPolicy::Knn(args.knn),
    };
    let graph = build_graph(m, &policy)?;
    let p = lattice_params(&m.rho)?;
    println!("id        {}", m.id);
    println!("atoms     {}  species {:?}", m.n_atoms(), m.z);
    println!("lengths   {:.4} {:.4} {:.4} Å", p.a, p.b, p.c);
    println!("angles    {:.3} {:.3} {:.3} °", p.alpha, p.beta, p.gamma);
    println!("volume    {:.4} Å³  density {:.5} atoms/Å³", m.rho.determinant().abs(), m.density());
    println!("graph     {:?}: {} edges, {} triplets", policy, graph.edges.len(), graph.triplets.len());
    if let Some(path) = &args.graph_json {
        write(path, &format!("{}\n", graph.to_json()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
