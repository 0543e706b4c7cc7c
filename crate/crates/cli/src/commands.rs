//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use htmm::em::{fit, EmConfig};
use htmm::hdp::{run_chain_with, write_diagnostics, ChainConfig, HdpHypers};
use htmm::inference::score_dataset;
use htmm::model::sample as sample_tree;
use htmm::tree::{load_dataset, random_skeleton, Dataset};
use htmm::{Error, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{required, GibbsArgs, SampleArgs, ScoreArgs, TrainArgs, ValidateArgs};
use crate::CliError;

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn metadata(command: &str, seed: Option<u64>, config: Value, results: Value) -> String {
    let doc = json!({
        "tool": "htmm",
        "version": VERSION,
        "command": command,
        "seed": seed,
        "config": { command: config },
        "results": results,
    });
    serde_json::to_string_pretty(&doc).expect("metadata serializes") + "\n"
}

fn to_value<T: serde::Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("config serializes")
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Model::from_json(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_nonempty(path: &Path, labels: usize, max_outdegree: usize) -> Result<Dataset, CliError> {
    let dataset = load_dataset(path, labels, max_outdegree).map_err(|e| match e {
        Error::Io { .. } => CliError::Model(e),
        other => CliError::Usage(format!("{}: {other}", path.display())),
    })?;
    if dataset.is_empty() {
        return Err(CliError::Usage(format!("dataset {} contains no trees", path.display())));
    }
    Ok(dataset)
}

/// Writes to `path`, or to stdout when there is none.
fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| CliError::io(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".metadata.json");
    PathBuf::from(name)
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let d = EmConfig::default();
    let args = TrainArgs {
        seed: Some(args.seed.unwrap_or(d.seed)),
        max_iters: Some(args.max_iters.unwrap_or(d.max_iters)),
        rel_tol: Some(args.rel_tol.unwrap_or(d.rel_tol)),
        smoothing: Some(args.smoothing.unwrap_or(d.smoothing)),
        init_concentration: Some(args.init_concentration.unwrap_or(d.init_concentration)),
        restarts: Some(args.restarts.unwrap_or(d.restarts)),
        ..args
    };
    let data = required(args.data.clone(), "data")?;
    let out = required(args.out.clone(), "out")?;
    let kind = required(args.kind, "kind")?;
    let states = required(args.states, "states")?;
    let labels = required(args.labels, "labels")?;
    let max_outdegree = required(args.max_outdegree, "max_outdegree")?;
    let em = EmConfig {
        max_iters: args.max_iters.unwrap(),
        rel_tol: args.rel_tol.unwrap(),
        smoothing: args.smoothing.unwrap(),
        seed: args.seed.unwrap(),
        init_concentration: args.init_concentration.unwrap(),
        restarts: args.restarts.unwrap(),
    };
    em.validate()?;
    if states == 0 {
        return Err(CliError::Usage("--states must be at least 1".into()));
    }
    let dataset = load_nonempty(&data, labels, max_outdegree)?;
    create_dir(&out)?;

    let result = fit(kind, &dataset, states, &em)?;
    let report = score_dataset(&result.model, &dataset)?;

    write_file(&out.join("model.json"), &(result.model.to_json() + "\n"))?;
    let mut trace = Vec::new();
    result.trace.write_csv(&mut trace).expect("writing to memory");
    write_file(&out.join("trace.csv"), &String::from_utf8(trace).expect("ascii"))?;
    let results = json!({
        "final_log_likelihood": report.total,
        "perplexity": report.perplexity,
        "trees": dataset.len(),
        "nodes": report.nodes,
        "iterations": result.trace.iterations(),
        "converged": result.trace.converged,
        "best_restart_seed": result.trace.seed,
        "parameters": result.model.parameter_count(),
    });
    write_file(
        &out.join("metadata.json"),
        &metadata("train", Some(em.seed), to_value(&args), results),
    )?;
    println!(
        "{kind} C={states}: log-likelihood {:.6} after {} iterations; wrote {}",
        report.total,
        result.trace.iterations(),
        out.display()
    );
    Ok(())
}

pub fn score(args: ScoreArgs) -> Result<(), CliError> {
    let model_path = required(args.model.clone(), "model")?;
    let data = required(args.data.clone(), "data")?;
    let model = load_model(&model_path)?;
    let dataset = load_nonempty(&data, model.num_labels(), model.max_outdegree())?;
    let report = score_dataset(&model, &dataset)?;
    let mut out = output(args.out.as_ref())?;
    report
        .write_to(&mut out)
        .and_then(|_| out.flush())
        .map_err(|e| CliError::io(args.out.as_deref().unwrap_or(Path::new("<stdout>")), e))?;
    if let Some(path) = &args.out {
        let results = json!({ "total": report.total, "nodes": report.nodes, "perplexity": report.perplexity });
        write_file(&sidecar(path), &metadata("score", None, to_value(&args), results))?;
    }
    Ok(())
}

pub fn sample(args: SampleArgs) -> Result<(), CliError> {
    let args = SampleArgs {
        seed: Some(args.seed.unwrap_or(0)),
        ..args
    };
    let seed = args.seed.unwrap();
    let model = load_model(&required(args.model.clone(), "model")?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skeletons = match &args.data {
        Some(path) => {
            // Labels of skeleton trees are ignored, so any label is accepted.
            load_nonempty(path, usize::MAX, model.max_outdegree())?.trees().to_vec()
        }
        None => {
            let trees = required(args.trees, "trees")?;
            let nodes = args.nodes.unwrap_or(10);
            let branching = args.branching.unwrap_or(0.5);
            if !(0.0..=1.0).contains(&branching) {
                return Err(CliError::Usage(format!(
                    "--branching must be in [0, 1], got {branching}"
                )));
            }
            (0..trees)
                .map(|_| random_skeleton(&mut rng, nodes, model.max_outdegree(), branching))
                .collect()
        }
    };
    let args = if args.data.is_none() {
        SampleArgs {
            nodes: Some(args.nodes.unwrap_or(10)),
            branching: Some(args.branching.unwrap_or(0.5)),
            ..args
        }
    } else {
        args
    };
    let mut text = String::new();
    for skeleton in &skeletons {
        text.push_str(&sample_tree(&model, skeleton, &mut rng)?.to_string());
        text.push('\n');
    }
    let mut out = output(args.out.as_ref())?;
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| CliError::io(args.out.as_deref().unwrap_or(Path::new("<stdout>")), e))?;
    if let Some(path) = &args.out {
        let results = json!({ "trees": skeletons.len() });
        write_file(
            &sidecar(path),
            &metadata("sample", Some(seed), to_value(&args), results),
        )?;
    }
    Ok(())
}

pub fn gibbs(args: GibbsArgs) -> Result<(), CliError> {
    let data = required(args.data.clone(), "data")?;
    let out = required(args.out.clone(), "out")?;
    let labels = required(args.labels, "labels")?;
    let max_outdegree = required(args.max_outdegree, "max_outdegree")?;
    let d = HdpHypers::new(max_outdegree);
    let mut alpha_position = args.alpha_position.clone().unwrap_or_else(|| vec![1.0]);
    if alpha_position.len() == 1 {
        alpha_position = vec![alpha_position[0]; max_outdegree];
    }
    let args = GibbsArgs {
        seed: Some(args.seed.unwrap_or(0)),
        sweeps: Some(args.sweeps.unwrap_or(1000)),
        burn_in: Some(args.burn_in.unwrap_or(200)),
        thin: Some(args.thin.unwrap_or(10)),
        chains: Some(args.chains.unwrap_or(1)),
        truncation: Some(args.truncation.unwrap_or(d.truncation)),
        gamma: Some(args.gamma.unwrap_or(d.gamma)),
        alpha_position: Some(alpha_position),
        alpha_transition: Some(args.alpha_transition.unwrap_or(d.alpha_transition)),
        alpha_switch: Some(args.alpha_switch.unwrap_or(d.alpha_switch)),
        emission_base: Some(args.emission_base.unwrap_or(d.emission_base)),
        assignment_move: Some(args.assignment_move.unwrap_or_default()),
        ..args
    };
    let hypers = HdpHypers {
        gamma: args.gamma.unwrap(),
        alpha_position: args.alpha_position.clone().unwrap(),
        alpha_transition: args.alpha_transition.unwrap(),
        alpha_switch: args.alpha_switch.unwrap(),
        emission_base: args.emission_base.unwrap(),
        truncation: args.truncation.unwrap(),
    };
    hypers.validate(max_outdegree)?;
    let chain_config = ChainConfig {
        sweeps: args.sweeps.unwrap(),
        burn_in: args.burn_in.unwrap(),
        thin: args.thin.unwrap(),
        seed: args.seed.unwrap(),
        assignment_move: args.assignment_move.unwrap(),
    };
    chain_config.validate()?;
    let chains = args.chains.unwrap();
    if chains == 0 {
        return Err(CliError::Usage("--chains must be at least 1".into()));
    }
    let dataset = load_nonempty(&data, labels, max_outdegree)?;
    create_dir(&out)?;
    let meta_path = out.join("metadata.json");
    let config = to_value(&args);
    let pending = json!({ "complete": false, "chains": chains });
    write_file(
        &meta_path,
        &metadata("gibbs", Some(chain_config.seed), config.clone(), pending),
    )?;

    let summaries = (0..chains)
        .into_par_iter()
        .map(|c| {
            run_one_chain(
                &dataset,
                &hypers,
                &chain_config,
                c as u64,
                &out.join(format!("chain-{c}")),
            )
        })
        .collect::<Result<Vec<Value>, CliError>>()?;

    let results = json!({ "complete": true, "chains": summaries });
    write_file(&meta_path, &metadata("gibbs", Some(chain_config.seed), config, results))?;
    for s in &summaries {
        println!(
            "chain {}: {} samples, active-state mode {}, median {}",
            s["chain"], s["samples"], s["active_state_mode"], s["active_state_median"]
        );
    }
    Ok(())
}

fn run_one_chain(
    dataset: &Dataset,
    hypers: &HdpHypers,
    config: &ChainConfig,
    stream: u64,
    dir: &Path,
) -> Result<Value, CliError> {
    create_dir(dir)?;
    let diag_path = dir.join("diagnostics.csv");
    let file = File::create(&diag_path).map_err(|e| CliError::io(&diag_path, e))?;
    let mut diag = BufWriter::new(file);
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path, source }
    };
    write_diagnostics(&[], &mut diag).map_err(io_err(&diag_path))?;
    let chain = run_chain_with(dataset, hypers, config, stream, |record, sample| {
        writeln!(
            diag,
            "{},{},{}",
            record.sweep, record.joint_log_prob, record.active_states
        )
        .and_then(|_| diag.flush())
        .map_err(io_err(&diag_path))?;
        if let Some(s) = sample {
            let path = dir.join(format!("sample-{:06}.json", s.sweep));
            fs::write(&path, s.to_json() + "\n").map_err(io_err(&path))?;
        }
        Ok(())
    })?;
    Ok(json!({
        "chain": stream,
        "stream": stream,
        "samples": chain.samples.len(),
        "active_state_mode": chain.active_state_mode(config.burn_in),
        "active_state_median": chain.active_state_median(config.burn_in),
        "final_joint_log_prob": chain.diagnostics.last().map(|d| d.joint_log_prob),
    }))
}

pub fn validate(args: ValidateArgs) -> Result<(), CliError> {
    if args.data.is_none() && args.model.is_none() {
        return Err(CliError::Usage(
            "nothing to validate: pass --data and/or --model".into(),
        ));
    }
    let model = args.model.as_deref().map(load_model).transpose()?;
    let mut report = serde_json::Map::new();
    if let Some(m) = &model {
        report.insert(
            "model".into(),
            json!({
                "kind": m.kind(),
                "C": m.num_states(),
                "M": m.num_labels(),
                "L": m.max_outdegree(),
                "parameters": m.parameter_count(),
            }),
        );
    }
    if let Some(path) = &args.data {
        let labels = required(args.labels.or(model.as_ref().map(Model::num_labels)), "labels")?;
        let max_outdegree = required(
            args.max_outdegree.or(model.as_ref().map(Model::max_outdegree)),
            "max_outdegree",
        )?;
        let dataset = load_dataset(path, labels, max_outdegree)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let used = dataset
            .trees()
            .iter()
            .flat_map(|t| t.labels())
            .max()
            .map_or(0, |x| x + 1);
        let mut label_counts = vec![0usize; used];
        for tree in dataset.trees() {
            for x in tree.labels() {
                label_counts[x] += 1;
            }
        }
        report.insert(
            "data".into(),
            json!({
                "trees": dataset.len(),
                "nodes": dataset.node_count(),
                "max_depth": dataset.trees().iter().map(|t| t.depth()).max(),
                "max_slots": dataset.trees().iter().map(|t| t.max_slots()).max(),
                "label_counts": label_counts,
            }),
        );
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&Value::Object(report)).expect("report serializes")
    );
    Ok(())
}
