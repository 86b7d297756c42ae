//! Command-line front end: synthesis, training, evaluation, verification,
//! and communication benchmarking over one shared configuration.

use std::path::Path;
use std::process::ExitCode;

use fedstgd::config::{ConfigError, RunConfig};
use fedstgd::data::{
    load_dataset, load_partition, split_and_window, synth_diffusion, write_partition,
    write_signals, Checkpoint, DatasetManifest, SplitWindows,
};
use fedstgd::metrics::{evaluate, evaluate_persistence};
use fedstgd::model::{GlobalParams, HyperConfig, GLOBAL_PARAM_NAMES};
use fedstgd::protocol::{
    partition_graph, predict_comm, train_central, train_federated, ProtocolError, TrainData,
};
use fedstgd::tensor::{Activation, Tensor};
use fedstgd::verify::run_all;

const USAGE: &str = "usage: fedstgd <command> [--config=FILE] [--key=value ...]

commands:
  synth          generate a synthetic dataset (manifest, signals, partition)
  train-central  train the approximated model on the unpartitioned graph
  train-fed      train with the client/server collective protocol
  eval           evaluate a checkpoint on the test split
  verify         run the property suite (nonzero exit on any failure)
  bench-comm     compare measured against predicted bytes for 2/4/8 clients

keys mirror the configuration file; see README for the full list.";

const EXIT_PROPERTY_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some((command, rest)) = args.split_first() else {
        eprintln!("{USAGE}");
        return ExitCode::from(EXIT_CONFIG);
    };
    let config = match RunConfig::from_args(rest) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let outcome = match command.as_str() {
        "synth" => cmd_synth(&config),
        "train-central" => cmd_train(&config, true),
        "train-fed" => cmd_train(&config, false),
        "eval" => cmd_eval(&config),
        "verify" => cmd_verify(&config),
        "bench-comm" => cmd_bench_comm(&config),
        other => {
            eprintln!("unknown command '{other}'\n{USAGE}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] fedstgd::data::DataError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Metrics(#[from] fedstgd::metrics::MetricsError),
    #[error("{0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use fedstgd::data::DataError;
        match self {
            CliError::Config(_) | CliError::Invalid(_) => EXIT_CONFIG,
            CliError::Protocol(ProtocolError::Config(_)) => EXIT_CONFIG,
            CliError::Data(
                DataError::Io { .. }
                | DataError::UnknownManifestKey(_)
                | DataError::MissingManifestKey(_),
            ) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}

fn cmd_synth(cfg: &RunConfig) -> Result<u8, CliError> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let series = synth_diffusion(
        cfg.seed,
        cfg.synth_nodes,
        cfg.synth_steps,
        cfg.synth_features,
        cfg.synth_steps_per_day,
        cfg.synth_noise,
    );
    let signal_file = cfg.out_dir.join(format!("{}.csv", cfg.name));
    write_signals(&signal_file, &series)?;
    let partitions = partition_graph(cfg.synth_nodes, cfg.clients, cfg.partition_scheme)?;
    let partition_file = cfg.out_dir.join(format!("{}.partition.csv", cfg.name));
    write_partition(&partition_file, &partitions)?;
    let manifest = DatasetManifest {
        name: cfg.name.clone(),
        num_nodes: cfg.synth_nodes,
        feature_dim: cfg.synth_features,
        steps_per_day: cfg.synth_steps_per_day,
        signal_file,
        partition_file: Some(partition_file),
    };
    let manifest_path = cfg.out_dir.join(format!("{}.manifest", cfg.name));
    manifest.write(&manifest_path)?;
    println!("wrote {}", manifest_path.display());
    Ok(0)
}

struct Prepared {
    manifest: DatasetManifest,
    splits: SplitWindows,
    partitions: Vec<Vec<usize>>,
}

fn prepare(cfg: &RunConfig, hyper: &HyperConfig) -> Result<Prepared, CliError> {
    let manifest_path = cfg
        .manifest
        .clone()
        .ok_or_else(|| CliError::Invalid("this command needs --manifest=PATH".into()))?;
    let manifest = DatasetManifest::read(&manifest_path)?;
    let series = load_dataset(&manifest)?;
    let splits = split_and_window(
        &series,
        hyper.t_in,
        hyper.t_out,
        (7, 1, 2),
        manifest.steps_per_day,
    )?;
    let partitions = match &manifest.partition_file {
        Some(path) if path.exists() => load_partition(path, manifest.num_nodes)?,
        _ => partition_graph(manifest.num_nodes, cfg.clients, cfg.partition_scheme)?,
    };
    Ok(Prepared {
        manifest,
        splits,
        partitions,
    })
}

fn write_round_log(path: &Path, stats: &[fedstgd::protocol::RoundStats]) -> Result<(), CliError> {
    let mut out = String::new();
    for s in stats {
        out.push_str(&s.log_line());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_checkpoint(
    path: &Path,
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    globals: &GlobalParams,
    node_embed: &Tensor,
    partitions: &[Vec<usize>],
    splits: &SplitWindows,
) -> Result<(), CliError> {
    let mut ckpt = Checkpoint {
        meta: cfg.to_meta(),
        ..Checkpoint::default()
    };
    ckpt.meta
        .insert("num_nodes".into(), manifest.num_nodes.to_string());
    ckpt.meta
        .insert("feature_dim".into(), manifest.feature_dim.to_string());
    ckpt.meta
        .insert("steps_per_day".into(), manifest.steps_per_day.to_string());
    for (name, tensor) in globals.named() {
        ckpt.tensors.insert(name.to_string(), tensor.clone());
    }
    ckpt.tensors.insert("node_embed".into(), node_embed.clone());
    let d = manifest.feature_dim;
    ckpt.tensors.insert(
        "norm_mean".into(),
        Tensor::new(vec![d], splits.normalizer.mean.clone()).expect("norm mean"),
    );
    ckpt.tensors.insert(
        "norm_std".into(),
        Tensor::new(vec![d], splits.normalizer.std.clone()).expect("norm std"),
    );
    let mut assign = vec![0.0; manifest.num_nodes];
    for (client, nodes) in partitions.iter().enumerate() {
        for &node in nodes {
            assign[node] = client as f64;
        }
    }
    ckpt.tensors.insert(
        "partition".into(),
        Tensor::new(vec![manifest.num_nodes], assign).expect("partition"),
    );
    ckpt.write(path)?;
    Ok(())
}

/// Place per-client embedding blocks back at their node positions.
fn assemble_embed(blocks: &[Tensor], partitions: &[Vec<usize>], n: usize, d_n: usize) -> Tensor {
    let mut data = vec![0.0; n * d_n];
    for (block, nodes) in blocks.iter().zip(partitions) {
        for (row, &node) in nodes.iter().enumerate() {
            data[node * d_n..(node + 1) * d_n].copy_from_slice(block.row(row));
        }
    }
    Tensor::new(vec![n, d_n], data).expect("assembled embedding")
}

fn cmd_train(cfg: &RunConfig, central: bool) -> Result<u8, CliError> {
    let hyper = cfg.hyper();
    let prepared = prepare(cfg, &hyper)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let data = TrainData {
        windows: prepared.splits.train.clone(),
        n: prepared.manifest.num_nodes,
        d: prepared.manifest.feature_dim,
        steps_per_day: prepared.manifest.steps_per_day,
    };
    let settings = cfg.train_settings();

    let (globals, embed, stats) = if central {
        let out = train_central(&data, &settings)?;
        (out.globals, out.node_embed, out.stats)
    } else {
        let out = train_federated(&data, &prepared.partitions, &settings, cfg.transport)?;
        if !out.audit.violations.is_empty() {
            for v in &out.audit.violations {
                eprintln!("data-locality violation: {v}");
            }
            return Ok(EXIT_PROPERTY_FAILURE);
        }
        let full = assemble_embed(
            &out.node_embeds,
            &prepared.partitions,
            prepared.manifest.num_nodes,
            cfg.d_n,
        );
        (out.globals, full, out.stats)
    };

    for s in &stats {
        println!("{}", s.log_line());
    }
    let log_path = cfg.out_dir.join("rounds.log");
    write_round_log(&log_path, &stats)?;
    let ckpt_path = cfg.out_dir.join("model.ckpt");
    write_checkpoint(
        &ckpt_path,
        cfg,
        &prepared.manifest,
        &globals,
        &embed,
        &prepared.partitions,
        &prepared.splits,
    )?;
    println!("checkpoint {}", ckpt_path.display());
    println!("round log  {}", log_path.display());
    Ok(0)
}

fn hyper_from_checkpoint(ckpt: &Checkpoint, fallback: &HyperConfig) -> HyperConfig {
    let get_usize = |k: &str, d: usize| ckpt.meta.get(k).and_then(|v| v.parse().ok()).unwrap_or(d);
    let get_f64 = |k: &str, d: f64| ckpt.meta.get(k).and_then(|v| v.parse().ok()).unwrap_or(d);
    HyperConfig {
        alpha: get_f64("alpha", fallback.alpha),
        d_n: get_usize("d_n", fallback.d_n),
        d_t: get_usize("d_t", fallback.d_t),
        h_dim: get_usize("h_dim", fallback.h_dim),
        t_in: get_usize("t_in", fallback.t_in),
        t_out: get_usize("t_out", fallback.t_out),
        d_phi: get_usize("d_phi", fallback.d_phi),
        d_psi: get_usize("d_psi", fallback.d_psi),
        activation: ckpt
            .meta
            .get("activation")
            .and_then(|v| Activation::from_name(v).ok())
            .unwrap_or(fallback.activation),
        mode: ckpt
            .meta
            .get("mode")
            .and_then(|v| fedstgd::model::AblationMode::from_name(v).ok())
            .unwrap_or(fallback.mode),
    }
}

fn cmd_eval(cfg: &RunConfig) -> Result<u8, CliError> {
    let ckpt_path = cfg.out_dir.join("model.ckpt");
    let ckpt = Checkpoint::read(&ckpt_path)?;
    let hyper = hyper_from_checkpoint(&ckpt, &cfg.hyper());
    let prepared = prepare(cfg, &hyper)?;

    let mut map = fedstgd::tape::ParamMap::new();
    for name in GLOBAL_PARAM_NAMES {
        let tensor = ckpt
            .tensors
            .get(name)
            .cloned()
            .ok_or_else(|| CliError::Invalid(format!("checkpoint lacks tensor '{name}'")))?;
        map.insert(name.to_string(), tensor);
    }
    let globals = GlobalParams::from_map(&map)
        .map_err(|e| CliError::Invalid(format!("bad checkpoint: {e}")))?;
    let embed = ckpt
        .tensors
        .get("node_embed")
        .cloned()
        .ok_or_else(|| CliError::Invalid("checkpoint lacks node_embed".into()))?;

    let report = evaluate(
        &globals,
        &embed,
        &prepared.partitions,
        &hyper,
        &prepared.splits.test,
        &prepared.splits.normalizer,
    )?;
    let baseline = evaluate_persistence(
        &prepared.splits.test,
        &prepared.splits.normalizer,
        hyper.t_out,
    )?;
    println!("model:");
    print!("{}", report.table());
    println!("persistence baseline:");
    print!("{}", baseline.table());
    println!(
        "rmse_ratio_vs_persistence={:.6}",
        report.rmse / baseline.rmse
    );
    print!("{}", report.records());
    Ok(0)
}

fn cmd_verify(cfg: &RunConfig) -> Result<u8, CliError> {
    let report = run_all(&cfg.verify_config());
    print!("{}", report.render());
    if report.all_passed() {
        println!("verify: all checks passed");
        Ok(0)
    } else {
        println!("verify: FAILURES detected");
        Ok(EXIT_PROPERTY_FAILURE)
    }
}

fn cmd_bench_comm(cfg: &RunConfig) -> Result<u8, CliError> {
    let hyper = cfg.hyper();
    let n = cfg.synth_nodes.max(8);
    let steps_per_day = 24;
    let series = synth_diffusion(cfg.seed, n, 240, cfg.synth_features, steps_per_day, 0.05);
    let splits = split_and_window(&series, hyper.t_in, hyper.t_out, (7, 1, 2), steps_per_day)?;
    let data = TrainData {
        windows: splits.train.clone(),
        n,
        d: cfg.synth_features,
        steps_per_day,
    };
    let mut settings = cfg.train_settings();
    settings.global_rounds = 1;

    println!(
        "{:>3} {:>14} {:>14} {:>14} {:>14} {:>7}",
        "M", "pred_up", "meas_up", "pred_down", "meas_down", "match"
    );
    let mut all_match = true;
    let mut share_bytes = Vec::new();
    for m in [2usize, 4, 8] {
        let partitions = partition_graph(n, m, cfg.partition_scheme)?;
        let out = train_federated(&data, &partitions, &settings, cfg.transport)?;
        let pred = predict_comm(
            &hyper,
            cfg.synth_features,
            steps_per_day,
            m,
            settings.batch,
            settings.local_rounds,
        );
        let round = &out.stats[0];
        let ok = round.bytes_up == pred.global_round_up
            && round.bytes_down == pred.global_round_down;
        all_match &= ok;
        share_bytes.push(pred.local_round_up);
        println!(
            "{:>3} {:>14} {:>14} {:>14} {:>14} {:>7}",
            m, pred.global_round_up, round.bytes_up, pred.global_round_down, round.bytes_down, ok
        );
    }
    let linear = share_bytes[1] == 2 * share_bytes[0] && share_bytes[2] == 2 * share_bytes[1];
    println!("share bytes per local round: {share_bytes:?} (exactly linear in M: {linear})");
    let probe = GlobalParams::init(&hyper, cfg.synth_features, steps_per_day, cfg.seed);
    println!("|theta|={} f64 values", probe.num_values());
    if all_match && linear {
        Ok(0)
    } else {
        println!("bench-comm: measured bytes diverge from the predictor");
        Ok(EXIT_PROPERTY_FAILURE)
    }
}
