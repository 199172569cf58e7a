//! Operator-facing command surface. Every command is deterministic given
//! its config and seed, and reports embed the fully resolved configuration.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::datagen::{self, DatagenError};
use crate::flops::{self, CostModel};
use crate::graph::Graph;
use crate::head;
use crate::hstu::{self, bind, forward_single, EncoderParams, ForwardOpts};
use crate::masking;
use crate::sequence::{CandidateItem, Role, UserSequence};
use crate::trainer::{self, Paradigm, TrainData, TrainError};
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
struct CmdError {
    code: i32,
    message: String,
}

impl CmdError {
    fn usage(message: impl Into<String>) -> Self {
        CmdError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
    fn data(message: impl Into<String>) -> Self {
        CmdError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
    fn numeric(message: impl Into<String>) -> Self {
        CmdError {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CmdError::data(e.to_string()),
            _ => CmdError::usage(e.to_string()),
        }
    }
}

impl From<DatagenError> for CmdError {
    fn from(e: DatagenError) -> Self {
        CmdError::data(e.to_string())
    }
}

impl From<CheckpointError> for CmdError {
    fn from(e: CheckpointError) -> Self {
        CmdError::data(e.to_string())
    }
}

impl From<TrainError> for CmdError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CmdError::numeric(e.to_string()),
            TrainError::InvalidConfig(_) => CmdError::usage(e.to_string()),
            TrainError::Hstu(_) | TrainError::Graph(_) | TrainError::Mask(_) => {
                CmdError::numeric(e.to_string())
            }
            _ => CmdError::data(e.to_string()),
        }
    }
}

impl From<hstu::HstuError> for CmdError {
    fn from(e: hstu::HstuError) -> Self {
        CmdError::numeric(e.to_string())
    }
}

const USAGE: &str = "\
usage: dfgr <command> [options] [section.key=value ...]

commands:
  gen-data      --out FILE            generate a synthetic dataset (+ .probs sidecar)
  train         --data FILE --out-dir DIR   train one paradigm, write ckpt + metrics
  check-oracle  [--configs N] [--tol X] [--seed S] [--layers L] [--inject-fault]
  bench-flops   [--out FILE] [--with-runtime]   analytic cost grid as CSV
  score         --checkpoint F --history F --candidates F [--m N] [--user U] [--out F]

options common to all commands:
  --config FILE    load key=value configuration
  section.key=value  override any config key (see --help-config)
";

/// Parsed command line: flags with values, boolean switches, and config
/// overrides (anything with a dot goes through the schema).
struct Args {
    flags: Vec<(String, String)>,
    switches: Vec<String>,
    config: RunConfig,
}

impl Args {
    fn get(&self, name: &str) -> Option<&str> {
        self.flags
            .iter()
            .rev()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    fn require(&self, name: &str) -> Result<&str, CmdError> {
        self.get(name)
            .ok_or_else(|| CmdError::usage(format!("missing required --{name}")))
    }

    fn has(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }

    fn get_parsed<T: std::str::FromStr>(&self, name: &str, default: T) -> Result<T, CmdError> {
        match self.get(name) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CmdError::usage(format!("--{name}: cannot parse {v:?}"))),
        }
    }
}

const SWITCHES: &[&str] = &["inject-fault", "with-runtime", "help", "help-config"];

fn parse_args(args: &[String]) -> Result<Args, CmdError> {
    let mut parsed = Args {
        flags: Vec::new(),
        switches: Vec::new(),
        config: RunConfig::new(),
    };
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        if let Some(body) = arg.strip_prefix("--") {
            if let Some((k, v)) = body.split_once('=') {
                if k.contains('.') {
                    overrides.push((k.to_string(), v.to_string()));
                } else {
                    parsed.flags.push((k.to_string(), v.to_string()));
                }
            } else if SWITCHES.contains(&body) {
                parsed.switches.push(body.to_string());
            } else {
                let value = args
                    .get(i + 1)
                    .ok_or_else(|| CmdError::usage(format!("--{body} needs a value")))?;
                parsed.flags.push((body.to_string(), value.clone()));
                i += 1;
            }
        } else if let Some((k, v)) = arg.split_once('=') {
            if k.contains('.') {
                overrides.push((k.to_string(), v.to_string()));
            } else {
                return Err(CmdError::usage(format!("unexpected argument {arg:?}")));
            }
        } else {
            return Err(CmdError::usage(format!("unexpected argument {arg:?}")));
        }
        i += 1;
    }
    if let Some(path) = parsed.get("config").map(PathBuf::from) {
        parsed.config.load_file(&path)?;
    }
    for (k, v) in overrides {
        parsed.config.set(&k, &v)?;
    }
    Ok(parsed)
}

/// Entry point for the binary; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return EXIT_USAGE;
    };
    if command == "--help" || command == "help" {
        print!("{USAGE}");
        return EXIT_OK;
    }
    if command == "--help-config" {
        print!("{}", RunConfig::schema_help());
        return EXIT_OK;
    }
    let parsed = match parse_args(&args[1..]) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {}", e.message);
            return e.code;
        }
    };
    if parsed.has("help-config") {
        print!("{}", RunConfig::schema_help());
        return EXIT_OK;
    }
    let result = match command.as_str() {
        "gen-data" => cmd_gen_data(&parsed),
        "train" => cmd_train(&parsed),
        "check-oracle" => cmd_check_oracle(&parsed),
        "bench-flops" => cmd_bench_flops(&parsed),
        "score" => cmd_score(&parsed),
        other => Err(CmdError::usage(format!(
            "unknown command {other:?}\n{USAGE}"
        ))),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CmdError> {
    let tmp = path.with_extension("out.tmp");
    std::fs::write(&tmp, bytes)
        .map_err(|e| CmdError::data(format!("cannot write {}: {e}", path.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CmdError::data(format!("cannot write {}: {e}", path.display())))
}

fn cmd_gen_data(args: &Args) -> Result<(), CmdError> {
    let out = PathBuf::from(args.require("out")?);
    let spec = args.config.generator_spec();
    let dataset = datagen::generate(&spec);
    datagen::write_dataset(&out, &dataset)?;
    let bayes = datagen::bayes_auc(&dataset)?;
    println!(
        "wrote {} interactions across {} users to {} (bayes AUC {:.4}, sidecar {})",
        dataset.interaction_count(),
        dataset.sequences.len(),
        out.display(),
        bayes,
        datagen::sidecar_path(&out).display(),
    );
    Ok(())
}

fn cmd_train(args: &Args) -> Result<(), CmdError> {
    let data_path = PathBuf::from(args.require("data")?);
    let out_dir = PathBuf::from(args.require("out-dir")?);
    let outcome = datagen::ingest(&data_path)?;
    if outcome.reordered_users > 0 {
        eprintln!(
            "warning: sorted non-monotone timestamps for {} user(s)",
            outcome.reordered_users
        );
    }
    let dataset = outcome.dataset;
    let split = datagen::timestamp_quantile(&dataset, args.config.split_quantile());
    let cfg = args.config.train_config();
    let (enc, report) = trainer::train(
        &cfg,
        &TrainData {
            dataset,
            split_ts: Some(split),
        },
    )?;

    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CmdError::data(format!("cannot create {}: {e}", out_dir.display())))?;
    write_atomic(&out_dir.join("metrics.csv"), report.to_csv().as_bytes())?;
    let mut summary = report.summary_json(&cfg);
    summary["resolved_config"] = serde_json::json!(args.config.resolved());
    summary["split_ts"] = serde_json::json!(split);
    write_atomic(
        &out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)
            .expect("summary serializes")
            .as_bytes(),
    )?;
    checkpoint::save(&out_dir.join("model.ckpt"), &enc)?;
    println!(
        "trained {} for {} steps: auc {} gauc {} (artifacts in {})",
        cfg.paradigm,
        cfg.steps,
        report.auc.map_or("n/a".into(), |a| format!("{a:.4}")),
        report.gauc.map_or("n/a".into(), |a| format!("{a:.4}")),
        out_dir.display(),
    );
    Ok(())
}

fn cmd_check_oracle(args: &Args) -> Result<(), CmdError> {
    let configs: usize = args.get_parsed("configs", 20)?;
    let tol: f64 = args.get_parsed("tol", 1e-10)?;
    let seed: u64 = args.get_parsed("seed", 1u64)?;
    let pin_layers: Option<usize> = match args.get("layers") {
        Some(v) => Some(
            v.parse()
                .map_err(|_| CmdError::usage(format!("--layers: cannot parse {v:?}")))?,
        ),
        None => None,
    };
    let opts = ForwardOpts {
        fault_keep_cross_diag: args.has("inject-fault"),
    };
    let report = hstu::oracle_sweep(configs, tol, seed, opts, pin_layers)?;
    match &report.first_failure {
        None => {
            println!(
                "oracle check PASS: {} configs, {} positions, max |diff| {:.3e} < {:.0e}",
                report.configs, report.positions_checked, report.max_abs_diff, report.tolerance
            );
            Ok(())
        }
        Some(f) => {
            println!(
                "oracle check FAIL: config {} (n={}, D={}, H={}, L={}, residual={}) at position {}: |diff| {:.3e} >= {:.0e}",
                f.config, f.n, f.d_model, f.heads, f.layers, f.residual, f.position, f.diff, report.tolerance
            );
            Err(CmdError::numeric(format!(
                "dual-flow output diverges from the per-target oracle at position {}",
                f.position
            )))
        }
    }
}

fn cmd_bench_flops(args: &Args) -> Result<(), CmdError> {
    let models = args.config.cost_models()?;
    let mut csv = flops::grid_csv(&models);
    if args.has("with-runtime") {
        let cfgc = &args.config;
        let n = cfgc.get_usize("cost.runtime_n");
        let trials = cfgc.get_usize("cost.trials");
        let model = CostModel::new(
            1,
            n,
            cfgc.get_usize("cost.k"),
            cfgc.get_usize("cost.d_model"),
            cfgc.get_usize("cost.heads"),
            cfgc.get_usize("cost.layers"),
        )
        .map_err(|e| CmdError::usage(e.to_string()))?;
        csv.push_str("# runtime\nparadigm,N,trials,median_seconds,measured_ratio_vs_metagr,analytic_ratio_vs_metagr\n");
        let metagr = flops::measure_runtime(&model, Paradigm::MetaGR, trials)
            .map_err(|e| CmdError::numeric(e.to_string()))?;
        let dfgr = flops::measure_runtime(&model, Paradigm::DFGR, trials)
            .map_err(|e| CmdError::numeric(e.to_string()))?;
        for r in [&metagr, &dfgr] {
            let measured_ratio = match (r.median_seconds, metagr.median_seconds) {
                (Some(a), Some(b)) if b > 0.0 => format!("{:.4}", a / b),
                _ => String::new(),
            };
            csv.push_str(&format!(
                "{},{},{},{},{},{:.4}\n",
                r.paradigm,
                n,
                r.trials,
                r.median_seconds
                    .map_or(String::new(), |m| format!("{m:.6}")),
                measured_ratio,
                r.analytic_infer_ratio_vs_metagr,
            ));
        }
    }
    match args.get("out") {
        Some(path) => write_atomic(Path::new(path), csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

/// Reorder a parsed dataset's slot values into the checkpoint's schema.
fn align_to_tables(
    dataset: &datagen::Dataset,
    enc: &EncoderParams,
    user: Option<u64>,
) -> Result<UserSequence, CmdError> {
    let seq = match user {
        Some(id) => dataset
            .sequences
            .iter()
            .find(|s| s.user_id == id)
            .ok_or_else(|| CmdError::data(format!("history has no user {id}")))?,
        None => {
            if dataset.sequences.len() != 1 {
                return Err(CmdError::usage(format!(
                    "history holds {} users; pick one with --user",
                    dataset.sequences.len()
                )));
            }
            &dataset.sequences[0]
        }
    };
    let slot_map: Vec<Option<usize>> = enc
        .tables
        .slot_names
        .iter()
        .map(|n| dataset.slot_names.iter().position(|m| m == n))
        .collect();
    let profile_map: Vec<Option<usize>> = enc
        .tables
        .profile_slot_names
        .iter()
        .map(|n| dataset.profile_slot_names.iter().position(|m| m == n))
        .collect();
    let pick = |map: &[Option<usize>], values: &[u64]| -> Vec<u64> {
        map.iter()
            .map(|m| m.and_then(|i| values.get(i).copied()).unwrap_or(u64::MAX))
            .collect()
    };
    let interactions = seq
        .interactions
        .iter()
        .map(|it| crate::sequence::Interaction {
            slots: pick(&slot_map, &it.slots),
            ..it.clone()
        })
        .collect();
    UserSequence::new(
        seq.user_id,
        pick(&profile_map, &seq.profile_slots),
        interactions,
    )
    .map_err(|e| CmdError::data(e.to_string()))
}

fn parse_candidates(path: &Path, enc: &EncoderParams) -> Result<Vec<CandidateItem>, CmdError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CmdError::data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let item_id: u64 =
            fields.next().unwrap().parse().map_err(|_| {
                CmdError::data(format!("candidates line {}: bad item id", lineno + 1))
            })?;
        let mut named: Vec<(String, u64)> = Vec::new();
        for pair in fields {
            let (name, value) = pair.split_once('=').ok_or_else(|| {
                CmdError::data(format!(
                    "candidates line {}: slot {pair:?} is not name=value",
                    lineno + 1
                ))
            })?;
            let value = value.parse().map_err(|_| {
                CmdError::data(format!(
                    "candidates line {}: bad value for {name}",
                    lineno + 1
                ))
            })?;
            named.push((name.to_string(), value));
        }
        let slots = enc
            .tables
            .slot_names
            .iter()
            .map(|n| {
                named
                    .iter()
                    .find(|(m, _)| m == n)
                    .map_or(u64::MAX, |&(_, v)| v)
            })
            .collect();
        out.push(CandidateItem { item_id, slots });
    }
    Ok(out)
}

fn cmd_score(args: &Args) -> Result<(), CmdError> {
    let enc = checkpoint::load(Path::new(args.require("checkpoint")?))?;
    let history = datagen::ingest(Path::new(args.require("history")?))?;
    let user: Option<u64> = match args.get("user") {
        Some(v) => Some(
            v.parse()
                .map_err(|_| CmdError::usage(format!("--user: cannot parse {v:?}")))?,
        ),
        None => None,
    };
    let seq = align_to_tables(&history.dataset, &enc, user)?;
    let candidates = parse_candidates(Path::new(args.require("candidates")?), &enc)?;
    let m: usize = args.get_parsed("m", args.config.get_usize("score.m"))?;
    if m == 0 {
        return Err(CmdError::usage("--m must be at least 1"));
    }

    let batches = crate::sequence::build_inference(&seq, &candidates, &enc.tables, m)
        .map_err(|e| CmdError::usage(e.to_string()))?;
    // microbatches preserve the input order, so scores line up with it
    let mut scores = Vec::with_capacity(candidates.len());
    for batch in &batches {
        let mask = masking::candidate_block_mask(&batch.roles, &batch.session_ids)
            .map_err(|e| CmdError::numeric(e.to_string()))?;
        let mut g: Graph<f64> = Graph::new();
        let bound = bind(&enc, &mut g, false)?;
        let hidden = forward_single(&mut g, &bound, batch, &mask)?;
        let logits = head::score(&mut g, hidden, &bound.head)
            .map_err(|e| CmdError::numeric(e.to_string()))?;
        let zs = g.value(logits);
        for (&z, &role) in zs.iter().zip(&batch.roles) {
            if role == Role::Candidate {
                if !z.is_finite() {
                    return Err(CmdError::numeric("non-finite candidate score".to_string()));
                }
                scores.push(crate::graph::sigmoid(z));
            }
        }
    }
    let mut out = String::new();
    for (cand, score) in candidates.iter().zip(&scores) {
        out.push_str(&format!("{}\t{score:.17e}\n", cand.item_id));
    }
    match args.get("out") {
        Some(path) => write_atomic(Path::new(path), out.as_bytes())?,
        None => print!("{out}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn unknown_command_and_missing_args_are_usage_errors() {
        assert_eq!(run(&s(&["frobnicate"])), EXIT_USAGE);
        assert_eq!(run(&s(&["gen-data"])), EXIT_USAGE); // missing --out
        assert_eq!(run(&s(&[])), EXIT_USAGE);
    }

    #[test]
    fn bad_paradigm_is_usage_error() {
        assert_eq!(
            run(&s(&[
                "train",
                "--data",
                "x",
                "--out-dir",
                "y",
                "train.paradigm=HYBRID"
            ])),
            EXIT_USAGE
        );
    }

    #[test]
    fn parse_mixed_flags_switches_overrides() {
        let a = parse_args(&s(&[
            "--out",
            "file.txt",
            "--inject-fault",
            "gen.users=3",
            "--tol=1e-9",
        ]))
        .unwrap();
        assert_eq!(a.get("out"), Some("file.txt"));
        assert!(a.has("inject-fault"));
        assert_eq!(a.get("tol"), Some("1e-9"));
        assert_eq!(a.config.get_usize("gen.users"), 3);
    }
}
