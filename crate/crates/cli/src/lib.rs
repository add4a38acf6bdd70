//! Commands behind the `arlif` binary.

pub mod config;

use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use arlif::diagnostics::{energy, fit_energy_coefficients, EnergyReport, E_AC_PJ, E_MAC_PJ, REFERENCE_ENERGY_ROWS};
use arlif::network::Network;
use arlif::neurons::{lif_step_soft, soft_reset_closed_form, NeuronParams, NeuronState, ResetMode};
use arlif::training::{evaluate, train, RunLog, Samples};
use arlif::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::LoadedConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, config or missing inputs (exit 2).
    #[error("{0}")]
    Usage(String),
    /// A check ran and failed (exit 1).
    #[error("{0}")]
    Check(String),
    /// Training or evaluation failed at runtime (exit 1).
    #[error(transparent)]
    Core(#[from] arlif::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Check(_) => 1,
            CliError::Core(e) => match e {
                arlif::Error::Config(_)
                | arlif::Error::Parameter { .. }
                | arlif::Error::Io { .. }
                | arlif::Error::Format { .. }
                | arlif::Error::Consistency(_)
                | arlif::Error::Data(_) => 2,
                _ => 1,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub const TRAIN_OUTPUTS: [&str; 6] = [
    "runlog.json",
    "metrics.csv",
    "params_track.csv",
    "rates.csv",
    "energy.json",
    "model.json",
];

/// Refuses to overwrite any of `names` in `dir` unless `force`.
fn prepare_out(dir: &Path, names: &[&str], force: bool) -> CliResult<()> {
    if !force {
        if let Some(existing) = names.iter().map(|n| dir.join(n)).find(|p| p.exists()) {
            return Err(CliError::Usage(format!(
                "{} exists; pass --force to overwrite",
                existing.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))
}

fn write(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    let p = dir.join(name);
    fs::write(&p, contents).map_err(|e| CliError::Core(arlif::Error::Io { path: p, source: e }))
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

pub struct TrainOutcome {
    pub log: RunLog,
    pub out_dir: PathBuf,
}

fn progress(tag: &str, log: &RunLog) {
    for e in &log.epochs {
        let train = e
            .train
            .map(|m| format!("train loss {:.4} acc {:.4}  ", m.loss, m.accuracy))
            .unwrap_or_default();
        eprintln!(
            "{tag}epoch {:>3}  {train}test loss {:.4} acc {:.4}  rate {:.4}",
            e.epoch,
            e.test.loss,
            e.test.accuracy,
            e.test_rates.overall()
        );
    }
}

/// `arlif train`: trains the configured network and writes the run outputs.
pub fn cmd_train(config: &Path, out: Option<&Path>, seed: Option<u64>, force: bool) -> CliResult<TrainOutcome> {
    let cfg = LoadedConfig::read(config)?;
    let out_dir = cfg.output_dir(out)?;
    prepare_out(&out_dir, &TRAIN_OUTPUTS, force)?;
    let seed = cfg.seed(seed);
    let (train_set, test_set) = cfg.load_data(seed)?;
    let mut net = cfg.build_network(train_set.sample_shape(), train_set.class_count(), seed, |n| n)?;
    let log = train(&mut net, &train_set, &test_set, &cfg.train_config(seed))?;
    progress("", &log);
    let report = log.energy().expect("run log has an initial evaluation");
    write(&out_dir, "runlog.json", &(log.to_json()? + "\n"))?;
    write(&out_dir, "metrics.csv", &log.metrics_csv())?;
    write(&out_dir, "params_track.csv", &log.params_csv())?;
    write(&out_dir, "rates.csv", &log.rates_csv())?;
    write(&out_dir, "energy.json", &to_json(&report))?;
    write(&out_dir, "model.json", &to_json(&net))?;
    Ok(TrainOutcome { log, out_dir })
}

/// The six reset configurations compared by `arlif ablate`.
pub const ABLATION_MODES: [&str; 6] = ["Hard", "Soft", "alpha=1", "V_th[t]=1", "Both", "Learnable"];

/// Neuron settings for an ablation mode, starting from `base`.
pub fn ablation_neuron(mode: &str, base: NeuronParams) -> Option<NeuronParams> {
    let adaptive = NeuronParams {
        reset_mode: ResetMode::Adaptive,
        alpha_fixed: false,
        threshold_fixed: false,
        ..base
    };
    Some(match mode {
        "Hard" => NeuronParams {
            reset_mode: ResetMode::Hard,
            ..base
        },
        "Soft" => NeuronParams {
            reset_mode: ResetMode::Soft,
            ..base
        },
        "alpha=1" => NeuronParams {
            alpha_fixed: true,
            ..adaptive
        },
        "V_th[t]=1" => NeuronParams {
            threshold_fixed: true,
            ..adaptive
        },
        "Both" => NeuronParams {
            alpha_fixed: true,
            threshold_fixed: true,
            ..adaptive
        },
        "Learnable" => adaptive,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: String,
    pub test_accuracy: f64,
    pub mean_firing_rate: f64,
    pub energy_uj: f64,
}

pub const ABLATION_HEADER: &str = "mode,test_accuracy,mean_firing_rate,energy_uj";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.mode, r.test_accuracy, r.mean_firing_rate, r.energy_uj));
    }
    out
}

/// Trains one ablation mode with the config's data, seed and schedule.
pub fn run_ablation_mode(
    cfg: &LoadedConfig,
    mode: &str,
    seed: u64,
    data: &(Samples, Samples),
) -> CliResult<(AblationRow, RunLog)> {
    let neuron = |n| ablation_neuron(mode, n).expect("known mode");
    let (train_set, test_set) = data;
    let mut net = cfg.build_network(train_set.sample_shape(), train_set.class_count(), seed, neuron)?;
    let log = train(&mut net, train_set, test_set, &cfg.train_config(seed))?;
    let last = log.final_epoch().expect("initial evaluation");
    let row = AblationRow {
        mode: mode.to_string(),
        test_accuracy: last.test.accuracy,
        mean_firing_rate: last.test_rates.overall(),
        energy_uj: log.energy().expect("initial evaluation").energy_uj,
    };
    Ok((row, log))
}

/// `arlif ablate`: all six modes under one seed and data order.
pub fn cmd_ablate(config: &Path, out: Option<&Path>, seed: Option<u64>, force: bool) -> CliResult<Vec<AblationRow>> {
    let cfg = LoadedConfig::read(config)?;
    let out_dir = cfg.output_dir(out)?;
    prepare_out(&out_dir, &["ablation.csv", "ablation.json"], force)?;
    let seed = cfg.seed(seed);
    let data = cfg.load_data(seed)?;
    let results: Vec<(AblationRow, RunLog)> = ABLATION_MODES
        .par_iter()
        .map(|mode| run_ablation_mode(&cfg, mode, seed, &data))
        .collect::<CliResult<_>>()?;
    for (row, log) in &results {
        progress(&format!("[{}] ", row.mode), log);
    }
    let rows: Vec<AblationRow> = results.iter().map(|(r, _)| r.clone()).collect();
    let logs: Vec<(&str, &RunLog)> = results.iter().map(|(r, l)| (r.mode.as_str(), l)).collect();
    write(&out_dir, "ablation.csv", &ablation_csv(&rows))?;
    write(&out_dir, "ablation.json", &to_json(&logs))?;
    print!("{}", ablation_csv(&rows));
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSummary {
    pub passed: usize,
    pub failed: usize,
    /// First mismatching input sequence, with its decay constant.
    pub first_failure: Option<(f64, Vec<f64>)>,
}

/// Random soft-reset trajectories compared against the closed-form spike
/// recursion. `corrupt_decay` simulates with a wrong decay constant.
pub fn oracle_check(trials: usize, max_t: usize, seed: u64, corrupt_decay: Option<f64>) -> CliResult<OracleSummary> {
    if trials == 0 {
        return Err(CliError::Usage("--trials must be >= 1".into()));
    }
    if max_t == 0 {
        return Err(CliError::Usage("--max-t must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = OracleSummary {
        passed: 0,
        failed: 0,
        first_failure: None,
    };
    for _ in 0..trials {
        let k = [0.25, 0.5, 0.9][rng.gen_range(0..3)];
        let steps = rng.gen_range(1..=max_t);
        let inputs: Vec<f64> = (0..steps).map(|_| rng.gen_range(-2.0..=2.0)).collect();
        let params = NeuronParams {
            k_tau: corrupt_decay.unwrap_or(k),
            v_th_base: 1.0,
            rho: 1.0,
            ..NeuronParams::with_mode(ResetMode::Soft)
        };
        let mut state = NeuronState::zeros(&[1]);
        let mut simulated = Vec::with_capacity(steps);
        for &x in &inputs {
            let (next, trace) = lif_step_soft(&state, &Tensor::from_vec(vec![x]), &params)?;
            simulated.push(trace.s.data()[0]);
            state = next;
        }
        if simulated == soft_reset_closed_form(&inputs, 1.0, k) {
            summary.passed += 1;
        } else {
            summary.failed += 1;
            summary.first_failure.get_or_insert((k, inputs));
        }
    }
    Ok(summary)
}

/// `arlif oracle-check`.
pub fn cmd_oracle_check(trials: usize, max_t: usize, seed: u64, corrupt_decay: Option<f64>) -> CliResult<OracleSummary> {
    let s = oracle_check(trials, max_t, seed, corrupt_decay)?;
    println!("oracle-check: {} passed, {} failed", s.passed, s.failed);
    if let Some((k, inputs)) = &s.first_failure {
        return Err(CliError::Check(format!("mismatch for k_tau = {k}, inputs {inputs:?}")));
    }
    Ok(s)
}

/// Checks the energy coefficients against the reference rows.
pub fn energy_self_test() -> CliResult<Vec<String>> {
    let mut lines = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, macs, acs, published) in REFERENCE_ENERGY_ROWS {
        let e = energy(macs, acs);
        worst = worst.max((e - published).abs());
        lines.push(format!("{name}: MACs {macs} M, ACs {acs} M -> {e:.3} uJ (published {published})"));
    }
    let rows: Vec<_> = REFERENCE_ENERGY_ROWS.iter().map(|r| (r.1, r.2, r.3)).collect();
    let (mac, ac) = fit_energy_coefficients(&rows).ok_or_else(|| CliError::Check("degenerate fit".into()))?;
    lines.push(format!(
        "least-squares fit: {mac:.4} pJ/MAC, {ac:.4} pJ/AC (model uses {E_MAC_PJ}, {E_AC_PJ}); worst row error {worst:.3} uJ"
    ));
    if worst > 0.05 {
        return Err(CliError::Check(format!("reference rows off by up to {worst} uJ")));
    }
    Ok(lines)
}

/// Parses `macs acs` pairs (whitespace or comma separated, `#` comments).
pub fn parse_pairs(input: impl BufRead) -> CliResult<Vec<(f64, f64)>> {
    let mut pairs = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| CliError::Usage(format!("stdin: {e}")))?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()).collect();
        let parsed: Vec<f64> = fields.iter().filter_map(|f| f.parse().ok()).collect();
        if fields.len() != 2 || parsed.len() != 2 || parsed.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(CliError::Usage(format!("stdin:{}: expected `macs_m acs_m`, got `{line}`", i + 1)));
        }
        pairs.push((parsed[0], parsed[1]));
    }
    Ok(pairs)
}

/// Energy report from a run log on disk.
pub fn energy_from_runlog(path: &Path) -> CliResult<EnergyReport> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if text.trim().is_empty() {
        return Err(CliError::Usage(format!("{}: empty run log", path.display())));
    }
    let log: RunLog = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))?;
    log.energy()
        .ok_or_else(|| CliError::Usage(format!("{}: run log holds no evaluation statistics", path.display())))
}

/// `arlif energy`.
pub fn cmd_energy(runlog: Option<&Path>, out: Option<&Path>, force: bool, stdin: impl BufRead) -> CliResult<()> {
    for line in energy_self_test()? {
        eprintln!("{line}");
    }
    match runlog {
        Some(path) => {
            let report = energy_from_runlog(path)?;
            print!("{}", to_json(&report));
            if let Some(dir) = out {
                prepare_out(dir, &["energy.json", "energy.csv"], force)?;
                write(dir, "energy.json", &to_json(&report))?;
                write(dir, "energy.csv", &report.to_csv())?;
            }
        }
        None => {
            println!("macs_m,acs_m,energy_uj");
            for (m, a) in parse_pairs(stdin)? {
                println!("{m},{a},{:.3}", energy(m, a));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub loss: f64,
    pub accuracy: f64,
    pub mean_firing_rate: f64,
    pub energy: EnergyReport,
}

/// `arlif eval`: evaluates a saved model on the configured test split.
pub fn cmd_eval(config: &Path, model: &Path, seed: Option<u64>) -> CliResult<EvalSummary> {
    let cfg = LoadedConfig::read(config)?;
    let seed = cfg.seed(seed);
    let text = fs::read_to_string(model).map_err(|e| CliError::Usage(format!("{}: {e}", model.display())))?;
    let net: Network = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}:{}:{}: {e}", model.display(), e.line(), e.column())))?;
    let (_, test_set) = cfg.load_data(seed)?;
    let ev = evaluate(&net, &test_set, &cfg.train_config(seed), seed)?;
    let summary = EvalSummary {
        loss: ev.metrics.loss,
        accuracy: ev.metrics.accuracy,
        mean_firing_rate: ev.rates.overall(),
        energy: EnergyReport::from_counts(net.param_count(), &ev.ops),
    };
    print!("{}", to_json(&summary));
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_passes_and_detects_corruption() {
        let ok = oracle_check(200, 8, 1, None).unwrap();
        assert_eq!((ok.passed, ok.failed), (200, 0));
        let bad = oracle_check(200, 8, 1, Some(0.7)).unwrap();
        assert!(bad.failed > 0);
        assert!(oracle_check(0, 8, 1, None).is_err());
    }

    #[test]
    fn ablation_modes_are_distinct() {
        let base = NeuronParams::default();
        let both = ablation_neuron("Both", base).unwrap();
        assert!(both.alpha_fixed && both.threshold_fixed && both.reset_mode == ResetMode::Adaptive);
        let learn = ablation_neuron("Learnable", base).unwrap();
        assert!(learn.learns_alpha() && learn.learns_beta());
        assert_eq!(ablation_neuron("Hard", base).unwrap().reset_mode, ResetMode::Hard);
        assert!(ablation_neuron("Other", base).is_none());
    }

    #[test]
    fn pairs_parse() {
        let p = parse_pairs("1.77 95.65\n# c\n763.08,209.56\n".as_bytes()).unwrap();
        assert_eq!(p, vec![(1.77, 95.65), (763.08, 209.56)]);
        assert!(parse_pairs("1 2 3\n".as_bytes()).is_err());
        assert!(energy_self_test().is_ok());
    }
}
