use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use timescale::ema::{ema_weights, relative_update_size_mc_chains, relative_update_size_theory, Ema};
use timescale::harness::report::load_records;
use timescale::harness::report::write_outputs;
use timescale::harness::{
    plan, report, run_negative_control, sweep, train, verify_theorem1, ConfigFile, Format, Metric, NegativeControl,
    SweepSpec, Theorem1Options, Theorem1Report,
};

#[derive(Parser, Debug)]
#[command(name = "timescale", version, about = "Timescale-aware AdamW experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the init and shuffle seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long, value_enum, default_value_t = OutFormat::Csv)]
    format: OutFormat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
}

impl From<OutFormat> for Format {
    fn from(f: OutFormat) -> Self {
        match f {
            OutFormat::Csv => Format::Csv,
            OutFormat::Json => Format::Json,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Transfer a tuned base run to a new dataset size, width or equivalent setting.
    Plan(Common),
    /// Train a single run.
    Train(Common),
    /// Train every point of a grid.
    Sweep(Common),
    /// Check that equivalent settings follow the same trajectory up to scale.
    VerifyTheorem1 {
        #[command(flatten)]
        common: Common,
        /// Equivalence constants.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 2.0, 10.0])]
        c: Vec<f64>,
        #[arg(long, default_value_t = 200)]
        steps: u64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        /// Also run the four negative controls; each must deviate by more than `--control-threshold`.
        #[arg(long)]
        controls: bool,
        /// Base epsilon for the fixed-epsilon control.
        #[arg(long, default_value_t = 1e-4)]
        control_epsilon: f64,
        #[arg(long, default_value_t = 1e-3)]
        control_threshold: f64,
    },
    /// Check the EMA weight and relative-update-size properties.
    EmaCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = vec![10.0, 100.0, 1000.0])]
        tau: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.001, 0.01, 0.1])]
        gamma: Vec<f64>,
        /// Monte-Carlo steps per chain.
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        /// Independent pooled chains.
        #[arg(long, default_value_t = 16)]
        chains: usize,
    },
    /// Summarize run records found under a directory.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory holding `runs/*.json`; defaults to `--out`.
        input: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes.
enum Outcome {
    Ok,
    Failed,
}

fn load(common: &Common) -> Result<ConfigFile> {
    match &common.config {
        Some(p) => Ok(ConfigFile::load(p)?),
        None => Ok(ConfigFile::default()),
    }
}

fn out_dir(common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Plan(common) => cmd_plan(&common),
        Command::Train(common) => cmd_train(&common),
        Command::Sweep(common) => cmd_sweep(&common),
        Command::VerifyTheorem1 {
            common,
            c,
            steps,
            tolerance,
            controls,
            control_epsilon,
            control_threshold,
        } => cmd_verify(
            &common,
            &c,
            Theorem1Options {
                steps,
                tolerance,
                control_epsilon,
                ..Default::default()
            },
            controls.then_some(control_threshold),
        ),
        Command::EmaCheck {
            common,
            tau,
            gamma,
            samples,
            chains,
        } => cmd_ema_check(&common, &tau, &gamma, samples, chains),
        Command::Report { common, input } => cmd_report(&common, input.as_deref()),
    }
}

fn cmd_plan(common: &Common) -> Result<Outcome> {
    let file = load(common)?;
    let p = plan(&file)?;
    match common.format {
        OutFormat::Csv => {
            print!("{}", p.table());
            for w in &p.warnings {
                eprintln!("warning: {w}");
            }
        }
        OutFormat::Json => println!("{}", serde_json::to_string_pretty(&p)?),
    }
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for planned in &p.configs {
            let path = dir.join(format!("{}.toml", planned.rule));
            fs::write(&path, planned.config.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(Outcome::Ok)
}

fn cmd_train(common: &Common) -> Result<Outcome> {
    let mut cfg = load(common)?.run_config()?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    let record = train(&cfg)?;
    let rep = report(std::slice::from_ref(&record), Metric::TestLoss)?;
    let dir = out_dir(common);
    write_outputs(&dir, std::slice::from_ref(&record), &rep, common.format.into())?;
    match (&record.final_metrics, record.diverged) {
        (_, true) => println!(
            "run {} diverged after {} steps: {}",
            record.run_id,
            record.steps.len(),
            record.divergence.as_deref().unwrap_or("")
        ),
        (Some(m), false) => println!(
            "run {}: {} steps, train loss {:.6}, test loss {:.6}{}",
            record.run_id,
            record.steps.len(),
            m.train_loss,
            m.test_loss,
            m.test_accuracy
                .map(|a| format!(", test accuracy {a:.4}"))
                .unwrap_or_default()
        ),
        (None, false) => println!("run {}: no training steps", record.run_id),
    }
    println!("wrote {}", dir.display());
    Ok(Outcome::Ok)
}

fn cmd_sweep(common: &Common) -> Result<Outcome> {
    let file = load(common)?;
    let mut spec = SweepSpec::from_file(&file)?;
    if let Some(seed) = common.seed {
        spec.template = spec.template.with_seed(seed);
    }
    let res = sweep(&spec, common.parallel)?;
    let dir = out_dir(common);
    write_outputs(&dir, &res.records, &res.report, common.format.into())?;
    println!(
        "{:>8} {:>6} {:>11} {:>11} {:>11} {:>12} {:>11} {:>12}",
        "n_train", "width", "lambda_base", "eta", "lambda", "tau_iter", "tau_epoch", "metric"
    );
    for p in &res.report.series {
        println!(
            "{:>8} {:>6} {:>11.4e} {:>11.4e} {:>11.4e} {:>12.4} {:>11.4} {:>12}{}",
            p.n_train,
            p.width_factor,
            p.lambda_base,
            p.eta,
            p.lambda,
            p.tau_iter.unwrap_or(f64::INFINITY),
            p.tau_epoch.unwrap_or(f64::INFINITY),
            p.mean_metric
                .map(|m| format!("{m:.6}"))
                .unwrap_or_else(|| "diverged".into()),
            if p.is_argmin { "  *" } else { "" }
        );
    }
    println!("{} runs, wrote {}", res.records.len(), dir.display());
    Ok(Outcome::Ok)
}

fn print_theorem1(r: &Theorem1Report) {
    let label = r
        .control
        .map(|c| format!("control {c:?}"))
        .unwrap_or_else(|| "equivalence".into());
    for case in &r.cases {
        println!(
            "{label} c={}: weights {:.3e} m {:.3e} v {:.3e} norm-params {:.3e} outputs {:.3e} -> {}",
            case.c,
            case.weight_deviation,
            case.m_deviation,
            case.v_deviation,
            case.norm_param_deviation,
            case.output_deviation,
            if case.pass { "equal" } else { "differ" }
        );
    }
}

fn cmd_verify(common: &Common, c: &[f64], opts: Theorem1Options, control_threshold: Option<f64>) -> Result<Outcome> {
    let mut cfg = load(common)?.run_config()?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    let main = verify_theorem1(&cfg, c, &opts)?;
    print_theorem1(&main);
    let mut ok = main.pass;
    let mut reports = vec![main];
    if let Some(threshold) = control_threshold {
        let largest = c
            .iter()
            .copied()
            .fold(f64::NAN, |a, b| if b.is_nan() || a >= b { a } else { b });
        for control in NegativeControl::ALL {
            let r = run_negative_control(&cfg, control, &[largest], &opts)?;
            print_theorem1(&r);
            let broke = r.cases.iter().all(|case| case.weight_deviation > threshold);
            println!(
                "control {control:?}: {}",
                if broke {
                    "breaks equivalence as expected"
                } else {
                    "did not break equivalence"
                }
            );
            ok &= broke;
            reports.push(r);
        }
    }
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("theorem1.json");
        fs::write(&path, serde_json::to_vec_pretty(&reports)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(if ok { Outcome::Ok } else { Outcome::Failed })
}

fn cmd_ema_check(common: &Common, taus: &[f64], gammas: &[f64], samples: usize, chains: usize) -> Result<Outcome> {
    let mut ok = true;
    let mut check = |name: String, pass: bool| {
        println!("{name}: {}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };
    for &tau in taus {
        let horizon = (10.0 * tau).ceil() as usize;
        let w = ema_weights(horizon, tau)?;
        let mut impulse_err: f64 = 0.0;
        for tp in 1..=horizon {
            let mut ema = Ema::new(tau);
            for t in 1..=horizon {
                ema.update(if t == tp { 1.0 } else { 0.0 });
            }
            let exact = w.exact[tp - 1];
            impulse_err = impulse_err.max((ema.value - exact).abs() / exact);
        }
        check(
            format!("tau={tau}: impulse recursion vs closed form, max rel err {impulse_err:.2e}"),
            impulse_err < 1e-12,
        );
        let sum_target = 1.0 - (1.0 - 1.0 / tau).powi(horizon as i32);
        let sum_err = (w.exact_sum() - sum_target).abs();
        check(format!("tau={tau}: weight sum error {sum_err:.2e}"), sum_err < 1e-12);
        let monotone = w.exact.windows(2).all(|p| p[0] <= p[1]) && w.approx.windows(2).all(|p| p[0] <= p[1]);
        check(format!("tau={tau}: weights nonincreasing with lag"), monotone);
        let envelope = w
            .exact
            .iter()
            .zip(&w.approx)
            .enumerate()
            .all(|(k, (e, a))| ((e - a) / e).abs() <= (horizon - 1 - k) as f64 / (2.0 * tau) + 1e-12);
        check(
            format!(
                "tau={tau}: approximation error within lag/(2 tau) envelope (max pointwise rel err {:.3e})",
                w.max_relative_approx_error()
            ),
            envelope,
        );
    }
    let seed = common.seed.unwrap_or(0);
    for &gamma in gammas {
        let theory = relative_update_size_theory(gamma)?;
        let a = relative_update_size_mc_chains(gamma, 1.0, samples, chains, seed)?;
        let b = relative_update_size_mc_chains(gamma, 10.0, samples, chains, seed.wrapping_add(1))?;
        let rel = (a.ratio - theory).abs() / theory;
        check(
            format!(
                "gamma={gamma}: MC {:.5} vs sqrt(2 gamma) {theory:.5}, rel err {rel:.3e}",
                a.ratio
            ),
            rel < 0.02,
        );
        let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        let diff = (a.ratio - b.ratio).abs();
        check(
            format!(
                "gamma={gamma}: sigma 1 vs 10 differ by {diff:.2e} ({:.2} SE)",
                diff / se
            ),
            diff <= 3.0 * se,
        );
    }
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(if ok { Outcome::Ok } else { Outcome::Failed })
}

fn cmd_report(common: &Common, input: Option<&Path>) -> Result<Outcome> {
    let dir = input.map(Path::to_path_buf).unwrap_or_else(|| out_dir(common));
    let records = load_records(&dir)?;
    let select = load(common)?.select_on.unwrap_or_default();
    let rep = report(&records, select)?;
    let out = out_dir(common);
    write_outputs(&out, &records, &rep, common.format.into())?;
    println!("{} records summarized into {}", records.len(), out.display());
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let invalid = e
                .downcast_ref::<timescale::Error>()
                .is_some_and(timescale::Error::is_config);
            ExitCode::from(if invalid { 2 } else { 1 })
        }
    }
}
