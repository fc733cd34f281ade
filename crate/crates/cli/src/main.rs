//! `gridlocus` command-line front end.
//!
//! Payloads go to stdout, progress and errors to stderr. Exit codes: 0 success,
//! 1 infeasible case diagnosed, 2 input error, 3 the method itself failed.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use gridlocus::loadflow::{bus_voltages, swing_injection, NoConvergence};
use gridlocus::localizer::{
    alpha_sweep, minimize_and_classify, write_sweep_csv, SweepEntry, SweepOptions, SweepResult,
};
use gridlocus::loss::{write_mlc_csv, DEFAULT_H_STEP};
use gridlocus::{
    flat_start, import_matpower, loss_grad_s, newton_solve, parse_case, FlowError, GridCase,
    InjectionVector, NewtonOptions, StateVector,
};

const THREADS_ENV: &str = "GRIDLOCUS_THREADS";

#[derive(Parser)]
#[command(name = "gridlocus", version, about = "Load-flow solvability diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the load flow with Newton's method from a flat start.
    Solve {
        case: PathBuf,
        #[arg(long, default_value_t = 1e-8, value_parser = positive)]
        tol: f64,
        #[arg(long, default_value_t = 20)]
        max_iter: usize,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Report loss sensitivities of a feasible case, or localize the cause of
    /// infeasibility.
    Localize {
        case: PathBuf,
        #[arg(long, default_value_t = 0.1, value_parser = positive)]
        alpha: f64,
        #[arg(long, default_value_t = DEFAULT_H_STEP, value_parser = positive)]
        h_step: f64,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Localize once per regularization weight.
    Sweep {
        case: PathBuf,
        /// Comma-separated positive weights.
        #[arg(long, value_parser = alpha_list, default_value = "0.001,0.01,0.1,1,10")]
        alphas: AlphaList,
        #[arg(long, default_value_t = DEFAULT_H_STEP, value_parser = positive)]
        h_step: f64,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Convert a MATPOWER case file to the native JSON case format.
    Convert { matpower: PathBuf },
}

#[derive(Clone, Debug)]
struct AlphaList(Vec<f64>);

fn positive(s: &str) -> Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("{v} is not a positive finite number")),
        Err(e) => Err(e.to_string()),
    }
}

fn alpha_list(s: &str) -> Result<AlphaList, String> {
    let values = s.split(',').map(positive).collect::<Result<Vec<_>, _>>()?;
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err("duplicate alpha".into());
    }
    Ok(AlphaList(values))
}

/// Failure that maps onto an exit code.
struct Exit {
    code: u8,
    err: anyhow::Error,
}

fn input_error(err: impl Into<anyhow::Error>) -> Exit {
    Exit {
        code: 2,
        err: err.into(),
    }
}

fn internal(err: impl Into<anyhow::Error>) -> Exit {
    Exit {
        code: 3,
        err: err.into(),
    }
}

fn load_case(path: &Path) -> Result<GridCase, Exit> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(input_error)?;
    let parsed = if path.extension().is_some_and(|e| e == "m") {
        import_matpower(&text)
    } else {
        parse_case(&text)
    };
    parsed
        .with_context(|| format!("invalid case {}", path.display()))
        .map_err(input_error)
}

fn configure_threads(default: Option<usize>) -> Result<(), Exit> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.parse::<usize>()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| input_error(anyhow::anyhow!("{THREADS_ENV} must be a positive integer")))?,
        ),
        Err(_) => default,
    };
    if let Some(n) = n {
        // Only fails if a global pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn buses_json(case: &GridCase, x: &StateVector) -> Value {
    let volt = bus_voltages(case, x);
    let mut rows: Vec<(i64, Value)> = volt
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let id = case.external_id(i);
            (
                id,
                json!({
                    "id": id,
                    "u": u.re,
                    "v": u.im,
                    "magnitude": u.norm(),
                    "angle_deg": u.arg().to_degrees(),
                }),
            )
        })
        .collect();
    rows.sort_by_key(|r| r.0);
    Value::Array(rows.into_iter().map(|r| r.1).collect())
}

fn write_payload(text: &str) -> Result<(), Exit> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(internal)
}

fn to_json(v: &impl serde::Serialize) -> Result<String, Exit> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(internal)
}

fn csv_string(f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<String, Exit> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(internal)?;
    String::from_utf8(buf).map_err(internal)
}

fn solution_csv(case: &GridCase, x: &StateVector) -> String {
    let mut s = String::from("external_bus_id,u,v,magnitude,angle_deg\n");
    if let Value::Array(rows) = buses_json(case, x) {
        for r in rows {
            s += &format!(
                "{},{},{},{},{}\n",
                r["id"], r["u"], r["v"], r["magnitude"], r["angle_deg"]
            );
        }
    }
    s
}

fn flow_failure_json(case: &GridCase, err: &FlowError) -> Value {
    match err {
        FlowError::NoConvergence(nc) => {
            let NoConvergence {
                last,
                iterations,
                residual_history,
            } = nc.as_ref();
            json!({
                "converged": false,
                "reason": "no_convergence",
                "iterations": iterations,
                "residual_history": residual_history,
                "last_iterate": buses_json(case, last),
            })
        }
        FlowError::SingularJacobian { bus, component } => json!({
            "converged": false,
            "reason": "singular_jacobian",
            "bus": bus,
            "component": component.to_string(),
        }),
        other => json!({ "converged": false, "reason": other.to_string() }),
    }
}

fn cmd_solve(path: &Path, tol: f64, max_iter: usize, format: Format) -> Result<u8, Exit> {
    if max_iter == 0 {
        return Err(input_error(anyhow::anyhow!("--max-iter must be at least 1")));
    }
    let case = load_case(path)?;
    let s = InjectionVector::from_case(&case);
    let opts = NewtonOptions { tol, max_iter };
    match newton_solve(&case, &s, &flat_start(&case), &opts) {
        Ok(sol) => {
            eprintln!(
                "converged in {} iterations, residual {:.3e}",
                sol.iterations, sol.residual_norm
            );
            let text = match format {
                Format::Json => {
                    let swing = swing_injection(&case, &sol.x).map_err(internal)?;
                    to_json(&json!({
                        "converged": true,
                        "iterations": sol.iterations,
                        "residual_norm": sol.residual_norm,
                        "residual_history": sol.residual_history,
                        "swing_injection": { "p": swing.re, "q": swing.im },
                        "buses": buses_json(&case, &sol.x),
                    }))?
                }
                Format::Csv => solution_csv(&case, &sol.x),
            };
            write_payload(&text)?;
            Ok(0)
        }
        Err(FlowError::DimensionMismatch { .. }) => Err(internal(anyhow::anyhow!(
            "internal dimension mismatch"
        ))),
        Err(err) => {
            eprintln!("load flow failed: {err}");
            let text = match format {
                Format::Json => to_json(&flow_failure_json(&case, &err))?,
                Format::Csv => {
                    let history = match &err {
                        FlowError::NoConvergence(nc) => nc.residual_history.clone(),
                        _ => Vec::new(),
                    };
                    let mut s = String::from("iteration,residual_norm\n");
                    for (i, r) in history.iter().enumerate() {
                        s += &format!("{i},{r}\n");
                    }
                    s
                }
            };
            write_payload(&text)?;
            Ok(1)
        }
    }
}

fn feasible_report(case: &GridCase, x: &StateVector, format: Format) -> Result<String, Exit> {
    let sens = loss_grad_s(case, x).map_err(internal)?;
    match format {
        Format::Json => {
            let n = case.n();
            let mut mlc: Vec<(i64, Value)> = (0..n)
                .map(|i| {
                    let id = case.external_id(i + 1);
                    (id, json!({ "bus": id, "p": sens.mlc[i], "q": sens.mlc[n + i] }))
                })
                .collect();
            mlc.sort_by_key(|r| r.0);
            to_json(&json!({
                "feasible": true,
                "losses": sens.value,
                "buses": buses_json(case, x),
                "mlc_profile": mlc.into_iter().map(|r| r.1).collect::<Vec<_>>(),
            }))
        }
        Format::Csv => csv_string(|buf| write_mlc_csv(case, &sens, buf)),
    }
}

fn sweep_payload(sweep: &SweepResult, format: Format) -> Result<String, Exit> {
    match format {
        Format::Json => to_json(sweep),
        Format::Csv => csv_string(|buf| write_sweep_csv(sweep, buf)),
    }
}

fn try_feasible(case: &GridCase) -> Option<StateVector> {
    let s = InjectionVector::from_case(case);
    newton_solve(case, &s, &flat_start(case), &NewtonOptions::default())
        .ok()
        .map(|sol| sol.x)
}

fn cmd_localize(path: &Path, alpha: f64, h_step: f64, format: Format) -> Result<u8, Exit> {
    let case = load_case(path)?;
    if let Some(x) = try_feasible(&case) {
        eprintln!("case is feasible, reporting marginal loss coefficients");
        write_payload(&feasible_report(&case, &x, format)?)?;
        return Ok(0);
    }
    eprintln!("load flow diverged, minimizing regularized residual with alpha = {alpha}");
    let s = InjectionVector::from_case(&case);
    let opts = SweepOptions {
        h_step,
        ..SweepOptions::default()
    };
    let diagnosis = minimize_and_classify(&case, &s, alpha, &opts)
        .map_err(|e| internal(anyhow::anyhow!("{e}")))?;
    eprintln!(
        "stationary point after {} iterations, classification {}",
        diagnosis.iterations,
        diagnosis.classification.as_str()
    );
    let text = match format {
        Format::Json => to_json(&diagnosis)?,
        Format::Csv => sweep_payload(
            &SweepResult {
                stability: 1.0,
                entries: vec![SweepEntry {
                    alpha,
                    diagnosis: Some(diagnosis),
                    error: None,
                }],
            },
            Format::Csv,
        )?,
    };
    write_payload(&text)?;
    Ok(1)
}

fn cmd_sweep(path: &Path, alphas: &[f64], h_step: f64, format: Format) -> Result<u8, Exit> {
    let case = load_case(path)?;
    let feasible = try_feasible(&case).is_some();
    let s = InjectionVector::from_case(&case);
    let opts = SweepOptions {
        h_step,
        ..SweepOptions::default()
    };
    let sweep = alpha_sweep(&case, &s, alphas, &opts).map_err(input_error)?;
    for e in &sweep.entries {
        eprintln!("alpha {:e}: {}", e.alpha, e.status());
    }
    write_payload(&sweep_payload(&sweep, format)?)?;
    if sweep.entries.iter().any(|e| e.diagnosis.is_none()) {
        Ok(3)
    } else if feasible {
        Ok(0)
    } else {
        Ok(1)
    }
}

fn cmd_convert(path: &Path) -> Result<u8, Exit> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(input_error)?;
    let case = import_matpower(&text).map_err(input_error)?;
    write_payload(&(case.to_json() + "\n"))?;
    Ok(0)
}

fn run(cli: Cli) -> Result<u8, Exit> {
    match cli.command {
        Command::Solve {
            case,
            tol,
            max_iter,
            format,
        } => {
            configure_threads(None)?;
            cmd_solve(&case, tol, max_iter, format)
        }
        Command::Localize {
            case,
            alpha,
            h_step,
            format,
        } => {
            configure_threads(None)?;
            cmd_localize(&case, alpha, h_step, format)
        }
        Command::Sweep {
            case,
            alphas,
            h_step,
            format,
        } => {
            configure_threads(Some(alphas.0.len()))?;
            cmd_sweep(&case, &alphas.0, h_step, format)
        }
        Command::Convert { matpower } => {
            configure_threads(None)?;
            cmd_convert(&matpower)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let code = match run(cli) {
        Ok(code) => code,
        Err(Exit { code, err }) => {
            eprintln!("error: {err:#}");
            code
        }
    };
    eprintln!("done in {:.3} s", started.elapsed().as_secs_f64());
    ExitCode::from(code)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gridlocus::localizer::DEFAULT_ALPHAS;

    #[test]
    fn alpha_list_parsing() {
        assert_eq!(alpha_list("0.1,1").unwrap().0, vec![0.1, 1.0]);
        assert!(alpha_list("0.1,-1").is_err());
        assert!(alpha_list("0.1,,1").is_err());
        assert!(alpha_list("1,1").is_err());
        assert!(alpha_list("").is_err());
    }

    #[test]
    fn default_alphas_match_library() {
        let parsed = alpha_list("0.001,0.01,0.1,1,10").unwrap().0;
        assert_eq!(parsed, DEFAULT_ALPHAS.to_vec());
    }
}
