//! Command-line front end: field generation, reference simulation, scenario
//! execution, metric recomputation, and checkpoint-driven transfer runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use groundflow::config::KvDoc;
use groundflow::error::{ErrorClass, GfError};
use groundflow::kle::{build_basis_2d, ConductivityField, CovarianceSpec, FieldFile};
use groundflow::manifest::{failed_stage, list_artifacts, sha256_hex, unix_now, RunManifest};
use groundflow::scenario::{
    self, default_ensemble_seeds, relative_l2, r2_score, ArtifactLevel, ScenarioSpec,
};
use groundflow::solver::{self, SideBc, WellSpec};
use groundflow::{net, Grid2D, Result, VERSION};

#[derive(Parser)]
#[command(name = "groundflow", version, about = "Physics-constrained neural surrogates for 2-D groundwater flow", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a conductivity-field realization and write its document.
    Field(FieldArgs),
    /// Run the finite-difference reference solver on a stored field.
    Simulate(SimulateArgs),
    /// Execute a scenario spec (single run or ensemble) end to end.
    Run(RunArgs),
    /// Recompute metrics from a stored prediction CSV.
    Eval(EvalArgs),
    /// Drive the transfer protocol from a pretrained checkpoint.
    Transfer(TransferArgs),
}

#[derive(Args)]
struct FieldArgs {
    /// Covariance spec document (key = value); defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Seed for the standard-normal coordinates.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output path for the field document.
    #[arg(long)]
    out: PathBuf,
    /// Embed gridded log-conductivity values, e.g. --grid 51,51.
    #[arg(long, value_parser = parse_grid_dims)]
    grid: Option<(usize, usize)>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Field document produced by `field`.
    #[arg(long)]
    field: PathBuf,
    /// Output directory for the solution files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 51)]
    nx: usize,
    #[arg(long, default_value_t = 51)]
    ny: usize,
    #[arg(long, default_value_t = 0.2)]
    dt: f64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    specific_storage: f64,
    #[arg(long, default_value_t = 1.0)]
    left: f64,
    #[arg(long, default_value_t = 0.0)]
    right: f64,
    /// Right-boundary step change as STEP:VALUE, e.g. 20:2.
    #[arg(long, value_parser = parse_step_change)]
    right_change: Option<(usize, f64)>,
    /// Initial condition: `front` (1 on the left column) or `uniform:V`.
    #[arg(long, default_value = "front")]
    ic: String,
    /// Well as X,Y,RATE or X,Y,RATE,FLOOR.
    #[arg(long, value_parser = parse_well)]
    well: Option<(f64, f64, f64, Option<f64>)>,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario spec document.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for run artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Parallel realizations for ensembles.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Validate the spec and exit without computing.
    #[arg(long, default_value_t = false)]
    dry_run: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction CSV with header step,t,x,y,h_pred,h_true.
    #[arg(long)]
    pred: PathBuf,
    /// Optional JSON output path (prints to stdout otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TransferArgs {
    /// Scenario spec document (kind must be `transfer`).
    #[arg(long)]
    spec: PathBuf,
    /// Pretrained checkpoint to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for run artifacts.
    #[arg(long)]
    out: PathBuf,
}

fn parse_grid_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected NX,NY".into());
    }
    let nx = parts[0].trim().parse().map_err(|e| format!("nx: {e}"))?;
    let ny = parts[1].trim().parse().map_err(|e| format!("ny: {e}"))?;
    Ok((nx, ny))
}

fn parse_step_change(s: &str) -> std::result::Result<(usize, f64), String> {
    let (step, value) = s.split_once(':').ok_or("expected STEP:VALUE")?;
    Ok((
        step.trim().parse().map_err(|e| format!("step: {e}"))?,
        value.trim().parse().map_err(|e| format!("value: {e}"))?,
    ))
}

fn parse_well(s: &str) -> std::result::Result<(f64, f64, f64, Option<f64>), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 && parts.len() != 4 {
        return Err("expected X,Y,RATE or X,Y,RATE,FLOOR".into());
    }
    let num = |i: usize| -> std::result::Result<f64, String> {
        parts[i].trim().parse().map_err(|e| format!("field {i}: {e}"))
    };
    let floor = if parts.len() == 4 { Some(num(3)?) } else { None };
    Ok((num(0)?, num(1)?, num(2)?, floor))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| GfError::io(path.display().to_string(), e))
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| GfError::io(parent.display().to_string(), e))?;
        }
    }
    std::fs::write(path, content).map_err(|e| GfError::io(path.display().to_string(), e))
}

fn covariance_from_doc(text: &str) -> Result<(CovarianceSpec, usize)> {
    let doc = KvDoc::parse(text)?;
    let spec = CovarianceSpec {
        variance: doc.get_f64("variance", 1.0)?,
        corr_len_x: doc.get_f64("corr_len_x", 408.0)?,
        corr_len_y: doc.get_f64("corr_len_y", 408.0)?,
        domain_len_x: doc.get_f64("domain_len_x", 1020.0)?,
        domain_len_y: doc.get_f64("domain_len_y", 1020.0)?,
        mean_logk: doc.get_f64("mean_logk", 0.0)?,
    };
    let n_terms = doc.get_usize("n_terms", 20)?;
    doc.finish()?;
    Ok((spec, n_terms))
}

fn cmd_field(args: &FieldArgs) -> Result<()> {
    let (cov, n_terms) = match &args.spec {
        Some(path) => covariance_from_doc(&read_file(path)?)?,
        None => (CovarianceSpec::default(), 20),
    };
    let basis = std::sync::Arc::new(build_basis_2d(&cov, n_terms)?);
    let captured = basis.captured_variance_fraction();
    let field = ConductivityField::sample(basis, args.seed);
    let mut doc = FieldFile::from_field(&field, Some(args.seed));
    if let Some((nx, ny)) = args.grid {
        let grid = Grid2D::from_extent(nx, ny, cov.domain_len_x, cov.domain_len_y)?;
        doc = doc.with_grid(&field, &grid);
    }
    write_file(&args.out, &doc.to_document())?;
    println!(
        "wrote {} ({} terms, captured variance fraction {:.4})",
        args.out.display(),
        n_terms,
        captured
    );
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let field_doc = FieldFile::parse(&read_file(&args.field)?)?;
    let field = field_doc.instantiate()?;
    let grid = Grid2D::from_extent(
        args.nx,
        args.ny,
        field_doc.spec.domain_len_x,
        field_doc.spec.domain_len_y,
    )?;
    let k = field.k_grid(&grid);

    let right = match args.right_change {
        Some((step, value)) => SideBc::head_with_change(args.right, step, value),
        None => SideBc::head(args.right),
    };
    let mut ic = ndarray::Array2::zeros((grid.ny, grid.nx));
    match args.ic.as_str() {
        "front" => {
            for j in 0..grid.ny {
                ic[(j, 0)] = args.left;
                ic[(j, grid.nx - 1)] = args.right;
            }
        }
        other => {
            let Some(v) = other.strip_prefix("uniform:") else {
                return Err(GfError::invalid("ic flag", format!("expected 'front' or 'uniform:V', got '{other}'")));
            };
            let v: f64 = v
                .parse()
                .map_err(|e| GfError::invalid("ic flag", format!("'{v}': {e}")))?;
            ic.fill(v);
            for j in 0..grid.ny {
                ic[(j, 0)] = args.left;
                ic[(j, grid.nx - 1)] = args.right;
            }
        }
    }
    let wells = match args.well {
        Some((x, y, rate, floor)) => vec![WellSpec {
            cell: (grid.cell_of_x(x), grid.cell_of_y(y)),
            rate,
            head_floor: floor,
        }],
        None => vec![],
    };
    let problem = solver::FlowProblem {
        grid,
        specific_storage: args.specific_storage,
        k,
        bc: solver::BcSchedule {
            left: SideBc::head(args.left),
            right,
            bottom: SideBc::NoFlow,
            top: SideBc::NoFlow,
        },
        ic,
        wells,
        dt: args.dt,
        n_steps: args.steps,
    };
    let solution = solver::simulate(&problem)?;
    std::fs::create_dir_all(&args.out).map_err(|e| GfError::io(args.out.display().to_string(), e))?;
    write_file(&args.out.join("truth_meta.txt"), &solver::solution_metadata(&problem, &solution))?;
    write_file(&args.out.join("truth.csv"), &solver::solution_csv(&solution))?;
    println!(
        "simulated {} steps; wrote {} time slices; max mass-balance residual {:.3e}",
        solution.n_steps(),
        solution.heads.len(),
        solution.max_mass_balance_error()
    );
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let spec_text = read_file(&args.spec)?;
    let spec = ScenarioSpec::from_document(&spec_text)?;
    if args.dry_run {
        println!(
            "spec ok: kind={}, id={}, realizations={}; nothing executed (dry run)",
            spec.kind.tag(),
            spec.id,
            spec.n_realizations
        );
        return Ok(());
    }
    std::fs::create_dir_all(&args.out).map_err(|e| GfError::io(args.out.display().to_string(), e))?;
    let started = unix_now();
    let result: Result<String> = if spec.n_realizations >= 2 {
        let seeds = default_ensemble_seeds(&spec);
        scenario::run_ensemble(&spec, &seeds, Some(&args.out), args.parallel).map(|e| {
            format!(
                "ensemble n={}: guided mean L2 {:.6e} (var {:.3e}), baseline mean L2 {:.6e}; guided mean R2 {:.6}",
                e.n_succeeded,
                e.guided.mean_relative_l2,
                e.guided.var_relative_l2,
                e.baseline.mean_relative_l2,
                e.guided.mean_r2
            )
        })
    } else {
        scenario::run_scenario(&spec, Some(&args.out), ArtifactLevel::Full).map(|o| summarize(&o))
    };

    let manifest = RunManifest {
        run_id: format!("{}-{}", spec.id, &sha256_hex(spec_text.as_bytes())[..8]),
        spec_path: args.spec.display().to_string(),
        spec_sha256: sha256_hex(spec_text.as_bytes()),
        out_dir: args.out.display().to_string(),
        tool_version: VERSION.to_string(),
        started_unix: started,
        finished_unix: unix_now(),
        status: if result.is_ok() { "ok".into() } else { "failed".into() },
        failed_stage: result.as_ref().err().and_then(failed_stage),
        error: result.as_ref().err().map(|e| e.to_string()),
        artifacts: list_artifacts(&args.out)?,
    };
    manifest.write(&args.out)?;

    let summary = result?;
    println!("{summary}");
    println!("manifest: {}", args.out.join("manifest.json").display());
    Ok(())
}

fn summarize(outcome: &scenario::ScenarioOutcome) -> String {
    match outcome {
        scenario::ScenarioOutcome::Pair(p) => format!(
            "guided: L2 {:.6e}, R2 {:.6}; baseline: L2 {:.6e}, R2 {:.6}",
            p.guided.relative_l2, p.guided.r2_score, p.baseline.relative_l2, p.baseline.r2_score
        ),
        scenario::ScenarioOutcome::Transfer(t) => format!(
            "transfer: L2 {:.6e}; random tail: L2 {:.6e}; full retrain: L2 {:.6e}; frozen bitwise equal: {}",
            t.transfer.relative_l2,
            t.random_tail.relative_l2,
            t.full_retrain.relative_l2,
            t.frozen_layers_bitwise_equal
        ),
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let text = read_file(&args.pred)?;
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "step,t,x,y,h_pred,h_true" {
                return Err(GfError::Parse {
                    context: "prediction csv".into(),
                    why: format!("unexpected header '{line}'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(GfError::Parse {
                context: "prediction csv".into(),
                why: format!("line {}: expected 6 fields", lineno + 1),
            });
        }
        let parse = |tok: &str| -> Result<f64> {
            tok.parse().map_err(|e| GfError::Parse {
                context: "prediction csv".into(),
                why: format!("line {}: '{tok}': {e}", lineno + 1),
            })
        };
        preds.push(parse(fields[4])?);
        truths.push(parse(fields[5])?);
    }
    let l2 = relative_l2(&preds, &truths)?;
    let r2 = r2_score(&preds, &truths)?;
    let json = serde_json::json!({
        "n_points": preds.len(),
        "relative_l2": l2,
        "r2_score": r2,
    });
    let rendered = serde_json::to_string_pretty(&json)
        .map_err(|e| GfError::Config(format!("json encoding failed: {e}")))?;
    match &args.out {
        Some(path) => write_file(path, &rendered)?,
        None => println!("{rendered}"),
    }
    Ok(())
}

fn cmd_transfer(args: &TransferArgs) -> Result<()> {
    let spec = ScenarioSpec::from_document(&read_file(&args.spec)?)?;
    let params = net::parse_checkpoint(&read_file(&args.checkpoint)?)?;
    std::fs::create_dir_all(&args.out).map_err(|e| GfError::io(args.out.display().to_string(), e))?;
    let outcome = scenario::run_transfer_from_checkpoint(&spec, params, Some(&args.out), ArtifactLevel::Full)?;
    println!("{}", summarize(&outcome));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Field(args) => cmd_field(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Transfer(args) => cmd_transfer(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Spec => 2,
                ErrorClass::Numeric => 3,
                ErrorClass::Io => 4,
            })
        }
    }
}
