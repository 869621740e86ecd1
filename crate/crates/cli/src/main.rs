use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sweep_core::config::{parse_config, ModelConfig, Setup};
use sweep_core::dynamics::{fmt_sig, integrate, DiscreteTrajectory};
use sweep_core::models::{CarVariant, CrowdCase};
use sweep_core::nalgebra::DVector;
use sweep_core::optimality::{check_continuous, reconstruct_duals, CheckOptions};
use sweep_core::second_order::coderivative_f;
use sweep_core::transcription::{build_pk, convergence_study, solve, ControlInit};
use sweep_core::SweepError;

#[derive(Parser)]
#[command(name = "sweep", version, about = "Simulate, solve and check controlled sweeping processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the model under its default controls.
    Simulate(Common),
    /// Solve the discrete optimal control problem.
    Solve(Common),
    /// Reconstruct duals and check the optimality conditions.
    Check {
        #[command(flatten)]
        common: Common,
        /// Trajectory CSV to check (defaults to the builtin analytic solution).
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Solve on a sequence of grids and measure the distance to the analytic solution.
    Converge {
        #[command(flatten)]
        common: Common,
        /// Grid sizes, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "25,50,100,200")]
        k_list: Vec<usize>,
    },
    /// Evaluate the coderivative of the velocity mapping at the configured query.
    Coderiv(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    /// Car variant: standard or heavy-energy.
    #[arg(long)]
    variant: Option<CarVariant>,
    /// Crowd case: free or contact.
    #[arg(long)]
    case: Option<CrowdCase>,
    #[arg(long)]
    tol: Option<f64>,
}

impl Common {
    fn load(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => parse_config(path)?,
            None => match (self.variant, self.case) {
                (Some(_), Some(_)) => bail!("--variant and --case select different models"),
                (_, Some(case)) => ModelConfig::builtin_crowd(case),
                (variant, None) => ModelConfig::builtin_car(variant.unwrap_or_default()),
            },
        };
        if self.config.is_some() {
            if let Some(v) = self.variant {
                cfg.variant = Some(v);
            }
            if let Some(c) = self.case {
                cfg.case = Some(c);
            }
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(tol) = self.tol {
            cfg.check.tol = tol;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn output_dir(base: &Path, model: &str, command: &str) -> Result<PathBuf> {
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    fs::create_dir_all(base).with_context(|| format!("creating {}", base.display()))?;
    for n in 0.. {
        let name = if n == 0 { format!("{model}-{command}-{stamp}") } else { format!("{model}-{command}-{stamp}-{n}") };
        let dir = base.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

fn default_controls(setup: &Setup, k: usize) -> Result<ControlInit> {
    Ok(match &setup.analytic {
        Some(a) => a.controls(k)?,
        None => ControlInit::constant(&setup.u0, &DVector::zeros(setup.spec.control_dim), k),
    })
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate(common) => {
            let cfg = common.load()?;
            let setup = cfg.build()?;
            let c = default_controls(&setup, cfg.k)?;
            let run = integrate(&setup.spec, &c.u, &c.a, cfg.k)?;
            let dir = output_dir(&common.out, &setup.name, "simulate")?;
            write(&dir, "trajectory.csv", &run.trajectory.to_csv_string()?)?;
            println!("{}", dir.display());
            Ok(true)
        }
        Command::Solve(common) => {
            let cfg = common.load()?;
            let setup = cfg.build()?;
            let problem = build_pk(&setup.spec, &setup.cost, cfg.k, None)?;
            let init = ControlInit::constant(&setup.u0, &DVector::zeros(setup.spec.control_dim), cfg.k);
            let res = solve(&problem, &init, &cfg.solver)?;
            let dir = output_dir(&common.out, &setup.name, "solve")?;
            write(&dir, "trajectory.csv", &res.trajectory.to_csv_string()?)?;
            let mut summary = json!({
                "model": setup.name,
                "k": cfg.k,
                "status": res.status,
                "objective": fmt_sig(res.objective),
                "iterations": res.iterations,
                "kkt_residual": fmt_sig(res.kkt_residual),
                "max_violation": fmt_sig(res.max_violation),
            });
            if let Some(a) = &setup.analytic {
                summary["analytic_objective"] = json!(fmt_sig(a.objective));
            }
            write(&dir, "summary.json", &(serde_json::to_string_pretty(&summary)? + "\n"))?;
            println!("{}", dir.display());
            Ok(true)
        }
        Command::Check { common, trajectory } => {
            let cfg = common.load()?;
            let setup = cfg.build()?;
            let traj = match (&trajectory, &setup.analytic) {
                (Some(path), _) => {
                    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
                    DiscreteTrajectory::read_csv(file)?
                }
                (None, Some(a)) => a.sample(cfg.k)?,
                (None, None) => bail!("custom models need --trajectory for check"),
            };
            let k = traj.k();
            let problem = build_pk(&setup.spec, &setup.cost, k, None)?;
            let options = CheckOptions::with_tolerance(cfg.check.tol);
            let dir = output_dir(&common.out, &setup.name, "check")?;
            let rec = match reconstruct_duals(&traj, &problem, 1.0, &options) {
                Ok(r) => r,
                Err(e @ SweepError::ReconstructionFailed { .. }) => {
                    write(&dir, "report.txt", &format!("{e}\noverall fail\n"))?;
                    println!("{}", dir.display());
                    eprintln!("{e}");
                    return Ok(false);
                }
                Err(e) => return Err(e.into()),
            };
            write(&dir, "report.txt", &rec.report.to_text())?;
            write(&dir, "report.csv", &rec.report.to_csv()?)?;
            let mut pass = rec.report.overall;
            print!("{}", rec.report.to_text());
            if k >= 100 {
                let cont = check_continuous(&traj, &rec.duals, &setup.spec, &setup.cost, &options)?;
                write(&dir, "continuous.txt", &cont.to_text())?;
                write(&dir, "continuous.csv", &cont.to_csv()?)?;
                print!("{}", cont.to_text());
                pass &= cont.overall;
            }
            println!("{}", dir.display());
            Ok(pass)
        }
        Command::Converge { common, k_list } => {
            let cfg = common.load()?;
            let setup = cfg.build()?;
            let Some(analytic) = &setup.analytic else {
                bail!("converge needs a builtin model with an analytic solution")
            };
            let threads = std::env::var("SWEEP_THREADS").ok().and_then(|s| s.parse::<usize>().ok()).unwrap_or(0);
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
            let u0 = setup.u0.clone();
            let d = setup.spec.control_dim;
            let init = move |k: usize| ControlInit::constant(&u0, &DVector::zeros(d), k);
            let rows = pool.install(|| {
                convergence_study(
                    &setup.spec,
                    &setup.cost,
                    &k_list,
                    &analytic.as_reference(),
                    analytic.objective,
                    &init,
                    &cfg.solver,
                )
            })?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["k", "w12_distance", "objective", "objective_gap", "status", "error"])?;
            for r in &rows {
                let status = r
                    .status
                    .map(|s| serde_json::to_value(s).map(|v| v.as_str().unwrap_or("").to_string()))
                    .transpose()?;
                w.write_record([
                    r.k.to_string(),
                    fmt_sig(r.w12_distance),
                    fmt_sig(r.objective),
                    fmt_sig(r.objective_gap),
                    status.unwrap_or_default(),
                    r.error.clone().unwrap_or_default(),
                ])?;
            }
            let body = String::from_utf8(w.into_inner()?)?;
            let dir = output_dir(&common.out, &setup.name, "converge")?;
            write(&dir, "convergence.csv", &body)?;
            print!("{body}");
            println!("{}", dir.display());
            Ok(rows.iter().all(|r| r.error.is_none()))
        }
        Command::Coderiv(common) => {
            let cfg = common.load()?;
            let setup = cfg.build()?;
            let v = |s: &[f64]| DVector::from_column_slice(s);
            let (x, u, a, w, y) = match (&cfg.coderiv, &setup.analytic) {
                (Some(q), _) => (v(&q.x), v(&q.u), v(&q.a), v(&q.w), v(&q.y)),
                (None, Some(an)) => {
                    let n = setup.spec.state_dim();
                    ((an.x)(0.0), (an.u)(0.0), (an.a)(0.0), -(an.xdot)(0.0), DVector::from_element(n, 1.0))
                }
                (None, None) => bail!("custom models need a `coderiv` section"),
            };
            let cd = coderivative_f(&setup.spec, &x, &u, &a, &w, &y)?;
            let mut wtr = csv::Writer::from_writer(Vec::new());
            let m = cd.tags.len();
            let mut header = vec!["component".to_string(), "index".to_string(), "base".to_string()];
            header.extend((0..m).map(|i| format!("gamma{i}")));
            wtr.write_record(&header)?;
            let n = x.len();
            let gt = cd.gradients.transpose();
            for (name, base, sign) in [("x", &cd.x_base, -1.0), ("u", &cd.u_base, 1.0)] {
                for r in 0..n {
                    let mut rec = vec![name.to_string(), r.to_string(), fmt_sig(base[r])];
                    rec.extend((0..m).map(|i| fmt_sig(sign * gt[(r, i)])));
                    wtr.write_record(&rec)?;
                }
            }
            for r in 0..cd.a_value.len() {
                let mut rec = vec!["a".to_string(), r.to_string(), fmt_sig(cd.a_value[r])];
                rec.extend((0..m).map(|_| "0".to_string()));
                wtr.write_record(&rec)?;
            }
            let mut rec = vec!["tag".to_string(), String::new(), String::new()];
            rec.extend(cd.tags.iter().map(|t| format!("{t:?}").to_lowercase()));
            wtr.write_record(&rec)?;
            let mut rec = vec!["lambda".to_string(), String::new(), String::new()];
            rec.extend(cd.lambda.iter().map(|l| fmt_sig(*l)));
            wtr.write_record(&rec)?;
            let body = String::from_utf8(wtr.into_inner()?)?;
            let dir = output_dir(&common.out, &setup.name, "coderiv")?;
            write(&dir, "coderiv.csv", &body)?;
            println!("{}", dir.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
