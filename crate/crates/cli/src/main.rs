use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fblab_core::audit::{audit_run, run_audit, AuditInput, AuditKind, Report};
use fblab_core::field::Point;
use fblab_core::io::{encode_pgm, read_field};
use fblab_core::monotone::{audit_monotone, Ladder};
use fblab_core::problem::{AlmostMinParams, WeightField};
use fblab_core::run::{load_run, read_weights, solve_run};
use fblab_core::{Config, Error};

#[derive(Parser)]
#[command(name = "fblab", version, about = "Free-boundary laboratory: solve, extract and audit")]
struct Cli {
    /// Solver and audit configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunReport {
    #[arg(long)]
    run: PathBuf,
    /// Report file; a `.csv` extension selects the CSV mirror.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a problem spec into a run directory.
    Solve {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run audits on a run directory: one kind, a comma list, or `all`.
    Audit {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "all")]
        which: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Weiss energy ladder at one point of a stored field.
    Weiss {
        /// Field path, with or without the `.json` extension.
        #[arg(long)]
        field: PathBuf,
        /// Weights metadata (`weights.json` of a run); `q ≡ 1` when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_parser = parse_point)]
        point: Point,
        #[arg(long)]
        rmax: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flatness decay ladder `η,θ,r0` at the audit points.
    Flatness {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_parser = parse_ladder)]
        ladder: Option<(f64, f64, f64)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Density-gap classification at the audit points.
    Classify(RunReport),
    /// Corkscrew and Harnack chain report.
    NtaReport(RunReport),
    /// Ahlfors regularity and harmonic measure report.
    AhlforsReport(RunReport),
    /// Almost-minimality verification on random balls.
    VerifyAmin(RunReport),
    /// Export a stored field as a binary greyscale PGM image.
    ExportPgm {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_point(s: &str) -> Result<Point, String> {
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"))).collect::<Result<_, _>>()?;
    match v[..] {
        [x, y] => Ok([x, y]),
        _ => Err("expected `x,y`".into()),
    }
}

fn parse_ladder(s: &str) -> Result<(f64, f64, f64), String> {
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"))).collect::<Result<_, _>>()?;
    match v[..] {
        [eta, theta, r0] => Ok((eta, theta, r0)),
        _ => Err("expected `eta,theta,r0`".into()),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Missing(_) => 3,
        Error::Io(_) => 4,
        _ => 2,
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, Error> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Parameter(format!("cannot read {}: {e}", p.display())))?;
            Config::from_json_str(&text)
        }
    }
}

fn field_path(p: &Path) -> PathBuf {
    if p.extension().is_some_and(|e| e == "json") {
        p.with_extension("")
    } else {
        p.to_path_buf()
    }
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn write_report(path: &Path, report: &Report) -> Result<(), Error> {
    let text = if path.extension().is_some_and(|e| e == "csv") { report.to_csv() } else { report.to_json() };
    write_out(path, text.as_bytes())
}

fn run_report(cfg: &Config, args: &RunReport, kind: AuditKind) -> Result<(), Error> {
    let run = load_run(&args.run)?;
    let input = AuditInput { u: &run.u, boundary: &run.boundary, weights: &run.weights, almost_min: run.meta.almost_min };
    write_report(&args.out, &run_audit(&input, kind, &cfg.audit)?)
}

fn weiss_csv(cfg: &Config, field: &Path, weights: Option<&Path>, x0: Point, rmax: f64) -> Result<String, Error> {
    let u = read_field(&field_path(field))?;
    let (w, amp) = match weights {
        Some(p) => {
            let (w, meta) = read_weights(p)?;
            (w, meta.almost_min)
        }
        None => (WeightField::constant(u.grid(), 1.0)?, AlmostMinParams::exact(1.0)),
    };
    let c = &cfg.audit.weiss;
    let ladder = Ladder::new(rmax, c.gamma, c.r_min_h * u.grid().spacing())?;
    let mut s = String::from("r,W,Wtilde,dirichlet,volume,sphere,normal,dissipation,defect,pass,reason\n");
    match audit_monotone(&u, &w, &amp, x0, &ladder, c.tau_disc) {
        Err(e) => {
            let _ = writeln!(s, "{rmax:?},,,,,,,,,false,\"{}\"", e.to_string().replace('"', "'"));
        }
        Ok(a) => {
            for (k, smp) in a.samples.iter().enumerate() {
                // Each row carries the step from this radius down to the next.
                let step = a.steps.get(k);
                let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:?}"));
                let _ = writeln!(
                    s,
                    "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{},{},",
                    smp.r,
                    smp.w,
                    smp.w_tilde,
                    smp.dirichlet_part,
                    smp.volume_part,
                    smp.sphere_part,
                    smp.normal_part,
                    opt(step.map(|t| t.dissipation)),
                    opt(step.map(|t| t.defect)),
                    step.is_none_or(|t| t.pass)
                );
            }
        }
    }
    Ok(s)
}

fn execute(cli: &Cli) -> Result<(), Error> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Solve { spec, out } => {
            let m = solve_run(spec, out, &cfg)?;
            eprintln!("wrote {} artifacts to {}", m.artifacts.len(), out.display());
        }
        Command::Audit { run, which, out } => {
            let kinds = AuditKind::parse_list(which)?;
            let m = audit_run(run, &kinds, out, &cfg)?;
            eprintln!("wrote {} reports to {}", m.artifacts.len(), out.display());
        }
        Command::Weiss { field, weights, point, rmax, out } => {
            let csv = weiss_csv(&cfg, field, weights.as_deref(), *point, *rmax)?;
            write_out(out, csv.as_bytes())?;
        }
        Command::Flatness { run, ladder, out } => {
            if let Some((eta, theta, r0)) = *ladder {
                let p = &mut cfg.audit.decay.params;
                (p.eta, p.theta, p.r0) = (eta, theta, r0);
            }
            run_report(&cfg, &RunReport { run: run.clone(), out: out.clone() }, AuditKind::Decay)?;
        }
        Command::Classify(a) => run_report(&cfg, a, AuditKind::Classify)?,
        Command::NtaReport(a) => run_report(&cfg, a, AuditKind::Nta)?,
        Command::AhlforsReport(a) => run_report(&cfg, a, AuditKind::Ahlfors)?,
        Command::VerifyAmin(a) => run_report(&cfg, a, AuditKind::Amin)?,
        Command::ExportPgm { field, out } => {
            let u = read_field(&field_path(field))?;
            write_out(out, &encode_pgm(&u)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fblab: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
