use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use msc_core::executive::{run, Termination, BUILTIN_ROBOTS};
use msc_core::gantt_svg;
use msc_core::scenario::{self, Overrides, BUNDLED};

/// Runs motion statechart scenarios in a kinematic simulation.
///
/// Log verbosity follows MSC_LOG (e.g. MSC_LOG=debug).
#[derive(Parser)]
#[command(name = "msc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Default)]
struct RunFlags {
    /// Control period in seconds.
    #[arg(long)]
    dt: Option<f64>,
    /// Prediction horizon in steps (at least 4).
    #[arg(long)]
    horizon: Option<usize>,
    /// Run timeout in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    /// Amplitude of uniform velocity-readback noise.
    #[arg(long)]
    noise: Option<f64>,
    /// Seed of the noise generator.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write trajectory.csv, gantt.json, report.json and gantt.svg.
    Run {
        /// Scenario file, or the name of a bundled scenario.
        scenario: String,
        /// Output directory (default: out/<scenario name>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Check schema and references without running.
    Validate { scenario: String },
    /// Render a gantt JSON file as SVG.
    GanttSvg { gantt: PathBuf, out: PathBuf },
    /// List bundled scenarios and built-in robots.
    List,
}

fn read_scenario(arg: &str) -> Result<String> {
    let path = Path::new(arg);
    if path.exists() {
        return std::fs::read_to_string(path).with_context(|| format!("reading {arg}"));
    }
    scenario::bundled(arg)
        .map(str::to_string)
        .with_context(|| format!("no scenario file or bundled scenario named `{arg}`"))
}

fn cmd_run(arg: &str, out: Option<PathBuf>, flags: RunFlags) -> Result<ExitCode> {
    let src = read_scenario(arg)?;
    let overrides = Overrides {
        dt: flags.dt,
        horizon: flags.horizon,
        timeout: flags.timeout,
        noise: flags.noise,
        seed: flags.seed,
    };
    let s = scenario::load(&src, &overrides)?;
    let name = s.file.name.clone();
    let out = out.unwrap_or_else(|| Path::new("out").join(&name));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let result = run(s.world, s.program, &s.config, s.events, s.sensors)?;
    let write = |file: &str, body: String| -> Result<()> {
        let p = out.join(file);
        std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))
    };
    write("trajectory.csv", scenario::trajectory_csv(&result.trajectory))?;
    write("gantt.json", scenario::gantt_json(&result.gantt))?;
    write("report.json", scenario::report_json(&name, &result.report, result.qp_dump.as_ref()))?;
    write("gantt.svg", gantt_svg::render(&result.gantt))?;
    let r = &result.report;
    let worst = r
        .smoothness
        .per_dof
        .iter()
        .map(|d| d.max_second_difference / d.bound)
        .fold(0.0f64, f64::max);
    println!(
        "{name}: {:?}{} after {} cycles ({:.2} s); solve median {:.3} ms, max {:.3} ms; worst jerk use {:.4}; {} smoothness violations; {} fallback cycles",
        r.termination,
        r.terminal_node.as_ref().map(|n| format!(" via `{n}`")).unwrap_or_default(),
        r.cycles,
        r.t_end,
        r.solve_time.median_ms,
        r.solve_time.max_ms,
        worst,
        r.smoothness.violations.len(),
        r.fallback_cycles,
    );
    println!("outputs in {}", out.display());
    Ok(ExitCode::from(match r.termination {
        Termination::End => 0,
        Termination::Cancel => 2,
        Termination::Timeout => 3,
    }))
}

fn cmd_validate(arg: &str) -> Result<ExitCode> {
    let s = scenario::load(&read_scenario(arg)?, &Overrides::default())?;
    println!(
        "{}: ok ({} nodes, {} DOFs, {} events)",
        s.file.name,
        s.program.chart.nodes().len(),
        s.world.dofs().len(),
        s.events.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gantt_svg(gantt: &Path, out: &Path) -> Result<ExitCode> {
    let src = std::fs::read_to_string(gantt).with_context(|| format!("reading {}", gantt.display()))?;
    let records = scenario::parse_gantt(&src)?;
    std::fs::write(out, gantt_svg::render(&records)).with_context(|| format!("writing {}", out.display()))?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MSC_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, out, flags } => cmd_run(&scenario, out, flags),
        Command::Validate { scenario } => cmd_validate(&scenario),
        Command::GanttSvg { gantt, out } => cmd_gantt_svg(&gantt, &out),
        Command::List => {
            println!("scenarios:");
            for (name, _) in BUNDLED {
                println!("  {name}");
            }
            println!("robots:");
            for r in BUILTIN_ROBOTS {
                println!("  {r}");
            }
            Ok(ExitCode::SUCCESS)
        }
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(1)
    })
}
