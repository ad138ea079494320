use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use otmetric::error::{Error, Result};
use otmetric::measurements::MeasurementSet;
use otmetric::ot;
use otmetric::reconstruction::{gauge_compare, reconstruct};
use otmetric::scenario::{simulate, ScenarioConfig, Truth};

#[derive(Parser)]
#[command(
    name = "otmetric",
    version,
    about = "Metric recovery from linearized optimal-transport data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Scenario file (`section.key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output root; artifacts go to `<out>/<scenario name>/`.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the true metric and density.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Solve every probe and write the measurement set.
    Measure {
        #[command(flatten)]
        common: Common,
        /// Noise seed, overriding `run.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Relative noise level, overriding `noise.sigma`.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Reconstruct the metric from the measurement set.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Compare with a ground truth directory (defaults to the scenario's `truth/`).
        #[arg(long, num_args = 0..=1)]
        truth: Option<Option<PathBuf>>,
    },
    /// Entropic transport checks on the constant-metric scenario.
    ValidateOt {
        #[command(flatten)]
        common: Common,
    },
    /// Collect the written reports into `reports/summary.txt`.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn new(out: &Path, cfg: &ScenarioConfig) -> Self {
        Layout {
            root: out.join(&cfg.name),
        }
    }

    fn truth(&self) -> PathBuf {
        self.root.join("truth")
    }

    fn measurements(&self) -> PathBuf {
        self.root.join("measurements")
    }

    fn recon(&self) -> PathBuf {
        self.root.join("recon")
    }

    fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn load(common: &Common) -> Result<(ScenarioConfig, Layout)> {
    let cfg = ScenarioConfig::load(&common.config)?;
    let layout = Layout::new(&common.out, &cfg);
    Ok((cfg, layout))
}

fn synth(common: &Common) -> Result<u8> {
    let (cfg, layout) = load(common)?;
    Truth::synthesize(&cfg)?.write(layout.truth())?;
    println!("truth written to {}", layout.truth().display());
    Ok(0)
}

fn measure(common: &Common, seed: Option<u64>, noise: Option<f64>) -> Result<u8> {
    let (mut cfg, layout) = load(common)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = noise {
        if !(0.0..=1.0).contains(&n) {
            return Err(Error::Config {
                line: 0,
                key: "--noise".into(),
                message: format!("must lie in [0, 1], got {n}"),
            });
        }
        cfg.noise = n;
    }
    let truth = Truth::read(layout.truth())?;
    if truth.g.grid != cfg.grid {
        return Err(Error::GridMismatch(format!(
            "{} does not match the scenario grid; rerun synth",
            layout.truth().display()
        )));
    }
    let (ms, dict) = simulate(&cfg, &truth)?;
    ms.save(layout.measurements())?;
    let mut s = String::new();
    for e in &dict.entries {
        let _ = writeln!(
            s,
            "probe.{}=iterations:{} relative_residual:{:e} compatibility_defect:{:e}",
            e.source.id,
            e.report.iterations,
            e.report.relative_residual,
            e.report.compatibility_defect
        );
    }
    write_text(&layout.reports().join("solves.txt"), &s)?;
    println!(
        "{} probes written to {} (noise {}, seed {})",
        ms.probes.len(),
        layout.measurements().display(),
        ms.noise,
        ms.seed
    );
    Ok(0)
}

fn reconstruct_cmd(common: &Common, truth: Option<Option<PathBuf>>) -> Result<u8> {
    let (cfg, layout) = load(common)?;
    let ms = MeasurementSet::load(layout.measurements())?;
    let truth = match truth {
        None => None,
        Some(dir) => Some(Truth::read(dir.unwrap_or_else(|| layout.truth()))?),
    };
    let result = reconstruct(&ms, &cfg.patch_cover()?, &cfg.recon)?;
    let gauge = match &truth {
        Some(t) => Some(gauge_compare(&result.ghat, &t.g, &result.mask)?),
        None => None,
    };
    result.write(layout.recon(), gauge.as_ref())?;
    let coverage = result.coverage();
    println!("coverage={coverage:.4}");
    if let Some(g) = &gauge {
        println!(
            "s={:e} relerr_median={:e} relerr_max={:e}",
            g.s, g.median, g.max
        );
    }
    if coverage < cfg.min_coverage {
        eprintln!("error.kind=InsufficientCoverage");
        eprintln!("error.exit_code=4");
        eprintln!(
            "error.message=coverage {coverage:.4} below {}",
            cfg.min_coverage
        );
        return Ok(4);
    }
    Ok(0)
}

fn validate_ot(common: &Common) -> Result<u8> {
    let (cfg, layout) = load(common)?;
    if !cfg.is_constant_metric() {
        return Err(Error::Config {
            line: 0,
            key: "metric.family".into(),
            message: "transport validation needs metric.family = constant".into(),
        });
    }
    let report = ot::validate(&cfg.ot)?;
    let text = report.to_text();
    write_text(&layout.reports().join("ot_report.txt"), &text)?;
    write_text(&layout.reports().join("ot_errors.csv"), &report.csv())?;
    print!("{text}");
    Ok(0)
}

fn report(common: &Common) -> Result<u8> {
    let (cfg, layout) = load(common)?;
    let sources = [
        ("reconstruction", layout.recon().join("report.txt")),
        ("transport", layout.reports().join("ot_report.txt")),
        ("solves", layout.reports().join("solves.txt")),
    ];
    let mut s = String::new();
    let _ = writeln!(s, "scenario={}", cfg.name);
    let _ = writeln!(s, "config_hash={}", cfg.hash);
    let mut found = 0;
    for (section, path) in &sources {
        if let Ok(text) = fs::read_to_string(path) {
            found += 1;
            for line in text.lines() {
                let _ = writeln!(s, "{section}.{line}");
            }
        }
    }
    if found == 0 {
        return Err(Error::Io {
            path: layout.root.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no reports to collect"),
        });
    }
    write_text(&layout.reports().join("summary.txt"), &s)?;
    print!("{s}");
    Ok(0)
}

fn error_block(e: &Error) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "error.kind={}", e.kind());
    let _ = writeln!(s, "error.exit_code={}", e.exit_code());
    let _ = writeln!(s, "error.message={e}");
    match e {
        Error::Config { line, key, .. } => {
            let _ = writeln!(s, "error.line={line}");
            let _ = writeln!(s, "error.key={key}");
        }
        Error::NoAdmissiblePatch { failures } => {
            for (patch, reason) in failures {
                let _ = writeln!(s, "error.patch.{patch}={reason}");
            }
        }
        Error::Probe { id, .. } => {
            let _ = writeln!(s, "error.probe={id}");
        }
        _ => {}
    }
    s
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Synth { common } => synth(common),
        Command::Measure {
            common,
            seed,
            noise,
        } => measure(common, *seed, *noise),
        Command::Reconstruct { common, truth } => reconstruct_cmd(common, truth.clone()),
        Command::ValidateOt { common } => validate_ot(common),
        Command::Report { common } => report(common),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprint!("{}", error_block(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
