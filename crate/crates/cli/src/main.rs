//! `qep`: prior sampling, MAP fitting, posterior sampling, prediction and
//! deblurring experiments with q-exponential process priors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use qep::harness::config::KEYS;
use qep::harness::{self, ExperimentConfig, MetricsReport, RunOutput};

const OUTPUT_ENV: &str = "QEP_OUTPUT_DIR";

const VERBS: &[(&str, &str)] = &[
    ("sample-prior", "Draw prior realizations on the experiment grid"),
    ("fit-map", "Compute the MAP estimate with its objective and error traces"),
    ("run-mcmc", "Run elliptical slice sampling and summarize the posterior"),
    ("predict", "Hold-out prediction with credible bands (time series)"),
    ("deblur", "Image deblurring with posterior sampling over repeats"),
    ("report", "Tabulate every metrics file in the output directory"),
];

fn cli() -> Command {
    let mut cmd = Command::new("qep")
        .about("Q-exponential process priors: experiments and diagnostics")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (verb, about) in VERBS {
        let mut sub = Command::new(*verb).about(*about).arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .value_name("FILE")
                .help("Flat key = value configuration file"),
        );
        if *verb != "report" {
            sub = sub.arg(
                Arg::new("set")
                    .long("set")
                    .value_name("KEY=VALUE")
                    .action(ArgAction::Append)
                    .help("Override one configuration key"),
            );
            for key in KEYS.iter().filter(|k| **k != "output_dir") {
                let long: &'static str = Box::leak(key.replace('_', "-").into_boxed_str());
                sub = sub.arg(Arg::new(*key).long(long).value_name("VALUE"));
            }
        }
        sub = sub.arg(
            Arg::new("output_dir")
                .long("output-dir")
                .short('o')
                .value_name("DIR")
                .help(format!("Output directory [env: {OUTPUT_ENV}]")),
        );
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Defaults, then the environment's output directory, then the config file,
/// then `--set`, then dedicated flags.
fn build_config(m: &ArgMatches) -> qep::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Ok(dir) = std::env::var(OUTPUT_ENV) {
        if !dir.is_empty() {
            cfg.output_dir = Some(PathBuf::from(dir));
        }
    }
    if let Some(path) = m.get_one::<String>("config") {
        let text = std::fs::read_to_string(path)?;
        cfg.apply_text(&text)?;
    }
    if let Ok(Some(sets)) = m.try_get_many::<String>("set") {
        for kv in sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| qep::Error::Parse(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k, v)?;
        }
    }
    for key in KEYS {
        if let Ok(Some(v)) = m.try_get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn print_report(r: &MetricsReport) {
    let mut fields = Vec::new();
    if let Some(v) = r.relative_error {
        fields.push(format!("relative_error={v:.6}"));
    }
    if let Some(v) = r.rem {
        fields.push(format!("rem={v:.6}"));
    }
    if let Some(v) = r.rem_std {
        fields.push(format!("rem_std={v:.6}"));
    }
    for (k, v) in &r.extra {
        fields.push(format!("{k}={v}"));
    }
    println!("{}: {}", r.label, fields.join(" "));
}

fn print_output(out: &RunOutput) {
    for r in &out.runs {
        print_report(r);
    }
    if out.runs.len() > 1 {
        print_report(&out.summary);
    }
    for f in &out.files {
        println!("wrote {}", f.display());
    }
}

fn run(verb: &str, m: &ArgMatches) -> qep::Result<()> {
    let cfg = build_config(m)?;
    let out = match verb {
        "sample-prior" => harness::sample_prior(&cfg)?,
        "fit-map" => harness::fit_map(&cfg)?,
        "run-mcmc" => harness::run_chain(&cfg)?,
        "predict" => harness::predict(&cfg)?,
        "deblur" => harness::deblur(&cfg)?,
        "report" => {
            let dir = cfg.output_dir.unwrap_or_else(|| PathBuf::from("."));
            let (text, path) = harness::report(&dir)?;
            print!("{text}");
            println!("wrote {}", path.display());
            return Ok(());
        }
        other => unreachable!("unknown verb {other}"),
    };
    print_output(&out);
    Ok(())
}

fn error_kind(e: &qep::Error) -> &'static str {
    match e {
        qep::Error::InvalidInput(_) => "invalid_input",
        qep::Error::DimensionMismatch { .. } => "dimension_mismatch",
        qep::Error::NotPositiveDefinite { .. } => "not_positive_definite",
        qep::Error::Numerical(_) => "numerical",
        qep::Error::Unsupported(_) => "unsupported",
        qep::Error::Parse(_) => "parse",
        qep::Error::Io(_) => "io",
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (verb, sub) = matches.subcommand().expect("subcommand is required");
    match run(verb, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", error_kind(&e));
            ExitCode::FAILURE
        }
    }
}
