//! `qaret`: the retrieval pretraining and QA finetuning pipeline as subcommands.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{default_text, flag_name, Kind, RunConfig, CONFIG_ENV, FIELDS};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config, or a missing input path. Exit status 2.
    Usage(String),
    /// Failure inside a stage. Exit status 1.
    Runtime(String),
}

impl From<qaret_core::Error> for CliError {
    fn from(e: qaret_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    fn emit(&self) -> ExitCode {
        let (kind, message, code) = match self {
            CliError::Usage(m) => ("usage", m, 2),
            CliError::Runtime(m) => ("runtime", m, 1),
        };
        eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
        ExitCode::from(code)
    }
}

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("synth", "Write a seeded synthetic corpus and train/dev/test questions"),
    ("chunk", "Split the corpus into fixed-length chunks"),
    ("gen-data", "Generate question-paragraph pairs from the chunks"),
    ("pretrain", "Pretrain the dual encoder on the pairs"),
    ("encode-corpus", "Encode every chunk with the paragraph tower"),
    ("build-index", "Build the IVF index over the encoded corpus"),
    ("finetune", "Train the question tower and reader on QA pairs"),
    ("eval-retrieval", "Report Recall@k on the test questions"),
    ("eval-qa", "Report exact match on the test questions"),
    ("query", "Answer questions read from stdin, one JSON line each"),
    ("ablation", "Pretrain three strategies and tabulate Recall@k"),
];

fn global_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("PATH")
        .global(true)
        .help(format!("TOML config file; falls back to ${CONFIG_ENV} [default: unset]"))];
    for f in FIELDS {
        let mut arg = Arg::new(f.name)
            .long(flag_name(f.name))
            .value_name(f.kind.value_name())
            .global(true)
            .action(ArgAction::Set)
            .help(format!("{} [default: {}]", f.help, default_text(f.name)));
        if f.kind == Kind::Bool {
            arg = arg.num_args(0..=1).default_missing_value("true");
        }
        args.push(arg);
    }
    args
}

fn cli() -> Command {
    let mut cmd = Command::new("qaret")
        .about("Dense retrieval pretraining and open-domain QA finetuning")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .args(global_args());
    for (name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(Command::new(*name).about(*about));
    }
    cmd
}

fn resolve(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let path = m.get_one::<String>("config").map(PathBuf::from);
    let overrides: Vec<(&'static str, String)> = FIELDS
        .iter()
        .filter_map(|f| m.get_one::<String>(f.name).map(|v| (f.name, v.clone())))
        .collect();
    let cfg = RunConfig::load(path.as_deref())?.with_overrides(&overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(name: &str, m: &ArgMatches) -> Result<(), CliError> {
    let cfg = resolve(m)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    commands::dispatch(name, &cfg)
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                let code = if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 };
                return ExitCode::from(code);
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or_default();
            return CliError::Usage(first.trim_start_matches("error: ").to_string()).emit();
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.emit(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_tree_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn flags_reach_subcommands() {
        let m = cli()
            .try_get_matches_from(["qaret", "pretrain", "--total-updates", "0", "--seed", "9", "--clustering"])
            .unwrap();
        let (name, sub) = m.subcommand().unwrap();
        assert_eq!(name, "pretrain");
        let cfg = resolve(sub).unwrap();
        assert_eq!(cfg.total_updates, 0);
        assert_eq!(cfg.seed, 9);
        assert!(cfg.clustering);
    }
}
