//! `peye`: synthetic data, training, evaluation, prediction and ablations.
//!
//! Exit codes: 0 success, 1 runtime or precondition failure, 2 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, Command};
use peye_core::train::{ConfigName, TrainConfig};

fn out_dir() -> Arg {
    Arg::new("out-dir")
        .long("out-dir")
        .value_name("DIR")
        .value_parser(value_parser!(PathBuf))
        .required(true)
        .help("root directory for every file the command writes")
}

fn data() -> Arg {
    Arg::new("data")
        .long("data")
        .value_name("DIR")
        .value_parser(value_parser!(PathBuf))
        .required(true)
        .help("dataset directory containing manifest.json")
}

fn checkpoint() -> Arg {
    Arg::new("checkpoint")
        .long("checkpoint")
        .value_name("FILE")
        .value_parser(value_parser!(PathBuf))
        .required(true)
        .help("model checkpoint (.safetensors)")
}

fn no_plot() -> Arg {
    Arg::new("no-plot")
        .long("no-plot")
        .action(ArgAction::SetTrue)
        .help("write CSV only, skip the SVG plot")
}

fn count(name: &'static str, default: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("N")
        .value_parser(value_parser!(usize))
        .default_value(default)
        .help(help)
}

/// `--config FILE` plus one flag per training configuration key.
fn config_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .value_parser(value_parser!(PathBuf))
        .help("key = value configuration file; flags below override it")];
    args.extend(
        TrainConfig::KEYS
            .iter()
            .map(|&(key, help)| Arg::new(key).long(key).value_name("VALUE").help(help)),
    );
    args
}

pub fn cli() -> Command {
    let config_names: Vec<&str> = ConfigName::ALL.iter().map(|c| c.as_str()).collect();
    Command::new("peye")
        .about("Dense contact-pressure estimation from vision and physique")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("synth")
                .about("Write a synthetic dataset directory")
                .arg(out_dir())
                .arg(count("subjects", "10", "number of subjects"))
                .arg(count("poses", "6", "poses per subject"))
                .arg(count("test-subjects", "2", "subjects assigned to the test split"))
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_name("N")
                        .value_parser(value_parser!(u64))
                        .default_value("0")
                        .help("generator seed"),
                )
                .arg(
                    Arg::new("modality")
                        .long("modality")
                        .value_name("rgb|lwir")
                        .default_value("rgb")
                        .help("vision modality"),
                )
                .arg(count("image-height", "128", "image height in pixels"))
                .arg(count("image-width", "128", "image width in pixels"))
                .arg(count("pm-rows", "64", "pressure map rows"))
                .arg(count("pm-cols", "32", "pressure map columns")),
        )
        .subcommand(
            Command::new("fit-density")
                .about("Fit the pixel-value density on the training split")
                .arg(data())
                .arg(out_dir())
                .args(config_args()),
        )
        .subcommand(
            Command::new("train")
                .about("Train a model and evaluate it on the test split")
                .arg(data())
                .arg(out_dir())
                .arg(
                    Arg::new("density")
                        .long("density")
                        .value_name("FILE")
                        .value_parser(value_parser!(PathBuf))
                        .help("density from fit-density (default: fit on the training split)"),
                )
                .arg(no_plot())
                .args(config_args()),
        )
        .subcommand(
            Command::new("eval")
                .about("Metric tables and PCS curves for a checkpoint")
                .arg(data())
                .arg(checkpoint())
                .arg(out_dir())
                .arg(
                    Arg::new("split")
                        .long("split")
                        .value_name("train|test|all")
                        .default_value("test")
                        .help("records to evaluate"),
                )
                .arg(no_plot())
                .args(config_args()),
        )
        .subcommand(
            Command::new("predict")
                .about("Predict one pressure map")
                .arg(checkpoint())
                .arg(
                    Arg::new("image")
                        .long("image")
                        .value_name("FILE")
                        .value_parser(value_parser!(PathBuf))
                        .required(true)
                        .help("vision image (PNG)"),
                )
                .arg(
                    Arg::new("physique")
                        .long("physique")
                        .value_name("V1,V2,..")
                        .required(true)
                        .allow_hyphen_values(true)
                        .help("physique entries in physical units: weight kg, height cm, gender, girths cm"),
                )
                .arg(out_dir()),
        )
        .subcommand(
            Command::new("curves")
                .about("PCS curves of predicted against ground-truth maps")
                .arg(
                    Arg::new("pred")
                        .long("pred")
                        .value_name("PATH")
                        .value_parser(value_parser!(PathBuf))
                        .required(true)
                        .help("predicted map CSV, or a directory of them"),
                )
                .arg(
                    Arg::new("gt")
                        .long("gt")
                        .value_name("PATH")
                        .value_parser(value_parser!(PathBuf))
                        .required(true)
                        .help("ground-truth map CSV, or a directory with matching file names"),
                )
                .arg(out_dir())
                .arg(no_plot()),
        )
        .subcommand(
            Command::new("ablate")
                .about("Train and evaluate several loss configurations, then tabulate them")
                .arg(data())
                .arg(out_dir())
                .arg(
                    Arg::new("configs")
                        .long("configs")
                        .value_name("NAME,..")
                        .value_delimiter(',')
                        .value_parser(config_names.clone())
                        .help(format!(
                            "configurations to run (default: all of {})",
                            config_names.join(", ")
                        )),
                )
                .args(config_args()),
        )
}

fn run<I: IntoIterator<Item = std::ffi::OsString>>(argv: I) -> u8 {
    let matches = match cli().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (verb, sub) = matches.subcommand().expect("subcommand is required");
    match commands::dispatch(verb, sub) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    ExitCode::from(run(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn every_config_key_is_a_flag() {
        let train = cli().find_subcommand("train").unwrap().clone();
        for (key, _) in TrainConfig::KEYS {
            assert!(
                train.get_arguments().any(|a| a.get_long() == Some(key)),
                "missing --{key}"
            );
        }
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["peye", "frobnicate"].map(Into::into)), 2);
        assert_eq!(run(["peye", "train"].map(Into::into)), 2);
        assert_eq!(run(["peye", "--help"].map(Into::into)), 0);
    }
}
