//! Command-line driver: dataset generation, constructions, training,
//! evaluation and block chain-of-thought, all reproducible from a run-config.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::commands::{execute, expected_inputs, Ctx, Outcome};
use crate::config::{commands as specs, RunConfig, Ty};
use crate::dataset::{parse_doc, read_text};
use crate::error::{CliError, CliResult, EXIT_OK, EXIT_USAGE};

fn out_arg() -> Arg {
    Arg::new("out").long("out").num_args(1).value_name("DIR").help(format!(
        "output directory [default: ${}/<command>-<config digest>, root `runs`]",
        commands::ENV_OUT_ROOT
    ))
}

pub fn cli() -> Command {
    let mut app = Command::new("beliefnet")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Belief-state models, exact filters, constructions and training")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in specs() {
        let mut sc = Command::new(spec.name).about(spec.about);
        for ps in &spec.params {
            let help = match ps.default {
                Some(d) => format!("{} [default: {d}]", ps.help),
                None => ps.help.to_string(),
            };
            let mut a = Arg::new(ps.key).long(ps.key).help(help);
            a = match ps.ty {
                Ty::Flag => a.action(ArgAction::SetTrue),
                _ => a.num_args(1).value_name("VALUE").allow_hyphen_values(true),
            };
            if ps.default.is_none() {
                a = a.required(true);
            }
            sc = sc.arg(a);
        }
        app = app.subcommand(sc.arg(out_arg()));
    }
    app.subcommand(
        Command::new("replay")
            .about("Re-run a command from its run-config echo")
            .arg(Arg::new("config").long("config").required(true).num_args(1).help("run-config.txt to replay"))
            .arg(out_arg()),
    )
}

/// Turn parsed arguments into a validated run-config and an output directory.
pub fn config_from_matches(name: &str, m: &ArgMatches) -> CliResult<(RunConfig, Ctx)> {
    let out = m.get_one::<String>("out").map(PathBuf::from);
    if name == "replay" {
        let path = PathBuf::from(m.get_one::<String>("config").expect("required"));
        let doc = parse_doc(&path, &read_text(&path)?)?;
        let cfg = RunConfig::from_doc(&doc)?;
        let mut ctx = Ctx::new(out);
        ctx.expect = expected_inputs(&doc);
        return Ok((cfg, ctx));
    }
    let spec = config::spec(name)?;
    let mut given = BTreeMap::new();
    for ps in &spec.params {
        match ps.ty {
            Ty::Flag => {
                given.insert(ps.key.to_string(), m.get_flag(ps.key).to_string());
            }
            _ => {
                if let Some(v) = m.get_one::<String>(ps.key) {
                    given.insert(ps.key.to_string(), v.clone());
                }
            }
        }
    }
    Ok((RunConfig::new(name, given)?, Ctx::new(out)))
}

/// Parse, execute, and report. Returns the stdout text and the exit status.
pub fn run<I, T>(args: I) -> (Result<Outcome, CliError>, Option<clap::Error>)
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let m = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => return (Err(CliError { code: e.exit_code(), msg: String::new() }), Some(e)),
    };
    let (name, sub) = m.subcommand().expect("subcommand required");
    let r = config_from_matches(name, sub).and_then(|(cfg, ctx)| execute(&cfg, ctx));
    (r, None)
}

/// Entry point used by the binary.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match run(args) {
        (_, Some(e)) => {
            let code = e.exit_code();
            let _ = e.print();
            if code == EXIT_OK {
                EXIT_OK
            } else {
                EXIT_USAGE
            }
        }
        (Ok(out), None) => {
            print!("{}", out.stdout);
            if let Some(d) = &out.out_dir {
                println!("wrote {}", d.display());
            }
            out.code
        }
        (Err(e), None) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
