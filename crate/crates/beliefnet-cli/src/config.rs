//! Per-command parameter schemas and the run-config document.
//!
//! Every command is executed from a validated [`RunConfig`]; the command line
//! is only one way of producing it, `replay` is the other.

use std::collections::BTreeMap;
use std::path::Path;

use beliefnet::textfmt::TextDoc;

use crate::error::{CliError, CliResult};

pub const MODEL_KINDS: &[&str] = &["hmm", "matmul", "lds", "cyclic-det", "cyclic-rnd", "cyclic-hard"];

#[derive(Debug, Clone, Copy)]
pub enum Ty {
    Usize,
    U64,
    F64,
    /// `none` or a value.
    OptUsize,
    OptF64,
    F64List,
    Choice(&'static [&'static str]),
    Text,
    Flag,
    /// Free text checked by a command-specific parser.
    Custom(fn(&str) -> Result<(), String>),
}

#[derive(Debug, Clone, Copy)]
pub struct ParamSpec {
    pub key: &'static str,
    pub ty: Ty,
    /// `None` means required.
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn p(key: &'static str, ty: Ty, default: Option<&'static str>, help: &'static str) -> ParamSpec {
    ParamSpec { key, ty, default, help }
}

#[derive(Debug, Clone)]
pub struct CommandSpec {
    pub name: &'static str,
    pub about: &'static str,
    pub params: Vec<ParamSpec>,
}

const SEED: ParamSpec = p("seed", Ty::U64, Some("0"), "random seed");
const EPS: ParamSpec = p("eps", Ty::F64List, Some("0.05,0.1"), "fit-length thresholds, comma separated");
const MASK: ParamSpec =
    p("mask", Ty::Choice(&["auto", "all", "prediction-stage"]), Some("auto"), "steps that enter the loss");
const TARGET: ParamSpec =
    p("target", Ty::Choice(&["auto", "belief", "nextobs", "kalman"]), Some("auto"), "target kind");

pub fn check_obs_list(s: &str) -> Result<(), String> {
    parse_obs_list(s).map(|_| ())
}

/// `0,1,2` for discrete models, `0.1,0.2;0.3,0.4` for vector observations.
pub fn parse_obs_list(s: &str) -> Result<Vec<Vec<f64>>, String> {
    let steps: Vec<&str> = if s.contains(';') { s.split(';').collect() } else { s.split(',').collect() };
    steps
        .into_iter()
        .map(|tok| {
            tok.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| format!("bad observation `{x}`")))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect()
}

pub fn check_probes(s: &str) -> Result<(), String> {
    parse_probes(s, 1).map(|_| ())
}

/// `auto` means steps 1, 10 and T (those within the horizon).
pub fn parse_probes(s: &str, t: usize) -> Result<Vec<usize>, String> {
    if s == "auto" {
        let mut v: Vec<usize> = [1, 10, t].into_iter().filter(|&x| x >= 1 && x <= t).collect();
        v.dedup();
        return Ok(v);
    }
    s.split(',')
        .map(|x| match x.trim().parse::<usize>() {
            Ok(v) if v >= 1 => Ok(v),
            _ => Err(format!("bad probe step `{x}`")),
        })
        .collect()
}

pub fn check_stop(s: &str) -> Result<(), String> {
    parse_stop(s).map(|_| ())
}

/// `none`, `step-below:<step>:<value>` or `fit-at-least:<eps>:<length>`.
pub fn parse_stop(s: &str) -> Result<Option<beliefnet::training::StopRule>, String> {
    use beliefnet::training::StopRule;
    if s == "none" {
        return Ok(None);
    }
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || format!("bad stop rule `{s}`");
    match parts.as_slice() {
        ["step-below", step, v] => Ok(Some(StopRule::StepBelow {
            step: step.parse().map_err(|_| bad())?,
            below: v.parse().map_err(|_| bad())?,
        })),
        ["fit-at-least", e, l] => Ok(Some(StopRule::FitAtLeast {
            eps: e.parse().map_err(|_| bad())?,
            length: l.parse().map_err(|_| bad())?,
        })),
        _ => Err(bad()),
    }
}

pub fn commands() -> Vec<CommandSpec> {
    let theorems: &'static [&'static str] = &["rnn", "tf", "norm"];
    vec![
        CommandSpec {
            name: "gen",
            about: "Sample a model instance and a trajectory dataset",
            params: vec![
                p("model-kind", Ty::Choice(MODEL_KINDS), None, "model family"),
                p("n", Ty::Usize, Some("5"), "state count (state dimension for matmul/lds)"),
                p("m", Ty::Usize, Some("5"), "observation count"),
                p("T", Ty::Usize, Some("120"), "trajectory length"),
                p("count", Ty::Usize, Some("1000"), "number of trajectories"),
                SEED,
                TARGET,
                p("floor", Ty::OptF64, Some("none"), "hmm: lower bound on every P and O entry"),
                p("back-eps", Ty::OptF64, Some("none"), "cyclic-rnd: back-step probability"),
                p("alpha", Ty::OptF64, Some("none"), "cyclic-hard: prediction rate (default 1/T)"),
            ],
        },
        CommandSpec {
            name: "rollout",
            about: "Sample one trajectory from a model manifest",
            params: vec![
                p("model", Ty::Text, None, "model manifest"),
                p("T", Ty::Usize, Some("120"), "length"),
                SEED,
                TARGET,
            ],
        },
        CommandSpec {
            name: "filter",
            about: "Exact targets for a given observation sequence",
            params: vec![
                p("model", Ty::Text, None, "model manifest"),
                p("obs", Ty::Custom(check_obs_list), None, "observations: `0,2,1` or `0.1,0.2;0.3,0.4`"),
            ],
        },
        CommandSpec {
            name: "construct",
            about: "Build explicit RNN / Transformer / normalization weights",
            params: vec![
                p("model", Ty::Text, None, "model manifest"),
                p("theorem", Ty::Choice(theorems), None, "rnn, tf or norm"),
                p("T", Ty::Usize, Some("16"), "horizon"),
                p("block", Ty::OptUsize, Some("none"), "tf: add a belief channel for block CoT"),
            ],
        },
        CommandSpec {
            name: "verify",
            about: "Check a constructed checkpoint against the exact recursion",
            params: vec![
                p("checkpoint", Ty::Text, None, "checkpoint from `construct`"),
                p("model", Ty::Text, None, "model manifest"),
                p("T", Ty::OptUsize, Some("none"), "sequence length (default: construction horizon)"),
                SEED,
            ],
        },
        CommandSpec {
            name: "train",
            about: "Train an RNN or Transformer on a dataset",
            params: vec![
                p("data", Ty::Text, None, "dataset directory from `gen`"),
                p("net", Ty::Choice(&["rnn", "tf"]), Some("tf"), "network family"),
                p("layers", Ty::OptUsize, Some("none"), "depth (default 1 for rnn, 2 for tf)"),
                p("dim", Ty::Usize, Some("64"), "hidden width"),
                p("heads", Ty::Usize, Some("4"), "attention heads"),
                p("width", Ty::OptUsize, Some("none"), "MLP width (default 4 * dim)"),
                p("epochs", Ty::Usize, Some("20"), "epochs"),
                p("batch", Ty::Usize, Some("64"), "batch size"),
                SEED,
                p("lr", Ty::F64, Some("0.001"), "peak learning rate"),
                p("warmup", Ty::Usize, Some("4000"), "linear warmup steps"),
                p("curriculum", Ty::Flag, Some("false"), "doubling length curriculum from 2^layers"),
                p("block", Ty::OptUsize, Some("none"), "teacher-forced block CoT with this block length"),
                p("eval-rollouts", Ty::Usize, Some("256"), "fresh rollouts per epoch evaluation (0 disables)"),
                p("eval-T", Ty::OptUsize, Some("none"), "evaluation length (default: dataset T)"),
                p("eval-seed", Ty::U64, Some("1"), "seed of the evaluation rollouts"),
                EPS,
                MASK,
                p("probes", Ty::Custom(check_probes), Some("auto"), "steps reported in the metrics CSV"),
                p("stop", Ty::Custom(check_stop), Some("none"), "early stop: step-below:<t>:<v> or fit-at-least:<eps>:<len>"),
            ],
        },
        CommandSpec {
            name: "eval",
            about: "Per-step evaluation loss over fresh rollouts",
            params: vec![
                p("checkpoint", Ty::Text, Some("none"), "checkpoint to evaluate"),
                p("oracle", Ty::Flag, Some("false"), "evaluate the exact filter instead"),
                p("model", Ty::Text, None, "model manifest"),
                p("T", Ty::Usize, Some("120"), "rollout length"),
                p("rollouts", Ty::Usize, Some("256"), "number of rollouts"),
                SEED,
                MASK,
                EPS,
            ],
        },
        CommandSpec {
            name: "fitlen",
            about: "Fit lengths from a per-step loss CSV",
            params: vec![p("losses", Ty::Text, None, "CSV written by `eval`"), EPS],
        },
        CommandSpec {
            name: "bcot",
            about: "Block chain-of-thought evaluation",
            params: vec![
                p("checkpoint", Ty::Text, None, "checkpoint with a belief channel"),
                p("model", Ty::Text, None, "model manifest"),
                p("T", Ty::Usize, Some("120"), "rollout length"),
                p("block", Ty::Usize, None, "block length b"),
                p("rollouts", Ty::Usize, Some("256"), "number of rollouts"),
                SEED,
                MASK,
                EPS,
                p("snap", Ty::Flag, Some("false"), "round fed-back vectors to one-hot"),
            ],
        },
        CommandSpec {
            name: "cost",
            about: "Block CoT training-cost estimate",
            params: vec![
                p("T", Ty::Usize, Some("60"), "sequence length"),
                p("block", Ty::Usize, None, "block length b"),
            ],
        },
    ]
}

pub fn spec(name: &str) -> CliResult<CommandSpec> {
    commands().into_iter().find(|c| c.name == name).ok_or_else(|| CliError::usage(format!("unknown command `{name}`")))
}

/// A command name plus its complete, validated parameter bag.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub params: BTreeMap<String, String>,
}

fn check_value(key: &str, ty: Ty, v: &str) -> CliResult<()> {
    let bad = |what: &str| CliError::usage(format!("--{key}: `{v}` is not {what}"));
    match ty {
        Ty::Usize => v.parse::<usize>().map(|_| ()).map_err(|_| bad("a non-negative integer")),
        Ty::U64 => v.parse::<u64>().map(|_| ()).map_err(|_| bad("a non-negative integer")),
        Ty::F64 => match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(()),
            _ => Err(bad("a finite number")),
        },
        Ty::OptUsize => {
            if v == "none" {
                Ok(())
            } else {
                check_value(key, Ty::Usize, v)
            }
        }
        Ty::OptF64 => {
            if v == "none" {
                Ok(())
            } else {
                check_value(key, Ty::F64, v)
            }
        }
        Ty::F64List => {
            if v.split(',').all(|x| x.trim().parse::<f64>().is_ok_and(|x| x.is_finite())) {
                Ok(())
            } else {
                Err(bad("a comma-separated list of numbers"))
            }
        }
        Ty::Choice(opts) => {
            if opts.contains(&v) {
                Ok(())
            } else {
                Err(bad(&format!("one of {}", opts.join(", "))))
            }
        }
        Ty::Text => {
            if v.is_empty() || v.contains('\n') {
                Err(bad("a non-empty single-line value"))
            } else {
                Ok(())
            }
        }
        Ty::Flag => match v {
            "true" | "false" => Ok(()),
            _ => Err(bad("true or false")),
        },
        Ty::Custom(f) => f(v).map_err(|e| CliError::usage(format!("--{key}: {e}"))),
    }
}

impl RunConfig {
    /// Fill defaults, reject unknown keys, and type-check every value.
    pub fn new(command: &str, given: BTreeMap<String, String>) -> CliResult<Self> {
        let spec = spec(command)?;
        for k in given.keys() {
            if !spec.params.iter().any(|p| p.key == k) {
                return Err(CliError::usage(format!("{command}: unknown parameter `{k}`")));
            }
        }
        let mut params = BTreeMap::new();
        for ps in &spec.params {
            let v = match (given.get(ps.key), ps.default) {
                (Some(v), _) => v.clone(),
                (None, Some(d)) => d.to_string(),
                (None, None) => return Err(CliError::usage(format!("{command}: missing required --{}", ps.key))),
            };
            check_value(ps.key, ps.ty, &v)?;
            params.insert(ps.key.to_string(), v);
        }
        Ok(RunConfig { command: command.to_string(), params })
    }

    pub fn get(&self, key: &str) -> &str {
        self.params.get(key).map(String::as_str).unwrap_or_else(|| panic!("`{key}` is not in the {} schema", self.command))
    }

    pub fn usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated")
    }

    pub fn opt_usize(&self, key: &str) -> Option<usize> {
        match self.get(key) {
            "none" => None,
            v => Some(v.parse().expect("validated")),
        }
    }

    pub fn opt_f64(&self, key: &str) -> Option<f64> {
        match self.get(key) {
            "none" => None,
            v => Some(v.parse().expect("validated")),
        }
    }

    pub fn f64_list(&self, key: &str) -> Vec<f64> {
        self.get(key).split(',').map(|x| x.trim().parse().expect("validated")).collect()
    }

    pub fn flag(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    pub fn to_doc(&self) -> TextDoc {
        let mut d = TextDoc::new("run-config");
        d.field("command", &self.command);
        for (k, v) in &self.params {
            d.field(&format!("param.{k}"), v);
        }
        d
    }

    pub fn to_text(&self) -> String {
        self.to_doc().to_text()
    }

    pub fn from_doc(d: &TextDoc) -> CliResult<Self> {
        if d.kind != "run-config" {
            return Err(CliError::usage(format!("expected a run-config document, found `{}`", d.kind)));
        }
        let command = d.get_field("command")?.to_string();
        let given = d
            .fields
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("param.").map(|k| (k.to_string(), v.clone())))
            .collect();
        RunConfig::new(&command, given)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        let doc = TextDoc::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        RunConfig::from_doc(&doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bag(kv: &[(&str, &str)]) -> BTreeMap<String, String> {
        kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_are_filled() {
        let c = RunConfig::new("gen", bag(&[("model-kind", "hmm")])).unwrap();
        assert_eq!(c.usize("T"), 120);
        assert_eq!(c.usize("n"), 5);
        assert_eq!(c.opt_f64("floor"), None);
        assert_eq!(c.get("target"), "auto");
    }

    #[test]
    fn schema_violations_are_usage_errors() {
        let cases = [
            ("gen", bag(&[])),
            ("gen", bag(&[("model-kind", "zebra")])),
            ("gen", bag(&[("model-kind", "hmm"), ("n", "-1")])),
            ("gen", bag(&[("model-kind", "hmm"), ("bogus", "1")])),
            ("train", bag(&[("data", "d"), ("stop", "step-below:x:1")])),
            ("train", bag(&[("data", "d"), ("eps", "0.1,abc")])),
            ("filter", bag(&[("model", "m"), ("obs", "0,a")])),
            ("nope", bag(&[])),
        ];
        for (cmd, b) in cases {
            let e = RunConfig::new(cmd, b.clone()).unwrap_err();
            assert_eq!(e.code, crate::error::EXIT_USAGE, "{cmd} {b:?}");
        }
    }

    #[test]
    fn run_config_roundtrip() {
        let c = RunConfig::new("train", bag(&[("data", "runs/x"), ("stop", "step-below:10:0.1"), ("curriculum", "true")]))
            .unwrap();
        let back = RunConfig::from_doc(&TextDoc::parse(&c.to_text()).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(c.flag("curriculum"));
        assert_eq!(c.f64_list("eps"), vec![0.05, 0.1]);
    }

    #[test]
    fn list_parsers() {
        assert_eq!(parse_obs_list("0,2,1").unwrap(), vec![vec![0.0], vec![2.0], vec![1.0]]);
        assert_eq!(parse_obs_list("0.5,1;2,3").unwrap(), vec![vec![0.5, 1.0], vec![2.0, 3.0]]);
        assert_eq!(parse_probes("auto", 16).unwrap(), vec![1, 10, 16]);
        assert_eq!(parse_probes("auto", 8).unwrap(), vec![1, 8]);
        assert_eq!(parse_probes("auto", 1).unwrap(), vec![1]);
        assert!(parse_probes("0", 4).is_err());
        assert!(parse_stop("none").unwrap().is_none());
        assert!(parse_stop("fit-at-least:0.05:24").unwrap().is_some());
    }
}
