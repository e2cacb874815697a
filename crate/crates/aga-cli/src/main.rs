//! `aga`: generate synthetic corpora, pretrain with grouped alignment,
//! evaluate downstream protocols, and run the verification battery.

use std::path::PathBuf;
use std::process::ExitCode;

use aga_cli::commands::{cmd_eval, cmd_gen, cmd_train, cmd_verify, EvalArgs, GenArgs, TrainArgs};
use aga_cli::error::CliError;

const USAGE: &str = "\
usage:
  aga gen    --out DIR [--seed N] [--config FILE] [--set key=value ...]
  aga train  --corpus FILE --variant V --out DIR [--seed N] [--config FILE] [--set key=value ...]
  aga eval   --checkpoint FILE --corpus FILE --out DIR [--heatmaps N]
  aga verify [--filter STR]

variants: full | global-only | no-bcga | fixed:<sigma_tg>,<sigma_vg>
exit codes: 0 ok, 1 verification failure, 2 usage/input error, 3 numeric failure
env: AGA_THREADS caps internal parallelism (default 1 = reference mode)";

struct Flags {
    named: Vec<(String, String)>,
}

impl Flags {
    fn parse(args: &[String]) -> Result<Flags, CliError> {
        let mut named = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let key = &args[i];
            if !key.starts_with("--") {
                return Err(CliError::Usage(format!("unexpected argument `{key}`\n{USAGE}")));
            }
            let value = args
                .get(i + 1)
                .ok_or_else(|| CliError::Usage(format!("flag {key} needs a value\n{USAGE}")))?;
            named.push((key[2..].to_string(), value.clone()));
            i += 2;
        }
        Ok(Flags { named })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        let pos = self.named.iter().position(|(k, _)| k == key)?;
        Some(self.named.remove(pos).1)
    }

    fn take_all(&mut self, key: &str) -> Vec<String> {
        let mut out = Vec::new();
        while let Some(v) = self.take(key) {
            out.push(v);
        }
        out
    }

    fn require(&mut self, key: &str) -> Result<String, CliError> {
        self.take(key)
            .ok_or_else(|| CliError::Usage(format!("missing required flag --{key}\n{USAGE}")))
    }

    fn finish(self) -> Result<(), CliError> {
        if let Some((k, _)) = self.named.first() {
            return Err(CliError::Usage(format!("unknown flag --{k}\n{USAGE}")));
        }
        Ok(())
    }
}

fn parse_sets(raw: Vec<String>) -> Result<Vec<(String, String)>, CliError> {
    raw.into_iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{s}`")))
        })
        .collect()
}

fn parse_seed(raw: Option<String>) -> Result<Option<u64>, CliError> {
    match raw {
        Some(s) => s
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("--seed expects an unsigned integer, got `{s}`"))),
        None => Ok(None),
    }
}

fn check_threads_env() -> Result<usize, CliError> {
    match std::env::var("AGA_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| CliError::Usage(format!("AGA_THREADS must be a positive integer, got `{v}`")))?;
            if n == 0 {
                return Err(CliError::Usage("AGA_THREADS must be at least 1".into()));
            }
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

fn run(argv: &[String]) -> Result<(), CliError> {
    // The reference implementation is single-threaded; the cap is validated
    // and trivially honored.
    let _threads = check_threads_env()?;

    let command = argv.get(1).map(String::as_str).unwrap_or("");
    let rest = if argv.len() > 2 { &argv[2..] } else { &[] };
    let mut flags = Flags::parse(rest)?;
    match command {
        "gen" => {
            let args = GenArgs {
                seed: parse_seed(flags.take("seed"))?,
                config: flags.take("config").map(PathBuf::from),
                out: PathBuf::from(flags.require("out")?),
                sets: parse_sets(flags.take_all("set"))?,
            };
            flags.finish()?;
            cmd_gen(&args, argv)
        }
        "train" => {
            let args = TrainArgs {
                corpus: PathBuf::from(flags.require("corpus")?),
                variant: flags.require("variant")?,
                config: flags.take("config").map(PathBuf::from),
                out: PathBuf::from(flags.require("out")?),
                seed: parse_seed(flags.take("seed"))?,
                sets: parse_sets(flags.take_all("set"))?,
            };
            flags.finish()?;
            cmd_train(&args, argv)
        }
        "eval" => {
            let heatmaps = match flags.take("heatmaps") {
                Some(v) => Some(v.parse().map_err(|_| {
                    CliError::Usage(format!("--heatmaps expects an unsigned integer, got `{v}`"))
                })?),
                None => None,
            };
            let args = EvalArgs {
                checkpoint: PathBuf::from(flags.require("checkpoint")?),
                corpus: PathBuf::from(flags.require("corpus")?),
                out: PathBuf::from(flags.require("out")?),
                heatmaps,
            };
            flags.finish()?;
            cmd_eval(&args, argv)
        }
        "verify" => {
            let filter = flags.take("filter");
            flags.finish()?;
            cmd_verify(filter.as_deref(), &mut std::io::stdout())
        }
        "" => Err(CliError::Usage(format!("missing command\n{USAGE}"))),
        other => Err(CliError::Usage(format!("unknown command `{other}`\n{USAGE}"))),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    match run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
