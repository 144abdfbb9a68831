#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod args;
mod commands;
mod error;
mod run;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use args::{resolve, Cli, Command};
use error::{CliError, Result};
use run::Run;

fn load_config(cli: &Cli) -> Result<Option<toml::Table>> {
    let Some(path) = &cli.config else { return Ok(None) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.parse::<toml::Table>()
        .map(Some)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

macro_rules! dispatch {
    ($cli:expr, $file:expr, $( $variant:ident($params:ty) => $func:path ),* $(,)?) => {
        match &$cli.command {
            $(
                Command::$variant(flags) => {
                    let name = $cli.command.name();
                    let params: $params = resolve(name, <$params>::defaults(), $file, flags)?;
                    let mut run = Run::new(name, &params, $cli.out.clone())?;
                    let result = $func(params, &mut run);
                    run.log(match &result {
                        Ok(o) if o.exit_code == 0 => "ok",
                        Ok(_) => "not-converged",
                        Err(_) => "error",
                    })?;
                    result
                }
            )*
        }
    };
}

fn execute(cli: &Cli) -> Result<commands::Outcome> {
    commands::threads()?;
    let file = load_config(cli)?;
    let file = file.as_ref();
    dispatch!(cli, file,
        Synth(args::SynthParams) => commands::synth,
        Ingest(args::IngestParams) => commands::ingest,
        Fit(args::FitParams) => commands::fit_cmd,
        Alphas(args::AlphasParams) => commands::alphas_cmd,
        Explain(args::ExplainParams) => commands::explain_cmd,
        Fidelity(args::FidelityParams) => commands::fidelity_cmd,
        Influence(args::InfluenceParams) => commands::influence_cmd,
        DebugSim(args::DebugSimParams) => commands::debug_sim_cmd,
        ToyStudy(args::ToyStudyParams) => commands::toy_study_cmd,
        Sensitivity(args::SensitivityParams) => commands::sensitivity_cmd,
        Bench(args::BenchParams) => commands::bench_cmd,
        Serve(args::ServeParams) => commands::serve_cmd,
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(outcome) => {
            let text = if cli.json {
                serde_json::to_string_pretty(&outcome.report).expect("json")
            } else {
                outcome.summary
            };
            if !text.is_empty() {
                // a closed pipe is not an error for the command itself
                let _ = writeln!(std::io::stdout(), "{text}");
            }
            ExitCode::from(outcome.exit_code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
