use std::io::{IsTerminal, Write};
use std::process::ExitCode;

use clap::Parser;
use neurorag_service::cli::{error_json, run, Cli};

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let json = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if json && e.use_stderr() => {
            eprintln!("{}", serde_json::json!({"error": {"kind": "usage", "message": e.to_string().trim()}}));
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    let stdin = std::io::stdin();
    let mut input = stdin.lock();
    let mut out = std::io::stdout().lock();
    match run(cli, &mut input, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            if json {
                eprintln!("{}", error_json(&e));
            } else {
                eprintln!("error: {e:#}");
            }
            let usage = error_json(&e)["error"]["kind"] == "usage";
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
