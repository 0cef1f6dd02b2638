//! Stand-alone mock completion server for offline pipeline runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use dqg_core::querygen::mock::{load_transcript, MockBehavior, MockServer};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    /// Answer with the first words of the target document.
    Prefix,
    /// Answer every prompt with `--text`.
    Fixed,
    /// Look prompts up in `--transcript`.
    Replay,
    /// Return HTTP 500 for every request.
    Fail,
}

#[derive(Parser, Debug)]
#[command(name = "dqg-mock-llm", version, about = "Serve a deterministic completion endpoint")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8089")]
    addr: String,
    #[arg(long, value_enum, default_value = "prefix")]
    mode: Mode,
    #[arg(long, default_value_t = 8)]
    words: usize,
    #[arg(long, default_value = "")]
    text: String,
    #[arg(long)]
    transcript: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let behavior = match args.mode {
        Mode::Prefix => MockBehavior::DocumentPrefix { words: args.words },
        Mode::Fixed => MockBehavior::Fixed(args.text),
        Mode::Fail => MockBehavior::Fail,
        Mode::Replay => {
            let Some(path) = args.transcript else {
                eprintln!("error: --mode replay needs --transcript");
                return ExitCode::from(1);
            };
            match load_transcript(&path) {
                Ok(map) => MockBehavior::Replay(map),
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            }
        }
    };
    match MockServer::bind(&args.addr, behavior) {
        Ok(server) => {
            println!("{}", server.url());
            server.join();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
