mod args;
mod commands;

use args::{Cli, Command, FileConfig, Merge};
use clap::{CommandFactory, Parser};
use commands::Failure;
use std::process::ExitCode;

fn load_file(cli: &Cli) -> Result<FileConfig, Failure> {
    let Some(path) = &cli.config else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Io(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Usage {
        subcommand: "",
        message: format!("config {}: {e}", path.display()),
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = load_file(&cli)?;
    if let Some(n) = cli.threads.or(file.threads) {
        if n == 0 {
            return Err(Failure::Usage {
                subcommand: "",
                message: "--threads must be at least 1".into(),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Failed(e.to_string()))?;
    }
    match cli.command {
        Command::Gen(a) => commands::gen(a.merge(file.gen), file.seed),
        Command::Train(a) => commands::train(a.merge(file.train), file.seed),
        Command::Eval(a) => commands::eval(a.merge(file.eval), file.seed),
        Command::Check(a) => commands::check(a.merge(file.check), file.seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            if let Failure::Usage { subcommand, .. } = &f {
                let mut cmd = Cli::command();
                cmd.build();
                let usage = match cmd.find_subcommand_mut(subcommand) {
                    Some(sub) => sub.render_usage(),
                    None => cmd.render_usage(),
                };
                eprintln!("\n{usage}\n\nFor more information, try '--help'.");
            }
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
