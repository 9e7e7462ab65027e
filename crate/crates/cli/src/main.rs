use std::io;
use std::process::ExitCode;

use clap::Parser;
use tdcn_cli::error::{diagnostic, Category};
use tdcn_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli, &mut io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", diagnostic(&err));
            ExitCode::from(Category::of(&err).exit_code() as u8)
        }
    }
}
