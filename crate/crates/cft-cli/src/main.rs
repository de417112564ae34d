use clap::Parser;

use cft_cli::commands::{self, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = commands::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
