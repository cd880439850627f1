use clap::Parser;

use safeloop_cli::app::{execute, Cli};

fn main() {
    let cli = Cli::parse();
    let code = execute(&cli, &mut std::io::stdout().lock());
    std::process::exit(code);
}
