use clap::Parser;

use flownas_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("flownas: {e}");
        std::process::exit(e.exit_code());
    }
}
