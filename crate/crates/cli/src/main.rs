use clap::Parser;
use drainage_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            for path in &outcome.outputs {
                println!("wrote {}", path.display());
            }
            if !outcome.passed {
                eprintln!("{}: statistical check failed", cli.command.name());
            }
            std::process::exit(outcome.exit_code());
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
