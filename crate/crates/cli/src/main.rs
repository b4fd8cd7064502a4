use clap::Parser;
use dsii_cli::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("dsii: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
