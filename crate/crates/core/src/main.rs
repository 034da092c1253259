use clap::Parser;

use ldit::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{}", summary.message);
            println!("artifacts in {}: {}", summary.out_dir.display(), summary.outputs.join(", "));
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
