use clap::Parser;
use saddlebvp::cli::{configure_threads, run, Cli, EXIT_ERROR, EXIT_OK};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        std::process::exit(EXIT_ERROR);
    }
    std::process::exit(run(&cli));
}
