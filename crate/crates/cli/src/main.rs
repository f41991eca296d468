use clap::Parser;

use msvit_cli::{exit_code, run, Cli, EXIT_OK};

fn main() {
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("msvit: {}", e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    };
    std::process::exit(code);
}
