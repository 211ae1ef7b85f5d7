use clap::Parser;

fn main() {
    let cli = dirsurf_cli::Cli::parse();
    if let Err(e) = dirsurf_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(dirsurf_cli::exit_code(&e));
    }
}
