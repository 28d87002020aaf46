use clap::Parser;

fn main() {
    let cli = dura_cli::Cli::parse();
    if let Err(e) = dura_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
