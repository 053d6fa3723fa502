use clap::Parser;

fn main() {
    let cli = upl::commands::Cli::parse();
    if let Err(e) = upl::commands::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
