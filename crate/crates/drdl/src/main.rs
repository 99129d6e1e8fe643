use clap::Parser;

fn main() {
    let cli = drdl::cli::Cli::parse();
    if let Err(e) = drdl::cli::dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
