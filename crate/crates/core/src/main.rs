use clap::Parser;

fn main() {
    let cli = amtl::cli::Cli::parse();
    if let Err(e) = amtl::cli::execute(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
