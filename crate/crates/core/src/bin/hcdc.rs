use clap::Parser;

fn main() {
    env_logger::init();
    let cli = hcdc::cli::Cli::parse();
    std::process::exit(hcdc::cli::run(cli));
}
