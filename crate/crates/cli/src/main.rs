use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = pclsr_cli::Cli::parse();
    std::process::exit(pclsr_cli::run(cli));
}
