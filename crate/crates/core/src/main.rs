use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FAIRBID_LOG", "warn")).init();
    std::process::exit(fairbid::cli::run(fairbid::cli::Cli::parse()));
}
