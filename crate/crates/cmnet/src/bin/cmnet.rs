use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = cmnet::cli::Cli::parse();
    std::process::exit(cmnet::cli::run(cli));
}
