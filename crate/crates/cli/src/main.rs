use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = splatbridge_cli::Cli::parse();
    if let Err(e) = splatbridge_cli::run(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
