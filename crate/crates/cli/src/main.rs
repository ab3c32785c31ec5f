use clap::Parser;
use operon_dbtl_cli::{run, Cli, LOG_ENV};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("operon-dbtl: {e}");
        std::process::exit(e.exit_code());
    }
}
