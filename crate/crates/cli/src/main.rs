use std::io::Write;

use clap::Parser;
use levt_cli::{error::EXIT_OK, run, Cli};

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str().to_lowercase(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn main() {
    init_logging();
    let code = match run(Cli::parse()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{e}");
            e.code
        }
    };
    std::process::exit(code);
}
