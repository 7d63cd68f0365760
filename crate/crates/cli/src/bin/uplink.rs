use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Parser, Subcommand};
use toolweave_cli::config::{ConfigDir, UplinkConfig, HOME_ENV};
use toolweave_cli::serve::{serve, ServeOptions};
use toolweave_cli::{finish, init_logging, CliError, CliResult, EXIT_OK};
use toolweave_net::relay::{parse_tokens, Relay};

/// Cross-organization relay and its clients.
///
/// Exit codes: 0 success, 1 runtime failure, 2 user or configuration error,
/// 3 environment error.
#[derive(Parser)]
#[command(name = "uplink", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a relay until interrupted.
    Serve {
        #[arg(long)]
        listen: String,
        /// Token file, one `client_id:token` per line.
        #[arg(long)]
        tokens: PathBuf,
    },
    /// Run this node as a client of a relay, announcing its published tools.
    Connect {
        #[arg(long)]
        relay: String,
        #[arg(long)]
        id: String,
        #[arg(long)]
        token: String,
        #[arg(long, env = HOME_ENV)]
        config_dir: Option<PathBuf>,
        /// Also accept LAN peers on this address.
        #[arg(long)]
        listen: Option<String>,
    },
}

fn stop_flag() -> CliResult<Arc<AtomicBool>> {
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    ctrlc::set_handler(move || s.store(true, Ordering::SeqCst)).map_err(|e| CliError::environment(e.to_string()))?;
    Ok(stop)
}

fn relay(listen: &str, tokens: &PathBuf) -> CliResult<u8> {
    let text = fs::read_to_string(tokens).map_err(|e| CliError::usage(format!("{}: {e}", tokens.display())))?;
    let table = parse_tokens(&text).map_err(|e| CliError::usage(format!("{}: {e}", tokens.display())))?;
    let stop = stop_flag()?;
    let relay = Relay::new(table);
    let addr = relay.listen(listen).map_err(|e| CliError::environment(format!("cannot bind {listen}: {e}")))?;
    println!("relay listening on {addr}");
    while !stop.load(Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(100));
    }
    relay.shutdown();
    println!("stopped");
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    init_logging("info");
    let cli = Cli::try_parse().unwrap_or_else(|e| {
        let code = if e.use_stderr() { toolweave_cli::EXIT_USAGE as i32 } else { 0 };
        let _ = e.print();
        std::process::exit(code)
    });
    finish(match cli.command {
        Command::Serve { listen, tokens } => relay(&listen, &tokens),
        Command::Connect { relay, id, token, config_dir, listen } => stop_flag().and_then(|stop| {
            let opts = ServeOptions { listen, uplink: Some(UplinkConfig { relay, client_id: id, token }) };
            serve(&ConfigDir::resolve(config_dir), opts, stop)
        }),
    })
}
