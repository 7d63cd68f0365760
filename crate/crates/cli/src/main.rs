use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use toolweave_cli::config::{ConfigDir, HOME_ENV, PUBLIC_GROUP};
use toolweave_cli::run::{parse_placement, RunOptions, LOCAL};
use toolweave_cli::serve::ServeOptions;
use toolweave_cli::tool::{parse_endpoint, IntegrateOptions};
use toolweave_cli::{data, finish, group, init_logging, run, serve, tool, CliError, CliResult};
use toolweave_core::model::EndpointDecl;
use toolweave_core::tool::ScaffoldAnswers;

/// Distributed workflow node: integrate tools, share them with groups,
/// run workflows and browse their records.
///
/// Exit codes: 0 success, 1 runtime failure, 2 user or configuration error,
/// 3 environment error.
#[derive(Parser)]
#[command(name = "toolweave", version)]
struct Cli {
    /// Configuration directory.
    #[arg(long, global = true, env = HOME_ENV)]
    config_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run this node as a server until interrupted.
    Serve {
        /// Listen address, overriding `listen` in node.json.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Submit a workflow to a controller.
    Run {
        workflow: PathBuf,
        /// `local` or the address of a controller node.
        #[arg(long, default_value = LOCAL)]
        controller: String,
        /// Place an instance on a node: `<instance>=<node-id>`.
        #[arg(long = "place", value_parser = parse_placement)]
        place: Vec<(String, String)>,
        /// Stream run events as JSON lines.
        #[arg(long)]
        watch: bool,
        /// Exit once the controller has accepted the run.
        #[arg(long, conflicts_with = "watch")]
        detach: bool,
        #[arg(long)]
        json: bool,
    },
    /// Check a workflow against the installed tools and built-in components.
    Validate {
        workflow: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Integrate and publish tools.
    #[command(subcommand)]
    Tool(ToolCommand),
    /// Manage group keys.
    #[command(subcommand)]
    Group(GroupCommand),
    /// Browse run records.
    #[command(subcommand)]
    Data(DataCommand),
}

#[derive(Subcommand)]
enum ToolCommand {
    /// Create a descriptor from flags, a file, or answers on stdin.
    Integrate(IntegrateArgs),
    List {
        /// List tools published by configured peers.
        #[arg(long)]
        remote: bool,
        #[arg(long)]
        json: bool,
    },
    Publish {
        /// `<name>@<version>`
        tool: String,
        /// Group name or `public`.
        #[arg(long, default_value = PUBLIC_GROUP)]
        group: String,
    },
    Unpublish {
        tool: String,
        /// Only withdraw from this group.
        #[arg(long)]
        group: Option<String>,
    },
}

#[derive(Args)]
struct IntegrateArgs {
    /// Install this descriptor file.
    #[arg(long, conflicts_with = "name")]
    from: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long = "tool-version", default_value = "1.0")]
    tool_version: String,
    /// Command template for Linux, e.g. `sim.sh ${in:x} ${out:y}`.
    #[arg(long)]
    linux: Option<String>,
    #[arg(long)]
    windows: Option<String>,
    /// `<name>:<Type>[:constant]`, repeatable.
    #[arg(long = "input", value_parser = parse_endpoint)]
    inputs: Vec<EndpointDecl>,
    /// `<name>:<Type>`, repeatable.
    #[arg(long = "output", value_parser = parse_endpoint)]
    outputs: Vec<EndpointDecl>,
    #[arg(long)]
    pre_script: Option<String>,
    #[arg(long)]
    post_script: Option<String>,
    #[arg(long)]
    doc: Option<String>,
    /// Replace an installed descriptor of the same name and version.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum GroupCommand {
    /// Generate a fresh group key and print `<name>/<key_id>`.
    Create { name: String },
    /// Print the hex secret of a group.
    ExportKey { name: String },
    /// Install a hex secret received from another member.
    ImportKey { name: String, secret: String },
    List {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    Runs {
        /// Query this controller instead of the local store.
        #[arg(long)]
        controller: Option<String>,
        #[arg(long)]
        json: bool,
    },
    Show {
        run_id: String,
        #[arg(long)]
        controller: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Write the run's manifest and blobs into a directory.
    Export { run_id: String, dir: PathBuf },
}

fn stop_flag() -> CliResult<Arc<AtomicBool>> {
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    ctrlc::set_handler(move || s.store(true, Ordering::SeqCst)).map_err(|e| CliError::environment(e.to_string()))?;
    Ok(stop)
}

fn dispatch(cli: Cli) -> CliResult<u8> {
    let dir = ConfigDir::resolve(cli.config_dir);
    match cli.command {
        Command::Serve { listen } => serve::serve(&dir, ServeOptions { listen, uplink: None }, stop_flag()?),
        Command::Run { workflow, controller, place, watch, detach, json } => {
            run::run(&dir, &workflow, &RunOptions { controller, place, watch, detach, json })
        }
        Command::Validate { workflow, json } => run::validate(&dir, &workflow, json),
        Command::Tool(ToolCommand::Integrate(a)) => tool::integrate(
            &dir,
            IntegrateOptions {
                answers: ScaffoldAnswers {
                    name: a.name.unwrap_or_default(),
                    version: a.tool_version,
                    linux_command: a.linux,
                    windows_command: a.windows,
                    inputs: a.inputs,
                    outputs: a.outputs,
                    pre_script: a.pre_script,
                    post_script: a.post_script,
                    documentation: a.doc,
                },
                from: a.from,
                force: a.force,
            },
        ),
        Command::Tool(ToolCommand::List { remote, json }) => tool::list(&dir, remote, json),
        Command::Tool(ToolCommand::Publish { tool: t, group: g }) => tool::publish(&dir, &t, &g),
        Command::Tool(ToolCommand::Unpublish { tool: t, group: g }) => tool::unpublish(&dir, &t, g.as_deref()),
        Command::Group(GroupCommand::Create { name }) => group::create(&dir, &name),
        Command::Group(GroupCommand::ExportKey { name }) => group::export_key(&dir, &name),
        Command::Group(GroupCommand::ImportKey { name, secret }) => group::import_key(&dir, &name, &secret),
        Command::Group(GroupCommand::List { json }) => group::list(&dir, json),
        Command::Data(DataCommand::Runs { controller, json }) => data::runs(&dir, controller.as_deref(), json),
        Command::Data(DataCommand::Show { run_id, controller, json }) => data::show(&dir, &run_id, controller.as_deref(), json),
        Command::Data(DataCommand::Export { run_id, dir: target }) => data::export(&dir, &run_id, &target),
    }
}

fn main() -> ExitCode {
    init_logging("warn");
    let cli = Cli::try_parse().unwrap_or_else(|e| {
        let code = if e.use_stderr() { toolweave_cli::EXIT_USAGE as i32 } else { 0 };
        let _ = e.print();
        std::process::exit(code)
    });
    finish(dispatch(cli))
}
