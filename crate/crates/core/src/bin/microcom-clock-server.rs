//! Local server hosting the sample components, started by an SCM as
//! `microcom-clock-server --serve --clsid <guid> --control <host:port>`.

use clap::Parser;
use microcom::local_server::{linger_from_env, run_local_server, LocalServerOptions};
use microcom::Guid;

#[derive(Parser)]
#[command(
    version,
    about = "Local server for the sample clock and echo components"
)]
struct Args {
    #[arg(long, required = true)]
    serve: bool,
    #[arg(long)]
    clsid: Guid,
    #[arg(long)]
    control: String,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let options = LocalServerOptions {
        clsid: args.clsid,
        control: args.control,
        linger: linger_from_env(),
    };
    if let Err(e) = run_local_server(&options) {
        eprintln!("error: {} ({}): {e}", e.code_name(), e.status());
        std::process::exit(3);
    }
}
