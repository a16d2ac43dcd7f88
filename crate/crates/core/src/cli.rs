//! The `microcom` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::activation::{Library, LIBRARY_VERSION};
use crate::error::{ComError, Result};
use crate::guid::Guid;
use crate::interfaces::{
    self, IID_IALARM, IID_ICLASSFACTORY, IID_ICLOCK, IID_IECHO, IID_ITIMER, IID_IUNKNOWN,
};
use crate::object::InterfaceHandle;
use crate::registry::{Registry, ServerRegistration, ServerType};
use crate::scm::{Scm, ScmConfig};
use crate::wire::{parse_value_list, WireValue, DEFAULT_PORT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Names of the five lifecycle phases, in order.
pub const PHASES: [&str; 5] = [
    "Client request",
    "Server location",
    "Object creation",
    "Interaction",
    "Disconnection",
];

#[derive(Debug, Clone)]
struct Values(Vec<WireValue>);

fn values(text: &str) -> std::result::Result<Values, String> {
    parse_value_list(text)
        .map(Values)
        .map_err(|e| e.to_string())
}

fn iid(text: &str) -> std::result::Result<Guid, String> {
    interfaces::resolve(text)
        .ok_or_else(|| format!("{text:?} is neither an interface name nor a GUID"))
}

#[derive(Debug, Parser)]
#[command(name = "microcom", version, about = "Component object runtime driver")]
struct Cli {
    /// Registry file.
    #[arg(
        long,
        global = true,
        env = "MICROCOM_REGISTRY",
        default_value = "./microcom.reg"
    )]
    registry: PathBuf,
    /// How long a local server has to register after being started.
    #[arg(long, global = true, value_name = "MS", default_value_t = 5000)]
    spawn_timeout_ms: u64,
    /// Connect timeout for remote SCMs.
    #[arg(long, global = true, value_name = "MS", default_value_t = 3000)]
    connect_timeout_ms: u64,
    /// How long a local server stays up once nothing references it.
    #[arg(long, global = true, value_name = "MS", default_value_t = 2000)]
    linger_ms: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Add or replace a class registration.
    Register {
        #[arg(long)]
        clsid: Guid,
        #[arg(long = "type", value_name = "inproc|local|remote")]
        server_type: ServerType,
        /// Module, `builtin:<name>` or executable (inproc and local).
        #[arg(long, conflicts_with = "host", required_unless_present = "host")]
        path: Option<String>,
        /// `host:port` of the peer SCM (remote).
        #[arg(long)]
        host: Option<String>,
        /// Class to request from the peer.
        #[arg(long)]
        remote_clsid: Option<Guid>,
        #[arg(long, default_value = "")]
        name: String,
        #[arg(long, default_value_t = 1)]
        version: u32,
    },
    /// Remove a class registration.
    Unregister {
        #[arg(long)]
        clsid: Guid,
    },
    /// Print every registration in CLSID order.
    List,
    /// Create and initialize one object, print its identity and release it.
    Create {
        #[arg(long)]
        clsid: Guid,
        /// Interface name or GUID.
        #[arg(long, value_parser = iid)]
        iid: Guid,
        /// Comma-separated initialization arguments.
        #[arg(long, value_parser = values, allow_hyphen_values = true)]
        init: Option<Values>,
    },
    /// Create an object, invoke one method and print the result.
    Call {
        #[arg(long)]
        clsid: Guid,
        #[arg(long, value_parser = iid)]
        iid: Guid,
        #[arg(long)]
        ordinal: u16,
        #[arg(long, value_parser = values, allow_hyphen_values = true)]
        init: Option<Values>,
        #[arg(long, value_parser = values, num_args = 0.., allow_hyphen_values = true)]
        args: Vec<Values>,
    },
    /// Run an SCM accepting remote activations.
    Serve {
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "0.0.0.0")]
        bind: String,
    },
    /// Walk one object through its whole life cycle.
    DemoLifecycle {
        #[arg(long)]
        clsid: Guid,
        #[arg(long, value_parser = values, allow_hyphen_values = true)]
        init: Option<Values>,
    },
}

impl Cli {
    fn config(&self) -> ScmConfig {
        ScmConfig {
            spawn_timeout: Duration::from_millis(self.spawn_timeout_ms),
            connect_timeout: Duration::from_millis(self.connect_timeout_ms),
            linger: Duration::from_millis(self.linger_ms),
        }
    }

    fn library(&self) -> Library {
        Library::new(Scm::new(&self.registry, self.config()))
    }
}

/// Runs the CLI on the process's standard streams.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_cli_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_cli_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    let result = execute(&cli, out);
    let _ = out.flush();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {} ({}): {e}", e.code_name(), e.status());
            EXIT_RUNTIME
        }
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Register {
            clsid,
            server_type,
            path,
            host,
            remote_clsid,
            name,
            version,
        } => {
            let location = match (server_type, path, host) {
                (ServerType::Remote, _, Some(h)) => h,
                (ServerType::InProcess | ServerType::Local, Some(p), _) => p,
                (ServerType::Remote, _, None) => {
                    return Err(ComError::InvalidRegistration(
                        "remote servers need --host".into(),
                    ))
                }
                (_, None, _) => {
                    return Err(ComError::InvalidRegistration(format!(
                        "{server_type} servers need --path"
                    )))
                }
            };
            let mut reg = ServerRegistration::new(*clsid, *server_type, location.clone())
                .with_name(name.clone());
            reg.remote_clsid = *remote_clsid;
            reg.component_version = *version;
            let mut registry = Registry::load(&cli.registry)?;
            registry.register_class(reg)?;
            registry.save()
        }
        Command::Unregister { clsid } => {
            let mut registry = Registry::load(&cli.registry)?;
            registry.unregister_class(clsid)?;
            registry.save()
        }
        Command::List => {
            let registry = Registry::load(&cli.registry)?;
            for r in registry.list_classes() {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}",
                    r.clsid, r.server_type, r.location, r.friendly_name
                )?;
            }
            Ok(())
        }
        Command::Create { clsid, iid, init } => {
            let ctx = cli.library().init(LIBRARY_VERSION)?;
            let h = ctx.create_instance(*clsid, *iid)?;
            let result = initialize(&h, init).map(|_| h.identity_token());
            let released = h.release();
            writeln!(out, "{}", result?)?;
            released.map(|_| ())
        }
        Command::Call {
            clsid,
            iid,
            ordinal,
            init,
            args,
        } => {
            let ctx = cli.library().init(LIBRARY_VERSION)?;
            let h = ctx.create_instance(*clsid, *iid)?;
            let args = args.iter().flat_map(|v| v.0.iter().cloned()).collect();
            let result = initialize(&h, init).and_then(|_| h.call(*ordinal, args));
            let released = h.release();
            writeln!(out, "{}", result?)?;
            released.map(|_| ())
        }
        Command::Serve { port, bind } => {
            let server = Scm::new(&cli.registry, cli.config()).serve(&format!("{bind}:{port}"))?;
            writeln!(out, "LISTENING {}", server.port())?;
            out.flush()?;
            server.wait();
            Ok(())
        }
        Command::DemoLifecycle { clsid, init } => demo_lifecycle(&cli.library(), *clsid, init, out),
    }
}

/// Runs `IInitialize` with the given arguments (none by default); classes
/// without it are born initialized.
fn initialize(h: &InterfaceHandle, init: &Option<Values>) -> Result<()> {
    let args = init.as_ref().map(|v| v.0.clone()).unwrap_or_default();
    match h.initialize(args) {
        Err(ComError::NoInterface) => Ok(()),
        r => r,
    }
}

fn phase<T>(out: &mut dyn Write, n: usize, step: impl FnOnce() -> Result<T>) -> Result<T> {
    let name = PHASES[n - 1];
    match step() {
        Ok(v) => {
            writeln!(out, "PHASE {n}: {name} ... OK")?;
            Ok(v)
        }
        Err(e) => {
            writeln!(out, "PHASE {n}: {name} ... FAILED")?;
            Err(e)
        }
    }
}

/// A side-effect-free method to try on each interface during the demo.
fn probe(iid: Guid) -> (u16, Vec<WireValue>) {
    match iid {
        IID_IALARM | IID_ITIMER => (2, vec![]),
        IID_IECHO => (0, vec![WireValue::Str("hello".into())]),
        _ => (0, vec![]),
    }
}

fn demo_lifecycle(
    lib: &Library,
    clsid: Guid,
    init: &Option<Values>,
    out: &mut dyn Write,
) -> Result<()> {
    let ctx = phase(out, 1, || lib.init(LIBRARY_VERSION))?;
    let factory = phase(out, 2, || ctx.get_class_object(clsid, IID_ICLASSFACTORY))?;
    let object = phase(out, 3, || {
        let object = factory.create_instance(IID_IUNKNOWN);
        factory.release()?;
        let object = object?;
        if let Err(e) = initialize(&object, init) {
            let _ = object.release();
            return Err(e);
        }
        Ok(object)
    })?;
    phase(out, 4, || {
        let mut reached = 0;
        for iid in [IID_ICLOCK, IID_IALARM, IID_ITIMER, IID_IECHO] {
            let h = match object.query_interface(iid) {
                Ok(h) => h,
                Err(ComError::NoInterface) => continue,
                Err(e) => return Err(e),
            };
            let (ordinal, args) = probe(iid);
            let result = h.call(ordinal, args);
            h.release()?;
            log::debug!("{iid} #{ordinal} -> {:?}", result);
            result?;
            reached += 1;
        }
        if reached == 0 {
            return Err(ComError::NoInterface);
        }
        Ok(())
    })?;
    phase(out, 5, || {
        let left = object.release()?;
        if left != 0 {
            return Err(ComError::ComponentError(format!(
                "object still has {left} reference(s)"
            )));
        }
        ctx.shutdown();
        Ok(())
    })
}
