#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use microcom::components::{CLSID_CLOCK, CLSID_ECHO};
use microcom::interfaces::{IID_IALARM, IID_ICLOCK, IID_ITIMER, IID_IUNKNOWN};
use microcom::{
    Guid, InterfaceHandle, Library, LibraryContext, Registry, Result, Scm, ScmConfig, ScmServer,
    ServerRegistration, ServerType, WireValue,
};

pub const MICROCOM: &str = env!("CARGO_BIN_EXE_microcom");
pub const CLOCK_SERVER: &str = env!("CARGO_BIN_EXE_microcom-clock-server");

pub fn inproc(clsid: Guid, name: &str) -> ServerRegistration {
    ServerRegistration::new(clsid, ServerType::InProcess, format!("builtin:{name}"))
}

pub fn local(clsid: Guid) -> ServerRegistration {
    ServerRegistration::new(clsid, ServerType::Local, CLOCK_SERVER)
}

pub fn remote(clsid: Guid, port: u16) -> ServerRegistration {
    ServerRegistration::new(clsid, ServerType::Remote, format!("127.0.0.1:{port}"))
}

pub fn builtins() -> Vec<ServerRegistration> {
    vec![inproc(CLSID_CLOCK, "clock"), inproc(CLSID_ECHO, "echo")]
}

/// Writes a registry file holding `regs` into `dir`.
pub fn write_registry(dir: &Path, file: &str, regs: &[ServerRegistration]) -> PathBuf {
    let path = dir.join(file);
    let mut registry = Registry::empty(&path);
    for r in regs {
        registry.register_class(r.clone()).unwrap();
    }
    registry.save().unwrap();
    path
}

pub fn scm_over(regs: &[ServerRegistration], config: ScmConfig) -> Scm {
    let mut registry = Registry::empty("memory.reg");
    for r in regs {
        registry.register_class(r.clone()).unwrap();
    }
    Scm::from_registry(registry, config)
}

pub fn context(regs: &[ServerRegistration]) -> LibraryContext {
    Library::new(scm_over(regs, ScmConfig::default()))
        .init(1)
        .unwrap()
}

/// An SCM serving the built-in components on an ephemeral loopback port.
pub fn builtin_server() -> ScmServer {
    scm_over(&builtins(), ScmConfig::default())
        .serve("127.0.0.1:0")
        .unwrap()
}

/// Polls `cond` until it holds or `timeout` passes.
pub fn eventually(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        if cond() {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}

/// A `microcom serve` process on an ephemeral port, killed on drop.
pub struct ServeProcess {
    pub child: Child,
    pub port: u16,
}

impl ServeProcess {
    pub fn start(registry: &Path) -> ServeProcess {
        let mut child = Command::new(MICROCOM)
            .args([
                "--registry",
                registry.to_str().unwrap(),
                "serve",
                "--port",
                "0",
                "--bind",
                "127.0.0.1",
            ])
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("start microcom serve");
        let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
        let first = lines.next().expect("serve printed nothing").unwrap();
        let port = first
            .strip_prefix("LISTENING ")
            .unwrap_or_else(|| panic!("unexpected first line {first:?}"))
            .parse()
            .unwrap();
        ServeProcess { child, port }
    }
}

impl Drop for ServeProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn render(r: Result<WireValue>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => format!("error:{}", e.code_name()),
    }
}

/// The scripted clock session: create, initialize, twenty mixed calls, a
/// query for each clock interface, then release everything. Every step is
/// rendered as one canonical line.
pub fn clock_session(ctx: &LibraryContext, clsid: Guid) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let clock = ctx.create_instance(clsid, IID_ICLOCK)?;
    out.push(format!("create -> {}", clock.iid()));
    out.push(format!(
        "get_time before init -> {}",
        render(clock.call(0, vec![]))
    ));
    clock.initialize(vec![WireValue::I64(0)])?;
    out.push("initialize [0] -> ok".into());
    out.push(format!(
        "initialize again -> {}",
        render(clock.initialize(vec![]).map(|_| WireValue::Null))
    ));

    let alarm = clock.query_interface(IID_IALARM)?;
    let timer = clock.query_interface(IID_ITIMER)?;
    let i = WireValue::I64;
    let script: Vec<(&str, &InterfaceHandle, u16, Vec<WireValue>)> = vec![
        ("get_time", &clock, 0, vec![]),
        ("set_time 100", &clock, 1, vec![i(100)]),
        ("get_time", &clock, 0, vec![]),
        ("set_alarm 150", &alarm, 0, vec![i(150)]),
        ("set_alarm 130", &alarm, 0, vec![i(130)]),
        ("next_alarm", &alarm, 2, vec![]),
        ("advance 40", &clock, 2, vec![i(40)]),
        ("next_alarm", &alarm, 2, vec![]),
        ("cancel_alarm 7", &alarm, 1, vec![i(7)]),
        ("start", &timer, 0, vec![]),
        ("start", &timer, 0, vec![]),
        ("advance 7", &clock, 2, vec![i(7)]),
        ("stop", &timer, 1, vec![]),
        ("advance 5", &clock, 2, vec![i(5)]),
        ("elapsed", &timer, 2, vec![]),
        ("stop", &timer, 1, vec![]),
        ("cancel_alarm 150", &alarm, 1, vec![i(150)]),
        ("next_alarm", &alarm, 2, vec![]),
        ("ordinal 9", &clock, 9, vec![]),
        ("get_time", &clock, 0, vec![]),
    ];
    for (name, h, ordinal, args) in script {
        out.push(format!("{name} -> {}", render(h.call(ordinal, args))));
    }

    let mut handles = vec![clock, alarm, timer];
    for iid in [IID_ICLOCK, IID_IALARM, IID_ITIMER] {
        let h = handles[0].query_interface(iid)?;
        out.push(format!(
            "query {} -> ok",
            microcom::interfaces::lookup(&iid).unwrap().name
        ));
        handles.push(h);
    }
    let unknowns: Vec<u64> = handles
        .iter()
        .map(|h| {
            let u = h.query_interface(IID_IUNKNOWN).unwrap();
            let token = u.identity_token();
            u.release().unwrap();
            token
        })
        .collect();
    out.push(format!(
        "one identity -> {}",
        unknowns.iter().all(|t| *t == unknowns[0])
    ));
    out.push(format!(
        "random iid -> {}",
        render(
            handles[0]
                .query_interface(Guid::from_u128(0x1234))
                .map(|_| WireValue::Null)
        )
    ));
    for h in handles {
        out.push(format!("release -> {}", h.release()?));
    }
    Ok(out)
}

/// Error code name of a result, or `ok`.
pub fn code<T>(r: Result<T>) -> &'static str {
    match r {
        Ok(_) => "ok",
        Err(e) => e.code_name(),
    }
}
