//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --test acceptance`. With `ACCEPTANCE_CLIENT_PORT`
//! set, the binary instead acts as a throwaway remote client for the rundown
//! check.

mod common;

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use microcom::components::{CLSID_CLOCK, CLSID_ECHO};
use microcom::interfaces::{
    IID_IALARM, IID_ICLASSFACTORY, IID_ICLOCK, IID_IECHO, IID_IINITIALIZE, IID_ITIMER, IID_IUNKNOWN,
};
use microcom::scm::ActivationRequest;
use microcom::wire::{Payload, WireMessage};
use microcom::{
    ComError, DestructionWatch, Guid, InterfaceHandle, Library, LibraryContext, ScmConfig,
    WireValue,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const CLIENT_ENV: &str = "ACCEPTANCE_CLIENT_PORT";

const CLOCK_IIDS: [Guid; 5] = [
    IID_IUNKNOWN,
    IID_IINITIALIZE,
    IID_ICLOCK,
    IID_IALARM,
    IID_ITIMER,
];
const PROBE_IIDS: [Guid; 7] = [
    IID_IUNKNOWN,
    IID_ICLASSFACTORY,
    IID_IINITIALIZE,
    IID_ICLOCK,
    IID_IALARM,
    IID_ITIMER,
    IID_IECHO,
];

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<String, String> {
    let line = format!(
        "{what} {:.2}s (limit {:.0}s)",
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    );
    ensure(elapsed < limit, format!("too slow: {line}"))?;
    Ok(line)
}

fn qi_set(h: &InterfaceHandle) -> Vec<Guid> {
    PROBE_IIDS
        .iter()
        .copied()
        .filter(|iid| match h.query_interface(*iid) {
            Ok(q) => {
                q.release().unwrap();
                true
            }
            Err(_) => false,
        })
        .collect()
}

/// Two clients share one object; it dies with the second release only.
fn two_clients(
    ctx: &LibraryContext,
    watch: &DestructionWatch,
    token_of: impl Fn(&InterfaceHandle) -> u64,
) -> Result<(), String> {
    let a = ctx
        .create_instance(CLSID_CLOCK, IID_ICLOCK)
        .map_err(|e| e.to_string())?;
    let b = a.query_interface(IID_ICLOCK).map_err(|e| e.to_string())?;
    let token = token_of(&a);
    ensure(a.release() == Ok(1), "first release leaves one reference")?;
    ensure(watch.count(token) == 0, "object alive after first release")?;
    ensure(b.release() == Ok(0), "second release reaches zero")?;
    ensure(
        watch.wait_for(token, Duration::from_secs(1)) && watch.count(token) == 1,
        "destroyed exactly once",
    )?;
    std::thread::sleep(Duration::from_millis(20));
    ensure(watch.count(token) == 1, "destroyed exactly once")
}

fn criterion_1() -> Result<String, String> {
    let watch = DestructionWatch::new();
    let start = Instant::now();
    two_clients(&context(&builtins()), &watch, |h| h.identity_token())?;
    let local = within(start.elapsed(), Duration::from_secs(1), "in-process")?;

    let server = builtin_server();
    let start = Instant::now();
    let ctx = context(&[remote(CLSID_CLOCK, server.port())]);
    two_clients(&ctx, &watch, |_| server.stub_entries()[0].1[0].identity)?;
    let remote = within(start.elapsed(), Duration::from_secs(10), "remote")?;
    Ok(format!("{local}, {remote}"))
}

struct ModelObject {
    handles: Vec<InterfaceHandle>,
    model: u32,
    destroyed: Arc<AtomicUsize>,
}

fn criterion_2() -> Result<String, String> {
    let ctx = context(&builtins());
    let factory = ctx
        .get_class_object(CLSID_CLOCK, IID_ICLASSFACTORY)
        .unwrap();
    let mut rng = StdRng::seed_from_u64(0x5EED_0002);
    let start = Instant::now();
    let mut steps = 0u64;
    for seq in 0..10_000 {
        let mut objects: Vec<ModelObject> = Vec::new();
        let len = rng.random_range(1..40);
        for step in 0..len {
            let op = if objects.iter().all(|o| o.model == 0) {
                0
            } else {
                rng.random_range(0..4)
            };
            let live: Vec<usize> = (0..objects.len())
                .filter(|&i| objects[i].model > 0)
                .collect();
            let fail = |what: &str| format!("sequence {seq} step {step}: {what}");
            match op {
                0 => {
                    let h = factory
                        .create_instance(CLOCK_IIDS[rng.random_range(0..5)])
                        .map_err(|e| fail(&e.to_string()))?;
                    let destroyed = Arc::new(AtomicUsize::new(0));
                    let d = destroyed.clone();
                    h.on_destroy(move |_| {
                        d.fetch_add(1, Ordering::SeqCst);
                    });
                    objects.push(ModelObject {
                        handles: vec![h],
                        model: 1,
                        destroyed,
                    });
                }
                1 => {
                    let o = &mut objects[live[rng.random_range(0..live.len())]];
                    let h = o.handles[rng.random_range(0..o.handles.len())].clone();
                    o.model += 1;
                    ensure(h.add_ref() == Ok(o.model), fail("add_ref count"))?;
                    o.handles.push(h);
                }
                2 => {
                    let o = &mut objects[live[rng.random_range(0..live.len())]];
                    let h = &o.handles[rng.random_range(0..o.handles.len())];
                    let q = h
                        .query_interface(CLOCK_IIDS[rng.random_range(0..5)])
                        .map_err(|e| fail(&e.to_string()))?;
                    o.model += 1;
                    o.handles.push(q);
                }
                _ => {
                    let o = &mut objects[live[rng.random_range(0..live.len())]];
                    let h = o.handles.swap_remove(rng.random_range(0..o.handles.len()));
                    o.model -= 1;
                    ensure(h.release() == Ok(o.model), fail("release count"))?;
                }
            }
            for o in &objects {
                let fired = o.destroyed.load(Ordering::SeqCst);
                ensure(
                    fired == usize::from(o.model == 0),
                    fail("destruction matches model zero"),
                )?;
                if let Some(h) = o.handles.first() {
                    ensure(h.ref_count() == Some(o.model), fail("count matches model"))?;
                }
            }
            steps += 1;
        }
        for o in objects {
            let mut model = o.model;
            for h in o.handles {
                model -= 1;
                ensure(
                    h.release() == Ok(model),
                    format!("sequence {seq}: final release"),
                )?;
            }
            ensure(
                o.destroyed.load(Ordering::SeqCst) == 1,
                format!("sequence {seq}: destroyed once"),
            )?;
        }
    }
    factory.release().unwrap();
    let timing = within(start.elapsed(), Duration::from_secs(30), "10000 sequences")?;
    Ok(format!("{steps} steps, {timing}"))
}

fn criterion_3() -> Result<String, String> {
    let start = Instant::now();
    let ctx = context(&builtins());
    let clock = ctx.create_instance(CLSID_CLOCK, IID_ICLOCK).unwrap();
    clock.initialize(vec![WireValue::I64(0)]).unwrap();
    let mut handles = vec![clock.clone()];
    for iid in CLOCK_IIDS {
        handles.push(clock.query_interface(iid).unwrap());
        handles.push(clock.query_interface(iid).unwrap());
    }
    let count = || clock.ref_count().unwrap();

    for h in &handles {
        let before = count();
        let q = h
            .query_interface(h.iid())
            .map_err(|e| format!("reflexivity: {e}"))?;
        ensure(count() == before + 1, "reflexive query adds one")?;
        ensure(
            q.identity_token() == h.identity_token(),
            "reflexive query keeps identity",
        )?;
        q.release().unwrap();
    }
    for a in &handles {
        for b in &handles {
            let ua = a.query_interface(IID_IUNKNOWN).unwrap();
            let ub = b.query_interface(IID_IUNKNOWN).unwrap();
            ensure(
                ua.identity_token() == ub.identity_token(),
                "IUnknown identity agrees",
            )?;
            ua.release().unwrap();
            ub.release().unwrap();
        }
    }

    let mut rng = StdRng::seed_from_u64(0x5EED_0003);
    let baseline = qi_set(&clock);
    ensure(
        baseline
            == vec![
                IID_IUNKNOWN,
                IID_IINITIALIZE,
                IID_ICLOCK,
                IID_IALARM,
                IID_ITIMER,
            ],
        "clock query set",
    )?;
    for i in 0..1000 {
        let h = &handles[rng.random_range(0..handles.len())];
        let args = (0..rng.random_range(0..2))
            .map(|_| WireValue::I64(rng.random_range(-50..50)))
            .collect();
        let _ = h.call(rng.random_range(0..4), args);
        if i % 10 == 0 {
            ensure(
                qi_set(&handles[rng.random_range(0..handles.len())]) == baseline,
                "query set stable",
            )?;
        }
    }
    ensure(qi_set(&clock) == baseline, "query set stable")?;

    let mut rng = StdRng::seed_from_u64(0x5EED_0033);
    for _ in 0..1000 {
        let mut bytes = [0u8; 16];
        rng.fill(&mut bytes);
        let g = Guid::from_bytes(bytes);
        let before = count();
        let h = &handles[rng.random_range(0..handles.len())];
        ensure(
            h.query_interface(g).unwrap_err() == ComError::NoInterface,
            "random iid refused",
        )?;
        ensure(count() == before, "refused query leaves the count alone")?;
    }
    let n = handles.len() as u32;
    ensure(count() == n, "count equals live handles")?;
    for h in handles {
        h.release().unwrap();
    }
    within(start.elapsed(), Duration::from_secs(10), "suite")
}

fn criterion_4() -> Result<String, String> {
    let lib = Library::new(scm_over(&builtins(), ScmConfig::default()));
    ensure(
        matches!(
            lib.init(2),
            Err(ComError::VersionTooOld {
                required: 2,
                available: 1
            })
        ),
        "required 2 refused",
    )?;
    let a = lib.init(1).map_err(|e| format!("required 1: {e}"))?;
    let b = lib.init(0).map_err(|e| format!("required 0: {e}"))?;
    ensure(
        a.same_library(&b) && a.library_version() == 1,
        "same library, version 1",
    )?;
    Ok("2 refused, 1 and 0 accepted".into())
}

fn creation_contract(ctx: &LibraryContext) -> Result<(), String> {
    let direct = ctx
        .create_instance(CLSID_CLOCK, IID_ICLOCK)
        .map_err(|e| e.to_string())?;
    let factory = ctx
        .get_class_object(CLSID_CLOCK, IID_ICLASSFACTORY)
        .map_err(|e| e.to_string())?;
    let two_step = factory
        .create_instance(IID_ICLOCK)
        .map_err(|e| e.to_string())?;
    factory.release().unwrap();
    ensure(
        qi_set(&direct) == qi_set(&two_step),
        "query sets of both paths agree",
    )?;
    for h in [&direct, &two_step] {
        ensure(
            code(h.call(0, vec![])) == "NotInitialized",
            "new object is uninitialized",
        )?;
        ensure(
            h.initialize(vec![WireValue::I64(9)]).is_ok(),
            "first initialize succeeds",
        )?;
        ensure(
            code(h.initialize(vec![WireValue::I64(9)])) == "AlreadyInitialized",
            "second initialize refused",
        )?;
        ensure(
            h.call(0, vec![]) == Ok(WireValue::I64(9)),
            "usable after initialize",
        )?;
    }
    direct.release().unwrap();
    two_step.release().unwrap();
    Ok(())
}

fn criterion_5() -> Result<String, String> {
    creation_contract(&context(&builtins())).map_err(|e| format!("in-process: {e}"))?;
    let server = builtin_server();
    creation_contract(&context(&[remote(CLSID_CLOCK, server.port())]))
        .map_err(|e| format!("remote: {e}"))?;
    Ok("in-process and remote".into())
}

fn criterion_6() -> Result<String, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let server_reg = write_registry(dir.path(), "server.reg", &builtins());
    let serve = ServeProcess::start(&server_reg);
    let mut outputs = Vec::new();
    for (name, reg) in [
        ("inproc", inproc(CLSID_CLOCK, "clock")),
        ("local", local(CLSID_CLOCK)),
        ("remote", remote(CLSID_CLOCK, serve.port)),
    ] {
        let ctx = context(&[reg]);
        let lines = clock_session(&ctx, CLSID_CLOCK).map_err(|e| format!("{name}: {e}"))?;
        outputs.push((name, lines.join("\n").into_bytes()));
    }
    let reference = &outputs[0].1;
    for (name, bytes) in &outputs[1..] {
        ensure(
            bytes == reference,
            format!("{name} output differs from inproc"),
        )?;
    }
    let text = String::from_utf8_lossy(reference);
    ensure(text.contains("elapsed -> i64:7"), "session sanity")?;
    ensure(text.lines().count() >= 30, "session length")?;
    let timing = within(start.elapsed(), Duration::from_secs(20), "three routes")?;
    Ok(format!(
        "{} identical lines, {timing}",
        text.lines().count()
    ))
}

fn random_value(rng: &mut StdRng, depth: usize) -> WireValue {
    let top = if depth >= 8 { 7 } else { 8 };
    match rng.random_range(0..top) {
        0 => WireValue::Null,
        1 => WireValue::Bool(rng.random()),
        2 => WireValue::I64(rng.random()),
        3 => WireValue::F64(f64::from_bits(rng.random())),
        4 => WireValue::Str(
            (0..rng.random_range(0..12))
                .map(|_| rng.random::<char>())
                .collect(),
        ),
        5 => WireValue::Bytes((0..rng.random_range(0..24)).map(|_| rng.random()).collect()),
        6 => WireValue::Guid(Guid::from_bytes(rng.random())),
        _ => WireValue::List(
            (0..rng.random_range(0..4))
                .map(|_| random_value(rng, depth + 1))
                .collect(),
        ),
    }
}

fn random_payload(rng: &mut StdRng) -> Payload {
    let g = |rng: &mut StdRng| Guid::from_bytes(rng.random());
    match rng.random_range(0..10) {
        0 => Payload::ActivateReq {
            clsid: g(rng),
            iid: g(rng),
        },
        1 => Payload::ActivateResp {
            status: rng.random(),
            object_id: rng.random(),
        },
        2 => Payload::CallReq {
            object_id: rng.random(),
            iid: g(rng),
            ordinal: rng.random(),
            args: (0..rng.random_range(0..4))
                .map(|_| random_value(rng, 1))
                .collect(),
        },
        3 => Payload::CallResp {
            status: rng.random(),
            value: random_value(rng, 1),
        },
        4 => Payload::AddRef {
            object_id: rng.random(),
        },
        5 => Payload::Release {
            object_id: rng.random(),
        },
        6 => Payload::CountResp {
            status: rng.random(),
            count: rng.random(),
        },
        7 => Payload::Bye,
        8 => Payload::QueryReq {
            object_id: rng.random(),
            iid: g(rng),
        },
        _ => Payload::QueryResp {
            status: rng.random(),
            object_id: rng.random(),
        },
    }
}

fn criterion_7() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(0x5EED_0007);
    for i in 0..10_000 {
        let v = random_value(&mut rng, 1);
        let bytes = v.encode().map_err(|e| format!("value {i}: {e}"))?;
        ensure(
            WireValue::decode(&bytes).as_ref() == Ok(&v),
            format!("value {i} round trip"),
        )?;
        ensure(v.encode().unwrap() == bytes, "value encoding deterministic")?;

        let p = random_payload(&mut rng);
        let m = p
            .clone()
            .into_message(rng.random())
            .map_err(|e| format!("message {i}: {e}"))?;
        let bytes = m.encode().unwrap();
        let back = WireMessage::decode(&bytes).map_err(|e| format!("message {i}: {e}"))?;
        ensure(back == m, format!("message {i} round trip"))?;
        ensure(
            Payload::parse(&back).as_ref() == Ok(&p),
            format!("payload {i} round trip"),
        )?;
    }

    let bye = WireMessage::bye().encode().unwrap();
    let expected = [
        0x4D, 0x43, 0x4F, 0x4D, 0x00, 0x01, 0x08, 0x00, 0, 0, 0, 0, 0, 0, 0, 0,
    ];
    ensure(bye == expected, format!("BYE frame {bye:02X?}"))?;

    let mut bad_magic = bye.clone();
    bad_magic[3] = 0x4E;
    let mut bad_version = bye.clone();
    bad_version[5] = 0x02;
    let mut truncated = Payload::AddRef { object_id: 1 }
        .into_message(1)
        .unwrap()
        .encode()
        .unwrap();
    truncated.truncate(truncated.len() - 3);
    for (name, frame) in [
        ("magic", &bad_magic),
        ("version", &bad_version),
        ("truncation", &truncated),
    ] {
        ensure(
            matches!(WireMessage::decode(frame), Err(ComError::ProtocolError(_))),
            format!("{name} rejected with ProtocolError"),
        )?;
    }

    let server = builtin_server();
    for frame in [&bad_magic, &bad_version, &truncated] {
        let mut s = TcpStream::connect(server.local_addr()).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        s.write_all(frame).unwrap();
        let _ = s.shutdown(std::net::Shutdown::Write);
        let mut rest = Vec::new();
        let _ = s.read_to_end(&mut rest);
    }
    let ctx = context(&[remote(CLSID_ECHO, server.port())]);
    let echo = ctx
        .create_instance(CLSID_ECHO, IID_IECHO)
        .map_err(|e| format!("server died: {e}"))?;
    ensure(
        echo.call(0, vec![WireValue::I64(1)]) == Ok(WireValue::I64(1)),
        "server still serving",
    )?;
    echo.release().unwrap();
    Ok("20000 round trips, BYE exact, malformed frames isolated".into())
}

/// Child side of the rundown check: hold three remote handles until killed.
fn hold_remote_handles(port: u16) -> ! {
    let ctx = context(&[remote(CLSID_CLOCK, port)]);
    let clock = ctx.create_instance(CLSID_CLOCK, IID_ICLOCK).unwrap();
    let alarm = clock.query_interface(IID_IALARM).unwrap();
    let timer = clock.query_interface(IID_ITIMER).unwrap();
    println!("HELD");
    std::io::stdout().flush().unwrap();
    let _keep = (clock, alarm, timer);
    loop {
        std::thread::sleep(Duration::from_secs(60));
    }
}

#[allow(clippy::zombie_processes)]
fn criterion_8() -> Result<String, String> {
    let server = builtin_server();
    let watch = DestructionWatch::new();
    let mut client = Command::new(std::env::current_exe().unwrap())
        .env(CLIENT_ENV, server.port().to_string())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(client.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let held = ensure(line.trim() == "HELD", format!("client said {line:?}")).and_then(|_| {
        ensure(
            server.total_stub_count() == 3,
            "three references held remotely",
        )
    });
    if let Err(why) = held {
        let _ = client.kill();
        let _ = client.wait();
        return Err(why);
    }
    let tokens: BTreeSet<u64> = server
        .stub_entries()
        .iter()
        .flat_map(|(_, e)| e.iter().map(|s| s.identity))
        .collect();
    ensure(tokens.len() == 1, "one object behind the handles")?;
    let token = *tokens.first().unwrap();

    client.kill().unwrap();
    client.wait().unwrap();
    let killed = Instant::now();
    ensure(
        eventually(Duration::from_secs(5), || {
            server.total_stub_count() == 0 && server.connections().is_empty()
        }),
        "stub table emptied",
    )?;
    ensure(
        watch.wait_for(token, Duration::from_secs(5)),
        "sole-owner object destroyed",
    )?;
    let rundown = within(killed.elapsed(), Duration::from_secs(5), "rundown")?;

    let scm = scm_over(&[local(CLSID_ECHO)], ScmConfig::default());
    let factories: Vec<_> = std::thread::scope(|s| {
        let workers: Vec<_> = (0..32)
            .map(|_| {
                s.spawn(|| scm.activate(&ActivationRequest::local(CLSID_ECHO, IID_ICLASSFACTORY)))
            })
            .collect();
        workers.into_iter().map(|w| w.join().unwrap()).collect()
    });
    let ok = factories.iter().filter(|f| f.is_ok()).count();
    ensure(ok == 32, format!("{ok}/32 activations succeeded"))?;
    ensure(
        scm.spawn_count() == 1,
        format!("{} children spawned", scm.spawn_count()),
    )?;
    for f in factories.into_iter().flatten() {
        f.release().unwrap();
    }
    Ok(format!("{rundown}, 32 activations -> 1 child"))
}

fn criterion_9() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let server_reg = write_registry(dir.path(), "server.reg", &builtins());
    let serve = ServeProcess::start(&server_reg);
    let expected: String = microcom::cli::PHASES
        .iter()
        .enumerate()
        .map(|(i, p)| format!("PHASE {}: {p} ... OK\n", i + 1))
        .collect();
    for (name, reg) in [
        ("inproc", inproc(CLSID_CLOCK, "clock")),
        ("local", local(CLSID_CLOCK)),
        ("remote", remote(CLSID_CLOCK, serve.port)),
    ] {
        let path = write_registry(dir.path(), &format!("{name}.reg"), &[reg]);
        let o = Command::new(MICROCOM)
            .arg("--registry")
            .arg(&path)
            .args(["demo-lifecycle", "--clsid", &CLSID_CLOCK.to_string()])
            .output()
            .unwrap();
        ensure(
            o.status.code() == Some(0),
            format!("{name}: exit {:?}", o.status.code()),
        )?;
        ensure(
            String::from_utf8_lossy(&o.stdout) == expected,
            format!("{name}: phase lines"),
        )?;
    }
    Ok("five phases in order for inproc, local and remote".into())
}

fn main() {
    if let Ok(port) = std::env::var(CLIENT_ENV) {
        hold_remote_handles(port.parse().unwrap());
    }
    let criteria: [(&str, Check); 9] = [
        ("two clients on one object", criterion_1),
        ("reference-count fuzz against a counter model", criterion_2),
        ("QueryInterface properties", criterion_3),
        ("library version gate", criterion_4),
        ("creation contract", criterion_5),
        ("location transparency", criterion_6),
        ("wire codec", criterion_7),
        ("rundown and single-instance servers", criterion_8),
        ("lifecycle demo", criterion_9),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (title, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .map_or("panicked".into(), |m| format!("panicked: {m}")))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: {title} ... PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: {title} ... FAIL ({why})", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
