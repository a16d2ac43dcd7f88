//! The object runtime: live objects, interface handles, QueryInterface and
//! 32-bit reference counting.
//!
//! Every reference a client holds is an [`InterfaceHandle`]. A handle carries
//! a number of issued references (one from creation or QueryInterface, plus
//! one per successful `add_ref`), and each issued reference is consumed by
//! exactly one `release`. The object's count is always the sum of the
//! references carried by its live handles, and the object is destroyed the
//! moment that count reaches zero.
//!
//! Cloning an `InterfaceHandle` aliases the same references; it does not add
//! one. Dropping a handle without releasing it leaks its references.

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock, Weak};
use std::time::{Duration, Instant};

use crate::error::{ComError, Result};
use crate::guid::Guid;
use crate::interfaces::{
    Arity, InterfaceId, ICLASSFACTORY, IID_ICLASSFACTORY, IID_IINITIALIZE, IUNKNOWN,
};
use crate::wire::proxy::ProxyObject;
use crate::wire::value::WireValue;

/// Behaviour of one component instance. The runtime performs interface,
/// ordinal, arity and initialization checks before calling in, and holds the
/// object's lock for the duration of every call.
pub trait Component: Send {
    /// Called once, for classes that expose `IInitialize`.
    fn initialize(&mut self, _args: Vec<WireValue>) -> Result<()> {
        Ok(())
    }

    fn invoke(&mut self, iid: Guid, ordinal: u16, args: Vec<WireValue>) -> Result<WireValue>;
}

/// Static description of a component class, the unit a server exposes.
pub struct ClassInfo {
    pub clsid: Guid,
    pub name: &'static str,
    /// Interfaces of each instance; must include `IUnknown`.
    pub interfaces: &'static [&'static InterfaceId],
    pub construct: fn() -> Result<Box<dyn Component>>,
}

impl ClassInfo {
    pub fn supports(&self, iid: &Guid) -> bool {
        self.interfaces.iter().any(|i| i.iid == *iid)
    }
}

impl fmt::Debug for ClassInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClassInfo")
            .field("clsid", &self.clsid)
            .field("name", &self.name)
            .finish()
    }
}

static FACTORY_INTERFACES: [&InterfaceId; 2] = [&IUNKNOWN, &ICLASSFACTORY];

static NEXT_TOKEN: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_identity_token() -> u64 {
    NEXT_TOKEN.fetch_add(1, Ordering::Relaxed)
}

static LIVE_OBJECTS: AtomicU64 = AtomicU64::new(0);

/// Number of local objects currently alive in this process.
pub fn live_objects() -> u64 {
    LIVE_OBJECTS.load(Ordering::SeqCst)
}

type Hook = Box<dyn FnOnce(u64) + Send>;

enum Body {
    Factory(&'static ClassInfo),
    Instance(Mutex<InstanceState>),
}

struct InstanceState {
    component: Option<Box<dyn Component>>,
    initialized: bool,
}

pub(crate) struct ObjectCell {
    token: u64,
    clsid: Guid,
    count: AtomicU32,
    interfaces: &'static [&'static InterfaceId],
    body: Body,
    destroyed: AtomicBool,
    hooks: Mutex<Vec<Hook>>,
}

impl ObjectCell {
    fn new(
        clsid: Guid,
        interfaces: &'static [&'static InterfaceId],
        body: Body,
    ) -> Arc<ObjectCell> {
        LIVE_OBJECTS.fetch_add(1, Ordering::SeqCst);
        Arc::new(ObjectCell {
            token: next_identity_token(),
            clsid,
            count: AtomicU32::new(1),
            interfaces,
            body,
            destroyed: AtomicBool::new(false),
            hooks: Mutex::new(Vec::new()),
        })
    }

    fn supports(&self, iid: &Guid) -> bool {
        self.interfaces.iter().any(|i| i.iid == *iid)
    }

    /// Adds one reference; fails rather than resurrect a destroyed object.
    fn retain(&self) -> Result<u32> {
        let mut cur = self.count.load(Ordering::Acquire);
        loop {
            if cur == 0 {
                return Err(ComError::HandleDead);
            }
            if cur == u32::MAX {
                return Err(ComError::CountOverflow);
            }
            match self.count.compare_exchange_weak(
                cur,
                cur + 1,
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => return Ok(cur + 1),
                Err(actual) => cur = actual,
            }
        }
    }

    fn release(&self) -> Result<u32> {
        let mut cur = self.count.load(Ordering::Acquire);
        loop {
            if cur == 0 {
                return Err(ComError::HandleDead);
            }
            match self.count.compare_exchange_weak(
                cur,
                cur - 1,
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => break,
                Err(actual) => cur = actual,
            }
        }
        if cur == 1 {
            self.destroy();
        }
        Ok(cur - 1)
    }

    fn destroy(&self) {
        if self.destroyed.swap(true, Ordering::AcqRel) {
            return;
        }
        if let Body::Instance(state) = &self.body {
            let component = state.lock().unwrap().component.take();
            drop(component);
        }
        LIVE_OBJECTS.fetch_sub(1, Ordering::SeqCst);
        let hooks = std::mem::take(&mut *self.hooks.lock().unwrap());
        for hook in hooks {
            hook(self.token);
        }
        notify_watchers(self.token, self.clsid);
    }

    fn call(&self, iid: Guid, ordinal: u16, args: Vec<WireValue>) -> Result<WireValue> {
        let iface = self
            .interfaces
            .iter()
            .find(|i| i.iid == iid)
            .ok_or(ComError::NoInterface)?;
        let method = iface
            .method(ordinal)
            .ok_or(ComError::NoSuchMethod(ordinal))?;
        if let Arity::Exact(n) = method.arity {
            if args.len() != n {
                return Err(ComError::BadArity {
                    expected: n,
                    got: args.len(),
                });
            }
        }
        let state = match &self.body {
            Body::Instance(state) => state,
            // Instance creation goes through `InterfaceHandle::create_instance`.
            Body::Factory(_) => return Err(ComError::NoSuchMethod(ordinal)),
        };
        let mut state = state.lock().unwrap();
        let initialized = state.initialized;
        let component = state.component.as_mut().ok_or(ComError::HandleDead)?;
        if iid == IID_IINITIALIZE {
            if initialized {
                return Err(ComError::AlreadyInitialized);
            }
            component.initialize(args)?;
            state.initialized = true;
            return Ok(WireValue::Null);
        }
        if !initialized {
            return Err(ComError::NotInitialized);
        }
        component.invoke(iid, ordinal, args)
    }
}

/// Where a handle's calls go.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Local,
    Proxy { connection: u64, remote_object: u64 },
}

#[derive(Clone)]
pub(crate) enum Target {
    Local(Arc<ObjectCell>),
    Proxy(Arc<ProxyObject>),
}

impl Target {
    fn same_as(&self, other: &Target) -> bool {
        match (self, other) {
            (Target::Local(a), Target::Local(b)) => Arc::ptr_eq(a, b),
            (Target::Proxy(a), Target::Proxy(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

struct Slot {
    iid: Guid,
    target: Target,
    refs: AtomicU32,
}

impl Slot {
    fn ensure_live(&self) -> Result<()> {
        if self.refs.load(Ordering::Acquire) == 0 {
            Err(ComError::HandleDead)
        } else {
            Ok(())
        }
    }

    fn try_increment(&self) -> Result<()> {
        self.refs
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |r| {
                (r != 0 && r != u32::MAX).then_some(r + 1)
            })
            .map(|_| ())
            .map_err(|r| {
                if r == 0 {
                    ComError::HandleDead
                } else {
                    ComError::CountOverflow
                }
            })
    }

    fn take_one(&self) -> Result<()> {
        self.refs
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |r| r.checked_sub(1))
            .map(|_| ())
            .map_err(|_| ComError::HandleDead)
    }
}

/// A client's typed reference to one interface of one object.
#[derive(Clone)]
pub struct InterfaceHandle {
    slot: Arc<Slot>,
}

impl InterfaceHandle {
    pub(crate) fn from_target(iid: Guid, target: Target) -> InterfaceHandle {
        InterfaceHandle {
            slot: Arc::new(Slot {
                iid,
                target,
                refs: AtomicU32::new(1),
            }),
        }
    }

    pub fn iid(&self) -> Guid {
        self.slot.iid
    }

    pub fn is_live(&self) -> bool {
        self.slot.refs.load(Ordering::Acquire) > 0
    }

    /// Identity of the underlying object; equal for every handle on it.
    pub fn identity_token(&self) -> u64 {
        match &self.slot.target {
            Target::Local(cell) => cell.token,
            Target::Proxy(p) => p.identity(),
        }
    }

    pub fn route(&self) -> Route {
        match &self.slot.target {
            Target::Local(_) => Route::Local,
            Target::Proxy(p) => Route::Proxy {
                connection: p.connection_id(),
                remote_object: p.remote_id(),
            },
        }
    }

    /// Class of a local object; `None` for proxies.
    pub fn clsid(&self) -> Option<Guid> {
        match &self.slot.target {
            Target::Local(cell) => Some(cell.clsid),
            Target::Proxy(_) => None,
        }
    }

    /// Current count of a local object; `None` for proxies.
    pub fn ref_count(&self) -> Option<u32> {
        match &self.slot.target {
            Target::Local(cell) => Some(cell.count.load(Ordering::Acquire)),
            Target::Proxy(_) => None,
        }
    }

    /// References carried by this handle (zero once fully released).
    pub fn issued_refs(&self) -> u32 {
        self.slot.refs.load(Ordering::Acquire)
    }

    pub fn query_interface(&self, iid: Guid) -> Result<InterfaceHandle> {
        self.slot.ensure_live()?;
        match &self.slot.target {
            Target::Local(cell) => {
                if !cell.supports(&iid) {
                    return Err(ComError::NoInterface);
                }
                cell.retain()?;
                Ok(InterfaceHandle::from_target(
                    iid,
                    Target::Local(cell.clone()),
                ))
            }
            Target::Proxy(p) => {
                let target = p.query_interface(iid)?;
                Ok(InterfaceHandle::from_target(iid, Target::Proxy(target)))
            }
        }
    }

    /// Issues one more reference through this handle and returns the new
    /// object count.
    pub fn add_ref(&self) -> Result<u32> {
        self.slot.try_increment()?;
        let result = match &self.slot.target {
            Target::Local(cell) => cell.retain(),
            Target::Proxy(p) => p.add_ref(),
        };
        if result.is_err() {
            self.slot.refs.fetch_sub(1, Ordering::AcqRel);
        }
        result
    }

    /// Consumes one reference carried by this handle and returns the new
    /// object count; the object is destroyed when it reaches zero.
    pub fn release(&self) -> Result<u32> {
        self.slot.take_one()?;
        match &self.slot.target {
            Target::Local(cell) => cell.release(),
            Target::Proxy(p) => p.release(),
        }
    }

    /// Invokes method `ordinal` of this handle's interface.
    pub fn call(&self, ordinal: u16, args: Vec<WireValue>) -> Result<WireValue> {
        self.slot.ensure_live()?;
        match &self.slot.target {
            Target::Local(cell) => cell.call(self.slot.iid, ordinal, args),
            Target::Proxy(p) => p.call(self.slot.iid, ordinal, args),
        }
    }

    /// Asks a class factory for a new, uninitialized instance exposing `iid`.
    pub fn create_instance(&self, iid: Guid) -> Result<InterfaceHandle> {
        self.slot.ensure_live()?;
        match &self.slot.target {
            Target::Local(cell) => {
                let class = match &cell.body {
                    Body::Factory(class) => *class,
                    Body::Instance(_) => return Err(ComError::NoInterface),
                };
                if !class.supports(&iid) {
                    return Err(ComError::NoInterface);
                }
                let component = (class.construct)().map_err(|e| match e {
                    ComError::FactoryFailure(_) => e,
                    other => ComError::FactoryFailure(other.to_string()),
                })?;
                let cell = ObjectCell::new(
                    class.clsid,
                    class.interfaces,
                    Body::Instance(Mutex::new(InstanceState {
                        component: Some(component),
                        initialized: !class.supports(&IID_IINITIALIZE),
                    })),
                );
                Ok(InterfaceHandle::from_target(iid, Target::Local(cell)))
            }
            Target::Proxy(p) => {
                let target = p.create_instance(iid)?;
                Ok(InterfaceHandle::from_target(iid, Target::Proxy(target)))
            }
        }
    }

    /// Runs the object's one-time initialization through `IInitialize`.
    /// Objects whose class lacks that interface report `NoInterface` and are
    /// already usable.
    pub fn initialize(&self, args: Vec<WireValue>) -> Result<()> {
        let init = self.query_interface(IID_IINITIALIZE)?;
        let result = init.call(0, args);
        let released = init.release();
        result?;
        released.map(|_| ())
    }

    /// Registers a callback fired when a local object is destroyed. Returns
    /// false for proxies or objects already destroyed.
    pub fn on_destroy(&self, hook: impl FnOnce(u64) + Send + 'static) -> bool {
        match &self.slot.target {
            Target::Local(cell) => {
                let mut hooks = cell.hooks.lock().unwrap();
                if cell.destroyed.load(Ordering::Acquire) {
                    return false;
                }
                hooks.push(Box::new(hook));
                true
            }
            Target::Proxy(_) => false,
        }
    }

    pub fn downgrade(&self) -> WeakHandle {
        WeakHandle {
            iid: self.slot.iid,
            target: match &self.slot.target {
                Target::Local(cell) => WeakTarget::Local(Arc::downgrade(cell)),
                Target::Proxy(p) => WeakTarget::Proxy(Arc::downgrade(p)),
            },
        }
    }

    /// Moves every reference carried by `other` into this handle. Both must
    /// name the same interface of the same object; object counts are
    /// unchanged.
    pub fn absorb(&self, other: InterfaceHandle) -> Result<()> {
        if other.slot.iid != self.slot.iid || !other.slot.target.same_as(&self.slot.target) {
            return Err(ComError::NoInterface);
        }
        if Arc::ptr_eq(&self.slot, &other.slot) {
            return Ok(());
        }
        let moved = other.slot.refs.swap(0, Ordering::AcqRel);
        self.slot.refs.fetch_add(moved, Ordering::AcqRel);
        Ok(())
    }

    /// True when both handles reach the same interface of the same object.
    pub fn same_interface(&self, other: &InterfaceHandle) -> bool {
        self.slot.iid == other.slot.iid && self.slot.target.same_as(&other.slot.target)
    }

    /// Overwrites a local object's count, for exercising the 2^32-1 boundary.
    #[doc(hidden)]
    pub fn force_ref_count_for_tests(&self, count: u32) {
        if let Target::Local(cell) = &self.slot.target {
            cell.count.store(count, Ordering::Release);
        }
    }
}

impl fmt::Debug for InterfaceHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InterfaceHandle")
            .field("iid", &self.slot.iid)
            .field("identity", &self.identity_token())
            .field("route", &self.route())
            .field("refs", &self.issued_refs())
            .finish()
    }
}

/// Creates the class factory object for `class`, returning its
/// `IClassFactory` handle with a count of one.
pub fn new_class_factory(class: &'static ClassInfo) -> InterfaceHandle {
    let cell = ObjectCell::new(class.clsid, &FACTORY_INTERFACES, Body::Factory(class));
    InterfaceHandle::from_target(IID_ICLASSFACTORY, Target::Local(cell))
}

#[derive(Clone)]
enum WeakTarget {
    Local(Weak<ObjectCell>),
    Proxy(Weak<ProxyObject>),
}

/// A non-owning reference that can be turned back into a counted handle
/// while the object is alive.
#[derive(Clone)]
pub struct WeakHandle {
    iid: Guid,
    target: WeakTarget,
}

impl WeakHandle {
    pub fn is_alive(&self) -> bool {
        match &self.target {
            WeakTarget::Local(w) => w
                .upgrade()
                .is_some_and(|c| c.count.load(Ordering::Acquire) > 0),
            WeakTarget::Proxy(w) => w.upgrade().is_some_and(|p| p.is_held()),
        }
    }

    /// Issues a fresh reference if the object is still alive.
    pub fn upgrade(&self) -> Option<InterfaceHandle> {
        match &self.target {
            WeakTarget::Local(w) => {
                let cell = w.upgrade()?;
                cell.retain().ok()?;
                Some(InterfaceHandle::from_target(self.iid, Target::Local(cell)))
            }
            WeakTarget::Proxy(w) => {
                let p = w.upgrade()?;
                p.try_retain().ok()?;
                Some(InterfaceHandle::from_target(self.iid, Target::Proxy(p)))
            }
        }
    }
}

type DestructionLog = Mutex<Vec<(u64, Guid)>>;

fn watchers() -> &'static Mutex<Vec<Weak<DestructionLog>>> {
    static WATCHERS: OnceLock<Mutex<Vec<Weak<DestructionLog>>>> = OnceLock::new();
    WATCHERS.get_or_init(|| Mutex::new(Vec::new()))
}

fn notify_watchers(token: u64, clsid: Guid) {
    let mut list = watchers().lock().unwrap();
    list.retain(|w| match w.upgrade() {
        Some(log) => {
            log.lock().unwrap().push((token, clsid));
            true
        }
        None => false,
    });
}

/// Records every local object destroyed in this process while it exists.
pub struct DestructionWatch {
    log: Arc<DestructionLog>,
}

impl DestructionWatch {
    pub fn new() -> DestructionWatch {
        let log = Arc::new(Mutex::new(Vec::new()));
        watchers().lock().unwrap().push(Arc::downgrade(&log));
        DestructionWatch { log }
    }

    /// How many times the object with `token` was destroyed.
    pub fn count(&self, token: u64) -> usize {
        self.log
            .lock()
            .unwrap()
            .iter()
            .filter(|(t, _)| *t == token)
            .count()
    }

    pub fn destroyed(&self) -> Vec<(u64, Guid)> {
        self.log.lock().unwrap().clone()
    }

    /// Polls until `token` has been destroyed or `timeout` elapses.
    pub fn wait_for(&self, token: u64, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.count(token) > 0 {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }
}

impl Default for DestructionWatch {
    fn default() -> Self {
        Self::new()
    }
}
