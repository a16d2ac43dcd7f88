//! Well-known interface identities and their method tables.
//!
//! The identifiers below were drawn once at random and are frozen: changing
//! any of them breaks every registry file and peer that mentions them.
//! Method ordinals are likewise frozen per interface.

use crate::guid::Guid;

pub const IID_IUNKNOWN: Guid = Guid::from_u128(0xF83F3EB2_8480_4B5E_8879_810EE097868A);
pub const IID_ICLASSFACTORY: Guid = Guid::from_u128(0x39939A0A_D633_4F39_8DE9_BE6456A780C2);
pub const IID_IINITIALIZE: Guid = Guid::from_u128(0x873CF9D3_EBF3_471E_A28E_256C91B359BF);
pub const IID_ICLOCK: Guid = Guid::from_u128(0x3CE4BF61_D956_41C1_8515_EB5B865B8D4F);
pub const IID_IALARM: Guid = Guid::from_u128(0x00DFA534_C6C7_4379_B219_1BBCEDFA78A5);
pub const IID_ITIMER: Guid = Guid::from_u128(0x31AA375E_50B7_49D2_A6C9_DEF553ED4F48);
pub const IID_IECHO: Guid = Guid::from_u128(0x7C15BB23_A6E9_42D4_A5FE_3329C710B18A);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    Exact(usize),
    Variadic,
}

#[derive(Debug)]
pub struct MethodDesc {
    pub ordinal: u16,
    pub name: &'static str,
    pub arity: Arity,
}

/// An interface contract: its identity plus the ordered method table that
/// calls are dispatched against.
#[derive(Debug)]
pub struct InterfaceId {
    pub iid: Guid,
    pub name: &'static str,
    pub methods: &'static [MethodDesc],
}

impl InterfaceId {
    pub fn method(&self, ordinal: u16) -> Option<&'static MethodDesc> {
        self.methods.get(ordinal as usize)
    }
}

const fn method(ordinal: u16, name: &'static str, arity: Arity) -> MethodDesc {
    MethodDesc {
        ordinal,
        name,
        arity,
    }
}

/// QueryInterface, AddRef and Release travel as dedicated operations, not as
/// ordinal calls, so the dispatchable table is empty.
pub static IUNKNOWN: InterfaceId = InterfaceId {
    iid: IID_IUNKNOWN,
    name: "IUnknown",
    methods: &[],
};

pub static ICLASSFACTORY: InterfaceId = InterfaceId {
    iid: IID_ICLASSFACTORY,
    name: "IClassFactory",
    methods: &[method(0, "create_instance", Arity::Exact(1))],
};

pub static IINITIALIZE: InterfaceId = InterfaceId {
    iid: IID_IINITIALIZE,
    name: "IInitialize",
    methods: &[method(0, "initialize", Arity::Variadic)],
};

pub static ICLOCK: InterfaceId = InterfaceId {
    iid: IID_ICLOCK,
    name: "IClock",
    methods: &[
        method(0, "get_time", Arity::Exact(0)),
        method(1, "set_time", Arity::Exact(1)),
        method(2, "advance", Arity::Exact(1)),
    ],
};

pub static IALARM: InterfaceId = InterfaceId {
    iid: IID_IALARM,
    name: "IAlarm",
    methods: &[
        method(0, "set_alarm", Arity::Exact(1)),
        method(1, "cancel_alarm", Arity::Exact(1)),
        method(2, "next_alarm", Arity::Exact(0)),
    ],
};

pub static ITIMER: InterfaceId = InterfaceId {
    iid: IID_ITIMER,
    name: "ITimer",
    methods: &[
        method(0, "start", Arity::Exact(0)),
        method(1, "stop", Arity::Exact(0)),
        method(2, "elapsed", Arity::Exact(0)),
    ],
};

pub static IECHO: InterfaceId = InterfaceId {
    iid: IID_IECHO,
    name: "IEcho",
    methods: &[method(0, "echo", Arity::Exact(1))],
};

pub static WELL_KNOWN: [&InterfaceId; 7] = [
    &IUNKNOWN,
    &ICLASSFACTORY,
    &IINITIALIZE,
    &ICLOCK,
    &IALARM,
    &ITIMER,
    &IECHO,
];

pub fn lookup(iid: &Guid) -> Option<&'static InterfaceId> {
    WELL_KNOWN.iter().copied().find(|i| i.iid == *iid)
}

/// Resolves a well-known interface name (`IClock`) or a Guid string.
pub fn resolve(text: &str) -> Option<Guid> {
    WELL_KNOWN
        .iter()
        .find(|i| i.name.eq_ignore_ascii_case(text))
        .map(|i| i.iid)
        .or_else(|| Guid::parse(text).ok())
}
