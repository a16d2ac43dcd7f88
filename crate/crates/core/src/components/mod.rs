//! Sample components: the three-interface clock and a minimal echo object.

mod clock;
mod echo;

pub use clock::{ClockState, CLOCK_CLASS};
pub use echo::ECHO_CLASS;

use crate::guid::Guid;
use crate::object::ClassInfo;

pub const CLSID_CLOCK: Guid = Guid::from_u128(0x57530CE5_6266_46F2_9CB9_8B846CBDE952);
pub const CLSID_ECHO: Guid = Guid::from_u128(0xE99F7D7B_3B28_4BFF_B6B1_173018BA5E30);

/// Every class shipped with the runtime, with its catalog name.
pub static SAMPLE_CLASSES: [(&str, &ClassInfo); 2] =
    [("clock", &CLOCK_CLASS), ("echo", &ECHO_CLASS)];

pub fn class_by_clsid(clsid: &Guid) -> Option<&'static ClassInfo> {
    SAMPLE_CLASSES
        .iter()
        .map(|(_, c)| *c)
        .find(|c| c.clsid == *clsid)
}
