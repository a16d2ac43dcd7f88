use crate::error::{ComError, Result};
use crate::guid::Guid;
use crate::interfaces::{IECHO, IUNKNOWN};
use crate::object::{ClassInfo, Component};
use crate::wire::value::WireValue;

use super::CLSID_ECHO;

/// Returns its single argument unchanged. Has no `IInitialize`, so every
/// instance is usable as soon as it is created.
struct Echo;

impl Component for Echo {
    fn invoke(&mut self, _iid: Guid, _ordinal: u16, mut args: Vec<WireValue>) -> Result<WireValue> {
        if args.len() != 1 {
            return Err(ComError::BadArity {
                expected: 1,
                got: args.len(),
            });
        }
        Ok(args.remove(0))
    }
}

pub static ECHO_CLASS: ClassInfo = ClassInfo {
    clsid: CLSID_ECHO,
    name: "Echo Component",
    interfaces: &[&IUNKNOWN, &IECHO],
    construct: || Ok(Box::new(Echo)),
};
