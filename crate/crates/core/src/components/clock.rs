use std::collections::BTreeSet;

use crate::error::{ComError, Result};
use crate::guid::Guid;
use crate::interfaces::{
    IALARM, ICLOCK, IID_IALARM, IID_ICLOCK, IID_ITIMER, IINITIALIZE, ITIMER, IUNKNOWN,
};
use crate::object::{ClassInfo, Component};
use crate::wire::value::WireValue;

use super::CLSID_CLOCK;

/// A clock running on virtual time: only `set_time` and `advance` move it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClockState {
    pub virtual_now: i64,
    pub alarms: BTreeSet<i64>,
    pub timer_running: bool,
    pub timer_started_at: i64,
    pub timer_accumulated: i64,
}

fn int_arg(args: &[WireValue], i: usize) -> Result<i64> {
    args.get(i)
        .and_then(WireValue::as_i64)
        .ok_or_else(|| ComError::ComponentError(format!("argument {i} must be i64")))
}

impl ClockState {
    pub fn starting_at(seconds: i64) -> ClockState {
        ClockState {
            virtual_now: seconds,
            ..ClockState::default()
        }
    }

    pub fn advance(&mut self, seconds: i64) -> Result<()> {
        if seconds < 0 {
            return Err(ComError::ComponentError(
                "cannot advance by a negative amount".into(),
            ));
        }
        self.virtual_now = self
            .virtual_now
            .checked_add(seconds)
            .ok_or_else(|| ComError::ComponentError("virtual time overflow".into()))?;
        Ok(())
    }

    pub fn cancel_alarm(&mut self, at: i64) -> Result<()> {
        if self.alarms.remove(&at) {
            Ok(())
        } else {
            Err(ComError::AlarmNotFound(at))
        }
    }

    /// Earliest alarm not already in the past.
    pub fn next_alarm(&self) -> Option<i64> {
        self.alarms.range(self.virtual_now..).next().copied()
    }

    pub fn start(&mut self) -> Result<()> {
        if self.timer_running {
            return Err(ComError::TimerAlreadyRunning);
        }
        self.timer_running = true;
        self.timer_started_at = self.virtual_now;
        Ok(())
    }

    pub fn stop(&mut self) -> Result<()> {
        if !self.timer_running {
            return Err(ComError::TimerNotRunning);
        }
        self.timer_accumulated = self.elapsed();
        self.timer_running = false;
        Ok(())
    }

    pub fn elapsed(&self) -> i64 {
        let running = if self.timer_running {
            self.virtual_now
                .saturating_sub(self.timer_started_at)
                .max(0)
        } else {
            0
        };
        self.timer_accumulated.saturating_add(running)
    }

    fn dispatch(&mut self, iid: Guid, ordinal: u16, args: &[WireValue]) -> Result<WireValue> {
        let unit = |r: Result<()>| r.map(|_| WireValue::Null);
        match (iid, ordinal) {
            (IID_ICLOCK, 0) => Ok(WireValue::I64(self.virtual_now)),
            (IID_ICLOCK, 1) => {
                self.virtual_now = int_arg(args, 0)?;
                Ok(WireValue::Null)
            }
            (IID_ICLOCK, 2) => unit(self.advance(int_arg(args, 0)?)),
            (IID_IALARM, 0) => {
                self.alarms.insert(int_arg(args, 0)?);
                Ok(WireValue::Null)
            }
            (IID_IALARM, 1) => unit(self.cancel_alarm(int_arg(args, 0)?)),
            (IID_IALARM, 2) => Ok(self.next_alarm().map_or(WireValue::Null, WireValue::I64)),
            (IID_ITIMER, 0) => unit(self.start()),
            (IID_ITIMER, 1) => unit(self.stop()),
            (IID_ITIMER, 2) => Ok(WireValue::I64(self.elapsed())),
            (_, ordinal) => Err(ComError::NoSuchMethod(ordinal)),
        }
    }
}

struct Clock(ClockState);

impl Component for Clock {
    /// Accepts `[]` (start at zero) or `[i64 start_seconds]`.
    fn initialize(&mut self, args: Vec<WireValue>) -> Result<()> {
        let start = match args.len() {
            0 => 0,
            1 => int_arg(&args, 0)?,
            n => {
                return Err(ComError::BadArity {
                    expected: 1,
                    got: n,
                })
            }
        };
        self.0 = ClockState::starting_at(start);
        Ok(())
    }

    fn invoke(&mut self, iid: Guid, ordinal: u16, args: Vec<WireValue>) -> Result<WireValue> {
        self.0.dispatch(iid, ordinal, &args)
    }
}

pub static CLOCK_CLASS: ClassInfo = ClassInfo {
    clsid: CLSID_CLOCK,
    name: "Clock Component",
    interfaces: &[&IUNKNOWN, &IINITIALIZE, &ICLOCK, &IALARM, &ITIMER],
    construct: || Ok(Box::new(Clock(ClockState::default()))),
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::object::{new_class_factory, InterfaceHandle};
    use proptest::prelude::*;

    fn clock(start: i64) -> InterfaceHandle {
        let factory = new_class_factory(&CLOCK_CLASS);
        let h = factory.create_instance(IID_ICLOCK).unwrap();
        factory.release().unwrap();
        h.initialize(vec![WireValue::I64(start)]).unwrap();
        h
    }

    #[test]
    fn setter_and_getter() {
        let c = clock(0);
        c.call(1, vec![WireValue::I64(100)]).unwrap();
        assert_eq!(c.call(0, vec![]), Ok(WireValue::I64(100)));
        c.release().unwrap();
    }

    #[test]
    fn next_alarm_tracks_virtual_time() {
        let c = clock(0);
        let alarm = c.query_interface(IID_IALARM).unwrap();
        assert_eq!(alarm.call(2, vec![]), Ok(WireValue::Null));
        alarm.call(0, vec![WireValue::I64(50)]).unwrap();
        alarm.call(0, vec![WireValue::I64(30)]).unwrap();
        assert_eq!(alarm.call(2, vec![]), Ok(WireValue::I64(30)));
        c.call(2, vec![WireValue::I64(40)]).unwrap();
        assert_eq!(alarm.call(2, vec![]), Ok(WireValue::I64(50)));
        assert_eq!(
            alarm.call(1, vec![WireValue::I64(7)]),
            Err(ComError::AlarmNotFound(7))
        );
        alarm.call(1, vec![WireValue::I64(50)]).unwrap();
        assert_eq!(alarm.call(2, vec![]), Ok(WireValue::Null));
        alarm.release().unwrap();
        c.release().unwrap();
    }

    #[test]
    fn stopwatch() {
        let c = clock(0);
        let timer = c.query_interface(IID_ITIMER).unwrap();
        timer.call(0, vec![]).unwrap();
        assert_eq!(timer.call(0, vec![]), Err(ComError::TimerAlreadyRunning));
        c.call(2, vec![WireValue::I64(7)]).unwrap();
        timer.call(1, vec![]).unwrap();
        c.call(2, vec![WireValue::I64(5)]).unwrap();
        assert_eq!(timer.call(2, vec![]), Ok(WireValue::I64(7)));
        assert_eq!(timer.call(1, vec![]), Err(ComError::TimerNotRunning));
        timer.release().unwrap();
        c.release().unwrap();
    }

    #[test]
    fn rejects_bad_arguments() {
        let c = clock(0);
        assert!(matches!(
            c.call(1, vec![WireValue::Str("x".into())]),
            Err(ComError::ComponentError(_))
        ));
        assert!(matches!(
            c.call(2, vec![WireValue::I64(-1)]),
            Err(ComError::ComponentError(_))
        ));
        c.release().unwrap();
        let mut raw = Clock(ClockState::default());
        assert!(matches!(
            raw.initialize(vec![WireValue::I64(1), WireValue::I64(2)]),
            Err(ComError::BadArity { .. })
        ));
        raw.initialize(vec![]).unwrap();
        assert_eq!(raw.0, ClockState::default());
    }

    proptest! {
        /// next_alarm agrees with a brute-force scan of the alarm set.
        #[test]
        fn next_alarm_matches_brute_force(
            alarms in proptest::collection::vec(-100i64..100, 0..20),
            now in -100i64..100,
        ) {
            let mut s = ClockState::starting_at(now);
            for a in &alarms {
                s.alarms.insert(*a);
            }
            let expected = alarms.iter().copied().filter(|a| *a >= now).min();
            prop_assert_eq!(s.next_alarm(), expected);
        }

        #[test]
        fn elapsed_never_negative(steps in proptest::collection::vec((0u8..4, 0i64..50), 0..30)) {
            let mut s = ClockState::default();
            for (op, amount) in steps {
                let _ = match op {
                    0 => s.start(),
                    1 => s.stop(),
                    2 => s.advance(amount),
                    _ => { s.virtual_now = amount; Ok(()) }
                };
                prop_assert!(s.elapsed() >= 0);
                prop_assert!(s.timer_accumulated >= 0);
            }
        }
    }
}
