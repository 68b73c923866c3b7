//! Cases bundled with the crate.

use super::{parse_case, GridCase};
use crate::{Error, Result};

pub const TWO_BUS: &str = include_str!("../../fixtures/two_bus.json");
pub const FOUR_BUS_3PH: &str = include_str!("../../fixtures/four_bus_3ph.json");

/// Names accepted by [`bundled`].
pub const NAMES: [&str; 2] = ["two_bus", "four_bus_3ph"];

/// Single-phase two-bus line with `y = −j10` per-unit and a 0.1 p.u. load.
pub fn two_bus() -> GridCase {
    parse_case(TWO_BUS, "two_bus").expect("bundled case is valid")
}

/// Twelve-node three-phase feeder with mixed line phase sets and two
/// inverters.
pub fn four_bus_3ph() -> GridCase {
    parse_case(FOUR_BUS_3PH, "four_bus_3ph").expect("bundled case is valid")
}

/// Looks up a bundled case by name.
pub fn bundled(name: &str) -> Result<GridCase> {
    match name {
        "two_bus" => Ok(two_bus()),
        "four_bus_3ph" => Ok(four_bus_3ph()),
        other => Err(Error::InvalidArgument(format!(
            "unknown bundled case `{other}` (available: {})",
            NAMES.join(", ")
        ))),
    }
}
