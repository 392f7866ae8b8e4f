//! Netlists shipped with the library.

pub const RC: &str = include_str!("../decks/rc.cir");
pub const RC_PULSE: &str = include_str!("../decks/rc_pulse.cir");
pub const DIODE_RECTIFIER: &str = include_str!("../decks/diode_rectifier.cir");
pub const SCHMITT: &str = include_str!("../decks/schmitt.cir");
pub const INVERTER_CHAIN: &str = include_str!("../decks/inverter_chain.cir");

/// `(name, text)` of every bundled deck.
pub const ALL: [(&str, &str); 5] = [
    ("rc", RC),
    ("rc_pulse", RC_PULSE),
    ("diode_rectifier", DIODE_RECTIFIER),
    ("schmitt", SCHMITT),
    ("inverter_chain", INVERTER_CHAIN),
];

pub fn by_name(name: &str) -> Option<&'static str> {
    ALL.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}
