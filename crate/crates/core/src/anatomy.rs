//! The 22 branch classes and their fixed ordering.

use std::fmt;

pub const NUM_CLASSES: usize = 22;
pub const NUM_SEGMENTAL: usize = 18;
/// Trachea, both main bronchi and the 18 segmental bronchi.
pub const NUM_NAMED: usize = 21;

const NAMES: [&str; NUM_CLASSES] = [
    "trachea", "left_main", "right_main", "LB1+2", "LB3", "LB4", "LB5", "LB6", "LB7+8", "LB9", "LB10", "RB1",
    "RB2", "RB3", "RB4", "RB5", "RB6", "RB7", "RB8", "RB9", "RB10", "other",
];

/// Branch class index in `[trachea, left main, right main, LB1+2 .. LB10, RB1 .. RB10, other]` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Class(u8);

impl Class {
    pub const TRACHEA: Class = Class(0);
    pub const LEFT_MAIN: Class = Class(1);
    pub const RIGHT_MAIN: Class = Class(2);
    pub const OTHER: Class = Class(21);

    pub fn new(index: usize) -> Option<Class> {
        (index < NUM_CLASSES).then_some(Class(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        NAMES[self.index()]
    }

    pub fn from_name(name: &str) -> Option<Class> {
        NAMES.iter().position(|&n| n == name).map(|i| Class(i as u8))
    }

    pub fn is_segmental(self) -> bool {
        (3..21).contains(&self.0)
    }

    pub fn is_named(self) -> bool {
        self.0 < 21
    }

    pub fn all() -> impl Iterator<Item = Class> {
        (0..NUM_CLASSES as u8).map(Class)
    }

    /// The 18 segmental classes in canonical order.
    pub fn segmental() -> impl Iterator<Item = Class> {
        (3..21u8).map(Class)
    }

    /// Trachea, main bronchi, then the segmentals.
    pub fn named() -> impl Iterator<Item = Class> {
        (0..21u8).map(Class)
    }

    pub fn lb(n: usize) -> Class {
        // LB1+2, LB3, LB4, LB5, LB6, LB7+8, LB9, LB10
        let idx = match n {
            1 | 2 => 3,
            3..=6 => n as u8 + 1,
            7 | 8 => 8,
            9 => 9,
            10 => 10,
            _ => panic!("no left segmental LB{n}"),
        };
        Class(idx)
    }

    pub fn rb(n: usize) -> Class {
        assert!((1..=10).contains(&n), "no right segmental RB{n}");
        Class(10 + n as u8)
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
