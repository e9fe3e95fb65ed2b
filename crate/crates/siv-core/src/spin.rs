//! Spin labels and the global basis convention: photon ⊗ nucleus ⊗ electron,
//! leftmost factor slowest. Index 0 is always the down state.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Electron {
    Down,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Nuclear {
    Down,
    Up,
}

impl Electron {
    pub const ALL: [Electron; 2] = [Electron::Down, Electron::Up];
    pub fn index(self) -> usize {
        match self {
            Electron::Down => 0,
            Electron::Up => 1,
        }
    }
    pub fn flip(self) -> Self {
        match self {
            Electron::Down => Electron::Up,
            Electron::Up => Electron::Down,
        }
    }
    pub fn label(self) -> &'static str {
        match self {
            Electron::Down => "down",
            Electron::Up => "up",
        }
    }
}

impl Nuclear {
    pub const ALL: [Nuclear; 2] = [Nuclear::Down, Nuclear::Up];
    pub fn index(self) -> usize {
        match self {
            Nuclear::Down => 0,
            Nuclear::Up => 1,
        }
    }
    pub fn flip(self) -> Self {
        match self {
            Nuclear::Down => Nuclear::Up,
            Nuclear::Up => Nuclear::Down,
        }
    }
    pub fn label(self) -> &'static str {
        match self {
            Nuclear::Down => "down",
            Nuclear::Up => "up",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpinState {
    pub e: Electron,
    pub n: Nuclear,
}

impl SpinState {
    pub const fn new(e: Electron, n: Nuclear) -> Self {
        Self { e, n }
    }

    /// Index in the 4-dim register space (nucleus ⊗ electron).
    pub fn register_index(self) -> usize {
        2 * self.n.index() + self.e.index()
    }

    pub fn all() -> [SpinState; 4] {
        [
            SpinState::new(Electron::Down, Nuclear::Down),
            SpinState::new(Electron::Up, Nuclear::Down),
            SpinState::new(Electron::Down, Nuclear::Up),
            SpinState::new(Electron::Up, Nuclear::Up),
        ]
    }
}
