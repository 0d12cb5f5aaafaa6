//! Hysteresis branch tracking, "approach from above" convention.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HysteresisState {
    pub tracked: bool,
    pub on_branch: bool,
    pub last_dir: Direction,
    /// Last set current seen since the magnet was standardized.
    pub prev_set: Option<f64>,
}

impl HysteresisState {
    /// Tracked magnets start off branch until standardized; untracked ones
    /// always report on branch.
    pub fn new(tracked: bool) -> Self {
        Self {
            tracked,
            on_branch: !tracked,
            last_dir: Direction::None,
            prev_set: None,
        }
    }

    pub fn standardized(&mut self) {
        self.on_branch = true;
        self.last_dir = Direction::Down;
        self.prev_set = None;
    }

    /// A set increase leaves the branch; decreases keep it.
    pub fn update(&mut self, new_set: f64) -> &Self {
        if !self.tracked {
            return self;
        }
        if let Some(prev) = self.prev_set {
            if new_set > prev {
                self.on_branch = false;
                self.last_dir = Direction::Up;
            } else if new_set < prev {
                self.last_dir = Direction::Down;
            }
        }
        self.prev_set = Some(new_set);
        self
    }

    pub fn label(&self) -> &'static str {
        if self.on_branch {
            "on_branch"
        } else {
            "off_branch"
        }
    }
}
