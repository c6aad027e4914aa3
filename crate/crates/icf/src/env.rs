//! Deterministic gridworld environments with symbolic and pixel observation
//! modes and exhaustive state enumeration.
//!
//! Three presets mirror the experiments: an 8x8 room with one orange block
//! (optionally with a redundant `up` duplicate and a `down+left` composite
//! action), a 4x4 room with toggle switches, and a grid with two movable
//! sprites driven by 4 directional actions each.

use crate::autodiff::Tensor;
use crate::error::{IcfError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

pub const MAX_ENUMERABLE_STATES: usize = 1_000_000;

/// Grid cell, x to the right, y downward, both zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }
}

/// What an action does when executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionEffect {
    /// Displace the agent (or object `target` in multi-object grids).
    Move { dx: i32, dy: i32, target: usize },
    /// Flip the switch under the agent, if any.
    Toggle,
    /// Do nothing.
    Noop,
}

/// One named action; order in the action set fixes action indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub name: String,
    pub effect: ActionEffect,
}

/// Static description of an environment instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: i32,
    pub height: i32,
    pub blocked: BTreeSet<Cell>,
    pub switches: Vec<Cell>,
    /// Sprite ids for movable objects; empty for agent-only grids.
    pub objects: Vec<u8>,
    pub has_agent: bool,
    pub actions: Vec<Action>,
    pub allow_noop: bool,
}

impl GridSpec {
    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && c.x < self.width && c.y < self.height
    }

    pub fn free(&self, c: Cell) -> bool {
        self.in_bounds(c) && !self.blocked.contains(&c)
    }

    pub fn initial_state(&self) -> EnvState {
        let first_free = (0..self.height as i64 * self.width as i64)
            .map(|i| Cell::new((i % self.width as i64) as i32, (i / self.width as i64) as i32))
            .find(|c| self.free(*c))
            .expect("grid has no free cell");
        EnvState {
            agent: if self.has_agent { Some(first_free) } else { None },
            object_positions: self.objects.iter().enumerate().map(|(i, _)| {
                // Objects start on distinct free cells scanned in row-major order.
                let mut seen = 0;
                for y in 0..self.height {
                    for x in 0..self.width {
                        let c = Cell::new(x, y);
                        if self.free(c) {
                            if seen == i {
                                return c;
                            }
                            seen += 1;
                        }
                    }
                }
                unreachable!("not enough free cells for objects")
            }).collect(),
            switch_states: vec![false; self.switches.len()],
        }
    }

    /// Length of the ground-truth feature vector.
    pub fn n_features(&self) -> usize {
        (if self.has_agent { 2 } else { 0 }) + 2 * self.objects.len() + self.switches.len()
    }
}

/// Exact simulator state: a value type, stepping is pure.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EnvState {
    pub agent: Option<Cell>,
    pub object_positions: Vec<Cell>,
    pub switch_states: Vec<bool>,
}

/// Observation rendering mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    Symbolic,
    Pixels,
}

/// What the agent sees: a channel grid (symbolic) or an RGB image (pixels).
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub mode: ObsMode,
    pub data: Tensor,
}

/// Deterministic transition. Movement into blocked cells or out of bounds
/// leaves the position unchanged; toggle flips the switch under the agent.
pub fn step(spec: &GridSpec, state: &EnvState, action: usize) -> Result<EnvState> {
    let act = spec.actions.get(action).ok_or(IcfError::InvalidAction {
        index: action,
        n_actions: spec.actions.len(),
    })?;
    let mut next = state.clone();
    match act.effect {
        ActionEffect::Noop => {}
        ActionEffect::Toggle => {
            if let Some(agent) = state.agent {
                if let Some(i) = spec.switches.iter().position(|&s| s == agent) {
                    next.switch_states[i] = !next.switch_states[i];
                }
            }
        }
        ActionEffect::Move { dx, dy, target } => {
            if spec.has_agent && target == 0 {
                let a = state.agent.expect("agent grid without agent position");
                let c = Cell::new(a.x + dx, a.y + dy);
                if spec.free(c) {
                    next.agent = Some(c);
                }
            } else {
                let idx = if spec.has_agent { target - 1 } else { target };
                let o = state.object_positions[idx];
                let c = Cell::new(o.x + dx, o.y + dy);
                // Objects may overlap each other but not blocked cells.
                if spec.free(c) {
                    next.object_positions[idx] = c;
                }
            }
        }
    }
    Ok(next)
}

/// Actions whose execution changes the state (Appendix-style "permissible
/// actions only" sampling excludes the rest).
pub fn permissible_actions(spec: &GridSpec, state: &EnvState) -> Vec<usize> {
    (0..spec.n_actions())
        .filter(|&a| {
            step(spec, state, a)
                .map(|s| s != *state)
                .unwrap_or(false)
        })
        .collect()
}

// -- observations ----------------------------------------------------------

/// Channel layout in symbolic mode: blocked plane, agent plane (if any),
/// one plane per object, then per switch a plane whose value encodes state
/// (off cells stay on an "off" plane, on cells on an "on" plane).
pub fn symbolic_channels(spec: &GridSpec) -> usize {
    1 + usize::from(spec.has_agent) + spec.objects.len() + 2 * usize::from(!spec.switches.is_empty())
}

pub fn observe(spec: &GridSpec, state: &EnvState, mode: ObsMode) -> Observation {
    match mode {
        ObsMode::Symbolic => observe_symbolic(spec, state),
        ObsMode::Pixels => observe_pixels(spec, state),
    }
}

fn observe_symbolic(spec: &GridSpec, state: &EnvState) -> Observation {
    let (w, h) = (spec.width as usize, spec.height as usize);
    let c = symbolic_channels(spec);
    let mut data = vec![0.0; c * h * w];
    let plane = |ch: usize, cell: Cell, v: f64, data: &mut Vec<f64>| {
        data[(ch * h + cell.y as usize) * w + cell.x as usize] = v;
    };
    for &b in &spec.blocked {
        plane(0, b, 1.0, &mut data);
    }
    let mut ch = 1;
    if let Some(agent) = state.agent {
        plane(ch, agent, 1.0, &mut data);
    }
    if spec.has_agent {
        ch += 1;
    }
    for (i, &pos) in state.object_positions.iter().enumerate() {
        plane(ch + i, pos, 1.0, &mut data);
    }
    ch += spec.objects.len();
    if !spec.switches.is_empty() {
        for (i, &pos) in spec.switches.iter().enumerate() {
            let on = state.switch_states[i];
            plane(ch + usize::from(on), pos, 1.0, &mut data);
        }
    }
    Observation {
        mode: ObsMode::Symbolic,
        data: Tensor::new(vec![c, h, w], data).unwrap(),
    }
}

/// Cell edge in pixels for rendered observations.
pub const CELL_PX: usize = 8;

/// Fixed 5x5 sprite bitmaps for movable objects; pairwise distinct in >= 5
/// pixels so two-object grids stay distinguishable.
pub fn sprite_bitmap(id: u8) -> [[u8; 5]; 5] {
    match id % 4 {
        // hollow diamond
        0 => [
            [0, 0, 1, 0, 0],
            [0, 1, 0, 1, 0],
            [1, 0, 0, 0, 1],
            [0, 1, 0, 1, 0],
            [0, 0, 1, 0, 0],
        ],
        // solid square
        1 => [
            [1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1],
        ],
        // cross
        2 => [
            [0, 0, 1, 0, 0],
            [0, 0, 1, 0, 0],
            [1, 1, 1, 1, 1],
            [0, 0, 1, 0, 0],
            [0, 0, 1, 0, 0],
        ],
        // corners
        _ => [
            [1, 1, 0, 1, 1],
            [1, 0, 0, 0, 1],
            [0, 0, 0, 0, 0],
            [1, 0, 0, 0, 1],
            [1, 1, 0, 1, 1],
        ],
    }
}

fn observe_pixels(spec: &GridSpec, state: &EnvState) -> Observation {
    let (w, h) = (spec.width as usize * CELL_PX, spec.height as usize * CELL_PX);
    let mut data = vec![0.0; 3 * h * w];
    let put = |px: usize, py: usize, rgb: [f64; 3], data: &mut Vec<f64>| {
        for (c, v) in rgb.iter().enumerate() {
            data[(c * h + py) * w + px] = *v;
        }
    };
    // background: dark gray
    for py in 0..h {
        for px in 0..w {
            put(px, py, [0.1, 0.1, 0.1], &mut data);
        }
    }
    // orange blocks
    for &b in &spec.blocked {
        for dy in 0..CELL_PX {
            for dx in 0..CELL_PX {
                put(b.x as usize * CELL_PX + dx, b.y as usize * CELL_PX + dy, [1.0, 0.6, 0.0], &mut data);
            }
        }
    }
    // switches: shade of green varies with state
    for (i, &s) in spec.switches.iter().enumerate() {
        let g = if state.switch_states[i] { 1.0 } else { 0.45 };
        for dy in 1..CELL_PX - 1 {
            for dx in 1..CELL_PX - 1 {
                put(s.x as usize * CELL_PX + dx, s.y as usize * CELL_PX + dy, [0.0, g, 0.0], &mut data);
            }
        }
    }
    // objects: fixed 5x5 bitmaps in distinct hues
    for (i, &pos) in state.object_positions.iter().enumerate() {
        let bmp = sprite_bitmap(spec.objects[i]);
        let hue = match i % 3 {
            0 => [1.0, 1.0, 1.0],
            1 => [0.2, 0.6, 1.0],
            _ => [1.0, 0.2, 1.0],
        };
        let off = (CELL_PX - 5) / 2;
        for (by, row) in bmp.iter().enumerate() {
            for (bx, &v) in row.iter().enumerate() {
                if v == 1 {
                    put(
                        pos.x as usize * CELL_PX + off + bx,
                        pos.y as usize * CELL_PX + off + by,
                        hue,
                        &mut data,
                    );
                }
            }
        }
    }
    // agent: red filled disc approximation
    if let Some(a) = state.agent {
        let r = CELL_PX as f64 / 2.0 - 1.0;
        let (cx, cy) = (CELL_PX as f64 / 2.0 - 0.5, CELL_PX as f64 / 2.0 - 0.5);
        for dy in 0..CELL_PX {
            for dx in 0..CELL_PX {
                let dd = (dx as f64 - cx).powi(2) + (dy as f64 - cy).powi(2);
                if dd <= r * r {
                    put(a.x as usize * CELL_PX + dx, a.y as usize * CELL_PX + dy, [0.9, 0.1, 0.1], &mut data);
                }
            }
        }
    }
    Observation {
        mode: ObsMode::Pixels,
        data: Tensor::new(vec![3, h, w], data).unwrap(),
    }
}

// -- presets ---------------------------------------------------------------

fn moves(names: &[(&str, i32, i32)], target: usize) -> Vec<Action> {
    names
        .iter()
        .map(|&(n, dx, dy)| Action {
            name: n.to_string(),
            effect: ActionEffect::Move { dx, dy, target },
        })
        .collect()
}

/// Known presets: `mazebase-small`, `mazebase-switches`, `two-digit-grid`.
///
/// `redundant_actions` only affects `mazebase-small`: it adds the duplicate
/// `up2` action and the `down+left` composite.
pub fn preset(name: &str, redundant_actions: bool) -> Result<GridSpec> {
    match name {
        "mazebase-small" => {
            let mut blocked = BTreeSet::new();
            // Fixed layout: one orange block; the only cell the agent cannot reach.
            blocked.insert(Cell::new(4, 3));
            let actions = if redundant_actions {
                vec![
                    Action { name: "up".into(), effect: ActionEffect::Move { dx: 0, dy: -1, target: 0 } },
                    Action { name: "up2".into(), effect: ActionEffect::Move { dx: 0, dy: -1, target: 0 } },
                    Action { name: "down".into(), effect: ActionEffect::Move { dx: 0, dy: 1, target: 0 } },
                    Action { name: "left".into(), effect: ActionEffect::Move { dx: -1, dy: 0, target: 0 } },
                    Action { name: "right".into(), effect: ActionEffect::Move { dx: 1, dy: 0, target: 0 } },
                    Action { name: "down+left".into(), effect: ActionEffect::Move { dx: -1, dy: 1, target: 0 } },
                ]
            } else {
                moves(
                    &[("down", 0, 1), ("left", -1, 0), ("right", 1, 0), ("up", 0, -1)],
                    0,
                )
            };
            Ok(GridSpec {
                width: 8,
                height: 8,
                blocked,
                switches: vec![],
                objects: vec![],
                has_agent: true,
                actions,
                allow_noop: false,
            })
        }
        "mazebase-switches" => {
            let switches = vec![Cell::new(1, 1), Cell::new(2, 3)];
            let actions = vec![
                Action { name: "up".into(), effect: ActionEffect::Move { dx: 0, dy: -1, target: 0 } },
                Action { name: "left".into(), effect: ActionEffect::Move { dx: -1, dy: 0, target: 0 } },
                Action { name: "pass".into(), effect: ActionEffect::Noop },
                Action { name: "right".into(), effect: ActionEffect::Move { dx: 1, dy: 0, target: 0 } },
                Action { name: "toggle".into(), effect: ActionEffect::Toggle },
                Action { name: "down".into(), effect: ActionEffect::Move { dx: 0, dy: 1, target: 0 } },
            ];
            Ok(GridSpec {
                width: 4,
                height: 4,
                blocked: BTreeSet::new(),
                switches,
                objects: vec![],
                has_agent: true,
                actions,
                allow_noop: true,
            })
        }
        "two-digit-grid" => {
            let mut actions = moves(
                &[("d1-up", 0, -1), ("d1-down", 0, 1), ("d1-left", -1, 0), ("d1-right", 1, 0)],
                0,
            );
            actions.extend(moves(
                &[("d2-up", 0, -1), ("d2-down", 0, 1), ("d2-left", -1, 0), ("d2-right", 1, 0)],
                1,
            ));
            Ok(GridSpec {
                width: 4,
                height: 4,
                blocked: BTreeSet::new(),
                switches: vec![],
                // Sprite 0 stands in for an odd digit, sprite 1 for an even one.
                objects: vec![0, 1],
                has_agent: false,
                actions,
                allow_noop: false,
            })
        }
        other => Err(IcfError::UnknownPreset(other.to_string())),
    }
}

// -- enumeration and ground truth ------------------------------------------

/// All valid states in a deterministic order, duplicate-free.
pub fn enumerate_states(spec: &GridSpec) -> Result<Vec<EnvState>> {
    let free: Vec<Cell> = (0..spec.height)
        .flat_map(|y| (0..spec.width).map(move |x| Cell::new(x, y)))
        .filter(|&c| spec.free(c))
        .collect();
    let mut count: usize = if spec.has_agent { free.len() } else { 1 };
    for _ in 0..spec.objects.len() {
        count = count.saturating_mul(free.len());
    }
    count = count.saturating_mul(1usize << spec.switches.len());
    if count > MAX_ENUMERABLE_STATES {
        return Err(IcfError::StateSpaceTooLarge(count, MAX_ENUMERABLE_STATES));
    }

    let mut states = Vec::with_capacity(count);
    let agent_choices: Vec<Option<Cell>> = if spec.has_agent {
        free.iter().map(|&c| Some(c)).collect()
    } else {
        vec![None]
    };
    for &agent in &agent_choices {
        let mut object_combos: Vec<Vec<Cell>> = vec![vec![]];
        for _ in 0..spec.objects.len() {
            object_combos = object_combos
                .into_iter()
                .flat_map(|combo| {
                    free.iter().map(move |&c| {
                        let mut v = combo.clone();
                        v.push(c);
                        v
                    }).collect::<Vec<_>>()
                })
                .collect();
        }
        for combo in object_combos {
            for bits in 0..(1u32 << spec.switches.len()) {
                states.push(EnvState {
                    agent,
                    object_positions: combo.clone(),
                    switch_states: (0..spec.switches.len())
                        .map(|i| bits & (1 << i) != 0)
                        .collect(),
                });
            }
        }
    }
    Ok(states)
}

/// Ordered ground-truth feature vector:
/// (agent x, agent y, per-object x, y, per-switch bit).
pub fn ground_truth(state: &EnvState) -> Vec<f64> {
    let mut v = Vec::new();
    if let Some(a) = state.agent {
        v.push(a.x as f64);
        v.push(a.y as f64);
    }
    for o in &state.object_positions {
        v.push(o.x as f64);
        v.push(o.y as f64);
    }
    for &s in &state.switch_states {
        v.push(if s { 1.0 } else { 0.0 });
    }
    v
}
