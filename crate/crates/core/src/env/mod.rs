//! LangGrid: a deterministic instruction-following gridworld.
//!
//! An agent moves on a `width x height` board holding keys, balls, boxes and
//! doors (each a unique kind/color pair) plus two walkable receptacles, a
//! table and a bin. Tasks are chains of 1 to 6 sub-tasks described by
//! templated English instructions.

mod dynamics;
mod planner;
mod render;
mod task;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dynamics::{reset, restart, shaped_reward, step, subtask_target, target_distance, InitMode, StepOutcome};
pub use planner::{bfs_distance, distance_field, plan_action, scripted_rollout, Episode};
pub use render::{render, RgbImage};
pub use task::{
    generate_task, instruction_of, instruction_vocabulary, sample_task, task_seed, TaskSplit, SUBTASK_TEMPLATES,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("num_subtasks must be in [1, 6], got {0}")]
    SubtaskCount(usize),
    #[error("no feasible task found after {attempts} attempts (board too dense?)")]
    Infeasible { attempts: usize },
    #[error("scripted planner exceeded its step budget of {budget} on task {task_id}")]
    StepBudget { task_id: String, budget: usize },
    #[error("planner found no path for sub-task {index} of task {task_id}")]
    Unreachable { task_id: String, index: usize },
}

pub const MAX_SUBTASKS: usize = 6;

/// Discrete action space shared by every task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Pick,
    Place,
    Toggle,
}

impl Action {
    pub const COUNT: usize = 7;
    pub const ALL: [Action; 7] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Pick,
        Action::Place,
        Action::Toggle,
    ];
    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Action> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
            Action::Pick => "pick",
            Action::Place => "place",
            Action::Toggle => "toggle",
        }
    }

    /// Grid offset for movement actions (y grows downwards).
    pub fn delta(self) -> Option<(i32, i32)> {
        match self {
            Action::Up => Some((0, -1)),
            Action::Down => Some((0, 1)),
            Action::Left => Some((-1, 0)),
            Action::Right => Some((1, 0)),
            _ => None,
        }
    }
}

impl From<Action> for u8 {
    fn from(a: Action) -> u8 {
        a as u8
    }
}

impl TryFrom<u8> for Action {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        Action::from_id(v as usize).ok_or_else(|| format!("action id {v} out of range 0..7"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Key,
    Ball,
    Box,
    Door,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 4] = [ObjectKind::Key, ObjectKind::Ball, ObjectKind::Box, ObjectKind::Door];

    pub fn pickable(self) -> bool {
        self != ObjectKind::Door
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectKind::Key => "key",
            ObjectKind::Ball => "ball",
            ObjectKind::Box => "box",
            ObjectKind::Door => "door",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReceptacleKind {
    Table,
    Bin,
}

impl ReceptacleKind {
    pub fn name(self) -> &'static str {
        match self {
            ReceptacleKind::Table => "table",
            ReceptacleKind::Bin => "bin",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: i32,
    pub y: i32,
}

impl Pos {
    pub const fn new(x: i32, y: i32) -> Self {
        Pos { x, y }
    }

    pub fn manhattan(self, other: Pos) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }

    pub fn offset(self, (dx, dy): (i32, i32)) -> Pos {
        Pos::new(self.x + dx, self.y + dy)
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

pub type ObjectId = u32;
pub type ReceptacleId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridObject {
    pub id: ObjectId,
    pub kind: ObjectKind,
    pub color: Color,
    /// `None` while the object is held by the agent.
    pub pos: Option<Pos>,
    /// Only meaningful for doors.
    #[serde(default)]
    pub open: bool,
}

impl GridObject {
    pub fn describe(&self) -> String {
        format!("{} {}", self.color.name(), self.kind.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Receptacle {
    pub id: ReceptacleId,
    pub kind: ReceptacleKind,
    pub pos: Pos,
}

/// Full symbolic state. `completed` counts the sub-tasks of the active task
/// finished so far and `closest` is the smallest Manhattan distance to the
/// current sub-task's target reached since that sub-task became current
/// (`None` once every sub-task is done). Both are part of the state
/// so that `step` and the shaped reward stay pure functions of the
/// transition.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridState {
    pub width: i32,
    pub height: i32,
    pub agent: Pos,
    pub inventory: Option<ObjectId>,
    pub objects: Vec<GridObject>,
    pub receptacles: Vec<Receptacle>,
    #[serde(default)]
    pub completed: u8,
    #[serde(default)]
    pub closest: Option<u32>,
}

/// Neighbor scan order used by the interaction rules: the agent's own cell
/// first, then up, down, left, right.
pub const INTERACTION_ORDER: [(i32, i32); 5] = [(0, 0), (0, -1), (0, 1), (-1, 0), (1, 0)];

impl GridState {
    pub fn in_bounds(&self, p: Pos) -> bool {
        p.x >= 0 && p.y >= 0 && p.x < self.width && p.y < self.height
    }

    pub fn object(&self, id: ObjectId) -> Option<&GridObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_mut(&mut self, id: ObjectId) -> Option<&mut GridObject> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    pub fn receptacle(&self, id: ReceptacleId) -> Option<&Receptacle> {
        self.receptacles.iter().find(|r| r.id == id)
    }

    pub fn object_at(&self, p: Pos) -> Option<&GridObject> {
        self.objects.iter().find(|o| o.pos == Some(p))
    }

    pub fn receptacle_at(&self, p: Pos) -> Option<&Receptacle> {
        self.receptacles.iter().find(|r| r.pos == p)
    }

    /// Receptacle cells are always walkable, even when something was placed
    /// on them; any other cell holding an object blocks movement.
    pub fn walkable(&self, p: Pos) -> bool {
        self.in_bounds(p) && (self.receptacle_at(p).is_some() || self.object_at(p).is_none())
    }

    /// Cells holding nothing at all.
    pub fn free_cells(&self) -> Vec<Pos> {
        let mut cells = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let p = Pos::new(x, y);
                if self.object_at(p).is_none() && self.receptacle_at(p).is_none() {
                    cells.push(p);
                }
            }
        }
        cells
    }

    fn first_in_order<T>(&self, agent: Pos, f: impl FnMut(Pos) -> Option<T>) -> Option<T> {
        INTERACTION_ORDER
            .iter()
            .map(|&d| agent.offset(d))
            .filter(|&p| self.in_bounds(p))
            .find_map(f)
    }

    /// Object that `pick` would take if the agent stood at `agent`.
    pub fn pick_target_from(&self, agent: Pos) -> Option<ObjectId> {
        self.first_in_order(agent, |p| {
            self.object_at(p).filter(|o| o.kind.pickable()).map(|o| o.id)
        })
    }

    /// Receptacle that `place` would use if the agent stood at `agent`.
    pub fn place_target_from(&self, agent: Pos) -> Option<ReceptacleId> {
        self.first_in_order(agent, |p| self.receptacle_at(p).map(|r| r.id))
    }

    /// Door that `toggle` would flip if the agent stood at `agent`.
    pub fn toggle_target_from(&self, agent: Pos) -> Option<ObjectId> {
        self.first_in_order(agent, |p| {
            self.object_at(p).filter(|o| o.kind == ObjectKind::Door).map(|o| o.id)
        })
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.in_bounds(self.agent) {
            return Err(format!("agent {} out of bounds", self.agent));
        }
        let mut seen = std::collections::HashSet::new();
        for o in &self.objects {
            match o.pos {
                Some(p) => {
                    if !self.in_bounds(p) {
                        return Err(format!("object {} at {p} out of bounds", o.id));
                    }
                    if !seen.insert(p) {
                        return Err(format!("two objects share cell {p}"));
                    }
                    if self.inventory == Some(o.id) {
                        return Err(format!("held object {} has a grid position", o.id));
                    }
                }
                None if self.inventory != Some(o.id) => {
                    return Err(format!("object {} has no position but is not held", o.id));
                }
                None => {}
            }
        }
        for r in &self.receptacles {
            if !self.in_bounds(r.pos) {
                return Err(format!("receptacle {} out of bounds", r.id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SubTask {
    Goto { receptacle: ReceptacleId },
    Pick { object: ObjectId },
    Place { object: ObjectId, receptacle: ReceptacleId },
    Toggle { door: ObjectId },
}

impl SubTask {
    pub fn kind_name(&self) -> &'static str {
        match self {
            SubTask::Goto { .. } => "goto",
            SubTask::Pick { .. } => "pick",
            SubTask::Place { .. } => "place",
            SubTask::Toggle { .. } => "toggle",
        }
    }

    /// Whether the transition `state -> next` accomplishes this sub-task.
    pub fn achieved_by(&self, state: &GridState, next: &GridState) -> bool {
        match *self {
            SubTask::Goto { receptacle } => state
                .receptacle(receptacle)
                .is_some_and(|r| state.agent != r.pos && next.agent == r.pos),
            SubTask::Pick { object } => {
                state.inventory != Some(object) && next.inventory == Some(object)
            }
            SubTask::Place { object, receptacle } => {
                let Some(r) = state.receptacle(receptacle) else {
                    return false;
                };
                let before = state.object(object).and_then(|o| o.pos);
                let after = next.object(object).and_then(|o| o.pos);
                before != Some(r.pos) && after == Some(r.pos)
            }
            SubTask::Toggle { door } => match (state.object(door), next.object(door)) {
                (Some(a), Some(b)) => a.open != b.open,
                _ => false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub subtasks: Vec<SubTask>,
    pub init_state: GridState,
}

impl TaskSpec {
    pub fn len(&self) -> usize {
        self.subtasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subtasks.is_empty()
    }

    /// Step budget granted to the scripted planner.
    pub fn step_budget(&self) -> usize {
        let s = &self.init_state;
        (s.width * s.height) as usize * (self.subtasks.len() + 1) * 4
    }

    pub fn is_complete(&self, state: &GridState) -> bool {
        state.completed as usize >= self.subtasks.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub width: i32,
    pub height: i32,
    pub cell_px: u32,
    pub object_count: usize,
    pub colors: Vec<Color>,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            width: 8,
            height: 8,
            cell_px: 8,
            object_count: 4,
            colors: Color::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::Config(m));
        if !(4..=32).contains(&self.width) || !(4..=32).contains(&self.height) {
            return bad(format!("width/height must be in [4, 32], got {}x{}", self.width, self.height));
        }
        if self.cell_px == 0 || !self.cell_px.is_multiple_of(8) {
            return bad(format!("cell_px must be a positive multiple of 8, got {}", self.cell_px));
        }
        if self.colors.is_empty() {
            return bad("colors must not be empty".into());
        }
        let mut colors = self.colors.clone();
        colors.sort();
        colors.dedup();
        if colors.len() != self.colors.len() {
            return bad("colors must be unique".into());
        }
        let kinds = ObjectKind::ALL.len() * self.colors.len();
        if self.object_count == 0 || self.object_count > kinds {
            return bad(format!("object_count must be in [1, {kinds}], got {}", self.object_count));
        }
        let cells = (self.width * self.height) as usize;
        if self.object_count + 3 > cells / 2 {
            return bad(format!("{} objects do not fit comfortably on {cells} cells", self.object_count));
        }
        Ok(())
    }
}
