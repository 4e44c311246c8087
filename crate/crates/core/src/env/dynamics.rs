use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Action, GridState, Pos, SubTask, TaskSpec};

/// Reward for finishing the current sub-task.
pub const COMPLETION_REWARD: f64 = 1.0;
/// Reward for moving strictly closer to the current sub-task target.
pub const PROGRESS_REWARD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: GridState,
    pub shaped_reward: f64,
    pub subtasks_completed: usize,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Fixed,
    Randomized,
}

impl InitMode {
    pub fn name(self) -> &'static str {
        match self {
            InitMode::Fixed => "fixed",
            InitMode::Randomized => "randomized",
        }
    }
}

impl std::str::FromStr for InitMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fixed" => Ok(InitMode::Fixed),
            "randomized" | "random" => Ok(InitMode::Randomized),
            other => Err(format!("unknown init mode {other:?} (expected fixed|randomized)")),
        }
    }
}

/// Initial state of an episode. Randomized mode only moves the agent, to a
/// uniformly drawn free cell.
pub fn reset<R: Rng + ?Sized>(task: &TaskSpec, mode: InitMode, rng: &mut R) -> GridState {
    let mut state = task.init_state.clone();
    if mode == InitMode::Randomized {
        let cells = state.free_cells();
        if let Some(&p) = cells.choose(rng) {
            state.agent = p;
        }
    }
    restart(task, &mut state);
    state
}

/// Applies one action. Blocked moves and interactions without a valid target
/// leave the state unchanged.
pub fn step(state: &GridState, task: &TaskSpec, action: Action) -> StepOutcome {
    let mut next = state.clone();
    match action {
        Action::Up | Action::Down | Action::Left | Action::Right => {
            let target = state.agent.offset(action.delta().expect("movement action"));
            if state.walkable(target) {
                next.agent = target;
            }
        }
        Action::Pick => {
            if state.inventory.is_none() {
                if let Some(id) = state.pick_target_from(state.agent) {
                    if let Some(o) = next.object_mut(id) {
                        o.pos = None;
                    }
                    next.inventory = Some(id);
                }
            }
        }
        Action::Place => {
            if let (Some(held), Some(rid)) = (state.inventory, state.place_target_from(state.agent)) {
                let rpos = state.receptacle(rid).map(|r| r.pos).expect("receptacle exists");
                if state.object_at(rpos).is_none() {
                    if let Some(o) = next.object_mut(held) {
                        o.pos = Some(rpos);
                    }
                    next.inventory = None;
                }
            }
        }
        Action::Toggle => {
            if let Some(id) = state.toggle_target_from(state.agent) {
                if let Some(o) = next.object_mut(id) {
                    o.open = !o.open;
                }
            }
        }
    }

    let current = state.completed as usize;
    if let Some(sub) = task.subtasks.get(current) {
        if sub.achieved_by(state, &next) {
            next.completed += 1;
        }
    }
    let shaped = shaped_reward(task, state, action, &next);
    next.closest = if next.completed > state.completed {
        target_distance(task, &next)
    } else {
        task.subtasks
            .get(current)
            .and_then(|sub| subtask_target(sub, state))
            .map(|t| record(state, t).min(next.agent.manhattan(t) as u32))
    };
    let completed = next.completed as usize;
    StepOutcome {
        done: completed >= task.subtasks.len(),
        subtasks_completed: completed,
        shaped_reward: shaped,
        next_state: next,
    }
}

/// Cell the agent should approach for a sub-task, as seen in `state`.
pub fn subtask_target(sub: &SubTask, state: &GridState) -> Option<Pos> {
    match *sub {
        SubTask::Goto { receptacle } | SubTask::Place { receptacle, .. } => {
            state.receptacle(receptacle).map(|r| r.pos)
        }
        SubTask::Pick { object } => state.object(object).and_then(|o| o.pos),
        SubTask::Toggle { door } => state.object(door).and_then(|o| o.pos),
    }
}

/// Distance from the agent to the target of the sub-task it is on, if any.
pub fn target_distance(task: &TaskSpec, state: &GridState) -> Option<u32> {
    let sub = task.subtasks.get(state.completed as usize)?;
    subtask_target(sub, state).map(|t| state.agent.manhattan(t) as u32)
}

/// Clears progress and starts the distance record afresh.
pub fn restart(task: &TaskSpec, state: &mut GridState) {
    state.completed = 0;
    state.closest = target_distance(task, state);
}

fn record(state: &GridState, target: Pos) -> u32 {
    state.closest.unwrap_or(state.agent.manhattan(target) as u32)
}

/// Hidden ground-truth reward: 1.0 when the transition completes a sub-task,
/// 0.3 when it brings the agent strictly closer (Manhattan) to the current
/// sub-task target than it has been since that sub-task became current,
/// 0.0 otherwise. Walking away and back therefore earns nothing.
pub fn shaped_reward(task: &TaskSpec, state: &GridState, _action: Action, next: &GridState) -> f64 {
    if next.completed > state.completed {
        return COMPLETION_REWARD;
    }
    let Some(sub) = task.subtasks.get(state.completed as usize) else {
        return 0.0;
    };
    match subtask_target(sub, state) {
        Some(target) if (next.agent.manhattan(target) as u32) < record(state, target) => PROGRESS_REWARD,
        _ => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Color, GridObject, ObjectKind, Receptacle, ReceptacleKind};

    fn board() -> GridState {
        GridState {
            width: 8,
            height: 8,
            agent: Pos::new(0, 0),
            inventory: None,
            objects: vec![
                GridObject { id: 0, kind: ObjectKind::Key, color: Color::Red, pos: Some(Pos::new(2, 0)), open: false },
                GridObject { id: 1, kind: ObjectKind::Door, color: Color::Blue, pos: Some(Pos::new(5, 5)), open: false },
            ],
            receptacles: vec![
                Receptacle { id: 0, kind: ReceptacleKind::Table, pos: Pos::new(0, 4) },
                Receptacle { id: 1, kind: ReceptacleKind::Bin, pos: Pos::new(7, 7) },
            ],
            completed: 0,
            closest: None,
        }
    }

    fn task(subtasks: Vec<SubTask>) -> TaskSpec {
        let mut t = TaskSpec { task_id: "t".into(), subtasks, init_state: board() };
        let mut s = t.init_state.clone();
        restart(&t, &mut s);
        t.init_state = s;
        t
    }

    #[test]
    fn wall_bump_is_noop_with_zero_reward() {
        let t = task(vec![SubTask::Pick { object: 0 }]);
        let out = step(&t.init_state, &t, Action::Left);
        assert_eq!(out.next_state, t.init_state);
        assert_eq!(out.shaped_reward, 0.0);
        assert!(!out.done);
    }

    #[test]
    fn moving_into_object_is_blocked() {
        let t = task(vec![SubTask::Pick { object: 0 }]);
        let mut s = t.init_state.clone();
        s.agent = Pos::new(1, 0);
        let out = step(&s, &t, Action::Right);
        assert_eq!(out.next_state.agent, Pos::new(1, 0));
    }

    #[test]
    fn approaching_target_earns_progress_reward() {
        let t = task(vec![SubTask::Pick { object: 0 }]);
        let out = step(&t.init_state, &t, Action::Right);
        assert_eq!(out.next_state.agent, Pos::new(1, 0));
        assert_eq!(out.shaped_reward, PROGRESS_REWARD);
        let back = step(&out.next_state, &t, Action::Left);
        assert_eq!(back.shaped_reward, 0.0);
    }

    #[test]
    fn distance_five_to_four_is_progress() {
        let t = task(vec![SubTask::Goto { receptacle: 1 }]);
        let mut s = t.init_state.clone();
        s.agent = Pos::new(7, 2);
        assert_eq!(s.agent.manhattan(Pos::new(7, 7)), 5);
        let out = step(&s, &t, Action::Down);
        assert_eq!(out.next_state.agent.manhattan(Pos::new(7, 7)), 4);
        assert_eq!(out.shaped_reward, 0.3);
    }

    #[test]
    fn returning_to_the_record_distance_earns_nothing() {
        let t = task(vec![SubTask::Goto { receptacle: 1 }]);
        let mut s = t.init_state.clone();
        s.agent = Pos::new(7, 2);
        restart(&t, &mut s);
        assert_eq!(s.closest, Some(5));
        let away = step(&s, &t, Action::Up);
        assert_eq!(away.shaped_reward, 0.0);
        assert_eq!(away.next_state.closest, Some(5));
        let back = step(&away.next_state, &t, Action::Down);
        assert_eq!(back.shaped_reward, 0.0);
        let record = step(&back.next_state, &t, Action::Down);
        assert_eq!(record.shaped_reward, PROGRESS_REWARD);
        assert_eq!(record.next_state.closest, Some(4));
    }

    #[test]
    fn completion_moves_the_record_to_the_next_target() {
        let t = task(vec![SubTask::Pick { object: 0 }, SubTask::Goto { receptacle: 0 }]);
        let mut s = t.init_state.clone();
        s.agent = Pos::new(1, 0);
        let out = step(&s, &t, Action::Pick);
        assert_eq!(out.subtasks_completed, 1);
        assert_eq!(out.next_state.closest, Some(Pos::new(1, 0).manhattan(Pos::new(0, 4)) as u32));
        assert_eq!(out.next_state.closest, target_distance(&t, &out.next_state));
        let done = task(vec![SubTask::Pick { object: 0 }]);
        let fin = step(&s, &done, Action::Pick);
        assert!(fin.done);
        assert_eq!(fin.next_state.closest, None);
    }

    #[test]
    fn pick_adjacent_completes_and_finishes_episode() {
        let t = task(vec![SubTask::Pick { object: 0 }]);
        let mut s = t.init_state.clone();
        s.agent = Pos::new(1, 0);
        let out = step(&s, &t, Action::Pick);
        assert_eq!(out.next_state.inventory, Some(0));
        assert_eq!(out.next_state.object(0).unwrap().pos, None);
        assert_eq!(out.subtasks_completed, 1);
        assert_eq!(out.shaped_reward, 1.0);
        assert!(out.done);
        out.next_state.validate().unwrap();
    }

    #[test]
    fn pick_of_non_current_object_does_not_advance() {
        let t = task(vec![SubTask::Goto { receptacle: 0 }, SubTask::Pick { object: 0 }]);
        let mut s = t.init_state.clone();
        s.agent = Pos::new(1, 0);
        let out = step(&s, &t, Action::Pick);
        assert_eq!(out.next_state.inventory, Some(0));
        assert_eq!(out.subtasks_completed, 0);
    }

    #[test]
    fn place_and_toggle_rules() {
        let t = task(vec![
            SubTask::Pick { object: 0 },
            SubTask::Place { object: 0, receptacle: 0 },
            SubTask::Toggle { door: 1 },
        ]);
        let mut s = t.init_state.clone();
        s.agent = Pos::new(1, 0);
        let s = step(&s, &t, Action::Pick).next_state;
        // place with no receptacle nearby is a no-op
        let same = step(&s, &t, Action::Place);
        assert_eq!(same.next_state, s);
        let mut s = s;
        s.agent = Pos::new(0, 3);
        let placed = step(&s, &t, Action::Place);
        assert_eq!(placed.next_state.object(0).unwrap().pos, Some(Pos::new(0, 4)));
        assert_eq!(placed.subtasks_completed, 2);
        let mut s = placed.next_state;
        // the table stays walkable with the key on it
        let onto = step(&s, &t, Action::Down);
        assert_eq!(onto.next_state.agent, Pos::new(0, 4));
        s.agent = Pos::new(5, 4);
        let toggled = step(&s, &t, Action::Toggle);
        assert!(toggled.next_state.object(1).unwrap().open);
        assert!(toggled.done);
    }

    #[test]
    fn completed_is_monotone() {
        let t = task(vec![SubTask::Pick { object: 0 }, SubTask::Goto { receptacle: 1 }]);
        let mut s = t.init_state.clone();
        let mut last = 0;
        for a in [Action::Right, Action::Pick, Action::Down, Action::Left, Action::Pick, Action::Place] {
            let out = step(&s, &t, a);
            assert!(out.subtasks_completed >= last);
            last = out.subtasks_completed;
            s = out.next_state;
        }
    }

    #[test]
    fn fixed_reset_returns_init_state() {
        let t = task(vec![SubTask::Pick { object: 0 }]);
        let mut rng = crate::seed::rng(3);
        assert_eq!(reset(&t, InitMode::Fixed, &mut rng), t.init_state);
    }

    #[test]
    fn randomized_reset_covers_every_free_cell() {
        let t = task(vec![SubTask::Pick { object: 0 }]);
        let free = t.init_state.free_cells();
        let mut hits = std::collections::HashMap::new();
        let mut rng = crate::seed::rng(11);
        for _ in 0..1000 {
            let s = reset(&t, InitMode::Randomized, &mut rng);
            assert_eq!(s.objects, t.init_state.objects);
            *hits.entry(s.agent).or_insert(0usize) += 1;
        }
        for p in &free {
            assert!(hits.get(p).copied().unwrap_or(0) > 0, "cell {p} never drawn");
        }
        assert_eq!(hits.len(), free.len());
    }

    #[test]
    fn randomized_reset_is_reproducible() {
        let t = task(vec![SubTask::Pick { object: 0 }]);
        let a = reset(&t, InitMode::Randomized, &mut crate::seed::rng(5));
        let b = reset(&t, InitMode::Randomized, &mut crate::seed::rng(5));
        assert_eq!(a, b);
    }
}
