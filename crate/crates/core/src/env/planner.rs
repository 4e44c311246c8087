//! Scripted demonstrator: a greedy planner that solves sub-tasks one at a
//! time by breadth-first search over walkable cells.

use std::collections::VecDeque;

use rand::Rng;

use super::{restart, step, Action, EnvError, GridState, Pos, SubTask, TaskSpec};

/// States `s_0..s_T` and actions `a_0..a_{T-1}` of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub states: Vec<GridState>,
    pub actions: Vec<Action>,
    pub shaped_rewards: Vec<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Breadth-first search from `start` to the nearest cell satisfying `goal`.
/// Returns the path length and the first move (`None` when `start` itself is
/// a goal). Expansion order is fixed, so ties break deterministically.
fn bfs(state: &GridState, start: Pos, goal: impl Fn(Pos) -> bool) -> Option<(usize, Option<Action>)> {
    if goal(start) {
        return Some((0, None));
    }
    let w = state.width as usize;
    let mut seen = vec![false; w * state.height as usize];
    let idx = |p: Pos| p.y as usize * w + p.x as usize;
    seen[idx(start)] = true;
    let mut queue = VecDeque::new();
    for a in Action::MOVES {
        let p = start.offset(a.delta().unwrap());
        if state.walkable(p) && !seen[idx(p)] {
            seen[idx(p)] = true;
            queue.push_back((p, 1usize, a));
        }
    }
    while let Some((p, d, first)) = queue.pop_front() {
        if goal(p) {
            return Some((d, Some(first)));
        }
        for a in Action::MOVES {
            let q = p.offset(a.delta().unwrap());
            if state.walkable(q) && !seen[idx(q)] {
                seen[idx(q)] = true;
                queue.push_back((q, d + 1, first));
            }
        }
    }
    None
}

/// Walking distance from every cell to the nearest cell satisfying `ready`,
/// indexed `y * width + x`. Unwalkable or cut-off cells are `None`.
pub fn distance_field(state: &GridState, ready: impl Fn(Pos) -> bool) -> Vec<Option<u32>> {
    let w = state.width as usize;
    let mut dist = vec![None; w * state.height as usize];
    let idx = |p: Pos| p.y as usize * w + p.x as usize;
    let mut queue = VecDeque::new();
    for y in 0..state.height {
        for x in 0..state.width {
            let p = Pos::new(x, y);
            if state.walkable(p) && ready(p) {
                dist[idx(p)] = Some(0);
                queue.push_back(p);
            }
        }
    }
    while let Some(p) = queue.pop_front() {
        let d = dist[idx(p)].expect("queued cells have a distance");
        for a in Action::MOVES {
            let q = p.offset(a.delta().unwrap());
            if state.walkable(q) && dist[idx(q)].is_none() {
                dist[idx(q)] = Some(d + 1);
                queue.push_back(q);
            }
        }
    }
    dist
}

/// Shortest walking distance from the agent to `target`.
pub fn bfs_distance(state: &GridState, target: Pos) -> Option<usize> {
    bfs(state, state.agent, |p| p == target).map(|(d, _)| d)
}

/// Next action of the greedy planner for the current sub-task, or `None`
/// when the task is complete or the target is unreachable.
pub fn plan_action(task: &TaskSpec, state: &GridState) -> Option<Action> {
    let sub = task.subtasks.get(state.completed as usize)?;
    match *sub {
        SubTask::Goto { receptacle } => {
            let target = state.receptacle(receptacle)?.pos;
            if state.agent == target {
                // Already standing on it: completion needs an arrival, so step off first.
                return Action::MOVES
                    .into_iter()
                    .find(|a| state.walkable(state.agent.offset(a.delta().unwrap())));
            }
            bfs(state, state.agent, |p| p == target).and_then(|(_, a)| a)
        }
        SubTask::Pick { object } => {
            approach(state, |p| state.pick_target_from(p) == Some(object), Action::Pick)
        }
        SubTask::Place { receptacle, .. } => {
            approach(state, |p| state.place_target_from(p) == Some(receptacle), Action::Place)
        }
        SubTask::Toggle { door } => {
            approach(state, |p| state.toggle_target_from(p) == Some(door), Action::Toggle)
        }
    }
}

fn approach(state: &GridState, ready: impl Fn(Pos) -> bool, interact: Action) -> Option<Action> {
    match bfs(state, state.agent, ready)? {
        (_, None) => Some(interact),
        (_, Some(first)) => Some(first),
    }
}

/// Rolls out the scripted planner. Before each planner action, with
/// probability `suboptimality` a random movement is inserted as a detour;
/// moves never alter objects, so the task remains solvable.
pub fn scripted_rollout<R: Rng + ?Sized>(
    task: &TaskSpec,
    suboptimality: f64,
    rng: &mut R,
) -> Result<Episode, EnvError> {
    let budget = task.step_budget();
    let mut state = task.init_state.clone();
    restart(task, &mut state);
    let mut episode = Episode { states: vec![state.clone()], actions: Vec::new(), shaped_rewards: Vec::new() };

    let push = |episode: &mut Episode, state: &mut GridState, action: Action| {
        let out = step(state, task, action);
        episode.actions.push(action);
        episode.shaped_rewards.push(out.shaped_reward);
        episode.states.push(out.next_state.clone());
        *state = out.next_state;
        out.done
    };

    while !task.is_complete(&state) {
        if episode.actions.len() >= budget {
            return Err(EnvError::StepBudget { task_id: task.task_id.clone(), budget });
        }
        if suboptimality > 0.0 && rng.random::<f64>() < suboptimality {
            let detour = Action::MOVES[rng.random_range(0..Action::MOVES.len())];
            if push(&mut episode, &mut state, detour) {
                break;
            }
            if episode.actions.len() >= budget {
                return Err(EnvError::StepBudget { task_id: task.task_id.clone(), budget });
            }
        }
        let action = plan_action(task, &state).ok_or_else(|| EnvError::Unreachable {
            task_id: task.task_id.clone(),
            index: state.completed as usize,
        })?;
        push(&mut episode, &mut state, action);
    }
    Ok(episode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_task, EnvConfig};

    #[test]
    fn optimal_goto_rollout_matches_bfs_distance() {
        let cfg = EnvConfig::default();
        let mut checked = 0;
        for seed in 0..200u64 {
            let task = generate_task(&cfg, seed, 1).unwrap();
            let SubTask::Goto { receptacle } = task.subtasks[0] else { continue };
            let target = task.init_state.receptacle(receptacle).unwrap().pos;
            let ep = scripted_rollout(&task, 0.0, &mut crate::seed::rng(seed)).unwrap();
            let oracle = bfs_distance(&task.init_state, target).unwrap();
            assert_eq!(ep.len(), oracle, "seed {seed}");
            // every shortest path step on an open board is a Manhattan step
            if oracle as i32 == task.init_state.agent.manhattan(target) {
                assert!(ep.shaped_rewards[..ep.len() - 1].iter().all(|&r| r == 0.3));
            }
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn suboptimal_rollouts_still_complete() {
        let cfg = EnvConfig::default();
        for seed in 0..50u64 {
            let task = generate_task(&cfg, seed, 1 + (seed as usize % 6)).unwrap();
            let ep = scripted_rollout(&task, 0.5, &mut crate::seed::rng(seed)).unwrap();
            let last = ep.states.last().unwrap();
            assert!(task.is_complete(last));
            let ones = ep.shaped_rewards.iter().filter(|&&r| r == 1.0).count();
            assert_eq!(ones, task.len());
        }
    }

    #[test]
    fn rollout_is_deterministic() {
        let cfg = EnvConfig::default();
        let task = generate_task(&cfg, 9, 4).unwrap();
        let a = scripted_rollout(&task, 0.3, &mut crate::seed::rng(1)).unwrap();
        let b = scripted_rollout(&task, 0.3, &mut crate::seed::rng(1)).unwrap();
        assert_eq!(a, b);
    }
}
