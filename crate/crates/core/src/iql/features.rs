//! Symbolic state and instruction features for the networks.

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureEncoder;
use crate::env::{distance_field, instruction_vocabulary, Action, Color, GridState, ObjectKind, Pos, ReceptacleKind, MAX_SUBTASKS};

const RECEPTACLES: [ReceptacleKind; 2] = [ReceptacleKind::Table, ReceptacleKind::Bin];
/// Sub-task kind one-hot, matched object, matched receptacle, current target.
const GOAL: usize = 4 + 6 + 6 + 7 + 1;

const VERBS: [(&str, usize); 12] = [
    ("go", 0),
    ("walk", 0),
    ("move", 0),
    ("pick", 1),
    ("grab", 1),
    ("take", 1),
    ("put", 2),
    ("place", 2),
    ("drop", 2),
    ("toggle", 3),
    ("use", 3),
    ("switch", 3),
];

/// What one instruction clause refers to, by token matching.
#[derive(Debug, Default, Clone, Copy, PartialEq)]
struct Clause {
    kind: Option<usize>,
    object: Option<(ObjectKind, Option<Color>)>,
    receptacle: Option<ReceptacleKind>,
}

fn parse_clause<'a>(tokens: impl Iterator<Item = &'a str>) -> Clause {
    let mut c = Clause::default();
    let mut color = None;
    for tok in tokens {
        if let Some(&(_, k)) = VERBS.iter().find(|(v, _)| *v == tok) {
            c.kind.get_or_insert(k);
        } else if let Some(&col) = Color::ALL.iter().find(|col| col.name() == tok) {
            color = Some(col);
        } else if let Some(&k) = ObjectKind::ALL.iter().find(|k| k.name() == tok) {
            c.object.get_or_insert((k, color));
        } else if let Some(&r) = RECEPTACLES.iter().find(|r| r.name() == tok) {
            c.receptacle.get_or_insert(r);
        }
    }
    c
}

/// Clauses of an instruction, split at "then".
fn clauses(text: &str) -> Vec<Clause> {
    let lower = text.to_lowercase();
    let toks: Vec<&str> = lower.split_whitespace().collect();
    toks.split(|t| *t == "then").map(|c| parse_clause(c.iter().copied())).collect()
}

/// Agent-relative state features and clause-wise token counts.
///
/// State: the four blocked-move flags, a one-hot of finished
/// sub-tasks, an empty-hands flag and the agent's absolute position.
/// Last, a goal block for the instruction clause the agent is on (clause
/// `completed`): its verb class, the object and receptacle its tokens
/// name (found, dx, dy, reach, held/on, open/occupied), the offset to the
/// cell to approach next, whether the clause can be finished from here,
/// flags for the moves that shorten the walk around obstacles, and the
/// distance lost since the closest approach.
///
/// Instruction: the text is split into clauses at "then"; clause `k`
/// (the last slot absorbs any overflow) gets its own count vector over the
/// vocabulary plus one out-of-vocabulary bucket.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridEncoder {
    pub width: i32,
    pub height: i32,
    pub vocab: Vec<String>,
    pub max_clauses: usize,
}

impl GridEncoder {
    pub fn new(width: i32, height: i32, max_clauses: usize) -> Self {
        GridEncoder {
            width,
            height,
            vocab: instruction_vocabulary().into_iter().map(String::from).collect(),
            max_clauses: max_clauses.clamp(1, MAX_SUBTASKS),
        }
    }

    fn token_slot(&self, tok: &str) -> usize {
        self.vocab.iter().position(|v| v == tok).unwrap_or(self.vocab.len())
    }

    fn encode_goal(&self, s: &GridState, instruction: &str, f: &mut [f32]) {
        let Some(c) = clauses(instruction).get(s.completed as usize).copied() else {
            return;
        };
        let agent = s.agent;
        if let Some(k) = c.kind {
            f[k] = 1.0;
        }
        let object = c.object.and_then(|(kind, color)| {
            s.objects.iter().find(|o| o.kind == kind && color.is_none_or(|col| o.color == col))
        });
        let mut object_pos = None;
        if let Some(o) = object {
            let held = s.inventory == Some(o.id);
            f[4] = 1.0;
            if let Some(p) = o.pos {
                let (dx, dy) = self.rel(agent, p);
                f[5] = dx;
                f[6] = dy;
                f[7] = (agent.manhattan(p) <= 1) as u8 as f32;
                object_pos = Some(p);
            }
            f[8] = held as u8 as f32;
            f[9] = o.open as u8 as f32;
        }
        let receptacle = c.receptacle.and_then(|kind| s.receptacles.iter().find(|r| r.kind == kind));
        if let Some(r) = receptacle {
            let (dx, dy) = self.rel(agent, r.pos);
            f[10] = 1.0;
            f[11] = dx;
            f[12] = dy;
            f[13] = (agent == r.pos) as u8 as f32;
            f[14] = (agent.manhattan(r.pos) <= 1) as u8 as f32;
            f[15] = s.object_at(r.pos).is_some() as u8 as f32;
        }
        // a place clause heads for the object until it is in hand
        let holding = object.is_some_and(|o| s.inventory == Some(o.id));
        let target = match c.kind {
            Some(0) => receptacle.map(|r| r.pos),
            Some(2) if holding => receptacle.map(|r| r.pos),
            _ => object_pos,
        };
        if let Some(p) = target {
            let (dx, dy) = self.rel(agent, p);
            f[16] = dx;
            f[17] = dy;
            // cells from which the clause can be finished, then the walking
            // distance to them around obstacles
            let ready: Box<dyn Fn(Pos) -> bool> = match (c.kind, object, receptacle) {
                (Some(0), _, Some(r)) => Box::new(move |q| q == r.pos),
                (Some(2), _, Some(r)) if holding => Box::new(move |q| s.place_target_from(q) == Some(r.id)),
                (Some(3), Some(o), _) => Box::new(move |q| s.toggle_target_from(q) == Some(o.id)),
                (_, Some(o), _) => Box::new(move |q| s.pick_target_from(q) == Some(o.id)),
                _ => Box::new(|_| false),
            };
            let field = distance_field(s, ready);
            let at = |q: Pos| {
                s.in_bounds(q).then(|| field[(q.y * self.width + q.x) as usize]).flatten()
            };
            if let Some(here) = at(agent) {
                f[18] = (here == 0) as u8 as f32;
                // which moves shorten the walk, in Action::MOVES order
                for (i, a) in Action::MOVES.into_iter().enumerate() {
                    let next = agent.offset(a.delta().expect("move"));
                    f[19 + i] = at(next).is_some_and(|d| d < here) as u8 as f32;
                }
            }
        }
        // how far the agent has fallen back from its best approach so far
        let scored = match c.kind {
            Some(0) | Some(2) => receptacle.map(|r| r.pos),
            _ => object_pos,
        };
        if let (Some(p), Some(best)) = (scored, s.closest) {
            let gap = agent.manhattan(p) - best as i32;
            f[23] = gap as f32 / (self.width + self.height) as f32;
        }
    }

    fn rel(&self, agent: Pos, p: Pos) -> (f32, f32) {
        let sx = (self.width - 1).max(1) as f32;
        let sy = (self.height - 1).max(1) as f32;
        ((p.x - agent.x) as f32 / sx, (p.y - agent.y) as f32 / sy)
    }
}

impl FeatureEncoder for GridEncoder {
    fn state_dim(&self) -> usize {
        Action::MOVES.len()
            + (MAX_SUBTASKS + 1)
            + 1
            + 2
            + GOAL
    }

    fn instruction_dim(&self) -> usize {
        self.max_clauses * (self.vocab.len() + 1)
    }

    fn encode_state(&self, s: &GridState, instruction: &str, out: &mut Vec<f32>) {
        let start = out.len();
        out.resize(start + self.state_dim(), 0.0);
        let f = &mut out[start..];
        let agent = s.agent;
        let mut off = 0;
        for a in Action::MOVES {
            f[off] = (!s.walkable(agent.offset(a.delta().expect("move")))) as u8 as f32;
            off += 1;
        }
        f[off + (s.completed as usize).min(MAX_SUBTASKS)] = 1.0;
        off += MAX_SUBTASKS + 1;
        f[off] = s.inventory.is_none() as u8 as f32;
        off += 1;
        let sx = (self.width - 1).max(1) as f32;
        let sy = (self.height - 1).max(1) as f32;
        f[off] = agent.x as f32 / sx;
        f[off + 1] = agent.y as f32 / sy;
        off += 2;
        self.encode_goal(s, instruction, &mut f[off..off + GOAL]);
    }

    fn encode_instruction(&self, text: &str, out: &mut Vec<f32>) {
        let start = out.len();
        out.resize(start + self.instruction_dim(), 0.0);
        let width = self.vocab.len() + 1;
        let lower = text.to_lowercase();
        let mut clause = 0;
        for tok in lower.split_whitespace() {
            if tok == "then" {
                clause = (clause + 1).min(self.max_clauses - 1);
                continue;
            }
            out[start + clause * width + self.token_slot(tok)] += 1.0;
        }
    }
}
