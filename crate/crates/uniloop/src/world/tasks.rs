//! Task registry, instruction/chain-of-thought templates, canonical scene
//! sampling, and the scripted oracle controller.

use super::{step, Action, Color, ObjectKind, ObjectSpec, WorldState, STEP_MAX};
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Oracle closes the gripper once within this distance of its grab target
/// (inside the 0.05 grasp radius with margin).
const ORACLE_GRAB_AT: f64 = 0.03;
/// Oracle opens the gripper once within this distance of the socket
/// (inside the 0.04 insert radius with margin).
const ORACLE_RELEASE_AT: f64 = 0.02;
/// Hard per-phase step bound the oracle must respect.
pub const ORACLE_PHASE_BUDGET: usize = 64;

/// One atomic objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Insert { block: Color, socket: Color },
    Press { cover: Color },
}

/// A task is one or two phases executed in order; the two-phase form is the
/// composed variant that never appears in training data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub id: String,
    pub phases: Vec<Phase>,
}

/// The two color families. Every task draws all its colors from one family,
/// and the scene always contains that family's block/socket/cover trio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Seen,
    Unseen,
}

impl Family {
    pub fn trio(self) -> (Color, Color, Color) {
        match self {
            Family::Seen => (Color::Red, Color::Blue, Color::Green),
            Family::Unseen => (Color::Yellow, Color::Purple, Color::Orange),
        }
    }

    fn of(color: Color) -> Family {
        match color {
            Color::Red | Color::Blue | Color::Green => Family::Seen,
            Color::Yellow | Color::Purple | Color::Orange => Family::Unseen,
        }
    }
}

/// Task ids used across the project.
pub const TASK_INSERT_SEEN: &str = "insert_red_blue";
pub const TASK_PRESS_SEEN: &str = "press_green";
pub const TASK_COMPOSED_SEEN: &str = "insert_red_blue+press_green";
pub const TASK_INSERT_UNSEEN: &str = "insert_yellow_purple";
pub const TASK_PRESS_UNSEEN: &str = "press_orange";
pub const TASK_COMPOSED_UNSEEN: &str = "insert_yellow_purple+press_orange";

/// All tasks any template or vocabulary needs to cover.
pub const ALL_TASK_IDS: [&str; 6] = [
    TASK_INSERT_SEEN,
    TASK_PRESS_SEEN,
    TASK_COMPOSED_SEEN,
    TASK_INSERT_UNSEEN,
    TASK_PRESS_UNSEEN,
    TASK_COMPOSED_UNSEEN,
];

impl Task {
    /// Parses ids like `insert_red_blue`, `press_green`, or compositions
    /// joined with `+`. All colors must come from one family.
    pub fn parse(id: &str) -> Result<Task> {
        let phases: Vec<Phase> = id
            .split('+')
            .map(Self::parse_atomic)
            .collect::<Result<_>>()?;
        if phases.is_empty() || phases.len() > 2 {
            return Err(Error::UnknownTask(id.to_string()));
        }
        let fam = Family::of(phase_colors(&phases[0])[0]);
        let uniform = phases
            .iter()
            .flat_map(|p| phase_colors(p))
            .all(|c| Family::of(c) == fam);
        if !uniform {
            return Err(Error::UnknownTask(id.to_string()));
        }
        Ok(Task {
            id: id.to_string(),
            phases,
        })
    }

    fn parse_atomic(part: &str) -> Result<Phase> {
        let words: Vec<&str> = part.split('_').collect();
        match words.as_slice() {
            ["insert", b, s] => {
                let block = Color::parse(b).ok_or_else(|| Error::UnknownTask(part.into()))?;
                let socket = Color::parse(s).ok_or_else(|| Error::UnknownTask(part.into()))?;
                Ok(Phase::Insert { block, socket })
            }
            ["press", c] => {
                let cover = Color::parse(c).ok_or_else(|| Error::UnknownTask(part.into()))?;
                Ok(Phase::Press { cover })
            }
            _ => Err(Error::UnknownTask(part.into())),
        }
    }

    pub fn family(&self) -> Family {
        Family::of(phase_colors(&self.phases[0])[0])
    }

    pub fn is_composed(&self) -> bool {
        self.phases.len() > 1
    }

    /// Natural-language instruction naming every phase.
    pub fn instruction(&self) -> String {
        join_phases(&self.phases, phase_instruction)
    }

    /// Expected scene evolution, one clause per phase.
    pub fn video_cot(&self) -> String {
        join_phases(&self.phases, phase_video_cot)
    }

    /// Motor-program decomposition, one clause per phase.
    pub fn action_cot(&self) -> String {
        join_phases(&self.phases, phase_action_cot)
    }

    /// True once every phase's goal predicate holds.
    pub fn done(&self, state: &WorldState) -> bool {
        self.phases.iter().all(|p| phase_done(p, state))
    }

    /// Diagnostic for composed rollouts: first phase finished, second not.
    pub fn failed_at_transition(&self, state: &WorldState) -> bool {
        self.phases.len() == 2
            && phase_done(&self.phases[0], state)
            && !phase_done(&self.phases[1], state)
    }
}

fn phase_colors(p: &Phase) -> Vec<Color> {
    match p {
        Phase::Insert { block, socket } => vec![*block, *socket],
        Phase::Press { cover } => vec![*cover],
    }
}

fn join_phases(phases: &[Phase], f: impl Fn(&Phase) -> String) -> String {
    phases.iter().map(f).collect::<Vec<_>>().join(" then ")
}

fn phase_instruction(p: &Phase) -> String {
    match p {
        Phase::Insert { block, socket } => format!(
            "insert the {} block into the {} socket",
            block.name(),
            socket.name()
        ),
        Phase::Press { cover } => format!("press the {} cover", cover.name()),
    }
}

fn phase_video_cot(p: &Phase) -> String {
    match p {
        Phase::Insert { block, socket } => format!(
            "the {} block moves to the {} socket and stays inside",
            block.name(),
            socket.name()
        ),
        Phase::Press { cover } => format!("the {} cover flips to pressed", cover.name()),
    }
}

fn phase_action_cot(p: &Phase) -> String {
    match p {
        Phase::Insert { block, socket } => format!(
            "move to the {} block close gripper move to the {} socket open gripper",
            block.name(),
            socket.name()
        ),
        Phase::Press { cover } => {
            format!("move to the {} cover close gripper", cover.name())
        }
    }
}

fn find_object(state: &WorldState, kind: ObjectKind, color: Color) -> Option<&ObjectSpec> {
    state
        .objects
        .iter()
        .find(|o| o.kind == kind && o.color == color)
}

/// Goal predicate for one phase.
pub fn phase_done(phase: &Phase, state: &WorldState) -> bool {
    match phase {
        Phase::Insert { block, socket } => {
            let (Some(b), Some(s)) = (
                find_object(state, ObjectKind::Block, *block),
                find_object(state, ObjectKind::Socket, *socket),
            ) else {
                return false;
            };
            b.inserted_into == Some(s.id)
        }
        Phase::Press { cover } => find_object(state, ObjectKind::Cover, *cover)
            .map(|c| c.pressed)
            .unwrap_or(false),
    }
}

/// FNV-1a over the task id, folded into the seed so every (task, seed) pair
/// has its own random stream.
pub fn scene_stream_seed(task_id: &str, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in task_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed
}

/// Samples the canonical start: the family trio placed uniformly in the
/// margin box with pairwise separation, gripper open and clear of objects.
pub fn canonical_start(task: &Task, seed: u64) -> Result<WorldState> {
    const LO: f64 = 0.12;
    const HI: f64 = 0.88;
    const OBJ_SEP: f64 = 0.16;
    const GRIP_SEP: f64 = 0.10;

    let mut rng = ChaCha8Rng::seed_from_u64(scene_stream_seed(&task.id, seed));
    let (block_c, socket_c, cover_c) = task.family().trio();

    let draw = |rng: &mut ChaCha8Rng| -> (f64, f64) {
        (rng.gen_range(LO..HI), rng.gen_range(LO..HI))
    };
    let far = |a: (f64, f64), b: (f64, f64), min: f64| {
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() >= min
    };

    for _ in 0..1000 {
        let poses = [draw(&mut rng), draw(&mut rng), draw(&mut rng)];
        let gripper = draw(&mut rng);
        let objects_apart = far(poses[0], poses[1], OBJ_SEP)
            && far(poses[0], poses[2], OBJ_SEP)
            && far(poses[1], poses[2], OBJ_SEP);
        let gripper_clear = poses.iter().all(|&p| far(gripper, p, GRIP_SEP));
        if objects_apart && gripper_clear {
            let make = |id, kind, color, pose| ObjectSpec {
                id,
                kind,
                color,
                pose,
                inserted_into: None,
                pressed: false,
            };
            return Ok(WorldState {
                gripper_pose: gripper,
                gripper_closed: false,
                held_object: None,
                objects: vec![
                    make(0, ObjectKind::Block, block_c, poses[0]),
                    make(1, ObjectKind::Socket, socket_c, poses[1]),
                    make(2, ObjectKind::Cover, cover_c, poses[2]),
                ],
                step_index: 0,
            });
        }
    }
    Err(Error::Unachievable {
        task: task.id.clone(),
        reason: "scene sampling failed to separate objects".into(),
    })
}

fn toward(from: (f64, f64), to: (f64, f64), grip: f64) -> Action {
    Action {
        dx: (to.0 - from.0).clamp(-STEP_MAX, STEP_MAX),
        dy: (to.1 - from.1).clamp(-STEP_MAX, STEP_MAX),
        grip,
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Greedy proportional controller toward the current subgoal of the first
/// unfinished phase. Total per-phase cost is bounded well under
/// [`ORACLE_PHASE_BUDGET`] from any canonical start.
pub fn oracle_policy(task: &Task, state: &WorldState) -> Result<Action> {
    let grip_hold = if state.gripper_closed { 1.0 } else { 0.0 };
    let Some(phase) = task.phases.iter().find(|p| !phase_done(p, state)) else {
        return Ok(Action::new(0.0, 0.0, grip_hold));
    };

    match phase {
        Phase::Insert { block, socket } => {
            let b = find_object(state, ObjectKind::Block, *block).ok_or_else(|| {
                Error::Unachievable {
                    task: task.id.clone(),
                    reason: format!("no {} block in scene", block.name()),
                }
            })?;
            let s = find_object(state, ObjectKind::Socket, *socket).ok_or_else(|| {
                Error::Unachievable {
                    task: task.id.clone(),
                    reason: format!("no {} socket in scene", socket.name()),
                }
            })?;
            if state.held_object == Some(b.id) {
                if dist(state.gripper_pose, s.pose) <= ORACLE_RELEASE_AT {
                    Ok(Action::new(0.0, 0.0, 0.0))
                } else {
                    Ok(toward(state.gripper_pose, s.pose, 1.0))
                }
            } else if state.gripper_closed {
                // Closed on nothing useful: release before approaching.
                Ok(Action::new(0.0, 0.0, 0.0))
            } else if dist(state.gripper_pose, b.pose) <= ORACLE_GRAB_AT {
                Ok(Action::new(0.0, 0.0, 1.0))
            } else {
                Ok(toward(state.gripper_pose, b.pose, 0.0))
            }
        }
        Phase::Press { cover } => {
            let c = find_object(state, ObjectKind::Cover, *cover).ok_or_else(|| {
                Error::Unachievable {
                    task: task.id.clone(),
                    reason: format!("no {} cover in scene", cover.name()),
                }
            })?;
            if state.gripper_closed {
                // Need a fresh close edge to toggle; open first.
                Ok(Action::new(0.0, 0.0, 0.0))
            } else if dist(state.gripper_pose, c.pose) <= ORACLE_GRAB_AT {
                Ok(Action::new(0.0, 0.0, 1.0))
            } else {
                Ok(toward(state.gripper_pose, c.pose, 0.0))
            }
        }
    }
}

/// Runs the oracle to completion; returns the trajectory of states and the
/// f32-quantized actions taken. Fails if any phase exceeds its budget.
pub fn run_oracle(task: &Task, start: WorldState) -> Result<(Vec<WorldState>, Vec<Action>)> {
    let budget = ORACLE_PHASE_BUDGET * task.phases.len();
    let mut states = vec![start];
    let mut actions = Vec::new();
    for _ in 0..budget {
        let current = states.last().unwrap();
        if task.done(current) {
            return Ok((states, actions));
        }
        let a = oracle_policy(task, current)?.quantized();
        states.push(step(current, a));
        actions.push(a);
    }
    if task.done(states.last().unwrap()) {
        Ok((states, actions))
    } else {
        Err(Error::Unachievable {
            task: task.id.clone(),
            reason: format!("oracle exceeded {budget} steps"),
        })
    }
}
