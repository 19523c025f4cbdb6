//! Deterministic 2D tabletop: a gripper, blocks, sockets, and pressable
//! covers on the unit square, rendered top-down at 32×32.

pub mod episode;
pub mod render;
pub mod splits;
pub mod tasks;

use serde::{Deserialize, Serialize};

/// Per-axis translation limit per control step.
pub const STEP_MAX: f64 = 0.1;
/// Closing the gripper within this distance of a block grabs it.
pub const GRASP_RADIUS: f64 = 0.05;
/// Opening the gripper within this distance of a socket inserts a held block.
pub const INSERT_RADIUS: f64 = 0.04;
/// Grip command at or above this closes the gripper.
pub const GRIP_CLOSE: f64 = 0.5;
/// Render size in pixels per side.
pub const FRAME_SIDE: usize = 32;
/// Bytes per rendered frame (32×32 RGB).
pub const FRAME_LEN: usize = FRAME_SIDE * FRAME_SIDE * 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "red" => Color::Red,
            "green" => Color::Green,
            "blue" => Color::Blue,
            "yellow" => Color::Yellow,
            "purple" => Color::Purple,
            "orange" => Color::Orange,
            _ => return None,
        })
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [50, 90, 220],
            Color::Yellow => [230, 210, 50],
            Color::Purple => [160, 60, 200],
            Color::Orange => [240, 140, 30],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Block,
    Socket,
    Cover,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: u32,
    pub kind: ObjectKind,
    pub color: Color,
    pub pose: (f64, f64),
    /// Socket id when a block sits inside one; its pose then equals the
    /// socket's pose. Only valid for blocks.
    pub inserted_into: Option<u32>,
    /// Toggle state; only meaningful for covers.
    pub pressed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub grip: f64,
}

impl Action {
    pub const ZERO_OPEN: Action = Action {
        dx: 0.0,
        dy: 0.0,
        grip: 0.0,
    };

    pub fn new(dx: f64, dy: f64, grip: f64) -> Self {
        Action { dx, dy, grip }
    }

    /// Component-wise clamp into the legal action box.
    pub fn clamped(self) -> Self {
        Action {
            dx: self.dx.clamp(-STEP_MAX, STEP_MAX),
            dy: self.dy.clamp(-STEP_MAX, STEP_MAX),
            grip: self.grip.clamp(0.0, 1.0),
        }
    }

    pub fn closes(self) -> bool {
        self.grip >= GRIP_CLOSE
    }

    /// Rounds each component through f32, the precision actions are stored
    /// at on disk, so in-memory rollouts match byte-level replay exactly.
    /// Rounding is nudged back inside the legal box: f32(0.1) > 0.1, and a
    /// stored action must never exceed the bounds it was clamped to.
    pub fn quantized(self) -> Self {
        fn f32_within(v: f64, lo: f64, hi: f64) -> f64 {
            let mut q = v as f32;
            if f64::from(q) > hi {
                q = q.next_down();
            }
            if f64::from(q) < lo {
                q = q.next_up();
            }
            f64::from(q)
        }
        Action {
            dx: f32_within(self.dx, -STEP_MAX, STEP_MAX),
            dy: f32_within(self.dy, -STEP_MAX, STEP_MAX),
            grip: f32_within(self.grip, 0.0, 1.0),
        }
    }
}

/// One rendered observation, row-major (y, x, channel).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn filled(rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(FRAME_LEN);
        for _ in 0..FRAME_SIDE * FRAME_SIDE {
            pixels.extend_from_slice(&rgb);
        }
        Frame { pixels }
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let at = (y * FRAME_SIDE + x) * 3;
        [self.pixels[at], self.pixels[at + 1], self.pixels[at + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let at = (y * FRAME_SIDE + x) * 3;
        self.pixels[at..at + 3].copy_from_slice(&rgb);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub gripper_pose: (f64, f64),
    pub gripper_closed: bool,
    pub held_object: Option<u32>,
    pub objects: Vec<ObjectSpec>,
    pub step_index: u32,
}

impl WorldState {
    pub fn object(&self, id: u32) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.id == id)
    }

    fn object_mut(&mut self, id: u32) -> Option<&mut ObjectSpec> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    /// Proprioceptive triple (x, y, grip) with grip as 0/1.
    pub fn proprio(&self) -> [f64; 3] {
        let g = if self.gripper_closed { 1.0 } else { 0.0 };
        [self.gripper_pose.0, self.gripper_pose.1, g]
    }

    /// Checks the structural invariants; used by property tests.
    pub fn invariants_ok(&self) -> bool {
        let in_unit = |p: (f64, f64)| (0.0..=1.0).contains(&p.0) && (0.0..=1.0).contains(&p.1);
        if !in_unit(self.gripper_pose) {
            return false;
        }
        for o in &self.objects {
            if !in_unit(o.pose) {
                return false;
            }
            if let Some(sid) = o.inserted_into {
                if o.kind != ObjectKind::Block {
                    return false;
                }
                match self.object(sid) {
                    Some(sock) if sock.kind == ObjectKind::Socket => {
                        if o.pose != sock.pose {
                            return false;
                        }
                    }
                    _ => return false,
                }
            }
        }
        if let Some(held) = self.held_object {
            if !self.gripper_closed {
                return false;
            }
            match self.object(held) {
                Some(o) => {
                    if o.pose != self.gripper_pose {
                        return false;
                    }
                }
                None => return false,
            }
        }
        true
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Advances the world by one control step.
///
/// Transition order: clamp the action, translate the gripper (held block
/// tracks it), then resolve grip edges at the new pose — a close edge grabs
/// the nearest block within reach (free or inserted; re-grasping removes it
/// from its socket) or toggles a cover; an open edge inserts the held block
/// when over a socket, otherwise drops it in place. Grip transitions are
/// edge-triggered: holding the gripper closed grabs nothing new.
pub fn step(state: &WorldState, action: Action) -> WorldState {
    let a = action.clamped();
    let mut next = state.clone();

    let gx = (next.gripper_pose.0 + a.dx).clamp(0.0, 1.0);
    let gy = (next.gripper_pose.1 + a.dy).clamp(0.0, 1.0);
    next.gripper_pose = (gx, gy);

    if let Some(held) = next.held_object {
        if let Some(o) = next.object_mut(held) {
            o.pose = (gx, gy);
        }
    }

    let was_closed = next.gripper_closed;
    let closes = a.closes();

    if closes && !was_closed {
        // Close edge: nearest grabbable within reach wins; ties go to the
        // lowest object id because candidates are scanned in id order.
        let mut best: Option<(u32, ObjectKind, f64)> = None;
        for o in &next.objects {
            let grabbable = match o.kind {
                ObjectKind::Block => true,
                ObjectKind::Cover => true,
                ObjectKind::Socket => false,
            };
            if !grabbable {
                continue;
            }
            let d = dist(next.gripper_pose, o.pose);
            if d <= GRASP_RADIUS && best.map_or(true, |(_, _, bd)| d < bd) {
                best = Some((o.id, o.kind, d));
            }
        }
        match best {
            Some((id, ObjectKind::Block, _)) => {
                let pose = next.gripper_pose;
                if let Some(o) = next.object_mut(id) {
                    o.inserted_into = None;
                    o.pose = pose;
                }
                next.held_object = Some(id);
            }
            Some((id, ObjectKind::Cover, _)) => {
                if let Some(o) = next.object_mut(id) {
                    o.pressed = !o.pressed;
                }
            }
            _ => {}
        }
    } else if !closes && was_closed {
        // Open edge: a held block either inserts into a free socket within
        // reach or is released where it is.
        if let Some(held) = next.held_object.take() {
            let socket = next
                .objects
                .iter()
                .filter(|o| o.kind == ObjectKind::Socket)
                .filter(|o| dist(next.gripper_pose, o.pose) <= INSERT_RADIUS)
                .filter(|s| {
                    !next
                        .objects
                        .iter()
                        .any(|b| b.inserted_into == Some(s.id))
                })
                .map(|o| (o.id, o.pose))
                .min_by(|a, b| {
                    let da = dist(next.gripper_pose, a.1);
                    let db = dist(next.gripper_pose, b.1);
                    da.partial_cmp(&db).unwrap()
                });
            if let Some((sid, spose)) = socket {
                if let Some(o) = next.object_mut(held) {
                    o.inserted_into = Some(sid);
                    o.pose = spose;
                }
            }
        }
    }

    next.gripper_closed = closes;
    next.step_index = state.step_index + 1;
    next
}

pub use render::render;
