//! Top-down orthographic renderer: fixed sprites, fixed draw order, no
//! anti-aliasing — the same state always yields identical bytes.

use super::{Frame, ObjectKind, WorldState, FRAME_SIDE};

pub const BACKGROUND: [u8; 3] = [200, 200, 200];
const GRIPPER_RGB: [u8; 3] = [255, 255, 255];

/// Maps a unit coordinate to a pixel center.
fn px(v: f64) -> i32 {
    ((v * FRAME_SIDE as f64).floor() as i32).clamp(0, FRAME_SIDE as i32 - 1)
}

fn put(frame: &mut Frame, x: i32, y: i32, rgb: [u8; 3]) {
    if (0..FRAME_SIDE as i32).contains(&x) && (0..FRAME_SIDE as i32).contains(&y) {
        frame.set(y as usize, x as usize, rgb);
    }
}

/// Filled square of side `2r+1` centered at (cx, cy).
fn fill_square(frame: &mut Frame, cx: i32, cy: i32, r: i32, rgb: [u8; 3]) {
    for dy in -r..=r {
        for dx in -r..=r {
            put(frame, cx + dx, cy + dy, rgb);
        }
    }
}

/// Hollow square outline of side `2r+1`.
fn outline_square(frame: &mut Frame, cx: i32, cy: i32, r: i32, rgb: [u8; 3]) {
    for d in -r..=r {
        put(frame, cx + d, cy - r, rgb);
        put(frame, cx + d, cy + r, rgb);
        put(frame, cx - r, cy + d, rgb);
        put(frame, cx + r, cy + d, rgb);
    }
}

fn dim(rgb: [u8; 3]) -> [u8; 3] {
    [rgb[0] / 2, rgb[1] / 2, rgb[2] / 2]
}

/// Renders a state to a 32×32 RGB frame.
///
/// Draw order (later wins overlaps): sockets, covers, free blocks, held
/// block, gripper. Sockets are 7×7 outlines, covers 2×2-radius fills
/// (dimmed while pressed), blocks 5×5 fills, the gripper a white 5×5
/// outline when open and a white 3×3 fill when closed.
pub fn render(state: &WorldState) -> Frame {
    let mut frame = Frame::filled(BACKGROUND);

    let layer = |kind: ObjectKind, held: Option<u32>| {
        state
            .objects
            .iter()
            .filter(move |o| o.kind == kind && Some(o.id) != held)
    };

    for o in layer(ObjectKind::Socket, None) {
        let (cx, cy) = (px(o.pose.0), px(o.pose.1));
        outline_square(&mut frame, cx, cy, 3, o.color.rgb());
    }
    for o in layer(ObjectKind::Cover, None) {
        let (cx, cy) = (px(o.pose.0), px(o.pose.1));
        let rgb = if o.pressed { dim(o.color.rgb()) } else { o.color.rgb() };
        fill_square(&mut frame, cx, cy, 2, rgb);
    }
    for o in layer(ObjectKind::Block, state.held_object) {
        let (cx, cy) = (px(o.pose.0), px(o.pose.1));
        fill_square(&mut frame, cx, cy, 2, o.color.rgb());
    }
    if let Some(held) = state.held_object {
        if let Some(o) = state.object(held) {
            let (cx, cy) = (px(o.pose.0), px(o.pose.1));
            fill_square(&mut frame, cx, cy, 2, o.color.rgb());
        }
    }

    let (gx, gy) = (px(state.gripper_pose.0), px(state.gripper_pose.1));
    if state.gripper_closed {
        fill_square(&mut frame, gx, gy, 1, GRIPPER_RGB);
    } else {
        outline_square(&mut frame, gx, gy, 2, GRIPPER_RGB);
    }
    frame
}

/// Color sprite bounding box in pixels, used by render tests.
pub fn sprite_bbox(pose: (f64, f64), radius: i32) -> (i32, i32, i32, i32) {
    let (cx, cy) = (px(pose.0), px(pose.1));
    (cx - radius, cy - radius, cx + radius, cy + radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Color, ObjectSpec, WorldState};

    fn empty_state() -> WorldState {
        WorldState {
            gripper_pose: (2.0, 2.0), // clamps off-screen right/bottom edge
            gripper_closed: false,
            held_object: None,
            objects: vec![],
            step_index: 0,
        }
    }

    #[test]
    fn empty_table_is_uniform_background_except_gripper() {
        let mut s = empty_state();
        s.objects.clear();
        let f = render(&s);
        // Gripper clamps to the far corner; count non-background pixels.
        let non_bg = (0..FRAME_SIDE)
            .flat_map(|y| (0..FRAME_SIDE).map(move |x| (y, x)))
            .filter(|&(y, x)| f.get(y, x) != BACKGROUND)
            .count();
        assert!(non_bg > 0 && non_bg <= 25, "only the gripper sprite drawn");
    }

    #[test]
    fn same_state_renders_identical_bytes() {
        let s = sample_state();
        assert_eq!(render(&s).pixels, render(&s).pixels);
    }

    fn sample_state() -> WorldState {
        WorldState {
            gripper_pose: (0.2, 0.7),
            gripper_closed: false,
            held_object: None,
            objects: vec![
                ObjectSpec {
                    id: 0,
                    kind: ObjectKind::Block,
                    color: Color::Red,
                    pose: (0.3, 0.3),
                    inserted_into: None,
                    pressed: false,
                },
                ObjectSpec {
                    id: 1,
                    kind: ObjectKind::Socket,
                    color: Color::Blue,
                    pose: (0.7, 0.4),
                    inserted_into: None,
                    pressed: false,
                },
                ObjectSpec {
                    id: 2,
                    kind: ObjectKind::Cover,
                    color: Color::Green,
                    pose: (0.5, 0.8),
                    inserted_into: None,
                    pressed: false,
                },
            ],
            step_index: 0,
        }
    }

    /// Changing only one block's color must change pixels only inside that
    /// sprite's bounding box. The expected box was read off the reference
    /// render: block at (0.3,0.3) → center pixel (9,9), radius 2.
    #[test]
    fn color_change_stays_inside_sprite_bbox() {
        let a = sample_state();
        let mut b = a.clone();
        b.objects[0].color = Color::Yellow;
        let fa = render(&a);
        let fb = render(&b);
        let (x0, y0, x1, y1) = sprite_bbox((0.3, 0.3), 2);
        assert_eq!((x0, y0, x1, y1), (7, 7, 11, 11));
        for y in 0..FRAME_SIDE as i32 {
            for x in 0..FRAME_SIDE as i32 {
                let inside = (x0..=x1).contains(&x) && (y0..=y1).contains(&y);
                let same = fa.get(y as usize, x as usize) == fb.get(y as usize, x as usize);
                if !inside {
                    assert!(same, "pixel ({y},{x}) changed outside the sprite box");
                }
            }
        }
        assert_ne!(fa.pixels, fb.pixels);
    }

    #[test]
    fn pressed_cover_renders_dimmer() {
        let a = sample_state();
        let mut b = a.clone();
        b.objects[2].pressed = true;
        let fa = render(&a);
        let fb = render(&b);
        assert_ne!(fa.pixels, fb.pixels);
        // Center pixel of the cover sprite: (0.5, 0.8) → (16, 25).
        assert_eq!(fa.get(25, 16), Color::Green.rgb());
        assert_eq!(fb.get(25, 16), [20, 90, 30]);
    }

    #[test]
    fn gripper_open_and_closed_are_distinct() {
        let mut s = sample_state();
        let open = render(&s);
        s.gripper_closed = true;
        let closed = render(&s);
        assert_ne!(open.pixels, closed.pixels);
    }
}
