//! Procedural cartoon faces.
//!
//! Every facial part sits at a fixed offset from the face anchor `(cx, cy)`
//! (the nose bridge), so a manipulation region can be located from the
//! anchor alone. Colors, the anchor and a low-amplitude texture vary per
//! sample. Base images never touch 0 or 255 in any channel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;

pub const SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceAnchor {
    pub cx: i32,
    pub cy: i32,
}

fn clamp(v: i32) -> u8 {
    v.clamp(20, 235) as u8
}

fn jitter<R: Rng>(rng: &mut R, base: [i32; 3], spread: i32) -> [i32; 3] {
    base.map(|c| c + rng.gen_range(-spread..=spread))
}

fn inside_ellipse(x: i32, y: i32, cx: i32, cy: i32, rx: i32, ry: i32) -> bool {
    let (dx, dy) = ((x - cx) as i64, (y - cy) as i64);
    let (rx, ry) = (rx as i64, ry as i64);
    dx * dx * ry * ry + dy * dy * rx * rx <= rx * rx * ry * ry
}

/// Cheap deterministic texture in [−3, 3].
fn grain(seed: u64, x: i32, y: i32) -> i32 {
    let mut z = seed ^ ((x as u64) << 32 | y as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 31)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    ((z >> 40) % 7) as i32 - 3
}

pub fn render_face<R: Rng>(rng: &mut R) -> (Image, FaceAnchor) {
    let cx = 32 + rng.gen_range(-2..=2);
    let cy = 33 + rng.gen_range(-2..=2);
    let anchor = FaceAnchor { cx, cy };

    let bg_top = jitter(rng, [90, 120, 150], 40);
    let bg_bottom = jitter(rng, [140, 130, 110], 40);
    let skin = jitter(rng, [205, 160, 130], 20);
    let hair = jitter(rng, [70, 50, 40], 25);
    let brow = jitter(rng, [55, 40, 35], 15);
    let iris = jitter(rng, [70, 110, 120], 40);
    let lip = jitter(rng, [185, 80, 90], 20);
    let texture: u64 = rng.gen();

    let mut img = Image::new(SIZE, SIZE);
    for y in 0..SIZE as i32 {
        for x in 0..SIZE as i32 {
            let t = y as f32 / (SIZE - 1) as f32;
            let mut c: [i32; 3] =
                std::array::from_fn(|k| (bg_top[k] as f32 * (1.0 - t) + bg_bottom[k] as f32 * t).round() as i32);
            if inside_ellipse(x, y, cx, cy - 9, 20, 20) && y < cy - 13 {
                let strand = if (x + y / 4) % 3 == 0 { -18 } else { 0 };
                c = hair.map(|v| v + strand);
            }
            if inside_ellipse(x, y, cx, cy, 18, 23) && y >= cy - 13 {
                let shade = (y - cy) / 6;
                c = skin.map(|v| v - shade * 3);
            }
            for side in [-1, 1] {
                let d = (x - cx) * side;
                if (3..=12).contains(&d) {
                    let top = cy - 11 + (d > 9) as i32;
                    if y >= top && y < top + 2 {
                        c = brow;
                    }
                }
                let ex = cx + side * 7;
                if inside_ellipse(x, y, ex, cy - 6, 4, 2) {
                    c = [230, 228, 225];
                    if (x - ex).abs() <= 1 {
                        c = iris;
                    }
                    if x == ex && y == cy - 6 {
                        c = [25, 25, 30];
                    }
                }
            }
            if (x == cx || x == cx + 1) && y >= cy - 3 && y <= cy + 4 {
                c = skin.map(|v| v - 35);
            }
            if y == cy + 4 && (x == cx - 2 || x == cx + 3) {
                c = skin.map(|v| v - 70);
            }
            if inside_ellipse(x, y, cx, cy + 9, 7, 2) {
                c = if y == cy + 9 { lip.map(|v| v - 50) } else { lip };
            }
            let g = grain(texture, x, y);
            img.set(x as usize, y as usize, c.map(|v| clamp(v + g)));
        }
    }
    (img, anchor)
}
