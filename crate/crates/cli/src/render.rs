//! Static PNG overlays of a predicted motion on its scene image.

use ebmdmo_core::motion::{project, Camera};
use ebmdmo_core::scene::Image;
use ebmdmo_core::Trajectory;

const OPEN: [u8; 3] = [40, 220, 60];
const CLOSED: [u8; 3] = [230, 40, 40];
const LINE: [u8; 3] = [250, 250, 250];
const SCALE: usize = 4;

/// 3x5 glyphs, one row per `u8`, high three bits used.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b001, 0b001],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        'E' => [0b111, 0b100, 0b111, 0b100, 0b111],
        '=' => [0b000, 0b111, 0b000, 0b111, 0b000],
        ' ' => [0; 5],
        _ => return None,
    })
}

/// An RGB8 canvas upscaled from the scene image.
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    fn from_image(img: &Image, scale: usize) -> Self {
        let (w, h) = (img.width * scale, img.height * scale);
        let mut rgb = vec![0u8; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                let p = img.pixel(y / scale, x / scale);
                for c in 0..3 {
                    rgb[(y * w + x) * 3 + c] = (p[c].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        Self { width: w, height: h, rgb }
    }

    fn put(&mut self, x: i64, y: i64, col: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let o = (y as usize * self.width + x as usize) * 3;
            self.rgb[o..o + 3].copy_from_slice(&col);
        }
    }

    fn line(&mut self, a: [f32; 2], b: [f32; 2], col: [u8; 3]) {
        let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
        for k in 0..=steps {
            let t = k as f32 / steps as f32;
            self.put((a[0] + t * (b[0] - a[0])).round() as i64, (a[1] + t * (b[1] - a[1])).round() as i64, col);
        }
    }

    fn dot(&mut self, c: [f32; 2], r: i64, col: [u8; 3]) {
        let (cx, cy) = (c[0].round() as i64, c[1].round() as i64);
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.put(cx + dx, cy + dy, col);
                }
            }
        }
    }

    fn text(&mut self, s: &str, x0: i64, y0: i64, px: i64, col: [u8; 3]) {
        for (i, ch) in s.chars().enumerate() {
            let Some(g) = glyph(ch) else { continue };
            for (row, bits) in g.iter().enumerate() {
                for colx in 0..3 {
                    if bits >> (2 - colx) & 1 == 1 {
                        for yy in 0..px {
                            for xx in 0..px {
                                let x = x0 + (i as i64 * 4 + colx) * px + xx;
                                let y = y0 + row as i64 * px + yy;
                                self.put(x, y, col);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Projected waypoints in original (unscaled) pixel coordinates; `None`
/// for poses behind the camera.
pub fn waypoints(traj: &Trajectory, cam: &Camera) -> Vec<Option<[f32; 2]>> {
    traj.poses().iter().map(|p| project(p.x, cam).ok()).collect()
}

/// Image upscaled 4x, the projected path, one dot per waypoint coloured by
/// gripper state (green open, red closed) and the energy written top-left.
pub fn overlay(img: &Image, traj: &Trajectory, cam: &Camera, energy: Option<f32>) -> Canvas {
    let mut c = Canvas::from_image(img, SCALE);
    let s = SCALE as f32;
    // Pixel centres: original pixel u maps to the centre of its scaled block.
    let to_canvas = |uv: [f32; 2]| [uv[0] * s + (s - 1.0) / 2.0, uv[1] * s + (s - 1.0) / 2.0];
    let pts: Vec<Option<[f32; 2]>> = waypoints(traj, cam).into_iter().map(|p| p.map(to_canvas)).collect();
    for pair in pts.windows(2) {
        if let (Some(a), Some(b)) = (pair[0], pair[1]) {
            c.line(a, b, LINE);
        }
    }
    for (p, pose) in pts.iter().zip(traj.poses()) {
        if let Some(p) = p {
            c.dot(*p, 2, if pose.s >= 0.5 { CLOSED } else { OPEN });
        }
    }
    if let Some(e) = energy {
        c.text(&format!("E={e:.3}"), 2, 2, 2, LINE);
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use ebmdmo_core::motion::Pose;

    #[test]
    fn dots_sit_on_projected_waypoints() {
        let cam = Camera::new(120.0, 120.0, 31.5, 31.5, 64, 64).unwrap();
        let img = Image { width: 64, height: 64, data: vec![0.0; 64 * 64 * 4] };
        let poses: Vec<Pose> = (0..4)
            .map(|k| Pose { x: [-0.1 + 0.06 * k as f32, 0.05, 0.9], r: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0], s: (k % 2) as f32, t: k as f32 / 3.0 })
            .collect();
        let traj = Trajectory::new(poses);
        let c = overlay(&img, &traj, &cam, None);
        for (p, pose) in waypoints(&traj, &cam).iter().zip(traj.poses()) {
            let uv = p.unwrap();
            let want = project(pose.x, &cam).unwrap();
            assert!((uv[0] - want[0]).abs() <= 1.0 && (uv[1] - want[1]).abs() <= 1.0);
            let (x, y) = ((uv[0] * 4.0 + 1.5).round() as usize, (uv[1] * 4.0 + 1.5).round() as usize);
            let px = &c.rgb[(y * c.width + x) * 3..][..3];
            assert_eq!(px, if pose.s >= 0.5 { CLOSED } else { OPEN });
        }
    }

    #[test]
    fn energy_label_draws_pixels() {
        let cam = Camera::new(120.0, 120.0, 31.5, 31.5, 64, 64).unwrap();
        let img = Image { width: 64, height: 64, data: vec![0.0; 64 * 64 * 4] };
        let traj = Trajectory::new(vec![Pose { x: [0.0, 0.0, 0.9], r: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0], s: 0.0, t: 0.0 }; 2]);
        let a = overlay(&img, &traj, &cam, None);
        let b = overlay(&img, &traj, &cam, Some(-1.25));
        let lit = |c: &Canvas| c.rgb[..c.width * 3 * 14].iter().filter(|&&v| v == 250).count();
        assert!(lit(&b) > lit(&a));
    }
}
