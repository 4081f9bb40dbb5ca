//! Kinematic bicycle: state `[x, y, heading, speed, steer]`, control
//! `[acceleration, steer rate]`, RK4 integration followed by clamping.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BicycleSpec {
    pub wheelbase: f64,
    pub dt: f64,
    pub accel_max: f64,
    pub steer_rate_max: f64,
    pub steer_max: f64,
    pub speed_max: f64,
    pub goal_radius: f64,
    /// Half-width of the square workspace.
    pub workspace: f64,
    pub steps: usize,
}

impl Default for BicycleSpec {
    fn default() -> Self {
        Self {
            wheelbase: 1.0,
            dt: 0.1,
            accel_max: 2.0,
            steer_rate_max: 1.0,
            steer_max: 0.6,
            speed_max: 4.0,
            goal_radius: 1.0,
            workspace: 10.0,
            steps: 64,
        }
    }
}

fn deriv(spec: &BicycleSpec, s: &[f64; 5], u: &[f64; 2]) -> [f64; 5] {
    let (th, v, d) = (s[2], s[3], s[4]);
    [v * th.cos(), v * th.sin(), v * d.tan() / spec.wheelbase, u[0], u[1]]
}

impl BicycleSpec {
    pub fn clamp_control(&self, u: &[f64]) -> [f64; 2] {
        [
            u[0].clamp(-self.accel_max, self.accel_max),
            u[1].clamp(-self.steer_rate_max, self.steer_rate_max),
        ]
    }

    pub fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let u = self.clamp_control(u);
        let s: [f64; 5] = x.try_into().expect("bicycle state has 5 entries");
        let h = self.dt;
        let add = |a: &[f64; 5], k: &[f64; 5], c: f64| std::array::from_fn::<f64, 5, _>(|i| a[i] + c * k[i]);
        let k1 = deriv(self, &s, &u);
        let k2 = deriv(self, &add(&s, &k1, h / 2.0), &u);
        let k3 = deriv(self, &add(&s, &k2, h / 2.0), &u);
        let k4 = deriv(self, &add(&s, &k3, h), &u);
        let mut next: Vec<f64> = (0..5).map(|i| s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
        next[3] = next[3].clamp(0.0, self.speed_max);
        next[4] = next[4].clamp(-self.steer_max, self.steer_max);
        next
    }
}

/// Start pose, two intermediate waypoints and the end point of a U-shaped path.
#[derive(Debug, Clone, PartialEq)]
pub struct UReference {
    pub points: [[f64; 2]; 4],
}

impl UReference {
    fn seg_lengths(&self) -> [f64; 3] {
        std::array::from_fn(|i| dist(self.points[i], self.points[i + 1]))
    }

    pub fn length(&self) -> f64 {
        self.seg_lengths().iter().sum()
    }

    /// Point at arc length `s` (clamped to the path).
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let mut rem = s.max(0.0);
        for (i, len) in self.seg_lengths().iter().enumerate() {
            if rem <= *len || i == 2 {
                let f = if *len > 0.0 { (rem / len).min(1.0) } else { 0.0 };
                let (a, b) = (self.points[i], self.points[i + 1]);
                return [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])];
            }
            rem -= len;
        }
        self.points[3]
    }

    /// Arc length of the closest point to `p` at or beyond `from`.
    pub fn project(&self, p: [f64; 2], from: f64) -> f64 {
        let mut best = (f64::INFINITY, from);
        let mut acc = 0.0;
        for (i, len) in self.seg_lengths().iter().enumerate() {
            let (a, b) = (self.points[i], self.points[i + 1]);
            if *len > 0.0 {
                let t = (((p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1])) / (len * len)).clamp(0.0, 1.0);
                let s = acc + t * len;
                let q = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                let d = dist(p, q);
                if s >= from && d < best.0 {
                    best = (d, s);
                }
            }
            acc += len;
        }
        best.1
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Start state at rest and a U-shaped reference: drive ahead, shift sideways,
/// come back part of the way.
pub fn sample_u_reference<R: Rng + ?Sized>(spec: &BicycleSpec, rng: &mut R) -> (Vec<f64>, UReference) {
    let w = spec.workspace;
    let start = [rng.random_range(-0.8 * w..-0.4 * w), rng.random_range(-0.2 * w..0.2 * w)];
    let th: f64 = rng.random_range(-std::f64::consts::FRAC_PI_6..std::f64::consts::FRAC_PI_6);
    let (c, s) = (th.cos(), th.sin());
    let ahead = rng.random_range(3.0..7.0);
    let side = rng.random_range(2.5..5.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
    let back = ahead * rng.random_range(0.3..0.9);
    let w1 = [start[0] + ahead * c, start[1] + ahead * s];
    let w2 = [w1[0] - side * s, w1[1] + side * c];
    let end = [w2[0] - back * c, w2[1] - back * s];
    (vec![start[0], start[1], th, 0.0, 0.0], UReference { points: [start, w1, w2, end] })
}

/// Pure pursuit on the reference plus a proportional speed tracker with a
/// braking profile that stops near the end of the path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PurePursuit {
    pub lookahead: f64,
    pub steer_gain: f64,
    pub speed_gain: f64,
    pub brake: f64,
    pub cruise: f64,
}

impl PurePursuit {
    pub fn for_reference(spec: &BicycleSpec, path: &UReference) -> Self {
        let horizon = spec.steps as f64 * spec.dt;
        Self {
            lookahead: 1.5,
            steer_gain: 5.0,
            speed_gain: 2.0,
            brake: 1.0,
            cruise: (1.3 * path.length() / horizon).min(spec.speed_max * 0.9),
        }
    }

    /// Control for state `x` given the current path progress; returns the
    /// updated progress as well.
    pub fn control(&self, spec: &BicycleSpec, path: &UReference, x: &[f64], progress: f64) -> ([f64; 2], f64) {
        let p = [x[0], x[1]];
        let s = path.project(p, progress);
        let target = path.point_at(s + self.lookahead);
        let alpha = (target[1] - p[1]).atan2(target[0] - p[0]) - x[2];
        let alpha = alpha.sin().atan2(alpha.cos());
        let ld = dist(p, target).max(0.5);
        let steer = (2.0 * spec.wheelbase * alpha.sin() / ld).atan().clamp(-spec.steer_max, spec.steer_max);
        let rem = (path.length() - s).max(0.0);
        let v_ref = self.cruise.min((2.0 * self.brake * rem).sqrt());
        let u = [self.speed_gain * (v_ref - x[3]), self.steer_gain * (steer - x[4])];
        (spec.clamp_control(&u), s)
    }
}
