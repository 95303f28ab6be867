use std::fmt::Write as _;

use serde::Serialize;

use super::OdeError;

/// One accepted step with its continuous extension.
#[derive(Debug, Clone)]
pub struct Segment {
    pub t_start: f64,
    pub t_end: f64,
    pub state_start: Vec<f64>,
    pub state_end: Vec<f64>,
    // y(θ) = y0 + θ(c0 + (1-θ)(c1 + θ(c2 + (1-θ) c3)))
    coeffs: [Vec<f64>; 4],
}

impl Segment {
    pub(super) fn new(t_start: f64, t_end: f64, y0: Vec<f64>, y1: Vec<f64>, coeffs: [Vec<f64>; 4]) -> Self {
        Segment {
            t_start,
            t_end,
            state_start: y0,
            state_end: y1,
            coeffs,
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        let (lo, hi) = ordered(self.t_start, self.t_end);
        t >= lo && t <= hi
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        if t == self.t_start {
            return self.state_start.clone();
        }
        if t == self.t_end {
            return self.state_end.clone();
        }
        let th = (t - self.t_start) / (self.t_end - self.t_start);
        let th1 = 1.0 - th;
        let [c0, c1, c2, c3] = &self.coeffs;
        (0..self.state_start.len())
            .map(|i| self.state_start[i] + th * (c0[i] + th1 * (c1[i] + th * (c2[i] + th1 * c3[i]))))
            .collect()
    }
}

fn ordered(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryStatus {
    Completed,
    EventHit,
    MaxTime,
    StepFailure,
}

/// Dense numerical solution `t ↦ φ(t, x0)`. Segments are ordered in the direction of
/// integration and tile the covered span without gaps.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub(super) t0: f64,
    pub(super) x0: Vec<f64>,
    pub(super) segments: Vec<Segment>,
    pub(super) direction: Direction,
    pub(super) status: TrajectoryStatus,
}

impl Trajectory {
    pub(crate) fn start(t0: f64, x0: &[f64], direction: Direction) -> Trajectory {
        Trajectory {
            t0,
            x0: x0.to_vec(),
            segments: Vec::new(),
            direction,
            status: TrajectoryStatus::Completed,
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn status(&self) -> TrajectoryStatus {
        self.status
    }

    pub fn t_start(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.segments.last().map_or(self.t0, |s| s.t_end)
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.x0
    }

    pub fn final_state(&self) -> &[f64] {
        self.segments.last().map_or(&self.x0, |s| &s.state_end)
    }

    /// Dense-output state at `t`.
    pub fn interpolate(&self, t: f64) -> Result<Vec<f64>, OdeError> {
        if t == self.t0 {
            return Ok(self.x0.clone());
        }
        let (lo, hi) = ordered(self.t0, self.t_end());
        if !(t >= lo && t <= hi) {
            return Err(OdeError::OutOfSpan { t, lo, hi });
        }
        let forward = self.direction == Direction::Forward;
        // Segments are monotone in time along the integration direction.
        let idx = self.segments.partition_point(|s| if forward { s.t_end < t } else { s.t_end > t });
        let seg = &self.segments[idx.min(self.segments.len() - 1)];
        Ok(seg.eval(t))
    }

    /// Step endpoints and their states, starting with the initial point.
    pub fn nodes(&self) -> impl Iterator<Item = (f64, &[f64])> + '_ {
        std::iter::once((self.t0, self.x0.as_slice()))
            .chain(self.segments.iter().map(|s| (s.t_end, s.state_end.as_slice())))
    }

    /// `count + 1` equally spaced samples over the covered span (`t0` to `t_end`).
    pub fn sample_uniform(&self, count: usize) -> Vec<(f64, Vec<f64>)> {
        let (a, b) = (self.t0, self.t_end());
        let count = count.max(1);
        (0..=count)
            .map(|k| {
                let t = if k == count { b } else { a + (b - a) * k as f64 / count as f64 };
                (t, self.interpolate(t).expect("sample inside span"))
            })
            .collect()
    }

    /// CSV dump with header `t,x1,...,xn`.
    pub fn to_csv(&self, count: usize) -> String {
        let n = self.x0.len();
        let mut out = String::from("t");
        for i in 1..=n {
            let _ = write!(out, ",x{i}");
        }
        out.push('\n');
        for (t, x) in self.sample_uniform(count) {
            let _ = write!(out, "{}", crate::export::fmt_f64(t));
            for v in x {
                let _ = write!(out, ",{}", crate::export::fmt_f64(v));
            }
            out.push('\n');
        }
        out
    }
}
