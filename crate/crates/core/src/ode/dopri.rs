//! Dormand–Prince 5(4) stepper with the standard 4th-order continuous extension.

use super::trajectory::Segment;
use super::Tolerances;
use crate::field::{FieldError, VectorField};

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;

pub(super) enum StepError {
    Field(FieldError),
    Underflow,
    TooManySteps,
}

pub(super) struct Stepper<'a, F: VectorField + ?Sized> {
    field: &'a F,
    tol: Tolerances,
    pub t: f64,
    pub y: Vec<f64>,
    k1: Vec<f64>,
    h: f64,
    t_end: f64,
    dir: f64,
    steps: usize,
}

fn lin(y: &[f64], terms: &[(f64, &[f64])], h: f64) -> Vec<f64> {
    let mut out = y.to_vec();
    for (c, k) in terms {
        if *c == 0.0 {
            continue;
        }
        for (o, ki) in out.iter_mut().zip(k.iter()) {
            *o += h * c * ki;
        }
    }
    out
}

impl<'a, F: VectorField + ?Sized> Stepper<'a, F> {
    pub fn new(field: &'a F, y0: &[f64], t0: f64, t_end: f64, tol: Tolerances) -> Result<Self, FieldError> {
        let k1 = field.eval(y0)?;
        let dir = if t_end >= t0 { 1.0 } else { -1.0 };
        let mut s = Stepper {
            field,
            tol,
            t: t0,
            y: y0.to_vec(),
            k1,
            h: 0.0,
            t_end,
            dir,
            steps: 0,
        };
        s.h = s.initial_step()?;
        Ok(s)
    }

    fn scale(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(x, y)| self.tol.atol + self.tol.rtol * x.abs().max(y.abs()))
            .collect()
    }

    fn initial_step(&self) -> Result<f64, FieldError> {
        let span = (self.t_end - self.t).abs();
        let n = self.y.len().max(1) as f64;
        let sc = self.scale(&self.y, &self.y);
        let rms = |v: &[f64]| (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n).sqrt();
        let d0 = rms(&self.y);
        let d1 = rms(&self.k1);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span);
        let y1 = lin(&self.y, &[(1.0, &self.k1)], self.dir * h0);
        let f1 = self.field.eval(&y1)?;
        let diff: Vec<f64> = f1.iter().zip(&self.k1).map(|(a, b)| a - b).collect();
        let d2 = rms(&diff) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        Ok((100.0 * h0).min(h1).min(span).max(f64::MIN_POSITIVE))
    }

    pub fn done(&self) -> bool {
        (self.t_end - self.t) * self.dir <= 0.0
    }

    /// Takes one accepted step, returning its dense-output segment.
    pub fn step(&mut self) -> Result<Segment, StepError> {
        let field = self.field;
        let mut rejected = false;
        loop {
            self.steps += 1;
            if self.steps > self.tol.max_steps {
                return Err(StepError::TooManySteps);
            }
            let remaining = (self.t_end - self.t).abs();
            let mut h = self.h.min(remaining);
            // Avoid leaving a sliver at the end of the span.
            if remaining - h < 1e-3 * h {
                h = remaining;
            }
            if h < 1e-14 * self.t.abs().max(1.0) {
                return Err(StepError::Underflow);
            }
            let hs = self.dir * h;
            let y = &self.y;
            let k1 = &self.k1;
            let attempt = (|| -> Result<_, FieldError> {
                let k2 = field.eval(&lin(y, &[(A21, k1)], hs))?;
                let k3 = field.eval(&lin(y, &[(A31, k1), (A32, &k2)], hs))?;
                let k4 = field.eval(&lin(y, &[(A41, k1), (A42, &k2), (A43, &k3)], hs))?;
                let k5 = field.eval(&lin(y, &[(A51, k1), (A52, &k2), (A53, &k3), (A54, &k4)], hs))?;
                let k6 = field.eval(&lin(
                    y,
                    &[(A61, k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
                    hs,
                ))?;
                let y_new = lin(y, &[(A71, k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)], hs);
                let k7 = field.eval(&y_new)?;
                Ok((k3, k4, k5, k6, y_new, k7))
            })();
            let (k3, k4, k5, k6, y_new, k7) = match attempt {
                Ok(v) => v,
                Err(e) => {
                    // A trial stage may leave the field's domain; retry smaller before giving up.
                    if h > 1e-10 * self.t.abs().max(1.0) {
                        self.h = 0.25 * h;
                        rejected = true;
                        continue;
                    }
                    return Err(StepError::Field(e));
                }
            };
            let sc = self.scale(y, &y_new);
            let mut err = 0.0f64;
            for i in 0..y.len() {
                let e = hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                err = err.max((e / sc[i]).abs());
            }
            if !err.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
                self.h = 0.25 * h;
                rejected = true;
                continue;
            }
            if err <= 1.0 {
                let mut fac = if err == 0.0 { FAC_MAX } else { SAFETY * err.powf(-0.2) };
                fac = fac.clamp(FAC_MIN, FAC_MAX);
                if rejected {
                    fac = fac.min(1.0);
                }
                let t0 = self.t;
                let t1 = if h == remaining { self.t_end } else { t0 + hs };
                let ydiff: Vec<f64> = y_new.iter().zip(y).map(|(a, b)| a - b).collect();
                let bspl: Vec<f64> = (0..y.len()).map(|i| hs * k1[i] - ydiff[i]).collect();
                let r4: Vec<f64> = (0..y.len()).map(|i| ydiff[i] - hs * k7[i] - bspl[i]).collect();
                let r5: Vec<f64> = (0..y.len())
                    .map(|i| {
                        hs * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i])
                    })
                    .collect();
                let seg = Segment::new(t0, t1, y.clone(), y_new.clone(), [ydiff, bspl, r4, r5]);
                self.t = t1;
                self.y = y_new;
                self.k1 = k7;
                self.h = h * fac;
                return Ok(seg);
            }
            rejected = true;
            self.h = h * (SAFETY * err.powf(-0.2)).max(FAC_MIN);
        }
    }
}
