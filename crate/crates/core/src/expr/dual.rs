use super::{pow_value, render, BinOp, ExprError, Func, Node};

/// A value together with its partial derivatives with respect to every declared variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Dual {
    pub value: f64,
    pub partials: Vec<f64>,
}

impl Dual {
    pub fn constant(value: f64, n: usize) -> Dual {
        Dual {
            value,
            partials: vec![0.0; n],
        }
    }

    pub fn variable(value: f64, index: usize, n: usize) -> Dual {
        let mut partials = vec![0.0; n];
        partials[index] = 1.0;
        Dual { value, partials }
    }

    fn has_derivative(&self) -> bool {
        self.partials.iter().any(|d| *d != 0.0)
    }

    /// `g(self)` with `g(self.value) = value` and `g'(self.value) = slope`.
    fn chain(mut self, value: f64, slope: f64) -> Dual {
        for d in &mut self.partials {
            *d *= slope;
        }
        self.value = value;
        self
    }

    fn combine(mut self, rhs: &Dual, value: f64, ds: f64, dr: f64) -> Dual {
        for (d, r) in self.partials.iter_mut().zip(&rhs.partials) {
            *d = ds * *d + dr * r;
        }
        self.value = value;
        self
    }
}

pub(super) fn eval(node: &Node, x: &[f64], vars: &[String]) -> Result<Dual, ExprError> {
    let n = x.len();
    let domain = |reason: &str| ExprError::Domain {
        node: render(node, vars),
        reason: reason.into(),
    };
    let kink = |reason: &str| ExprError::NonDifferentiable {
        node: render(node, vars),
        reason: reason.into(),
    };

    let out = match node {
        Node::Const(c) => Dual::constant(*c, n),
        Node::Var(i) => Dual::variable(x[*i], *i, n),
        Node::Neg(a) => {
            let a = eval(a, x, vars)?;
            let v = -a.value;
            a.chain(v, -1.0)
        }
        Node::Binary(op, a, b) => {
            let a = eval(a, x, vars)?;
            let b = eval(b, x, vars)?;
            match op {
                BinOp::Add => {
                    let v = a.value + b.value;
                    a.combine(&b, v, 1.0, 1.0)
                }
                BinOp::Sub => {
                    let v = a.value - b.value;
                    a.combine(&b, v, 1.0, -1.0)
                }
                BinOp::Mul => {
                    let (av, bv) = (a.value, b.value);
                    a.combine(&b, av * bv, bv, av)
                }
                BinOp::Div => {
                    if b.value == 0.0 {
                        return Err(domain("division by zero"));
                    }
                    let (av, bv) = (a.value, b.value);
                    a.combine(&b, av / bv, 1.0 / bv, -av / (bv * bv))
                }
                BinOp::Pow => pow(a, b, &domain, &kink)?,
            }
        }
        Node::Call(func, args) => {
            let a = eval(&args[0], x, vars)?;
            let v = a.value;
            match func {
                Func::Sin => a.chain(v.sin(), v.cos()),
                Func::Cos => a.chain(v.cos(), -v.sin()),
                Func::Tan => {
                    let c = v.cos();
                    if c == 0.0 {
                        return Err(domain("tan pole"));
                    }
                    a.chain(v.tan(), 1.0 / (c * c))
                }
                Func::Exp => {
                    let e = v.exp();
                    a.chain(e, e)
                }
                Func::Log => {
                    if v <= 0.0 {
                        return Err(domain("log of non-positive value"));
                    }
                    a.chain(v.ln(), 1.0 / v)
                }
                Func::Sqrt => {
                    if v < 0.0 {
                        return Err(domain("sqrt of negative value"));
                    }
                    if v == 0.0 {
                        if a.has_derivative() {
                            return Err(kink("sqrt at 0"));
                        }
                        a.chain(0.0, 0.0)
                    } else {
                        let s = v.sqrt();
                        a.chain(s, 0.5 / s)
                    }
                }
                Func::Abs => {
                    if v == 0.0 && a.has_derivative() {
                        return Err(kink("abs at 0"));
                    }
                    a.chain(v.abs(), if v < 0.0 { -1.0 } else { 1.0 })
                }
                Func::Pow => {
                    let b = eval(&args[1], x, vars)?;
                    pow(a, b, &domain, &kink)?
                }
            }
        }
    };
    if !out.value.is_finite() {
        return Err(domain("non-finite result"));
    }
    if out.partials.iter().any(|d| !d.is_finite()) {
        return Err(kink("non-finite derivative"));
    }
    Ok(out)
}

fn pow(
    a: Dual,
    b: Dual,
    domain: &dyn Fn(&str) -> ExprError,
    kink: &dyn Fn(&str) -> ExprError,
) -> Result<Dual, ExprError> {
    let (av, bv) = (a.value, b.value);
    let value = pow_value(av, bv).map_err(domain)?;
    if !b.has_derivative() {
        // d(a^c) = c a^(c-1) da
        if !a.has_derivative() {
            return Ok(a.chain(value, 0.0));
        }
        if bv == 0.0 {
            return Ok(a.chain(value, 0.0));
        }
        if av == 0.0 && bv < 1.0 {
            return Err(kink("power with exponent below 1 at 0"));
        }
        let slope = bv * pow_value(av, bv - 1.0).map_err(domain)?;
        return Ok(a.chain(value, slope));
    }
    // d(a^b) = b a^(b-1) da + a^b ln(a) db; needs a > 0.
    if av <= 0.0 {
        return Err(kink("variable exponent with non-positive base"));
    }
    let da = bv * av.powf(bv - 1.0);
    let db = value * av.ln();
    Ok(a.combine(&b, value, da, db))
}
