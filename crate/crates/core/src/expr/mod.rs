//! Scalar math expressions over a fixed list of named variables.
//!
//! Systems and certificates are supplied as text (`"4*r^2 + r^5*sin(th)"`), parsed once
//! against the declared state names, and then evaluated or differentiated many times.
//! Gradients are exact: they come from forward-mode dual numbers, never from finite
//! differences.
//!
//! Grammar (frozen for config-file compatibility):
//!
//! ```text
//! expr    := sum
//! sum     := product (('+' | '-') product)*
//! product := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' unary)?          right-associative
//! atom    := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ident   := [A-Za-z][A-Za-z0-9_]*
//! ```
//!
//! `-x^2` parses as `-(x^2)` and `2^3^2` as `2^(3^2)`.

mod dual;
mod parse;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use dual::Dual;

/// Errors raised while parsing, evaluating or differentiating an expression.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at position {pos}")]
    UnknownIdentifier { name: String, pos: usize },
    #[error("unknown function `{name}` at position {pos}")]
    UnknownFunction { name: String, pos: usize },
    #[error("function `{name}` takes {expected} argument(s), got {got} (position {pos})")]
    Arity {
        name: String,
        expected: usize,
        got: usize,
        pos: usize,
    },
    #[error("invalid variable list: {0}")]
    InvalidVariables(String),
    #[error("expected {expected} bindings, got {got}")]
    BindingLength { expected: usize, got: usize },
    #[error("domain error in `{node}`: {reason}")]
    Domain { node: String, reason: String },
    #[error("`{node}` is not differentiable here: {reason}")]
    NonDifferentiable { node: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Abs,
    Pow,
}

impl Func {
    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "pow" => Func::Pow,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Pow => "pow",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Pow => 2,
            _ => 1,
        }
    }
}

/// Expression tree node. Variables are stored by index into the owning [`Expr`]'s
/// variable list.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(usize),
    Neg(Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// A parsed expression together with the variable names it was parsed against.
///
/// Immutable after construction; evaluation is pure and `Expr` is `Send + Sync`.
#[derive(Debug, Clone)]
pub struct Expr {
    root: Node,
    vars: Arc<[String]>,
}

impl Expr {
    /// Parses `source` against the ordered variable list.
    pub fn parse<S: AsRef<str>>(source: &str, variables: &[S]) -> Result<Expr, ExprError> {
        let vars = validate_variables(variables)?;
        let root = parse::Parser::new(source, &vars)?.parse()?;
        Ok(Expr { root, vars })
    }

    /// Builds a constant expression over `variables` without going through text.
    pub fn constant<S: AsRef<str>>(value: f64, variables: &[S]) -> Result<Expr, ExprError> {
        Ok(Expr {
            root: Node::Const(value),
            vars: validate_variables(variables)?,
        })
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn variables(&self) -> &[String] {
        &self.vars
    }

    pub fn arity(&self) -> usize {
        self.vars.len()
    }

    /// True when the tree contains no variable references.
    pub fn is_constant(&self) -> bool {
        fn walk(node: &Node) -> bool {
            match node {
                Node::Const(_) => true,
                Node::Var(_) => false,
                Node::Neg(a) => walk(a),
                Node::Binary(_, a, b) => walk(a) && walk(b),
                Node::Call(_, args) => args.iter().all(walk),
            }
        }
        walk(&self.root)
    }

    fn check_bindings(&self, x: &[f64]) -> Result<(), ExprError> {
        if x.len() != self.vars.len() {
            return Err(ExprError::BindingLength {
                expected: self.vars.len(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Evaluates the expression at `x` (one value per declared variable).
    pub fn eval(&self, x: &[f64]) -> Result<f64, ExprError> {
        self.check_bindings(x)?;
        eval_node(&self.root, x, &self.vars)
    }

    /// Value and exact gradient in one forward pass.
    pub fn eval_dual(&self, x: &[f64]) -> Result<Dual, ExprError> {
        self.check_bindings(x)?;
        dual::eval(&self.root, x, &self.vars)
    }

    /// Exact gradient with respect to every declared variable.
    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>, ExprError> {
        Ok(self.eval_dual(x)?.partials)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(f, &self.root, &self.vars)
    }
}

/// Renders a subtree with full parenthesisation; the output re-parses to the same tree.
pub(crate) fn render(node: &Node, vars: &[String]) -> String {
    struct Show<'a>(&'a Node, &'a [String]);
    impl fmt::Display for Show<'_> {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            write_node(f, self.0, self.1)
        }
    }
    Show(node, vars).to_string()
}

fn write_node(f: &mut fmt::Formatter<'_>, node: &Node, vars: &[String]) -> fmt::Result {
    match node {
        Node::Const(c) if *c < 0.0 => write!(f, "(-{:?})", -c),
        Node::Const(c) => write!(f, "{c:?}"),
        Node::Var(i) => write!(f, "{}", vars[*i]),
        Node::Neg(a) => {
            write!(f, "(-")?;
            write_node(f, a, vars)?;
            write!(f, ")")
        }
        Node::Binary(op, a, b) => {
            write!(f, "(")?;
            write_node(f, a, vars)?;
            write!(f, " {} ", op.symbol())?;
            write_node(f, b, vars)?;
            write!(f, ")")
        }
        Node::Call(func, args) => {
            write!(f, "{}(", func.name())?;
            for (k, arg) in args.iter().enumerate() {
                if k > 0 {
                    write!(f, ", ")?;
                }
                write_node(f, arg, vars)?;
            }
            write!(f, ")")
        }
    }
}

fn validate_variables<S: AsRef<str>>(variables: &[S]) -> Result<Arc<[String]>, ExprError> {
    let mut names: Vec<String> = Vec::with_capacity(variables.len());
    for v in variables {
        let v = v.as_ref();
        if !is_identifier(v) {
            return Err(ExprError::InvalidVariables(format!("`{v}` is not an identifier")));
        }
        if names.iter().any(|n| n == v) {
            return Err(ExprError::InvalidVariables(format!("`{v}` declared twice")));
        }
        names.push(v.to_string());
    }
    Ok(names.into())
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn domain(node: &Node, vars: &[String], reason: impl Into<String>) -> ExprError {
    ExprError::Domain {
        node: render(node, vars),
        reason: reason.into(),
    }
}

pub(crate) fn pow_value(base: f64, exp: f64) -> Result<f64, &'static str> {
    if base < 0.0 && exp.fract() != 0.0 {
        return Err("negative base with non-integer exponent");
    }
    if base == 0.0 && exp < 0.0 {
        return Err("zero base with negative exponent");
    }
    Ok(base.powf(exp))
}

fn eval_node(node: &Node, x: &[f64], vars: &[String]) -> Result<f64, ExprError> {
    let value = match node {
        Node::Const(c) => *c,
        Node::Var(i) => x[*i],
        Node::Neg(a) => -eval_node(a, x, vars)?,
        Node::Binary(op, a, b) => {
            let a = eval_node(a, x, vars)?;
            let b = eval_node(b, x, vars)?;
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => {
                    if b == 0.0 {
                        return Err(domain(node, vars, "division by zero"));
                    }
                    a / b
                }
                BinOp::Pow => pow_value(a, b).map_err(|r| domain(node, vars, r))?,
            }
        }
        Node::Call(func, args) => {
            let a = eval_node(&args[0], x, vars)?;
            match func {
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Tan => {
                    if a.cos() == 0.0 {
                        return Err(domain(node, vars, "tan pole"));
                    }
                    a.tan()
                }
                Func::Exp => a.exp(),
                Func::Log => {
                    if a <= 0.0 {
                        return Err(domain(node, vars, "log of non-positive value"));
                    }
                    a.ln()
                }
                Func::Sqrt => {
                    if a < 0.0 {
                        return Err(domain(node, vars, "sqrt of negative value"));
                    }
                    a.sqrt()
                }
                Func::Abs => a.abs(),
                Func::Pow => {
                    let b = eval_node(&args[1], x, vars)?;
                    pow_value(a, b).map_err(|r| domain(node, vars, r))?
                }
            }
        }
    };
    if !value.is_finite() {
        return Err(domain(node, vars, "non-finite result"));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn eval(src: &str, vars: &[&str], x: &[f64]) -> f64 {
        Expr::parse(src, vars).unwrap().eval(x).unwrap()
    }

    #[test]
    fn precedence_fixtures() {
        assert_eq!(eval("2+3*4", &[], &[]), 14.0);
        assert_eq!(eval("2^3^2", &[], &[]), 512.0);
        assert_eq!(eval("-2^2", &[], &[]), -4.0);
        assert_eq!(eval("(2+3)*4", &[], &[]), 20.0);
        assert_eq!(eval("8/4/2", &[], &[]), 1.0);
        assert_eq!(eval("2^-1", &[], &[]), 0.5);
        assert_eq!(eval("-2*3", &[], &[]), -6.0);
        assert_eq!(eval("1e-3*1000", &[], &[]), 1.0);
    }

    #[test]
    fn parses_and_evaluates_well_formed_inputs() {
        let e = Expr::parse("x1^2 + sin(x2)", &["x1", "x2"]).unwrap();
        assert_eq!(e.arity(), 2);
        assert_eq!(eval("x1*x2", &["x1", "x2"], &[2.0, 3.0]), 6.0);
        let v = eval("4*r^2 + r^5*sin(th)", &["r", "th"], &[1.0, FRAC_PI_2]);
        assert!((v - 5.0).abs() < 1e-15);
        assert_eq!(eval("1 - r^2", &["r", "th"], &[1.0, 0.3]), 0.0);
        assert_eq!(eval("pow(x, 3)", &["x"], &[2.0]), 8.0);
    }

    #[test]
    fn truncated_input_reports_position() {
        let err = Expr::parse("1 - ", &["x1"]).unwrap_err();
        assert_eq!(
            err,
            ExprError::Syntax {
                pos: 4,
                msg: "unexpected end of input".into()
            }
        );
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            Expr::parse("x + y", &["x"]),
            Err(ExprError::UnknownIdentifier { pos: 4, .. })
        ));
        assert!(matches!(
            Expr::parse("foo(x)", &["x"]),
            Err(ExprError::UnknownFunction { pos: 0, .. })
        ));
        assert!(matches!(
            Expr::parse("pow(x)", &["x"]),
            Err(ExprError::Arity { expected: 2, got: 1, .. })
        ));
        assert!(matches!(
            Expr::parse("sin(x, x)", &["x"]),
            Err(ExprError::Arity { expected: 1, got: 2, .. })
        ));
        assert!(matches!(Expr::parse("", &["x"]), Err(ExprError::Syntax { pos: 0, .. })));
        assert!(matches!(Expr::parse("x $ 2", &["x"]), Err(ExprError::Syntax { pos: 2, .. })));
        assert!(matches!(Expr::parse("(x", &["x"]), Err(ExprError::Syntax { pos: 2, .. })));
        assert!(matches!(Expr::parse("x 2", &["x"]), Err(ExprError::Syntax { pos: 2, .. })));
        assert!(Expr::parse("x", &["x", "x"]).is_err());
        assert!(Expr::parse("x", &["1x"]).is_err());
    }

    #[test]
    fn domain_errors() {
        let e = Expr::parse("sqrt(x)", &["x"]).unwrap();
        assert!(matches!(e.eval(&[-1.0]), Err(ExprError::Domain { .. })));
        let e = Expr::parse("log(x)", &["x"]).unwrap();
        assert!(matches!(e.eval(&[0.0]), Err(ExprError::Domain { .. })));
        let e = Expr::parse("1/x", &["x"]).unwrap();
        match e.eval(&[0.0]) {
            Err(ExprError::Domain { node, .. }) => assert_eq!(node, "(1.0 / x)"),
            other => panic!("{other:?}"),
        }
        let e = Expr::parse("x^0.5", &["x"]).unwrap();
        assert!(matches!(e.eval(&[-4.0]), Err(ExprError::Domain { .. })));
        assert_eq!(e.eval(&[4.0]).unwrap(), 2.0);
        let e = Expr::parse("x^3", &["x"]).unwrap();
        assert_eq!(e.eval(&[-2.0]).unwrap(), -8.0);
        let e = Expr::parse("x^(-1/2)", &["x"]).unwrap();
        assert!(matches!(e.eval(&[0.0]), Err(ExprError::Domain { .. })));
        assert!(matches!(
            Expr::parse("x", &["x"]).unwrap().eval(&[1.0, 2.0]),
            Err(ExprError::BindingLength { .. })
        ));
    }

    #[test]
    fn gradients_match_analytic_values() {
        let g = Expr::parse("x1^2", &["x1"]).unwrap().grad(&[3.0]).unwrap();
        assert_eq!(g, vec![6.0]);
        let g = Expr::parse("1 - r^2", &["r", "th"]).unwrap().grad(&[0.5, 1.0]).unwrap();
        assert_eq!(g, vec![-1.0, 0.0]);
        let g = Expr::parse("4*r^2 + r^5*sin(th)", &["r", "th"])
            .unwrap()
            .grad(&[1.0, 0.0])
            .unwrap();
        assert!((g[0] - 8.0).abs() < 1e-14 && (g[1] - 1.0).abs() < 1e-14, "{g:?}");
    }

    #[test]
    fn abs_kink_is_flagged() {
        let e = Expr::parse("abs(x)", &["x"]).unwrap();
        assert!(matches!(e.grad(&[0.0]), Err(ExprError::NonDifferentiable { .. })));
        assert_eq!(e.grad(&[-2.0]).unwrap(), vec![-1.0]);
        // Constant argument: no kink in x.
        let e = Expr::parse("abs(0*x) + x", &["x"]).unwrap();
        assert_eq!(e.grad(&[0.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn display_round_trips() {
        let src = "-x^2 + 3*sin(y)/(1+x^2) - pow(y, 2)^-1.5e-1";
        let e = Expr::parse(src, &["x", "y"]).unwrap();
        let back = Expr::parse(&e.to_string(), &["x", "y"]).unwrap();
        assert_eq!(e.root(), back.root());
    }
}
