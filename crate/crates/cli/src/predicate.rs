//! Row-subsampling predicates: a minimal comparison/boolean grammar over
//! column names, sufficient to express every sample restriction as
//! configuration instead of code.
//!
//! Grammar (usual precedence, `&&` binds tighter than `||`):
//!
//! ```text
//! expr       := or
//! or         := and ("||" and)*
//! and        := atom ("&&" atom)*
//! atom       := "(" expr ")" | comparison
//! comparison := operand ("==" | "!=" | "<" | "<=" | ">" | ">=") operand
//! operand    := column-name | number
//! ```
//!
//! Operands name feature columns of the frame, or the reserved words
//! `margin`, `y`, and `w` for the running variable, outcome, and treatment.

use std::collections::BTreeSet;

use hetfx_core::AnalysisFrame;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn apply(self, a: f64, b: f64) -> bool {
        match self {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Column(String),
    Number(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Cmp {
        lhs: Operand,
        op: CmpOp,
        rhs: Operand,
    },
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
}

impl Expr {
    /// Parses a predicate expression.
    pub fn parse(text: &str) -> CliResult<Expr> {
        let tokens = tokenize(text)?;
        let mut p = Parser {
            text,
            tokens,
            pos: 0,
        };
        let expr = p.or_expr()?;
        if p.pos != p.tokens.len() {
            return Err(p.fail(format!(
                "unexpected `{}` after a complete expression",
                p.tokens[p.pos].0
            )));
        }
        Ok(expr)
    }

    /// Every column name the expression references.
    pub fn column_names(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_columns(&mut out);
        out
    }

    fn collect_columns<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            Expr::Cmp { lhs, rhs, .. } => {
                for operand in [lhs, rhs] {
                    if let Operand::Column(name) = operand {
                        out.insert(name.as_str());
                    }
                }
            }
            Expr::And(a, b) | Expr::Or(a, b) => {
                a.collect_columns(out);
                b.collect_columns(out);
            }
        }
    }

    /// Evaluates the predicate on every row, resolving column names against
    /// the frame (features first, then the reserved `margin`/`y`/`w`).
    pub fn mask(&self, frame: &AnalysisFrame) -> CliResult<Vec<bool>> {
        let bound = self.bind(frame)?;
        Ok((0..frame.n_rows()).map(|i| bound.eval(frame, i)).collect())
    }

    fn bind(&self, frame: &AnalysisFrame) -> CliResult<Bound> {
        Ok(match self {
            Expr::Cmp { lhs, op, rhs } => Bound::Cmp {
                lhs: bind_operand(lhs, frame)?,
                op: *op,
                rhs: bind_operand(rhs, frame)?,
            },
            Expr::And(a, b) => Bound::And(Box::new(a.bind(frame)?), Box::new(b.bind(frame)?)),
            Expr::Or(a, b) => Bound::Or(Box::new(a.bind(frame)?), Box::new(b.bind(frame)?)),
        })
    }
}

enum BoundOperand {
    Feature(usize),
    Margin,
    Outcome,
    Treatment,
    Number(f64),
}

impl BoundOperand {
    fn value(&self, frame: &AnalysisFrame, i: usize) -> f64 {
        match self {
            BoundOperand::Feature(j) => frame.xij(i, *j),
            BoundOperand::Margin => frame.margin()[i],
            BoundOperand::Outcome => frame.y()[i],
            BoundOperand::Treatment => frame.w()[i],
            BoundOperand::Number(v) => *v,
        }
    }
}

enum Bound {
    Cmp {
        lhs: BoundOperand,
        op: CmpOp,
        rhs: BoundOperand,
    },
    And(Box<Bound>, Box<Bound>),
    Or(Box<Bound>, Box<Bound>),
}

impl Bound {
    fn eval(&self, frame: &AnalysisFrame, i: usize) -> bool {
        match self {
            Bound::Cmp { lhs, op, rhs } => op.apply(lhs.value(frame, i), rhs.value(frame, i)),
            Bound::And(a, b) => a.eval(frame, i) && b.eval(frame, i),
            Bound::Or(a, b) => a.eval(frame, i) || b.eval(frame, i),
        }
    }
}

fn bind_operand(operand: &Operand, frame: &AnalysisFrame) -> CliResult<BoundOperand> {
    Ok(match operand {
        Operand::Number(v) => BoundOperand::Number(*v),
        Operand::Column(name) => {
            if let Some(j) = frame.column_index(name) {
                BoundOperand::Feature(j)
            } else {
                match name.as_str() {
                    "margin" => BoundOperand::Margin,
                    "y" => BoundOperand::Outcome,
                    "w" => BoundOperand::Treatment,
                    other => {
                        return Err(CliError::Config(format!(
                            "predicate references unknown column `{other}` \
                             (features plus `margin`, `y`, `w` are allowed)"
                        )))
                    }
                }
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Number(f64),
    Op(CmpOp),
    AndAnd,
    OrOr,
    LParen,
    RParen,
}

impl std::fmt::Display for Token {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Token::Ident(s) => write!(f, "{s}"),
            Token::Number(v) => write!(f, "{v}"),
            Token::Op(op) => {
                let s = match op {
                    CmpOp::Eq => "==",
                    CmpOp::Ne => "!=",
                    CmpOp::Lt => "<",
                    CmpOp::Le => "<=",
                    CmpOp::Gt => ">",
                    CmpOp::Ge => ">=",
                };
                write!(f, "{s}")
            }
            Token::AndAnd => write!(f, "&&"),
            Token::OrOr => write!(f, "||"),
            Token::LParen => write!(f, "("),
            Token::RParen => write!(f, ")"),
        }
    }
}

/// Tokens paired with their byte offset for error messages.
fn tokenize(text: &str) -> CliResult<Vec<(Token, usize)>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '(' => {
                out.push((Token::LParen, i));
                i += 1;
            }
            ')' => {
                out.push((Token::RParen, i));
                i += 1;
            }
            '&' | '|' => {
                if i + 1 < bytes.len() && bytes[i + 1] == bytes[i] {
                    out.push((
                        if c == '&' { Token::AndAnd } else { Token::OrOr },
                        i,
                    ));
                    i += 2;
                } else {
                    return Err(parse_error(text, i, format!("single `{c}` (use `{c}{c}`)")));
                }
            }
            '=' | '!' => {
                if i + 1 < bytes.len() && bytes[i + 1] == b'=' {
                    out.push((
                        Token::Op(if c == '=' { CmpOp::Eq } else { CmpOp::Ne }),
                        i,
                    ));
                    i += 2;
                } else {
                    return Err(parse_error(text, i, format!("single `{c}` (use `{c}=`)")));
                }
            }
            '<' | '>' => {
                let wide = i + 1 < bytes.len() && bytes[i + 1] == b'=';
                let op = match (c, wide) {
                    ('<', false) => CmpOp::Lt,
                    ('<', true) => CmpOp::Le,
                    ('>', false) => CmpOp::Gt,
                    (_, true) => CmpOp::Ge,
                    _ => unreachable!(),
                };
                out.push((Token::Op(op), i));
                i += if wide { 2 } else { 1 };
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push((Token::Ident(text[start..i].to_string()), start));
            }
            _ if c.is_ascii_digit() || c == '-' || c == '.' => {
                let start = i;
                i += 1;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_digit()
                        || matches!(bytes[i], b'.' | b'e' | b'E')
                        || (matches!(bytes[i], b'+' | b'-')
                            && matches!(bytes[i - 1], b'e' | b'E')))
                {
                    i += 1;
                }
                let raw = &text[start..i];
                let value: f64 = raw.parse().map_err(|_| {
                    parse_error(text, start, format!("`{raw}` is not a number"))
                })?;
                out.push((Token::Number(value), start));
            }
            other => return Err(parse_error(text, i, format!("unexpected `{other}`"))),
        }
    }
    Ok(out)
}

fn parse_error(text: &str, at: usize, what: String) -> CliError {
    CliError::Config(format!("predicate `{text}`: {what} at byte {at}"))
}

struct Parser<'a> {
    text: &'a str,
    tokens: Vec<(Token, usize)>,
    pos: usize,
}

impl Parser<'_> {
    fn fail(&self, what: String) -> CliError {
        let at = self
            .tokens
            .get(self.pos)
            .map(|t| t.1)
            .unwrap_or(self.text.len());
        parse_error(self.text, at, what)
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|t| &t.0)
    }

    fn or_expr(&mut self) -> CliResult<Expr> {
        let mut lhs = self.and_expr()?;
        while self.peek() == Some(&Token::OrOr) {
            self.pos += 1;
            let rhs = self.and_expr()?;
            lhs = Expr::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> CliResult<Expr> {
        let mut lhs = self.atom()?;
        while self.peek() == Some(&Token::AndAnd) {
            self.pos += 1;
            let rhs = self.atom()?;
            lhs = Expr::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> CliResult<Expr> {
        if self.peek() == Some(&Token::LParen) {
            self.pos += 1;
            let inner = self.or_expr()?;
            if self.peek() != Some(&Token::RParen) {
                return Err(self.fail("expected `)`".into()));
            }
            self.pos += 1;
            return Ok(inner);
        }
        let lhs = self.operand()?;
        let op = match self.peek() {
            Some(Token::Op(op)) => *op,
            _ => return Err(self.fail("expected a comparison operator".into())),
        };
        self.pos += 1;
        let rhs = self.operand()?;
        Ok(Expr::Cmp { lhs, op, rhs })
    }

    fn operand(&mut self) -> CliResult<Operand> {
        let operand = match self.peek() {
            Some(Token::Ident(name)) => Operand::Column(name.clone()),
            Some(Token::Number(v)) => Operand::Number(*v),
            _ => return Err(self.fail("expected a column name or number".into())),
        };
        self.pos += 1;
        Ok(operand)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hetfx_core::ColumnSpec;

    fn test_frame() -> AnalysisFrame {
        AnalysisFrame::from_parts(
            vec![
                ColumnSpec::dummy("employed_lag"),
                ColumnSpec::dummy("government_lag"),
                ColumnSpec::continuous("age"),
            ],
            vec![
                vec![1.0, 1.0, 0.0, 1.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![30.0, 40.0, 50.0, 60.0],
            ],
            vec![0.5, 1.5, 2.5, 3.5],
            vec![0.0, 1.0, 0.0, 1.0],
            &["a".into(), "a".into(), "b".into(), "b".into()],
            vec![2.0, 2.0, -3.0, -3.0],
            None,
        )
        .unwrap()
    }

    #[test]
    fn private_sector_restriction_selects_the_expected_rows() {
        let expr = Expr::parse("employed_lag == 1 && government_lag == 0").unwrap();
        let mask = expr.mask(&test_frame()).unwrap();
        assert_eq!(mask, vec![true, false, false, true]);
    }

    #[test]
    fn and_binds_tighter_than_or() {
        let expr = Expr::parse("age < 35 || employed_lag == 1 && government_lag == 1").unwrap();
        // row 0: age<35 true; row 1: employed&&government true; rows 2,3 false
        let mask = expr.mask(&test_frame()).unwrap();
        assert_eq!(mask, vec![true, true, false, false]);
    }

    #[test]
    fn parentheses_override_precedence() {
        let expr = Expr::parse("(age < 35 || employed_lag == 1) && government_lag == 1").unwrap();
        let mask = expr.mask(&test_frame()).unwrap();
        assert_eq!(mask, vec![false, true, false, false]);
    }

    #[test]
    fn reserved_names_reach_margin_outcome_and_treatment() {
        let frame = test_frame();
        assert_eq!(
            Expr::parse("margin > 0").unwrap().mask(&frame).unwrap(),
            vec![true, true, false, false]
        );
        assert_eq!(
            Expr::parse("w == 1").unwrap().mask(&frame).unwrap(),
            vec![false, true, false, true]
        );
        assert_eq!(
            Expr::parse("y >= 2.5").unwrap().mask(&frame).unwrap(),
            vec![false, false, true, true]
        );
    }

    #[test]
    fn negative_and_scientific_literals_parse() {
        let expr = Expr::parse("margin >= -2.5e0").unwrap();
        let mask = expr.mask(&test_frame()).unwrap();
        assert_eq!(mask, vec![true, true, false, false]);
    }

    #[test]
    fn unknown_column_is_a_config_error_naming_the_column() {
        let expr = Expr::parse("tenure == 1").unwrap();
        let err = expr.mask(&test_frame()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("tenure"), "{err}");
    }

    #[test]
    fn malformed_expressions_are_rejected_with_a_position() {
        for bad in [
            "age <",
            "age 35",
            "&& age < 35",
            "age < 35 |",
            "(age < 35",
            "age = 35",
            "age < 3..5",
        ] {
            let err = Expr::parse(bad).unwrap_err();
            assert_eq!(err.exit_code(), 2, "`{bad}` should be a config error");
            assert!(err.to_string().contains("byte"), "`{bad}`: {err}");
        }
    }

    #[test]
    fn complement_predicates_partition_the_frame() {
        let frame = test_frame();
        let a = Expr::parse("age <= 45").unwrap().mask(&frame).unwrap();
        let not_a = Expr::parse("age > 45").unwrap().mask(&frame).unwrap();
        let total = a.iter().filter(|k| **k).count() + not_a.iter().filter(|k| **k).count();
        assert_eq!(total, frame.n_rows());
    }

    #[test]
    fn column_names_are_collected_for_upfront_validation() {
        let expr = Expr::parse("a == 1 && (b < 2 || c >= 3)").unwrap();
        let names: Vec<&str> = expr.column_names().into_iter().collect();
        assert_eq!(names, vec!["a", "b", "c"]);
    }
}
