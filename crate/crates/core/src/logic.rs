//! The PCTL fragment used to state safety constraints.
//!
//! State formulas are built from `true`, atoms, negation and conjunction,
//! plus a probabilistic operator over path formulas. Disjunction,
//! implication, `false` and the bounded `G`/`F` operators exist only in the
//! concrete syntax and are desugared while parsing, so the AST holds the
//! core grammar alone.
//!
//! Concrete syntax, loosest binding first:
//!
//! ```text
//! formula := or ("=>" formula)?          right-associative
//! or      := and ("|" and)*
//! and     := unary ("&" unary)*
//! unary   := "!" unary | "true" | "false" | atom | "(" formula ")"
//!          | "P" "[" num "," num "]" "(" path ")"
//! path    := "X" formula | "G<=" n formula | "F<=" n formula
//!          | formula "U" formula | formula "U<=" n formula
//! ```

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::env::LabelSet;

/// Closed probability interval `[lo, hi]` ⊆ [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    lo: f64,
    hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Option<Self> {
        (0.0 <= lo && lo <= hi && hi <= 1.0).then_some(Self { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn contains(&self, p: f64) -> bool {
        self.lo <= p && p <= self.hi
    }

    /// `[1 - hi, 1 - lo]`, the interval of the complementary event.
    pub fn complement(&self) -> Self {
        Self {
            lo: 1.0 - self.hi,
            hi: 1.0 - self.lo,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StateFormula {
    True,
    Atom(String),
    Not(Box<StateFormula>),
    And(Box<StateFormula>, Box<StateFormula>),
    Prob(Interval, Box<PathFormula>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PathFormula {
    Next(StateFormula),
    Until(StateFormula, StateFormula),
    BoundedUntil(StateFormula, StateFormula, u64),
}

impl StateFormula {
    pub fn atom(name: &str) -> Self {
        StateFormula::Atom(name.to_string())
    }

    pub fn not(f: StateFormula) -> Self {
        StateFormula::Not(Box::new(f))
    }

    pub fn and(a: StateFormula, b: StateFormula) -> Self {
        StateFormula::And(Box::new(a), Box::new(b))
    }

    /// `a | b`, encoded as `!(!a & !b)`.
    pub fn or(a: StateFormula, b: StateFormula) -> Self {
        Self::not(Self::and(Self::not(a), Self::not(b)))
    }

    /// `a => b`, encoded as `!(a & !b)`.
    pub fn implies(a: StateFormula, b: StateFormula) -> Self {
        Self::not(Self::and(a, Self::not(b)))
    }

    pub fn prob(interval: Interval, path: PathFormula) -> Self {
        StateFormula::Prob(interval, Box::new(path))
    }

    pub fn depth(&self) -> usize {
        match self {
            StateFormula::True | StateFormula::Atom(_) => 1,
            StateFormula::Not(f) => 1 + f.depth(),
            StateFormula::And(a, b) => 1 + a.depth().max(b.depth()),
            StateFormula::Prob(_, p) => 1 + p.depth(),
        }
    }

    pub fn is_probabilistic(&self) -> bool {
        match self {
            StateFormula::True | StateFormula::Atom(_) => false,
            StateFormula::Not(f) => f.is_probabilistic(),
            StateFormula::And(a, b) => a.is_probabilistic() || b.is_probabilistic(),
            StateFormula::Prob(..) => true,
        }
    }

    /// Atoms mentioned anywhere in the formula, in first-occurrence order.
    pub fn atoms(&self) -> Vec<&str> {
        fn walk<'a>(f: &'a StateFormula, out: &mut Vec<&'a str>) {
            match f {
                StateFormula::True => {}
                StateFormula::Atom(a) => {
                    if !out.contains(&a.as_str()) {
                        out.push(a);
                    }
                }
                StateFormula::Not(g) => walk(g, out),
                StateFormula::And(a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
                StateFormula::Prob(_, p) => match &**p {
                    PathFormula::Next(g) => walk(g, out),
                    PathFormula::Until(a, b) | PathFormula::BoundedUntil(a, b, _) => {
                        walk(a, out);
                        walk(b, out);
                    }
                },
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }
}

impl PathFormula {
    fn depth(&self) -> usize {
        match self {
            PathFormula::Next(f) => 1 + f.depth(),
            PathFormula::Until(a, b) | PathFormula::BoundedUntil(a, b, _) => {
                1 + a.depth().max(b.depth())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Printing

impl fmt::Display for StateFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateFormula::True => f.write_str("true"),
            StateFormula::Atom(a) => f.write_str(a),
            StateFormula::Not(g) => write!(f, "!{g}"),
            StateFormula::And(a, b) => write!(f, "({a} & {b})"),
            StateFormula::Prob(j, p) => write!(f, "P[{},{}]({p})", j.lo, j.hi),
        }
    }
}

impl fmt::Display for PathFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PathFormula::Next(g) => write!(f, "X {g}"),
            PathFormula::Until(a, b) => write!(f, "{a} U {b}"),
            PathFormula::BoundedUntil(a, b, n) => write!(f, "{a} U<={n} {b}"),
        }
    }
}

/// Canonical text for `formula`; parsing it gives back the same AST.
pub fn format_state_formula(formula: &StateFormula) -> String {
    formula.to_string()
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{kind} at byte {position}")]
pub struct ParseError {
    pub position: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseErrorKind {
    #[error("empty formula")]
    Empty,
    #[error("unknown operator {0:?}")]
    UnknownOperator(String),
    #[error("expected {expected}, found {found}")]
    Unexpected { expected: &'static str, found: String },
    #[error("malformed probability interval: {0}")]
    MalformedInterval(String),
    #[error("invalid number {0:?}")]
    InvalidNumber(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    True,
    False,
    Ident(String),
    Number(String),
    Not,
    And,
    Or,
    Implies,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Le,
    Next,
    Until,
    Globally,
    Finally,
    Prob,
    End,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Token::True => "`true`",
            Token::False => "`false`",
            Token::Ident(name) => return write!(f, "atom `{name}`"),
            Token::Number(n) => return write!(f, "number `{n}`"),
            Token::Not => "`!`",
            Token::And => "`&`",
            Token::Or => "`|`",
            Token::Implies => "`=>`",
            Token::LParen => "`(`",
            Token::RParen => "`)`",
            Token::LBracket => "`[`",
            Token::RBracket => "`]`",
            Token::Comma => "`,`",
            Token::Le => "`<=`",
            Token::Next => "`X`",
            Token::Until => "`U`",
            Token::Globally => "`G`",
            Token::Finally => "`F`",
            Token::Prob => "`P`",
            Token::End => "end of input",
        };
        f.write_str(s)
    }
}

fn tokenize(text: &str) -> Result<Vec<(Token, usize)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let single = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'!' => Some(Token::Not),
            b'&' => Some(Token::And),
            b'|' => Some(Token::Or),
            b'(' => Some(Token::LParen),
            b')' => Some(Token::RParen),
            b'[' => Some(Token::LBracket),
            b']' => Some(Token::RBracket),
            b',' => Some(Token::Comma),
            b'X' => Some(Token::Next),
            b'U' => Some(Token::Until),
            b'G' => Some(Token::Globally),
            b'F' => Some(Token::Finally),
            b'P' => Some(Token::Prob),
            _ => None,
        };
        if let Some(tok) = single {
            out.push((tok, start));
            i += 1;
            continue;
        }
        if text[i..].starts_with("=>") {
            out.push((Token::Implies, start));
            i += 2;
        } else if text[i..].starts_with("<=") {
            out.push((Token::Le, start));
            i += 2;
        } else if c.is_ascii_digit() || c == b'.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            out.push((Token::Number(text[start..i].to_string()), start));
        } else if c.is_ascii_lowercase() {
            while i < bytes.len()
                && (bytes[i].is_ascii_lowercase() || bytes[i].is_ascii_digit() || bytes[i] == b'-')
            {
                i += 1;
            }
            let word = &text[start..i];
            let tok = match word {
                "true" => Token::True,
                "false" => Token::False,
                _ => Token::Ident(word.to_string()),
            };
            out.push((tok, start));
        } else {
            let ch = text[i..].chars().next().unwrap_or('?');
            // Swallow the rest of an operator-looking run for a better message.
            let mut end = i + ch.len_utf8();
            while end < bytes.len() && b"=<>-~^%$#@*+/\\:;".contains(&bytes[end]) {
                end += 1;
            }
            return Err(ParseError {
                position: start,
                kind: ParseErrorKind::UnknownOperator(text[start..end].to_string()),
            });
        }
    }
    out.push((Token::End, text.len()));
    Ok(out)
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos].0
    }

    fn offset(&self) -> usize {
        self.tokens[self.pos].1
    }

    fn bump(&mut self) -> Token {
        let tok = self.tokens[self.pos].0.clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        tok
    }

    fn unexpected<T>(&self, expected: &'static str) -> Result<T, ParseError> {
        Err(ParseError {
            position: self.offset(),
            kind: ParseErrorKind::Unexpected {
                expected,
                found: self.peek().to_string(),
            },
        })
    }

    fn expect(&mut self, tok: Token, expected: &'static str) -> Result<(), ParseError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            self.unexpected(expected)
        }
    }

    fn implication(&mut self) -> Result<StateFormula, ParseError> {
        let lhs = self.disjunction()?;
        if *self.peek() == Token::Implies {
            self.bump();
            let rhs = self.implication()?;
            return Ok(StateFormula::implies(lhs, rhs));
        }
        Ok(lhs)
    }

    fn disjunction(&mut self) -> Result<StateFormula, ParseError> {
        let mut lhs = self.conjunction()?;
        while *self.peek() == Token::Or {
            self.bump();
            let rhs = self.conjunction()?;
            lhs = StateFormula::or(lhs, rhs);
        }
        Ok(lhs)
    }

    fn conjunction(&mut self) -> Result<StateFormula, ParseError> {
        let mut lhs = self.unary()?;
        while *self.peek() == Token::And {
            self.bump();
            let rhs = self.unary()?;
            lhs = StateFormula::and(lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<StateFormula, ParseError> {
        match self.peek().clone() {
            Token::Not => {
                self.bump();
                Ok(StateFormula::not(self.unary()?))
            }
            Token::True => {
                self.bump();
                Ok(StateFormula::True)
            }
            Token::False => {
                self.bump();
                Ok(StateFormula::not(StateFormula::True))
            }
            Token::Ident(name) => {
                self.bump();
                Ok(StateFormula::Atom(name))
            }
            Token::LParen => {
                self.bump();
                let inner = self.implication()?;
                self.expect(Token::RParen, "`)`")?;
                Ok(inner)
            }
            Token::Prob => {
                self.bump();
                self.probabilistic()
            }
            _ => self.unexpected("a state formula"),
        }
    }

    fn number(&mut self) -> Result<(String, usize), ParseError> {
        let at = self.offset();
        match self.bump() {
            Token::Number(n) => Ok((n, at)),
            other => Err(ParseError {
                position: at,
                kind: ParseErrorKind::Unexpected {
                    expected: "a number",
                    found: other.to_string(),
                },
            }),
        }
    }

    fn probability(&mut self) -> Result<f64, ParseError> {
        let (text, at) = self.number()?;
        text.parse::<f64>().map_err(|_| ParseError {
            position: at,
            kind: ParseErrorKind::InvalidNumber(text),
        })
    }

    fn bound(&mut self) -> Result<u64, ParseError> {
        self.expect(Token::Le, "`<=` after the temporal operator")?;
        let (text, at) = self.number()?;
        text.parse::<u64>().map_err(|_| ParseError {
            position: at,
            kind: ParseErrorKind::InvalidNumber(text),
        })
    }

    fn probabilistic(&mut self) -> Result<StateFormula, ParseError> {
        let open = self.offset();
        self.expect(Token::LBracket, "`[` opening a probability interval")?;
        let lo = self.probability()?;
        self.expect(Token::Comma, "`,` inside the probability interval")?;
        let hi = self.probability()?;
        self.expect(Token::RBracket, "`]` closing the probability interval")?;
        let interval = Interval::new(lo, hi).ok_or_else(|| ParseError {
            position: open,
            kind: ParseErrorKind::MalformedInterval(alloc::format!(
                "[{lo},{hi}] is not a non-empty subinterval of [0,1]"
            )),
        })?;
        self.expect(Token::LParen, "`(` opening a path formula")?;
        let formula = match self.peek() {
            Token::Next => {
                self.bump();
                StateFormula::prob(interval, PathFormula::Next(self.implication()?))
            }
            Token::Globally => {
                self.bump();
                let n = self.bound()?;
                let body = self.implication()?;
                // P_J(G<=n Φ) = P_{1-J}(true U<=n !Φ)
                StateFormula::prob(
                    interval.complement(),
                    PathFormula::BoundedUntil(StateFormula::True, StateFormula::not(body), n),
                )
            }
            Token::Finally => {
                self.bump();
                let n = self.bound()?;
                let body = self.implication()?;
                StateFormula::prob(
                    interval,
                    PathFormula::BoundedUntil(StateFormula::True, body, n),
                )
            }
            _ => {
                let lhs = self.implication()?;
                self.expect(Token::Until, "`U` in a path formula")?;
                let path = if *self.peek() == Token::Le {
                    let n = self.bound()?;
                    PathFormula::BoundedUntil(lhs, self.implication()?, n)
                } else {
                    PathFormula::Until(lhs, self.implication()?)
                };
                StateFormula::prob(interval, path)
            }
        };
        self.expect(Token::RParen, "`)` closing the path formula")?;
        Ok(formula)
    }
}

pub fn parse_state_formula(text: &str) -> Result<StateFormula, ParseError> {
    let tokens = tokenize(text)?;
    if tokens.len() == 1 {
        return Err(ParseError {
            position: 0,
            kind: ParseErrorKind::Empty,
        });
    }
    let mut parser = Parser { tokens, pos: 0 };
    let formula = parser.implication()?;
    if *parser.peek() != Token::End {
        return parser.unexpected("end of input");
    }
    Ok(formula)
}

impl core::str::FromStr for StateFormula {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_state_formula(s)
    }
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("probabilistic operators are only checked statistically")]
    Probabilistic,
    #[error("unbounded until cannot be decided on a finite trace")]
    UnboundedUntil,
    #[error("empty trace")]
    EmptyTrace,
    #[error("next needs a trace of at least two states")]
    TraceTooShort,
}

/// Something that can answer "does atom `a` hold here?".
pub trait Valuation {
    fn holds(&self, atom: &str) -> bool;
}

impl Valuation for LabelSet {
    fn holds(&self, atom: &str) -> bool {
        self.contains(atom)
    }
}

impl<S: AsRef<str>> Valuation for [S] {
    fn holds(&self, atom: &str) -> bool {
        self.iter().any(|s| s.as_ref() == atom)
    }
}

impl<S: AsRef<str>> Valuation for Vec<S> {
    fn holds(&self, atom: &str) -> bool {
        self.as_slice().holds(atom)
    }
}

impl<V: Valuation + ?Sized> Valuation for &V {
    fn holds(&self, atom: &str) -> bool {
        (**self).holds(atom)
    }
}

/// `L(s) ⊨ Φ` for a formula without probabilistic operators.
pub fn eval_state<V: Valuation + ?Sized>(
    labels: &V,
    formula: &StateFormula,
) -> Result<bool, EvalError> {
    Ok(match formula {
        StateFormula::True => true,
        StateFormula::Atom(a) => labels.holds(a),
        StateFormula::Not(f) => !eval_state(labels, f)?,
        StateFormula::And(a, b) => eval_state(labels, a)? && eval_state(labels, b)?,
        StateFormula::Prob(..) => return Err(EvalError::Probabilistic),
    })
}

/// `τ ⊨ φ` on a finite trace. Bounded until only inspects indices that
/// exist: a trace that ends before the bound without reaching the goal
/// formula does not satisfy it.
pub fn eval_path<V: Valuation>(trace: &[V], path: &PathFormula) -> Result<bool, EvalError> {
    if trace.is_empty() {
        return Err(EvalError::EmptyTrace);
    }
    match path {
        PathFormula::Next(f) => match trace.get(1) {
            Some(s) => eval_state(s, f),
            None => Err(EvalError::TraceTooShort),
        },
        PathFormula::Until(..) => Err(EvalError::UnboundedUntil),
        PathFormula::BoundedUntil(hold, goal, n) => {
            let last = usize::try_from(*n).unwrap_or(usize::MAX).min(trace.len() - 1);
            for state in &trace[..=last] {
                if eval_state(state, goal)? {
                    return Ok(true);
                }
                if !eval_state(state, hold)? {
                    return Ok(false);
                }
            }
            Ok(false)
        }
    }
}

/// `G<=n Φ`, held as the negation of `true U<=n !Φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundedAlways {
    bound: u64,
    invariant: StateFormula,
    violation: PathFormula,
}

pub fn bounded_always(bound: u64, invariant: StateFormula) -> BoundedAlways {
    let violation = PathFormula::BoundedUntil(
        StateFormula::True,
        StateFormula::not(invariant.clone()),
        bound,
    );
    BoundedAlways {
        bound,
        invariant,
        violation,
    }
}

impl BoundedAlways {
    pub fn bound(&self) -> u64 {
        self.bound
    }

    pub fn invariant(&self) -> &StateFormula {
        &self.invariant
    }

    /// The path formula `true U<=n !Φ` whose negation this is.
    pub fn violation(&self) -> &PathFormula {
        &self.violation
    }

    pub fn holds<V: Valuation>(&self, trace: &[V]) -> Result<bool, EvalError> {
        Ok(!eval_path(trace, &self.violation)?)
    }
}

impl fmt::Display for BoundedAlways {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G<={} {}", self.bound, self.invariant)
    }
}

/// A property decidable on a single finite trace.
pub trait TraceProperty {
    fn check<V: Valuation>(&self, trace: &[V]) -> Result<bool, EvalError>;
}

impl TraceProperty for PathFormula {
    fn check<V: Valuation>(&self, trace: &[V]) -> Result<bool, EvalError> {
        eval_path(trace, self)
    }
}

impl TraceProperty for BoundedAlways {
    fn check<V: Valuation>(&self, trace: &[V]) -> Result<bool, EvalError> {
        self.holds(trace)
    }
}
