//! Exact integer polynomials over named dimension symbols.
//!
//! Every unknown extent in a graph (sequence length, total cached length,
//! derived byte sizes) is a [`SymExpr`]: a canonical multivariate polynomial
//! with `i64` coefficients. Symbols are always interpreted over the positive
//! integers, which is what makes the comparison rules in [`SymExpr::compare`]
//! sound.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::str::FromStr;

use thiserror::Error;

/// Symbol → value assignment used for evaluation.
pub type Bindings = BTreeMap<String, i64>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SymError {
    #[error("syntax error at byte {offset}: {reason}")]
    Syntax { offset: usize, reason: String },
    #[error("unbound symbol `{0}`")]
    UnboundSymbol(String),
    #[error("invalid symbol name `{0}`")]
    InvalidSymbol(String),
    #[error("integer overflow while evaluating `{0}`")]
    Overflow(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DivError {
    #[error("division by the zero polynomial")]
    ZeroDivisor,
    #[error("not exactly divisible")]
    NotDivisible,
}

/// Outcome of a symbolic size comparison. Anything other than `Unknown`
/// holds for every positive-integer binding of the symbols involved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompareResult {
    Equal,
    ProvablyLE,
    ProvablyGE,
    Unknown,
}

pub fn is_valid_symbol(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// A product of symbols with positive powers, sorted by symbol name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Monomial(Vec<(String, u32)>);

impl Monomial {
    fn var(name: &str) -> Self {
        Monomial(vec![(name.to_string(), 1)])
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|(_, p)| p).sum()
    }

    pub fn is_one(&self) -> bool {
        self.0.is_empty()
    }

    pub fn factors(&self) -> impl Iterator<Item = (&str, u32)> {
        self.0.iter().map(|(s, p)| (s.as_str(), *p))
    }

    fn mul(&self, other: &Monomial) -> Monomial {
        let mut out = Vec::with_capacity(self.0.len() + other.0.len());
        let (mut i, mut j) = (0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].0.cmp(&other.0[j].0) {
                Ordering::Less => {
                    out.push(self.0[i].clone());
                    i += 1;
                }
                Ordering::Greater => {
                    out.push(other.0[j].clone());
                    j += 1;
                }
                Ordering::Equal => {
                    out.push((self.0[i].0.clone(), self.0[i].1 + other.0[j].1));
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&self.0[i..]);
        out.extend_from_slice(&other.0[j..]);
        Monomial(out)
    }

    /// `self / other` if `other` divides `self`.
    fn div(&self, other: &Monomial) -> Option<Monomial> {
        let mut out = Vec::with_capacity(self.0.len());
        let mut j = 0;
        for (name, pow) in &self.0 {
            if j < other.0.len() && other.0[j].0 < *name {
                return None;
            }
            if j < other.0.len() && other.0[j].0 == *name {
                let rhs = other.0[j].1;
                j += 1;
                match pow.cmp(&rhs) {
                    Ordering::Less => return None,
                    Ordering::Equal => continue,
                    Ordering::Greater => out.push((name.clone(), pow - rhs)),
                }
            } else {
                out.push((name.clone(), *pow));
            }
        }
        if j < other.0.len() {
            return None;
        }
        Some(Monomial(out))
    }
}

impl Ord for Monomial {
    // Graded lexicographic order: total degree first, then the exponent of the
    // alphabetically smallest symbol where the two differ.
    fn cmp(&self, other: &Self) -> Ordering {
        let by_degree = self.degree().cmp(&other.degree());
        if by_degree != Ordering::Equal {
            return by_degree;
        }
        let (mut i, mut j) = (0, 0);
        loop {
            match (self.0.get(i), other.0.get(j)) {
                (None, None) => return Ordering::Equal,
                (Some(_), None) => return Ordering::Greater,
                (None, Some(_)) => return Ordering::Less,
                (Some((a, pa)), Some((b, pb))) => match a.cmp(b) {
                    Ordering::Less => return Ordering::Greater,
                    Ordering::Greater => return Ordering::Less,
                    Ordering::Equal => {
                        if pa != pb {
                            return pa.cmp(pb);
                        }
                        i += 1;
                        j += 1;
                    }
                },
            }
        }
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Canonical integer polynomial. Zero coefficients are never stored, so
/// structural equality is mathematical equality.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct SymExpr {
    terms: BTreeMap<Monomial, i64>,
}

impl SymExpr {
    pub fn zero() -> Self {
        SymExpr::default()
    }

    pub fn one() -> Self {
        SymExpr::constant(1)
    }

    pub fn constant(value: i64) -> Self {
        let mut terms = BTreeMap::new();
        if value != 0 {
            terms.insert(Monomial::default(), value);
        }
        SymExpr { terms }
    }

    /// A single symbol.
    ///
    /// Panics if `name` is not a C identifier; use [`SymExpr::try_symbol`] for
    /// untrusted input.
    pub fn symbol(name: &str) -> Self {
        Self::try_symbol(name).expect("invalid symbol name")
    }

    pub fn try_symbol(name: &str) -> Result<Self, SymError> {
        if !is_valid_symbol(name) {
            return Err(SymError::InvalidSymbol(name.to_string()));
        }
        let mut terms = BTreeMap::new();
        terms.insert(Monomial::var(name), 1);
        Ok(SymExpr { terms })
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// The value if this expression contains no symbols.
    pub fn as_constant(&self) -> Option<i64> {
        match self.terms.len() {
            0 => Some(0),
            1 => self.terms.get(&Monomial::default()).copied(),
            _ => None,
        }
    }

    pub fn constant_term(&self) -> i64 {
        self.terms.get(&Monomial::default()).copied().unwrap_or(0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, i64)> {
        self.terms.iter().map(|(m, c)| (m, *c))
    }

    pub fn symbols(&self) -> BTreeSet<&str> {
        self.terms
            .keys()
            .flat_map(|m| m.0.iter().map(|(s, _)| s.as_str()))
            .collect()
    }

    pub fn all_coeffs_nonneg(&self) -> bool {
        self.terms.values().all(|&c| c >= 0)
    }

    pub fn all_coeffs_nonpos(&self) -> bool {
        self.terms.values().all(|&c| c <= 0)
    }

    fn add_term(terms: &mut BTreeMap<Monomial, i64>, mono: Monomial, coeff: i64) {
        if coeff == 0 {
            return;
        }
        let entry = terms.entry(mono);
        match entry {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(coeff);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                let sum = o.get().checked_add(coeff).expect("coefficient overflow");
                if sum == 0 {
                    o.remove();
                } else {
                    *o.get_mut() = sum;
                }
            }
        }
    }

    fn scale(&self, k: i64) -> SymExpr {
        if k == 0 {
            return SymExpr::zero();
        }
        SymExpr {
            terms: self
                .terms
                .iter()
                .map(|(m, c)| (m.clone(), c.checked_mul(k).expect("coefficient overflow")))
                .collect(),
        }
    }

    /// Exact polynomial division: returns `q` with `self == q * divisor`.
    pub fn div_exact(&self, divisor: &SymExpr) -> Result<SymExpr, DivError> {
        let (lead_mono, lead_coeff) = match divisor.terms.iter().next_back() {
            Some((m, c)) => (m, *c),
            None => return Err(DivError::ZeroDivisor),
        };
        let mut rem = self.clone();
        let mut quotient = SymExpr::zero();
        // Each step cancels the remainder's leading term; under a monomial
        // order that sequence strictly decreases, so the loop terminates.
        while let Some((mono, coeff)) = rem.terms.iter().next_back() {
            let q_mono = mono.div(lead_mono).ok_or(DivError::NotDivisible)?;
            if coeff % lead_coeff != 0 {
                return Err(DivError::NotDivisible);
            }
            let q_coeff = coeff / lead_coeff;
            for (m, c) in &divisor.terms {
                let prod = c.checked_mul(q_coeff).expect("coefficient overflow");
                Self::add_term(&mut rem.terms, m.mul(&q_mono), -prod);
            }
            Self::add_term(&mut quotient.terms, q_mono, q_coeff);
        }
        Ok(quotient)
    }

    pub fn evaluate(&self, bindings: &Bindings) -> Result<i64, SymError> {
        self.evaluate_with(|name| bindings.get(name).copied())
    }

    pub fn evaluate_with<F>(&self, lookup: F) -> Result<i64, SymError>
    where
        F: Fn(&str) -> Option<i64>,
    {
        let overflow = || SymError::Overflow(self.to_string());
        let mut total: i64 = 0;
        for (mono, coeff) in &self.terms {
            let mut term = *coeff;
            for (name, pow) in &mono.0 {
                let value = lookup(name).ok_or_else(|| SymError::UnboundSymbol(name.clone()))?;
                let p = value.checked_pow(*pow).ok_or_else(overflow)?;
                term = term.checked_mul(p).ok_or_else(overflow)?;
            }
            total = total.checked_add(term).ok_or_else(overflow)?;
        }
        Ok(total)
    }

    /// Largest value the expression can take when every symbol ranges over
    /// `1..=max[symbol]`: positive terms at the maxima, negative terms at 1.
    pub fn upper_bound(&self, max: &Bindings) -> Result<i64, SymError> {
        let mut total: i64 = 0;
        let overflow = || SymError::Overflow(self.to_string());
        for (mono, coeff) in &self.terms {
            let term = if *coeff > 0 {
                let mut t = *coeff;
                for (name, pow) in &mono.0 {
                    let v = *max.get(name).ok_or_else(|| SymError::UnboundSymbol(name.clone()))?;
                    t = t.checked_mul(v.checked_pow(*pow).ok_or_else(overflow)?).ok_or_else(overflow)?;
                }
                t
            } else {
                *coeff
            };
            total = total.checked_add(term).ok_or_else(overflow)?;
        }
        Ok(total)
    }

    /// Sound, incomplete size comparison built from subtraction and exact
    /// division.
    pub fn compare(&self, other: &SymExpr) -> CompareResult {
        let diff = self - other;
        if diff.is_zero() {
            return CompareResult::Equal;
        }
        if diff.all_coeffs_nonneg() {
            return CompareResult::ProvablyGE;
        }
        if diff.all_coeffs_nonpos() {
            return CompareResult::ProvablyLE;
        }
        // a = q·b with b > 0 and q ≥ 1 gives a ≥ b.
        let at_least_one = |q: &SymExpr| q.all_coeffs_nonneg() && q.constant_term() >= 1;
        if !other.is_zero() && other.all_coeffs_nonneg() {
            if let Ok(q) = self.div_exact(other) {
                if q == SymExpr::one() {
                    return CompareResult::Equal;
                }
                if at_least_one(&q) {
                    return CompareResult::ProvablyGE;
                }
            }
        }
        if !self.is_zero() && self.all_coeffs_nonneg() {
            if let Ok(q) = other.div_exact(self) {
                if at_least_one(&q) {
                    return CompareResult::ProvablyLE;
                }
            }
        }
        CompareResult::Unknown
    }

    /// Product of a list of expressions (1 for an empty list).
    pub fn product<'a, I: IntoIterator<Item = &'a SymExpr>>(items: I) -> SymExpr {
        items.into_iter().fold(SymExpr::one(), |acc, e| &acc * e)
    }
}

impl From<i64> for SymExpr {
    fn from(v: i64) -> Self {
        SymExpr::constant(v)
    }
}

impl Add<&SymExpr> for &SymExpr {
    type Output = SymExpr;
    fn add(self, rhs: &SymExpr) -> SymExpr {
        let mut terms = self.terms.clone();
        for (m, c) in &rhs.terms {
            SymExpr::add_term(&mut terms, m.clone(), *c);
        }
        SymExpr { terms }
    }
}

impl Sub<&SymExpr> for &SymExpr {
    type Output = SymExpr;
    fn sub(self, rhs: &SymExpr) -> SymExpr {
        let mut terms = self.terms.clone();
        for (m, c) in &rhs.terms {
            SymExpr::add_term(&mut terms, m.clone(), c.checked_neg().expect("coefficient overflow"));
        }
        SymExpr { terms }
    }
}

impl Mul<&SymExpr> for &SymExpr {
    type Output = SymExpr;
    fn mul(self, rhs: &SymExpr) -> SymExpr {
        if let Some(k) = rhs.as_constant() {
            return self.scale(k);
        }
        if let Some(k) = self.as_constant() {
            return rhs.scale(k);
        }
        let mut terms = BTreeMap::new();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &rhs.terms {
                let c = ca.checked_mul(*cb).expect("coefficient overflow");
                SymExpr::add_term(&mut terms, ma.mul(mb), c);
            }
        }
        SymExpr { terms }
    }
}

impl Neg for &SymExpr {
    type Output = SymExpr;
    fn neg(self) -> SymExpr {
        self.scale(-1)
    }
}

macro_rules! forward_owned {
    ($tr:ident, $m:ident) => {
        impl $tr<SymExpr> for SymExpr {
            type Output = SymExpr;
            fn $m(self, rhs: SymExpr) -> SymExpr {
                (&self).$m(&rhs)
            }
        }
        impl $tr<&SymExpr> for SymExpr {
            type Output = SymExpr;
            fn $m(self, rhs: &SymExpr) -> SymExpr {
                (&self).$m(rhs)
            }
        }
        impl $tr<SymExpr> for &SymExpr {
            type Output = SymExpr;
            fn $m(self, rhs: SymExpr) -> SymExpr {
                self.$m(&rhs)
            }
        }
    };
}

forward_owned!(Add, add);
forward_owned!(Sub, sub);
forward_owned!(Mul, mul);

impl Neg for SymExpr {
    type Output = SymExpr;
    fn neg(self) -> SymExpr {
        -&self
    }
}

fn write_term(f: &mut fmt::Formatter<'_>, mono: &Monomial, magnitude: i64) -> fmt::Result {
    if mono.is_one() {
        return write!(f, "{magnitude}");
    }
    let mut first = true;
    if magnitude != 1 {
        write!(f, "{magnitude}")?;
        first = false;
    }
    for (name, pow) in &mono.0 {
        for _ in 0..*pow {
            if !first {
                f.write_str("*")?;
            }
            f.write_str(name)?;
            first = false;
        }
    }
    Ok(())
}

impl fmt::Display for SymExpr {
    /// Positive terms first, highest degree first; output reparses to the
    /// same polynomial.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return f.write_str("0");
        }
        let pos = self.terms.iter().rev().filter(|(_, c)| **c > 0);
        let neg = self.terms.iter().rev().filter(|(_, c)| **c < 0);
        let mut first = true;
        for (mono, coeff) in pos.chain(neg) {
            let magnitude = coeff.unsigned_abs() as i64;
            match (first, *coeff < 0) {
                (true, true) => f.write_str("-")?,
                (true, false) => {}
                (false, true) => f.write_str(" - ")?,
                (false, false) => f.write_str(" + ")?,
            }
            write_term(f, mono, magnitude)?;
            first = false;
        }
        Ok(())
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, offset: usize, reason: impl Into<String>) -> Result<T, SymError> {
        Err(SymError::Syntax { offset, reason: reason.into() })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<SymExpr, SymError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    acc = acc + self.term()?;
                }
                Some(b'-') => {
                    self.pos += 1;
                    acc = acc - self.term()?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<SymExpr, SymError> {
        let mut acc = self.factor()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    acc = acc * self.factor()?;
                }
                Some(b'/') => {
                    return self.err(self.pos, "division is not allowed in expressions");
                }
                _ => return Ok(acc),
            }
        }
    }

    fn factor(&mut self) -> Result<SymExpr, SymError> {
        let start = match self.peek() {
            Some(_) => self.pos,
            None => return self.err(self.pos, "unexpected end of expression"),
        };
        let c = self.src[start];
        if c == b'(' {
            self.pos += 1;
            let inner = self.expr()?;
            if self.peek() != Some(b')') {
                return self.err(self.pos, "expected `)`");
            }
            self.pos += 1;
            Ok(inner)
        } else if c == b'-' {
            self.pos += 1;
            Ok(-self.factor()?)
        } else if c.is_ascii_digit() {
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
            match text.parse::<i64>() {
                Ok(v) => Ok(SymExpr::constant(v)),
                Err(_) => self.err(start, "integer literal out of range"),
            }
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while self.pos < self.src.len()
                && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
            {
                self.pos += 1;
            }
            let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii identifier");
            SymExpr::try_symbol(name)
        } else if c == b'/' {
            self.err(start, "division is not allowed in expressions")
        } else {
            self.err(start, format!("unexpected character `{}`", c as char))
        }
    }
}

impl FromStr for SymExpr {
    type Err = SymError;

    /// Grammar: `expr := term (('+'|'-') term)*`, `term := factor ('*' factor)*`,
    /// `factor := INT | SYMBOL | '(' expr ')' | '-' factor`.
    fn from_str(text: &str) -> Result<Self, SymError> {
        let mut p = Parser { src: text.as_bytes(), pos: 0 };
        let e = p.expr()?;
        if p.peek().is_some() {
            let offset = p.pos;
            if p.src[offset] == b'/' {
                return p.err(offset, "division is not allowed in expressions");
            }
            return p.err(offset, "trailing input");
        }
        Ok(e)
    }
}
