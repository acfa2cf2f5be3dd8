use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::stream_rng;

/// A signed basis token: the vector `sign · P[:, index]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub index: usize,
    pub sign: i8,
}

impl Token {
    pub fn new(index: usize, sign: i8) -> Self {
        debug_assert!(sign == 1 || sign == -1);
        Token { index, sign }
    }

    pub fn negated(self) -> Self {
        Token {
            index: self.index,
            sign: -self.sign,
        }
    }
}

/// The four task-relevant tokens, in the order `o1, -o1, o2, -o2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relevant {
    #[serde(rename = "o1")]
    O1,
    #[serde(rename = "-o1")]
    NegO1,
    #[serde(rename = "o2")]
    O2,
    #[serde(rename = "-o2")]
    NegO2,
}

impl Relevant {
    pub const ALL: [Relevant; 4] = [Relevant::O1, Relevant::NegO1, Relevant::O2, Relevant::NegO2];

    pub fn slot(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Relevant::O1 => "o1",
            Relevant::NegO1 => "-o1",
            Relevant::O2 => "o2",
            Relevant::NegO2 => "-o2",
        }
    }

    pub fn label(self) -> i8 {
        match self {
            Relevant::O1 | Relevant::NegO1 => 1,
            Relevant::O2 | Relevant::NegO2 => -1,
        }
    }

    /// `o1` and `o2` are the rare (probability α) variants.
    pub fn is_less_prevalent(self) -> bool {
        matches!(self, Relevant::O1 | Relevant::O2)
    }

    pub fn counterpart(self) -> Relevant {
        match self {
            Relevant::O1 => Relevant::NegO1,
            Relevant::NegO1 => Relevant::O1,
            Relevant::O2 => Relevant::NegO2,
            Relevant::NegO2 => Relevant::O2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TokenSet {
    /// Orthonormal `d × d` matrix; column `i` is token `i`.
    pub basis: DMatrix<f64>,
    pub o1: usize,
    pub o2: usize,
    irrelevant: Vec<usize>,
}

impl TokenSet {
    pub fn from_basis(basis: DMatrix<f64>, o1: usize, o2: usize) -> Result<Self> {
        let d = basis.nrows();
        if basis.ncols() != d || d < 4 || o1 >= d || o2 >= d || o1 == o2 {
            return Err(Error::InvalidArgument(
                "token basis must be square with d >= 4 and distinct o1, o2".into(),
            ));
        }
        let irrelevant = (0..d).filter(|&i| i != o1 && i != o2).collect();
        Ok(TokenSet {
            basis,
            o1,
            o2,
            irrelevant,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn irrelevant(&self) -> &[usize] {
        &self.irrelevant
    }

    pub fn relevant(&self, r: Relevant) -> Token {
        match r {
            Relevant::O1 => Token::new(self.o1, 1),
            Relevant::NegO1 => Token::new(self.o1, -1),
            Relevant::O2 => Token::new(self.o2, 1),
            Relevant::NegO2 => Token::new(self.o2, -1),
        }
    }

    pub fn classify(&self, t: Token) -> Option<Relevant> {
        Relevant::ALL.into_iter().find(|&r| self.relevant(r) == t)
    }

    pub fn vector(&self, t: Token) -> DVector<f64> {
        self.basis.column(t.index) * f64::from(t.sign)
    }

    pub fn orthonormality_error(&self) -> f64 {
        let d = self.dim();
        let gram = self.basis.transpose() * &self.basis;
        (gram - DMatrix::<f64>::identity(d, d)).amax()
    }

    /// Same basis with the roles of `o1` and `o2` exchanged.
    pub fn swapped(&self) -> TokenSet {
        TokenSet::from_basis(self.basis.clone(), self.o2, self.o1).expect("valid basis")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub tokens: Vec<Token>,
    pub label: i8,
    pub relevant_position: usize,
}

impl Sequence {
    pub fn relevant_token(&self) -> Token {
        self.tokens[self.relevant_position]
    }

    pub fn contains(&self, t: Token) -> bool {
        self.tokens.contains(&t)
    }
}

const QR_ATTEMPTS: u64 = 16;

/// Orthonormal token set from the Q factor of a seeded Gaussian matrix.
/// The first two columns are the task-relevant directions.
pub fn make_token_set(d: usize, seed: u64) -> Result<TokenSet> {
    if d < 4 {
        return Err(Error::InvalidArgument(format!("d must be >= 4, got {d}")));
    }
    for attempt in 0..QR_ATTEMPTS {
        let mut rng = stream_rng(seed, crate::seeding::TOKENS + attempt);
        let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
        let qr = g.qr();
        let r = qr.r();
        let scale = r.diagonal().amax();
        if r.diagonal().iter().any(|v| v.abs() <= 1e-10 * scale.max(1.0)) {
            continue;
        }
        return TokenSet::from_basis(qr.q(), 0, 1);
    }
    Err(Error::LinearAlgebra(format!(
        "QR of a {d}x{d} Gaussian draw was degenerate {QR_ATTEMPTS} times"
    )))
}

/// One labelled sequence of `n` tokens with exactly one task-relevant token.
pub fn sample_sequence(ts: &TokenSet, alpha: f64, n: usize, rng: &mut ChaCha8Rng) -> Sequence {
    let label: i8 = if rng.random_bool(0.5) { 1 } else { -1 };
    let index = if label == 1 { ts.o1 } else { ts.o2 };
    let sign = if rng.random_bool(alpha) { 1 } else { -1 };
    let relevant_position = rng.random_range(0..n);
    let irrelevant = ts.irrelevant();
    let tokens = (0..n)
        .map(|j| {
            if j == relevant_position {
                Token::new(index, sign)
            } else {
                Token::new(irrelevant[rng.random_range(0..irrelevant.len())], 1)
            }
        })
        .collect();
    Sequence {
        tokens,
        label,
        relevant_position,
    }
}

pub fn sample_sequences(ts: &TokenSet, alpha: f64, n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Sequence> {
    (0..count).map(|_| sample_sequence(ts, alpha, n, rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_is_orthonormal_and_deterministic() {
        let a = make_token_set(4, 7).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot = a.basis.column(i).dot(&a.basis.column(j));
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6, "({i},{j}) -> {dot}");
            }
        }
        let b = make_token_set(4, 7).unwrap();
        assert_eq!(a.basis, b.basis);
        assert!(make_token_set(32, 1).unwrap().orthonormality_error() < 1e-6);
        assert!(make_token_set(3, 1).is_err());
    }

    #[test]
    fn sequence_structure() {
        let ts = make_token_set(16, 3).unwrap();
        let mut rng = stream_rng(3, 99);
        for _ in 0..200 {
            let s = sample_sequence(&ts, 0.1, 10, &mut rng);
            assert_eq!(s.tokens.len(), 10);
            let relevant: Vec<_> = s.tokens.iter().filter(|t| ts.classify(**t).is_some()).collect();
            assert_eq!(relevant.len(), 1);
            let r = ts.classify(s.relevant_token()).unwrap();
            assert_eq!(r.label(), s.label);
            for (j, t) in s.tokens.iter().enumerate() {
                if j != s.relevant_position {
                    assert_eq!(t.sign, 1);
                    assert!(t.index != ts.o1 && t.index != ts.o2);
                }
            }
        }
    }

    #[test]
    fn tiny_alpha_gives_prevalent_tokens() {
        let ts = make_token_set(8, 0).unwrap();
        let mut rng = stream_rng(0, 1);
        let rare = (0..2000)
            .filter(|_| sample_sequence(&ts, 1e-9, 4, &mut rng).relevant_token().sign == 1)
            .count();
        assert_eq!(rare, 0);
    }
}
