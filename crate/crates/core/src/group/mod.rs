//! Finite groups given by their Cayley tables, and concrete group actions.
//!
//! Elements are opaque indices; the identity is always index 0. What an
//! element *does* lives entirely in a [`GroupAction`], so the same group can
//! act differently on inputs and outputs.

mod action;
mod descriptor;

use std::fmt;

pub use action::{ActionError, ActionKind, GroupAction, Point, SignedPerm};
pub use descriptor::{ActionSpec, GroupDescriptor, GroupSpec};

/// Known construction of a group, used by actions that are defined through a
/// generator (`element k = generator^k`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Structure {
    Cyclic(usize),
    Product(Box<Structure>, Box<Structure>),
    Table,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FiniteGroup {
    label: String,
    cayley: Vec<Vec<usize>>,
    inverse: Vec<usize>,
    structure: Structure,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GroupError {
    #[error("group order must be positive")]
    Empty,
    #[error("invalid group table: {0}")]
    Invalid(String),
}

impl FiniteGroup {
    /// `Z_n` with `k ∘ j = (k + j) mod n`.
    pub fn cyclic(n: usize) -> Result<Self, GroupError> {
        if n == 0 {
            return Err(GroupError::Empty);
        }
        let cayley = (0..n).map(|i| (0..n).map(|j| (i + j) % n).collect()).collect();
        let inverse = (0..n).map(|i| (n - i) % n).collect();
        Ok(Self {
            label: format!("Z{n}"),
            cayley,
            inverse,
            structure: Structure::Cyclic(n),
        })
    }

    /// Direct product; the pair `(i, j)` has index `i·|b| + j`.
    pub fn product(a: &FiniteGroup, b: &FiniteGroup) -> Self {
        let (na, nb) = (a.order(), b.order());
        let n = na * nb;
        let split = |k: usize| (k / nb, k % nb);
        let cayley = (0..n)
            .map(|x| {
                let (xa, xb) = split(x);
                (0..n)
                    .map(|y| {
                        let (ya, yb) = split(y);
                        a.compose(xa, ya) * nb + b.compose(xb, yb)
                    })
                    .collect()
            })
            .collect();
        let inverse = (0..n)
            .map(|x| {
                let (xa, xb) = split(x);
                a.inverse(xa) * nb + b.inverse(xb)
            })
            .collect();
        Self {
            label: format!("{}x{}", a.label, b.label),
            cayley,
            inverse,
            structure: Structure::Product(Box::new(a.structure.clone()), Box::new(b.structure.clone())),
        }
    }

    /// Builds a group from a table, deriving inverses, and rejects tables that
    /// fail any axiom.
    pub fn from_table(label: impl Into<String>, cayley: Vec<Vec<usize>>) -> Result<Self, GroupError> {
        let n = cayley.len();
        if n == 0 {
            return Err(GroupError::Empty);
        }
        let inverse = (0..n)
            .map(|i| {
                cayley[i]
                    .iter()
                    .position(|&v| v == 0)
                    .unwrap_or(0)
            })
            .collect();
        let group = Self::from_parts_unchecked(label, cayley, inverse);
        let report = group.verify();
        if let Some(bad) = report.checks.iter().find(|c| !c.passed) {
            return Err(GroupError::Invalid(bad.to_string()));
        }
        Ok(group)
    }

    /// Assembles a group without checking anything; use [`FiniteGroup::verify`].
    pub fn from_parts_unchecked(label: impl Into<String>, cayley: Vec<Vec<usize>>, inverse: Vec<usize>) -> Self {
        Self {
            label: label.into(),
            cayley,
            inverse,
            structure: Structure::Table,
        }
    }

    pub fn order(&self) -> usize {
        self.cayley.len()
    }

    pub fn identity(&self) -> usize {
        0
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    pub fn cayley(&self) -> &[Vec<usize>] {
        &self.cayley
    }

    /// `g ∘ h`.
    pub fn compose(&self, g: usize, h: usize) -> usize {
        self.cayley[g][h]
    }

    pub fn inverse(&self, g: usize) -> usize {
        self.inverse[g]
    }

    pub fn elements(&self) -> std::ops::Range<usize> {
        0..self.order()
    }

    /// Checks every axiom and reports the first witness of each failure.
    pub fn verify(&self) -> GroupReport {
        verify_group(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axiom {
    /// Square table with entries in range.
    Table,
    Identity,
    Inverse,
    /// Every row and column is a permutation (closure plus cancellation).
    Cancellation,
    Associativity,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Witness {
    Element(usize),
    Row(usize),
    Column(usize),
    Triple(usize, usize, usize),
    Message(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AxiomCheck {
    pub axiom: Axiom,
    pub passed: bool,
    pub witness: Option<Witness>,
}

impl fmt::Display for AxiomCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.passed, &self.witness) {
            (true, _) => write!(f, "{:?}: ok", self.axiom),
            (false, Some(w)) => write!(f, "{:?}: violated at {w:?}", self.axiom),
            (false, None) => write!(f, "{:?}: violated", self.axiom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupReport {
    pub checks: Vec<AxiomCheck>,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, axiom: Axiom) -> &AxiomCheck {
        self.checks
            .iter()
            .find(|c| c.axiom == axiom)
            .expect("every axiom is reported")
    }
}

fn outcome(axiom: Axiom, witness: Option<Witness>) -> AxiomCheck {
    AxiomCheck {
        axiom,
        passed: witness.is_none(),
        witness,
    }
}

fn skipped(axiom: Axiom) -> AxiomCheck {
    outcome(axiom, Some(Witness::Message("table malformed".into())))
}

fn is_permutation(values: impl Iterator<Item = usize>, n: usize) -> bool {
    let mut seen = vec![false; n];
    for v in values {
        if v >= n || seen[v] {
            return false;
        }
        seen[v] = true;
    }
    seen.iter().all(|s| *s)
}

/// Pass/fail per axiom with the first violating element, row or triple.
/// Failures are reported, never raised.
pub fn verify_group(g: &FiniteGroup) -> GroupReport {
    let n = g.cayley.len();
    let table_witness = if n == 0 {
        Some(Witness::Message("empty table".into()))
    } else if let Some(r) = g.cayley.iter().position(|row| row.len() != n || row.iter().any(|&v| v >= n)) {
        Some(Witness::Row(r))
    } else if g.inverse.len() != n || g.inverse.iter().any(|&v| v >= n) {
        Some(Witness::Message("inverse table malformed".into()))
    } else {
        None
    };
    if table_witness.is_some() {
        return GroupReport {
            checks: vec![
                outcome(Axiom::Table, table_witness),
                skipped(Axiom::Identity),
                skipped(Axiom::Inverse),
                skipped(Axiom::Cancellation),
                skipped(Axiom::Associativity),
            ],
        };
    }
    let c = &g.cayley;
    let identity = (0..n).find(|&i| c[0][i] != i || c[i][0] != i).map(Witness::Element);
    let inverse = (0..n)
        .find(|&i| c[i][g.inverse[i]] != 0 || c[g.inverse[i]][i] != 0)
        .map(Witness::Element);
    let cancellation = (0..n)
        .find(|&r| !is_permutation(c[r].iter().copied(), n))
        .map(Witness::Row)
        .or_else(|| {
            (0..n)
                .find(|&col| !is_permutation((0..n).map(|r| c[r][col]), n))
                .map(Witness::Column)
        });
    let mut assoc = None;
    'scan: for a in 0..n {
        for b in 0..n {
            let ab = c[a][b];
            for d in 0..n {
                if c[ab][d] != c[a][c[b][d]] {
                    assoc = Some(Witness::Triple(a, b, d));
                    break 'scan;
                }
            }
        }
    }
    GroupReport {
        checks: vec![
            outcome(Axiom::Table, None),
            outcome(Axiom::Identity, identity),
            outcome(Axiom::Inverse, inverse),
            outcome(Axiom::Cancellation, cancellation),
            outcome(Axiom::Associativity, assoc),
        ],
    }
}
