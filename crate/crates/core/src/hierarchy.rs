//! Two-level label hierarchies (coarse groups of fine classes).
//!
//! A [`LabelHierarchy`] partitions the fine label set `0..num_fine` into
//! non-empty coarse groups. For a ground-truth fine class `g` it hands out the
//! index sets the hierarchical objectives work on: the siblings of `g`
//! (its coarse group without `g`) and everything outside that group.
//!
//! # File format
//!
//! One line per fine class, `<fine_index> <coarse_index>`, separated by
//! whitespace. Lines starting with `#` and blank lines are ignored. Fine
//! indices must cover `0..num_fine` exactly once and coarse indices must be
//! contiguous from 0.

use std::fmt::Write as _;

use thiserror::Error;

/// Shipped CIFAR-100 hierarchy (20 coarse groups of 5 fine classes).
pub const CIFAR100_HIERARCHY: &str = include_str!("../data/cifar100.hierarchy");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HierarchyError {
    #[error("hierarchy file is empty")]
    Empty,
    #[error("line {line}: expected `<fine_index> <coarse_index>`, got {fields} field(s)")]
    FieldCount { line: usize, fields: usize },
    #[error("line {line}: hierarchies deeper than two levels are not supported")]
    TooDeep { line: usize },
    #[error("line {line}: `{token}` is not a non-negative integer")]
    BadIndex { line: usize, token: String },
    #[error("line {line}: fine index {fine} already assigned on line {first}")]
    DuplicateFine {
        line: usize,
        fine: usize,
        first: usize,
    },
    #[error("line {line}: fine index {fine} is out of range for {num_fine} fine classes")]
    FineOutOfRange {
        line: usize,
        fine: usize,
        num_fine: usize,
    },
    #[error("line {line}: coarse index {coarse} breaks contiguity (no fine class uses coarse index {missing})")]
    NonContiguousCoarse {
        line: usize,
        coarse: usize,
        missing: usize,
    },
    #[error("coarse group {0} is empty")]
    EmptyGroup(usize),
    #[error("fine index {index} is out of range for {num_fine} fine classes")]
    IndexOutOfRange { index: usize, num_fine: usize },
    #[error("a hierarchy needs at least one fine class")]
    NoClasses,
}

/// Index sets around one ground-truth class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchySlices {
    /// Ground-truth fine class.
    pub g: usize,
    /// Siblings of `g`: its coarse group without `g`, ascending.
    pub inner: Vec<usize>,
    /// Fine classes outside the coarse group of `g`, ascending.
    pub outer: Vec<usize>,
}

/// Partition of fine classes into coarse groups.
///
/// Immutable after construction. The per-class [`HierarchySlices`] are
/// precomputed so objectives can borrow them without allocating.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelHierarchy {
    fine_to_coarse: Vec<usize>,
    coarse_members: Vec<Vec<usize>>,
    slices: Vec<HierarchySlices>,
}

impl LabelHierarchy {
    /// Builds a hierarchy from `fine_to_coarse[fine] = coarse`.
    ///
    /// Coarse indices must be contiguous from 0 and every group non-empty.
    pub fn from_assignment(fine_to_coarse: Vec<usize>) -> Result<Self, HierarchyError> {
        if fine_to_coarse.is_empty() {
            return Err(HierarchyError::NoClasses);
        }
        let num_coarse = fine_to_coarse.iter().max().map_or(0, |&c| c + 1);
        let mut coarse_members = vec![Vec::new(); num_coarse];
        for (fine, &coarse) in fine_to_coarse.iter().enumerate() {
            coarse_members[coarse].push(fine);
        }
        if let Some(empty) = coarse_members.iter().position(Vec::is_empty) {
            return Err(HierarchyError::EmptyGroup(empty));
        }
        let num_fine = fine_to_coarse.len();
        let slices = (0..num_fine)
            .map(|g| {
                let group = fine_to_coarse[g];
                let inner = coarse_members[group]
                    .iter()
                    .copied()
                    .filter(|&j| j != g)
                    .collect();
                let outer = (0..num_fine)
                    .filter(|&j| fine_to_coarse[j] != group)
                    .collect();
                HierarchySlices { g, inner, outer }
            })
            .collect();
        Ok(Self {
            fine_to_coarse,
            coarse_members,
            slices,
        })
    }

    /// All fine classes in a single coarse group.
    pub fn flat(num_fine: usize) -> Result<Self, HierarchyError> {
        Self::from_assignment(vec![0; num_fine])
    }

    /// Every fine class is its own coarse group.
    pub fn identity(num_fine: usize) -> Result<Self, HierarchyError> {
        Self::from_assignment((0..num_fine).collect())
    }

    /// `num_coarse` consecutive groups of `per_group` fine classes each.
    pub fn uniform(num_coarse: usize, per_group: usize) -> Result<Self, HierarchyError> {
        Self::from_assignment((0..num_coarse * per_group).map(|f| f / per_group).collect())
    }

    /// The shipped CIFAR-100 hierarchy.
    pub fn cifar100() -> Self {
        Self::parse(CIFAR100_HIERARCHY).expect("shipped CIFAR-100 hierarchy is valid")
    }

    /// Parses the text hierarchy format described in the module docs.
    pub fn parse(text: &str) -> Result<Self, HierarchyError> {
        // (line, fine, coarse)
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split_whitespace().collect();
            match fields.len() {
                2 => {}
                n if n > 2 && fields.iter().all(|t| t.parse::<usize>().is_ok()) => {
                    return Err(HierarchyError::TooDeep { line })
                }
                n => return Err(HierarchyError::FieldCount { line, fields: n }),
            }
            let parse = |token: &str| {
                token
                    .parse::<usize>()
                    .map_err(|_| HierarchyError::BadIndex {
                        line,
                        token: token.to_string(),
                    })
            };
            entries.push((line, parse(fields[0])?, parse(fields[1])?));
        }
        if entries.is_empty() {
            return Err(HierarchyError::Empty);
        }

        let num_fine = entries.len();
        let mut seen_on: Vec<Option<usize>> = vec![None; num_fine];
        let mut fine_to_coarse = vec![0; num_fine];
        for &(line, fine, coarse) in &entries {
            if fine >= num_fine {
                return Err(HierarchyError::FineOutOfRange {
                    line,
                    fine,
                    num_fine,
                });
            }
            if let Some(first) = seen_on[fine] {
                return Err(HierarchyError::DuplicateFine { line, fine, first });
            }
            seen_on[fine] = Some(line);
            fine_to_coarse[fine] = coarse;
        }

        let num_coarse = entries.iter().map(|e| e.2).max().unwrap_or(0) + 1;
        let mut used = vec![false; num_coarse];
        for &(_, _, coarse) in &entries {
            used[coarse] = true;
        }
        if let Some(missing) = used.iter().position(|u| !u) {
            // Blame the first line that references a coarse index past the gap.
            let &(line, _, coarse) = entries
                .iter()
                .find(|e| e.2 > missing)
                .expect("a gap implies a larger index exists");
            return Err(HierarchyError::NonContiguousCoarse {
                line,
                coarse,
                missing,
            });
        }

        Self::from_assignment(fine_to_coarse)
    }

    /// Serializes to the text format; `parse(h.to_text()) == h`.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.num_fine() * 8);
        for (fine, coarse) in self.fine_to_coarse.iter().enumerate() {
            let _ = writeln!(out, "{fine} {coarse}");
        }
        out
    }

    pub fn num_fine(&self) -> usize {
        self.fine_to_coarse.len()
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse_members.len()
    }

    pub fn fine_to_coarse(&self) -> &[usize] {
        &self.fine_to_coarse
    }

    pub fn coarse_members(&self) -> &[Vec<usize>] {
        &self.coarse_members
    }

    /// Coarse group containing `fine`.
    pub fn coarse_of(&self, fine: usize) -> Result<usize, HierarchyError> {
        self.fine_to_coarse
            .get(fine)
            .copied()
            .ok_or(HierarchyError::IndexOutOfRange {
                index: fine,
                num_fine: self.num_fine(),
            })
    }

    /// Sibling and non-relative index sets for ground truth `g`.
    pub fn slices_for(&self, g: usize) -> Result<&HierarchySlices, HierarchyError> {
        self.slices.get(g).ok_or(HierarchyError::IndexOutOfRange {
            index: g,
            num_fine: self.num_fine(),
        })
    }

    /// True when every coarse group has exactly one member.
    pub fn is_identity(&self) -> bool {
        self.coarse_members.len() == self.fine_to_coarse.len()
    }
}
