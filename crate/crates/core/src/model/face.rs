use std::fmt;

use serde::{Deserialize, Serialize};

/// A subset of state components, stored as a bitmask.
///
/// A face `I` names the components allowed to be nonzero; everything in the
/// complement is identically zero on the boundary face `C_+^I`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(from = "Vec<usize>", into = "Vec<usize>")]
pub struct Face(u64);

/// Largest supported state dimension.
pub const MAX_COMPONENTS: usize = 64;

impl Face {
    pub const fn empty() -> Self {
        Face(0)
    }

    pub fn full(n: usize) -> Self {
        assert!(n <= MAX_COMPONENTS, "at most {MAX_COMPONENTS} components");
        if n == MAX_COMPONENTS {
            Face(u64::MAX)
        } else {
            Face((1u64 << n) - 1)
        }
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(indices: I) -> Self {
        let mut bits = 0u64;
        for i in indices {
            assert!(i < MAX_COMPONENTS, "component index {i} out of range");
            bits |= 1 << i;
        }
        Face(bits)
    }

    pub fn single(i: usize) -> Self {
        Face::from_indices([i])
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn contains(self, i: usize) -> bool {
        i < MAX_COMPONENTS && self.0 & (1 << i) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn with(self, i: usize) -> Self {
        Face(self.0 | Face::single(i).0)
    }

    pub fn without(self, i: usize) -> Self {
        Face(self.0 & !Face::single(i).0)
    }

    pub fn intersect(self, other: Face) -> Self {
        Face(self.0 & other.0)
    }

    pub fn union(self, other: Face) -> Self {
        Face(self.0 | other.0)
    }

    pub fn is_subset_of(self, other: Face) -> bool {
        self.0 & !other.0 == 0
    }

    /// Complement within the first `n` components.
    pub fn complement(self, n: usize) -> Self {
        Face(Face::full(n).0 & !self.0)
    }

    pub fn indices(self) -> impl Iterator<Item = usize> {
        let bits = self.0;
        (0..MAX_COMPONENTS).filter(move |&i| bits & (1 << i) != 0)
    }

    /// Every subset of the first `n` components, ordered by bitmask.
    pub fn all_subsets(n: usize) -> impl Iterator<Item = Face> {
        assert!(n < MAX_COMPONENTS);
        (0..(1u64 << n)).map(Face)
    }

    /// Renders the face with the given component names, e.g. `{x1,x2}`.
    pub fn label(self, names: &[String]) -> String {
        let parts: Vec<&str> = self.indices().map(|i| names.get(i).map(String::as_str).unwrap_or("?")).collect();
        format!("{{{}}}", parts.join(","))
    }

    pub fn names(self, names: &[String]) -> Vec<String> {
        self.indices().map(|i| names.get(i).cloned().unwrap_or_else(|| format!("#{i}"))).collect()
    }
}

impl From<Vec<usize>> for Face {
    fn from(v: Vec<usize>) -> Self {
        Face::from_indices(v)
    }
}

impl From<Face> for Vec<usize> {
    fn from(f: Face) -> Self {
        f.indices().collect()
    }
}

impl fmt::Debug for Face {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.indices()).finish()
    }
}
