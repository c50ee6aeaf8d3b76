use serde::{Deserialize, Serialize};

use crate::error::{HingeError, Result};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Columns,
    Rows,
    ConcatGroups,
}

/// One parameter of a group: `member` selects the matrix, `index` the
/// row-major position inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryRef {
    pub member: usize,
    pub index: usize,
}

/// Disjoint groups of entries over one matrix (columns/rows) or a pair of
/// matrices (concat-groups).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupScheme {
    kind: SchemeKind,
    shapes: Vec<(usize, usize)>,
    groups: Vec<Vec<EntryRef>>,
}

impl GroupScheme {
    /// Group `j` is column `j`.
    pub fn columns(rows: usize, cols: usize) -> Self {
        let groups = (0..cols)
            .map(|j| {
                (0..rows)
                    .map(|i| EntryRef { member: 0, index: i * cols + j })
                    .collect()
            })
            .collect();
        GroupScheme {
            kind: SchemeKind::Columns,
            shapes: vec![(rows, cols)],
            groups,
        }
    }

    /// Group `i` is row `i`.
    pub fn rows(rows: usize, cols: usize) -> Self {
        let groups = (0..rows)
            .map(|i| {
                (0..cols)
                    .map(|j| EntryRef { member: 0, index: i * cols + j })
                    .collect()
            })
            .collect();
        GroupScheme {
            kind: SchemeKind::Rows,
            shapes: vec![(rows, cols)],
            groups,
        }
    }

    /// Cardinal group `k` joins columns `k·w..(k+1)·w` of the leading matrix
    /// (its output channels) with rows `k·w..(k+1)·w` of the ending matrix
    /// (its input channels), `w = lead.cols / cardinality`.
    pub fn concat(lead: (usize, usize), end: (usize, usize), cardinality: usize) -> Result<Self> {
        if cardinality == 0 || lead.1 != end.0 || lead.1 % cardinality != 0 {
            return Err(HingeError::dim(format!(
                "concat groups: leading {}x{}, ending {}x{}, cardinality {}",
                lead.0, lead.1, end.0, end.1, cardinality
            )));
        }
        let width = lead.1 / cardinality;
        let groups = (0..cardinality)
            .map(|k| {
                let mut g = Vec::with_capacity(width * (lead.0 + end.1));
                for i in 0..lead.0 {
                    for j in k * width..(k + 1) * width {
                        g.push(EntryRef { member: 0, index: i * lead.1 + j });
                    }
                }
                for i in k * width..(k + 1) * width {
                    for j in 0..end.1 {
                        g.push(EntryRef { member: 1, index: i * end.1 + j });
                    }
                }
                g
            })
            .collect();
        Ok(GroupScheme {
            kind: SchemeKind::ConcatGroups,
            shapes: vec![lead, end],
            groups,
        })
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<EntryRef>] {
        &self.groups
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn member_count(&self) -> usize {
        self.shapes.len()
    }

    /// Channel indices owned by group `g` in the matrix dimension the scheme
    /// acts on (column index, row index, or the cardinal slice).
    pub fn group_channels(&self, g: usize) -> Vec<usize> {
        match self.kind {
            SchemeKind::Columns | SchemeKind::Rows => vec![g],
            SchemeKind::ConcatGroups => {
                let width = self.shapes[0].1 / self.groups.len();
                (g * width..(g + 1) * width).collect()
            }
        }
    }

    pub fn check_shapes(&self, mats: &[&DenseMatrix]) -> Result<()> {
        if mats.len() != self.shapes.len() {
            return Err(HingeError::dim(format!(
                "scheme spans {} matrices, got {}",
                self.shapes.len(),
                mats.len()
            )));
        }
        for (m, &s) in mats.iter().zip(&self.shapes) {
            if m.shape() != s {
                return Err(HingeError::dim(format!(
                    "scheme built for {}x{}, matrix is {}x{}",
                    s.0,
                    s.1,
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(())
    }

    /// True when no entry is claimed twice and, for row/column schemes, every
    /// entry is claimed.
    pub fn is_partition(&self) -> bool {
        let mut seen: Vec<Vec<bool>> = self.shapes.iter().map(|&(r, c)| vec![false; r * c]).collect();
        for g in &self.groups {
            for e in g {
                let slot = &mut seen[e.member][e.index];
                if *slot {
                    return false;
                }
                *slot = true;
            }
        }
        match self.kind {
            SchemeKind::Columns | SchemeKind::Rows => seen.iter().all(|s| s.iter().all(|&b| b)),
            SchemeKind::ConcatGroups => true,
        }
    }

    pub fn norms_of(&self, mats: &[&DenseMatrix]) -> Result<Vec<f64>> {
        self.check_shapes(mats)?;
        Ok(self
            .groups
            .iter()
            .map(|g| {
                g.iter()
                    .map(|e| {
                        let v = mats[e.member].data()[e.index];
                        v * v
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect())
    }

    /// Multiplies every entry of group `g` by `factors[g]`.
    pub fn scale_groups(&self, mats: &mut [&mut DenseMatrix], factors: &[f64]) -> Result<()> {
        {
            let views: Vec<&DenseMatrix> = mats.iter().map(|m| &**m).collect();
            self.check_shapes(&views)?;
        }
        if factors.len() != self.groups.len() {
            return Err(HingeError::dim(format!(
                "{} factors for {} groups",
                factors.len(),
                self.groups.len()
            )));
        }
        for (g, &f) in self.groups.iter().zip(factors) {
            if f == 1.0 {
                continue;
            }
            for e in g {
                let v = &mut mats[e.member].data_mut()[e.index];
                *v = if f == 0.0 { 0.0 } else { *v * f };
            }
        }
        Ok(())
    }

    /// Sets every entry of the groups with `alive[g] == false` to zero.
    pub fn zero_dead(&self, mats: &mut [&mut DenseMatrix], alive: &[bool]) -> Result<()> {
        let factors: Vec<f64> = alive.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
        self.scale_groups(mats, &factors)
    }
}

/// ℓ2 norm of every group of a single-matrix scheme.
pub fn group_norms(a: &DenseMatrix, scheme: &GroupScheme) -> Result<Vec<f64>> {
    scheme.norms_of(&[a])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_four_five() {
        let a = DenseMatrix::from_rows(&[&[3.0, 0.0], &[4.0, 0.0]]);
        assert_eq!(group_norms(&a, &GroupScheme::columns(2, 2)).unwrap(), vec![5.0, 0.0]);
        assert_eq!(group_norms(&a, &GroupScheme::rows(2, 2)).unwrap(), vec![3.0, 4.0]);
        let z = DenseMatrix::zeros(2, 2);
        assert_eq!(group_norms(&z, &GroupScheme::rows(2, 2)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn column_scheme_layout() {
        let s = GroupScheme::columns(8, 8);
        assert_eq!(s.group_count(), 8);
        assert!(s.groups().iter().all(|g| g.len() == 8));
        assert!(s.is_partition());
        assert!(GroupScheme::rows(3, 5).is_partition());
    }

    #[test]
    fn concat_coverage_is_exhaustive() {
        // cardinality 4, width 2: leading 6x8, ending 8x5
        let s = GroupScheme::concat((6, 8), (8, 5), 4).unwrap();
        assert_eq!(s.group_count(), 4);
        assert!(s.is_partition());
        let mut lead_cols = vec![None; 8];
        let mut end_rows = vec![None; 8];
        for (g, entries) in s.groups().iter().enumerate() {
            assert_eq!(entries.len(), 6 * 2 + 2 * 5);
            for e in entries {
                let slot = match e.member {
                    0 => &mut lead_cols[e.index % 8],
                    _ => &mut end_rows[e.index / 5],
                };
                assert!(slot.map_or(true, |prev| prev == g));
                *slot = Some(g);
            }
        }
        // every leading column and every ending row belongs to exactly one group,
        // and group k owns channels 2k and 2k+1 on both sides
        for c in 0..8 {
            assert_eq!(lead_cols[c], Some(c / 2));
            assert_eq!(end_rows[c], Some(c / 2));
        }
        assert_eq!(s.group_channels(3), vec![6, 7]);
        assert!(GroupScheme::concat((6, 8), (7, 5), 4).is_err());
    }

    #[test]
    fn squared_norms_sum_to_frobenius() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DenseMatrix::random_normal(13, 13, 1.0, &mut rng);
        let norms = group_norms(&a, &GroupScheme::columns(13, 13)).unwrap();
        let total: f64 = norms.iter().map(|n| n * n).sum();
        let fro = a.frobenius_norm().powi(2);
        assert!((total - fro).abs() <= 1e-12 * fro);
    }

    #[test]
    fn mismatched_shape() {
        let a = DenseMatrix::zeros(3, 2);
        assert!(group_norms(&a, &GroupScheme::columns(2, 3)).is_err());
    }
}
