use crate::{NumericsError, Result};

/// Unweighted compressed sparse row adjacency.
///
/// Row `r` lists the column indices `indices[offsets[r]..offsets[r + 1]]`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Csr {
    offsets: Vec<usize>,
    indices: Vec<usize>,
    n_cols: usize,
}

impl Csr {
    pub fn new(offsets: Vec<usize>, indices: Vec<usize>, n_cols: usize) -> Result<Self> {
        let bad = |msg: String| NumericsError::Invalid { op: "csr", msg };
        if offsets.first() != Some(&0) {
            return Err(bad("offsets must start at 0".into()));
        }
        if offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(bad("offsets must be monotone".into()));
        }
        if *offsets.last().unwrap() != indices.len() {
            return Err(bad(format!(
                "last offset {} != {} indices",
                offsets.last().unwrap(),
                indices.len()
            )));
        }
        if let Some(&c) = indices.iter().find(|&&c| c >= n_cols) {
            return Err(NumericsError::IndexOutOfRange {
                op: "csr",
                index: c,
                len: n_cols,
            });
        }
        Ok(Self {
            offsets,
            indices,
            n_cols,
        })
    }

    /// Builds from `(row, col)` pairs. Columns inside a row keep input order.
    pub fn from_pairs(n_rows: usize, n_cols: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut counts = vec![0usize; n_rows + 1];
        for &(r, c) in pairs {
            if r >= n_rows {
                return Err(NumericsError::IndexOutOfRange {
                    op: "csr",
                    index: r,
                    len: n_rows,
                });
            }
            if c >= n_cols {
                return Err(NumericsError::IndexOutOfRange {
                    op: "csr",
                    index: c,
                    len: n_cols,
                });
            }
            counts[r + 1] += 1;
        }
        for i in 0..n_rows {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut indices = vec![0; pairs.len()];
        for &(r, c) in pairs {
            indices[fill[r]] = c;
            fill[r] += 1;
        }
        Ok(Self {
            offsets: counts,
            indices,
            n_cols,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.indices[self.offsets[r]..self.offsets[r + 1]]
    }

    pub fn row_range(&self, r: usize) -> std::ops::Range<usize> {
        self.offsets[r]..self.offsets[r + 1]
    }

    pub fn degree(&self, r: usize) -> usize {
        self.offsets[r + 1] - self.offsets[r]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Edge list in row-major order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.n_rows())
            .flat_map(|r| self.row(r).iter().map(move |&c| (r, c)))
            .collect()
    }

    pub fn transpose(&self) -> Csr {
        let pairs: Vec<(usize, usize)> = self.pairs().into_iter().map(|(r, c)| (c, r)).collect();
        Csr::from_pairs(self.n_cols, self.n_rows(), &pairs).expect("transpose of a valid csr")
    }

    /// `out[r] = sum of x[c] over the columns c of row r` for row-major `x`
    /// with `width` values per row.
    pub fn aggregate<T: crate::Real>(&self, x: &[T], width: usize, out: &mut [T]) {
        debug_assert_eq!(x.len(), self.n_cols * width);
        debug_assert_eq!(out.len(), self.n_rows() * width);
        for r in 0..self.n_rows() {
            let dst = &mut out[r * width..(r + 1) * width];
            for &c in self.row(r) {
                let src = &x[c * width..(c + 1) * width];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
    }
}
