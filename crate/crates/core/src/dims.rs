//! Ordered per-client dimension tables and the `Extract_m` slicing operator.

use serde::{Deserialize, Serialize};

use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimTable {
    dims: Vec<usize>,
    offsets: Vec<usize>,
}

impl DimTable {
    pub fn new(dims: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(dims.len());
        let mut acc = 0;
        for &d in &dims {
            offsets.push(acc);
            acc += d;
        }
        Self { dims, offsets }
    }

    pub fn homogeneous(clients: usize, dim: usize) -> Self {
        Self::new(vec![dim; clients])
    }

    pub fn clients(&self) -> usize {
        self.dims.len()
    }

    pub fn dim(&self, m: usize) -> usize {
        self.dims[m]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn offset(&self, m: usize) -> usize {
        self.offsets[m]
    }

    pub fn total(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn range(&self, m: usize) -> std::ops::Range<usize> {
        self.offsets[m]..self.offsets[m] + self.dims[m]
    }

    /// Client `m`'s contiguous slice of a stacked vector.
    pub fn extract<'a>(&self, v: &'a [f64], m: usize) -> &'a [f64] {
        &v[self.range(m)]
    }

    /// Client `m`'s diagonal block of a stacked matrix (rows and columns
    /// both indexed by this table).
    pub fn extract_block(&self, a: &Mat, m: usize) -> Mat {
        let r = self.range(m);
        a.block(r.start, r.start, r.len(), r.len())
    }

    /// Client `m`'s block of a matrix whose rows follow `self` and whose
    /// columns follow `cols` (e.g. a gain `K` mapping observations to states).
    pub fn extract_rect(&self, a: &Mat, cols: &DimTable, m: usize) -> Mat {
        let r = self.range(m);
        let c = cols.range(m);
        a.block(r.start, c.start, r.len(), c.len())
    }

    /// Splits a stacked vector into owned per-client parts.
    pub fn split(&self, v: &[f64]) -> Vec<Vec<f64>> {
        (0..self.clients()).map(|m| self.extract(v, m).to_vec()).collect()
    }

    pub fn concat<V: AsRef<[f64]>>(&self, parts: &[V]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total());
        for p in parts {
            out.extend_from_slice(p.as_ref());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extract_second_client() {
        let t = DimTable::new(vec![2, 2]);
        assert_eq!(t.extract(&[1.0, 2.0, 3.0, 4.0], 1), &[3.0, 4.0]);
    }

    #[test]
    fn single_client_extract_is_identity() {
        let t = DimTable::new(vec![3]);
        let v = [1.0, 2.0, 3.0];
        assert_eq!(t.extract(&v, 0), &v);
        let a = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]]);
        assert_eq!(t.extract_block(&a, 0), a);
    }

    #[test]
    fn split_concat_partition() {
        let t = DimTable::new(vec![1, 3, 2]);
        let v: Vec<f64> = (0..6).map(f64::from).collect();
        assert_eq!(t.concat(&t.split(&v)), v);
    }
}
