use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{FwpError, Result};
use crate::tensor::Mat;

/// Named parameters (or gradients) in a fixed, sorted order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet {
    entries: BTreeMap<String, Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Mat) {
        self.entries.insert(name.into(), m);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Mat> {
        self.get(name)
            .ok_or_else(|| FwpError::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|m| m.rows() * m.cols()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, m)| (k.clone(), Mat::zeros(m.rows(), m.cols())))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    /// `self += s · other`, names and shapes must match.
    pub fn axpy(&mut self, s: f64, other: &ParamSet) -> Result<()> {
        if !self.same_layout(other) {
            return Err(FwpError::Shape("parameter sets differ in layout".into()));
        }
        for (m, o) in self.entries.values_mut().zip(other.entries.values()) {
            m.axpy(s, o);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.entries.values_mut() {
            *m = m.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|m| m.frobenius_dot(m))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Mat::is_finite)
    }

    pub fn into_map(self) -> BTreeMap<String, Mat> {
        self.entries
    }
}

impl From<BTreeMap<String, Mat>> for ParamSet {
    fn from(entries: BTreeMap<String, Mat>) -> Self {
        Self { entries }
    }
}

impl FromIterator<(String, Mat)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Mat)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axpy_and_norm() {
        let mut p = ParamSet::new();
        p.insert("a", Mat::from_vec(1, 2, vec![3.0, 0.0]));
        p.insert("b", Mat::from_vec(1, 1, vec![4.0]));
        assert_eq!(p.global_norm(), 5.0);
        let g = p.clone();
        p.axpy(-1.0, &g).unwrap();
        assert_eq!(p, g.zeros_like());
        let mut other = ParamSet::new();
        other.insert("a", Mat::zeros(2, 1));
        assert!(p.axpy(1.0, &other).is_err());
    }
}
