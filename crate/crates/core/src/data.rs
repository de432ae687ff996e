//! Labeled feature matrices with optional value-range metadata.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Closed interval every feature must lie in (e.g. `[0, 1]` for images).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueRange {
    pub lo: f64,
    pub hi: f64,
}

impl ValueRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::param(format!("invalid value range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<i32>,
    range: Option<ValueRange>,
    provenance: Value,
}

impl Dataset {
    /// `features` must be rank-2 `[n, m]` with `n == labels.len()`.
    pub fn new(features: Tensor, labels: Vec<i32>, range: Option<ValueRange>) -> Result<Self> {
        let (n, _) = features.dims2("dataset features")?;
        if n != labels.len() {
            return Err(Error::data(format!(
                "{} feature rows but {} labels",
                n,
                labels.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        if let Some(r) = range {
            if let Some(v) = features.data().iter().find(|v| !r.contains(**v)) {
                return Err(Error::data(format!(
                    "feature {v} outside value range [{}, {}]",
                    r.lo, r.hi
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            range,
            provenance: Value::Object(Default::default()),
        })
    }

    pub fn with_provenance(mut self, provenance: Value) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn provenance(&self) -> &Value {
        &self.provenance
    }

    pub fn provenance_mut(&mut self) -> &mut Value {
        &mut self.provenance
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn range(&self) -> Option<ValueRange> {
        self.range
    }

    /// Replaces the features, clamping into the value range when one is set;
    /// labels are untouched.
    pub fn replace_features(&mut self, mut features: Tensor) -> Result<()> {
        features.expect_same_shape(&self.features)?;
        if let Some(r) = self.range {
            for v in features.data_mut() {
                *v = r.clamp(*v);
            }
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("replacement features".into()));
        }
        self.features = features;
        Ok(())
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            range: self.range,
            provenance: self.provenance.clone(),
        }
    }

    pub fn class_counts(&self) -> BTreeMap<i32, usize> {
        let mut counts = BTreeMap::new();
        for &y in &self.labels {
            *counts.entry(y).or_insert(0) += 1;
        }
        counts
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts().len()
    }

    /// True when every label is `-1` or `+1`.
    pub fn has_signed_labels(&self) -> bool {
        self.labels.iter().all(|&y| y == 1 || y == -1)
    }

    pub fn ensure_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::data("empty dataset"))
        } else {
            Ok(())
        }
    }
}
