//! Combining displacement fields estimated from several moving modalities.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volgrid::DisplacementField;

/// How fields from different modalities are combined voxel by voxel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[non_exhaustive]
pub enum FusionStrategy {
    /// Keep the whole vector with the largest Euclidean norm.
    #[default]
    VectorNormMax,
}

impl FusionStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            FusionStrategy::VectorNormMax => "vector_norm_max",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vector_norm_max" => Ok(FusionStrategy::VectorNormMax),
            other => Err(Error::InvalidConfig(format!(
                "unknown fusion strategy '{other}'"
            ))),
        }
    }
}

/// Fields registered from different moving modalities onto one fixed grid.
#[derive(Clone, Debug)]
pub struct ModalityFieldSet {
    fields: Vec<DisplacementField>,
    labels: Vec<String>,
}

impl ModalityFieldSet {
    pub fn new(fields: Vec<DisplacementField>, labels: Vec<String>) -> Result<Self> {
        let Some(first) = fields.first() else {
            return Err(Error::Empty("modality field set"));
        };
        if labels.len() != fields.len() {
            return Err(Error::LengthMismatch {
                what: "modality labels",
                expected: fields.len(),
                found: labels.len(),
            });
        }
        for f in &fields[1..] {
            first.grid().require_same_dims(f.grid())?;
            if f.spacing() != first.spacing() {
                return Err(Error::InvalidArgument(format!(
                    "modality fields disagree on spacing: {:?} vs {:?}",
                    first.spacing(),
                    f.spacing()
                )));
            }
        }
        Ok(Self { fields, labels })
    }

    /// Labels default to `modality0`, `modality1`, ...
    pub fn unlabeled(fields: Vec<DisplacementField>) -> Result<Self> {
        let labels = (0..fields.len()).map(|i| format!("modality{i}")).collect();
        Self::new(fields, labels)
    }

    pub fn fields(&self) -> &[DisplacementField] {
        &self.fields
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Voxelwise maximum-norm selection; ties keep the lowest modality index.
pub fn max_fuse(set: &ModalityFieldSet) -> DisplacementField {
    let first = &set.fields[0];
    if set.fields.len() == 1 {
        return first.clone();
    }
    let vectors = (0..first.grid().len())
        .into_par_iter()
        .map(|i| {
            let mut best = first.vectors()[i];
            let mut best_n2 = best.iter().map(|x| x * x).sum::<f64>();
            for f in &set.fields[1..] {
                let u = f.vectors()[i];
                let n2 = u.iter().map(|x| x * x).sum::<f64>();
                if n2 > best_n2 {
                    best = u;
                    best_n2 = n2;
                }
            }
            best
        })
        .collect();
    DisplacementField::from_parts_unchecked(*first.grid(), vectors)
}

pub fn fuse(set: &ModalityFieldSet, strategy: FusionStrategy) -> DisplacementField {
    match strategy {
        FusionStrategy::VectorNormMax => max_fuse(set),
    }
}
