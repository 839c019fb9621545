use crate::error::{FusionError, Result};
use crate::model::SourceBlock;

/// K independent studies, each observing the same J dependent outcome blocks.
///
/// Sources are indexed `k * J + j` (study-major, outcome-minor, zero based);
/// every stacked vector in the crate uses this ordering.
#[derive(Debug, Clone)]
pub struct StudyDataset {
    studies: Vec<Vec<SourceBlock>>,
    n_outcomes: usize,
    q: usize,
}

impl StudyDataset {
    pub fn new(studies: Vec<Vec<SourceBlock>>) -> Result<Self> {
        let first = studies
            .first()
            .and_then(|s| s.first())
            .ok_or_else(|| FusionError::InvalidInput("dataset has no sources".into()))?;
        let n_outcomes = studies[0].len();
        let q = first.q();
        for (k, study) in studies.iter().enumerate() {
            if study.len() != n_outcomes {
                return Err(FusionError::Dimension(format!(
                    "study {k} has {} sources, expected {n_outcomes}",
                    study.len()
                )));
            }
            let n = study[0].n();
            for (j, block) in study.iter().enumerate() {
                if block.study != k || block.source != j {
                    return Err(FusionError::InvalidInput(format!(
                        "block labelled ({}, {}) stored at ({k}, {j})",
                        block.study, block.source
                    )));
                }
                if block.n() != n {
                    return Err(FusionError::Dimension(format!(
                        "study {k} source {j} has {} participants, expected {n}",
                        block.n()
                    )));
                }
                if block.q() != q {
                    return Err(FusionError::Dimension(format!(
                        "study {k} source {j} has q = {}, expected {q}",
                        block.q()
                    )));
                }
            }
        }
        Ok(Self {
            studies,
            n_outcomes,
            q,
        })
    }

    /// K.
    pub fn n_studies(&self) -> usize {
        self.studies.len()
    }

    /// J.
    pub fn n_outcomes(&self) -> usize {
        self.n_outcomes
    }

    /// J * K.
    pub fn n_sources(&self) -> usize {
        self.n_outcomes * self.studies.len()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn study_size(&self, k: usize) -> usize {
        self.studies[k][0].n()
    }

    /// N.
    pub fn n_total(&self) -> usize {
        (0..self.n_studies()).map(|k| self.study_size(k)).sum()
    }

    pub fn study(&self, k: usize) -> &[SourceBlock] {
        &self.studies[k]
    }

    pub fn block(&self, k: usize, j: usize) -> &SourceBlock {
        &self.studies[k][j]
    }

    pub fn source_index(&self, k: usize, j: usize) -> usize {
        k * self.n_outcomes + j
    }

    /// `(k, j)` of a source index.
    pub fn source_coords(&self, idx: usize) -> (usize, usize) {
        (idx / self.n_outcomes, idx % self.n_outcomes)
    }

    /// Blocks in source-index order.
    pub fn blocks(&self) -> impl Iterator<Item = &SourceBlock> {
        self.studies.iter().flatten()
    }
}
