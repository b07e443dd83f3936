use super::{EngineError, Result};

/// Keys and values for the draft's cross-attention: verified target features
/// below the watermark, then the draft's own speculative features for the
/// current round.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    d: usize,
    data: Vec<f64>,
    watermark: usize,
}

impl FeatureBank {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            data: Vec::new(),
            watermark: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows produced by the target.
    pub fn watermark(&self) -> usize {
        self.watermark
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Appends verified rows. Only allowed while no speculative rows are pending.
    pub fn push_verified(&mut self, rows: &[f64]) -> Result<()> {
        if self.len() != self.watermark {
            return Err(EngineError::Desync(format!(
                "{} speculative rows still pending above the watermark",
                self.len() - self.watermark
            )));
        }
        self.check_width(rows)?;
        self.data.extend_from_slice(rows);
        self.watermark = self.len();
        Ok(())
    }

    /// Appends draft-produced rows above the watermark; returns the first new index.
    pub fn push_speculative(&mut self, rows: &[f64]) -> Result<usize> {
        self.check_width(rows)?;
        let first = self.len();
        self.data.extend_from_slice(rows);
        Ok(first)
    }

    /// Drops every speculative row.
    pub fn rollback(&mut self) {
        self.data.truncate(self.watermark * self.d);
    }

    fn check_width(&self, rows: &[f64]) -> Result<()> {
        if rows.len() % self.d == 0 {
            Ok(())
        } else {
            Err(EngineError::Desync(format!("{} values are not whole rows of width {}", rows.len(), self.d)))
        }
    }
}
