use std::io::Write;

use serde::Serialize;

/// Losses of one iteration. Terms a mode does not optimize are absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub ce: Option<f64>,
    pub mae: Option<f64>,
    pub bce_real: Option<f64>,
    pub bce_fake: Option<f64>,
    pub gen: Option<f64>,
}

impl LossRecord {
    pub(crate) fn new(step: u64, epoch: usize) -> Self {
        Self {
            step,
            epoch,
            ce: None,
            mae: None,
            bce_real: None,
            bce_fake: None,
            gen: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.mae, self.bce_real, self.bce_fake, self.gen]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
    }
}

/// CSV with header `step,epoch,ce,mae,bce_real,bce_fake,gen`; absent terms
/// are empty cells.
pub fn write_loss_csv<W: Write>(records: &[LossRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(["step", "epoch", "ce", "mae", "bce_real", "bce_fake", "gen"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
