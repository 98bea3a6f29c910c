use std::fmt;

use crate::error::{Error, Result};
use crate::raster::MaskTensor;

/// Run-length encoded binary mask.
///
/// The mask is flattened row-major; each run is `(start, length)` with a
/// 1-indexed start. Text form is space-separated `start length` pairs and the
/// empty mask is the empty string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<(usize, usize)>,
}

impl RleMask {
    /// Parses the text form for a mask of the given shape.
    pub fn parse(text: &str, width: usize, height: usize) -> Result<Self> {
        let numbers = text
            .split_ascii_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| Error::InvalidRle(format!("`{tok}` is not a non-negative integer")))
            })
            .collect::<Result<Vec<_>>>()?;
        if numbers.len() % 2 != 0 {
            return Err(Error::InvalidRle(format!(
                "odd number of values ({})",
                numbers.len()
            )));
        }
        let runs = numbers.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        let rle = Self {
            width,
            height,
            runs,
        };
        rle.validate()?;
        Ok(rle)
    }

    /// Checks ordering, bounds and non-overlap of the runs.
    pub fn validate(&self) -> Result<()> {
        let total = self.width * self.height;
        let mut next_free = 1;
        for &(start, len) in &self.runs {
            if start == 0 {
                return Err(Error::InvalidRle("run starts are 1-indexed".into()));
            }
            if len == 0 {
                return Err(Error::InvalidRle(format!("zero-length run at {start}")));
            }
            if start < next_free {
                return Err(Error::InvalidRle(format!(
                    "run at {start} overlaps or precedes the previous run"
                )));
            }
            let end = start + len - 1;
            if end > total {
                return Err(Error::InvalidRle(format!(
                    "run ({start}, {len}) exceeds {}x{} = {total} pixels",
                    self.height, self.width
                )));
            }
            next_free = end + 1;
        }
        Ok(())
    }
}

impl fmt::Display for RleMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (start, len)) in self.runs.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{start} {len}")?;
        }
        Ok(())
    }
}

pub fn rle_encode(mask: &MaskTensor) -> RleMask {
    let mut runs = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for (i, &v) in mask.data().iter().enumerate() {
        match (v, current.as_mut()) {
            (1, Some(run)) => run.1 += 1,
            (1, None) => current = Some((i + 1, 1)),
            (_, Some(_)) => runs.extend(current.take()),
            (_, None) => {}
        }
    }
    runs.extend(current);
    RleMask {
        width: mask.width(),
        height: mask.height(),
        runs,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<MaskTensor> {
    rle.validate()?;
    let mut mask = MaskTensor::zeros(rle.height, rle.width);
    let data = mask.data_mut();
    for &(start, len) in &rle.runs {
        data[start - 1..start - 1 + len].fill(1);
    }
    Ok(mask)
}
