use crate::error::{Error, Result};

/// Sinusoidal encoding of a time step.
///
/// The first half holds `sin(t * w_k)`, the second half `cos(t * w_k)`, with
/// `w_k = 10000^(-2k / dim)` for `k = 0 .. dim/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding {
    values: Vec<f64>,
}

impl TimeEmbedding {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub fn time_embed(t: usize, dim: usize) -> Result<TimeEmbedding> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidParameter(format!(
            "time embedding dimension must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| 10000f64.powf(-2.0 * k as f64 / dim as f64))
        .collect();
    let t = t as f64;
    let values = freqs
        .iter()
        .map(|w| (t * w).sin())
        .chain(freqs.iter().map(|w| (t * w).cos()))
        .collect();
    Ok(TimeEmbedding { values })
}
