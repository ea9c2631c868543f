//! Execution-time model for chunks and microbatches, and its least-squares
//! calibration from profiling samples.
//!
//! A chunk of `c` tokens with `p` tokens of prefix costs
//! `alpha * (p*c + (c^2 + c)/2) + beta * c + gamma`. Chunks batched together
//! share one parameter load, so a batch of `n` chunks is the sum of its chunk
//! costs minus `(n - 1)` times the shared discount (gamma unless a separate
//! discount is configured).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Chunk;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostCoefficients {
    /// Seconds per attention token pair.
    pub alpha: f64,
    /// Seconds per token.
    pub beta: f64,
    /// Seconds of fixed overhead per chunk.
    pub gamma: f64,
    /// Optional batch discount per extra chunk; defaults to `gamma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl CostCoefficients {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> CostCoefficients {
        CostCoefficients {
            alpha,
            beta,
            gamma,
            lambda: None,
        }
    }

    pub fn discount(&self) -> f64 {
        self.lambda.unwrap_or(self.gamma)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.lambda.unwrap_or(0.0)];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidModel(format!("cost coefficients must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Attention token-pair work of a chunk: prefix attention plus causal
/// self-attention.
pub fn attention_pairs(c: u64, p: u64) -> f64 {
    let (c, p) = (c as f64, p as f64);
    p * c + (c * c + c) / 2.0
}

pub fn chunk_cost(c: u64, p: u64, coeffs: &CostCoefficients) -> f64 {
    coeffs.alpha * attention_pairs(c, p) + coeffs.beta * c as f64 + coeffs.gamma
}

/// Cost of executing `(tokens, prefix)` pairs as one batch.
pub fn batch_cost_of<I>(parts: I, coeffs: &CostCoefficients) -> f64
where
    I: IntoIterator<Item = (u64, u64)>,
{
    let mut total = 0.0;
    let mut n = 0usize;
    for (c, p) in parts {
        total += chunk_cost(c, p, coeffs);
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    total - (n as f64 - 1.0) * coeffs.discount()
}

pub fn batch_cost(chunks: &[Chunk], coeffs: &CostCoefficients) -> f64 {
    batch_cost_of(chunks.iter().map(|c| (c.token_count as u64, c.prefix_len)), coeffs)
}

/// One profiled batch: the `(tokens, prefix)` shape of each chunk and the
/// measured wall time.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileSample {
    pub chunks: Vec<(u64, u64)>,
    pub measured_seconds: f64,
}

impl ProfileSample {
    pub fn single(c: u64, p: u64, measured_seconds: f64) -> ProfileSample {
        ProfileSample {
            chunks: vec![(c, p)],
            measured_seconds,
        }
    }

    fn features(&self) -> [f64; 3] {
        let pairs: f64 = self.chunks.iter().map(|&(c, p)| attention_pairs(c, p)).sum();
        let tokens: f64 = self.chunks.iter().map(|&(c, _)| c as f64).sum();
        // sum of n gammas minus (n - 1) discounts leaves one gamma
        [pairs, tokens, 1.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct FitOptions {
    /// Force alpha to zero (a token-count-only model).
    pub tokens_only: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitReport {
    pub coeffs: CostCoefficients,
    pub residual_rms: f64,
}

pub fn fit(samples: &[ProfileSample]) -> Result<FitReport> {
    fit_with(samples, FitOptions::default())
}

/// Non-negative least squares over the active features, solved exactly by
/// enumerating which coefficients are pinned at zero.
pub fn fit_with(samples: &[ProfileSample], opts: FitOptions) -> Result<FitReport> {
    let active: Vec<usize> = if opts.tokens_only { vec![1, 2] } else { vec![0, 1, 2] };
    if samples.len() < active.len() {
        return Err(Error::InsufficientProfileDiversity(format!(
            "{} samples for {} coefficients",
            samples.len(),
            active.len()
        )));
    }

    let rows: Vec<[f64; 3]> = samples.iter().map(ProfileSample::features).collect();
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.measured_seconds));

    // column scaling keeps the pair feature (~1e7) and the constant comparable
    let scale: Vec<f64> = (0..3)
        .map(|j| rows.iter().map(|r| r[j].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE))
        .collect();

    let full = design(&rows, &active, &scale);
    let svd = full.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax <= 0.0 || smin / smax < 1e-10 {
        return Err(Error::InsufficientProfileDiversity("rank-deficient design matrix".into()));
    }

    let mut best: Option<(f64, [f64; 3])> = None;
    for mask in (1u32..(1 << active.len())).rev() {
        let cols: Vec<usize> = active
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &j)| j)
            .collect();
        let a = design(&rows, &cols, &scale);
        let Ok(x) = a.clone().svd(true, true).solve(&y, 1e-14) else {
            continue;
        };
        if x.iter().any(|v| *v < 0.0) {
            continue;
        }
        let resid = (&a * &x - &y).norm_squared();
        let mut coef = [0.0; 3];
        for (k, &j) in cols.iter().enumerate() {
            coef[j] = x[k] / scale[j];
        }
        if best.as_ref().is_none_or(|(r, _)| resid < *r) {
            best = Some((resid, coef));
        }
    }

    let (resid, coef) = best.unwrap_or((y.norm_squared(), [0.0; 3]));
    Ok(FitReport {
        coeffs: CostCoefficients::new(coef[0], coef[1], coef[2]),
        residual_rms: (resid / samples.len() as f64).sqrt(),
    })
}

fn design(rows: &[[f64; 3]], cols: &[usize], scale: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, k| rows[i][cols[k]] / scale[cols[k]])
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRow {
    c: u64,
    p: u64,
    batch_id: u64,
    measured_us: f64,
}

/// Reads profile samples from CSV with columns `c,p,batch_id,measured_us`.
/// Rows sharing a `batch_id` form one batch.
pub fn read_profile_csv<R: Read>(reader: R) -> Result<Vec<ProfileSample>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut batches: BTreeMap<u64, ProfileSample> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: ProfileRow = row?;
        let entry = batches.entry(row.batch_id).or_insert_with(|| ProfileSample {
            chunks: Vec::new(),
            measured_seconds: row.measured_us / 1e6,
        });
        entry.chunks.push((row.c, row.p));
    }
    Ok(batches.into_values().collect())
}

pub fn write_profile_csv<W: Write>(writer: W, samples: &[ProfileSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (batch_id, s) in samples.iter().enumerate() {
        for &(c, p) in &s.chunks {
            w.serialize(ProfileRow {
                c,
                p,
                batch_id: batch_id as u64,
                measured_us: s.measured_seconds * 1e6,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}
