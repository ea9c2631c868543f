//! Request traces: CSV loading, synthetic bursty arrivals, and rate
//! rescaling that keeps the temporal shape.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub arrival_s: f64,
    pub input_len: u32,
    pub output_len: u32,
}

const HEADER: [&str; 3] = ["arrival_s", "input_len", "output_len"];

pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let file = File::open(path)?;
    read_trace(file, path)
}

/// Parses CSV trace data; `origin` is only used in error messages.
pub fn read_trace<R: Read>(reader: R, origin: &Path) -> Result<Vec<TraceRecord>> {
    let err = |line: usize, msg: String| Error::Trace {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(err(1, format!("expected header `{}`", HEADER.join(","))));
    }
    let mut out: Vec<TraceRecord> = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            err(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != 3 {
            return Err(err(line, format!("expected 3 fields, found {}", row.len())));
        }
        let arrival_s: f64 = row[0].parse().map_err(|_| err(line, format!("bad arrival_s `{}`", &row[0])))?;
        let input_len: u32 = row[1].parse().map_err(|_| err(line, format!("bad input_len `{}`", &row[1])))?;
        let output_len: u32 = row[2].parse().map_err(|_| err(line, format!("bad output_len `{}`", &row[2])))?;
        if !arrival_s.is_finite() || arrival_s < 0.0 {
            return Err(err(line, "arrival_s must be a finite non-negative number".into()));
        }
        if input_len == 0 || output_len == 0 {
            return Err(err(line, "lengths must be >= 1".into()));
        }
        if let Some(prev) = out.last() {
            if arrival_s < prev.arrival_s {
                return Err(err(line, format!("arrival_s {arrival_s} is before the previous row ({})", prev.arrival_s)));
            }
        }
        out.push(TraceRecord {
            arrival_s,
            input_len,
            output_len,
        });
    }
    Ok(out)
}

pub fn write_trace<W: Write>(writer: W, trace: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER)?;
    for r in trace {
        // shortest representation that parses back to the same f64
        w.write_record([format!("{}", r.arrival_s), r.input_len.to_string(), r.output_len.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    write_trace(File::create(path)?, trace)
}

/// Keeps element `j` iff the running count `floor(j * r)` advances, which
/// keeps a fraction `r` of the elements evenly spread. Element 0 is kept.
fn stride_keep(j: usize, r: f64) -> bool {
    j == 0 || (j as f64 * r).floor() > ((j - 1) as f64 * r).floor()
}

/// Changes the arrival rate by `factor` while keeping the shape of the rate
/// curve. Above 1 each arrival is replicated with small deterministic
/// offsets and the result is thinned to the exact rate; below 1 the trace is
/// thinned by stride.
pub fn rescale(trace: &[TraceRecord], factor: f64) -> Vec<TraceRecord> {
    assert!(factor > 0.0 && factor.is_finite(), "rescale factor must be positive");
    if factor == 1.0 || trace.is_empty() {
        return trace.to_vec();
    }
    if factor < 1.0 {
        return trace.iter().enumerate().filter(|(j, _)| stride_keep(*j, factor)).map(|(_, r)| *r).collect();
    }
    let n = factor.ceil() as usize;
    let mut expanded = Vec::with_capacity(trace.len() * n);
    for (i, rec) in trace.iter().enumerate() {
        let gap = match (trace.get(i + 1), i.checked_sub(1).map(|p| trace[p])) {
            (Some(next), _) => next.arrival_s - rec.arrival_s,
            (None, Some(prev)) => rec.arrival_s - prev.arrival_s,
            (None, None) => 0.0,
        };
        // offsets stay below half the gap to the next arrival
        let step = gap / (2.0 * n as f64);
        for k in 0..n {
            expanded.push(TraceRecord {
                arrival_s: rec.arrival_s + k as f64 * step,
                ..*rec
            });
        }
    }
    let r = factor / n as f64;
    expanded.into_iter().enumerate().filter(|(j, _)| stride_keep(*j, r)).map(|(_, r)| r).collect()
}

/// Mean prompt/output lengths of the datasets the generator imitates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    BurstGpt,
    ShareGpt,
    LongBench,
}

impl Dataset {
    pub fn mean_lengths(self) -> (f64, f64) {
        match self {
            Dataset::BurstGpt => (642.0, 262.0),
            Dataset::ShareGpt => (1660.0, 373.0),
            Dataset::LongBench => (5900.0, 499.0),
        }
    }
}

/// Lognormal prompt and output lengths with the given means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthDist {
    pub input_mean: f64,
    pub output_mean: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Upper clamp for both lengths.
    #[serde(default)]
    pub max_len: Option<u32>,
}

fn default_sigma() -> f64 {
    1.0
}

impl LengthDist {
    pub fn from_dataset(d: Dataset) -> LengthDist {
        let (i, o) = d.mean_lengths();
        LengthDist {
            input_mean: i,
            output_mean: o,
            sigma: 1.0,
            max_len: None,
        }
    }

    fn sampler(mean: f64, sigma: f64) -> LogNormal<f64> {
        LogNormal::new(mean.ln() - sigma * sigma / 2.0, sigma).expect("valid lognormal")
    }

    fn draw(&self, rng: &mut impl Rng) -> (u32, u32) {
        let cap = self.max_len.unwrap_or(u32::MAX) as f64;
        let i = Self::sampler(self.input_mean, self.sigma).sample(rng).round().clamp(1.0, cap) as u32;
        let o = Self::sampler(self.output_mean, self.sigma).sample(rng).round().clamp(1.0, cap) as u32;
        (i, o)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Burst {
    pub start_s: f64,
    pub len_s: f64,
    pub rps: f64,
}

/// Poisson arrivals at `base_rps`, raised to each burst's rate inside its
/// window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub base_rps: f64,
    #[serde(default)]
    pub bursts: Vec<Burst>,
    pub duration_s: f64,
    pub lengths: LengthDist,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    pub fn rate_at(&self, t: f64) -> f64 {
        self.bursts
            .iter()
            .filter(|b| t >= b.start_s && t < b.start_s + b.len_s)
            .map(|b| b.rps)
            .fold(self.base_rps, f64::max)
    }
}

pub fn synth_burst(base_rps: f64, burst_rps: f64, burst_start: f64, burst_len: f64, duration_s: f64, lengths: LengthDist, seed: u64) -> Vec<TraceRecord> {
    synthesize(&SynthSpec {
        base_rps,
        bursts: vec![Burst {
            start_s: burst_start,
            len_s: burst_len,
            rps: burst_rps,
        }],
        duration_s,
        lengths,
        seed,
    })
}

/// Seeded arrivals from a piecewise-constant rate, by thinning a Poisson
/// process at the peak rate.
pub fn synthesize(spec: &SynthSpec) -> Vec<TraceRecord> {
    let peak = spec.bursts.iter().map(|b| b.rps).fold(spec.base_rps, f64::max);
    assert!(peak > 0.0, "arrival rates must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gaps = Exp::new(peak).expect("positive rate");
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        t += gaps.sample(&mut rng);
        if t >= spec.duration_s {
            break;
        }
        let accept: f64 = rng.gen();
        let (i, o) = spec.lengths.draw(&mut rng);
        if accept * peak < spec.rate_at(t) {
            // arrivals are kept at microsecond resolution
            out.push(TraceRecord {
                arrival_s: (t * 1e6).round() / 1e6,
                input_len: i,
                output_len: o,
            });
        }
    }
    out
}

/// Arrivals per `window_s` window, starting at zero.
pub fn windowed_counts(trace: &[TraceRecord], window_s: f64, duration_s: f64) -> Vec<usize> {
    let n = (duration_s / window_s).ceil() as usize;
    let mut counts = vec![0; n];
    for r in trace {
        let w = (r.arrival_s / window_s) as usize;
        if w < n {
            counts[w] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn origin() -> PathBuf {
        PathBuf::from("t.csv")
    }

    #[test]
    fn loads_well_formed_rows() {
        let data = "arrival_s,input_len,output_len\n0.0,10,5\n0.5,20,6\n1.25,30,7\n";
        let t = read_trace(data.as_bytes(), &origin()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t[2].input_len, 30);
    }

    #[test]
    fn rejects_zero_lengths_with_line_number() {
        let data = "arrival_s,input_len,output_len\n0.0,10,5\n0.5,20,0\n";
        let err = read_trace(data.as_bytes(), &origin()).unwrap_err().to_string();
        assert!(err.contains("t.csv:3"), "{err}");
    }

    #[test]
    fn rejects_time_going_backwards_and_bad_fields() {
        let data = "arrival_s,input_len,output_len\n1.0,10,5\n0.5,20,3\n";
        assert!(read_trace(data.as_bytes(), &origin()).is_err());
        let data = "arrival_s,input_len,output_len\n1.0,ten,5\n";
        let err = read_trace(data.as_bytes(), &origin()).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("input_len"), "{err}");
        let data = "time,in,out\n1.0,1,5\n";
        assert!(read_trace(data.as_bytes(), &origin()).is_err());
    }

    #[test]
    fn write_then_load_is_identity() {
        let lengths = LengthDist::from_dataset(Dataset::ShareGpt);
        let t = synth_burst(2.0, 6.0, 10.0, 5.0, 30.0, lengths, 7);
        let mut buf = Vec::new();
        write_trace(&mut buf, &t).unwrap();
        assert_eq!(read_trace(buf.as_slice(), &origin()).unwrap(), t);
    }

    fn uniform(rps: f64, secs: f64) -> Vec<TraceRecord> {
        (0..(rps * secs) as usize)
            .map(|i| TraceRecord {
                arrival_s: i as f64 / rps,
                input_len: 1,
                output_len: 1,
            })
            .collect()
    }

    #[test]
    fn factor_one_is_identity() {
        let t = uniform(1.0, 20.0);
        assert_eq!(rescale(&t, 1.0), t);
    }

    #[test]
    fn doubling_a_uniform_trace() {
        let t = uniform(1.0, 100.0);
        let s = rescale(&t, 2.0);
        assert_eq!(s.len(), 200);
        for w in windowed_counts(&s, 10.0, 100.0) {
            assert_eq!(w, 20);
        }
        for pair in s.windows(2) {
            assert!(pair[1].arrival_s >= pair[0].arrival_s);
        }
    }

    #[test]
    fn windowed_rate_ratio_tracks_factor() {
        let spec = SynthSpec {
            base_rps: 5.0,
            bursts: vec![Burst {
                start_s: 40.0,
                len_s: 20.0,
                rps: 15.0,
            }],
            duration_s: 100.0,
            lengths: LengthDist::from_dataset(Dataset::BurstGpt),
            seed: 3,
        };
        let t = synthesize(&spec);
        for factor in [0.5, 1.5, 2.0, 3.3] {
            let s = rescale(&t, factor);
            let a = windowed_counts(&t, 10.0, 100.0);
            let b = windowed_counts(&s, 10.0, 100.0);
            for (x, y) in a.iter().zip(&b) {
                let ratio = *y as f64 / *x as f64;
                assert!((ratio / factor - 1.0).abs() <= 0.1, "factor {factor}: {x} -> {y}");
            }
            // first and last arrival within one gap of the original
            assert!(s[0].arrival_s - t[0].arrival_s <= t[1].arrival_s - t[0].arrival_s);
            let (lt, ls) = (t[t.len() - 1].arrival_s, s[s.len() - 1].arrival_s);
            assert!((lt - ls).abs() <= lt - t[t.len() - 2].arrival_s + 1e-9);
        }
    }

    #[test]
    fn equal_rates_give_a_stationary_trace() {
        let lengths = LengthDist::from_dataset(Dataset::BurstGpt);
        let t = synth_burst(10.0, 10.0, 30.0, 30.0, 90.0, lengths, 1);
        let c = windowed_counts(&t, 30.0, 90.0);
        for w in c {
            assert!((w as f64 - 300.0).abs() < 60.0, "{w}");
        }
    }

    #[test]
    fn step_doubles_the_rate() {
        let lengths = LengthDist::from_dataset(Dataset::BurstGpt);
        let t = synth_burst(40.0, 80.0, 45.0, 45.0, 90.0, lengths, 11);
        let c = windowed_counts(&t, 45.0, 90.0);
        let r = c[1] as f64 / c[0] as f64;
        assert!((r - 2.0).abs() < 0.2, "{r}");
    }

    #[test]
    fn empirical_means_match_the_datasets() {
        for d in [Dataset::BurstGpt, Dataset::ShareGpt, Dataset::LongBench] {
            let spec = SynthSpec {
                base_rps: 200.0,
                bursts: vec![],
                duration_s: 60.0,
                lengths: LengthDist::from_dataset(d),
                seed: 5,
            };
            let t = synthesize(&spec);
            assert!(t.len() >= 10_000);
            let (mi, mo) = d.mean_lengths();
            let ai = t.iter().map(|r| r.input_len as f64).sum::<f64>() / t.len() as f64;
            let ao = t.iter().map(|r| r.output_len as f64).sum::<f64>() / t.len() as f64;
            assert!((ai / mi - 1.0).abs() < 0.05, "{d:?} input {ai}");
            assert!((ao / mo - 1.0).abs() < 0.05, "{d:?} output {ao}");
        }
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let lengths = LengthDist::from_dataset(Dataset::LongBench);
        let a = synth_burst(3.0, 9.0, 5.0, 5.0, 20.0, lengths, 42);
        let b = synth_burst(3.0, 9.0, 5.0, 5.0, 20.0, lengths, 42);
        let c = synth_burst(3.0, 9.0, 5.0, 5.0, 20.0, lengths, 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
