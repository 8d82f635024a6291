//! Cyclic samplers and the chain runner.
//!
//! A k-cyclic sampler applies kernels `K_1, …, K_k` in rotation, so the state
//! `X_{kj+i}` is produced by `K_i`. The runner records `f(X_t)` for
//! `t = 1, 2, …` (the initial state is never recorded) into a
//! [`SampleMatrix`] that remembers which phase produced each row.

use std::io::{self, BufRead, Read, Write};

use rand::Rng;
use thiserror::Error;

use crate::numkit::NumError;

/// Failure inside a single kernel application.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    #[error("root bracketing failed for level {level} after {iterations} bisections")]
    RootFailure { level: f64, iterations: usize },
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Numerical(#[from] NumError),
}

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("kernel for phase {phase} failed at iteration {iteration}: {source}")]
    StepFailure {
        phase: usize,
        iteration: u64,
        #[source]
        source: StepError,
    },
    #[error("no rows with phase {phase}")]
    EmptySelection { phase: usize },
    #[error("phase {phase} outside 1..={k}")]
    InvalidPhase { phase: usize, k: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed sample file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `k` transition kernels applied in rotation, plus the function `f` being averaged.
pub trait CyclicSampler {
    type State: Clone;

    /// Cycle length `k >= 1`.
    fn cycle_len(&self) -> usize;

    /// Output dimension `d` of `f`.
    fn dim(&self) -> usize;

    /// Applies kernel `K_phase`, `phase ∈ 1..=k`, in place.
    fn step<R: Rng + ?Sized>(
        &self,
        state: &mut Self::State,
        phase: usize,
        rng: &mut R,
    ) -> Result<(), StepError>;

    /// Writes `f(state)` into `out` (length `d`).
    fn observe(&self, state: &Self::State, out: &mut [f64]);
}

/// `n × d` matrix of recorded `f(X_t)` with cycle metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMatrix {
    d: usize,
    k: usize,
    phase_offset: usize,
    values: Vec<f64>,
}

impl SampleMatrix {
    /// Empty matrix whose first row will carry phase `phase_offset`.
    pub fn new(d: usize, k: usize, phase_offset: usize) -> Result<Self, ChainError> {
        if d == 0 || k == 0 {
            return Err(ChainError::InvalidArgument(format!(
                "need d >= 1 and k >= 1, got d = {d}, k = {k}"
            )));
        }
        if phase_offset == 0 || phase_offset > k {
            return Err(ChainError::InvalidPhase {
                phase: phase_offset,
                k,
            });
        }
        Ok(Self {
            d,
            k,
            phase_offset,
            values: Vec::new(),
        })
    }

    /// Homogeneous (`k = 1`) matrix from rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, ChainError> {
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let mut s = Self::new(d.max(1), 1, 1)?;
        for r in rows {
            s.push_row(r.as_ref())?;
        }
        Ok(s)
    }

    pub fn with_cycle<R: AsRef<[f64]>>(
        rows: &[R],
        k: usize,
        phase_offset: usize,
    ) -> Result<Self, ChainError> {
        let d = rows.first().map_or(1, |r| r.as_ref().len());
        let mut s = Self::new(d, k, phase_offset)?;
        for r in rows {
            s.push_row(r.as_ref())?;
        }
        Ok(s)
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<(), ChainError> {
        if row.len() != self.d {
            return Err(ChainError::InvalidArgument(format!(
                "row has {} values, expected {}",
                row.len(),
                self.d
            )));
        }
        if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
            return Err(ChainError::InvalidArgument(format!(
                "non-finite sample value {bad}"
            )));
        }
        self.values.extend_from_slice(row);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.values.len() / self.d
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn phase_offset(&self) -> usize {
        self.phase_offset
    }

    /// Row `t` (0-based).
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.d..(t + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.d)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Kernel (1..=k) that produced row `t` (0-based).
    pub fn phase_of(&self, t: usize) -> usize {
        (self.phase_offset - 1 + t) % self.k + 1
    }

    /// Column means.
    pub fn mean(&self) -> Vec<f64> {
        self.prefix_mean(self.n())
    }

    /// Column means of the first `m` rows.
    pub fn prefix_mean(&self, m: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.d];
        for row in self.rows().take(m) {
            for (a, v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= m as f64);
        mean
    }

    /// Copy of the first `m` rows (all rows if `m ≥ n`).
    pub fn prefix(&self, m: usize) -> SampleMatrix {
        let m = m.min(self.n());
        SampleMatrix {
            values: self.values[..m * self.d].to_vec(),
            ..*self
        }
    }

    /// Number of rows produced by each phase, indexed `0..k` for phases `1..=k`.
    pub fn phase_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for t in 0..self.n() {
            counts[self.phase_of(t) - 1] += 1;
        }
        counts
    }

    /// Applies `x ↦ A x` to every row (`A` is `d' × d`).
    pub fn map_linear(&self, a: &crate::numkit::Matrix) -> Result<SampleMatrix, ChainError> {
        if a.cols() != self.d {
            return Err(ChainError::InvalidArgument(
                "transform width mismatch".into(),
            ));
        }
        let mut out = SampleMatrix::new(a.rows(), self.k, self.phase_offset)?;
        for row in self.rows() {
            out.values.extend(a.matvec(row));
        }
        Ok(out)
    }

    /// Writes `t,phase,f1,…,fd` CSV with `t` starting at 1.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ChainError> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string(), "phase".to_string()];
        header.extend((1..=self.d).map(|j| format!("f{j}")));
        wtr.write_record(&header).map_err(csv_err)?;
        for (t, row) in self.rows().enumerate() {
            let mut rec = vec![(t + 1).to_string(), self.phase_of(t).to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            wtr.write_record(&rec).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`write_csv`](Self::write_csv). The cycle
    /// length is not recoverable from the file and must be supplied.
    pub fn read_csv<R: Read>(r: R, k: usize) -> Result<SampleMatrix, ChainError> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        if headers.len() < 3 || &headers[0] != "t" || &headers[1] != "phase" {
            return Err(ChainError::Format("expected header t,phase,f1,...".into()));
        }
        let d = headers.len() - 2;
        let mut out: Option<SampleMatrix> = None;
        let mut row = vec![0.0; d];
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let parse = |j: usize| -> Result<f64, ChainError> {
                rec[j]
                    .parse::<f64>()
                    .map_err(|e| ChainError::Format(format!("row {}: {e}", i + 1)))
            };
            let phase = parse(1)? as usize;
            let s = match out.as_mut() {
                Some(s) => s,
                None => out.insert(SampleMatrix::new(d, k, phase)?),
            };
            if s.phase_of(i) != phase {
                return Err(ChainError::Format(format!(
                    "row {}: phase {phase} breaks the cycle",
                    i + 1
                )));
            }
            for (j, v) in row.iter_mut().enumerate() {
                *v = parse(j + 2)?;
            }
            s.push_row(&row)?;
        }
        match out {
            Some(s) => Ok(s),
            None => SampleMatrix::new(d, k, 1),
        }
    }

    /// Little-endian binary: `SMX1`, then `n, d, k, phase_offset` as u64, then row-major f64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), ChainError> {
        w.write_all(b"SMX1")?;
        for v in [self.n(), self.d, self.k, self.phase_offset] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: BufRead>(mut r: R) -> Result<SampleMatrix, ChainError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"SMX1" {
            return Err(ChainError::Format("bad magic".into()));
        }
        let mut word = [0u8; 8];
        let mut header = [0usize; 4];
        for h in header.iter_mut() {
            r.read_exact(&mut word)?;
            *h = u64::from_le_bytes(word) as usize;
        }
        let [n, d, k, phase_offset] = header;
        let mut s = SampleMatrix::new(d, k, phase_offset)?;
        s.values.reserve(n * d);
        for _ in 0..n * d {
            r.read_exact(&mut word)?;
            s.values.push(f64::from_le_bytes(word));
        }
        Ok(s)
    }
}

fn csv_err(e: csv::Error) -> ChainError {
    ChainError::Format(e.to_string())
}

/// Rows of `s` produced by kernel `phase`, as a homogeneous (`k = 1`) matrix.
pub fn subchain_view(s: &SampleMatrix, phase: usize) -> Result<SampleMatrix, ChainError> {
    if phase == 0 || phase > s.k {
        return Err(ChainError::InvalidPhase { phase, k: s.k });
    }
    let mut out = SampleMatrix::new(s.d, 1, 1)?;
    for t in (0..s.n()).filter(|&t| s.phase_of(t) == phase) {
        out.values.extend_from_slice(s.row(t));
    }
    if out.values.is_empty() {
        return Err(ChainError::EmptySelection { phase });
    }
    Ok(out)
}

/// Drives a sampler forward, keeping state and stream between calls so a
/// run can be extended without restarting.
pub struct ChainRunner<'a, S: CyclicSampler, R> {
    sampler: &'a S,
    state: S::State,
    rng: R,
    steps: u64,
    buf: Vec<f64>,
}

impl<'a, S: CyclicSampler, R: Rng> ChainRunner<'a, S, R> {
    pub fn new(sampler: &'a S, init: S::State, rng: R) -> Self {
        Self {
            sampler,
            state: init,
            rng,
            steps: 0,
            buf: vec![0.0; sampler.dim()],
        }
    }

    /// Kernel applications so far, including burn-in.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn state(&self) -> &S::State {
        &self.state
    }

    pub fn next_phase(&self) -> usize {
        (self.steps % self.sampler.cycle_len() as u64) as usize + 1
    }

    fn advance(&mut self) -> Result<(), ChainError> {
        let phase = self.next_phase();
        self.sampler
            .step(&mut self.state, phase, &mut self.rng)
            .map_err(|source| ChainError::StepFailure {
                phase,
                iteration: self.steps + 1,
                source,
            })?;
        self.steps += 1;
        Ok(())
    }

    /// Applies `n` kernels without recording.
    pub fn burn(&mut self, n: usize) -> Result<(), ChainError> {
        for _ in 0..n {
            self.advance()?;
        }
        Ok(())
    }

    /// Empty matrix whose phase metadata matches the next step.
    pub fn empty_samples(&self) -> SampleMatrix {
        SampleMatrix::new(
            self.sampler.dim(),
            self.sampler.cycle_len(),
            self.next_phase(),
        )
        .expect("sampler reports d >= 1 and k >= 1")
    }

    /// Runs `n` more steps, appending `f` after each one to `out`.
    pub fn extend(&mut self, out: &mut SampleMatrix, n: usize) -> Result<(), ChainError> {
        if out.n() > 0 && out.phase_of(out.n()) != self.next_phase() {
            return Err(ChainError::InvalidArgument(
                "sample matrix is not aligned with this runner".into(),
            ));
        }
        out.values.reserve(n * out.d);
        for _ in 0..n {
            self.advance()?;
            self.sampler.observe(&self.state, &mut self.buf);
            out.push_row(&self.buf).map_err(|e| match e {
                ChainError::InvalidArgument(msg) => ChainError::StepFailure {
                    phase: self.next_phase(),
                    iteration: self.steps,
                    source: StepError::InvalidState(msg),
                },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn run(&mut self, n: usize) -> Result<SampleMatrix, ChainError> {
        let mut out = self.empty_samples();
        self.extend(&mut out, n)?;
        Ok(out)
    }

    pub fn into_state(self) -> S::State {
        self.state
    }
}

/// Runs `burn_in` unrecorded steps and then records `n` rows.
pub fn run_chain<S: CyclicSampler, R: Rng + ?Sized>(
    sampler: &S,
    init: S::State,
    n: usize,
    burn_in: usize,
    rng: &mut R,
) -> Result<SampleMatrix, ChainError> {
    if n == 0 {
        return Err(ChainError::InvalidArgument("n must be >= 1".into()));
    }
    let mut runner = ChainRunner::new(sampler, init, rng);
    runner.burn(burn_in)?;
    runner.run(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::stream;

    /// Adds one per step; `f` is the identity.
    struct Counter {
        k: usize,
    }

    impl CyclicSampler for Counter {
        type State = f64;
        fn cycle_len(&self) -> usize {
            self.k
        }
        fn dim(&self) -> usize {
            1
        }
        fn step<R: Rng + ?Sized>(&self, s: &mut f64, _: usize, _: &mut R) -> Result<(), StepError> {
            *s += 1.0;
            Ok(())
        }
        fn observe(&self, s: &f64, out: &mut [f64]) {
            out[0] = *s;
        }
    }

    /// Records the phase it was last stepped with; fails on step `fail_at`.
    struct PhaseEcho {
        k: usize,
        fail_at: Option<u64>,
    }

    impl CyclicSampler for PhaseEcho {
        type State = (u64, usize);
        fn cycle_len(&self) -> usize {
            self.k
        }
        fn dim(&self) -> usize {
            1
        }
        fn step<R: Rng + ?Sized>(
            &self,
            s: &mut (u64, usize),
            phase: usize,
            _: &mut R,
        ) -> Result<(), StepError> {
            s.0 += 1;
            if Some(s.0) == self.fail_at {
                return Err(StepError::InvalidState("boom".into()));
            }
            s.1 = phase;
            Ok(())
        }
        fn observe(&self, s: &(u64, usize), out: &mut [f64]) {
            out[0] = s.1 as f64;
        }
    }

    #[test]
    fn counter_records_post_step_states() {
        let s = run_chain(&Counter { k: 1 }, 0.0, 3, 0, &mut stream(0, 0)).unwrap();
        assert_eq!(s.values(), &[1.0, 2.0, 3.0]);
        assert_eq!(s.phase_offset(), 1);
    }

    #[test]
    fn phases_follow_burn_in() {
        let sampler = PhaseEcho {
            k: 2,
            fail_at: None,
        };
        let s = run_chain(&sampler, (0, 0), 5, 2, &mut stream(0, 0)).unwrap();
        assert_eq!(s.phase_offset(), 1);
        let phases: Vec<usize> = (0..5).map(|t| s.phase_of(t)).collect();
        assert_eq!(phases, vec![1, 2, 1, 2, 1]);
        // the recorded value is the kernel that actually ran
        assert_eq!(s.values(), &[1.0, 2.0, 1.0, 2.0, 1.0]);

        let s = run_chain(
            &PhaseEcho {
                k: 4,
                fail_at: None,
            },
            (0, 0),
            6,
            3,
            &mut stream(0, 0),
        )
        .unwrap();
        assert_eq!(s.phase_offset(), 4);
        assert_eq!(s.values(), &[4.0, 1.0, 2.0, 3.0, 4.0, 1.0]);
        assert_eq!(s.phase_counts(), vec![2, 1, 1, 2]);
    }

    #[test]
    fn step_failure_carries_phase_and_iteration() {
        let sampler = PhaseEcho {
            k: 3,
            fail_at: Some(5),
        };
        match run_chain(&sampler, (0, 0), 10, 0, &mut stream(0, 0)) {
            Err(ChainError::StepFailure {
                phase, iteration, ..
            }) => {
                assert_eq!((phase, iteration), (2, 5));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_length_rejected() {
        assert!(run_chain(&Counter { k: 1 }, 0.0, 0, 0, &mut stream(0, 0)).is_err());
    }

    #[test]
    fn subchain_selects_phase_rows() {
        let s = run_chain(&Counter { k: 2 }, 0.0, 6, 0, &mut stream(0, 0)).unwrap();
        let v = subchain_view(&s, 1).unwrap();
        assert_eq!(v.values(), &[1.0, 3.0, 5.0]);
        assert_eq!(v.k(), 1);
        assert!(matches!(
            subchain_view(&s, 3),
            Err(ChainError::InvalidPhase { phase: 3, k: 2 })
        ));
        let one = SampleMatrix::with_cycle(&[[1.0]], 2, 1).unwrap();
        assert!(matches!(
            subchain_view(&one, 2),
            Err(ChainError::EmptySelection { phase: 2 })
        ));
    }

    #[test]
    fn subchain_of_homogeneous_is_identity() {
        let s = run_chain(&Counter { k: 1 }, 0.0, 7, 0, &mut stream(0, 0)).unwrap();
        assert_eq!(subchain_view(&s, 1).unwrap(), s);
    }

    #[test]
    fn subchains_partition_parent() {
        let s = run_chain(&Counter { k: 3 }, 0.0, 11, 1, &mut stream(0, 0)).unwrap();
        let mut merged: Vec<(usize, f64)> = Vec::new();
        for phase in 1..=3 {
            let idx: Vec<usize> = (0..s.n()).filter(|&t| s.phase_of(t) == phase).collect();
            let v = subchain_view(&s, phase).unwrap();
            assert_eq!(v.n(), idx.len());
            merged.extend(idx.into_iter().zip(v.values().iter().copied()));
        }
        merged.sort_by_key(|p| p.0);
        let values: Vec<f64> = merged.into_iter().map(|p| p.1).collect();
        assert_eq!(values, s.values());
    }

    #[test]
    fn csv_layout() {
        let s = SampleMatrix::with_cycle(&[[1.0, 2.5], [3.0, -4.0], [0.1, 0.2]], 2, 2).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "t,phase,f1,f2\n1,2,1,2.5\n2,1,3,-4\n3,2,0.1,0.2\n");
        assert_eq!(SampleMatrix::read_csv(&buf[..], 2).unwrap(), s);
    }

    #[test]
    fn binary_layout() {
        let s = SampleMatrix::with_cycle(&[[1.5], [2.0]], 4, 3).unwrap();
        let mut buf = Vec::new();
        s.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SMX1");
        assert_eq!(buf.len(), 4 + 4 * 8 + 2 * 8);
        assert_eq!(u64::from_le_bytes(buf[4..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[28..36].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(buf[36..44].try_into().unwrap()), 1.5);
        assert!(SampleMatrix::read_binary(&b"SMX2"[..]).is_err());
    }
}
