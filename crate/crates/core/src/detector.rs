//! CUSUM-type change detector over observed `(Y_t, A_t)` pairs.
//!
//! For a segment of transitions `k..n` the score is
//!
//! ```text
//! S_{k:n} = sum_{(l,j)} sum_{l'} N(l,j,l') ln( N(l,j,l') / (N(l,j) p(l'|l,j)) )
//! ```
//!
//! with `N` the transition counts inside the segment and `p` the nominal
//! kernel, i.e. the count-weighted KL divergence of the plug-in estimate
//! `q_hat = N(l,j,l') / N(l,j)` from `p`. The CUSUM value is
//! `T_n(M) = max_{k <= n - M} S_{k:n}` and the alarm is raised at the first
//! `n > M` with `T_n(M) > c`.
//!
//! Time `n` counts transitions: after `n` transitions the detector has seen
//! `Y_0..Y_n`. Candidate change points are the origin `k = 0` plus the `W`
//! most recent eligible `k`; with `W = None` every `k` is kept and the value is
//! exact.
//!
//! Scores are recomputed from integer prefix differences, never accumulated
//! in floating point, so the streaming value equals a from-scratch recount.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TransitionKernel;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// What to do with a transition that has probability zero under the nominal
/// kernel. Such transitions never enter the counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffSupportPolicy {
    #[default]
    ImmediateAlarm,
    /// Drop the transition and keep scoring.
    Clip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Alarm threshold `c`; `f64::INFINITY` disables alarms.
    pub threshold: f64,
    /// Minimum segment length `M`.
    pub min_segment: usize,
    /// Retained recent candidates `W`; `None` keeps all of them.
    pub window: Option<usize>,
    pub off_support: OffSupportPolicy,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold: 15.0,
            min_segment: 10,
            window: Some(500),
            off_support: OffSupportPolicy::ImmediateAlarm,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            return Err(Error::invalid("detector.c", format!("{} must be > 0", self.threshold)));
        }
        if self.min_segment == 0 {
            return Err(Error::invalid("detector.M", "must be >= 1"));
        }
        if let Some(w) = self.window {
            if w < self.min_segment {
                return Err(Error::invalid(
                    "detector.W",
                    format!("window {w} smaller than M = {}", self.min_segment),
                ));
            }
        }
        Ok(())
    }
}

/// Nominal transition law the detector tests against, with its support
/// `{(l, j, l') : p(l'|l,j) > 0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    n: usize,
    m: usize,
    probs: Vec<f64>,
    ln_p: Vec<f64>,
}

impl ReferenceModel {
    pub fn from_kernel(kernel: &TransitionKernel) -> Self {
        let probs = kernel.matrix().as_slice().to_vec();
        let ln_p = probs.iter().map(|&p| if p > 0.0 { p.ln() } else { f64::NAN }).collect();
        Self {
            n: kernel.n_states(),
            m: kernel.n_actions(),
            probs,
            ln_p,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn n_actions(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn entry(&self, l: usize, j: usize, next: usize) -> usize {
        (l * self.m + j) * self.n + next
    }

    #[inline]
    pub fn in_support(&self, entry: usize) -> bool {
        self.probs[entry] > 0.0
    }

    pub fn prob(&self, l: usize, j: usize, next: usize) -> f64 {
        self.probs[self.entry(l, j, next)]
    }

    fn check(&self, l: usize, j: usize, next: usize) -> Result<()> {
        if l >= self.n || next >= self.n || j >= self.m {
            return Err(Error::invalid(
                "observation",
                format!("({l}, {j}, {next}) outside {} states x {} actions", self.n, self.m),
            ));
        }
        Ok(())
    }

    /// `ln p` over the cells of one `(l, j)` block.
    #[inline]
    fn ln_block(&self, block: usize) -> &[f64] {
        &self.ln_p[block * self.n..(block + 1) * self.n]
    }
}

/// Score of one `(l, j)` block from its cell counts; `xlnx` must return
/// `k ln k` (0 at 0). Off-support cells never hold counts.
#[inline]
fn block_score(counts: impl Iterator<Item = u64>, ln_p: &[f64], total: u64, xlnx: impl Fn(u64) -> f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (c, &lp) in counts.zip(ln_p) {
        if c > 0 {
            acc += xlnx(c) - c as f64 * lp;
        }
    }
    // Nonnegative in exact arithmetic (count times a KL divergence).
    (acc - xlnx(total)).max(0.0)
}

#[inline]
pub fn xlnx(k: u64) -> f64 {
    if k == 0 {
        0.0
    } else {
        let x = k as f64;
        x * x.ln()
    }
}

/// Lazily grown cache of [`xlnx`]; returns bit-identical values.
#[derive(Debug, Clone, Default)]
struct XlnxTable {
    values: Vec<f64>,
}

impl XlnxTable {
    fn ensure(&mut self, k: u64) {
        let k = k as usize;
        if k >= self.values.len() {
            let target = (k + 1).next_power_of_two().max(1024);
            let start = self.values.len();
            self.values.extend((start..target).map(|i| xlnx(i as u64)));
        }
    }
}

// ---------------------------------------------------------------------------
// Counts and scores
// ---------------------------------------------------------------------------

/// Full history of `(Y_s, A_s, Y_{s+1})` transitions, for segment queries.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionCounts {
    n: usize,
    m: usize,
    history: Vec<u32>,
    totals: Vec<u64>,
}

impl TransitionCounts {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        Self {
            n: n_states,
            m: n_actions,
            history: Vec::new(),
            totals: vec![0; n_states * n_actions * n_states],
        }
    }

    pub fn from_stream(n_states: usize, n_actions: usize, ys: &[usize], actions: &[usize]) -> Self {
        let mut c = Self::new(n_states, n_actions);
        for t in 0..ys.len().saturating_sub(1) {
            c.push(ys[t], actions[t], ys[t + 1]);
        }
        c
    }

    pub fn push(&mut self, l: usize, j: usize, next: usize) {
        let e = (l * self.m + j) * self.n + next;
        self.history.push(e as u32);
        self.totals[e] += 1;
    }

    /// Number of transitions recorded.
    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    /// Counts over transitions `k..n`.
    pub fn segment(&self, k: usize, n: usize) -> SegmentCounts {
        let mut entries = vec![0u64; self.totals.len()];
        if k == 0 && n == self.history.len() {
            entries.copy_from_slice(&self.totals);
        } else {
            for &e in &self.history[k.min(n)..n] {
                entries[e as usize] += 1;
            }
        }
        SegmentCounts {
            n: self.n,
            m: self.m,
            entries,
        }
    }

    /// `q_hat^{k:n}(.|l, j)`.
    pub fn qhat(&self, k: usize, n: usize, l: usize, j: usize) -> Vec<f64> {
        self.segment(k, n).qhat(l, j)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentCounts {
    n: usize,
    m: usize,
    entries: Vec<u64>,
}

impl SegmentCounts {
    pub fn count(&self, l: usize, j: usize, next: usize) -> u64 {
        self.entries[(l * self.m + j) * self.n + next]
    }

    pub fn block_total(&self, l: usize, j: usize) -> u64 {
        let b = (l * self.m + j) * self.n;
        self.entries[b..b + self.n].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().sum()
    }

    /// Plug-in conditional law; all zeros when `(l, j)` was never visited.
    pub fn qhat(&self, l: usize, j: usize) -> Vec<f64> {
        let tot = self.block_total(l, j);
        if tot == 0 {
            return vec![0.0; self.n];
        }
        (0..self.n).map(|x| self.count(l, j, x) as f64 / tot as f64).collect()
    }
}

/// `S_{k:n}` for the given segment counts. Returns `+inf` when the segment
/// contains a transition outside the model's support.
pub fn segment_score(counts: &SegmentCounts, model: &ReferenceModel) -> f64 {
    assert_eq!((counts.n, counts.m), (model.n, model.m), "shape mismatch");
    if counts
        .entries
        .iter()
        .enumerate()
        .any(|(e, &c)| c > 0 && !model.in_support(e))
    {
        return f64::INFINITY;
    }
    let n_blocks = model.n * model.m;
    let mut total = 0.0;
    for b in 0..n_blocks {
        let base = b * model.n;
        let tot: u64 = counts.entries[base..base + model.n].iter().sum();
        let cells = counts.entries[base..base + model.n].iter().copied();
        total += block_score(cells, model.ln_block(b), tot, xlnx);
    }
    total
}

// ---------------------------------------------------------------------------
// Streaming detector
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmReason {
    Threshold,
    OffSupport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alarm {
    /// Detector time `n` (transitions observed) at the alarm.
    pub time: usize,
    pub reason: AlarmReason,
}

/// Streaming CUSUM state.
///
/// Each candidate change point `k` occupies a slot holding a snapshot of
/// the counts at `k` and its per-block scores; slot 0 is the origin.
#[derive(Debug, Clone)]
pub struct Detector {
    model: ReferenceModel,
    config: DetectorConfig,
    entries: Vec<u32>,
    blocks: Vec<u32>,
    n: usize,
    table: XlnxTable,
    base_entries: Vec<u32>,
    base_blocks: Vec<u32>,
    block_scores: Vec<f64>,
    scores: Vec<f64>,
    /// `(start, slot)` of the recent candidates, oldest first.
    window: VecDeque<(usize, usize)>,
    free: Vec<usize>,
    cusum: Option<f64>,
    alarm: Option<Alarm>,
    off_support_events: usize,
    last: Option<(usize, usize)>,
}

impl Detector {
    pub fn new(model: ReferenceModel, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let n_entries = model.n * model.m * model.n;
        let n_blocks = model.n * model.m;
        Ok(Self {
            model,
            config,
            entries: vec![0; n_entries],
            blocks: vec![0; n_blocks],
            n: 0,
            table: XlnxTable::default(),
            base_entries: vec![0; n_entries],
            base_blocks: vec![0; n_blocks],
            block_scores: vec![0.0; n_blocks],
            scores: vec![0.0],
            window: VecDeque::new(),
            free: Vec::new(),
            cusum: None,
            alarm: None,
            off_support_events: 0,
            last: None,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn model(&self) -> &ReferenceModel {
        &self.model
    }

    /// Transitions observed so far.
    pub fn time(&self) -> usize {
        self.n
    }

    /// Transitions that entered the counts (`time()` minus off-support ones).
    pub fn counted(&self) -> u64 {
        self.entries.iter().map(|&c| c as u64).sum()
    }

    /// `T_n(M)`; `None` while `n <= M`.
    pub fn cusum(&self) -> Option<f64> {
        self.cusum
    }

    pub fn alarm(&self) -> Option<Alarm> {
        self.alarm
    }

    pub fn off_support_events(&self) -> usize {
        self.off_support_events
    }

    /// Starts of the candidates currently eligible for the maximum.
    pub fn eligible_starts(&self) -> Vec<usize> {
        let m = self.config.min_segment;
        let mut v = Vec::new();
        if self.n >= m {
            v.push(0);
        }
        v.extend(self.window.iter().map(|&(k, _)| k).filter(|k| k + m <= self.n));
        v
    }

    /// Feeds the next observation/action pair; the first call only primes
    /// the detector. Returns the current CUSUM value.
    pub fn push(&mut self, y: usize, a: usize) -> Result<Option<f64>> {
        let out = match self.last {
            Some((ly, la)) => self.observe(ly, la, y)?,
            None => {
                self.model.check(y, a, y)?;
                None
            }
        };
        self.last = Some((y, a));
        Ok(out)
    }

    /// Adds the transition `(y_prev, a_prev) -> y_next` and refreshes `T_n(M)`.
    pub fn observe(&mut self, y_prev: usize, a_prev: usize, y_next: usize) -> Result<Option<f64>> {
        self.model.check(y_prev, a_prev, y_next)?;
        let block = y_prev * self.model.m + a_prev;
        let entry = block * self.model.n + y_next;
        self.n += 1;
        if self.model.in_support(entry) {
            self.entries[entry] += 1;
            self.blocks[block] += 1;
            self.table.ensure(self.blocks[block] as u64);
            self.refresh(0, block);
            for i in 0..self.window.len() {
                let slot = self.window[i].1;
                self.refresh(slot, block);
            }
        } else {
            self.off_support_events += 1;
            if self.config.off_support == OffSupportPolicy::ImmediateAlarm && self.alarm.is_none() {
                self.alarm = Some(Alarm {
                    time: self.n,
                    reason: AlarmReason::OffSupport,
                });
            }
        }
        self.open_candidate();
        self.prune();

        let m = self.config.min_segment;
        if self.n > m {
            let mut best = self.scores[0];
            for &(_, slot) in self.window.iter().take_while(|&&(k, _)| k + m <= self.n) {
                best = best.max(self.scores[slot]);
            }
            self.cusum = Some(best);
            if best > self.config.threshold && self.alarm.is_none() {
                self.alarm = Some(Alarm {
                    time: self.n,
                    reason: AlarmReason::Threshold,
                });
            }
        }
        Ok(self.cusum)
    }

    #[inline]
    fn refresh(&mut self, slot: usize, block: usize) {
        let (nb, ns) = (self.blocks.len(), self.model.n);
        let cells = block * ns..(block + 1) * ns;
        let current = &self.entries[cells.clone()];
        let base = &self.base_entries[slot * nb * ns..][cells];
        let total = (self.blocks[block] - self.base_blocks[slot * nb + block]) as u64;
        let table = &self.table.values;
        let counts = current.iter().zip(base).map(|(c, b)| (c - b) as u64);
        let s = block_score(counts, self.model.ln_block(block), total, |k| table[k as usize]);
        debug_assert!(s >= 0.0);
        let row = &mut self.block_scores[slot * nb..(slot + 1) * nb];
        row[block] = s;
        self.scores[slot] = row.iter().fold(0.0, |acc, x| acc + x);
    }

    fn open_candidate(&mut self) {
        let (ne, nb) = (self.entries.len(), self.blocks.len());
        let slot = match self.free.pop() {
            Some(s) => s,
            None => {
                self.base_entries.resize(self.base_entries.len() + ne, 0);
                self.base_blocks.resize(self.base_blocks.len() + nb, 0);
                self.block_scores.resize(self.block_scores.len() + nb, 0.0);
                self.scores.push(0.0);
                self.scores.len() - 1
            }
        };
        self.base_entries[slot * ne..(slot + 1) * ne].copy_from_slice(&self.entries);
        self.base_blocks[slot * nb..(slot + 1) * nb].copy_from_slice(&self.blocks);
        self.block_scores[slot * nb..(slot + 1) * nb].fill(0.0);
        self.scores[slot] = 0.0;
        self.window.push_back((self.n, slot));
    }

    fn prune(&mut self) {
        let Some(w) = self.config.window else {
            return;
        };
        let m = self.config.min_segment;
        let eligible = self.window.partition_point(|&(k, _)| k + m <= self.n);
        for _ in w..eligible {
            if let Some((_, slot)) = self.window.pop_front() {
                self.free.push(slot);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batch driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TracePoint {
    pub t: usize,
    pub score: f64,
    pub alarmed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutcome {
    pub alarm: Option<Alarm>,
    /// Transitions processed before stopping.
    pub observed: usize,
    pub trace: Option<Vec<TracePoint>>,
}

impl DetectionOutcome {
    pub fn censored(&self) -> bool {
        self.alarm.is_none()
    }
}

/// Runs the detector over a `(Y_t, A_t)` stream, stopping at the first alarm
/// unless a trace is requested.
pub fn run_detector(
    stream: impl IntoIterator<Item = (usize, usize)>,
    model: &ReferenceModel,
    config: &DetectorConfig,
    record_trace: bool,
) -> Result<DetectionOutcome> {
    let mut det = Detector::new(model.clone(), *config)?;
    let mut trace = record_trace.then(Vec::new);
    for (y, a) in stream {
        let score = det.push(y, a)?;
        if let (Some(tr), Some(s)) = (trace.as_mut(), score) {
            tr.push(TracePoint {
                t: det.time(),
                score: s,
                alarmed: det.alarm().is_some(),
            });
        }
        if det.alarm().is_some() && !record_trace {
            break;
        }
    }
    Ok(DetectionOutcome {
        alarm: det.alarm(),
        observed: det.time(),
        trace,
    })
}
