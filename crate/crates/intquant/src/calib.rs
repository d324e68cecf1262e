//! Calibration statistics, KL-divergence cost of candidate group counts,
//! and the budgeted group-size allocator.
//!
//! The allocator minimizes the summed KL divergence between full-precision
//! and quantized activation distributions subject to a bit-operation (BOP)
//! budget, where a layer with `C` channels quantized to `b` bits in `g`
//! groups costs `C·b·log2(g)`. With power-of-two candidates the costs are
//! integers, so the problem is a multiple-choice knapsack solved exactly by
//! dynamic programming over a gcd-rescaled budget axis.

use crate::groupquant::{dequantize_unpermuted, quantize_group_tensor, GroupPlan, QuantError};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CalibError {
    #[error("empty calibration batch")]
    EmptyBatch,
    #[error("inconsistent channel count: expected {expected}, sample {index} has {got}")]
    InconsistentChannels {
        expected: usize,
        got: usize,
        index: usize,
    },
    #[error("BOP budget must be non-negative, got {0}")]
    NegativeBudget(f64),
    #[error("candidate group count {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("layer {0} has no candidate group counts")]
    NoCandidates(usize),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

pub const HISTOGRAM_BINS: usize = 2048;
const KL_SMOOTHING: f64 = 1e-9;

/// Fixed-bin histogram over a closed real range.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Histogram {
        Histogram {
            lo,
            hi,
            counts: vec![0; bins.max(1)],
        }
    }

    pub fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let idx = if self.hi <= self.lo {
            0
        } else {
            let t = (v - self.lo) / (self.hi - self.lo);
            ((t * bins as f64) as isize).clamp(0, bins as isize - 1) as usize
        };
        self.counts[idx] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Streaming per-channel calibration statistics (Welford update) plus a
/// histogram binned over the layer's global range.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ChannelStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population variance, matching the `E[x²] − E[x]²` form the kernels use.
    pub variance: f64,
    pub sample_count: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub histogram: Option<Histogram>,
}

#[derive(Clone, Debug, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
    min: f64,
    max: f64,
}

impl Welford {
    fn new() -> Welford {
        Welford {
            n: 0,
            mean: 0.0,
            m2: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    fn push(&mut self, v: f64) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    fn variance(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.m2 / self.n as f64
        }
    }
}

/// Per-channel stats over a batch of `[rows, channels]` activation samples.
/// Moments stream in one pass; histograms take a second pass once the
/// global range is known.
pub fn collect_stats(samples: &[Array2<f64>]) -> Result<Vec<ChannelStats>, CalibError> {
    let first = samples.first().ok_or(CalibError::EmptyBatch)?;
    let channels = first.ncols();
    let mut acc: Vec<Welford> = (0..channels).map(|_| Welford::new()).collect();
    for (index, s) in samples.iter().enumerate() {
        if s.ncols() != channels {
            return Err(CalibError::InconsistentChannels {
                expected: channels,
                got: s.ncols(),
                index,
            });
        }
        for row in s.rows() {
            for (c, &v) in row.iter().enumerate() {
                acc[c].push(v);
            }
        }
    }
    let global_lo = acc.iter().map(|w| w.min).fold(f64::INFINITY, f64::min);
    let global_hi = acc.iter().map(|w| w.max).fold(f64::NEG_INFINITY, f64::max);

    let mut hists: Vec<Histogram> = (0..channels)
        .map(|_| Histogram::new(global_lo, global_hi, HISTOGRAM_BINS))
        .collect();
    for s in samples {
        for row in s.rows() {
            for (c, &v) in row.iter().enumerate() {
                hists[c].add(v);
            }
        }
    }

    Ok(acc
        .into_iter()
        .zip(hists)
        .map(|(w, h)| ChannelStats {
            min: w.min,
            max: w.max,
            mean: w.mean,
            variance: w.variance(),
            sample_count: w.n,
            histogram: Some(h),
        })
        .collect())
}

/// Percentile (nearest-rank) of the absolute values of a channel's samples.
pub fn percentile_abs(values: &mut Vec<f64>, pct: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
    let rank = ((pct / 100.0) * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1].abs()
}

/// KL divergence `Σ p·ln(p/q)` between two histograms on identical bins,
/// with additive smoothing on both distributions.
pub fn kl_divergence(p: &Histogram, q: &Histogram) -> f64 {
    let bins = p.counts.len().min(q.counts.len());
    let pn = p.total().max(1) as f64;
    let qn = q.total().max(1) as f64;
    let pz = pn + KL_SMOOTHING * bins as f64;
    let qz = qn + KL_SMOOTHING * bins as f64;
    let mut kl = 0.0;
    for i in 0..bins {
        let pi = (p.counts[i] as f64 + KL_SMOOTHING) / pz;
        let qi = (q.counts[i] as f64 + KL_SMOOTHING) / qz;
        kl += pi * (pi / qi).ln();
    }
    kl.max(0.0)
}

/// Cost of quantizing the calibration sample with `groups` groups: KL
/// divergence between the sample's distribution and its
/// quantize→dequantize reconstruction, histogrammed on the same bins.
pub fn kl_cost(
    samples: &[Array2<f64>],
    stats: &[ChannelStats],
    groups: usize,
    bits: u32,
    clamp_percentile: f64,
) -> Result<f64, CalibError> {
    if samples.is_empty() {
        return Err(CalibError::EmptyBatch);
    }
    let channels = stats.len();
    let order_mags: Vec<f64> = stats.iter().map(|s| s.min.abs().max(s.max.abs())).collect();
    let mut clip_mags = vec![0.0f64; channels];
    for c in 0..channels {
        let mut vals: Vec<f64> = samples.iter().flat_map(|s| s.column(c).to_vec()).collect();
        clip_mags[c] = percentile_abs(&mut vals, clamp_percentile);
    }
    let plan = GroupPlan::build(&order_mags, &clip_mags, groups, bits)?;

    let lo = stats.iter().map(|s| s.min).fold(f64::INFINITY, f64::min);
    let hi = stats.iter().map(|s| s.max).fold(f64::NEG_INFINITY, f64::max);
    let mut fp_hist = Histogram::new(lo, hi, HISTOGRAM_BINS);
    let mut q_hist = Histogram::new(lo, hi, HISTOGRAM_BINS);
    for s in samples {
        let q = quantize_group_tensor(s, &plan)?;
        let back = dequantize_unpermuted(&q);
        for (&a, &b) in s.iter().zip(back.iter()) {
            fp_hist.add(a);
            q_hist.add(b);
        }
    }
    Ok(kl_divergence(&fp_hist, &q_hist))
}

/// One layer of the allocation problem: channel count plus candidate group
/// counts with their measured KL costs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerAlloc {
    pub channels: usize,
    /// (group count, KL cost); group counts must be powers of two.
    pub candidates: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AllocationProblem {
    pub layers: Vec<LayerAlloc>,
    pub bits: u32,
    pub budget: f64,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// BOP cost of one layer choice: `C·b·log2(g)`, an integer for
/// power-of-two `g`.
pub fn bop_cost(channels: usize, bits: u32, groups: usize) -> u64 {
    channels as u64 * bits as u64 * groups.trailing_zeros() as u64
}

/// Exact multiple-choice knapsack over the rescaled budget axis. Returns
/// the per-layer group counts minimizing total KL under the BOP budget;
/// ties break toward smaller total BOP.
pub fn allocate_groups(problem: &AllocationProblem) -> Result<Vec<usize>, CalibError> {
    if problem.budget < 0.0 {
        return Err(CalibError::NegativeBudget(problem.budget));
    }
    for (l, layer) in problem.layers.iter().enumerate() {
        if layer.candidates.is_empty() {
            return Err(CalibError::NoCandidates(l));
        }
        for &(g, _) in &layer.candidates {
            if g == 0 || !g.is_power_of_two() {
                return Err(CalibError::NotPowerOfTwo(g));
            }
        }
    }
    if problem.layers.is_empty() {
        return Ok(Vec::new());
    }

    // integer costs; gcd-rescale the budget axis
    let costs: Vec<Vec<u64>> = problem
        .layers
        .iter()
        .map(|l| {
            l.candidates
                .iter()
                .map(|&(g, _)| bop_cost(l.channels, problem.bits, g))
                .collect()
        })
        .collect();
    let unit = costs
        .iter()
        .flatten()
        .fold(0u64, |acc, &c| gcd(acc, c))
        .max(1);
    let budget_units = (problem.budget.floor() as u64) / unit;
    // no choice can ever cost more than the full budget allows
    let cap = budget_units.min(
        costs
            .iter()
            .map(|cs| cs.iter().max().copied().unwrap_or(0) / unit)
            .sum(),
    ) as usize;

    #[derive(Clone, Copy)]
    struct State {
        kl: f64,
        bop: u64,
        choice: usize,
    }
    let infeasible = State {
        kl: f64::INFINITY,
        bop: u64::MAX,
        choice: usize::MAX,
    };

    let layers = problem.layers.len();
    // dp[w] = best state using exactly <= w units so far; choices recorded per layer
    let mut dp = vec![infeasible; cap + 1];
    dp[0] = State {
        kl: 0.0,
        bop: 0,
        choice: 0,
    };
    // allow any starting budget
    for w in 1..=cap {
        dp[w] = State {
            kl: 0.0,
            bop: 0,
            choice: 0,
        };
    }
    let mut trace: Vec<Vec<State>> = Vec::with_capacity(layers);

    for (l, layer) in problem.layers.iter().enumerate() {
        let mut next = vec![infeasible; cap + 1];
        for w in 0..=cap {
            for (ci, &(_, kl)) in layer.candidates.iter().enumerate() {
                let c = (costs[l][ci] / unit) as usize;
                if c > w {
                    continue;
                }
                let prev = dp[w - c];
                if prev.kl.is_infinite() {
                    continue;
                }
                let cand = State {
                    kl: prev.kl + kl,
                    bop: prev.bop + costs[l][ci],
                    choice: ci,
                };
                let cur = next[w];
                let better = cand.kl < cur.kl || (cand.kl == cur.kl && cand.bop < cur.bop);
                if better {
                    next[w] = cand;
                }
            }
        }
        trace.push(next.clone());
        dp = next;
    }

    // pick the best end state across all budgets
    let mut best_w = 0;
    for w in 0..=cap {
        let a = dp[w];
        let b = dp[best_w];
        if a.kl < b.kl || (a.kl == b.kl && a.bop < b.bop) {
            best_w = w;
        }
    }
    if dp[best_w].kl.is_infinite() {
        // cannot happen: g=1 costs zero, so w=0 is always feasible
        return Err(CalibError::NegativeBudget(problem.budget));
    }

    // walk the trace backwards to recover choices
    let mut assignment = vec![0usize; layers];
    let mut w = best_w;
    for l in (0..layers).rev() {
        let st = trace[l][w];
        assignment[l] = problem.layers[l].candidates[st.choice].0;
        w -= (costs[l][st.choice] / unit) as usize;
    }
    Ok(assignment)
}

/// Total KL of an assignment, folded in layer order (the same order the DP
/// accumulates, so objectives compare bit-exactly).
pub fn assignment_objective(problem: &AllocationProblem, assignment: &[usize]) -> f64 {
    problem
        .layers
        .iter()
        .zip(assignment)
        .fold(0.0, |acc, (layer, &g)| {
            let kl = layer
                .candidates
                .iter()
                .find(|&&(cg, _)| cg == g)
                .map(|&(_, kl)| kl)
                .unwrap_or(f64::INFINITY);
            acc + kl
        })
}

/// Total BOP of an assignment.
pub fn assignment_bop(problem: &AllocationProblem, assignment: &[usize]) -> u64 {
    problem
        .layers
        .iter()
        .zip(assignment)
        .map(|(layer, &g)| bop_cost(layer.channels, problem.bits, g))
        .sum()
}

/// Exhaustive-search reference for small instances.
pub fn allocate_groups_brute_force(problem: &AllocationProblem) -> Option<Vec<usize>> {
    fn rec(
        problem: &AllocationProblem,
        l: usize,
        current: &mut Vec<usize>,
        best: &mut Option<(f64, u64, Vec<usize>)>,
    ) {
        if l == problem.layers.len() {
            let bop = assignment_bop(problem, current);
            if (bop as f64) <= problem.budget {
                let kl = assignment_objective(problem, current);
                let replace = match best {
                    None => true,
                    Some((bkl, bbop, _)) => kl < *bkl || (kl == *bkl && bop < *bbop),
                };
                if replace {
                    *best = Some((kl, bop, current.clone()));
                }
            }
            return;
        }
        for &(g, _) in &problem.layers[l].candidates {
            current.push(g);
            rec(problem, l + 1, current, best);
            current.pop();
        }
    }
    let mut best = None;
    rec(problem, 0, &mut Vec::new(), &mut best);
    best.map(|(_, _, a)| a)
}
