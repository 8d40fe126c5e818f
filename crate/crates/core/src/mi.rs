//! Exact checks of the InfoNCE mutual-information bounds on small discrete
//! distributions.
//!
//! The critic is the true density ratio `P(t|v) / P(t)`. Expected losses are
//! computed by enumerating the positive pair and every multiset of `N - 1`
//! i.i.d. negatives drawn from the text marginal, which is exact up to
//! floating-point rounding. Larger problems fall back to seeded Monte-Carlo.
//! All logarithms are natural.

use std::io::Write;

use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const SUM_TOLERANCE: f64 = 1e-12;
/// Slack for enumerated bound checks.
pub const BOUND_EPS: f64 = 1e-9;
/// Slack for identities such as the MI chain rule.
pub const IDENTITY_EPS: f64 = 1e-10;
pub const MIN_MC_SAMPLES: usize = 1_000_000;

/// Largest text alphabet and batch size handled by exact enumeration.
#[derive(Debug, Clone, Copy)]
pub struct EnumerationLimits {
    pub max_alphabet: usize,
    pub max_n: usize,
}

impl Default for EnumerationLimits {
    fn default() -> Self {
        Self { max_alphabet: 8, max_n: 8 }
    }
}

/// `P(T, V)` over finite alphabets, row-major in `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    nt: usize,
    nv: usize,
    p: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(nt: usize, nv: usize, p: Vec<f64>) -> Result<Self> {
        if nt == 0 || nv == 0 || p.len() != nt * nv {
            return Err(Error::InvalidJoint(format!("{} entries for a {nt}x{nv} table", p.len())));
        }
        if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidJoint("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidJoint(format!("probabilities sum to {total}")));
        }
        let j = Self { nt, nv, p };
        if let Some(index) = j.marginal_t().iter().position(|&x| x <= 0.0) {
            return Err(Error::DegenerateMarginal { axis: "text", index });
        }
        if let Some(index) = j.marginal_v().iter().position(|&x| x <= 0.0) {
            return Err(Error::DegenerateMarginal { axis: "view", index });
        }
        Ok(j)
    }

    /// Normalizes non-negative weights first.
    pub fn from_weights(nt: usize, nv: usize, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidJoint("weights must have positive finite mass".into()));
        }
        Self::new(nt, nv, weights.into_iter().map(|w| w / total).collect())
    }

    /// Product of two marginals.
    pub fn independent(pt: &[f64], pv: &[f64]) -> Result<Self> {
        let p = pt.iter().flat_map(|a| pv.iter().map(move |b| a * b)).collect();
        Self::from_weights(pt.len(), pv.len(), p)
    }

    pub fn text_alphabet(&self) -> usize {
        self.nt
    }

    pub fn view_alphabet(&self) -> usize {
        self.nv
    }

    pub fn get(&self, t: usize, v: usize) -> f64 {
        self.p[t * self.nv + v]
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.p
    }

    pub fn marginal_t(&self) -> Vec<f64> {
        (0..self.nt).map(|t| self.p[t * self.nv..(t + 1) * self.nv].iter().sum()).collect()
    }

    pub fn marginal_v(&self) -> Vec<f64> {
        (0..self.nv).map(|v| (0..self.nt).map(|t| self.get(t, v)).sum()).collect()
    }

    /// Density ratio `P(t|v) / P(t)` for every cell.
    pub fn density_ratios(&self) -> Vec<f64> {
        let (pt, pv) = (self.marginal_t(), self.marginal_v());
        let mut r = vec![0.0; self.p.len()];
        for t in 0..self.nt {
            for v in 0..self.nv {
                r[t * self.nv + v] = self.get(t, v) / (pt[t] * pv[v]);
            }
        }
        r
    }

    /// Merges view symbols through `map[v] -> new symbol` (a deterministic channel).
    pub fn coarsen_views(&self, map: &[usize]) -> Result<Self> {
        if map.len() != self.nv {
            return Err(Error::LengthMismatch { expected: self.nv, actual: map.len() });
        }
        let nv2 = map.iter().max().map_or(0, |m| m + 1);
        let mut p = vec![0.0; self.nt * nv2];
        for t in 0..self.nt {
            for v in 0..self.nv {
                p[t * nv2 + map[v]] += self.get(t, v);
            }
        }
        let keep: Vec<usize> = (0..nv2).filter(|&v| (0..self.nt).any(|t| p[t * nv2 + v] > 0.0)).collect();
        let p = (0..self.nt).flat_map(|t| keep.iter().map(move |&v| (t, v))).map(|(t, v)| p[t * nv2 + v]).collect();
        Self::from_weights(self.nt, keep.len(), p)
    }
}

/// `I(T; V)` in nats.
pub fn exact_mi(joint: &DiscreteJoint) -> f64 {
    let (pt, pv) = (joint.marginal_t(), joint.marginal_v());
    let mut total = 0.0;
    for t in 0..joint.nt {
        for v in 0..joint.nv {
            let p = joint.get(t, v);
            if p > 0.0 {
                total += p * (p / (pt[t] * pv[v])).ln();
            }
        }
    }
    total.max(0.0)
}

/// An estimate of an expectation; `std_error` is zero for exact enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub seed: u64,
    pub samples: usize,
}

/// Every multiset of `n` draws from `probs`, with its probability.
fn multisets(probs: &[f64], n: usize) -> Vec<(f64, Vec<u32>)> {
    let ln_fact: Vec<f64> = (0..=n)
        .scan(0.0, |acc, k| {
            if k > 0 {
                *acc += (k as f64).ln();
            }
            Some(*acc)
        })
        .collect();
    let mut out = Vec::new();
    let mut counts = vec![0u32; probs.len()];
    fn rec(
        i: usize,
        left: usize,
        log_p: f64,
        probs: &[f64],
        ln_fact: &[f64],
        counts: &mut Vec<u32>,
        out: &mut Vec<(f64, Vec<u32>)>,
    ) {
        if i + 1 == probs.len() {
            counts[i] = left as u32;
            let lp = log_p - ln_fact[left] + left as f64 * probs[i].ln();
            out.push(((ln_fact[ln_fact.len() - 1] + lp).exp(), counts.clone()));
            return;
        }
        for c in 0..=left {
            counts[i] = c as u32;
            let lp = log_p - ln_fact[c] + c as f64 * probs[i].ln();
            rec(i + 1, left - c, lp, probs, ln_fact, counts, out);
        }
    }
    rec(0, n, 0.0, probs, &ln_fact, &mut counts, &mut out);
    out
}

/// Exact expected InfoNCE loss with the density-ratio critic and `n - 1`
/// negatives drawn from the text marginal.
pub fn expected_infonce(joint: &DiscreteJoint, n: usize) -> Result<f64> {
    expected_infonce_with(joint, n, EnumerationLimits::default())
}

pub fn expected_infonce_with(joint: &DiscreteJoint, n: usize, limits: EnumerationLimits) -> Result<f64> {
    if n == 0 {
        return Err(Error::BatchTooSmall);
    }
    if joint.nt > limits.max_alphabet || n > limits.max_n {
        return Err(Error::AlphabetTooLarge { alphabet: joint.nt, n });
    }
    if n == 1 {
        return Ok(0.0);
    }
    let ratios = joint.density_ratios();
    let negatives = multisets(&joint.marginal_t(), n - 1);
    let mut total = 0.0;
    for v in 0..joint.nv {
        let sums: Vec<(f64, f64)> = negatives
            .iter()
            .map(|(prob, counts)| {
                let s: f64 = counts.iter().enumerate().map(|(t, &c)| c as f64 * ratios[t * joint.nv + v]).sum();
                (*prob, s)
            })
            .collect();
        for t in 0..joint.nt {
            let p = joint.get(t, v);
            if p <= 0.0 {
                continue;
            }
            let pos = ratios[t * joint.nv + v];
            let inner: f64 = sums.iter().map(|&(q, s)| q * (1.0 + s / pos).ln()).sum();
            total += p * inner;
        }
    }
    Ok(total)
}

fn sample_index(cdf: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    p.iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

/// Monte-Carlo estimate of the same expectation.
pub fn expected_infonce_mc(joint: &DiscreteJoint, n: usize, mc: McConfig) -> Result<Estimate> {
    if n == 0 || mc.samples < 2 {
        return Err(Error::BatchTooSmall);
    }
    let ratios = joint.density_ratios();
    let joint_cdf = cumulative(&joint.p);
    let text_cdf = cumulative(&joint.marginal_t());
    let mut r = rng::seeded(mc.seed);
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 0..mc.samples {
        let cell = sample_index(&joint_cdf, &mut r);
        let v = cell % joint.nv;
        let pos = ratios[cell];
        let neg: f64 = (1..n).map(|_| ratios[sample_index(&text_cdf, &mut r) * joint.nv + v]).sum();
        let x = (1.0 + neg / pos).ln();
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    let var = m2 / (mc.samples - 1) as f64;
    Ok(Estimate { value: mean, std_error: (var / mc.samples as f64).sqrt(), exact: false })
}

/// Exact when within the enumeration limits; otherwise Monte-Carlo, which
/// needs an explicit seed and at least [`MIN_MC_SAMPLES`] samples.
pub fn expected_infonce_auto(joint: &DiscreteJoint, n: usize, mc: Option<McConfig>) -> Result<Estimate> {
    match expected_infonce(joint, n) {
        Ok(value) => Ok(Estimate { value, std_error: 0.0, exact: true }),
        Err(Error::AlphabetTooLarge { alphabet, n }) => match mc {
            Some(mc) if mc.samples >= MIN_MC_SAMPLES => expected_infonce_mc(joint, n, mc),
            _ => Err(Error::AlphabetTooLarge { alphabet, n }),
        },
        Err(e) => Err(e),
    }
}

/// The loss after replacing the negative sum by `(n - 1)` times its mean,
/// `E log(1 + (n - 1) / ratio_pos)`. Reported, never asserted.
pub fn approximated_infonce(joint: &DiscreteJoint, n: usize) -> f64 {
    let ratios = joint.density_ratios();
    joint.p.iter().zip(&ratios).filter(|(p, _)| **p > 0.0).map(|(p, r)| p * (1.0 + (n as f64 - 1.0) / r).ln()).sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct VanillaReport {
    pub n: usize,
    pub mi: f64,
    pub loss: f64,
    pub std_error: f64,
    pub log_n: f64,
    /// `mi - (log n - loss)`; non-negative when the bound holds.
    pub margin: f64,
    pub tolerance: f64,
    pub bound_ok: bool,
    pub approximated_loss: f64,
    pub approximation_gap: f64,
}

/// Checks `I(T; V) >= log N - L` with the exact expected loss.
pub fn verify_vanilla_bound(joint: &DiscreteJoint, n: usize) -> Result<VanillaReport> {
    verify_vanilla_bound_with(joint, n, None)
}

pub fn verify_vanilla_bound_with(joint: &DiscreteJoint, n: usize, mc: Option<McConfig>) -> Result<VanillaReport> {
    let est = expected_infonce_auto(joint, n, mc)?;
    let mi = exact_mi(joint);
    let log_n = (n as f64).ln();
    let margin = mi - (log_n - est.value);
    let tolerance = if est.exact { BOUND_EPS } else { 3.0 * est.std_error };
    let approximated_loss = approximated_infonce(joint, n);
    Ok(VanillaReport {
        n,
        mi,
        loss: est.value,
        std_error: est.std_error,
        log_n,
        margin,
        tolerance,
        bound_ok: margin >= -tolerance,
        approximated_loss,
        approximation_gap: est.value - approximated_loss,
    })
}

/// A dense joint table over several discrete variables, row-major in axis order.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    dims: Vec<usize>,
    p: Vec<f64>,
}

impl JointTable {
    pub fn new(dims: Vec<usize>, p: Vec<f64>) -> Result<Self> {
        let size: usize = dims.iter().product();
        if dims.is_empty() || size != p.len() {
            return Err(Error::InvalidJoint(format!("{} entries for dims {dims:?}", p.len())));
        }
        if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidJoint("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidJoint(format!("probabilities sum to {total}")));
        }
        Ok(Self { dims, p })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn unravel(&self, mut flat: usize, idx: &mut [usize]) {
        for a in (0..self.dims.len()).rev() {
            idx[a] = flat % self.dims[a];
            flat /= self.dims[a];
        }
    }

    /// Marginal over `axes` (kept in the order given).
    pub fn marginal(&self, axes: &[usize]) -> Vec<f64> {
        let size: usize = axes.iter().map(|&a| self.dims[a]).product();
        let mut out = vec![0.0; size];
        let mut idx = vec![0; self.dims.len()];
        for (flat, &p) in self.p.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            self.unravel(flat, &mut idx);
            let key = axes.iter().fold(0, |k, &a| k * self.dims[a] + idx[a]);
            out[key] += p;
        }
        out
    }

    pub fn entropy(&self, axes: &[usize]) -> f64 {
        if axes.is_empty() {
            return 0.0;
        }
        -self.marginal(axes).iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    /// `I(A; B | C)` through entropies.
    pub fn conditional_mi(&self, a: &[usize], b: &[usize], c: &[usize]) -> f64 {
        let cat = |x: &[usize], y: &[usize]| [x, y].concat();
        self.entropy(&cat(a, c)) + self.entropy(&cat(b, c)) - self.entropy(&cat(&cat(a, b), c)) - self.entropy(c)
    }

    pub fn mi(&self, a: &[usize], b: &[usize]) -> f64 {
        self.conditional_mi(a, b, &[])
    }

    /// Pairwise joint of the grouped axes, zero-mass symbols dropped.
    pub fn pair(&self, a: &[usize], b: &[usize]) -> Result<DiscreteJoint> {
        let na: usize = a.iter().map(|&x| self.dims[x]).product();
        let nb: usize = b.iter().map(|&x| self.dims[x]).product();
        let m = self.marginal(&[a, b].concat());
        let keep_a: Vec<usize> = (0..na).filter(|&i| (0..nb).any(|j| m[i * nb + j] > 0.0)).collect();
        let keep_b: Vec<usize> = (0..nb).filter(|&j| (0..na).any(|i| m[i * nb + j] > 0.0)).collect();
        let p = keep_a.iter().flat_map(|&i| keep_b.iter().map(move |&j| (i, j))).map(|(i, j)| m[i * nb + j]).collect();
        DiscreteJoint::from_weights(keep_a.len(), keep_b.len(), p)
    }
}

/// Two image-text pairs whose relevant regions form one mixed view.
///
/// The joint is `P(tx, vx) * K(vy | vx) * P(ty | vy)`: each caption depends on
/// the mixed view only through its own region, and the regions may be coupled
/// through `K`. Without a coupling the regions are independent and `vy`
/// follows the view marginal of `text_y`.
#[derive(Debug, Clone)]
pub struct FactoredJoint {
    pub text_x: DiscreteJoint,
    pub text_y: DiscreteJoint,
    /// Row-stochastic `|Vx| x |Vy|` matrix `K(vy | vx)`.
    pub coupling: Option<Vec<f64>>,
    pub s_x: f64,
    pub s_y: f64,
}

/// Axis order of [`FactoredJoint::table`].
pub const AXIS_TX: usize = 0;
pub const AXIS_VX: usize = 1;
pub const AXIS_VY: usize = 2;
pub const AXIS_TY: usize = 3;

impl FactoredJoint {
    pub fn new(text_x: DiscreteJoint, text_y: DiscreteJoint, coupling: Option<Vec<f64>>, s_x: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s_x) {
            return Err(Error::InvalidJoint(format!("s_x = {s_x} outside [0, 1]")));
        }
        if let Some(k) = &coupling {
            let (nx, ny) = (text_x.nv, text_y.nv);
            if k.len() != nx * ny {
                return Err(Error::LengthMismatch { expected: nx * ny, actual: k.len() });
            }
            for row in k.chunks(ny) {
                let s: f64 = row.iter().sum();
                if row.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (s - 1.0).abs() > SUM_TOLERANCE {
                    return Err(Error::InvalidJoint("coupling rows must be probability vectors".into()));
                }
            }
        }
        Ok(Self { text_x, text_y, coupling, s_x, s_y: 1.0 - s_x })
    }

    /// Coupling that copies `vx` into `vy`. Needs equal view alphabets.
    pub fn copy_coupling(n: usize) -> Vec<f64> {
        (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
    }

    /// Full joint over `(tx, vx, vy, ty)`.
    pub fn table(&self) -> JointTable {
        let (ntx, nvx) = (self.text_x.nt, self.text_x.nv);
        let (nty, nvy) = (self.text_y.nt, self.text_y.nv);
        let pvy = self.text_y.marginal_v();
        let mut p = Vec::with_capacity(ntx * nvx * nvy * nty);
        for tx in 0..ntx {
            for vx in 0..nvx {
                let pxv = self.text_x.get(tx, vx);
                for vy in 0..nvy {
                    let k = match &self.coupling {
                        Some(k) => k[vx * nvy + vy],
                        None => pvy[vy],
                    };
                    for ty in 0..nty {
                        p.push(pxv * k * self.text_y.get(ty, vy) / pvy[vy]);
                    }
                }
            }
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= total);
        JointTable { dims: vec![ntx, nvx, nvy, nty], p }
    }
}

/// Outcome of comparing `I(t; a) + I(t; b)` against `I(t; (a, b))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainCase {
    /// Sum equals the joint term: no overlap between the regions.
    Equality,
    /// Sum exceeds the joint term: the regions share information about `t`.
    Strict,
    /// Sum falls below the joint term (synergy); the subadditivity step fails.
    Violated,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChainReport {
    /// `I(t; (a, b))` by direct summation.
    pub composite: f64,
    /// `I(t; a)`
    pub first: f64,
    /// `I(t; b)`
    pub second: f64,
    /// `I(t; b | a)` through entropies.
    pub conditional: f64,
    /// `|I(t; (a,b)) - I(t; a) - I(t; b | a)|`
    pub identity_error: f64,
    pub identity_ok: bool,
    /// `I(a; b)` is zero within tolerance.
    pub regions_independent: bool,
    pub case: ChainCase,
    /// Independent regions give equality; dependent ones give at least `>=`.
    pub dichotomy_ok: bool,
}

fn chain_for(table: &JointTable, text: usize, first: usize, second: usize) -> Result<ChainReport> {
    let composite = exact_mi(&table.pair(&[text], &[first, second])?);
    let i_first = exact_mi(&table.pair(&[text], &[first])?);
    let i_second = exact_mi(&table.pair(&[text], &[second])?);
    let conditional = table.conditional_mi(&[text], &[second], &[first]);
    let identity_error = (composite - i_first - conditional).abs();
    let regions_independent = table.mi(&[first], &[second]).abs() <= IDENTITY_EPS;
    let gap = i_first + i_second - composite;
    let case = if gap.abs() <= IDENTITY_EPS {
        ChainCase::Equality
    } else if gap > 0.0 {
        ChainCase::Strict
    } else {
        ChainCase::Violated
    };
    let dichotomy_ok = if regions_independent { case == ChainCase::Equality } else { case != ChainCase::Violated };
    Ok(ChainReport {
        composite,
        first: i_first,
        second: i_second,
        conditional,
        identity_error,
        identity_ok: identity_error <= IDENTITY_EPS,
        regions_independent,
        case,
        dichotomy_ok,
    })
}

/// Chain-rule report for each caption against the mixed view `(vx, vy)`.
#[derive(Debug, Clone, Serialize)]
pub struct ChainRuleReport {
    /// `tx` with `vx` first.
    pub x: ChainReport,
    /// `ty` with `vy` first.
    pub y: ChainReport,
}

pub fn chain_rule_check(fjoint: &FactoredJoint) -> Result<ChainRuleReport> {
    let t = fjoint.table();
    Ok(ChainRuleReport { x: chain_for(&t, AXIS_TX, AXIS_VX, AXIS_VY)?, y: chain_for(&t, AXIS_TY, AXIS_VY, AXIS_VX)? })
}

/// General-table variant: `I(t; (a, b)) = I(t; a) + I(t; b | a)` for any axes.
pub fn chain_rule_on_table(table: &JointTable, text: usize, a: usize, b: usize) -> Result<ChainReport> {
    chain_for(table, text, a, b)
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimixReport {
    pub n: usize,
    pub s_x: f64,
    pub s_y: f64,
    pub i_tx_vx: f64,
    pub i_tx_vy: f64,
    pub i_ty_vx: f64,
    pub i_ty_vy: f64,
    pub i_tx_mixed: f64,
    pub i_ty_mixed: f64,
    /// Expected loss of the caption-`x` and caption-`y` terms.
    pub loss_x: f64,
    pub loss_y: f64,
    /// `s_x * loss_x + s_y * loss_y`
    pub loss: f64,
    pub log_n: f64,
    /// `s_x I(tx; vx) + s_y I(ty; vy)`
    pub lhs: f64,
    /// `log N - (L + s_x I(tx; vy) + s_y I(ty; vx))`
    pub rhs: f64,
    pub margin: f64,
    pub chain: ChainRuleReport,
    pub checks: Vec<Check>,
    pub verdict: bool,
}

/// Computes every mutual-information term exactly, the expected mixed loss
/// with the density-ratio critic on the mixed view, and each inequality of
/// the bound chain.
pub fn verify_timix_bound(fjoint: &FactoredJoint, n: usize) -> Result<TimixReport> {
    let t = fjoint.table();
    let mixed = [AXIS_VX, AXIS_VY];
    let px = t.pair(&[AXIS_TX], &mixed)?;
    let py = t.pair(&[AXIS_TY], &mixed)?;
    let loss_x = expected_infonce(&px, n)?;
    let loss_y = expected_infonce(&py, n)?;
    let (s_x, s_y) = (fjoint.s_x, fjoint.s_y);
    let loss = s_x * loss_x + s_y * loss_y;
    let log_n = (n as f64).ln();

    let mi = |a: usize, b: usize| -> Result<f64> { Ok(exact_mi(&t.pair(&[a], &[b])?)) };
    let (i_tx_vx, i_tx_vy) = (mi(AXIS_TX, AXIS_VX)?, mi(AXIS_TX, AXIS_VY)?);
    let (i_ty_vx, i_ty_vy) = (mi(AXIS_TY, AXIS_VX)?, mi(AXIS_TY, AXIS_VY)?);
    let (i_tx_mixed, i_ty_mixed) = (exact_mi(&px), exact_mi(&py));
    let chain = chain_rule_check(fjoint)?;

    let lhs = s_x * i_tx_vx + s_y * i_ty_vy;
    let rhs = log_n - (loss + s_x * i_tx_vy + s_y * i_ty_vx);
    let margin = lhs - rhs;

    let ge = |name, lhs: f64, rhs: f64| Check { name, lhs, rhs, holds: lhs >= rhs - BOUND_EPS };
    let checks = vec![
        ge("weighted-mixed-bound", s_x * i_tx_mixed + s_y * i_ty_mixed, (s_x + s_y) * log_n - loss),
        ge("vanilla-bound-x", i_tx_mixed, log_n - loss_x),
        ge("vanilla-bound-y", i_ty_mixed, log_n - loss_y),
        Check {
            name: "chain-rule-x",
            lhs: chain.x.composite,
            rhs: chain.x.first + chain.x.conditional,
            holds: chain.x.identity_ok,
        },
        Check {
            name: "chain-rule-y",
            lhs: chain.y.composite,
            rhs: chain.y.first + chain.y.conditional,
            holds: chain.y.identity_ok,
        },
        Check {
            name: "overlap-dichotomy-x",
            lhs: chain.x.first + chain.x.second,
            rhs: chain.x.composite,
            holds: chain.x.dichotomy_ok,
        },
        Check {
            name: "overlap-dichotomy-y",
            lhs: chain.y.first + chain.y.second,
            rhs: chain.y.composite,
            holds: chain.y.dichotomy_ok,
        },
        ge("subadditive-x", i_tx_vx + i_tx_vy, i_tx_mixed),
        ge("subadditive-y", i_ty_vx + i_ty_vy, i_ty_mixed),
        ge("mixed-bound", lhs, rhs),
    ];
    let verdict = checks.iter().all(|c| c.holds);
    Ok(TimixReport {
        n,
        s_x,
        s_y,
        i_tx_vx,
        i_tx_vy,
        i_ty_vx,
        i_ty_vy,
        i_tx_mixed,
        i_ty_mixed,
        loss_x,
        loss_y,
        loss,
        log_n,
        lhs,
        rhs,
        margin,
        chain,
        checks,
        verdict,
    })
}

/// Random strictly positive joint; a power transform spreads the entries out.
pub fn random_joint(rng: &mut Rng, nt: usize, nv: usize) -> DiscreteJoint {
    let w: Vec<f64> = (0..nt * nv).map(|_| rng.random_range(0.01f64..1.0).powi(3)).collect();
    DiscreteJoint::from_weights(nt, nv, w).expect("positive weights")
}

fn random_stochastic(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0.01f64..1.0).powi(3)).collect();
    for row in k.chunks_mut(cols) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    k
}

/// Random factored joint with alphabets in `2..=max_alphabet`. Regions are
/// independent, randomly coupled, or copies of each other.
pub fn random_factored(rng: &mut Rng, max_alphabet: usize, s_x: f64) -> Result<FactoredJoint> {
    let max = max_alphabet.max(2);
    let size = |r: &mut Rng| r.random_range(2..=max);
    let (ntx, nvx, nty) = (size(rng), size(rng), size(rng));
    let nvy = size(rng);
    let mode = rng.random_range(0..3);
    let nvy = if mode == 2 { nvx } else { nvy };
    let text_x = random_joint(rng, ntx, nvx);
    let text_y = random_joint(rng, nty, nvy);
    let coupling = match mode {
        0 => None,
        1 => Some(random_stochastic(rng, nvx, nvy)),
        _ => Some(FactoredJoint::copy_coupling(nvx)),
    };
    FactoredJoint::new(text_x, text_y, coupling, s_x)
}

pub const TRIAL_BATCH_SIZES: [usize; 3] = [2, 4, 8];
pub const TRIAL_WEIGHTS: [f64; 3] = [0.25, 0.5, 0.75];

#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub report: TimixReport,
}

/// One fuzzing trial; its seed is derived from the master seed and index only.
pub fn run_trial(master_seed: u64, trial: usize, max_alphabet: usize) -> Result<TrialRecord> {
    let seed = rng::derive_seed(master_seed, trial as u64);
    let mut r = rng::seeded(seed);
    let n = TRIAL_BATCH_SIZES[trial % 3];
    let s_x = TRIAL_WEIGHTS[(trial / 3) % 3];
    let fj = random_factored(&mut r, max_alphabet, s_x)?;
    Ok(TrialRecord { trial, seed, report: verify_timix_bound(&fj, n)? })
}

pub const TRIAL_CSV_HEADER: [&str; 15] = [
    "trial",
    "N",
    "s_x",
    "I_tx_vx",
    "I_tx_vy",
    "I_ty_vx",
    "I_ty_vy",
    "I_tx_mixed",
    "I_ty_mixed",
    "L",
    "lhs",
    "rhs",
    "margin",
    "verdict",
    "seed",
];

pub fn write_trials_csv<W: Write>(records: &[TrialRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRIAL_CSV_HEADER)?;
    for rec in records {
        let r = &rec.report;
        let verdict = if r.verdict { "ok" } else { "violated" };
        w.write_record([
            rec.trial.to_string(),
            r.n.to_string(),
            r.s_x.to_string(),
            r.i_tx_vx.to_string(),
            r.i_tx_vy.to_string(),
            r.i_ty_vx.to_string(),
            r.i_ty_vy.to_string(),
            r.i_tx_mixed.to_string(),
            r.i_ty_mixed.to_string(),
            r.loss.to_string(),
            r.lhs.to_string(),
            r.rhs.to_string(),
            r.margin.to_string(),
            verdict.to_string(),
            rec.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn diag() -> DiscreteJoint {
        DiscreteJoint::new(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap()
    }

    #[test]
    fn exact_mi_examples() {
        let ind = DiscreteJoint::new(2, 2, vec![0.25; 4]).unwrap();
        assert_eq!(exact_mi(&ind), 0.0);
        assert!((exact_mi(&diag()) - LN_2).abs() < 1e-15);
    }

    #[test]
    fn exact_mi_matches_entropy_route() {
        let mut r = rng::seeded(1);
        for _ in 0..20 {
            let j = random_joint(&mut r, 4, 4);
            let t = JointTable::new(vec![4, 4], j.probabilities().to_vec()).unwrap();
            assert!((exact_mi(&j) - t.mi(&[0], &[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_marginal_rejected() {
        let e = DiscreteJoint::new(2, 2, vec![0.5, 0.5, 0.0, 0.0]);
        assert!(matches!(e, Err(Error::DegenerateMarginal { axis: "text", index: 1 })));
        assert!(DiscreteJoint::new(2, 2, vec![0.5, 0.5, 0.1, 0.0]).is_err());
    }

    #[test]
    fn expected_loss_examples() {
        let j = diag();
        assert_eq!(expected_infonce(&j, 1).unwrap(), 0.0);
        // The single negative matches the positive with probability 1/2.
        assert!((expected_infonce(&j, 2).unwrap() - 0.5 * LN_2).abs() < 1e-15);
        let ind = DiscreteJoint::independent(&[0.2, 0.3, 0.5], &[0.6, 0.4]).unwrap();
        for n in 1..=8 {
            assert!((expected_infonce(&ind, n).unwrap() - (n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn enumeration_agrees_with_brute_force_tuples() {
        // Ordered tuples of negatives, no multiset shortcut.
        let mut r = rng::seeded(4);
        let j = random_joint(&mut r, 3, 2);
        let n = 4;
        let ratios = j.density_ratios();
        let pt = j.marginal_t();
        let mut want = 0.0;
        for t in 0..3 {
            for v in 0..2 {
                for a in 0..3 {
                    for b in 0..3 {
                        for c in 0..3 {
                            let q = pt[a] * pt[b] * pt[c];
                            let s = ratios[a * 2 + v] + ratios[b * 2 + v] + ratios[c * 2 + v];
                            let pos = ratios[t * 2 + v];
                            want += j.get(t, v) * q * -(pos / (pos + s)).ln();
                        }
                    }
                }
            }
        }
        assert!((expected_infonce(&j, n).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_agrees_with_enumeration() {
        let j = diag();
        let exact = expected_infonce(&j, 2).unwrap();
        let est = expected_infonce_mc(&j, 2, McConfig { seed: 3, samples: 200_000 }).unwrap();
        assert!((est.value - exact).abs() <= 3.0 * est.std_error, "{est:?} vs {exact}");
    }

    #[test]
    fn large_alphabet_needs_monte_carlo() {
        let mut r = rng::seeded(2);
        let j = random_joint(&mut r, 10, 3);
        assert!(matches!(expected_infonce_auto(&j, 4, None), Err(Error::AlphabetTooLarge { .. })));
        let small = McConfig { seed: 1, samples: 10 };
        assert!(expected_infonce_auto(&j, 4, Some(small)).is_err());
        let est = expected_infonce_auto(&j, 4, Some(McConfig { seed: 1, samples: MIN_MC_SAMPLES })).unwrap();
        assert!(!est.exact && est.std_error > 0.0);
        let rep = verify_vanilla_bound_with(&j, 4, Some(McConfig { seed: 1, samples: MIN_MC_SAMPLES })).unwrap();
        assert!(rep.bound_ok);
    }

    #[test]
    fn vanilla_bound_examples() {
        let ind = DiscreteJoint::independent(&[0.5, 0.5], &[0.3, 0.7]).unwrap();
        let rep = verify_vanilla_bound(&ind, 4).unwrap();
        assert!(rep.margin.abs() <= BOUND_EPS);
        assert!(rep.bound_ok);
        let rep = verify_vanilla_bound(&diag(), 2).unwrap();
        assert!(rep.bound_ok && rep.margin > 0.1);
    }

    #[test]
    fn coarsening_views_never_adds_information() {
        let mut r = rng::seeded(6);
        for _ in 0..30 {
            let j = random_joint(&mut r, 3, 5);
            let merged = j.coarsen_views(&[0, 0, 1, 2, 1]).unwrap();
            assert!(exact_mi(&merged) <= exact_mi(&j) + 1e-12);
        }
    }

    #[test]
    fn independent_regions_give_equality() {
        let mut r = rng::seeded(8);
        let fj = FactoredJoint::new(random_joint(&mut r, 3, 3), random_joint(&mut r, 2, 4), None, 0.5).unwrap();
        let c = chain_rule_check(&fj).unwrap();
        assert_eq!(c.x.case, ChainCase::Equality);
        assert_eq!(c.y.case, ChainCase::Equality);
        assert!(c.x.identity_ok && c.x.regions_independent && c.x.dichotomy_ok);
        let rep = verify_timix_bound(&fj, 4).unwrap();
        assert!(rep.i_tx_vy.abs() < 1e-12 && rep.i_ty_vx.abs() < 1e-12);
        assert!(rep.verdict);
    }

    #[test]
    fn copied_regions_give_strict_inequality() {
        let mut r = rng::seeded(9);
        let fj = FactoredJoint::new(
            random_joint(&mut r, 2, 2),
            random_joint(&mut r, 2, 2),
            Some(FactoredJoint::copy_coupling(2)),
            0.25,
        )
        .unwrap();
        let c = chain_rule_check(&fj).unwrap();
        assert_eq!(c.x.case, ChainCase::Strict);
        assert!(c.x.first + c.x.second > c.x.composite);
        assert!(c.x.identity_ok && c.y.identity_ok);
        assert!(verify_timix_bound(&fj, 2).unwrap().verdict);
    }

    #[test]
    fn xor_synergy_breaks_subadditivity() {
        // t = a XOR b with a, b fair and independent.
        let mut p = vec![0.0; 8];
        for a in 0..2 {
            for b in 0..2 {
                p[((a ^ b) * 2 + a) * 2 + b] = 0.25;
            }
        }
        let t = JointTable::new(vec![2, 2, 2], p).unwrap();
        let c = chain_rule_on_table(&t, 0, 1, 2).unwrap();
        assert!(c.identity_ok);
        assert_eq!(c.case, ChainCase::Violated);
        assert!(!c.dichotomy_ok);
    }

    #[test]
    fn chain_rule_on_random_tables() {
        let mut r = rng::seeded(10);
        for _ in 0..25 {
            let w: Vec<f64> = (0..3 * 4 * 2).map(|_| r.random_range(0.0f64..1.0)).collect();
            let s: f64 = w.iter().sum();
            let t = JointTable::new(vec![3, 4, 2], w.iter().map(|x| x / s).collect()).unwrap();
            assert!(chain_rule_on_table(&t, 0, 1, 2).unwrap().identity_ok);
        }
    }

    #[test]
    fn trials_are_reproducible() {
        let a = run_trial(5, 3, 4).unwrap();
        let b = run_trial(5, 3, 4).unwrap();
        assert_eq!(a.report.loss, b.report.loss);
        assert_eq!(a.report.n, TRIAL_BATCH_SIZES[0]);
        assert_eq!(a.report.s_x, 0.5);
        let mut buf = Vec::new();
        write_trials_csv(&[a, b], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().contains(",ok,"));
    }
}
