//! Closed forms and Monte-Carlo checks for the variance, curvature and
//! loss-path statements about stochastic versus deterministic gates.
//!
//! Variances of vector quantities are traces of covariance matrices
//! (sums of per-coordinate variances), matching the squared-norm scalars in
//! the statements.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StudentT};

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::data::{make_synthetic_task, Batch, Dataset};
use crate::engine::MethodKind;
use crate::error::{Error, Result};
use crate::gates::{draw_bernoulli_gate, draw_gumbel_gate};
use crate::harness::run_experiment;
use crate::metrics::fmt_sig9;
use crate::model::{
    model_forward, tail_forward, uniform_gates, Backbone, ForwardOptions, Gates, Mix, Model,
    Trainable,
};
use crate::rng;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Closed forms

/// `p * var_a + p (1 - p) ||mean_a||^2`.
pub fn theseus_variance_closed_form(p: f64, mean_a: &[f64], var_a: f64) -> Result<f64> {
    check_prob(p)?;
    if !(var_a >= 0.0) {
        return Err(Error::param(format!("variance {var_a} is negative")));
    }
    let m2: f64 = mean_a.iter().map(|x| x * x).sum();
    Ok(p * var_a + p * (1.0 - p) * m2)
}

/// `p^2 * var_a + var_r * E||a||^2`.
pub fn soft_gate_variance_closed_form(
    p: f64,
    var_r: f64,
    mean_sq_a: f64,
    var_a: f64,
) -> Result<f64> {
    check_prob(p)?;
    if !(var_r >= 0.0) || !(var_a >= 0.0) || !(mean_sq_a >= 0.0) {
        return Err(Error::param(
            "variances and second moments must be non-negative",
        ));
    }
    Ok(p * p * var_a + var_r * mean_sq_a)
}

fn check_prob(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Estimators

/// A Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

fn mean_and_se(q: &[f64]) -> Estimate {
    let n = q.len() as f64;
    let mean = q.iter().sum::<f64>() / n;
    let var = q.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Estimate {
        value: mean,
        se: (var / n).sqrt(),
    }
}

pub fn mean_vector(samples: &[Vec<f64>]) -> Vec<f64> {
    let n = samples.len() as f64;
    let mut m = vec![0.0; samples.first().map_or(0, Vec::len)];
    for s in samples {
        for (mi, x) in m.iter_mut().zip(s) {
            *mi += x;
        }
    }
    m.iter_mut().for_each(|x| *x /= n);
    m
}

/// Unbiased trace variance. The standard error treats
/// `q_i = ||x_i - mean||^2` as i.i.d.
pub fn trace_variance(samples: &[Vec<f64>]) -> Estimate {
    let n = samples.len();
    let mean = mean_vector(samples);
    let q: Vec<f64> = samples
        .iter()
        .map(|s| s.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum())
        .collect();
    let e = mean_and_se(&q);
    let c = n as f64 / (n as f64 - 1.0);
    Estimate {
        value: e.value * c,
        se: e.se * c,
    }
}

/// `E||x||^2` with its standard error.
pub fn mean_sq_norm(samples: &[Vec<f64>]) -> Estimate {
    let q: Vec<f64> = samples
        .iter()
        .map(|s| s.iter().map(|x| x * x).sum())
        .collect();
    mean_and_se(&q)
}

/// Unbiased variance of a set of vectors, computed from pairwise
/// differences so that identical vectors give exactly 0.
pub fn pairwise_trace_variance(samples: &[Vec<f64>]) -> f64 {
    let k = samples.len();
    if k < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += samples[i]
                .iter()
                .zip(&samples[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    total / (k * (k - 1)) as f64
}

// ---------------------------------------------------------------------------
// Synthetic gradient families

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradFamily {
    /// The same vector every draw.
    Deterministic,
    /// Isotropic Gaussian around a fixed mean.
    Gaussian,
    /// Student-t noise (5 degrees of freedom) around a fixed mean.
    HeavyTailed,
}

impl GradFamily {
    pub const ALL: [GradFamily; 3] = [
        GradFamily::Deterministic,
        GradFamily::Gaussian,
        GradFamily::HeavyTailed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradFamily::Deterministic => "deterministic",
            GradFamily::Gaussian => "gaussian",
            GradFamily::HeavyTailed => "student_t5",
        }
    }
}

const FAMILY_DIM: usize = 8;

fn family_mean(dim: usize) -> Vec<f64> {
    (0..dim).map(|i| 0.5 - 0.25 * (i % 4) as f64).collect()
}

pub fn sample_family<R: Rng + ?Sized>(family: GradFamily, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mean = family_mean(FAMILY_DIM);
    let normal = Normal::new(0.0, 0.8).expect("valid normal");
    let t = StudentT::new(5.0).expect("valid Student-t");
    (0..n)
        .map(|_| {
            mean.iter()
                .map(|m| match family {
                    GradFamily::Deterministic => *m,
                    GradFamily::Gaussian => m + normal.sample(rng),
                    GradFamily::HeavyTailed => m + 0.6 * t.sample(rng),
                })
                .collect()
        })
        .collect()
}

/// Observed versus predicted variance with a combined standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct SeCheck {
    pub label: String,
    pub predicted: f64,
    pub observed: f64,
    pub se: f64,
    pub pass: bool,
}

impl SeCheck {
    fn new(label: String, predicted: f64, observed: f64, se: f64, k: f64) -> Self {
        SeCheck {
            label,
            predicted,
            observed,
            se,
            pass: (observed - predicted).abs() <= k * se,
        }
    }

    /// Distance in standard errors (0 when both sides agree exactly).
    pub fn z(&self) -> f64 {
        let d = (self.observed - self.predicted).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.se
        }
    }
}

/// Variance of `z a` with `z ~ Bernoulli(p)` independent of `a`, against
/// `p Var[a] + p (1 - p) ||E a||^2` from the same draws of `a`.
pub fn hard_gate_variance_check(
    family: GradFamily,
    p: f64,
    n: usize,
    seed: u64,
) -> Result<SeCheck> {
    let mut r = rng::stream(seed, &[rng::PROBES, 1]);
    let a = sample_family(family, n, &mut r);
    let za: Vec<Vec<f64>> = a
        .iter()
        .map(|ai| {
            let z = f64::from(u8::from(draw_bernoulli_gate(p, &mut r)?));
            Ok(ai.iter().map(|x| z * x).collect())
        })
        .collect::<Result<_>>()?;
    let observed = trace_variance(&za);
    let var_a = trace_variance(&a);
    let mean_a = mean_vector(&a);
    let predicted = theseus_variance_closed_form(p, &mean_a, var_a.value)?;
    let norm_mean = mean_a.iter().map(|x| x * x).sum::<f64>().sqrt();
    // delta-method bound on the error of ||mean||^2
    let se_m2 = 2.0 * norm_mean * (var_a.value / n as f64).sqrt();
    let se_pred = ((p * var_a.se).powi(2) + (p * (1.0 - p) * se_m2).powi(2)).sqrt();
    let se = (observed.se.powi(2) + se_pred.powi(2)).sqrt();
    Ok(SeCheck::new(
        format!("{} p={p}", family.name()),
        predicted,
        observed.value,
        se,
        3.0,
    ))
}

/// One temperature of the soft-gate check.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftGateRow {
    pub tau: f64,
    pub var_r: f64,
    pub var_ra: f64,
    /// `p^2 Var[a]`, the variance a deterministic gate at `p` would give.
    pub deterministic: f64,
    /// The excess `var_ra - deterministic` against `var_r * E||a||^2`.
    pub excess: SeCheck,
}

/// Soft gates at `p = 0.5` (where the binary-concrete mean is exactly `p`)
/// for each temperature, using common draws of `a` and of the logistic noise.
pub fn soft_gate_check(taus: &[f64], n: usize, seed: u64) -> Result<(Vec<SoftGateRow>, bool)> {
    let p = 0.5;
    let mut ra_rng = rng::stream(seed, &[rng::PROBES, 2]);
    let a = sample_family(GradFamily::Gaussian, n, &mut ra_rng);
    let var_a = trace_variance(&a);
    let msq = mean_sq_norm(&a);
    let mut rows = Vec::new();
    for &tau in taus {
        let mut noise = rng::stream(seed, &[rng::PROBES, 3]);
        let r: Vec<f64> = (0..n)
            .map(|_| draw_gumbel_gate(p, tau, &mut noise))
            .collect::<Result<_>>()?;
        let var_r = trace_variance(&r.iter().map(|&x| vec![x]).collect::<Vec<_>>());
        let ra: Vec<Vec<f64>> = a
            .iter()
            .zip(&r)
            .map(|(ai, &ri)| ai.iter().map(|x| ri * x).collect())
            .collect();
        let obs = trace_variance(&ra);
        let deterministic = p * p * var_a.value;
        let predicted = soft_gate_variance_closed_form(p, var_r.value, msq.value, 0.0)?;
        let se = (obs.se.powi(2)
            + (p * p * var_a.se).powi(2)
            + (var_r.value * msq.se).powi(2)
            + (msq.value * var_r.se).powi(2))
        .sqrt();
        rows.push(SoftGateRow {
            tau,
            var_r: var_r.value,
            var_ra: obs.value,
            deterministic,
            excess: SeCheck::new(
                format!("tau={tau}"),
                predicted,
                obs.value - deterministic,
                se,
                3.0,
            ),
        });
    }
    let mut by_var: Vec<&SoftGateRow> = rows.iter().collect();
    by_var.sort_by(|x, y| x.var_r.total_cmp(&y.var_r));
    let monotone = by_var.windows(2).all(|w| w[0].var_ra <= w[1].var_ra);
    Ok((rows, monotone))
}

// ---------------------------------------------------------------------------
// Live gate-induced variance

/// Gate mechanisms compared on the live model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateKind {
    /// Deterministic blend with student coefficient `p`.
    Dcr,
    Bernoulli,
    Gumbel {
        tau: f64,
    },
}

impl GateKind {
    pub fn from_method(kind: MethodKind, tau: f64) -> Result<Self> {
        match kind {
            MethodKind::Dcr | MethodKind::DcrDfg => Ok(GateKind::Dcr),
            MethodKind::TheseusBernoulli => Ok(GateKind::Bernoulli),
            MethodKind::TheseusGumbel | MethodKind::TheseusGumbelDfg => {
                Ok(GateKind::Gumbel { tau })
            }
            other => Err(Error::param(format!("{other} has no gate to analyse"))),
        }
    }

    fn name(self) -> String {
        match self {
            GateKind::Dcr => "dcr".into(),
            GateKind::Bernoulli => "theseus_bernoulli".into(),
            GateKind::Gumbel { tau } => format!("theseus_gumbel(tau={tau})"),
        }
    }

    fn mix<R: Rng + ?Sized>(self, p: f64, rng: &mut R) -> Result<Mix> {
        Ok(match self {
            GateKind::Dcr => Mix::Blend { alpha: 1.0 - p },
            GateKind::Bernoulli => Mix::Hard {
                student: draw_bernoulli_gate(p, rng)?,
            },
            GateKind::Gumbel { .. } if p == 0.0 || p == 1.0 => Mix::Soft { r: p },
            GateKind::Gumbel { tau } => Mix::Soft {
                r: draw_gumbel_gate(p, tau, rng)?,
            },
        })
    }
}

/// Gate-induced gradient variance at one site of a frozen snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceReport {
    pub gate: GateKind,
    pub p: f64,
    pub batches: usize,
    pub draws: usize,
    /// Mean over batches of the across-draw trace variance.
    pub gate_induced: f64,
    /// Standard error of `gate_induced` across batches.
    pub se: f64,
    /// `E||a(S; X)||^2` from student-only probes.
    pub mean_sq_a: f64,
    /// `p (1 - p) E||a(S; X)||^2`.
    pub closed_form: f64,
}

/// A frozen model with one probed site; the other replaced sites keep a
/// fixed deterministic mix.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub model: Model,
    pub site: usize,
    pub others: Mix,
    pub label_smoothing: f64,
}

impl Snapshot {
    fn gates(&self, mix: Mix) -> Gates {
        let mut g = uniform_gates(&self.model.spec, self.others.clone());
        g.insert(self.site, mix);
        g
    }

    /// Task-loss gradient of the probed student, flattened.
    pub fn site_gradient(&self, batch: &Batch, mix: Mix) -> Result<Vec<f64>> {
        let spec = &self.model.spec;
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, Trainable::Students);
        let out = model_forward(
            &mut g,
            spec,
            &bound,
            &batch.tokens,
            &self.gates(mix),
            ForwardOptions::default(),
        )?;
        let loss = g.cross_entropy(out.logits, &batch.labels, self.label_smoothing)?;
        g.backward(loss, &Tensor::scalar(1.0))?;
        let att = bound.students[&self.site];
        Ok(att
            .vars()
            .iter()
            .flat_map(|&v| match g.grad(v) {
                Some(gr) => gr.to_vec(),
                None => vec![0.0; g.value(v).numel()],
            })
            .collect())
    }
}

/// Within-batch variance of the probed student's gradient across gate
/// draws, averaged over batches, plus the closed form built from
/// student-only probes `a(S; X)`.
pub fn empirical_gate_variance<R: Rng + ?Sized>(
    snap: &Snapshot,
    gate: GateKind,
    p: f64,
    batches: &[Batch],
    draws: usize,
    rng: &mut R,
) -> Result<VarianceReport> {
    check_prob(p)?;
    if gate != GateKind::Dcr && draws < 2 {
        return Err(Error::param(
            "stochastic gates need at least 2 draws per batch",
        ));
    }
    if batches.is_empty() || draws == 0 {
        return Err(Error::param("need at least one batch and one draw"));
    }
    let mut per_batch = Vec::with_capacity(batches.len());
    let mut sq = Vec::with_capacity(batches.len());
    for batch in batches {
        let grads: Vec<Vec<f64>> = (0..draws)
            .map(|_| {
                let mix = gate.mix(p, rng)?;
                snap.site_gradient(batch, mix)
            })
            .collect::<Result<_>>()?;
        per_batch.push(pairwise_trace_variance(&grads));
        let a = snap.site_gradient(batch, Mix::Hard { student: true })?;
        sq.push(a.iter().map(|x| x * x).sum::<f64>());
    }
    let gi = mean_and_se(&per_batch);
    let mean_sq_a = sq.iter().sum::<f64>() / sq.len() as f64;
    Ok(VarianceReport {
        gate,
        p,
        batches: batches.len(),
        draws,
        gate_induced: gi.value,
        se: gi.se,
        mean_sq_a,
        closed_form: p * (1.0 - p) * mean_sq_a,
    })
}

/// `count` seeded batches of `size` distinct training examples.
pub fn probe_batches(data: &Dataset, count: usize, size: usize, seed: u64) -> Vec<Batch> {
    let mut r = rng::stream(seed, &[rng::PROBES, 4]);
    (0..count)
        .map(|_| data.batch(&sample(&mut r, data.len(), size.min(data.len())).into_vec()))
        .collect()
}

// ---------------------------------------------------------------------------
// Curvature bias

/// Scalar test functions with known Hessians.
#[derive(Clone, Debug, PartialEq)]
pub enum Psi {
    /// `0.5 y^T A y + b^T y` with symmetric `A` (row-major).
    Quadratic {
        a: Vec<f64>,
        b: Vec<f64>,
    },
    Linear {
        b: Vec<f64>,
    },
    LogSumExp,
}

impl Psi {
    pub fn value(&self, y: &[f64]) -> f64 {
        match self {
            Psi::Quadratic { a, b } => {
                let d = y.len();
                let mut q = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        q += y[i] * a[i * d + j] * y[j];
                    }
                }
                0.5 * q + dot(b, y)
            }
            Psi::Linear { b } => dot(b, y),
            Psi::LogSumExp => crate::autodiff::log_sum_exp(y),
        }
    }

    pub fn hessian(&self, y: &[f64]) -> DMatrix<f64> {
        let d = y.len();
        match self {
            Psi::Quadratic { a, .. } => DMatrix::from_row_slice(d, d, a),
            Psi::Linear { .. } => DMatrix::zeros(d, d),
            Psi::LogSumExp => {
                let lse = crate::autodiff::log_sum_exp(y);
                let s: Vec<f64> = y.iter().map(|v| (v - lse).exp()).collect();
                DMatrix::from_fn(d, d, |i, j| {
                    f64::from(u8::from(i == j)) * s[i] - s[i] * s[j]
                })
            }
        }
    }

    pub fn hessian_norm(&self, y: &[f64]) -> f64 {
        SymmetricEigen::new(self.hessian(y))
            .eigenvalues
            .iter()
            .fold(0.0f64, |m, e| m.max(e.abs()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureProbe {
    pub psi: Psi,
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub p: f64,
    /// Claimed bound on the Hessian operator norm along the segment.
    pub m: f64,
}

fn segment_point(t: &[f64], s: &[f64], w: f64) -> Vec<f64> {
    t.iter()
        .zip(s)
        .map(|(a, b)| (1.0 - w) * a + w * b)
        .collect()
}

impl CurvatureProbe {
    /// Probe whose `m` is the largest Hessian norm over `samples` evenly
    /// spaced points of the segment, endpoints included.
    pub fn with_sampled_bound(psi: Psi, t: Vec<f64>, s: Vec<f64>, p: f64, samples: usize) -> Self {
        let m = sampled_hessian_max(&psi, &t, &s, samples);
        CurvatureProbe { psi, t, s, p, m }
    }

    pub fn delta(&self) -> Vec<f64> {
        self.s.iter().zip(&self.t).map(|(a, b)| a - b).collect()
    }

    pub fn mu(&self) -> Vec<f64> {
        segment_point(&self.t, &self.s, self.p)
    }
}

fn sampled_hessian_max(psi: &Psi, t: &[f64], s: &[f64], samples: usize) -> f64 {
    let n = samples.max(2);
    (0..n)
        .map(|i| psi.hessian_norm(&segment_point(t, s, i as f64 / (n - 1) as f64)))
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvatureOutcome {
    /// `|E psi(Y) - psi(mu)|` under the hard gate, with the expectation
    /// enumerated exactly over `z in {0, 1}`.
    pub bias: f64,
    /// `(M / 2) p (1 - p) ||Delta||^2`.
    pub bound: f64,
    pub holds: bool,
    /// The same gap for the deterministic blend, which is identically 0.
    pub dcr_bias: f64,
}

/// Checks the curvature bias bound on one probe after confirming that `m`
/// bounds the Hessian norm at `n_samples` points of the segment.
pub fn curvature_bias_check(probe: &CurvatureProbe, n_samples: usize) -> Result<CurvatureOutcome> {
    if n_samples == 0 {
        return Err(Error::param("need at least one segment sample"));
    }
    check_prob(probe.p)?;
    if probe.t.len() != probe.s.len() {
        return Err(Error::dim("T and S differ in dimension"));
    }
    let sampled = sampled_hessian_max(&probe.psi, &probe.t, &probe.s, n_samples);
    if sampled > probe.m * (1.0 + 1e-12) {
        return Err(Error::Probe(format!(
            "claimed curvature bound {} is below the sampled Hessian norm {sampled}",
            probe.m
        )));
    }
    let p = probe.p;
    let mu = probe.mu();
    let psi_mu = probe.psi.value(&mu);
    let expected = p * probe.psi.value(&probe.s) + (1.0 - p) * probe.psi.value(&probe.t);
    let bias = (expected - psi_mu).abs();
    let d2: f64 = probe.delta().iter().map(|x| x * x).sum();
    let bound = 0.5 * probe.m * p * (1.0 - p) * d2;
    // the deterministic blend is mu itself
    let dcr_bias = (psi_mu - probe.psi.value(&mu)).abs();
    Ok(CurvatureOutcome {
        bias,
        bound,
        holds: bias <= bound * (1.0 + 1e-12) + 1e-15,
        dcr_bias,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureSuite {
    pub probes: usize,
    pub violations: usize,
    /// Largest `bias / bound` over non-isotropic probes.
    pub worst_ratio: f64,
    /// Largest `|bias - bound|` over isotropic quadratics.
    pub isotropic_gap: f64,
    pub max_dcr_bias: f64,
}

/// `n` probes of each family: isotropic quadratics (equality), general
/// symmetric quadratics and log-sum-exp on 4-vectors.
pub fn curvature_suite(n: usize, seed: u64) -> Result<CurvatureSuite> {
    let mut r = rng::stream(seed, &[rng::PROBES, 5]);
    let normal = Normal::new(0.0, 1.5).expect("valid normal");
    let dim = 4;
    let vec = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..dim).map(|_| normal.sample(r)).collect()
    };
    let mut out = CurvatureSuite {
        probes: 0,
        violations: 0,
        worst_ratio: 0.0,
        isotropic_gap: 0.0,
        max_dcr_bias: 0.0,
    };
    for family in 0..3 {
        for _ in 0..n {
            let t = vec(&mut r);
            let s = vec(&mut r);
            let p = r.random_range(0.01..0.99);
            let psi = match family {
                0 => {
                    let c = r.random_range(0.1..3.0);
                    let a = (0..dim * dim)
                        .map(|k| if k / dim == k % dim { c } else { 0.0 })
                        .collect();
                    Psi::Quadratic { a, b: vec(&mut r) }
                }
                1 => {
                    let raw = vec(&mut r)
                        .into_iter()
                        .chain(vec(&mut r))
                        .chain(vec(&mut r))
                        .chain(vec(&mut r))
                        .collect::<Vec<_>>();
                    let a = (0..dim * dim)
                        .map(|k| 0.5 * (raw[k] + raw[(k % dim) * dim + k / dim]))
                        .collect();
                    Psi::Quadratic { a, b: vec(&mut r) }
                }
                _ => Psi::LogSumExp,
            };
            let probe = CurvatureProbe::with_sampled_bound(psi, t, s, p, 1000);
            let o = curvature_bias_check(&probe, 1000)?;
            out.probes += 1;
            out.violations += usize::from(!o.holds);
            out.max_dcr_bias = out.max_dcr_bias.max(o.dcr_bias);
            if family == 0 {
                out.isotropic_gap = out.isotropic_gap.max((o.bias - o.bound).abs());
            } else if o.bound > 0.0 {
                out.worst_ratio = out.worst_ratio.max(o.bias / o.bound);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Loss path

#[derive(Clone, Debug, PartialEq)]
pub struct PathProbe {
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    /// Lipschitz constant `L_y` of `f` on the segment.
    pub lipschitz: f64,
    /// Any `D >= ||S - T||`.
    pub d_bound: f64,
}

/// Largest `|f(a) - f(b)| / |a - b|` over `pairs` random pairs of nearby
/// points on the segment from `t` to `s`, in units of `||s - t||`.
pub fn max_difference_quotient<F, R>(
    f: &F,
    t: &[f64],
    s: &[f64],
    pairs: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
    R: Rng + ?Sized,
{
    let dist = t
        .iter()
        .zip(s)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    if dist == 0.0 {
        return Ok(0.0);
    }
    let mut best = 0.0f64;
    for _ in 0..pairs {
        let a: f64 = rng.random();
        let h: f64 = rng.random_range(1e-3..0.1);
        let b = if a + h <= 1.0 { a + h } else { a - h };
        let fa = f(&segment_point(t, s, a))?;
        let fb = f(&segment_point(t, s, b))?;
        best = best.max((fa - fb).abs() / ((a - b).abs() * dist));
    }
    Ok(best)
}

/// `max over the grid of |f(y(a)) - f(y(0))| - L_y a D`; a value `<= 0`
/// means the bound holds everywhere on the grid.
pub fn loss_path_check<F>(probe: &PathProbe, f: &F, alpha_grid: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if let Some(a) = alpha_grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::param(format!("grid point {a} outside [0, 1]")));
    }
    let f0 = f(&probe.t)?;
    let mut worst = f64::NEG_INFINITY;
    for &a in alpha_grid {
        let fa = f(&segment_point(&probe.t, &probe.s, a))?;
        worst = worst.max((fa - f0).abs() - probe.lipschitz * a * probe.d_bound);
    }
    Ok(worst)
}

/// The loss of the frozen tail behind one site as a function of that
/// site's attention branch output, for a fixed batch.
pub struct LiveTail<'a> {
    snap: &'a Snapshot,
    batch: &'a Batch,
    residual_in: Tensor,
    pub teacher_branch: Tensor,
    pub student_branch: Tensor,
}

impl<'a> LiveTail<'a> {
    pub fn new(snap: &'a Snapshot, batch: &'a Batch) -> Result<Self> {
        let spec = &snap.model.spec;
        let mut g = Graph::new();
        let bound = snap.model.bind(&mut g, Trainable::Nothing);
        let gates = snap.gates(snap.others.clone());
        let opts = ForwardOptions {
            both_branches: true,
        };
        let out = model_forward(&mut g, spec, &bound, &batch.tokens, &gates, opts)?;
        let site = out
            .sites
            .iter()
            .find(|s| s.layer == snap.site)
            .ok_or_else(|| Error::Config(format!("layer {} is not replaced", snap.site)))?;
        Ok(LiveTail {
            snap,
            batch,
            residual_in: g.value(site.residual_in).detached(),
            teacher_branch: g.value(site.teacher_branch.unwrap()).detached(),
            student_branch: g.value(site.student_branch.unwrap()).detached(),
        })
    }

    pub fn loss(&self, y: &[f64]) -> Result<f64> {
        let spec = &self.snap.model.spec;
        let mut g = Graph::new();
        let bound = self.snap.model.bind(&mut g, Trainable::Nothing);
        let x = g.constant(self.residual_in.clone());
        let branch = g.constant(Tensor::new(self.teacher_branch.shape(), y.to_vec())?);
        let gates = self.snap.gates(self.snap.others.clone());
        let logits = tail_forward(&mut g, spec, &bound, self.snap.site, x, branch, &gates)?;
        let loss = g.cross_entropy(logits, &self.batch.labels, self.snap.label_smoothing)?;
        Ok(g.value(loss).item())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathSuite {
    pub pairs: usize,
    pub grid_points: usize,
    pub max_violation: f64,
    pub violations: usize,
}

/// Runs the path check on `pairs` seeded batches, cycling through the
/// replaced layers; `L_y` is twice the largest sampled difference quotient.
pub fn path_suite(
    base: &Snapshot,
    data: &Dataset,
    pairs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<PathSuite> {
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let batches = probe_batches(data, pairs, batch_size, rng::derive_seed(seed, &[7]));
    let layers: Vec<usize> = base.model.spec.replaced.iter().copied().collect();
    let mut q_rng = rng::stream(seed, &[rng::PROBES, 6]);
    let mut max_violation = f64::NEG_INFINITY;
    let mut violations = 0;
    for (k, batch) in batches.iter().enumerate() {
        let snap = Snapshot {
            site: layers[k % layers.len()],
            ..base.clone()
        };
        let tail = LiveTail::new(&snap, batch)?;
        let f = |y: &[f64]| tail.loss(y);
        let (t, s) = (tail.teacher_branch.data(), tail.student_branch.data());
        let q = max_difference_quotient(&f, t, s, 32, &mut q_rng)?;
        let d = t
            .iter()
            .zip(s)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let probe = PathProbe {
            t: t.to_vec(),
            s: s.to_vec(),
            lipschitz: 2.0 * q,
            d_bound: d,
        };
        let v = loss_path_check(&probe, &f, &grid)?;
        violations += usize::from(v > 0.0);
        max_violation = max_violation.max(v);
    }
    Ok(PathSuite {
        pairs,
        grid_points: grid.len(),
        max_violation,
        violations,
    })
}

// ---------------------------------------------------------------------------
// Full verification

#[derive(Clone, Debug, PartialEq)]
pub struct PropositionRecord {
    pub name: &'static str,
    pub predicted: f64,
    pub observed: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct TheoryReport {
    pub records: Vec<PropositionRecord>,
    pub hard_gate: Vec<SeCheck>,
    pub soft_gate: Vec<SoftGateRow>,
    pub soft_monotone: bool,
    pub dcr: VarianceReport,
    pub theseus: VarianceReport,
    pub curvature: CurvatureSuite,
    pub path: PathSuite,
}

impl TheoryReport {
    pub fn all_pass(&self) -> bool {
        self.records.iter().all(|r| r.pass)
    }

    /// `name,predicted,observed,tolerance,pass` per record.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("name,predicted,observed,tolerance,pass\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.name,
                fmt_sig9(r.predicted),
                fmt_sig9(r.observed),
                fmt_sig9(r.tolerance),
                r.pass
            );
        }
        s
    }

    /// Human-readable tables of every individual check.
    pub fn tables(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "hard gate: Var[z a] vs p Var[a] + p(1-p) ||E a||^2");
        let _ = writeln!(
            s,
            "{:<24} {:>14} {:>14} {:>12} {:>6}",
            "case", "predicted", "observed", "se", "pass"
        );
        for c in &self.hard_gate {
            let _ = writeln!(
                s,
                "{:<24} {:>14.6e} {:>14.6e} {:>12.3e} {:>6}",
                c.label, c.predicted, c.observed, c.se, c.pass
            );
        }
        let _ = writeln!(
            s,
            "\nsoft gate at p = 0.5 (monotone in Var(r): {})",
            self.soft_monotone
        );
        let _ = writeln!(
            s,
            "{:<8} {:>12} {:>14} {:>14} {:>14} {:>12} {:>6}",
            "tau", "Var(r)", "Var[r a]", "excess", "predicted", "se", "pass"
        );
        for r in &self.soft_gate {
            let _ = writeln!(
                s,
                "{:<8} {:>12.6} {:>14.6e} {:>14.6e} {:>14.6e} {:>12.3e} {:>6}",
                r.tau,
                r.var_r,
                r.var_ra,
                r.excess.observed,
                r.excess.predicted,
                r.excess.se,
                r.excess.pass
            );
        }
        let _ = writeln!(s, "\nlive gate-induced variance (p = {})", self.theseus.p);
        for v in [&self.dcr, &self.theseus] {
            let _ = writeln!(
                s,
                "{:<28} gate_induced {:>14.6e} (se {:.3e}) closed_form {:>14.6e} over {} batches x {} draws",
                v.gate.name(),
                v.gate_induced,
                v.se,
                if v.gate == GateKind::Dcr { 0.0 } else { v.closed_form },
                v.batches,
                v.draws
            );
        }
        let c = &self.curvature;
        let _ = writeln!(
            s,
            "\ncurvature: {} probes, {} violations, worst bias/bound {:.6}, isotropic |bias - bound| {:.3e}, max DCR bias {}",
            c.probes, c.violations, c.worst_ratio, c.isotropic_gap, c.max_dcr_bias
        );
        let p = &self.path;
        let _ = writeln!(
            s,
            "loss path: {} pairs x {} grid points, {} violations, max violation {:.6e}",
            p.pairs, p.grid_points, p.violations, p.max_violation
        );
        s
    }
}

/// Students trained briefly with DCR on top of `teacher`, frozen, with the
/// other sites held at an even blend.
pub fn make_snapshot(cfg: &RunConfig, teacher: &Backbone) -> Result<Snapshot> {
    let mut snap_cfg = cfg.with_method(MethodKind::Dcr);
    snap_cfg.epochs = cfg.theory.snapshot_epochs.max(1);
    snap_cfg.eval_points = 1;
    snap_cfg.schedule = None;
    let record = run_experiment(&snap_cfg, teacher)?;
    Ok(Snapshot {
        model: record.model,
        site: cfg.theory.site,
        others: Mix::Blend { alpha: 0.5 },
        label_smoothing: cfg.label_smoothing,
    })
}

/// Every check, with one summary record per statement.
pub fn verify_all(cfg: &RunConfig, teacher: &Backbone) -> Result<TheoryReport> {
    cfg.validate()?;
    let seed = cfg.seed;
    let th = &cfg.theory;

    let mut hard_gate = Vec::new();
    for family in GradFamily::ALL {
        for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
            hard_gate.push(hard_gate_variance_check(family, p, 100_000, seed)?);
        }
    }
    let worst1 = hard_gate
        .iter()
        .max_by(|a, b| a.z().total_cmp(&b.z()))
        .expect("non-empty")
        .clone();

    let (soft_gate, soft_monotone) = soft_gate_check(&[0.1, 0.5, 1.0, 2.0], 100_000, seed)?;
    let worst_soft = soft_gate
        .iter()
        .max_by(|a, b| a.excess.z().total_cmp(&b.excess.z()))
        .expect("non-empty")
        .excess
        .clone();

    let snap = make_snapshot(cfg, teacher)?;
    let (train, _) = make_synthetic_task(&cfg.task)?;
    let batches = probe_batches(&train, th.batches, th.batch_size, seed);
    let mut gate_rng = rng::stream(seed, &[rng::PROBES, 8]);
    let dcr = empirical_gate_variance(
        &snap,
        GateKind::Dcr,
        th.p,
        &batches,
        th.draws,
        &mut gate_rng,
    )?;
    let theseus = empirical_gate_variance(
        &snap,
        GateKind::Bernoulli,
        th.p,
        &batches,
        th.draws,
        &mut gate_rng,
    )?;
    let gap = theseus.gate_induced - dcr.gate_induced;
    let rel = (gap - theseus.closed_form).abs() / theseus.closed_form;

    let curvature = curvature_suite(100, seed)?;
    let path = path_suite(&snap, &train, 20, th.batch_size, seed)?;

    let records = vec![
        PropositionRecord {
            name: "prop1_hard_gate_variance",
            predicted: worst1.predicted,
            observed: worst1.observed,
            tolerance: 3.0 * worst1.se,
            pass: hard_gate.iter().all(|c| c.pass),
        },
        PropositionRecord {
            name: "prop2_gate_induced_variance",
            predicted: theseus.closed_form,
            observed: gap,
            tolerance: 0.1 * theseus.closed_form,
            pass: dcr.gate_induced == 0.0 && rel <= 0.1,
        },
        PropositionRecord {
            name: "prop3_curvature_bias",
            predicted: 1.0,
            observed: curvature.worst_ratio,
            tolerance: 0.0,
            pass: curvature.violations == 0
                && curvature.isotropic_gap <= 1e-12
                && curvature.max_dcr_bias == 0.0,
        },
        PropositionRecord {
            name: "prop4_loss_path",
            predicted: 0.0,
            observed: path.max_violation,
            tolerance: 0.0,
            pass: path.violations == 0,
        },
        PropositionRecord {
            name: "remark_soft_gate",
            predicted: worst_soft.predicted,
            observed: worst_soft.observed,
            tolerance: 3.0 * worst_soft.se,
            pass: soft_monotone && soft_gate.iter().all(|r| r.excess.pass),
        },
    ];
    Ok(TheoryReport {
        records,
        hard_gate,
        soft_gate,
        soft_monotone,
        dcr,
        theseus,
        curvature,
        path,
    })
}
