//! Training objective: weighted semantic cross-entropy with hard negative
//! mining, the uncertainty term, the mutual-learning term between the two
//! branches, and their weighted total.
//!
//! Each loss is computed on plain tensors together with its exact gradient
//! w.r.t. its inputs, so the same code backs both the scalar-loop oracle
//! tests and the autograd graph (via [`Graph::scalar_fn`]).

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{bail, Error, Result};
use crate::net::{BevFeatureSet, BevFeatureVars, ForwardVars, Mode};
use crate::tensor::{Float, Tensor};

/// Clamp applied to every probability entering a logarithm.
pub const PROB_EPS: f64 = 1e-7;
/// Negatives kept per positive by hard mining.
pub const HARD_NEGATIVE_RATIO: usize = 3;
/// Upper bound on `w` inside the negative factor `(1 - w)`.
pub const NEGATIVE_WEIGHT_CAP: f64 = 0.99;

/// Coefficients of the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub beta: f64,
    /// One positive weight per class; empty means "derive from data".
    pub class_weights: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.05,
            lambda2: 0.01,
            alpha: 0.001,
            beta: 1.0,
            class_weights: Vec::new(),
        }
    }
}

impl LossWeights {
    pub fn with_class_weights(class_weights: Vec<f64>) -> Self {
        Self {
            class_weights,
            ..Self::default()
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bail!(Config, "{} must be finite and non-negative, got {}", name, v);
            }
        }
        if self.class_weights.len() != num_classes {
            bail!(
                Config,
                "{} class weights for {} classes",
                self.class_weights.len(),
                num_classes
            );
        }
        if self.class_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            bail!(Config, "class weights must be strictly positive");
        }
        Ok(())
    }
}

/// Mutual-learning variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// No mutual-learning term.
    None,
    /// Geometric branch is the frozen reference.
    CbftTeacher,
    /// Global branch is the frozen reference.
    CfftTeacher,
    /// Distance between the two branch score maps.
    OutputSim,
    /// Per-extent sub-feature distances only.
    SubfeatureSim,
    /// Full bidirectional feature mimicking.
    Mutual,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::None,
        Scheme::Mutual,
        Scheme::CbftTeacher,
        Scheme::CfftTeacher,
        Scheme::OutputSim,
        Scheme::SubfeatureSim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::None => "none",
            Scheme::CbftTeacher => "cbft_teacher",
            Scheme::CfftTeacher => "cfft_teacher",
            Scheme::OutputSim => "output_sim",
            Scheme::SubfeatureSim => "subfeature_sim",
            Scheme::Mutual => "mutual",
        }
    }
}

/// Distance used by the mutual-learning term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    L1,
    Kl,
    L2,
}

impl Distance {
    pub const ALL: [Distance; 3] = [Distance::L1, Distance::Kl, Distance::L2];

    pub fn name(self) -> &'static str {
        match self {
            Distance::L1 => "l1",
            Distance::Kl => "kl",
            Distance::L2 => "l2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub distance: Distance,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Mutual,
            distance: Distance::L2,
        }
    }
}

/// How raw inverse-square-root class weights are rescaled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNormalization {
    /// Raw `f^-1/2` values.
    Raw,
    /// Mean weight of the defined classes becomes 1.
    MeanOne,
    /// Largest weight becomes the given cap.
    MaxCap(f64),
}

/// `w_i = f_i^{-1/2}` followed by the chosen rescaling. Classes with zero
/// frequency get `None` and are left out of the rescaling.
pub fn compute_class_weights(freqs: &[f64], norm: WeightNormalization) -> Result<Vec<Option<f64>>> {
    let mut raw = Vec::with_capacity(freqs.len());
    for (c, &f) in freqs.iter().enumerate() {
        if !(f.is_finite() && f <= 1.0 && f >= 0.0) {
            bail!(Data, "class {} frequency {} outside [0, 1]", c, f);
        }
        if f == 0.0 {
            warn!("class {c} never occurs; its weight is undefined and it is excluded");
            raw.push(None);
        } else {
            raw.push(Some(f.powf(-0.5)));
        }
    }
    let defined: Vec<f64> = raw.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Ok(raw);
    }
    let factor = match norm {
        WeightNormalization::Raw => 1.0,
        WeightNormalization::MeanOne => defined.len() as f64 / defined.iter().sum::<f64>(),
        WeightNormalization::MaxCap(cap) => {
            if !(cap > 0.0) {
                bail!(Config, "weight cap must be positive");
            }
            cap / defined.iter().cloned().fold(f64::MIN, f64::max)
        }
    };
    Ok(raw.into_iter().map(|w| w.map(|w| w * factor)).collect())
}

/// Value and gradient of the semantic loss.
#[derive(Debug, Clone)]
pub struct SemanticLoss<T> {
    pub value: T,
    pub grad: Tensor<T>,
    pub n_pos: usize,
    pub n_mined: usize,
    /// Set when the sample had no positives and the divisor fell back to 1.
    pub no_positives: bool,
}

fn clamp_prob<T: Float>(c: T) -> (T, bool) {
    let lo = T::f(PROB_EPS);
    let hi = T::one() - lo;
    if c < lo {
        (lo, false)
    } else if c > hi {
        (hi, false)
    } else {
        (c, true)
    }
}

/// Weighted binary cross-entropy with hard negative mining.
///
/// `scores` and `labels` are `C x Z x W`; `validity` (`Z x W`) removes
/// cells from both terms. The `HARD_NEGATIVE_RATIO * N_pos` negatives with
/// the largest loss are kept (ties: lowest flat index); the sum is divided
/// by `N_pos`. Without positives the three hardest negatives are kept and
/// the divisor is 1.
pub fn semantic_loss<T: Float>(
    scores: &Tensor<T>,
    labels: &Tensor<T>,
    validity: Option<&[bool]>,
    class_weights: &[f64],
) -> Result<SemanticLoss<T>> {
    if scores.shape() != labels.shape() || scores.shape().len() != 3 {
        bail!(
            Shape,
            "scores {:?} and labels {:?} must be equal C x Z x W",
            scores.shape(),
            labels.shape()
        );
    }
    let classes = scores.shape()[0];
    let plane = scores.shape()[1] * scores.shape()[2];
    if class_weights.len() != classes {
        bail!(Shape, "{} class weights for {} classes", class_weights.len(), classes);
    }
    if let Some(v) = validity {
        if v.len() != plane {
            bail!(Shape, "validity has {} cells, expected {}", v.len(), plane);
        }
    }
    let valid = |i: usize| validity.is_none_or(|v| v[i % plane]);

    let mut grad = vec![T::zero(); scores.len()];
    let mut pos_sum = T::zero();
    let mut n_pos = 0usize;
    let mut negatives: Vec<(T, usize)> = Vec::new();
    for (i, (&c, &y)) in scores.data().iter().zip(labels.data()).enumerate() {
        if !valid(i) {
            continue;
        }
        let w = T::f(class_weights[i / plane]);
        let (cc, inside) = clamp_prob(c);
        if y > T::f(0.5) {
            n_pos += 1;
            pos_sum -= w * cc.ln();
            if inside {
                grad[i] = -w / cc;
            }
        } else {
            let wn = T::one() - T::f(class_weights[i / plane].min(NEGATIVE_WEIGHT_CAP));
            negatives.push((-wn * (T::one() - cc).ln(), i));
        }
    }
    let keep = (HARD_NEGATIVE_RATIO * n_pos.max(1)).min(negatives.len());
    let order = |a: &(T, usize), b: &(T, usize)| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    };
    if keep < negatives.len() && keep > 0 {
        negatives.select_nth_unstable_by(keep - 1, order);
    }
    negatives.truncate(keep);
    let mut neg_sum = T::zero();
    for &(term, i) in &negatives {
        neg_sum += term;
        let (cc, inside) = clamp_prob(scores.data()[i]);
        if inside {
            let wn = T::one() - T::f(class_weights[i / plane].min(NEGATIVE_WEIGHT_CAP));
            grad[i] = wn / (T::one() - cc);
        }
    }
    let no_positives = n_pos == 0;
    let divisor = T::f(n_pos.max(1) as f64);
    for g in &mut grad {
        *g = *g / divisor;
    }
    Ok(SemanticLoss {
        value: (pos_sum + neg_sum) / divisor,
        grad: Tensor::from_vec(scores.shape(), grad)?,
        n_pos,
        n_mined: keep,
        no_positives,
    })
}

/// Mean of `1 - c ln c` over all entries, with `c` clamped below.
pub fn uncertainty_loss<T: Float>(scores: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if scores.is_empty() {
        bail!(Shape, "uncertainty loss of an empty tensor");
    }
    let n = T::f(scores.len() as f64);
    let lo = T::f(PROB_EPS);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(scores.len());
    for &c in scores.data() {
        let cc = c.max(lo).min(T::one());
        total += T::one() - cc * cc.ln();
        grad.push(if c > lo && c < T::one() {
            -(cc.ln() + T::one()) / n
        } else {
            T::zero()
        });
    }
    Ok((total / n, Tensor::from_vec(scores.shape(), grad)?))
}

/// Distance value plus gradients w.r.t. both arguments.
#[derive(Debug, Clone)]
pub struct DistanceValue<T> {
    pub value: T,
    pub grad_a: Tensor<T>,
    pub grad_b: Tensor<T>,
}

/// Element-count-normalised distance between equally shaped tensors.
///
/// * L2: `||a - b||_2 / sqrt(N)` (root mean square).
/// * L1: mean absolute difference.
/// * KL: symmetrised KL between per-cell softmaxes over the leading
///   (channel) axis, averaged over cells.
pub fn distance<T: Float>(a: &Tensor<T>, b: &Tensor<T>, kind: Distance) -> Result<DistanceValue<T>> {
    if a.shape() != b.shape() {
        bail!(Shape, "distance between {:?} and {:?}", a.shape(), b.shape());
    }
    if a.is_empty() {
        bail!(Shape, "distance between empty tensors");
    }
    let n = a.len();
    let nt = T::f(n as f64);
    let (ad, bd) = (a.data(), b.data());
    let (value, ga, gb) = match kind {
        Distance::L2 => {
            let ss = ad
                .iter()
                .zip(bd)
                .fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y));
            let rms = (ss / nt).sqrt();
            let ga: Vec<T> = if rms > T::zero() {
                ad.iter().zip(bd).map(|(&x, &y)| (x - y) / (nt * rms)).collect()
            } else {
                vec![T::zero(); n]
            };
            let gb = ga.iter().map(|&g| -g).collect();
            (rms, ga, gb)
        }
        Distance::L1 => {
            let s = ad.iter().zip(bd).fold(T::zero(), |s, (&x, &y)| s + (x - y).abs());
            let ga: Vec<T> = ad
                .iter()
                .zip(bd)
                .map(|(&x, &y)| {
                    if x > y {
                        T::one() / nt
                    } else if x < y {
                        -T::one() / nt
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let gb = ga.iter().map(|&g| -g).collect();
            (s / nt, ga, gb)
        }
        Distance::Kl => {
            let channels = a.shape()[0];
            let cells = n / channels;
            let half = T::f(0.5);
            let ct = T::f(cells as f64);
            let mut ga = vec![T::zero(); n];
            let mut gb = vec![T::zero(); n];
            let mut total = T::zero();
            let mut p = vec![T::zero(); channels];
            let mut q = vec![T::zero(); channels];
            for cell in 0..cells {
                softmax_column(ad, cell, cells, &mut p);
                softmax_column(bd, cell, cells, &mut q);
                let mut ep = T::zero();
                let mut eq = T::zero();
                for c in 0..channels {
                    let i = c * cells + cell;
                    let delta = ad[i] - bd[i];
                    // symmetric KL reduces to 1/2 sum (p - q)(log p - log q)
                    total += half * (p[c] - q[c]) * (p[c].ln() - q[c].ln());
                    ep += p[c] * delta;
                    eq += q[c] * delta;
                }
                for c in 0..channels {
                    let i = c * cells + cell;
                    let delta = ad[i] - bd[i];
                    ga[i] = half * ((p[c] - q[c]) + p[c] * (delta - ep)) / ct;
                    gb[i] = -half * ((p[c] - q[c]) + q[c] * (delta - eq)) / ct;
                }
            }
            (total / ct, ga, gb)
        }
    };
    Ok(DistanceValue {
        value,
        grad_a: Tensor::from_vec(a.shape(), ga)?,
        grad_b: Tensor::from_vec(a.shape(), gb)?,
    })
}

fn softmax_column<T: Float>(data: &[T], cell: usize, cells: usize, out: &mut [T]) {
    let channels = out.len();
    let m = (0..channels).fold(T::neg_infinity(), |m, c| m.max(data[c * cells + cell]));
    let mut s = T::zero();
    for (c, o) in out.iter_mut().enumerate() {
        *o = (data[c * cells + cell] - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o = *o / s;
    }
}

/// Mutual-learning loss with gradients for every participating tensor.
#[derive(Debug, Clone)]
pub struct MutualLoss<T> {
    pub value: T,
    pub grad_geo_concat: Tensor<T>,
    pub grad_glo_concat: Tensor<T>,
    pub grad_geo_sub: Vec<Tensor<T>>,
    pub grad_glo_sub: Vec<Tensor<T>>,
}

/// `lambda1 * d(F_geo, F_glo) + sum_i lambda2 * d(F_geo_i, F_glo_i)`.
pub fn mutual_learning_terms<T: Float>(
    geo: &BevFeatureSet<T>,
    glo: &BevFeatureSet<T>,
    lambda1: f64,
    lambda2: f64,
    kind: Distance,
) -> Result<MutualLoss<T>> {
    if !geo.same_shape(glo) {
        bail!(Shape, "branch feature sets differ in shape");
    }
    let whole = distance(&geo.concatenated, &glo.concatenated, kind)?;
    let l1 = T::f(lambda1);
    let l2 = T::f(lambda2);
    let mut value = l1 * whole.value;
    let mut grad_geo_concat = whole.grad_a;
    grad_geo_concat.scale(l1);
    let mut grad_glo_concat = whole.grad_b;
    grad_glo_concat.scale(l1);
    let mut grad_geo_sub = Vec::with_capacity(geo.sub_features.len());
    let mut grad_glo_sub = Vec::with_capacity(geo.sub_features.len());
    for (a, b) in geo.sub_features.iter().zip(&glo.sub_features) {
        let d = distance(a, b, kind)?;
        value += l2 * d.value;
        let mut ga = d.grad_a;
        ga.scale(l2);
        let mut gb = d.grad_b;
        gb.scale(l2);
        grad_geo_sub.push(ga);
        grad_glo_sub.push(gb);
    }
    Ok(MutualLoss {
        value,
        grad_geo_concat,
        grad_glo_concat,
        grad_geo_sub,
        grad_glo_sub,
    })
}

/// The mutual-learning loss with the configured coefficients.
pub fn mutual_learning_loss<T: Float>(
    geo: &BevFeatureSet<T>,
    glo: &BevFeatureSet<T>,
    lw: &LossWeights,
    kind: Distance,
) -> Result<MutualLoss<T>> {
    mutual_learning_terms(geo, glo, lw.lambda1, lw.lambda2, kind)
}

/// `L_s + alpha * L_u + beta * L_m`; any non-finite part aborts training.
pub fn total_loss(ls: f64, lu: f64, lm: f64, lw: &LossWeights) -> Result<f64> {
    for (name, v) in [("semantic", ls), ("uncertainty", lu), ("mutual", lm)] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("{name} loss is {v}")));
        }
    }
    Ok(ls + lw.alpha * lu + lw.beta * lm)
}

/// Inputs of the mutual-learning term after a scheme has been applied.
#[derive(Debug, Clone)]
pub struct SchemeInputs {
    pub geo: BevFeatureVars,
    pub glo: BevFeatureVars,
    /// Whether the whole-map term (`lambda1`) participates.
    pub whole_map: bool,
}

fn detach_set<T: Float>(g: &mut Graph<T>, set: &BevFeatureVars) -> Result<BevFeatureVars> {
    let sub: Vec<Var> = set.sub.iter().map(|&v| g.detach(v)).collect();
    let concatenated = g.concat(&sub, 1)?;
    Ok(BevFeatureVars { sub, concatenated })
}

/// Splits a `C x Z x W` score map into per-extent slices.
fn split_scores<T: Float>(g: &mut Graph<T>, scores: Var, extent_rows: &[usize]) -> Result<BevFeatureVars> {
    let mut sub = Vec::with_capacity(extent_rows.len());
    let mut lo = 0;
    for &rows in extent_rows {
        sub.push(g.narrow(scores, 1, lo, lo + rows)?);
        lo += rows;
    }
    Ok(BevFeatureVars {
        sub,
        concatenated: scores,
    })
}

/// Selects and gates the tensors that the mutual-learning term compares.
///
/// Returns `None` for [`Scheme::None`]. Single-branch forward passes only
/// accept [`Scheme::None`].
pub fn apply_scheme<T: Float>(
    g: &mut Graph<T>,
    scheme: Scheme,
    fwd: &ForwardVars,
    extent_rows: &[usize],
) -> Result<Option<SchemeInputs>> {
    if scheme == Scheme::None {
        return Ok(None);
    }
    if fwd.mode != Mode::Hybrid {
        bail!(
            Config,
            "scheme {} needs both branches, model runs {}",
            scheme.name(),
            fwd.mode.name()
        );
    }
    let (Some(geo), Some(glo)) = (&fwd.geo, &fwd.glo) else {
        bail!(Config, "scheme {} needs both branch outputs", scheme.name());
    };
    let inputs = match scheme {
        Scheme::None => unreachable!(),
        Scheme::Mutual => SchemeInputs {
            geo: geo.clone(),
            glo: glo.clone(),
            whole_map: true,
        },
        Scheme::CbftTeacher => SchemeInputs {
            geo: detach_set(g, geo)?,
            glo: glo.clone(),
            whole_map: true,
        },
        Scheme::CfftTeacher => SchemeInputs {
            geo: geo.clone(),
            glo: detach_set(g, glo)?,
            whole_map: true,
        },
        Scheme::SubfeatureSim => SchemeInputs {
            geo: geo.clone(),
            glo: glo.clone(),
            whole_map: false,
        },
        Scheme::OutputSim => {
            let (Some(a), Some(b)) = (fwd.geo_scores, fwd.glo_scores) else {
                bail!(Config, "output_sim needs both branch score maps");
            };
            SchemeInputs {
                geo: split_scores(g, a, extent_rows)?,
                glo: split_scores(g, b, extent_rows)?,
                whole_map: true,
            }
        }
    };
    Ok(Some(inputs))
}

/// Records the mutual-learning term for already-gated inputs.
pub fn mutual_loss_node<T: Float>(
    g: &mut Graph<T>,
    inputs: &SchemeInputs,
    lw: &LossWeights,
    kind: Distance,
) -> Result<Var> {
    let geo = inputs.geo.value(g);
    let glo = inputs.glo.value(g);
    let lambda1 = if inputs.whole_map { lw.lambda1 } else { 0.0 };
    let m = mutual_learning_terms(&geo, &glo, lambda1, lw.lambda2, kind)?;
    let mut vars = vec![inputs.geo.concatenated, inputs.glo.concatenated];
    let mut grads = vec![m.grad_geo_concat, m.grad_glo_concat];
    vars.extend(inputs.geo.sub.iter().copied());
    grads.extend(m.grad_geo_sub);
    vars.extend(inputs.glo.sub.iter().copied());
    grads.extend(m.grad_glo_sub);
    g.scalar_fn(&vars, m.value, grads)
}

/// Per-sample training targets.
pub struct Targets<'a, T> {
    /// `C x Z x W` binary labels.
    pub labels: &'a Tensor<T>,
    /// `Z x W` validity.
    pub validity: &'a [bool],
}

/// Scalar parts of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub semantic: f64,
    pub uncertainty: f64,
    pub mutual: f64,
    pub total: f64,
}

/// Records the complete objective for one forward pass.
///
/// The semantic term supervises every decoded head (the main head and, in
/// hybrid mode, both branch heads); the uncertainty term averages over the
/// branch score maps.
pub fn objective<T: Float>(
    g: &mut Graph<T>,
    fwd: &ForwardVars,
    targets: &Targets<'_, T>,
    lw: &LossWeights,
    scheme: &SchemeConfig,
    extent_rows: &[usize],
) -> Result<(Var, LossParts)> {
    let mut heads = vec![fwd.scores];
    if fwd.mode == Mode::Hybrid {
        heads.extend(fwd.geo_scores);
        heads.extend(fwd.glo_scores);
    }
    let mut sem_terms = Vec::new();
    let mut semantic = 0.0;
    for &h in &heads {
        let s = semantic_loss(g.value(h), targets.labels, Some(targets.validity), &lw.class_weights)?;
        semantic += s.value.as_f64();
        sem_terms.push((g.scalar_fn(&[h], s.value, vec![s.grad])?, T::one()));
    }

    let branch: Vec<Var> = fwd.geo_scores.iter().chain(&fwd.glo_scores).copied().collect();
    let mut unc_terms = Vec::new();
    let mut uncertainty = 0.0;
    let share = T::f(1.0 / branch.len() as f64);
    for &b in &branch {
        let (v, grad) = uncertainty_loss(g.value(b))?;
        uncertainty += v.as_f64() / branch.len() as f64;
        unc_terms.push((g.scalar_fn(&[b], v, vec![grad])?, share));
    }

    let mut terms = sem_terms;
    if !unc_terms.is_empty() {
        let u = g.weighted_sum(&unc_terms)?;
        terms.push((u, T::f(lw.alpha)));
    }
    let mut mutual = 0.0;
    if let Some(inputs) = apply_scheme(g, scheme.scheme, fwd, extent_rows)? {
        let m = mutual_loss_node(g, &inputs, lw, scheme.distance)?;
        mutual = g.value(m).data()[0].as_f64();
        terms.push((m, T::f(lw.beta)));
    }
    let total = total_loss(semantic, uncertainty, mutual, lw)?;
    let node = g.weighted_sum(&terms)?;
    Ok((
        node,
        LossParts {
            semantic,
            uncertainty,
            mutual,
            total,
        },
    ))
}
