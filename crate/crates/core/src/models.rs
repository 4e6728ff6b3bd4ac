//! Differentiable models with exact first- and second-order objects.
//!
//! Losses are *summed* over samples (not averaged) so that the loss on a
//! dataset splits exactly into the losses on any partition of it. Weight
//! decay `wd/2 * |w|^2` is added once, to whichever objective is being
//! minimized: the full-data loss or the retain loss, never the forget loss.

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalgx::{sym_eig, SymMatrix};

/// Whether the weight-decay term belongs to the objective being evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decay {
    Include,
    Exclude,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    /// `1/2 (w - w*)^T A (w - w*)`, independent of any data.
    Quadratic { a: SymMatrix, w_star: DVector<f64> },
    /// Linear softmax classifier with a bias per class. Two classes use a
    /// single sigmoid unit (`d + 1` parameters) so the problem is identifiable.
    Logistic { dim: usize, classes: usize },
    /// Fully connected tanh network with a linear softmax output layer.
    Mlp { dim: usize, hidden: Vec<usize>, classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub weight_decay: f64,
}

/// Model weights tagged with the architecture they parametrize.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub values: DVector<f64>,
    pub model_id: String,
}

impl WeightVector {
    pub fn new(spec: &ModelSpec, values: DVector<f64>) -> Result<Self> {
        spec.check_weights(&values)?;
        Ok(WeightVector {
            values,
            model_id: spec.model_id(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherForm {
    Diagonal,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FisherMatrix {
    Diagonal(DVector<f64>),
    Full(SymMatrix),
}

/// Fisher information `sum_x E_{y ~ p_w(y|x)}[g g^T]`, `g = grad log p_w(y|x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherEstimate {
    pub form: FisherMatrix,
    pub sample_count: usize,
    pub at_weights: DVector<f64>,
}

impl FisherEstimate {
    pub fn diagonal(&self) -> DVector<f64> {
        match &self.form {
            FisherMatrix::Diagonal(d) => d.clone(),
            FisherMatrix::Full(m) => m.diagonal(),
        }
    }
}

impl ModelSpec {
    pub fn quadratic(a: SymMatrix, w_star: DVector<f64>, weight_decay: f64) -> Result<Self> {
        let spec = ModelSpec {
            kind: ModelKind::Quadratic { a, w_star },
            weight_decay,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn logistic(dim: usize, classes: usize, weight_decay: f64) -> Result<Self> {
        let spec = ModelSpec {
            kind: ModelKind::Logistic { dim, classes },
            weight_decay,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mlp(dim: usize, hidden: Vec<usize>, classes: usize, weight_decay: f64) -> Result<Self> {
        let spec = ModelSpec {
            kind: ModelKind::Mlp { dim, hidden, classes },
            weight_decay,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidModel("weight_decay must be finite and >= 0".into()));
        }
        match &self.kind {
            ModelKind::Quadratic { a, w_star } => {
                if a.dim() != w_star.len() || a.dim() == 0 {
                    return Err(Error::InvalidModel("quadratic A and w* dimensions disagree".into()));
                }
                let eig = sym_eig(a)?;
                let scale = eig.values.amax().max(1.0);
                if eig.min_value() < -1e-10 * scale {
                    return Err(Error::InvalidModel("quadratic A must be positive semidefinite".into()));
                }
            }
            ModelKind::Logistic { dim, classes } => {
                if *dim == 0 || *classes < 2 {
                    return Err(Error::InvalidModel("logistic needs dim >= 1 and classes >= 2".into()));
                }
            }
            ModelKind::Mlp { dim, hidden, classes } => {
                if *dim == 0 || *classes < 2 {
                    return Err(Error::InvalidModel("mlp needs dim >= 1 and classes >= 2".into()));
                }
                if hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::InvalidModel("mlp hidden widths must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        match &self.kind {
            ModelKind::Quadratic { a, .. } => a.dim(),
            ModelKind::Logistic { dim, classes } => {
                if *classes == 2 {
                    dim + 1
                } else {
                    classes * (dim + 1)
                }
            }
            ModelKind::Mlp { .. } => self.layer_shapes().iter().map(|(i, o)| i * o + o).sum(),
        }
    }

    /// Number of output classes (0 for the quadratic model).
    pub fn classes(&self) -> usize {
        match &self.kind {
            ModelKind::Quadratic { .. } => 0,
            ModelKind::Logistic { classes, .. } | ModelKind::Mlp { classes, .. } => *classes,
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        match &self.kind {
            ModelKind::Quadratic { .. } => None,
            ModelKind::Logistic { dim, .. } | ModelKind::Mlp { dim, .. } => Some(*dim),
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self.kind, ModelKind::Quadratic { .. })
    }

    pub fn model_id(&self) -> String {
        match &self.kind {
            ModelKind::Quadratic { a, .. } => format!("quadratic(p={})", a.dim()),
            ModelKind::Logistic { dim, classes } => format!("logistic(d={dim},K={classes})"),
            ModelKind::Mlp { dim, hidden, classes } => {
                let h: Vec<String> = hidden.iter().map(|h| h.to_string()).collect();
                format!("mlp(d={dim},h={},K={classes})", h.join("x"))
            }
        }
    }

    fn kind_name(&self) -> &'static str {
        match self.kind {
            ModelKind::Quadratic { .. } => "quadratic",
            ModelKind::Logistic { .. } => "logistic",
            ModelKind::Mlp { .. } => "mlp",
        }
    }

    fn unsupported(&self, op: &'static str) -> Error {
        Error::UnsupportedModel {
            op,
            model: self.kind_name().into(),
        }
    }

    /// `(inputs, outputs)` of every dense layer of an MLP.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match &self.kind {
            ModelKind::Mlp { dim, hidden, classes } => {
                let mut widths = Vec::with_capacity(hidden.len() + 2);
                widths.push(*dim);
                widths.extend_from_slice(hidden);
                widths.push(*classes);
                widths.windows(2).map(|w| (w[0], w[1])).collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn check_weights(&self, w: &DVector<f64>) -> Result<()> {
        if w.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: w.len(),
            });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    fn check_data(&self, ds: &Dataset) -> Result<()> {
        match &self.kind {
            ModelKind::Quadratic { .. } => Ok(()),
            ModelKind::Logistic { dim, classes } | ModelKind::Mlp { dim, classes, .. } => {
                if ds.dim() != *dim {
                    return Err(Error::DimensionMismatch {
                        expected: *dim,
                        got: ds.dim(),
                    });
                }
                if ds.classes() > *classes {
                    return Err(Error::DimensionMismatch {
                        expected: *classes,
                        got: ds.classes(),
                    });
                }
                Ok(())
            }
        }
    }

    fn decay_loss(&self, w: &DVector<f64>, decay: Decay) -> f64 {
        match decay {
            Decay::Include => 0.5 * self.weight_decay * w.norm_squared(),
            Decay::Exclude => 0.0,
        }
    }

    // ---- full-objective evaluation -------------------------------------

    /// Summed loss over every sample of `ds`, plus weight decay.
    pub fn loss(&self, w: &DVector<f64>, ds: &Dataset) -> Result<f64> {
        self.loss_on(w, ds, &ds.all_indices(), Decay::Include)
    }

    pub fn grad(&self, w: &DVector<f64>, ds: &Dataset) -> Result<DVector<f64>> {
        self.grad_on(w, ds, &ds.all_indices(), Decay::Include)
    }

    pub fn hessian(&self, w: &DVector<f64>, ds: &Dataset) -> Result<SymMatrix> {
        self.hessian_on(w, ds, &ds.all_indices(), Decay::Include)
    }

    pub fn fim(&self, w: &DVector<f64>, ds: &Dataset, form: FisherForm) -> Result<FisherEstimate> {
        self.fim_on(w, ds, &ds.all_indices(), form)
    }

    /// Summed loss over the samples at `idx`.
    pub fn loss_on(&self, w: &DVector<f64>, ds: &Dataset, idx: &[usize], decay: Decay) -> Result<f64> {
        self.check_weights(w)?;
        self.check_data(ds)?;
        if let ModelKind::Quadratic { a, w_star } = &self.kind {
            let diff = w - w_star;
            return Ok(0.5 * diff.dot(&(a.as_matrix() * &diff)) + self.decay_loss(w, decay));
        }
        let mut total = 0.0;
        for &i in idx {
            let (x, y) = ds.sample(i);
            total += self.sample_loss(w, x, y);
        }
        Ok(total + self.decay_loss(w, decay))
    }

    pub fn grad_on(&self, w: &DVector<f64>, ds: &Dataset, idx: &[usize], decay: Decay) -> Result<DVector<f64>> {
        self.check_weights(w)?;
        self.check_data(ds)?;
        let mut g = match &self.kind {
            ModelKind::Quadratic { a, w_star } => a.as_matrix() * (w - w_star),
            _ => {
                let mut g = DVector::zeros(w.len());
                for &i in idx {
                    let (x, y) = ds.sample(i);
                    self.sample_loss_grad(w, x, y, 1.0, g.as_mut_slice());
                }
                g
            }
        };
        if decay == Decay::Include {
            g.axpy(self.weight_decay, w, 1.0);
        }
        Ok(g)
    }

    /// Exact Hessian; available for the quadratic and logistic models.
    pub fn hessian_on(&self, w: &DVector<f64>, ds: &Dataset, idx: &[usize], decay: Decay) -> Result<SymMatrix> {
        self.check_weights(w)?;
        self.check_data(ds)?;
        let p = w.len();
        let mut h = match &self.kind {
            ModelKind::Quadratic { a, .. } => a.as_matrix().clone(),
            ModelKind::Logistic { dim, classes } => {
                let mut h = DMatrix::zeros(p, p);
                for &i in idx {
                    let (x, _) = ds.sample(i);
                    let xt = augmented(x);
                    let outer = &xt * xt.transpose();
                    let probs = softmax(&self.logistic_logits(w, x, *dim, *classes));
                    if *classes == 2 {
                        h += outer * (probs[1] * probs[0]);
                    } else {
                        let b = dim + 1;
                        for k in 0..*classes {
                            for l in 0..*classes {
                                let c = if k == l {
                                    probs[k] * (1.0 - probs[k])
                                } else {
                                    -probs[k] * probs[l]
                                };
                                let mut block = h.view_mut((k * b, l * b), (b, b));
                                block += &outer * c;
                            }
                        }
                    }
                }
                h
            }
            ModelKind::Mlp { .. } => return Err(self.unsupported("hessian")),
        };
        if decay == Decay::Include {
            for i in 0..p {
                h[(i, i)] += self.weight_decay;
            }
        }
        SymMatrix::symmetrize(h)
    }

    /// Fisher information on the samples at `idx`. The expectation over
    /// labels is exact: all classes weighted by the model's own probabilities.
    pub fn fim_on(&self, w: &DVector<f64>, ds: &Dataset, idx: &[usize], form: FisherForm) -> Result<FisherEstimate> {
        if !self.is_classifier() {
            return Err(self.unsupported("fim"));
        }
        self.check_weights(w)?;
        self.check_data(ds)?;
        let p = w.len();
        let k = self.classes();
        let mut diag = DVector::zeros(p);
        let mut full = match form {
            FisherForm::Full => Some(DMatrix::zeros(p, p)),
            FisherForm::Diagonal => None,
        };
        let mut score = DVector::zeros(p);
        for &i in idx {
            let (x, _) = ds.sample(i);
            let jac = self.logit_jacobian(w, x);
            let probs = softmax(&self.logits(w, x));
            // grad log p(y|x) = J^T (e_y - p)
            let jt_p = jac.tr_mul(&probs);
            for y in 0..k {
                if probs[y] == 0.0 {
                    continue;
                }
                score.copy_from(&jac.row(y).transpose());
                score -= &jt_p;
                for j in 0..p {
                    diag[j] += probs[y] * score[j] * score[j];
                }
                if let Some(f) = full.as_mut() {
                    f.ger(probs[y], &score, &score, 1.0);
                }
            }
        }
        let form = match full {
            Some(f) => FisherMatrix::Full(SymMatrix::symmetrize(f)?),
            None => FisherMatrix::Diagonal(diag),
        };
        Ok(FisherEstimate {
            form,
            sample_count: idx.len(),
            at_weights: w.clone(),
        })
    }

    // ---- per-sample kernels --------------------------------------------

    pub fn logits(&self, w: &DVector<f64>, x: DVectorView<'_, f64>) -> DVector<f64> {
        match &self.kind {
            ModelKind::Quadratic { .. } => DVector::zeros(0),
            ModelKind::Logistic { dim, classes } => self.logistic_logits(w, x, *dim, *classes),
            ModelKind::Mlp { .. } => self.mlp_forward(w, x).pop().unwrap_or_else(|| DVector::zeros(0)),
        }
    }

    fn logistic_logits(&self, w: &DVector<f64>, x: DVectorView<'_, f64>, dim: usize, classes: usize) -> DVector<f64> {
        let b = dim + 1;
        let affine = |block: usize| -> f64 {
            let row = w.rows(block * b, b);
            row.rows(0, dim).dot(&x) + row[dim]
        };
        if classes == 2 {
            DVector::from_vec(vec![0.0, affine(0)])
        } else {
            DVector::from_iterator(classes, (0..classes).map(affine))
        }
    }

    /// Activations of every layer, input first, logits last.
    fn mlp_forward(&self, w: &DVector<f64>, x: DVectorView<'_, f64>) -> Vec<DVector<f64>> {
        let shapes = self.layer_shapes();
        let mut acts = Vec::with_capacity(shapes.len() + 1);
        acts.push(x.into_owned());
        let mut offset = 0;
        for (layer, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let weights = w.as_slice();
            let input = &acts[layer];
            let mut out = DVector::zeros(fan_out);
            for o in 0..fan_out {
                let row = &weights[offset + o * fan_in..offset + (o + 1) * fan_in];
                let bias = weights[offset + fan_in * fan_out + o];
                out[o] = row.iter().zip(input.iter()).map(|(a, b)| a * b).sum::<f64>() + bias;
            }
            if layer + 1 < shapes.len() {
                out.apply(|v| *v = v.tanh());
            }
            offset += fan_in * fan_out + fan_out;
            acts.push(out);
        }
        acts
    }

    /// Accumulates `scale * dlogits^T upstream` into `out` for an MLP.
    fn mlp_backward(&self, w: &DVector<f64>, acts: &[DVector<f64>], upstream: &DVector<f64>, scale: f64, out: &mut [f64]) {
        let shapes = self.layer_shapes();
        let weights = w.as_slice();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for &(i, o) in &shapes {
            offsets.push(off);
            off += i * o + o;
        }
        let mut delta = upstream.clone();
        for layer in (0..shapes.len()).rev() {
            let (fan_in, fan_out) = shapes[layer];
            let base = offsets[layer];
            let input = &acts[layer];
            for o in 0..fan_out {
                let d = delta[o] * scale;
                if d != 0.0 {
                    let row = &mut out[base + o * fan_in..base + (o + 1) * fan_in];
                    for (g, xi) in row.iter_mut().zip(input.iter()) {
                        *g += d * xi;
                    }
                    out[base + fan_in * fan_out + o] += d;
                }
            }
            if layer > 0 {
                let mut next = DVector::zeros(fan_in);
                for o in 0..fan_out {
                    let row = &weights[base + o * fan_in..base + (o + 1) * fan_in];
                    for (n, wv) in next.iter_mut().zip(row.iter()) {
                        *n += wv * delta[o];
                    }
                }
                for (n, a) in next.iter_mut().zip(input.iter()) {
                    *n *= 1.0 - a * a;
                }
                delta = next;
            }
        }
    }

    /// `K x p` Jacobian of the logits with respect to the weights.
    pub fn logit_jacobian(&self, w: &DVector<f64>, x: DVectorView<'_, f64>) -> DMatrix<f64> {
        let p = w.len();
        match &self.kind {
            ModelKind::Quadratic { .. } => DMatrix::zeros(0, p),
            ModelKind::Logistic { dim, classes } => {
                let b = dim + 1;
                let xt = augmented(x);
                let mut j = DMatrix::zeros(*classes, p);
                if *classes == 2 {
                    j.view_mut((1, 0), (1, b)).copy_from(&xt.transpose());
                } else {
                    for k in 0..*classes {
                        j.view_mut((k, k * b), (1, b)).copy_from(&xt.transpose());
                    }
                }
                j
            }
            ModelKind::Mlp { classes, .. } => {
                let acts = self.mlp_forward(w, x);
                let mut j = DMatrix::zeros(*classes, p);
                let mut row = vec![0.0; p];
                for k in 0..*classes {
                    row.iter_mut().for_each(|v| *v = 0.0);
                    let mut unit = DVector::zeros(*classes);
                    unit[k] = 1.0;
                    self.mlp_backward(w, &acts, &unit, 1.0, &mut row);
                    for (c, v) in row.iter().enumerate() {
                        j[(k, c)] = *v;
                    }
                }
                j
            }
        }
    }

    /// Cross-entropy of one sample.
    pub fn sample_loss(&self, w: &DVector<f64>, x: DVectorView<'_, f64>, y: usize) -> f64 {
        let z = self.logits(w, x);
        log_sum_exp(&z) - z[y]
    }

    /// Adds `scale * grad(cross-entropy)` of one sample into `out` and
    /// returns the sample's loss.
    pub fn sample_loss_grad(&self, w: &DVector<f64>, x: DVectorView<'_, f64>, y: usize, scale: f64, out: &mut [f64]) -> f64 {
        match &self.kind {
            ModelKind::Quadratic { .. } => 0.0,
            ModelKind::Logistic { dim, classes } => {
                let z = self.logistic_logits(w, x, *dim, *classes);
                let loss = log_sum_exp(&z) - z[y];
                let probs = softmax(&z);
                let b = dim + 1;
                let mut accumulate = |block: usize, coeff: f64| {
                    let c = coeff * scale;
                    for j in 0..*dim {
                        out[block * b + j] += c * x[j];
                    }
                    out[block * b + dim] += c;
                };
                if *classes == 2 {
                    accumulate(0, probs[1] - if y == 1 { 1.0 } else { 0.0 });
                } else {
                    for k in 0..*classes {
                        accumulate(k, probs[k] - if y == k { 1.0 } else { 0.0 });
                    }
                }
                loss
            }
            ModelKind::Mlp { .. } => {
                let acts = self.mlp_forward(w, x);
                let z = acts.last().expect("mlp has an output layer");
                let loss = log_sum_exp(z) - z[y];
                let mut upstream = softmax(z);
                upstream[y] -= 1.0;
                self.mlp_backward(w, &acts, &upstream, scale, out);
                loss
            }
        }
    }

    // ---- predictions -----------------------------------------------------

    pub fn predict_logits(&self, w: &DVector<f64>, x: &[f64]) -> Result<DVector<f64>> {
        self.check_weights(w)?;
        if !self.is_classifier() {
            return Err(self.unsupported("predict_logits"));
        }
        if Some(x.len()) != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim().unwrap_or(0),
                got: x.len(),
            });
        }
        let xv = DVector::from_column_slice(x);
        Ok(self.logits(w, xv.column(0)))
    }

    /// Class probabilities; a hidden class gets probability exactly 0.
    pub fn predict_proba(&self, w: &DVector<f64>, x: DVectorView<'_, f64>, hidden: Option<usize>) -> DVector<f64> {
        let mut z = self.logits(w, x);
        if let Some(k) = hidden {
            if k < z.len() {
                z[k] = f64::NEG_INFINITY;
            }
        }
        softmax(&z)
    }

    pub fn predict_class(&self, w: &DVector<f64>, x: DVectorView<'_, f64>, hidden: Option<usize>) -> usize {
        argmax(&self.predict_proba(w, x, hidden))
    }

    pub fn output_entropy(&self, w: &DVector<f64>, x: &[f64]) -> Result<f64> {
        Ok(entropy(&softmax(&self.predict_logits(w, x)?)))
    }

    /// Percentage of misclassified samples among `idx` (0 for an empty set).
    pub fn error_rate(&self, w: &DVector<f64>, ds: &Dataset, idx: &[usize], hidden: Option<usize>) -> Result<f64> {
        self.check_weights(w)?;
        self.check_data(ds)?;
        if !self.is_classifier() {
            return Err(self.unsupported("error_rate"));
        }
        if idx.is_empty() {
            return Ok(0.0);
        }
        let wrong = idx
            .iter()
            .filter(|&&i| {
                let (x, y) = ds.sample(i);
                self.predict_class(w, x, hidden) != y
            })
            .count();
        Ok(100.0 * wrong as f64 / idx.len() as f64)
    }
}

fn augmented(x: DVectorView<'_, f64>) -> DVector<f64> {
    let mut v = DVector::zeros(x.len() + 1);
    v.rows_mut(0, x.len()).copy_from(&x);
    v[x.len()] = 1.0;
    v
}

pub fn log_sum_exp(z: &DVector<f64>) -> f64 {
    let m = z.max();
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let m = z.max();
    let e = z.map(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

/// `-sum p ln p`, with `0 ln 0 = 0`.
pub fn entropy(p: &DVector<f64>) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn argmax(p: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_clusters, make_split, ClusterSpec, SplitRule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn three_class() -> Dataset {
        gen_clusters(
            &[
                ClusterSpec {
                    mean: vec![-1.0, 0.0],
                    stddev: 0.7,
                    count: 8,
                    label: 0,
                },
                ClusterSpec {
                    mean: vec![1.0, 0.5],
                    stddev: 0.7,
                    count: 8,
                    label: 1,
                },
                ClusterSpec {
                    mean: vec![0.0, -1.0],
                    stddev: 0.7,
                    count: 8,
                    label: 2,
                },
            ],
            3,
        )
        .unwrap()
    }

    fn random_w(p: usize, seed: u64, scale: f64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(p, |_, _| rng.random_range(-scale..scale))
    }

    fn fd_grad(spec: &ModelSpec, w: &DVector<f64>, ds: &Dataset) -> DVector<f64> {
        let h = 1e-5;
        DVector::from_fn(w.len(), |i, _| {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] -= h;
            (spec.loss(&wp, ds).unwrap() - spec.loss(&wm, ds).unwrap()) / (2.0 * h)
        })
    }

    #[test]
    fn quadratic_minimum() {
        let a = SymMatrix::from_diagonal(&[2.0, 1.0]).unwrap();
        let w_star = DVector::from_vec(vec![0.3, -1.0]);
        let spec = ModelSpec::quadratic(a, w_star.clone(), 0.0).unwrap();
        let ds = three_class();
        assert_eq!(spec.loss(&w_star, &ds).unwrap(), 0.0);
        assert_eq!(spec.grad(&w_star, &ds).unwrap().amax(), 0.0);
    }

    #[test]
    fn quadratic_hessian_is_constant() {
        let a = SymMatrix::from_diagonal(&[2.0, 1.0]).unwrap();
        let spec = ModelSpec::quadratic(a.clone(), DVector::zeros(2), 0.1).unwrap();
        let ds = three_class();
        let h = spec.hessian(&DVector::from_vec(vec![4.0, -2.0]), &ds).unwrap();
        assert_eq!(h, a.shift(0.1));
    }

    #[test]
    fn logistic_uniform_predictor_loss() {
        let ds = gen_clusters(
            &[
                ClusterSpec {
                    mean: vec![0.0, 0.0],
                    stddev: 1.0,
                    count: 5,
                    label: 0,
                },
                ClusterSpec {
                    mean: vec![1.0, 1.0],
                    stddev: 1.0,
                    count: 5,
                    label: 1,
                },
            ],
            0,
        )
        .unwrap();
        let spec = ModelSpec::logistic(2, 2, 0.0).unwrap();
        let loss = spec.loss(&DVector::zeros(3), &ds).unwrap();
        assert!((loss - 10.0 * 2f64.ln()).abs() < 1e-12);
        let spec3 = ModelSpec::logistic(2, 3, 0.0).unwrap();
        let loss3 = spec3.loss(&DVector::zeros(9), &three_class()).unwrap();
        assert!((loss3 - 24.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn logistic_single_sample_hessian() {
        let ds = Dataset::new(DMatrix::from_row_slice(1, 2, &[0.7, -1.3]), vec![1], 2, "one").unwrap();
        let spec = ModelSpec::logistic(2, 2, 0.05).unwrap();
        let w = DVector::from_vec(vec![0.4, 0.2, -0.1]);
        let z: f64 = 0.4 * 0.7 + 0.2 * -1.3 - 0.1;
        let q = 1.0 / (1.0 + (-z).exp());
        let xt = DVector::from_vec(vec![0.7, -1.3, 1.0]);
        let expected = &xt * xt.transpose() * (q * (1.0 - q)) + DMatrix::identity(3, 3) * 0.05;
        let h = spec.hessian(&w, &ds).unwrap();
        assert!((h.as_matrix() - expected).amax() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let ds = three_class();
        let specs = [
            ModelSpec::logistic(2, 3, 0.01).unwrap(),
            ModelSpec::logistic(2, 2, 0.01).unwrap(),
            ModelSpec::mlp(2, vec![5], 3, 0.01).unwrap(),
            ModelSpec::mlp(2, vec![4, 3], 3, 0.0).unwrap(),
        ];
        for (s, spec) in specs.iter().enumerate() {
            let ds = if spec.classes() == 2 {
                let labels = ds.labels().iter().map(|&l| l.min(1)).collect();
                Dataset::new(ds.features().clone(), labels, 2, "bin").unwrap()
            } else {
                ds.clone()
            };
            let w = random_w(spec.param_count(), s as u64, 0.8);
            let g = spec.grad(&w, &ds).unwrap();
            let fd = fd_grad(spec, &w, &ds);
            let rel = (&g - &fd).amax() / fd.amax().max(1e-8);
            assert!(rel < 1e-6, "{} rel {rel}", spec.model_id());
        }
    }

    #[test]
    fn mlp_hessian_unsupported_and_quadratic_fim_unsupported() {
        let ds = three_class();
        let mlp = ModelSpec::mlp(2, vec![3], 3, 0.0).unwrap();
        let w = DVector::zeros(mlp.param_count());
        assert!(matches!(mlp.hessian(&w, &ds), Err(Error::UnsupportedModel { .. })));
        let q = ModelSpec::quadratic(SymMatrix::identity(2), DVector::zeros(2), 0.0).unwrap();
        assert!(matches!(
            q.fim(&DVector::zeros(2), &ds, FisherForm::Full),
            Err(Error::UnsupportedModel { .. })
        ));
    }

    #[test]
    fn fim_diagonal_matches_full_and_is_psd() {
        let ds = three_class();
        let spec = ModelSpec::mlp(2, vec![6], 3, 0.0).unwrap();
        let w = random_w(spec.param_count(), 5, 1.0);
        let diag = spec.fim(&w, &ds, FisherForm::Diagonal).unwrap().diagonal();
        let full = spec.fim(&w, &ds, FisherForm::Full).unwrap();
        assert!((&diag - full.diagonal()).amax() < 1e-8);
        assert!(diag.iter().all(|&v| v >= 0.0));
        let FisherMatrix::Full(m) = &full.form else { unreachable!() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let v = DVector::from_fn(m.dim(), |_, _| rng.random_range(-1.0..1.0));
            assert!(v.dot(&(m.as_matrix() * &v)) >= -1e-10);
        }
    }

    #[test]
    fn loss_is_additive_over_split() {
        let ds = three_class();
        let spec = ModelSpec::mlp(2, vec![4], 3, 0.3).unwrap();
        let w = random_w(spec.param_count(), 2, 1.0);
        let split = make_split(&ds, SplitRule::WholeClass { class: 2 }).unwrap();
        let full = spec.loss(&w, &ds).unwrap();
        let f = spec.loss_on(&w, &ds, split.forget_indices(), Decay::Exclude).unwrap();
        let r = spec.loss_on(&w, &ds, split.retain_indices(), Decay::Include).unwrap();
        assert!((full - f - r).abs() < 1e-12 * full.abs().max(1.0));
    }

    #[test]
    fn entropy_edge_cases() {
        let spec = ModelSpec::logistic(2, 3, 0.0).unwrap();
        let w = DVector::zeros(9);
        assert!((spec.output_entropy(&w, &[0.3, 0.1]).unwrap() - 3f64.ln()).abs() < 1e-14);
        let mut w = DVector::zeros(9);
        w[2] = 1000.0; // bias of class 0
        assert!(spec.output_entropy(&w, &[0.3, 0.1]).unwrap() < 1e-12);
    }

    #[test]
    fn entropy_matches_direct_sum() {
        let spec = ModelSpec::mlp(2, vec![5], 3, 0.0).unwrap();
        let w = random_w(spec.param_count(), 8, 1.5);
        let x = [0.4, -0.9];
        let z = spec.predict_logits(&w, &x).unwrap();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let direct: f64 = z
            .iter()
            .map(|v| {
                let p = v.exp() / denom;
                -p * p.ln()
            })
            .sum();
        assert!((spec.output_entropy(&w, &x).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn hidden_class_gets_zero_probability() {
        let spec = ModelSpec::logistic(2, 3, 0.0).unwrap();
        let w = random_w(9, 4, 1.0);
        let x = DVector::from_vec(vec![0.2, 0.3]);
        let p = spec.predict_proba(&w, x.column(0), Some(1));
        assert_eq!(p[1], 0.0);
        assert!((p.sum() - 1.0).abs() < 1e-15);
    }
}
