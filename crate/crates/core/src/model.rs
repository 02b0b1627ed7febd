//! Small classifiers with closed-form gradients.
//!
//! Two architectures: a softmax-linear model (`W: d x C`, `b: C`) and a
//! one-hidden-layer ReLU MLP (`W1: d x h`, `b1: h`, `W2: h x C`, `b2: C`).
//! The loss is cross-entropy, optionally weighted per example with
//! self-normalized weights `sum(l_i w_i) / sum(w_i)`, plus `(lambda / 2) ||W||^2`
//! over weight matrices only.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, IndexSet};
use crate::error::{FedError, Result};
use crate::rng::{stream, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "softmax-linear")]
    SoftmaxLinear,
    #[serde(rename = "mlp-1hidden")]
    Mlp1Hidden,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Ignored for softmax-linear.
    #[serde(default)]
    pub hidden_dim: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_init_scale() -> f64 {
    0.01
}

impl ModelSpec {
    pub fn softmax_linear(feature_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::SoftmaxLinear,
            feature_dim,
            num_classes,
            hidden_dim: 0,
            weight_decay: 0.0,
            init_scale: default_init_scale(),
            init_seed: 0,
        }
    }

    pub fn mlp(feature_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp1Hidden,
            hidden_dim,
            ..ModelSpec::softmax_linear(feature_dim, num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.num_classes == 0 {
            return Err(FedError::param("model dimensions must be positive"));
        }
        if self.kind == ModelKind::Mlp1Hidden && self.hidden_dim == 0 {
            return Err(FedError::param("mlp-1hidden needs hidden_dim >= 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(FedError::param("weight_decay must be a non-negative real"));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(FedError::param("init_scale must be positive"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let (d, c, h) = (self.feature_dim, self.num_classes, self.hidden_dim);
        let t = |name: &str, shape: Vec<usize>, decayed| TensorShape {
            name: name.to_string(),
            shape,
            decayed,
        };
        Layout(match self.kind {
            ModelKind::SoftmaxLinear => vec![t("W", vec![d, c], true), t("b", vec![c], false)],
            ModelKind::Mlp1Hidden => vec![
                t("W1", vec![d, h], true),
                t("b1", vec![h], false),
                t("W2", vec![h, c], true),
                t("b2", vec![c], false),
            ],
        })
    }

    /// Seeded uniform(-init_scale, init_scale) weights, zero biases.
    pub fn init(&self) -> Result<ModelParams> {
        self.validate()?;
        let layout = self.layout();
        let mut rng = stream(self.init_seed, Purpose::ModelInit, 0, 0);
        let mut flat = Vec::with_capacity(layout.num_params());
        for t in &layout.0 {
            for _ in 0..t.len() {
                flat.push(if t.decayed {
                    rng.random_range(-self.init_scale..self.init_scale)
                } else {
                    0.0
                });
            }
        }
        Ok(ModelParams { flat, layout })
    }

    fn check_compatible(&self, params: &ModelParams, dataset: &Dataset) -> Result<()> {
        if params.layout != self.layout() {
            return Err(FedError::param(
                "parameter layout does not match the model spec",
            ));
        }
        if dataset.dim() != self.feature_dim || dataset.num_classes() != self.num_classes {
            return Err(FedError::param(format!(
                "dataset is {}-dim with {} classes, model expects {}-dim with {}",
                dataset.dim(),
                dataset.num_classes(),
                self.feature_dim,
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Cross-entropy per example plus the batch objective.
    pub fn forward_loss(
        &self,
        params: &ModelParams,
        dataset: &Dataset,
        batch: &Batch,
    ) -> Result<LossOutput> {
        Ok(self.pass(params, dataset, batch, false)?.0)
    }

    /// Analytic gradient of [`ModelSpec::forward_loss`]'s scalar objective.
    pub fn gradient(
        &self,
        params: &ModelParams,
        dataset: &Dataset,
        batch: &Batch,
    ) -> Result<Gradient> {
        Ok(self.loss_and_gradient(params, dataset, batch)?.1)
    }

    pub fn loss_and_gradient(
        &self,
        params: &ModelParams,
        dataset: &Dataset,
        batch: &Batch,
    ) -> Result<(LossOutput, Gradient)> {
        let (loss, grad) = self.pass(params, dataset, batch, true)?;
        Ok((loss, Gradient(grad.expect("gradient requested"))))
    }

    fn pass(
        &self,
        params: &ModelParams,
        dataset: &Dataset,
        batch: &Batch,
        want_grad: bool,
    ) -> Result<(LossOutput, Option<Vec<f64>>)> {
        self.check_compatible(params, dataset)?;
        batch.validate_for(dataset)?;
        let (d, c, h) = (self.feature_dim, self.num_classes, self.hidden_dim);
        let theta = &params.flat;
        let mut grad = want_grad.then(|| vec![0.0; theta.len()]);

        let total_weight: f64 = match &batch.weights {
            Some(w) => w.iter().sum(),
            None => batch.indices.len() as f64,
        };

        let mut logits = vec![0.0; c];
        let mut dz = vec![0.0; c];
        let mut pre = vec![0.0; h];
        let mut act = vec![0.0; h];
        let mut dact = vec![0.0; h];
        let mut per_example = Vec::with_capacity(batch.indices.len());
        let mut weighted_sum = 0.0;

        for (pos, &i) in batch.indices.iter().enumerate() {
            let x = dataset.row(i);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(FedError::numeric(format!(
                    "example {i} has a non-finite feature"
                )));
            }
            let y = dataset.label(i);

            match self.kind {
                ModelKind::SoftmaxLinear => {
                    let (w, b) = theta.split_at(d * c);
                    logits.copy_from_slice(b);
                    affine_accumulate(x, w, c, &mut logits);
                }
                ModelKind::Mlp1Hidden => {
                    let (w1, rest) = theta.split_at(d * h);
                    let (b1, rest) = rest.split_at(h);
                    let (w2, b2) = rest.split_at(h * c);
                    pre.copy_from_slice(b1);
                    affine_accumulate(x, w1, h, &mut pre);
                    for (a, &z) in act.iter_mut().zip(&pre) {
                        *a = z.max(0.0);
                    }
                    logits.copy_from_slice(b2);
                    affine_accumulate(&act, w2, c, &mut logits);
                }
            }

            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let loss_i = lse - logits[y];
            if !loss_i.is_finite() {
                return Err(FedError::numeric(format!("non-finite loss on example {i}")));
            }
            per_example.push(loss_i);
            let w_i = batch.weight(pos);
            weighted_sum += loss_i * w_i;

            if let Some(g) = grad.as_mut() {
                let coef = w_i / total_weight;
                for (k, dzk) in dz.iter_mut().enumerate() {
                    let p = (logits[k] - lse).exp();
                    *dzk = coef * (p - if k == y { 1.0 } else { 0.0 });
                }
                match self.kind {
                    ModelKind::SoftmaxLinear => {
                        let (gw, gb) = g.split_at_mut(d * c);
                        outer_accumulate(x, &dz, gw);
                        add_assign(gb, &dz);
                    }
                    ModelKind::Mlp1Hidden => {
                        let w2 = &theta[d * h + h..d * h + h + h * c];
                        let (gw1, rest) = g.split_at_mut(d * h);
                        let (gb1, rest) = rest.split_at_mut(h);
                        let (gw2, gb2) = rest.split_at_mut(h * c);
                        outer_accumulate(&act, &dz, gw2);
                        add_assign(gb2, &dz);
                        for (hh, da) in dact.iter_mut().enumerate() {
                            let row = &w2[hh * c..(hh + 1) * c];
                            let back: f64 = row.iter().zip(&dz).map(|(w, g)| w * g).sum();
                            *da = if pre[hh] > 0.0 { back } else { 0.0 };
                        }
                        outer_accumulate(x, &dact, gw1);
                        add_assign(gb1, &dact);
                    }
                }
            }
        }

        let mut loss = weighted_sum / total_weight;
        if self.weight_decay > 0.0 {
            let mut offset = 0;
            let mut sq = 0.0;
            for t in &params.layout.0 {
                let n = t.len();
                if t.decayed {
                    let block = &theta[offset..offset + n];
                    sq += block.iter().map(|v| v * v).sum::<f64>();
                    if let Some(g) = grad.as_mut() {
                        for (gv, &v) in g[offset..offset + n].iter_mut().zip(block) {
                            *gv += self.weight_decay * v;
                        }
                    }
                }
                offset += n;
            }
            loss += 0.5 * self.weight_decay * sq;
        }
        if !loss.is_finite() {
            return Err(FedError::numeric("non-finite batch loss"));
        }
        Ok((LossOutput { loss, per_example }, grad))
    }

    /// Sign pattern of hidden pre-activations over the batch (empty for the
    /// linear model). Used to detect ReLU kinks during finite differencing.
    fn activation_pattern(
        &self,
        params: &ModelParams,
        dataset: &Dataset,
        batch: &Batch,
    ) -> Vec<bool> {
        if self.kind != ModelKind::Mlp1Hidden {
            return Vec::new();
        }
        let (d, h) = (self.feature_dim, self.hidden_dim);
        let (w1, rest) = params.flat.split_at(d * h);
        let b1 = &rest[..h];
        let mut pattern = Vec::with_capacity(batch.indices.len() * h);
        let mut pre = vec![0.0; h];
        for &i in &batch.indices {
            pre.copy_from_slice(b1);
            affine_accumulate(dataset.row(i), w1, h, &mut pre);
            pattern.extend(pre.iter().map(|&z| z > 0.0));
        }
        pattern
    }

    /// Central finite differences against the analytic gradient.
    ///
    /// Returns `max_j |fd_j - g_j| / max(1, |g_j|)`. For the MLP, coordinates
    /// whose `+-epsilon` perturbation flips any ReLU are skipped.
    pub fn fd_check(
        &self,
        params: &ModelParams,
        dataset: &Dataset,
        batch: &Batch,
        epsilon: f64,
    ) -> Result<f64> {
        if !(epsilon > 1e-8 && epsilon < 1e-3) {
            return Err(FedError::param(format!(
                "epsilon {epsilon} outside (1e-8, 1e-3)"
            )));
        }
        let analytic = self.gradient(params, dataset, batch)?;
        let mut probe = params.clone();
        let mut worst: f64 = 0.0;
        for j in 0..params.flat.len() {
            let orig = params.flat[j];
            probe.flat[j] = orig + epsilon;
            let plus = self.forward_loss(&probe, dataset, batch)?.loss;
            let plus_pattern = self.activation_pattern(&probe, dataset, batch);
            probe.flat[j] = orig - epsilon;
            let minus = self.forward_loss(&probe, dataset, batch)?.loss;
            let minus_pattern = self.activation_pattern(&probe, dataset, batch);
            probe.flat[j] = orig;
            if plus_pattern != minus_pattern {
                continue;
            }
            let fd = (plus - minus) / (2.0 * epsilon);
            let g = analytic.0[j];
            worst = worst.max((fd - g).abs() / g.abs().max(1.0));
        }
        Ok(worst)
    }

    /// Fraction of examples whose argmax logit equals the label; ties go to
    /// the lowest class index. `subset = None` evaluates the whole dataset.
    pub fn evaluate(
        &self,
        params: &ModelParams,
        dataset: &Dataset,
        subset: Option<&IndexSet>,
    ) -> Result<f64> {
        self.check_compatible(params, dataset)?;
        let all;
        let subset = match subset {
            Some(s) => {
                s.validate_for(dataset)?;
                s
            }
            None => {
                all = IndexSet::all(dataset.len());
                &all
            }
        };
        if subset.is_empty() {
            return Err(FedError::param("cannot evaluate on an empty subset"));
        }
        let (d, c, h) = (self.feature_dim, self.num_classes, self.hidden_dim);
        let theta = &params.flat;
        let mut logits = vec![0.0; c];
        let mut act = vec![0.0; h];
        let mut correct = 0usize;
        for i in subset.iter() {
            let x = dataset.row(i);
            match self.kind {
                ModelKind::SoftmaxLinear => {
                    let (w, b) = theta.split_at(d * c);
                    logits.copy_from_slice(b);
                    affine_accumulate(x, w, c, &mut logits);
                }
                ModelKind::Mlp1Hidden => {
                    let (w1, rest) = theta.split_at(d * h);
                    let (b1, rest) = rest.split_at(h);
                    let (w2, b2) = rest.split_at(h * c);
                    act.copy_from_slice(b1);
                    affine_accumulate(x, w1, h, &mut act);
                    for a in act.iter_mut() {
                        *a = a.max(0.0);
                    }
                    logits.copy_from_slice(b2);
                    affine_accumulate(&act, w2, c, &mut logits);
                }
            }
            if argmax(&logits) == dataset.label(i) {
                correct += 1;
            }
        }
        Ok(correct as f64 / subset.len() as f64)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// `out[c] += sum_j x[j] * w[j * cols + c]` for a row-major `w`.
fn affine_accumulate(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    for (j, &xj) in x.iter().enumerate() {
        let row = &w[j * cols..(j + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xj * wv;
        }
    }
}

/// `g[j * cols + c] += x[j] * dz[c]`
fn outer_accumulate(x: &[f64], dz: &[f64], g: &mut [f64]) {
    let cols = dz.len();
    for (j, &xj) in x.iter().enumerate() {
        for (gv, &d) in g[j * cols..(j + 1) * cols].iter_mut().zip(dz) {
            *gv += xj * d;
        }
    }
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub shape: Vec<usize>,
    /// Whether weight decay applies (weights yes, biases no).
    pub decayed: bool,
}

impl TensorShape {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How a flat parameter vector splits into named tensors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout(pub Vec<TensorShape>);

impl Layout {
    pub fn num_params(&self) -> usize {
        self.0.iter().map(TensorShape::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    flat: Vec<f64>,
    layout: Layout,
}

impl ModelParams {
    pub fn from_flat(flat: Vec<f64>, layout: Layout) -> Result<Self> {
        if flat.len() != layout.num_params() {
            return Err(FedError::param(format!(
                "{} values for a layout of {} parameters",
                flat.len(),
                layout.num_params()
            )));
        }
        Ok(ModelParams { flat, layout })
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// `self - scale * direction`
    pub fn step(&self, direction: &[f64], scale: f64) -> Result<ModelParams> {
        if direction.len() != self.flat.len() {
            return Err(FedError::param(format!(
                "update of length {} for {} parameters",
                direction.len(),
                self.flat.len()
            )));
        }
        Ok(ModelParams {
            flat: self
                .flat
                .iter()
                .zip(direction)
                .map(|(p, g)| p - scale * g)
                .collect(),
            layout: self.layout.clone(),
        })
    }

    /// Text format: a version line, one `layout,<name>,<dims>` line per tensor,
    /// a `values` marker, then one value per line in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::from("fedsim-params,1\n");
        for t in &self.layout.0 {
            let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "layout,{},{}", t.name, dims.join("x"));
        }
        s.push_str("values\n");
        for v in &self.flat {
            let _ = writeln!(s, "{v:?}");
        }
        s
    }

    /// Parses [`ModelParams::to_text`] output and checks it against `spec`.
    pub fn from_text(text: &str, spec: &ModelSpec, source: &Path) -> Result<ModelParams> {
        let err = |line: usize, msg: String| FedError::format(source, line as u64, msg);
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, "fedsim-params,1")) => {}
            _ => return Err(err(1, "expected header fedsim-params,1".into())),
        }
        let mut shapes = Vec::new();
        loop {
            let (n, line) = lines
                .next()
                .ok_or_else(|| err(0, "missing values section".into()))?;
            if line == "values" {
                break;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 || parts[0] != "layout" {
                return Err(err(n, format!("bad layout line {line:?}")));
            }
            let dims = parts[2]
                .split('x')
                .map(|p| p.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| err(n, format!("bad shape {:?}", parts[2])))?;
            shapes.push((n, parts[1].to_string(), dims));
        }
        let expected = spec.layout();
        if shapes.len() != expected.0.len() {
            return Err(err(
                1,
                format!(
                    "{} tensors, model spec expects {}",
                    shapes.len(),
                    expected.0.len()
                ),
            ));
        }
        for ((n, name, dims), t) in shapes.iter().zip(&expected.0) {
            if *name != t.name || *dims != t.shape {
                return Err(err(
                    *n,
                    format!(
                        "tensor {name} {dims:?} does not match spec tensor {} {:?}",
                        t.name, t.shape
                    ),
                ));
            }
        }
        let mut flat = Vec::with_capacity(expected.num_params());
        for (n, line) in lines {
            flat.push(
                line.trim()
                    .parse::<f64>()
                    .map_err(|_| err(n, format!("bad value {line:?}")))?,
            );
        }
        ModelParams::from_flat(flat, expected).map_err(|e| err(0, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| FedError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<ModelParams> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
        ModelParams::from_text(&text, spec, path)
    }
}

/// Gradient with the same layout as the parameters it was taken at.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `params - eta * grad`
pub fn sgd_step(params: &ModelParams, grad: &Gradient, eta: f64) -> Result<ModelParams> {
    if !(eta > 0.0) {
        return Err(FedError::param("learning rate must be positive"));
    }
    params.step(&grad.0, eta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    /// Batch objective including weight decay.
    pub loss: f64,
    /// Unweighted cross-entropy of each example, in batch order.
    pub per_example: Vec<f64>,
}

/// Mini-batch of example indices with optional positive per-example weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    indices: Vec<usize>,
    weights: Option<Vec<f64>>,
}

impl Batch {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(FedError::param("a batch needs at least one example"));
        }
        Ok(Batch {
            indices,
            weights: None,
        })
    }

    pub fn weighted(indices: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if indices.is_empty() {
            return Err(FedError::param("a batch needs at least one example"));
        }
        if weights.len() != indices.len() {
            return Err(FedError::param("one weight per batch example required"));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(FedError::param(format!("batch weight {w} is not positive")));
        }
        Ok(Batch {
            indices,
            weights: Some(weights),
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn weight(&self, pos: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[pos])
    }

    fn validate_for(&self, dataset: &Dataset) -> Result<()> {
        match self.indices.iter().find(|&&i| i >= dataset.len()) {
            Some(i) => Err(FedError::param(format!("batch index {i} out of range"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_blobs;
    use crate::rng::SimRng;
    use rand::SeedableRng;

    fn toy(c: usize, n: usize, dim: usize, seed: u64) -> Dataset {
        let mut rng = SimRng::seed_from_u64(seed);
        let features = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
        Dataset::new(features, dim, labels, c).unwrap()
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(ModelSpec::softmax_linear(4, 3).init().unwrap().len(), 15);
        assert_eq!(ModelSpec::mlp(4, 8, 3).init().unwrap().len(), 67);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = ModelSpec::mlp(4, 8, 3);
        let a = spec.init().unwrap();
        assert_eq!(a, spec.init().unwrap());
        assert!(a.flat()[32..40].iter().all(|&b| b == 0.0));
        assert!(a.flat()[..32].iter().all(|w| w.abs() < spec.init_scale));
        let other = ModelSpec {
            init_seed: 1,
            ..spec
        };
        assert_ne!(a, other.init().unwrap());
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let spec = ModelSpec::softmax_linear(3, 10);
        let zero = ModelParams::from_flat(vec![0.0; 40], spec.layout()).unwrap();
        let d = toy(10, 1, 3, 0);
        let out = spec
            .forward_loss(&zero, &d, &Batch::new(vec![0]).unwrap())
            .unwrap();
        assert!((out.loss - 10f64.ln()).abs() < 1e-15);
    }

    /// Weighted objective against the per-example losses the model reports.
    #[test]
    fn weighted_loss_is_self_normalized_mean() {
        let spec = ModelSpec::softmax_linear(3, 4);
        let params = ModelSpec {
            init_scale: 0.5,
            ..spec.clone()
        }
        .init()
        .unwrap();
        let d = toy(4, 2, 3, 1);
        let out = spec
            .forward_loss(
                &params,
                &d,
                &Batch::weighted(vec![0, 1], vec![1.0, 3.0]).unwrap(),
            )
            .unwrap();
        let expect = (out.per_example[0] + 3.0 * out.per_example[1]) / 4.0;
        assert!((out.loss - expect).abs() < 1e-15);
    }

    #[test]
    fn uniform_weights_equal_unweighted() {
        let spec = ModelSpec::mlp(3, 5, 4);
        let params = ModelSpec {
            init_scale: 0.7,
            ..spec.clone()
        }
        .init()
        .unwrap();
        let d = toy(4, 6, 3, 2);
        let idx: Vec<usize> = (0..6).collect();
        let plain = spec
            .loss_and_gradient(&params, &d, &Batch::new(idx.clone()).unwrap())
            .unwrap();
        let ones = spec
            .loss_and_gradient(
                &params,
                &d,
                &Batch::weighted(idx.clone(), vec![1.0; 6]).unwrap(),
            )
            .unwrap();
        assert_eq!(plain, ones);
        for c in [0.5, 7.0] {
            let scaled = spec
                .loss_and_gradient(
                    &params,
                    &d,
                    &Batch::weighted(idx.clone(), vec![c; 6]).unwrap(),
                )
                .unwrap();
            assert!((scaled.0.loss - plain.0.loss).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_two_two_equal_one_one() {
        let spec = ModelSpec::softmax_linear(3, 3);
        let params = ModelSpec {
            init_scale: 0.4,
            ..spec.clone()
        }
        .init()
        .unwrap();
        let d = toy(3, 2, 3, 3);
        let a = spec
            .gradient(
                &params,
                &d,
                &Batch::weighted(vec![0, 1], vec![2.0, 2.0]).unwrap(),
            )
            .unwrap();
        let b = spec
            .gradient(
                &params,
                &d,
                &Batch::weighted(vec![0, 1], vec![1.0, 1.0]).unwrap(),
            )
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weight_decay_excludes_biases() {
        let spec = ModelSpec {
            weight_decay: 0.1,
            ..ModelSpec::softmax_linear(2, 2)
        };
        let params =
            ModelParams::from_flat(vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0], spec.layout()).unwrap();
        let d = toy(2, 1, 2, 4);
        let batch = Batch::new(vec![0]).unwrap();
        let no_decay = ModelSpec {
            weight_decay: 0.0,
            ..spec.clone()
        };
        let base = no_decay.forward_loss(&params, &d, &batch).unwrap().loss;
        let with = spec.forward_loss(&params, &d, &batch).unwrap().loss;
        assert!((with - base - 0.05 * 30.0).abs() < 1e-12);
        let g0 = no_decay.gradient(&params, &d, &batch).unwrap();
        let g1 = spec.gradient(&params, &d, &batch).unwrap();
        assert!((g1.0[0] - g0.0[0] - 0.1).abs() < 1e-12);
        assert_eq!(g1.0[4], g0.0[4]);
    }

    #[test]
    fn saturated_correct_prediction_has_tiny_gradient() {
        let spec = ModelSpec::softmax_linear(2, 3);
        let d = Dataset::new(vec![0.0, 0.0], 2, vec![1], 3).unwrap();
        let mut flat = vec![0.0; 9];
        flat[7] = 50.0; // bias of class 1
        let params = ModelParams::from_flat(flat, spec.layout()).unwrap();
        let g = spec
            .gradient(&params, &d, &Batch::new(vec![0]).unwrap())
            .unwrap();
        assert!(g.max_abs() < 1e-6);
    }

    #[test]
    fn fd_check_random_configs() {
        for seed in 0..10 {
            let d = toy(4, 8, 3, seed);
            let batch = Batch::new((0..8).collect()).unwrap();
            let lin = ModelSpec {
                init_scale: 1.0,
                init_seed: seed,
                weight_decay: 0.01,
                ..ModelSpec::softmax_linear(3, 4)
            };
            let p = lin.init().unwrap();
            assert!(lin.fd_check(&p, &d, &batch, 1e-5).unwrap() < 1e-5);
            let mlp = ModelSpec {
                init_scale: 1.0,
                init_seed: seed,
                ..ModelSpec::mlp(3, 6, 4)
            };
            let p = mlp.init().unwrap();
            assert!(mlp.fd_check(&p, &d, &batch, 1e-5).unwrap() < 1e-4);
        }
    }

    #[test]
    fn fd_check_constant_region() {
        // All hidden units dead: the loss is constant in W1 and b1, and both
        // the analytic and numeric gradients there are zero.
        let spec = ModelSpec::mlp(2, 3, 2);
        let mut flat = vec![0.0; 2 * 3 + 3 + 3 * 2 + 2];
        for b in &mut flat[6..9] {
            *b = -10.0;
        }
        let params = ModelParams::from_flat(flat, spec.layout()).unwrap();
        let d = toy(2, 4, 2, 5);
        let batch = Batch::new(vec![0, 1, 2, 3]).unwrap();
        let g = spec.gradient(&params, &d, &batch).unwrap();
        assert!(g.0[..9].iter().all(|&v| v == 0.0));
        assert!(spec.fd_check(&params, &d, &batch, 1e-5).unwrap() < 1e-5);
    }

    #[test]
    fn fd_check_epsilon_bounds() {
        let spec = ModelSpec::softmax_linear(2, 2);
        let p = spec.init().unwrap();
        let d = toy(2, 2, 2, 0);
        let b = Batch::new(vec![0]).unwrap();
        assert!(spec.fd_check(&p, &d, &b, 1e-2).is_err());
        assert!(spec.fd_check(&p, &d, &b, 1e-9).is_err());
    }

    #[test]
    fn sgd_step_cases() {
        let spec = ModelSpec::softmax_linear(2, 2);
        let p = ModelSpec {
            init_scale: 1.0,
            ..spec.clone()
        }
        .init()
        .unwrap();
        let zero = Gradient(vec![0.0; p.len()]);
        assert_eq!(sgd_step(&p, &zero, 0.3).unwrap(), p);
        let same = Gradient(p.flat().to_vec());
        assert!(sgd_step(&p, &same, 1.0)
            .unwrap()
            .flat()
            .iter()
            .all(|&v| v == 0.0));
        let g = Gradient(vec![0.25; p.len()]);
        let two = sgd_step(&sgd_step(&p, &g, 0.5).unwrap(), &g, 0.5).unwrap();
        let one = sgd_step(&p, &g, 1.0).unwrap();
        for (a, b) in two.flat().iter().zip(one.flat()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(sgd_step(&p, &Gradient(vec![0.0; 2]), 0.1).is_err());
    }

    #[test]
    fn evaluate_cases() {
        let d = generate_blobs(3, 20, 2, 0.1, 0).unwrap();
        let spec = ModelSpec::softmax_linear(2, 3);
        let zero = ModelParams::from_flat(vec![0.0; 9], spec.layout()).unwrap();
        // All logits tie, so everything is predicted as class 0.
        assert!((spec.evaluate(&zero, &d, None).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        // Nearest-mean classifier in 20 dimensions, where blob means sit about
        // 12 noise standard deviations apart.
        let d = generate_blobs(3, 20, 20, 0.1, 0).unwrap();
        let spec = ModelSpec::softmax_linear(20, 3);
        let blobs = crate::dataset::BlobSpec::new(3, 20, 0.1, 0).unwrap();
        let mut flat = vec![0.0; 63];
        for c in 0..3 {
            let m = blobs.mean(c);
            for j in 0..20 {
                flat[j * 3 + c] = m[j];
            }
            flat[60 + c] = -0.5 * m.iter().map(|v| v * v).sum::<f64>();
        }
        let fit = ModelParams::from_flat(flat, spec.layout()).unwrap();
        assert_eq!(spec.evaluate(&fit, &d, None).unwrap(), 1.0);
    }

    #[test]
    fn evaluate_random_labels_near_chance() {
        let d = toy(5, 20_000, 3, 11);
        let spec = ModelSpec {
            init_scale: 1.0,
            ..ModelSpec::softmax_linear(3, 5)
        };
        let acc = spec.evaluate(&spec.init().unwrap(), &d, None).unwrap();
        let sigma = (0.2f64 * 0.8 / 20_000.0).sqrt();
        assert!((acc - 0.2).abs() < 3.0 * sigma, "accuracy {acc}");
    }

    #[test]
    fn evaluate_shift_invariant() {
        let d = toy(4, 50, 3, 12);
        let spec = ModelSpec {
            init_scale: 1.0,
            ..ModelSpec::softmax_linear(3, 4)
        };
        let p = spec.init().unwrap();
        let mut shifted = p.flat().to_vec();
        for b in &mut shifted[12..] {
            *b += 3.25;
        }
        let q = ModelParams::from_flat(shifted, spec.layout()).unwrap();
        assert_eq!(
            spec.evaluate(&p, &d, None).unwrap(),
            spec.evaluate(&q, &d, None).unwrap()
        );
    }

    #[test]
    fn non_finite_features_are_numeric_errors() {
        let d = Dataset::new(vec![f64::NAN, 0.0], 2, vec![0], 2).unwrap();
        let spec = ModelSpec::softmax_linear(2, 2);
        let err = spec
            .forward_loss(&spec.init().unwrap(), &d, &Batch::new(vec![0]).unwrap())
            .unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn batch_validation() {
        assert!(Batch::new(vec![]).is_err());
        assert!(Batch::weighted(vec![0], vec![0.0]).is_err());
        assert!(Batch::weighted(vec![0, 1], vec![1.0]).is_err());
    }

    #[test]
    fn params_text_round_trip_and_validation() {
        let spec = ModelSpec {
            init_scale: 0.3,
            ..ModelSpec::mlp(3, 4, 2)
        };
        let p = spec.init().unwrap();
        let text = p.to_text();
        let path = Path::new("mem");
        assert_eq!(ModelParams::from_text(&text, &spec, path).unwrap(), p);
        let other = ModelSpec::mlp(3, 5, 2);
        assert!(matches!(
            ModelParams::from_text(&text, &other, path),
            Err(FedError::Format { .. })
        ));
        let truncated: String = text.lines().take(8).collect::<Vec<_>>().join("\n");
        assert!(ModelParams::from_text(&truncated, &spec, path).is_err());
    }
}
