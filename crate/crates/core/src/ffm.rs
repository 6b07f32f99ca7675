//! A small field-aware factorization machine: libffm-format data, AdaGrad
//! SGD training, logloss / relative information gain, a synthetic CTR
//! generator, and the [`Objective`] adapter the optimizer tunes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::objective::{Evaluation, Objective, ObjectiveError};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::space::{ConfigSpace, Configuration, ParamSpec, ParamValue, Scale};

pub const PROB_CLIP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FfmError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset is empty")]
    Empty,
    #[error("relative information gain is undefined: dataset has only one label class")]
    SingleClass,
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),
    #[error("training diverged (non-finite loss) with {0}")]
    Diverged(FfmHyperParams),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FfmFeature {
    pub field: usize,
    pub feature: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfmInstance {
    pub label: bool,
    pub features: Vec<FfmFeature>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<FfmInstance>,
    pub n_fields: usize,
    pub n_features: usize,
}

impl Dataset {
    pub fn positive_rate(&self) -> f64 {
        self.instances.iter().filter(|i| i.label).count() as f64 / self.instances.len() as f64
    }

    pub fn has_both_classes(&self) -> bool {
        let pos = self.instances.iter().filter(|i| i.label).count();
        pos > 0 && pos < self.instances.len()
    }

    /// libffm text, one instance per line.
    pub fn to_libffm(&self) -> String {
        let mut out = String::new();
        for inst in &self.instances {
            out.push(if inst.label { '1' } else { '0' });
            for f in &inst.features {
                out.push_str(&format!(" {}:{}:{}", f.field, f.feature, f.value));
            }
            out.push('\n');
        }
        out
    }
}

/// Parse libffm lines `label field:feature:value ...` with labels in {0, 1}.
/// Blank lines are skipped; field and feature counts are one past the
/// largest index seen.
pub fn parse_dataset(text: &str) -> Result<Dataset, FfmError> {
    let mut instances = Vec::new();
    let (mut n_fields, mut n_features) = (0, 0);
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| FfmError::Parse { line: line_no, message };
        let mut tokens = line.split_whitespace();
        let Some(label) = tokens.next() else { continue };
        let label = match label {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("label must be 0 or 1, got `{other}`"))),
        };
        let mut seen = HashSet::new();
        let mut features = Vec::new();
        for tok in tokens {
            let parts: Vec<&str> = tok.split(':').collect();
            if parts.len() != 3 {
                return Err(err(format!("expected field:feature:value, got `{tok}`")));
            }
            let field: usize = parts[0]
                .parse()
                .map_err(|_| err(format!("bad field index in `{tok}`")))?;
            let feature: usize = parts[1]
                .parse()
                .map_err(|_| err(format!("bad feature index in `{tok}`")))?;
            let value: f64 = parts[2].parse().map_err(|_| err(format!("bad value in `{tok}`")))?;
            if !value.is_finite() {
                return Err(err(format!("non-finite value in `{tok}`")));
            }
            if !seen.insert((field, feature)) {
                return Err(err(format!("duplicate field:feature pair {field}:{feature}")));
            }
            n_fields = n_fields.max(field + 1);
            n_features = n_features.max(feature + 1);
            features.push(FfmFeature { field, feature, value });
        }
        instances.push(FfmInstance { label, features });
    }
    if instances.is_empty() {
        return Err(FfmError::Empty);
    }
    Ok(Dataset {
        instances,
        n_fields,
        n_features,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FfmHyperParams {
    pub learning_rate: f64,
    pub latent_dim: usize,
    pub l2_reg: f64,
    pub epochs: usize,
}

impl fmt::Display for FfmHyperParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "learning_rate={}, latent_dim={}, l2_reg={}, epochs={}",
            self.learning_rate, self.latent_dim, self.l2_reg, self.epochs
        )
    }
}

impl FfmHyperParams {
    pub fn validate(&self) -> Result<(), FfmError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FfmError::InvalidHyperParams("learning_rate must be > 0".into()));
        }
        if self.latent_dim < 1 || self.epochs < 1 {
            return Err(FfmError::InvalidHyperParams(
                "latent_dim and epochs must be >= 1".into(),
            ));
        }
        if !(self.l2_reg >= 0.0 && self.l2_reg.is_finite()) {
            return Err(FfmError::InvalidHyperParams("l2_reg must be >= 0".into()));
        }
        Ok(())
    }
}

/// Flat parameter layout: `[bias, linear[0..n_features], latent...]`, where
/// the latent vector of `(feature, field)` starts at
/// `(feature * n_fields + field) * latent_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfmModel {
    pub n_fields: usize,
    pub n_features: usize,
    pub latent_dim: usize,
    pub bias: f64,
    pub linear: Vec<f64>,
    pub latent: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Unclipped logistic loss of a logit.
fn logit_loss(label: bool, phi: f64) -> f64 {
    if label {
        softplus(-phi)
    } else {
        softplus(phi)
    }
}

impl FfmModel {
    pub fn zeros(n_fields: usize, n_features: usize, latent_dim: usize) -> Self {
        Self {
            n_fields,
            n_features,
            latent_dim,
            bias: 0.0,
            linear: vec![0.0; n_features],
            latent: vec![0.0; n_features * n_fields * latent_dim],
        }
    }

    /// Zero bias and linear weights; latent weights uniform in `[0, 1/sqrt(k))`.
    pub fn init(n_fields: usize, n_features: usize, latent_dim: usize, rng: &mut Rng) -> Self {
        let mut m = Self::zeros(n_fields, n_features, latent_dim);
        let scale = 1.0 / (latent_dim as f64).sqrt();
        for w in &mut m.latent {
            *w = rng.gen::<f64>() * scale;
        }
        m
    }

    pub fn param_count(&self) -> usize {
        1 + self.linear.len() + self.latent.len()
    }

    pub fn param(&self, i: usize) -> f64 {
        if i == 0 {
            self.bias
        } else if i <= self.n_features {
            self.linear[i - 1]
        } else {
            self.latent[i - 1 - self.n_features]
        }
    }

    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        if i == 0 {
            &mut self.bias
        } else if i <= self.n_features {
            &mut self.linear[i - 1]
        } else {
            &mut self.latent[i - 1 - self.n_features]
        }
    }

    fn latent_offset(&self, feature: usize, field: usize) -> usize {
        (feature * self.n_fields + field) * self.latent_dim
    }

    pub fn check_instance(&self, inst: &FfmInstance) -> Result<(), FfmError> {
        for f in &inst.features {
            if f.field >= self.n_fields || f.feature >= self.n_features {
                return Err(FfmError::OutOfRange(format!(
                    "field {} / feature {} vs model {} fields / {} features",
                    f.field, f.feature, self.n_fields, self.n_features
                )));
            }
        }
        Ok(())
    }

    /// `bias + sum_i w_i x_i + sum_{i<j} <v_{i,f_j}, v_{j,f_i}> x_i x_j`.
    pub fn logit(&self, inst: &FfmInstance) -> f64 {
        let k = self.latent_dim;
        let feats = &inst.features;
        let mut phi = self.bias;
        for f in feats {
            phi += self.linear[f.feature] * f.value;
        }
        for a in 0..feats.len() {
            for b in a + 1..feats.len() {
                let (fa, fb) = (&feats[a], &feats[b]);
                let va = self.latent_offset(fa.feature, fb.field);
                let vb = self.latent_offset(fb.feature, fa.field);
                let dot: f64 = (0..k).map(|d| self.latent[va + d] * self.latent[vb + d]).sum();
                phi += dot * fa.value * fb.value;
            }
        }
        phi
    }

    pub fn predict(&self, inst: &FfmInstance) -> Result<f64, FfmError> {
        self.check_instance(inst)?;
        Ok(sigmoid(self.logit(inst)))
    }

    /// Per-instance training objective: logistic loss plus
    /// `l2/2 * ||w||^2` over the linear and latent weights the instance
    /// touches (the bias is not penalized).
    pub fn instance_loss(&self, inst: &FfmInstance, l2: f64) -> f64 {
        let k = self.latent_dim;
        let feats = &inst.features;
        let mut reg = 0.0;
        for f in feats {
            reg += self.linear[f.feature].powi(2);
        }
        for a in 0..feats.len() {
            for b in a + 1..feats.len() {
                let va = self.latent_offset(feats[a].feature, feats[b].field);
                let vb = self.latent_offset(feats[b].feature, feats[a].field);
                for d in 0..k {
                    reg += self.latent[va + d].powi(2) + self.latent[vb + d].powi(2);
                }
            }
        }
        logit_loss(inst.label, self.logit(inst)) + 0.5 * l2 * reg
    }

    /// Gradient of [`instance_loss`](Self::instance_loss) as
    /// `(flat parameter index, partial)` pairs. A latent vector shared by
    /// two pairs appears twice; the partials add up. Returns the logit.
    pub fn instance_gradient(&self, inst: &FfmInstance, l2: f64, out: &mut Vec<(usize, f64)>) -> f64 {
        out.clear();
        let k = self.latent_dim;
        let feats = &inst.features;
        let phi = self.logit(inst);
        let g = sigmoid(phi) - if inst.label { 1.0 } else { 0.0 };
        out.push((0, g));
        let lin_base = 1;
        let lat_base = 1 + self.n_features;
        for f in feats {
            out.push((lin_base + f.feature, g * f.value + l2 * self.linear[f.feature]));
        }
        for a in 0..feats.len() {
            for b in a + 1..feats.len() {
                let (fa, fb) = (&feats[a], &feats[b]);
                let va = self.latent_offset(fa.feature, fb.field);
                let vb = self.latent_offset(fb.feature, fa.field);
                let scale = g * fa.value * fb.value;
                for d in 0..k {
                    out.push((
                        lat_base + va + d,
                        scale * self.latent[vb + d] + l2 * self.latent[va + d],
                    ));
                    out.push((
                        lat_base + vb + d,
                        scale * self.latent[va + d] + l2 * self.latent[vb + d],
                    ));
                }
            }
        }
        phi
    }

    pub fn all_finite(&self) -> bool {
        self.bias.is_finite() && self.linear.iter().all(|w| w.is_finite()) && self.latent.iter().all(|w| w.is_finite())
    }
}

/// AdaGrad SGD on the per-instance objective, starting from `model`.
/// Instances are visited in a fresh `rng` permutation each epoch.
pub fn train_from(
    mut model: FfmModel,
    data: &Dataset,
    hp: &FfmHyperParams,
    rng: &mut Rng,
) -> Result<FfmModel, FfmError> {
    hp.validate()?;
    if data.instances.is_empty() {
        return Err(FfmError::Empty);
    }
    for inst in &data.instances {
        model.check_instance(inst)?;
    }
    // accumulators start at 1, as in libffm
    let mut g_sq = vec![1.0; model.param_count()];
    let mut grad = Vec::new();
    let mut order: Vec<usize> = (0..data.instances.len()).collect();
    for _ in 0..hp.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let inst = &data.instances[i];
            let phi = model.instance_gradient(inst, hp.l2_reg, &mut grad);
            epoch_loss += logit_loss(inst.label, phi);
            for &(p, g) in &grad {
                g_sq[p] += g * g;
                *model.param_mut(p) -= hp.learning_rate * g / g_sq[p].sqrt();
            }
        }
        if !epoch_loss.is_finite() || !model.all_finite() {
            return Err(FfmError::Diverged(*hp));
        }
    }
    Ok(model)
}

pub fn train(data: &Dataset, hp: &FfmHyperParams, rng: &mut Rng) -> Result<FfmModel, FfmError> {
    hp.validate()?;
    let init = FfmModel::init(data.n_fields, data.n_features, hp.latent_dim, rng);
    train_from(init, data, hp, rng)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub logloss: f64,
    pub rig: f64,
}

/// Binary entropy of the positive rate: the logloss of the constant
/// base-rate predictor.
pub fn base_rate_entropy(rate: f64) -> f64 {
    -(rate * rate.ln() + (1.0 - rate) * (1.0 - rate).ln())
}

/// Clipped logloss and `RIG = 1 - logloss / H(base rate)`.
pub fn metrics_from_predictions(labels: &[bool], probs: &[f64]) -> Result<Metrics, FfmError> {
    if labels.is_empty() {
        return Err(FfmError::Empty);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(FfmError::SingleClass);
    }
    let logloss = labels
        .iter()
        .zip(probs)
        .map(|(&l, &p)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            if l {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / labels.len() as f64;
    let h = base_rate_entropy(pos as f64 / labels.len() as f64);
    Ok(Metrics {
        logloss,
        rig: 1.0 - logloss / h,
    })
}

pub fn evaluate(model: &FfmModel, data: &Dataset) -> Result<Metrics, FfmError> {
    let labels: Vec<bool> = data.instances.iter().map(|i| i.label).collect();
    let probs = data
        .instances
        .iter()
        .map(|i| model.predict(i))
        .collect::<Result<Vec<_>, _>>()?;
    metrics_from_predictions(&labels, &probs)
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub train: Dataset,
    pub valid: Dataset,
    pub ground_truth: FfmModel,
}

pub const TRUTH_LATENT_DIM: usize = 4;

/// Synthetic CTR data from a random ground-truth FFM (latent dim 4, weights
/// standard normal scaled by 1/sqrt(4), zero bias). Every instance activates
/// one feature per field with value 1; labels are
/// `Bernoulli(sigmoid(logit + noise * eps))`.
pub fn generate_ctr_data(
    gen_seed: u64,
    n_train: usize,
    n_valid: usize,
    n_fields: usize,
    features_per_field: usize,
    noise: f64,
) -> GeneratedData {
    assert!(n_train >= 1 && n_valid >= 1 && n_fields >= 1 && features_per_field >= 1);
    assert!(noise >= 0.0, "noise must be >= 0");
    let n_features = n_fields * features_per_field;
    let scale = 1.0 / (TRUTH_LATENT_DIM as f64).sqrt();
    let mut truth_rng = rng_from_seed(derive_seed(gen_seed, 0));
    let mut truth = FfmModel::zeros(n_fields, n_features, TRUTH_LATENT_DIM);
    for w in truth.linear.iter_mut().chain(truth.latent.iter_mut()) {
        *w = truth_rng.sample::<f64, _>(StandardNormal) * scale;
    }
    let sample = |n: usize, stream: u64| {
        let mut rng = rng_from_seed(derive_seed(gen_seed, stream));
        let instances = (0..n)
            .map(|_| {
                let features: Vec<FfmFeature> = (0..n_fields)
                    .map(|field| FfmFeature {
                        field,
                        feature: field * features_per_field + rng.gen_range(0..features_per_field),
                        value: 1.0,
                    })
                    .collect();
                let mut inst = FfmInstance { label: false, features };
                let eps: f64 = rng.sample(StandardNormal);
                let p = sigmoid(truth.logit(&inst) + noise * eps);
                inst.label = rng.gen::<f64>() < p;
                inst
            })
            .collect();
        Dataset {
            instances,
            n_fields,
            n_features,
        }
    };
    let train = sample(n_train, 1);
    let valid = sample(n_valid, 2);
    GeneratedData {
        train,
        valid,
        ground_truth: truth,
    }
}

/// Default search space over the four engine hyperparameters.
pub fn ffm_space() -> ConfigSpace {
    ConfigSpace::new(vec![
        ParamSpec::continuous("learning_rate", 1e-3, 1.0, Scale::Log10).expect("valid"),
        ParamSpec::integer("latent_dim", 2, 32, Scale::Linear).expect("valid"),
        ParamSpec::continuous("l2_reg", 1e-6, 1e-1, Scale::Log10).expect("valid"),
        ParamSpec::integer("epochs", 1, 10, Scale::Linear).expect("valid"),
    ])
    .expect("distinct names")
}

/// Trains on `train`, scores `-RIG` on `valid`.
pub struct FfmObjective {
    train: Dataset,
    valid: Dataset,
    space: ConfigSpace,
    /// Positions of learning_rate, latent_dim, l2_reg, epochs in `space`.
    binding: [usize; 4],
}

impl FfmObjective {
    pub fn new(train: Dataset, valid: Dataset) -> Self {
        Self::with_space(train, valid, ffm_space()).expect("default space binds")
    }

    /// Bind a user space by parameter name; it must contain `learning_rate`,
    /// `latent_dim`, `l2_reg` and `epochs`.
    pub fn with_space(train: Dataset, valid: Dataset, space: ConfigSpace) -> Result<Self, ObjectiveError> {
        let find = |name: &str| {
            space
                .index_of(name)
                .ok_or_else(|| ObjectiveError(format!("FFM space needs a `{name}` parameter")))
        };
        let binding = [
            find("learning_rate")?,
            find("latent_dim")?,
            find("l2_reg")?,
            find("epochs")?,
        ];
        Ok(Self {
            train,
            valid,
            space,
            binding,
        })
    }

    pub fn hyper_params(&self, config: &Configuration) -> Result<FfmHyperParams, ObjectiveError> {
        self.space.validate(config).map_err(|e| ObjectiveError(e.to_string()))?;
        let real = |i: usize| match config.values[i] {
            ParamValue::Real(v) => Ok(v),
            ParamValue::Int(v) => Ok(v as f64),
            ParamValue::Choice(_) => Err(ObjectiveError("FFM parameters must be numeric".into())),
        };
        let int = |i: usize| match config.values[i] {
            ParamValue::Int(v) if v >= 1 => Ok(v as usize),
            ParamValue::Real(v) if v >= 1.0 => Ok(v.round() as usize),
            _ => Err(ObjectiveError("latent_dim and epochs must be integers >= 1".into())),
        };
        let hp = FfmHyperParams {
            learning_rate: real(self.binding[0])?,
            latent_dim: int(self.binding[1])?,
            l2_reg: real(self.binding[2])?,
            epochs: int(self.binding[3])?,
        };
        hp.validate().map_err(|e| ObjectiveError(e.to_string()))?;
        Ok(hp)
    }
}

impl Objective for FfmObjective {
    fn name(&self) -> &str {
        "ffm"
    }

    fn space(&self) -> &ConfigSpace {
        &self.space
    }

    fn evaluate(&self, config: &Configuration, seed: u64) -> Result<Evaluation, ObjectiveError> {
        let hp = self.hyper_params(config)?;
        let model = train(&self.train, &hp, &mut rng_from_seed(seed)).map_err(|e| ObjectiveError(e.to_string()))?;
        let train_m = evaluate(&model, &self.train).map_err(|e| ObjectiveError(e.to_string()))?;
        let valid_m = evaluate(&model, &self.valid).map_err(|e| ObjectiveError(e.to_string()))?;
        let meta = BTreeMap::from([
            ("train_logloss".to_string(), train_m.logloss),
            ("valid_logloss".to_string(), valid_m.logloss),
            ("valid_rig".to_string(), valid_m.rig),
        ]);
        Ok(Evaluation {
            score: -valid_m.rig,
            meta,
        })
    }
}
