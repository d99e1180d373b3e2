//! Per-head classifiers: a bias-free logistic probe and the training-free
//! prototype (class-mean) classifier. Both report the probability of the
//! desired behavior (label 1) and double as a steering direction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HeadId;

pub const PROBE_MAX_ITERS: usize = 2000;
pub const PROBE_GRAD_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Probe,
    Prototype,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionNormalization {
    Raw,
    #[default]
    Unit,
}

/// Labeled activations of a single head.
#[derive(Clone, Debug, Default)]
pub struct HeadSamples<'a> {
    pub x: Vec<&'a [f32]>,
    pub y: Vec<u8>,
}

impl<'a> HeadSamples<'a> {
    pub fn push(&mut self, x: &'a [f32], y: u8) {
        self.x.push(x);
        self.y.push(y);
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn dim(&self) -> Result<usize> {
        let d = self
            .x
            .first()
            .map(|x| x.len())
            .ok_or_else(|| Error::Precondition("no samples".into()))?;
        if self.x.iter().any(|x| x.len() != d) {
            return Err(Error::Shape("activations of unequal length".into()));
        }
        Ok(d)
    }

    fn check_two_classes(&self) -> Result<()> {
        let pos = self.y.iter().filter(|&&y| y == 1).count();
        if pos == 0 || pos == self.len() {
            return Err(Error::Precondition(
                "both labels must be present in the training split".into(),
            ));
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        if self.x.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(Error::Degenerate("non-finite activation".into()));
        }
        Ok(())
    }

    /// True when every activation is identical.
    pub fn all_identical(&self) -> bool {
        self.x.windows(2).all(|w| w[0] == w[1])
    }

    /// Fraction of labels equal to the majority label of `train`.
    fn majority_rate(train: &HeadSamples<'_>, eval: &HeadSamples<'_>) -> f64 {
        let pos = train.y.iter().filter(|&&y| y == 1).count();
        let majority = u8::from(2 * pos >= train.len());
        if eval.is_empty() {
            return 0.0;
        }
        eval.y.iter().filter(|&&y| y == majority).count() as f64 / eval.len() as f64
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn norm(a: &[f32]) -> f64 {
    dot_f32(a, a).sqrt()
}

fn accuracy(samples: &HeadSamples<'_>, predict: impl Fn(&[f32]) -> Result<f64>) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (x, &y) in samples.x.iter().zip(&samples.y) {
        let p = predict(x)?;
        if u8::from(p > 0.5) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeClassifier {
    pub head: HeadId,
    pub theta: Vec<f32>,
    pub validation_accuracy: f64,
    #[serde(default)]
    pub degenerate: bool,
}

impl ProbeClassifier {
    pub fn probability(&self, x: &[f32]) -> Result<f64> {
        if x.len() != self.theta.len() {
            return Err(Error::Shape(format!(
                "activation of length {} for a probe of length {}",
                x.len(),
                self.theta.len()
            )));
        }
        Ok(sigmoid(dot_f32(&self.theta, x)))
    }
}

/// Full-batch gradient descent on mean binary cross-entropy plus
/// `(lambda / 2) * |theta|^2`, from zero, with step `1 / L` where `L` bounds
/// the loss curvature.
pub fn train_probe(
    train: &HeadSamples<'_>,
    validation: &HeadSamples<'_>,
    head: HeadId,
    lambda: f64,
) -> Result<ProbeClassifier> {
    train.check_two_classes()?;
    train.check_finite()?;
    let d = train.dim()?;
    let n = train.len() as f64;

    if train.all_identical() {
        return Ok(ProbeClassifier {
            head,
            theta: vec![0.0; d],
            validation_accuracy: HeadSamples::majority_rate(train, validation),
            degenerate: true,
        });
    }

    let xs: Vec<Vec<f64>> = train
        .x
        .iter()
        .map(|x| x.iter().map(|&v| v as f64).collect())
        .collect();
    let ys: Vec<f64> = train.y.iter().map(|&y| y as f64).collect();
    let trace: f64 = xs.iter().flatten().map(|v| v * v).sum::<f64>() / n;
    let lr = 1.0 / (0.25 * trace + lambda);

    let mut theta = vec![0.0f64; d];
    let mut grad = vec![0.0f64; d];
    for _ in 0..PROBE_MAX_ITERS {
        grad.iter_mut()
            .zip(&theta)
            .for_each(|(g, t)| *g = lambda * t);
        for (x, &y) in xs.iter().zip(&ys) {
            let z: f64 = x.iter().zip(&theta).map(|(a, b)| a * b).sum();
            let r = (sigmoid(z) - y) / n;
            grad.iter_mut().zip(x).for_each(|(g, xi)| *g += r * xi);
        }
        let max = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if max < PROBE_GRAD_TOL {
            break;
        }
        theta.iter_mut().zip(&grad).for_each(|(t, g)| *t -= lr * g);
    }

    let mut probe = ProbeClassifier {
        head,
        theta: theta.iter().map(|&t| t as f32).collect(),
        validation_accuracy: 0.0,
        degenerate: false,
    };
    validation.check_finite()?;
    probe.validation_accuracy = accuracy(validation, |x| probe.probability(x))?;
    Ok(probe)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeClassifier {
    pub head: HeadId,
    pub proto_pos: Vec<f32>,
    pub proto_neg: Vec<f32>,
    pub temperature: f64,
    pub validation_accuracy: f64,
    #[serde(default)]
    pub degenerate: bool,
}

impl PrototypeClassifier {
    /// `exp(cos(x, pos)/t) / (exp(cos(x, pos)/t) + exp(cos(x, neg)/t))`.
    pub fn probability(&self, x: &[f32]) -> Result<f64> {
        if x.len() != self.proto_pos.len() {
            return Err(Error::Shape(format!(
                "activation of length {} for prototypes of length {}",
                x.len(),
                self.proto_pos.len()
            )));
        }
        let nx = norm(x);
        if nx == 0.0 {
            return Err(Error::Degenerate(
                "zero-norm activation has no cosine similarity".into(),
            ));
        }
        let (np, nn) = (norm(&self.proto_pos), norm(&self.proto_neg));
        if np == 0.0 || nn == 0.0 {
            return Err(Error::Degenerate("zero-norm prototype".into()));
        }
        let cos_pos = dot_f32(x, &self.proto_pos) / (nx * np);
        let cos_neg = dot_f32(x, &self.proto_neg) / (nx * nn);
        // shift both logits by the larger one before exponentiating
        let (a, b) = (cos_pos / self.temperature, cos_neg / self.temperature);
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        Ok(ea / (ea + eb))
    }

    pub fn steering_vector(&self) -> Vec<f32> {
        self.proto_pos
            .iter()
            .zip(&self.proto_neg)
            .map(|(p, n)| p - n)
            .collect()
    }
}

pub fn build_prototypes(
    train: &HeadSamples<'_>,
    validation: &HeadSamples<'_>,
    head: HeadId,
    temperature: f64,
) -> Result<PrototypeClassifier> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Precondition(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    train.check_two_classes()?;
    train.check_finite()?;
    let d = train.dim()?;
    let mut sums = [vec![0.0f64; d], vec![0.0f64; d]];
    let mut counts = [0usize; 2];
    for (x, &y) in train.x.iter().zip(&train.y) {
        counts[y as usize] += 1;
        sums[y as usize]
            .iter_mut()
            .zip(x.iter())
            .for_each(|(s, &v)| *s += v as f64);
    }
    let mean = |c: usize| -> Vec<f32> {
        sums[c]
            .iter()
            .map(|s| (s / counts[c] as f64) as f32)
            .collect()
    };
    let mut proto = PrototypeClassifier {
        head,
        proto_pos: mean(1),
        proto_neg: mean(0),
        temperature,
        validation_accuracy: 0.0,
        degenerate: false,
    };
    if norm(&proto.proto_pos) == 0.0 || norm(&proto.proto_neg) == 0.0 {
        return Err(Error::Degenerate(format!(
            "zero-norm prototype at {head}; cosine similarity is undefined"
        )));
    }
    validation.check_finite()?;
    proto.validation_accuracy = accuracy(validation, |x| proto.probability(x))?;
    Ok(proto)
}

/// Stand-in for a head whose activations carry no signal.
pub(crate) fn degenerate_prototype(
    train: &HeadSamples<'_>,
    validation: &HeadSamples<'_>,
    head: HeadId,
    temperature: f64,
    d: usize,
) -> PrototypeClassifier {
    PrototypeClassifier {
        head,
        proto_pos: vec![0.0; d],
        proto_neg: vec![0.0; d],
        temperature,
        validation_accuracy: HeadSamples::majority_rate(train, validation),
        degenerate: true,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum HeadClassifier {
    Probe(ProbeClassifier),
    Prototype(PrototypeClassifier),
}

impl HeadClassifier {
    pub fn head(&self) -> HeadId {
        match self {
            HeadClassifier::Probe(p) => p.head,
            HeadClassifier::Prototype(p) => p.head,
        }
    }

    pub fn method(&self) -> Method {
        match self {
            HeadClassifier::Probe(_) => Method::Probe,
            HeadClassifier::Prototype(_) => Method::Prototype,
        }
    }

    pub fn validation_accuracy(&self) -> f64 {
        match self {
            HeadClassifier::Probe(p) => p.validation_accuracy,
            HeadClassifier::Prototype(p) => p.validation_accuracy,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        match self {
            HeadClassifier::Probe(p) => p.degenerate,
            HeadClassifier::Prototype(p) => p.degenerate,
        }
    }

    pub fn d_head(&self) -> usize {
        match self {
            HeadClassifier::Probe(p) => p.theta.len(),
            HeadClassifier::Prototype(p) => p.proto_pos.len(),
        }
    }

    /// Desired-behavior probability of `x`. Degenerate heads carry no
    /// information and always report 0.5.
    pub fn classify(&self, x: &[f32]) -> Result<f64> {
        if x.len() != self.d_head() {
            return Err(Error::Shape(format!(
                "activation of length {} for a classifier of length {}",
                x.len(),
                self.d_head()
            )));
        }
        if self.is_degenerate() {
            return Ok(0.5);
        }
        match self {
            HeadClassifier::Probe(p) => p.probability(x),
            HeadClassifier::Prototype(p) => p.probability(x),
        }
    }

    pub fn steering_direction(&self, normalization: DirectionNormalization) -> Result<Vec<f32>> {
        let raw = match self {
            HeadClassifier::Probe(p) => p.theta.clone(),
            HeadClassifier::Prototype(p) => p.steering_vector(),
        };
        match normalization {
            DirectionNormalization::Raw => Ok(raw),
            DirectionNormalization::Unit => {
                let n = norm(&raw);
                if n == 0.0 || !n.is_finite() {
                    return Err(Error::Degenerate(format!(
                        "steering vector for {} has zero norm",
                        self.head()
                    )));
                }
                Ok(raw.iter().map(|&v| (v as f64 / n) as f32).collect())
            }
        }
    }

    /// Parameters in persistence order: probe θ, or prototype pos then neg.
    pub fn parameters(&self) -> Vec<f32> {
        match self {
            HeadClassifier::Probe(p) => p.theta.clone(),
            HeadClassifier::Prototype(p) => [p.proto_pos.clone(), p.proto_neg.clone()].concat(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples<'a>(rows: &'a [(Vec<f32>, u8)]) -> HeadSamples<'a> {
        let mut s = HeadSamples::default();
        for (x, y) in rows {
            s.push(x, *y);
        }
        s
    }

    fn separable() -> Vec<(Vec<f32>, u8)> {
        vec![
            (vec![1.0, 0.2, -0.1], 1),
            (vec![0.8, -0.3, 0.4], 1),
            (vec![1.3, 0.1, 0.0], 1),
            (vec![-0.9, 0.2, 0.3], 0),
            (vec![-1.1, -0.4, 0.1], 0),
            (vec![-0.7, 0.0, -0.2], 0),
        ]
    }

    #[test]
    fn probe_zero_dot_is_half() {
        let p = ProbeClassifier {
            head: HeadId::new(0, 0),
            theta: vec![1.0, -1.0],
            validation_accuracy: 0.0,
            degenerate: false,
        };
        assert_eq!(p.probability(&[2.0, 2.0]).unwrap(), 0.5);
        assert!(p.probability(&[1.0]).is_err());
    }

    #[test]
    fn probe_ln3_gives_three_quarters() {
        let mut theta = vec![0.0f32; 4];
        theta[0] = 1.0;
        let p = ProbeClassifier {
            head: HeadId::new(0, 0),
            theta,
            validation_accuracy: 0.0,
            degenerate: false,
        };
        let x = [3f64.ln() as f32, 0.0, 0.0, 0.0];
        // sigmoid(ln 3) = 3 / (3 + 1); the input is ln 3 rounded to f32
        let expected = 1.0 / (1.0 + (-(x[0] as f64)).exp());
        assert!((p.probability(&x).unwrap() - expected).abs() < 1e-15);
        assert!((p.probability(&x).unwrap() - 0.75).abs() < 1e-7);
    }

    #[test]
    fn probe_separates_separable_data() {
        let rows = separable();
        let s = samples(&rows);
        let p = train_probe(&s, &s, HeadId::new(0, 1), 1e-3).unwrap();
        assert_eq!(p.validation_accuracy, 1.0);
        assert!(p.theta[0] > 0.0);
    }

    #[test]
    fn flipped_labels_negate_theta() {
        let rows = separable();
        let flipped: Vec<_> = rows.iter().map(|(x, y)| (x.clone(), 1 - y)).collect();
        let a = train_probe(&samples(&rows), &samples(&rows), HeadId::new(0, 0), 1e-3).unwrap();
        let b = train_probe(
            &samples(&flipped),
            &samples(&flipped),
            HeadId::new(0, 0),
            1e-3,
        )
        .unwrap();
        for (x, y) in a.theta.iter().zip(&b.theta) {
            assert!((x + y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn probe_requires_both_classes_and_finite_input() {
        let rows = vec![(vec![1.0f32, 0.0], 1u8), (vec![0.5, 0.5], 1)];
        assert!(matches!(
            train_probe(&samples(&rows), &samples(&rows), HeadId::new(0, 0), 1e-3),
            Err(Error::Precondition(_))
        ));
        let rows = vec![(vec![f32::NAN, 0.0], 1u8), (vec![0.5, 0.5], 0)];
        assert!(matches!(
            train_probe(&samples(&rows), &samples(&rows), HeadId::new(0, 0), 1e-3),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn identical_activations_fall_back_to_majority_rate() {
        let rows = vec![
            (vec![0.5f32, 0.5], 1u8),
            (vec![0.5, 0.5], 1),
            (vec![0.5, 0.5], 0),
        ];
        let val = vec![
            (vec![0.5f32, 0.5], 0u8),
            (vec![0.5, 0.5], 1),
            (vec![0.5, 0.5], 1),
        ];
        let p = train_probe(&samples(&rows), &samples(&val), HeadId::new(0, 0), 1e-3).unwrap();
        assert!(p.degenerate);
        assert!((p.validation_accuracy - 2.0 / 3.0).abs() < 1e-12);
        let c = HeadClassifier::Probe(p);
        assert!(c.steering_direction(DirectionNormalization::Unit).is_err());
    }

    #[test]
    fn prototype_cosine_example() {
        let proto = PrototypeClassifier {
            head: HeadId::new(0, 0),
            proto_pos: vec![1.0, 0.0],
            proto_neg: vec![0.0, 1.0],
            temperature: 0.1,
            validation_accuracy: 0.0,
            degenerate: false,
        };
        let p = proto.probability(&[2.0, 0.0]).unwrap();
        let e10 = 10f64.exp();
        assert!((p - e10 / (e10 + 1.0)).abs() < 1e-12);
        assert!((p - 0.9999546).abs() < 1e-7);
        // equal angle to both prototypes
        assert!((proto.probability(&[1.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(proto.probability(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn equal_prototypes_give_one_half() {
        let proto = PrototypeClassifier {
            head: HeadId::new(0, 0),
            proto_pos: vec![0.3, -0.2, 0.9],
            proto_neg: vec![0.3, -0.2, 0.9],
            temperature: 0.1,
            validation_accuracy: 0.0,
            degenerate: false,
        };
        for x in [[1.0f32, 2.0, 3.0], [-4.0, 0.1, 0.0], [0.0, 0.0, 1e-3]] {
            assert_eq!(proto.probability(&x).unwrap(), 0.5);
        }
    }

    #[test]
    fn prototypes_are_class_means() {
        let rows = vec![
            (vec![1.0f32, 2.0], 1u8),
            (vec![3.0, 4.0], 1),
            (vec![-1.0, 0.0], 0),
            (vec![-3.0, 2.0], 0),
        ];
        let s = samples(&rows);
        let p = build_prototypes(&s, &s, HeadId::new(1, 1), 0.1).unwrap();
        assert_eq!(p.proto_pos, vec![2.0, 3.0]);
        assert_eq!(p.proto_neg, vec![-2.0, 1.0]);
        let c = HeadClassifier::Prototype(p);
        assert_eq!(
            c.steering_direction(DirectionNormalization::Raw).unwrap(),
            vec![4.0, 2.0]
        );
        let unit = c.steering_direction(DirectionNormalization::Unit).unwrap();
        let n: f64 = unit.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert_eq!(c.parameters(), vec![2.0, 3.0, -2.0, 1.0]);
    }

    #[test]
    fn zero_prototype_is_an_error() {
        let rows = vec![
            (vec![1.0f32, 2.0], 1u8),
            (vec![-1.0, -2.0], 0),
            (vec![1.0, 2.0], 0),
        ];
        assert!(matches!(
            build_prototypes(&samples(&rows), &samples(&rows), HeadId::new(0, 0), 0.1),
            Err(Error::Degenerate(_))
        ));
    }
}
