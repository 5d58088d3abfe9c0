//! Base cognitive diagnosis models (IRT, MIRT, DINA, NCDM), personalized
//! proficiency, and adaptive fusion.
//!
//! The functions here are the pure (inference-time) interaction functions
//! operating on post-activation parameter values. Training builds the same
//! arithmetic on the autodiff tape in `model`; a test pins the two routes
//! together.

use crate::array::{sigmoid, Array};
use crate::data::QMatrix;
use crate::error::{HcdError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Conventional logistic scaling constant for the IRT interaction.
pub const DISC_SCALE: f64 = 1.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseModel {
    Irt,
    Mirt,
    Dina,
    Ncdm,
}

impl BaseModel {
    pub const ALL: [BaseModel; 4] = [
        BaseModel::Irt,
        BaseModel::Mirt,
        BaseModel::Dina,
        BaseModel::Ncdm,
    ];
}

impl fmt::Display for BaseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BaseModel::Irt => "irt",
            BaseModel::Mirt => "mirt",
            BaseModel::Dina => "dina",
            BaseModel::Ncdm => "ncdm",
        };
        f.write_str(s)
    }
}

impl FromStr for BaseModel {
    type Err = HcdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "irt" => Ok(BaseModel::Irt),
            "mirt" => Ok(BaseModel::Mirt),
            "dina" => Ok(BaseModel::Dina),
            "ncdm" => Ok(BaseModel::Ncdm),
            other => Err(HcdError::Config(format!(
                "unknown base model `{other}` (expected irt|mirt|dina|ncdm)"
            ))),
        }
    }
}

/// The monotone prediction head of NCDM: three dense layers k -> h1 -> h2 -> 1
/// with sigmoid activations. All weight entries stay non-negative so the
/// prediction cannot decrease when a required proficiency rises.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcdmHead {
    pub w1: Array,
    pub b1: Array,
    pub w2: Array,
    pub b2: Array,
    pub w3: Array,
    pub b3: Array,
}

impl NcdmHead {
    pub fn forward(&self, x: &[f64]) -> f64 {
        let h1 = dense_sigmoid(x, &self.w1, &self.b1);
        let h2 = dense_sigmoid(&h1, &self.w2, &self.b2);
        dense_sigmoid(&h2, &self.w3, &self.b3)[0]
    }

    /// Smallest weight entry across the three layers.
    pub fn min_weight(&self) -> f64 {
        [&self.w1, &self.w2, &self.w3]
            .iter()
            .flat_map(|w| w.data().iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

fn dense_sigmoid(x: &[f64], w: &Array, b: &Array) -> Vec<f64> {
    let (rows, cols) = w.shape();
    debug_assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for (t, &xt) in x.iter().enumerate() {
        if xt == 0.0 {
            continue;
        }
        for j in 0..cols {
            out[j] += xt * w.get(t, j);
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        *o = sigmoid(*o + b.get(0, j));
    }
    out
}

/// Post-activation exercise parameters of one base model.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum ExerciseParams {
    /// Per-concept difficulty (m x k) and discrimination, both in (0, 1),
    /// plus the monotone head.
    Ncdm {
        diff: Array,
        disc: Vec<f64>,
        head: NcdmHead,
    },
    /// Scalar difficulty location (unconstrained) and discrimination in (0, 1).
    Irt { b: Vec<f64>, disc: Vec<f64> },
    /// Per-concept loading matrix (m x k, unconstrained) and intercept.
    Mirt { a: Array, b: Vec<f64> },
    /// Guess and slip, each in (0, 0.5).
    Dina { guess: Vec<f64>, slip: Vec<f64> },
}

impl ExerciseParams {
    pub fn base(&self) -> BaseModel {
        match self {
            ExerciseParams::Ncdm { .. } => BaseModel::Ncdm,
            ExerciseParams::Irt { .. } => BaseModel::Irt,
            ExerciseParams::Mirt { .. } => BaseModel::Mirt,
            ExerciseParams::Dina { .. } => BaseModel::Dina,
        }
    }
}

/// Personalized proficiency of one student: sigmoid of their row of the
/// trainable proficiency matrix.
pub fn person_proficiency(s_matrix: &Array, student: usize) -> Result<Vec<f64>> {
    if student >= s_matrix.rows() {
        return Err(HcdError::Index {
            what: "student",
            id: student,
            len: s_matrix.rows(),
        });
    }
    Ok(s_matrix.row(student).iter().map(|&v| sigmoid(v)).collect())
}

/// Adaptive convex fusion of the hierarchy and person proficiencies.
/// Returns the fused vector and the weight alpha = sigmoid(fusion logit).
pub fn fuse(theta_person: &[f64], theta_hierarchy: &[f64], fusion_logit: f64) -> (Vec<f64>, f64) {
    debug_assert_eq!(theta_person.len(), theta_hierarchy.len());
    let alpha = sigmoid(fusion_logit);
    let theta = theta_person
        .iter()
        .zip(theta_hierarchy)
        .map(|(&p, &h)| p + alpha * (h - p))
        .collect();
    (theta, alpha)
}

pub fn predict_ncdm(
    theta: &[f64],
    exercise: usize,
    diff: &Array,
    disc: &[f64],
    head: &NcdmHead,
    q: &QMatrix,
) -> Result<f64> {
    let mask = q.row(exercise)?;
    let x: Vec<f64> = theta
        .iter()
        .enumerate()
        .map(|(j, &t)| ((t - diff.get(exercise, j)) * mask[j] as f64) * disc[exercise])
        .collect();
    Ok(head.forward(&x))
}

/// Unidimensional IRT over the Q-masked mean of the proficiency vector.
pub fn predict_irt(
    theta: &[f64],
    exercise: usize,
    b: &[f64],
    disc: &[f64],
    q: &QMatrix,
    scale: f64,
) -> Result<f64> {
    let mask = q.row(exercise)?;
    let count = mask.iter().filter(|&&v| v == 1).count();
    let recip = if count > 0 { 1.0 / count as f64 } else { 0.0 };
    let sum: f64 = theta.iter().zip(mask).map(|(&t, &m)| t * m as f64).sum();
    let theta_bar = sum * recip;
    Ok(sigmoid(
        ((theta_bar - b[exercise]) * disc[exercise]) * scale,
    ))
}

pub fn predict_mirt(
    theta: &[f64],
    exercise: usize,
    a: &Array,
    b: &[f64],
    q: &QMatrix,
) -> Result<f64> {
    let mask = q.row(exercise)?;
    let s: f64 = theta
        .iter()
        .enumerate()
        .map(|(j, &t)| (a.get(exercise, j) * mask[j] as f64) * t)
        .sum();
    Ok(sigmoid(s - b[exercise]))
}

/// DINA with the product-of-proficiencies relaxation of the conjunctive
/// mastery rule, so the model stays differentiable.
pub fn predict_dina(
    theta: &[f64],
    exercise: usize,
    guess: &[f64],
    slip: &[f64],
    q: &QMatrix,
) -> Result<f64> {
    let mask = q.row(exercise)?;
    let mut eta = 1.0;
    for (j, &m) in mask.iter().enumerate() {
        if m == 1 {
            eta *= theta[j];
        }
    }
    let (g, s) = (guess[exercise], slip[exercise]);
    Ok(g + (1.0 - (g + s)) * eta)
}

/// Dispatches to the interaction function matching the parameter set.
pub fn predict(
    params: &ExerciseParams,
    theta: &[f64],
    exercise: usize,
    q: &QMatrix,
    scale: f64,
) -> Result<f64> {
    match params {
        ExerciseParams::Ncdm { diff, disc, head } => {
            predict_ncdm(theta, exercise, diff, disc, head, q)
        }
        ExerciseParams::Irt { b, disc } => predict_irt(theta, exercise, b, disc, q, scale),
        ExerciseParams::Mirt { a, b } => predict_mirt(theta, exercise, a, b, q),
        ExerciseParams::Dina { guess, slip } => predict_dina(theta, exercise, guess, slip, q),
    }
}

/// Baseline diagnoser: uniform(0, 1) proficiencies, seeded.
pub fn random_diagnoser(n: usize, k: usize, seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * k).map(|_| rng.random_range(0.0..1.0)).collect();
    Array::from_vec(n, k, data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head_with(fill: impl Fn(usize) -> f64, k: usize) -> NcdmHead {
        let mk = |r: usize, c: usize, offset: usize| {
            Array::from_vec(r, c, (0..r * c).map(|i| fill(i + offset)).collect()).unwrap()
        };
        NcdmHead {
            w1: mk(k, 8, 0),
            b1: Array::zeros(1, 8),
            w2: mk(8, 4, 100),
            b2: Array::zeros(1, 4),
            w3: mk(4, 1, 200),
            b3: Array::zeros(1, 1),
        }
    }

    fn positive_head(k: usize) -> NcdmHead {
        head_with(|i| 0.05 + (i % 7) as f64 * 0.04, k)
    }

    #[test]
    fn person_proficiency_analytic_and_oracle() {
        let s = Array::from_vec(2, 3, vec![0.0, 0.0, 0.0, 3.0_f64.ln(), 0.0, -1.0]).unwrap();
        let p0 = person_proficiency(&s, 0).unwrap();
        assert!(p0.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let p1 = person_proficiency(&s, 1).unwrap();
        assert!((p1[0] - 0.75).abs() < 1e-15);
        assert!(person_proficiency(&s, 2).is_err());

        // equals sigmoid(one-hot(s) . S)
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s =
            Array::from_vec(4, 3, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        for student in 0..4 {
            let direct = person_proficiency(&s, student).unwrap();
            for j in 0..3 {
                let mut dot = 0.0;
                for row in 0..4 {
                    dot += f64::from(row == student) * s.get(row, j);
                }
                assert!((direct[j] - sigmoid(dot)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fuse_midpoint_fixed_point_and_saturation() {
        let p = vec![0.2, 0.8];
        let h = vec![0.6, 0.4];
        let (theta, alpha) = fuse(&p, &h, 0.0);
        assert_eq!(alpha, 0.5);
        assert!((theta[0] - 0.4).abs() < 1e-15 && (theta[1] - 0.6).abs() < 1e-15);

        let (same, _) = fuse(&p, &p, 1.3);
        assert_eq!(same, p);

        let (sat, _) = fuse(&p, &h, 20.0);
        for (t, hh) in sat.iter().zip(&h) {
            assert!((t - hh).abs() < 1e-8);
        }
    }

    #[test]
    fn fuse_stays_in_the_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let p: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
            let h: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
            let logit: f64 = rng.random_range(-6.0..6.0);
            let (theta, _) = fuse(&p, &h, logit);
            for j in 0..5 {
                assert!(theta[j] >= p[j].min(h[j]) - 1e-12);
                assert!(theta[j] <= p[j].max(h[j]) + 1e-12);
            }
        }
    }

    #[test]
    fn ncdm_masking_and_zero_gap() {
        let k = 3;
        let q = QMatrix::new(2, k, vec![1, 1, 0, 0, 0, 1]).unwrap();
        let diff = Array::filled(2, k, 0.4);
        let disc = vec![0.8, 0.8];
        let head = positive_head(k);

        // theta equals difficulty -> x = 0 -> output is the bias response
        let y0 = predict_ncdm(&[0.4, 0.4, 0.4], 0, &diff, &disc, &head, &q).unwrap();
        let bias_only = head.forward(&[0.0; 3]);
        assert!((y0 - bias_only).abs() < 1e-15);

        // off-mask concepts cannot move the prediction
        let y1 = predict_ncdm(&[0.9, 0.2, 0.1], 0, &diff, &disc, &head, &q).unwrap();
        let y2 = predict_ncdm(&[0.9, 0.2, 0.99], 0, &diff, &disc, &head, &q).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn ncdm_is_monotone_on_required_concepts() {
        let k = 4;
        let q = QMatrix::new(1, k, vec![1, 1, 0, 1]).unwrap();
        let diff = Array::filled(1, k, 0.5);
        let disc = vec![0.7];
        let head = positive_head(k);
        for j in [0usize, 1, 3] {
            let mut prev = f64::NEG_INFINITY;
            for step in 0..100 {
                let mut theta = vec![0.3; k];
                theta[j] = step as f64 / 99.0;
                let y = predict_ncdm(&theta, 0, &diff, &disc, &head, &q).unwrap();
                assert!(y >= prev - 1e-12, "concept {j} step {step}");
                prev = y;
            }
        }
    }

    #[test]
    fn irt_symmetry_and_monotonicity() {
        let q = QMatrix::new(1, 2, vec![1, 1]).unwrap();
        let b = vec![0.5];
        let disc = vec![0.9];
        // masked mean equals b -> 0.5
        let y = predict_irt(&[0.5, 0.5], 0, &b, &disc, &q, DISC_SCALE).unwrap();
        assert!((y - 0.5).abs() < 1e-15);
        // zero discrimination -> 0.5 whatever theta
        let y = predict_irt(&[0.99, 0.99], 0, &b, &[0.0], &q, DISC_SCALE).unwrap();
        assert!((y - 0.5).abs() < 1e-15);

        let mut prev = 0.0;
        for step in 0..50 {
            let t = step as f64 / 49.0;
            let y = predict_irt(&[t, t], 0, &b, &disc, &q, DISC_SCALE).unwrap();
            assert!(y > prev);
            prev = y;
        }
    }

    #[test]
    fn mirt_symmetry_and_constant_cases() {
        let q = QMatrix::new(1, 2, vec![1, 1]).unwrap();
        let a = Array::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        // (Q o a) . theta == b -> 0.5
        let y = predict_mirt(&[0.3, 0.4], 0, &a, &[0.7], &q).unwrap();
        assert!((y - 0.5).abs() < 1e-15);
        // a = 0 -> constant in theta
        let a0 = Array::zeros(1, 2);
        let y1 = predict_mirt(&[0.1, 0.1], 0, &a0, &[0.3], &q).unwrap();
        let y2 = predict_mirt(&[0.9, 0.9], 0, &a0, &[0.3], &q).unwrap();
        assert_eq!(y1, y2);
        assert!((y1 - sigmoid(-0.3)).abs() < 1e-15);
    }

    #[test]
    fn dina_limits_and_hand_case() {
        let q = QMatrix::new(1, 2, vec![1, 1]).unwrap();
        let y = predict_dina(&[1.0, 1.0], 0, &[0.2], &[0.1], &q).unwrap();
        assert!((y - 0.9).abs() < 1e-15); // 1 - slip
        let y = predict_dina(&[0.0, 1.0], 0, &[0.2], &[0.1], &q).unwrap();
        assert!((y - 0.2).abs() < 1e-15); // guess
                                          // guess 0.2, slip 0.1, eta 0.5 -> 0.55
        let y = predict_dina(&[0.5, 1.0], 0, &[0.2], &[0.1], &q).unwrap();
        assert!((y - 0.55).abs() < 1e-15);
    }

    #[test]
    fn dina_respects_guess_slip_bounds() {
        let q = QMatrix::new(1, 3, vec![1, 1, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let theta: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let g = rng.random_range(0.0..0.5);
            let s = rng.random_range(0.0..0.5);
            let y = predict_dina(&theta, 0, &[g], &[s], &q).unwrap();
            assert!(y >= g - 1e-12 && y <= 1.0 - s + 1e-12);
        }
    }

    #[test]
    fn dispatch_matches_direct_calls_bitwise_and_stays_in_unit_interval() {
        let k = 3;
        let q = QMatrix::new(2, k, vec![1, 0, 1, 1, 1, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let diff = Array::from_vec(
            2,
            k,
            (0..2 * k).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let a = Array::from_vec(
            2,
            k,
            (0..2 * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let head = positive_head(k);
        let sets = [
            ExerciseParams::Ncdm {
                diff: diff.clone(),
                disc: vec![0.4, 0.9],
                head: head.clone(),
            },
            ExerciseParams::Irt {
                b: vec![0.3, 0.6],
                disc: vec![0.5, 0.7],
            },
            ExerciseParams::Mirt {
                a: a.clone(),
                b: vec![0.2, -0.4],
            },
            ExerciseParams::Dina {
                guess: vec![0.1, 0.3],
                slip: vec![0.2, 0.05],
            },
        ];
        for _ in 0..50 {
            let theta: Vec<f64> = (0..k).map(|_| rng.random_range(0.001..0.999)).collect();
            for e in 0..2 {
                for params in &sets {
                    let via_dispatch = predict(params, &theta, e, &q, DISC_SCALE).unwrap();
                    let direct = match params {
                        ExerciseParams::Ncdm { diff, disc, head } => {
                            predict_ncdm(&theta, e, diff, disc, head, &q).unwrap()
                        }
                        ExerciseParams::Irt { b, disc } => {
                            predict_irt(&theta, e, b, disc, &q, DISC_SCALE).unwrap()
                        }
                        ExerciseParams::Mirt { a, b } => predict_mirt(&theta, e, a, b, &q).unwrap(),
                        ExerciseParams::Dina { guess, slip } => {
                            predict_dina(&theta, e, guess, slip, &q).unwrap()
                        }
                    };
                    assert_eq!(via_dispatch.to_bits(), direct.to_bits());
                    assert!(via_dispatch > 0.0 && via_dispatch < 1.0);
                }
            }
        }
    }

    #[test]
    fn masking_invariance_for_mirt_and_dina() {
        let k = 3;
        let q = QMatrix::new(1, k, vec![1, 0, 1]).unwrap();
        let a = Array::from_vec(1, k, vec![0.5, 2.0, -0.3]).unwrap();
        let y1 = predict_mirt(&[0.2, 0.1, 0.9], 0, &a, &[0.1], &q).unwrap();
        let y2 = predict_mirt(&[0.2, 0.99, 0.9], 0, &a, &[0.1], &q).unwrap();
        assert_eq!(y1, y2);

        let y1 = predict_dina(&[0.2, 0.1, 0.9], 0, &[0.1], &[0.1], &q).unwrap();
        let y2 = predict_dina(&[0.2, 0.99, 0.9], 0, &[0.1], &[0.1], &q).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn unknown_base_is_a_configuration_error() {
        assert!(matches!(
            "gpt".parse::<BaseModel>(),
            Err(HcdError::Config(_))
        ));
        assert_eq!("NCDM".parse::<BaseModel>().unwrap(), BaseModel::Ncdm);
    }

    #[test]
    fn random_diagnoser_is_seeded_and_in_range() {
        let a = random_diagnoser(10, 4, 7);
        let b = random_diagnoser(10, 4, 7);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_ne!(a, random_diagnoser(10, 4, 8));
    }
}
