//! Evaluation metrics: AUC, ACC, RMSE on held-out predictions and the
//! Degree of Agreement (DOA) on diagnosed proficiencies.

use crate::array::Array;
use crate::data::Dataset;
use crate::error::{HcdError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One scored prediction against its observed label.
#[derive(Debug, Clone, Copy)]
pub struct EvalRecord {
    pub prediction: f64,
    pub label: u8,
    pub student: usize,
    pub exercise: usize,
}

/// Metric block reported per evaluation or per fold.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct FoldMetrics {
    pub auc: f64,
    pub acc: f64,
    pub rmse: f64,
}

/// JSON metric report: headline numbers plus the per-fold breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub acc: f64,
    pub rmse: f64,
    pub doa: Option<f64>,
    pub per_fold: Vec<FoldMetrics>,
}

/// Area under the ROC curve by the sort-rank method; ties contribute 0.5
/// through average ranks. Equals the exact pairwise count.
pub fn auc(records: &[EvalRecord]) -> Result<f64> {
    let positives = records.iter().filter(|r| r.label == 1).count();
    let negatives = records.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(HcdError::UndefinedMetric(format!(
            "AUC needs both classes, got {positives} positive / {negatives} negative"
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[a]
            .prediction
            .partial_cmp(&records[b].prediction)
            .expect("predictions must not be NaN")
    });

    // average ranks within tie groups (ranks are 1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len()
            && records[order[j + 1]].prediction == records[order[i]].prediction
        {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if records[idx].label == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of records whose thresholded prediction equals the label.
pub fn acc(records: &[EvalRecord], threshold: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(HcdError::UndefinedMetric("ACC of an empty sample".into()));
    }
    let hits = records
        .iter()
        .filter(|r| u8::from(r.prediction >= threshold) == r.label)
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// Root mean squared error of predictions against 0/1 labels.
pub fn rmse(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(HcdError::UndefinedMetric("RMSE of an empty sample".into()));
    }
    let sq: f64 = records
        .iter()
        .map(|r| (r.prediction - r.label as f64).powi(2))
        .sum();
    Ok((sq / records.len() as f64).sqrt())
}

pub fn metric_block(records: &[EvalRecord]) -> Result<FoldMetrics> {
    Ok(FoldMetrics {
        auc: auc(records)?,
        acc: acc(records, 0.5)?,
        rmse: rmse(records)?,
    })
}

/// Student count above which DOA falls back to seeded pair subsampling.
pub const DOA_EXACT_LIMIT: usize = 5000;
/// Ordered pairs drawn per concept in the subsampled regime.
const DOA_SAMPLED_PAIRS: usize = 2_000_000;

/// Degree of Agreement between a diagnosed proficiency matrix and observed
/// responses.
///
/// For each concept, every ordered student pair where the first student is
/// diagnosed strictly more proficient is scored on the exercises covering
/// that concept which both answered: among comparisons with differing
/// correctness, the fraction where the more proficient student is the
/// correct one. Pairs with equal proficiency or no informative comparison
/// are skipped; the statistic is the mean over concepts of the mean pair
/// score. Random diagnoses score about 0.5.
pub fn doa(proficiency: &Array, dataset: &Dataset) -> Result<f64> {
    doa_with(proficiency, dataset, DOA_EXACT_LIMIT, 0)
}

/// [`doa`] with an explicit exactness limit; above it, ordered pairs are
/// subsampled with the given seed. Tests pin the exact regime.
pub fn doa_with(
    proficiency: &Array,
    dataset: &Dataset,
    exact_limit: usize,
    seed: u64,
) -> Result<f64> {
    let n = dataset.n;
    let k = dataset.k;
    if proficiency.shape() != (n, k) {
        return Err(HcdError::Contract(format!(
            "proficiency shape {:?} does not match dataset ({n}, {k})",
            proficiency.shape()
        )));
    }

    // first response per (student, exercise); 255 marks unanswered
    const UNANSWERED: u8 = 255;
    let mut responses = vec![UNANSWERED; n * dataset.m];
    for it in &dataset.interactions {
        let slot = &mut responses[it.student * dataset.m + it.exercise];
        if *slot == UNANSWERED {
            *slot = it.response;
        }
    }
    // exercises covering each concept
    let mut by_concept: Vec<Vec<usize>> = vec![Vec::new(); k];
    for e in 0..dataset.m {
        for (j, &req) in dataset.q.row(e)?.iter().enumerate() {
            if req == 1 {
                by_concept[j].push(e);
            }
        }
    }

    let m = dataset.m;
    let pair_score = |a: usize, b: usize, j: usize| -> Option<f64> {
        let (pa, pb) = (proficiency.get(a, j), proficiency.get(b, j));
        let (hi, lo) = if pa > pb {
            (a, b)
        } else if pb > pa {
            (b, a)
        } else {
            return None;
        };
        let mut concordant = 0usize;
        let mut informative = 0usize;
        for &e in &by_concept[j] {
            let ra = responses[hi * m + e];
            let rb = responses[lo * m + e];
            if ra == UNANSWERED || rb == UNANSWERED {
                continue;
            }
            if ra != rb {
                informative += 1;
                if ra == 1 {
                    concordant += 1;
                }
            }
        }
        (informative > 0).then(|| concordant as f64 / informative as f64)
    };

    let mut concept_means = Vec::new();
    if n <= exact_limit {
        for j in 0..k {
            let mut total = 0.0;
            let mut pairs = 0usize;
            for a in 0..n {
                for b in (a + 1)..n {
                    if let Some(s) = pair_score(a, b, j) {
                        total += s;
                        pairs += 1;
                    }
                }
            }
            if pairs > 0 {
                concept_means.push(total / pairs as f64);
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for j in 0..k {
            let mut total = 0.0;
            let mut pairs = 0usize;
            for _ in 0..DOA_SAMPLED_PAIRS {
                let a = rng.random_range(0..n);
                let b = rng.random_range(0..n);
                if a == b {
                    continue;
                }
                if let Some(s) = pair_score(a, b, j) {
                    total += s;
                    pairs += 1;
                }
            }
            if pairs > 0 {
                concept_means.push(total / pairs as f64);
            }
        }
    }

    if concept_means.is_empty() {
        return Err(HcdError::UndefinedMetric(
            "DOA has no comparable student pair on any concept".into(),
        ));
    }
    Ok(concept_means.iter().sum::<f64>() / concept_means.len() as f64)
}

/// Per-student row of the distribution export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionRow {
    pub student: usize,
    pub level: usize,
    pub mean_proficiency: f64,
}

/// Per-student mean proficiency with level labels, ready for density plots.
pub fn distribution_export(
    proficiency: &Array,
    hierarchy: &crate::data::HierarchyAssignment,
) -> Vec<DistributionRow> {
    (0..proficiency.rows())
        .map(|s| DistributionRow {
            student: s,
            level: hierarchy.levels[s],
            mean_proficiency: proficiency.row(s).iter().sum::<f64>() / proficiency.cols() as f64,
        })
        .collect()
}

pub fn distribution_csv(rows: &[DistributionRow]) -> String {
    let mut out = String::from("student_id,level,mean_proficiency\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.student, r.level, r.mean_proficiency
        ));
    }
    out
}

/// Spearman rank correlation. Undefined when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(HcdError::UndefinedMetric(
            "Spearman needs two same-length samples of size >= 2".into(),
        ));
    }
    pearson(&ranks(xs), &ranks(ys))
}

/// Pearson correlation. Undefined when either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(HcdError::UndefinedMetric(
            "Pearson needs two same-length samples of size >= 2".into(),
        ));
    }
    let nf = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx).powi(2);
        vy += (y - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(HcdError::UndefinedMetric(
            "correlation of a constant sample".into(),
        ));
    }
    Ok(cov / (vx * vy).sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Interaction, QMatrix};

    fn rec(prediction: f64, label: u8) -> EvalRecord {
        EvalRecord {
            prediction,
            label,
            student: 0,
            exercise: 0,
        }
    }

    /// O(P*N) pairwise AUC: ties count one half.
    fn pairwise_auc(records: &[EvalRecord]) -> f64 {
        let pos: Vec<f64> = records
            .iter()
            .filter(|r| r.label == 1)
            .map(|r| r.prediction)
            .collect();
        let neg: Vec<f64> = records
            .iter()
            .filter(|r| r.label == 0)
            .map(|r| r.prediction)
            .collect();
        let mut score = 0.0;
        for &p in &pos {
            for &q in &neg {
                if p > q {
                    score += 1.0;
                } else if p == q {
                    score += 0.5;
                }
            }
        }
        score / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_trivial_cases() {
        assert_eq!(auc(&[rec(0.9, 1), rec(0.1, 0)]).unwrap(), 1.0);
        assert_eq!(auc(&[rec(0.5, 1), rec(0.5, 0)]).unwrap(), 0.5);
        assert!(matches!(
            auc(&[rec(0.5, 1), rec(0.4, 1)]),
            Err(HcdError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..50 {
            let records: Vec<EvalRecord> = (0..50)
                .map(|_| {
                    // coarse grid so ties actually occur
                    let p = (rng.random_range(0..20) as f64) / 19.0;
                    rec(p, u8::from(rng.random_bool(0.5)))
                })
                .collect();
            if records.iter().all(|r| r.label == 1) || records.iter().all(|r| r.label == 0) {
                continue;
            }
            let fast = auc(&records).unwrap();
            let slow = pairwise_auc(&records);
            assert!(
                (fast - slow).abs() < 1e-12,
                "trial {trial}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn auc_antiranked_is_one_minus_ranked() {
        let records: Vec<EvalRecord> = (0..20)
            .map(|i| rec(i as f64 / 19.0, u8::from(i % 3 == 0)))
            .collect();
        let flipped: Vec<EvalRecord> = records
            .iter()
            .map(|r| rec(1.0 - r.prediction, r.label))
            .collect();
        let a = auc(&records).unwrap();
        let b = auc(&flipped).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn acc_and_rmse_against_direct_formulas() {
        assert_eq!(acc(&[rec(0.9, 1), rec(0.1, 0)], 0.5).unwrap(), 1.0);
        assert_eq!(acc(&[rec(0.6, 0), rec(0.4, 1)], 0.5).unwrap(), 0.0);
        assert!(matches!(acc(&[], 0.5), Err(HcdError::UndefinedMetric(_))));

        assert_eq!(rmse(&[rec(1.0, 1), rec(0.0, 0)]).unwrap(), 0.0);
        assert_eq!(rmse(&[rec(0.5, 1), rec(0.5, 0)]).unwrap(), 0.5);
        assert!(matches!(rmse(&[]), Err(HcdError::UndefinedMetric(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let records: Vec<EvalRecord> = (0..100)
            .map(|_| rec(rng.random_range(0.0..1.0), u8::from(rng.random_bool(0.4))))
            .collect();
        let direct_acc = records
            .iter()
            .filter(|r| (r.prediction >= 0.5) == (r.label == 1))
            .count() as f64
            / 100.0;
        assert!((acc(&records, 0.5).unwrap() - direct_acc).abs() < 1e-15);
        let direct_rmse = (records
            .iter()
            .map(|r| (r.prediction - r.label as f64).powi(2))
            .sum::<f64>()
            / 100.0)
            .sqrt();
        assert!((rmse(&records).unwrap() - direct_rmse).abs() < 1e-12);
    }

    fn two_student_dataset(r_a: u8, r_b: u8) -> Dataset {
        Dataset {
            n: 2,
            m: 1,
            k: 1,
            interactions: vec![
                Interaction {
                    student: 0,
                    exercise: 0,
                    response: r_a,
                },
                Interaction {
                    student: 1,
                    exercise: 0,
                    response: r_b,
                },
            ],
            q: QMatrix::new(1, 1, vec![1]).unwrap(),
            hierarchy: None,
        }
    }

    #[test]
    fn doa_single_pair_cases() {
        let prof = Array::from_vec(2, 1, vec![0.9, 0.1]).unwrap();
        assert_eq!(doa(&prof, &two_student_dataset(1, 0)).unwrap(), 1.0);
        assert_eq!(doa(&prof, &two_student_dataset(0, 1)).unwrap(), 0.0);
        // equal responses leave no informative comparison
        assert!(matches!(
            doa(&prof, &two_student_dataset(1, 1)),
            Err(HcdError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn doa_is_invariant_under_monotone_transforms() {
        let (ds, _) = crate::data::synth_generate(&crate::data::SynthConfig {
            n: 60,
            m: 12,
            k: 4,
            g: 3,
            seed: 5,
            guess: 0.1,
            slip: 0.1,
        })
        .unwrap();
        let prof = crate::cdm::random_diagnoser(60, 4, 3);
        let squashed = prof.map(|v| v.powi(3) * 0.5 + 0.1);
        let a = doa(&prof, &ds).unwrap();
        let b = doa(&squashed, &ds).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn distribution_export_row_count_and_mean() {
        let prof = Array::filled(4, 3, 0.5);
        let hierarchy = crate::data::HierarchyAssignment {
            levels: vec![0, 1, 1, 0],
            bin_edges: vec![0.0, 0.5, 1.0],
            mean: 0.5,
            std: 0.1,
        };
        let rows = distribution_export(&prof, &hierarchy);
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.mean_proficiency == 0.5));

        // mean of exported means equals the global matrix mean
        let prof = Array::from_vec(2, 2, vec![0.1, 0.3, 0.7, 0.9]).unwrap();
        let hierarchy = crate::data::HierarchyAssignment {
            levels: vec![0, 1],
            bin_edges: vec![0.0, 0.5, 1.0],
            mean: 0.5,
            std: 0.1,
        };
        let rows = distribution_export(&prof, &hierarchy);
        let exported_mean: f64 =
            rows.iter().map(|r| r.mean_proficiency).sum::<f64>() / rows.len() as f64;
        assert!((exported_mean - prof.mean()).abs() < 1e-15);
    }

    #[test]
    fn spearman_detects_monotone_order() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&xs, &[10.0, 20.0, 25.0, 90.0]).unwrap(), 1.0);
        assert_eq!(spearman(&xs, &[9.0, 7.0, 3.0, 1.0]).unwrap(), -1.0);
    }
}
