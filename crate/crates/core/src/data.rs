//! Response-log ingestion, hierarchy mapping, splits, and synthetic data.
//!
//! The on-disk canonical form of a dataset is a directory holding
//! `logs.csv` (`student_id,exercise_id,response`), `q.csv` (one row per
//! exercise, one binary column per knowledge concept) and `meta.json`
//! (`{n,m,k,g,bin_edges,levels,...}`). Ingesting a canonical export
//! reproduces the dataset exactly.

use crate::array::{logit, sigmoid, Array};
use crate::error::{HcdError, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// One observed (student, exercise, correctness) record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub student: usize,
    pub exercise: usize,
    /// 1 for full credit, 0 otherwise.
    pub response: u8,
}

/// Expert-annotated exercise-to-concept matrix, m x k, entries in {0,1}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QMatrix {
    m: usize,
    k: usize,
    entries: Vec<u8>,
}

impl QMatrix {
    /// Validates that entries are binary and every exercise tests at least
    /// one concept.
    pub fn new(m: usize, k: usize, entries: Vec<u8>) -> Result<Self> {
        if entries.len() != m * k {
            return Err(HcdError::Contract(format!(
                "Q-matrix entries length {} does not match {}x{}",
                entries.len(),
                m,
                k
            )));
        }
        for (i, &e) in entries.iter().enumerate() {
            if e > 1 {
                return Err(HcdError::Contract(format!(
                    "Q-matrix entry at ({}, {}) is {}, expected 0 or 1",
                    i / k,
                    i % k,
                    e
                )));
            }
        }
        for e in 0..m {
            if entries[e * k..(e + 1) * k].iter().all(|&v| v == 0) {
                return Err(HcdError::Contract(format!(
                    "Q-matrix row {e} tests no concept"
                )));
            }
        }
        Ok(QMatrix { m, k, entries })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Knowledge concept relevance vector of an exercise (row of Q).
    pub fn row(&self, exercise: usize) -> Result<&[u8]> {
        if exercise >= self.m {
            return Err(HcdError::Index {
                what: "exercise",
                id: exercise,
                len: self.m,
            });
        }
        Ok(&self.entries[exercise * self.k..(exercise + 1) * self.k])
    }

    /// Row of Q as 0.0/1.0 values, for masking.
    pub fn mask_row(&self, exercise: usize) -> Result<Vec<f64>> {
        Ok(self.row(exercise)?.iter().map(|&v| v as f64).collect())
    }
}

/// Per-student level labels derived from mean-score intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyAssignment {
    /// Level index in [0, g) per student.
    pub levels: Vec<usize>,
    /// g + 1 interval edges over [0, 1]; the top edge is inclusive.
    pub bin_edges: Vec<f64>,
    /// Population mean of per-student mean scores.
    pub mean: f64,
    /// Population standard deviation of per-student mean scores.
    pub std: f64,
}

impl HierarchyAssignment {
    pub fn g(&self) -> usize {
        self.bin_edges.len() - 1
    }

    /// Level indices with no assigned student; non-empty output signals
    /// degenerate binning.
    pub fn empty_levels(&self) -> Vec<usize> {
        let g = self.g();
        let mut seen = vec![false; g];
        for &l in &self.levels {
            seen[l] = true;
        }
        (0..g).filter(|&l| !seen[l]).collect()
    }
}

/// A complete dataset: dimensions, interactions, Q-matrix, and (once
/// assigned) the hierarchy labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub interactions: Vec<Interaction>,
    pub q: QMatrix,
    pub hierarchy: Option<HierarchyAssignment>,
}

impl Dataset {
    pub fn g(&self) -> Option<usize> {
        self.hierarchy.as_ref().map(|h| h.g())
    }

    /// Same students/exercises/Q/hierarchy, different interaction subset.
    pub fn with_interactions(&self, interactions: Vec<Interaction>) -> Dataset {
        Dataset {
            n: self.n,
            m: self.m,
            k: self.k,
            interactions,
            q: self.q.clone(),
            hierarchy: self.hierarchy.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.k == 0 {
            return Err(HcdError::EmptyDataset(
                "dataset dimensions must be positive".into(),
            ));
        }
        if self.q.m() != self.m || self.q.k() != self.k {
            return Err(HcdError::Contract(format!(
                "Q-matrix shape {}x{} does not match dataset {}x{}",
                self.q.m(),
                self.q.k(),
                self.m,
                self.k
            )));
        }
        for it in &self.interactions {
            if it.student >= self.n {
                return Err(HcdError::Index {
                    what: "student",
                    id: it.student,
                    len: self.n,
                });
            }
            if it.exercise >= self.m {
                return Err(HcdError::Index {
                    what: "exercise",
                    id: it.exercise,
                    len: self.m,
                });
            }
            if it.response > 1 {
                return Err(HcdError::Contract(format!(
                    "response {} is not in {{0,1}}",
                    it.response
                )));
            }
        }
        if let Some(h) = &self.hierarchy {
            if h.levels.len() != self.n {
                return Err(HcdError::Contract(format!(
                    "hierarchy covers {} students, dataset has {}",
                    h.levels.len(),
                    self.n
                )));
            }
            let g = h.g();
            if g == 0 || g > self.n {
                return Err(HcdError::Contract(format!(
                    "level count {g} out of range for {} students",
                    self.n
                )));
            }
        }
        Ok(())
    }

    /// Per-student mean correctness over this dataset's interactions.
    /// Students without interactions get `None`.
    pub fn mean_scores(&self) -> Vec<Option<f64>> {
        let mut sums = vec![0.0; self.n];
        let mut counts = vec![0usize; self.n];
        for it in &self.interactions {
            sums[it.student] += it.response as f64;
            counts[it.student] += 1;
        }
        (0..self.n)
            .map(|s| {
                if counts[s] == 0 {
                    None
                } else {
                    Some(sums[s] / counts[s] as f64)
                }
            })
            .collect()
    }
}

/// Generating parameters of a synthetic dataset, kept for recovery tests.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// n x k true proficiencies in (0, 1).
    pub proficiency: Array,
    /// m x k per-concept difficulties in (0, 1).
    pub difficulty: Array,
    /// m discriminations in (0, 1); high discrimination damps guess/slip noise.
    pub discrimination: Vec<f64>,
}

// ---- ingestion --------------------------------------------------------------

/// Maps a response token to a correctness label, or `None` for unanswered.
/// "Full credit" counts as correct; "No credit" and "Partial credit" count
/// as incorrect; anything else is dropped.
fn parse_response(token: &str) -> Option<u8> {
    let t = token.trim().to_ascii_lowercase();
    match t.as_str() {
        "1" | "full credit" => Some(1),
        "0" | "no credit" | "partial credit" => Some(0),
        _ => None,
    }
}

/// Reads a response log and Q-matrix, drops students with fewer than
/// `min_records` usable records, and reindexes student ids densely in order
/// of first appearance. Exercise ids must be indices into the Q-matrix.
pub fn ingest_logs(log_file: &Path, q_file: &Path, min_records: usize) -> Result<Dataset> {
    let q = read_q_csv(q_file)?;
    let text = fs::read_to_string(log_file)?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or(HcdError::Parse {
        line: 1,
        msg: "empty log file".into(),
    })?;
    let expected = "student_id,exercise_id,response";
    if header.trim() != expected {
        return Err(HcdError::Parse {
            line: 1,
            msg: format!("expected header `{expected}`, found `{header}`"),
        });
    }

    // (raw student key, exercise, response), unanswered rows dropped
    let mut raw: Vec<(String, usize, u8)> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.splitn(3, ',');
        let student = fields
            .next()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| HcdError::Parse {
                line: line_no,
                msg: "missing student_id".into(),
            })?;
        let exercise_field = fields.next().ok_or_else(|| HcdError::Parse {
            line: line_no,
            msg: "missing exercise_id".into(),
        })?;
        let response_field = fields.next().ok_or_else(|| HcdError::Parse {
            line: line_no,
            msg: "missing response".into(),
        })?;
        let exercise: usize = exercise_field.trim().parse().map_err(|_| HcdError::Parse {
            line: line_no,
            msg: format!("exercise_id `{}` is not an index", exercise_field.trim()),
        })?;
        if exercise >= q.m() {
            return Err(HcdError::Parse {
                line: line_no,
                msg: format!(
                    "exercise_id {} out of range for Q-matrix with {} rows",
                    exercise,
                    q.m()
                ),
            });
        }
        if let Some(response) = parse_response(response_field) {
            raw.push((student.to_string(), exercise, response));
        }
    }

    // count per student, then keep those meeting the record threshold
    let mut counts: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for (s, _, _) in &raw {
        *counts.entry(s.as_str()).or_default() += 1;
    }
    let mut ids: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    let mut interactions = Vec::new();
    for (s, e, r) in &raw {
        if counts[s.as_str()] < min_records {
            continue;
        }
        let next = ids.len();
        let id = *ids.entry(s.as_str()).or_insert(next);
        interactions.push(Interaction {
            student: id,
            exercise: *e,
            response: *r,
        });
    }
    if interactions.is_empty() {
        return Err(HcdError::EmptyDataset(format!(
            "no student has at least {min_records} usable records"
        )));
    }

    let dataset = Dataset {
        n: ids.len(),
        m: q.m(),
        k: q.k(),
        interactions,
        q,
        hierarchy: None,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn read_q_csv(path: &Path) -> Result<QMatrix> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(HcdError::Parse {
        line: 1,
        msg: "empty Q-matrix file".into(),
    })?;
    let k = header.split(',').count();
    let mut entries = Vec::new();
    let mut m = 0;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != k {
            return Err(HcdError::Parse {
                line: line_no,
                msg: format!("expected {k} columns, found {}", fields.len()),
            });
        }
        for f in fields {
            let v: u8 = f.trim().parse().map_err(|_| HcdError::Parse {
                line: line_no,
                msg: format!("Q-matrix entry `{}` is not 0/1", f.trim()),
            })?;
            entries.push(v);
        }
        m += 1;
    }
    QMatrix::new(m, k, entries).map_err(|e| match e {
        HcdError::Contract(msg) => HcdError::Parse { line: 1, msg },
        other => other,
    })
}

// ---- hierarchy mapping -------------------------------------------------------

/// Interior edge offsets in units of sigma: the half-integer ladder
/// {..., -1.5, -0.5, (0,) +0.5, +1.5, ...} truncated or extended
/// symmetrically to g - 1 values (0 included when g - 1 is odd).
fn sigma_ladder(g: usize) -> Vec<f64> {
    let count = g - 1;
    let mut offsets = Vec::with_capacity(count);
    if count % 2 == 1 {
        offsets.push(0.0);
    }
    for i in 0..count / 2 {
        let c = 0.5 + i as f64;
        offsets.push(c);
        offsets.push(-c);
    }
    offsets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    offsets
}

fn level_of(x: f64, edges: &[f64]) -> usize {
    let g = edges.len() - 1;
    for j in 0..g {
        if edges[j] <= x && x < edges[j + 1] {
            return j;
        }
    }
    if x >= edges[g] {
        return g - 1; // top edge inclusive
    }
    0
}

/// Computes level labels for all `n` students from the given interactions.
/// Mean scores live in [0, 1], so the outer edges are pinned at 0 and 1 with
/// sigma-spaced interior edges around the population mean. Students without
/// interactions (possible when statistics come from a training split that
/// misses them) get the middle level.
pub fn assign_hierarchy_over(
    interactions: &[Interaction],
    n: usize,
    g: usize,
) -> Result<HierarchyAssignment> {
    if g == 0 {
        return Err(HcdError::Config("level count g must be at least 1".into()));
    }
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for it in interactions {
        if it.student >= n {
            return Err(HcdError::Index {
                what: "student",
                id: it.student,
                len: n,
            });
        }
        sums[it.student] += it.response as f64;
        counts[it.student] += 1;
    }
    let means: Vec<Option<f64>> = (0..n)
        .map(|s| (counts[s] > 0).then(|| sums[s] / counts[s] as f64))
        .collect();
    let covered: Vec<f64> = means.iter().flatten().copied().collect();
    if covered.is_empty() {
        return Err(HcdError::EmptyDataset(
            "no interactions to derive hierarchy statistics from".into(),
        ));
    }

    let mean = covered.iter().sum::<f64>() / covered.len() as f64;
    let var = covered.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / covered.len() as f64;
    let std = var.sqrt();

    if std == 0.0 {
        // No information to stratify: everyone lands in the middle level.
        let mut edges = vec![0.0];
        edges.extend(vec![mean; g.saturating_sub(1)]);
        edges.push(1.0);
        return Ok(HierarchyAssignment {
            levels: vec![g / 2; n],
            bin_edges: edges,
            mean,
            std,
        });
    }

    let mut edges = Vec::with_capacity(g + 1);
    edges.push(0.0);
    for c in sigma_ladder(g) {
        edges.push((mean + c * std).clamp(0.0, 1.0));
    }
    edges.push(1.0);

    let levels = means
        .iter()
        .map(|m| match m {
            Some(x) => level_of(*x, &edges),
            None => g / 2,
        })
        .collect();

    Ok(HierarchyAssignment {
        levels,
        bin_edges: edges,
        mean,
        std,
    })
}

/// Level labels from a dataset's own interactions; every student must have
/// at least one interaction.
pub fn assign_hierarchy(dataset: &Dataset, g: usize) -> Result<HierarchyAssignment> {
    if dataset.mean_scores().iter().any(|m| m.is_none()) {
        return Err(HcdError::Contract(
            "assign_hierarchy requires every student to have at least one interaction".into(),
        ));
    }
    assign_hierarchy_over(&dataset.interactions, dataset.n, g)
}

// ---- splits -------------------------------------------------------------------

/// Random interaction-level partition, stratified per student so that every
/// student keeps at least one training interaction. Students with fewer than
/// three interactions go entirely to train.
pub fn split(
    dataset: &Dataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (tr, va, te) = ratios;
    if tr <= 0.0 || va <= 0.0 || te <= 0.0 {
        return Err(HcdError::Config("split ratios must be positive".into()));
    }
    if (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(HcdError::Config(format!(
            "split ratios must sum to 1, got {}",
            tr + va + te
        )));
    }

    let mut per_student: Vec<Vec<usize>> = vec![Vec::new(); dataset.n];
    for (i, it) in dataset.interactions.iter().enumerate() {
        per_student[it.student].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buckets: [Vec<Interaction>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for indices in per_student.iter_mut() {
        if indices.is_empty() {
            continue;
        }
        indices.shuffle(&mut rng);
        let total = indices.len();
        let quota = if total < 3 {
            [total, 0, 0]
        } else {
            apportion(total, [tr, va, te])
        };
        let mut cursor = 0;
        for (b, &q) in quota.iter().enumerate() {
            for &idx in &indices[cursor..cursor + q] {
                buckets[b].push(dataset.interactions[idx]);
            }
            cursor += q;
        }
    }

    let [train, valid, test] = buckets;
    Ok((
        dataset.with_interactions(train),
        dataset.with_interactions(valid),
        dataset.with_interactions(test),
    ))
}

/// Largest-remainder apportionment of `total` items over three ratios, with
/// the first bucket guaranteed at least one item.
fn apportion(total: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..total - assigned {
        counts[order[i % 3]] += 1;
    }
    if counts[0] == 0 {
        let donor = if counts[1] >= counts[2] { 1 } else { 2 };
        counts[donor] -= 1;
        counts[0] += 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Interaction-level k-fold split: each interaction lands in exactly one
/// validation fold.
pub fn kfold(dataset: &Dataset, folds: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
    if folds < 2 {
        return Err(HcdError::Config(format!(
            "k-fold needs at least 2 folds, got {folds}"
        )));
    }
    if folds > dataset.interactions.len() {
        return Err(HcdError::Config(format!(
            "{} folds exceed {} interactions",
            folds,
            dataset.interactions.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.interactions.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let total = order.len();
    let base = total / folds;
    let extra = total % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        let valid_idx = &order[start..start + size];
        start += size;
        let valid_set: std::collections::HashSet<usize> = valid_idx.iter().copied().collect();
        let mut train = Vec::with_capacity(total - size);
        let mut valid = Vec::with_capacity(size);
        for (i, it) in dataset.interactions.iter().enumerate() {
            if valid_set.contains(&i) {
                valid.push(*it);
            } else {
                train.push(*it);
            }
        }
        out.push((
            dataset.with_interactions(train),
            dataset.with_interactions(valid),
        ));
    }
    Ok(out)
}

// ---- synthetic data ------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub g: usize,
    pub seed: u64,
    /// Probability of answering correctly without full mastery.
    pub guess: f64,
    /// Probability of answering incorrectly despite full mastery.
    pub slip: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 2000,
            m: 50,
            k: 10,
            g: 6,
            seed: 42,
            guess: 0.1,
            slip: 0.1,
        }
    }
}

/// Spread of per-student offsets around their level center (logit scale).
const STUDENT_NOISE: f64 = 0.25;
/// Spread of per-(student, concept) offsets (logit scale).
const CONCEPT_NOISE: f64 = 0.4;

/// Generates a level-structured dataset with known ground truth.
///
/// Each student sits at a level whose center is equally spaced in (0, 1);
/// proficiency is the center plus student and concept noise on the logit
/// scale. An exercise is answered correctly with probability
/// `guess_e + (1 - guess_e - slip_e) * mastered`, where `mastered` is 1 iff
/// the student's proficiency meets the difficulty on every required concept,
/// and guess/slip noise shrinks with the exercise's discrimination. With
/// `guess = slip = 0` responses are therefore exact.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Dataset, GroundTruth)> {
    if cfg.n == 0 || cfg.m == 0 || cfg.k == 0 || cfg.g == 0 {
        return Err(HcdError::Config("synthetic sizes must be positive".into()));
    }
    if cfg.g > cfg.n {
        return Err(HcdError::Config(format!(
            "level count {} exceeds student count {}",
            cfg.g, cfg.n
        )));
    }
    for (name, v) in [("guess", cfg.guess), ("slip", cfg.slip)] {
        if !(0.0..0.5).contains(&v) {
            return Err(HcdError::Config(format!(
                "{name} must be in [0, 0.5), got {v}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let student_noise = Normal::new(0.0, STUDENT_NOISE).expect("valid normal");
    let concept_noise = Normal::new(0.0, CONCEPT_NOISE).expect("valid normal");

    // True proficiencies around equally spaced level centers.
    let true_levels: Vec<usize> = (0..cfg.n).map(|_| rng.random_range(0..cfg.g)).collect();
    let mut proficiency = Array::zeros(cfg.n, cfg.k);
    for s in 0..cfg.n {
        let center = (true_levels[s] + 1) as f64 / (cfg.g + 1) as f64;
        let base = logit(center) + student_noise.sample(&mut rng);
        for j in 0..cfg.k {
            proficiency.set(s, j, sigmoid(base + concept_noise.sample(&mut rng)));
        }
    }

    // Random Q-matrix, 1..=3 concepts per exercise.
    let max_concepts = cfg.k.min(3);
    let mut q_entries = vec![0u8; cfg.m * cfg.k];
    let mut concept_ids: Vec<usize> = (0..cfg.k).collect();
    for e in 0..cfg.m {
        let c = rng.random_range(1..=max_concepts);
        concept_ids.shuffle(&mut rng);
        for &j in concept_ids.iter().take(c) {
            q_entries[e * cfg.k + j] = 1;
        }
    }
    let q = QMatrix::new(cfg.m, cfg.k, q_entries)?;

    let mut difficulty = Array::zeros(cfg.m, cfg.k);
    for e in 0..cfg.m {
        for j in 0..cfg.k {
            difficulty.set(e, j, rng.random_range(0.0..1.0));
        }
    }
    let discrimination: Vec<f64> = (0..cfg.m).map(|_| rng.random_range(0.0..1.0)).collect();

    // Each student answers a random subset of exercises.
    let lo = (cfg.m / 3).max(1);
    let hi = (2 * cfg.m / 3).max(lo);
    let mut exercise_ids: Vec<usize> = (0..cfg.m).collect();
    let mut interactions = Vec::new();
    for s in 0..cfg.n {
        let count = rng.random_range(lo..=hi);
        exercise_ids.shuffle(&mut rng);
        let mut answered: Vec<usize> = exercise_ids[..count].to_vec();
        answered.sort_unstable();
        for e in answered {
            let mastered = q
                .row(e)?
                .iter()
                .enumerate()
                .filter(|(_, &req)| req == 1)
                .all(|(j, _)| proficiency.get(s, j) >= difficulty.get(e, j));
            let damp = 1.0 - discrimination[e];
            let guess = cfg.guess * damp;
            let slip = cfg.slip * damp;
            let p = guess + (1.0 - guess - slip) * f64::from(mastered);
            let response = u8::from(rng.random_bool(p));
            interactions.push(Interaction {
                student: s,
                exercise: e,
                response,
            });
        }
    }

    let mut dataset = Dataset {
        n: cfg.n,
        m: cfg.m,
        k: cfg.k,
        interactions,
        q,
        hierarchy: None,
    };
    // Hierarchy statistics come from a training split only, mirroring the
    // ingestion pipeline.
    let (train, _, _) = split(&dataset, (0.7, 0.1, 0.2), cfg.seed ^ SPLIT_SALT)?;
    dataset.hierarchy = Some(assign_hierarchy_over(&train.interactions, cfg.n, cfg.g)?);
    dataset.validate()?;

    Ok((
        dataset,
        GroundTruth {
            proficiency,
            difficulty,
            discrimination,
        },
    ))
}

/// Salt applied to the user seed for the internal hierarchy-statistics split.
pub const SPLIT_SALT: u64 = 0x5eed_5711;

// ---- canonical export / import ---------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    n: usize,
    m: usize,
    k: usize,
    g: usize,
    bin_edges: Vec<f64>,
    levels: Vec<usize>,
    mean: f64,
    std: f64,
}

/// Renders the three canonical files as strings (logs.csv, q.csv, meta.json).
pub fn canonical_strings(dataset: &Dataset) -> Result<(String, String, String)> {
    let h = dataset.hierarchy.as_ref().ok_or_else(|| {
        HcdError::Contract("canonical export requires an assigned hierarchy".into())
    })?;

    let mut logs = String::from("student_id,exercise_id,response\n");
    for it in &dataset.interactions {
        logs.push_str(&format!("{},{},{}\n", it.student, it.exercise, it.response));
    }

    let mut qcsv = String::new();
    for j in 0..dataset.k {
        if j > 0 {
            qcsv.push(',');
        }
        qcsv.push_str(&format!("kc_{j}"));
    }
    qcsv.push('\n');
    for e in 0..dataset.m {
        let row = dataset.q.row(e)?;
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        qcsv.push_str(&cells.join(","));
        qcsv.push('\n');
    }

    let meta = Meta {
        n: dataset.n,
        m: dataset.m,
        k: dataset.k,
        g: h.g(),
        bin_edges: h.bin_edges.clone(),
        levels: h.levels.clone(),
        mean: h.mean,
        std: h.std,
    };
    let meta_json = serde_json::to_string_pretty(&meta)?;
    Ok((logs, qcsv, meta_json))
}

/// Writes `logs.csv`, `q.csv`, and `meta.json` into `dir` atomically.
pub fn export_canonical(dataset: &Dataset, dir: &Path) -> Result<()> {
    let (logs, qcsv, meta) = canonical_strings(dataset)?;
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("logs.csv"), logs.as_bytes())?;
    write_atomic(&dir.join("q.csv"), qcsv.as_bytes())?;
    write_atomic(&dir.join("meta.json"), meta.as_bytes())?;
    Ok(())
}

/// Writes the ground-truth proficiency matrix next to a canonical dataset.
pub fn export_ground_truth(gt: &GroundTruth, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = String::new();
    for s in 0..gt.proficiency.rows() {
        let cells: Vec<String> = gt
            .proficiency
            .row(s)
            .iter()
            .map(|v| format!("{v}"))
            .collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    write_atomic(&dir.join("true_proficiency.csv"), csv.as_bytes())
}

/// Reads a canonical dataset directory back into memory. The hierarchy is
/// taken from `meta.json` rather than recomputed.
pub fn import_canonical(dir: &Path) -> Result<Dataset> {
    let mut dataset = ingest_logs(&dir.join("logs.csv"), &dir.join("q.csv"), 1)?;
    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    if meta.n != dataset.n || meta.m != dataset.m || meta.k != dataset.k {
        return Err(HcdError::Contract(format!(
            "meta.json claims n={},m={},k={} but files contain n={},m={},k={}",
            meta.n, meta.m, meta.k, dataset.n, dataset.m, dataset.k
        )));
    }
    dataset.hierarchy = Some(HierarchyAssignment {
        levels: meta.levels,
        bin_edges: meta.bin_edges,
        mean: meta.mean,
        std: meta.std,
    });
    dataset.validate()?;
    Ok(dataset)
}

/// FNV-1a hash of the canonical representation; used to bind checkpoints to
/// the dataset they were trained on.
pub fn fingerprint(dataset: &Dataset) -> Result<u64> {
    let (logs, qcsv, meta) = canonical_strings(dataset)?;
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for part in [logs.as_bytes(), qcsv.as_bytes(), meta.as_bytes()] {
        for &b in part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    Ok(h)
}

/// Writes bytes to a temporary file in the target directory, then renames it
/// into place, so partial outputs are never visible.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| HcdError::Contract(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
