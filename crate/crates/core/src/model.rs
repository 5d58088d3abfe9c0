//! End-to-end model assembly.
//!
//! Training builds one tape per mini-batch: the hierarchy stage runs once on
//! the g x k level matrix, per-interaction quantities are gathered into
//! batch matrices, and the three prediction heads (hierarchy, person,
//! integration) feed a summed cross-entropy loss. Evaluation uses the pure
//! interaction functions from `cdm` on extracted parameter values; a test
//! pins both routes to the same numbers.

use crate::array::{sigmoid, Array};
use crate::autodiff::{NodeId, Tape};
use crate::cdm::{BaseModel, ExerciseParams, NcdmHead};
use crate::data::{Dataset, QMatrix};
use crate::error::{HcdError, Result};
use crate::hierarchy::{hierarchy_forward, Ablation, CeaAttention, RsaChoices};
use crate::params::{Binding, ParamStore};

/// Everything needed to rebuild the computation, independent of the data.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub base: BaseModel,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub g: usize,
    pub heads: usize,
    pub kernel_widths: Vec<usize>,
    pub hidden: (usize, usize),
    pub attention: CeaAttention,
    pub ablation: Ablation,
    /// Train the bare base model without the hierarchy stage or fusion.
    pub plain: bool,
    pub disc_scale: f64,
}

/// One mini-batch of interactions in flat column form.
pub struct Batch {
    pub students: Vec<usize>,
    pub exercises: Vec<usize>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn from_interactions(interactions: &[crate::data::Interaction]) -> Batch {
        Batch {
            students: interactions.iter().map(|it| it.student).collect(),
            exercises: interactions.iter().map(|it| it.exercise).collect(),
            labels: interactions
                .iter()
                .map(|it| f64::from(it.response))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.students.len()
    }

    pub fn is_empty(&self) -> bool {
        self.students.is_empty()
    }
}

/// Diagnosed state of every student.
#[derive(Debug, Clone)]
pub struct Diagnosis {
    /// n x k personalized proficiency.
    pub theta_person: Array,
    /// Level-shared component; absent for plain models.
    pub hierarchy: Option<HierarchyDiagnosis>,
    /// n x k fused proficiency (equals `theta_person` for plain models).
    pub fused: Array,
}

#[derive(Debug, Clone)]
pub struct HierarchyDiagnosis {
    /// g x k per-level proficiency rows.
    pub theta_hierarchy: Array,
    /// Fusion weight alpha per student.
    pub alpha: Vec<f64>,
}

impl ModelSpec {
    /// Q-mask of a batch as a constant B x k array.
    fn batch_mask(&self, q: &QMatrix, exercises: &[usize]) -> Result<Array> {
        let mut mask = Array::zeros(exercises.len(), self.k);
        for (i, &e) in exercises.iter().enumerate() {
            for (j, &v) in q.row(e)?.iter().enumerate() {
                mask.set(i, j, v as f64);
            }
        }
        Ok(mask)
    }

    /// Batched interaction function on the tape: theta (B x k) to predicted
    /// probabilities (B x 1). Mirrors the pure functions in `cdm` exactly.
    fn predict_on_tape(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        theta: NodeId,
        exercises: &[usize],
        q: &QMatrix,
    ) -> Result<NodeId> {
        let mask = self.batch_mask(q, exercises)?;
        let mask_node = tape.leaf(mask.clone());
        match self.base {
            BaseModel::Ncdm => {
                let diff_raw = binding.node("ex.diff")?;
                let disc_raw = binding.node("ex.disc")?;
                let diff_rows = tape.gather_rows(diff_raw, exercises)?;
                let diff = tape.sigmoid(diff_rows);
                let disc_rows = tape.gather_rows(disc_raw, exercises)?;
                let disc = tape.sigmoid(disc_rows);
                let gap = tape.sub(theta, diff)?;
                let masked = tape.mul(gap, mask_node)?;
                let x = tape.mul_col_broadcast(masked, disc)?;
                let mut h = x;
                for (w_name, b_name) in [
                    ("ncdm.w1", "ncdm.b1"),
                    ("ncdm.w2", "ncdm.b2"),
                    ("ncdm.w3", "ncdm.b3"),
                ] {
                    let w = binding.node(w_name)?;
                    let b = binding.node(b_name)?;
                    let lin = tape.matmul(h, w)?;
                    let biased = tape.add_row(lin, b)?;
                    h = tape.sigmoid(biased);
                }
                Ok(h)
            }
            BaseModel::Irt => {
                let b_col = tape.gather_rows(binding.node("ex.b")?, exercises)?;
                let disc_rows = tape.gather_rows(binding.node("ex.disc")?, exercises)?;
                let disc = tape.sigmoid(disc_rows);
                let recip = Array::col_vec(
                    exercises
                        .iter()
                        .map(|&e| {
                            let count = q.row(e).map(|r| r.iter().filter(|&&v| v == 1).count())?;
                            Ok(if count > 0 { 1.0 / count as f64 } else { 0.0 })
                        })
                        .collect::<Result<Vec<f64>>>()?,
                );
                let recip_node = tape.leaf(recip);
                let masked = tape.mul(theta, mask_node)?;
                let sums = tape.row_sum(masked);
                let theta_bar = tape.mul(sums, recip_node)?;
                let gap = tape.sub(theta_bar, b_col)?;
                let scaled = tape.mul(gap, disc)?;
                let logits = tape.scale(scaled, self.disc_scale);
                Ok(tape.sigmoid(logits))
            }
            BaseModel::Mirt => {
                let a_rows = tape.gather_rows(binding.node("ex.a")?, exercises)?;
                let b_col = tape.gather_rows(binding.node("ex.b")?, exercises)?;
                let masked_a = tape.mul(a_rows, mask_node)?;
                let prod = tape.mul(masked_a, theta)?;
                let s = tape.row_sum(prod);
                let logits = tape.sub(s, b_col)?;
                Ok(tape.sigmoid(logits))
            }
            BaseModel::Dina => {
                let eta = tape.prod_masked_rows(theta, &mask)?;
                let guess_raw = tape.gather_rows(binding.node("ex.guess")?, exercises)?;
                let guess_sig = tape.sigmoid(guess_raw);
                let guess = tape.scale(guess_sig, 0.5);
                let slip_raw = tape.gather_rows(binding.node("ex.slip")?, exercises)?;
                let slip_sig = tape.sigmoid(slip_raw);
                let slip = tape.scale(slip_sig, 0.5);
                let gs = tape.add(guess, slip)?;
                let ones = tape.leaf(Array::filled(exercises.len(), 1, 1.0));
                let one_minus = tape.sub(ones, gs)?;
                let term = tape.mul(one_minus, eta)?;
                tape.add(guess, term)
            }
        }
    }

    /// Builds the full training loss for a batch on the tape and returns the
    /// scalar loss node. For plain models this is the single-head loss; for
    /// the wrapped model it is the sum of the hierarchy, person, and
    /// integration head losses.
    pub fn forward_loss(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        batch: &Batch,
        q: &QMatrix,
        levels: &[usize],
        choices: &RsaChoices,
    ) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(HcdError::Contract("empty batch".into()));
        }
        let s_node = binding.node("student.s")?;
        let theta_p_raw = tape.gather_rows(s_node, &batch.students)?;
        let theta_p = tape.sigmoid(theta_p_raw);

        if self.plain {
            let y = self.predict_on_tape(tape, binding, theta_p, &batch.exercises, q)?;
            return tape.bce_sum(y, &batch.labels);
        }

        let hier = hierarchy_forward(
            tape,
            binding,
            self.heads,
            self.attention,
            self.ablation,
            choices,
        )?;
        let batch_levels: Vec<usize> = batch.students.iter().map(|&s| levels[s]).collect();
        let theta_h = tape.gather_rows(hier.theta, &batch_levels)?;

        let e_node = binding.node("student.e_person")?;
        let logits = tape.gather_rows(e_node, &batch.students)?;
        let alpha = tape.sigmoid(logits);
        let gap = tape.sub(theta_h, theta_p)?;
        let weighted = tape.mul_col_broadcast(gap, alpha)?;
        let fused = tape.add(theta_p, weighted)?;

        let y_h = self.predict_on_tape(tape, binding, theta_h, &batch.exercises, q)?;
        let y_p = self.predict_on_tape(tape, binding, theta_p, &batch.exercises, q)?;
        let y_i = self.predict_on_tape(tape, binding, fused, &batch.exercises, q)?;

        let loss_h = tape.bce_sum(y_h, &batch.labels)?;
        let loss_p = tape.bce_sum(y_p, &batch.labels)?;
        let loss_i = tape.bce_sum(y_i, &batch.labels)?;
        let hp = tape.add(loss_h, loss_p)?;
        tape.add(hp, loss_i)
    }

    /// The g x k per-level proficiency matrix, evaluated deterministically
    /// (RSA visits all levels).
    pub fn hierarchy_matrix(&self, store: &ParamStore) -> Result<Array> {
        if self.plain {
            return Err(HcdError::Contract(
                "plain models have no hierarchy stage".into(),
            ));
        }
        let mut tape = Tape::new();
        let binding = Binding::bind(store, &mut tape);
        let nodes = hierarchy_forward(
            &mut tape,
            &binding,
            self.heads,
            self.attention,
            self.ablation,
            &RsaChoices::All,
        )?;
        Ok(tape.value(nodes.theta).clone())
    }

    /// Post-activation exercise parameters for the pure prediction path.
    pub fn exercise_params(&self, store: &ParamStore) -> Result<ExerciseParams> {
        Ok(match self.base {
            BaseModel::Ncdm => ExerciseParams::Ncdm {
                diff: store.get("ex.diff")?.map(sigmoid),
                disc: store
                    .get("ex.disc")?
                    .data()
                    .iter()
                    .map(|&v| sigmoid(v))
                    .collect(),
                head: NcdmHead {
                    w1: store.get("ncdm.w1")?.clone(),
                    b1: store.get("ncdm.b1")?.clone(),
                    w2: store.get("ncdm.w2")?.clone(),
                    b2: store.get("ncdm.b2")?.clone(),
                    w3: store.get("ncdm.w3")?.clone(),
                    b3: store.get("ncdm.b3")?.clone(),
                },
            },
            BaseModel::Irt => ExerciseParams::Irt {
                b: store.get("ex.b")?.data().to_vec(),
                disc: store
                    .get("ex.disc")?
                    .data()
                    .iter()
                    .map(|&v| sigmoid(v))
                    .collect(),
            },
            BaseModel::Mirt => ExerciseParams::Mirt {
                a: store.get("ex.a")?.clone(),
                b: store.get("ex.b")?.data().to_vec(),
            },
            BaseModel::Dina => ExerciseParams::Dina {
                guess: store
                    .get("ex.guess")?
                    .data()
                    .iter()
                    .map(|&v| 0.5 * sigmoid(v))
                    .collect(),
                slip: store
                    .get("ex.slip")?
                    .data()
                    .iter()
                    .map(|&v| 0.5 * sigmoid(v))
                    .collect(),
            },
        })
    }

    /// Full per-student diagnosis from trained parameters.
    pub fn diagnose(&self, store: &ParamStore, levels: &[usize]) -> Result<Diagnosis> {
        let s = store.get("student.s")?;
        let theta_person = s.map(sigmoid);
        if self.plain {
            return Ok(Diagnosis {
                fused: theta_person.clone(),
                theta_person,
                hierarchy: None,
            });
        }
        if levels.len() != self.n {
            return Err(HcdError::Contract(format!(
                "levels cover {} students, model has {}",
                levels.len(),
                self.n
            )));
        }
        let theta_hierarchy = self.hierarchy_matrix(store)?;
        let e_person = store.get("student.e_person")?;
        let mut fused = Array::zeros(self.n, self.k);
        let mut alpha = Vec::with_capacity(self.n);
        for s_id in 0..self.n {
            let h_row = theta_hierarchy.row(levels[s_id]);
            let p_row = theta_person.row(s_id);
            let (theta, a) = crate::cdm::fuse(p_row, h_row, e_person.get(s_id, 0));
            for (j, v) in theta.iter().enumerate() {
                fused.set(s_id, j, *v);
            }
            alpha.push(a);
        }
        Ok(Diagnosis {
            theta_person,
            hierarchy: Some(HierarchyDiagnosis {
                theta_hierarchy,
                alpha,
            }),
            fused,
        })
    }

    /// Integration-head predictions for a list of interactions via the pure
    /// path (the deliverable model output).
    pub fn predict_interactions(
        &self,
        store: &ParamStore,
        dataset: &Dataset,
        interactions: &[crate::data::Interaction],
    ) -> Result<Vec<f64>> {
        let levels: Vec<usize> = match &dataset.hierarchy {
            Some(h) => h.levels.clone(),
            None if self.plain => vec![0; self.n],
            None => {
                return Err(HcdError::Contract(
                    "prediction requires an assigned hierarchy".into(),
                ))
            }
        };
        let diagnosis = self.diagnose(store, &levels)?;
        let params = self.exercise_params(store)?;
        interactions
            .iter()
            .map(|it| {
                crate::cdm::predict(
                    &params,
                    diagnosis.fused.row(it.student),
                    it.exercise,
                    &dataset.q,
                    self.disc_scale,
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use crate::train::{init_params, TrainConfig};

    fn toy_spec(base: BaseModel, plain: bool) -> (ModelSpec, Dataset) {
        let (dataset, _) = synth_generate(&SynthConfig {
            n: 12,
            m: 6,
            k: 4,
            g: 3,
            seed: 3,
            guess: 0.1,
            slip: 0.1,
        })
        .unwrap();
        let cfg = TrainConfig {
            base,
            plain,
            hidden1: 8,
            hidden2: 4,
            ..TrainConfig::default()
        };
        let spec = cfg.model_spec(&dataset).unwrap();
        (spec, dataset)
    }

    #[test]
    fn tape_and_pure_predictions_agree() {
        for base in BaseModel::ALL {
            let (spec, dataset) = toy_spec(base, false);
            let store = init_params(&spec, 7);
            let levels = dataset.hierarchy.as_ref().unwrap().levels.clone();

            // tape route: fused head probabilities
            let batch = Batch::from_interactions(&dataset.interactions);
            let mut tape = Tape::new();
            let binding = Binding::bind(&store, &mut tape);
            let s_node = binding.node("student.s").unwrap();
            let raw = tape.gather_rows(s_node, &batch.students).unwrap();
            let theta_p = tape.sigmoid(raw);
            let hier = hierarchy_forward(
                &mut tape,
                &binding,
                spec.heads,
                spec.attention,
                spec.ablation,
                &RsaChoices::All,
            )
            .unwrap();
            let batch_levels: Vec<usize> = batch.students.iter().map(|&s| levels[s]).collect();
            let theta_h = tape.gather_rows(hier.theta, &batch_levels).unwrap();
            let e_node = binding.node("student.e_person").unwrap();
            let logits = tape.gather_rows(e_node, &batch.students).unwrap();
            let alpha = tape.sigmoid(logits);
            let gap = tape.sub(theta_h, theta_p).unwrap();
            let weighted = tape.mul_col_broadcast(gap, alpha).unwrap();
            let fused = tape.add(theta_p, weighted).unwrap();
            let y = spec
                .predict_on_tape(&mut tape, &binding, fused, &batch.exercises, &dataset.q)
                .unwrap();
            let tape_preds: Vec<f64> = (0..batch.len()).map(|i| tape.value(y).get(i, 0)).collect();

            // pure route
            let pure_preds = spec
                .predict_interactions(&store, &dataset, &dataset.interactions)
                .unwrap();

            for (i, (a, b)) in tape_preds.iter().zip(&pure_preds).enumerate() {
                assert!(
                    (a - b).abs() < 1e-12,
                    "{base}: interaction {i}: tape {a} vs pure {b}"
                );
            }
        }
    }

    #[test]
    fn same_level_students_share_hierarchy_rows() {
        let (spec, dataset) = toy_spec(BaseModel::Ncdm, false);
        let store = init_params(&spec, 1);
        let levels = &dataset.hierarchy.as_ref().unwrap().levels;
        let diag = spec.diagnose(&store, levels).unwrap();
        let hd = diag.hierarchy.as_ref().unwrap();
        for a in 0..dataset.n {
            for b in 0..dataset.n {
                if levels[a] == levels[b] {
                    assert_eq!(
                        hd.theta_hierarchy.row(levels[a]),
                        hd.theta_hierarchy.row(levels[b])
                    );
                }
            }
        }
        // theta strictly inside (0,1)
        assert!(hd
            .theta_hierarchy
            .data()
            .iter()
            .all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn fused_stays_in_envelope_of_components() {
        let (spec, dataset) = toy_spec(BaseModel::Mirt, false);
        let store = init_params(&spec, 5);
        let levels = &dataset.hierarchy.as_ref().unwrap().levels;
        let diag = spec.diagnose(&store, levels).unwrap();
        let hd = diag.hierarchy.as_ref().unwrap();
        for s in 0..dataset.n {
            let h_row = hd.theta_hierarchy.row(levels[s]);
            for j in 0..dataset.k {
                let p = diag.theta_person.get(s, j);
                let h = h_row[j];
                let f = diag.fused.get(s, j);
                assert!(f >= p.min(h) - 1e-12 && f <= p.max(h) + 1e-12);
            }
        }
    }

    #[test]
    fn plain_model_ignores_hierarchy() {
        let (spec, dataset) = toy_spec(BaseModel::Irt, true);
        let store = init_params(&spec, 2);
        assert!(!store.contains("hier.w_o"));
        assert!(!store.contains("rsa.w_q"));
        let diag = spec.diagnose(&store, &[]).unwrap();
        assert!(diag.hierarchy.is_none());
        assert_eq!(diag.fused, diag.theta_person);
        let preds = spec
            .predict_interactions(&store, &dataset, &dataset.interactions)
            .unwrap();
        assert!(preds.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn mirt_theta_gradient_matches_finite_differences() {
        // gradient of the MIRT head w.r.t. the proficiency input
        let (spec, dataset) = toy_spec(BaseModel::Mirt, false);
        let store = init_params(&spec, 11);
        let exercises = vec![0usize, 3];

        let run = |theta_val: &Array| -> (f64, Array) {
            let mut tape = Tape::new();
            let binding = Binding::bind(&store, &mut tape);
            let theta = tape.leaf(theta_val.clone());
            let y = spec
                .predict_on_tape(&mut tape, &binding, theta, &exercises, &dataset.q)
                .unwrap();
            let loss = tape.sum(y);
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).get(0, 0),
                grads.get(theta).unwrap().clone(),
            )
        };

        let theta0 = Array::from_vec(2, 4, vec![0.3, 0.6, 0.2, 0.9, 0.5, 0.1, 0.8, 0.4]).unwrap();
        let (_, ad) = run(&theta0);
        let h = 1e-4;
        for i in 0..2 {
            for j in 0..4 {
                let mut up = theta0.clone();
                up.set(i, j, theta0.get(i, j) + h);
                let mut down = theta0.clone();
                down.set(i, j, theta0.get(i, j) - h);
                let fd = (run(&up).0 - run(&down).0) / (2.0 * h);
                let a = ad.get(i, j);
                let denom = a.abs().max(fd.abs()).max(1e-4);
                assert!((a - fd).abs() / denom < 1e-4, "({i},{j}): {a} vs {fd}");
            }
        }
    }
}
