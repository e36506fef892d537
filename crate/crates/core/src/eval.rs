//! Toy-scale evaluation: classifier accuracy on generated samples, a
//! same-seed sample distance, the post-hoc correlation metric, the weight
//! modification norm, the τ sweep and the exhaustive separability suite.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::concept_repr::{corr_loss, CorrKind};
use crate::decoupling::{l1_mean, EraserSet};
use crate::diffusion::{sample, ConceptBank, DenoiserParams, NoiseSchedule, ToyDataset};
use crate::numerics::math::norm2;
use crate::numerics::{Matrix, Rng};
use crate::trainers::{draw_probes, train_sepme, EraseHyper, SepmeMode};
use crate::{Error, Result};

/// Nearest-centroid classifier over data space.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ToyClassifier {
    pub names: Vec<String>,
    pub centroids: Vec<Vec<f64>>,
    /// Seed of the dataset the centroids were fitted on.
    pub seed: u64,
}

impl ToyClassifier {
    /// Centroids of the training samples of every dataset class.
    pub fn fit(data: &ToyDataset, seed: u64) -> Self {
        let (names, centroids) = data
            .classes
            .iter()
            .map(|c| {
                let n = c.samples.rows().max(1) as f64;
                let mut m = alloc::vec![0.0; c.samples.cols()];
                for i in 0..c.samples.rows() {
                    for (mj, x) in m.iter_mut().zip(c.samples.row(i)) {
                        *mj += x / n;
                    }
                }
                (c.name.clone(), m)
            })
            .unzip();
        Self { names, centroids, seed }
    }

    pub fn is_fitted(&self) -> bool {
        !self.centroids.is_empty()
    }

    /// Index of the nearest centroid.
    pub fn classify(&self, x: &[f64]) -> Result<usize> {
        if !self.is_fitted() {
            return Err(Error::UntrainedClassifier);
        }
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centroids.iter().enumerate() {
            let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(best.0)
    }

    /// Fraction of `samples` classified as `name`.
    pub fn accuracy(&self, samples: &[Vec<f64>], name: &str) -> Result<f64> {
        if !self.is_fitted() {
            return Err(Error::UntrainedClassifier);
        }
        let target = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownConcept(name.to_string()))?;
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no samples to classify".into()));
        }
        let mut hits = 0usize;
        for x in samples {
            hits += (self.classify(x)? == target) as usize;
        }
        Ok(hits as f64 / samples.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalSpec {
    pub n_per_concept: usize,
    /// Probes per concept for the correlation metric.
    pub corr_probes: usize,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            n_per_concept: 250,
            corr_probes: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConceptEval {
    pub concept: String,
    pub acc_before: f64,
    pub acc_after: f64,
    /// Mean ℓ2 distance between same-seed samples of the two models.
    pub distance: f64,
    /// Correlation loss between the original and edited representations.
    pub corr: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub concepts: Vec<ConceptEval>,
    /// Mean ℓ1 norm of `θ_edited − θ_dm` over the tensors that differ.
    pub delta_norm: f64,
    pub seed: u64,
}

impl EvalReport {
    pub fn get(&self, concept: &str) -> Option<&ConceptEval> {
        self.concepts.iter().find(|c| c.concept == concept)
    }
}

/// `‖θ_a − θ_b‖_p` over the tensors that differ.
pub fn param_delta_norm(a: &DenoiserParams, b: &DenoiserParams) -> Result<f64> {
    a.check_compatible(b)?;
    let diffs = a
        .named()
        .into_iter()
        .zip(b.named())
        .map(|((_, x), (_, y))| x.sub(y))
        .collect::<Result<Vec<Matrix>>>()?;
    Ok(l1_mean(diffs.iter().filter(|d| !d.is_zero())))
}

/// Mean ℓ2 distance between paired samples.
pub fn sample_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(crate::shape_err!("{} vs {} samples", a.len(), b.len()));
    }
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
            norm2(&d)
        })
        .sum();
    Ok(total / a.len() as f64)
}

fn concept_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64)
}

/// Compares an edited model with the original on each concept.
///
/// Concept `k` is sampled from both models with the same seed, so the
/// distance is zero for unchanged behaviour. Correlation probes are drawn from
/// the concept's dataset class.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    edited: &DenoiserParams,
    theta_dm: &DenoiserParams,
    bank: &ConceptBank,
    concepts: &[&str],
    data: &ToyDataset,
    classifier: &ToyClassifier,
    schedule: &NoiseSchedule,
    spec: &EvalSpec,
) -> Result<EvalReport> {
    if !classifier.is_fitted() {
        return Err(Error::UntrainedClassifier);
    }
    if spec.n_per_concept == 0 {
        return Err(Error::InvalidArgument("n_per_concept must be positive".into()));
    }
    if spec.corr_probes == 0 {
        return Err(Error::InvalidArgument("corr_probes must be positive".into()));
    }
    edited.check_compatible(theta_dm)?;
    let blank = &bank.blank().tokens;
    let mut rows = Vec::with_capacity(concepts.len());
    for (k, name) in concepts.iter().enumerate() {
        let tokens = &bank.get(name)?.tokens;
        let seed = concept_seed(spec.seed, k);
        let before = sample(theta_dm, tokens, schedule, spec.n_per_concept, seed)?;
        let after = sample(edited, tokens, schedule, spec.n_per_concept, seed)?;
        let mut rng = Rng::stream(spec.seed, 1 + k as u64);
        let probes = draw_probes(data, name, schedule, spec.corr_probes, &mut rng)?;
        let corr = corr_loss(tokens, blank, theta_dm, edited, &probes, CorrKind::Product)?;
        let row = ConceptEval {
            concept: (*name).to_string(),
            acc_before: classifier.accuracy(&before, name)?,
            acc_after: classifier.accuracy(&after, name)?,
            distance: sample_distance(&before, &after)?,
            corr,
            samples: spec.n_per_concept,
        };
        if !(row.distance.is_finite() && row.corr.is_finite()) {
            return Err(Error::NonFinite(alloc::format!("evaluation of `{name}`")));
        }
        rows.push(row);
    }
    Ok(EvalReport {
        concepts: rows,
        delta_norm: param_delta_norm(edited, theta_dm)?,
        seed: spec.seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AblationRow {
    pub tau: f64,
    /// Iterations summed over the per-concept runs.
    pub iters_run: usize,
    /// `‖Σ_i Δθ_i‖_p`.
    pub delta_norm: f64,
    pub eval: EvalReport,
}

/// One SepME erase plus evaluation per `τ`, all with the same seed. Every
/// per-concept override in `hyper` is replaced by the swept value.
#[allow(clippy::too_many_arguments)]
pub fn ablate_tau(
    taus: &[f64],
    theta_dm: &DenoiserParams,
    bank: &ConceptBank,
    forgotten: &[&str],
    evaluated: &[&str],
    data: &ToyDataset,
    classifier: &ToyClassifier,
    schedule: &NoiseSchedule,
    hyper: &EraseHyper,
    mode: SepmeMode,
    spec: &EvalSpec,
) -> Result<Vec<AblationRow>> {
    taus.iter()
        .map(|&tau| {
            let h = EraseHyper {
                tau,
                tau_overrides: Vec::new(),
                ..hyper.clone()
            };
            let out = train_sepme(theta_dm, bank, forgotten, data, schedule, &h, mode)?;
            let edited = out.set.apply(forgotten)?;
            Ok(AblationRow {
                tau,
                iters_run: out.reports.iter().map(|r| r.iters_run).sum(),
                delta_norm: param_delta_norm(&edited, theta_dm)?,
                eval: evaluate(&edited, theta_dm, bank, evaluated, data, classifier, schedule, spec)?,
            })
        })
        .collect()
}

/// `n` noised dataset samples over all classes at uniform timesteps.
pub fn random_probes(data: &ToyDataset, schedule: &NoiseSchedule, n: usize, seed: u64) -> Result<Vec<(Vec<f64>, usize)>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.index(data.classes.len());
        let name = data.classes[k].name.clone();
        out.extend(draw_probes(data, &name, schedule, 1, &mut rng)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SuiteCell {
    /// Applied increments in set order.
    pub subset: Vec<String>,
    pub concept: String,
    pub erased: bool,
    /// Correlation metric when erased, largest prediction deviation otherwise.
    pub metric: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Largest subset size the suite enumerates.
pub const SUITE_MAX_CONCEPTS: usize = 5;

/// Probe sets of the separability suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteProbes {
    /// Drawn over all classes; used for every preserved prompt.
    pub shared: Vec<(Vec<f64>, usize)>,
    /// `(increment, probes of its class)`, used when the increment is applied.
    pub erased: Vec<(String, Vec<(Vec<f64>, usize)>)>,
}

impl SuiteProbes {
    /// `n` shared probes from `Rng::new(seed)` and `n` class probes per
    /// increment from `Rng::stream(seed, 1 + k)`.
    pub fn draw(set: &EraserSet, data: &ToyDataset, schedule: &NoiseSchedule, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("suite needs at least one probe".into()));
        }
        let erased = set
            .names()
            .into_iter()
            .enumerate()
            .map(|(k, name)| {
                let mut rng = Rng::stream(seed, 1 + k as u64);
                Ok((name.to_string(), draw_probes(data, name, schedule, n, &mut rng)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shared: random_probes(data, schedule, n, seed)?,
            erased,
        })
    }

    fn class(&self, name: &str) -> Result<&[(Vec<f64>, usize)]> {
        self.erased
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_slice())
            .ok_or_else(|| Error::UnknownConcept(name.to_string()))
    }
}

/// Checks every subset of the increments in `set`.
///
/// A concept inside the subset must have a correlation metric at most its
/// `τ` (from `hyper`) on probes of its own class. Every other increment's
/// concept and the blank prompt must see prediction deviations of at most
/// `tol` on the shared probes.
pub fn separability_suite(
    set: &EraserSet,
    bank: &ConceptBank,
    probes: &SuiteProbes,
    hyper: &EraseHyper,
    tol: f64,
) -> Result<Vec<SuiteCell>> {
    let names: Vec<String> = set.names().into_iter().map(String::from).collect();
    if names.len() > SUITE_MAX_CONCEPTS {
        return Err(Error::InvalidArgument(alloc::format!(
            "suite enumerates at most {SUITE_MAX_CONCEPTS} increments, set has {}",
            names.len()
        )));
    }
    if probes.shared.is_empty() {
        return Err(Error::InvalidArgument("suite needs at least one probe".into()));
    }
    let blank = &bank.blank().tokens;
    let mut cells = Vec::new();
    for mask in 0u32..(1 << names.len()) {
        let subset: Vec<&str> = names
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, n)| n.as_str())
            .collect();
        let edited = set.apply(&subset)?;
        let subset_owned: Vec<String> = subset.iter().map(|s| (*s).to_string()).collect();
        let mut targets: Vec<(String, &Matrix)> = alloc::vec![(bank.blank().name.clone(), blank)];
        for n in &names {
            targets.push((n.clone(), &bank.get(n)?.tokens));
        }
        for (name, tokens) in targets {
            let erased = subset.contains(&name.as_str());
            let (metric, threshold) = if erased {
                let m = corr_loss(tokens, blank, set.base(), &edited, probes.class(&name)?, hyper.corr)?;
                (m, hyper.tau_for(&name))
            } else {
                let m = crate::decoupling::max_prediction_gap(set.base(), &edited, tokens, &probes.shared)?;
                (m, tol)
            };
            cells.push(SuiteCell {
                subset: subset_owned.clone(),
                concept: name,
                erased,
                metric,
                threshold,
                pass: metric <= threshold,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ModelDims;

    fn setup() -> (DenoiserParams, ConceptBank, ToyDataset, NoiseSchedule) {
        let dims = ModelDims {
            timesteps: 20,
            ..ModelDims::default()
        };
        let names: Vec<String> = ["A", "B"].iter().map(|s| (*s).into()).collect();
        let bank = ConceptBank::generate(
            &names.iter().map(|n| (n.clone(), 0)).collect::<Vec<_>>(),
            0,
            dims.tokens,
            dims.d_in,
            1.0,
        )
        .unwrap();
        let data = ToyDataset::generate(&names, 2, 2.0, 0.1, 50, 0).unwrap();
        let sched = crate::diffusion::make_schedule(20, 1e-3, 0.2).unwrap();
        let p = DenoiserParams::init(dims, 1.0, &mut Rng::new(0));
        (p, bank, data, sched)
    }

    #[test]
    fn identity_edit_is_zero_delta() {
        let (p, bank, data, sched) = setup();
        let clf = ToyClassifier::fit(&data, 0);
        let spec = EvalSpec {
            n_per_concept: 8,
            corr_probes: 4,
            seed: 3,
        };
        let r = evaluate(&p, &p, &bank, &["A", "B"], &data, &clf, &sched, &spec).unwrap();
        for c in &r.concepts {
            assert_eq!(c.acc_before, c.acc_after);
            assert_eq!(c.distance, 0.0);
        }
        assert_eq!(r.delta_norm, 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (p, bank, data, sched) = setup();
        let spec = EvalSpec {
            n_per_concept: 0,
            ..EvalSpec::default()
        };
        let clf = ToyClassifier::fit(&data, 0);
        assert!(matches!(
            evaluate(&p, &p, &bank, &["A"], &data, &ToyClassifier::default(), &sched, &EvalSpec::default()),
            Err(Error::UntrainedClassifier)
        ));
        assert!(evaluate(&p, &p, &bank, &["A"], &data, &clf, &sched, &spec).is_err());
    }

    #[test]
    fn classifier_on_training_data() {
        let (_, _, data, _) = setup();
        let clf = ToyClassifier::fit(&data, 0);
        let a: Vec<Vec<f64>> = (0..data.classes[0].samples.rows())
            .map(|i| data.classes[0].samples.row(i).to_vec())
            .collect();
        assert_eq!(clf.accuracy(&a, "A").unwrap(), 1.0);
        assert_eq!(clf.accuracy(&a, "B").unwrap(), 0.0);
    }

    #[test]
    fn distance_is_a_pseudometric() {
        let a = alloc::vec![alloc::vec![0.0, 1.0], alloc::vec![2.0, 2.0]];
        let b = alloc::vec![alloc::vec![3.0, 5.0], alloc::vec![2.0, 2.0]];
        assert_eq!(sample_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(sample_distance(&a, &b).unwrap(), sample_distance(&b, &a).unwrap());
        assert_eq!(sample_distance(&a, &b).unwrap(), 2.5);
    }
}
