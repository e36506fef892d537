use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use super::concept::{Condition, ConceptBank};
use super::dataset::ToyDataset;
use super::denoiser::{backward, forward, ContextKv, KvGrad};
use super::params::{DenoiserParams, ModelDims, ParamScope};
use super::schedule::{forward_diffuse, NoiseSchedule};
use crate::numerics::{Adam, AdamConfig, Rng};
use crate::{Error, Result};

/// One term of the noise-prediction loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DmExample {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
    pub cond: Condition,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainHyper {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Probability that a training example is conditioned on the blank prompt
    /// instead of its own concept.
    pub blank_prob: f64,
    /// Size of the fixed batch used to report the initial and final loss.
    pub eval_batch: usize,
    /// Learning rate of `to_k`/`to_v` relative to `lr`. Zero keeps them at
    /// their initial values.
    pub kv_lr_scale: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            steps: 5000,
            batch: 64,
            seed: 0,
            blank_prob: 0.2,
            eval_batch: 1024,
            kv_lr_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mini-batch loss at every step.
    pub losses: Vec<f64>,
}

/// Mean squared noise-prediction error over all entries, with its gradient.
pub fn dm_loss(params: &DenoiserParams, bank: &ConceptBank, examples: &[DmExample]) -> Result<(f64, DenoiserParams)> {
    let mut grads = params.zeros_like();
    let value = dm_loss_inner(params, bank, examples, Some(&mut grads))?;
    Ok((value, grads))
}

fn dm_loss_inner(
    params: &DenoiserParams,
    bank: &ConceptBank,
    examples: &[DmExample],
    mut grads: Option<&mut DenoiserParams>,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let d = params.dims.data_dim;
    let scale = 1.0 / (examples.len() * d) as f64;
    let mut contexts: BTreeMap<Condition, (ContextKv, KvGrad)> = BTreeMap::new();
    let mut total = 0.0;
    for ex in examples {
        if !contexts.contains_key(&ex.cond) {
            let kv = ContextKv::new(params, bank.tokens(ex.cond))?;
            let kg = KvGrad::zeros(&kv);
            contexts.insert(ex.cond, (kv, kg));
        }
        let (kv, kg) = contexts.get_mut(&ex.cond).expect("inserted above");
        let trace = forward(params, kv, &ex.x_t, ex.t)?;
        let resid: Vec<f64> = trace.output.iter().zip(&ex.eps).map(|(p, e)| p - e).collect();
        total += resid.iter().map(|r| r * r).sum::<f64>();
        if let Some(g) = grads.as_deref_mut() {
            let d_out: Vec<f64> = resid.iter().map(|r| 2.0 * r * scale).collect();
            backward(params, kv, &trace, &d_out, None, g, kg);
        }
    }
    if let Some(g) = grads {
        for (cond, (_, kg)) in &contexts {
            kg.pull_back(bank.tokens(*cond), g)?;
        }
    }
    Ok(total * scale)
}

fn draw_examples(
    dataset: &ToyDataset,
    class_to_bank: &[usize],
    schedule: &NoiseSchedule,
    n: usize,
    blank_prob: f64,
    rng: &mut Rng,
) -> Result<Vec<DmExample>> {
    (0..n)
        .map(|_| {
            let k = rng.index(dataset.classes.len());
            let x0 = dataset.draw(k, rng);
            let cond = if rng.uniform() < blank_prob {
                Condition::Blank
            } else {
                Condition::Concept(class_to_bank[k])
            };
            let t = rng.range_inclusive(1, schedule.steps());
            let eps = rng.normal_vec(dataset.data_dim);
            let x_t = forward_diffuse(x0, t, &eps, schedule)?;
            Ok(DmExample { x_t, t, eps, cond })
        })
        .collect()
}

/// Trains the denoiser from a seeded initialisation with Adam.
///
/// Every dataset class is conditioned on the bank concept of the same name;
/// a `blank_prob` fraction of examples is conditioned on the blank prompt so
/// that it models the union of all classes.
pub fn train_dm(
    dims: ModelDims,
    token_scale: f64,
    dataset: &ToyDataset,
    bank: &ConceptBank,
    schedule: &NoiseSchedule,
    hyper: &TrainHyper,
) -> Result<(DenoiserParams, TrainReport)> {
    if dataset.classes.is_empty() {
        return Err(Error::InvalidArgument("dataset has no classes".into()));
    }
    if dims.timesteps != schedule.steps() || dims.data_dim != dataset.data_dim {
        return Err(crate::shape_err!("model dims do not match schedule or dataset"));
    }
    let class_to_bank = dataset
        .classes
        .iter()
        .map(|c| bank.index_of(&c.name))
        .collect::<Result<Vec<_>>>()?;

    let mut params = DenoiserParams::init(dims, token_scale, &mut Rng::stream(hyper.seed, 0));
    let mut rng = Rng::stream(hyper.seed, 1);
    let eval = draw_examples(
        dataset,
        &class_to_bank,
        schedule,
        hyper.eval_batch.max(1),
        hyper.blank_prob,
        &mut Rng::stream(hyper.seed, 2),
    )?;
    let initial_loss = dm_loss_inner(&params, bank, &eval, None)?;

    let is_kv = |name: &str| ParamScope::KeyValue.contains(name);
    let sizes = |kv: bool| -> Vec<usize> {
        params
            .named()
            .iter()
            .filter(|(n, _)| is_kv(n) == kv)
            .map(|(_, m)| m.as_slice().len())
            .collect()
    };
    let mut opt = Adam::new(AdamConfig::with_lr(hyper.lr), sizes(false));
    let mut opt_kv = Adam::new(AdamConfig::with_lr(hyper.lr * hyper.kv_lr_scale), sizes(true));
    let mut losses = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let batch = draw_examples(dataset, &class_to_bank, schedule, hyper.batch.max(1), hyper.blank_prob, &mut rng)?;
        let (loss, grads) = dm_loss(&params, bank, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("L_DM at step {step}")));
        }
        losses.push(loss);
        let g = grads.named();
        let (kv, rest): (Vec<_>, Vec<_>) = params
            .named_mut()
            .into_iter()
            .zip(g.iter())
            .partition(|((n, _), _)| is_kv(n));
        opt.step(rest.into_iter().map(|((_, p), (_, gm))| (p.as_mut_slice(), gm.as_slice())));
        if hyper.kv_lr_scale != 0.0 {
            opt_kv.step(kv.into_iter().map(|((_, p), (_, gm))| (p.as_mut_slice(), gm.as_slice())));
        }
    }
    let final_loss = dm_loss_inner(&params, bank, &eval, None)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFinite("final L_DM".into()));
    }
    Ok((
        params,
        TrainReport {
            initial_loss,
            final_loss,
            losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use alloc::string::String;

    fn setup() -> (ModelDims, ConceptBank, ToyDataset, NoiseSchedule) {
        let dims = ModelDims {
            timesteps: 50,
            ..ModelDims::default()
        };
        let names: Vec<String> = ["A", "B", "C"].iter().map(|s| (*s).into()).collect();
        let bank = ConceptBank::generate(
            &names.iter().map(|n| (n.clone(), 0)).collect::<Vec<_>>(),
            0,
            dims.tokens,
            dims.d_in,
            1.0,
        )
        .unwrap();
        let data = ToyDataset::generate(&names, 2, 2.0, 0.1, 200, 0).unwrap();
        let sched = make_schedule(50, 2e-3, 0.3).unwrap();
        (dims, bank, data, sched)
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let (dims, bank, data, sched) = setup();
        let hyper = TrainHyper {
            steps: 0,
            seed: 5,
            eval_batch: 16,
            ..TrainHyper::default()
        };
        let (p, _) = train_dm(dims, 1.0, &data, &bank, &sched, &hyper).unwrap();
        assert_eq!(p, DenoiserParams::init(dims, 1.0, &mut Rng::stream(5, 0)));
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let (dims, bank, data, sched) = setup();
        let hyper = TrainHyper {
            steps: 5,
            lr: 0.0,
            batch: 8,
            seed: 5,
            eval_batch: 16,
            ..TrainHyper::default()
        };
        let (p, _) = train_dm(dims, 1.0, &data, &bank, &sched, &hyper).unwrap();
        assert_eq!(p, DenoiserParams::init(dims, 1.0, &mut Rng::stream(5, 0)));
    }

    #[test]
    fn loss_decreases() {
        let (dims, bank, data, sched) = setup();
        let hyper = TrainHyper {
            steps: 300,
            batch: 32,
            seed: 1,
            eval_batch: 256,
            ..TrainHyper::default()
        };
        let (_, report) = train_dm(dims, 1.0, &data, &bank, &sched, &hyper).unwrap();
        assert!(report.final_loss < 0.5 * report.initial_loss, "{report:?}");
    }
}
