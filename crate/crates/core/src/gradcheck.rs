//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::encoder::{encode_all_layers, EncoderConfig, EncoderParams, Pooling, TokenBatch, PAD_ID};
use crate::error::{Error, Result};
use crate::objectives::{objective_loss, ObjectiveConfig, ObjectiveKind, Variants};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar from the bound inputs. Any `detach` nodes it records
/// are replayed with their values from the unperturbed point, so teachers
/// stay fixed exactly as the backward pass assumes.
///
/// The per-coordinate error is `|a - n| / max(1, |a|, |n|)`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_with(f, inputs, eps, |_| {})
}

/// [`gradcheck`] with a hook applied to the analytic graph before the
/// backward pass.
pub fn gradcheck_with<F, H>(f: F, inputs: &[Tensor<f64>], eps: f64, prepare: H) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    H: Fn(&mut Graph<f64>),
{
    let mut g = Graph::new();
    prepare(&mut g);
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let frozen = g.detached_values().to_vec();

    let eval = |point: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::with_frozen_detach(frozen.clone());
        let vars = point
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut point = inputs.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        for j in 0..inputs[i].len() {
            let orig = point[i].data()[j];
            point[i].data_mut()[j] = orig + eps;
            let plus = eval(&point)?;
            point[i].data_mut()[j] = orig - eps;
            let minus = eval(&point)?;
            point[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite { op: "gradcheck" });
            }
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Tolerance the objective suite must meet.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Encoder small enough to finite-difference every parameter.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 10,
        d_model: 8,
        n_layers: 3,
        n_heads: 2,
        d_ff: 8,
        max_seq_len: 5,
        pooling: Pooling::Mean,
    }
}

/// The objective configurations the suite covers, by label.
pub fn objective_cases() -> Vec<(String, ObjectiveConfig)> {
    let base = ObjectiveConfig {
        dims: vec![2, 4, 8],
        target_dim: 4,
        ..ObjectiveConfig::default()
    };
    let v2 = |variants: Variants| ObjectiveConfig {
        kind: ObjectiveKind::V2,
        variants,
        ..base.clone()
    };
    let cases = [
        ObjectiveConfig {
            kind: ObjectiveKind::Full,
            ..base.clone()
        },
        ObjectiveConfig {
            kind: ObjectiveKind::Mse,
            ..base.clone()
        },
        ObjectiveConfig {
            kind: ObjectiveKind::V1,
            ..base.clone()
        },
        v2(Variants::default()),
        v2(Variants {
            score: true,
            ..Variants::default()
        }),
        v2(Variants {
            full_dim: true,
            ..Variants::default()
        }),
        v2(Variants {
            fix_doc: true,
            ..Variants::default()
        }),
    ];
    cases.into_iter().map(|c| (c.label(), c)).collect()
}

fn random_batch(cfg: &EncoderConfig, batch: usize, rng: &mut ChaCha8Rng) -> Result<TokenBatch> {
    let seqs: Vec<Vec<usize>> = (0..batch)
        .map(|_| {
            let len = rng.random_range(2..=cfg.max_seq_len);
            (0..len).map(|_| rng.random_range(PAD_ID + 1..cfg.vocab_size)).collect()
        })
        .collect();
    TokenBatch::from_sequences(&seqs)
}

/// Gradcheck of one objective with respect to every encoder parameter, on
/// random token batches. Parameters are drawn wider than the training
/// initialisation so nonlinearities are exercised away from zero.
pub fn check_objective(obj: &ObjectiveConfig, seed: u64, fault: Option<&str>) -> Result<GradcheckReport> {
    let cfg = tiny_encoder();
    obj.validate(cfg.d_model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.4).expect("valid normal");
    let params = EncoderParams::<f64>::init(&cfg, &mut rng)?;
    let params = params.try_map(|t| {
        let mut t = t.clone();
        t.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        Ok(t)
    })?;
    let queries = random_batch(&cfg, 4, &mut rng)?;
    let docs = random_batch(&cfg, 4, &mut rng)?;
    let inputs: Vec<Tensor<f64>> = params.leaves().into_iter().cloned().collect();
    let n_layers = cfg.n_layers;

    let f = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let w = crate::encoder::Weights::from_leaves(n_layers, vars.iter().copied())?;
        let q = encode_all_layers(g, &w, &cfg, &queries)?;
        let d = encode_all_layers(g, &w, &cfg, &docs)?;
        // Fresh stream per evaluation, so every point samples the same sub-layer.
        let mut obj_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        objective_loss(g, &q, &d, obj, &mut obj_rng)
    };
    gradcheck_with(f, &inputs, DEFAULT_EPSILON, |g| {
        if let Some(op) = fault {
            g.inject_fault(op).expect("fault op validated by caller");
        }
    })
}

#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub objective: String,
    pub seed: u64,
    pub report: GradcheckReport,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < SUITE_TOLERANCE
    }
}

/// Runs [`check_objective`] for every case in [`objective_cases`] and seed.
pub fn run_suite(seeds: &[u64], fault: Option<&str>) -> Result<Vec<SuiteRow>> {
    if let Some(op) = fault {
        Graph::<f64>::new().inject_fault(op)?;
    }
    let mut rows = Vec::new();
    for (name, obj) in objective_cases() {
        for &seed in seeds {
            rows.push(SuiteRow {
                objective: name.clone(),
                seed,
                report: check_objective(&obj, seed, fault)?,
            });
        }
    }
    Ok(rows)
}
