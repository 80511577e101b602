//! Numerical self-checks against independent reference computations.
//!
//! Each check compares the library against something written differently:
//! k-NN against a full per-vertex sort, gradients against central finite
//! differences, and the graph layers against naive per-vertex loops.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, Tape, Var};
use crate::error::Result;
use crate::graph::{dilated_knn, knn, DilationSpec, NeighborList, PointCloud};
use crate::layers::{dense_wrap, residual_wrap, AggregatorKind, GcnLayer, NORMALIZE_MIN_NORM};
use crate::model::{Backbone, Model, ModelConfig};
use crate::nn::{Activation, MlpUnit};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Denominator floor of the relative gradient error (see [`rel_error`]).
pub const FD_FLOOR: f64 = 1e-3;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const LAYER_TOLERANCE: f64 = 1e-12;

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    /// Instances or entries compared.
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// Entries left out because a perturbation changed a discrete choice
    /// (the k-NN graph), where the function is not differentiable.
    pub skipped: usize,
    /// Descriptions of offending cases; empty when the check passed.
    pub failures: Vec<String>,
}

impl CheckReport {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            cases: 0,
            max_error: 0.0,
            tolerance,
            skipped: 0,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, err: f64, what: impl FnOnce() -> String) {
        self.cases += 1;
        if err > self.max_error || err.is_nan() {
            self.max_error = err;
        }
        if !(err <= self.tolerance) {
            self.failures.push(format!("{} (error {err:.3e})", what()));
        }
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<34} {} cases={:<6} max_error={:.3e} tol={:.0e}",
            self.name,
            if self.passed() { "ok  " } else { "FAIL" },
            self.cases,
            self.max_error,
            self.tolerance
        )?;
        if self.skipped > 0 {
            write!(f, " skipped={}", self.skipped)?;
        }
        for bad in self.failures.iter().take(5) {
            write!(f, "\n    {bad}")?;
        }
        if self.failures.len() > 5 {
            write!(f, "\n    ... {} more", self.failures.len() - 5)?;
        }
        Ok(())
    }
}

pub fn all_passed(reports: &[CheckReport]) -> bool {
    reports.iter().all(CheckReport::passed)
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

// ---------------------------------------------------------------- k-NN

/// Full sort of every other vertex by `(squared distance, index)`.
pub fn sorted_neighbors_oracle(features: &Tensor, v: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..features.rows())
        .filter(|&u| u != v)
        .map(|u| {
            let mut s = 0.0;
            for j in 0..features.cols() {
                let diff = features.at(v, j) - features.at(u, j);
                s += diff * diff;
            }
            (s, u)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().map(|(_, u)| u).collect()
}

/// Ranks `0, d, …, (k−1)d` of the oracle order.
pub fn dilated_knn_oracle(features: &Tensor, k: usize, d: usize) -> Vec<usize> {
    (0..features.rows())
        .flat_map(|v| {
            let order = sorted_neighbors_oracle(features, v);
            (0..k).map(move |r| order[r * d])
        })
        .collect()
}

/// `(k, d)` pairs exercised by [`check_knn`].
pub const KNN_GRID: [(usize, usize); 9] = [
    (2, 1),
    (2, 2),
    (2, 4),
    (4, 1),
    (4, 2),
    (4, 4),
    (8, 1),
    (8, 2),
    (8, 4),
];

/// Random clouds with `N ∈ [33, 200]`, `D ∈ [1, 8]` (so `k·d ≤ N − 1` on the grid).
pub fn random_clouds(count: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(33..=200);
            let d = rng.gen_range(1..=8);
            random_tensor(&mut rng, &[n, d])
        })
        .collect()
}

/// Dilated k-NN against the sort oracle, and `d = 1` against plain k-NN.
pub fn check_knn(clouds: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut oracle = CheckReport::new("knn: dilated vs exhaustive sort", 0.0);
    let mut reduction = CheckReport::new("knn: d=1 equals plain k-NN", 0.0);
    for (c, x) in random_clouds(clouds, seed).iter().enumerate() {
        for (k, d) in KNN_GRID {
            let got = dilated_knn(x, k, &DilationSpec::deterministic(d)?)?;
            let want = dilated_knn_oracle(x, k, d);
            let mismatches = got
                .indices()
                .iter()
                .zip(&want)
                .filter(|(a, b)| a != b)
                .count();
            oracle.record(mismatches as f64, || {
                format!("cloud {c} k={k} d={d}: {mismatches} mismatches")
            });
            if d == 1 {
                let plain = knn(x, k)?;
                let diff = plain
                    .indices()
                    .iter()
                    .zip(got.indices())
                    .filter(|(a, b)| a != b)
                    .count();
                reduction.record(diff as f64, || {
                    format!("cloud {c} k={k}: {diff} mismatches")
                });
            }
        }
    }
    Ok(vec![oracle, reduction])
}

/// Stochastic dilation: `ε = 0` is deterministic, `ε = 1` stays within the
/// `k·d` nearest candidates, and `ε = 0.2` takes the random branch at the
/// expected per-vertex rate.
pub fn check_stochastic(trials: usize, draws: usize, seed: u64) -> Result<Vec<CheckReport>> {
    use crate::graph::{stochastic_dilated_knn, stochastic_dilated_knn_traced};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, d) = (4, 3);
    let x = random_tensor(&mut rng, &[40, 3]);

    let mut zero = CheckReport::new("stochastic: eps=0 deterministic", 0.0);
    let reference = dilated_knn(&x, k, &DilationSpec::deterministic(d)?)?;
    let spec0 = DilationSpec::new(d, 0.0, Mode::Train)?;
    for t in 0..trials {
        let got = stochastic_dilated_knn(&x, k, &spec0, &mut rng)?;
        let diff = got
            .indices()
            .iter()
            .zip(reference.indices())
            .filter(|(a, b)| a != b)
            .count();
        zero.record(diff as f64, || format!("trial {t}: {diff} differences"));
    }

    let mut one = CheckReport::new("stochastic: eps=1 within k*d", 0.0);
    let allowed: Vec<Vec<usize>> = (0..x.rows())
        .map(|v| sorted_neighbors_oracle(&x, v)[..k * d].to_vec())
        .collect();
    let spec1 = DilationSpec::new(d, 1.0, Mode::Train)?;
    for t in 0..trials {
        let got = stochastic_dilated_knn(&x, k, &spec1, &mut rng)?;
        let outside = (0..x.rows())
            .map(|v| {
                let row = got.neighbors(v);
                let distinct = row.iter().collect::<std::collections::BTreeSet<_>>().len() == k;
                row.iter().filter(|u| !allowed[v].contains(u)).count() + usize::from(!distinct)
            })
            .sum::<usize>();
        one.record(outside as f64, || {
            format!("trial {t}: {outside} neighbors outside the candidates")
        });
    }

    const EPS: f64 = 0.2;
    let mut freq = CheckReport::new("stochastic: eps=0.2 branch rate", 0.03);
    let spec = DilationSpec::new(d, EPS, Mode::Train)?;
    let mut hits = vec![0usize; x.rows()];
    for _ in 0..draws {
        let (_, branch) = stochastic_dilated_knn_traced(&x, k, &spec, &mut rng)?;
        hits.iter_mut()
            .zip(branch)
            .for_each(|(h, b)| *h += usize::from(b));
    }
    for (v, h) in hits.iter().enumerate() {
        let rate = *h as f64 / draws as f64;
        freq.record((rate - EPS).abs(), || format!("vertex {v}: rate {rate:.4}"));
    }
    Ok(vec![zero, one, freq])
}

// ---------------------------------------------------------- gradients

/// `|a − n| / max(|a|, |n|, FD_FLOOR)`.
///
/// The floor keeps entries whose true gradient is near zero from turning
/// finite-difference roundoff into large relative errors.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// A scalar function of some input tensors and the trainable entries of a
/// parameter store, built freshly on a tape for every evaluation.
struct Problem<'a> {
    inputs: Vec<Tensor>,
    store: ParamStore,
    build: Box<dyn FnMut(&mut Tape, &mut ParamStore, &[Var]) -> Result<(Var, Vec<usize>)> + 'a>,
}

impl Problem<'_> {
    /// Loss value and the signature of the discrete choices made.
    fn eval(&mut self, inputs: &[Tensor], store: &ParamStore) -> Result<(f64, Vec<usize>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let mut store = store.clone();
        let (loss, sig) = (self.build)(&mut tape, &mut store, &vars)?;
        Ok((tape.value(loss).data()[0], sig))
    }

    /// Central difference, or `None` when either side changes the signature.
    fn central(
        &mut self,
        base: &[usize],
        plus: (&[Tensor], &ParamStore),
        minus: (&[Tensor], &ParamStore),
    ) -> Result<Option<f64>> {
        let (fp, sp) = self.eval(plus.0, plus.1)?;
        let (fm, sm) = self.eval(minus.0, minus.1)?;
        Ok((sp == base && sm == base).then(|| (fp - fm) / (2.0 * FD_STEP)))
    }

    /// Analytic gradients of inputs and trainable parameters.
    fn analytic(&mut self) -> Result<(Vec<Vec<f64>>, Vec<(ParamId, Vec<f64>)>, Vec<usize>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.input(t.clone())).collect();
        let mut store = self.store.clone();
        let (loss, sig) = (self.build)(&mut tape, &mut store, &vars)?;
        tape.backward(loss)?;
        let inputs = vars
            .iter()
            .zip(&self.inputs)
            .map(|(&v, t)| {
                tape.grad(v)
                    .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
            })
            .collect();
        let mut params: Vec<(ParamId, Vec<f64>)> = self
            .store
            .trainable_ids()
            .map(|id| (id, vec![0.0; self.store.value(id).len()]))
            .collect();
        for (id, g) in tape.param_grads() {
            let slot = params
                .iter_mut()
                .find(|(p, _)| *p == id)
                .expect("trainable parameter");
            slot.1.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Ok((inputs, params, sig))
    }

    fn check(mut self, report: &mut CheckReport, label: &str) -> Result<()> {
        let (gin, gparams, sig) = self.analytic()?;
        let base_inputs = self.inputs.clone();
        let base_store = self.store.clone();
        for (i, grad) in gin.iter().enumerate() {
            for j in 0..grad.len() {
                let mut plus = base_inputs.clone();
                plus[i].data_mut()[j] += FD_STEP;
                let mut minus = base_inputs.clone();
                minus[i].data_mut()[j] -= FD_STEP;
                let Some(num) = self.central(&sig, (&plus, &base_store), (&minus, &base_store))?
                else {
                    report.skipped += 1;
                    continue;
                };
                report.record(rel_error(grad[j], num), || {
                    format!(
                        "{label}: input {i}[{j}] analytic {:.6e} numeric {num:.6e}",
                        grad[j]
                    )
                });
            }
        }
        for (id, grad) in &gparams {
            for j in 0..grad.len() {
                let mut plus = base_store.clone();
                plus.value_mut(*id).data_mut()[j] += FD_STEP;
                let mut minus = base_store.clone();
                minus.value_mut(*id).data_mut()[j] -= FD_STEP;
                let Some(num) =
                    self.central(&sig, (&base_inputs, &plus), (&base_inputs, &minus))?
                else {
                    report.skipped += 1;
                    continue;
                };
                report.record(rel_error(grad[j], num), || {
                    format!(
                        "{label}: {}[{j}] analytic {:.6e} numeric {num:.6e}",
                        base_store.name(*id),
                        grad[j]
                    )
                });
            }
        }
        Ok(())
    }
}

/// Reduces any output to a scalar through fixed random weights.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..tape.value(y).len())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    tape.weighted_sum(y, &w)
}

fn op_problem<'a>(
    inputs: Vec<Tensor>,
    mut f: impl FnMut(&mut Tape, &[Var]) -> Result<Var> + 'a,
) -> Problem<'a> {
    Problem {
        inputs,
        store: ParamStore::new(),
        build: Box::new(move |tape, _, v| {
            let y = f(tape, v)?;
            let loss = if tape.value(y).len() == 1 {
                y
            } else {
                project(tape, y, 99)?
            };
            Ok((loss, Vec::new()))
        }),
    }
}

/// Random neighbor list without self loops.
fn random_neighbors(rng: &mut impl Rng, n: usize, k: usize) -> NeighborList {
    let mut idx = Vec::with_capacity(n * k);
    for v in 0..n {
        for _ in 0..k {
            let mut u = rng.gen_range(0..n - 1);
            if u >= v {
                u += 1;
            }
            idx.push(u);
        }
    }
    NeighborList::new(k, idx).expect("valid neighbor list")
}

/// Randomizes every trainable parameter so that BN shifts, biases and GIN's
/// ε are exercised away from their initial values.
fn perturb_params(store: &mut ParamStore, rng: &mut impl Rng) {
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
}

fn op_problems(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Problem<'static>)> {
    let (n, k, d) = (6, 3, 4);
    let mut t = |shape: &[usize]| random_tensor(rng, shape);
    let x = t(&[n, d]);
    let x2 = t(&[n, d]);
    let w = t(&[d, 5]);
    let b = t(&[5]);
    let g = t(&[d]);
    let bt = t(&[d]);
    let nk = t(&[n, k, d]);
    let logits = t(&[n, 5]);
    let scalar = t(&[1]);
    let mut gather_rng = ChaCha8Rng::seed_from_u64(5);
    let gather: Vec<usize> = (0..n * k).map(|_| gather_rng.gen_range(0..n)).collect();
    let labels: Vec<usize> = (0..n).map(|i| (i * 3) % 5).collect();
    let running_mean: Vec<f64> = (0..d).map(|j| 0.1 * j as f64).collect();
    let running_var: Vec<f64> = (0..d).map(|j| 0.5 + 0.2 * j as f64).collect();
    let weights: Vec<f64> = (0..n * d)
        .map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5)
        .collect();
    vec![
        (
            "linear",
            op_problem(vec![x.clone(), w.clone(), b], |t, v| {
                t.linear(v[0], v[1], Some(v[2]))
            }),
        ),
        (
            "linear (no bias)",
            op_problem(vec![x.clone(), w], |t, v| t.linear(v[0], v[1], None)),
        ),
        (
            "batch_norm (batch stats)",
            op_problem(vec![x.clone(), g.clone(), bt.clone()], |t, v| {
                use crate::autodiff::NormStats;
                Ok(
                    t.batch_norm(v[0], v[1], v[2], NormStats::Batch { eps: 1e-5 })?
                        .0,
                )
            }),
        ),
        (
            "batch_norm (running stats)",
            op_problem(vec![x.clone(), g, bt], move |t, v| {
                use crate::autodiff::NormStats;
                let stats = NormStats::Running {
                    mean: &running_mean,
                    var: &running_var,
                    eps: 1e-5,
                };
                Ok(t.batch_norm(v[0], v[1], v[2], stats)?.0)
            }),
        ),
        ("relu", op_problem(vec![x.clone()], |t, v| Ok(t.relu(v[0])))),
        (
            "add",
            op_problem(vec![x.clone(), x2.clone()], |t, v| t.add(v[0], v[1])),
        ),
        (
            "sub",
            op_problem(vec![x.clone(), x2.clone()], |t, v| t.sub(v[0], v[1])),
        ),
        (
            "concat",
            op_problem(vec![x.clone(), x2], |t, v| t.concat(v[0], v[1])),
        ),
        (
            "gather_rows",
            op_problem(vec![x.clone()], move |t, v| {
                t.gather_rows(v[0], gather.clone(), &[n, k])
            }),
        ),
        (
            "repeat_rows",
            op_problem(vec![x.clone()], move |t, v| t.repeat_rows(v[0], k)),
        ),
        (
            "max_reduce_neighbors",
            op_problem(vec![nk.clone()], |t, v| t.max_reduce_neighbors(v[0])),
        ),
        (
            "sum_reduce_neighbors",
            op_problem(vec![nk], |t, v| t.sum_reduce_neighbors(v[0])),
        ),
        (
            "one_plus_scale",
            op_problem(vec![x.clone(), scalar], |t, v| t.one_plus_scale(v[0], v[1])),
        ),
        (
            "dropout (train)",
            op_problem(vec![x.clone()], |t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                t.dropout(v[0], 0.3, Mode::Train, &mut rng)
            }),
        ),
        (
            "row_normalize",
            op_problem(vec![x.clone()], |t, v| {
                Ok(t.row_normalize(v[0], NORMALIZE_MIN_NORM))
            }),
        ),
        (
            "global_max",
            op_problem(vec![x.clone()], |t, v| t.global_max(v[0])),
        ),
        (
            "softmax_cross_entropy",
            op_problem(vec![logits], move |t, v| {
                t.softmax_cross_entropy(v[0], &labels)
            }),
        ),
        ("sum", op_problem(vec![x.clone()], |t, v| Ok(t.sum(v[0])))),
        (
            "weighted_sum",
            op_problem(vec![x], move |t, v| t.weighted_sum(v[0], &weights)),
        ),
    ]
}

#[derive(Clone, Copy, Debug)]
enum Wrap {
    Bare,
    Residual,
    Dense,
}

fn layer_problem(kind: AggregatorKind, wrap: Wrap, mode: Mode, seed: u64) -> Problem<'static> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k, d) = (8, 3, 4);
    let mut store = ParamStore::new();
    let layer = GcnLayer::new(&mut store, "layer", kind, d, d, 1, &mut rng);
    perturb_params(&mut store, &mut rng);
    let h = random_tensor(&mut rng, &[n, d]);
    let nbrs = random_neighbors(&mut rng, n, k);
    Problem {
        inputs: vec![h],
        store,
        build: Box::new(move |tape, store, v| {
            let y = match wrap {
                Wrap::Bare => layer.forward(tape, store, v[0], &nbrs, mode)?,
                Wrap::Residual => residual_wrap(&layer, tape, store, v[0], &nbrs, mode)?,
                Wrap::Dense => dense_wrap(&layer, tape, store, v[0], &nbrs, mode)?.0,
            };
            Ok((project(tape, y, seed + 1)?, Vec::new()))
        }),
    }
}

/// Small model on a fixed cloud; dropout and stochastic dilation draw from a
/// reseeded generator so every evaluation sees the same masks and graphs.
fn model_problem(
    backbone: Backbone,
    aggregator: AggregatorKind,
    seed: u64,
) -> Result<Problem<'static>> {
    let cfg = ModelConfig {
        backbone,
        aggregator,
        depth: 3,
        width: 4,
        k: 3,
        dilation: true,
        d_max: 2,
        epsilon: 0.5,
        dynamic_edges: true,
        num_classes: 3,
        dropout: 0.3,
        aux_dim: 1,
        fusion_width: 5,
        head_widths: [6, 5],
        mlp_depth: 1,
    };
    let mut model = Model::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
    perturb_params(&mut model.store, &mut rng);
    let n = 12;
    let cloud = PointCloud::new(
        random_tensor(&mut rng, &[n, 3]),
        random_tensor(&mut rng, &[n, 1]),
        (0..n).map(|i| i % 3).collect(),
    )?;
    let store = model.store.clone();
    Ok(Problem {
        inputs: Vec::new(),
        store,
        build: Box::new(move |tape, store, _| {
            std::mem::swap(&mut model.store, store);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
            let out = model.forward(tape, &cloud, Mode::Train, &mut rng);
            std::mem::swap(&mut model.store, store);
            let out = out?;
            let sig = out
                .trace
                .graphs
                .iter()
                .flat_map(|g| g.indices().iter().copied())
                .collect();
            Ok((tape.softmax_cross_entropy(out.logits, &cloud.labels)?, sig))
        }),
    })
}

/// Central finite differences for every op, every layer (bare, residual
/// and dense, train and eval mode) and a 3-layer model per backbone and
/// aggregator.
pub fn check_gradients(seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = CheckReport::new("gradients: primitive ops", GRADIENT_TOLERANCE);
    for (name, p) in op_problems(&mut rng) {
        p.check(&mut ops, name)?;
    }
    reports.push(ops);
    for kind in AggregatorKind::ALL {
        let mut r = CheckReport::new(format!("gradients: {kind} layer"), GRADIENT_TOLERANCE);
        for (i, (wrap, mode)) in [
            (Wrap::Bare, Mode::Train),
            (Wrap::Bare, Mode::Eval),
            (Wrap::Residual, Mode::Train),
            (Wrap::Dense, Mode::Train),
        ]
        .into_iter()
        .enumerate()
        {
            let label = format!("{wrap:?} {mode:?}");
            layer_problem(kind, wrap, mode, seed + 10 * i as u64).check(&mut r, &label)?;
        }
        reports.push(r);
    }
    for backbone in [Backbone::Plain, Backbone::Residual, Backbone::Dense] {
        let mut r = CheckReport::new(
            format!("gradients: 3-layer {backbone} model"),
            GRADIENT_TOLERANCE,
        );
        for kind in AggregatorKind::ALL {
            model_problem(backbone, kind, seed)?.check(&mut r, kind.as_str())?;
        }
        reports.push(r);
    }
    Ok(reports)
}

// ------------------------------------------------------- layer oracles

type Rows = Vec<Vec<f64>>;

fn to_rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// One MLP unit over a list of rows, written as plain loops.
fn unit_oracle(store: &ParamStore, unit: &MlpUnit, x: &Rows, mode: Mode) -> Rows {
    let w = store.value(unit.weight);
    let b = store.value(unit.bias).data();
    let mut y: Rows = x
        .iter()
        .map(|row| {
            (0..unit.d_out)
                .map(|o| {
                    let mut s = b[o];
                    for (i, xi) in row.iter().enumerate() {
                        s += xi * w.at(i, o);
                    }
                    s
                })
                .collect()
        })
        .collect();
    if let Some(bn) = unit.bn {
        let gamma = store.value(bn.gamma).data();
        let beta = store.value(bn.beta).data();
        let m = y.len() as f64;
        for j in 0..unit.d_out {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = y.iter().map(|r| r[j]).sum::<f64>() / m;
                    let var = y.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / m;
                    (mean, var)
                }
                Mode::Eval => (
                    store.value(bn.running_mean).data()[j],
                    store.value(bn.running_var).data()[j],
                ),
            };
            for r in y.iter_mut() {
                r[j] = gamma[j] * (r[j] - mean) / (var + bn.eps).sqrt() + beta[j];
            }
        }
    }
    if unit.activation == Activation::Relu {
        for v in y.iter_mut().flatten() {
            *v = v.max(0.0);
        }
    }
    y
}

fn mlp_oracle(store: &ParamStore, layer: &GcnLayer, mut x: Rows, mode: Mode) -> Rows {
    for unit in &layer.mlp {
        x = unit_oracle(store, unit, &x, mode);
    }
    x
}

fn concat_row(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

/// Per-vertex loop implementation of a graph layer.
pub fn layer_oracle(
    store: &ParamStore,
    layer: &GcnLayer,
    h: &Tensor,
    nbrs: &NeighborList,
    mode: Mode,
) -> Tensor {
    let h = to_rows(h);
    let n = h.len();
    let d = layer.d_in;
    let k = nbrs.k();
    let out: Rows = match layer.kind {
        AggregatorKind::EdgeConv => {
            let mut edges = Vec::with_capacity(n * k);
            for v in 0..n {
                for &u in nbrs.neighbors(v) {
                    let rel: Vec<f64> = (0..d).map(|j| h[u][j] - h[v][j]).collect();
                    edges.push(concat_row(&h[v], &rel));
                }
            }
            let y = mlp_oracle(store, layer, edges, mode);
            (0..n)
                .map(|v| {
                    (0..layer.d_out)
                        .map(|j| {
                            (0..k)
                                .map(|e| y[v * k + e][j])
                                .fold(f64::NEG_INFINITY, f64::max)
                        })
                        .collect()
                })
                .collect()
        }
        AggregatorKind::MrGcn => {
            let x = (0..n)
                .map(|v| {
                    let pooled: Vec<f64> = (0..d)
                        .map(|j| {
                            nbrs.neighbors(v)
                                .iter()
                                .map(|&u| h[u][j] - h[v][j])
                                .fold(f64::NEG_INFINITY, f64::max)
                        })
                        .collect();
                    concat_row(&h[v], &pooled)
                })
                .collect();
            mlp_oracle(store, layer, x, mode)
        }
        AggregatorKind::GraphSage | AggregatorKind::GraphSageNormalized => {
            let inner = layer.inner.as_ref().expect("graphsage inner MLP");
            let gathered: Rows = (0..n)
                .flat_map(|v| {
                    nbrs.neighbors(v)
                        .iter()
                        .map(|&u| h[u].clone())
                        .collect::<Vec<_>>()
                })
                .collect();
            let t = unit_oracle(store, inner, &gathered, mode);
            let x = (0..n)
                .map(|v| {
                    let pooled: Vec<f64> = (0..layer.d_out)
                        .map(|j| {
                            (0..k)
                                .map(|e| t[v * k + e][j])
                                .fold(f64::NEG_INFINITY, f64::max)
                        })
                        .collect();
                    concat_row(&h[v], &pooled)
                })
                .collect();
            let mut y = mlp_oracle(store, layer, x, mode);
            if layer.kind == AggregatorKind::GraphSageNormalized {
                for row in y.iter_mut() {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm >= NORMALIZE_MIN_NORM {
                        row.iter_mut().for_each(|v| *v /= norm);
                    }
                }
            }
            y
        }
        AggregatorKind::Gin => {
            let eps = store.value(layer.eps_gin.expect("gin epsilon")).data()[0];
            let x = (0..n)
                .map(|v| {
                    (0..d)
                        .map(|j| {
                            let s: f64 = nbrs.neighbors(v).iter().map(|&u| h[u][j]).sum();
                            (1.0 + eps) * h[v][j] + s
                        })
                        .collect()
                })
                .collect();
            mlp_oracle(store, layer, x, mode)
        }
    };
    let flat = out.into_iter().flatten().collect();
    Tensor::from_parts(vec![n, layer.d_out], flat)
}

/// Loop oracles for every aggregator (train and eval mode), plus the
/// residual wrapper as `output − h`.
pub fn check_layers(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for kind in AggregatorKind::ALL {
        let mut r = CheckReport::new(format!("layers: {kind} vs loop oracle"), LAYER_TOLERANCE);
        for i in 0..instances {
            let n = rng.gen_range(6..=16);
            let k = rng.gen_range(1..=4);
            let d_in = rng.gen_range(1..=8);
            let d_out = rng.gen_range(1..=8);
            let mut store = ParamStore::new();
            let layer = GcnLayer::new(
                &mut store,
                "l",
                kind,
                d_in,
                d_out,
                rng.gen_range(1..=2),
                &mut rng,
            );
            perturb_params(&mut store, &mut rng);
            let buffers: Vec<ParamId> = store.ids().filter(|&id| !store.is_trainable(id)).collect();
            for id in buffers {
                let var = store.name(id).ends_with("running_var");
                for v in store.value_mut(id).data_mut() {
                    *v = if var {
                        rng.gen_range(0.2..2.0)
                    } else {
                        rng.gen_range(-0.5..0.5)
                    };
                }
            }
            let h = random_tensor(&mut rng, &[n, d_in]);
            let nbrs = random_neighbors(&mut rng, n, k);
            for mode in [Mode::Eval, Mode::Train] {
                let want = layer_oracle(&store, &layer, &h, &nbrs, mode);
                let mut tape = Tape::new();
                let x = tape.constant(h.clone());
                let y = layer.forward(&mut tape, &mut store.clone(), x, &nbrs, mode)?;
                let err = tape.value(y).max_abs_diff(&want);
                r.record(err, || format!("instance {i} (N={n}, k={k}, {mode:?})"));
            }
        }
        reports.push(r);
    }
    let mut r = CheckReport::new("layers: residual output − h", LAYER_TOLERANCE);
    for i in 0..instances {
        let kind = AggregatorKind::ALL[i % AggregatorKind::ALL.len()];
        let (n, d) = (rng.gen_range(6..=16), rng.gen_range(1..=8));
        let mut store = ParamStore::new();
        let layer = GcnLayer::new(&mut store, "l", kind, d, d, 1, &mut rng);
        perturb_params(&mut store, &mut rng);
        let h = random_tensor(&mut rng, &[n, d]);
        let k = rng.gen_range(1..=4);
        let nbrs = random_neighbors(&mut rng, n, k);
        let mut tape = Tape::new();
        let x = tape.constant(h.clone());
        let y = residual_wrap(&layer, &mut tape, &mut store.clone(), x, &nbrs, Mode::Eval)?;
        let bare = layer.forward(&mut tape, &mut store, x, &nbrs, Mode::Eval)?;
        let diff: Vec<f64> = tape
            .value(y)
            .data()
            .iter()
            .zip(h.data())
            .map(|(a, b)| a - b)
            .collect();
        let err = Tensor::from_parts(vec![n, d], diff).max_abs_diff(tape.value(bare));
        r.record(err, || format!("instance {i} ({kind})"));
    }
    reports.push(r);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_ranks_on_a_line() {
        let x = Tensor::new(vec![6, 1], vec![0.0, 1.0, 3.0, 6.0, 10.0, 15.0]).unwrap();
        assert_eq!(sorted_neighbors_oracle(&x, 0), vec![1, 2, 3, 4, 5]);
        assert_eq!(&dilated_knn_oracle(&x, 2, 2)[..2], &[1, 3]);
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(1.0, 1.0), 0.0);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_error(0.0, 1e-9) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn small_sweeps_pass() {
        for r in check_knn(3, 1).unwrap() {
            assert!(r.passed(), "{r}");
        }
        for r in check_stochastic(20, 500, 1).unwrap().into_iter().take(2) {
            assert!(r.passed(), "{r}");
        }
        for r in check_layers(2, 1).unwrap() {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn report_flags_failures() {
        let mut r = CheckReport::new("x", 1e-3);
        r.record(1e-4, || "fine".into());
        assert!(r.passed());
        r.record(f64::NAN, || "nan".into());
        assert!(!r.passed());
    }
}
