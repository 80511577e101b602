//! The affine + batch norm + activation unit used throughout the network.

use rand::Rng;

use crate::autodiff::{Mode, NormStats, Tape, Var};
use crate::error::{contract, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// Parameter handles of one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_param(format!("{prefix}.gamma"), Tensor::ones(&[dim])),
            beta: store.add_param(format!("{prefix}.beta"), Tensor::zeros(&[dim])),
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[dim])),
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::ones(&[dim])),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running averages; eval mode uses the running averages only.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, moments) =
                    tape.batch_norm(x, gamma, beta, NormStats::Batch { eps: self.eps })?;
                let moments = moments.expect("batch statistics requested");
                let m = self.momentum;
                for (r, b) in store
                    .value_mut(self.running_mean)
                    .data_mut()
                    .iter_mut()
                    .zip(&moments.mean)
                {
                    *r = m * *r + (1.0 - m) * b;
                }
                for (r, b) in store
                    .value_mut(self.running_var)
                    .data_mut()
                    .iter_mut()
                    .zip(&moments.var)
                {
                    *r = m * *r + (1.0 - m) * b;
                }
                Ok(y)
            }
            Mode::Eval => {
                let stats = NormStats::Running {
                    mean: store.value(self.running_mean).data(),
                    var: store.value(self.running_var).data(),
                    eps: self.eps,
                };
                Ok(tape.batch_norm(x, gamma, beta, stats)?.0)
            }
        }
    }
}

/// `act(BN(x · w + b))`, with the batch norm optional.
#[derive(Clone, Copy, Debug)]
pub struct MlpUnit {
    pub weight: ParamId,
    pub bias: ParamId,
    pub bn: Option<BatchNorm>,
    pub activation: Activation,
    pub d_in: usize,
    pub d_out: usize,
}

impl MlpUnit {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        batch_norm: bool,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_weight(format!("{prefix}.weight"), d_in, d_out, rng);
        let bias = store.add_param(format!("{prefix}.bias"), Tensor::zeros(&[d_out]));
        let bn = batch_norm.then(|| BatchNorm::new(store, &format!("{prefix}.bn"), d_out));
        Self {
            weight,
            bias,
            bn,
            activation,
            d_in,
            d_out,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        mlp_unit(tape, store, x, self, mode)
    }

    /// Sets weight and bias to zero (used to build an identically-zero branch).
    pub fn zero_affine(&self, store: &mut ParamStore) {
        store.value_mut(self.weight).data_mut().fill(0.0);
        store.value_mut(self.bias).data_mut().fill(0.0);
    }
}

/// One per-row MLP layer over the last axis of `x`.
pub fn mlp_unit(
    tape: &mut Tape,
    store: &mut ParamStore,
    x: Var,
    unit: &MlpUnit,
    mode: Mode,
) -> Result<Var> {
    let xv = tape.value(x);
    if xv.is_empty() && xv.shape().first() == Some(&0) {
        return Err(Error::EmptyInput("mlp_unit over zero rows".into()));
    }
    if xv.shape().last() != Some(&unit.d_in) {
        return Err(contract(format!(
            "mlp_unit: input shape {:?} does not end in {}",
            xv.shape(),
            unit.d_in
        )));
    }
    let w = tape.param(store, unit.weight);
    let b = tape.param(store, unit.bias);
    let mut y = tape.linear(x, w, Some(b))?;
    if let Some(bn) = &unit.bn {
        y = bn.forward(tape, store, y, mode)?;
    }
    Ok(match unit.activation {
        Activation::Relu => tape.relu(y),
        Activation::None => y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(store: &mut ParamStore, d_in: usize, d_out: usize, act: Activation) -> MlpUnit {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        MlpUnit::new(store, "u", d_in, d_out, true, act, &mut rng)
    }

    #[test]
    fn constant_input_gives_zero_output() {
        let mut store = ParamStore::new();
        let u = unit(&mut store, 3, 4, Activation::Relu);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let y = u.forward(&mut tape, &mut store, x, Mode::Train).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 8]);
    }

    #[test]
    fn identity_composition_in_eval() {
        let mut store = ParamStore::new();
        let mut u = unit(&mut store, 2, 2, Activation::None);
        *store.value_mut(u.weight) = Tensor::eye(2);
        u.bn.as_mut().unwrap().eps = 0.0;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::eye(2));
        let y = u.forward(&mut tape, &mut store, x, Mode::Eval).unwrap();
        assert_eq!(tape.value(y).data(), Tensor::eye(2).data());
    }

    #[test]
    fn rejects_empty_and_mismatched_input() {
        let mut store = ParamStore::new();
        let u = unit(&mut store, 3, 2, Activation::Relu);
        let mut tape = Tape::new();
        let empty = tape.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(
            u.forward(&mut tape, &mut store, empty, Mode::Train),
            Err(Error::EmptyInput(_))
        ));
        let wrong = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            u.forward(&mut tape, &mut store, wrong, Mode::Train),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn train_mode_output_is_standardized() {
        let mut store = ParamStore::new();
        let u = unit(&mut store, 4, 3, Activation::None);
        *store.value_mut(u.bn.unwrap().gamma) = Tensor::new(vec![3], vec![2.0, 0.5, 1.5]).unwrap();
        *store.value_mut(u.bn.unwrap().beta) = Tensor::new(vec![3], vec![-1.0, 0.25, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![10, 4], data).unwrap());
        let y = u.forward(&mut tape, &mut store, x, Mode::Train).unwrap();
        let yv = tape.value(y);
        let gamma = [2.0, 0.5, 1.5];
        let beta = [-1.0, 0.25, 3.0];
        for j in 0..3 {
            let col: Vec<f64> = (0..10).map(|i| yv.at(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 10.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
            assert!((mean - beta[j]).abs() < 1e-6);
            assert!((var - gamma[j] * gamma[j]).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn running_stats_track_batches() {
        let mut store = ParamStore::new();
        let u = unit(&mut store, 1, 1, Activation::None);
        *store.value_mut(u.weight) = Tensor::ones(&[1, 1]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        u.forward(&mut tape, &mut store, x, Mode::Train).unwrap();
        let bn = u.bn.unwrap();
        assert!((store.value(bn.running_mean).data()[0] - 0.2).abs() < 1e-15);
        assert!((store.value(bn.running_var).data()[0] - 1.0).abs() < 1e-15);
    }
}
