//! Graph convolution operators and the residual / dense wrappers.
//!
//! All five operators read `h` as an `N × D` matrix and neighbor indices
//! from a [`NeighborList`]; neighborhood tensors are `N × k × D`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{contract, Error, Result};
use crate::graph::NeighborList;
use crate::nn::{Activation, MlpUnit};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Rows whose ℓ2 norm falls below this are left unnormalized.
pub const NORMALIZE_MIN_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AggregatorKind {
    EdgeConv,
    MrGcn,
    GraphSage,
    GraphSageNormalized,
    Gin,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 5] = [
        AggregatorKind::EdgeConv,
        AggregatorKind::MrGcn,
        AggregatorKind::GraphSage,
        AggregatorKind::GraphSageNormalized,
        AggregatorKind::Gin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregatorKind::EdgeConv => "edgeconv",
            AggregatorKind::MrGcn => "mrgcn",
            AggregatorKind::GraphSage => "graphsage",
            AggregatorKind::GraphSageNormalized => "graphsage-normalized",
            AggregatorKind::Gin => "gin",
        }
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregator {s:?}")))
    }
}

/// Learnable state of one graph convolution layer.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub kind: AggregatorKind,
    pub d_in: usize,
    pub d_out: usize,
    /// Update MLP; the last unit produces the layer output.
    pub mlp: Vec<MlpUnit>,
    /// GraphSAGE's per-neighbor MLP.
    pub inner: Option<MlpUnit>,
    /// GIN's learnable ε.
    pub eps_gin: Option<ParamId>,
}

impl GcnLayer {
    /// Builds a layer with `mlp_depth ≥ 1` stacked units in its update MLP.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        kind: AggregatorKind,
        d_in: usize,
        d_out: usize,
        mlp_depth: usize,
        rng: &mut R,
    ) -> Self {
        let (mlp_in, inner, eps_gin) = match kind {
            AggregatorKind::EdgeConv | AggregatorKind::MrGcn => (2 * d_in, None, None),
            AggregatorKind::GraphSage | AggregatorKind::GraphSageNormalized => {
                let inner = MlpUnit::new(
                    store,
                    &format!("{prefix}.inner"),
                    d_in,
                    d_out,
                    true,
                    Activation::Relu,
                    rng,
                );
                (d_in + d_out, Some(inner), None)
            }
            AggregatorKind::Gin => {
                let eps = store.add_param(format!("{prefix}.eps_gin"), Tensor::scalar(0.0));
                (d_in, None, Some(eps))
            }
        };
        let mlp = (0..mlp_depth.max(1))
            .map(|i| {
                let din = if i == 0 { mlp_in } else { d_out };
                MlpUnit::new(
                    store,
                    &format!("{prefix}.mlp{i}"),
                    din,
                    d_out,
                    true,
                    Activation::Relu,
                    rng,
                )
            })
            .collect();
        Self {
            kind,
            d_in,
            d_out,
            mlp,
            inner,
            eps_gin,
        }
    }

    /// Zeroes the final affine of the update MLP, making the layer output
    /// identically zero (batch-norm shift is zero at initialization).
    pub fn zero_output(&self, store: &mut ParamStore) {
        let last = self.mlp.last().expect("at least one unit");
        last.zero_affine(store);
        if let Some(bn) = last.bn {
            store.value_mut(bn.beta).data_mut().fill(0.0);
        }
    }

    fn run_mlp(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        mut x: Var,
        mode: Mode,
    ) -> Result<Var> {
        for unit in &self.mlp {
            x = unit.forward(tape, store, x, mode)?;
        }
        Ok(x)
    }

    fn check(&self, tape: &Tape, h: Var, nbrs: &NeighborList) -> Result<usize> {
        let (n, d) = tape.value(h).dims2("gcn layer input")?;
        if d != self.d_in {
            return Err(contract(format!(
                "{} layer expects {} input channels, got {d}",
                self.kind, self.d_in
            )));
        }
        if nbrs.num_vertices() != n {
            return Err(contract(format!(
                "neighbor list covers {} vertices, features have {n}",
                nbrs.num_vertices()
            )));
        }
        Ok(n)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        h: Var,
        nbrs: &NeighborList,
        mode: Mode,
    ) -> Result<Var> {
        match self.kind {
            AggregatorKind::EdgeConv => edgeconv_forward(self, tape, store, h, nbrs, mode),
            AggregatorKind::MrGcn => mrgcn_forward(self, tape, store, h, nbrs, mode),
            AggregatorKind::GraphSage => graphsage_forward(self, tape, store, h, nbrs, mode, false),
            AggregatorKind::GraphSageNormalized => {
                graphsage_forward(self, tape, store, h, nbrs, mode, true)
            }
            AggregatorKind::Gin => gin_forward(self, tape, store, h, nbrs, mode),
        }
    }
}

fn neighbor_features(tape: &mut Tape, h: Var, nbrs: &NeighborList, n: usize) -> Result<Var> {
    tape.gather_rows(h, nbrs.indices().to_vec(), &[n, nbrs.k()])
}

/// `max_u mlp(concat(h_v, h_u − h_v))`: the MLP runs on every edge.
pub fn edgeconv_forward(
    layer: &GcnLayer,
    tape: &mut Tape,
    store: &mut ParamStore,
    h: Var,
    nbrs: &NeighborList,
    mode: Mode,
) -> Result<Var> {
    let n = layer.check(tape, h, nbrs)?;
    let center = tape.repeat_rows(h, nbrs.k())?;
    let nb = neighbor_features(tape, h, nbrs, n)?;
    let rel = tape.sub(nb, center)?;
    let edge = tape.concat(center, rel)?;
    let y = layer.run_mlp(tape, store, edge, mode)?;
    tape.max_reduce_neighbors(y)
}

/// `mlp(concat(h_v, max_u (h_u − h_v)))`: one MLP per vertex after pooling.
pub fn mrgcn_forward(
    layer: &GcnLayer,
    tape: &mut Tape,
    store: &mut ParamStore,
    h: Var,
    nbrs: &NeighborList,
    mode: Mode,
) -> Result<Var> {
    let n = layer.check(tape, h, nbrs)?;
    let center = tape.repeat_rows(h, nbrs.k())?;
    let nb = neighbor_features(tape, h, nbrs, n)?;
    let rel = tape.sub(nb, center)?;
    let pooled = tape.max_reduce_neighbors(rel)?;
    let x = tape.concat(h, pooled)?;
    layer.run_mlp(tape, store, x, mode)
}

/// `mlp(concat(h_v, max_u inner(h_u)))`, optionally scaled to unit norm.
pub fn graphsage_forward(
    layer: &GcnLayer,
    tape: &mut Tape,
    store: &mut ParamStore,
    h: Var,
    nbrs: &NeighborList,
    mode: Mode,
    normalize: bool,
) -> Result<Var> {
    let n = layer.check(tape, h, nbrs)?;
    let inner = layer
        .inner
        .as_ref()
        .ok_or_else(|| contract("graphsage layer without an inner MLP"))?;
    let nb = neighbor_features(tape, h, nbrs, n)?;
    let transformed = inner.forward(tape, store, nb, mode)?;
    let pooled = tape.max_reduce_neighbors(transformed)?;
    let x = tape.concat(h, pooled)?;
    let y = layer.run_mlp(tape, store, x, mode)?;
    Ok(if normalize {
        tape.row_normalize(y, NORMALIZE_MIN_NORM)
    } else {
        y
    })
}

/// `mlp((1 + ε)·h_v + Σ_u h_u)` with a learnable ε.
pub fn gin_forward(
    layer: &GcnLayer,
    tape: &mut Tape,
    store: &mut ParamStore,
    h: Var,
    nbrs: &NeighborList,
    mode: Mode,
) -> Result<Var> {
    let n = layer.check(tape, h, nbrs)?;
    let eps_id = layer
        .eps_gin
        .ok_or_else(|| contract("gin layer without epsilon"))?;
    let eps = tape.param(store, eps_id);
    let nb = neighbor_features(tape, h, nbrs, n)?;
    let summed = tape.sum_reduce_neighbors(nb)?;
    let center = tape.one_plus_scale(h, eps)?;
    let x = tape.add(center, summed)?;
    layer.run_mlp(tape, store, x, mode)
}

/// `F(h) + h`, vertex-wise.
pub fn residual_wrap(
    layer: &GcnLayer,
    tape: &mut Tape,
    store: &mut ParamStore,
    h: Var,
    nbrs: &NeighborList,
    mode: Mode,
) -> Result<Var> {
    if layer.d_in != layer.d_out {
        return Err(Error::ResidualShape {
            d_in: layer.d_in,
            d_out: layer.d_out,
        });
    }
    let f = layer.forward(tape, store, h, nbrs, mode)?;
    tape.add(f, h)
}

/// `concat(h, F(h))`; returns `(concatenation, F(h))`.
pub fn dense_wrap(
    layer: &GcnLayer,
    tape: &mut Tape,
    store: &mut ParamStore,
    h: Var,
    nbrs: &NeighborList,
    mode: Mode,
) -> Result<(Var, Var)> {
    let f = layer.forward(tape, store, h, nbrs, mode)?;
    Ok((tape.concat(h, f)?, f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::knn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn layer(kind: AggregatorKind, d_in: usize, d_out: usize) -> (ParamStore, GcnLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let l = GcnLayer::new(&mut store, "l", kind, d_in, d_out, 1, &mut rng);
        (store, l)
    }

    fn run(kind: AggregatorKind, h: &Tensor, nbrs: &NeighborList, d_out: usize) -> Tensor {
        let (mut store, l) = layer(kind, h.cols(), d_out);
        let mut tape = Tape::new();
        let x = tape.constant(h.clone());
        let y = l
            .forward(&mut tape, &mut store, x, nbrs, Mode::Eval)
            .unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn permuting_neighbor_lists_keeps_output() {
        let h = random(10, 3, 1);
        let nbrs = knn(&h, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut shuffled = nbrs.indices().to_vec();
        for row in shuffled.chunks_mut(4) {
            rand::seq::SliceRandom::shuffle(row, &mut rng);
        }
        let shuffled = NeighborList::new(4, shuffled).unwrap();
        for kind in AggregatorKind::ALL {
            let a = run(kind, &h, &nbrs, 5);
            let b = run(kind, &h, &shuffled, 5);
            assert!(a.max_abs_diff(&b) < 1e-12, "{kind}");
        }
    }

    #[test]
    fn normalized_sage_has_unit_rows() {
        let h = random(12, 4, 3);
        let nbrs = knn(&h, 3).unwrap();
        let y = run(AggregatorKind::GraphSageNormalized, &h, &nbrs, 6);
        for i in 0..12 {
            let norm = y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(
                norm == 0.0 || (norm - 1.0).abs() < 1e-9,
                "row {i} norm {norm}"
            );
        }
    }

    #[test]
    fn gin_pre_mlp_sum() {
        // With an identity update the GIN output is (1 + ε)·h_v + Σ h_u.
        let (mut store, mut l) = layer(AggregatorKind::Gin, 2, 2);
        let unit = &mut l.mlp[0];
        unit.bn = None;
        unit.activation = Activation::None;
        *store.value_mut(unit.weight) = Tensor::eye(2);
        let h = Tensor::ones(&[3, 2]);
        let nbrs = NeighborList::new(2, vec![1, 2, 0, 2, 0, 1]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(h);
        let y = l
            .forward(&mut tape, &mut store, x, &nbrs, Mode::Eval)
            .unwrap();
        assert_eq!(tape.value(y).data(), &[3.0; 6]);
    }

    #[test]
    fn residual_requires_equal_widths() {
        let (mut store, l) = layer(AggregatorKind::MrGcn, 3, 4);
        let h = random(5, 3, 4);
        let nbrs = knn(&h, 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(h);
        assert!(matches!(
            residual_wrap(&l, &mut tape, &mut store, x, &nbrs, Mode::Eval),
            Err(Error::ResidualShape { d_in: 3, d_out: 4 })
        ));
    }

    #[test]
    fn zero_branch_residual_is_identity() {
        for kind in AggregatorKind::ALL {
            let (mut store, l) = layer(kind, 4, 4);
            l.zero_output(&mut store);
            let h = random(8, 4, 5);
            let nbrs = knn(&h, 3).unwrap();
            let mut tape = Tape::new();
            let x = tape.input(h.clone());
            let y = residual_wrap(&l, &mut tape, &mut store, x, &nbrs, Mode::Train).unwrap();
            assert_eq!(tape.value(y), &h, "{kind}");
            let loss = tape.sum(y);
            tape.backward(loss).unwrap();
            assert_eq!(tape.grad(x).unwrap(), &[1.0; 32][..], "{kind}");
        }
    }

    #[test]
    fn dense_output_prefix_is_input() {
        let (mut store, l) = layer(AggregatorKind::EdgeConv, 3, 5);
        let h = random(6, 3, 8);
        let nbrs = knn(&h, 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(h.clone());
        let (y, _) = dense_wrap(&l, &mut tape, &mut store, x, &nbrs, Mode::Train).unwrap();
        let yv = tape.value(y);
        assert_eq!(yv.shape(), &[6, 8]);
        for i in 0..6 {
            assert_eq!(&yv.row(i)[..3], h.row(i));
        }
    }

    #[test]
    fn rejects_wrong_neighbor_count() {
        let (mut store, l) = layer(AggregatorKind::EdgeConv, 3, 3);
        let h = random(6, 3, 8);
        let nbrs = knn(&random(7, 3, 9), 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(h);
        assert!(l
            .forward(&mut tape, &mut store, x, &nbrs, Mode::Eval)
            .is_err());
    }

    #[test]
    fn parse_kinds() {
        for k in AggregatorKind::ALL {
            assert_eq!(k.as_str().parse::<AggregatorKind>().unwrap(), k);
        }
        assert!("lstm".parse::<AggregatorKind>().is_err());
    }
}
