//! Dynamic edge construction: exact, dilated and stochastic dilated k-NN.
//!
//! Distances are squared ℓ2 computed brute force. A vertex is never its own
//! neighbor, and candidates at equal distance are ranked by vertex index, so
//! every neighbor list is a deterministic function of its inputs (and seed).

use rand::seq::index;
use rand::Rng;

use crate::autodiff::Mode;
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Coordinates, auxiliary features and labels of one point block.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// `N × 3`.
    pub coords: Tensor,
    /// `N × C`; `C` may be zero.
    pub aux: Tensor,
    pub labels: Vec<usize>,
}

impl PointCloud {
    pub fn new(coords: Tensor, aux: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (n, three) = coords.dims2("point cloud coords")?;
        if three != 3 {
            return Err(contract(format!(
                "coords must be N x 3, got {:?}",
                coords.shape()
            )));
        }
        if n == 0 {
            return Err(Error::EmptyInput("point cloud with no points".into()));
        }
        let (na, _) = aux.dims2("point cloud aux features")?;
        if na != n || labels.len() != n {
            return Err(contract(format!(
                "cloud has {n} coords, {na} aux rows and {} labels",
                labels.len()
            )));
        }
        if !coords.is_finite() {
            return Err(contract("non-finite coordinate"));
        }
        Ok(Self {
            coords,
            aux,
            labels,
        })
    }

    /// Cloud from coordinates only (`C = 0`).
    pub fn from_coords(coords: Tensor, labels: Vec<usize>) -> Result<Self> {
        let n = coords.rows();
        Self::new(coords, Tensor::zeros(&[n, 0]), labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn aux_dim(&self) -> usize {
        self.aux.cols()
    }

    /// `N × (3 + C)` input features: coordinates followed by auxiliary ones.
    pub fn input_features(&self) -> Tensor {
        let c = self.aux_dim();
        let mut data = Vec::with_capacity(self.len() * (3 + c));
        for i in 0..self.len() {
            data.extend_from_slice(self.coords.row(i));
            data.extend_from_slice(self.aux.row(i));
        }
        Tensor::from_parts(vec![self.len(), 3 + c], data)
    }

    /// Same cloud with its points reordered so that new point `i` is old
    /// point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> PointCloud {
        PointCloud {
            coords: self.coords.select_rows(perm),
            aux: self.aux.select_rows(perm),
            labels: perm.iter().map(|&p| self.labels[p]).collect(),
        }
    }
}

/// `k` directed neighbors per vertex, stored row-major as `N × k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborList {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborList {
    /// Validates the no-self-loop, in-range and exact-`k` invariants.
    pub fn new(k: usize, indices: Vec<usize>) -> Result<Self> {
        if k == 0 {
            return Err(Error::EmptyNeighborhood);
        }
        if indices.len() % k != 0 {
            return Err(contract("neighbor index count is not a multiple of k"));
        }
        let n = indices.len() / k;
        for (v, row) in indices.chunks(k).enumerate() {
            if let Some(&u) = row.iter().find(|&&u| u >= n || u == v) {
                return Err(contract(format!(
                    "invalid neighbor {u} for vertex {v} of {n}"
                )));
            }
        }
        Ok(Self { k, indices })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_vertices(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.indices[v * self.k..(v + 1) * self.k]
    }

    /// Flat `N·k` index array.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Dilation rate and stochastic-dilation probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DilationSpec {
    pub d: usize,
    pub epsilon: f64,
    pub mode: Mode,
}

impl DilationSpec {
    pub fn new(d: usize, epsilon: f64, mode: Mode) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidHyperparameter(
                "dilation rate must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidHyperparameter(format!(
                "stochastic dilation probability {epsilon} outside [0, 1]"
            )));
        }
        Ok(Self { d, epsilon, mode })
    }

    /// Deterministic dilation `d`.
    pub fn deterministic(d: usize) -> Result<Self> {
        Self::new(d, 0.0, Mode::Eval)
    }
}

/// `N × N` matrix of squared ℓ2 distances between rows.
///
/// Each pair is summed feature by feature in order, so entries are bitwise
/// equal to the direct per-pair loop.
pub fn pairwise_sq_dist(features: &Tensor) -> Result<Tensor> {
    let (n, d) = features.dims2("pairwise_sq_dist")?;
    if n == 0 {
        return Err(Error::EmptyInput("pairwise_sq_dist over zero rows".into()));
    }
    if !features.is_finite() {
        return Err(contract("pairwise_sq_dist: non-finite feature"));
    }
    // Column-major copy so the inner loop runs over vertices.
    let x = features.data();
    let mut cols = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            cols[c * n + i] = x[i * d + c];
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let row = &mut out[i * n + i + 1..(i + 1) * n];
        for col in cols.chunks(n) {
            let xi = col[i];
            for (s, &xj) in row.iter_mut().zip(&col[i + 1..]) {
                let diff = xi - xj;
                *s += diff * diff;
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            out[i * n + j] = out[j * n + i];
        }
    }
    Ok(Tensor::from_parts(vec![n, n], out))
}

/// Effective dilation after clamping so that `k·d ≤ N − 1`.
pub fn clamp_dilation(n: usize, k: usize, d: usize) -> usize {
    if k * d <= n.saturating_sub(1) {
        d
    } else {
        ((n - 1) / k).max(1)
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::EmptyNeighborhood);
    }
    if k >= n {
        return Err(Error::InsufficientPoints { k, n });
    }
    Ok(())
}

/// `(distance, index)` packed into one integer with the same ordering:
/// the bit patterns of non-negative finite `f64`s sort like the values.
fn candidate_key(dist: f64, j: usize) -> u128 {
    debug_assert!(dist >= 0.0);
    (u128::from(dist.to_bits()) << 64) | j as u128
}

/// The `m` nearest other vertices of every vertex, ascending by
/// `(distance, index)`. Returned row-major as `N × m`.
pub fn sorted_candidates(features: &Tensor, m: usize) -> Result<Vec<usize>> {
    check_k(features.rows(), m)?;
    let dist = pairwise_sq_dist(features)?;
    let n = dist.rows();
    let mut out = Vec::with_capacity(n * m);
    let mut keys: Vec<u128> = Vec::with_capacity(n);
    for i in 0..n {
        keys.clear();
        keys.extend(
            dist.row(i)
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &s)| candidate_key(s, j)),
        );
        if m < keys.len() {
            keys.select_nth_unstable(m);
            keys.truncate(m);
        }
        keys.sort_unstable();
        out.extend(keys.iter().map(|&key| (key as u64) as usize));
    }
    Ok(out)
}

/// Exact k nearest neighbors in ascending distance order.
pub fn knn(features: &Tensor, k: usize) -> Result<NeighborList> {
    check_k(features.rows(), k)?;
    let indices = sorted_candidates(features, k)?;
    Ok(NeighborList { k, indices })
}

/// Every `d`-th of the `k·d` nearest neighbors: ranks `0, d, …, (k−1)d`.
pub fn dilated_knn(features: &Tensor, k: usize, spec: &DilationSpec) -> Result<NeighborList> {
    stochastic_draw::<rand::rngs::mock::StepRng>(features, k, spec, None).map(|(l, _)| l)
}

/// Dilated k-NN that, in train mode and with probability `ε` per vertex,
/// instead draws `k` distinct neighbors uniformly from the `k·d` candidates.
pub fn stochastic_dilated_knn<R: Rng + ?Sized>(
    features: &Tensor,
    k: usize,
    spec: &DilationSpec,
    rng: &mut R,
) -> Result<NeighborList> {
    stochastic_draw(features, k, spec, Some(rng)).map(|(l, _)| l)
}

/// [`stochastic_dilated_knn`] that also reports, per vertex, whether the
/// random branch was taken.
pub fn stochastic_dilated_knn_traced<R: Rng + ?Sized>(
    features: &Tensor,
    k: usize,
    spec: &DilationSpec,
    rng: &mut R,
) -> Result<(NeighborList, Vec<bool>)> {
    stochastic_draw(features, k, spec, Some(rng))
}

fn stochastic_draw<R: Rng + ?Sized>(
    features: &Tensor,
    k: usize,
    spec: &DilationSpec,
    rng: Option<&mut R>,
) -> Result<(NeighborList, Vec<bool>)> {
    let n = features.rows();
    check_k(n, k)?;
    let d = clamp_dilation(n, k, spec.d);
    let m = k * d;
    let cand = sorted_candidates(features, m)?;
    let mut rng = rng.filter(|_| spec.mode == Mode::Train && spec.epsilon > 0.0);
    let mut indices = Vec::with_capacity(n * k);
    let mut random_branch = vec![false; n];
    for (v, row) in cand.chunks(m).enumerate() {
        if let Some(rng) = rng.as_deref_mut() {
            if rng.gen::<f64>() < spec.epsilon {
                random_branch[v] = true;
                let mut picks = index::sample(rng, m, k).into_vec();
                picks.sort_unstable();
                indices.extend(picks.iter().map(|&p| row[p]));
                continue;
            }
        }
        indices.extend(row.iter().step_by(d).take(k));
    }
    Ok((NeighborList { k, indices }, random_branch))
}

/// Input graph of the first layer: dilated k-NN over coordinates only.
pub fn build_input_graph<R: Rng + ?Sized>(
    cloud: &PointCloud,
    k: usize,
    spec: &DilationSpec,
    rng: &mut R,
) -> Result<NeighborList> {
    stochastic_dilated_knn(&cloud.coords, k, spec, rng)
}
