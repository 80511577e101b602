//! Named parameter storage and the plain-text checkpoint format.
//!
//! A checkpoint is a header line `DGKPT v1 <count>` followed by one record
//! per tensor: `name<TAB>dims d1 d2 ...<TAB>values v1 v2 ...`, values in
//! row-major order with 17 significant digits so that they round-trip.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, io_err, Error, Result};
use crate::tensor::Tensor;

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Learnable weights plus non-learnable buffers (batch-norm running stats).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, false)
    }

    /// He-normal weight matrix `fan_in × fan_out`.
    pub fn add_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        self.add_param(name, Tensor::from_parts(vec![fan_in, fan_out], data))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].trainable)
    }

    /// Number of learnable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Serializes every tensor in insertion order.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = format!("DGKPT v1 {}\n", self.entries.len());
        for e in &self.entries {
            out.push_str(&e.name);
            out.push_str("\tdims");
            for d in e.value.shape() {
                write!(out, " {d}").unwrap();
            }
            out.push_str("\tvalues");
            for v in e.value.data() {
                write!(out, " {v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_string()).map_err(io_err(path))
    }

    /// Overwrites every tensor of `self` from a checkpoint with exactly the
    /// same names and shapes.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        self.load_from_str(&text, path)
    }

    pub fn load_from_str(&mut self, text: &str, path: &Path) -> Result<()> {
        let records = parse_checkpoint(text, path)?;
        if records.len() != self.entries.len() {
            return Err(contract(format!(
                "checkpoint has {} tensors, model expects {}",
                records.len(),
                self.entries.len()
            )));
        }
        for (name, tensor) in records {
            let id = self.find(&name).ok_or_else(|| {
                contract(format!("checkpoint tensor {name} is not part of the model"))
            })?;
            if self.value(id).shape() != tensor.shape() {
                return Err(contract(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    self.value(id).shape()
                )));
            }
            *self.value_mut(id) = tensor;
        }
        Ok(())
    }
}

/// Parses checkpoint text into `(name, tensor)` records.
pub fn parse_checkpoint(text: &str, path: &Path) -> Result<Vec<(String, Tensor)>> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| perr(1, "empty checkpoint".into()))?;
    let count: usize = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["DGKPT", "v1", n] => n
            .parse()
            .map_err(|_| perr(1, format!("bad parameter count {n:?}")))?,
        _ => return Err(perr(1, format!("bad header {header:?}"))),
    };
    let mut out = Vec::with_capacity(count);
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, dims, values] = fields.as_slice() else {
            return Err(perr(lineno, "expected three tab-separated fields".into()));
        };
        let shape = dims
            .strip_prefix("dims")
            .ok_or_else(|| perr(lineno, "missing dims field".into()))?
            .split_whitespace()
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| perr(lineno, format!("bad dim {d:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let data = values
            .strip_prefix("values")
            .ok_or_else(|| perr(lineno, "missing values field".into()))?
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| perr(lineno, format!("bad value {v:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let tensor = Tensor::new(shape, data).map_err(|e| perr(lineno, e.to_string()))?;
        out.push((name.to_string(), tensor));
    }
    if out.len() != count {
        return Err(perr(
            1,
            format!("header declares {count} tensors, found {}", out.len()),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = values.len();
        s.add_param("layer0.w", Tensor::new(vec![n], values).unwrap());
        s.add_buffer("layer0.bn.running_var", Tensor::ones(&[2, 1]));
        s
    }

    #[test]
    fn checkpoint_layout() {
        let s = store_with(vec![0.5, -2.0]);
        let text = s.to_checkpoint_string();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("DGKPT v1 2"));
        let rec = lines.next().unwrap();
        assert!(rec.starts_with("layer0.w\tdims 2\tvalues "));
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let s = store_with(vec![1.0, 2.0]);
        let mut other = store_with(vec![1.0, 2.0, 3.0]);
        let err = other
            .load_from_str(&s.to_checkpoint_string(), Path::new("x"))
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn rejects_bad_header() {
        let err = parse_checkpoint("DGKPT v2 0\n", Path::new("ck")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(values in prop::collection::vec(-1e300f64..1e300, 1..20)) {
            let s = store_with(values);
            let mut back = store_with(vec![0.0; s.value(ParamId(0)).len()]);
            back.load_from_str(&s.to_checkpoint_string(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
