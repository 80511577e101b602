//! Synthetic labeled point blocks and the point-block / manifest file formats.
//!
//! Point-block file:
//!
//! ```text
//! PCSEG v1 N C L
//! x y z [f1 .. fC] label      (N lines)
//! ```
//!
//! Dataset manifest:
//!
//! ```text
//! PCDS v1 num-classes split
//! path/to/block_0000.pcs      (one per line, relative to the manifest)
//! ```

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, io_err, Error, Result};
use crate::graph::PointCloud;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Fixed-size labeled blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub blocks: Vec<PointCloud>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(blocks: Vec<PointCloud>, num_classes: usize, split: Split) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return Err(Error::Validation("dataset has no blocks".into()));
        };
        let (n, c) = (first.len(), first.aux_dim());
        for (i, b) in blocks.iter().enumerate() {
            if b.len() != n || b.aux_dim() != c {
                return Err(Error::Validation(format!(
                    "block {i} has {} points and {} aux features, block 0 has {n} and {c}",
                    b.len(),
                    b.aux_dim()
                )));
            }
            if let Some(&l) = b.labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::Validation(format!(
                    "block {i} has label {l} but the dataset declares {num_classes} classes"
                )));
            }
        }
        Ok(Self {
            blocks,
            num_classes,
            split,
        })
    }

    pub fn points_per_block(&self) -> usize {
        self.blocks[0].len()
    }

    pub fn aux_dim(&self) -> usize {
        self.blocks[0].aux_dim()
    }

    pub fn total_points(&self) -> usize {
        self.blocks.iter().map(PointCloud::len).sum()
    }
}

/// Primitive structure kinds, in shape-mix order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Cluster,
    Plane,
    Bar,
}

const PRIMITIVES: [Primitive; 3] = [Primitive::Cluster, Primitive::Plane, Primitive::Bar];
const GRID: usize = 3;

/// Parameters of the synthetic block generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_blocks: usize,
    pub points_per_block: usize,
    pub num_classes: usize,
    /// Proportions of clusters, planes and bars.
    pub shape_mix: [f64; 3],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_blocks: 8,
            points_per_block: 512,
            num_classes: 4,
            shape_mix: [1.0 / 3.0; 3],
            noise_sigma: 0.005,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn active_kinds(&self) -> Vec<Primitive> {
        PRIMITIVES
            .iter()
            .zip(self.shape_mix)
            .filter(|(_, p)| *p > 0.0)
            .map(|(k, _)| *k)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.points_per_block == 0 {
            return Err(contract(
                "synthetic dataset needs at least one block and one point",
            ));
        }
        if self.num_classes == 0 || self.num_classes > GRID * GRID * GRID {
            return Err(contract(format!(
                "synthetic dataset supports 1..={} classes, got {}",
                GRID * GRID * GRID,
                self.num_classes
            )));
        }
        if self.shape_mix.iter().any(|p| !(p.is_finite() && *p >= 0.0))
            || (self.shape_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(contract(format!(
                "shape mix {:?} must be non-negative and sum to 1",
                self.shape_mix
            )));
        }
        if self.num_classes < self.active_kinds().len() {
            return Err(contract(format!(
                "{} classes cannot cover {} primitive kinds",
                self.num_classes,
                self.active_kinds().len()
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(contract("noise sigma must be a non-negative number"));
        }
        Ok(())
    }

    /// `(primitive, variant)` of every class: classes cycle through the
    /// primitives with non-zero proportion.
    pub fn class_shapes(&self) -> Vec<(Primitive, usize)> {
        let kinds = self.active_kinds();
        (0..self.num_classes)
            .map(|c| (kinds[c % kinds.len()], c / kinds.len()))
            .collect()
    }

    /// Expected fraction of points carrying each class label.
    pub fn class_proportions(&self) -> Vec<f64> {
        let shapes = self.class_shapes();
        shapes
            .iter()
            .map(|(kind, _)| {
                let idx = PRIMITIVES.iter().position(|k| k == kind).unwrap();
                let same = shapes.iter().filter(|(k, _)| k == kind).count();
                self.shape_mix[idx] / same as f64
            })
            .collect()
    }
}

/// Splits `total` into integer counts proportional to `weights`
/// (largest-remainder rounding, ties to the lower index).
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().cycle().take(missing) {
        counts[i] += 1;
    }
    counts
}

fn sample_primitive<R: Rng>(
    rng: &mut R,
    kind: Primitive,
    variant: usize,
    center: [f64; 3],
    half: f64,
) -> [f64; 3] {
    // Variants rotate the principal axis (vertical, then the two horizontal
    // ones) and shrink the footprint every third step.
    const AXES: [usize; 3] = [2, 0, 1];
    let axis = AXES[variant % 3];
    let scale = 0.8 / (1.0 + (variant / 3) as f64 * 0.5);
    let extent = half * scale;
    let mut p = center;
    match kind {
        Primitive::Cluster => {
            let sigma = half * 0.25 * (1.0 + variant as f64);
            let normal = Normal::new(0.0, sigma).expect("positive sigma");
            for (c, x) in p.iter_mut().zip(center) {
                *c = (x + normal.sample(rng)).clamp(x - half, x + half);
            }
        }
        Primitive::Plane => {
            for (i, c) in p.iter_mut().enumerate() {
                if i != axis {
                    *c += rng.gen_range(-extent..extent);
                }
            }
        }
        Primitive::Bar => {
            p[axis] += rng.gen_range(-extent..extent);
        }
    }
    p
}

/// Generates blocks of spatially separated labeled primitives.
///
/// Every block is the unit cube split into a 3×3×3 grid; each class owns
/// one or two cells holding instances of its primitive, so a point's label
/// follows from the local shape around it.
pub fn synth_dataset(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shapes = spec.class_shapes();
    let counts = apportion(spec.points_per_block, &spec.class_proportions());
    let cells = GRID * GRID * GRID;
    let instances = (cells / spec.num_classes).clamp(1, 2);
    let half = 0.5 / GRID as f64;
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");

    let mut blocks = Vec::with_capacity(spec.num_blocks);
    for _ in 0..spec.num_blocks {
        let mut cell_ids: Vec<usize> = (0..cells).collect();
        cell_ids.shuffle(&mut rng);
        let mut points: Vec<([f64; 3], usize)> = Vec::with_capacity(spec.points_per_block);
        for (class, (&(kind, variant), &count)) in shapes.iter().zip(&counts).enumerate() {
            let per_instance = apportion(count, &vec![1.0 / instances as f64; instances]);
            for (inst, &n_inst) in per_instance.iter().enumerate() {
                let cell = cell_ids[class * instances + inst];
                let center = [
                    (cell % GRID) as f64 * 2.0 * half + half,
                    (cell / GRID % GRID) as f64 * 2.0 * half + half,
                    (cell / (GRID * GRID)) as f64 * 2.0 * half + half,
                ];
                for _ in 0..n_inst {
                    let mut p = sample_primitive(&mut rng, kind, variant, center, half);
                    if spec.noise_sigma > 0.0 {
                        p.iter_mut().for_each(|c| *c += noise.sample(&mut rng));
                    }
                    points.push((p, class));
                }
            }
        }
        points.shuffle(&mut rng);
        let coords = points.iter().flat_map(|(p, _)| *p).collect();
        let labels = points.iter().map(|(_, l)| *l).collect();
        blocks.push(PointCloud::from_coords(
            Tensor::from_parts(vec![spec.points_per_block, 3], coords),
            labels,
        )?);
    }
    Dataset::new(blocks, spec.num_classes, split)
}

fn fmt_value(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").unwrap();
}

/// Serializes a block in the point-block text format.
pub fn point_file_string(cloud: &PointCloud, num_classes: usize) -> String {
    let c = cloud.aux_dim();
    let mut out = format!("PCSEG v1 {} {c} {num_classes}\n", cloud.len());
    for i in 0..cloud.len() {
        for &v in cloud.coords.row(i).iter().chain(cloud.aux.row(i)) {
            fmt_value(&mut out, v);
            out.push(' ');
        }
        writeln!(out, "{}", cloud.labels[i]).unwrap();
    }
    out
}

pub fn save_point_file(cloud: &PointCloud, num_classes: usize, path: &Path) -> Result<()> {
    fs::write(path, point_file_string(cloud, num_classes)).map_err(io_err(path))
}

/// Reads a block; returns the cloud and its declared class count.
pub fn load_point_file(path: &Path) -> Result<(PointCloud, usize)> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_point_file(&text, path)
}

pub fn parse_point_file(text: &str, path: &Path) -> Result<(PointCloud, usize)> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| perr(1, "empty point file".into()))?;
    let (n, c, num_classes) = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["PCSEG", "v1", n, c, l] => {
            let p = |s: &str, what: &str| {
                s.parse::<usize>()
                    .map_err(|_| perr(1, format!("bad {what} {s:?} in header")))
            };
            (p(n, "N")?, p(c, "C")?, p(l, "L")?)
        }
        _ => return Err(perr(1, format!("bad header {header:?}"))),
    };
    let mut coords = Vec::with_capacity(3 * n);
    let mut aux = Vec::with_capacity(c * n);
    let mut labels = Vec::with_capacity(n);
    for (i, line) in lines {
        let lineno = i + 1;
        if labels.len() == n {
            return Err(perr(lineno, format!("more than the declared {n} points")));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 + c {
            return Err(perr(
                lineno,
                format!(
                    "expected {} fields (x y z, {c} features, label), got {}",
                    4 + c,
                    fields.len()
                ),
            ));
        }
        for (j, f) in fields[..3 + c].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| perr(lineno, format!("bad number {f:?}")))?;
            if !v.is_finite() {
                return Err(perr(lineno, format!("non-finite value {f:?}")));
            }
            if j < 3 {
                coords.push(v);
            } else {
                aux.push(v);
            }
        }
        let label: usize = fields[3 + c]
            .parse()
            .map_err(|_| perr(lineno, format!("bad label {:?}", fields[3 + c])))?;
        if label >= num_classes {
            return Err(Error::Validation(format!(
                "{}:{lineno}: label {label} not below declared class count {num_classes}",
                path.display()
            )));
        }
        labels.push(label);
    }
    if labels.len() != n {
        return Err(perr(
            text.lines().count(),
            format!("header declares {n} points, found {}", labels.len()),
        ));
    }
    let cloud = PointCloud::new(
        Tensor::from_parts(vec![n, 3], coords),
        Tensor::from_parts(vec![n, c], aux),
        labels,
    )?;
    Ok((cloud, num_classes))
}

/// Writes `block_NNNN.pcs` files plus `manifest.pcds` into `dir`; returns
/// the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = format!("PCDS v1 {} {}\n", dataset.num_classes, dataset.split);
    for (i, block) in dataset.blocks.iter().enumerate() {
        let name = format!("block_{i:04}.pcs");
        save_point_file(block, dataset.num_classes, &dir.join(&name))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let path = dir.join("manifest.pcds");
    fs::write(&path, manifest).map_err(io_err(&path))?;
    Ok(path)
}

/// Loads every block listed in a manifest.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: manifest.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| perr(1, "empty manifest".into()))?;
    let (num_classes, split) = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["PCDS", "v1", l, split] => (
            l.parse::<usize>()
                .map_err(|_| perr(1, format!("bad class count {l:?}")))?,
            split.parse::<Split>().map_err(|e| perr(1, e.to_string()))?,
        ),
        _ => return Err(perr(1, format!("bad header {header:?}"))),
    };
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut blocks = Vec::new();
    for (_, line) in lines {
        let path = base.join(line.trim());
        let (cloud, declared) = load_point_file(&path)?;
        if declared != num_classes {
            return Err(Error::Validation(format!(
                "{} declares {declared} classes, manifest declares {num_classes}",
                path.display()
            )));
        }
        blocks.push(cloud);
    }
    Dataset::new(blocks, num_classes, split)
}
