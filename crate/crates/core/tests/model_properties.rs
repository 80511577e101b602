use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deepgcn::autodiff::{Mode, Tape};
use deepgcn::data::{synth_dataset, Split, SynthSpec};
use deepgcn::graph::{knn, PointCloud};
use deepgcn::layers::AggregatorKind;
use deepgcn::model::{Backbone, Model, ModelConfig};
use deepgcn::tensor::Tensor;

const BACKBONES: [Backbone; 3] = [Backbone::Plain, Backbone::Residual, Backbone::Dense];

fn config(backbone: Backbone, aggregator: AggregatorKind) -> ModelConfig {
    ModelConfig {
        backbone,
        aggregator,
        depth: 3,
        width: 6,
        k: 4,
        d_max: 2,
        num_classes: 3,
        fusion_width: 5,
        head_widths: [6, 5],
        ..ModelConfig::default()
    }
}

fn cloud(n: usize, aux: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Continuous coordinates: pairwise distances are distinct almost surely.
    let coords = Tensor::new(
        vec![n, 3],
        (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let aux = Tensor::new(
        vec![n, aux],
        (0..n * aux).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    PointCloud::new(coords, aux, (0..n).map(|i| i % 3).collect()).unwrap()
}

/// Logits and every parameter gradient from one training step.
fn step(model: &mut Model, c: &PointCloud, mode: Mode, seed: u64) -> (Tensor, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = model.forward(&mut tape, c, mode, &mut rng).unwrap();
    let loss = tape.softmax_cross_entropy(out.logits, &c.labels).unwrap();
    tape.backward(loss).unwrap();
    let logits = tape.value(out.logits).clone();
    let grads = tape.param_grads().map(|(_, g)| g.to_vec()).collect();
    (logits, grads)
}

#[test]
fn same_seed_gives_bit_identical_values_and_gradients() {
    let c = cloud(40, 0, 1);
    for backbone in BACKBONES {
        for kind in AggregatorKind::ALL {
            let cfg = config(backbone, kind);
            let a = step(&mut Model::new(cfg.clone(), 7).unwrap(), &c, Mode::Train, 3);
            let b = step(&mut Model::new(cfg, 7).unwrap(), &c, Mode::Train, 3);
            assert_eq!(a, b, "{backbone} {kind}");
        }
    }
}

#[test]
fn static_deterministic_forward_ignores_rng() {
    let c = cloud(40, 0, 2);
    let cfg = ModelConfig {
        dynamic_edges: false,
        epsilon: 0.0,
        dropout: 0.0,
        ..config(Backbone::Residual, AggregatorKind::EdgeConv)
    };
    let model = Model::new(cfg, 1).unwrap();
    let a = step(&mut model.clone(), &c, Mode::Train, 1);
    let b = step(&mut model.clone(), &c, Mode::Train, 99);
    assert_eq!(a, b);
}

#[test]
fn dynamic_edges_change_later_graphs() {
    // Coordinates on a line; auxiliary features reverse the spatial order in
    // a strongly scaled, interleaved way, so feature-space neighbors differ.
    let n = 30;
    let coords: Vec<f64> = (0..n).flat_map(|i| [i as f64 * 0.01, 0.0, 0.0]).collect();
    let aux: Vec<f64> = (0..n).map(|i| ((i * 7) % n) as f64 * 10.0).collect();
    let c = PointCloud::new(
        Tensor::new(vec![n, 3], coords).unwrap(),
        Tensor::new(vec![n, 1], aux).unwrap(),
        (0..n).map(|i| i % 3).collect(),
    )
    .unwrap();
    let run = |dynamic_edges| {
        let cfg = ModelConfig {
            dynamic_edges,
            aux_dim: 1,
            epsilon: 0.0,
            ..config(Backbone::Plain, AggregatorKind::EdgeConv)
        };
        let mut m = Model::new(cfg, 4).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        m.backbone_forward(&mut tape, &c, Mode::Eval, &mut rng)
            .unwrap()
            .graphs
    };
    let (fixed, dynamic) = (run(false), run(true));
    assert_eq!(fixed[0], dynamic[0]);
    assert!(fixed.iter().all(|g| *g == fixed[0]));
    assert_ne!(fixed[1], dynamic[1]);
}

#[test]
fn desk_smoke_run_has_finite_loss() {
    let c = cloud(512, 0, 5);
    for backbone in BACKBONES {
        let cfg = ModelConfig {
            depth: 7,
            width: 16,
            k: 4,
            ..config(backbone, AggregatorKind::EdgeConv)
        };
        let mut m = Model::new(cfg, 0).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m.forward(&mut tape, &c, Mode::Train, &mut rng).unwrap();
        let loss = tape.softmax_cross_entropy(out.logits, &c.labels).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.value(loss).data()[0].is_finite(), "{backbone}");
        assert!(tape
            .param_grads()
            .all(|(_, g)| g.iter().all(|v| v.is_finite())));
    }
}

#[test]
fn every_head_unit_receives_gradient() {
    let c = cloud(30, 0, 6);
    let mut m = Model::new(config(Backbone::Residual, AggregatorKind::MrGcn), 2).unwrap();
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = m.forward(&mut tape, &c, Mode::Train, &mut rng).unwrap();
    let loss = tape.softmax_cross_entropy(out.logits, &c.labels).unwrap();
    tape.backward(loss).unwrap();
    let grads: Vec<_> = tape.param_grads().map(|(id, g)| (id, g.to_vec())).collect();
    for unit in &m.head {
        let (_, g) = grads
            .iter()
            .find(|(id, _)| *id == unit.weight)
            .expect("head weight on tape");
        assert!(g.iter().map(|v| v * v).sum::<f64>() > 0.0);
    }
}

#[test]
fn one_nearest_neighbor_separates_two_clusters() {
    let data = synth_dataset(
        &SynthSpec {
            num_blocks: 2,
            points_per_block: 1024,
            num_classes: 2,
            shape_mix: [1.0, 0.0, 0.0],
            seed: 3,
            ..SynthSpec::default()
        },
        Split::Train,
    )
    .unwrap();
    let (mut hits, mut total) = (0, 0);
    for block in &data.blocks {
        let nn = knn(&block.coords, 1).unwrap();
        for v in 0..block.len() {
            hits += usize::from(block.labels[nn.neighbors(v)[0]] == block.labels[v]);
            total += 1;
        }
    }
    assert!(hits as f64 / total as f64 > 0.99, "{hits}/{total}");
}

fn distinct_rows(t: &Tensor) -> bool {
    let mut rows: Vec<Vec<u64>> = (0..t.rows())
        .map(|i| t.row(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    rows.sort_unstable();
    rows.windows(2).all(|w| w[0] != w[1])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logits_follow_vertex_permutation(seed in 0u64..1000, bb in 0usize..3, kind in 0usize..5, dynamic in any::<bool>()) {
        let c = cloud(36, 1, seed);
        let mut perm: Vec<usize> = (0..c.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 1));
        let cfg = ModelConfig {
            aux_dim: 1,
            dynamic_edges: dynamic,
            ..config(BACKBONES[bb], AggregatorKind::ALL[kind])
        };
        let mut m = Model::new(cfg, seed).unwrap();
        let mut run = |c: &PointCloud| {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = m.forward(&mut tape, c, Mode::Eval, &mut rng).unwrap();
            let distinct = out.trace.states.iter().all(|&s| distinct_rows(tape.value(s)));
            (tape.value(out.logits).clone(), distinct)
        };
        let (base, distinct) = run(&c);
        // Coinciding feature rows make dynamic neighbor order fall back to
        // vertex indices, which a permutation changes.
        prop_assume!(!dynamic || distinct);
        let (permuted, _) = run(&c.permuted(&perm));
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in permuted.row(i).iter().zip(base.row(p)) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "row {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn global_vector_ignores_duplication_and_order(seed in 0u64..1000, n in 1usize..20, train in any::<bool>()) {
        let mode = if train { Mode::Train } else { Mode::Eval };
        let cfg = config(Backbone::Plain, AggregatorKind::EdgeConv);
        let mut m = Model::new(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<Tensor> = (0..cfg.depth)
            .map(|_| Tensor::new(vec![n, cfg.width], (0..n * cfg.width).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap())
            .collect();
        let mut global = |rows: &[usize]| {
            let mut tape = Tape::new();
            let vars: Vec<_> = feats.iter().map(|f| tape.constant(f.select_rows(rows))).collect();
            let fused = m.fusion_forward(&mut tape, &vars, mode).unwrap();
            tape.value(fused).row(0)[cfg.local_width()..].to_vec()
        };
        let ident: Vec<usize> = (0..n).collect();
        let mut shuffled = ident.clone();
        shuffled.shuffle(&mut rng);
        let doubled: Vec<usize> = ident.iter().chain(&ident).copied().collect();
        let g = global(&ident);
        prop_assert_eq!(g.len(), cfg.fusion_width);
        for other in [global(&shuffled), global(&doubled)] {
            for (a, b) in other.iter().zip(&g) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{} vs {}", a, b);
            }
        }
    }
}
