use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sacd_core::diffcore::GradCheck;
use sacd_core::encoders::Module;
use sacd_core::graphalign::{structural_loss, GraphConfig, GraphEncoder, StructuralLossConfig};
use sacd_core::{Tape, Tensor, Var};

fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        &[rows, cols],
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn small_config() -> GraphConfig {
    GraphConfig {
        input_dim: 6,
        node_dim: 5,
        edge_dim: 3,
        message_dim: 4,
        readout_dim: 4,
        output_dim: 7,
        attention_slope: 0.2,
    }
}

/// `x W` for a row vector and a row-major `W`.
fn vm(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), r);
    (0..c)
        .map(|j| (0..r).map(|i| x[i] * w.values()[i * c + j]).sum())
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

struct Dense {
    nodes: Vec<Vec<f64>>,
    attention: Vec<Vec<f64>>,
    readout: Vec<f64>,
}

/// One propagation and the readout written out per node and per edge.
fn dense_oracle(g: &GraphEncoder, x: &[Vec<f64>]) -> Dense {
    let n = x.len();
    let t = |p: &sacd_core::Parameter| p.tensor.clone();
    let bias = |p: &Option<sacd_core::Parameter>| p.as_ref().unwrap().tensor.values().to_vec();
    let h: Vec<Vec<f64>> = x
        .iter()
        .map(|xi| relu(add(&vm(xi, &g.node.weight.tensor), g.node.bias.tensor.values())))
        .collect();
    let edge = |i: usize, j: usize| {
        let s = add(&vm(&x[i], &t(&g.edge.blocks[0])), &vm(&x[j], &t(&g.edge.blocks[1])));
        relu(add(&s, &bias(&g.edge.bias)))
    };
    let mut nodes = Vec::new();
    let mut attention = Vec::new();
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let scores: Vec<f64> = others
            .iter()
            .map(|&j| {
                let s = vm(&h[i], &t(&g.attention.blocks[0]))[0] + vm(&h[j], &t(&g.attention.blocks[1]))[0];
                if s > 0.0 {
                    s
                } else {
                    g.config.attention_slope * s
                }
            })
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let a: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
        let mut agg = vec![0.0; g.config.message_dim];
        for (k, &j) in others.iter().enumerate() {
            let m = add(
                &vm(&h[i], &t(&g.message.blocks[0])),
                &vm(&h[j], &t(&g.message.blocks[1])),
            );
            let m = add(&m, &vm(&edge(i, j), &t(&g.message.blocks[2])));
            let m = relu(add(&m, &bias(&g.message.bias)));
            for (acc, v) in agg.iter_mut().zip(m) {
                *acc += a[k] * v;
            }
        }
        let u = add(&vm(&h[i], &t(&g.update.blocks[0])), &vm(&agg, &t(&g.update.blocks[1])));
        nodes.push(relu(add(&u, &bias(&g.update.bias))));
        attention.push(a);
    }
    let pooled = nodes.iter().fold(vec![0.0; g.config.node_dim], |acc, h| add(&acc, h));
    let r = relu(add(
        &vm(&pooled, &g.readout_fc.weight.tensor),
        g.readout_fc.bias.tensor.values(),
    ));
    let readout = add(
        &vm(&r, &g.readout_mlp.weight.tensor),
        g.readout_mlp.bias.tensor.values(),
    );
    Dense {
        nodes,
        attention,
        readout,
    }
}

#[test]
fn one_propagation_on_three_nodes_matches_the_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..20 {
        let g = GraphEncoder::new("g", GraphConfig::uniform(2), seed);
        let x = random(&mut rng, 3, 2);
        let rows: Vec<Vec<f64>> = (0..3).map(|r| x.row_slice(r).to_vec()).collect();
        let oracle = dense_oracle(&g, &rows);

        let mut t = Tape::new();
        let xv = t.constant(x);
        let state = g.build_graph(&mut t, xv, 1).unwrap();
        let state = g.propagate(&mut t, &state).unwrap();
        let out = g.readout(&mut t, &state).unwrap();
        let h = t.value(state.node_states);
        for (i, node) in oracle.nodes.iter().enumerate() {
            for (a, b) in h.row_slice(i).iter().zip(node) {
                assert!((a - b).abs() < 1e-12, "seed {seed} node {i}");
            }
        }
        // edges are grouped by target with ascending sources
        let att = t.value(state.attention.unwrap()).values().to_vec();
        let flat: Vec<f64> = oracle.attention.concat();
        for (a, b) in att.iter().zip(&flat) {
            assert!((a - b).abs() < 1e-12, "seed {seed} attention");
        }
        for (a, b) in t.value(out).values().iter().zip(&oracle.readout) {
            assert!((a - b).abs() < 1e-12, "seed {seed} readout");
        }
    }
}

fn permuted(x: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&p| x.row_slice(p).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn identical_encoders_on_identical_features_have_zero_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (a, b) = (
        GraphEncoder::new("a", small_config(), 4),
        GraphEncoder::new("b", small_config(), 4),
    );
    let x = random(&mut rng, 5, 6);
    let mut t = Tape::new();
    let xv = t.constant(x);
    let (oa, ob) = (a.embed(&mut t, xv, 3).unwrap(), b.embed(&mut t, xv, 3).unwrap());
    let d = structural_loss(&mut t, oa, ob, None, &StructuralLossConfig::default()).unwrap();
    assert!(t.value(d).item().abs() < 1e-12);
}

#[test]
fn squared_embedding_norm_gradient_over_every_parameter() {
    let g = GraphEncoder::new("g", small_config(), 21);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let names: Vec<String> = g.params().iter().map(|p| p.name.clone()).collect();
    let mut point = vec![random(&mut rng, 4, 6)];
    point.extend(g.params().iter().map(|p| p.tensor.clone()));
    // at eps 1e-5 a few ulps of forward rounding already reach the error floor
    let report = GradCheck::new(1e-4, 1e-5)
        .run(
            |t, v| {
                for (name, &var) in names.iter().zip(&v[1..]) {
                    t.bind_to(name, var);
                }
                let o = g.embed(t, v[0], 2)?;
                let zero = t.constant(Tensor::zeros(&[1, 7]));
                t.sq_distance(o, zero)
            },
            &point,
        )
        .unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.checked > 250);
}

#[test]
fn full_pipeline_gradient_on_a_four_node_batch() {
    let (gv, gs) = (
        GraphEncoder::new("gv", small_config(), 1),
        GraphEncoder::new("gs", small_config(), 2),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let names: Vec<String> = gv
        .params()
        .iter()
        .chain(gs.params().iter())
        .map(|p| p.name.clone())
        .collect();
    let mut point = vec![random(&mut rng, 4, 6), random(&mut rng, 4, 6)];
    point.extend(gv.params().iter().chain(gs.params().iter()).map(|p| p.tensor.clone()));
    let cfg = StructuralLossConfig::default();
    let report = GradCheck::new(1e-4, 1e-4)
        .run(
            |t, v: &[Var]| {
                for (name, &var) in names.iter().zip(&v[2..]) {
                    t.bind_to(name, var);
                }
                let ov = gv.embed(t, v[0], cfg.num_propagation_layers)?;
                let os = gs.embed(t, v[1], cfg.num_propagation_layers)?;
                structural_loss(t, ov, os, None, &cfg)
            },
            &point,
        )
        .unwrap();
    assert!(report.passed(), "{report:?}");
}

proptest! {
    #[test]
    fn node_order_permutes_states_and_leaves_the_embedding_fixed(
        seed in any::<u64>(),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GraphEncoder::new("g", small_config(), seed);
        let x = random(&mut rng, 6, 6);
        let run = |x: Tensor| {
            let mut t = Tape::new();
            let xv = t.constant(x);
            let mut s = g.build_graph(&mut t, xv, 2).unwrap();
            for _ in 0..2 {
                s = g.propagate(&mut t, &s).unwrap();
            }
            let o = g.readout(&mut t, &s).unwrap();
            (t.value(s.node_states).clone(), t.value(o).clone())
        };
        let (h, o) = run(x.clone());
        let (hp, op) = run(permuted(&x, &perm));
        prop_assert!(permuted(&h, &perm).max_abs_diff(&hp) < 1e-10);
        prop_assert!(o.max_abs_diff(&op) < 1e-10);
    }

    #[test]
    fn distance_is_non_negative_and_zero_only_on_equal_embeddings(
        a in prop::collection::vec(-5.0f64..5.0, 8),
        b in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let mut t = Tape::new();
        let va = t.constant(Tensor::row(a.clone()));
        let vb = t.constant(Tensor::row(b.clone()));
        let cfg = StructuralLossConfig::default();
        let d = structural_loss(&mut t, va, vb, None, &cfg).unwrap();
        let same = structural_loss(&mut t, va, va, None, &cfg).unwrap();
        prop_assert!(t.value(d).item() >= 0.0);
        prop_assert_eq!(t.value(d).item() == 0.0, a == b);
        prop_assert_eq!(t.value(same).item(), 0.0);
    }
}
