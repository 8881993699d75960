//! Analytic gradients (f32) against central finite differences (f64).

use std::sync::Arc;

use levt_tensor::check::{finite_differences, max_relative_error};
use levt_tensor::nn::{normal, Dropout};
use levt_tensor::{AttnLayout, Graph, ParamId, ParamStore, Scalar, Tensor, TransformerBlock, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-3;
const FLOOR: f64 = 1e-3;

fn random_store(shapes: &[(&str, &[usize])], seed: u64) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .map(|(n, s)| store.add(*n, normal(s, 0.7, &mut rng)))
        .collect();
    (store, ids)
}

/// A scalar loss that can be built at either precision.
trait Probe {
    fn build<S: Scalar>(&self, g: &mut Graph<'_, S>) -> Var;
}

struct Composite<'a>(&'a [ParamId]);
struct Attention<'a>(&'a [ParamId]);
struct Block<'a>(&'a TransformerBlock, &'a [ParamId]);

impl Probe for Composite<'_> {
    fn build<S: Scalar>(&self, g: &mut Graph<'_, S>) -> Var {
        composite(g, self.0)
    }
}

impl Probe for Attention<'_> {
    fn build<S: Scalar>(&self, g: &mut Graph<'_, S>) -> Var {
        attention_loss(g, self.0)
    }
}

impl Probe for Block<'_> {
    fn build<S: Scalar>(&self, g: &mut Graph<'_, S>) -> Var {
        block_loss(g, self.0, self.1)
    }
}

fn check(store: &ParamStore<f64>, probe: impl Probe) -> f64 {
    let store32 = store.cast::<f32>();
    let mut g = Graph::with_params(&store32);
    let l = probe.build(&mut g);
    let grads = g.backward(l).unwrap();
    let numeric = finite_differences(store, STEP, |s| {
        let mut g = Graph::with_params(s);
        let l = probe.build(&mut g);
        g.value(l).item()
    });
    max_relative_error(store, &grads, &numeric, FLOOR)
}

// Closures cannot be generic over the scalar type, so the composite
// graphs are written as generic functions.
fn composite<S: Scalar>(g: &mut Graph<'_, S>, ids: &[ParamId]) -> Var {
    let x = g.param(ids[0]);
    let w = g.param(ids[1]);
    let b = g.param(ids[2]);
    let gain = g.param(ids[3]);
    let bias = g.param(ids[4]);
    let h = g.affine(x, w, b).unwrap();
    let h = g.relu(h);
    let h = g.layer_norm(h, gain, bias).unwrap();
    let rows = g.gather_rows(h, &[0, 2, 2, 1]).unwrap();
    let cat = g.concat_cols(rows, rows).unwrap();
    let sq = g.mul(cat, cat).unwrap();
    let ls = g.log_softmax(sq).unwrap();
    let sm = g.softmax(ls).unwrap();
    let s = g.sum(sm);
    let ce = g.cross_entropy(h, &[1, 0, 3], 0.1).unwrap();
    let m = g.mean(ls);
    let t = g.add(s, ce).unwrap();
    g.add(t, m).unwrap()
}

#[test]
fn composite_graph_matches_finite_differences() {
    for seed in 0..3 {
        let (store, ids) = random_store(
            &[
                ("x", &[3, 5]),
                ("w", &[4, 5]),
                ("b", &[4]),
                ("gain", &[4]),
                ("bias", &[4]),
            ],
            seed,
        );
        let err = check(&store, Composite(&ids));
        eprintln!("seed {seed}: max relative error {err:.2e}");
        assert!(err < TOL, "seed {seed}: max relative error {err}");
    }
}

fn attention_loss<S: Scalar>(g: &mut Graph<'_, S>, ids: &[ParamId]) -> Var {
    let q = g.param(ids[0]);
    let k = g.param(ids[1]);
    let v = g.param(ids[2]);
    let layout =
        AttnLayout::cross(&[2, 1], &[3, 2]).with_blocked_keys(vec![false, true, false, false, false]);
    let out = g.attention(q, k, v, 2, Arc::new(layout)).unwrap();
    let sq = g.mul(out, out).unwrap();
    let s = g.sum(sq);
    let lin = g.sum(out);
    g.add(s, lin).unwrap()
}

#[test]
fn attention_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (store, ids) = random_store(&[("q", &[3, 4]), ("k", &[5, 4]), ("v", &[5, 4])], seed + 10);
        let err = check(&store, Attention(&ids));
        eprintln!("seed {seed}: max relative error {err:.2e}");
        assert!(err < TOL, "seed {seed}: max relative error {err}");
    }
}

fn block_loss<S: Scalar>(g: &mut Graph<'_, S>, block: &TransformerBlock, ids: &[ParamId]) -> Var {
    let h = g.param(ids[0]);
    let ctx = g.param(ids[1]);
    let self_layout = Arc::new(AttnLayout::self_attention(&[3, 2], false));
    let cross = Arc::new(AttnLayout::cross(&[3, 2], &[2, 2]));
    let out = block
        .forward(g, h, &self_layout, Some((ctx, &cross)), &mut Dropout::off())
        .unwrap();
    g.cross_entropy(out, &[0, 7, 3, 3, 5], 0.0).unwrap()
}

#[test]
fn transformer_block_matches_finite_differences() {
    for seed in 0..2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let h = store.add("h", normal(&[5, 8], 1.0, &mut rng));
        let ctx = store.add("ctx", normal(&[4, 8], 1.0, &mut rng));
        let block = TransformerBlock::new(&mut store, "blk", 8, 16, 2, true, &mut rng).unwrap();
        let ids = [h, ctx];
        let err = check(&store, Block(&block, &ids));
        eprintln!("seed {seed}: max relative error {err:.2e}");
        assert!(err < TOL, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn zero_weight_block_reduces_to_normalised_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f32>::new();
    let block = TransformerBlock::new(&mut store, "blk", 4, 8, 2, false, &mut rng).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with("gain") {
            continue;
        }
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let x = Tensor::from_rows(&[[1.0f32, 2.0, -1.0, 0.5], [0.0, 0.0, 3.0, 1.0]]);
    let mut g = Graph::with_params(&store);
    let xv = g.constant(x.clone());
    let layout = Arc::new(AttnLayout::self_attention(&[2], false));
    let out = block
        .forward(&mut g, xv, &layout, None, &mut Dropout::off())
        .unwrap();
    // sublayers output zero: norm(norm(x)) == norm(x) up to epsilon
    let ones = g.constant(Tensor::full(&[4], 1.0));
    let zeros = g.constant(Tensor::zeros(&[4]));
    let want = g.layer_norm(xv, ones, zeros).unwrap();
    assert!(g.value(out).max_abs_diff(g.value(want)) < 1e-3);
}

#[test]
fn block_output_shape_follows_input_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f32>::new();
    let block = TransformerBlock::new(&mut store, "blk", 8, 8, 4, false, &mut rng).unwrap();
    for n in 1..6 {
        let mut g = Graph::with_params(&store);
        let x = g.constant(normal(&[n, 8], 1.0, &mut rng));
        let layout = Arc::new(AttnLayout::self_attention(&[n], false));
        let out = block
            .forward(&mut g, x, &layout, None, &mut Dropout::off())
            .unwrap();
        assert_eq!(g.value(out).shape(), &[n, 8]);
    }
}
