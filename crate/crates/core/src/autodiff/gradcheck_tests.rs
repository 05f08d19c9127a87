//! Every primitive against central finite differences on random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttnMask, Tape, Tensor, Var};

const H: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Builds `loss = sum(w ⊙ f(inputs))` with a fixed random weighting `w` so
/// the scalar depends on every output element differently.
fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        random(&mut rng, tape.value(out).shape())
    };
    let eval = |ins: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let w = tape.constant(weights.clone());
        let p = tape.mul(out, w).unwrap();
        let s = tape.sum(p).unwrap();
        tape.value(s).data()[0]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w).unwrap();
    let loss = tape.sum(p).unwrap();
    let grads = tape.backward(loss).unwrap();

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).unwrap();
        for i in 0..input.len() {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            let mut d = input.to_vec();
            d[i] += H;
            plus[k] = Tensor::new(input.shape().to_vec(), d.clone()).unwrap();
            d[i] -= 2.0 * H;
            minus[k] = Tensor::new(input.shape().to_vec(), d).unwrap();
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel < 1e-3 || (a - numeric).abs() < 1e-8,
                "input {k} elem {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn matmul_both_sides() {
    let mut r = rng();
    check(vec![random(&mut r, &[3, 4]), random(&mut r, &[4, 2])], |t, v| t.matmul(v[0], v[1]).unwrap());
}

#[test]
fn matmul_bt_both_sides() {
    let mut r = rng();
    check(vec![random(&mut r, &[3, 4]), random(&mut r, &[5, 4])], |t, v| t.matmul_bt(v[0], v[1]).unwrap());
}

#[test]
fn elementwise_ops() {
    let mut r = rng();
    let a = random(&mut r, &[2, 3]);
    let b = random(&mut r, &[2, 3]);
    check(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    check(vec![a.clone(), b], |t, v| t.mul(v[0], v[1]).unwrap());
    check(vec![a.clone()], |t, v| t.scale(v[0], -2.5).unwrap());
    check(vec![a], |t, v| t.gelu(v[0]).unwrap());
}

#[test]
fn relu_away_from_kink() {
    let a = Tensor::matrix(2, 2, vec![0.5, -0.7, 1.2, -0.1]).unwrap();
    check(vec![a], |t, v| t.relu(v[0]).unwrap());
}

#[test]
fn add_row_broadcast() {
    let mut r = rng();
    check(vec![random(&mut r, &[3, 4]), random(&mut r, &[4])], |t, v| t.add_row(v[0], v[1]).unwrap());
}

#[test]
fn layer_norm_all_inputs() {
    let mut r = rng();
    check(
        vec![random(&mut r, &[3, 5]), random(&mut r, &[5]), random(&mut r, &[5])],
        |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(),
    );
}

#[test]
fn masked_softmax_with_prefix() {
    let mut r = rng();
    let mask = AttnMask {
        q_offset: 1,
        bidir_prefix: 3,
    };
    check(vec![random(&mut r, &[4, 5])], move |t, v| t.masked_softmax(v[0], mask).unwrap());
}

#[test]
fn gathers_slices_and_concats() {
    let mut r = rng();
    let a = random(&mut r, &[4, 3]);
    let b = random(&mut r, &[2, 3]);
    check(vec![a.clone()], |t, v| t.gather_rows(v[0], vec![2, 0, 2]).unwrap());
    check(vec![a.clone()], |t, v| {
        t.gather(v[0], vec![Some(1), None, Some(11), Some(1)], vec![2, 2]).unwrap()
    });
    check(vec![a.clone(), b], |t, v| t.concat_rows(vec![v[0], v[1], v[0]]).unwrap());
    check(vec![a.clone()], |t, v| t.slice_cols(v[0], 1, 2).unwrap());
    check(vec![a.clone(), random(&mut r, &[4, 2])], |t, v| t.concat_cols(vec![v[1], v[0]]).unwrap());
    check(vec![a], |t, v| t.mean_rows(v[0]).unwrap());
}

#[test]
fn cross_entropy_matches_direct_formula_and_fd() {
    let mut r = rng();
    let logits = random(&mut r, &[3, 5]);
    let targets = vec![4, 0, 2];
    // direct −log softmax
    let mut direct = 0.0;
    for (row, &t) in targets.iter().enumerate() {
        let l = logits.row(row);
        let z: f64 = l.iter().map(|x| x.exp()).sum();
        direct += -(l[t].exp() / z).ln();
    }
    direct /= 3.0;
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = tape.cross_entropy(l, targets.clone(), vec![true; 3]).unwrap();
    assert!((tape.value(ce).data()[0] - direct).abs() < 1e-9);
    assert!(tape.value(ce).data()[0] >= 0.0);

    check(vec![logits], move |t, v| {
        t.cross_entropy(v[0], targets.clone(), vec![true, false, true]).unwrap()
    });
}

#[test]
fn bce_with_logits_gradient() {
    let mut r = rng();
    check(vec![random(&mut r, &[4, 1])], |t, v| {
        t.bce_with_logits(v[0], vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    });
}

#[test]
fn replay_reproduces_recorded_values() {
    let mut r = rng();
    let mut tape = Tape::new();
    let a = tape.leaf(random(&mut r, &[3, 4]));
    let b = tape.constant(random(&mut r, &[4, 4]));
    let g = tape.constant(Tensor::full(&[4], 1.0));
    let z = tape.constant(Tensor::zeros(&[4]));
    let h = tape.matmul(a, b).unwrap();
    let h = tape.layer_norm(h, g, z).unwrap();
    let h = tape.gelu(h).unwrap();
    let s = tape.matmul_bt(h, h).unwrap();
    let p = tape.softmax_rows(s).unwrap();
    let _ = tape.cross_entropy(p, vec![0, 1, 2], vec![true; 3]).unwrap();
    let replayed = tape.replay().unwrap();
    assert_eq!(replayed.len(), tape.len());
    for (a, b) in replayed.iter().zip(tape.values()) {
        assert_eq!(a, b);
    }
}
