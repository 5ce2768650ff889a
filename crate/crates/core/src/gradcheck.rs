//! Central finite-difference verification of tape gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::params::ParamStore;
use crate::tape::{NodeId, Tape};
use crate::tensor::TensorError;

/// Entries beyond this count are checked on a seeded random subsample.
const SUBSAMPLE_LIMIT: usize = 10_000;
const SUBSAMPLE_SEED: u64 = 0x5EED_CAFE;

/// Relative error between an analytic and a finite-difference derivative.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares tape gradients of a scalar function against central finite
/// differences over every parameter entry (or a seeded subsample above
/// 10,000 entries). Returns the maximum relative error observed.
///
/// The function must deterministically build the loss from the store; it is
/// responsible for inserting the store's parameters onto the tape with the
/// names they carry in the store (empty prefix).
pub fn grad_check<F>(f: F, store: &ParamStore, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId, TensorError>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.named_map_for_prefix("");

    let eval = |store: &ParamStore| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.scalar_value(loss))
    };

    let mut targets: Vec<(String, usize)> = Vec::new();
    for (name, param) in store.iter() {
        for idx in 0..param.value.numel() {
            targets.push((name.to_string(), idx));
        }
    }
    if targets.len() > SUBSAMPLE_LIMIT {
        let mut rng = ChaCha20Rng::seed_from_u64(SUBSAMPLE_SEED);
        let mut picked = Vec::with_capacity(SUBSAMPLE_LIMIT);
        for _ in 0..SUBSAMPLE_LIMIT {
            picked.push(targets[rng.gen_range(0..targets.len())].clone());
        }
        targets = picked;
    }

    let mut max_err = 0.0f64;
    let mut perturbed = store.clone();
    for (name, idx) in targets {
        let base = store.get(&name).expect("store name").data()[idx];
        perturbed.get_mut(&name).expect("store name").data_mut()[idx] = base + step;
        let plus = eval(&perturbed)?;
        perturbed.get_mut(&name).expect("store name").data_mut()[idx] = base - step;
        let minus = eval(&perturbed)?;
        perturbed.get_mut(&name).expect("store name").data_mut()[idx] = base;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.get(&name).map(|g| g.data()[idx]).unwrap_or(0.0);
        max_err = max_err.max(relative_error(a, numeric));
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{dense, Activation, LstmDef, LstmState, MlpDef};
    use crate::params::{load_store, ParamMode};
    use crate::tensor::Tensor;

    #[test]
    fn sum_of_params_has_all_ones_gradient() {
        let mut store = ParamStore::new();
        store
            .insert("a", Tensor::vector(vec![0.3, -1.2, 4.0]))
            .unwrap();
        store
            .insert("b", Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap())
            .unwrap();
        let err = grad_check(
            |tape, store| {
                let nodes = load_store(tape, store, "", ParamMode::Trainable);
                let a = tape.sum(nodes.get("a"));
                let b = tape.sum(nodes.get("b"));
                tape.add(a, b)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "max rel err {err}");
    }

    #[test]
    fn half_squared_norm_gradient_equals_params() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::vector(vec![0.5, -0.25, 2.0, 0.0]))
            .unwrap();
        let err = grad_check(
            |tape, store| {
                let nodes = load_store(tape, store, "", ParamMode::Trainable);
                let w = nodes.get("w");
                let sq = tape.mul(w, w)?;
                let s = tape.sum(sq);
                Ok(tape.scale(s, 0.5))
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "max rel err {err}");
    }

    #[test]
    fn dense_gradient_matches_finite_differences() {
        // seed 7, B=2, I=3, O=2; loss = sum(relu-free linear output)
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let def = MlpDef::new(vec![3, 2], Activation::Relu, Activation::Linear);
        let mut store = ParamStore::new();
        def.init(&mut store, &mut rng);
        let x = Tensor::matrix(2, 3, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let err = grad_check(
            |tape, store| {
                let nodes = load_store(tape, store, "", ParamMode::Trainable);
                let xn = tape.constant(x.clone());
                let out = dense(
                    tape,
                    xn,
                    nodes.get("l0.w"),
                    nodes.get("l0.b"),
                    Activation::Linear,
                )?;
                Ok(tape.sum(out))
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "max rel err {err}");
    }

    #[test]
    fn lstm_bptt_gradient_matches_finite_differences() {
        // seed 11, I=2, H=3, four chained steps, loss = sum of final hidden.
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let def = LstmDef::new(2, 3);
        let mut store = ParamStore::new();
        def.init(&mut store, "cell", &mut rng);
        let inputs: Vec<Tensor> = (0..4)
            .map(|_| {
                Tensor::matrix(1, 2, (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let err = grad_check(
            |tape, store| {
                let nodes = load_store(tape, store, "", ParamMode::Trainable);
                let zero = LstmState::zeros(1, 3);
                let mut h = tape.constant(zero.h.clone());
                let mut c = tape.constant(zero.c.clone());
                for x in &inputs {
                    let xn = tape.constant(x.clone());
                    let (h2, c2) = def.step(tape, &nodes, "cell", xn, h, c)?;
                    h = h2;
                    c = c2;
                }
                Ok(tape.sum(h))
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "max rel err {err}");
    }

    #[test]
    fn bilstm_gradient_matches_finite_differences() {
        // seed 13, 3-step sequence, loss = squared norm of the encoding.
        use crate::nn::BiLstmDef;
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let def = BiLstmDef::new(2, 3, 4);
        let mut store = ParamStore::new();
        def.init(&mut store, &mut rng);
        let seq: Vec<Tensor> = (0..3)
            .map(|_| {
                Tensor::matrix(1, 2, (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let err = grad_check(
            |tape, store| {
                let nodes = load_store(tape, store, "", ParamMode::Trainable);
                let ids: Vec<_> = seq.iter().map(|t| tape.constant(t.clone())).collect();
                let enc = def.encode(tape, &nodes, &ids)?;
                let sq = tape.mul(enc, enc)?;
                Ok(tape.sum(sq))
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "max rel err {err}");
    }
}
