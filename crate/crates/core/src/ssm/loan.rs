use crate::error::{Error, Result};
use crate::nn::{Linear, NodeId, ParamStore, ScaleMode, Tape};

/// Guards the channel standard deviation of constant feature vectors.
pub const LOAN_EPS: f64 = 1e-5;

/// Location-aware normalization of `x: [T, P, K]` conditioned on
/// `static_attrs: [P, V_s]`:
///
/// ```text
/// (x − μ) / (σ + ε) + GELU(Linear(static))
/// ```
///
/// with μ, σ taken over the channel axis and the static term broadcast over T.
pub fn loan(tape: &mut Tape, store: &ParamStore, x: NodeId, static_attrs: NodeId, proj: &Linear) -> Result<NodeId> {
    let xs = tape.value(x).shape().to_vec();
    let ss = tape.value(static_attrs).shape().to_vec();
    if xs.len() != 3 || ss.len() != 2 || ss[0] != xs[1] || proj.fan_in != ss[1] || proj.fan_out != xs[2] {
        return Err(Error::Shape(format!(
            "loan: x {xs:?}, static {ss:?}, projection {}→{}",
            proj.fan_in, proj.fan_out
        )));
    }
    let z = tape.standardize(x, LOAN_EPS, ScaleMode::StdPlusEps);
    let s = proj.forward(tape, store, static_attrs)?;
    let s = tape.gelu(s);
    tape.add_broadcast(z, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(zero: bool) -> (ParamStore, Linear) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let proj = Linear::new(&mut store, "loan", 3, 4, true, &mut rng).unwrap();
        if zero {
            proj.zero(&mut store);
        }
        (store, proj)
    }

    #[test]
    fn zero_projection_is_plain_standardization() {
        let (store, proj) = setup(true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[2, 5, 4], 3.0, &mut rng));
        let s = tape.leaf(Tensor::randn(&[5, 3], 1.0, &mut rng));
        let y = loan(&mut tape, &store, x, s, &proj).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let mean = row.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn constant_channels_give_static_term() {
        let (store, proj) = setup(false);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3, 2, 4], 7.5));
        let s = tape.leaf(Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 1.0, 0.0, -2.0]).unwrap());
        let y = loan(&mut tape, &store, x, s, &proj).unwrap();
        let mut t2 = Tape::new();
        let s2 = t2.leaf(tape.value(s).clone());
        let p = proj.forward(&mut t2, &store, s2).unwrap();
        let g = t2.gelu(p);
        let expect = t2.value(g).data().to_vec();
        for t in 0..3 {
            let got = &tape.value(y).data()[t * 8..(t + 1) * 8];
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
