//! Reusable parameter bundles built on the tape: affine maps, layer norm and the pre-norm
//! transformer layer shared by both experts.

use rand::Rng;

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{Mask, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self::with_std(store, name, fan_in, fan_out, std, trainable, rng)
    }

    pub fn with_std<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = if std == 0.0 {
            store.add(format!("{name}.weight"), Tensor::zeros(fan_in, fan_out), trainable)
        } else {
            store.add_randn(format!("{name}.weight"), fan_in, fan_out, std, trainable, rng)
        };
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out), trainable);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize, trainable: bool) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::filled(1, width, T::one()), trainable);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, width), trainable);
        Self { gain, bias }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        eps: T,
    ) -> Result<Var> {
        let g = tape.param(store, self.gain)?;
        let b = tape.param(store, self.bias)?;
        tape.layernorm(x, g, b, eps)
    }
}

/// Layer norm on plain tensors: per-row standardization, then `gain ⊙ · + bias`.
pub fn layernorm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if gain.shape() != (1, x.cols()) || bias.shape() != (1, x.cols()) {
        return Err(Error::Shape {
            op: "layernorm",
            lhs: x.shape(),
            rhs: gain.shape(),
        });
    }
    let (n, _) = super::tensor::normalize_rows(x, eps);
    n.mul_row(gain)?.add_row(bias)?.check_finite("layernorm")
}

/// Multi-head attention of `queries` over `keys`/`values`, with per-head column slices and a
/// single `scale` applied to every score.
pub fn attention<T: Real>(
    tape: &mut Tape<T>,
    queries: Var,
    keys: Var,
    values: Var,
    mask: &Mask,
    heads: usize,
    scale: T,
) -> Result<Var> {
    let (nq, width) = tape.shape(queries);
    let nk = tape.shape(keys).0;
    if mask.shape() != (nq, nk) {
        return Err(Error::Shape {
            op: "attention mask",
            lhs: (nq, nk),
            rhs: mask.shape(),
        });
    }
    if heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!("width {width} not divisible by {heads} heads")));
    }
    let hd = width / heads;
    if heads == 1 {
        let s = tape.matmul_nt(queries, keys)?;
        let s = tape.scale(s, scale)?;
        let p = tape.masked_softmax(s, mask)?;
        return tape.matmul(p, values);
    }
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(queries, h * hd, hd)?;
        let k = tape.slice_cols(keys, h * hd, hd)?;
        let v = tape.slice_cols(values, h * hd, hd)?;
        let s = tape.matmul_nt(q, k)?;
        let s = tape.scale(s, scale)?;
        let p = tape.masked_softmax(s, mask)?;
        outs.push(tape.matmul(p, v)?);
    }
    tape.concat_cols(&outs)
}

/// Pre-norm transformer layer: `x + Attn(LN(x))`, then `x + FFN(LN(x))` with a SiLU MLP.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

/// Keys and values one layer exposes to other tokens.
pub struct LayerKv {
    pub keys: Var,
    pub values: Var,
}

impl TransformerLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        ffn_width: usize,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), width, trainable),
            query: Linear::new(store, &format!("{name}.query"), width, width, trainable, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, trainable, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, trainable, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, trainable, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), width, trainable),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), width, ffn_width, trainable, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), ffn_width, width, trainable, rng),
        }
    }

    /// Projects the layer input to queries, keys and values.
    pub fn project<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        eps: T,
    ) -> Result<(Var, LayerKv)> {
        let h = self.ln_attn.forward(tape, store, x, eps)?;
        let q = self.query.forward(tape, store, h)?;
        let k = self.key.forward(tape, store, h)?;
        let v = self.value.forward(tape, store, h)?;
        Ok((q, LayerKv { keys: k, values: v }))
    }

    /// Finishes the layer given queries and the full key/value set the rows may attend.
    #[allow(clippy::too_many_arguments)]
    pub fn finish<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        queries: Var,
        keys: Var,
        values: Var,
        mask: &Mask,
        heads: usize,
        scale: T,
        eps: T,
    ) -> Result<Var> {
        let a = attention(tape, queries, keys, values, mask, heads, scale)?;
        let a = self.out.forward(tape, store, a)?;
        let x = tape.add(x, a)?;
        let h = self.ln_ffn.forward(tape, store, x, eps)?;
        let h = self.ffn_in.forward(tape, store, h)?;
        let h = tape.silu(h)?;
        let h = self.ffn_out.forward(tape, store, h)?;
        tape.add(x, h)
    }

    /// Multiply-accumulate count for `rows` query tokens attending `keys` key tokens.
    pub fn macs(width: usize, ffn_width: usize, rows: usize, keys: usize) -> u64 {
        let (w, f, r, k) = (width as u64, ffn_width as u64, rows as u64, keys as u64);
        4 * r * w * w + 2 * r * k * w + 2 * r * w * f
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layernorm_already_normalized_row() {
        let x = Tensor::<f64>::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let y = layernorm(&x, &Tensor::filled(1, 2, 1.0), &Tensor::zeros(1, 2), 1e-5).unwrap();
        // eps perturbs the unit variance slightly
        assert!((y.get(0, 0) - 1.0).abs() < 1e-5);
        assert!((y.get(0, 1) + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layernorm_constant_row_gives_bias() {
        let x = Tensor::filled(2, 4, -7.5);
        let bias = Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 0.0]]).unwrap();
        let y = layernorm(&x, &Tensor::filled(1, 4, 1.0), &bias, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layernorm_rejects_wrong_gain_width() {
        let x = Tensor::<f64>::zeros(2, 4);
        assert!(layernorm(&x, &Tensor::zeros(1, 3), &Tensor::zeros(1, 4), 1e-5).is_err());
    }

    #[test]
    fn attention_over_single_key_returns_its_value() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_rows(&[vec![0.3, -1.2, 0.8, 2.0]]).unwrap()).unwrap();
        let k = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0, 1.0, 1.0]]).unwrap()).unwrap();
        let vrow = vec![0.125, -3.5, 7.0, 0.0625];
        let v = tape.constant(Tensor::from_rows(&[vrow.clone()]).unwrap()).unwrap();
        let out = attention(&mut tape, q, k, v, &Mask::new(1, 1, true), 2, 0.5).unwrap();
        assert_eq!(tape.value(out).data(), vrow.as_slice());
    }
}
