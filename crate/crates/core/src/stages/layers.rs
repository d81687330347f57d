use super::Binder;
use crate::diff::{DiffError, Graph, NodeId, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

pub(crate) fn init_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Result<(), DiffError> {
    store.init_uniform(&format!("{prefix}.w"), &[fan_in, fan_out], fan_in)?;
    store.init_uniform(&format!("{prefix}.b"), &[fan_out], fan_in)
}

/// `x · w + b` over the last axis.
pub(crate) fn linear(g: &mut Graph, p: &Binder, prefix: &str, x: NodeId) -> Result<NodeId, DiffError> {
    let w = p.bind(g, &format!("{prefix}.w"))?;
    let b = p.bind(g, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, prefix: &str, width: usize) -> Result<(), DiffError> {
    store.init_constant(&format!("{prefix}.gain"), &[width], 1.0)?;
    store.init_constant(&format!("{prefix}.bias"), &[width], 0.0)
}

pub(crate) fn layer_norm_affine(g: &mut Graph, p: &Binder, prefix: &str, x: NodeId) -> Result<NodeId, DiffError> {
    let gain = p.bind(g, &format!("{prefix}.gain"))?;
    let bias = p.bind(g, &format!("{prefix}.bias"))?;
    let y = g.layer_norm(x, LN_EPS)?;
    let y = g.mul(y, gain)?;
    g.add(y, bias)
}

/// Gate order along the last axis: input, forget, cell, output.
pub(crate) fn init_lstm(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize) -> Result<(), DiffError> {
    store.init_uniform(&format!("{prefix}.wx"), &[input, 4 * hidden], hidden)?;
    store.init_uniform(&format!("{prefix}.wh"), &[hidden, 4 * hidden], hidden)?;
    let name = format!("{prefix}.b");
    store.init_uniform(&name, &[4 * hidden], hidden)?;
    let b = store.get_mut(&name).expect("just inserted");
    b.data_mut()[hidden..2 * hidden].fill(1.0);
    Ok(())
}

/// Runs an LSTM along axis 0 of `seq` (S × … × d_in), returning every hidden
/// state (S × … × hidden). Initial state is zero.
pub(crate) fn lstm_layer(g: &mut Graph, p: &Binder, prefix: &str, seq: NodeId, hidden: usize) -> Result<NodeId, DiffError> {
    let wx = p.bind(g, &format!("{prefix}.wx"))?;
    let wh = p.bind(g, &format!("{prefix}.wh"))?;
    let b = p.bind(g, &format!("{prefix}.b"))?;
    let shape = g.shape(seq).to_vec();
    let steps = shape[0];
    let rest = &shape[1..shape.len() - 1];
    let mut step_shape = rest.to_vec();
    step_shape.push(4 * hidden);
    let last = step_shape.len() - 1;

    let xw = g.matmul(seq, wx)?;
    let xw = g.add(xw, b)?;
    let mut h: Option<NodeId> = None;
    let mut c: Option<NodeId> = None;
    let mut outs = Vec::with_capacity(steps);
    for s in 0..steps {
        let z = g.slice(xw, 0, s, s + 1)?;
        let mut z = g.reshape(z, &step_shape)?;
        if let Some(h) = h {
            let hz = g.matmul(h, wh)?;
            z = g.add(z, hz)?;
        }
        let gate = |g: &mut Graph, k: usize| g.slice(z, last, k * hidden, (k + 1) * hidden);
        let i = gate(g, 0)?;
        let i = g.sigmoid(i)?;
        let f = gate(g, 1)?;
        let f = g.sigmoid(f)?;
        let cand = gate(g, 2)?;
        let cand = g.tanh(cand)?;
        let o = gate(g, 3)?;
        let o = g.sigmoid(o)?;
        let ic = g.mul(i, cand)?;
        let c_new = match c {
            Some(c) => {
                let fc = g.mul(f, c)?;
                g.add(fc, ic)?
            }
            None => ic,
        };
        let tc = g.tanh(c_new)?;
        let h_new = g.mul(o, tc)?;
        let mut one = vec![1];
        one.extend_from_slice(g.shape(h_new));
        outs.push(g.reshape(h_new, &one)?);
        h = Some(h_new);
        c = Some(c_new);
    }
    g.concat(&outs, 0)
}

/// Fixed sinusoidal encoding, (W × d).
pub(crate) fn positional_encoding(w: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; w * d];
    for pos in 0..w {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![w, d], data).expect("w·d values")
}
