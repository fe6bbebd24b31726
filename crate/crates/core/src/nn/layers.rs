//! Per-layer forward and backward kernels.
//!
//! Parallelism is over disjoint output regions only (samples for activations,
//! filter rows or grid locations for weight gradients); every element is
//! accumulated serially in a fixed order, so results are bit-reproducible for
//! any thread count.

use rayon::prelude::*;

use super::{
    param_shapes, ForwardPass, Gradients, LayerKind, LayerParams, LayerShape, LayerSpec, Network,
};
use crate::error::{Error, Result};
use crate::scalar::{dot, s64, Scalar};
use crate::tensor::Tensor;

pub(super) fn forward_layer<S: Scalar>(
    spec: &LayerSpec,
    shape: &LayerShape,
    params: Option<&LayerParams<S>>,
    input: &Tensor<S>,
) -> Tensor<S> {
    let batch = input.shape()[0];
    let out_len = shape.out_len();
    let mut out = vec![S::zero(); batch * out_len];
    match spec.kind {
        LayerKind::Conv => {
            let p = params.expect("conv layer has params");
            conv_forward(input.data(), p, spec, shape, &mut out);
        }
        LayerKind::MaxPool => pool_forward(input.data(), spec, shape, &mut out),
        LayerKind::LocallyConnected => {
            let p = params.expect("locally-connected layer has params");
            lc_forward(input.data(), p, spec, shape, &mut out);
        }
        LayerKind::FullyConnected => {
            let p = params.expect("fully-connected layer has params");
            fc_forward(input.data(), p, shape, &mut out);
        }
    }
    if spec.has_relu {
        out.par_iter_mut().for_each(|v| {
            if *v < S::zero() {
                *v = S::zero();
            }
        });
    }
    Tensor::new(
        vec![batch, shape.out_c, shape.out_h, shape.out_w],
        out,
    )
    .expect("layer output shape")
}

fn conv_forward<S: Scalar>(
    input: &[S],
    p: &LayerParams<S>,
    spec: &LayerSpec,
    shape: &LayerShape,
    out: &mut [S],
) {
    let &LayerShape { in_c, in_h, in_w, out_c, out_h, out_w } = shape;
    let (kh, kw) = spec.kernel;
    let stride = spec.stride;
    let in_len = shape.in_len();
    let w = p.weights.data();
    let bias = p.bias.data();
    out.par_chunks_mut(shape.out_len())
        .enumerate()
        .for_each(|(b, chunk)| {
            let sample = &input[b * in_len..(b + 1) * in_len];
            for co in 0..out_c {
                let w_co = &w[co * in_c * kh * kw..(co + 1) * in_c * kh * kw];
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        let mut acc = bias[co];
                        for ci in 0..in_c {
                            for dh in 0..kh {
                                let src = (ci * in_h + oh * stride + dh) * in_w + ow * stride;
                                let wsrc = (ci * kh + dh) * kw;
                                for dw in 0..kw {
                                    acc += w_co[wsrc + dw] * sample[src + dw];
                                }
                            }
                        }
                        chunk[(co * out_h + oh) * out_w + ow] = acc;
                    }
                }
            }
        });
}

fn pool_forward<S: Scalar>(input: &[S], spec: &LayerSpec, shape: &LayerShape, out: &mut [S]) {
    let &LayerShape { in_h, in_w, out_c, out_h, out_w, .. } = shape;
    let (kh, kw) = spec.kernel;
    let stride = spec.stride;
    let in_len = shape.in_len();
    out.par_chunks_mut(shape.out_len())
        .enumerate()
        .for_each(|(b, chunk)| {
            let sample = &input[b * in_len..(b + 1) * in_len];
            for c in 0..out_c {
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        // Strict > keeps the first (row-major) element on ties,
                        // matching the gradient routing in pool_backward.
                        let mut best = S::neg_infinity();
                        for dh in 0..kh {
                            let src = (c * in_h + oh * stride + dh) * in_w + ow * stride;
                            for dw in 0..kw {
                                let v = sample[src + dw];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        chunk[(c * out_h + oh) * out_w + ow] = best;
                    }
                }
            }
        });
}

fn lc_forward<S: Scalar>(
    input: &[S],
    p: &LayerParams<S>,
    spec: &LayerSpec,
    shape: &LayerShape,
    out: &mut [S],
) {
    let &LayerShape { in_c, in_h, in_w, out_c, out_h, out_w } = shape;
    let (kh, kw) = spec.kernel;
    let stride = spec.stride;
    let in_len = shape.in_len();
    let loc_w = out_c * in_c * kh * kw;
    let w = p.weights.data();
    let bias = p.bias.data();
    out.par_chunks_mut(shape.out_len())
        .enumerate()
        .for_each(|(b, chunk)| {
            let sample = &input[b * in_len..(b + 1) * in_len];
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let loc = oh * out_w + ow;
                    let w_loc = &w[loc * loc_w..(loc + 1) * loc_w];
                    for co in 0..out_c {
                        let w_co = &w_loc[co * in_c * kh * kw..(co + 1) * in_c * kh * kw];
                        let mut acc = bias[loc * out_c + co];
                        for ci in 0..in_c {
                            for dh in 0..kh {
                                let src = (ci * in_h + oh * stride + dh) * in_w + ow * stride;
                                let wsrc = (ci * kh + dh) * kw;
                                for dw in 0..kw {
                                    acc += w_co[wsrc + dw] * sample[src + dw];
                                }
                            }
                        }
                        chunk[(co * out_h + oh) * out_w + ow] = acc;
                    }
                }
            }
        });
}

fn fc_forward<S: Scalar>(input: &[S], p: &LayerParams<S>, shape: &LayerShape, out: &mut [S]) {
    let in_len = shape.in_len();
    let out_c = shape.out_c;
    let w = p.weights.data();
    let bias = p.bias.data();
    out.par_chunks_mut(out_c).enumerate().for_each(|(b, chunk)| {
        let sample = &input[b * in_len..(b + 1) * in_len];
        for (j, o) in chunk.iter_mut().enumerate() {
            *o = bias[j] + dot(&w[j * in_len..(j + 1) * in_len], sample);
        }
    });
}

pub(super) fn backward_network<S: Scalar>(
    net: &Network<S>,
    pass: &ForwardPass<S>,
    labels: &[usize],
) -> Result<Gradients<S>> {
    let n_layers = net.config().layers.len();
    if pass.activations.len() != n_layers + 1 {
        return Err(Error::Shape(format!(
            "forward pass has {} activations for {n_layers} layers",
            pass.activations.len()
        )));
    }
    let batch = pass.batch_size();
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for batch of {batch}",
            labels.len()
        )));
    }
    let num_classes = net.config().num_classes;
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Invalid(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }

    let mut grads: Vec<Option<LayerParams<S>>> = (0..n_layers)
        .map(|i| {
            param_shapes(&net.config().layers[i], &net.shapes()[i]).map(|(ws, bs)| LayerParams {
                weights: Tensor::zeros(&ws),
                bias: Tensor::zeros(&bs),
            })
        })
        .collect();

    // Lowest layer whose parameters actually update; no need to propagate
    // below it. Frozen layers keep their zero gradient tensors.
    let stop = (0..n_layers).find(|i| grads[*i].is_some() && !net.frozen().contains(i));
    let Some(stop) = stop else {
        return Ok(Gradients { layers: grads });
    };

    // d loss / d logits for the batch-mean cross-entropy.
    let inv_b = s64::<S>(1.0 / batch as f64);
    let mut g = vec![S::zero(); batch * num_classes];
    for b in 0..batch {
        let probs = super::softmax(pass.logit_row(b));
        for (k, &p) in probs.iter().enumerate() {
            let y = if k == labels[b] { S::one() } else { S::zero() };
            g[b * num_classes + k] = (p - y) * inv_b;
        }
    }

    for i in (stop..n_layers).rev() {
        let spec = &net.config().layers[i];
        let shape = &net.shapes()[i];
        let out_act = pass.activations[i + 1].data();
        let in_act = pass.activations[i].data();
        if spec.has_relu {
            for (gv, &a) in g.iter_mut().zip(out_act) {
                if a <= S::zero() {
                    *gv = S::zero();
                }
            }
        }
        let grad_slot = if net.frozen().contains(&i) {
            None
        } else {
            grads[i].as_mut()
        };
        let want_input = i > stop;
        let g_in = match spec.kind {
            LayerKind::Conv => conv_backward(
                &g,
                in_act,
                net.params()[i].as_ref().expect("conv params"),
                spec,
                shape,
                batch,
                grad_slot,
                want_input,
            ),
            LayerKind::MaxPool => pool_backward(&g, in_act, spec, shape, batch, want_input),
            LayerKind::LocallyConnected => lc_backward(
                &g,
                in_act,
                net.params()[i].as_ref().expect("locally-connected params"),
                spec,
                shape,
                batch,
                grad_slot,
                want_input,
            ),
            LayerKind::FullyConnected => fc_backward(
                &g,
                in_act,
                net.params()[i].as_ref().expect("fully-connected params"),
                shape,
                batch,
                grad_slot,
                want_input,
            ),
        };
        if let Some(next) = g_in {
            g = next;
        }
    }
    Ok(Gradients { layers: grads })
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<S: Scalar>(
    g: &[S],
    input: &[S],
    p: &LayerParams<S>,
    spec: &LayerSpec,
    shape: &LayerShape,
    batch: usize,
    grad: Option<&mut LayerParams<S>>,
    want_input: bool,
) -> Option<Vec<S>> {
    let &LayerShape { in_c, in_h, in_w, out_c, out_h, out_w } = shape;
    let (kh, kw) = spec.kernel;
    let stride = spec.stride;
    let in_len = shape.in_len();
    let out_len = shape.out_len();
    let filt = in_c * kh * kw;

    if let Some(grad) = grad {
        let gb = grad.bias.data_mut();
        grad.weights
            .data_mut()
            .par_chunks_mut(filt)
            .zip(gb.par_iter_mut())
            .enumerate()
            .for_each(|(co, (wrow, brow))| {
                for b in 0..batch {
                    let sample = &input[b * in_len..(b + 1) * in_len];
                    let grow = &g[b * out_len + co * out_h * out_w..];
                    for oh in 0..out_h {
                        for ow in 0..out_w {
                            let gv = grow[oh * out_w + ow];
                            *brow += gv;
                            for ci in 0..in_c {
                                for dh in 0..kh {
                                    let src = (ci * in_h + oh * stride + dh) * in_w + ow * stride;
                                    let wsrc = (ci * kh + dh) * kw;
                                    for dw in 0..kw {
                                        wrow[wsrc + dw] += gv * sample[src + dw];
                                    }
                                }
                            }
                        }
                    }
                }
            });
    }

    if !want_input {
        return None;
    }
    let w = p.weights.data();
    let mut din = vec![S::zero(); batch * in_len];
    din.par_chunks_mut(in_len).enumerate().for_each(|(b, dchunk)| {
        let grow = &g[b * out_len..(b + 1) * out_len];
        for co in 0..out_c {
            let w_co = &w[co * filt..(co + 1) * filt];
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let gv = grow[(co * out_h + oh) * out_w + ow];
                    for ci in 0..in_c {
                        for dh in 0..kh {
                            let dst = (ci * in_h + oh * stride + dh) * in_w + ow * stride;
                            let wsrc = (ci * kh + dh) * kw;
                            for dw in 0..kw {
                                dchunk[dst + dw] += w_co[wsrc + dw] * gv;
                            }
                        }
                    }
                }
            }
        }
    });
    Some(din)
}

fn pool_backward<S: Scalar>(
    g: &[S],
    input: &[S],
    spec: &LayerSpec,
    shape: &LayerShape,
    batch: usize,
    want_input: bool,
) -> Option<Vec<S>> {
    if !want_input {
        return None;
    }
    let &LayerShape { in_h, in_w, out_c, out_h, out_w, .. } = shape;
    let (kh, kw) = spec.kernel;
    let stride = spec.stride;
    let in_len = shape.in_len();
    let out_len = shape.out_len();
    let mut din = vec![S::zero(); batch * in_len];
    din.par_chunks_mut(in_len).enumerate().for_each(|(b, dchunk)| {
        let sample = &input[b * in_len..(b + 1) * in_len];
        let grow = &g[b * out_len..(b + 1) * out_len];
        for c in 0..out_c {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut best = S::neg_infinity();
                    let mut arg = 0usize;
                    for dh in 0..kh {
                        let src = (c * in_h + oh * stride + dh) * in_w + ow * stride;
                        for dw in 0..kw {
                            let v = sample[src + dw];
                            if v > best {
                                best = v;
                                arg = src + dw;
                            }
                        }
                    }
                    dchunk[arg] += grow[(c * out_h + oh) * out_w + ow];
                }
            }
        }
    });
    Some(din)
}

#[allow(clippy::too_many_arguments)]
fn lc_backward<S: Scalar>(
    g: &[S],
    input: &[S],
    p: &LayerParams<S>,
    spec: &LayerSpec,
    shape: &LayerShape,
    batch: usize,
    grad: Option<&mut LayerParams<S>>,
    want_input: bool,
) -> Option<Vec<S>> {
    let &LayerShape { in_c, in_h, in_w, out_c, out_h, out_w } = shape;
    let (kh, kw) = spec.kernel;
    let stride = spec.stride;
    let in_len = shape.in_len();
    let out_len = shape.out_len();
    let filt = in_c * kh * kw;
    let loc_w = out_c * filt;

    if let Some(grad) = grad {
        let gb = grad.bias.data_mut();
        grad.weights
            .data_mut()
            .par_chunks_mut(loc_w)
            .zip(gb.par_chunks_mut(out_c))
            .enumerate()
            .for_each(|(loc, (wloc, bloc))| {
                let oh = loc / out_w;
                let ow = loc % out_w;
                for b in 0..batch {
                    let sample = &input[b * in_len..(b + 1) * in_len];
                    for co in 0..out_c {
                        let gv = g[b * out_len + (co * out_h + oh) * out_w + ow];
                        bloc[co] += gv;
                        let wtgt = &mut wloc[co * filt..(co + 1) * filt];
                        for ci in 0..in_c {
                            for dh in 0..kh {
                                let src = (ci * in_h + oh * stride + dh) * in_w + ow * stride;
                                let wsrc = (ci * kh + dh) * kw;
                                for dw in 0..kw {
                                    wtgt[wsrc + dw] += gv * sample[src + dw];
                                }
                            }
                        }
                    }
                }
            });
    }

    if !want_input {
        return None;
    }
    let w = p.weights.data();
    let mut din = vec![S::zero(); batch * in_len];
    din.par_chunks_mut(in_len).enumerate().for_each(|(b, dchunk)| {
        let grow = &g[b * out_len..(b + 1) * out_len];
        for oh in 0..out_h {
            for ow in 0..out_w {
                let loc = oh * out_w + ow;
                let w_loc = &w[loc * loc_w..(loc + 1) * loc_w];
                for co in 0..out_c {
                    let gv = grow[(co * out_h + oh) * out_w + ow];
                    let w_co = &w_loc[co * filt..(co + 1) * filt];
                    for ci in 0..in_c {
                        for dh in 0..kh {
                            let dst = (ci * in_h + oh * stride + dh) * in_w + ow * stride;
                            let wsrc = (ci * kh + dh) * kw;
                            for dw in 0..kw {
                                dchunk[dst + dw] += w_co[wsrc + dw] * gv;
                            }
                        }
                    }
                }
            }
        }
    });
    Some(din)
}

fn fc_backward<S: Scalar>(
    g: &[S],
    input: &[S],
    p: &LayerParams<S>,
    shape: &LayerShape,
    batch: usize,
    grad: Option<&mut LayerParams<S>>,
    want_input: bool,
) -> Option<Vec<S>> {
    let in_len = shape.in_len();
    let out_c = shape.out_c;

    if let Some(grad) = grad {
        let gb = grad.bias.data_mut();
        grad.weights
            .data_mut()
            .par_chunks_mut(in_len)
            .zip(gb.par_iter_mut())
            .enumerate()
            .for_each(|(j, (wrow, brow))| {
                for b in 0..batch {
                    let gv = g[b * out_c + j];
                    *brow += gv;
                    let sample = &input[b * in_len..(b + 1) * in_len];
                    for (wv, &x) in wrow.iter_mut().zip(sample) {
                        *wv += gv * x;
                    }
                }
            });
    }

    if !want_input {
        return None;
    }
    let w = p.weights.data();
    let mut din = vec![S::zero(); batch * in_len];
    din.par_chunks_mut(in_len).enumerate().for_each(|(b, dchunk)| {
        for j in 0..out_c {
            let gv = g[b * out_c + j];
            let wrow = &w[j * in_len..(j + 1) * in_len];
            for (d, &wv) in dchunk.iter_mut().zip(wrow) {
                *d += wv * gv;
            }
        }
    });
    Some(din)
}
