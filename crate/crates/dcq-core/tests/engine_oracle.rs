//! The engine's forward pass against a deliberately naive, independent
//! re-implementation of each layer, evaluated on a LeNet-shaped network.

use dcq_core::layer::{Layer, LayerOp};
use dcq_core::network::Network;
use dcq_core::rng::SplitMix64;
use dcq_core::tensor::Tensor;

/// Naive per-element evaluation with quadruple loops and no shortcuts.
mod naive {
    pub fn dense(x: &[f64], w: &[f64], b: &[f64], in_dim: usize, out_dim: usize) -> Vec<f64> {
        let mut y = vec![0.0; out_dim];
        for o in 0..out_dim {
            y[o] = b[o];
            for i in 0..in_dim {
                y[o] += w[o * in_dim + i] * x[i];
            }
        }
        y
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        x: &[f64],
        w: &[f64],
        b: &[f64],
        (ci, h, wid): (usize, usize, usize),
        (co, k): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> (Vec<f64>, (usize, usize, usize)) {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wid + 2 * pad - k) / stride + 1;
        let mut y = vec![0.0; co * ho * wo];
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[oc];
                    for ic in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < wid {
                                    let xv = x[(ic * h + iy as usize) * wid + ix as usize];
                                    let wv = w[((oc * ci + ic) * k + ky) * k + kx];
                                    acc += wv * xv;
                                }
                            }
                        }
                    }
                    y[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        (y, (co, ho, wo))
    }

    pub fn maxpool(
        x: &[f64],
        (c, h, w): (usize, usize, usize),
        k: usize,
        stride: usize,
    ) -> (Vec<f64>, (usize, usize, usize)) {
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let mut y = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..k {
                        for kx in 0..k {
                            m = m.max(x[(ch * h + oy * stride + ky) * w + ox * stride + kx]);
                        }
                    }
                    y[(ch * ho + oy) * wo + ox] = m;
                }
            }
        }
        (y, (c, ho, wo))
    }

    pub fn relu(x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
    }

    pub fn softmax(x: &[f64]) -> Vec<f64> {
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }
}

fn lenet_shaped() -> Network<f64> {
    Network::new(
        vec![1, 28, 28],
        vec![
            Layer::conv2d(1, 8, 5, 1, 0, 101).unwrap(),
            Layer::relu(),
            Layer::maxpool2d(2, 2).unwrap(),
            Layer::conv2d(8, 16, 5, 1, 0, 102).unwrap(),
            Layer::relu(),
            Layer::maxpool2d(2, 2).unwrap(),
            Layer::flatten(),
            Layer::dense(256, 128, 103).unwrap(),
            Layer::relu(),
            Layer::dense(128, 10, 104).unwrap(),
            Layer::softmax(),
        ],
    )
    .unwrap()
}

#[test]
fn lenet_forward_matches_naive_recomputation() {
    let net = lenet_shaped();
    let mut rng = SplitMix64::new(0xFEED);
    let x_data: Vec<f64> = (0..28 * 28).map(|_| rng.next_f64()).collect();
    let x = Tensor::new(vec![1, 28, 28], x_data.clone()).unwrap();
    let engine_out = net.forward(&x).unwrap();
    assert_eq!(engine_out.shape(), &[10]);

    // naive layer-by-layer recomputation
    let get = |i: usize| -> (&[f64], &[f64]) {
        (net.layer(i).weight().unwrap().data(), net.layer(i).bias().unwrap().data())
    };
    let (w0, b0) = get(0);
    let (mut cur, mut shape) = naive::conv2d(&x_data, w0, b0, (1, 28, 28), (8, 5), 1, 0);
    cur = naive::relu(&cur);
    let (pooled, s) = naive::maxpool(&cur, shape, 2, 2);
    cur = pooled;
    shape = s;
    let (w3, b3) = get(3);
    let (conv2, s) = naive::conv2d(&cur, w3, b3, shape, (16, 5), 1, 0);
    cur = naive::relu(&conv2);
    shape = s;
    let (pooled, s) = naive::maxpool(&cur, shape, 2, 2);
    cur = pooled;
    assert_eq!(s, (16, 4, 4));
    let (w7, b7) = get(7);
    cur = naive::dense(&cur, w7, b7, 256, 128);
    cur = naive::relu(&cur);
    let (w9, b9) = get(9);
    cur = naive::dense(&cur, w9, b9, 128, 10);
    cur = naive::softmax(&cur);

    for (k, (a, b)) in engine_out.data().iter().zip(&cur).enumerate() {
        assert!(
            (a - b).abs() < 1e-12,
            "logit {k}: engine {a} vs naive {b}"
        );
    }
}

#[test]
fn conv_padding_matches_naive() {
    let net = Network::<f64>::new(
        vec![2, 7, 7],
        vec![Layer::conv2d(2, 3, 3, 2, 1, 55).unwrap()],
    )
    .unwrap();
    let mut rng = SplitMix64::new(5);
    let x_data: Vec<f64> = (0..2 * 7 * 7).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let x = Tensor::new(vec![2, 7, 7], x_data.clone()).unwrap();
    let out = net.forward(&x).unwrap();
    let (w, b) = (net.layer(0).weight().unwrap().data(), net.layer(0).bias().unwrap().data());
    let (naive_out, naive_shape) = naive::conv2d(&x_data, w, b, (2, 7, 7), (3, 3), 2, 1);
    assert_eq!(out.shape(), &[naive_shape.0, naive_shape.1, naive_shape.2]);
    for (a, b) in out.data().iter().zip(&naive_out) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn batched_forward_equals_stacked_items() {
    let net = lenet_shaped();
    let mut rng = SplitMix64::new(77);
    let items: Vec<Tensor<f64>> = (0..3)
        .map(|_| {
            Tensor::new(vec![1, 28, 28], (0..784).map(|_| rng.next_f64()).collect()).unwrap()
        })
        .collect();
    let batch = Tensor::stack(&items).unwrap();
    let batch_out = net.forward(&batch).unwrap();
    for (i, item) in items.iter().enumerate() {
        let single = net.forward(item).unwrap();
        assert_eq!(batch_out.batch_item(i).unwrap(), single, "item {i} differs in batch");
    }
}

#[test]
fn quantized_layer_kinds_forward_matches_manual_quantization() {
    // a quantized layer forwards exactly as an unquantized layer whose
    // weights are the quantizer's output
    let mut net = lenet_shaped();
    net.set_quant(0..net.len(), Some(dcq_core::QuantConfig::ternary()));
    let mut manual = lenet_shaped();
    for i in 0..manual.len() {
        if manual.layer(i).has_params() {
            let wq = dcq_core::quant::quantize_ternary(manual.layer(i).weight().unwrap(), 0.7)
                .unwrap();
            let b = manual.layer(i).bias().unwrap().clone();
            manual.layer_mut(i).set_params(wq, b).unwrap();
        }
    }
    let mut rng = SplitMix64::new(31);
    let x = Tensor::new(vec![1, 28, 28], (0..784).map(|_| rng.next_f64()).collect::<Vec<f64>>())
        .unwrap();
    assert_eq!(net.forward(&x).unwrap(), manual.forward(&x).unwrap());
}
