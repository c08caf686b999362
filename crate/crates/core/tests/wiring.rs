//! The tape-built transformer checked against a plain-loop reimplementation.

use linklearn::adapter::{Activation, Adapter, AdapterConfig};
use linklearn::backbone::{Backbone, BackboneConfig, Hook, LAYERNORM_EPS};
use linklearn::rng;
use linklearn::{ParamSet, Tape, Tensor};

fn matmul(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (din, dout) = w.dims2();
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for j in 0..dout {
            let mut s = b.data()[j];
            for i in 0..din {
                s += x[r * din + i] * w.data()[i * dout + j];
            }
            out[r * dout + j] = s;
        }
    }
    out
}

fn layernorm(x: &[f64], d: usize, g: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
        for (i, v) in row.iter().enumerate() {
            out.push((v - mean) * inv * g.data()[i] + b.data()[i]);
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn attention(q: &[f64], k: &[f64], v: &[f64], batch: usize, t: usize, d: usize, heads: usize) -> Vec<f64> {
    let hd = d / heads;
    let mut out = vec![0.0; batch * t * d];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        (0..hd)
                            .map(|c| q[(b * t + i) * d + h * hd + c] * k[(b * t + j) * d + h * hd + c])
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..hd {
                    out[(b * t + i) * d + h * hd + c] =
                        (0..t).map(|j| e[j] / z * v[(b * t + j) * d + h * hd + c]).sum();
                }
            }
        }
    }
    out
}

fn adapter_ref(a: &Adapter, x: &[f64], rows: usize) -> Vec<f64> {
    let mut z = matmul(x, rows, &a.down_w.value, &a.down_b.value);
    if a.activation == Activation::Relu {
        z.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    matmul(&z, rows, &a.up_w.value, &a.up_b.value)
}

/// `h' = h + MHSA(LN1 h)`, `h̄ = LN2 h'`, `ĥ = h̄ + adapter(h̄)`, `out = h̄ + FFN(ĥ)`; returns CLS rows.
fn reference_forward(bb: &Backbone, adapters: &[Adapter], images: &Tensor) -> Vec<f64> {
    let c = &bb.config;
    let (batch, _) = images.dims2();
    let (d, t, p) = (c.d_model, c.tokens(), c.patch);
    let mut h = Vec::with_capacity(batch * t * d);
    for b in 0..batch {
        let img = images.row(b);
        h.extend((0..d).map(|j| bb.cls.value.data()[j] + bb.pos.value.data()[j]));
        for py in 0..c.image_h / p {
            for px in 0..c.image_w / p {
                let mut patch = Vec::new();
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..c.channels {
                            patch.push(img[((py * p + dy) * c.image_w + px * p + dx) * c.channels + ch]);
                        }
                    }
                }
                let tok = 1 + py * (c.image_w / p) + px;
                let proj = matmul(&patch, 1, &bb.patch_w.value, &bb.patch_b.value);
                h.extend((0..d).map(|j| proj[j] + bb.pos.value.data()[tok * d + j]));
            }
        }
    }
    let rows = batch * t;
    for (blk, ad) in bb.blocks.iter().zip(adapters) {
        let n1 = layernorm(&h, d, &blk.ln1_gain.value, &blk.ln1_bias.value);
        let q = matmul(&n1, rows, &blk.wq.value, &blk.bq.value);
        let k = matmul(&n1, rows, &blk.wk.value, &blk.bk.value);
        let v = matmul(&n1, rows, &blk.wv.value, &blk.bv.value);
        let att = attention(&q, &k, &v, batch, t, d, c.n_heads);
        let mhsa = matmul(&att, rows, &blk.wo.value, &blk.bo.value);
        let h_prime: Vec<f64> = h.iter().zip(&mhsa).map(|(a, b)| a + b).collect();
        let h_bar = layernorm(&h_prime, d, &blk.ln2_gain.value, &blk.ln2_bias.value);
        let h_tilde = adapter_ref(ad, &h_bar, rows);
        let h_hat: Vec<f64> = h_bar.iter().zip(&h_tilde).map(|(a, b)| a + b).collect();
        let mut f1 = matmul(&h_hat, rows, &blk.ff1_w.value, &blk.ff1_b.value);
        f1.iter_mut().for_each(|x| *x = gelu(*x));
        let f2 = matmul(&f1, rows, &blk.ff2_w.value, &blk.ff2_b.value);
        h = h_bar.iter().zip(&f2).map(|(a, b)| a + b).collect();
    }
    (0..batch).flat_map(|b| h[b * t * d..b * t * d + d].to_vec()).collect()
}

fn randomized(config: BackboneConfig, activation: Activation) -> (Backbone, Vec<Adapter>, Tensor) {
    let mut bb = Backbone::init(config.clone(), 3).unwrap();
    let mut r = rng::stream(11, "wiring-test", &[]);
    for p in bb.params_mut() {
        let shape = p.value.shape().to_vec();
        p.value = Tensor::randn(&shape, 0.4, &mut r);
    }
    let acfg = AdapterConfig {
        d_model: config.d_model,
        bottleneck: 3,
        layers: config.layers,
        activation,
    };
    let adapters: Vec<Adapter> = (0..config.layers)
        .map(|k| {
            let mut a = Adapter::init(&acfg, 0, k, 5);
            for p in a.params_mut() {
                let shape = p.value.shape().to_vec();
                p.value = Tensor::randn(&shape, 0.5, &mut r);
            }
            a
        })
        .collect();
    let images = Tensor::randn(&[3, config.pixels()], 1.0, &mut r);
    (bb, adapters, images)
}

fn config(channels: usize) -> BackboneConfig {
    BackboneConfig {
        image_h: 8,
        image_w: 12,
        channels,
        patch: 4,
        d_model: 12,
        n_heads: 3,
        d_ff: 20,
        layers: 3,
    }
}

#[test]
fn backbone_matches_plain_loop_reference() {
    for (channels, act) in [(1, Activation::Relu), (2, Activation::Identity)] {
        let (bb, adapters, images) = randomized(config(channels), act);
        let mut tape = Tape::no_grad();
        let mut hooks: Vec<Hook<'_>> = adapters
            .iter()
            .map(|a| -> Hook<'_> { Box::new(move |tape: &mut Tape, h| a.forward(tape, h)) })
            .collect();
        let out = bb.forward(&mut tape, &images, &mut hooks).unwrap();
        let got = tape.value(out).data().to_vec();
        let want = reference_forward(&bb, &adapters, &images);
        let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "channels {channels}: max diff {err}");
    }
}

#[test]
fn adapter_output_enters_only_through_the_ffn_input() {
    let (bb, adapters, images) = randomized(config(1), Activation::Relu);
    let mut tape = Tape::no_grad();
    let mut hooks: Vec<Hook<'_>> = adapters
        .iter()
        .map(|a| -> Hook<'_> { Box::new(move |tape: &mut Tape, h| a.forward(tape, h)) })
        .collect();
    let trace = bb.forward_traced(&mut tape, &images, &mut hooks).unwrap();
    for acts in &trace.blocks {
        let (bar, tilde, hat) = (tape.value(acts.h_bar), tape.value(acts.h_tilde), tape.value(acts.h_hat));
        for i in 0..bar.numel() {
            assert_eq!(hat.data()[i], bar.data()[i] + tilde.data()[i]);
        }
    }
}
