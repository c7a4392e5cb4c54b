//! Independent checks of the memorizer's forward pass, loss and gradients.

use kbmem::memorizer::model::{loss_and_gradients_untied, loss_untied};
use kbmem::memorizer::{
    forward, gradients, loss, masked_nll, Batch, Matrix, ModelConfig, Parameters, Sample,
};
use rand::{Rng, SeedableRng};

fn cfg(vocab: usize, d: usize, layers: usize, heads: usize, max_len: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_layers: layers,
        n_heads: heads,
        max_seq_len: max_len,
        vocab_size: vocab,
    }
}

fn sample(input: &[u32], target: &[u32], mask: &[bool]) -> Sample {
    Sample {
        input: input.to_vec(),
        target: target.to_vec(),
        mask: mask.to_vec(),
        index: 0,
    }
}

/// Randomizes every parameter (including gains and biases) so no gradient is
/// structurally zero.
fn randomized(config: ModelConfig, seed: u64, scale: f64) -> Parameters {
    let mut p = Parameters::init(config, seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (i, v) in p.data_mut().iter_mut().enumerate() {
        *v += scale * (rng.random::<f64>() - 0.5) + if i % 7 == 0 { 0.01 } else { 0.0 };
    }
    p
}

// ---------------------------------------------------------------------------
// straight-line reference forward pass

fn t<'a>(p: &'a Parameters, name: &str) -> &'a [f64] {
    p.tensor(name).unwrap()
}

fn layer_norm_ref(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
        .collect()
}

/// `x (1×rows) · w (rows×cols)`
fn vec_mat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, xv) in x.iter().enumerate() {
        for c in 0..cols {
            out[c] += xv * w[r * cols + c];
        }
    }
    out
}

fn reference_logits(p: &Parameters, tokens: &[u32]) -> Vec<Vec<f64>> {
    let c = p.config();
    let d = c.d_model;
    let f = 4 * d;
    let dh = d / c.n_heads;
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(pos, &tok)| {
            (0..d)
                .map(|i| t(p, "tok_emb")[tok as usize * d + i] + t(p, "pos_emb")[pos * d + i])
                .collect()
        })
        .collect();
    for l in 0..c.n_layers {
        let name = |s: &str| format!("layers.{l}.{s}");
        let h: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| layer_norm_ref(x, t(p, &name("ln1.gain")), t(p, &name("ln1.bias"))))
            .collect();
        let qkv: Vec<Vec<f64>> = h
            .iter()
            .map(|x| vec_mat(x, t(p, &name("attn.qkv")), 3 * d))
            .collect();
        let mut att = vec![vec![0.0; d]; xs.len()];
        for head in 0..c.n_heads {
            for i in 0..xs.len() {
                let q = &qkv[i][head * dh..(head + 1) * dh];
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let k = &qkv[j][d + head * dh..d + (head + 1) * dh];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    for e in 0..dh {
                        att[i][head * dh + e] += s.exp() / z * qkv[j][2 * d + head * dh + e];
                    }
                }
            }
        }
        for (x, a) in xs.iter_mut().zip(&att) {
            let o = vec_mat(a, t(p, &name("attn.out")), d);
            for i in 0..d {
                x[i] += o[i];
            }
        }
        for x in xs.iter_mut() {
            let h2 = layer_norm_ref(x, t(p, &name("ln2.gain")), t(p, &name("ln2.bias")));
            let mut pre = vec_mat(&h2, t(p, &name("ffn.w1")), f);
            for (i, v) in pre.iter_mut().enumerate() {
                *v += t(p, &name("ffn.b1"))[i];
                let u = *v;
                *v = 0.5
                    * u
                    * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh());
            }
            let out = vec_mat(&pre, t(p, &name("ffn.w2")), d);
            for i in 0..d {
                x[i] += out[i] + t(p, &name("ffn.b2"))[i];
            }
        }
    }
    xs.iter()
        .map(|x| {
            let h = layer_norm_ref(x, t(p, "final_ln.gain"), t(p, "final_ln.bias"));
            (0..c.vocab_size)
                .map(|v| (0..d).map(|i| h[i] * t(p, "tok_emb")[v * d + i]).sum())
                .collect()
        })
        .collect()
}

#[test]
fn forward_matches_straight_line_oracle() {
    let p = randomized(cfg(6, 2, 1, 1, 4), 3, 0.8);
    let tokens = [1u32, 5, 3];
    let got = forward(&p, &Batch::new(vec![sample(&tokens, &[5, 3, 2], &[true; 3])])).unwrap();
    let want = reference_logits(&p, &tokens);
    for (i, row) in want.iter().enumerate() {
        for (v, w) in row.iter().enumerate() {
            let g = got[0].row(i)[v];
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "pos {i} tok {v}: {g} vs {w}");
        }
    }

    let p = randomized(cfg(11, 8, 2, 2, 8), 5, 0.5);
    let tokens = [1u32, 7, 9, 4, 10];
    let got = forward(&p, &Batch::new(vec![sample(&tokens, &tokens, &[true; 5])])).unwrap();
    let want = reference_logits(&p, &tokens);
    for (i, row) in want.iter().enumerate() {
        for (v, w) in row.iter().enumerate() {
            assert!((got[0].row(i)[v] - w).abs() <= 1e-11);
        }
    }
}

#[test]
fn causal_prefix_dependence() {
    let p = randomized(cfg(9, 8, 2, 2, 8), 8, 0.3);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let len = rng.random_range(2..8);
        let base: Vec<u32> = (0..len).map(|_| rng.random_range(0..9)).collect();
        let j = rng.random_range(0..len);
        let mut changed = base.clone();
        changed[j] = (changed[j] + 1 + rng.random_range(0..7)) % 9;
        let a = &forward(&p, &Batch::new(vec![sample(&base, &base, &vec![true; len])])).unwrap()[0];
        let b = &forward(&p, &Batch::new(vec![sample(&changed, &changed, &vec![true; len])])).unwrap()[0];
        for pos in 0..len {
            let same = a.row(pos) == b.row(pos);
            assert_eq!(same, pos < j, "position {pos}, perturbed {j}");
        }
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let p = Parameters::init(ModelConfig::new(40), 2).unwrap();
    let out = forward(&p, &Batch::new(vec![sample(&[1, 8, 9, 30], &[8, 9, 30, 2], &[true; 4])])).unwrap();
    for i in 0..out[0].rows {
        let row = out[0].row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let total: f64 = row.iter().map(|v| (v - m).exp() / z).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}

#[test]
fn uniform_logits_give_log_vocab_per_token() {
    let uniform = Matrix {
        rows: 2,
        cols: 4,
        data: vec![0.3; 8],
    };
    let nll = masked_nll(&uniform, &[1, 3], &[true, true]);
    assert!((nll - 2.0 * 4f64.ln()).abs() < 1e-12);
    assert!((nll - 2.7726).abs() < 1e-4);

    // whole model with zeroed final norm: every position is uniform over V=6
    let mut p = Parameters::init(cfg(6, 8, 1, 2, 8), 1).unwrap();
    p.tensor_mut("final_ln.gain").unwrap().fill(0.0);
    let out = loss(&p, &Batch::new(vec![sample(&[1, 5, 4], &[5, 4, 2], &[false, true, true])])).unwrap();
    assert!((out.per_sample[0] - 2.0 * 6f64.ln()).abs() < 1e-12);
}

#[test]
fn masked_nll_matches_naive_softmax() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    for _ in 0..50 {
        let rows = rng.random_range(1..6);
        let cols = rng.random_range(2..12);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let targets: Vec<u32> = (0..rows).map(|_| rng.random_range(0..cols as u32)).collect();
        let mask: Vec<bool> = (0..rows).map(|i| i == 0 || rng.random::<bool>()).collect();
        let m = Matrix { rows, cols, data };
        let mut naive = 0.0;
        for r in 0..rows {
            if mask[r] {
                let row = m.row(r);
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                naive -= (row[targets[r] as usize].exp() / z).ln();
            }
        }
        let got = masked_nll(&m, &targets, &mask);
        assert!((got - naive).abs() <= 1e-10 * naive.abs());
    }
}

/// Forces the model to put essentially all mass on token 5 at every position.
fn certain_of_token_5(config: ModelConfig) -> Parameters {
    let mut p = Parameters::init(config, 4).unwrap();
    let d = p.config().d_model;
    let v = p.config().vocab_size;
    let emb = p.tensor_mut("tok_emb").unwrap();
    for tok in 0..v {
        emb[tok * d] = if tok == 5 { 1.0 } else { 0.0 };
    }
    p.tensor_mut("final_ln.gain").unwrap().fill(0.0);
    let bias = p.tensor_mut("final_ln.bias").unwrap();
    bias.fill(0.0);
    bias[0] = 100.0;
    p
}

#[test]
fn certain_targets_have_zero_loss_and_gradient() {
    let p = certain_of_token_5(cfg(8, 8, 1, 2, 8));
    let batch = Batch::new(vec![
        sample(&[1, 6, 7], &[6, 5, 5], &[false, true, true]),
        sample(&[1, 5], &[5, 5], &[true, true]),
    ]);
    let out = loss(&p, &batch).unwrap();
    assert!(out.mean < 1e-30);
    let (_, g) = gradients(&p, &batch).unwrap();
    assert!(g.norm() < 1e-8, "gradient norm {}", g.norm());
}

fn batch_for_gradcheck() -> Batch {
    Batch::new(vec![
        sample(&[1, 5, 7, 9], &[5, 7, 9, 2], &[false, true, true, true]),
        sample(&[1, 8, 6, 6, 3, 10], &[8, 6, 6, 3, 10, 2], &[false, false, false, true, true, true]),
        sample(&[1, 11], &[11, 2], &[false, true]),
    ])
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn gradients_match_central_differences() {
    let config = cfg(12, 8, 1, 2, 8);
    let p = randomized(config, 17, 0.4);
    let batch = batch_for_gradcheck();
    let (_, analytic) = gradients(&p, &batch).unwrap();
    let h = 1e-5;
    for tensor in p.layout().tensors() {
        let mut worst = 0.0f64;
        let mut diff_sq = 0.0;
        let mut norm_sq = 0.0;
        for i in tensor.range() {
            let mut plus = p.clone();
            plus.data_mut()[i] += h;
            let mut minus = p.clone();
            minus.data_mut()[i] -= h;
            let fd = (loss(&plus, &batch).unwrap().mean - loss(&minus, &batch).unwrap().mean) / (2.0 * h);
            let a = analytic.data[i];
            worst = worst.max(rel_err(a, fd));
            diff_sq += (a - fd).powi(2);
            norm_sq += a.abs().max(fd.abs()).powi(2);
        }
        let tensor_rel = (diff_sq / norm_sq.max(1e-300)).sqrt();
        assert!(worst < 1e-4, "{}: worst element relative error {worst:e}", tensor.name);
        assert!(tensor_rel < 1e-4, "{}: tensor relative error {tensor_rel:e}", tensor.name);
    }
}

#[test]
fn tied_projection_gradient_sums_both_roles() {
    let config = cfg(12, 8, 1, 2, 8);
    let p = randomized(config, 23, 0.4);
    let batch = batch_for_gradcheck();
    let emb = p.tensor("tok_emb").unwrap().to_vec();
    let range = p.layout().get("tok_emb").unwrap().range();
    let h = 1e-5;

    let mut out_grad = vec![0.0; emb.len()];
    let (_, input_side) = loss_and_gradients_untied(&p, &emb, &batch, &mut out_grad).unwrap();
    let (_, tied) = gradients(&p, &batch).unwrap();

    for (k, i) in range.clone().enumerate() {
        // embedding role only: output matrix frozen
        let mut plus = p.clone();
        plus.data_mut()[i] += h;
        let mut minus = p.clone();
        minus.data_mut()[i] -= h;
        let fd_in = (loss_untied(&plus, &emb, &batch).unwrap().mean
            - loss_untied(&minus, &emb, &batch).unwrap().mean)
            / (2.0 * h);
        // projection role only: embeddings frozen
        let mut wp = emb.clone();
        wp[k] += h;
        let mut wm = emb.clone();
        wm[k] -= h;
        let fd_out = (loss_untied(&p, &wp, &batch).unwrap().mean
            - loss_untied(&p, &wm, &batch).unwrap().mean)
            / (2.0 * h);

        assert!(rel_err(input_side.data[i], fd_in) < 1e-4, "input role {k}");
        assert!(rel_err(out_grad[k], fd_out) < 1e-4, "output role {k}");
        assert!(rel_err(tied.data[i], fd_in + fd_out) < 1e-4, "tied {k}");
    }
}

#[test]
fn per_sample_losses_ignore_batch_composition() {
    let p = randomized(cfg(12, 8, 2, 2, 8), 9, 0.3);
    let batch = batch_for_gradcheck();
    let full = loss(&p, &batch).unwrap();
    for (i, s) in batch.samples.iter().enumerate() {
        let alone = loss(&p, &Batch::new(vec![s.clone()])).unwrap();
        assert!((alone.per_sample[0] - full.per_sample[i]).abs() < 1e-10);
    }
    let mut rev = batch.samples.clone();
    rev.reverse();
    let reversed = loss(&p, &Batch::new(rev)).unwrap();
    assert!((reversed.mean - full.mean).abs() < 1e-10);
}
