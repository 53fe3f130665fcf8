//! Finite-difference checks of every layer and training objective on toy
//! sizes, evaluated in f64.

use fedrec::fkd::{total_loss, FkdNet, UserExample};
use fedrec::numerics::nn::{LayerNorm, Linear, Mlp, SelfAttention, TransformerBlock};
use fedrec::numerics::{
    grad_check, Activation, GradCheckReport, Matrix, ParamStore, Rng, Tape, Var, GRAD_CHECK_STEP,
};
use fedrec::promptrec::{build_prompt, ce_loss, PromptConfig, PromptModel, SoftSpec, TinyLmConfig};
use fedrec::seqrec::{SeqRecConfig, SeqRecNet};

pub type Case = (String, GradCheckReport);

/// Fixed random projection so the scalar depends on every output entry.
fn readout(tape: &mut Tape<f64>, y: Var, rng: &mut Rng) -> Var {
    let (r, c) = tape.value(y).shape();
    let w = tape.constant(Matrix::<f64>::randn(r, c, 1.0, rng));
    let p = tape.mul(y, w);
    let s = tape.sum(p);
    let q = tape.sum_sq(y);
    let q = tape.scale(q, 0.1);
    tape.add(s, q)
}

fn check<F>(name: &str, store: ParamStore, loss: F) -> Case
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> fedrec::Result<Var>,
{
    let mut s64 = store.cast::<f64>();
    let report = grad_check(&mut s64, GRAD_CHECK_STEP, loss).unwrap_or_else(|e| panic!("{name}: {e}"));
    (name.to_string(), report)
}

fn input(rng: &mut Rng, r: usize, c: usize) -> Matrix<f64> {
    Matrix::<f64>::randn(r, c, 1.0, rng)
}

/// Values bounded away from the ReLU kink so ±h never crosses it.
fn away_from_zero(rng: &mut Rng, r: usize, c: usize) -> Matrix<f32> {
    Matrix::<f32>::randn(r, c, 1.0, rng).map(|v: f32| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
}

pub fn run_suite() -> Vec<Case> {
    let mut out = Vec::new();
    let root = Rng::new(20);

    // Linear.
    {
        let mut rng = root.fork(1);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 5, 4, &mut rng);
        let x = input(&mut rng, 3, 5);
        out.push(check("linear", store, |s, t| {
            let xv = t.constant(x.clone());
            let y = lin.forward(t, s, xv);
            Ok(readout(t, y, &mut Rng::new(1)))
        }));
    }
    // Embedding lookup with repeated rows.
    {
        let mut rng = root.fork(2);
        let mut store = ParamStore::new();
        let table = store.add("emb", Matrix::randn(6, 4, 1.0, &mut rng));
        out.push(check("embedding", store, |s, t| {
            let e = t.param(s, table);
            let g = t.gather(e, &[0, 3, 3, 5, 1]);
            Ok(readout(t, g, &mut Rng::new(2)))
        }));
    }
    // Layer norm.
    {
        let mut rng = root.fork(3);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 6);
        let x = store.add("x", Matrix::randn(4, 6, 1.0, &mut rng));
        out.push(check("layer_norm", store, |s, t| {
            let xv = t.param(s, x);
            let y = ln.forward(t, s, xv);
            Ok(readout(t, y, &mut Rng::new(3)))
        }));
    }
    // Softmax, plain and causal.
    for causal in [false, true] {
        let mut rng = root.fork(4);
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::randn(4, 4, 1.0, &mut rng));
        let name = if causal { "softmax_causal" } else { "softmax" };
        out.push(check(name, store, |s, t| {
            let xv = t.param(s, x);
            let y = t.softmax(xv, causal);
            Ok(readout(t, y, &mut Rng::new(4)))
        }));
    }
    // Multi-head self-attention.
    {
        let mut rng = root.fork(5);
        let mut store = ParamStore::new();
        let attn = SelfAttention::new(&mut store, "attn", 6, 2, &mut rng);
        let x = store.add("x", Matrix::randn(4, 6, 1.0, &mut rng));
        out.push(check("self_attention", store, |s, t| {
            let xv = t.param(s, x);
            let y = attn.forward(t, s, xv, true);
            Ok(readout(t, y, &mut Rng::new(5)))
        }));
    }
    // Mean pooling.
    {
        let mut rng = root.fork(6);
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::randn(5, 3, 1.0, &mut rng));
        out.push(check("mean_pool", store, |s, t| {
            let xv = t.param(s, x);
            let y = t.mean_rows(xv);
            Ok(readout(t, y, &mut Rng::new(6)))
        }));
    }
    // Pointwise activations.
    for act in [
        Activation::Relu,
        Activation::Gelu,
        Activation::Sigmoid,
        Activation::Silu,
        Activation::Tanh,
    ] {
        let mut rng = root.fork(7);
        let mut store = ParamStore::new();
        let x = store.add("x", away_from_zero(&mut rng, 3, 4));
        out.push(check(&format!("activation_{act:?}").to_lowercase(), store, |s, t| {
            let xv = t.param(s, x);
            let y = t.act(xv, act);
            Ok(readout(t, y, &mut Rng::new(7)))
        }));
    }
    // Log-sigmoid and cross-entropy.
    {
        let mut rng = root.fork(8);
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::randn(3, 5, 2.0, &mut rng));
        out.push(check("log_sigmoid", store.clone(), |s, t| {
            let xv = t.param(s, x);
            let y = t.log_sigmoid(xv);
            Ok(readout(t, y, &mut Rng::new(8)))
        }));
        out.push(check("cross_entropy", store, |s, t| {
            let xv = t.param(s, x);
            Ok(t.cross_entropy(xv, &[(0, 1), (1, 4), (2, 0), (0, 3)]))
        }));
    }
    // MLP and transformer block.
    {
        let mut rng = root.fork(9);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", (4, 5, 3), Activation::Gelu, &mut rng);
        let x = input(&mut rng, 3, 4);
        out.push(check("mlp", store, |s, t| {
            let xv = t.constant(x.clone());
            let y = mlp.forward(t, s, xv);
            Ok(readout(t, y, &mut Rng::new(9)))
        }));
    }
    {
        let mut rng = root.fork(10);
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "blk", 4, 2, 6, &mut rng);
        let x = input(&mut rng, 3, 4);
        out.push(check("transformer_block", store, |s, t| {
            let xv = t.constant(x.clone());
            let y = block.forward(t, s, xv, true, None);
            Ok(readout(t, y, &mut Rng::new(10)))
        }));
    }
    // Sequential recommender next-item loss.
    {
        let mut rng = root.fork(11);
        let cfg = SeqRecConfig {
            d: 4,
            num_blocks: 1,
            num_heads: 2,
            max_len: 5,
            dropout: 0.0,
            lr: 1e-3,
            epochs: 1,
            batch: 2,
        };
        let mut store = ParamStore::new();
        let net = SeqRecNet::new(&cfg, 6, &mut store, &mut rng);
        let seqs: Vec<Vec<usize>> = vec![vec![0, 2, 5, 1], vec![3, 4, 3]];
        out.push(check("seqrec_loss", store, |s, t| {
            let batch: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
            Ok(net.batch_loss(t, s, &batch, None)?.expect("non-empty batch"))
        }));
    }
    // Distillation objective.
    {
        let mut rng = root.fork(12);
        let (d, z) = (5, 4);
        let mut store = ParamStore::new();
        let net = FkdNet::new(&mut store, d, z, 3, &mut rng);
        let batch: Vec<UserExample> = [3usize, 2]
            .iter()
            .map(|&m| UserExample {
                e: Matrix::randn(m, d, 1.0, &mut rng),
                g: Matrix::randn(m, z, 1.0, &mut rng),
                e_cf: Matrix::randn(m, d, 1.0, &mut rng),
                g_cf: Matrix::randn(m, z, 1.0, &mut rng),
                e_minus: Matrix::randn(1, d, 1.0, &mut rng),
            })
            .collect();
        out.push(check("fkd_total_loss", store, |s, t| {
            Ok(total_loss(&net, t, s, &batch, 0.5, 0.2)?.total)
        }));
    }
    // Prompt cross-entropy through the whole LM, then projectors only.
    for freeze in [false, true] {
        let lm = TinyLmConfig {
            hidden: 4,
            blocks: 1,
            heads: 2,
            ffn: 4,
            context: 8,
        };
        let cfg = PromptConfig {
            template: "next item".into(),
            freeze_backbone: freeze,
            ..PromptConfig::default()
        };
        let soft = SoftSpec {
            user_dim: 3,
            item_dim: 2,
            n_soft: 1,
            projected: true,
        };
        let model = PromptModel::init(&lm, &cfg, 5, soft, 13).unwrap();
        let prompt = build_prompt(&model.net, &[0.3, -0.8, 0.5], &[1.1, -0.4], Some(2)).unwrap();
        let net = model.net.clone();
        let name = if freeze { "prompt_ce_projectors" } else { "prompt_ce_full" };
        out.push(check(name, model.store, |s, t| ce_loss(&net, t, s, &prompt)));
    }
    out
}
