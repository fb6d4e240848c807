use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{grad_check, Tensor};

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar loss `Σ y ⊙ R` with a fixed pseudo-random `R`, so that no
/// gradient vanishes by symmetry.
fn project(t: &mut Tape<'_>, y: Var) -> Result<Var> {
    let r = rand_tensor(t.shape(y), 99);
    let r = t.constant(r);
    let p = t.mul(y, r)?;
    Ok(t.sum(p))
}

fn lin(t: &mut Tape<'_>, k: usize, n: usize, seed: u64) -> Linear {
    let w = t.constant(rand_tensor(&[k, n], seed));
    let b = t.constant(rand_tensor(&[n], seed + 1));
    Linear { w, b: Some(b) }
}

fn nrm(t: &mut Tape<'_>, n: usize, seed: u64) -> Norm {
    let g = rand_tensor(&[n], seed);
    let g = Tensor::from_vec(g.data().iter().map(|v| 1.0 + 0.3 * v).collect());
    let gamma = t.constant(g);
    let beta = t.constant(rand_tensor(&[n], seed + 1));
    Norm { gamma, beta }
}

fn attn_weights(t: &mut Tape<'_>, ds: usize, seed: u64) -> AttnWeights {
    AttnWeights {
        q: lin(t, ds, ds, seed),
        k: lin(t, ds, ds, seed + 2),
        v: lin(t, ds, ds, seed + 4),
        o: lin(t, ds, ds, seed + 6),
        ff1: lin(t, ds, 2 * ds, seed + 8),
        ff2: lin(t, 2 * ds, ds, seed + 10),
        ln1: nrm(t, ds, seed + 12),
        ln2: nrm(t, ds, seed + 14),
    }
}

fn values(t: &Tape<'_>, v: Var) -> Vec<f64> {
    t.value(v).data().to_vec()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

// ---- dim_mask ----

#[test]
fn dim_mask_examples() {
    let mut t = Tape::new();
    let v = t.constant(Tensor::new(vec![1, 3], vec![5.0, 6.0, 7.0]).unwrap());
    let m = dim_mask(&mut t, v, 2, MaskAxis::Dense).unwrap();
    assert_eq!(values(&t, m), vec![5.0, 6.0, 0.0]);
    let full = dim_mask(&mut t, v, 3, MaskAxis::Dense).unwrap();
    assert_eq!(values(&t, full), vec![5.0, 6.0, 7.0]);
    let zero = dim_mask(&mut t, v, 0, MaskAxis::Dense).unwrap();
    assert_eq!(values(&t, zero), vec![0.0; 3]);
    assert!(dim_mask(&mut t, v, 4, MaskAxis::Dense).is_err());

    let s = t.constant(Tensor::new(vec![1, 3, 2], (1..=6).map(f64::from).collect()).unwrap());
    let m = dim_mask(&mut t, s, 1, MaskAxis::Sparse).unwrap();
    assert_eq!(values(&t, m), vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
}

proptest! {
    #[test]
    fn dim_mask_nests(d1 in 0usize..=6, d2 in 0usize..=6, seed in any::<u64>()) {
        let mut t = Tape::new();
        let v = t.constant(rand_tensor(&[3, 6], seed));
        let a = dim_mask(&mut t, v, d1, MaskAxis::Dense).unwrap();
        let a = dim_mask(&mut t, a, d2, MaskAxis::Dense).unwrap();
        let b = dim_mask(&mut t, v, d1.min(d2), MaskAxis::Dense).unwrap();
        prop_assert_eq!(values(&t, a), values(&t, b));
    }

    #[test]
    fn fm_is_permutation_invariant(seed in any::<u64>(), n in 1usize..6) {
        let x = rand_tensor(&[2, n, 4], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut perm = vec![0.0; x.len()];
        for b in 0..2 {
            for (dst, &src) in order.iter().enumerate() {
                for k in 0..4 {
                    perm[(b * n + dst) * 4 + k] = x.at(&[b, src, k]);
                }
            }
        }
        let mut t = Tape::new();
        let a = t.constant(x);
        let p = t.constant(Tensor::new(vec![2, n, 4], perm).unwrap());
        let fa = fm(&mut t, a).unwrap();
        let fp = fm(&mut t, p).unwrap();
        for (u, v) in values(&t, fa).iter().zip(values(&t, fp)) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn binary_ops_keep_batch_and_take_max_width(d1 in 0usize..6, d2 in 0usize..6, b in 1usize..4) {
        let mut t = Tape::new();
        let x1 = t.constant(rand_tensor(&[b, d1], 1));
        let x2 = t.constant(rand_tensor(&[b, d2], 2));
        let m = d1.max(d2);
        let s = sum_merge(&mut t, x1, x2, None).unwrap();
        prop_assert_eq!(t.shape(s), &[b, m]);
        let gate = lin(&mut t, d1, m, 3);
        let g = sigmoid_gating(&mut t, x1, x2, &gate, None).unwrap();
        prop_assert_eq!(t.shape(g), &[b, m]);
    }
}

// ---- FC ----

#[test]
fn fc_with_empty_input_is_relu_of_bias() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[3, 0]));
    let w = t.constant(Tensor::zeros(&[0, 4]));
    let b = t.constant(Tensor::zeros(&[4]));
    let y = fc(&mut t, x, &Linear { w, b: Some(b) }, None).unwrap();
    assert_eq!(values(&t, y), vec![0.0; 12]);
    let b2 = t.constant(Tensor::from_vec(vec![-1.0, 2.0]));
    let w2 = t.constant(Tensor::zeros(&[0, 2]));
    let y = fc(&mut t, x, &Linear { w: w2, b: Some(b2) }, None).unwrap();
    assert_eq!(values(&t, y), vec![0.0, 2.0, 0.0, 2.0, 0.0, 2.0]);
}

#[test]
fn fc_counts() {
    assert_eq!(param_count(&OpSpec::fc(64, 32)).linear(), 2080);
    assert_eq!(mac_flops(&OpSpec::fc(13, 64)), 1664);
    assert_eq!(flops(&OpSpec::fc(13, 64)), 1664 + 5 * 64);
}

// ---- SG / SUM ----

#[test]
fn sigmoid_gating_examples() {
    let mut t = Tape::new();
    let x1 = t.constant(rand_tensor(&[2, 3], 5));
    let x2 = t.constant(rand_tensor(&[2, 5], 6));
    let w = t.constant(Tensor::zeros(&[3, 5]));
    let b = t.constant(Tensor::zeros(&[5]));
    let y = sigmoid_gating(&mut t, x1, x2, &Linear { w, b: Some(b) }, None).unwrap();
    assert_eq!(t.shape(y), &[2, 5]);
    let half: Vec<f64> = values(&t, x2).iter().map(|v| 0.5 * v).collect();
    close(&values(&t, y), &half, 1e-15);

    // x1 wider than x2: x2 is padded.
    let w = t.constant(Tensor::zeros(&[5, 5]));
    let y = sigmoid_gating(&mut t, x2, x1, &Linear { w, b: Some(b) }, None).unwrap();
    let v = values(&t, y);
    assert_eq!(&v[3..5], &[0.0, 0.0]);

    // Self-gating on one input, 1-d: sigmoid(2·0.5 + 0.25)·0.5.
    let x = t.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
    let w = t.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
    let b = t.constant(Tensor::from_vec(vec![0.25]));
    let y = sigmoid_gating(&mut t, x, x, &Linear { w, b: Some(b) }, None).unwrap();
    let expect = 0.5 / (1.0 + (-1.25f64).exp());
    close(&values(&t, y), &[expect], 1e-15);
}

#[test]
fn sum_merge_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = t.constant(Tensor::new(vec![1, 3], vec![3.0, 4.0, 5.0]).unwrap());
    let ab = sum_merge(&mut t, a, b, None).unwrap();
    let ba = sum_merge(&mut t, b, a, None).unwrap();
    assert_eq!(values(&t, ab), vec![4.0, 6.0, 5.0]);
    assert_eq!(values(&t, ab), values(&t, ba));
    let z = t.constant(Tensor::zeros(&[1, 3]));
    let bz = sum_merge(&mut t, b, z, None).unwrap();
    assert_eq!(values(&t, bz), values(&t, b));
}

// ---- DP ----

#[test]
fn dot_product_pair_count_and_orthogonality() {
    let mut t = Tape::new();
    let eye = Tensor::new(vec![1, 4, 4], (0..16).map(|i| f64::from(u8::from(i % 5 == 0))).collect()).unwrap();
    let xs = t.constant(eye);
    let p = t.pairwise_dots(xs).unwrap();
    assert_eq!(t.shape(p), &[1, 6]);
    assert_eq!(values(&t, p), vec![0.0; 6]);

    // Full operator: output width follows the FC.
    let out = lin(&mut t, 6, 3, 1);
    let dp = dot_product(
        &mut t,
        None,
        Some(xs),
        &DpWeights {
            dense_proj: None,
            balance: None,
            out,
        },
        None,
    )
    .unwrap();
    assert_eq!(t.shape(dp), &[1, 3]);
    let none = DpWeights {
        dense_proj: None,
        balance: None,
        out,
    };
    assert!(dot_product(&mut t, None, None, &none, None).is_err());
}

#[test]
fn operator_balancing_arithmetic() {
    assert_eq!(dp_params_paper(448, 512, false), 51_380_224);
    assert_eq!(balance_width(512), 32);
    assert_eq!(dp_params_paper(448, 512, true), 512 * 512 + 448 * 32);
    assert_eq!(dp_params_paper(448, 512, true), 276_480);
    assert!(dp_params_paper(448, 512, true) < dp_params_paper(448, 512, false));
}

#[test]
fn balanced_growth_is_linear_unbalanced_quadratic() {
    let d = 512u64;
    let ns = [64u64, 128, 256, 448];
    let bal: Vec<u64> = ns.iter().map(|&n| dp_params_paper(n, d, true) - d * d).collect();
    let unb: Vec<u64> = ns.iter().map(|&n| dp_params_paper(n, d, false)).collect();
    for i in 1..ns.len() {
        let r = ns[i] as f64 / ns[0] as f64;
        assert!((bal[i] as f64 / bal[0] as f64 - r).abs() < 1e-12);
        assert!((unb[i] as f64 / unb[0] as f64 - r * r).abs() < 1e-12);
    }
    // Same shape for the implemented operator's exact count.
    let exact = |n: usize, balanced: bool| param_count(&OpSpec::dp(0, n, 512, 16, balanced)).weights as f64;
    let (b64, b448) = (exact(64, true), exact(448, true));
    let (u64_, u448) = (exact(64, false), exact(448, false));
    assert!(b448 / b64 < 7.0 + 1e-9);
    assert!(u448 / u64_ > 40.0);
}

#[test]
fn balance_width_rounds_half_up() {
    assert_eq!(balance_width(16), 6); // sqrt(32) = 5.66
    assert_eq!(balance_width(8), 4);
    assert_eq!(balance_width(1024), 45); // 45.25
    assert_eq!(balance_width(2), 2);
}

// ---- EFC ----

#[test]
fn efc_identity_preserves_input() {
    let mut t = Tape::new();
    let x = t.constant(rand_tensor(&[2, 3, 4], 3));
    let eye = Tensor::new(vec![3, 3], (0..9).map(|i| f64::from(u8::from(i % 4 == 0))).collect()).unwrap();
    let w = t.constant(eye);
    let y = efc_project(&mut t, x, w, None).unwrap();
    assert_eq!(values(&t, y), values(&t, x));
}

#[test]
fn efc_counts() {
    assert_eq!(param_count(&OpSpec::efc(26, 32, 16)).linear(), 864);
    assert_eq!(mac_flops(&OpSpec::efc(26, 32, 16)), 26_624);
}

// ---- Attention ----

/// Step-by-step attention encoder on plain vectors, one sample.
fn attention_oracle(x: &[Vec<f64>], w: &[Tensor; 8], lns: &[Tensor; 4], heads: usize) -> Vec<Vec<f64>> {
    let n = x.len();
    let ds = x[0].len();
    let dh = ds / heads;
    let lin = |v: &[f64], wt: &Tensor, bt: &Tensor| -> Vec<f64> {
        let out = wt.shape()[1];
        (0..out)
            .map(|j| bt.data()[j] + v.iter().enumerate().map(|(i, a)| a * wt.at(&[i, j])).sum::<f64>())
            .collect()
    };
    let ln = |v: &[f64], g: &Tensor, b: &Tensor| -> Vec<f64> {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64;
        v.iter()
            .enumerate()
            .map(|(j, a)| g.data()[j] * (a - m) / (var + LN_EPS).sqrt() + b.data()[j])
            .collect()
    };
    let q: Vec<Vec<f64>> = x.iter().map(|v| lin(v, &w[0], &w[1])).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|v| lin(v, &w[2], &w[3])).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|r| lin(r, &w[4], &w[5])).collect();
    let mut ctx = vec![vec![0.0; ds]; n];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n {
                for c in r.clone() {
                    ctx[i][c] += e[j] / z * v[j][c];
                }
            }
        }
    }
    (0..n)
        .map(|i| {
            let o = lin(&ctx[i], &w[6], &w[7]);
            let h1: Vec<f64> = x[i].iter().zip(&o).map(|(a, b)| a + b).collect();
            let h1 = ln(&h1, &lns[0], &lns[1]);
            h1.clone()
        })
        .collect()
}

#[test]
fn attention_matches_scripted_oracle() {
    let (bs, n, ds, heads) = (2, 3, 4, 2);
    let x = rand_tensor(&[bs, n, ds], 21);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let w = attn_weights(&mut t, ds, 30);
    let (y, probs) = attention_with_probs(&mut t, xv, &w, heads).unwrap();
    let yv = values(&t, y);

    // Row sums of the attention probabilities.
    for row in values(&t, probs).chunks(n) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let get = |v: Var| t.value(v).clone();
    let ws = [
        get(w.q.w),
        get(w.q.b.unwrap()),
        get(w.k.w),
        get(w.k.b.unwrap()),
        get(w.v.w),
        get(w.v.b.unwrap()),
        get(w.o.w),
        get(w.o.b.unwrap()),
    ];
    let lns = [get(w.ln1.gamma), get(w.ln1.beta), get(w.ln2.gamma), get(w.ln2.beta)];
    for b in 0..bs {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..ds).map(|c| x.at(&[b, i, c])).collect()).collect();
        let h1 = attention_oracle(&rows, &ws, &lns, heads);
        // Finish the FFN sublayer by hand.
        let (f1w, f1b, f2w, f2b) = (get(w.ff1.w), get(w.ff1.b.unwrap()), get(w.ff2.w), get(w.ff2.b.unwrap()));
        for i in 0..n {
            let hid: Vec<f64> = (0..2 * ds)
                .map(|j| (f1b.data()[j] + (0..ds).map(|c| h1[i][c] * f1w.at(&[c, j])).sum::<f64>()).max(0.0))
                .collect();
            let pre: Vec<f64> = (0..ds)
                .map(|j| h1[i][j] + f2b.data()[j] + (0..2 * ds).map(|c| hid[c] * f2w.at(&[c, j])).sum::<f64>())
                .collect();
            let m = pre.iter().sum::<f64>() / ds as f64;
            let var = pre.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / ds as f64;
            for j in 0..ds {
                let expect = lns[2].data()[j] * (pre[j] - m) / (var + LN_EPS).sqrt() + lns[3].data()[j];
                let got = yv[(b * n + i) * ds + j];
                assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
            }
        }
    }
}

#[test]
fn attention_single_key_uses_value_path_only() {
    // With N = 1 the context equals the value projection, so changing the
    // query/key weights cannot change the output.
    let x = rand_tensor(&[3, 1, 4], 8);
    let mut t = Tape::new();
    let xv = t.constant(x);
    let w = attn_weights(&mut t, 4, 40);
    let y1 = attention(&mut t, xv, &w, 2).unwrap();
    let mut w2 = w;
    w2.q = lin(&mut t, 4, 4, 77);
    w2.k = lin(&mut t, 4, 4, 78);
    let y2 = attention(&mut t, xv, &w2, 2).unwrap();
    close(&values(&t, y1), &values(&t, y2), 1e-14);
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut t = Tape::new();
    let xv = t.constant(rand_tensor(&[1, 2, 4], 1));
    let w = attn_weights(&mut t, 4, 1);
    assert!(attention(&mut t, xv, &w, 3).is_err());
}

// ---- Mergers ----

#[test]
fn dense_to_sparse_shapes() {
    let mut t = Tape::new();
    let x = t.constant(rand_tensor(&[2, 5], 1));
    let l = lin(&mut t, 5, D2S_EMBEDDINGS * 4, 2);
    let y = dense_to_sparse(&mut t, x, &l, D2S_EMBEDDINGS).unwrap();
    assert_eq!(t.shape(y), &[2, 2, 4]);
    let s = t.constant(rand_tensor(&[2, 26, 4], 3));
    let c = t.concat(1, &[s, y]).unwrap();
    assert_eq!(t.shape(c), &[2, 28, 4]);

    let w = t.constant(Tensor::zeros(&[5, 8]));
    let b = t.constant(Tensor::zeros(&[8]));
    let z = dense_to_sparse(&mut t, x, &Linear { w, b: Some(b) }, 2).unwrap();
    assert_eq!(values(&t, z), vec![0.0; 16]);
}

#[test]
fn fm_examples() {
    let mut t = Tape::new();
    let one = t.constant(rand_tensor(&[3, 1, 4], 4));
    let v = fm(&mut t, one).unwrap();
    assert_eq!(values(&t, v), vec![0.0; 12]);
    let two = t.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
    let v = fm(&mut t, two).unwrap();
    assert_eq!(values(&t, v), vec![1.0, 0.0]);
}

// ---- Autodiff ----

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check<F>(f: F, x: &Tensor) -> f64
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    grad_check(f, x, H).unwrap()
}

#[test]
fn every_operator_passes_grad_check() {
    let dense = rand_tensor(&[3, 5], 11);
    let sparse = rand_tensor(&[2, 4, 4], 12);
    let mut worst = Vec::new();

    worst.push((
        "fc",
        check(
            |t, x| {
                let l = lin(t, 5, 6, 1);
                let n = nrm(t, 6, 2);
                let y = fc(t, x, &l, Some(&n))?;
                project(t, y)
            },
            &dense,
        ),
    ));
    worst.push((
        "sg",
        check(
            |t, x| {
                let x2 = t.constant(rand_tensor(&[3, 7], 3));
                let l = lin(t, 5, 7, 4);
                let n = nrm(t, 7, 5);
                let y = sigmoid_gating(t, x, x2, &l, Some(&n))?;
                project(t, y)
            },
            &dense,
        ),
    ));
    worst.push((
        "sg-self",
        check(
            |t, x| {
                let l = lin(t, 5, 5, 4);
                let y = sigmoid_gating(t, x, x, &l, None)?;
                project(t, y)
            },
            &dense,
        ),
    ));
    worst.push((
        "sum",
        check(
            |t, x| {
                let x2 = t.constant(rand_tensor(&[3, 2], 6));
                let n = nrm(t, 5, 7);
                let y = sum_merge(t, x2, x, Some(&n))?;
                project(t, y)
            },
            &dense,
        ),
    ));
    for balanced in [false, true] {
        worst.push((
            "dp-dense",
            check(
                |t, x| {
                    let xs = t.constant(sparse.clone());
                    let w = dp_weights(t, 5, 4, 4, 3, balanced);
                    let n = nrm(t, 3, 9);
                    let y = dot_product(t, Some(x), Some(xs), &w, Some(&n))?;
                    project(t, y)
                },
                &rand_tensor(&[2, 5], 11),
            ),
        ));
        worst.push((
            "dp-sparse",
            check(
                |t, x| {
                    let xd = t.constant(rand_tensor(&[2, 5], 13));
                    let w = dp_weights(t, 5, 4, 4, 3, balanced);
                    let n = nrm(t, 3, 9);
                    let y = dot_product(t, Some(xd), Some(x), &w, Some(&n))?;
                    project(t, y)
                },
                &sparse,
            ),
        ));
    }
    worst.push((
        "efc",
        check(
            |t, x| {
                let l = lin(t, 4, 3, 14);
                let n = nrm(t, 4, 15);
                let y = efc(t, x, &l, Some(&n))?;
                project(t, y)
            },
            &sparse,
        ),
    ));
    worst.push((
        "attn",
        check(
            |t, x| {
                let w = attn_weights(t, 4, 16);
                let y = attention(t, x, &w, 2)?;
                project(t, y)
            },
            &sparse,
        ),
    ));
    worst.push((
        "d2s",
        check(
            |t, x| {
                let l = lin(t, 5, 8, 17);
                let y = dense_to_sparse(t, x, &l, 2)?;
                project(t, y)
            },
            &dense,
        ),
    ));
    worst.push((
        "s2d",
        check(
            |t, x| {
                let l = lin(t, 4, 6, 18);
                let n = nrm(t, 6, 20);
                let y = sparse_to_dense(t, x, &l, Some(&n))?;
                project(t, y)
            },
            &sparse,
        ),
    ));
    // Weight gradients of a representative operator.
    worst.push((
        "efc-weights",
        check(
            |t, w| {
                let x = t.constant(sparse.clone());
                let y = efc(t, x, &Linear { w, b: None }, None)?;
                project(t, y)
            },
            &rand_tensor(&[4, 3], 19),
        ),
    ));
    for (name, err) in worst {
        assert!(err < TOL, "{name}: {err}");
    }
}

fn dp_weights(t: &mut Tape<'_>, din: usize, n_in: usize, ds: usize, out: usize, balanced: bool) -> DpWeights {
    let proj = lin(t, din, ds, 20);
    let m = if balanced { 2 } else { n_in };
    let balance = balanced.then(|| t.constant(rand_tensor(&[n_in, m], 22)));
    let pairs = (m + 1) * m / 2;
    DpWeights {
        dense_proj: Some(proj),
        balance,
        out: lin(t, pairs, out, 23),
    }
}

// ---- FLOPs formulas vs tape counter ----

fn counted(f: impl FnOnce(&mut Tape<'_>) -> Result<Var>, batch: u64) -> u64 {
    let mut t = Tape::new();
    f(&mut t).unwrap();
    t.flops() / batch
}

#[test]
fn flops_formulas_match_tape_counter() {
    let b = 3u64;
    let ds = 4;
    let c = counted(
        |t| {
            let x = t.constant(rand_tensor(&[3, 5], 1));
            let l = lin(t, 5, 6, 1);
            let n = nrm(t, 6, 2);
            fc(t, x, &l, Some(&n))
        },
        b,
    );
    assert_eq!(c, flops(&OpSpec::fc(5, 6)));

    let c = counted(
        |t| {
            let x1 = t.constant(rand_tensor(&[3, 5], 1));
            let x2 = t.constant(rand_tensor(&[3, 7], 2));
            let l = lin(t, 5, 7, 1);
            let n = nrm(t, 7, 2);
            sigmoid_gating(t, x1, x2, &l, Some(&n))
        },
        b,
    );
    let sg = OpSpec {
        dim_in: 5,
        dim_in2: 7,
        out_dim: 7,
        ..OpSpec::new(OpKind::Sg)
    };
    assert_eq!(c, flops(&sg));

    for balanced in [false, true] {
        let out = 8; // balance_width(8) = 4
        let c = counted(
            |t| {
                let xd = t.constant(rand_tensor(&[3, 5], 1));
                let xs = t.constant(rand_tensor(&[3, 6, ds], 2));
                let m = if balanced { balance_width(out) } else { 6 };
                let w = DpWeights {
                    dense_proj: Some(lin(t, 5, ds, 3)),
                    balance: balanced.then(|| t.constant(rand_tensor(&[6, m], 4))),
                    out: lin(t, (m + 1) * m / 2, out, 5),
                };
                let n = nrm(t, out, 6);
                dot_product(t, Some(xd), Some(xs), &w, Some(&n))
            },
            b,
        );
        assert_eq!(c, flops(&OpSpec::dp(5, 6, out, ds, balanced)), "balanced={balanced}");
    }

    let c = counted(
        |t| {
            let xs = t.constant(rand_tensor(&[3, 6, ds], 2));
            let l = lin(t, 6, 5, 1);
            let n = nrm(t, ds, 2);
            efc(t, xs, &l, Some(&n))
        },
        b,
    );
    assert_eq!(c, flops(&OpSpec::efc(6, 5, ds)));

    let c = counted(
        |t| {
            let xs = t.constant(rand_tensor(&[3, 6, ds], 2));
            let w = attn_weights(t, ds, 3);
            attention(t, xs, &w, 2)
        },
        b,
    );
    let at = OpSpec {
        n_in: 6,
        out_dim: 6,
        dim_s: ds,
        heads: 2,
        ..OpSpec::new(OpKind::Attn)
    };
    assert_eq!(c, flops(&at));

    let c = counted(
        |t| {
            let xs = t.constant(rand_tensor(&[3, 6, ds], 2));
            let l = lin(t, ds, 7, 1);
            let n = nrm(t, 7, 3);
            sparse_to_dense(t, xs, &l, Some(&n))
        },
        b,
    );
    let s2d = OpSpec {
        n_in: 6,
        out_dim: 7,
        dim_s: ds,
        ..OpSpec::new(OpKind::S2d)
    };
    assert_eq!(c, flops(&s2d));

    let c = counted(
        |t| {
            let x = t.constant(rand_tensor(&[3, 5], 2));
            let l = lin(t, 5, 2 * ds, 1);
            dense_to_sparse(t, x, &l, 2)
        },
        b,
    );
    assert_eq!(c, flops(&cost::d2s_spec(5, ds)));
}

#[test]
fn spec_checks() {
    assert!(OpSpec::dp(0, 0, 8, 16, true).check().is_err());
    assert!(OpSpec::efc(0, 8, 16).check().is_err());
    let attn = OpSpec {
        n_in: 2,
        dim_s: 6,
        heads: 4,
        ..OpSpec::new(OpKind::Attn)
    };
    assert!(attn.check().is_err());
    assert!(OpSpec::fc(0, 8).check().is_ok());
}
