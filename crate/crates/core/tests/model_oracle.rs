//! Scalar-loop reference implementation of the velocity model, compared
//! against the tensor implementation in f64 at random (non-identity)
//! parameters.

use candle_core::{DType, Device, Tensor};
use rand_distr::{Distribution, StandardNormal};
use vedit_core::model::{BatchLayout, BranchParams, Linear, Parameterized, VeditParams};
use vedit_core::types::AttentionKind;
use vedit_core::{ModelConfig, RngSeed};

type Mat = Vec<Vec<f64>>;

struct Lin {
    w: Vec<f64>,
    b: Vec<f64>,
    inp: usize,
}

impl Lin {
    fn of(l: &Linear) -> Self {
        Lin {
            w: l.weight.as_tensor().flatten_all().unwrap().to_vec1().unwrap(),
            b: l.bias.as_tensor().to_vec1().unwrap(),
            inp: l.weight.dims()[1],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.inp);
        self.b
            .iter()
            .enumerate()
            .map(|(o, b)| b + (0..self.inp).map(|i| self.w[o * self.inp + i] * x[i]).sum::<f64>())
            .collect()
    }
}

fn silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v / (1.0 + (-v).exp())).collect()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
}

fn ln(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-6).sqrt()).collect()
}

fn modulate(x: &[f64], shift: &[f64], scale: &[f64]) -> Vec<f64> {
    x.iter().zip(shift).zip(scale).map(|((v, s), c)| v * (1.0 + c) + s).collect()
}

fn time_embedding(p: &VeditParams, sigma: f64) -> Vec<f64> {
    let freq = p.time_embed.freq_dim();
    let half = freq / 2;
    let t = sigma * 1000.0;
    let mut feats = vec![0.0; freq];
    for i in 0..half {
        let arg = t * 10_000f64.powf(-(i as f64) / half as f64);
        feats[i] = arg.cos();
        feats[half + i] = arg.sin();
    }
    let h = silu(&Lin::of(&p.time_embed.fc1).apply(&feats));
    Lin::of(&p.time_embed.fc2).apply(&h)
}

fn rotate(x: &mut [f64], pos: usize, head_dim: usize, base: f64) {
    for head in x.chunks_mut(head_dim) {
        for j in 0..head_dim / 2 {
            let angle = pos as f64 * base.powf(-(2.0 * j as f64) / head_dim as f64);
            let (a, b) = (head[2 * j], head[2 * j + 1]);
            head[2 * j] = a * angle.cos() - b * angle.sin();
            head[2 * j + 1] = a * angle.sin() + b * angle.cos();
        }
    }
}

/// One block on one sample: rows of `target` and `seen` with their positions.
#[allow(clippy::too_many_arguments)]
fn block(
    target: &Mat,
    seen: &Mat,
    temb: &[f64],
    tp: &BranchParams,
    sp: &BranchParams,
    heads: usize,
    kind: AttentionKind,
    pos: &[usize],
    base: f64,
) -> (Mat, Mat) {
    let hidden = temb.len();
    let hd = hidden / heads;
    let nt = target.len();
    let rows: Vec<(&Vec<f64>, &BranchParams)> =
        target.iter().map(|r| (r, tp)).chain(seen.iter().map(|r| (r, sp))).collect();
    let mods: Vec<Vec<f64>> = rows.iter().map(|(_, p)| Lin::of(&p.modulation).apply(&silu(temb))).collect();
    let chunk = |m: &Vec<f64>, i: usize| m[i * hidden..(i + 1) * hidden].to_vec();
    let normed: Mat = rows
        .iter()
        .zip(&mods)
        .map(|((x, _), m)| modulate(&ln(x), &chunk(m, 0), &chunk(m, 1)))
        .collect();
    let proj = |f: fn(&BranchParams) -> &Linear, rotate_it: bool| -> Mat {
        rows.iter()
            .zip(&normed)
            .enumerate()
            .map(|(i, ((_, p), x))| {
                let mut y = Lin::of(f(p)).apply(x);
                if rotate_it {
                    rotate(&mut y, pos[i], hd, base);
                }
                y
            })
            .collect()
    };
    let q = proj(|p| &p.q, true);
    let k = proj(|p| &p.k, true);
    let v = proj(|p| &p.v, false);
    let n = rows.len();
    let mut attended = vec![vec![0.0; hidden]; n];
    for h in 0..heads {
        let r = h * hd..(h + 1) * hd;
        for i in 0..n {
            let mut scores: Vec<f64> = (0..n)
                .map(|j| {
                    let s: f64 = r.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt();
                    let same_branch = (i < nt) == (j < nt);
                    if kind == AttentionKind::Cross && same_branch {
                        f64::NEG_INFINITY
                    } else {
                        s
                    }
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            scores.iter_mut().for_each(|s| *s = (*s - max).exp());
            let z: f64 = scores.iter().sum();
            for c in r.clone() {
                attended[i][c] = (0..n).map(|j| scores[j] / z * v[j][c]).sum();
            }
        }
    }
    let out: Mat = rows
        .iter()
        .zip(&mods)
        .zip(&attended)
        .map(|(((x, p), m), a)| {
            let a = Lin::of(&p.out).apply(a);
            let gate = chunk(m, 2);
            let x: Vec<f64> = x.iter().zip(&a).zip(&gate).map(|((x, a), g)| x + g * a).collect();
            let h = modulate(&ln(&x), &chunk(m, 3), &chunk(m, 4));
            let ff: Vec<f64> = Lin::of(&p.ff_in).apply(&h).into_iter().map(gelu).collect();
            let ff = Lin::of(&p.ff_out).apply(&ff);
            let gate = chunk(m, 5);
            x.iter().zip(&ff).zip(&gate).map(|((x, f), g)| x + g * f).collect()
        })
        .collect();
    (out[..nt].to_vec(), out[nt..].to_vec())
}

/// Velocity for one sample; `target`/`seen` are token rows of width D.
fn reference_forward(p: &VeditParams, target: &Mat, seen: &Mat, sigma: f64, pos: &[usize]) -> Mat {
    let c = &p.config;
    let temb = time_embedding(p, sigma);
    let mut t: Mat = target.iter().map(|r| Lin::of(&p.target_in).apply(r)).collect();
    let mut s: Mat = seen.iter().map(|r| Lin::of(&p.seen_in).apply(r)).collect();
    for b in &p.blocks {
        (t, s) = block(&t, &s, &temb, &b.target, b.seen_branch(), b.heads, b.kind, pos, c.rope_base);
    }
    let m = Lin::of(&p.final_layer.modulation).apply(&silu(&temb));
    let h = c.hidden_dim;
    t.iter()
        .map(|row| Lin::of(&p.final_layer.proj).apply(&modulate(&ln(row), &m[..h], &m[h..])))
        .collect()
}

fn random_rows(n: usize, d: usize, seed: u64) -> Mat {
    let mut rng = RngSeed(seed).rng();
    (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
}

fn to_tensor(rows: &[Mat]) -> Tensor {
    let (b, n, d) = (rows.len(), rows[0].len(), rows[0][0].len());
    let flat: Vec<f64> = rows.iter().flatten().flatten().copied().collect();
    Tensor::from_vec(flat, (b, n, d), &Device::Cpu).unwrap()
}

fn config(kind: AttentionKind, layers: usize, k: usize) -> ModelConfig {
    ModelConfig {
        layers,
        hidden_dim: 8,
        attn_heads: 2,
        head_dim: 4,
        max_len: 6,
        rope_base: 10_000.0,
        token_dim: 4,
        tokens_per_clip: k,
        freq_dim: 16,
        attention: kind,
    }
}

/// Compares both implementations on a two-sample batch with different
/// target/seen placements.
fn check(kind: AttentionKind, layers: usize, k: usize, seed: u64) {
    let cfg = config(kind, layers, k);
    let p = VeditParams::new(&cfg, RngSeed(seed), DType::F64).unwrap();
    p.perturb(RngSeed(seed + 100), 0.3).unwrap();
    let masks = [vec![false, true, false, true, false], vec![true, false, false, false, true]];
    let layout = BatchLayout::from_masks(masks.iter().map(|m| m.as_slice())).unwrap();
    let positions = layout.joint_positions(k, cfg.max_len).unwrap();
    let targets: Vec<Mat> = (0..2).map(|b| random_rows(2 * k, 4, seed * 10 + b)).collect();
    let seens: Vec<Mat> = (0..2).map(|b| random_rows(3 * k, 4, seed * 10 + 5 + b)).collect();
    let rope = layout.rope(&cfg, DType::F64, &Device::Cpu).unwrap();
    for sigma in [1.0, 0.37, 0.0] {
        let got = p.forward(&to_tensor(&targets), &to_tensor(&seens), sigma, &rope).unwrap();
        let got: Vec<Vec<Vec<f64>>> = got.to_vec3().unwrap();
        for b in 0..2 {
            let want = reference_forward(&p, &targets[b], &seens[b], sigma, &positions[b]);
            for (gr, wr) in got[b].iter().zip(&want) {
                for (g, w) in gr.iter().zip(wr) {
                    assert!((g - w).abs() < 1e-10, "{kind:?} L{layers} k{k} sigma {sigma}: {g} vs {w}");
                }
            }
        }
    }
}

#[test]
fn joint_single_layer_matches_reference() {
    check(AttentionKind::Joint, 1, 1, 1);
}

#[test]
fn joint_two_layers_multi_token_clips_match_reference() {
    check(AttentionKind::Joint, 2, 2, 2);
}

#[test]
fn cross_variant_matches_reference() {
    check(AttentionKind::Cross, 2, 1, 3);
}

#[test]
fn self_variant_matches_reference() {
    check(AttentionKind::SelfAttention, 2, 1, 4);
}

#[test]
fn reordering_seen_clips_with_their_positions_leaves_velocity_unchanged() {
    let cfg = config(AttentionKind::Joint, 2, 1);
    let p = VeditParams::new(&cfg, RngSeed(9), DType::F64).unwrap();
    p.perturb(RngSeed(19), 0.3).unwrap();
    let target = random_rows(1, 4, 1);
    let seen = random_rows(3, 4, 2);
    let pos = [3, 0, 1, 2];
    let perm = [2, 0, 1];
    let seen_p: Mat = perm.iter().map(|&i| seen[i].clone()).collect();
    let pos_p: Vec<usize> = std::iter::once(3).chain(perm.iter().map(|&i| pos[1 + i])).collect();
    let a = reference_forward(&p, &target, &seen, 0.5, &pos);
    let b = reference_forward(&p, &target, &seen_p, 0.5, &pos_p);
    for (x, y) in a[0].iter().zip(&b[0]) {
        assert!((x - y).abs() < 1e-12);
    }
    // and the tensor implementation agrees with itself under the permutation
    let rope = |pos: &[usize]| {
        vedit_core::model::RopeTables::new(&[pos.to_vec()], cfg.head_dim, cfg.rope_base, DType::F64, &Device::Cpu)
            .unwrap()
    };
    let ta = p.forward(&to_tensor(&[target.clone()]), &to_tensor(&[seen]), 0.5, &rope(&pos)).unwrap();
    let tb = p.forward(&to_tensor(&[target]), &to_tensor(&[seen_p]), 0.5, &rope(&pos_p)).unwrap();
    let diff: f64 = (ta - tb).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
    assert!(diff < 1e-12);
}

#[test]
fn parameter_names_are_unique() {
    let p = VeditParams::new(&config(AttentionKind::Joint, 3, 1), RngSeed(0), DType::F32).unwrap();
    let names: Vec<String> = p.named_params().into_iter().map(|(n, _)| n).collect();
    let unique: std::collections::HashSet<_> = names.iter().collect();
    assert_eq!(unique.len(), names.len());
}
