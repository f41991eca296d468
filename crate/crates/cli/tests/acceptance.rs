//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report is always printed.
//! `ACCEPTANCE_ONLY=1,2,6` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use msvit::data::synth::{synthesize, Annotation, Feature, SynthConfig};
use msvit::data::tsia::{tsia_resolve, DonorPool, Provenance, Slot};
use msvit::data::{Dataset, Image, PatientSet, RawRecord};
use msvit::embedding::{Modality, MmeConfig, TokenLayout};
use msvit::gradcheck::{check_gradients, check_param_gradients, random_projection, GradCheckReport, Tolerance};
use msvit::heads::{total_loss, DEFAULT_ALPHA};
use msvit::model::{ModelConfig, ModelInput, Msvit};
use msvit::nn::{Activation, LayerNorm, Linear, Mlp2, Mode, ParamId, ParamStore};
use msvit::selective::{select, select_count, LocalCnn, PatchSource, StBlock, StConfig, StStack};
use msvit::tensor::top_k_indices;
use msvit::train::{
    compute_metrics, cross_validate, eval_samples, fold_splits, run_fold, FoldResult, MetricsReport, TrainConfig,
};
use msvit::visualization::{quantize, render, sample_maps, write_maps, FrequencyMap};
use msvit::{Tape, Tensor, Var};

type Outcome = (bool, String);

const TOY_SETS: usize = 400;
const TOY_EPOCHS: usize = 30;
const SEEDS: [u64; 3] = [0, 1, 2];

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |c: usize| only.as_ref().map_or(true, |o| o.contains(&c));
    let mut toy = ToyRuns::default();

    let criteria: Vec<(usize, &str, Box<dyn FnMut(&mut ToyRuns) -> Outcome>)> = vec![
        (1, "gradient suite", Box::new(|_| gradient_suite())),
        (2, "dense equivalence", Box::new(|_| dense_equivalence())),
        (3, "selection semantics", Box::new(|_| selection_semantics())),
        (4, "loss composition", Box::new(|_| loss_composition())),
        (5, "TSIA statistics", Box::new(|_| tsia_statistics())),
        (6, "metrics oracle", Box::new(|_| metrics_oracle())),
        (7, "synthetic end-to-end", Box::new(synthetic_end_to_end)),
        (8, "directional ablations", Box::new(directional_ablations)),
        (9, "visualization", Box::new(visualization)),
        (10, "determinism", Box::new(|_| determinism())),
    ];

    let mut failed = 0;
    for (id, name, mut f) in criteria {
        if !wanted(id) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(|| f(&mut toy))) {
            Ok(o) => o,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if !pass {
            failed += 1;
        }
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict} {name} [{:.1}s]: {detail}", start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape<f64>, &[Var], u64) -> msvit::Result<Var>>);

fn primitive_cases() -> Vec<Case> {
    let proj = |tp: &mut Tape<f64>, y: Var, s: u64| random_projection(tp, y, s);
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(move |tp, v, s| {
            let y = tp.matmul(v[0], v[1])?;
            proj(tp, y, s)
        })),
        ("linear", vec![vec![3, 4], vec![4, 5], vec![5]], Box::new(move |tp, v, s| {
            let y = tp.linear(v[0], v[1], Some(v[2]))?;
            proj(tp, y, s)
        })),
        ("add/sub/mul", vec![vec![2, 3], vec![2, 3]], Box::new(move |tp, v, s| {
            let a = tp.add(v[0], v[1])?;
            let b = tp.sub(a, v[1])?;
            let y = tp.mul(b, v[1])?;
            proj(tp, y, s)
        })),
        ("div", vec![vec![2, 3], vec![2, 3]], Box::new(move |tp, v, s| {
            // keep the divisor away from zero
            let sq = tp.mul(v[1], v[1])?;
            let one = tp.constant(Tensor::full([2, 3], 0.5));
            let d = tp.add(sq, one)?;
            let y = tp.div(v[0], d)?;
            proj(tp, y, s)
        })),
        ("scale", vec![vec![3, 2]], Box::new(move |tp, v, s| {
            let y = tp.scale(v[0], -1.7);
            proj(tp, y, s)
        })),
        ("add_tiled", vec![vec![6, 3], vec![2, 3]], Box::new(move |tp, v, s| {
            let y = tp.add_tiled(v[0], v[1])?;
            proj(tp, y, s)
        })),
        ("relu", vec![vec![3, 4]], Box::new(move |tp, v, s| {
            let y = tp.relu(v[0]);
            proj(tp, y, s)
        })),
        ("gelu", vec![vec![3, 4]], Box::new(move |tp, v, s| {
            let y = tp.gelu(v[0]);
            proj(tp, y, s)
        })),
        ("sigmoid", vec![vec![3, 4]], Box::new(move |tp, v, s| {
            let y = tp.sigmoid(v[0]);
            proj(tp, y, s)
        })),
        ("softmax", vec![vec![3, 5]], Box::new(move |tp, v, s| {
            let y = tp.softmax(v[0]);
            proj(tp, y, s)
        })),
        ("layer_norm", vec![vec![4, 5], vec![5], vec![5]], Box::new(move |tp, v, s| {
            let y = tp.layer_norm(v[0], v[1], v[2], 1e-5)?;
            proj(tp, y, s)
        })),
        ("batch_norm_train", vec![vec![3, 2, 4], vec![2], vec![2]], Box::new(move |tp, v, s| {
            let (y, _) = tp.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            proj(tp, y, s)
        })),
        ("batch_norm_eval", vec![vec![3, 2, 4], vec![2], vec![2]], Box::new(move |tp, v, s| {
            let y = tp.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.7, 1.3], 1e-5)?;
            proj(tp, y, s)
        })),
        ("conv3x3", vec![vec![2, 2, 3, 4], vec![3, 2, 3, 3], vec![3]], Box::new(move |tp, v, s| {
            let y = tp.conv3x3(v[0], v[1], v[2])?;
            proj(tp, y, s)
        })),
        ("global_avg_pool", vec![vec![2, 3, 2, 2]], Box::new(move |tp, v, s| {
            let y = tp.global_avg_pool(v[0])?;
            proj(tp, y, s)
        })),
        ("attention", vec![vec![5, 4], vec![5, 4], vec![5, 4]], Box::new(move |tp, v, s| {
            let y = tp.attention(v[0], v[1], v[2], &[2, 3], 2)?;
            proj(tp, y, s)
        })),
        ("gather/index_add/gate", vec![vec![4, 3], vec![2, 3], vec![2]], Box::new(move |tp, v, s| {
            let g = tp.gather_rows(v[0], &[3, 1])?;
            let a = tp.index_add(v[0], v[1], &[0, 2])?;
            let y = tp.gate_rows(a, v[2], &[2, 1])?;
            let p1 = proj(tp, y, s)?;
            let p2 = proj(tp, g, s + 1)?;
            tp.add(p1, p2)
        })),
        ("concat/mean_groups/reshape", vec![vec![4, 2], vec![4, 3]], Box::new(move |tp, v, s| {
            let c = tp.concat_cols(&[v[0], v[1]])?;
            let r = tp.concat_rows(&[c, c])?;
            let m = tp.mean_groups(r, 2)?;
            let y = tp.reshape(m, vec![5, 2])?;
            proj(tp, y, s)
        })),
        ("sum", vec![vec![3, 3]], Box::new(move |tp, v, _| Ok(tp.sum(v[0])))),
        ("cross_entropy", vec![vec![4, 2]], Box::new(move |tp, v, _| tp.cross_entropy(v[0], &[0, 1, 1, 0]))),
        ("mse", vec![vec![3, 3], vec![3, 3]], Box::new(move |tp, v, _| tp.mse(v[0], v[1]))),
    ]
}

fn toy_config(coupling: bool) -> ModelConfig {
    ModelConfig {
        mme: MmeConfig { image_size: 8, patch_size: 4, embed_dim: 8, record_fields: 3 },
        st: StConfig {
            blocks: 2,
            heads: 2,
            embed_dim: 8,
            local_dim: 4,
            selection_rate: 0.5,
            gradient_coupling: coupling,
            enabled: true,
            mlp_ratio: 2,
            selector_hidden: 4,
        },
        record_reconstruction: true,
    }
}

fn toy_input(rng: &mut ChaCha8Rng, batch: usize) -> ModelInput<f64> {
    let img = |rng: &mut ChaCha8Rng, c: usize| {
        Tensor::new([c, 8, 8], (0..c * 64).map(|_| rng.gen::<f64>()).collect()).unwrap()
    };
    let f: Vec<_> = (0..batch).map(|_| img(rng, 3)).collect();
    let o: Vec<_> = (0..batch).map(|_| img(rng, 1)).collect();
    let r: Vec<Vec<f64>> = (0..batch).map(|_| vec![rng.gen_range(0.3..0.9), 1.0, rng.gen_range(0.2..1.0)]).collect();
    ModelInput::from_images(&f, &o, Some(&r), 4).unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut bad = Vec::new();
    let mut checked = 0;
    for (name, shapes, f) in primitive_cases() {
        for trial in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let inputs: Vec<_> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
            let report = check_gradients(&inputs, Tolerance::PRIMITIVE, |tp, v| f(tp, v, trial)).unwrap();
            checked += report.checked;
            if !report.passed() {
                bad.push(name);
                break;
            }
        }
    }

    // The surrogate selector gradient has no finite-difference counterpart,
    // so the end-to-end check runs with coupling off.
    let mut e2e = GradCheckReport::default();
    for seed in 0..2 {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
        let (model, store) = Msvit::init::<f64, _>(&toy_config(false), &mut rng).unwrap();
        let input = toy_input(&mut rng, 3);
        let picks: Vec<(ParamId, usize)> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .flat_map(|(id, p)| [(id, 0), (id, p.value.len() / 2), (id, p.value.len() - 1)])
            .collect();
        let r = check_param_gradients(&store, &picks, Tolerance::END_TO_END, |tape, store| {
            let out = model.forward(tape, store, &input, Mode::Train)?;
            Ok(total_loss(tape, &out.head, &[0, 1, 1], &[1, 0, 0], input.records.as_ref(), 0.3)?.var)
        })
        .unwrap();
        e2e.checked += r.checked;
        e2e.mismatches.extend(r.mismatches);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = bad.is_empty() && e2e.passed() && secs < 120.0;
    (
        pass,
        format!(
            "{checked} primitive coordinates (failing: {bad:?}); {} end-to-end spot checks, {} mismatches; {secs:.1}s",
            e2e.checked,
            e2e.mismatches.len()
        ),
    )
}

// ---------------------------------------------------------------- 2

const P: usize = 4;

struct BlockSetup {
    cfg: StConfig,
    layout: TokenLayout,
    store: ParamStore<f64>,
    block: StBlock,
    fundus: Tensor<f64>,
    oct: Tensor<f64>,
    z: Tensor<f64>,
    batch: usize,
}

/// 8×8 images in 4px patches, `t` table tokens, D = 8.
fn block_setup(seed: u64, batch: usize, t: usize, rate: f64, coupling: bool) -> BlockSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = StConfig {
        blocks: 3,
        heads: 2,
        embed_dim: 8,
        local_dim: 4,
        selection_rate: rate,
        gradient_coupling: coupling,
        enabled: true,
        mlp_ratio: 2,
        selector_hidden: 6,
    };
    let layout = TokenLayout::new(2, t);
    let mut store = ParamStore::new();
    let block = StBlock::new(&cfg, &mut store, "b", &mut rng).unwrap();
    for (_, p) in store.iter_mut() {
        if p.trainable && (p.name.ends_with(".b") || p.name.ends_with("beta")) {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
        if p.name.ends_with("gamma") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.7..1.3));
        }
    }
    let n = layout.patches_per_image();
    let mut uniform = |shape: [usize; 2]| {
        Tensor::new(shape, (0..shape[0] * shape[1]).map(|_| rng.gen::<f64>()).collect()).unwrap()
    };
    let fundus = uniform([batch * n, 3 * P * P]);
    let oct = uniform([batch * n, P * P]);
    let z = Tensor::randn([batch * layout.len(), 8], 1.0, &mut rng);
    BlockSetup { cfg, layout, store, block, fundus, oct, z, batch }
}

impl BlockSetup {
    fn run(&self) -> (Tensor<f64>, Vec<Vec<usize>>) {
        let mut tape = Tape::new();
        let z = tape.constant(self.z.clone());
        let patches = PatchSource { fundus: &self.fundus, oct: &self.oct, patch: P };
        let out = self.block.forward(&mut tape, &self.store, &self.cfg, z, &self.layout, &patches, Mode::Train).unwrap();
        (tape.value(out.z).clone(), out.selected)
    }
}

fn val(store: &ParamStore<f64>, id: ParamId) -> Vec<f64> {
    store.get(id).value.data().to_vec()
}

fn ref_linear(x: &[f64], din: usize, store: &ParamStore<f64>, lin: &Linear) -> Vec<f64> {
    let (w, b) = (val(store, lin.w), val(store, lin.b));
    let dout = b.len();
    x.chunks(din)
        .flat_map(|row| {
            (0..dout).map(|j| b[j] + (0..din).map(|i| row[i] * w[i * dout + j]).sum::<f64>()).collect::<Vec<_>>()
        })
        .collect()
}

fn ref_mlp(x: &[f64], din: usize, store: &ParamStore<f64>, mlp: &Mlp2) -> Vec<f64> {
    let h = ref_linear(x, din, store, &mlp.fc1);
    let hid = val(store, mlp.fc1.b).len();
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    let h: Vec<f64> = match mlp.act {
        Activation::Relu => h.iter().map(|&v| v.max(0.0)).collect(),
        Activation::Gelu => h.iter().map(|&v| gelu(v)).collect(),
    };
    ref_linear(&h, hid, store, &mlp.fc2)
}

fn ref_layer_norm(x: &[f64], d: usize, store: &ParamStore<f64>, ln: &LayerNorm) -> Vec<f64> {
    let (g, b) = (val(store, ln.gamma), val(store, ln.beta));
    x.chunks(d)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let s = (var + 1e-5).sqrt();
            (0..d).map(|j| (row[j] - mean) / s * g[j] + b[j]).collect::<Vec<_>>()
        })
        .collect()
}

/// Standard multi-head attention over consecutive groups of `n` rows.
fn ref_mha(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; q.len()];
    for g in 0..q.len() / (n * d) {
        for h in 0..heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dh).map(|c| q[(g * n + i) * d + h * dh + c] * k[(g * n + j) * d + h * dh + c]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    out[(g * n + i) * d + h * dh + c] = (0..n).map(|j| e[j] / z * v[(g * n + j) * d + h * dh + c]).sum::<f64>();
                }
            }
        }
    }
    out
}

/// conv3x3 with zero padding, batch-statistic norm, ReLU, spatial mean.
fn ref_cnn(patches: &[Vec<f64>], c: usize, store: &ParamStore<f64>, cnn: &LocalCnn) -> Vec<Vec<f64>> {
    let (w, b) = (val(store, cnn.conv.w), val(store, cnn.conv.b));
    let cout = b.len();
    let conv: Vec<Vec<f64>> = patches
        .iter()
        .map(|x| {
            let mut y = vec![0.0; cout * P * P];
            for o in 0..cout {
                for r in 0..P {
                    for col in 0..P {
                        let mut acc = b[o];
                        for ci in 0..c {
                            for dr in 0..3 {
                                for dc in 0..3 {
                                    let (rr, cc) = (r as isize + dr as isize - 1, col as isize + dc as isize - 1);
                                    if rr >= 0 && cc >= 0 && (rr as usize) < P && (cc as usize) < P {
                                        acc += w[((o * c + ci) * 3 + dr) * 3 + dc] * x[(ci * P + rr as usize) * P + cc as usize];
                                    }
                                }
                            }
                        }
                        y[(o * P + r) * P + col] = acc;
                    }
                }
            }
            y
        })
        .collect();
    let (g, beta) = (val(store, cnn.bn.gamma), val(store, cnn.bn.beta));
    let cnt = (patches.len() * P * P) as f64;
    let mut out = vec![vec![0.0; cout]; patches.len()];
    for o in 0..cout {
        let vals = || conv.iter().flat_map(|y| y[o * P * P..(o + 1) * P * P].iter().copied());
        let mean = vals().sum::<f64>() / cnt;
        let var = vals().map(|v| (v - mean).powi(2)).sum::<f64>() / cnt;
        for (n, y) in conv.iter().enumerate() {
            let s: f64 = y[o * P * P..(o + 1) * P * P]
                .iter()
                .map(|&v| ((v - mean) / (var + 1e-5).sqrt() * g[o] + beta[o]).max(0.0))
                .sum();
            out[n][o] = s / (P * P) as f64;
        }
    }
    out
}

/// Pre-norm dense block: every token attends to every token of its sample,
/// local features of every image patch feed the fusion MLP.
fn reference_block(s: &BlockSetup) -> Vec<f64> {
    let (d, l, n) = (8, s.layout.len(), s.layout.patches_per_image());
    let blk = &s.block;
    let z = s.z.data();
    let u = ref_layer_norm(z, d, &s.store, &blk.ln1);
    let q = ref_linear(&u, d, &s.store, &blk.q);
    let k = ref_linear(&u, d, &s.store, &blk.k);
    let v = ref_linear(&u, d, &s.store, &blk.v);
    let a = ref_mha(&q, &k, &v, l, d, s.cfg.heads);
    let o = ref_linear(&a, d, &s.store, &blk.proj);
    let z1: Vec<f64> = z.iter().zip(&o).map(|(a, b)| a + b).collect();

    let br = blk.branch.as_ref().unwrap();
    let rows = |t: &Tensor<f64>| t.data().chunks(t.cols()).map(|r| r.to_vec()).collect::<Vec<_>>();
    let lf = ref_cnn(&rows(&s.fundus), 3, &s.store, &br.cnn_fundus);
    let lo = ref_cnn(&rows(&s.oct), 1, &s.store, &br.cnn_oct);
    let dl = s.cfg.local_dim;
    let mut cat = Vec::new();
    for b in 0..s.batch {
        for i in 0..l {
            cat.extend_from_slice(&z1[(b * l + i) * d..(b * l + i + 1) * d]);
            if i < n {
                cat.extend_from_slice(&lf[b * n + i]);
            } else if i < 2 * n {
                cat.extend_from_slice(&lo[b * n + i - n]);
            } else {
                cat.extend(std::iter::repeat(0.0).take(dl));
            }
        }
    }
    let f = ref_mlp(&cat, d + dl, &s.store, &br.fuse);
    let z2: Vec<f64> = z1.iter().zip(&f).map(|(a, b)| a + b).collect();
    let u2 = ref_layer_norm(&z2, d, &s.store, &blk.ln2);
    let f2 = ref_mlp(&u2, d, &s.store, &blk.ffn);
    z2.iter().zip(&f2).map(|(a, b)| a + b).collect()
}

fn dense_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut all_selected = true;
    for (seed, batch, t) in [(5, 2, 2), (6, 1, 0), (7, 3, 3), (8, 2, 1)] {
        let s = block_setup(seed, batch, t, 1.0, false);
        let (out, selected) = s.run();
        all_selected &= selected.iter().all(|sel| *sel == (0..8).collect::<Vec<_>>());
        for (a, b) in out.data().iter().zip(reference_block(&s)) {
            worst = worst.max((a - b).abs());
        }
    }
    (worst < 1e-6 && all_selected, format!("max |ST − dense| = {worst:.2e}, all tokens selected: {all_selected}"))
}

// ---------------------------------------------------------------- 3

/// Stable sort by descending value (ties keep index order), first k, ascending.
fn sort_oracle(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    let mut top = idx[..k].to_vec();
    top.sort_unstable();
    top
}

fn selection_semantics() -> Outcome {
    // top-k against the sort oracle over every vector on a 3-value alphabet
    let mut topk_cases = 0usize;
    let mut topk_ok = true;
    for n in 1..=8usize {
        for code in 0..3usize.pow(n as u32) {
            let vals: Vec<f64> = (0..n).map(|i| ((code / 3usize.pow(i as u32)) % 3) as f64).collect();
            for k in 1..=n {
                topk_cases += 1;
                topk_ok &= top_k_indices(&vals, k).unwrap() == sort_oracle(&vals, k);
            }
        }
    }

    // k per block through a whole stack
    let mut count_ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..40 {
        let rate = if trial % 10 == 0 { 1.0 } else { rng.gen_range(0.01..=1.0) };
        let grid = rng.gen_range(1..=3);
        let t = rng.gen_range(0..3);
        let batch = rng.gen_range(1..4);
        let cfg = StConfig { blocks: 3, heads: 2, embed_dim: 8, local_dim: 4, selection_rate: rate, selector_hidden: 4, ..StConfig::default() };
        let mut store = ParamStore::<f64>::new();
        let stack = StStack::new(&cfg, &mut store, &mut rng).unwrap();
        let layout = TokenLayout::new(grid, t);
        let n = layout.patches_per_image();
        let fundus = rand_t(&mut rng, &[batch * n, 3 * P * P]);
        let oct = rand_t(&mut rng, &[batch * n, P * P]);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::randn([batch * layout.len(), 8], 1.0, &mut rng));
        let patches = PatchSource { fundus: &fundus, oct: &oct, patch: P };
        let out = stack.forward(&mut tape, &store, z, &layout, &patches, Mode::Train).unwrap();
        let n_img = 2 * n;
        let k = ((rate * n_img as f64).round() as usize).max(1);
        count_ok &= select_count(n_img, rate) == k;
        count_ok &= out.traces.iter().all(|tr| tr.len() == 3 && tr.blocks.iter().all(|s| s.len() == k));
    }
    // toy shapes: 72 image tokens at s = 0.5
    count_ok &= select_count(72, 0.5) == 36 && select(&vec![0.5f64; 72], 0.5).unwrap().len() == 36;

    // unselected rows leave the attention sub-layer bit-identical
    let mut delta_ok = true;
    for seed in 0..10 {
        let s = block_setup(20 + seed, 3, 2, 0.5, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let selected: Vec<Vec<usize>> = (0..3)
            .map(|_| {
                let k = rng.gen_range(1..=8);
                let mut all: Vec<usize> = (0..8).collect();
                rand::seq::SliceRandom::shuffle(&mut all[..], &mut rng);
                let mut sel = all[..k].to_vec();
                sel.sort_unstable();
                sel
            })
            .collect();
        let mut tape = Tape::new();
        let z = tape.constant(s.z.clone());
        let u = s.block.ln1.forward(&mut tape, &s.store, z).unwrap();
        let p = tape.constant(Tensor::full([3 * 8, 1], 0.6));
        let z1 = s.block.selective_attention(&mut tape, &s.store, 2, z, u, &s.layout, &selected, Some(p)).unwrap();
        let (zi, zo) = (tape.value(z).data(), tape.value(z1).data());
        let l = s.layout.len();
        for (b, sel) in selected.iter().enumerate() {
            for i in 0..8 {
                if !sel.contains(&i) {
                    let r = (b * l + i) * 8..(b * l + i + 1) * 8;
                    delta_ok &= zi[r.clone()] == zo[r];
                }
            }
        }
    }
    (
        topk_ok && count_ok && delta_ok,
        format!("top-k oracle {topk_cases} cases ok={topk_ok}; k per block ok={count_ok}; unselected delta exactly zero={delta_ok}"),
    )
}

// ---------------------------------------------------------------- 4

fn loss_composition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (model, store) = Msvit::init::<f64, _>(&toy_config(true), &mut rng).unwrap();
    let input = toy_input(&mut rng, 4);
    let (ya, yc) = ([0, 1, 1, 0], [1, 1, 0, 0]);

    let run = |alpha: f64| {
        let mut s = store.clone();
        s.zero_grad();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &s, &input, Mode::Train).unwrap();
        let l = total_loss(&mut tape, &out.head, &ya, &yc, input.records.as_ref(), alpha).unwrap();
        let logits = (tape.value(out.head.logits_arms2).clone(), tape.value(out.head.logits_cfh).clone());
        let recon = tape.value(out.head.record_recon.unwrap()).clone();
        tape.backward(l.var).unwrap();
        s.accumulate_grads(&tape);
        (l, logits, recon, s)
    };

    let ce = |logits: &Tensor<f64>, y: &[usize]| {
        logits
            .data()
            .chunks(2)
            .zip(y)
            .map(|(r, &t)| {
                let m = r[0].max(r[1]);
                let lse = m + ((r[0] - m).exp() + (r[1] - m).exp()).ln();
                lse - r[t]
            })
            .sum::<f64>()
            / y.len() as f64
    };
    let (l, (la, lc), recon, _) = run(DEFAULT_ALPHA);
    let target = input.records.as_ref().unwrap().data();
    let mse = recon.data().iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / target.len() as f64;
    let exact = l.total == l.ce_arms2 + l.ce_cfh + 0.001 * l.mse_record && l.alpha == 0.001;
    let parts = (l.ce_arms2 - ce(&la, &ya)).abs() < 1e-12
        && (l.ce_cfh - ce(&lc, &yc)).abs() < 1e-12
        && (l.mse_record - mse).abs() < 1e-12
        && l.mse_record > 0.0;

    let rra = model.head.rra.as_ref().unwrap();
    let rra_ids = [rra.fc1.w, rra.fc1.b, rra.fc2.w, rra.fc2.b];
    let grads = |s: &ParamStore<f64>| rra_ids.iter().flat_map(|&id| s.get(id).grad.data().to_vec()).collect::<Vec<_>>();
    let (l0, _, _, s0) = run(0.0);
    let (_, _, _, s1) = run(DEFAULT_ALPHA);
    let vanish = grads(&s0).iter().all(|&g| g == 0.0) && l0.total == l0.ce_arms2 + l0.ce_cfh;
    let live = grads(&s1).iter().any(|&g| g != 0.0);
    (
        exact && parts && vanish && live,
        format!(
            "total {:.6} = {:.6} + {:.6} + 0.001·{:.6} exact={exact}; parts match hand oracle={parts}; RRA grads zero at alpha=0: {vanish}, nonzero at 0.001: {live}",
            l.total, l.ce_arms2, l.ce_cfh, l.mse_record
        ),
    )
}

// ---------------------------------------------------------------- 5

fn patient(id: String, labels: (usize, usize), record: RawRecord, fundus: bool, octs: usize, tag: u8) -> PatientSet {
    PatientSet {
        id,
        fundus: fundus.then(|| Image::new(3, 4, 4, vec![tag; 48]).unwrap()),
        oct: (0..octs).map(|j| Image::new(1, 4, 4, vec![tag.wrapping_add(j as u8 + 1); 16]).unwrap()).collect(),
        record,
        label_arms2: labels.0,
        label_cfh: labels.1,
    }
}

/// Brute force: same labels, has images in the slot, not itself, highest
/// cosine over `[age/100, gender, smoking]`, ties to the lowest id.
fn donor_oracle<'a>(p: &PatientSet, pool: &[&'a PatientSet], slot: Slot) -> Option<&'a PatientSet> {
    let vec = |r: &RawRecord| [(r.age / 100.0).clamp(0.0, 1.0), r.gender as f64, r.smoking as f64];
    let cos = |a: [f64; 3], b: [f64; 3]| {
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            None
        } else {
            Some(dot / (na * nb))
        }
    };
    let mut cands: Vec<(f64, &'a PatientSet)> = pool
        .iter()
        .filter(|c| c.id != p.id && c.labels() == p.labels())
        .filter(|c| match slot {
            Slot::Fundus => c.fundus.is_some(),
            Slot::Oct => !c.oct.is_empty(),
        })
        .filter_map(|c| cos(vec(&p.record), vec(&c.record)).map(|s| (s, *c)))
        .collect();
    cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.id.cmp(&b.1.id)));
    cands.first().map(|c| c.1)
}

fn tsia_statistics() -> Outcome {
    // 10,000 resolutions of a patient with its own OCT
    let rec = RawRecord { age: 70.0, gender: 1, smoking: 0 };
    let own = patient("own".into(), (1, 0), rec, true, 2, 10);
    let pool_members = [patient("d".into(), (1, 0), rec, true, 1, 50)];
    let pool = DonorPool::new(pool_members.iter().collect());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let real = (0..n).filter(|_| tsia_resolve(&own, &pool, 4, &mut rng).oct_src == Provenance::Own).count();
    let frac = real as f64 / n as f64;
    // and a patient that borrows
    let borrower = patient("b".into(), (1, 0), rec, true, 0, 20);
    let borrowed = (0..n)
        .filter(|_| matches!(tsia_resolve(&borrower, &pool, 4, &mut rng).oct_src, Provenance::Borrowed(_)))
        .count() as f64
        / n as f64;
    let frac_ok = (frac - 0.5).abs() <= 0.02 && (borrowed - 0.5).abs() <= 0.02;

    // donor choice against brute force on small pools
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut donor_cases = 0;
    let mut donor_ok = true;
    for _ in 0..3000 {
        let size = rng.gen_range(1..=10);
        let members: Vec<PatientSet> = (0..size)
            .map(|i| {
                let rec = RawRecord {
                    age: [0.0, 55.0, 60.0, 70.0, 85.0][rng.gen_range(0..5)],
                    gender: rng.gen_range(0..2),
                    smoking: rng.gen_range(0..2),
                };
                let labels = (rng.gen_range(0..2), rng.gen_range(0..2));
                patient(format!("P{:02}", (i * 7) % 10), labels, rec, rng.gen_bool(0.7), rng.gen_range(0..3), i as u8)
            })
            .collect();
        let ids: BTreeSet<&str> = members.iter().map(|p| p.id.as_str()).collect();
        if ids.len() != members.len() {
            continue;
        }
        let refs: Vec<&PatientSet> = members.iter().collect();
        let pool = DonorPool::new(refs.clone());
        for p in &members {
            for slot in [Slot::Fundus, Slot::Oct] {
                donor_cases += 1;
                let got = pool.find_donor(p, slot).map(|d| d.id.clone());
                let want = donor_oracle(p, &refs, slot).map(|d| d.id.clone());
                donor_ok &= got == want;
            }
        }
    }

    // training never consults validation or test patients
    let syn = synthesize(&SynthConfig { sets: 60, image_size: 16, oct_fraction: 0.3, ..SynthConfig::default() }, 2).unwrap();
    let ds = Dataset::new(syn.patients).unwrap();
    let arch = ModelConfig {
        mme: MmeConfig { image_size: 16, patch_size: 4, embed_dim: 8, record_fields: 3 },
        st: StConfig { blocks: 2, heads: 2, embed_dim: 8, local_dim: 4, selector_hidden: 4, ..StConfig::default() },
        record_reconstruction: true,
    };
    let cfg = TrainConfig { epochs: 2, batch_size: 8, seed: 2, ..TrainConfig::default() };
    let mut leak_ok = true;
    let mut consulted = 0;
    for (f, split) in fold_splits(ds.len(), 5, 2).unwrap().iter().enumerate() {
        let r = run_fold(&ds, &arch, &cfg, f, split, &mut |_| {}).unwrap();
        let train: BTreeSet<&str> = split.train.iter().map(|&i| ds.patients[i].id.as_str()).collect();
        consulted += r.consulted.len();
        leak_ok &= !r.consulted.is_empty() && r.consulted.iter().all(|id| train.contains(id.as_str()));
    }
    (
        frac_ok && donor_ok && leak_ok,
        format!(
            "real OCT fraction {frac:.4}, borrowed fraction {borrowed:.4}; donor oracle {donor_cases} cases ok={donor_ok}; {consulted} consultations, all training patients={leak_ok}"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn metrics_oracle() -> Outcome {
    // TP=3, FP=1, FN=2, TN=4
    let preds = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
    let labels = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0];
    let m = compute_metrics(&preds, &labels).unwrap();
    let want = [0.7, 0.75, 0.6, 0.8, 0.6667];
    let example = m.values().iter().zip(want).all(|(a, b)| (a - b).abs() < 5e-5);

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut random_ok = true;
    for _ in 0..1000 {
        let n = rng.gen_range(1..60);
        let p: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let count = |a: usize, b: usize| p.iter().zip(&y).filter(|&(&x, &t)| x == a && t == b).count() as f64;
        let (tp, fp, fneg, tn) = (count(1, 1), count(1, 0), count(0, 1), count(0, 0));
        let ratio = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let prec = ratio(tp, tp + fp);
        let rec = ratio(tp, tp + fneg);
        let want = [ratio(tp + tn, n as f64), prec, rec, ratio(tn, tn + fp), ratio(2.0 * prec * rec, prec + rec)];
        let got = compute_metrics(&p, &y).unwrap().values();
        random_ok &= got.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12);
    }
    (
        example && random_ok,
        format!("example {:?} ok={example}; 1000 random recounts ok={random_ok}", m.values().map(|v| (v * 1e4).round() / 1e4)),
    )
}

// ---------------------------------------------------------------- 7, 8, 9

#[derive(Default)]
struct ToyRuns {
    /// Per seed: dataset, its annotations and the default-config fold-0 run.
    full: Vec<(u64, Dataset, Vec<Annotation>, FoldResult)>,
}

fn toy_data(seed: u64) -> (Dataset, Vec<Annotation>) {
    let syn = synthesize(&SynthConfig { sets: TOY_SETS, ..SynthConfig::default() }, seed).unwrap();
    (Dataset::new(syn.patients).unwrap(), syn.annotations)
}

fn toy_train(seed: u64) -> TrainConfig {
    TrainConfig { epochs: TOY_EPOCHS, seed, ..TrainConfig::default() }
}

fn acc(r: &MetricsReport) -> String {
    format!("{:.4}/{:.4}", r.arms2.accuracy, r.cfh.accuracy)
}

fn synthetic_end_to_end(toy: &mut ToyRuns) -> Outcome {
    let start = Instant::now();
    let (ds, notes) = toy_data(0);
    let cv = cross_validate(&ds, &ModelConfig::default(), &toy_train(0), None, &mut |_| {}).unwrap();
    let per_fold: Vec<String> = cv.folds.iter().map(|f| acc(&f.report)).collect();
    let pass = cv.mean.arms2.accuracy >= 0.80 && cv.mean.cfh.accuracy >= 0.80;
    let detail = format!(
        "mean test accuracy ARMS2 {:.4}, CFH {:.4} (folds {per_fold:?}); {:.0}s",
        cv.mean.arms2.accuracy,
        cv.mean.cfh.accuracy,
        start.elapsed().as_secs_f64()
    );
    let fold0 = cv.folds.into_iter().next().unwrap();
    toy.full.push((0, ds, notes, fold0));
    (pass, detail)
}

fn ensure_full_runs(toy: &mut ToyRuns) {
    for seed in SEEDS {
        if toy.full.iter().any(|r| r.0 == seed) {
            continue;
        }
        let (ds, notes) = toy_data(seed);
        let split = &fold_splits(ds.len(), 5, seed).unwrap()[0];
        let r = run_fold(&ds, &ModelConfig::default(), &toy_train(seed), 0, split, &mut |_| {}).unwrap();
        toy.full.push((seed, ds, notes, r));
    }
    toy.full.sort_by_key(|r| r.0);
}

fn directional_ablations(toy: &mut ToyRuns) -> Outcome {
    ensure_full_runs(toy);
    let mut tsia_wins = 0;
    let mut record_wins = 0;
    let mut lines = Vec::new();
    for (seed, ds, _, full) in &toy.full {
        let split = &full.split;
        let variant = |edit: &dyn Fn(&mut TrainConfig)| {
            let mut cfg = toy_train(*seed);
            edit(&mut cfg);
            run_fold(ds, &ModelConfig::default(), &cfg, 0, split, &mut |_| {}).unwrap().report
        };
        let no_tsia = variant(&|c| c.tsia = false);
        let no_record = variant(&|c| c.record_info = false);
        let with = full.report.mean_accuracy();
        tsia_wins += usize::from(with >= no_tsia.mean_accuracy());
        record_wins += usize::from(with >= no_record.mean_accuracy());
        lines.push(format!(
            "seed {seed}: full {} vs without TSIA {} vs without record {}",
            acc(&full.report),
            acc(&no_tsia),
            acc(&no_record)
        ));
    }
    let majority = SEEDS.len() / 2 + 1;
    (
        tsia_wins >= majority && record_wins >= majority,
        format!(
            "TSIA ≥ without on {tsia_wins}/{n} seeds, record+reconstruction ≥ without on {record_wins}/{n} seeds; {}",
            lines.join("; "),
            n = SEEDS.len()
        ),
    )
}

fn region_means(maps: &[FrequencyMap], ids: &[&str], notes: &[Annotation], mme: &MmeConfig) -> (f64, f64) {
    let (mut blob, mut nb, mut disc, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for (m, id) in maps.iter().zip(ids) {
        for a in notes.iter().filter(|a| a.id == *id) {
            for (r, c) in a.cells(mme.patch_size, mme.grid()) {
                let f = m.at(Modality::Fundus, r, c);
                match a.kind {
                    Feature::Blob => (blob, nb) = (blob + f, nb + 1),
                    Feature::Disc => (disc, nd) = (disc + f, nd + 1),
                }
            }
        }
    }
    (blob / nb.max(1) as f64, disc / nd.max(1) as f64)
}

fn visualization(toy: &mut ToyRuns) -> Outcome {
    ensure_full_runs(toy);
    let mme = MmeConfig::default();
    let blocks = StConfig::default().blocks as f64;
    let mut range_ok = true;
    let mut wins = 0;
    let mut lines = Vec::new();
    let mut stable = true;
    for (k, (seed, ds, notes, full)) in toy.full.iter().enumerate() {
        let idx: Vec<usize> = full.split.test.iter().copied().filter(|&i| ds.patients[i].fundus.is_some()).collect();
        let samples = eval_samples(ds, &idx, Default::default());
        let maps = sample_maps(&full.model, &full.store, &samples, 16).unwrap();
        range_ok &= maps.iter().all(|m| m.table.iter().chain(&m.fundus).chain(&m.oct).all(|&f| (0.0..=blocks).contains(&f)));
        let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
        let (blob, disc) = region_means(&maps, &ids, notes, &mme);
        wins += usize::from(blob > disc);
        lines.push(format!("seed {seed}: blob {blob:.3} disc {disc:.3}"));

        if k == 0 {
            // same model and samples → same maps → same bytes
            let again = sample_maps(&full.model, &full.store, &samples, 16).unwrap();
            stable &= again == maps;
            let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
            for m in maps.iter().take(5) {
                let pa = write_maps(m, "x", a.path(), 8).unwrap();
                let pb = write_maps(m, "x", b.path(), 8).unwrap();
                for (x, y) in pa.iter().zip(&pb) {
                    stable &= std::fs::read(x).unwrap() == std::fs::read(y).unwrap();
                }
                let back = Image::read(&pa[0]).unwrap();
                stable &= back == render(m, Modality::Fundus, 8).unwrap();
                stable &= back.get(0, 0, 0) == quantize(m.at(Modality::Fundus, 0, 0), m.blocks);
            }
        }
    }
    let majority = SEEDS.len() / 2 + 1;
    (
        range_ok && stable && wins >= majority,
        format!(
            "f in [0, M]: {range_ok}; PGM byte-stable: {stable}; blob > disc on {wins}/{} seeds ({})",
            SEEDS.len(),
            lines.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- 10

const TINY: &str = "\
image_size = 16
patch_size = 4
embed_dim = 8
blocks = 2
heads = 2
local_dim = 4
selector_hidden = 4
sets = 40
oct_fraction = 0.5
epochs = 3
batch_size = 8
";

fn msvit(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_msvit")).args(args).output().expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "config.txt")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root: PathBuf = dir.path().into();
    let config = root.join("tiny.conf");
    std::fs::write(&config, TINY).unwrap();
    let (config, data) = (config.display().to_string(), root.join("data"));
    msvit(&["generate", "--config", &config, "--seed", "9", "--out", data.to_str().unwrap()]);
    let manifest = data.join("manifest.tsv").display().to_string();
    let runs: Vec<Vec<(String, Vec<u8>)>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = root.join(name).display().to_string();
            msvit(&["train", "--config", &config, "--data", &manifest, "--seed", "9", "--out", &out]);
            artifacts(Path::new(&out))
        })
        .collect();
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    let ckpts = names.iter().filter(|n| n.ends_with(".ckpt")).count();
    let same = runs[0] == runs[1];
    (same && ckpts == 5, format!("{} files compared ({ckpts} checkpoints), bit-identical: {same}", names.len()))
}
