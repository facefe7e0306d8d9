#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use sta_unet::data::{synthesize, Dataset, SynthConfig};
use sta_unet::eval::LabelMap;
use sta_unet::gradcheck::{check_gradients, GradCheckOptions};
use sta_unet::model::ModelConfig;
use sta_unet::nn::{self, ConvOptions};
use sta_unet::sta::{self, StaBlockVars, StaConfig, StaGeometry, SuperTokenGrid, TokenMatrix};
use sta_unet::train::{self, TrainConfig};
use sta_unet::{Graph, Result, Tensor, Var};

pub type TestRng = Xoshiro256StarStar;

pub fn rng(seed: u64) -> TestRng {
    TestRng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Distinct values spaced far beyond the finite-difference step.
fn separated(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.013 - 0.4).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).unwrap()
}

/// Values bounded away from zero.
fn off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, 1.0).map(|v| v.signum() * (0.05 + v.abs()))
}

fn labels(rng: &mut impl Rng, n: usize, h: usize, w: usize, k: usize) -> LabelMap {
    LabelMap::new(n, h, w, (0..n * h * w).map(|_| rng.gen_range(0..k) as u8).collect()).unwrap()
}

/// Worst relative error of one operation over all instances.
#[derive(Debug, Clone)]
pub struct GradOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

type Case = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

fn run_case(name: &'static str, instances: usize, mut make: impl FnMut(&mut TestRng) -> Case) -> GradOutcome {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut r = rng(0x5eed ^ (i as u64) << 8 ^ name.len() as u64);
        let (inputs, f) = make(&mut r);
        let opts = GradCheckOptions {
            seed: i as u64,
            ..Default::default()
        };
        let rep = check_gradients(&inputs, f, &opts).unwrap_or_else(|e| panic!("{name}: {e}"));
        worst = worst.max(rep.max_rel_error);
    }
    GradOutcome {
        name,
        instances,
        worst,
    }
}

fn tokens(g: &mut Graph<f64>, x: Var, h: usize, w: usize) -> TokenMatrix {
    let _ = g;
    TokenMatrix { var: x, height: h, width: w }
}

fn grid(var: Var, geo: &StaGeometry) -> SuperTokenGrid {
    SuperTokenGrid {
        var,
        grid_h: geo.grid_h,
        grid_w: geo.grid_w,
        unassigned: Vec::new(),
    }
}

/// Random token geometry: extent, cell size.
fn random_geometry(r: &mut impl Rng) -> Arc<StaGeometry> {
    let (ch, cw) = (r.gen_range(1..=2), r.gen_range(1..=2));
    let (gh, gw) = (r.gen_range(1..=4), r.gen_range(1..=4));
    Arc::new(StaGeometry::new(gh * ch, gw * cw, ch, cw).unwrap())
}

/// Finite-difference checks for every layer and attention operation.
pub fn gradient_suite(instances: usize) -> Vec<GradOutcome> {
    let mut out = Vec::new();

    out.push(run_case("conv2d", instances, |r| {
        let groups = *[1, 2].choose(r).unwrap();
        let cin = groups * r.gen_range(1..=2);
        let cout = groups * r.gen_range(1..=2);
        let k = *[1, 3].choose(r).unwrap();
        let opts = ConvOptions {
            stride: r.gen_range(1..=2),
            padding: r.gen_range(0..=1),
            groups,
        };
        let x = uniform(r, &[2, cin, 5, 4], 1.0);
        let w = uniform(r, &[cout, cin / groups, k, k], 0.5);
        let b = uniform(r, &[cout], 0.5);
        (vec![x, w, b], Box::new(move |g, v| nn::conv2d(g, v[0], v[1], Some(v[2]), opts)))
    }));

    out.push(run_case("depthwise_conv3x3", instances, |r| {
        let c = r.gen_range(1..=3);
        let x = uniform(r, &[2, c, 4, 5], 1.0);
        let w = uniform(r, &[c, 1, 3, 3], 0.5);
        let b = uniform(r, &[c], 0.5);
        (vec![x, w, b], Box::new(|g, v| nn::depthwise_conv3x3(g, v[0], v[1], Some(v[2]))))
    }));

    out.push(run_case("conv_transpose2d", instances, |r| {
        let (cin, cout) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let (k, stride, pad) = *[(2, 2, 0), (3, 1, 1), (3, 2, 1)].choose(r).unwrap();
        let x = uniform(r, &[2, cin, 3, 2], 1.0);
        let w = uniform(r, &[cin, cout, k, k], 0.5);
        let b = uniform(r, &[cout], 0.5);
        (
            vec![x, w, b],
            Box::new(move |g, v| nn::conv_transpose2d(g, v[0], v[1], Some(v[2]), stride, pad)),
        )
    }));

    for training in [true, false] {
        let name = if training { "batch_norm(train)" } else { "batch_norm(eval)" };
        out.push(run_case(name, instances, |r| {
            let c = r.gen_range(1..=3);
            let x = uniform(r, &[3, c, 2, 3], 1.0);
            let gamma = uniform(r, &[c], 1.0);
            let beta = uniform(r, &[c], 1.0);
            let mean = uniform(r, &[c], 0.5);
            let var = uniform(r, &[c], 0.5).map(|v| 0.5 + v.abs());
            (
                vec![x, gamma, beta],
                Box::new(move |g, v| {
                    nn::batch_norm(g, v[0], v[1], v[2], &mean, &var, nn::norm::BATCH_NORM_EPS, training).map(|p| p.0)
                }),
            )
        }));
    }

    out.push(run_case("layer_norm", instances, |r| {
        let c = r.gen_range(2..=4);
        let x = uniform(r, &[2, c, 3, 2], 1.0);
        let gamma = uniform(r, &[c], 1.0);
        let beta = uniform(r, &[c], 1.0);
        (
            vec![x, gamma, beta],
            Box::new(|g, v| nn::layer_norm(g, v[0], v[1], v[2], nn::norm::LAYER_NORM_EPS)),
        )
    }));

    out.push(run_case("max_pool2x2", instances, |r| {
        let x = separated(r, &[2, 2, 4, 6]);
        (vec![x], Box::new(|g, v| nn::max_pool2x2(g, v[0])))
    }));

    out.push(run_case("relu", instances, |r| {
        let x = off_zero(r, &[3, 7]);
        (vec![x], Box::new(|g, v| Ok(g.relu(v[0]))))
    }));

    out.push(run_case("softmax(channels)", instances, |r| {
        let x = uniform(r, &[2, 4, 2, 3], 2.0);
        (vec![x], Box::new(|g, v| g.softmax(v[0], 1)))
    }));

    out.push(run_case("linear", instances, |r| {
        let (fin, fout) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let x = uniform(r, &[2, 3, fin], 1.0);
        let w = uniform(r, &[fin, fout], 1.0);
        let b = uniform(r, &[fout], 1.0);
        (vec![x, w, b], Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))))
    }));

    out.push(run_case("concat", instances, |r| {
        let a = uniform(r, &[2, 1, 2, 2], 1.0);
        let b = uniform(r, &[2, 3, 2, 2], 1.0);
        (vec![a, b], Box::new(|g, v| g.concat(&[v[0], v[1]], 1)))
    }));

    // attention operations
    out.push(run_case("cpe", instances, |r| {
        let c = r.gen_range(1..=3);
        let x = uniform(r, &[2, c, 3, 4], 1.0);
        let w = uniform(r, &[c, 1, 3, 3], 0.5);
        (vec![x, w], Box::new(|g, v| sta::cpe(g, v[0], v[1])))
    }));

    out.push(run_case("init_super_tokens", instances, |r| {
        let geo = random_geometry(r);
        let c = r.gen_range(1..=3);
        let x = uniform(r, &[2, geo.num_tokens(), c], 1.0);
        let (h, w) = (geo.height, geo.width);
        (
            vec![x],
            Box::new(move |g, v| {
                let t = tokens(g, v[0], h, w);
                sta::init_super_tokens(g, &t, &geo).map(|s| s.var)
            }),
        )
    }));

    out.push(run_case("associate", instances, |r| {
        let geo = random_geometry(r);
        let c = r.gen_range(1..=3);
        let x = uniform(r, &[2, geo.num_tokens(), c], 1.5);
        let s = uniform(r, &[2, geo.num_super_tokens(), c], 1.5);
        (
            vec![x, s],
            Box::new(move |g, v| {
                let t = tokens(g, v[0], geo.height, geo.width);
                sta::associate(g, &t, &grid(v[1], &geo), &geo).map(|q| q.var)
            }),
        )
    }));

    out.push(run_case("update_super_tokens", instances, |r| {
        let geo = random_geometry(r);
        let c = r.gen_range(1..=3);
        let x = uniform(r, &[2, geo.num_tokens(), c], 1.5);
        let s = uniform(r, &[2, geo.num_super_tokens(), c], 1.5);
        (
            vec![x, s],
            Box::new(move |g, v| {
                let t = tokens(g, v[0], geo.height, geo.width);
                let init = grid(v[1], &geo);
                let q = sta::associate(g, &t, &init, &geo)?;
                sta::update_super_tokens(g, &q, &t, &init).map(|s| s.var)
            }),
        )
    }));

    out.push(run_case("multi_head_attention", instances, |r| {
        let heads = r.gen_range(1..=2);
        let c = heads * r.gen_range(1..=3);
        let m = r.gen_range(1..=5);
        let q = uniform(r, &[2, m, c], 1.0);
        let k = uniform(r, &[2, m, c], 1.0);
        let v = uniform(r, &[2, m, c], 1.0);
        (vec![q, k, v], Box::new(move |g, x| sta::multi_head_attention(g, x[0], x[1], x[2], heads)))
    }));

    out.push(run_case("super_attention", instances, |r| {
        let heads = r.gen_range(1..=2);
        let c = heads * r.gen_range(1..=2);
        let m = r.gen_range(1..=4);
        let s = uniform(r, &[1, m, c], 1.0);
        let w: Vec<Tensor<f64>> = (0..3).map(|_| uniform(r, &[c, c], 0.8)).collect();
        let mut inputs = vec![s];
        inputs.extend(w);
        (
            inputs,
            Box::new(move |g, v| {
                let s = SuperTokenGrid {
                    var: v[0],
                    grid_h: m,
                    grid_w: 1,
                    unassigned: Vec::new(),
                };
                sta::super_attention(g, &s, heads, v[1], v[2], v[3]).map(|a| a.var)
            }),
        )
    }));

    out.push(run_case("upsample_tokens", instances, |r| {
        let geo = random_geometry(r);
        let c = r.gen_range(1..=3);
        let x = uniform(r, &[2, geo.num_tokens(), c], 1.5);
        let s = uniform(r, &[2, geo.num_super_tokens(), c], 1.5);
        let a = uniform(r, &[2, geo.num_super_tokens(), c], 1.0);
        (
            vec![x, s, a],
            Box::new(move |g, v| {
                let t = tokens(g, v[0], geo.height, geo.width);
                let q = sta::associate(g, &t, &grid(v[1], &geo), &geo)?;
                sta::upsample_tokens(g, &q, &grid(v[2], &geo)).map(|u| u.var)
            }),
        )
    }));

    out.push(run_case("sta_block", instances, |r| {
        let heads = r.gen_range(1..=2);
        let c = heads * r.gen_range(1..=2);
        let (th, tw) = (r.gen_range(1..=2), r.gen_range(1..=2));
        let (gh, gw) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let mut cfg = StaConfig::new(c, (th, tw), heads);
        cfg.iterations = r.gen_range(1..=2);
        let x = uniform(r, &[2, c, gh * th, gw * tw], 1.0);
        let mut inputs = vec![
            x,
            uniform(r, &[c, 1, 3, 3], 0.4),
            uniform(r, &[c], 1.0).map(|v| 1.0 + 0.3 * v),
            uniform(r, &[c], 0.3),
        ];
        inputs.extend((0..3).map(|_| uniform(r, &[c, c], 0.8)));
        (
            inputs,
            Box::new(move |g, v| {
                let p = StaBlockVars {
                    cpe_kernel: v[1],
                    ln_gamma: v[2],
                    ln_beta: v[3],
                    w_q: v[4],
                    w_k: v[5],
                    w_v: v[6],
                };
                sta::sta_block(g, v[0], &p, &cfg)
            }),
        )
    }));

    for (name, w_ce, w_dice) in [("cross_entropy", 1.0, 0.0), ("dice_loss", 0.0, 1.0), ("0.4*ce+0.6*dice", 0.4, 0.6)] {
        out.push(run_case(name, instances, |r| {
            let k = r.gen_range(2..=4);
            let logits = uniform(r, &[2, k, 3, 2], 2.0);
            let target = labels(r, 2, 3, 2, k);
            (
                vec![logits],
                Box::new(move |g, v| {
                    let p = g.softmax(v[0], 1)?;
                    train::composite_loss(g, p, &target, w_ce, w_dice, 1e-5).map(|l| l.total)
                }),
            )
        }));
    }
    out
}

/// Dense reference of association / update / upsampling for grids no larger
/// than 3×3, where every token sees every super token.
pub struct DenseSta {
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub up: DMatrix<f64>,
}

pub fn dense_sta(x: &DMatrix<f64>, s0: &DMatrix<f64>, a: &DMatrix<f64>) -> DenseSta {
    let c = x.ncols() as f64;
    let mut q = (x * s0.transpose()) / c.sqrt();
    for mut row in q.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let total = row.sum();
        row /= total;
    }
    let mut qbar = q.clone();
    for mut col in qbar.column_iter_mut() {
        let total = col.sum();
        col /= total;
    }
    let s = qbar.transpose() * x;
    let up = &q * a;
    DenseSta { q, s, up }
}

/// Largest deviation between sparse ops and the dense reference over
/// `cases` random geometries with grids up to 3×3.
pub fn sparse_dense_max_diff(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (gh, gw) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let (ch, cw) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let c = r.gen_range(1..=6);
        let geo = Arc::new(StaGeometry::new(gh * ch, gw * cw, ch, cw).unwrap());
        let (n, m) = (geo.num_tokens(), geo.num_super_tokens());
        let xt = uniform(&mut r, &[1, n, c], 2.0);
        let st = uniform(&mut r, &[1, m, c], 2.0);
        let at = uniform(&mut r, &[1, m, c], 2.0);

        let mut g = Graph::new();
        let x = TokenMatrix {
            var: g.constant(xt.clone()),
            height: geo.height,
            width: geo.width,
        };
        let s0 = grid(g.constant(st.clone()), &geo);
        let a = grid(g.constant(at.clone()), &geo);
        let q = sta::associate(&mut g, &x, &s0, &geo).unwrap();
        let s = sta::update_super_tokens(&mut g, &q, &x, &s0).unwrap();
        let up = sta::upsample_tokens(&mut g, &q, &a).unwrap();

        let xd = DMatrix::from_row_slice(n, c, xt.data());
        let sd = DMatrix::from_row_slice(m, c, st.data());
        let ad = DMatrix::from_row_slice(m, c, at.data());
        let dense = dense_sta(&xd, &sd, &ad);

        let qs = g.value(q.var).data();
        for i in 0..n {
            let mut row = vec![0.0; m];
            for (t, j) in geo.neighbors(i).enumerate() {
                row[j] += qs[i * sta::WINDOW + t];
            }
            for (j, v) in row.iter().enumerate() {
                worst = worst.max((v - dense.q[(i, j)]).abs());
            }
        }
        let sv = DMatrix::from_row_slice(m, c, g.value(s.var).data());
        let uv = DMatrix::from_row_slice(n, c, g.value(up.var).data());
        worst = worst.max((sv - &dense.s).amax()).max((uv - &dense.up).amax());
    }
    worst
}

/// Desk-scale experiment: data, model and training configuration.
pub struct Desk {
    pub train: Dataset,
    pub test: Dataset,
    pub probe: Dataset,
    pub model: ModelConfig,
    pub train_cfg: TrainConfig,
    pub seed: u64,
}

pub const DESK_SEED: u64 = 1;

pub fn desk() -> Desk {
    let synth = SynthConfig::default();
    Desk {
        train: synthesize(&synth, "train", 200, DESK_SEED).unwrap(),
        test: synthesize(&synth, "test", 50, DESK_SEED).unwrap(),
        probe: synthesize(&synth, "probe", 64, DESK_SEED).unwrap(),
        model: ModelConfig::standard(1, 3, 16, (32, 32)).with_token_sizes([4, 2, 1, 1]),
        // 200 samples / batch 8 = 25 iterations per epoch, 8 epochs = 200 iterations
        train_cfg: TrainConfig {
            epochs: 8,
            seed: DESK_SEED,
            ..TrainConfig::default()
        },
        seed: DESK_SEED,
    }
}
