//! Finite-difference checks of every primitive and every candidate operator.
//! Shared by the core integration tests and the acceptance suite.

use std::collections::BTreeMap;

use magic_nas::autodiff::{grad_check, Array, AutodiffError, GradCheckConfig, Graph, KeyMask, NodeId, ParamMap};
use magic_nas::ops::{apply_operator, init_params, OperatorSpec, PadMask};
use magic_nas::rng;
use rand::Rng as _;

pub type Build = Box<dyn Fn(&mut Graph<f64>, &BTreeMap<String, NodeId>) -> Result<NodeId, AutodiffError>>;

pub struct Case {
    pub name: String,
    pub params: ParamMap<f64>,
    pub build: Build,
}

fn random(shape: &[usize], scale: f64, r: &mut rng::Rng) -> Array<f64> {
    let n: usize = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| scale * (r.random::<f64>() * 2.0 - 1.0)).collect()).unwrap()
}

/// Reduces `y` to a scalar through a fixed random projection so every
/// output element carries a distinct weight.
fn project(g: &mut Graph<f64>, y: NodeId, r_seed: u64) -> Result<NodeId, AutodiffError> {
    let mut r = rng::stream(r_seed, &[99]);
    let w = random(g.shape(y), 1.0, &mut r);
    let w = g.input(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn params(entries: Vec<(&str, Array<f64>)>) -> ParamMap<f64> {
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Cases for one seed: every primitive, then every operator kind.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut r = rng::stream(seed, &[7]);
    let b = r.random_range(1..=3);
    let l = r.random_range(2..=5);
    let d = 2 * r.random_range(1..=3);
    let n = r.random_range(1..=4);
    let mut out: Vec<Case> = Vec::new();
    let mut push = |name: &str, params: ParamMap<f64>, build: Build| out.push(Case { name: name.to_string(), params, build });

    let ps = seed;
    push(
        "matmul",
        params(vec![("a", random(&[b, l, d], 1.0, &mut r)), ("w", random(&[d, n], 1.0, &mut r))]),
        Box::new(move |g, p| {
            let y = g.matmul(p["a"], p["w"])?;
            project(g, y, ps)
        }),
    );
    for trans in [false, true] {
        let bs = if trans { [b, n, d] } else { [b, d, n] };
        push(
            if trans { "batch_matmul_t" } else { "batch_matmul" },
            params(vec![("a", random(&[b, l, d], 1.0, &mut r)), ("b", random(&bs, 1.0, &mut r))]),
            Box::new(move |g, p| {
                let y = g.batch_matmul(p["a"], p["b"], trans)?;
                project(g, y, ps)
            }),
        );
    }
    push(
        "add_mul_scale",
        params(vec![("a", random(&[b, l, d], 1.0, &mut r)), ("b", random(&[b, l, d], 1.0, &mut r))]),
        Box::new(move |g, p| {
            let s = g.add(p["a"], p["b"])?;
            let m = g.mul(s, p["a"])?;
            let y = g.scale(m, 0.7)?;
            project(g, y, ps)
        }),
    );
    push(
        "add_bias",
        params(vec![("a", random(&[b, l, d], 1.0, &mut r)), ("bias", random(&[d], 1.0, &mut r))]),
        Box::new(move |g, p| {
            let y = g.add_bias(p["a"], p["bias"])?;
            project(g, y, ps)
        }),
    );
    push(
        "gelu",
        params(vec![("a", random(&[b, l, d], 3.0, &mut r))]),
        Box::new(move |g, p| {
            let y = g.gelu(p["a"])?;
            project(g, y, ps)
        }),
    );
    push(
        "softmax",
        params(vec![("a", random(&[b, l, l], 2.0, &mut r))]),
        Box::new(move |g, p| {
            let y = g.softmax(p["a"], None)?;
            project(g, y, ps)
        }),
    );
    let valid: Vec<bool> = (0..b * l).map(|i| i % l != l - 1 || i == 0).collect();
    push(
        "softmax_masked",
        params(vec![("a", random(&[b, l, l], 2.0, &mut r))]),
        Box::new(move |g, p| {
            let y = g.softmax(p["a"], Some(KeyMask { valid: valid.clone(), rows_per_group: l }))?;
            project(g, y, ps)
        }),
    );
    push(
        "layer_norm",
        params(vec![
            ("x", random(&[b, l, d], 2.0, &mut r)),
            ("g", random(&[d], 1.0, &mut r)),
            ("b", random(&[d], 1.0, &mut r)),
        ]),
        Box::new(move |g, p| {
            let y = g.layer_norm(p["x"], p["g"], p["b"])?;
            project(g, y, ps)
        }),
    );
    let k = 2 * r.random_range(0..=2) + 1;
    push(
        "depthwise_conv1d",
        params(vec![
            ("x", random(&[b, l, d], 1.0, &mut r)),
            ("w", random(&[k, d], 1.0, &mut r)),
            ("b", random(&[d], 1.0, &mut r)),
        ]),
        Box::new(move |g, p| {
            let y = g.depthwise_conv1d(p["x"], p["w"], p["b"])?;
            project(g, y, ps)
        }),
    );
    push(
        "pointwise_conv1d",
        params(vec![
            ("x", random(&[b, l, d], 1.0, &mut r)),
            ("w", random(&[d, n], 1.0, &mut r)),
            ("b", random(&[n], 1.0, &mut r)),
        ]),
        Box::new(move |g, p| {
            let y = g.pointwise_conv1d(p["x"], p["w"], p["b"])?;
            project(g, y, ps)
        }),
    );
    let offset = r.random_range(-2..=2i64) as isize;
    push(
        "shift",
        params(vec![("x", random(&[b, l, d], 1.0, &mut r))]),
        Box::new(move |g, p| {
            let y = g.shift(p["x"], offset)?;
            project(g, y, ps)
        }),
    );
    let vocab = 5;
    let ids: Vec<usize> = (0..b * l).map(|_| r.random_range(0..vocab)).collect();
    push(
        "embedding",
        params(vec![("t", random(&[vocab, d], 1.0, &mut r))]),
        Box::new(move |g, p| {
            let y = g.embedding(p["t"], &ids, &[b, l])?;
            project(g, y, ps)
        }),
    );
    push(
        "split_merge_heads",
        params(vec![("x", random(&[b, l, d], 1.0, &mut r))]),
        Box::new(move |g, p| {
            let s = g.split_heads(p["x"], 2)?;
            let sq = g.mul(s, s)?;
            let y = g.merge_heads(sq, 2)?;
            project(g, y, ps)
        }),
    );
    push(
        "mse",
        params(vec![("a", random(&[b, l, d], 1.0, &mut r)), ("b", random(&[b, l, d], 1.0, &mut r))]),
        Box::new(move |g, p| g.mse(p["a"], p["b"])),
    );
    let mut targets = vec![(0, r.random_range(0..n))];
    for i in 1..b * l {
        if r.random::<f64>() < 0.5 {
            targets.push((i, r.random_range(0..n)));
        }
    }
    push(
        "cross_entropy",
        params(vec![("z", random(&[b, l, n], 3.0, &mut r))]),
        Box::new(move |g, p| g.cross_entropy(p["z"], &targets)),
    );

    // candidate operators, parameters perturbed away from their init so
    // biases and gains are exercised
    let heads = if d % 4 == 0 { 2 } else { 1 };
    let specs = [
        OperatorSpec::mha(d, heads, d).labeled("MHA"),
        OperatorSpec::ffn(d, d + 2).labeled("FFN"),
        OperatorSpec::conv(d, 3).labeled("CONV3"),
        OperatorSpec::conv(d, 5).labeled("CONV5"),
        OperatorSpec::full_conv(d, 3).labeled("FCONV3"),
    ];
    for spec in specs {
        let mut p = init_params::<f64>(&spec, seed);
        for v in p.values_mut() {
            let noise = random(v.shape(), 0.3, &mut r);
            v.add_assign(&noise);
        }
        p.insert("input".into(), random(&[b, l, d], 1.0, &mut r));
        let mut valid = vec![true; b * l];
        if l > 2 {
            valid[l - 1] = false;
        }
        let pad = PadMask { batch: b, len: l, valid };
        let name = format!("operator_{}", spec.display_name());
        let spec2 = spec.clone();
        push(
            &name,
            p,
            Box::new(move |g, ids| {
                let local: BTreeMap<String, NodeId> =
                    ids.iter().filter(|(k, _)| k.as_str() != "input").map(|(k, v)| (k.clone(), *v)).collect();
                let y = apply_operator(g, &spec2, &local, ids["input"], &pad)?;
                project(g, y, ps)
            }),
        );
    }
    out
}

/// Worst relative error per case name over `seeds`.
pub fn run(seeds: std::ops::Range<u64>) -> BTreeMap<String, (f64, usize)> {
    let cfg = GradCheckConfig::default();
    let mut worst: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for seed in seeds {
        for case in cases(seed) {
            let report = grad_check(&case.params, &case.build, &cfg).expect("grad check runs");
            let e = worst.entry(case.name).or_insert((0.0, 0));
            e.0 = e.0.max(report.max_relative_error);
            e.1 += 1;
        }
    }
    worst
}
