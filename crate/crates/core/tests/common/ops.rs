//! Every differentiable op, each wrapped into a scalar for gradient checks.

use epi_core::tensor::{Graph, Tensor, Var};
use epi_core::Result;

use super::{rng, weighted_sum};

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

pub type Build = fn(&mut Graph, &[Var], u64) -> Result<Var>;

pub struct Case {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    pub build: Build,
}

pub fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn w(shape: &[usize], seed: u64) -> Tensor {
    rand_t(shape, 10_000 + seed)
}

pub fn inputs(case: &Case, seed: u64) -> Vec<Tensor> {
    case.shapes
        .iter()
        .enumerate()
        .map(|(i, s)| rand_t(s, seed * 100 + i as u64))
        .collect()
}

/// Largest relative error over `SEEDS` seeded inputs.
pub fn worst_error(case: &Case) -> f64 {
    (0..SEEDS)
        .map(|seed| super::gradcheck(&inputs(case, seed), H, |g, v| (case.build)(g, v, seed)))
        .fold(0.0, f64::max)
}

pub const CASES: &[Case] = &[
    Case {
        name: "matmul",
        shapes: &[&[3, 3], &[3, 3]],
        build: |g, v, s| {
            let m = g.matmul(v[0], v[1])?;
            weighted_sum(g, m, &w(&[3, 3], s))
        },
    },
    Case {
        name: "matmul-rect",
        shapes: &[&[2, 4], &[4, 3]],
        build: |g, v, s| {
            let m = g.matmul(v[0], v[1])?;
            weighted_sum(g, m, &w(&[2, 3], s))
        },
    },
    Case {
        name: "add-broadcast",
        shapes: &[&[3, 4], &[4]],
        build: |g, v, s| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, &w(&[3, 4], s))
        },
    },
    Case {
        name: "mul-broadcast",
        shapes: &[&[3, 4], &[4]],
        build: |g, v, s| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, &w(&[3, 4], s))
        },
    },
    Case {
        name: "scale",
        shapes: &[&[5]],
        build: |g, v, s| {
            let y = g.scale(v[0], -1.7);
            weighted_sum(g, y, &w(&[5], s))
        },
    },
    Case {
        name: "relu",
        shapes: &[&[6]],
        build: |g, v, s| {
            let y = g.relu(v[0]);
            weighted_sum(g, y, &w(&[6], s))
        },
    },
    Case {
        name: "gelu",
        shapes: &[&[6]],
        build: |g, v, s| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y, &w(&[6], s))
        },
    },
    Case {
        name: "layer_norm",
        shapes: &[&[3, 5], &[5], &[5]],
        build: |g, v, s| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, &w(&[3, 5], s))
        },
    },
    Case {
        name: "softmax",
        shapes: &[&[3, 4]],
        build: |g, v, s| {
            let y = g.softmax(v[0])?;
            weighted_sum(g, y, &w(&[3, 4], s))
        },
    },
    Case {
        name: "causal_softmax",
        shapes: &[&[4, 4]],
        build: |g, v, s| {
            let y = g.causal_softmax(v[0])?;
            weighted_sum(g, y, &w(&[4, 4], s))
        },
    },
    Case {
        name: "transpose",
        shapes: &[&[2, 3]],
        build: |g, v, s| {
            let y = g.transpose(v[0])?;
            weighted_sum(g, y, &w(&[3, 2], s))
        },
    },
    Case {
        name: "slice_cols/concat_cols",
        shapes: &[&[3, 4], &[3, 2]],
        build: |g, v, s| {
            let a = g.slice_cols(v[0], 1, 2)?;
            let c = g.concat_cols(&[a, v[1]])?;
            weighted_sum(g, c, &w(&[3, 4], s))
        },
    },
    Case {
        name: "slice_rows",
        shapes: &[&[4, 3]],
        build: |g, v, s| {
            let r = g.slice_rows(v[0], 1, 2)?;
            weighted_sum(g, r, &w(&[2, 3], s))
        },
    },
    Case {
        name: "embedding",
        shapes: &[&[5, 3]],
        build: |g, v, s| {
            let e = g.embedding(v[0], &[4, 1, 4, 0])?;
            weighted_sum(g, e, &w(&[4, 3], s))
        },
    },
    Case {
        name: "softmax_cross_entropy",
        shapes: &[&[4, 6]],
        build: |g, v, s| {
            let t: Vec<usize> = (0..4).map(|i| (s as usize + i * 7) % 6).collect();
            g.softmax_cross_entropy(v[0], &t)
        },
    },
    Case {
        name: "mean/add_all",
        shapes: &[&[2, 3], &[2, 3]],
        build: |g, v, s| {
            let a = g.add_all(&[v[0], v[1], v[0]])?;
            let p = g.mul(a, v[1])?;
            let m = g.mean(p);
            let k = g.scale(m, 1.0 + s as f64 / 10.0);
            Ok(k)
        },
    },
    Case {
        name: "mlp",
        shapes: &[&[2, 4], &[4, 5], &[5], &[5, 5], &[5, 3]],
        build: |g, v, s| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add(h, v[2])?;
            let h = g.gelu(h);
            let h = g.matmul(h, v[3])?;
            let h = g.relu(h);
            let o = g.matmul(h, v[4])?;
            let t = [(s % 3) as usize, ((s + 1) % 3) as usize];
            g.softmax_cross_entropy(o, &t)
        },
    },
];
