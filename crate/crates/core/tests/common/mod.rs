//! Brute-force reference implementations shared by the integration tests.
//! Each one is written from the mathematical definition and avoids the
//! library's kernels, so agreement is evidence rather than tautology.

#![allow(dead_code)]

use lesionseg::network::INPUT_MEAN;
use lesionseg::{BinaryMask, NetworkParams, ProbabilityMap, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Shape, rng: &mut impl Rng) -> Tensor {
    let data = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn random_image(size: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..3 * size * size).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::new(Shape::new(1, 3, size, size), data).unwrap()
}

pub fn random_mask(height: usize, width: usize, density: f64, rng: &mut impl Rng) -> BinaryMask {
    let bits = (0..height * width).map(|_| rng.random_bool(density)).collect();
    BinaryMask::new(height, width, bits).unwrap()
}

/// Mask whose row-major bit i is bit i of `code`.
pub fn mask_from_code(height: usize, width: usize, code: u64) -> BinaryMask {
    let bits = (0..height * width).map(|i| code >> i & 1 == 1).collect();
    BinaryMask::new(height, width, bits).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- tensors

/// Direct sum over every kernel tap with explicit bounds checks.
pub fn naive_conv(input: &Tensor, kernel: &Tensor, bias: &[f64], padding: usize, dilation: usize) -> Tensor {
    let [n, c, h, w] = input.shape().dims();
    let [o, kc, kh, kw] = kernel.shape().dims();
    assert_eq!(c, kc);
    let (p, d) = (padding as i64, dilation as i64);
    let oh = h as i64 + 2 * p - d * (kh as i64 - 1);
    let ow = w as i64 + 2 * p - d * (kw as i64 - 1);
    assert!(oh > 0 && ow > 0);
    let (oh, ow) = (oh as usize, ow as usize);
    let mut out = Tensor::zeros(Shape::new(n, o, oh, ow));
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = y as i64 - p + ky as i64 * d;
                                let ix = x as i64 - p + kx as i64 * d;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                acc += kernel.at(oc, ic, ky, kx) * input.at(b, ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(b, oc, y, x, acc);
                }
            }
        }
    }
    out
}

pub fn naive_max_pool(input: &Tensor) -> Tensor {
    let [n, c, h, w] = input.shape().dims();
    let mut out = Tensor::zeros(Shape::new(n, c, h / 2, w / 2));
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| input.at(b, ch, 2 * y + dy, 2 * x + dx))
                        .fold(f64::NEG_INFINITY, f64::max);
                    out.set(b, ch, y, x, m);
                }
            }
        }
    }
    out
}

/// Align-corners bilinear interpolation written as the four-weight formula.
pub fn naive_bilinear(input: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [n, c, h, w] = input.shape().dims();
    let coord = |o: usize, inn: usize, out: usize| -> f64 {
        if out == 1 {
            0.0
        } else {
            o as f64 * (inn - 1) as f64 / (out - 1) as f64
        }
    };
    let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let (sy, sx) = (coord(y, h, oh), coord(x, w, ow));
                    let mut acc = 0.0;
                    for iy in 0..h {
                        for ix in 0..w {
                            let wy = (1.0 - (sy - iy as f64).abs()).max(0.0);
                            let wx = (1.0 - (sx - ix as f64).abs()).max(0.0);
                            acc += wy * wx * input.at(b, ch, iy, ix);
                        }
                    }
                    out.set(b, ch, y, x, acc);
                }
            }
        }
    }
    out
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), data).unwrap()
}

pub fn concat(parts: &[&Tensor]) -> Tensor {
    let s = parts[0].shape();
    let channels = parts.iter().map(|t| t.shape().channels).sum();
    let mut data = Vec::new();
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(Shape::new(1, channels, s.height, s.width), data).unwrap()
}

// ---------------------------------------------------------------- network

fn layer_conv(params: &NetworkParams, name: &str, x: &Tensor, dilation: usize) -> Tensor {
    let (w, b) = params.layer(name).unwrap();
    let k = w.shape().height;
    naive_conv(x, w, b.data(), dilation * (k / 2), dilation)
}

fn layer_conv_relu(params: &NetworkParams, name: &str, x: &Tensor, dilation: usize) -> Tensor {
    relu(&layer_conv(params, name, x, dilation))
}

/// Every map of one forward pass computed with the naive kernels:
/// (paths, branches, fused, final logits, probability).
pub struct OracleForward {
    pub pool5: Tensor,
    pub taps: [Tensor; 3],
    pub paths: [Tensor; 3],
    pub branches: [Tensor; 3],
    pub fused: [Tensor; 3],
    pub logits: Tensor,
    pub probability: Vec<f64>,
}

pub fn oracle_forward(params: &NetworkParams, image: &Tensor) -> OracleForward {
    let cfg = params.config();
    let (h, w) = (image.shape().height, image.shape().width);
    let mut x = image.map(|v| v - INPUT_MEAN);
    let mut taps = Vec::new();
    for stage in 1..=5 {
        for k in 1..=cfg.convs_per_stage[stage - 1] {
            x = layer_conv_relu(params, &format!("conv{stage}_{k}"), &x, 1);
            if k == 1 && stage >= 3 {
                taps.push(x.clone());
            }
        }
        x = naive_max_pool(&x);
    }
    let pool5 = x;
    let mut paths = Vec::new();
    let mut branches = Vec::new();
    let mut fused = Vec::new();
    for i in 1..=3 {
        let (ra, rb) = cfg.path_dilations[i - 1];
        let a = layer_conv_relu(params, &format!("csm{i}_a_dilated"), &pool5, ra);
        let a = layer_conv_relu(params, &format!("csm{i}_a_proj"), &a, 1);
        let b = layer_conv_relu(params, &format!("csm{i}_b_dilated"), &pool5, rb);
        let b = layer_conv_relu(params, &format!("csm{i}_b_proj"), &b, 1);
        let score = layer_conv(params, &format!("path{i}_score"), &add(&a, &b), 1);
        let path = naive_bilinear(&score, h, w);

        let t = layer_conv_relu(params, &format!("branch{i}_conv1"), &taps[i - 1], 1);
        let t = layer_conv_relu(params, &format!("branch{i}_conv2"), &t, 1);
        let t = layer_conv(params, &format!("branch{i}_score"), &t, 1);
        let branch = naive_bilinear(&t, h, w);

        fused.push(layer_conv(params, &format!("fuse{i}"), &concat(&[&path, &branch]), 1));
        paths.push(path);
        branches.push(branch);
    }
    let logits = match cfg.aggregation {
        lesionseg::Aggregation::Learned => layer_conv(params, "final", &concat(&[&fused[0], &fused[1], &fused[2]]), 1),
        lesionseg::Aggregation::Mean => add(&add(&fused[0], &fused[1]), &fused[2]).map(|v| v / 3.0),
    };
    let probability = logits.data().iter().map(|&v| logistic(v)).collect();
    let arr = |v: Vec<Tensor>| -> [Tensor; 3] { v.try_into().unwrap() };
    OracleForward {
        pool5,
        taps: arr(taps),
        paths: arr(paths),
        branches: arr(branches),
        fused: arr(fused),
        logits,
        probability,
    }
}

// ---------------------------------------------------------------- CRF

/// Scalar CRF settings for the oracle, kept separate from `CrfParams`.
#[derive(Clone, Copy, Debug)]
pub struct OracleCrf {
    pub w1: f64,
    pub w2: f64,
    pub sa: f64,
    pub sb: f64,
    pub sg: f64,
    pub iterations: usize,
}

/// Plain mean field for a two-label Potts CRF on a row-major grid.
/// Returns Q(salient) per pixel after `iterations` synchronous rounds.
pub fn oracle_mean_field(prob: &[f64], width: usize, colors: &[[f64; 3]], c: OracleCrf) -> Vec<Vec<f64>> {
    let n = prob.len();
    let cost = |p: f64| {
        let p = p.clamp(1e-6, 1.0 - 1e-6);
        [-(1.0 - p).ln(), -p.ln()]
    };
    let unary: Vec<[f64; 2]> = prob.iter().map(|&p| cost(p)).collect();
    let k = |i: usize, j: usize| {
        let (xi, yi) = ((i % width) as f64, (i / width) as f64);
        let (xj, yj) = ((j % width) as f64, (j / width) as f64);
        let pos = (xi - xj).powi(2) + (yi - yj).powi(2);
        let col: f64 = (0..3).map(|ch| (colors[i][ch] - colors[j][ch]).powi(2)).sum();
        c.w1 * (-pos / (2.0 * c.sa * c.sa) - col / (2.0 * c.sb * c.sb)).exp() + c.w2 * (-pos / (2.0 * c.sg * c.sg)).exp()
    };
    let normalize = |e0: f64, e1: f64| {
        // Q(l) = exp(−E_l) / Σ exp(−E)
        let a = (-e0).exp();
        let b = (-e1).exp();
        [a / (a + b), b / (a + b)]
    };
    let mut q: Vec<[f64; 2]> = unary.iter().map(|u| normalize(u[0], u[1])).collect();
    let mut history = vec![q.iter().map(|v| v[1]).collect::<Vec<_>>()];
    for _ in 0..c.iterations {
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let mut e = unary[i];
            for j in 0..n {
                if j != i {
                    // Potts: label l pays for every neighbor's mass on the other label.
                    e[0] += k(i, j) * q[j][1];
                    e[1] += k(i, j) * q[j][0];
                }
            }
            next.push(normalize(e[0], e[1]));
        }
        q = next;
        history.push(q.iter().map(|v| v[1]).collect());
    }
    history
}

/// Σ unary + Σ_{i<j} [y_i ≠ y_j] k(i, j).
pub fn oracle_energy(labels: &[bool], prob: &[f64], width: usize, colors: &[[f64; 3]], c: OracleCrf) -> f64 {
    let n = labels.len();
    let mut e = 0.0;
    for i in 0..n {
        let p = prob[i].clamp(1e-6, 1.0 - 1e-6);
        e += if labels[i] { -p.ln() } else { -(1.0 - p).ln() };
    }
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] != labels[j] {
                let (dx, dy) = ((i % width) as f64 - (j % width) as f64, (i / width) as f64 - (j / width) as f64);
                let pos = dx * dx + dy * dy;
                let col: f64 = (0..3).map(|ch| (colors[i][ch] - colors[j][ch]).powi(2)).sum();
                e += c.w1 * (-pos / (2.0 * c.sa * c.sa) - col / (2.0 * c.sb * c.sb)).exp()
                    + c.w2 * (-pos / (2.0 * c.sg * c.sg)).exp();
            }
        }
    }
    e
}

// ---------------------------------------------------------------- morphology

fn inside(mask: &BinaryMask, x: i64, y: i64) -> bool {
    x >= 0 && y >= 0 && (x as usize) < mask.width() && (y as usize) < mask.height()
}

/// p is set iff some in-image pixel of the (2r+1)² window at p is set.
pub fn oracle_dilate(mask: &BinaryMask, r: usize) -> BinaryMask {
    let r = r as i64;
    BinaryMask::from_fn(mask.height(), mask.width(), |x, y| {
        (-r..=r).any(|dy| {
            (-r..=r).any(|dx| {
                let (qx, qy) = (x as i64 + dx, y as i64 + dy);
                inside(mask, qx, qy) && mask.get(qx as usize, qy as usize)
            })
        })
    })
}

/// p is set iff every in-image pixel of the (2r+1)² window at p is set.
pub fn oracle_erode(mask: &BinaryMask, r: usize) -> BinaryMask {
    let r = r as i64;
    BinaryMask::from_fn(mask.height(), mask.width(), |x, y| {
        (-r..=r).all(|dy| {
            (-r..=r).all(|dx| {
                let (qx, qy) = (x as i64 + dx, y as i64 + dy);
                !inside(mask, qx, qy) || mask.get(qx as usize, qy as usize)
            })
        })
    })
}

pub fn oracle_close(mask: &BinaryMask, r: usize) -> BinaryMask {
    oracle_erode(&oracle_dilate(mask, r), r)
}

/// Background pixels reachable from the border through 4-steps over
/// background stay background; every other pixel becomes foreground.
/// Computed by relaxation to a fixed point.
pub fn oracle_fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut reach = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) && (x == 0 || y == 0 || x == w - 1 || y == h - 1) {
                reach[y * w + x] = true;
            }
        }
    }
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) || reach[y * w + x] {
                    continue;
                }
                let near = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|&(dx, dy)| {
                    let (qx, qy) = (x as i64 + dx, y as i64 + dy);
                    inside(mask, qx, qy) && reach[qy as usize * w + qx as usize]
                });
                if near {
                    reach[y * w + x] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    BinaryMask::new(h, w, reach.iter().map(|r| !r).collect()).unwrap()
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// 8-connected components by union-find. Labels are renumbered by the
/// raster position of each component's first pixel. Returns (labels, areas).
pub fn oracle_components(mask: &BinaryMask) -> (Vec<Option<usize>>, Vec<usize>) {
    let (w, h) = (mask.width(), mask.height());
    let mut parent: Vec<usize> = (0..w * h).collect();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (qx, qy) = (x as i64 + dx, y as i64 + dy);
                    if (dx, dy) != (0, 0) && inside(mask, qx, qy) && mask.get(qx as usize, qy as usize) {
                        let a = find(&mut parent, y * w + x);
                        let b = find(&mut parent, qy as usize * w + qx as usize);
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut ids = std::collections::HashMap::new();
    let mut areas = Vec::new();
    let mut labels = vec![None; w * h];
    for i in 0..w * h {
        if mask.bits()[i] {
            let root = find(&mut parent, i);
            let next = ids.len();
            let id = *ids.entry(root).or_insert(next);
            if id == areas.len() {
                areas.push(0);
            }
            areas[id] += 1;
            labels[i] = Some(id);
        }
    }
    (labels, areas)
}

// ---------------------------------------------------------------- Otsu

/// Scans all 255 split points, counting each class straight from the
/// pixels. Bin b holds (b/256, (b+1)/256]; a split after bin t thresholds
/// at (t+1)/256. Ties keep the first (lowest) split.
pub fn oracle_otsu(map: &ProbabilityMap) -> (f64, BinaryMask) {
    let bin = |p: f64| -> u64 {
        if p <= 0.0 {
            0
        } else {
            ((p * 256.0).ceil() as u64 - 1).min(255)
        }
    };
    let bins: Vec<u64> = map.values().iter().map(|&p| bin(p)).collect();
    let mut best: Option<(u64, f64)> = None;
    for t in 0..255u64 {
        let (mut n0, mut s0, mut n1, mut s1) = (0u64, 0u64, 0u64, 0u64);
        for &b in &bins {
            if b <= t {
                n0 += 1;
                s0 += b;
            } else {
                n1 += 1;
                s1 += b;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let (m0, m1) = (s0 as f64 / n0 as f64, s1 as f64 / n1 as f64);
        let score = n0 as f64 * n1 as f64 * (m0 - m1) * (m0 - m1);
        match best {
            Some((_, s)) if score <= s => {}
            _ => best = Some((t, score)),
        }
    }
    let threshold = match best {
        Some((t, _)) => (t + 1) as f64 / 256.0,
        None => map.values().iter().copied().fold(f64::MIN, f64::max),
    };
    let mask = BinaryMask::from_fn(map.height(), map.width(), |x, y| map.get(x, y) > threshold);
    (threshold, mask)
}

pub fn random_probability_map(height: usize, width: usize, rng: &mut impl Rng) -> ProbabilityMap {
    // Mix of uniform noise, bimodal clusters and exact bin edges.
    let kind = rng.random_range(0..3);
    let values = (0..height * width)
        .map(|_| match kind {
            0 => rng.random_range(0.0..=1.0),
            1 => {
                let centre = if rng.random_bool(0.4) { 0.8 } else { 0.2 };
                (centre + rng.random_range(-0.15..0.15f64)).clamp(0.0, 1.0)
            }
            _ => rng.random_range(0..=256) as f64 / 256.0,
        })
        .collect();
    ProbabilityMap::new(height, width, values).unwrap()
}
