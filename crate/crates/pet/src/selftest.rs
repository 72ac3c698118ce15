//! Runnable verification suites: gradient checks against central finite
//! differences, the assignment solver against brute-force enumeration, and
//! structural invariants. Backs the `selftest` command and the acceptance
//! tests; every oracle here is independent of the code path it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{generate, SynthConfig};
use crate::error::Result;
use crate::loss::{assign, assignment_cost, match_queries, CostMatrix};
use crate::model::PetModel;
use crate::numerics::{check_grad, rel_err, Graph, Tensor, DEFAULT_STEP};
use crate::quadtree::{PointQueryTree, SplitMap};

/// One pass/fail line of a suite.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

pub fn render(checks: &[Check]) -> String {
    let mut out = String::new();
    for c in checks {
        out.push_str(&format!(
            "{} {} ({})\n",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        ));
    }
    out
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

// ---- oracles ----

/// Exhaustive minimum assignment over all injective column -> row maps.
/// Returns the best assignment so its cost can be recomputed with the exact
/// same summation as the solver's.
pub fn brute_force_min_assignment(cost: &CostMatrix) -> Vec<usize> {
    fn rec(
        cost: &CostMatrix,
        col: usize,
        used: &mut [bool],
        current: &mut Vec<usize>,
        best: &mut (f64, Vec<usize>),
    ) {
        if col == cost.cols {
            let total = assignment_cost(cost, current);
            if total < best.0 {
                *best = (total, current.clone());
            }
            return;
        }
        for row in 0..cost.rows {
            if used[row] {
                continue;
            }
            used[row] = true;
            current.push(row);
            rec(cost, col + 1, used, current, best);
            current.pop();
            used[row] = false;
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    rec(
        cost,
        0,
        &mut vec![false; cost.rows],
        &mut Vec::new(),
        &mut best,
    );
    best.1
}

/// Exhaustive minimum assignment cost.
pub fn brute_force_min_cost(cost: &CostMatrix) -> f64 {
    assignment_cost(cost, &brute_force_min_assignment(cost))
}

/// Exhaustive maximum number of one-to-one pred/gt pairs within `sigma`.
pub fn brute_force_max_matches(preds: &[(f64, f64)], gts: &[(f64, f64)], sigma: f64) -> usize {
    fn rec(preds: &[(f64, f64)], gts: &[(f64, f64)], sigma: f64, i: usize, used: &mut [bool]) -> usize {
        if i == preds.len() {
            return 0;
        }
        // leave prediction i unmatched
        let mut best = rec(preds, gts, sigma, i + 1, used);
        for (j, &g) in gts.iter().enumerate() {
            if used[j] {
                continue;
            }
            let d = ((preds[i].0 - g.0).powi(2) + (preds[i].1 - g.1).powi(2)).sqrt();
            if d <= sigma {
                used[j] = true;
                best = best.max(1 + rec(preds, gts, sigma, i + 1, used));
                used[j] = false;
            }
        }
        best
    }
    rec(preds, gts, sigma, 0, &mut vec![false; gts.len()])
}

/// Dense multi-head attention computed with plain loops; oracle for the
/// window/global equivalence check.
pub fn dense_attention_oracle(
    x: &[f64],
    n: usize,
    c: usize,
    heads: usize,
    weights: &AttnWeights,
) -> Vec<f64> {
    let project = |w: &[f64], b: &[f64]| {
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let mut s = b[j];
                for p in 0..c {
                    s += x[i * c + p] * w[p * c + j];
                }
                out[i * c + j] = s;
            }
        }
        out
    };
    let q = project(&weights.wq, &weights.bq);
    let k = project(&weights.wk, &weights.bk);
    let v = project(&weights.wv, &weights.bv);
    let d = c / heads;
    let mut concat = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for (j, s) in scores.iter_mut().enumerate() {
                for p in 0..d {
                    *s += q[i * c + h * d + p] * k[j * c + h * d + p];
                }
                *s /= (d as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for j in 0..n {
                let w = (scores[j] - max).exp() / denom;
                for p in 0..d {
                    concat[i * c + h * d + p] += w * v[j * c + h * d + p];
                }
            }
        }
    }
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for j in 0..c {
            let mut s = weights.bo[j];
            for p in 0..c {
                s += concat[i * c + p] * weights.wo[p * c + j];
            }
            out[i * c + j] = s;
        }
    }
    out
}

pub struct AttnWeights {
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
}

// ---- suites ----

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

/// Finite-difference checks for every differentiable operation on
/// randomized shapes.
pub fn gradient_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF00D);
    let mut checks = Vec::new();
    let tol = 1e-4;

    // generic driver: the flat input becomes the graph's first (tracked)
    // leaf; the objective is the sum of the built expression
    let mut op_check = |name: &str,
                        x0: Vec<f64>,
                        build: &dyn Fn(&mut Graph, &[f64]) -> Result<crate::numerics::Var>|
     -> Result<()> {
        let eval = |xv: &[f64]| -> Result<f64> {
            let mut g = Graph::new();
            let out = build(&mut g, xv)?;
            let s = g.sum(out)?;
            Ok(g.value(s).item())
        };
        let analytic = {
            let mut g = Graph::new();
            let out = build(&mut g, &x0)?;
            let s = g.sum(out)?;
            g.backward(s)?;
            g.grad(crate::numerics::Var(0))
                .map(|v| v.to_vec())
                .unwrap_or_default()
        };
        assert_eq!(analytic.len(), x0.len(), "{name}: leaf 0 must be the input");
        let rep = check_grad(eval, &x0, &analytic, DEFAULT_STEP)?;
        checks.push(Check::new(
            &format!("gradient/{name}"),
            rep.passes(tol),
            format!("max rel err {:.2e} over {} coords", rep.max_rel_err, rep.checked),
        ));
        Ok(())
    };

    let n20 = rand_vec(&mut rng, 20);
    let n60 = rand_vec(&mut rng, 60);
    let n8 = rand_vec(&mut rng, 8);
    let n9 = rand_vec(&mut rng, 9);
    let n7 = rand_vec(&mut rng, 7);
    let n6 = rand_vec(&mut rng, 6);
    let pos6: Vec<f64> = rand_vec(&mut rng, 6).iter().map(|v| v.abs() + 0.5).collect();
    let n12a = rand_vec(&mut rng, 12);
    let n10 = rand_vec(&mut rng, 10);
    let n12b = rand_vec(&mut rng, 12);
    let n32 = rand_vec(&mut rng, 32);
    let n24a = rand_vec(&mut rng, 24);
    let n24b = rand_vec(&mut rng, 24);
    let h6 = rand_vec(&mut rng, 6);

    op_check("matmul", n20, &|g, xv| {
        let a = g.leaf(Tensor::new(vec![5, 4], xv.to_vec())?.with_requires_grad())?;
        let b = g.leaf(Tensor::new(
            vec![4, 3],
            (0..12).map(|i| ((i * 37) as f64).sin()).collect(),
        )?)?;
        g.matmul(a, b)
    })?;
    op_check("conv2d", n60, &|g, xv| {
        let x = g.leaf(Tensor::new(vec![5, 6, 2], xv.to_vec())?.with_requires_grad())?;
        let k = g.leaf(Tensor::new(
            vec![3, 3, 2, 2],
            (0..36).map(|i| ((i * 13) as f64).cos() * 0.3).collect(),
        )?)?;
        g.conv2d(x, k, 2, 1)
    })?;
    op_check("add_mul", n8, &|g, xv| {
        let x = g.leaf(Tensor::new(vec![8], xv.to_vec())?.with_requires_grad())?;
        let y = g.leaf(Tensor::new(vec![8], (0..8).map(|i| i as f64 * 0.3 - 1.0).collect())?)?;
        let sum = g.add(x, y)?;
        g.mul(sum, x)
    })?;
    op_check("relu", n9, &|g, xv| {
        let x = g.leaf(Tensor::new(vec![9], xv.to_vec())?.with_requires_grad())?;
        g.relu(x)
    })?;
    op_check("sigmoid", n7, &|g, xv| {
        let x = g.leaf(Tensor::new(vec![7], xv.to_vec())?.with_requires_grad())?;
        g.sigmoid(x)
    })?;
    op_check("exp", n6, &|g, xv| {
        let x = g.leaf(Tensor::new(vec![6], xv.to_vec())?.with_requires_grad())?;
        g.exp(x)
    })?;
    op_check("log", pos6, &|g, xv| {
        let x = g.leaf(Tensor::new(vec![6], xv.to_vec())?.with_requires_grad())?;
        g.log(x)
    })?;
    op_check("softmax", n12a, &|g, xv| {
        let x = g.leaf(Tensor::new(vec![3, 4], xv.to_vec())?.with_requires_grad())?;
        let y = g.softmax(x, 1)?;
        let probe = g.leaf(Tensor::new(
            vec![3, 4],
            (0..12).map(|i| ((i * 11) as f64).sin()).collect(),
        )?)?;
        g.mul(y, probe)
    })?;
    op_check("log_softmax", n10, &|g, xv| {
        let x = g.leaf(Tensor::new(vec![2, 5], xv.to_vec())?.with_requires_grad())?;
        let y = g.log_softmax(x, 1)?;
        let probe = g.leaf(Tensor::new(
            vec![2, 5],
            (0..10).map(|i| ((i * 7) as f64).cos()).collect(),
        )?)?;
        g.mul(y, probe)
    })?;
    op_check("layernorm", n12b, &|g, xv| {
        let x = g.leaf(Tensor::new(vec![3, 4], xv.to_vec())?.with_requires_grad())?;
        let gain = g.leaf(Tensor::new(vec![4], vec![1.2, 0.8, -0.6, 1.0])?)?;
        let bias = g.leaf(Tensor::new(vec![4], vec![0.0, 0.1, -0.1, 0.2])?)?;
        let y = g.layernorm(x, gain, bias, 1e-5)?;
        let probe = g.leaf(Tensor::new(
            vec![3, 4],
            (0..12).map(|i| ((i * 5) as f64).sin()).collect(),
        )?)?;
        g.mul(y, probe)
    })?;
    op_check("avgpool2d", n32, &|g, xv| {
        let x = g.leaf(Tensor::new(vec![4, 4, 2], xv.to_vec())?.with_requires_grad())?;
        g.avgpool2d(x, 2, 2)
    })?;
    op_check("bilinear_sample", n24a, &|g, xv| {
        let x = g.leaf(Tensor::new(vec![3, 4, 2], xv.to_vec())?.with_requires_grad())?;
        g.bilinear_sample(x, &[(0.7, 1.3), (2.2, 0.1), (3.0, 2.0)], 1.0)
    })?;
    op_check("multi_head_attn", n24b, &|g, xv| {
        let q = g.leaf(Tensor::new(vec![3, 8], xv.to_vec())?.with_requires_grad())?;
        let kv = g.leaf(Tensor::new(
            vec![4, 8],
            (0..32).map(|i| ((i * 3) as f64).sin() * 0.7).collect(),
        )?)?;
        g.multi_head_attn(q, kv, kv, 2)
    })?;
    op_check("huber", h6, &|g, xv| {
        let x = g.leaf(Tensor::new(vec![6], xv.to_vec())?.with_requires_grad())?;
        let t = g.leaf(Tensor::new(vec![6], vec![0.3, -0.4, 2.0, -2.0, 0.0, 0.9])?)?;
        g.huber(x, t)
    })?;

    Ok(checks)
}

/// Compact model settings for the end-to-end gradient check.
pub fn toy_config() -> RunConfig {
    RunConfig {
        backbone_channels: vec![4, 6, 8],
        feature_channels: 8,
        heads: 2,
        window_height: 4,
        encoder_layers: 2,
        decoder_layers: 1,
        crop: 32,
        seed: 9,
        ..RunConfig::default()
    }
}

/// Central-difference check of d(total loss)/d(parameter) for every
/// parameter of a toy model on a 32x32 synthetic image. The quadtree split
/// pattern and the bipartite match are frozen at their base-point values so
/// the objective is differentiable while parameters move.
pub fn end_to_end_gradient_check() -> Result<(f64, usize)> {
    let cfg = toy_config();
    let (model, mut store) = PetModel::new(&cfg)?;
    let scene = generate(
        &SynthConfig {
            width: 32,
            height: 32,
            count_min: 4,
            count_max: 4,
            head_radius_min: 2.0,
            head_radius_max: 3.0,
            perspective: 1.0,
            overlap_cap: 0.0,
            clutter: 2,
            seed: 77,
        },
        1,
    )?
    .remove(0);
    let image = scene.to_tensor();
    let gts_norm: Vec<(f64, f64)> = scene
        .points
        .iter()
        .map(|&(x, y)| (x / 32.0, y / 32.0))
        .collect();
    let loss_cfg = cfg.loss();
    let is_dense = loss_cfg.is_dense(scene.points.len(), 32.0 * 32.0);

    // base pass: freeze the split pattern and the match
    let mut g = Graph::new();
    let fwd = model.forward_on_graph(&mut g, &store, &image, None, false)?;
    let pattern = SplitMap::from_tensor(g.value(fwd.split_map))?.binarize(cfg.split_threshold);
    let (probs, locs) = {
        let lt = g.value(fwd.logits);
        let n = lt.dim(0);
        let probs: Vec<f64> = (0..n)
            .map(|i| {
                let (l0, l1) = (lt.data()[i * 2], lt.data()[i * 2 + 1]);
                let m = l0.max(l1);
                (l1 - m).exp() / ((l0 - m).exp() + (l1 - m).exp())
            })
            .collect();
        let lv = g.value(fwd.locations);
        let locs: Vec<(f64, f64)> =
            (0..n).map(|i| (lv.data()[i * 2], lv.data()[i * 2 + 1])).collect();
        (probs, locs)
    };
    let matched = match_queries(&probs, &locs, &gts_norm, cfg.lambda_loc)?;

    let loss_of = |store: &crate::numerics::ParamStore, want_grads: bool| -> Result<(f64, Option<Vec<(usize, Vec<f64>)>>)> {
        let mut g = Graph::new();
        let fwd = model.forward_on_graph(&mut g, store, &image, Some(&pattern), false)?;
        let pq = crate::loss::point_query_loss(
            &mut g,
            fwd.logits,
            fwd.locations,
            &gts_norm,
            &matched,
            cfg.lambda_loc,
        )?;
        let split = crate::loss::split_loss(&mut g, fwd.split_map, is_dense)?;
        let st = g.scale(split, cfg.lambda_split)?;
        let loss = g.add(pq, st)?;
        let val = g.value(loss).item();
        if !want_grads {
            return Ok((val, None));
        }
        g.backward(loss)?;
        let mut store2 = store.clone();
        store2.zero_grads();
        g.accumulate_param_grads(&mut store2, 1.0);
        let grads = store2
            .iter()
            .map(|(id, e)| (id.0, e.grad.clone()))
            .collect();
        Ok((val, Some(grads)))
    };

    let (_, grads) = loss_of(&store, true)?;
    let grads = grads.unwrap();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        let n = store.value(*id).numel();
        for c in 0..n {
            let an = grads[pi].1[c];
            // h=1e-5 first; a kink (relu/huber/clamp corner) straddled by the
            // stencil shows a spurious disagreement that vanishes once the
            // stencil shrinks past it, while a wrong gradient never converges
            let mut best = f64::INFINITY;
            for h in [DEFAULT_STEP, 1e-6, 1e-7] {
                let orig = store.value(*id).data()[c];
                store.value_mut(*id).data_mut()[c] = orig + h;
                let up = loss_of(&store, false)?.0;
                store.value_mut(*id).data_mut()[c] = orig - h;
                let down = loss_of(&store, false)?.0;
                store.value_mut(*id).data_mut()[c] = orig;
                let fd = (up - down) / (2.0 * h);
                best = best.min(rel_err(fd, an));
                if best < 1e-4 {
                    break;
                }
            }
            max_rel = max_rel.max(best);
            checked += 1;
        }
    }
    Ok((max_rel, checked))
}

/// Solver vs brute force on random rectangular matrices (columns <= 7).
pub fn matching_suite(trials: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA55);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let cols = 1 + (t % 7);
        let rows = cols + (t % 3); // square and slightly tall cases
        let data = rand_vec(&mut rng, rows * cols);
        let cost = CostMatrix::new(rows, cols, data)?;
        let a = assign(&cost)?;
        let got = assignment_cost(&cost, &a);
        let want = brute_force_min_cost(&cost);
        let diff = (got - want).abs();
        if diff > worst {
            worst = diff;
        }
        if diff != 0.0 {
            return Ok(vec![Check::new(
                "matching/brute-force",
                false,
                format!("trial {t}: solver {got} vs brute force {want}"),
            )]);
        }
    }
    Ok(vec![Check::new(
        "matching/brute-force",
        true,
        format!("{trials} random matrices up to 7 columns, exact cost match"),
    )])
}

/// Quadtree structure: leaf-count formula, forced configurations, tiling.
pub fn quadtree_suite(patterns: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7EE);
    let mut checks = Vec::new();

    let mut formula_ok = true;
    for _ in 0..patterns {
        let (rows, cols) = (8usize, 8usize);
        let probs: Vec<f64> = (0..rows * cols).map(|_| rng.random()).collect();
        let d = probs.iter().filter(|p| **p > 0.5).count();
        let map = SplitMap::new(rows, cols, probs)?;
        let mut t = PointQueryTree::seed(64, 64, 8)?;
        t.split(
            &map,
            &crate::config::QuadtreeConfig {
                stride: 8,
                max_splits: 1,
                split_threshold: 0.5,
            },
        )?;
        if t.leaf_count() != rows * cols + 3 * d {
            formula_ok = false;
            break;
        }
    }
    checks.push(Check::new(
        "quadtree/leaf-count-formula",
        formula_ok,
        format!("{patterns} random split patterns"),
    ));

    let mut t = PointQueryTree::seed(256, 256, 8)?;
    t.split_with_pattern(&vec![false; 1024], 1)?;
    let sparse_ok = t.leaf_count() == 1024;
    let mut t = PointQueryTree::seed(256, 256, 8)?;
    t.split_with_pattern(&vec![true; 1024], 1)?;
    let dense_ok = t.leaf_count() == 4096;
    checks.push(Check::new(
        "quadtree/forced-configurations",
        sparse_ok && dense_ok,
        "no-split 1024 and full-split 4096 on 256x256, stride 8".into(),
    ));

    // tiling on a random pattern
    let probs: Vec<f64> = (0..16).map(|_| rng.random()).collect();
    let map = SplitMap::new(4, 4, probs)?;
    let mut t = PointQueryTree::seed(32, 32, 8)?;
    t.split(
        &map,
        &crate::config::QuadtreeConfig {
            stride: 8,
            max_splits: 1,
            split_threshold: 0.5,
        },
    )?;
    let leaves = t.leaves();
    let mut tiling_ok = true;
    'outer: for py in 0..32 {
        for px in 0..32 {
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            let holders = leaves
                .iter()
                .filter(|l| {
                    let s = 8.0 / (1 << l.level) as f64;
                    cx >= l.x - s / 2.0 && cx < l.x + s / 2.0 && cy >= l.y - s / 2.0 && cy < l.y + s / 2.0
                })
                .count();
            if holders != 1 {
                tiling_ok = false;
                break 'outer;
            }
        }
    }
    checks.push(Check::new(
        "quadtree/cells-tile-image",
        tiling_ok,
        "every pixel in exactly one leaf cell".into(),
    ));
    Ok(checks)
}

/// Split-loss closed-form values.
pub fn split_loss_suite() -> Result<Vec<Check>> {
    let mut g = Graph::new();
    let case = |g: &mut Graph, vals: Vec<f64>, dense: bool| -> Result<f64> {
        let m = g.leaf(Tensor::new(vec![1, vals.len()], vals)?)?;
        let l = crate::loss::split_loss(g, m, dense)?;
        Ok(g.value(l).item())
    };
    let a = case(&mut g, vec![1.0, 0.0, 0.4], true)? == 0.0;
    let b = case(&mut g, vec![0.5, 0.5, 0.5], true)? == 1.0;
    let c = (case(&mut g, vec![0.9, 0.2, 0.7], false)? - 0.2).abs() < 1e-15;
    Ok(vec![Check::new(
        "loss/split-closed-form",
        a && b && c,
        "dense(max=1,min=0)=0, dense(all 0.5)=1, sparse(min 0.2)=0.2".into(),
    )])
}

/// Determinism: replaying a graph yields bit-identical values.
pub fn determinism_suite() -> Result<Vec<Check>> {
    let cfg = toy_config();
    let (model, store) = PetModel::new(&cfg)?;
    let scene = generate(
        &SynthConfig {
            width: 32,
            height: 32,
            count_min: 3,
            count_max: 3,
            head_radius_min: 2.0,
            head_radius_max: 3.0,
            perspective: 1.0,
            overlap_cap: 0.0,
            clutter: 1,
            seed: 5,
        },
        1,
    )?
    .remove(0);
    let image = scene.to_tensor();
    let run = || -> Result<Vec<f64>> {
        let (set, _) = model.forward(&store, &image)?;
        Ok(set.points.iter().flat_map(|p| [p.prob, p.loc.0, p.loc.1]).collect())
    };
    let (a, b) = (run()?, run()?);
    Ok(vec![Check::new(
        "determinism/forward-bit-identical",
        a == b,
        format!("{} outputs compared", a.len()),
    )])
}

/// End-to-end gradient line for the selftest output.
pub fn end_to_end_suite() -> Result<Vec<Check>> {
    let (max_rel, checked) = end_to_end_gradient_check()?;
    Ok(vec![Check::new(
        "gradient/full-pipeline",
        max_rel < 1e-3,
        format!("max rel err {max_rel:.2e} over {checked} parameter coordinates"),
    )])
}

/// Everything the `selftest` command runs.
pub fn run_all() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    checks.extend(gradient_suite()?);
    checks.extend(end_to_end_suite()?);
    checks.extend(matching_suite(1000)?);
    checks.extend(quadtree_suite(500)?);
    checks.extend(split_loss_suite()?);
    checks.extend(determinism_suite()?);
    Ok(checks)
}
