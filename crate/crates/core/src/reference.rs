//! Transparent, unoptimized reference implementations used as oracles by
//! the test suites. Everything here trades speed for being obviously
//! correct: direct scalar loops, no caching, no shared plumbing with the
//! production paths beyond the scalar formulas themselves.

use crate::fasm::FamBlock;
use crate::metrics::{oks, ImageEval, OksParams};
use crate::tensor::{Shape, Tensor};

/// Direct scalar convolution accumulating per output position in
/// (channel, ky, kx) order, skipping zero weights and applying bias last:
/// the same floating-point operation order as the production kernel,
/// without any of its plumbing.
pub fn naive_conv2d(
    weight: &Tensor<f64>,
    bias: &Tensor<f64>,
    x: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (oc, ic, k) = {
        let w = weight.shape();
        (w.n, w.c, w.h)
    };
    let sh = x.shape();
    let oh = (sh.h + 2 * pad - k) / stride + 1;
    let ow = (sh.w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(sh.n, oc, oh, ow));
    for n in 0..sh.n {
        for o in 0..oc {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0f64;
                    for c in 0..ic {
                        for ky in 0..k {
                            for kx in 0..k {
                                let wv = weight.at(o, c, ky, kx);
                                if wv == 0.0 {
                                    continue;
                                }
                                let iy = (y * stride + ky) as i64 - pad as i64;
                                let ix = (xx * stride + kx) as i64 - pad as i64;
                                let xv = if iy >= 0
                                    && ix >= 0
                                    && (iy as usize) < sh.h
                                    && (ix as usize) < sh.w
                                {
                                    x.at(n, c, iy as usize, ix as usize)
                                } else {
                                    0.0
                                };
                                acc += wv * xv;
                            }
                        }
                    }
                    let b = bias.data()[o];
                    if b != 0.0 {
                        acc += b;
                    }
                    out.set(n, o, y, xx, acc);
                }
            }
        }
    }
    out
}

/// Sequential aggregation reference: materialize every split output in a
/// full buffer with direct channel indexing, no split/concat plumbing.
pub fn naive_fam_forward(fam: &FamBlock<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let u = naive_conv2d(&fam.pre_conv.weight, &fam.pre_conv.bias, x, fam.pre_conv.stride, 0);
    let ush = u.shape();
    let group = ush.c / fam.s;
    let mut ys = Tensor::zeros(ush);
    for n in 0..ush.n {
        for c in 0..group {
            for h in 0..ush.h {
                for w in 0..ush.w {
                    ys.set(n, c, h, w, u.at(n, c, h, w));
                }
            }
        }
    }
    for i in 1..fam.s {
        // z = x_i + y_{i-1}, both living inside the full buffers.
        let mut z = Tensor::zeros(Shape::new(ush.n, group, ush.h, ush.w));
        for n in 0..ush.n {
            for c in 0..group {
                for h in 0..ush.h {
                    for w in 0..ush.w {
                        let v =
                            u.at(n, i * group + c, h, w) + ys.at(n, (i - 1) * group + c, h, w);
                        z.set(n, c, h, w, v);
                    }
                }
            }
        }
        let yi = naive_conv2d(&fam.g[i - 1].weight, &fam.g[i - 1].bias, &z, 1, 1);
        for n in 0..ush.n {
            for c in 0..group {
                for h in 0..ush.h {
                    for w in 0..ush.w {
                        ys.set(n, i * group + c, h, w, yi.at(n, c, h, w));
                    }
                }
            }
        }
    }
    naive_conv2d(&fam.post_conv.weight, &fam.post_conv.bias, &ys, 1, 0)
}

/// Brute-force AP/AR over the same greedy matching policy as the
/// production evaluator, written with nothing but repeated linear scans:
/// selection instead of sorting, per-query OKS recomputation instead of a
/// similarity matrix, and a direct max-over-qualifying-ranks search for
/// each of the 101 interpolation points instead of a precision envelope.
pub fn bruteforce_oks_ap(
    images: &[ImageEval],
    params: &OksParams,
    thresholds: &[f64],
) -> crate::error::Result<(Vec<f64>, Vec<f64>)> {
    const MAX_DETS: usize = 20;
    struct Det {
        score: f64,
        image_pos: usize,
        local_pos: usize,
        tp: Vec<bool>,
    }

    let mut total_gt = 0usize;
    let mut dets: Vec<Det> = Vec::new();
    for (image_pos, img) in images.iter().enumerate() {
        let mut gt_idx = Vec::new();
        for (gi, g) in img.gts.iter().enumerate() {
            let mut labeled = false;
            for kp in &g.pose.keypoints {
                if kp.v > 0 {
                    labeled = true;
                }
            }
            if labeled {
                gt_idx.push(gi);
            }
        }
        total_gt += gt_idx.len();

        // Score-descending order by repeated selection; earliest index
        // wins ties, matching a stable descending sort.
        let mut used = vec![false; img.preds.len()];
        let mut order = Vec::new();
        loop {
            if order.len() == img.preds.len() || order.len() == MAX_DETS {
                break;
            }
            let mut best: Option<usize> = None;
            for (i, pred) in img.preds.iter().enumerate() {
                if used[i] {
                    continue;
                }
                match best {
                    None => best = Some(i),
                    Some(b) => {
                        if pred.score > img.preds[b].score {
                            best = Some(i);
                        }
                    }
                }
            }
            let b = best.expect("loop bound guarantees a candidate");
            used[b] = true;
            order.push(b);
        }

        let mut tp = vec![vec![false; thresholds.len()]; order.len()];
        for (ti, &thr) in thresholds.iter().enumerate() {
            let mut taken = vec![false; gt_idx.len()];
            for (rank, &p) in order.iter().enumerate() {
                let mut best: Option<(usize, f64)> = None;
                for (slot, &gi) in gt_idx.iter().enumerate() {
                    if taken[slot] {
                        continue;
                    }
                    let g = &img.gts[gi];
                    let sim = oks(&img.preds[p].pose, &g.pose, g.area, params)?;
                    match best {
                        None => best = Some((slot, sim)),
                        Some((_, bs)) => {
                            if sim > bs {
                                best = Some((slot, sim));
                            }
                        }
                    }
                }
                if let Some((slot, sim)) = best {
                    if sim >= thr {
                        taken[slot] = true;
                        tp[rank][ti] = true;
                    }
                }
            }
        }
        for (local_pos, (&p, tp_row)) in order.iter().zip(tp).enumerate() {
            dets.push(Det { score: img.preds[p].score, image_pos, local_pos, tp: tp_row });
        }
    }

    // Global rank by repeated selection: higher score first, then earlier
    // image, then earlier local rank.
    let mut picked = vec![false; dets.len()];
    let mut ranking = Vec::with_capacity(dets.len());
    for _ in 0..dets.len() {
        let mut best: Option<usize> = None;
        for (i, d) in dets.iter().enumerate() {
            if picked[i] {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => {
                    let o = &dets[b];
                    d.score > o.score
                        || (d.score == o.score
                            && (d.image_pos < o.image_pos
                                || (d.image_pos == o.image_pos && d.local_pos < o.local_pos)))
                }
            };
            if better {
                best = Some(i);
            }
        }
        let b = best.expect("unpicked detection exists");
        picked[b] = true;
        ranking.push(b);
    }

    let mut ap = Vec::with_capacity(thresholds.len());
    let mut ar = Vec::with_capacity(thresholds.len());
    for ti in 0..thresholds.len() {
        let mut tp_count = 0usize;
        let mut precision = Vec::new();
        let mut recall = Vec::new();
        for (i, &r) in ranking.iter().enumerate() {
            if dets[r].tp[ti] {
                tp_count += 1;
            }
            precision.push(tp_count as f64 / (i + 1) as f64);
            recall.push(if total_gt == 0 { 0.0 } else { tp_count as f64 / total_gt as f64 });
        }
        let mut total = 0.0f64;
        for j in 0..=100 {
            let want = j as f64 / 100.0;
            let mut best = 0.0f64;
            for i in 0..precision.len() {
                if recall[i] >= want && precision[i] > best {
                    best = precision[i];
                }
            }
            total += best;
        }
        ap.push(total / 101.0);
        ar.push(if total_gt == 0 { 0.0 } else { tp_count as f64 / total_gt as f64 });
    }
    Ok((ap, ar))
}
