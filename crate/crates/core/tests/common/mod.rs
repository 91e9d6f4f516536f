//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

use moundcount::annotations::{BoundingBox, ScoredBox};
use moundcount::raster::{EdgePolicy, PatchGrid};

/// Conjugate gradient on `(X'X + lambda I) w = X'y`, run until the residual
/// stops shrinking. Shares no code with the Cholesky path.
pub fn ridge_cg(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
    let m = x[0].len();
    let apply = |v: &[f64]| -> Vec<f64> {
        let xv: Vec<f64> = x.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect();
        (0..m)
            .map(|j| x.iter().zip(&xv).map(|(r, s)| r[j] * s).sum::<f64>() + lambda * v[j])
            .collect()
    };
    let b: Vec<f64> = (0..m).map(|j| x.iter().zip(y).map(|(r, yi)| r[j] * yi).sum()).collect();
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(p, q)| p * q).sum::<f64>();
    let mut w = vec![0.0; m];
    // restarts recompute the true residual and shed accumulated drift
    for _ in 0..20 {
        let aw = apply(&w);
        let mut r: Vec<f64> = b.iter().zip(&aw).map(|(bi, ai)| bi - ai).collect();
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        if rr == 0.0 {
            break;
        }
        for _ in 0..4 * m {
            let ap = apply(&p);
            let denom = dot(&p, &ap);
            if denom <= 0.0 {
                break;
            }
            let alpha = rr / denom;
            for j in 0..m {
                w[j] += alpha * p[j];
                r[j] -= alpha * ap[j];
            }
            let rr_new = dot(&r, &r);
            if rr_new == 0.0 {
                break;
            }
            let beta = rr_new / rr;
            for j in 0..m {
                p[j] = r[j] + beta * p[j];
            }
            rr = rr_new;
        }
    }
    w
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(p, q)| p - q).collect();
    norm(&d) / norm(b).max(f64::MIN_POSITIVE)
}

/// Plain intersection over union from corner coordinates.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ax1, ay0, ay1) = (a.cx - a.w / 2.0, a.cx + a.w / 2.0, a.cy - a.h / 2.0, a.cy + a.h / 2.0);
    let (bx0, bx1, by0, by1) = (b.cx - b.w / 2.0, b.cx + b.w / 2.0, b.cy - b.h / 2.0, b.cy + b.h / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Greedy matcher scanning every ground-truth box; returns the GT index
/// matched by each detection, in the detection's original order.
pub fn naive_greedy(dets: &[ScoredBox], gts: &[BoundingBox], thr: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable: equal confidences keep input order
    order.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap());
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for di in order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            let v = dets[di].bbox.iou(g);
            if !taken[gi] && v >= thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            out[di] = Some(gi);
        }
    }
    out
}

/// Largest possible number of detection/GT pairs with IoU at or above `thr`,
/// by exhaustive search over assignments.
pub fn max_matching(dets: &[ScoredBox], gts: &[BoundingBox], thr: f64) -> usize {
    fn go(i: usize, dets: &[ScoredBox], gts: &[BoundingBox], thr: f64, used: &mut Vec<bool>) -> usize {
        if i == dets.len() {
            return 0;
        }
        let mut best = go(i + 1, dets, gts, thr, used);
        for g in 0..gts.len() {
            if !used[g] && dets[i].bbox.iou(&gts[g]) >= thr {
                used[g] = true;
                best = best.max(1 + go(i + 1, dets, gts, thr, used));
                used[g] = false;
            }
        }
        best
    }
    go(0, dets, gts, thr, &mut vec![false; gts.len()])
}

/// Area under the interpolated precision curve, integrated over recall
/// levels `k / G` where `P_interp(r) = max { P_i : R_i >= r }`.
pub fn brute_force_ap(dets: &[ScoredBox], gts: &[BoundingBox], thr: f64) -> f64 {
    let matched = naive_greedy(dets, gts, thr);
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap());
    let g = gts.len();
    let mut tp = 0usize;
    let mut points = Vec::new();
    for (rank, &di) in order.iter().enumerate() {
        tp += matched[di].is_some() as usize;
        points.push((tp, tp as f64 / (rank + 1) as f64));
    }
    let mut area = 0.0;
    for k in 1..=g {
        let p = points
            .iter()
            .filter(|(t, _)| *t >= k)
            .map(|&(_, p)| p)
            .fold(0.0f64, f64::max);
        area += p / g as f64;
    }
    area
}

/// Student t CDF for integer degrees of freedom from the closed-form
/// finite series in `theta = atan(t / sqrt(df))`.
pub fn t_cdf_series(t: f64, df: u32) -> f64 {
    let theta = (t / (df as f64).sqrt()).atan();
    let (s, c) = theta.sin_cos();
    let a = if df % 2 == 1 {
        let mut sum = 0.0;
        if df > 1 {
            let mut term = c;
            sum = term;
            let mut k = 1;
            while 2 * k + 1 < df {
                term *= (2 * k) as f64 / (2 * k + 1) as f64 * c * c;
                sum += term;
                k += 1;
            }
        }
        2.0 / std::f64::consts::PI * (theta + s * sum)
    } else {
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1;
        while 2 * k < df {
            term *= (2 * k - 1) as f64 / (2 * k) as f64 * c * c;
            sum += term;
            k += 1;
        }
        s * sum
    };
    0.5 + 0.5 * a
}

/// Checks that the grid tiles the image: every pixel of the covered region
/// lies in exactly one patch, pixels outside it in none, lookups agree with
/// coverage and local/mosaic coordinates round-trip. Lookups of dropped
/// pixels are probed along the border of the kept region and the far corner.
pub fn check_partition(w: u32, h: u32, ps: u32, policy: EdgePolicy) -> Result<(), String> {
    let grid = match PatchGrid::new(w, h, ps, policy) {
        Ok(g) => g,
        Err(e) => {
            return if policy == EdgePolicy::Drop && (w < ps || h < ps) {
                Ok(())
            } else {
                Err(format!("{w}x{h}/{ps}/{policy}: {e}"))
            }
        }
    };
    let (ex, ey) = match policy {
        EdgePolicy::Partial | EdgePolicy::Pad => (w, h),
        EdgePolicy::Drop => ((w / ps) * ps, (h / ps) * ps),
    };
    let mut owner = vec![usize::MAX; (w * h) as usize];
    for (i, p) in grid.patches().enumerate() {
        if p.index != i {
            return Err(format!("{w}x{h}/{ps}/{policy}: patch {i} has index {}", p.index));
        }
        for ly in 0..p.h {
            for lx in 0..p.w {
                let (x, y) = (p.origin_x + lx, p.origin_y + ly);
                if x >= w || y >= h {
                    if policy != EdgePolicy::Pad {
                        return Err(format!("{w}x{h}/{ps}/{policy}: patch {i} extends past the image"));
                    }
                    continue;
                }
                let cell = &mut owner[(y * w + x) as usize];
                if *cell != usize::MAX {
                    return Err(format!("{w}x{h}/{ps}/{policy}: pixel ({x},{y}) covered twice"));
                }
                *cell = i;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let covered = owner[(y * w + x) as usize];
            let inside = x < ex && y < ey;
            match (inside, covered != usize::MAX) {
                (true, false) => return Err(format!("{w}x{h}/{ps}/{policy}: pixel ({x},{y}) uncovered")),
                (false, true) => return Err(format!("{w}x{h}/{ps}/{policy}: dropped pixel ({x},{y}) covered")),
                _ => {}
            }
            if inside {
                let (p, lx, ly) = grid.mosaic_to_patch(x, y).map_err(|e| e.to_string())?;
                if p.index != covered || (p.origin_x + lx, p.origin_y + ly) != (x, y) || !p.contains_local(lx, ly) {
                    return Err(format!("{w}x{h}/{ps}/{policy}: lookup of ({x},{y}) disagrees"));
                }
            } else if (x == ex || y == ey || (x, y) == (w - 1, h - 1)) && grid.mosaic_to_patch(x, y).is_ok() {
                // lookups outside the kept region are probed along its border
                return Err(format!("{w}x{h}/{ps}/{policy}: dropped pixel ({x},{y}) resolves"));
            }
        }
    }
    Ok(())
}

/// Four ground-truth boxes (two overlapping) and eight candidate detections
/// with tied and distinct confidences, hits, duplicates and strays.
pub fn ap_pool() -> (Vec<BoundingBox>, Vec<ScoredBox>) {
    let gt = vec![
        BoundingBox::new(20.0, 20.0, 10.0, 10.0).unwrap(),
        BoundingBox::new(24.0, 22.0, 10.0, 10.0).unwrap(),
        BoundingBox::new(60.0, 20.0, 12.0, 8.0).unwrap(),
        BoundingBox::new(60.0, 60.0, 9.0, 9.0).unwrap(),
    ];
    let dets = [
        (20.5, 20.0, 10.0, 10.0, 0.95),
        (23.0, 22.0, 10.0, 10.0, 0.90),
        (60.0, 21.0, 12.0, 8.0, 0.80),
        (61.0, 61.0, 9.0, 9.0, 0.80),
        (40.0, 40.0, 10.0, 10.0, 0.70),
        (22.0, 21.0, 11.0, 11.0, 0.60),
        (63.0, 20.0, 12.0, 8.0, 0.40),
        (5.0, 80.0, 6.0, 6.0, 0.30),
    ]
    .iter()
    .map(|&(cx, cy, w, h, confidence)| ScoredBox {
        bbox: BoundingBox::new(cx, cy, w, h).unwrap(),
        confidence,
    })
    .collect();
    (gt, dets)
}

/// Compares `average_precision` with [`brute_force_ap`] on every detection
/// subset of size at most 6 against every non-empty GT subset of the pool;
/// returns the number of cases checked.
pub fn exhaustive_ap_check(thresholds: &[f64]) -> Result<usize, String> {
    let (gt_pool, det_pool) = ap_pool();
    let mut checked = 0;
    for gmask in 1u32..(1 << gt_pool.len()) {
        let gts: Vec<BoundingBox> = (0..gt_pool.len()).filter(|i| gmask >> i & 1 == 1).map(|i| gt_pool[i]).collect();
        for dmask in (0u32..(1 << det_pool.len())).filter(|m| m.count_ones() <= 6) {
            let dets: Vec<ScoredBox> =
                (0..det_pool.len()).filter(|i| dmask >> i & 1 == 1).map(|i| det_pool[i]).collect();
            for &thr in thresholds {
                let ap = moundcount::metrics::average_precision(&dets, &gts, thr).map_err(|e| e.to_string())?;
                let oracle = brute_force_ap(&dets, &gts, thr);
                if (ap - oracle).abs() > 1e-12 {
                    return Err(format!("gt {gmask:04b} dets {dmask:08b} iou {thr}: {ap} vs {oracle}"));
                }
                checked += 1;
            }
        }
    }
    Ok(checked)
}
