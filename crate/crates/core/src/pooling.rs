//! Deformable patch pooling: differentiable extraction of per-point feature
//! patches from a dense 2D map.
//!
//! For every point with continuous pixel centre `(u, v)`, a K x K patch of
//! sampling positions is formed from a fixed integer grid plus optional
//! per-cell learned offsets.  The map is read at each position with clamped
//! bilinear interpolation, and the K^2 sampled feature vectors are reduced to
//! one vector by max, min or average.
//!
//! [`pool_samples`] performs the sampling as one tape operation producing the
//! `[n, k^2, d]` sample block; [`reduce_patch`] collapses it.  Max, min and
//! average pooling of the same patch therefore share a single sampling pass —
//! build a [`PooledFeatures`] when more than one reduction of the same patch
//! is needed.
//!
//! Gradients flow into the map (through the bilinear weights) and into the
//! offsets (through the spatial derivative of the interpolant).  Positions
//! clamped to the image border contribute zero coordinate gradient, matching
//! the flat extension of the map outside its bounds.
//!
//! [`brute_force_pool`] is an independent reference implementation used by
//! tests and the verification battery: plain nested loops, no tape, sharing
//! no code with the fast path.  It evaluates the same documented formula in
//! the same order, so agreement is expected to machine precision.
//!
//! Bilinear contract (per axis, extent `m`, coordinate `x`):
//! `xc = clamp(x, 0, m-1)`, `x0 = min(floor(xc), m-2)` (0 when `m == 1`),
//! `fx = xc - x0`, and the interpolated value is
//! `(v00*(1-fx) + v01*fx)*(1-fy) + (v10*(1-fx) + v11*fx)*fy`.
//! All pooling arithmetic uses plain multiply/add so that both routes and
//! every reduction agree bit for bit on lattice-aligned inputs.

use std::rc::Rc;

use crate::tensor::{record_binary_map, Tensor};

/// Patch reduction applied over the k^2 sampled positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Min,
    Avg,
}

/// The fixed sampling grid for an odd k: offsets `(du, dv)` relative to the
/// patch centre, ordered row-major over (dv, du) — all columns of the top row
/// first.  `k = 3` starts `(-1,-1), (0,-1), (1,-1), (-1,0), ...`.
pub fn base_grid(k: usize) -> Vec<(f64, f64)> {
    assert!(k % 2 == 1 && k >= 1, "patch size must be odd and positive, got {k}");
    let half = (k / 2) as isize;
    let mut grid = Vec::with_capacity(k * k);
    for dv in -half..=half {
        for du in -half..=half {
            grid.push((du as f64, dv as f64));
        }
    }
    grid
}

/// Precomputed bilinear tap for one axis pair: integer corner, fractional
/// weights and whether the coordinate derivative is live (not clamped).
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    dx_live: bool,
    dy_live: bool,
}

fn tap(x: f64, y: f64, h: usize, w: usize) -> Tap {
    assert!(x.is_finite() && y.is_finite(), "non-finite sampling position ({x}, {y})");
    let wm = (w - 1) as f64;
    let hm = (h - 1) as f64;
    let xc = x.clamp(0.0, wm);
    let yc = y.clamp(0.0, hm);
    let (x0, fx) = if w == 1 { (0, 0.0) } else {
        let x0 = (xc.floor() as usize).min(w - 2);
        (x0, xc - x0 as f64)
    };
    let (y0, fy) = if h == 1 { (0, 0.0) } else {
        let y0 = (yc.floor() as usize).min(h - 2);
        (y0, yc - y0 as f64)
    };
    Tap {
        x0,
        x1: if w == 1 { 0 } else { x0 + 1 },
        y0,
        y1: if h == 1 { 0 } else { y0 + 1 },
        fx,
        fy,
        dx_live: w > 1 && (0.0..=wm).contains(&x),
        dy_live: h > 1 && (0.0..=hm).contains(&y),
    }
}

/// Samples the map at every patch position of every point.
///
/// * `map`: `[h, w, d]` feature map (differentiable input).
/// * `centers`: per-point `(u, v)` pixel centres, plain data.
/// * `offsets`: optional `[n, k^2, 2]` learned displacements, last axis
///   `(du, dv)` (differentiable input).  `None` means an all-zero offset.
/// * returns `[n, k^2, d]`.
pub fn pool_samples(
    map: &Tensor,
    centers: &[(f64, f64)],
    offsets: Option<&Tensor>,
    k: usize,
) -> Tensor {
    assert_eq!(map.rank(), 3, "expected an [h, w, d] map, got {:?}", map.shape());
    let (h, w, d) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let n = centers.len();
    let kk = k * k;
    if let Some(off) = offsets {
        assert_eq!(
            off.shape(),
            &[n, kk, 2],
            "offsets must be [n, k^2, 2] = [{n}, {kk}, 2], got {:?}",
            off.shape()
        );
    }
    let grid = base_grid(k);
    let centers: Rc<[(f64, f64)]> = centers.into();

    let forward = {
        let grid = grid.clone();
        let centers = Rc::clone(&centers);
        move |map: &[f64], off: Option<&[f64]>| -> Vec<f64> {
            let mut out = vec![0.0; n * kk * d];
            for i in 0..n {
                let (cu, cv) = centers[i];
                for j in 0..kk {
                    let (mut u, mut v) = (cu + grid[j].0, cv + grid[j].1);
                    if let Some(off) = off {
                        u += off[(i * kk + j) * 2];
                        v += off[(i * kk + j) * 2 + 1];
                    }
                    let t = tap(u, v, h, w);
                    let r00 = &map[(t.y0 * w + t.x0) * d..][..d];
                    let r01 = &map[(t.y0 * w + t.x1) * d..][..d];
                    let r10 = &map[(t.y1 * w + t.x0) * d..][..d];
                    let r11 = &map[(t.y1 * w + t.x1) * d..][..d];
                    let (gx, gy) = (1.0 - t.fx, 1.0 - t.fy);
                    let orow = &mut out[(i * kk + j) * d..][..d];
                    for c in 0..d {
                        orow[c] = (r00[c] * gx + r01[c] * t.fx) * gy
                            + (r10[c] * gx + r11[c] * t.fx) * t.fy;
                    }
                }
            }
            out
        }
    };

    let backward = {
        let grid = grid.clone();
        let centers = Rc::clone(&centers);
        move |g: &[f64],
              map: &[f64],
              off: Option<&[f64]>,
              d_map: Option<&mut [f64]>,
              d_off: Option<&mut [f64]>| {
            // Taps are cheap to recompute; doing so keeps the forward free of
            // per-sample bookkeeping allocations.
            let mut d_map = d_map;
            let mut d_off = d_off;
            for i in 0..n {
                let (cu, cv) = centers[i];
                for j in 0..kk {
                    let (mut u, mut v) = (cu + grid[j].0, cv + grid[j].1);
                    if let Some(off) = off {
                        u += off[(i * kk + j) * 2];
                        v += off[(i * kk + j) * 2 + 1];
                    }
                    let grow = &g[(i * kk + j) * d..][..d];
                    if grow.iter().all(|&gc| gc == 0.0) {
                        continue;
                    }
                    let t = tap(u, v, h, w);
                    let b00 = (t.y0 * w + t.x0) * d;
                    let b01 = (t.y0 * w + t.x1) * d;
                    let b10 = (t.y1 * w + t.x0) * d;
                    let b11 = (t.y1 * w + t.x1) * d;
                    let (gx, gy) = (1.0 - t.fx, 1.0 - t.fy);
                    if let Some(dm) = d_map.as_deref_mut() {
                        let (w00, w01) = (gx * gy, t.fx * gy);
                        let (w10, w11) = (gx * t.fy, t.fx * t.fy);
                        for (dst, &gc) in dm[b00..b00 + d].iter_mut().zip(grow) {
                            *dst += gc * w00;
                        }
                        for (dst, &gc) in dm[b01..b01 + d].iter_mut().zip(grow) {
                            *dst += gc * w01;
                        }
                        for (dst, &gc) in dm[b10..b10 + d].iter_mut().zip(grow) {
                            *dst += gc * w10;
                        }
                        for (dst, &gc) in dm[b11..b11 + d].iter_mut().zip(grow) {
                            *dst += gc * w11;
                        }
                    }
                    if let Some(doff) = d_off.as_deref_mut() {
                        if t.dx_live || t.dy_live {
                            let r00 = &map[b00..b00 + d];
                            let r01 = &map[b01..b01 + d];
                            let r10 = &map[b10..b10 + d];
                            let r11 = &map[b11..b11 + d];
                            let (mut gu, mut gv) = (0.0, 0.0);
                            for c in 0..d {
                                let gc = grow[c];
                                gu += gc * ((r01[c] - r00[c]) * gy + (r11[c] - r10[c]) * t.fy);
                                gv += gc * ((r10[c] - r00[c]) * gx + (r11[c] - r01[c]) * t.fx);
                            }
                            if t.dx_live {
                                doff[(i * kk + j) * 2] += gu;
                            }
                            if t.dy_live {
                                doff[(i * kk + j) * 2 + 1] += gv;
                            }
                        }
                    }
                }
            }
        }
    };

    record_binary_map(map, offsets, &[n, kk, d], forward, backward)
}

/// Collapses `[n, k^2, d]` samples to `[n, d]`.  Max and min route the
/// gradient to the first extremal sample in patch order; average spreads it
/// uniformly.
pub fn reduce_patch(samples: &Tensor, mode: PoolMode) -> Tensor {
    assert_eq!(samples.rank(), 3, "expected [n, k^2, d] samples, got {:?}", samples.shape());
    let (n, kk, d) = (samples.shape()[0], samples.shape()[1], samples.shape()[2]);
    let data = samples.data();
    let mut out = vec![0.0; n * d];
    // The winning patch index per output element, for max/min backward.
    let mut args: Vec<u32> = Vec::new();
    // Patch-cell-major loops keep the channel dimension innermost and
    // contiguous; each output element still accumulates (or scans) its k^2
    // samples in ascending patch order.
    match mode {
        PoolMode::Avg => {
            let inv = 1.0 / kk as f64;
            for i in 0..n {
                let orow = &mut out[i * d..(i + 1) * d];
                for j in 0..kk {
                    for (o, &v) in orow.iter_mut().zip(&data[(i * kk + j) * d..][..d]) {
                        *o += v;
                    }
                }
                for o in orow {
                    *o *= inv;
                }
            }
        }
        PoolMode::Max | PoolMode::Min => {
            args = vec![0; n * d];
            for i in 0..n {
                let orow = &mut out[i * d..(i + 1) * d];
                let arow = &mut args[i * d..(i + 1) * d];
                orow.copy_from_slice(&data[i * kk * d..][..d]);
                for j in 1..kk {
                    let srow = &data[(i * kk + j) * d..][..d];
                    for c in 0..d {
                        let v = srow[c];
                        let better = match mode {
                            PoolMode::Max => v > orow[c],
                            _ => v < orow[c],
                        };
                        if better {
                            orow[c] = v;
                            arow[c] = j as u32;
                        }
                    }
                }
            }
        }
    }
    let args: Rc<[u32]> = args.into();
    crate::tensor::record_unary_map(samples, &[n, d], out, move |g, dx| match mode {
        PoolMode::Avg => {
            let inv = 1.0 / kk as f64;
            for i in 0..n {
                let grow = &g[i * d..(i + 1) * d];
                for j in 0..kk {
                    let drow = &mut dx[(i * kk + j) * d..][..d];
                    for (dc, &gc) in drow.iter_mut().zip(grow) {
                        *dc += gc * inv;
                    }
                }
            }
        }
        _ => {
            for i in 0..n {
                for c in 0..d {
                    let j = args[i * d + c] as usize;
                    dx[(i * kk + j) * d + c] += g[i * d + c];
                }
            }
        }
    })
}

/// One-call convenience: sample then reduce.
pub fn deformable_pool(
    map: &Tensor,
    centers: &[(f64, f64)],
    offsets: Option<&Tensor>,
    k: usize,
    mode: PoolMode,
) -> Tensor {
    reduce_patch(&pool_samples(map, centers, offsets, k), mode)
}

/// Max, min and average reductions of one shared sampling pass over patch
/// features (`[n, d]` each).
pub struct PooledFeatures {
    pub max: Tensor,
    pub min: Tensor,
    pub avg: Tensor,
}

pub fn pool_features(
    map: &Tensor,
    centers: &[(f64, f64)],
    offsets: Option<&Tensor>,
    k: usize,
) -> PooledFeatures {
    let samples = pool_samples(map, centers, offsets, k);
    PooledFeatures {
        max: reduce_patch(&samples, PoolMode::Max),
        min: reduce_patch(&samples, PoolMode::Min),
        avg: reduce_patch(&samples, PoolMode::Avg),
    }
}

/// Single clamped bilinear read of the map at a continuous position given as
/// two scalar tensors, `[h, w, d] -> [d]`.  Differentiable with respect to
/// the map and to both coordinates (the coordinate gradient is zero where
/// the position clamps to the border).
pub fn bilinear_sample(map: &Tensor, x: &Tensor, y: &Tensor) -> Tensor {
    assert_eq!(x.len(), 1, "x must be scalar-shaped, got {:?}", x.shape());
    assert_eq!(y.len(), 1, "y must be scalar-shaped, got {:?}", y.shape());
    let d = map.shape()[2];
    // Route through the fused sampler: a 1x1 patch at centre (0, 0) whose
    // offset carries the coordinates, so their gradients flow.
    let offsets = Tensor::concat_rows(&[&x.reshape(&[1, 1]), &y.reshape(&[1, 1])]).reshape(&[
        1, 1, 2,
    ]);
    pool_samples(map, &[(0.0, 0.0)], Some(&offsets), 1).reshape(&[d])
}

/// Reference pooling: straightforward nested loops over points, patch cells
/// and channels, with the clamped bilinear read written out inline.  Kept
/// deliberately separate from the tape implementation — tests compare the
/// two routes, so they must not share arithmetic.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_pool(
    map: &[f64],
    h: usize,
    w: usize,
    d: usize,
    centers: &[(f64, f64)],
    offsets: Option<&[f64]>,
    k: usize,
    mode: PoolMode,
) -> Vec<f64> {
    assert!(k % 2 == 1 && k >= 1);
    assert_eq!(map.len(), h * w * d);
    let n = centers.len();
    let kk = k * k;
    if let Some(off) = offsets {
        assert_eq!(off.len(), n * kk * 2);
    }
    let half = (k / 2) as f64;
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            let mut acc = 0.0;
            let mut best = f64::NAN;
            for j in 0..kk {
                let dv = (j / k) as f64 - half;
                let du = (j % k) as f64 - half;
                let mut u = centers[i].0 + du;
                let mut v = centers[i].1 + dv;
                if let Some(off) = offsets {
                    u += off[(i * kk + j) * 2];
                    v += off[(i * kk + j) * 2 + 1];
                }
                // Clamped bilinear read, spelled out.
                let uc = u.clamp(0.0, (w - 1) as f64);
                let vc = v.clamp(0.0, (h - 1) as f64);
                let (x0, fx) = if w == 1 {
                    (0usize, 0.0)
                } else {
                    let x0 = (uc.floor() as usize).min(w - 2);
                    (x0, uc - x0 as f64)
                };
                let (y0, fy) = if h == 1 {
                    (0usize, 0.0)
                } else {
                    let y0 = (vc.floor() as usize).min(h - 2);
                    (y0, vc - y0 as f64)
                };
                let x1 = if w == 1 { 0 } else { x0 + 1 };
                let y1 = if h == 1 { 0 } else { y0 + 1 };
                let v00 = map[(y0 * w + x0) * d + c];
                let v01 = map[(y0 * w + x1) * d + c];
                let v10 = map[(y1 * w + x0) * d + c];
                let v11 = map[(y1 * w + x1) * d + c];
                let val = (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy)
                    + (v10 * (1.0 - fx) + v11 * fx) * fy;
                match mode {
                    PoolMode::Avg => acc += val,
                    PoolMode::Max => {
                        if j == 0 || val > best {
                            best = val;
                        }
                    }
                    PoolMode::Min => {
                        if j == 0 || val < best {
                            best = val;
                        }
                    }
                }
            }
            out[i * d + c] = match mode {
                PoolMode::Avg => acc * (1.0 / kk as f64),
                _ => best,
            };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::{grad_check_default, Tape};
    use rand::Rng;

    fn random_case(
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> (usize, usize, usize, Vec<f64>, Vec<(f64, f64)>, usize, Vec<f64>) {
        let h = rng.random_range(1..7usize);
        let w = rng.random_range(1..7usize);
        let d = rng.random_range(1..4usize);
        let k = [1usize, 3, 5][rng.random_range(0..3usize)];
        let n = rng.random_range(1..6usize);
        let map: Vec<f64> = (0..h * w * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let centers: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                (
                    rng.random_range(-1.5..w as f64 + 1.5),
                    rng.random_range(-1.5..h as f64 + 1.5),
                )
            })
            .collect();
        let offsets: Vec<f64> =
            (0..n * k * k * 2).map(|_| rng.random_range(-2.5..2.5)).collect();
        (h, w, d, map, centers, k, offsets)
    }

    #[test]
    fn matches_reference_on_random_cases() {
        let mut rng = stream(42, "pool-oracle");
        for case in 0..1000 {
            let (h, w, d, map, centers, k, offsets) = random_case(&mut rng);
            let tape = Tape::new();
            let map_t = tape.leaf(&[h, w, d], map.clone());
            let off_t = tape.leaf(&[centers.len(), k * k, 2], offsets.clone());
            for mode in [PoolMode::Max, PoolMode::Min, PoolMode::Avg] {
                let fast = deformable_pool(&map_t, &centers, Some(&off_t), k, mode);
                let slow =
                    brute_force_pool(&map, h, w, d, &centers, Some(&offsets), k, mode);
                for (i, (a, b)) in fast.data().iter().zip(&slow).enumerate() {
                    assert!(
                        (a - b).abs() <= 1e-12,
                        "case {case} mode {mode:?} elem {i}: fast {a} vs reference {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_offsets_reduce_to_integer_grid_pooling_bitwise() {
        let mut rng = stream(7, "pool-grid");
        for _ in 0..50 {
            let h = rng.random_range(3..8usize);
            let w = rng.random_range(3..8usize);
            let d = 2;
            let k = 3;
            let map: Vec<f64> = (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            // Integer centres in the interior so no clamping occurs.
            let centers: Vec<(f64, f64)> = vec![(1.0, 1.0), ((w - 2) as f64, (h - 2) as f64)];
            let map_t = Tensor::constant(&[h, w, d], map.clone());
            let pooled = deformable_pool(&map_t, &centers, None, k, PoolMode::Max);
            // Direct integer-grid max pooling, no interpolation at all.
            for (i, &(cu, cv)) in centers.iter().enumerate() {
                for c in 0..d {
                    let mut best = f64::NEG_INFINITY;
                    for dv in -1i64..=1 {
                        for du in -1i64..=1 {
                            let x = (cu as i64 + du) as usize;
                            let y = (cv as i64 + dv) as usize;
                            best = best.max(map[(y * w + x) * d + c]);
                        }
                    }
                    let got = pooled.data()[i * d + c];
                    assert_eq!(got.to_bits(), best.to_bits());
                }
            }
        }
    }

    #[test]
    fn k1_is_plain_bilinear_sampling() {
        let map = Tensor::constant(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]);
        let pooled = deformable_pool(&map, &[(0.5, 0.5)], None, 1, PoolMode::Avg);
        // Centre of the 2x2 cell: mean of all four corners.
        assert_eq!(pooled.data(), &[1.5]);
    }

    #[test]
    fn border_positions_clamp_to_edge_values() {
        let map = Tensor::constant(&[2, 3, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        // Far outside the image on all sides.
        let pooled = deformable_pool(&map, &[(-10.0, -10.0)], None, 1, PoolMode::Avg);
        assert_eq!(pooled.data(), &[1.0]);
        let pooled = deformable_pool(&map, &[(100.0, 100.0)], None, 1, PoolMode::Avg);
        assert_eq!(pooled.data(), &[6.0]);
    }

    #[test]
    fn single_row_and_column_maps_are_handled() {
        let map = Tensor::constant(&[1, 1, 2], vec![4.0, 7.0]);
        let pooled = deformable_pool(&map, &[(0.3, -2.0)], None, 3, PoolMode::Max);
        assert_eq!(pooled.data(), &[4.0, 7.0]);
    }

    #[test]
    fn max_ties_route_gradient_to_first_patch_cell() {
        // A constant map: every sample ties, so the winner must be cell 0.
        let tape = Tape::new();
        let map = tape.leaf(&[3, 3, 1], vec![2.0; 9]);
        let samples = pool_samples(&map, &[(1.0, 1.0)], None, 3);
        let pooled = reduce_patch(&samples, PoolMode::Max);
        let grads = tape.backward(&pooled.sum()).unwrap();
        let g = grads.wrt(&map).unwrap();
        // Cell 0 of the patch samples pixel (0, 0).
        assert_eq!(g[0], 1.0);
        assert_eq!(g[1..], [0.0; 8]);
    }

    #[test]
    fn map_gradients_match_finite_differences() {
        let mut rng = stream(3, "pool-fd-map");
        for _ in 0..30 {
            let (h, w, d) = (4, 5, 2);
            let k = 3;
            let centers = vec![(1.3, 1.7), (3.4, 2.2)];
            let offsets: Vec<f64> =
                (0..centers.len() * k * k * 2).map(|_| rng.random_range(-0.4..0.4)).collect();
            let x0: Vec<f64> = (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            for mode in [PoolMode::Max, PoolMode::Min, PoolMode::Avg] {
                let centers = centers.clone();
                let offsets = offsets.clone();
                let f = move |map: &Tensor| {
                    let off = Tensor::constant(&[2, 9, 2], offsets.clone());
                    deformable_pool(map, &centers, Some(&off), k, mode).sum()
                };
                let report = grad_check_default(&f, &[h, w, d], &x0);
                assert!(report.pass(), "mode {mode:?}: {report}");
            }
        }
    }

    #[test]
    fn offset_gradients_match_finite_differences() {
        let mut rng = stream(4, "pool-fd-off");
        let (h, w, d) = (5, 6, 3);
        let k = 3;
        let map: Vec<f64> = (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..30 {
            let centers = vec![(2.0, 2.0), (3.0, 1.0)];
            // Offsets keep every position strictly inside one bilinear cell,
            // away from the integer lattice where the interpolant kinks.
            let x0: Vec<f64> = (0..centers.len() * k * k * 2)
                .map(|_| rng.random_range(0.25..0.65))
                .collect();
            let map = map.clone();
            let f = move |off: &Tensor| {
                let map = Tensor::constant(&[h, w, d], map.clone());
                deformable_pool(&map, &centers, Some(off), k, PoolMode::Avg).sum()
            };
            let report = grad_check_default(&f, &[2, k * k, 2], &x0);
            assert!(report.pass(), "{report}");
        }
    }

    #[test]
    fn clamped_positions_have_zero_offset_gradient() {
        let tape = Tape::new();
        let map = Tensor::constant(&[3, 3, 1], (0..9).map(f64::from).collect::<Vec<_>>());
        // Push the single sample far outside: value clamps, gradient dies.
        let off = tape.leaf(&[1, 1, 2], vec![50.0, 50.0]);
        let pooled = deformable_pool(&map, &[(1.0, 1.0)], Some(&off), 1, PoolMode::Avg);
        assert_eq!(pooled.data(), &[8.0]);
        let grads = tape.backward(&pooled.sum()).unwrap();
        assert_eq!(grads.wrt(&off).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn triple_shares_one_sampling_pass_and_orders_correctly() {
        let mut rng = stream(9, "pool-triple");
        let (h, w, d) = (4, 4, 2);
        let map: Vec<f64> = (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let map_t = Tensor::constant(&[h, w, d], map);
        let centers = vec![(1.2, 2.1), (2.9, 0.4)];
        let triple = pool_features(&map_t, &centers, None, 3);
        for i in 0..centers.len() * d {
            let (mx, mn, av) = (triple.max.data()[i], triple.min.data()[i], triple.avg.data()[i]);
            assert!(mn <= av && av <= mx, "ordering violated: {mn} {av} {mx}");
        }
    }

    #[test]
    fn bilinear_sample_matches_contract_and_differentiates_coordinates() {
        let tape = Tape::new();
        // 2x2 single-channel map [[1, 2], [3, 4]]; midpoint reads 2.5.
        let map = tape.leaf(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let x = tape.leaf(&[1], vec![0.5]);
        let y = tape.leaf(&[1], vec![0.5]);
        let out = bilinear_sample(&map, &x, &y);
        assert_eq!(out.shape(), &[1]);
        assert!((out.data()[0] - 2.5).abs() < 1e-15);
        let grads = tape.backward(&out.sum()).unwrap();
        // d/dx at the midpoint: ((2-1)*(1-fy) + (4-3)*fy) = 1; likewise d/dy.
        assert!((grads.wrt(&x).unwrap()[0] - 1.0).abs() < 1e-12);
        assert!((grads.wrt(&y).unwrap()[0] - 2.0).abs() < 1e-12);

        // Integer coordinates read the grid row exactly.
        let tape = Tape::new();
        let map = tape.leaf(&[2, 2, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]);
        let x = tape.leaf(&[1], vec![1.0]);
        let y = tape.leaf(&[1], vec![1.0]);
        let out = bilinear_sample(&map, &x, &y);
        assert_eq!(out.data(), &[4.0, 40.0]);

        // Out-of-range coordinates clamp to the border and stop the
        // coordinate gradient.
        let tape = Tape::new();
        let map = tape.leaf(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let x = tape.leaf(&[1], vec![9.0]);
        let y = tape.leaf(&[1], vec![-3.0]);
        let out = bilinear_sample(&map, &x, &y);
        assert_eq!(out.data(), &[2.0]);
        let grads = tape.backward(&out.sum()).unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[0.0]);
        assert_eq!(grads.wrt(&y).unwrap(), &[0.0]);
    }

    #[test]
    #[should_panic(expected = "odd")]
    fn even_patch_size_is_rejected() {
        base_grid(4);
    }
}
