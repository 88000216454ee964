//! Spatio-temporal tube construction: per-frame tracking quadrilaterals are
//! rasterized onto the feature grid by exact convex-polygon clipping, grouped
//! `stride` frames per feature time-step, and OR-combined into per-(clip, t)
//! position sets.
//!
//! Coordinates: frame pixels have origin top-left, x right, y down. Grid cell
//! (i, j) is row i, column j; in grid units it spans x in [j, j+1] and
//! y in [i, i+1].

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// One tracking box: a simple convex quadrilateral in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackBox {
    pub frame: usize,
    pub pts: [[f64; 2]; 4],
}

impl TrackBox {
    pub fn new(frame: usize, pts: [[f64; 2]; 4]) -> Result<TrackBox> {
        for p in &pts {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::Geometry(format!(
                    "frame {frame}: non-finite box coordinate"
                )));
            }
        }
        let area = polygon_area(&pts.iter().map(|p| *p).collect::<Vec<_>>());
        if area.abs() <= 0.0 {
            return Err(Error::Geometry(format!(
                "frame {frame}: degenerate (zero-area) box"
            )));
        }
        // convex and simple: consecutive-edge cross products never flip sign
        let mut pos = false;
        let mut neg = false;
        for k in 0..4 {
            let a = pts[k];
            let b = pts[(k + 1) % 4];
            let c = pts[(k + 2) % 4];
            let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
            if cross > 0.0 {
                pos = true;
            } else if cross < 0.0 {
                neg = true;
            }
        }
        if pos && neg {
            return Err(Error::Geometry(format!(
                "frame {frame}: box vertices are not convex in order"
            )));
        }
        Ok(TrackBox { frame, pts })
    }

    /// Axis-aligned rectangle helper, vertices in CCW pixel order.
    pub fn rect(frame: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> Result<TrackBox> {
        TrackBox::new(frame, [[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    }
}

/// One clip's window of frame indices: [start, start + len).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRange {
    pub start: usize,
    pub len: usize,
}

/// Mapping from video frames and pixels to the feature grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub frame_w: f64,
    pub frame_h: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Frames per feature time-step (temporal pooling factor).
    pub stride: usize,
    pub clips: Vec<FrameRange>,
}

impl GridSpec {
    pub fn new(
        frame_w: f64,
        frame_h: f64,
        grid_h: usize,
        grid_w: usize,
        stride: usize,
        clips: Vec<FrameRange>,
    ) -> Result<GridSpec> {
        if !(frame_w > 0.0 && frame_h > 0.0 && frame_w.is_finite() && frame_h.is_finite()) {
            return Err(Error::Config(format!(
                "frame size must be positive, got {frame_w}x{frame_h}"
            )));
        }
        if grid_h == 0 || grid_w == 0 || stride == 0 {
            return Err(Error::Config(
                "grid dims and stride must be >= 1".to_string(),
            ));
        }
        if clips.is_empty() {
            return Err(Error::Config("clip layout must list >= 1 clip".to_string()));
        }
        let t0 = time_steps(clips[0].len, stride);
        for (c, r) in clips.iter().enumerate() {
            if r.len == 0 {
                return Err(Error::Config(format!("clip {c} has zero frames")));
            }
            if time_steps(r.len, stride) != t0 {
                return Err(Error::Config(format!(
                    "clip {c} yields {} time steps, clip 0 yields {t0}; clips must agree",
                    time_steps(r.len, stride)
                )));
            }
        }
        Ok(GridSpec {
            frame_w,
            frame_h,
            grid_h,
            grid_w,
            stride,
            clips,
        })
    }

    /// Number of clips N.
    pub fn n_clips(&self) -> usize {
        self.clips.len()
    }

    /// Feature time-steps per clip T; the last group takes the remaining
    /// frames when the clip length is not divisible by the stride.
    pub fn t_steps(&self) -> usize {
        time_steps(self.clips[0].len, self.stride)
    }

    /// Video frame indices feeding feature step (clip, t).
    pub fn frames_for(&self, clip: usize, t: usize) -> std::ops::Range<usize> {
        let r = self.clips[clip];
        let lo = r.start + t * self.stride;
        let hi = r.start + ((t + 1) * self.stride).min(r.len);
        lo..hi
    }
}

fn time_steps(clip_len: usize, stride: usize) -> usize {
    clip_len.div_ceil(stride)
}

/// Evenly spaced clip windows of `clip_len` frames over a `video_len`-frame
/// video; overlap is allowed and expected for the default 103/10/16 layout.
pub fn uniform_clips(video_len: usize, n_clips: usize, clip_len: usize) -> Result<Vec<FrameRange>> {
    if n_clips == 0 || clip_len == 0 {
        return Err(Error::Config("need >= 1 clip of >= 1 frame".to_string()));
    }
    if clip_len > video_len {
        return Err(Error::Config(format!(
            "clip length {clip_len} exceeds video length {video_len}"
        )));
    }
    let mut clips = Vec::with_capacity(n_clips);
    for c in 0..n_clips {
        let start = if n_clips == 1 {
            0
        } else {
            // round(c * (L - M) / (N - 1))
            (c * (video_len - clip_len) * 2 + (n_clips - 1)) / (2 * (n_clips - 1))
        };
        clips.push(FrameRange {
            start,
            len: clip_len,
        });
    }
    Ok(clips)
}

/// Selected grid positions per (clip, time), with the matching boolean masks.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeIndex {
    n: usize,
    t: usize,
    h: usize,
    w: usize,
    masks: Vec<bool>,
    positions: Vec<Vec<(u32, u32)>>,
    total: usize,
}

impl TubeIndex {
    pub fn from_masks(
        n: usize,
        t: usize,
        h: usize,
        w: usize,
        per_ct: Vec<Vec<bool>>,
    ) -> Result<TubeIndex> {
        if n == 0 || t == 0 || h == 0 || w == 0 {
            return Err(Error::Shape("tube grid dims must be >= 1".to_string()));
        }
        if per_ct.len() != n * t {
            return Err(Error::Shape(format!(
                "expected {} masks, got {}",
                n * t,
                per_ct.len()
            )));
        }
        let mut masks = Vec::with_capacity(n * t * h * w);
        let mut positions = Vec::with_capacity(n * t);
        let mut total = 0;
        for (ct, m) in per_ct.iter().enumerate() {
            if m.len() != h * w {
                return Err(Error::Shape(format!(
                    "mask {ct} has {} cells, expected {}",
                    m.len(),
                    h * w
                )));
            }
            let mut pos = Vec::new();
            for i in 0..h {
                for j in 0..w {
                    if m[i * w + j] {
                        pos.push((i as u32, j as u32));
                    }
                }
            }
            total += pos.len();
            positions.push(pos);
            masks.extend_from_slice(m);
        }
        Ok(TubeIndex {
            n,
            t,
            h,
            w,
            masks,
            positions,
            total,
        })
    }

    pub fn full(n: usize, t: usize, h: usize, w: usize) -> TubeIndex {
        TubeIndex::from_masks(n, t, h, w, vec![vec![true; h * w]; n * t]).unwrap()
    }

    pub fn empty(n: usize, t: usize, h: usize, w: usize) -> TubeIndex {
        TubeIndex::from_masks(n, t, h, w, vec![vec![false; h * w]; n * t]).unwrap()
    }

    pub fn grid_dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.t, self.h, self.w)
    }

    /// Total selected positions across all clips and time-steps.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn is_full(&self) -> bool {
        self.total == self.n * self.t * self.h * self.w
    }

    /// Selected fraction of the whole grid.
    pub fn occupancy(&self) -> f64 {
        self.total as f64 / (self.n * self.t * self.h * self.w) as f64
    }

    pub fn contains(&self, n: usize, t: usize, i: usize, j: usize) -> bool {
        self.masks[((n * self.t + t) * self.h + i) * self.w + j]
    }

    /// Boolean H*W mask for one (clip, time), row-major.
    pub fn mask_at(&self, n: usize, t: usize) -> &[bool] {
        let hw = self.h * self.w;
        let base = (n * self.t + t) * hw;
        &self.masks[base..base + hw]
    }

    /// Sorted (i, j) list for one (clip, time).
    pub fn positions_at(&self, n: usize, t: usize) -> &[(u32, u32)] {
        &self.positions[n * self.t + t]
    }

    /// All selected positions in canonical (n, t, i, j) ascending order; this
    /// ordering is the contract every gather/scatter/kernel relies on.
    pub fn iter_positions(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        (0..self.n).flat_map(move |n| {
            (0..self.t).flat_map(move |t| {
                self.positions[n * self.t + t]
                    .iter()
                    .map(move |&(i, j)| (n, t, i as usize, j as usize))
            })
        })
    }

    /// |Omega| per (clip, time), clip-major.
    pub fn per_ct_counts(&self) -> Vec<usize> {
        self.positions.iter().map(|p| p.len()).collect()
    }

    /// Reorder the clip axis: entry `k` of `order` names the source clip that
    /// becomes output clip `k`.
    pub fn permute_clips(&self, order: &[usize]) -> Result<TubeIndex> {
        if order.len() != self.n {
            return Err(Error::Shape("permutation length != clip count".to_string()));
        }
        let mut per_ct = Vec::with_capacity(self.n * self.t);
        for &src in order {
            if src >= self.n {
                return Err(Error::Shape(format!("clip index {src} out of range")));
            }
            for t in 0..self.t {
                per_ct.push(self.mask_at(src, t).to_vec());
            }
        }
        TubeIndex::from_masks(self.n, self.t, self.h, self.w, per_ct)
    }
}

/// Fraction of grid cell (i, j) covered by the box, after scaling the box to
/// grid coordinates and clipping it to the frame. Exact convex clipping plus
/// the shoelace formula; no sampling.
pub fn coverage(bx: &TrackBox, cell: (usize, usize), spec: &GridSpec) -> Result<f64> {
    let (i, j) = cell;
    if i >= spec.grid_h || j >= spec.grid_w {
        return Err(Error::Shape(format!(
            "cell ({i}, {j}) outside {}x{} grid",
            spec.grid_h, spec.grid_w
        )));
    }
    let poly = box_in_grid(bx, spec)?;
    Ok(cell_coverage(&poly, i, j))
}

/// Boolean H*W mask of cells whose coverage reaches `tau` (boundary
/// inclusive: coverage == tau selects).
pub fn mask_from_box(bx: &TrackBox, spec: &GridSpec, tau: f64) -> Result<Vec<bool>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau must be in (0, 1], got {tau}")));
    }
    let poly = box_in_grid(bx, spec)?;
    let mut mask = vec![false; spec.grid_h * spec.grid_w];
    if poly.len() < 3 {
        return Ok(mask);
    }
    // only cells under the clipped polygon's bounding box can be covered
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in &poly {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let i_lo = (y0.floor().max(0.0)) as usize;
    let i_hi = (y1.ceil() as usize).min(spec.grid_h);
    let j_lo = (x0.floor().max(0.0)) as usize;
    let j_hi = (x1.ceil() as usize).min(spec.grid_w);
    for i in i_lo..i_hi {
        for j in j_lo..j_hi {
            if cell_coverage(&poly, i, j) >= tau {
                mask[i * spec.grid_w + j] = true;
            }
        }
    }
    Ok(mask)
}

/// Element-wise OR of equally sized masks.
pub fn union_masks(masks: &[Vec<bool>]) -> Result<Vec<bool>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Usage("union_masks needs >= 1 mask".to_string()))?;
    let mut out = first.clone();
    for m in &masks[1..] {
        if m.len() != out.len() {
            return Err(Error::Shape(format!(
                "mask length {} != {}",
                m.len(),
                out.len()
            )));
        }
        for (o, v) in out.iter_mut().zip(m) {
            *o |= v;
        }
    }
    Ok(out)
}

/// Build the spatio-temporal tube: for each (clip, t), OR the masks of the
/// stride-group of frames. A frame with no box contributes an empty mask
/// (tracker dropout); a whole group of dropouts leaves that Omega empty.
pub fn build_tube(boxes: &[TrackBox], spec: &GridSpec, tau: f64) -> Result<TubeIndex> {
    let mut by_frame: HashMap<usize, &TrackBox> = HashMap::new();
    let mut last: Option<usize> = None;
    for b in boxes {
        if let Some(prev) = last {
            if b.frame == prev {
                return Err(Error::Data(format!("duplicate frame index {}", b.frame)));
            }
            if b.frame < prev {
                return Err(Error::Data(format!(
                    "boxes not sorted: frame {} after {}",
                    b.frame, prev
                )));
            }
        }
        last = Some(b.frame);
        by_frame.insert(b.frame, b);
    }

    let n = spec.n_clips();
    let t_steps = spec.t_steps();
    let hw = spec.grid_h * spec.grid_w;
    let empty = vec![false; hw];
    let mut frame_masks: HashMap<usize, Vec<bool>> = HashMap::new();
    let mut per_ct = Vec::with_capacity(n * t_steps);
    for c in 0..n {
        for t in 0..t_steps {
            let mut acc = empty.clone();
            for l in spec.frames_for(c, t) {
                let Some(bx) = by_frame.get(&l) else {
                    continue;
                };
                if !frame_masks.contains_key(&l) {
                    frame_masks.insert(l, mask_from_box(bx, spec, tau)?);
                }
                for (o, v) in acc.iter_mut().zip(&frame_masks[&l]) {
                    *o |= v;
                }
            }
            per_ct.push(acc);
        }
    }
    TubeIndex::from_masks(n, t_steps, spec.grid_h, spec.grid_w, per_ct)
}

// --- polygon machinery -----------------------------------------------------

/// Scale the box to grid coordinates and clip it to the frame rectangle.
/// A box fully outside the frame comes back as an empty polygon.
fn box_in_grid(bx: &TrackBox, spec: &GridSpec) -> Result<Vec<[f64; 2]>> {
    let sx = spec.grid_w as f64 / spec.frame_w;
    let sy = spec.grid_h as f64 / spec.frame_h;
    let mut poly: Vec<[f64; 2]> = bx.pts.iter().map(|p| [p[0] * sx, p[1] * sy]).collect();
    // normalize to CCW so half-plane clips keep the interior
    if polygon_area_signed(&poly) < 0.0 {
        poly.reverse();
    }
    poly = clip_axis(&poly, 0, 0.0, true);
    poly = clip_axis(&poly, 0, spec.grid_w as f64, false);
    poly = clip_axis(&poly, 1, 0.0, true);
    poly = clip_axis(&poly, 1, spec.grid_h as f64, false);
    Ok(poly)
}

/// Intersection area of the (already frame-clipped, CCW) polygon with the
/// unit cell (i, j); the cell has unit area so this is the coverage fraction.
fn cell_coverage(poly: &[[f64; 2]], i: usize, j: usize) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut p = clip_axis(poly, 0, j as f64, true);
    p = clip_axis(&p, 0, (j + 1) as f64, false);
    p = clip_axis(&p, 1, i as f64, true);
    p = clip_axis(&p, 1, (i + 1) as f64, false);
    polygon_area(&p).clamp(0.0, 1.0)
}

/// Sutherland-Hodgman clip of a convex polygon against one axis-aligned
/// half-plane: keep `p[axis] >= bound` when `keep_ge`, else `p[axis] <= bound`.
fn clip_axis(poly: &[[f64; 2]], axis: usize, bound: f64, keep_ge: bool) -> Vec<[f64; 2]> {
    if poly.len() < 3 {
        return Vec::new();
    }
    let inside = |p: &[f64; 2]| {
        if keep_ge {
            p[axis] >= bound
        } else {
            p[axis] <= bound
        }
    };
    let mut out = Vec::with_capacity(poly.len() + 1);
    for k in 0..poly.len() {
        let s = poly[k];
        let e = poly[(k + 1) % poly.len()];
        let s_in = inside(&s);
        let e_in = inside(&e);
        if s_in != e_in {
            let denom = e[axis] - s[axis];
            // denom cannot be 0 when exactly one endpoint is strictly beyond the bound
            let t = (bound - s[axis]) / denom;
            let mut p = [
                s[0] + (e[0] - s[0]) * t,
                s[1] + (e[1] - s[1]) * t,
            ];
            p[axis] = bound;
            out.push(p);
        }
        if e_in {
            out.push(e);
        }
    }
    out
}

fn polygon_area_signed(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for k in 0..poly.len() {
        let a = poly[k];
        let b = poly[(k + 1) % poly.len()];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    acc / 2.0
}

/// Unsigned shoelace area.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    polygon_area_signed(poly).abs()
}
