use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{BACKGROUND, BODY};
use crate::error::{Error, Result};

/// Display window in Hounsfield units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub level: f32,
    pub width: f32,
}

impl Default for Window {
    fn default() -> Self {
        Self {
            level: 40.0,
            width: 400.0,
        }
    }
}

impl Window {
    pub fn bounds(&self) -> (f32, f32) {
        (self.level - self.width / 2.0, self.level + self.width / 2.0)
    }

    pub fn apply(&self, hu: f32) -> f32 {
        let (lo, hi) = self.bounds();
        (hu.clamp(lo, hi) - lo) / self.width
    }
}

/// Clamps to the abdominal window (level 40, width 400) and maps it onto `[0, 1]`.
pub fn window_ct(hu_slice: &Array2<f32>) -> Array2<f32> {
    let window = Window::default();
    hu_slice.mapv(|v| window.apply(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyParams {
    /// Windowed intensity above which a pixel counts as tissue.
    pub threshold: f32,
    /// Closing radius in pixels at 256×256; scaled with the slice size.
    pub closing_radius: f32,
}

impl Default for BodyParams {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            closing_radius: 3.0,
        }
    }
}

impl BodyParams {
    pub fn radius_for(&self, h: usize, w: usize) -> usize {
        let scaled = self.closing_radius * h.min(w) as f32 / 256.0;
        (scaled.round() as usize).max(1)
    }
}

/// Fills the body class into an organ label map.
///
/// Candidate tissue is every pixel brighter than the threshold or carrying an
/// organ label. After a morphological closing, the largest 4-connected
/// component is kept with its holes filled; its unlabeled pixels become
/// [`BODY`]. Organ labels are kept as given.
///
/// Returns `Ok(None)` when no pixel qualifies as tissue.
pub fn derive_body_class(
    windowed: &Array2<f32>,
    organ_mask: &Array2<u8>,
    params: &BodyParams,
) -> Result<Option<Array2<u8>>> {
    if windowed.dim() != organ_mask.dim() {
        return Err(Error::Shape(format!(
            "image {:?} and mask {:?} differ",
            windowed.dim(),
            organ_mask.dim()
        )));
    }
    let (h, w) = windowed.dim();
    let candidate = Array2::from_shape_fn((h, w), |idx| {
        windowed[idx] > params.threshold || organ_mask[idx] != BACKGROUND
    });
    if !candidate.iter().any(|&v| v) {
        return Ok(None);
    }
    let closed = closing(&candidate, params.radius_for(h, w));
    let body = fill_holes(&largest_component(&closed));
    Ok(Some(Array2::from_shape_fn((h, w), |idx| {
        match (organ_mask[idx], body[idx]) {
            (BACKGROUND, true) => BODY,
            (BACKGROUND, false) => BACKGROUND,
            (organ, _) => organ,
        }
    })))
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Dilation then erosion with a disk, on a canvas padded so the result is
/// never eroded by the image border.
fn closing(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let pad = radius;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = Array2::from_elem((ph, pw), false);
    for ((r, c), &v) in mask.indexed_iter() {
        padded[[r + pad, c + pad]] = v;
    }
    let offsets = disk_offsets(radius);
    let at = |m: &Array2<bool>, r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < ph && (c as usize) < pw && m[[r as usize, c as usize]]
    };
    let dilated = Array2::from_shape_fn((ph, pw), |(r, c)| {
        offsets
            .iter()
            .any(|&(dy, dx)| at(&padded, r as isize + dy, c as isize + dx))
    });
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (r, c) = ((r + pad) as isize, (c + pad) as isize);
        offsets.iter().all(|&(dy, dx)| {
            let (rr, cc) = (r + dy, c + dx);
            // outside the padded canvas nothing was dilated
            rr < 0 || cc < 0 || rr as usize >= ph || cc as usize >= pw || dilated[[rr as usize, cc as usize]]
        })
    })
}

fn neighbours(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let mut out = Vec::with_capacity(4);
    if r > 0 {
        out.push((r - 1, c));
    }
    if r + 1 < h {
        out.push((r + 1, c));
    }
    if c > 0 {
        out.push((r, c - 1));
    }
    if c + 1 < w {
        out.push((r, c + 1));
    }
    out.into_iter()
}

/// Labels 4-connected components of `true` pixels; returns labels (0 = none) and sizes.
fn components(mask: &Array2<bool>) -> (Array2<usize>, Vec<usize>) {
    let (h, w) = mask.dim();
    let mut labels = Array2::zeros((h, w));
    let mut sizes = vec![0];
    let mut queue = VecDeque::new();
    for start in mask.indexed_iter().filter(|(_, &v)| v).map(|(i, _)| i) {
        if labels[start] != 0 {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        labels[start] = id;
        queue.push_back(start);
        while let Some((r, c)) = queue.pop_front() {
            size += 1;
            for n in neighbours(r, c, h, w) {
                if mask[n] && labels[n] == 0 {
                    labels[n] = id;
                    queue.push_back(n);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

fn largest_component(mask: &Array2<bool>) -> Array2<bool> {
    let (labels, sizes) = components(mask);
    // ties go to the component found first in raster order
    let best = sizes
        .iter()
        .enumerate()
        .skip(1)
        .fold((0, 0), |acc, (id, &s)| if s > acc.1 { (id, s) } else { acc })
        .0;
    labels.mapv(|l| best != 0 && l == best)
}

/// Sets every `false` region that does not touch the border.
fn fill_holes(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut outside = Array2::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if (r == 0 || c == 0 || r + 1 == h || c + 1 == w) && !mask[[r, c]] {
                outside[[r, c]] = true;
                queue.push_back((r, c));
            }
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        for n in neighbours(r, c, h, w) {
            if !mask[n] && !outside[n] {
                outside[n] = true;
                queue.push_back(n);
            }
        }
    }
    outside.mapv(|o| !o)
}

/// Resizes an image bilinearly and its label map by nearest neighbour to `size × size`.
pub fn resize_pair(
    image: &Array2<f32>,
    mask: &Array2<u8>,
    size: usize,
) -> Result<(Array2<f32>, Array2<u8>)> {
    if size < 8 {
        return Err(Error::param("size", format!("{size} is below the minimum of 8")));
    }
    if image.dim() != mask.dim() {
        return Err(Error::Shape(format!(
            "image {:?} and mask {:?} differ",
            image.dim(),
            mask.dim()
        )));
    }
    if image.dim() == (size, size) {
        return Ok((image.clone(), mask.clone()));
    }
    Ok((resize_bilinear(image, size, size), resize_nearest(mask, size, size)))
}

/// Half-pixel-centre bilinear resampling with edge clamping.
pub(crate) fn resize_bilinear(image: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = image.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coord = |i: usize, scale: f64, n: usize| {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let (y0, y1, fy) = coord(r, sy, h);
        let (x0, x1, fx) = coord(c, sx, w);
        let top = image[[y0, x0]] as f64 * (1.0 - fx) + image[[y0, x1]] as f64 * fx;
        let bottom = image[[y1, x0]] as f64 * (1.0 - fx) + image[[y1, x1]] as f64 * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    })
}

pub(crate) fn resize_nearest(mask: &Array2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    let pick = |i: usize, n_out: usize, n: usize| (((i as f64 + 0.5) * n as f64 / n_out as f64) as usize).min(n - 1);
    Array2::from_shape_fn((out_h, out_w), |(r, c)| mask[[pick(r, out_h, h), pick(c, out_w, w)]])
}
