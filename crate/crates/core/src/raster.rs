//! Pixel-grid geometry shared by rendering, rasterized conditions and the
//! mouth-area metric. Pixel `(row, col)` has its center at `(x, y) = (col, row)`.

use serde::{Deserialize, Serialize};

/// A square boolean pixel mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    size: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            bits: vec![false; size * size],
        }
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(size);
        for r in 0..size {
            for c in 0..size {
                m.bits[r * size + c] = f(r, c);
            }
        }
        m
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.size + col] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Intersection over union; two empty masks count as identical.
    pub fn iou(&self, other: &Mask) -> f64 {
        assert_eq!(self.size, other.size, "mask sizes differ");
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Marks every pixel within Chebyshev distance `r` of a set pixel.
    pub fn dilate(&self, r: usize) -> Mask {
        let n = self.size;
        Mask::from_fn(n, |row, col| {
            let (r0, r1) = (row.saturating_sub(r), (row + r).min(n - 1));
            let (c0, c1) = (col.saturating_sub(r), (col + r).min(n - 1));
            (r0..=r1).any(|rr| (c0..=c1).any(|cc| self.get(rr, cc)))
        })
    }
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(x: f64, y: f64, poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (xi, yi) = (poly[i][0], poly[i][1]);
        let (xj, yj) = (poly[j][0], poly[j][1]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Calls `f(row, col)` for every pixel whose center lies inside `poly`.
pub fn fill_polygon(size: usize, poly: &[[f64; 2]], mut f: impl FnMut(usize, usize)) {
    if poly.len() < 3 {
        return;
    }
    let (y0, y1) = poly
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[1]), b.max(p[1])));
    let (x0, x1) = poly
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[0]), b.max(p[0])));
    let (r0, r1) = (y0.ceil().max(0.0) as usize, y1.floor().min(size as f64 - 1.0));
    let (c0, c1) = (x0.ceil().max(0.0) as usize, x1.floor().min(size as f64 - 1.0));
    if r1 < 0.0 || c1 < 0.0 {
        return;
    }
    for r in r0..=r1 as usize {
        for c in c0..=c1 as usize {
            if point_in_polygon(c as f64, r as f64, poly) {
                f(r, c);
            }
        }
    }
}

/// Calls `f(row, col)` for every pixel center within distance `radius` of `(x, y)`.
pub fn fill_disc(size: usize, x: f64, y: f64, radius: f64, mut f: impl FnMut(usize, usize)) {
    let r0 = (y - radius).ceil().max(0.0);
    let r1 = (y + radius).floor().min(size as f64 - 1.0);
    let c0 = (x - radius).ceil().max(0.0);
    let c1 = (x + radius).floor().min(size as f64 - 1.0);
    if r1 < r0 || c1 < c0 {
        return;
    }
    for r in r0 as usize..=r1 as usize {
        for c in c0 as usize..=c1 as usize {
            let (dx, dy) = (c as f64 - x, r as f64 - y);
            if dx * dx + dy * dy <= radius * radius {
                f(r, c);
            }
        }
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull (monotone chain); collinear points dropped.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

fn dist_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()
}

/// Pixel mask of the convex hull of `points`. A hull with (near) zero area
/// falls back to pixels within 1 px of the degenerate polyline.
pub fn hull_mask(points: &[[f64; 2]], size: usize) -> Mask {
    let hull = convex_hull(points);
    let mut mask = Mask::new(size);
    if hull.len() >= 3 && polygon_area(&hull) > 1e-9 {
        fill_polygon(size, &hull, |r, c| mask.set(r, c, true));
        return mask;
    }
    let segs: Vec<([f64; 2], [f64; 2])> = match hull.len() {
        0 => return mask,
        1 => vec![(hull[0], hull[0])],
        _ => hull.windows(2).map(|w| (w[0], w[1])).collect(),
    };
    for r in 0..size {
        for c in 0..size {
            let p = [c as f64, r as f64];
            if segs.iter().any(|&(a, b)| dist_to_segment(p, a, b) <= 1.0) {
                mask.set(r, c, true);
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x0: f64, y0: f64, side: f64) -> Vec<[f64; 2]> {
        vec![[x0, y0], [x0 + side, y0], [x0 + side, y0 + side], [x0, y0 + side]]
    }

    #[test]
    fn half_shifted_square_iou_is_one_third() {
        let a = hull_mask(&square(10.5, 10.5, 10.0), 40);
        let b = hull_mask(&square(15.5, 10.5, 10.0), 40);
        assert_eq!(a.count(), 100);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
        let far = hull_mask(&square(25.5, 25.5, 5.0), 40);
        assert_eq!(a.iou(&far), 0.0);
    }

    #[test]
    fn disc_radius_one_at_center() {
        let mut hits = vec![];
        fill_disc(9, 4.0, 4.0, 1.0, |r, c| hits.push((r, c)));
        hits.sort();
        assert_eq!(hits, vec![(3, 4), (4, 3), (4, 4), (4, 5), (5, 4)]);
    }

    #[test]
    fn hull_drops_interior_points() {
        let mut pts = square(0.0, 0.0, 2.0);
        pts.push([1.0, 1.0]);
        assert_eq!(convex_hull(&pts).len(), 4);
        assert!((polygon_area(&convex_hull(&pts)) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_hull_uses_dilated_polyline() {
        let m = hull_mask(&[[2.0, 5.0], [6.0, 5.0], [4.0, 5.0]], 12);
        assert!(m.get(5, 4) && m.get(4, 4) && m.get(6, 4));
        assert!(!m.get(7, 4));
        assert_eq!(m.count(), 17);
        assert!(m.get(5, 1) && m.get(5, 7));
    }

    #[test]
    fn dilate_grows_by_radius() {
        let mut m = Mask::new(7);
        m.set(3, 3, true);
        assert_eq!(m.dilate(1).count(), 9);
        assert_eq!(m.dilate(2).count(), 25);
    }
}
