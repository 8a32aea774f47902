//! Point clouds, axis-aligned boxes, farthest point sampling and scene normalization.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// `N` points with xyz coordinates and `F` features per point, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Vec<Point3>,
    features: Vec<f64>,
    feature_dim: usize,
}

impl PointCloud {
    pub fn new(coords: Vec<Point3>, features: Vec<f64>, feature_dim: usize) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Invalid("point cloud needs at least one point".into()));
        }
        if features.len() != coords.len() * feature_dim {
            return Err(Error::shape(
                "point_cloud",
                format!("{} points, {} feature values at width {feature_dim}", coords.len(), features.len()),
            ));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        Ok(Self {
            coords,
            features,
            feature_dim,
        })
    }

    /// Builds the default 4-wide feature layout: RGB followed by height above
    /// the lowest point of the scene.
    pub const XYZ_RGB_FEATURES: usize = 4;

    pub fn from_xyz_rgb(points: &[[f64; 6]]) -> Result<Self> {
        let min_z = points.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
        let coords = points.iter().map(|p| [p[0], p[1], p[2]]).collect();
        let features = points
            .iter()
            .flat_map(|p| [p[3], p[4], p[5], p[2] - min_z])
            .collect();
        Self::new(coords, features, Self::XYZ_RGB_FEATURES)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Reorders points; `order[i]` is the source index of new point `i`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let coords = order.iter().map(|&i| self.coords[i]).collect();
        let features = order.iter().flat_map(|&i| self.feature(i).to_vec()).collect();
        Self {
            coords,
            features,
            feature_dim: self.feature_dim,
        }
    }
}

/// Axis-aligned box given by center and full size along x, y, z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Point3,
    pub size: Point3,
}

impl Box3D {
    pub fn new(center: Point3, size: Point3) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Invalid(format!("box size must be positive and finite, got {size:?}")));
        }
        Ok(Self { center, size })
    }

    pub fn min_corner(&self) -> Point3 {
        std::array::from_fn(|a| self.center[a] - self.size[a] / 2.0)
    }

    pub fn max_corner(&self) -> Point3 {
        std::array::from_fn(|a| self.center[a] + self.size[a] / 2.0)
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    /// Closed-boundary membership.
    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|a| (p[a] - self.center[a]).abs() <= self.size[a] / 2.0)
    }

    pub fn to_array(&self) -> [f64; 6] {
        let (c, s) = (self.center, self.size);
        [c[0], c[1], c[2], s[0], s[1], s[2]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min: Point3,
    pub max: Point3,
}

impl SceneBounds {
    pub fn new(min: Point3, max: Point3) -> Result<Self> {
        if (0..3).any(|a| !(max[a] >= min[a])) {
            return Err(Error::Invalid(format!("bounds max {max:?} below min {min:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn of_points(pc: &PointCloud) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in pc.coords() {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        Self { min, max }
    }

    pub fn extent(&self) -> Point3 {
        std::array::from_fn(|a| self.max[a] - self.min[a])
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().iter().map(|e| e * e).sum::<f64>().sqrt()
    }

    pub fn axis(&self, a: usize) -> (f64, f64) {
        (self.min[a], self.max[a])
    }

    fn check_strict(&self) -> Result<()> {
        match (0..3).find(|&a| !(self.max[a] > self.min[a])) {
            Some(a) => Err(Error::Invalid(format!("degenerate scene bounds on axis {a}"))),
            None => Ok(()),
        }
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Maps `p` into `[0,1]³` relative to `bounds`, clamping outside values.
pub fn normalize_point(p: &Point3, bounds: &SceneBounds) -> Result<Point3> {
    bounds.check_strict()?;
    Ok(std::array::from_fn(|a| {
        ((p[a] - bounds.min[a]) / (bounds.max[a] - bounds.min[a])).clamp(0.0, 1.0)
    }))
}

pub fn denormalize_point(u: &Point3, bounds: &SceneBounds) -> Point3 {
    std::array::from_fn(|a| bounds.min[a] + u[a] * (bounds.max[a] - bounds.min[a]))
}

/// Lexicographic order on coordinate triples.
pub fn lex_cmp(a: &Point3, b: &Point3) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

pub fn squared_distance(a: &Point3, b: &Point3) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Greedy max-min farthest point sampling over raw coordinates.
///
/// Starts at the lexicographically smallest point. Each round picks the
/// unselected point farthest from the selected set; ties go to the
/// lexicographically smallest coordinates, then the lowest index. For
/// distinct points the selected sequence depends only on the coordinate set,
/// not on the input order.
pub fn farthest_point_sampling(points: &[Point3], k: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k > n {
        return Err(Error::Invalid(format!("cannot sample {k} of {n} points")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let better = |i: usize, j: usize| lex_cmp(&points[i], &points[j]).then(i.cmp(&j)) == Ordering::Less;
    let seed = (1..n).fold(0, |best, i| if better(i, best) { i } else { best });
    let mut selected = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(k);
    let mut last = seed;
    selected[seed] = true;
    out.push(seed);
    while out.len() < k {
        let mut pick: Option<usize> = None;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = squared_distance(&points[i], &points[last]);
            if d < min_d[i] {
                min_d[i] = d;
            }
            pick = match pick {
                None => Some(i),
                Some(p) if min_d[i] > min_d[p] || (min_d[i] == min_d[p] && better(i, p)) => Some(i),
                keep => keep,
            };
        }
        let p = pick.expect("k <= n leaves a candidate");
        selected[p] = true;
        out.push(p);
        last = p;
    }
    Ok(out)
}

/// Axis-aligned intersection over union.
pub fn box_iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (amin, amax, bmin, bmax) = (a.min_corner(), a.max_corner(), b.min_corner(), b.max_corner());
    let mut inter = 1.0;
    for ax in 0..3 {
        let overlap = amax[ax].min(bmax[ax]) - amin[ax].max(bmin[ax]);
        if overlap <= 0.0 {
            return 0.0;
        }
        inter *= overlap;
    }
    // Volumes from the corner extents so identical boxes give exactly 1.
    let va: f64 = (0..3).map(|i| amax[i] - amin[i]).product();
    let vb: f64 = (0..3).map(|i| bmax[i] - bmin[i]).product();
    let union = va + vb - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn points_in_box(pc: &PointCloud, b: &Box3D) -> Vec<usize> {
    pc.coords()
        .iter()
        .enumerate()
        .filter(|(_, p)| b.contains(p))
        .map(|(i, _)| i)
        .collect()
}

/// Indices of the `k` points nearest to `center` (ties: lexicographic
/// coordinates, then index), nearest first.
pub fn k_nearest(points: &[Point3], center: &Point3, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    let key = |i: &usize| squared_distance(&points[*i], center);
    let cmp = |a: &usize, b: &usize| {
        key(a)
            .total_cmp(&key(b))
            .then_with(|| lex_cmp(&points[*a], &points[*b]))
            .then(a.cmp(b))
    };
    let k = k.min(idx.len());
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}
