//! Exact nearest-neighbour queries over 3D points.
//!
//! Ties in distance resolve to the smallest point index, so results agree
//! with a brute-force scan.

use crate::mesh::Vec3;

const LEAF: usize = 8;

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Point indices arranged so every range `[lo, hi)` has its split point
    /// at `(lo + hi) / 2`.
    order: Vec<usize>,
    axis: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axis = vec![0u8; points.len()];
        build(points, &mut order, &mut axis, 0);
        KdTree {
            points: points.to_vec(),
            order,
            axis,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(index, squared distance)` of the closest point. Panics on an empty tree.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        assert!(!self.points.is_empty(), "nearest() on empty tree");
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.order.len(), &mut best);
        best
    }

    fn search(&self, q: &Vec3, lo: usize, hi: usize, best: &mut (usize, f64)) {
        if hi - lo <= LEAF {
            for &i in &self.order[lo..hi] {
                consider(best, i, (self.points[i] - q).norm_squared());
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let i = self.order[mid];
        let ax = self.axis[mid] as usize;
        consider(best, i, (self.points[i] - q).norm_squared());
        let diff = q[ax] - self.points[i][ax];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        if near.0 < near.1 {
            self.search(q, near.0, near.1, best);
        }
        if far.0 < far.1 && diff * diff <= best.1 {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn consider(best: &mut (usize, f64), i: usize, d: f64) {
    if d < best.1 || (d == best.1 && i < best.0) {
        *best = (i, d);
    }
}

fn build(points: &[Vec3], order: &mut [usize], axis: &mut [u8], offset: usize) {
    let n = order.len();
    if n <= LEAF {
        return;
    }
    let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
    for &i in order.iter() {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let ax = (hi - lo).imax();
    let mid = n / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][ax].total_cmp(&points[b][ax]));
    axis[offset + mid] = ax as u8;
    let (left, right) = order.split_at_mut(mid);
    build(points, left, axis, offset);
    build(points, &mut right[1..], axis, offset + mid + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(points: &[Vec3], q: &Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            consider(&mut best, i, (p - q).norm_squared());
        }
        best
    }

    #[test]
    fn duplicate_coordinates_are_fine() {
        // a flat grid: many points share x, y and all share z
        let pts: Vec<Vec3> = (0..400)
            .map(|i| Vec3::new((i % 20) as f64, (i / 20) as f64, 0.0))
            .collect();
        let tree = KdTree::new(&pts);
        for q in [Vec3::new(3.2, 7.9, 1.0), Vec3::new(-5.0, 0.0, 0.0), Vec3::new(19.5, 19.5, 0.0)] {
            assert_eq!(tree.nearest(&q), brute(&pts, &q));
        }
        let same = vec![Vec3::new(1.0, 1.0, 1.0); 100];
        assert_eq!(KdTree::new(&same).nearest(&Vec3::zeros()).0, 0);
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            pts in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64), 1..200),
            q in (-12.0..12.0f64, -12.0..12.0f64, -12.0..12.0f64),
        ) {
            let pts: Vec<Vec3> = pts.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect();
            let q = Vec3::new(q.0, q.1, q.2);
            prop_assert_eq!(KdTree::new(&pts).nearest(&q), brute(&pts, &q));
        }
    }
}
