//! Balanced 3D KD-tree for exact nearest-neighbour queries.
//!
//! Built once per cloud and shared read-only between threads. Ties in
//! distance resolve to the smallest original point index, so results are
//! identical to an exhaustive scan.

use super::cloud::{Point, PointCloud};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 12;
const LEAF: u8 = 3;

#[derive(Clone, Copy, Debug)]
struct Node {
    axis: u8,
    split: f64,
    // split node: child indices; leaf: [start, end) into the reordered points
    a: u32,
    b: u32,
}

#[derive(Clone, Debug)]
pub struct KdTree {
    coords: Vec<[f64; 3]>,
    ids: Vec<u32>,
    nodes: Vec<Node>,
}

#[derive(Clone, Copy)]
struct Best {
    d2: f64,
    id: u32,
}

impl Best {
    #[inline]
    fn offer(&mut self, d2: f64, id: u32) {
        if d2 < self.d2 || (d2 == self.d2 && id < self.id) {
            self.d2 = d2;
            self.id = id;
        }
    }
}

impl KdTree {
    pub fn new(points: &[Point]) -> Self {
        let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut ids: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        if !ids.is_empty() {
            build(&raw, &mut ids, 0, &mut nodes);
        }
        let coords = ids.iter().map(|&i| raw[i as usize]).collect();
        Self { coords, ids, nodes }
    }

    pub fn from_cloud(cloud: &PointCloud) -> Self {
        Self::new(cloud.points())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Closest point as `(original index, Euclidean distance)`.
    pub fn nearest(&self, q: &Point) -> Option<(usize, f64)> {
        self.search(q, f64::INFINITY)
    }

    /// Closest point no farther than `radius`, if any.
    pub fn nearest_within(&self, q: &Point, radius: f64) -> Option<(usize, f64)> {
        self.search(q, radius * radius)
    }

    fn search(&self, q: &Point, max_d2: f64) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = Best { d2: max_d2, id: u32::MAX };
        self.visit(0, &[q.x, q.y, q.z], &mut best);
        (best.id != u32::MAX).then(|| (best.id as usize, best.d2.sqrt()))
    }

    fn visit(&self, node: usize, q: &[f64; 3], best: &mut Best) {
        let n = self.nodes[node];
        if n.axis == LEAF {
            for i in n.a as usize..n.b as usize {
                let c = &self.coords[i];
                let (dx, dy, dz) = (c[0] - q[0], c[1] - q[1], c[2] - q[2]);
                best.offer(dx * dx + dy * dy + dz * dz, self.ids[i]);
            }
            return;
        }
        let diff = q[n.axis as usize] - n.split;
        let (near, far) = if diff < 0.0 { (n.a, n.b) } else { (n.b, n.a) };
        self.visit(near as usize, q, best);
        if diff * diff <= best.d2 {
            self.visit(far as usize, q, best);
        }
    }
}

fn build(raw: &[[f64; 3]], ids: &mut [u32], offset: usize, nodes: &mut Vec<Node>) -> u32 {
    let me = nodes.len();
    if ids.len() <= LEAF_SIZE {
        nodes.push(Node { axis: LEAF, split: 0.0, a: offset as u32, b: (offset + ids.len()) as u32 });
        return me as u32;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in ids.iter() {
        let p = &raw[i as usize];
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
        .unwrap();
    let mid = ids.len() / 2;
    ids.select_nth_unstable_by(mid, |&x, &y| {
        raw[x as usize][axis].total_cmp(&raw[y as usize][axis]).then(x.cmp(&y))
    });
    let split = raw[ids[mid] as usize][axis];
    nodes.push(Node { axis: axis as u8, split, a: 0, b: 0 });
    let (left, right) = ids.split_at_mut(mid);
    let a = build(raw, left, offset, nodes);
    let b = build(raw, right, offset + mid, nodes);
    nodes[me].a = a;
    nodes[me].b = b;
    me as u32
}

/// Nearest point of `target` to `query` with its distance. Builds a
/// throwaway index; use [`KdTree`] directly for repeated queries.
pub fn nearest_neighbor(query: &Point, target: &PointCloud) -> Result<(usize, f64)> {
    if target.is_empty() {
        return Err(Error::EmptyInput("nearest-neighbour target is empty".into()));
    }
    Ok(KdTree::from_cloud(target).nearest(query).expect("non-empty tree"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn exhaustive(q: &Point, pts: &[Point]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in pts.iter().enumerate() {
            let d2 = (p - q).norm_squared();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        (best.0, best.1.sqrt())
    }

    #[test]
    fn simple_examples() {
        let t = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(nearest_neighbor(&Point::new(0.4, 0.0, 0.0), &t).unwrap(), (0, 0.4));
        assert_eq!(nearest_neighbor(&Point::new(1.0, 0.0, 0.0), &t).unwrap(), (1, 0.0));
        assert!(nearest_neighbor(&Point::origin(), &PointCloud::default()).is_err());
    }

    #[test]
    fn ties_break_to_smallest_index() {
        let t = PointCloud::from_xyz(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(nearest_neighbor(&Point::origin(), &t).unwrap().0, 0);
        // many duplicates spread across leaves
        let dup: Vec<[f64; 3]> = (0..200).map(|i| if i % 3 == 0 { [2.0, 2.0, 2.0] } else { [5.0, 5.0, i as f64] }).collect();
        let t = PointCloud::from_xyz(&dup).unwrap();
        assert_eq!(nearest_neighbor(&Point::new(2.0, 2.0, 2.1), &t).unwrap().0, 0);
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut r = rng::seeded(11);
        let pts: Vec<Point> = (0..500)
            .map(|_| Point::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(-1.0..1.0)))
            .collect();
        let tree = KdTree::new(&pts);
        for _ in 0..100 {
            let q = Point::new(r.random_range(-6.0..6.0), r.random_range(-6.0..6.0), r.random_range(-2.0..2.0));
            let (i, d) = tree.nearest(&q).unwrap();
            let (j, e) = exhaustive(&q, &pts);
            assert_eq!(i, j);
            assert_eq!(d, e);
        }
    }

    #[test]
    fn radius_limited_search() {
        let pts = vec![Point::new(0.0, 0.0, 0.0), Point::new(3.0, 0.0, 0.0)];
        let tree = KdTree::new(&pts);
        assert_eq!(tree.nearest_within(&Point::new(1.0, 0.0, 0.0), 0.5), None);
        assert_eq!(tree.nearest_within(&Point::new(1.0, 0.0, 0.0), 1.0), Some((0, 1.0)));
        assert!(KdTree::new(&[]).nearest(&Point::origin()).is_none());
    }
}
