use nalgebra::Point3;

use crate::error::{invalid_input, Result};

pub type Point = Point3<f64>;

/// Per-point change class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ChangeClass {
    #[default]
    Static = 0,
    /// Present in the scan, absent from the prior map.
    Positive = 1,
    /// Present in the prior map, absent from the scan.
    Negative = 2,
}

impl ChangeClass {
    pub const ALL: [ChangeClass; 3] = [ChangeClass::Static, ChangeClass::Positive, ChangeClass::Negative];

    pub fn from_u8(value: u8) -> Option<Self> {
        match value {
            0 => Some(ChangeClass::Static),
            1 => Some(ChangeClass::Positive),
            2 => Some(ChangeClass::Negative),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_change(self) -> bool {
        self != ChangeClass::Static
    }
}

/// Ordered 3D points with optional per-point attributes.
///
/// Attribute vectors, when present, always have one entry per point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    labels: Option<Vec<ChangeClass>>,
    visibility: Option<Vec<u8>>,
    confidences: Option<Vec<f64>>,
}

fn check_finite(points: &[Point]) -> Result<()> {
    if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
        return Err(invalid_input(format!("point {i} has a non-finite coordinate")));
    }
    Ok(())
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        check_finite(&points)?;
        Ok(Self { points, ..Default::default() })
    }

    pub fn from_xyz(coords: &[[f64; 3]]) -> Result<Self> {
        Self::new(coords.iter().map(|c| Point::new(c[0], c[1], c[2])).collect())
    }

    pub fn with_labels(mut self, labels: Vec<ChangeClass>) -> Result<Self> {
        self.check_len("labels", labels.len())?;
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_visibility(mut self, flags: Vec<u8>) -> Result<Self> {
        self.check_len("visibility", flags.len())?;
        if flags.iter().any(|&f| f > 1) {
            return Err(invalid_input("visibility flags must be 0 or 1"));
        }
        self.visibility = Some(flags);
        Ok(self)
    }

    pub fn with_confidences(mut self, confidences: Vec<f64>) -> Result<Self> {
        self.check_len("confidences", confidences.len())?;
        if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid_input("confidences must lie in [0, 1]"));
        }
        self.confidences = Some(confidences);
        Ok(self)
    }

    fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len != self.points.len() {
            return Err(invalid_input(format!(
                "{what} has {len} entries for {} points",
                self.points.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Point {
        &self.points[i]
    }

    pub fn labels(&self) -> Option<&[ChangeClass]> {
        self.labels.as_deref()
    }

    /// Label of point `i`, static when the cloud carries no labels.
    pub fn label(&self, i: usize) -> ChangeClass {
        self.labels.as_ref().map_or(ChangeClass::Static, |l| l[i])
    }

    pub fn visibility(&self) -> Option<&[u8]> {
        self.visibility.as_deref()
    }

    pub fn confidences(&self) -> Option<&[f64]> {
        self.confidences.as_deref()
    }

    pub fn set_visibility_all(&mut self, flag: u8) {
        assert!(flag <= 1, "visibility flag must be 0 or 1");
        self.visibility = Some(vec![flag; self.points.len()]);
    }

    pub fn set_labels_all(&mut self, label: ChangeClass) {
        self.labels = Some(vec![label; self.points.len()]);
    }

    pub fn clear_attributes(&mut self) {
        self.labels = None;
        self.visibility = None;
        self.confidences = None;
    }

    pub fn take_labels(&mut self) -> Option<Vec<ChangeClass>> {
        self.labels.take()
    }

    /// Applies `f` to every point, keeping attributes.
    pub fn map_points(&self, f: impl Fn(&Point) -> Point) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(f).collect(),
            labels: self.labels.clone(),
            visibility: self.visibility.clone(),
            confidences: self.confidences.clone(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: pick(&self.labels, indices),
            visibility: pick(&self.visibility, indices),
            confidences: pick(&self.confidences, indices),
        }
    }

    pub fn filter(&self, keep: &[bool]) -> PointCloud {
        assert_eq!(keep.len(), self.len());
        let indices: Vec<usize> = (0..self.len()).filter(|&i| keep[i]).collect();
        self.select(&indices)
    }

    /// Appends `other`. An attribute present on only one side is filled with
    /// its default (static, 0, 0.0) on the other.
    pub fn append(&mut self, other: &PointCloud) {
        let (n, m) = (self.len(), other.len());
        merge_attr(&mut self.labels, &other.labels, n, m, ChangeClass::Static);
        merge_attr(&mut self.visibility, &other.visibility, n, m, 0);
        merge_attr(&mut self.confidences, &other.confidences, n, m, 0.0);
        self.points.extend_from_slice(&other.points);
    }

    pub fn truncate(&mut self, len: usize) {
        self.points.truncate(len);
        if let Some(v) = &mut self.labels {
            v.truncate(len);
        }
        if let Some(v) = &mut self.visibility {
            v.truncate(len);
        }
        if let Some(v) = &mut self.confidences {
            v.truncate(len);
        }
    }

    /// Axis-aligned bounds, `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Point, Point)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (
                Point::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z)),
                Point::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z)),
            )
        }))
    }

    pub fn centroid(&self) -> Option<Point> {
        if self.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(nalgebra::Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point::from(sum / self.len() as f64))
    }
}

fn pick<T: Copy>(v: &Option<Vec<T>>, indices: &[usize]) -> Option<Vec<T>> {
    v.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect())
}

fn merge_attr<T: Copy>(dst: &mut Option<Vec<T>>, src: &Option<Vec<T>>, n: usize, m: usize, fill: T) {
    match (dst.as_mut(), src) {
        (None, None) => {}
        (Some(d), Some(s)) => d.extend_from_slice(s),
        (Some(d), None) => d.extend(std::iter::repeat_n(fill, m)),
        (None, Some(s)) => {
            let mut d = vec![fill; n];
            d.extend_from_slice(s);
            *dst = Some(d);
        }
    }
}
