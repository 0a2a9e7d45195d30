//! Synthetic cuboid worlds and a spinning-LiDAR raycaster providing
//! two-session data with exact ground truth.
//!
//! A world is a floor rectangle at `z = 0`, structural walls, objects with a
//! per-session presence schedule and moving boxes that exist in one session
//! only. Objects present only in the prior session are negative changes,
//! objects present only in the current session are positive changes.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{invalid_param, Error, Result};
use crate::geometry::{ChangeClass, Point, PointCloud, Pose};
use crate::mapping::{ScanFrame, Session};
use crate::rng;

/// Instance id of the floor and walls.
pub const SHELL_ID: u32 = 0;

/// Sessions of an object's schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Presence {
    Both,
    PriorOnly,
    CurrentOnly,
}

impl Presence {
    pub fn in_session(self, session: usize) -> bool {
        match self {
            Presence::Both => true,
            Presence::PriorOnly => session == 0,
            Presence::CurrentOnly => session == 1,
        }
    }

    fn flags(self) -> &'static str {
        match self {
            Presence::Both => "MS",
            Presence::PriorOnly => "M",
            Presence::CurrentOnly => "S",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "MS" | "SM" => Some(Presence::Both),
            "M" => Some(Presence::PriorOnly),
            "S" => Some(Presence::CurrentOnly),
            _ => None,
        }
    }
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cuboid {
    pub min: Point,
    pub max: Point,
}

impl Cuboid {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|k| !(min[k] < max[k]) || !min[k].is_finite() || !max[k].is_finite()) {
            return Err(invalid_param("cuboid corners must satisfy min < max"));
        }
        Ok(Self { min: Point::from(min), max: Point::from(max) })
    }

    /// Entry distance of the ray `o + t d` for `t > t_min`, if any. Rays
    /// starting inside the box do not hit it.
    #[inline]
    pub fn hit(&self, o: &Point, inv_d: &Vector3<f64>, t_min: f64) -> Option<f64> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            let a = (self.min[k] - o[k]) * inv_d[k];
            let b = (self.max[k] - o[k]) * inv_d[k];
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            // NaN from 0 * inf means the ray runs inside the slab plane
            if lo.is_nan() || hi.is_nan() {
                if o[k] < self.min[k] || o[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t0 <= t1 && t0 > t_min).then_some(t0)
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

/// A scheduled object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldObject {
    pub id: u32,
    pub shape: Cuboid,
    pub presence: Presence,
}

/// A box walking on the floor during one session.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mover {
    pub id: u32,
    pub session: usize,
    pub size: [f64; 3],
    pub start: [f64; 2],
    pub end: [f64; 2],
}

impl Mover {
    /// Footprint position at trajectory fraction `s` in [0, 1].
    pub fn shape_at(&self, s: f64) -> Cuboid {
        let cx = self.start[0] + s * (self.end[0] - self.start[0]);
        let cy = self.start[1] + s * (self.end[1] - self.start[1]);
        let [sx, sy, sz] = self.size;
        Cuboid { min: Point::new(cx - sx / 2.0, cy - sy / 2.0, 0.0), max: Point::new(cx + sx / 2.0, cy + sy / 2.0, sz) }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct World {
    /// Floor spans `[0, extent[0]] x [0, extent[1]]` at `z = 0`.
    pub extent: [f64; 2],
    pub walls: Vec<Cuboid>,
    pub objects: Vec<WorldObject>,
    pub movers: Vec<Mover>,
    pub seed: u64,
}

impl World {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent[0] > 0.0 && self.extent[1] > 0.0) {
            return Err(invalid_param("world extent must be positive"));
        }
        let mut ids: Vec<u32> = self.objects.iter().map(|o| o.id).chain(self.movers.iter().map(|m| m.id)).collect();
        if ids.contains(&SHELL_ID) {
            return Err(invalid_param("object id 0 is reserved for the structural shell"));
        }
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid_param("object ids must be unique"));
        }
        let inside = |p: &Point| p.x >= -1e-9 && p.y >= -1e-9 && p.x <= self.extent[0] + 1e-9 && p.y <= self.extent[1] + 1e-9;
        if self.objects.iter().any(|o| !inside(&o.shape.min) || !inside(&o.shape.max)) {
            return Err(invalid_param("objects must lie within the floor extent"));
        }
        if self.movers.iter().any(|m| m.session > 1 || m.size.iter().any(|&s| !(s > 0.0))) {
            return Err(invalid_param("movers need a session in {0, 1} and a positive size"));
        }
        Ok(())
    }

    /// Scheduled class of object `id` as seen in `session`.
    pub fn label_of(&self, id: u32, session: usize) -> ChangeClass {
        match self.objects.iter().find(|o| o.id == id).map(|o| o.presence) {
            Some(Presence::PriorOnly) if session == 0 => ChangeClass::Negative,
            Some(Presence::CurrentOnly) if session == 1 => ChangeClass::Positive,
            _ => ChangeClass::Static,
        }
    }

    /// Plain-text description, one primitive per line, followed by the
    /// sensor trajectory.
    pub fn to_text(&self, trajectory: &[Pose]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "extent {} {}", self.extent[0], self.extent[1]);
        let _ = writeln!(s, "seed {}", self.seed);
        let c = |s: &mut String, b: &Cuboid| {
            let _ = write!(s, " {} {} {} {} {} {}", b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z);
        };
        for w in &self.walls {
            s.push_str("wall");
            c(&mut s, w);
            s.push('\n');
        }
        for o in &self.objects {
            let _ = write!(s, "box {}", o.id);
            c(&mut s, &o.shape);
            let _ = writeln!(s, " {}", o.presence.flags());
        }
        for m in &self.movers {
            let _ = writeln!(
                s,
                "mover {} {} {} {} {} {} {} {} {}",
                m.id, m.session, m.size[0], m.size[1], m.size[2], m.start[0], m.start[1], m.end[0], m.end[1]
            );
        }
        for p in trajectory {
            let t = p.translation();
            let r = p.rotation();
            let _ = writeln!(s, "pose {} {} {} {}", t.x, t.y, t.z, r[(1, 0)].atan2(r[(0, 0)]));
        }
        s
    }

    /// Parses a world and the trajectory stored with it (possibly empty).
    pub fn parse(text: &str) -> Result<(Self, Vec<Pose>)> {
        let mut w = World::default();
        let mut trajectory = Vec::new();
        let mut have_extent = false;
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Parse { line, msg: msg.to_string() };
            let tok: Vec<&str> = body.split_whitespace().collect();
            let floats = |ts: &[&str]| -> Result<Vec<f64>> {
                ts.iter().map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err(&format!("bad number '{t}'")))).collect()
            };
            let nums = |n: usize| -> Result<Vec<f64>> {
                if tok.len() != n + 1 {
                    return Err(err(&format!("'{}' takes {n} values", tok[0])));
                }
                floats(&tok[1..])
            };
            let id = |t: &str| t.parse::<u32>().map_err(|_| err(&format!("bad id '{t}'")));
            match tok[0] {
                "extent" => {
                    let v = nums(2)?;
                    w.extent = [v[0], v[1]];
                    have_extent = true;
                }
                "seed" => {
                    if tok.len() != 2 {
                        return Err(err("'seed' takes one value"));
                    }
                    w.seed = tok[1].parse().map_err(|_| err("bad seed"))?;
                }
                "wall" => {
                    let v = nums(6)?;
                    w.walls.push(Cuboid::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]).map_err(|e| err(&e.to_string()))?);
                }
                "box" => {
                    if tok.len() != 9 {
                        return Err(err("'box' takes an id, six coordinates and presence flags"));
                    }
                    let presence = Presence::parse(tok[8]).ok_or_else(|| err("presence flags must be M, S or MS"))?;
                    let v = floats(&tok[2..8])?;
                    let shape = Cuboid::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]).map_err(|e| err(&e.to_string()))?;
                    w.objects.push(WorldObject { id: id(tok[1])?, shape, presence });
                }
                "mover" => {
                    if tok.len() != 10 {
                        return Err(err("'mover' takes an id, a session and seven values"));
                    }
                    let session: usize = tok[2].parse().map_err(|_| err("bad session"))?;
                    let v = floats(&tok[3..])?;
                    w.movers.push(Mover { id: id(tok[1])?, session, size: [v[0], v[1], v[2]], start: [v[3], v[4]], end: [v[5], v[6]] });
                }
                "pose" => {
                    let v = nums(4)?;
                    trajectory.push(Pose::from_yaw(v[3], Vector3::new(v[0], v[1], v[2])));
                }
                other => return Err(err(&format!("unknown primitive '{other}'"))),
            }
        }
        if !have_extent {
            return Err(Error::Parse { line: 0, msg: "missing 'extent' line".into() });
        }
        w.validate()?;
        Ok((w, trajectory))
    }

    pub fn save(&self, trajectory: &[Pose], path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text(trajectory))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Vec<Pose>)> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Spinning multi-beam range sensor and the poses it is scanned from.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorSpec {
    /// Sensor poses, shared by both sessions.
    pub trajectory: Vec<Pose>,
    /// Horizontal field of view, rad.
    pub h_fov: f64,
    /// Horizontal step, rad.
    pub h_res: f64,
    /// Lowest and highest beam elevation, rad.
    pub v_fov: (f64, f64),
    pub channels: usize,
    pub max_range: f64,
    /// Returns closer than this are dropped, m.
    pub min_range: f64,
    /// Gaussian range noise, m.
    pub noise_sigma: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            trajectory: Vec::new(),
            h_fov: std::f64::consts::TAU,
            h_res: 0.5f64.to_radians(),
            v_fov: (-15f64.to_radians(), 15f64.to_radians()),
            channels: 16,
            max_range: 30.0,
            min_range: 0.3,
            noise_sigma: 0.01,
        }
    }
}

impl SensorSpec {
    pub fn with_trajectory(mut self, trajectory: Vec<Pose>) -> Self {
        self.trajectory = trajectory;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h_res > 0.0 && self.h_fov > 0.0 && self.max_range > 0.0 && self.noise_sigma >= 0.0) {
            return Err(invalid_param("sensor resolutions and range must be positive, noise non-negative"));
        }
        if self.channels == 0 || !(self.v_fov.0 <= self.v_fov.1) || !(self.min_range >= 0.0 && self.min_range < self.max_range) {
            return Err(invalid_param("invalid vertical field of view or range limits"));
        }
        Ok(())
    }

    pub fn azimuth_steps(&self) -> usize {
        ((self.h_fov / self.h_res) + 1e-9).floor() as usize
    }

    /// Unit ray directions in the sensor frame, channel-major per azimuth.
    pub fn directions(&self) -> Vec<Vector3<f64>> {
        let n_az = self.azimuth_steps();
        let mut out = Vec::with_capacity(n_az * self.channels);
        for a in 0..n_az {
            let az = a as f64 * self.h_res;
            for c in 0..self.channels {
                let el = if self.channels == 1 {
                    self.v_fov.0
                } else {
                    self.v_fov.0 + (self.v_fov.1 - self.v_fov.0) * c as f64 / (self.channels - 1) as f64
                };
                out.push(Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()));
            }
        }
        out
    }
}

/// One simulated frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RaycastScan {
    /// Sensor-frame points with scheduled labels.
    pub cloud: PointCloud,
    pub instances: Vec<u32>,
    pub dynamic: Vec<bool>,
}

/// Surfaces present in one session at one frame.
struct Scene {
    boxes: Vec<(Cuboid, u32, bool)>,
    extent: [f64; 2],
}

impl Scene {
    fn new(world: &World, session: usize, frame: usize, n: usize) -> Self {
        let mut boxes: Vec<(Cuboid, u32, bool)> = world.walls.iter().map(|w| (*w, SHELL_ID, false)).collect();
        boxes.extend(world.objects.iter().filter(|o| o.presence.in_session(session)).map(|o| (o.shape, o.id, false)));
        let s = if n > 1 { frame as f64 / (n - 1) as f64 } else { 0.0 };
        boxes.extend(world.movers.iter().filter(|m| m.session == session).map(|m| (m.shape_at(s), m.id, true)));
        Self { boxes, extent: world.extent }
    }

    /// Closest hit beyond `t_min`: (range, instance, dynamic).
    fn cast(&self, o: &Point, d: &Vector3<f64>, t_min: f64, t_max: f64) -> Option<(f64, u32, bool)> {
        let mut best: Option<(f64, u32, bool)> = None;
        if d.z < 0.0 && o.z > 0.0 {
            let t = -o.z / d.z;
            let p = o + d * t;
            if t > t_min && t <= t_max && p.x >= 0.0 && p.y >= 0.0 && p.x <= self.extent[0] && p.y <= self.extent[1] {
                best = Some((t, SHELL_ID, false));
            }
        }
        let inv = Vector3::new(1.0 / d.x, 1.0 / d.y, 1.0 / d.z);
        for (b, id, dynamic) in &self.boxes {
            if let Some(t) = b.hit(o, &inv, t_min) {
                if t <= t_max && best.is_none_or(|(bt, ..)| t < bt) {
                    best = Some((t, *id, *dynamic));
                }
            }
        }
        best
    }
}

/// Casts every ray of `sensor` from trajectory pose `frame` against the
/// surfaces of `session` (0 = prior, 1 = current).
pub fn raycast_scan(world: &World, sensor: &SensorSpec, frame: usize, session: usize, seed: u64) -> Result<RaycastScan> {
    sensor.validate()?;
    let pose = sensor
        .trajectory
        .get(frame)
        .ok_or_else(|| invalid_param(format!("frame {frame} outside a trajectory of {}", sensor.trajectory.len())))?;
    if session > 1 {
        return Err(invalid_param("session must be 0 or 1"));
    }
    let scene = Scene::new(world, session, frame, sensor.trajectory.len());
    let origin = Point::from(*pose.translation());
    let dirs = sensor.directions();
    let hits: Vec<Option<(Vector3<f64>, f64, u32, bool)>> = dirs
        .par_iter()
        .map(|dl| {
            let d = pose.rotation() * dl;
            scene.cast(&origin, &d, 1e-9, sensor.max_range).filter(|h| h.0 >= sensor.min_range).map(|(t, id, dy)| (*dl, t, id, dy))
        })
        .collect();
    let mut r = rng::substream(rng::derive_seed(seed, session as u64), frame as u64);
    let noise = Normal::new(0.0, sensor.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| invalid_param(e.to_string()))?;
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    let mut instances = Vec::new();
    let mut dynamic = Vec::new();
    for (dl, t, id, dy) in hits.into_iter().flatten() {
        let range = if sensor.noise_sigma > 0.0 { t + noise.sample(&mut r) } else { t };
        pts.push(Point::from(dl * range));
        labels.push(if dy { ChangeClass::Static } else { world.label_of(id, session) });
        instances.push(id);
        dynamic.push(dy);
    }
    let cloud = PointCloud::new(pts)?.with_labels(labels)?;
    Ok(RaycastScan { cloud, instances, dynamic })
}

/// Both sessions of a world.
#[derive(Clone, Debug)]
pub struct SyntheticSessions {
    pub prior: Session,
    pub current: Session,
}

/// Raycasts every trajectory frame in both sessions. Frames carry labels,
/// instance ids and dynamic masks; timestamps are 0.1 s apart.
pub fn generate_sessions(world: &World, sensor: &SensorSpec, seed: u64) -> Result<SyntheticSessions> {
    world.validate()?;
    if sensor.trajectory.is_empty() {
        return Err(invalid_param("world has no trajectory"));
    }
    let session = |s: usize| -> Result<Session> {
        let frames = (0..sensor.trajectory.len())
            .map(|f| {
                let r = raycast_scan(world, sensor, f, s, seed)?;
                let mut frame = ScanFrame::new(r.cloud, sensor.trajectory[f], f as f64 * 0.1);
                frame.dynamic_mask = Some(r.dynamic);
                frame.instances = Some(r.instances);
                Ok(frame)
            })
            .collect::<Result<Vec<_>>>()?;
        Session::new(frames)
    };
    Ok(SyntheticSessions { prior: session(0)?, current: session(1)? })
}

/// Knobs of the procedural office generator.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldParams {
    pub extent: [f64; 2],
    pub wall_height: f64,
    /// Free-standing partition walls inside the room.
    pub partitions: usize,
    /// Objects present in both sessions.
    pub furniture: usize,
    /// Height range of the furniture, m.
    pub furniture_height: (f64, f64),
    /// Thin wall-mounted panels present only in the prior session.
    pub removed_panels: usize,
    /// Free-standing boxes present only in the prior session.
    pub removed_boxes: usize,
    /// Height range of the removed boxes, m.
    pub removed_height: (f64, f64),
    /// Free-standing boxes present only in the current session.
    pub added: usize,
    /// Height range of the added boxes, m.
    pub added_height: (f64, f64),
    /// Walking boxes per session.
    pub movers_per_session: usize,
    pub frames: usize,
    pub sensor_height: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            extent: [20.0, 14.0],
            wall_height: 3.0,
            partitions: 2,
            furniture: 10,
            furniture_height: (0.5, 1.5),
            removed_panels: 4,
            removed_boxes: 2,
            removed_height: (0.06, 0.1),
            added: 4,
            added_height: (1.0, 1.8),
            movers_per_session: 0,
            frames: 10,
            sensor_height: 1.0,
        }
    }
}

/// Procedural office: outer walls, partitions, furniture and scheduled
/// changes, plus a loop trajectory through the room.
pub fn generate_world(seed: u64, p: &WorldParams) -> Result<(World, Vec<Pose>)> {
    let [ex, ey] = p.extent;
    if !(ex >= 8.0 && ey >= 8.0) {
        return Err(invalid_param("world extent must be at least 8 m per side"));
    }
    let mut r = rng::seeded(seed);
    let h = p.wall_height;
    let t = 0.2;
    let mut w = World { extent: p.extent, seed, ..Default::default() };
    w.walls.push(Cuboid::new([0.0, 0.0, 0.0], [ex, t, h])?);
    w.walls.push(Cuboid::new([0.0, ey - t, 0.0], [ex, ey, h])?);
    w.walls.push(Cuboid::new([0.0, t, 0.0], [t, ey - t, h])?);
    w.walls.push(Cuboid::new([ex - t, t, 0.0], [ex, ey - t, h])?);

    // loop trajectory on an inset rectangle
    let (m, n) = (2.5, p.frames.max(1));
    let (lx, ly) = (ex - 2.0 * m, ey - 2.0 * m);
    let perim = 2.0 * (lx + ly);
    let at = |s: f64| -> ([f64; 2], f64) {
        let d = s * perim;
        if d < lx {
            ([m + d, m], 0.0)
        } else if d < lx + ly {
            ([ex - m, m + d - lx], std::f64::consts::FRAC_PI_2)
        } else if d < 2.0 * lx + ly {
            ([ex - m - (d - lx - ly), ey - m], std::f64::consts::PI)
        } else {
            ([m, ey - m - (d - 2.0 * lx - ly)], -std::f64::consts::FRAC_PI_2)
        }
    };
    let path: Vec<[f64; 2]> = (0..200).map(|k| at(k as f64 / 200.0).0).collect();
    let trajectory: Vec<Pose> = (0..n)
        .map(|k| {
            let (xy, yaw) = at(k as f64 / n as f64);
            Pose::from_yaw(yaw, Vector3::new(xy[0], xy[1], p.sensor_height))
        })
        .collect();

    // xy footprints already taken, with clearance
    let mut taken: Vec<[f64; 4]> = Vec::new();
    let clear_of_path = |b: &[f64; 4], c: f64| path.iter().all(|q| q[0] < b[0] - c || q[0] > b[2] + c || q[1] < b[1] - c || q[1] > b[3] + c);
    let overlaps = |taken: &[[f64; 4]], b: &[f64; 4], c: f64| {
        taken.iter().any(|o| b[0] < o[2] + c && b[2] > o[0] - c && b[1] < o[3] + c && b[3] > o[1] - c)
    };
    let place = |r: &mut rng::Rng, taken: &mut Vec<[f64; 4]>, sx: f64, sy: f64, near_wall: bool| -> Option<[f64; 4]> {
        for _ in 0..500 {
            let b = if near_wall {
                // flush against one of the outer walls
                match r.random_range(0..4) {
                    0 => {
                        let x = r.random_range(t + 0.5..ex - t - 0.5 - sx);
                        [x, t, x + sx, t + sy]
                    }
                    1 => {
                        let x = r.random_range(t + 0.5..ex - t - 0.5 - sx);
                        [x, ey - t - sy, x + sx, ey - t]
                    }
                    2 => {
                        let y = r.random_range(t + 0.5..ey - t - 0.5 - sx);
                        [t, y, t + sy, y + sx]
                    }
                    _ => {
                        let y = r.random_range(t + 0.5..ey - t - 0.5 - sx);
                        [ex - t - sy, y, ex - t, y + sx]
                    }
                }
            } else {
                let x = r.random_range(t + 0.6..ex - t - 0.6 - sx);
                let y = r.random_range(t + 0.6..ey - t - 0.6 - sy);
                [x, y, x + sx, y + sy]
            };
            if !overlaps(taken, &b, 0.4) && clear_of_path(&b, 0.8) {
                taken.push(b);
                return Some(b);
            }
        }
        None
    };

    for _ in 0..p.partitions {
        let len = r.random_range(2.5..5.0);
        let horizontal = r.random_bool(0.5);
        let (sx, sy) = if horizontal { (len, t) } else { (t, len) };
        if let Some(b) = place(&mut r, &mut taken, sx, sy, false) {
            w.walls.push(Cuboid::new([b[0], b[1], 0.0], [b[2], b[3], h * 0.8])?);
        }
    }
    let mut next_id = 1u32;
    let mut push = |w: &mut World, b: [f64; 4], z0: f64, z1: f64, presence: Presence| -> Result<()> {
        w.objects.push(WorldObject { id: next_id, shape: Cuboid::new([b[0], b[1], z0], [b[2], b[3], z1])?, presence });
        next_id += 1;
        Ok(())
    };
    for _ in 0..p.furniture {
        let (sx, sy) = (r.random_range(0.5..1.4), r.random_range(0.5..1.4));
        let z = r.random_range(p.furniture_height.0..=p.furniture_height.1);
        let near_wall = r.random_bool(0.3);
        if let Some(b) = place(&mut r, &mut taken, sx, sy, near_wall) {
            push(&mut w, b, 0.0, z, Presence::Both)?;
        }
    }
    for _ in 0..p.removed_panels {
        let (width, depth) = (r.random_range(0.8..2.0), r.random_range(0.06..0.1));
        let z0 = r.random_range(0.0..0.4);
        let z1 = z0 + r.random_range(0.8..1.6);
        if let Some(b) = place(&mut r, &mut taken, width, depth, true) {
            push(&mut w, b, z0, z1, Presence::PriorOnly)?;
        }
    }
    for _ in 0..p.removed_boxes {
        let (sx, sy) = (r.random_range(0.6..1.4), r.random_range(0.6..1.4));
        let z = r.random_range(p.removed_height.0..=p.removed_height.1);
        if let Some(b) = place(&mut r, &mut taken, sx, sy, false) {
            push(&mut w, b, 0.0, z, Presence::PriorOnly)?;
        }
    }
    let mut added = Vec::new();
    for _ in 0..p.added {
        let (sx, sy) = (r.random_range(0.5..1.0), r.random_range(0.5..1.0));
        let z = r.random_range(p.added_height.0..=p.added_height.1);
        if let Some(b) = place(&mut r, &mut taken, sx, sy, false) {
            push(&mut w, b, 0.0, z, Presence::CurrentOnly)?;
            added.push(b);
        }
    }
    // movers walk past scheduled changes: the current session past removed
    // objects, the prior session past added ones
    let removed: Vec<[f64; 4]> = w
        .objects
        .iter()
        .filter(|o| o.presence == Presence::PriorOnly)
        .map(|o| [o.shape.min.x, o.shape.min.y, o.shape.max.x, o.shape.max.y])
        .collect();
    for session in 0..2 {
        let sites = if session == 0 { &added } else { &removed };
        for k in 0..p.movers_per_session {
            let (c, dir) = match sites.get(k % sites.len().max(1)) {
                Some(b) if !sites.is_empty() => ([(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0], r.random_range(0.0..std::f64::consts::TAU)),
                _ => ([r.random_range(2.0..ex - 2.0), r.random_range(2.0..ey - 2.0)], r.random_range(0.0..std::f64::consts::TAU)),
            };
            let half = 1.5;
            let clamp = |v: f64, hi: f64| v.clamp(t + 0.4, hi - t - 0.4);
            let start = [clamp(c[0] - half * dir.cos(), ex), clamp(c[1] - half * dir.sin(), ey)];
            let end = [clamp(c[0] + half * dir.cos(), ex), clamp(c[1] + half * dir.sin(), ey)];
            w.movers.push(Mover { id: next_id, session, size: [0.5, 0.5, 1.7], start, end });
            next_id += 1;
        }
    }
    w.validate()?;
    Ok((w, trajectory))
}

/// Large street-like cloud for timing: ground plus two facades along a
/// 200 m corridor. With `centre` set the points concentrate around that x the
/// way a spinning sensor's returns do; otherwise they are uniform.
pub fn corridor_cloud(seed: u64, n: usize, centre: Option<f64>) -> PointCloud {
    let mut r = rng::seeded(seed);
    let pts: Vec<Point> = (0..n)
        .map(|_| loop {
            let x = match centre {
                Some(cx) => cx + 60.0 * r.random_range(-1.0f64..1.0).powi(3),
                None => r.random_range(0.0..200.0),
            };
            if !(0.0..200.0).contains(&x) {
                continue;
            }
            break match r.random_range(0..3) {
                0 => Point::new(x, r.random_range(-10.0..10.0), 0.0),
                1 => Point::new(x, -10.0, r.random_range(0.0..8.0)),
                _ => Point::new(x, 10.0, r.random_range(0.0..8.0)),
            };
        })
        .collect();
    PointCloud::new(pts).expect("finite points")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room() -> (World, SensorSpec) {
        let w = World {
            extent: [20.0, 20.0],
            walls: vec![Cuboid::new([15.0, 0.0, 0.0], [15.2, 20.0, 3.0]).unwrap()],
            objects: vec![
                WorldObject { id: 1, shape: Cuboid::new([8.0, 9.0, 0.0], [9.0, 10.0, 1.5]).unwrap(), presence: Presence::PriorOnly },
                WorldObject { id: 2, shape: Cuboid::new([6.0, 12.0, 0.0], [7.0, 13.0, 1.5]).unwrap(), presence: Presence::CurrentOnly },
                WorldObject { id: 3, shape: Cuboid::new([16.0, 9.0, 0.0], [17.0, 10.0, 1.0]).unwrap(), presence: Presence::Both },
            ],
            movers: vec![],
            seed: 0,
        };
        let traj = vec![Pose::from_translation(Vector3::new(10.0, 10.0, 1.0)), Pose::from_translation(Vector3::new(10.5, 10.0, 1.0))];
        (w, exact().with_trajectory(traj))
    }

    fn exact() -> SensorSpec {
        SensorSpec { noise_sigma: 0.0, ..Default::default() }
    }

    #[test]
    fn wall_ranges_match_plane_intersection() {
        let w = World { extent: [1.0, 1.0], walls: vec![Cuboid::new([5.0, -50.0, -50.0], [5.5, 50.0, 50.0]).unwrap()], ..Default::default() };
        // a 60 degree fan centred on +x
        let pose = Pose::from_yaw(-30f64.to_radians(), Vector3::zeros());
        let s = SensorSpec { h_fov: 60f64.to_radians(), ..exact() }.with_trajectory(vec![pose]);
        let scan = raycast_scan(&w, &s, 0, 0, 1).unwrap();
        assert_eq!(scan.cloud.len(), s.directions().len());
        let dirs = s.directions();
        for (p, dl) in scan.cloud.points().iter().zip(&dirs) {
            let d = pose.rotation() * dl;
            assert!((p.coords.norm() - 5.0 / d.x).abs() < 1e-9);
        }
    }

    #[test]
    fn hidden_box_is_not_seen() {
        let (mut w, s) = room();
        w.walls.push(Cuboid::new([12.0, 0.0, 0.0], [12.2, 20.0, 3.0]).unwrap());
        let scan = raycast_scan(&w, &s, 0, 0, 1).unwrap();
        assert!(!scan.instances.contains(&3));
        assert!(scan.instances.contains(&1));
    }

    #[test]
    fn empty_world_gives_empty_cloud() {
        let w = World { extent: [1.0, 1.0], ..Default::default() };
        let s = exact().with_trajectory(vec![Pose::from_translation(Vector3::new(50.0, 50.0, 1.0))]);
        assert!(raycast_scan(&w, &s, 0, 0, 1).unwrap().cloud.is_empty());
        assert!(raycast_scan(&w, &s, 1, 0, 1).is_err());
    }

    /// Liang-Barsky clipping of the segment (a, b) against a closed box.
    fn segment_hits(a: &Point, b: &Point, c: &Cuboid) -> bool {
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        let d = b - a;
        for k in 0..3 {
            for (p, q) in [(-d[k], a[k] - c.min[k]), (d[k], c.max[k] - a[k])] {
                if p.abs() < 1e-15 {
                    if q < 0.0 {
                        return false;
                    }
                } else if p < 0.0 {
                    t0 = t0.max(q / p);
                } else {
                    t1 = t1.min(q / p);
                }
            }
        }
        t0 <= t1
    }

    #[test]
    fn returned_points_are_unoccluded() {
        let (w, traj) = generate_world(3, &WorldParams { movers_per_session: 2, frames: 3, ..Default::default() }).unwrap();
        let s = SensorSpec { h_res: 2f64.to_radians(), ..exact() }.with_trajectory(traj);
        let mut checked = 0;
        for session in 0..2 {
            for f in 0..s.trajectory.len() {
                let scan = raycast_scan(&w, &s, f, session, 0).unwrap();
                let scene = Scene::new(&w, session, f, s.trajectory.len());
                let pose = s.trajectory[f];
                let o = Point::from(*pose.translation());
                for p in scan.cloud.points() {
                    let g = pose.apply(p);
                    // stop short of the hit surface itself
                    let end = o + (g - o) * (1.0 - 1e-7);
                    for (b, ..) in &scene.boxes {
                        assert!(!segment_hits(&o, &end, b), "segment to {g:?} crosses {b:?}");
                    }
                    assert!(end.z > 0.0);
                    checked += 1;
                }
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn sessions_follow_the_schedule() {
        let (w, s) = room();
        let out = generate_sessions(&w, &s, 4).unwrap();
        let prior = out.prior.frame(0);
        let ids = prior.instances.as_ref().unwrap();
        assert!(ids.contains(&1));
        for (i, &id) in ids.iter().enumerate() {
            let want = if id == 1 { ChangeClass::Negative } else { ChangeClass::Static };
            assert_eq!(prior.cloud.label(i), want);
        }
        let cur = out.current.frame(0);
        let ids = cur.instances.as_ref().unwrap();
        assert!(!ids.contains(&1), "removed object has no current points");
        assert!(ids.contains(&2));
        for (i, &id) in ids.iter().enumerate() {
            assert_eq!(cur.cloud.label(i) == ChangeClass::Positive, id == 2);
        }
    }

    #[test]
    fn no_change_schedule_is_all_static() {
        let (mut w, s) = room();
        for o in &mut w.objects {
            o.presence = Presence::Both;
        }
        let out = generate_sessions(&w, &SensorSpec { noise_sigma: 0.01, ..s }, 5).unwrap();
        for sess in [&out.prior, &out.current] {
            for f in sess.frames() {
                assert!(f.cloud.labels().unwrap().iter().all(|&l| l == ChangeClass::Static));
            }
        }
    }

    #[test]
    fn deterministic_and_text_roundtrip() {
        let params = WorldParams { movers_per_session: 1, ..Default::default() };
        let (w, traj) = generate_world(11, &params).unwrap();
        assert_eq!((w.clone(), traj.clone()), generate_world(11, &params).unwrap());
        let text = w.to_text(&traj);
        let (back, back_traj) = World::parse(&text).unwrap();
        assert_eq!(back.to_text(&back_traj), text);
        let sa = SensorSpec::default().with_trajectory(traj);
        let sb = SensorSpec::default().with_trajectory(back_traj);
        let a = raycast_scan(&w, &sa, 2, 1, 9).unwrap();
        let b = raycast_scan(&back, &sb, 2, 1, 9).unwrap();
        assert_eq!(a.instances, b.instances);
        for (p, q) in a.cloud.points().iter().zip(b.cloud.points()) {
            assert!((p - q).norm() < 1e-9);
        }
        assert_eq!(a, raycast_scan(&w, &sa, 2, 1, 9).unwrap());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert!(matches!(World::parse("extent 10 10\nbox 1 0 0 0 1 1\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(World::parse("extent 10 10\n# note\nblob\n"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(World::parse("extent 10 10\nbox 1 0 0 0 1 1 1 X\n"), Err(Error::Parse { line: 2, .. })));
        assert!(World::parse("wall 0 0 0 1 1 1\n").is_err());
        assert!(World::parse("extent 10 10\nbox 0 0 0 0 1 1 1 M\n").is_err());
        assert!(World::parse("extent 10 10\nbox 1 0 0 0 1 1 1 M\nbox 1 2 2 0 3 3 1 S\n").is_err());
    }

    #[test]
    fn instance_ids_refer_to_world() {
        let params = WorldParams { movers_per_session: 2, ..Default::default() };
        let (w, traj) = generate_world(2, &params).unwrap();
        let out = generate_sessions(&w, &SensorSpec::default().with_trajectory(traj), 1).unwrap();
        let mover_ids: Vec<u32> = w.movers.iter().map(|m| m.id).collect();
        let mut known: Vec<u32> = w.objects.iter().map(|o| o.id).chain(mover_ids.iter().copied()).collect();
        known.push(SHELL_ID);
        let mut seen = 0;
        for f in out.prior.frames().iter().chain(out.current.frames()) {
            let ids = f.instances.as_ref().unwrap();
            let dy = f.dynamic_mask.as_ref().unwrap();
            for (id, d) in ids.iter().zip(dy) {
                assert!(known.contains(id));
                assert_eq!(*d, mover_ids.contains(id));
                seen += *d as usize;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn corridor_clouds_are_reproducible() {
        let a = corridor_cloud(4, 2000, Some(50.0));
        assert_eq!(a, corridor_cloud(4, 2000, Some(50.0)));
        assert_eq!(a.len(), 2000);
        let (lo, hi) = a.bounds().unwrap();
        assert!(lo.x >= 0.0 && hi.x < 200.0 && lo.y >= -10.0 && hi.y <= 10.0 && lo.z >= 0.0 && hi.z <= 8.0);
    }
}
