//! Synthetic LiDAR-like scene pairs with exact ground-truth flow.
//!
//! The world is the sensor frame of the first sweep: a ground plane, static
//! box structures and car-like movers. The second sweep sees every mover
//! displaced by its own rigid motion and the sensor displaced by the ego
//! motion `E`, so background points move by `E⁻¹` and mover `o` by
//! `E⁻¹·M_o`. Both sweeps are sampled independently with range-decaying
//! density, the second one loses a random fraction of its points, and both
//! receive Gaussian noise.

mod io;

pub use io::{export_error_map, load_pair, read_manifest, save_pair, write_manifest, PAIR_MAGIC, PAIR_VERSION};

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{parse, parse_array};
use crate::error::{Error, Result};
use crate::geometry::{kabsch_weighted, Point, RigidTransform};

/// Height of the sensor above the ground plane.
pub const SENSOR_HEIGHT: f64 = 1.7;
/// Range below which sampling density is not attenuated.
const NEAR_RANGE: f64 = 6.0;
const MOVER_HEIGHT: f64 = 1.5;
const MOVER_ASPECT: f64 = 0.45;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// Half-width of the square world region.
    pub extent: f64,
    /// Points sampled per sweep before occlusion.
    pub points: usize,
    /// Sampling weight per square meter of ground relative to object faces.
    pub ground_density: f64,
    pub static_structures: usize,
    pub movers: usize,
    /// Mover length range.
    pub mover_size: [f64; 2],
    /// Mover displacement per frame.
    pub mover_speed: [f64; 2],
    /// Ego yaw magnitude range, degrees.
    pub ego_rotation: [f64; 2],
    /// Ego forward displacement range.
    pub ego_translation: [f64; 2],
    /// Fraction of second-sweep points dropped.
    pub occlusion: f64,
    pub noise: f64,
    /// Second sweep reuses the first sweep's surface samples.
    pub shared_sampling: bool,
    pub seed: u64,
}

impl SceneConfig {
    pub fn desk() -> Self {
        Self {
            extent: 14.0,
            points: 1400,
            ground_density: 0.35,
            static_structures: 8,
            movers: 2,
            mover_size: [3.5, 4.5],
            mover_speed: [0.6, 1.2],
            ego_rotation: [0.5, 3.0],
            ego_translation: [0.5, 1.0],
            occlusion: 0.1,
            noise: 0.01,
            shared_sampling: false,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            extent: 30.0,
            points: 11000,
            static_structures: 24,
            movers: 4,
            ..Self::desk()
        }
    }

    pub(crate) fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "extent" => self.extent = parse(key, v)?,
            "points" => self.points = parse(key, v)?,
            "ground_density" => self.ground_density = parse(key, v)?,
            "static_structures" => self.static_structures = parse(key, v)?,
            "movers" => self.movers = parse(key, v)?,
            "mover_size" => self.mover_size = parse_array(key, v)?,
            "mover_speed" => self.mover_speed = parse_array(key, v)?,
            "ego_rotation" => self.ego_rotation = parse_array(key, v)?,
            "ego_translation" => self.ego_translation = parse_array(key, v)?,
            "occlusion" => self.occlusion = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "shared_sampling" => self.shared_sampling = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key [scene] {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.mover_size, self.mover_speed, self.ego_rotation, self.ego_translation];
        let ok = self.extent > 0.0
            && self.points > 0
            && self.ground_density >= 0.0
            && ranges.iter().all(|r| r[0] >= 0.0 && r[0] <= r[1])
            && (0.0..1.0).contains(&self.occlusion)
            && self.noise >= 0.0
            && (self.movers == 0 || self.mover_size[1] > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("scene: ranges must be non-negative and ordered, occlusion in [0, 1)".into()))
        }
    }
}

/// Two sweeps with ground truth. `flow[i]` is the motion of `p[i]`;
/// `ego` maps first-sweep sensor coordinates of static points to
/// second-sweep sensor coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub p: Vec<Point>,
    pub q: Vec<Point>,
    pub flow: Vec<Point>,
    pub ego: RigidTransform,
    pub labels_p: Vec<bool>,
    pub labels_q: Vec<bool>,
    /// 0 for background, otherwise the mover number.
    pub ids_p: Vec<u16>,
    pub ids_q: Vec<u16>,
}

impl ScenePair {
    pub fn fg_fraction(&self) -> f64 {
        self.labels_p.iter().filter(|&&b| b).count() as f64 / self.p.len().max(1) as f64
    }

    pub fn mean_flow(&self) -> f64 {
        self.flow.iter().map(|f| Vector3::from(*f).norm()).sum::<f64>() / self.flow.len().max(1) as f64
    }

    /// Checks lengths, that every background flow row equals the ego flow,
    /// and that every mover's flow is one rigid motion. `tol` is absolute,
    /// in meters.
    pub fn check_consistency(&self, tol: f64) -> Result<()> {
        let n = self.p.len();
        for (what, len) in [("flow", self.flow.len()), ("labels", self.labels_p.len()), ("ids", self.ids_p.len())] {
            if len != n {
                return Err(Error::Dataset(format!("{what} has {len} rows for {n} points")));
            }
        }
        if self.labels_q.len() != self.q.len() || self.ids_q.len() != self.q.len() {
            return Err(Error::Dataset("second-sweep labels do not match its points".into()));
        }
        for i in 0..n {
            if self.labels_p[i] != (self.ids_p[i] != 0) {
                return Err(Error::Dataset(format!("label and object id disagree at point {i}")));
            }
            if !self.labels_p[i] {
                let e = self.ego.apply(&self.p[i]);
                let d = (0..3).map(|c| (e[c] - self.p[i][c] - self.flow[i][c]).abs()).fold(0.0, f64::max);
                if d > tol {
                    return Err(Error::Dataset(format!("background point {i} deviates from ego flow by {d:e}")));
                }
            }
        }
        let max_id = self.ids_p.iter().copied().max().unwrap_or(0);
        for id in 1..=max_id {
            let rows: Vec<usize> = (0..n).filter(|&i| self.ids_p[i] == id).collect();
            if rows.len() < 3 {
                continue;
            }
            let src: Vec<Point> = rows.iter().map(|&i| self.p[i]).collect();
            let dst: Vec<Point> = rows
                .iter()
                .map(|&i| [0, 1, 2].map(|c| self.p[i][c] + self.flow[i][c]))
                .collect();
            let Ok(t) = kabsch_weighted(&src, &dst, &vec![1.0; rows.len()]) else { continue };
            for (s, d) in src.iter().zip(&dst) {
                let e = t.apply(s);
                let dev = (0..3).map(|c| (e[c] - d[c]).abs()).fold(0.0, f64::max);
                if dev > tol {
                    return Err(Error::Dataset(format!("mover {id} flow is not rigid (deviation {dev:e})")));
                }
            }
        }
        Ok(())
    }
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

fn round_point(p: Point) -> Point {
    p.map(round32)
}

/// Oriented box resting on the ground.
/// (area, origin, edge u, edge v)
type Face = (f64, [f64; 3], [f64; 3], [f64; 3]);

#[derive(Clone, Copy, Debug)]
struct BoxObj {
    center: [f64; 2],
    yaw: f64,
    half: [f64; 2],
    height: f64,
}

impl BoxObj {
    fn pose(&self) -> RigidTransform {
        RigidTransform::about_axis(2, self.yaw.to_degrees()).with_translation([
            self.center[0],
            self.center[1],
            -SENSOR_HEIGHT,
        ])
    }

    fn radius(&self) -> f64 {
        self.half[0].hypot(self.half[1])
    }

    fn contains_xy(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.half[0] && ly.abs() <= self.half[1]
    }

    /// Faces as (area, sampler) in box-local coordinates: four sides and top.
    fn faces(&self) -> [Face; 5] {
        let [hx, hy] = self.half;
        let h = self.height;
        [
            (2.0 * hy * h, [hx, -hy, 0.0], [0.0, 2.0 * hy, 0.0], [0.0, 0.0, h]),
            (2.0 * hy * h, [-hx, -hy, 0.0], [0.0, 2.0 * hy, 0.0], [0.0, 0.0, h]),
            (2.0 * hx * h, [-hx, hy, 0.0], [2.0 * hx, 0.0, 0.0], [0.0, 0.0, h]),
            (2.0 * hx * h, [-hx, -hy, 0.0], [2.0 * hx, 0.0, 0.0], [0.0, 0.0, h]),
            (4.0 * hx * hy, [-hx, -hy, h], [2.0 * hx, 0.0, 0.0], [0.0, 2.0 * hy, 0.0]),
        ]
    }
}

struct Surface {
    weight: f64,
    origin: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    object: u16,
}

fn lerp(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Scene layout: static boxes, movers and their motions.
struct Layout {
    statics: Vec<BoxObj>,
    movers: Vec<BoxObj>,
    moved: Vec<BoxObj>,
}

fn place(rng: &mut ChaCha8Rng, placed: &[BoxObj], cand: impl Fn(&mut ChaCha8Rng) -> BoxObj, min_range: f64, max_range: f64) -> Option<BoxObj> {
    for _ in 0..200 {
        let b = cand(rng);
        let r = b.center[0].hypot(b.center[1]);
        if r < min_range + b.radius() || r > max_range {
            continue;
        }
        let clear = placed.iter().all(|o| {
            let d = (o.center[0] - b.center[0]).hypot(o.center[1] - b.center[1]);
            d > o.radius() + b.radius() + 0.5
        });
        if clear {
            return Some(b);
        }
    }
    None
}

fn layout(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Layout {
    let e = cfg.extent;
    let mut placed: Vec<BoxObj> = Vec::new();
    let mut movers = Vec::new();
    let mut moved = Vec::new();
    for _ in 0..cfg.movers {
        let len = lerp(rng, cfg.mover_size);
        let cand = |rng: &mut ChaCha8Rng| BoxObj {
            center: [rng.random_range(-e..e), rng.random_range(-e..e)],
            yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            half: [len / 2.0, len * MOVER_ASPECT / 2.0],
            height: MOVER_HEIGHT,
        };
        if let Some(b) = place(rng, &placed, cand, 3.0, 0.75 * e) {
            let speed = lerp(rng, cfg.mover_speed);
            let dyaw = rng.random_range(-3.0f64..3.0).to_radians();
            let heading = b.yaw + dyaw / 2.0;
            let mut m = b;
            m.center = [b.center[0] + speed * heading.cos(), b.center[1] + speed * heading.sin()];
            m.yaw = b.yaw + dyaw;
            placed.push(b);
            placed.push(m);
            movers.push(b);
            moved.push(m);
        }
    }
    let mut statics = Vec::new();
    for _ in 0..cfg.static_structures {
        let cand = |rng: &mut ChaCha8Rng| BoxObj {
            center: [rng.random_range(-e..e), rng.random_range(-e..e)],
            yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            half: [rng.random_range(0.5..2.5), rng.random_range(0.5..2.5)],
            height: rng.random_range(2.5..5.0),
        };
        if let Some(b) = place(rng, &placed, cand, 3.0, e * std::f64::consts::SQRT_2) {
            placed.push(b);
            statics.push(b);
        }
    }
    Layout { statics, movers, moved }
}

fn surfaces(cfg: &SceneConfig, statics: &[BoxObj], movers: &[BoxObj]) -> Vec<Surface> {
    let e = cfg.extent;
    let mut out = vec![Surface {
        weight: 4.0 * e * e * cfg.ground_density,
        origin: Vector3::new(-e, -e, -SENSOR_HEIGHT),
        u: Vector3::new(2.0 * e, 0.0, 0.0),
        v: Vector3::new(0.0, 2.0 * e, 0.0),
        object: 0,
    }];
    let objs = statics.iter().map(|b| (b, 0u16)).chain(movers.iter().zip(1u16..));
    for (b, id) in objs {
        let pose = b.pose();
        for (area, o, u, v) in b.faces() {
            out.push(Surface {
                weight: area,
                origin: Vector3::from(pose.apply(&o)),
                u: pose.rotation * Vector3::from(u),
                v: pose.rotation * Vector3::from(v),
                object: id,
            });
        }
    }
    out
}

/// Draws `n` surface points seen from `sensor` with density decaying as
/// `1/r` beyond `NEAR_RANGE`. Ground points under any box are rejected;
/// surface 0 is the ground.
fn sample_sweep(
    rng: &mut ChaCha8Rng,
    surf: &[Surface],
    boxes: &[BoxObj],
    sensor: &Vector3<f64>,
    n: usize,
) -> Vec<(Point, u16)> {
    let total: f64 = surf.iter().map(|s| s.weight).sum();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut pick = rng.random_range(0.0..total);
        let mut si = surf.len() - 1;
        for (i, s) in surf.iter().enumerate() {
            if pick < s.weight {
                si = i;
                break;
            }
            pick -= s.weight;
        }
        let s = &surf[si];
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        let x = s.origin + s.u * a + s.v * b;
        let range = (x - sensor).norm();
        let keep: f64 = rng.random();
        if keep >= NEAR_RANGE / range {
            continue;
        }
        if si == 0 && boxes.iter().any(|bx| bx.contains_xy(x.x, x.y)) {
            continue;
        }
        out.push(([x.x, x.y, x.z], s.object));
    }
    out
}

fn ego_motion(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> RigidTransform {
    let yaw = lerp(rng, cfg.ego_rotation) * if rng.random::<bool>() { 1.0 } else { -1.0 };
    let tilt = cfg.ego_rotation[1] * 0.1;
    let (pitch, roll) = if tilt > 0.0 {
        (rng.random_range(-tilt..tilt), rng.random_range(-tilt..tilt))
    } else {
        (0.0, 0.0)
    };
    let fwd = lerp(rng, cfg.ego_translation);
    let side = if fwd > 0.0 { rng.random_range(-0.1..0.1) * fwd } else { 0.0 };
    let r = RigidTransform::about_axis(2, yaw)
        .compose(&RigidTransform::about_axis(1, pitch))
        .compose(&RigidTransform::about_axis(0, roll));
    r.with_translation([fwd, side, 0.0])
}

/// Builds one scene pair; a pure function of `cfg`.
pub fn generate(cfg: &SceneConfig) -> Result<ScenePair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lay = layout(cfg, &mut rng);
    let sensor_motion = ego_motion(cfg, &mut rng);
    let round_rows = sensor_motion.inverse().to_rows().map(round32);
    let ego = RigidTransform::from_rows(&round_rows);
    // exact per-object motion in world coordinates
    let mover_motion: Vec<RigidTransform> = lay
        .movers
        .iter()
        .zip(&lay.moved)
        .map(|(a, b)| b.pose().compose(&a.pose().inverse()))
        .collect();
    let object_motion = |id: u16| -> RigidTransform {
        if id == 0 {
            ego
        } else {
            ego.compose(&mover_motion[id as usize - 1])
        }
    };

    let all_first: Vec<BoxObj> = lay.statics.iter().chain(&lay.movers).copied().collect();
    let surf_p = surfaces(cfg, &lay.statics, &lay.movers);
    let first = sample_sweep(&mut rng, &surf_p, &all_first, &Vector3::zeros(), cfg.points);
    if first.is_empty() {
        return Err(Error::Dataset("empty scene".into()));
    }

    let kept = ((cfg.points as f64) * (1.0 - cfg.occlusion)).round() as usize;
    let mut second: Vec<(Point, u16)> = if cfg.shared_sampling {
        first.iter().map(|&(x, id)| (object_motion(id).apply(&x), id)).collect()
    } else {
        let all_second: Vec<BoxObj> = lay.statics.iter().chain(&lay.moved).copied().collect();
        let surf_q = surfaces(cfg, &lay.statics, &lay.moved);
        let sensor = sensor_motion.translation;
        let world = sample_sweep(&mut rng, &surf_q, &all_second, &sensor, cfg.points);
        let to_sensor = sensor_motion.inverse();
        world.into_iter().map(|(x, id)| (to_sensor.apply(&x), id)).collect()
    };
    second.shuffle(&mut rng);
    second.truncate(kept.max(1));

    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut jitter = |x: Point| -> Point {
        if cfg.noise > 0.0 {
            round_point([x[0] + noise.sample(&mut rng), x[1] + noise.sample(&mut rng), x[2] + noise.sample(&mut rng)])
        } else {
            round_point(x)
        }
    };
    let p: Vec<Point> = first.iter().map(|&(x, _)| jitter(x)).collect();
    let q: Vec<Point> = second.iter().map(|&(x, _)| jitter(x)).collect();
    let ids_p: Vec<u16> = first.iter().map(|&(_, id)| id).collect();
    let ids_q: Vec<u16> = second.iter().map(|&(_, id)| id).collect();
    let flow = p
        .iter()
        .zip(&ids_p)
        .map(|(x, &id)| {
            let y = object_motion(id).apply(x);
            round_point([y[0] - x[0], y[1] - x[1], y[2] - x[2]])
        })
        .collect();
    Ok(ScenePair {
        labels_p: ids_p.iter().map(|&i| i != 0).collect(),
        labels_q: ids_q.iter().map(|&i| i != 0).collect(),
        p,
        q,
        flow,
        ego,
        ids_p,
        ids_q,
    })
}

fn shuffled_subset(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, len, n).into_vec();
    idx.shuffle(rng);
    idx
}

/// Independent uniform subsets of `n` points from each sweep, in random
/// order; ground truth follows the first sweep's rows.
pub fn subsample_shuffle(pair: &ScenePair, n: usize, seed: u64) -> Result<ScenePair> {
    for (what, len) in [("first sweep", pair.p.len()), ("second sweep", pair.q.len())] {
        if len < n {
            return Err(Error::TooFew { what, need: n, got: len });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ip = shuffled_subset(&mut rng, pair.p.len(), n);
    let iq = shuffled_subset(&mut rng, pair.q.len(), n);
    let pick = |v: &[Point], idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
    Ok(ScenePair {
        p: pick(&pair.p, &ip),
        q: pick(&pair.q, &iq),
        flow: pick(&pair.flow, &ip),
        ego: pair.ego,
        labels_p: ip.iter().map(|&i| pair.labels_p[i]).collect(),
        labels_q: iq.iter().map(|&i| pair.labels_q[i]).collect(),
        ids_p: ip.iter().map(|&i| pair.ids_p[i]).collect(),
        ids_q: iq.iter().map(|&i| pair.ids_q[i]).collect(),
    })
}

/// Rotates both sweeps, the flow, and conjugates the ego motion by a
/// rotation of `degrees` about coordinate `axis`.
pub fn rotate_pair(pair: &ScenePair, axis: usize, degrees: f64) -> ScenePair {
    let a = RigidTransform::about_axis(axis, degrees);
    let ar: Matrix3<f64> = a.rotation;
    ScenePair {
        p: pair.p.iter().map(|x| a.rotate(x)).collect(),
        q: pair.q.iter().map(|x| a.rotate(x)).collect(),
        flow: pair.flow.iter().map(|x| a.rotate(x)).collect(),
        ego: RigidTransform {
            rotation: ar * pair.ego.rotation * ar.transpose(),
            translation: ar * pair.ego.translation,
        },
        ..pair.clone()
    }
}

/// Random rotation in [−10°, 10°] about a random coordinate axis.
pub fn augment_rotation(pair: &ScenePair, seed: u64) -> ScenePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = rng.random_range(0..3);
    let deg = rng.random_range(-10.0..=10.0);
    rotate_pair(pair, axis, deg)
}

/// Mixes a base seed with a stream tag and an index (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` pairs, each generated from its own derived seed and subsampled
/// to `points` per sweep.
pub fn generate_set(scene: &SceneConfig, points: usize, count: usize, seed: u64) -> Result<Vec<ScenePair>> {
    (0..count as u64)
        .map(|i| {
            let cfg = SceneConfig {
                seed: derive_seed(seed, 10, i),
                ..scene.clone()
            };
            subsample_shuffle(&generate(&cfg)?, points, derive_seed(seed, 11, i))
        })
        .collect()
}
