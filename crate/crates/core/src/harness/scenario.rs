//! Scripted multi-object scenes with class-coded feature bumps, jittered
//! detections, radar returns, and scripted occlusions. Generation is pure
//! per frame: every frame draws from its own seeded stream, so frames can be
//! produced in any order (or in parallel) with identical results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::features::FeatureMap;
use crate::geometry::{box_to_bev_index, BevGridSpec, Box3D};
use crate::memory::FrameRecord;
use crate::radar::RadarPoint;

use super::HarnessError;

/// Prototype (l, w, d, z) per class, shared with the default anchor layout.
pub const CLASS_PROTO: [(f64, f64, f64, f64); 3] = [
    (3.9, 1.6, 1.56, 0.78),
    (0.8, 0.6, 1.73, 0.865),
    (1.76, 0.6, 1.73, 0.865),
];

#[derive(Debug, Clone)]
pub struct ObjectSpec {
    pub cls: u32,
    /// Pose at the spawn frame.
    pub x0: f64,
    pub y0: f64,
    pub theta: f64,
    /// Velocity in m/s; frames advance by `ScenarioSpec::dt`.
    pub vx: f64,
    pub vy: f64,
    /// Active while `spawn <= t < despawn`.
    pub spawn: u64,
    pub despawn: u64,
    /// Half-open `[start, end)` frame intervals with no detections, no
    /// feature bump, and no radar returns. Ground truth is unaffected.
    pub occlusions: Vec<(u64, u64)>,
}

impl ObjectSpec {
    pub fn active(&self, t: u64) -> bool {
        self.spawn <= t && t < self.despawn
    }

    pub fn occluded(&self, t: u64) -> bool {
        self.occlusions.iter().any(|&(a, b)| a <= t && t < b)
    }

    pub fn pose(&self, t: u64, dt: f64) -> (f64, f64) {
        let steps = (t - self.spawn) as f64 * dt;
        (self.x0 + self.vx * steps, self.y0 + self.vy * steps)
    }

    fn gt_box(&self, t: u64, dt: f64) -> Box3D {
        let (x, y) = self.pose(t, dt);
        let (l, w, d, z) = CLASS_PROTO[self.cls as usize];
        Box3D::new(x, y, z, l, w, d, self.theta, self.cls, 1.0).expect("prototype geometry")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    /// Detection center jitter, standard deviation in meters.
    pub jitter: f64,
    /// Probability a visible object yields no detection this frame.
    pub dropout: f64,
    /// Expected false detections per frame (Poisson).
    pub clutter: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self { jitter: 0.0, dropout: 0.0, clutter: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub frames: u64,
    pub dt: f64,
    pub objects: Vec<ObjectSpec>,
    pub noise: NoiseSpec,
    pub seed: u64,
    pub grid: BevGridSpec,
    pub c_global: usize,
    pub c_local: usize,
    /// Peak bump amplitude and its standard deviation in meters.
    pub bump_amp: f64,
    pub bump_sigma: f64,
    /// Standard deviation of the additive feature noise floor.
    pub floor: f64,
}

impl ScenarioSpec {
    pub fn new(
        frames: u64,
        objects: Vec<ObjectSpec>,
        noise: NoiseSpec,
        seed: u64,
        grid: BevGridSpec,
        c_global: usize,
        c_local: usize,
    ) -> Result<Self, HarnessError> {
        let spec = Self {
            frames,
            dt: 0.1,
            objects,
            noise,
            seed,
            grid,
            c_global,
            c_local,
            bump_amp: 2.0,
            bump_sigma: 1.6,
            floor: 0.05,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::BadScenario(msg));
        if self.frames == 0 {
            return bad("zero frames".into());
        }
        if self.c_global == 0 || self.c_local == 0 {
            return bad("feature maps need at least one channel".into());
        }
        if self.dt.is_nan() || self.bump_sigma.is_nan() || self.dt <= 0.0 || self.bump_sigma <= 0.0
        {
            return bad("dt and bump_sigma must be positive".into());
        }
        if self.noise.jitter < 0.0
            || self.noise.clutter < 0.0
            || !(0.0..=1.0).contains(&self.noise.dropout)
        {
            return bad("noise levels out of range".into());
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.cls as usize >= CLASS_PROTO.len() {
                return bad(format!("object {i}: unknown class {}", o.cls));
            }
            if o.despawn <= o.spawn {
                return bad(format!("object {i}: despawn {} <= spawn {}", o.despawn, o.spawn));
            }
            for &(a, b) in &o.occlusions {
                if b <= a {
                    return bad(format!("object {i}: empty occlusion [{a}, {b})"));
                }
            }
        }
        Ok(())
    }

    /// Independent draw stream per frame: generation order never matters.
    fn frame_rng(&self, t: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix(self.seed ^ splitmix(t.wrapping_add(1))))
    }

    /// Scripted random scene: a handful of axis-aligned movers, some of them
    /// occluded mid-sequence, suitable for training corpora.
    pub fn random(
        seed: u64,
        grid: BevGridSpec,
        frames: u64,
        noise: NoiseSpec,
        c_global: usize,
        c_local: usize,
    ) -> Result<Self, HarnessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed));
        let n_objects = rng.random_range(3..=7);
        let margin = 6.0;
        let mut objects = Vec::with_capacity(n_objects);
        for _ in 0..n_objects {
            let cls = rng.random_range(0..CLASS_PROTO.len()) as u32;
            let x0 = rng.random_range(grid.x_min + margin..grid.x_max - margin);
            let y0 = rng.random_range(grid.y_min + margin..grid.y_max - margin);
            let speed = rng.random_range(0.5..3.0);
            let (vx, vy, theta) = match rng.random_range(0..4) {
                0 => (speed, 0.0, 0.0),
                1 => (-speed, 0.0, std::f64::consts::PI),
                2 => (0.0, speed, std::f64::consts::FRAC_PI_2),
                _ => (0.0, -speed, -std::f64::consts::FRAC_PI_2),
            };
            let occlusions = if frames >= 20 && rng.random_range(0.0..1.0) < 0.5 {
                let len = rng.random_range(4..=8).min(frames - 12);
                let start = rng.random_range(10..frames - len);
                vec![(start, start + len)]
            } else {
                Vec::new()
            };
            objects.push(ObjectSpec {
                cls,
                x0,
                y0,
                theta,
                vx,
                vy,
                spawn: 0,
                despawn: frames,
                occlusions,
            });
        }
        let mut spec = Self::new(frames, objects, noise, seed, grid, c_global, c_local)?;
        spec.dt = 0.1;
        Ok(spec)
    }
}

fn splitmix(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Channel signature distinguishing classes in the feature maps.
fn class_signature(cls: u32, channel: usize) -> f64 {
    1.0 + 0.6 * ((cls as f64 + 1.0) * (channel as f64 + 1.618)).sin()
}

/// Everything the generator knows that the pipeline must not see.
#[derive(Debug, Clone)]
pub struct FrameTruth {
    /// Active objects this frame (occluded ones included), score 1.0.
    pub gts: Vec<Box3D>,
    /// `gts[i]` is `spec.objects[gt_object[i]]`.
    pub gt_object: Vec<usize>,
    pub occluded: Vec<bool>,
    /// Per detection: source object index, `None` for clutter.
    pub det_source: Vec<Option<usize>>,
}

/// Stamps Gaussian bumps for every visible object into `map`, peak at the
/// object center so the sub-cell offset stays recoverable.
fn stamp_bumps(map: &mut FeatureMap, objects: &[(usize, &ObjectSpec, f64, f64)], amp: f64, sigma: f64) {
    let grid = map.grid;
    let reach = (3.0 * sigma / grid.cell_x).ceil() as i64;
    for &(_, o, x, y) in objects {
        let center = grid.index_of(x, y);
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (ix, iy) = (center.ix + dx, center.iy + dy);
                if ix < 0 || iy < 0 || ix >= grid.width as i64 || iy >= grid.height as i64 {
                    continue;
                }
                let (cx, cy) = grid.cell_center(ix, iy);
                let r2 = (cx - x).powi(2) + (cy - y).powi(2);
                let profile = amp * (-r2 / (2.0 * sigma * sigma)).exp();
                for c in 0..map.channels() {
                    let v = map.at(c, iy as usize, ix as usize);
                    map.set(c, iy as usize, ix as usize, v + profile * class_signature(o.cls, c));
                }
            }
        }
    }
}

/// Generates one frame: smooth class-coded feature maps, jittered/dropped/
/// cluttered detections, and radar hits inside visible footprints.
pub fn generate_frame(
    spec: &ScenarioSpec,
    t: u64,
) -> Result<(FrameRecord, FrameTruth), HarnessError> {
    spec.validate()?;
    if t >= spec.frames {
        return Err(HarnessError::FrameOutOfRange { t, frames: spec.frames });
    }
    let mut rng = spec.frame_rng(t);
    let local_grid = spec.grid.refined(2);

    let mut global = FeatureMap::zeros(spec.grid, spec.c_global);
    let mut local = FeatureMap::zeros(local_grid, spec.c_local);
    if spec.floor > 0.0 {
        let floor = Normal::new(0.0, spec.floor).expect("validated");
        for v in global.data.data_mut() {
            *v = floor.sample(&mut rng);
        }
        for v in local.data.data_mut() {
            *v = floor.sample(&mut rng);
        }
    }

    let mut gts = Vec::new();
    let mut gt_object = Vec::new();
    let mut occluded = Vec::new();
    let mut visible: Vec<(usize, &ObjectSpec, f64, f64)> = Vec::new();
    for (i, o) in spec.objects.iter().enumerate() {
        if !o.active(t) {
            continue;
        }
        gts.push(o.gt_box(t, spec.dt));
        gt_object.push(i);
        let occ = o.occluded(t);
        occluded.push(occ);
        if !occ {
            let (x, y) = o.pose(t, spec.dt);
            visible.push((i, o, x, y));
        }
    }

    stamp_bumps(&mut global, &visible, spec.bump_amp, spec.bump_sigma);
    stamp_bumps(&mut local, &visible, spec.bump_amp, spec.bump_sigma);

    let mut dets = Vec::new();
    let mut det_source = Vec::new();
    let mut radar = Vec::new();
    for &(i, o, x, y) in &visible {
        // Radar first: returns exist even when the detector misses.
        let (l, w, d, _) = CLASS_PROTO[o.cls as usize];
        let (sin_t, cos_t) = o.theta.sin_cos();
        for _ in 0..4 {
            let u: f64 = rng.random_range(-0.8..0.8) * l / 2.0;
            let v: f64 = rng.random_range(-0.8..0.8) * w / 2.0;
            let px = x + u * cos_t - v * sin_t;
            let py = y + u * sin_t + v * cos_t;
            let pz = rng.random_range(0.1..d);
            let range = px.hypot(py).max(1e-6);
            let vr = (o.vx * px + o.vy * py) / range;
            let rcs = 8.0 + 2.0 * rng.random_range(-1.0..1.0f64);
            radar.push(RadarPoint { x: px, y: py, z: pz, vr, rcs });
        }
        if rng.random_range(0.0..1.0) < spec.noise.dropout {
            continue;
        }
        let (dx, dy) = if spec.noise.jitter > 0.0 {
            let n = Normal::new(0.0, spec.noise.jitter).expect("validated");
            (n.sample(&mut rng), n.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        // Confidence falls off with the localization error actually drawn.
        let score = if spec.noise.jitter > 0.0 {
            0.75 + 0.25
                * (-(dx * dx + dy * dy) / (2.0 * spec.noise.jitter * spec.noise.jitter)).exp()
        } else {
            1.0
        };
        let gt = o.gt_box(t, spec.dt);
        let det = Box3D::new(gt.x + dx, gt.y + dy, gt.z, gt.l, gt.w, gt.d, gt.theta, gt.cls, score)
            .expect("jittered geometry");
        dets.push(det);
        det_source.push(Some(i));
    }
    if spec.noise.clutter > 0.0 {
        let n: Poisson<f64> = Poisson::new(spec.noise.clutter).expect("validated");
        let count = n.sample(&mut rng) as usize;
        for _ in 0..count {
            let cls = rng.random_range(0..CLASS_PROTO.len()) as u32;
            let (l, w, d, z) = CLASS_PROTO[cls as usize];
            let x = rng.random_range(spec.grid.x_min + 2.0..spec.grid.x_max - 2.0);
            let y = rng.random_range(spec.grid.y_min + 2.0..spec.grid.y_max - 2.0);
            let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let score = rng.random_range(0.3..0.7);
            dets.push(Box3D::new(x, y, z, l, w, d, theta, cls, score).expect("clutter geometry"));
            det_source.push(None);
        }
    }

    let indexes = dets.iter().map(|b| box_to_bev_index(b, &spec.grid)).collect();
    let record = FrameRecord::new(t, global, local, dets, indexes, radar)?;
    Ok((record, FrameTruth { gts, gt_object, occluded, det_source }))
}
