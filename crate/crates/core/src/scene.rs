//! Synthetic scenes: disc-shaped "nuclei" with known centroids and masks
//! rendered onto a noisy intensity grid.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math;
use crate::raster::Raster;

/// Rejection-sampling budget shared by all instances of one scene.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// A continuous pixel position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        math::sqrt(dx * dx + dy * dy)
    }

    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.x >= 0.0 && self.y >= 0.0 && self.x < width as f64 && self.y < height as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub centroid: Point,
    pub mask: Raster,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    /// Row-major `width * height` grid with values in `[0, 1]`.
    pub intensity: Vec<f64>,
    pub instances: Vec<Instance>,
    pub seed: u64,
}

impl Scene {
    pub fn centroids(&self) -> Vec<Point> {
        self.instances.iter().map(|i| i.centroid).collect()
    }

    pub fn masks(&self) -> Vec<Raster> {
        self.instances.iter().map(|i| i.mask.clone()).collect()
    }

    pub fn intensity_at(&self, x: usize, y: usize) -> f64 {
        self.intensity[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Minimum centroid separation in pixels.
    pub min_sep: f64,
    /// Upper bound of the additive uniform noise.
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { width: 64, height: 64, count_min: 1, count_max: 8, radius_min: 3.0, radius_max: 5.0, min_sep: 12.0, noise: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneError {
    InvalidConfig(&'static str),
    /// Rejection sampling ran out of attempts; carries the instance that
    /// could not be placed and the requested count.
    Placement {
        placed: usize,
        requested: usize,
        min_sep: f64,
    },
}

impl fmt::Display for SceneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SceneError::InvalidConfig(what) => write!(f, "invalid scene config: {what}"),
            SceneError::Placement { placed, requested, min_sep } => write!(
                f,
                "could not place instance {} of {requested} with min_sep {min_sep} and disjoint discs \
                 after {MAX_PLACEMENT_ATTEMPTS} attempts",
                placed + 1
            ),
        }
    }
}

impl core::error::Error for SceneError {}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.width < 16 || self.height < 16 {
            return Err(SceneError::InvalidConfig("width and height must be at least 16"));
        }
        if !(self.min_sep > 0.0) {
            return Err(SceneError::InvalidConfig("min_sep must be positive"));
        }
        if !(self.radius_min >= 1.0) || !(self.radius_max >= self.radius_min) {
            return Err(SceneError::InvalidConfig("radius range must satisfy 1 <= min <= max"));
        }
        if 2.0 * self.radius_max >= self.width.min(self.height) as f64 {
            return Err(SceneError::InvalidConfig("discs do not fit inside the scene"));
        }
        if self.count_min > self.count_max {
            return Err(SceneError::InvalidConfig("count_min exceeds count_max"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(SceneError::InvalidConfig("noise must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Peak-normalized radial profile of a disc: 1 at the centre, 0.55 at the rim,
/// 0 outside.
fn blob_profile(distance: f64, radius: f64) -> f64 {
    if distance <= radius {
        let u = distance / radius;
        0.55 + 0.45 * (1.0 - u * u)
    } else {
        0.0
    }
}

fn disc_mask(width: usize, height: usize, centroid: Point, radius: f64) -> Raster {
    let mut mask = Raster::new(width, height);
    let x0 = math::floor(centroid.x - radius).max(0.0) as usize;
    let y0 = math::floor(centroid.y - radius).max(0.0) as usize;
    let x1 = (math::floor(centroid.x + radius) as usize + 1).min(width);
    let y1 = (math::floor(centroid.y + radius) as usize + 1).min(height);
    for y in y0..y1 {
        for x in x0..x1 {
            let c = Point::new(x as f64 + 0.5, y as f64 + 0.5);
            if c.distance(&centroid) <= radius {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

/// Generates a scene; a pure function of `(config, seed)`.
///
/// Centroids keep every disc inside the frame, are at least `min_sep` apart
/// and strictly farther apart than the sum of their radii, so instance
/// masks never overlap.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene, SceneError> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(config.count_min..=config.count_max);

    let mut placed: Vec<(Point, f64)> = Vec::with_capacity(count);
    let mut attempts = 0;
    while placed.len() < count {
        if attempts == MAX_PLACEMENT_ATTEMPTS {
            return Err(SceneError::Placement { placed: placed.len(), requested: count, min_sep: config.min_sep });
        }
        attempts += 1;
        let radius = if config.radius_max > config.radius_min { rng.gen_range(config.radius_min..config.radius_max) } else { config.radius_min };
        let c = Point::new(rng.gen_range(radius..w as f64 - radius), rng.gen_range(radius..h as f64 - radius));
        let ok = placed.iter().all(|(p, r)| {
            let d = p.distance(&c);
            d >= config.min_sep && d > r + radius
        });
        if ok {
            placed.push((c, radius));
        }
    }

    let mut intensity: Vec<f64> = (0..w * h).map(|_| if config.noise > 0.0 { rng.gen_range(0.0..config.noise) } else { 0.0 }).collect();
    let mut instances = Vec::with_capacity(count);
    for &(centroid, radius) in &placed {
        let mask = disc_mask(w, h, centroid, radius);
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) {
                    let d = Point::new(x as f64 + 0.5, y as f64 + 0.5).distance(&centroid);
                    intensity[y * w + x] += blob_profile(d, radius);
                }
            }
        }
        instances.push(Instance { centroid, mask, radius });
    }
    for v in &mut intensity {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Scene { width: w, height: h, intensity, instances, seed })
}

/// One of the eight symmetries of the square: optional transpose followed
/// by optional horizontal and vertical flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dihedral {
    pub transpose: bool,
    pub flip_x: bool,
    pub flip_y: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { transpose: false, flip_x: false, flip_y: false };

    /// Element `i % 8`, with 0 the identity.
    pub fn from_index(i: usize) -> Self {
        Dihedral { transpose: i & 4 != 0, flip_x: i & 1 != 0, flip_y: i & 2 != 0 }
    }

    /// Number of distinct elements valid for a `width x height` scene
    /// (transposes need a square).
    pub fn count_for(width: usize, height: usize) -> usize {
        if width == height {
            8
        } else {
            4
        }
    }
}

/// Applies a symmetry to the intensity grid, masks and centroids.
/// Returns `None` for a transpose of a non-square scene.
pub fn transform_scene(scene: &Scene, t: Dihedral) -> Option<Scene> {
    if t.transpose && scene.width != scene.height {
        return None;
    }
    let (w, h) = (scene.width, scene.height);
    // Destination pixel for source pixel (x, y).
    let map = |x: usize, y: usize| -> (usize, usize) {
        let (x, y) = if t.transpose { (y, x) } else { (x, y) };
        (if t.flip_x { w - 1 - x } else { x }, if t.flip_y { h - 1 - y } else { y })
    };
    let map_point = |p: Point| -> Point {
        let (x, y) = if t.transpose { (p.y, p.x) } else { (p.x, p.y) };
        Point::new(if t.flip_x { w as f64 - x } else { x }, if t.flip_y { h as f64 - y } else { y })
    };
    let mut intensity = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = map(x, y);
            intensity[dy * w + dx] = scene.intensity[y * w + x];
        }
    }
    let instances = scene
        .instances
        .iter()
        .map(|inst| {
            let mut mask = Raster::new(w, h);
            for y in 0..h {
                for x in 0..w {
                    if inst.mask.get(x, y) {
                        let (dx, dy) = map(x, y);
                        mask.set(dx, dy, true);
                    }
                }
            }
            Instance { centroid: map_point(inst.centroid), mask, radius: inst.radius }
        })
        .collect();
    Some(Scene { width: w, height: h, intensity, instances, seed: scene.seed })
}

/// Pixel-wise union of all instance masks.
pub fn foreground_mask(scene: &Scene) -> Raster {
    let mut fg = Raster::new(scene.width, scene.height);
    for inst in &scene.instances {
        fg.or_assign(&inst.mask);
    }
    fg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig { count_min: 5, count_max: 5, min_sep: 8.0, ..SceneConfig::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(&cfg, 7).unwrap(), generate_scene(&cfg, 7).unwrap());
        assert_ne!(generate_scene(&cfg, 7).unwrap(), generate_scene(&cfg, 8).unwrap());
    }

    #[test]
    fn empty_count_gives_pure_noise() {
        let cfg = SceneConfig { count_min: 0, count_max: 0, ..SceneConfig::default() };
        let s = generate_scene(&cfg, 3).unwrap();
        assert!(s.instances.is_empty());
        assert!(s.intensity.iter().all(|&v| (0.0..cfg.noise).contains(&v)));
        assert!(foreground_mask(&s).is_empty());
    }

    #[test]
    fn min_separation_holds() {
        let s = generate_scene(&small(), 1).unwrap();
        assert_eq!(s.instances.len(), 5);
        for (i, a) in s.instances.iter().enumerate() {
            for b in &s.instances[i + 1..] {
                assert!(a.centroid.distance(&b.centroid) >= 8.0);
            }
        }
    }

    #[test]
    fn centroid_inside_own_mask() {
        for seed in 0..20 {
            let s = generate_scene(&SceneConfig::default(), seed).unwrap();
            for inst in &s.instances {
                assert!(!inst.mask.is_empty());
                assert!(inst.mask.get(inst.centroid.x as usize, inst.centroid.y as usize));
            }
            assert!(s.intensity.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn unsatisfiable_config_reports_placement() {
        let cfg = SceneConfig { count_min: 40, count_max: 40, min_sep: 20.0, ..SceneConfig::default() };
        match generate_scene(&cfg, 0) {
            Err(SceneError::Placement { requested: 40, .. }) => {}
            other => panic!("expected placement error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = SceneConfig { width: 8, ..SceneConfig::default() };
        assert!(matches!(generate_scene(&cfg, 0), Err(SceneError::InvalidConfig(_))));
        let cfg = SceneConfig { min_sep: 0.0, ..SceneConfig::default() };
        assert!(generate_scene(&cfg, 0).is_err());
    }

    #[test]
    fn foreground_union_properties() {
        let s = generate_scene(&small(), 11).unwrap();
        let fg = foreground_mask(&s);
        let total: usize = s.instances.iter().map(|i| i.mask.count()).sum();
        assert!(fg.count() <= total);
        // idempotent
        assert_eq!(foreground_mask(&s), fg);
        // single instance
        let one = Scene { instances: s.instances[..1].to_vec(), ..s.clone() };
        assert_eq!(foreground_mask(&one), s.instances[0].mask);
        // monotone
        let fewer = Scene { instances: s.instances[..3].to_vec(), ..s.clone() };
        let small_fg = foreground_mask(&fewer);
        assert!(small_fg.bits().iter().zip(fg.bits()).all(|(a, b)| !a || *b));
    }

    #[test]
    fn overlapping_discs_union_counts() {
        let a = disc_mask(32, 32, Point::new(10.0, 10.0), 4.0);
        let b = disc_mask(32, 32, Point::new(13.0, 10.0), 4.0);
        let mut u = a.clone();
        u.or_assign(&b);
        assert!(u.count() <= a.count() + b.count());
        assert!(u.count() < a.count() + b.count());
    }

    #[test]
    fn symmetries_keep_centroids_inside_masks() {
        let scene = generate_scene(&SceneConfig::default(), 5).unwrap();
        for i in 0..8 {
            let t = transform_scene(&scene, Dihedral::from_index(i)).unwrap();
            assert_eq!(t.instances.len(), scene.instances.len());
            let fg: f64 = t.intensity.iter().sum();
            assert!((fg - scene.intensity.iter().sum::<f64>()).abs() < 1e-9);
            for (a, b) in t.instances.iter().zip(&scene.instances) {
                assert_eq!(a.mask.count(), b.mask.count());
                let (x, y) = (a.centroid.x as usize, a.centroid.y as usize);
                assert!(a.mask.get(x, y));
                assert!(t.intensity_at(x, y) >= 0.55);
            }
        }
        assert_eq!(transform_scene(&scene, Dihedral::IDENTITY).unwrap(), scene);
        let twice = transform_scene(&transform_scene(&scene, Dihedral::from_index(3)).unwrap(), Dihedral::from_index(3)).unwrap();
        assert_eq!(twice.intensity, scene.intensity);
        for (a, b) in twice.instances.iter().zip(&scene.instances) {
            assert_eq!(a.mask, b.mask);
            assert!(a.centroid.distance(&b.centroid) < 1e-9);
        }
        let wide = generate_scene(&SceneConfig { width: 64, height: 32, count_max: 3, ..SceneConfig::default() }, 1).unwrap();
        assert!(transform_scene(&wide, Dihedral::from_index(4)).is_none());
        assert_eq!(Dihedral::count_for(64, 32), 4);
    }
}
