//! Field-level propagation: an image-method ray model over box-shaped
//! buildings, the field/channel RSS relations, gridded RSS maps and an
//! importer for externally ray-traced path lists.

use crate::channel_model::{ChannelTensor, Path, PathSet};
use midband_autodiff::Real;
use num_complex::Complex64;
use rand::Rng;
use std::collections::HashMap;
use std::io::{Read, Write};
use thiserror::Error;

/// Intrinsic impedance of free space in ohms.
pub const ETA0: f64 = 376.730;
/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 2.997_924_58e8;
/// Reference field amplitude at 1 m, V/m.
pub const REFERENCE_FIELD: f64 = 1.0;

pub const RSS_MAP_MAGIC: [u8; 4] = *b"RSSM";
pub const RSS_MAP_VERSION: u32 = 1;

const PARAM_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PropagationError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("receiver at {0:?} lies inside a building")]
    ReceiverInsideBuilding([f64; 3]),
    #[error("position ({x}, {y}) is outside the map")]
    OutOfBounds { x: f64, y: f64 },
    #[error("invalid patch side {0}: must be odd")]
    InvalidPatchSide(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("line {line}: field `{field}`: {reason}")]
    MalformedRow {
        line: u64,
        field: String,
        reason: String,
    },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("malformed RSS map: {0}")]
    MalformedMap(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PropagationError>;

pub fn wavelength(carrier_hz: f64) -> f64 {
    SPEED_OF_LIGHT / carrier_hz
}

/// Axis-aligned box standing on the ground.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Building {
    min: [f64; 3],
    max: [f64; 3],
}

impl Building {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|a| !(max[a] > min[a]) || !min[a].is_finite() || !max[a].is_finite()) {
            return Err(PropagationError::InvalidScene(format!(
                "degenerate box {min:?}..{max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    /// Footprint `[x0, x1] x [y0, y1]` with the given height.
    pub fn footprint(x: [f64; 2], y: [f64; 2], height: f64) -> Result<Self> {
        Self::new([x[0], y[0], 0.0], [x[1], y[1], height])
    }

    pub fn min(&self) -> [f64; 3] {
        self.min
    }

    pub fn max(&self) -> [f64; 3] {
        self.max
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] > self.min[a] && p[a] < self.max[a])
    }

    /// True when the open segment `a -> b` passes through the box interior.
    fn blocks(&self, a: [f64; 3], b: [f64; 3]) -> bool {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for axis in 0..3 {
            let d = b[axis] - a[axis];
            if d.abs() < 1e-15 {
                if a[axis] <= self.min[axis] || a[axis] >= self.max[axis] {
                    return false;
                }
                continue;
            }
            let t0 = (self.min[axis] - a[axis]) / d;
            let t1 = (self.max[axis] - a[axis]) / d;
            t_near = t_near.max(t0.min(t1));
            t_far = t_far.min(t0.max(t1));
        }
        t_near < t_far && t_far > PARAM_EPS && t_near < 1.0 - PARAM_EPS
    }
}

/// Static propagation environment.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    buildings: Vec<Building>,
    tx: [f64; 3],
    carrier_hz: f64,
    reflection: Complex64,
    max_bounces: u8,
}

impl Scene {
    pub fn new(buildings: Vec<Building>, tx: [f64; 3], carrier_hz: f64) -> Result<Self> {
        let scene = Self {
            buildings,
            tx,
            carrier_hz,
            reflection: Complex64::new(-0.7, 0.0),
            max_bounces: 2,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn with_reflection(mut self, gamma: Complex64) -> Result<Self> {
        self.reflection = gamma;
        self.validate()?;
        Ok(self)
    }

    pub fn with_max_bounces(mut self, bounces: u8) -> Result<Self> {
        self.max_bounces = bounces;
        self.validate()?;
        Ok(self)
    }

    pub fn with_carrier(mut self, carrier_hz: f64) -> Result<Self> {
        self.carrier_hz = carrier_hz;
        self.validate()?;
        Ok(self)
    }

    pub fn with_tx(mut self, tx: [f64; 3]) -> Result<Self> {
        self.tx = tx;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if !(self.carrier_hz > 0.0) || !self.carrier_hz.is_finite() {
            return Err(PropagationError::InvalidScene("carrier must be positive".into()));
        }
        if self.reflection.norm() > 1.0 {
            return Err(PropagationError::InvalidScene(
                "reflection coefficient magnitude exceeds 1".into(),
            ));
        }
        if self.max_bounces > 2 {
            return Err(PropagationError::InvalidScene("at most 2 bounces".into()));
        }
        if self.tx[2] < 0.0 {
            return Err(PropagationError::InvalidScene("transmitter below ground".into()));
        }
        if self.buildings.iter().any(|b| b.contains(self.tx)) {
            return Err(PropagationError::InvalidScene(
                "transmitter inside a building".into(),
            ));
        }
        Ok(())
    }

    pub fn buildings(&self) -> &[Building] {
        &self.buildings
    }

    pub fn tx(&self) -> [f64; 3] {
        self.tx
    }

    pub fn carrier_hz(&self) -> f64 {
        self.carrier_hz
    }

    pub fn wavelength(&self) -> f64 {
        wavelength(self.carrier_hz)
    }

    pub fn reflection(&self) -> Complex64 {
        self.reflection
    }

    pub fn max_bounces(&self) -> u8 {
        self.max_bounces
    }

    pub fn is_inside_building(&self, p: [f64; 3]) -> bool {
        self.buildings.iter().any(|b| b.contains(p))
    }

    fn line_of_sight(&self, a: [f64; 3], b: [f64; 3]) -> bool {
        !self.buildings.iter().any(|bl| bl.blocks(a, b))
    }

    fn facets(&self) -> Vec<Facet> {
        let inf = f64::INFINITY;
        let mut out = vec![Facet {
            axis: 2,
            value: 0.0,
            outward: 1.0,
            lo: [-inf, -inf],
            hi: [inf, inf],
        }];
        for b in &self.buildings {
            for axis in 0..2 {
                let other = [1 - axis, 2];
                let lo = [b.min[other[0]], b.min[2]];
                let hi = [b.max[other[0]], b.max[2]];
                out.push(Facet {
                    axis,
                    value: b.min[axis],
                    outward: -1.0,
                    lo,
                    hi,
                });
                out.push(Facet {
                    axis,
                    value: b.max[axis],
                    outward: 1.0,
                    lo,
                    hi,
                });
            }
            out.push(Facet {
                axis: 2,
                value: b.max[2],
                outward: 1.0,
                lo: [b.min[0], b.min[1]],
                hi: [b.max[0], b.max[1]],
            });
        }
        out
    }
}

/// Planar reflecting rectangle perpendicular to `axis`.
#[derive(Clone, Copy, Debug)]
struct Facet {
    axis: usize,
    value: f64,
    /// +1 when the reflecting side is the positive half-space.
    outward: f64,
    /// Bounds on the remaining two axes, in increasing axis order.
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Facet {
    fn others(&self) -> [usize; 2] {
        match self.axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }

    fn mirror(&self, p: [f64; 3]) -> [f64; 3] {
        let mut m = p;
        m[self.axis] = 2.0 * self.value - p[self.axis];
        m
    }

    fn faces(&self, p: [f64; 3]) -> bool {
        (p[self.axis] - self.value) * self.outward > PARAM_EPS
    }

    /// Crossing of segment `a -> b` with the facet, if inside the rectangle.
    fn hit(&self, a: [f64; 3], b: [f64; 3]) -> Option<[f64; 3]> {
        let d = b[self.axis] - a[self.axis];
        if d.abs() < 1e-15 {
            return None;
        }
        let t = (self.value - a[self.axis]) / d;
        if !(t > 0.0 && t < 1.0) {
            return None;
        }
        let mut p = [0.0; 3];
        for i in 0..3 {
            p[i] = a[i] + t * (b[i] - a[i]);
        }
        p[self.axis] = self.value;
        let within = self
            .others()
            .iter()
            .enumerate()
            .all(|(k, &ax)| p[ax] >= self.lo[k] && p[ax] <= self.hi[k]);
        within.then_some(p)
    }
}

/// Geometric description of one traced ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    /// Unfolded path length in meters.
    pub length: f64,
    pub bounces: u8,
    /// Reflection points in propagation order.
    pub vertices: Vec<[f64; 3]>,
    pub field: Complex64,
    pub aoa_az: f64,
    pub aoa_el: f64,
    pub aod_az: f64,
    pub aod_el: f64,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn angles(v: [f64; 3]) -> (f64, f64) {
    (v[1].atan2(v[0]), v[2].atan2(v[0].hypot(v[1])))
}

fn make_ray(scene: &Scene, tx: [f64; 3], rx: [f64; 3], vertices: Vec<[f64; 3]>) -> Ray {
    let mut length = 0.0;
    let mut prev = tx;
    for &v in vertices.iter().chain(std::iter::once(&rx)) {
        length += norm(sub(v, prev));
        prev = v;
    }
    let first = vertices.first().copied().unwrap_or(rx);
    let last = vertices.last().copied().unwrap_or(tx);
    let (aod_az, aod_el) = angles(sub(first, tx));
    let (aoa_az, aoa_el) = angles(sub(last, rx));
    let bounces = vertices.len() as u8;
    let lambda = scene.wavelength();
    let phase = -2.0 * std::f64::consts::PI * length / lambda;
    let field = scene.reflection.powu(bounces as u32) * Complex64::from_polar(REFERENCE_FIELD / length, phase);
    Ray {
        length,
        bounces,
        vertices,
        field,
        aoa_az,
        aoa_el,
        aod_az,
        aod_el,
    }
}

/// Direct path plus specular reflections (ground, walls, roofs) up to the
/// scene's bounce limit.
pub fn trace_rays(scene: &Scene, rx: [f64; 3]) -> Result<Vec<Ray>> {
    if scene.is_inside_building(rx) {
        return Err(PropagationError::ReceiverInsideBuilding(rx));
    }
    let tx = scene.tx;
    let mut rays = Vec::new();
    if norm(sub(rx, tx)) > 0.0 && scene.line_of_sight(tx, rx) {
        rays.push(make_ray(scene, tx, rx, Vec::new()));
    }
    if scene.max_bounces == 0 {
        return Ok(rays);
    }
    let facets = scene.facets();
    for f in &facets {
        if !(f.faces(tx) && f.faces(rx)) {
            continue;
        }
        let image = f.mirror(tx);
        if let Some(p) = f.hit(rx, image) {
            if scene.line_of_sight(tx, p) && scene.line_of_sight(p, rx) {
                rays.push(make_ray(scene, tx, rx, vec![p]));
            }
        }
    }
    if scene.max_bounces < 2 {
        return Ok(rays);
    }
    for (i1, f1) in facets.iter().enumerate() {
        if !f1.faces(tx) {
            continue;
        }
        let image1 = f1.mirror(tx);
        for (i2, f2) in facets.iter().enumerate() {
            if i1 == i2 || !f2.faces(rx) || !f2.faces(image1) {
                continue;
            }
            let image2 = f2.mirror(image1);
            let Some(p2) = f2.hit(rx, image2) else { continue };
            if !f1.faces(p2) {
                continue;
            }
            let Some(p1) = f1.hit(p2, image1) else { continue };
            if scene.line_of_sight(tx, p1)
                && scene.line_of_sight(p1, p2)
                && scene.line_of_sight(p2, rx)
            {
                rays.push(make_ray(scene, tx, rx, vec![p1, p2]));
            }
        }
    }
    Ok(rays)
}

/// Maps field strength to a channel gain so that a single on-grid path
/// carries the same power in the channel tensor as in the field picture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GainCalibration {
    /// Transmit power in watts.
    pub p_t: f64,
    pub nr: usize,
    pub nt: usize,
}

impl GainCalibration {
    pub fn alpha(&self, field: Complex64, lambda: f64) -> Complex64 {
        field * (lambda / (8.0 * std::f64::consts::PI * ETA0 * self.p_t * (self.nr * self.nt) as f64).sqrt())
    }
}

fn ray_to_path(ray: &Ray, lambda: f64, calib: &GainCalibration) -> Path<f64> {
    Path {
        alpha: calib.alpha(ray.field, lambda),
        toa: ray.length / SPEED_OF_LIGHT,
        aoa_az: ray.aoa_az,
        aoa_el: ray.aoa_el,
        aod_az: ray.aod_az,
        aod_el: ray.aod_el,
        field: ray.field,
    }
}

/// Traces `rx` and converts every ray to a channel path. An occluded
/// receiver with no reflections yields an empty set.
pub fn trace_paths(scene: &Scene, rx: [f64; 3], calib: &GainCalibration) -> Result<PathSet<f64>> {
    let lambda = scene.wavelength();
    Ok(trace_rays(scene, rx)?
        .iter()
        .map(|r| ray_to_path(r, lambda, calib))
        .collect())
}

/// Received power of coherently summed fields: `lambda^2/(8 pi eta0) |sum E|^2`.
pub fn rss_from_fields<T: Real>(fields: &[num_complex::Complex<T>], lambda: T) -> T {
    let (re, im) = fields
        .iter()
        .fold((0.0f64, 0.0f64), |(r, i), z| (r + z.re.as_f64(), i + z.im.as_f64()));
    let l = lambda.as_f64();
    T::lit(l * l / (8.0 * std::f64::consts::PI * ETA0) * (re * re + im * im))
}

/// Received power implied by a channel: `P_T * sum_d ||H_d||_F^2`.
pub fn rss_from_channel<T: Real>(h: &ChannelTensor<T>, p_t: T) -> T {
    T::lit(p_t.as_f64() * h.energy())
}

/// Mean and standard error of [`rss_from_fields`] over `draws` independent
/// uniform phase rotations of each field.
pub fn phase_averaged_rss<R: Rng + ?Sized>(
    fields: &[Complex64],
    lambda: f64,
    draws: usize,
    rng: &mut R,
) -> (f64, f64) {
    let samples: Vec<f64> = (0..draws)
        .map(|_| {
            let rotated: Vec<Complex64> = fields
                .iter()
                .map(|&e| e * Complex64::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect();
            rss_from_fields(&rotated, lambda)
        })
        .collect();
    let n = samples.len().max(1) as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Regular grid of receiver positions; cell `(i, j)` is centred at
/// `origin + (j, i) * spacing`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub origin: [f64; 2],
    pub spacing: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + col as f64 * self.spacing,
            self.origin[1] + row as f64 * self.spacing,
        ]
    }

    /// Nearest cell to a point, or `None` outside the grid's footprint.
    pub fn nearest_cell(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let fx = (p[0] - self.origin[0]) / self.spacing;
        let fy = (p[1] - self.origin[1]) / self.spacing;
        let inside = |f: f64, n: usize| f >= -0.5 && f < n as f64 - 0.5;
        if !(inside(fx, self.cols) && inside(fy, self.rows)) {
            return None;
        }
        let col = (fx.round().max(0.0) as usize).min(self.cols - 1);
        let row = (fy.round().max(0.0) as usize).min(self.rows - 1);
        Some((row, col))
    }
}

/// Gridded RSS in watts at a fixed receiver height.
#[derive(Clone, Debug, PartialEq)]
pub struct RssMap {
    grid: GridSpec,
    rx_height: f64,
    values: Vec<f64>,
}

impl RssMap {
    pub fn from_values(grid: GridSpec, rx_height: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.rows * grid.cols {
            return Err(PropagationError::InvalidGrid(format!(
                "{} values for a {}x{} grid",
                values.len(),
                grid.rows,
                grid.cols
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(PropagationError::InvalidGrid("negative or NaN RSS".into()));
        }
        Ok(Self {
            grid,
            rx_height,
            values,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn rx_height(&self) -> f64 {
        self.rx_height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.cols + col]
    }
}

/// Evaluates coherent field RSS at every grid cell. Cells inside buildings
/// or without any path hold 0.
pub fn generate_rss_map(scene: &Scene, grid: GridSpec, rx_height: f64) -> Result<RssMap> {
    if grid.rows == 0 || grid.cols == 0 || !(grid.spacing > 0.0) {
        return Err(PropagationError::InvalidGrid(format!("{grid:?}")));
    }
    let lambda = scene.wavelength();
    let mut values = Vec::with_capacity(grid.rows * grid.cols);
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let [x, y] = grid.cell_center(row, col);
            let p = [x, y, rx_height];
            if scene.is_inside_building(p) {
                values.push(0.0);
                continue;
            }
            let fields: Vec<Complex64> = trace_rays(scene, p)?.iter().map(|r| r.field).collect();
            values.push(rss_from_fields(&fields, lambda));
        }
    }
    RssMap::from_values(grid, rx_height, values)
}

/// Square window of an RSS map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RssPatch {
    side: usize,
    center: (usize, usize),
    values: Vec<f64>,
}

impl RssPatch {
    pub fn new(side: usize, center: (usize, usize), values: Vec<f64>) -> Result<Self> {
        if values.len() != side * side {
            return Err(PropagationError::InvalidGrid(format!(
                "{} values for a {side}x{side} patch",
                values.len()
            )));
        }
        Ok(Self {
            side,
            center,
            values,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn center(&self) -> (usize, usize) {
        self.center
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `side x side` window around the cell nearest to `ue`, zero-padded past
/// the map border.
pub fn rss_patch_at(map: &RssMap, ue: [f64; 2], side: usize) -> Result<RssPatch> {
    if side % 2 == 0 {
        return Err(PropagationError::InvalidPatchSide(side));
    }
    let (row, col) = map
        .grid
        .nearest_cell(ue)
        .ok_or(PropagationError::OutOfBounds { x: ue[0], y: ue[1] })?;
    let half = (side / 2) as isize;
    let mut values = Vec::with_capacity(side * side);
    for dr in -half..=half {
        for dc in -half..=half {
            let (r, c) = (row as isize + dr, col as isize + dc);
            let inside = r >= 0 && c >= 0 && (r as usize) < map.grid.rows && (c as usize) < map.grid.cols;
            values.push(if inside { map.get(r as usize, c as usize) } else { 0.0 });
        }
    }
    RssPatch::new(side, (row, col), values)
}

pub fn write_rss_map<W: Write>(mut w: W, map: &RssMap) -> Result<()> {
    let g = &map.grid;
    w.write_all(&RSS_MAP_MAGIC)?;
    w.write_all(&RSS_MAP_VERSION.to_le_bytes())?;
    w.write_all(&(g.rows as u32).to_le_bytes())?;
    w.write_all(&(g.cols as u32).to_le_bytes())?;
    for v in [g.origin[0], g.origin[1], g.spacing, map.rx_height] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(map.values.len() * 4);
    for &v in &map.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_rss_map<R: Read>(mut r: R) -> Result<RssMap> {
    let mut head = [0u8; 16 + 32];
    r.read_exact(&mut head)
        .map_err(|_| PropagationError::MalformedMap("truncated header".into()))?;
    if head[..4] != RSS_MAP_MAGIC {
        return Err(PropagationError::MalformedMap("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(head[o..o + 8].try_into().unwrap());
    if u32_at(4) != RSS_MAP_VERSION {
        return Err(PropagationError::MalformedMap(format!("unsupported version {}", u32_at(4))));
    }
    let (rows, cols) = (u32_at(8) as usize, u32_at(12) as usize);
    let grid = GridSpec {
        origin: [f64_at(16), f64_at(24)],
        spacing: f64_at(32),
        rows,
        cols,
    };
    let rx_height = f64_at(40);
    let mut data = vec![0u8; rows * cols * 4];
    r.read_exact(&mut data)
        .map_err(|_| PropagationError::MalformedMap("truncated values".into()))?;
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    RssMap::from_values(grid, rx_height, values)
}

/// One receiver location from an external path list.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportedSample {
    pub sample_id: String,
    pub paths: PathSet<f64>,
    /// Receiver position, when the export carries `rx_x,rx_y,rx_z`.
    pub rx_position: Option<[f64; 3]>,
}

const REQUIRED_COLUMNS: [&str; 9] = [
    "sample_id",
    "path_id",
    "e_real",
    "e_imag",
    "toa_s",
    "aoa_az_rad",
    "aoa_el_rad",
    "aod_az_rad",
    "aod_el_rad",
];
const POSITION_COLUMNS: [&str; 3] = ["rx_x", "rx_y", "rx_z"];

/// Parses a ray-tracer CSV export, one path per row, grouping rows by
/// `sample_id` in order of first appearance.
pub fn import_paths<R: Read>(
    reader: R,
    carrier_hz: f64,
    calib: &GainCalibration,
) -> Result<Vec<ImportedSample>> {
    let lambda = wavelength(carrier_hz);
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers()?.clone();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        let known = REQUIRED_COLUMNS.iter().chain(&POSITION_COLUMNS).find(|&&c| c == h);
        match known {
            Some(&c) => {
                index.insert(c, i);
            }
            None => return Err(PropagationError::UnknownColumn(h.to_string())),
        }
    }
    for c in REQUIRED_COLUMNS {
        if !index.contains_key(c) {
            return Err(PropagationError::MissingColumn(c.to_string()));
        }
    }
    let has_position = match POSITION_COLUMNS.iter().filter(|c| index.contains_key(*c)).count() {
        0 => false,
        3 => true,
        _ => {
            let missing = POSITION_COLUMNS.iter().find(|c| !index.contains_key(*c)).unwrap();
            return Err(PropagationError::MissingColumn(missing.to_string()));
        }
    };

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, ImportedSample> = HashMap::new();
    for record in csv.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let text = |name: &str| record.get(index[name]).unwrap_or("");
        let num = |name: &str| -> Result<f64> {
            let raw = text(name);
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| PropagationError::MalformedRow {
                    line,
                    field: name.to_string(),
                    reason: format!("`{raw}` is not a finite number"),
                })
        };
        let sample_id = text("sample_id").to_string();
        if sample_id.is_empty() {
            return Err(PropagationError::MalformedRow {
                line,
                field: "sample_id".into(),
                reason: "empty".into(),
            });
        }
        text("path_id").parse::<u64>().map_err(|_| PropagationError::MalformedRow {
            line,
            field: "path_id".into(),
            reason: format!("`{}` is not a non-negative integer", text("path_id")),
        })?;
        let field = Complex64::new(num("e_real")?, num("e_imag")?);
        let toa = num("toa_s")?;
        if toa < 0.0 {
            return Err(PropagationError::MalformedRow {
                line,
                field: "toa_s".into(),
                reason: "negative delay".into(),
            });
        }
        let path = Path {
            alpha: calib.alpha(field, lambda),
            toa,
            aoa_az: num("aoa_az_rad")?,
            aoa_el: num("aoa_el_rad")?,
            aod_az: num("aod_az_rad")?,
            aod_el: num("aod_el_rad")?,
            field,
        };
        let rx_position = if has_position {
            Some([num("rx_x")?, num("rx_y")?, num("rx_z")?])
        } else {
            None
        };
        let entry = groups.entry(sample_id.clone()).or_insert_with(|| {
            order.push(sample_id.clone());
            ImportedSample {
                sample_id,
                paths: PathSet::default(),
                rx_position,
            }
        });
        entry.paths.push(path);
    }
    Ok(order
        .into_iter()
        .map(|id| groups.remove(&id).expect("grouped sample"))
        .collect())
}
