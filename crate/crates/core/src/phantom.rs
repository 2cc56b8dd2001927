//! Parametric abdominal phantom: aorta, iliac bifurcation, fusiform aneurysm,
//! mural thrombus and wall thickening, with analytic ground truth and a
//! B-mode-like slice renderer.
//!
//! The aorta runs along y at x = 0, `aorta_depth` below the skin, from
//! `bifurcation_y` upward. Below the bifurcation two iliac tubes diverge at
//! `iliac_angle` from the midline, left toward +x.

use std::io::Write;

use nalgebra::{Vector2, Vector3};
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::Pose;

pub const FRAME_WIDTH: usize = 256;
pub const FRAME_HEIGHT: usize = 256;
/// Meters per pixel.
pub const PIXEL_SPACING: f64 = 0.0005;
/// Normal vessel wall thickness; doubled where atheromatosis applies.
pub const WALL_THICKNESS: f64 = 0.0015;
/// Maximum AP diameter at or above which an aorta counts as aneurysmal.
pub const AAA_THRESHOLD: f64 = 0.03;
/// The probe must be no more than this far above the skin to image.
pub const CONTACT_TOLERANCE: f64 = 0.005;
/// Iliac reference station, this far caudal of the bifurcation.
pub const ILIAC_REFERENCE_OFFSET: f64 = 0.015;

// Intensity bands. Lumen is strictly below DARK_LEVEL and wall strictly
// above BRIGHT_LEVEL; nothing else ever crosses either level.
pub const DARK_LEVEL: u8 = 30;
pub const BRIGHT_LEVEL: u8 = 180;
const LUMEN_BAND: (u8, u8) = (0, 25);
const THROMBUS_BAND: (u8, u8) = (90, 140);
const WALL_BAND: (u8, u8) = (185, 255);
const TISSUE_BAND: (u8, u8) = (45, 110);

/// Shortest dark run, in pixels, taken as a lumen.
const MIN_LUMEN_PX: usize = 4;
/// Furthest a wall is searched for beyond the lumen edge, in pixels.
const WALL_SEARCH_PX: usize = 120;
/// Wall pixels counted per side when grading; twice the normal wall.
const WALL_PROBE_PX: usize = 6;
const THICKENED_RATIO: f64 = 0.75;
/// Minimum mid-echoic layer (pixels, each side) read as thrombus.
const MIN_THROMBUS_PX: usize = 2;

const MIN_GRADE_FRAMES: usize = 5;
const MIN_GRADE_COVERAGE: f64 = 0.6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    InvalidConfig(String),
    #[error("probe is not in contact ({gap:.4} m above the surface)")]
    NoContact { gap: f64 },
    #[error("frame is not frozen")]
    NotFrozen,
    #[error("pixel ({col}, {row}) is outside the frame")]
    OutOfFrame { col: usize, row: usize },
    #[error("insufficient sweep: {0}")]
    InsufficientSweep(String),
    #[error("phantom file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grade {
    None,
    Segmentary,
    Diffuse,
}

impl Grade {
    pub const ALL: [Grade; 3] = [Grade::None, Grade::Segmentary, Grade::Diffuse];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Grade::None => "none",
            Grade::Segmentary => "segmentary",
            Grade::Diffuse => "diffuse",
        }
    }
}

impl std::str::FromStr for Grade {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Grade::None),
            "segmentary" => Ok(Grade::Segmentary),
            "diffuse" => Ok(Grade::Diffuse),
            other => Err(format!("unknown grade '{other}'")),
        }
    }
}

/// Gaussian fusiform bulge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aneurysm {
    pub center_y: f64,
    pub peak_radius: f64,
    pub sigma: f64,
}

/// Mural thrombus occupying `fraction` of the vessel radius over `extent_y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thrombus {
    pub fraction: f64,
    pub extent_y: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub aorta_depth: f64,
    pub aorta_base_radius: f64,
    /// Cranial end of the surveyed aorta.
    pub aorta_top_y: f64,
    pub aneurysm: Option<Aneurysm>,
    pub thrombus: Option<Thrombus>,
    pub bifurcation_y: f64,
    /// Left (+x), right (-x).
    pub iliac_radius: [f64; 2],
    pub iliac_angle: f64,
    pub atheromatosis_grade: Grade,
    pub segmentary_extent_y: [f64; 2],
    /// N/m
    pub stiffness: f64,
    pub rng_seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            aorta_depth: 0.045,
            aorta_base_radius: 0.010,
            aorta_top_y: 0.065,
            aneurysm: None,
            thrombus: None,
            bifurcation_y: -0.035,
            iliac_radius: [0.0045, 0.0045],
            iliac_angle: 25f64.to_radians(),
            atheromatosis_grade: Grade::None,
            segmentary_extent_y: [0.0, 0.0],
            stiffness: 800.0,
            rng_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    fn sign(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }

    fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: &str| Err(PhantomError::InvalidConfig(m.to_string()));
        let finite = [
            self.aorta_depth,
            self.aorta_base_radius,
            self.aorta_top_y,
            self.bifurcation_y,
            self.iliac_radius[0],
            self.iliac_radius[1],
            self.iliac_angle,
            self.stiffness,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("non-finite value");
        }
        if self.aorta_depth <= 0.0 || self.aorta_base_radius <= 0.0 {
            return bad("aorta depth and radius must be positive");
        }
        if self.iliac_radius.iter().any(|r| *r <= 0.0) {
            return bad("iliac radii must be positive");
        }
        if !(self.iliac_angle > 0.0 && self.iliac_angle < std::f64::consts::FRAC_PI_2) {
            return bad("iliac angle must be in (0, pi/2)");
        }
        if self.aorta_top_y <= self.bifurcation_y {
            return bad("aorta_top_y must be cranial of the bifurcation");
        }
        if self.stiffness <= 0.0 {
            return bad("stiffness must be positive");
        }
        if let Some(a) = &self.aneurysm {
            if !(a.peak_radius >= self.aorta_base_radius) || !a.center_y.is_finite() {
                return bad("aneurysm peak radius must be at least the base radius");
            }
            if !(a.sigma > 0.0) || !a.sigma.is_finite() {
                return bad("aneurysm sigma must be positive");
            }
        }
        if let Some(t) = &self.thrombus {
            if !(t.fraction >= 0.0 && t.fraction < 1.0) {
                return bad("thrombus fraction must be in [0, 1)");
            }
            if !(t.extent_y[0] <= t.extent_y[1]) {
                return bad("thrombus extent is reversed");
            }
        }
        if self.atheromatosis_grade == Grade::Segmentary && !(self.segmentary_extent_y[0] < self.segmentary_extent_y[1]) {
            return bad("segmentary grade needs a non-empty segmentary_extent_y");
        }
        if self.aorta_depth <= self.max_radius() + 2.0 * WALL_THICKNESS {
            return bad("aorta is too shallow for its radius");
        }
        Ok(())
    }

    fn max_radius(&self) -> f64 {
        self.aneurysm.map_or(self.aorta_base_radius, |a| a.peak_radius.max(self.aorta_base_radius))
    }

    /// Bound on the distance from any vessel axis to its outer wall.
    fn max_reach(&self) -> f64 {
        let dilation = self.max_radius() / self.aorta_base_radius;
        let iliac = self.iliac_radius[0].max(self.iliac_radius[1]) * dilation;
        self.max_radius().max(iliac) + 2.0 * WALL_THICKNESS + PIXEL_SPACING
    }

    fn dilation(&self, y: f64) -> f64 {
        radius_profile(self, y) / self.aorta_base_radius
    }

    /// Iliac radius at longitudinal position `y`; dilates in proportion with
    /// the aortic profile so an aneurysm crossing the bifurcation extends into
    /// the iliacs.
    pub fn iliac_radius_at(&self, side: Side, y: f64) -> f64 {
        self.iliac_radius[side.index()] * self.dilation(y)
    }

    /// Transverse position of an iliac centerline at `y` (caudal of the bifurcation).
    pub fn iliac_center_x(&self, side: Side, y: f64) -> f64 {
        side.sign() * (self.bifurcation_y - y).max(0.0) * self.iliac_angle.tan()
    }

    pub fn thickened_at(&self, y: f64) -> bool {
        match self.atheromatosis_grade {
            Grade::None => false,
            Grade::Diffuse => true,
            Grade::Segmentary => y >= self.segmentary_extent_y[0] && y <= self.segmentary_extent_y[1],
        }
    }

    fn wall_at(&self, y: f64) -> f64 {
        if self.thickened_at(y) {
            2.0 * WALL_THICKNESS
        } else {
            WALL_THICKNESS
        }
    }

    fn thrombus_fraction_at(&self, y: f64) -> f64 {
        match &self.thrombus {
            Some(t) if y >= t.extent_y[0] && y <= t.extent_y[1] => t.fraction,
            _ => 0.0,
        }
    }

    pub fn aorta_extent(&self) -> (f64, f64) {
        (self.bifurcation_y, self.aorta_top_y)
    }
}

/// Aortic radius at longitudinal position `y`.
pub fn radius_profile(cfg: &PhantomConfig, y: f64) -> f64 {
    match &cfg.aneurysm {
        Some(a) => {
            let excess = a.peak_radius - cfg.aorta_base_radius;
            let u = (y - a.center_y) / a.sigma;
            cfg.aorta_base_radius + excess * (-0.5 * u * u).exp()
        }
        None => cfg.aorta_base_radius,
    }
}

/// Skin height under `xy`. The body surface is the plane z = 0.
pub fn surface_height(_cfg: &PhantomConfig, _xy: &Vector2<f64>) -> f64 {
    0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub has_aaa: bool,
    pub max_ap_diameter: f64,
    pub max_ap_y: f64,
    pub has_thrombus: bool,
    pub iliac_extension: bool,
    /// Left, right; at the iliac reference station.
    pub iliac_ap_diameters: [f64; 2],
    pub grade: Grade,
}

pub fn ground_truth(cfg: &PhantomConfig) -> GroundTruth {
    let (lo, hi) = cfg.aorta_extent();
    let max_ap_y = match &cfg.aneurysm {
        Some(a) => a.center_y.clamp(lo, hi),
        None => lo,
    };
    let max_ap_diameter = 2.0 * radius_profile(cfg, max_ap_y);
    let has_thrombus = match &cfg.thrombus {
        Some(t) => t.fraction > 0.0 && t.extent_y[1] >= lo && t.extent_y[0] <= hi,
        None => false,
    };
    let bulge = radius_profile(cfg, cfg.bifurcation_y) - cfg.aorta_base_radius;
    let y_ref = cfg.bifurcation_y - ILIAC_REFERENCE_OFFSET;
    GroundTruth {
        has_aaa: max_ap_diameter >= AAA_THRESHOLD,
        max_ap_diameter,
        max_ap_y,
        has_thrombus,
        iliac_extension: bulge > 0.1 * cfg.aorta_base_radius,
        iliac_ap_diameters: [
            2.0 * cfg.iliac_radius_at(Side::Left, y_ref),
            2.0 * cfg.iliac_radius_at(Side::Right, y_ref),
        ],
        grade: cfg.atheromatosis_grade,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Tissue {
    Background,
    Wall,
    Thrombus,
    Lumen,
}

fn classify_tube(rho: f64, radius: f64, fraction: f64, wall: f64) -> Tissue {
    if rho < radius * (1.0 - fraction) {
        Tissue::Lumen
    } else if rho < radius {
        Tissue::Thrombus
    } else if rho < radius + wall {
        Tissue::Wall
    } else {
        Tissue::Background
    }
}

fn classify(cfg: &PhantomConfig, p: &Vector3<f64>) -> Tissue {
    let mut best = Tissue::Background;
    let dz = p.z + cfg.aorta_depth;
    // Every vessel axis lies at the aortic depth.
    let reach = cfg.max_reach();
    if dz.abs() > reach {
        return best;
    }
    if p.y >= cfg.bifurcation_y {
        let rho = (p.x * p.x + dz * dz).sqrt();
        if rho < reach {
            let r = radius_profile(cfg, p.y);
            best = best.max(classify_tube(rho, r, cfg.thrombus_fraction_at(p.y), cfg.wall_at(p.y)));
        }
    }
    let (s, c) = cfg.iliac_angle.sin_cos();
    let v = Vector3::new(p.x, p.y - cfg.bifurcation_y, dz);
    for side in [Side::Left, Side::Right] {
        let d = Vector3::new(side.sign() * s, -c, 0.0);
        let along = v.dot(&d);
        if along < 0.0 {
            continue;
        }
        let rho = (v - d * along).norm();
        if rho >= reach {
            continue;
        }
        let y = cfg.bifurcation_y - along * c;
        let r = cfg.iliac_radius_at(side, y);
        best = best.max(classify_tube(rho, r, cfg.thrombus_fraction_at(y), cfg.wall_at(y)));
    }
    best
}

/// A B-mode frame, row-major, row 0 at the probe face.
#[derive(Debug, Clone, PartialEq)]
pub struct UsFrame {
    pub width: usize,
    pub height: usize,
    pub pixel_spacing: f64,
    pub intensities: Vec<u8>,
    pub pose: Pose,
    pub frame_id: u32,
    pub frozen: bool,
}

/// Pixel coordinate in a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pixel {
    pub col: usize,
    pub row: usize,
}

impl Pixel {
    pub fn new(col: usize, row: usize) -> Self {
        Pixel { col, row }
    }
}

impl UsFrame {
    pub fn at(&self, col: usize, row: usize) -> u8 {
        self.intensities[row * self.width + col]
    }

    pub fn contains(&self, p: Pixel) -> bool {
        p.col < self.width && p.row < self.height
    }

    /// Binary PGM (P5).
    pub fn write_pgm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.intensities)
    }

    /// Lateral and depth offsets, in the probe frame, of a pixel center.
    fn pixel_offset(&self, col: usize, row: usize) -> (f64, f64) {
        let lateral = (col as f64 + 0.5 - self.width as f64 / 2.0) * self.pixel_spacing;
        let depth = (row as f64 + 0.5) * self.pixel_spacing;
        (lateral, depth)
    }
}

/// Renders the image plane spanned by the probe's lateral (local x) and
/// imaging (local -z) axes.
pub fn render_frame(cfg: &PhantomConfig, pose: &Pose, frame_id: u32) -> Result<UsFrame, PhantomError> {
    let xy = Vector2::new(pose.position.x, pose.position.y);
    let gap = pose.position.z - surface_height(cfg, &xy);
    if !(gap <= CONTACT_TOLERANCE) {
        return Err(PhantomError::NoContact { gap });
    }
    let mut frame = UsFrame {
        width: FRAME_WIDTH,
        height: FRAME_HEIGHT,
        pixel_spacing: PIXEL_SPACING,
        intensities: vec![0; FRAME_WIDTH * FRAME_HEIGHT],
        pose: *pose,
        frame_id,
        frozen: false,
    };
    let lateral_axis = pose.orientation * Vector3::x();
    let depth_axis = pose.probe_axis();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ u64::from(frame_id));
    for row in 0..frame.height {
        for col in 0..frame.width {
            let noise = rng.next_u32();
            let (u, d) = frame.pixel_offset(col, row);
            let p = pose.position + lateral_axis * u + depth_axis * d;
            let band = if p.z > surface_height(cfg, &Vector2::new(p.x, p.y)) {
                (0, 0)
            } else {
                match classify(cfg, &p) {
                    Tissue::Lumen => LUMEN_BAND,
                    Tissue::Thrombus => THROMBUS_BAND,
                    Tissue::Wall => WALL_BAND,
                    Tissue::Background => TISSUE_BAND,
                }
            };
            let width = u32::from(band.1 - band.0) + 1;
            frame.intensities[row * frame.width + col] = band.0 + (noise % width) as u8;
        }
    }
    Ok(frame)
}

/// Distance between two pixel centers on a frozen frame.
pub fn caliper_measure(frame: &UsFrame, a: Pixel, b: Pixel) -> Result<f64, PhantomError> {
    if !frame.frozen {
        return Err(PhantomError::NotFrozen);
    }
    for p in [a, b] {
        if !frame.contains(p) {
            return Err(PhantomError::OutOfFrame { col: p.col, row: p.row });
        }
    }
    let dc = a.col as f64 - b.col as f64;
    let dr = a.row as f64 - b.row as f64;
    Ok(dc.hypot(dr) * frame.pixel_spacing)
}

/// What a threshold reading of one vessel cross-section finds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VesselReading {
    pub column: usize,
    /// First interior row below the anterior wall.
    pub top: usize,
    /// First posterior wall row.
    pub bottom: usize,
    pub lumen_rows: usize,
    /// Mid-echoic rows between lumen and wall, anterior and posterior.
    pub mural_rows: (usize, usize),
    /// Wall rows counted (capped), anterior and posterior.
    pub wall_rows: (usize, usize),
}

impl VesselReading {
    pub fn caliper_points(&self) -> (Pixel, Pixel) {
        (Pixel::new(self.column, self.top), Pixel::new(self.column, self.bottom))
    }

    pub fn thrombus(&self) -> bool {
        self.mural_rows.0 >= MIN_THROMBUS_PX && self.mural_rows.1 >= MIN_THROMBUS_PX
    }

    /// Fraction of the grading band occupied by bright wall.
    pub fn wall_ratio(&self) -> f64 {
        (self.wall_rows.0 + self.wall_rows.1) as f64 / (2 * WALL_PROBE_PX) as f64
    }

    pub fn thickened(&self) -> bool {
        self.wall_ratio() > THICKENED_RATIO
    }
}

/// Longest dark run in a column that does not start at the probe face.
fn dark_run(frame: &UsFrame, col: usize) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut row = 0;
    while row < frame.height {
        if frame.at(col, row) < DARK_LEVEL {
            let start = row;
            while row < frame.height && frame.at(col, row) < DARK_LEVEL {
                row += 1;
            }
            let valid = start > 0 && row < frame.height && row - start >= MIN_LUMEN_PX;
            if valid && best.is_none_or(|(s, e)| row - start > e - s) {
                best = Some((start, row));
            }
        } else {
            row += 1;
        }
    }
    best
}

/// Locates the vessel nearest the image center and reads its vertical
/// cross-section: lumen, mural layer, and wall edges.
pub fn read_vessel(frame: &UsFrame) -> Option<VesselReading> {
    let runs: Vec<Option<(usize, usize)>> = (0..frame.width).map(|c| dark_run(frame, c)).collect();

    // Contiguous column groups with a lumen, pick the one nearest the center.
    let center = frame.width as f64 / 2.0;
    let mut groups = Vec::new();
    let mut col = 0;
    while col < frame.width {
        if runs[col].is_some() {
            let start = col;
            while col < frame.width && runs[col].is_some() {
                col += 1;
            }
            groups.push((start, col));
        } else {
            col += 1;
        }
    }
    let (g0, g1) = groups.into_iter().min_by(|a, b| {
        let da = ((a.0 + a.1) as f64 / 2.0 - center).abs();
        let db = ((b.0 + b.1) as f64 / 2.0 - center).abs();
        da.total_cmp(&db)
    })?;

    let longest = (g0..g1).map(|c| runs[c].map_or(0, |(s, e)| e - s)).max()?;
    let tied: Vec<usize> = (g0..g1).filter(|&c| runs[c].map_or(0, |(s, e)| e - s) == longest).collect();
    let column = tied[tied.len() / 2];
    let (s, e) = runs[column]?;

    // Anterior: walk up from the lumen to the first bright row.
    let mut r = s;
    let mut anterior_wall = None;
    while r > 0 && s - r < WALL_SEARCH_PX {
        r -= 1;
        if frame.at(column, r) > BRIGHT_LEVEL {
            anterior_wall = Some(r);
            break;
        }
    }
    let aw = anterior_wall?;
    let mut posterior_wall = None;
    let mut r = e;
    while r < frame.height && r - e < WALL_SEARCH_PX {
        if frame.at(column, r) > BRIGHT_LEVEL {
            posterior_wall = Some(r);
            break;
        }
        r += 1;
    }
    let pw = posterior_wall?;

    let count_bright = |rows: &mut dyn Iterator<Item = usize>| {
        rows.take(WALL_PROBE_PX).take_while(|&r| frame.at(column, r) > BRIGHT_LEVEL).count()
    };
    let wall_top = count_bright(&mut (0..=aw).rev());
    let wall_bottom = count_bright(&mut (pw..frame.height));

    Some(VesselReading {
        column,
        top: aw + 1,
        bottom: pw,
        lumen_rows: e - s,
        mural_rows: (s - (aw + 1), pw - e),
        wall_rows: (wall_top, wall_bottom),
    })
}

/// Caliper AP diameter of the vessel nearest the image center.
pub fn measure_ap(frame: &UsFrame) -> Option<f64> {
    let reading = read_vessel(frame)?;
    let (a, b) = reading.caliper_points();
    caliper_measure(frame, a, b).ok()
}

/// Atheromatosis grade from a longitudinal sweep of transverse frames.
///
/// `extent` is the longitudinal span of the aorta under survey; the frames'
/// poses must cover at least 60% of it. Each readable frame is one station,
/// and the fraction of stations with thickened walls decides the grade.
pub fn grade_estimate(frames: &[UsFrame], extent: (f64, f64)) -> Result<Grade, PhantomError> {
    if frames.len() < MIN_GRADE_FRAMES {
        return Err(PhantomError::InsufficientSweep(format!(
            "{} frames, need at least {MIN_GRADE_FRAMES}",
            frames.len()
        )));
    }
    let (lo, hi) = frames.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| {
        (lo.min(f.pose.position.y), hi.max(f.pose.position.y))
    });
    let length = extent.1 - extent.0;
    let covered = (hi.min(extent.1) - lo.max(extent.0)).max(0.0);
    if !(length > 0.0) || covered / length < MIN_GRADE_COVERAGE {
        return Err(PhantomError::InsufficientSweep(format!(
            "sweep covers {:.0}% of the aorta, need {:.0}%",
            100.0 * covered / length.max(f64::MIN_POSITIVE),
            100.0 * MIN_GRADE_COVERAGE
        )));
    }
    let readings: Vec<VesselReading> = frames.iter().filter_map(read_vessel).collect();
    if readings.is_empty() {
        return Err(PhantomError::InsufficientSweep("no vessel visible in any frame".into()));
    }
    let thick = readings.iter().filter(|r| r.thickened()).count();
    let q = thick as f64 / readings.len() as f64;
    Ok(if q == 0.0 {
        Grade::None
    } else if q <= 0.5 {
        Grade::Segmentary
    } else {
        Grade::Diffuse
    })
}

/// Flat key/value form of [`PhantomConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomFile {
    pub aorta_depth: f64,
    pub aorta_base_radius: f64,
    #[serde(default = "default_top_y")]
    pub aorta_top_y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aneurysm_center_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aneurysm_peak_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aneurysm_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thrombus_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thrombus_extent_y: Option<[f64; 2]>,
    pub bifurcation_y: f64,
    pub iliac_radius_left: f64,
    pub iliac_radius_right: f64,
    pub iliac_angle: f64,
    pub atheromatosis_grade: Grade,
    #[serde(default)]
    pub segmentary_extent_y: [f64; 2],
    pub stiffness: f64,
    pub rng_seed: u64,
}

fn default_top_y() -> f64 {
    0.065
}

impl TryFrom<PhantomFile> for PhantomConfig {
    type Error = PhantomError;

    fn try_from(f: PhantomFile) -> Result<Self, Self::Error> {
        let aneurysm = match (f.aneurysm_center_y, f.aneurysm_peak_radius, f.aneurysm_sigma) {
            (Some(center_y), Some(peak_radius), Some(sigma)) => Some(Aneurysm { center_y, peak_radius, sigma }),
            (None, None, None) => None,
            _ => {
                return Err(PhantomError::InvalidConfig(
                    "aneurysm_center_y, aneurysm_peak_radius and aneurysm_sigma go together".into(),
                ))
            }
        };
        let thrombus = match (f.thrombus_fraction, f.thrombus_extent_y) {
            (Some(fraction), Some(extent_y)) => Some(Thrombus { fraction, extent_y }),
            (None, None) => None,
            _ => {
                return Err(PhantomError::InvalidConfig(
                    "thrombus_fraction and thrombus_extent_y go together".into(),
                ))
            }
        };
        let cfg = PhantomConfig {
            aorta_depth: f.aorta_depth,
            aorta_base_radius: f.aorta_base_radius,
            aorta_top_y: f.aorta_top_y,
            aneurysm,
            thrombus,
            bifurcation_y: f.bifurcation_y,
            iliac_radius: [f.iliac_radius_left, f.iliac_radius_right],
            iliac_angle: f.iliac_angle,
            atheromatosis_grade: f.atheromatosis_grade,
            segmentary_extent_y: f.segmentary_extent_y,
            stiffness: f.stiffness,
            rng_seed: f.rng_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<&PhantomConfig> for PhantomFile {
    fn from(c: &PhantomConfig) -> Self {
        PhantomFile {
            aorta_depth: c.aorta_depth,
            aorta_base_radius: c.aorta_base_radius,
            aorta_top_y: c.aorta_top_y,
            aneurysm_center_y: c.aneurysm.map(|a| a.center_y),
            aneurysm_peak_radius: c.aneurysm.map(|a| a.peak_radius),
            aneurysm_sigma: c.aneurysm.map(|a| a.sigma),
            thrombus_fraction: c.thrombus.map(|t| t.fraction),
            thrombus_extent_y: c.thrombus.map(|t| t.extent_y),
            bifurcation_y: c.bifurcation_y,
            iliac_radius_left: c.iliac_radius[0],
            iliac_radius_right: c.iliac_radius[1],
            iliac_angle: c.iliac_angle,
            atheromatosis_grade: c.atheromatosis_grade,
            segmentary_extent_y: c.segmentary_extent_y,
            stiffness: c.stiffness,
            rng_seed: c.rng_seed,
        }
    }
}

impl PhantomConfig {
    /// Parses the flat key/value phantom file.
    pub fn from_kv_str(s: &str) -> Result<Self, PhantomError> {
        let file: PhantomFile = toml::from_str(s).map_err(|e| PhantomError::Parse(e.to_string()))?;
        PhantomConfig::try_from(file)
    }

    pub fn to_kv_string(&self) -> String {
        toml::to_string(&PhantomFile::from(self)).expect("phantom file serializes")
    }

    /// Named anatomy presets.
    pub fn preset(name: &str) -> Option<PhantomConfig> {
        let base = PhantomConfig::default();
        match name {
            "normal_aorta" => Some(base),
            "aaa_54mm" => Some(PhantomConfig {
                aorta_depth: 0.055,
                aneurysm: Some(Aneurysm { center_y: 0.010, peak_radius: 0.027, sigma: 0.015 }),
                thrombus: Some(Thrombus { fraction: 0.3, extent_y: [-0.005, 0.025] }),
                atheromatosis_grade: Grade::Segmentary,
                segmentary_extent_y: [0.030, 0.060],
                rng_seed: 54,
                ..base
            }),
            "iliac_extension" => Some(PhantomConfig {
                aorta_depth: 0.06,
                aneurysm: Some(Aneurysm { center_y: -0.030, peak_radius: 0.021, sigma: 0.012 }),
                atheromatosis_grade: Grade::Diffuse,
                rng_seed: 7,
                ..base
            }),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 3] = ["normal_aorta", "aaa_54mm", "iliac_extension"];
}
