//! Scripted exam scenarios: a sweep of probe stations over a phantom, the
//! measurements to take, and the link to run them over.
//!
//! File format is TOML; see `docs/scenario.md` for the schema.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{tilted, FineStageLimits, Pose, Workspace};
use crate::netchannel::{ChannelError, ChannelParams};
use crate::phantom::{PhantomConfig, PhantomError, PhantomFile};

pub const SCENARIO_VERSION: u32 = 1;

/// Default probe indentation at a station, meters.
pub const DEFAULT_PRESS_DEPTH: f64 = 0.002;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("{0}")]
    Unanchored(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationKind {
    Aorta,
    IliacLeft,
    IliacRight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    ApAorta,
    ApIliacLeft,
    ApIliacRight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Station {
    /// Probe contact point on the skin, meters.
    pub xy: [f64; 2],
    /// Craniocaudal tilt of the probe, degrees (positive tips the beam cranially).
    #[serde(default)]
    pub tilt_deg: f64,
    pub dwell_ticks: u32,
    pub kind: StationKind,
    #[serde(default = "default_press")]
    pub press_depth: f64,
}

fn default_press() -> f64 {
    DEFAULT_PRESS_DEPTH
}

impl Station {
    pub fn pose(&self) -> Pose {
        Pose {
            position: Vector3::new(self.xy[0], self.xy[1], -self.press_depth),
            orientation: tilted(self.tilt_deg.to_radians(), std::f64::consts::FRAC_PI_2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSpec {
    /// Index into the station list.
    pub station: usize,
    pub measure: Measure,
}

/// A link outage: both directions drop everything for the interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outage {
    pub start_s: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum ChannelSpec {
    Preset(String),
    Params(ChannelParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum PhantomSpec {
    Preset(String),
    Inline(PhantomFile),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    version: toml::Spanned<u32>,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    seed: u64,
    phantom: toml::Spanned<PhantomSpec>,
    #[serde(default)]
    channel: Option<toml::Spanned<ChannelSpec>>,
    #[serde(default)]
    aorta_extent_y: Option<toml::Spanned<[f64; 2]>>,
    #[serde(default)]
    station: Vec<toml::Spanned<Station>>,
    #[serde(default)]
    measurement: Vec<toml::Spanned<MeasurementSpec>>,
    #[serde(default)]
    outage: Option<toml::Spanned<Outage>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub channel: ChannelParams,
    /// Longitudinal span surveyed for grading.
    pub aorta_extent_y: (f64, f64),
    pub stations: Vec<Station>,
    pub measurements: Vec<MeasurementSpec>,
    pub outage: Option<Outage>,
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

impl Scenario {
    pub fn from_toml_str(src: &str) -> Result<Scenario, ScenarioError> {
        let raw: RawScenario = toml::from_str(src).map_err(|e| match e.span() {
            Some(span) => ScenarioError::Invalid { line: line_of(src, span.start), message: e.message().to_string() },
            None => ScenarioError::Unanchored(e.message().to_string()),
        })?;
        let at = |span: std::ops::Range<usize>, message: String| ScenarioError::Invalid {
            line: line_of(src, span.start),
            message,
        };

        if *raw.version.get_ref() != SCENARIO_VERSION {
            return Err(at(
                raw.version.span(),
                format!("unsupported scenario version {} (expected {SCENARIO_VERSION})", raw.version.get_ref()),
            ));
        }

        let phantom_span = raw.phantom.span();
        let phantom = match raw.phantom.into_inner() {
            PhantomSpec::Preset(name) => PhantomConfig::preset(&name).ok_or_else(|| {
                at(
                    phantom_span.clone(),
                    format!("unknown phantom preset '{name}' (known: {})", PhantomConfig::PRESETS.join(", ")),
                )
            })?,
            PhantomSpec::Inline(file) => PhantomConfig::try_from(file)
                .map_err(|e: PhantomError| at(phantom_span.clone(), e.to_string()))?,
        };

        let channel = match raw.channel {
            None => ChannelParams::preset("vthd").expect("built-in preset"),
            Some(spanned) => {
                let span = spanned.span();
                let params = match spanned.into_inner() {
                    ChannelSpec::Preset(name) => ChannelParams::preset(&name),
                    ChannelSpec::Params(p) => p.validate().map(|_| p),
                };
                params.map_err(|e: ChannelError| at(span, e.to_string()))?
            }
        };

        let aorta_extent_y = match raw.aorta_extent_y {
            None => phantom.aorta_extent(),
            Some(s) => {
                let [lo, hi] = *s.get_ref();
                if !(lo < hi) {
                    return Err(at(s.span(), "aorta_extent_y must be increasing".into()));
                }
                (lo, hi)
            }
        };

        let workspace = Workspace::default();
        let fine = FineStageLimits::default();
        let mut stations = Vec::with_capacity(raw.station.len());
        for (i, s) in raw.station.into_iter().enumerate() {
            let span = s.span();
            let st = s.into_inner();
            let pose = st.pose();
            if !pose.is_finite() || !workspace.contains(&pose.position) {
                return Err(at(
                    span,
                    format!(
                        "station {i} at ({:.4}, {:.4}, {:.4}) m is outside the workspace",
                        pose.position.x, pose.position.y, pose.position.z
                    ),
                ));
            }
            if !(st.press_depth >= 0.0) || st.press_depth > fine.z_range / 2.0 {
                return Err(at(span, format!("station {i}: press_depth must be within [0, {}] m", fine.z_range / 2.0)));
            }
            if !(st.tilt_deg.abs() <= fine.max_tilt.to_degrees()) {
                return Err(at(
                    span,
                    format!("station {i}: tilt {} deg exceeds {} deg", st.tilt_deg, fine.max_tilt.to_degrees()),
                ));
            }
            stations.push(st);
        }

        let mut measurements = Vec::with_capacity(raw.measurement.len());
        for m in raw.measurement {
            let span = m.span();
            let m = m.into_inner();
            if m.station >= stations.len() {
                return Err(at(
                    span,
                    format!("measurement refers to station {} but only {} are defined", m.station, stations.len()),
                ));
            }
            measurements.push(m);
        }

        let outage = match raw.outage {
            None => None,
            Some(o) => {
                let v = *o.get_ref();
                if !(v.start_s >= 0.0 && v.duration_s >= 0.0 && v.start_s.is_finite() && v.duration_s.is_finite()) {
                    return Err(at(o.span(), "outage start_s and duration_s must be finite and >= 0".into()));
                }
                Some(v)
            }
        };

        Ok(Scenario {
            name: raw.name.unwrap_or_else(|| "unnamed".into()),
            seed: raw.seed,
            phantom,
            channel: channel.with_seed(raw.seed),
            aorta_extent_y,
            stations,
            measurements,
            outage,
        })
    }

    pub fn from_path(path: &Path) -> Result<Scenario, ScenarioError> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Scenario::from_toml_str(&src)
    }

    pub const BUNDLED: [&'static str; 3] = ["aaa_54mm", "normal_aorta", "iliac_extension"];

    /// Scenarios shipped with the library.
    pub fn bundled(name: &str) -> Option<Scenario> {
        let src = match name {
            "aaa_54mm" => include_str!("../scenarios/aaa_54mm.toml"),
            "normal_aorta" => include_str!("../scenarios/normal_aorta.toml"),
            "iliac_extension" => include_str!("../scenarios/iliac_extension.toml"),
            _ => return None,
        };
        Some(Scenario::from_toml_str(src).expect("bundled scenario parses"))
    }

    /// Serializes back to the file format (phantom inline).
    pub fn to_toml_string(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            version: u32,
            name: &'a str,
            seed: u64,
            aorta_extent_y: [f64; 2],
            channel: ChannelParams,
            phantom: PhantomFile,
            #[serde(skip_serializing_if = "Option::is_none")]
            outage: Option<Outage>,
            station: &'a [Station],
            measurement: &'a [MeasurementSpec],
        }
        toml::to_string(&Out {
            version: SCENARIO_VERSION,
            name: &self.name,
            seed: self.seed,
            aorta_extent_y: [self.aorta_extent_y.0, self.aorta_extent_y.1],
            channel: self.channel,
            phantom: PhantomFile::from(&self.phantom),
            outage: self.outage,
            station: &self.stations,
            measurement: &self.measurements,
        })
        .expect("scenario serializes")
    }

    /// Station indices of a kind, in sweep order.
    pub fn stations_of(&self, kind: StationKind) -> impl Iterator<Item = usize> + '_ {
        self.stations.iter().enumerate().filter(move |(_, s)| s.kind == kind).map(|(i, _)| i)
    }
}
