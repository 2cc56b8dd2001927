//! Paired bedside/remote exams and synthetic cohort campaigns.
//!
//! The remote arm runs the full teleoperation session. The bedside arm reads
//! the same phantom directly at the same stations, with the probe placed by
//! hand to within a millimeter, so the two arms differ only by placement and
//! pixel quantization.

use std::path::Path;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::Pose;
use crate::netchannel::{ChannelError, ChannelParams};
use crate::phantom::{
    grade_estimate, measure_ap, read_vessel, render_frame, Aneurysm, Grade, PhantomConfig, Thrombus, UsFrame,
    AAA_THRESHOLD, ILIAC_REFERENCE_OFFSET,
};
use crate::scenario::{Measure, MeasurementSpec, Outage, Scenario, Station, StationKind, DEFAULT_PRESS_DEPTH};
use crate::session::{run_session_with, start_pose, SessionConfig, SessionError, SessionTrace, FREEZE_SETTLE_US};
use crate::stats::{campaign_report, Arm, ExamRecord, StatsError, StudyReport};

/// Quality and acceptance are human judgments the simulator does not model;
/// every record carries this fixed value.
pub const PLACEHOLDER_SCORE: f64 = 50.0;

pub const COHORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid cohort: {0}")]
    InvalidCohort(String),
    #[error("patient {patient}: {source}")]
    Session { patient: String, source: SessionError },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Both arms of one patient's exam.
#[derive(Debug, Clone)]
pub struct ExamOutcome {
    pub bedside: ExamRecord,
    pub remote: ExamRecord,
    pub trace: SessionTrace,
}

struct Reading {
    station: usize,
    frame: UsFrame,
}

fn build_record(
    patient_id: &str,
    arm: Arm,
    scenario: &Scenario,
    captures: &[Reading],
    values: &[(MeasurementSpec, Option<f64>)],
    duration: f64,
) -> ExamRecord {
    let pick = |measure: Measure| values.iter().filter(move |(m, _)| m.measure == measure).filter_map(|(_, v)| *v);
    let ap_diameter = pick(Measure::ApAorta).reduce(f64::max);
    let aorta: Vec<UsFrame> = captures
        .iter()
        .filter(|c| scenario.stations[c.station].kind == StationKind::Aorta)
        .map(|c| c.frame.clone())
        .collect();
    let thrombus = aorta.iter().filter_map(read_vessel).any(|r| r.thrombus());
    let grade = match grade_estimate(&aorta, scenario.aorta_extent_y) {
        Ok(g) => g,
        Err(e) => {
            log::warn!("{patient_id} {arm:?}: no grade ({e})");
            return ExamRecord::failed(patient_id, arm, duration);
        }
    };
    ExamRecord {
        patient_id: patient_id.to_string(),
        arm,
        completed: true,
        aaa_detected: ap_diameter.is_some_and(|d| d >= AAA_THRESHOLD),
        ap_diameter,
        thrombus: Some(thrombus),
        iliac_left: pick(Measure::ApIliacLeft).next(),
        iliac_right: pick(Measure::ApIliacRight).next(),
        grade: Some(grade),
        duration,
        quality_score: PLACEHOLDER_SCORE,
        acceptance_score: PLACEHOLDER_SCORE,
    }
}

/// Builds the remote record from a session trace.
pub fn remote_record(patient_id: &str, scenario: &Scenario, trace: &SessionTrace) -> ExamRecord {
    if !trace.completed() {
        return ExamRecord::failed(patient_id, Arm::Remote, trace.simulated_s);
    }
    let captures: Vec<Reading> =
        trace.captures.iter().map(|c| Reading { station: c.station, frame: c.frame.clone() }).collect();
    let values: Vec<(MeasurementSpec, Option<f64>)> = trace
        .measurements
        .iter()
        .map(|m| (MeasurementSpec { station: m.station, measure: m.measure }, m.value))
        .collect();
    build_record(patient_id, Arm::Remote, scenario, &captures, &values, trace.duration_s)
}

/// Hand placement error of the bedside operator, meters.
const BEDSIDE_LATERAL_JITTER: f64 = 0.001;
const BEDSIDE_DEPTH_JITTER: f64 = 0.00025;

/// Bedside arm: direct reads at hand-placed poses. Duration is travel at the
/// robot's speed plus dwell and freeze settling at each station.
pub fn bedside_record(patient_id: &str, scenario: &Scenario, seed: u64, cfg: &SessionConfig) -> ExamRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbed5_1de0);
    let mut captures = Vec::with_capacity(scenario.stations.len());
    let mut t = 0.0;
    let mut at = start_pose().position;
    let mut last_measure = 0.0;
    for (i, st) in scenario.stations.iter().enumerate() {
        let mut pose: Pose = st.pose();
        t += (pose.position - at).norm() / cfg.limits.v_max;
        t += f64::from(st.dwell_ticks) * cfg.tick + FREEZE_SETTLE_US as f64 / 1e6;
        at = pose.position;
        pose.position += Vector3::new(
            rng.gen_range(-BEDSIDE_LATERAL_JITTER..=BEDSIDE_LATERAL_JITTER),
            0.0,
            rng.gen_range(-BEDSIDE_DEPTH_JITTER..=BEDSIDE_DEPTH_JITTER),
        );
        if let Ok(mut frame) = render_frame(&scenario.phantom, &pose, i as u32) {
            frame.frozen = true;
            frame.pose = st.pose();
            captures.push(Reading { station: i, frame });
        }
        if scenario.measurements.iter().any(|m| m.station == i) {
            last_measure = t;
        }
    }
    let values: Vec<(MeasurementSpec, Option<f64>)> = scenario
        .measurements
        .iter()
        .map(|m| {
            let v = captures.iter().find(|c| c.station == m.station).and_then(|c| measure_ap(&c.frame));
            (m.clone(), v)
        })
        .collect();
    build_record(patient_id, Arm::Bedside, scenario, &captures, &values, last_measure)
}

/// Runs both arms of one exam.
pub fn run_exam(
    patient_id: &str,
    scenario: &Scenario,
    params: ChannelParams,
    seed: u64,
    cfg: SessionConfig,
) -> Result<ExamOutcome, SessionError> {
    let trace = run_session_with(scenario, params, seed, cfg)?;
    Ok(ExamOutcome {
        bedside: bedside_record(patient_id, scenario, seed, &cfg),
        remote: remote_record(patient_id, scenario, &trace),
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelChoice {
    Preset(String),
    Params(ChannelParams),
}

impl ChannelChoice {
    pub fn resolve(&self) -> Result<ChannelParams, ChannelError> {
        match self {
            ChannelChoice::Preset(name) => ChannelParams::preset(name),
            ChannelChoice::Params(p) => p.validate().map(|_| *p),
        }
    }
}

/// Distributions a synthetic cohort is drawn from. Lengths in millimeters.
/// Generated seeds are kept below 2^63 so they survive the TOML file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_prevalence")]
    pub aaa_prevalence: f64,
    #[serde(default = "d_channel")]
    pub channel: ChannelChoice,
    /// Mean and standard deviation of the non-dilated aortic diameter.
    #[serde(default = "d_normal")]
    pub normal_diameter_mm: [f64; 2],
    /// Median and log-scale spread of the aneurysm peak diameter.
    #[serde(default = "d_aaa")]
    pub aaa_diameter_mm: [f64; 2],
    #[serde(default = "d_thrombus")]
    pub thrombus_probability: f64,
    /// None, segmentary, diffuse.
    #[serde(default = "d_grades")]
    pub grade_mix: [f64; 3],
    /// Share of remote exams that lose the link for good.
    #[serde(default)]
    pub failure_rate: f64,
    #[serde(default = "d_dwell")]
    pub dwell_ticks: u32,
}

fn d_n() -> usize {
    58
}
fn d_prevalence() -> f64 {
    0.15
}
fn d_channel() -> ChannelChoice {
    ChannelChoice::Preset("vthd".into())
}
fn d_normal() -> [f64; 2] {
    [20.0, 3.0]
}
fn d_aaa() -> [f64; 2] {
    [54.0, 0.3]
}
fn d_thrombus() -> f64 {
    0.75
}
fn d_grades() -> [f64; 3] {
    [14.0 / 53.0, 11.0 / 53.0, 28.0 / 53.0]
}
fn d_dwell() -> u32 {
    20
}

const NORMAL_CLAMP_MM: (f64, f64) = (14.0, 28.0);
const AAA_CLAMP_MM: (f64, f64) = (32.0, 80.0);
const SWEEP_TOP: f64 = 0.06;
const SWEEP_BOTTOM: f64 = -0.03;
const SWEEP_STEP: f64 = 0.01;
const SEGMENT_LENGTH: f64 = 0.03;

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            version: COHORT_VERSION,
            seed: 0,
            n: d_n(),
            aaa_prevalence: d_prevalence(),
            channel: d_channel(),
            normal_diameter_mm: d_normal(),
            aaa_diameter_mm: d_aaa(),
            thrombus_probability: d_thrombus(),
            grade_mix: d_grades(),
            failure_rate: 0.0,
            dwell_ticks: d_dwell(),
        }
    }
}

/// One synthetic patient.
#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub id: String,
    pub scenario: Scenario,
    pub seed: u64,
}

impl CohortSpec {
    pub fn from_toml_str(src: &str) -> Result<Self, CampaignError> {
        let spec: CohortSpec = toml::from_str(src).map_err(|e| {
            let line = e.span().map(|s| src[..s.start].bytes().filter(|b| *b == b'\n').count() + 1);
            CampaignError::InvalidCohort(match line {
                Some(l) => format!("line {l}: {}", e.message()),
                None => e.message().to_string(),
            })
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<Self, CampaignError> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| CampaignError::InvalidCohort(format!("cannot read {}: {e}", path.display())))?;
        CohortSpec::from_toml_str(&src)
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        let bad = |m: &str| Err(CampaignError::InvalidCohort(m.to_string()));
        if self.version != COHORT_VERSION {
            return bad("unsupported cohort version");
        }
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        for p in [self.aaa_prevalence, self.thrombus_probability, self.failure_rate] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must be within [0, 1]");
            }
        }
        if self.grade_mix.iter().any(|w| !(*w >= 0.0)) || !(self.grade_mix.iter().sum::<f64>() > 0.0) {
            return bad("grade_mix weights must be non-negative and not all zero");
        }
        if !(self.normal_diameter_mm[1] >= 0.0) || !(self.aaa_diameter_mm[0] > 0.0) || !(self.aaa_diameter_mm[1] >= 0.0)
        {
            return bad("diameter distributions need positive location and non-negative spread");
        }
        self.channel.resolve().map_err(|e| CampaignError::InvalidCohort(e.to_string()))?;
        Ok(())
    }

    /// Number of aneurysm patients: the prevalence share, rounded down.
    pub fn aaa_count(&self) -> usize {
        (self.n as f64 * self.aaa_prevalence).floor() as usize
    }

    /// Draws the cohort. Deterministic in `seed`.
    pub fn generate(&self) -> Vec<Patient> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let k = self.aaa_count().min(self.n);
        let mut is_aaa = vec![false; self.n];
        for i in sample(&mut rng, self.n, k).into_iter() {
            is_aaa[i] = true;
        }
        let fail = (0..self.n).map(|_| rng.gen::<f64>() < self.failure_rate).collect::<Vec<_>>();
        let normal = Normal::new(self.normal_diameter_mm[0], self.normal_diameter_mm[1]).expect("validated");
        let aaa = LogNormal::new(self.aaa_diameter_mm[0].ln(), self.aaa_diameter_mm[1]).expect("validated");
        let total: f64 = self.grade_mix.iter().sum();
        (0..self.n)
            .map(|i| {
                let base_d = normal.sample(&mut rng).clamp(NORMAL_CLAMP_MM.0, NORMAL_CLAMP_MM.1) / 1000.0;
                let base = PhantomConfig::default();
                let mut cfg = PhantomConfig {
                    aorta_base_radius: base_d / 2.0,
                    iliac_radius: [rng.gen_range(0.004..0.0055), rng.gen_range(0.004..0.0055)],
                    stiffness: rng.gen_range(600.0..1000.0),
                    rng_seed: rng.gen::<u64>() >> 1,
                    ..base
                };
                let mut seek = None;
                if is_aaa[i] {
                    let peak = aaa.sample(&mut rng).clamp(AAA_CLAMP_MM.0, AAA_CLAMP_MM.1) / 2000.0;
                    let center_y = (rng.gen_range(-0.02..0.03f64) * 1000.0).round() / 1000.0;
                    let sigma = rng.gen_range(0.010..0.020);
                    cfg.aneurysm = Some(Aneurysm { center_y, peak_radius: peak, sigma });
                    if rng.gen::<f64>() < self.thrombus_probability {
                        cfg.thrombus = Some(Thrombus {
                            fraction: rng.gen_range(0.2..0.4),
                            extent_y: [center_y - sigma, center_y + sigma],
                        });
                    }
                    seek = Some(center_y);
                }
                let u = rng.gen::<f64>() * total;
                cfg.atheromatosis_grade = if u < self.grade_mix[0] {
                    Grade::None
                } else if u < self.grade_mix[0] + self.grade_mix[1] {
                    Grade::Segmentary
                } else {
                    Grade::Diffuse
                };
                let start = rng.gen_range(SWEEP_BOTTOM..SWEEP_TOP - SEGMENT_LENGTH);
                cfg.segmentary_extent_y = if cfg.atheromatosis_grade == Grade::Segmentary {
                    [start, start + SEGMENT_LENGTH]
                } else {
                    [0.0, 0.0]
                };
                let r_max = cfg.aneurysm.map_or(cfg.aorta_base_radius, |a| a.peak_radius);
                cfg.aorta_depth = r_max + rng.gen_range(0.015..0.030);
                let id = format!("P{:03}", i + 1);
                let seed = rng.gen::<u64>() >> 1;
                let outage = fail[i].then_some(Outage { start_s: 2.0, duration_s: 30.0 });
                let scenario = sweep_scenario(&id, cfg, seed, seek, self.dwell_ticks, outage);
                Patient { id, scenario, seed }
            })
            .collect()
    }
}

/// The standard survey: a craniocaudal aortic sweep every centimeter (plus
/// the widest section when the operator has found one), then both iliacs at
/// the reference station.
pub fn sweep_scenario(
    name: &str,
    phantom: PhantomConfig,
    seed: u64,
    seek_y: Option<f64>,
    dwell_ticks: u32,
    outage: Option<Outage>,
) -> Scenario {
    let steps = ((SWEEP_TOP - SWEEP_BOTTOM) / SWEEP_STEP).round() as usize;
    let mut ys: Vec<f64> = (0..=steps).map(|k| ((SWEEP_TOP - k as f64 * SWEEP_STEP) * 1000.0).round() / 1000.0).collect();
    if let Some(y) = seek_y {
        if !ys.iter().any(|v| (v - y).abs() < 1e-9) {
            ys.push(y);
            ys.sort_by(|a, b| b.total_cmp(a));
        }
    }
    let station = |xy: [f64; 2], kind| Station { xy, tilt_deg: 0.0, dwell_ticks, kind, press_depth: DEFAULT_PRESS_DEPTH };
    let mut stations: Vec<Station> = ys.iter().map(|&y| station([0.0, y], StationKind::Aorta)).collect();
    let iliac_y = phantom.bifurcation_y - ILIAC_REFERENCE_OFFSET;
    let dx = ILIAC_REFERENCE_OFFSET * phantom.iliac_angle.tan();
    stations.push(station([dx, iliac_y], StationKind::IliacLeft));
    stations.push(station([-dx, iliac_y], StationKind::IliacRight));
    let n = stations.len();
    let mut measurements: Vec<MeasurementSpec> =
        (0..n - 2).map(|i| MeasurementSpec { station: i, measure: Measure::ApAorta }).collect();
    measurements.push(MeasurementSpec { station: n - 2, measure: Measure::ApIliacLeft });
    measurements.push(MeasurementSpec { station: n - 1, measure: Measure::ApIliacRight });
    Scenario {
        name: name.to_string(),
        seed,
        aorta_extent_y: phantom.aorta_extent(),
        phantom,
        channel: ChannelParams::preset("vthd").expect("built-in preset").with_seed(seed),
        stations,
        measurements,
        outage,
    }
}

#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub patients: Vec<Patient>,
    /// Bedside then remote for each patient, in patient order.
    pub records: Vec<ExamRecord>,
    pub report: StudyReport,
}

/// Runs every patient through both arms and aggregates. Patients run on
/// worker threads with their own seeds, so the result does not depend on
/// scheduling.
pub fn run_campaign(spec: &CohortSpec, cfg: SessionConfig) -> Result<CampaignResult, CampaignError> {
    spec.validate()?;
    let params = spec.channel.resolve().map_err(|e| CampaignError::InvalidCohort(e.to_string()))?;
    let patients = spec.generate();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(patients.len()).max(1);
    let mut slots: Vec<Option<Result<ExamOutcome, SessionError>>> = vec![None; patients.len()];
    std::thread::scope(|scope| {
        let chunk = patients.len().div_ceil(workers);
        for (ps, out) in patients.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            scope.spawn(move || {
                for (p, slot) in ps.iter().zip(out.iter_mut()) {
                    *slot = Some(run_exam(&p.id, &p.scenario, params, p.seed, cfg));
                }
            });
        }
    });
    let mut records = Vec::with_capacity(2 * patients.len());
    for (p, slot) in patients.iter().zip(slots) {
        let outcome = slot
            .expect("every patient ran")
            .map_err(|source| CampaignError::Session { patient: p.id.clone(), source })?;
        records.push(outcome.bedside);
        records.push(outcome.remote);
    }
    let report = campaign_report(&records)?;
    Ok(CampaignResult { patients, records, report })
}
