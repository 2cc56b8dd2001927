//! Study-level aggregation of paired exam records.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::records::{Arm, ExamRecord};
use super::{
    abs_diff_buckets, grade_table, icc_2_1, paired_t_test, pearson_r, relative_errors, weighted_kappa, Buckets,
    Correlation, GradePair, Kappa, KappaWeights, MeasurementPair, StatsError, TTest, DEFAULT_CUTS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub n: usize,
    pub bedside_positive: usize,
    pub remote_positive: usize,
    pub both_positive: usize,
    pub concordant: usize,
}

impl Detection {
    fn from_flags(flags: impl Iterator<Item = (bool, bool)>) -> Self {
        let mut d = Detection { n: 0, bedside_positive: 0, remote_positive: 0, both_positive: 0, concordant: 0 };
        for (b, r) in flags {
            d.n += 1;
            d.bedside_positive += usize::from(b);
            d.remote_positive += usize::from(r);
            d.both_positive += usize::from(b && r);
            d.concordant += usize::from(b == r);
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeErrorSummary {
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub frac_below_5pct: f64,
    pub frac_below_15pct: f64,
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiameterSummary {
    pub n: usize,
    pub pearson: Option<Correlation>,
    pub icc_2_1: Option<f64>,
    pub relative_errors: Option<RelativeErrorSummary>,
    pub abs_diff_buckets: Buckets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeSummary {
    /// Rows bedside, columns remote, in order none/segmentary/diffuse.
    pub table: Vec<Vec<f64>>,
    pub kappa: Option<Kappa>,
    pub kappa_linear: Option<Kappa>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

fn mean_sd(xs: &[f64]) -> Option<MeanSd> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanSd { mean, sd })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationSummary {
    pub bedside_s: Option<MeanSd>,
    pub remote_s: Option<MeanSd>,
    pub paired_t: Option<TTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub quality_bedside: Option<MeanSd>,
    pub quality_remote: Option<MeanSd>,
    pub acceptance_remote: Option<MeanSd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub n_patients: usize,
    pub n_completed: usize,
    pub failed_patients: Vec<String>,
    pub aaa: Detection,
    pub thrombus: Detection,
    pub aorta: DiameterSummary,
    pub iliac: DiameterSummary,
    pub grade: GradeSummary,
    pub duration: DurationSummary,
    pub scores: ScoreSummary,
    /// Statistics that could not be computed, and why.
    pub notes: Vec<String>,
}

fn keep<T>(notes: &mut Vec<String>, name: &str, what: &str, r: Result<T, StatsError>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(format!("{name} {what}: {e}"));
            None
        }
    }
}

fn summarize_diameters(name: &str, pairs: &[MeasurementPair], notes: &mut Vec<String>) -> DiameterSummary {
    let pearson = keep(notes, name, "pearson", pearson_r(pairs));
    let icc = keep(notes, name, "icc", icc_2_1(pairs));
    let relative = keep(notes, name, "relative errors", relative_errors(pairs)).map(|e| RelativeErrorSummary {
        median: e.median,
        min: e.min,
        max: e.max,
        frac_below_5pct: e.frac_below(0.05),
        frac_below_15pct: e.frac_below(0.15),
        errors: e.errors,
    });
    DiameterSummary {
        n: pairs.len(),
        pearson,
        icc_2_1: icc,
        relative_errors: relative,
        abs_diff_buckets: abs_diff_buckets(pairs, DEFAULT_CUTS),
    }
}

/// Aggregates paired bedside/remote records into the study report. Every
/// patient must have exactly one record per arm; patients with a failed
/// arm are listed and excluded from the statistics.
pub fn campaign_report(records: &[ExamRecord]) -> Result<StudyReport, StatsError> {
    if records.is_empty() {
        return Err(StatsError::UnpairedRecords(Vec::new()));
    }
    let mut by_patient: BTreeMap<&str, (Vec<&ExamRecord>, Vec<&ExamRecord>)> = BTreeMap::new();
    for r in records {
        let entry = by_patient.entry(r.patient_id.as_str()).or_default();
        match r.arm {
            Arm::Bedside => entry.0.push(r),
            Arm::Remote => entry.1.push(r),
        }
    }
    let unpaired: Vec<String> = by_patient
        .iter()
        .filter(|(_, (b, r))| b.len() != 1 || r.len() != 1)
        .map(|(id, _)| id.to_string())
        .collect();
    if !unpaired.is_empty() {
        return Err(StatsError::UnpairedRecords(unpaired));
    }

    let mut failed = Vec::new();
    let mut done: Vec<(&ExamRecord, &ExamRecord)> = Vec::new();
    for (id, (b, r)) in &by_patient {
        if b[0].completed && r[0].completed {
            done.push((b[0], r[0]));
        } else {
            failed.push(id.to_string());
        }
    }

    let mut notes = Vec::new();
    let aaa = Detection::from_flags(done.iter().map(|(b, r)| (b.aaa_detected, r.aaa_detected)));
    let thrombus =
        Detection::from_flags(done.iter().filter_map(|(b, r)| Some((b.thrombus?, r.thrombus?))));

    let pair = |b: &ExamRecord, bv: Option<f64>, rv: Option<f64>| {
        Some(MeasurementPair {
            bedside: bv?,
            remote: rv?,
            site_id: String::new(),
            patient_id: b.patient_id.clone(),
        })
    };
    let aorta_pairs: Vec<MeasurementPair> =
        done.iter().filter_map(|(b, r)| pair(b, b.ap_diameter, r.ap_diameter)).collect();
    let iliac_pairs: Vec<MeasurementPair> = done
        .iter()
        .flat_map(|(b, r)| [pair(b, b.iliac_left, r.iliac_left), pair(b, b.iliac_right, r.iliac_right)])
        .flatten()
        .collect();
    let aorta = summarize_diameters("aorta", &aorta_pairs, &mut notes);
    let iliac = summarize_diameters("iliac", &iliac_pairs, &mut notes);

    let grade_pairs: Vec<GradePair> = done
        .iter()
        .filter_map(|(b, r)| Some(GradePair { bedside: b.grade?, remote: r.grade? }))
        .collect();
    let table = grade_table(&grade_pairs);
    let mut kappa_of = |w: KappaWeights| match weighted_kappa(&table, w) {
        Ok(k) => Some(k),
        Err(e) => {
            notes.push(format!("grade kappa ({w:?}): {e}"));
            None
        }
    };
    let grade = GradeSummary {
        kappa: kappa_of(KappaWeights::Unweighted),
        kappa_linear: kappa_of(KappaWeights::Linear),
        table,
    };

    let durations: Vec<MeasurementPair> =
        done.iter().map(|(b, r)| MeasurementPair::new(b.duration, r.duration)).collect();
    let paired_t = match paired_t_test(&durations) {
        Ok(t) => Some(t),
        Err(e) => {
            notes.push(format!("duration t-test: {e}"));
            None
        }
    };
    let collect = |f: &dyn Fn(&(&ExamRecord, &ExamRecord)) -> f64| done.iter().map(f).collect::<Vec<f64>>();
    let duration = DurationSummary {
        bedside_s: mean_sd(&collect(&|(b, _)| b.duration)),
        remote_s: mean_sd(&collect(&|(_, r)| r.duration)),
        paired_t,
    };
    let scores = ScoreSummary {
        quality_bedside: mean_sd(&collect(&|(b, _)| b.quality_score)),
        quality_remote: mean_sd(&collect(&|(_, r)| r.quality_score)),
        acceptance_remote: mean_sd(&collect(&|(_, r)| r.acceptance_score)),
    };

    Ok(StudyReport {
        n_patients: by_patient.len(),
        n_completed: done.len(),
        failed_patients: failed,
        aaa,
        thrombus,
        aorta,
        iliac,
        grade,
        duration,
        scores,
        notes,
    })
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.digits$}"))
}

impl StudyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text summary for terminals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "patients            {} ({} completed, {} failed)",
            self.n_patients,
            self.n_completed,
            self.failed_patients.len()
        );
        for (name, d) in [("AAA", &self.aaa), ("thrombus", &self.thrombus)] {
            let _ = writeln!(
                s,
                "{name:<19} bedside {} / remote {} / both {} of {} (concordant {})",
                d.bedside_positive, d.remote_positive, d.both_positive, d.n, d.concordant
            );
        }
        for (name, d) in [("aorta", &self.aorta), ("iliac", &self.iliac)] {
            let _ = writeln!(
                s,
                "{name:<19} n {}  r {}  p {}  ICC {}",
                d.n,
                opt(d.pearson.map(|c| c.r), 4),
                opt(d.pearson.map(|c| c.p_value), 6),
                opt(d.icc_2_1, 4)
            );
            if let Some(e) = &d.relative_errors {
                let _ = writeln!(
                    s,
                    "  relative error    median {:.4}  min {:.4}  max {:.4}  <5% {:.1}%  <15% {:.1}%",
                    e.median,
                    e.min,
                    e.max,
                    100.0 * e.frac_below_5pct,
                    100.0 * e.frac_below_15pct
                );
            }
            let b = &d.abs_diff_buckets;
            let _ = writeln!(
                s,
                "  |diff| <4 mm {} ({:.1}%)  4-10 mm {} ({:.1}%)  >10 mm {} ({:.1}%)",
                b.counts[0], b.percent[0], b.counts[1], b.percent[1], b.counts[2], b.percent[2]
            );
        }
        let _ = writeln!(s, "grade table (rows bedside, cols remote; none/segmentary/diffuse)");
        for row in &self.grade.table {
            let _ = writeln!(s, "  {:>4} {:>4} {:>4}", row[0], row[1], row[2]);
        }
        for (name, k) in [("kappa", &self.grade.kappa), ("kappa (linear)", &self.grade.kappa_linear)] {
            match k {
                Some(k) => {
                    let _ = writeln!(
                        s,
                        "{name:<19} {:.4}  95% CI [{:.4}, {:.4}]",
                        k.kappa, k.ci95.0, k.ci95.1
                    );
                }
                None => {
                    let _ = writeln!(s, "{name:<19} n/a");
                }
            }
        }
        let _ = writeln!(
            s,
            "duration (s)        bedside {} ± {}  remote {} ± {}  t {}  p {}",
            opt(self.duration.bedside_s.as_ref().map(|m| m.mean), 1),
            opt(self.duration.bedside_s.as_ref().map(|m| m.sd), 1),
            opt(self.duration.remote_s.as_ref().map(|m| m.mean), 1),
            opt(self.duration.remote_s.as_ref().map(|m| m.sd), 1),
            opt(self.duration.paired_t.map(|t| t.t), 3),
            opt(self.duration.paired_t.map(|t| t.p_value), 6)
        );
        let _ = writeln!(
            s,
            "scores              quality bedside {}  remote {}  acceptance {}",
            opt(self.scores.quality_bedside.as_ref().map(|m| m.mean), 1),
            opt(self.scores.quality_remote.as_ref().map(|m| m.mean), 1),
            opt(self.scores.acceptance_remote.as_ref().map(|m| m.mean), 1)
        );
        if !self.failed_patients.is_empty() {
            let _ = writeln!(s, "failed exams        {}", self.failed_patients.join(", "));
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}
