//! Test-time attack (single rendering pass, no capture simulation), attack
//! success rates, transfer matrices and CSV reports.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::capture::{apply_capture, sample_capture, CaptureDistribution};
use crate::crafting::PatchBundle;
use crate::data::RoiImage;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Grid};
use crate::recognizers::VictimModel;
use crate::renderer::composite;

/// Renders the bundle's patch onto `x` with frozen renderer weights.
pub fn attack_sample(x: &Grid, bundle: &PatchBundle) -> Result<Grid> {
    if x.shape() != bundle.roi {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} ROI", bundle.roi.0, bundle.roi.1),
            got: format!("{}x{}", x.height(), x.width()),
        });
    }
    let params = bundle.render_params(x)?;
    composite(x, &bundle.texture, &bundle.mask.mask, &params, bundle.bounds.placement)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Untargeted,
    Targeted(usize),
}

impl EvalMode {
    pub fn name(&self) -> String {
        match self {
            EvalMode::Untargeted => "untargeted".into(),
            EvalMode::Targeted(t) => format!("targeted@{t}"),
        }
    }

    pub fn eligible(&self, label: usize, clean_pred: usize) -> bool {
        match *self {
            EvalMode::Untargeted => clean_pred == label,
            EvalMode::Targeted(t) => clean_pred == label && label != t,
        }
    }

    pub fn success(&self, label: usize, adv_pred: usize) -> bool {
        match *self {
            EvalMode::Untargeted => adv_pred != label,
            EvalMode::Targeted(t) => adv_pred == t,
        }
    }
}

/// Raw per-sample prediction log entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackResult {
    pub index: usize,
    pub label: usize,
    pub clean_pred: usize,
    pub adv_pred: usize,
    pub eligible: bool,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsrReport {
    pub mode: String,
    pub source: String,
    pub target: String,
    pub dataset_seed: u64,
    pub eligible: usize,
    pub success: usize,
    pub asr_percent: f64,
    pub bundle_hash: String,
    pub results: Vec<AttackResult>,
}

/// Optional test-time capture simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestCapture {
    pub distribution: CaptureDistribution,
    pub seed: u64,
}

pub fn compute_asr(
    victim: &VictimModel,
    bundle: &PatchBundle,
    testset: &[RoiImage],
    dataset_seed: u64,
    mode: EvalMode,
    capture: Option<&TestCapture>,
) -> Result<AsrReport> {
    if let EvalMode::Targeted(t) = mode {
        if t >= victim.n_identities {
            return Err(Error::invalid(format!("target {t} outside the victim's {} classes", victim.n_identities)));
        }
    }
    let results: Vec<AttackResult> = testset
        .par_iter()
        .enumerate()
        .map(|(index, r)| -> Result<AttackResult> {
            if r.identity >= victim.n_identities {
                return Err(Error::invalid(format!("label {} outside the victim's label space", r.identity)));
            }
            let clean_pred = victim.predict(&r.pixels)?;
            let mut adv = attack_sample(&r.pixels, bundle)?;
            if let Some(c) = capture {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, &[index as u64]));
                adv = apply_capture(&adv, &sample_capture(&c.distribution, &mut rng));
            }
            let adv_pred = victim.predict(&adv)?;
            let eligible = mode.eligible(r.identity, clean_pred);
            Ok(AttackResult {
                index,
                label: r.identity,
                clean_pred,
                adv_pred,
                eligible,
                success: eligible && mode.success(r.identity, adv_pred),
            })
        })
        .collect::<Result<_>>()?;
    let eligible = results.iter().filter(|r| r.eligible).count();
    if eligible == 0 {
        return Err(Error::NoEligibleSamples(format!(
            "victim {} classifies none of the {} test samples correctly{}",
            victim.label,
            testset.len(),
            match mode {
                EvalMode::Targeted(t) => format!(" outside target identity {t}"),
                EvalMode::Untargeted => String::new(),
            }
        )));
    }
    let success = results.iter().filter(|r| r.success).count();
    Ok(AsrReport {
        mode: mode.name(),
        source: bundle.source_label(),
        target: victim.label.clone(),
        dataset_seed,
        eligible,
        success,
        asr_percent: 100.0 * success as f64 / eligible as f64,
        bundle_hash: bundle.hash(),
        results,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// Row per source, column per target victim.
    pub reports: Vec<Vec<AsrReport>>,
}

impl TransferMatrix {
    pub fn asr(&self, i: usize, j: usize) -> f64 {
        self.reports[i][j].asr_percent
    }

    /// Mean ASR over entries where the source label differs from the target.
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .reports
            .iter()
            .flatten()
            .filter(|r| !r.source.split('+').any(|s| s == r.target))
            .map(|r| r.asr_percent)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

pub fn transfer_matrix(
    bundles: &[PatchBundle],
    victims: &[VictimModel],
    testset: &[RoiImage],
    dataset_seed: u64,
    mode: EvalMode,
) -> Result<TransferMatrix> {
    let mut reports = Vec::with_capacity(bundles.len());
    for b in bundles {
        let row = victims
            .iter()
            .map(|v| compute_asr(v, b, testset, dataset_seed, mode, None))
            .collect::<Result<Vec<_>>>()?;
        reports.push(row);
    }
    Ok(TransferMatrix {
        sources: bundles.iter().map(PatchBundle::source_label).collect(),
        targets: victims.iter().map(|v| v.label.clone()).collect(),
        reports,
    })
}

pub const REPORT_HEADER: [&str; 8] = [
    "mode",
    "source",
    "target",
    "dataset_seed",
    "eligible",
    "success",
    "asr_percent",
    "bundle_hash",
];

/// One parsed CSV row (per-sample logs are not part of the CSV).
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub mode: String,
    pub source: String,
    pub target: String,
    pub dataset_seed: u64,
    pub eligible: usize,
    pub success: usize,
    pub asr_percent: f64,
    pub bundle_hash: String,
}

impl From<&AsrReport> for ReportRow {
    fn from(r: &AsrReport) -> Self {
        Self {
            mode: r.mode.clone(),
            source: r.source.clone(),
            target: r.target.clone(),
            dataset_seed: r.dataset_seed,
            eligible: r.eligible,
            success: r.success,
            asr_percent: r.asr_percent,
            bundle_hash: r.bundle_hash.clone(),
        }
    }
}

/// Writes reports sorted by (source, target); ties keep their input order.
pub fn write_report(reports: &[AsrReport], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut rows: Vec<&AsrReport> = reports.iter().collect();
    rows.sort_by(|a, b| (&a.source, &a.target).cmp(&(&b.source, &b.target)));
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(REPORT_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.mode.clone(),
            r.source.clone(),
            r.target.clone(),
            r.dataset_seed.to_string(),
            r.eligible.to_string(),
            r.success.to_string(),
            format!("{:.2}", r.asr_percent),
            r.bundle_hash.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?;
    if header.iter().ne(REPORT_HEADER) {
        return Err(Error::format(path, "unexpected report header"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let bad = |f: &str| Error::format(path, format!("bad {f} field"));
        rows.push(ReportRow {
            mode: rec[0].to_string(),
            source: rec[1].to_string(),
            target: rec[2].to_string(),
            dataset_seed: rec[3].parse().map_err(|_| bad("dataset_seed"))?,
            eligible: rec[4].parse().map_err(|_| bad("eligible"))?,
            success: rec[5].parse().map_err(|_| bad("success"))?,
            asr_percent: rec[6].parse().map_err(|_| bad("asr_percent"))?,
            bundle_hash: rec[7].to_string(),
        });
    }
    Ok(rows)
}
