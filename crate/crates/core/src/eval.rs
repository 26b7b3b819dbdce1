//! Masked PSNR/SSIM evaluation per pair, bucketed by difficulty.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::Result;
use crate::imaging::{average_fusion, psnr_masked, save_image, ssim_masked, Image, Mask};
use crate::model::AlignModel;
use crate::synth::{Difficulty, SynthPair};

pub const REPORT_HEADER: &str = "id,difficulty,psnr,ssim";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub id: usize,
    pub difficulty: Difficulty,
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean metrics over a set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Bucket {
    pub name: String,
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<EvalRow>,
}

impl Report {
    /// Easy, Moderate and Hard buckets (empty ones omitted), then Average
    /// over every row.
    pub fn buckets(&self) -> Vec<Bucket> {
        let mean = |name: &str, rows: Vec<&EvalRow>| {
            let n = rows.len();
            Bucket {
                name: name.to_string(),
                count: n,
                psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n as f64,
                ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n as f64,
            }
        };
        let mut out = Vec::new();
        for (d, name) in Difficulty::ALL.iter().zip(["Easy", "Moderate", "Hard"]) {
            let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.difficulty == *d).collect();
            if !rows.is_empty() {
                out.push(mean(name, rows));
            }
        }
        if !self.rows.is_empty() {
            out.push(mean("Average", self.rows.iter().collect()));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.id, r.difficulty, r.psnr, r.ssim);
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("bucket,count,psnr,ssim\n");
        for b in self.buckets() {
            let _ = writeln!(s, "{},{},{},{}", b.name, b.count, b.psnr, b.ssim);
        }
        s
    }

    pub fn median_psnr(&self) -> f64 {
        median(self.rows.iter().map(|r| r.psnr).collect())
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Metrics of `warped` against `reference` over `mask`. An empty overlap
/// scores zero on both metrics.
pub fn score(reference: &Image, warped: &Image, mask: &Mask) -> Result<(f64, f64)> {
    if mask.count() == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((psnr_masked(warped, reference, mask)?, ssim_masked(warped, reference, mask)?))
}

/// Aligns every pair with `model`. Pairs are processed in parallel and
/// reported in input order. With `fusion_dir`, writes the average fusion of
/// each reference and warped target as `fused_{id}.png`.
pub fn evaluate(model: &AlignModel, pairs: &[SynthPair], fusion_dir: Option<&Path>) -> Result<Report> {
    if let Some(d) = fusion_dir {
        std::fs::create_dir_all(d)?;
    }
    let rows = pairs
        .par_iter()
        .enumerate()
        .map(|(id, p)| {
            let a = model.align(&p.reference, &p.target)?;
            let (psnr, ssim) = score(&p.reference, &a.warped, &a.mask)?;
            if let Some(d) = fusion_dir {
                save_image(&average_fusion(&p.reference, &a.warped)?, d.join(format!("fused_{id:05}.png")))?;
            }
            Ok(EvalRow {
                id,
                difficulty: p.difficulty,
                psnr,
                ssim,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Report { rows })
}

/// Scores the unaligned target against the reference over the full frame.
pub fn evaluate_identity(pairs: &[SynthPair]) -> Result<Report> {
    let rows = pairs
        .par_iter()
        .enumerate()
        .map(|(id, p)| {
            let full = Mask::full(p.reference.height(), p.reference.width());
            let (psnr, ssim) = score(&p.reference, &p.target, &full)?;
            Ok(EvalRow {
                id,
                difficulty: p.difficulty,
                psnr,
                ssim,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Report { rows })
}
