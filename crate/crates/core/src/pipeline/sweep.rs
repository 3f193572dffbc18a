//! Rate-distortion summaries and their CSV exchange format.

use crate::error::{PipelineError, PipelineResult};

pub const CSV_HEADER: &str = "lambda,bpp_actual,bpp_est,psnr,msssim";

/// One operating point, averaged over a held-out set.
#[derive(Debug, Clone, PartialEq)]
pub struct RDPoint {
    pub lambda: f64,
    pub bpp_actual: f64,
    pub bpp_est: f64,
    pub psnr: f64,
    pub msssim: f64,
}

pub fn to_csv(points: &[RDPoint]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.lambda, p.bpp_actual, p.bpp_est, p.psnr, p.msssim
        ));
    }
    out
}

pub fn parse_csv(text: &str) -> PipelineResult<Vec<RDPoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == CSV_HEADER => {}
        other => {
            return Err(PipelineError::Data(format!(
                "expected csv header {CSV_HEADER:?}, got {other:?}"
            )))
        }
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(PipelineError::Data(format!(
                "csv row {} has {} fields, expected 5",
                i + 2,
                fields.len()
            )));
        }
        let mut vals = [0.0f64; 5];
        for (slot, field) in vals.iter_mut().zip(&fields) {
            *slot = field.trim().parse().map_err(|_| {
                PipelineError::Data(format!("csv row {} has a non-numeric field {field:?}", i + 2))
            })?;
        }
        points.push(RDPoint {
            lambda: vals[0],
            bpp_actual: vals[1],
            bpp_est: vals[2],
            psnr: vals[3],
            msssim: vals[4],
        });
    }
    Ok(points)
}
