use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::training::{TrainConfig, Trainer};

use super::report::{evaluate, EvalReport};

pub const ABLATION_TABLE: &str = "ablation.tsv";

/// One row of the loss ablation: which of the correspondence and depth
/// terms stay on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub tag: &'static str,
    pub label: &'static str,
    pub correspondence: bool,
    pub depth: bool,
}

pub const VARIANTS: [Variant; 4] = [
    Variant { tag: "wo_ld_lcorr", label: "w/o L_d L_corr", correspondence: false, depth: false },
    Variant { tag: "wo_ld", label: "w/o L_d", correspondence: true, depth: false },
    Variant { tag: "wo_lcorr", label: "w/o L_corr", correspondence: false, depth: true },
    Variant { tag: "final", label: "final", correspondence: true, depth: true },
];

impl Variant {
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        if !self.correspondence {
            cfg.loss.w_corr = 0.0;
        }
        if !self.depth {
            cfg.loss.w_depth = 0.0;
        }
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub w_corr: f64,
    pub w_depth: f64,
    pub report: EvalReport,
    /// Training plus evaluation time.
    pub seconds: f64,
}

/// Trains and evaluates each variant with the same seed. With `out`, each
/// run lands in `out/<tag>/` and the table in `out/ablation.tsv`.
pub fn run_ablation(ds: &Dataset, base: &TrainConfig, seed: u64, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(VARIANTS.len());
    for v in VARIANTS {
        let start = Instant::now();
        let cfg = v.config(base);
        let dir = out.map(|o| o.join(v.tag));
        let mut trainer = Trainer::new(ds, cfg.clone(), seed)?;
        trainer.run(dir.as_deref())?;
        let eval = evaluate(ds, &trainer.state, &cfg, seed, &ds.split.test)?;
        if let Some(d) = &dir {
            eval.write(d)?;
        }
        rows.push(AblationRow {
            variant: v,
            w_corr: cfg.loss.w_corr,
            w_depth: cfg.loss.w_depth,
            report: eval.report,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    if let Some(o) = out {
        let path = o.join(ABLATION_TABLE);
        fs::write(&path, ablation_table(&rows)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}

/// Tab-separated comparison: one row per variant with mean test metrics.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("method\tw_corr\tw_depth\tpsnr\tssim\tlpips\tabs_rel\n");
    for r in rows {
        let img = r.report.mean_image;
        let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\tn/a\t{}",
            r.variant.label,
            r.w_corr,
            r.w_depth,
            cell(img.map(|m| m.psnr)),
            cell(img.map(|m| m.ssim)),
            cell(r.report.mean_depth.map(|d| d.abs_rel)),
        )
        .expect("writing to a String");
    }
    out
}
