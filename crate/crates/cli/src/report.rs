//! Report rows and their JSON / CSV / markdown renderings. Output is a
//! pure function of the rows, so identical runs produce byte-identical
//! reports.

use crate::config::OutputFormat;
use qattn_core::Metrics;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub trials: usize,
    pub mean: Metrics,
    pub worst: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Json => {
                let mut s = serde_json::to_string_pretty(self).expect("report serializes");
                s.push('\n');
                s
            }
            OutputFormat::Csv => self.render_csv(),
            OutputFormat::Md => self.render_md(),
        }
    }

    fn render_csv(&self) -> String {
        let mut out = String::from(
            "variant,trials,cos_sim_mean,rel_l1_mean,rmse_mean,cos_sim_worst,rel_l1_worst,rmse_worst\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                row.variant,
                row.trials,
                row.mean.cos_sim,
                row.mean.rel_l1,
                row.mean.rmse,
                row.worst.cos_sim,
                row.worst.rel_l1,
                row.worst.rmse,
            ));
        }
        out
    }

    // Column order mirrors the comparison tables: CosSim up, Relative L1
    // down, RMSE down.
    fn render_md(&self) -> String {
        let mut out = String::from(
            "| Variant | CosSim ↑ | Relative L1 ↓ | RMSE ↓ | Worst CosSim ↑ | Worst Relative L1 ↓ | Worst RMSE ↓ |\n\
             |---|---|---|---|---|---|---|\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "| {} | {:.6} | {:.6} | {:.6} | {:.6} | {:.6} | {:.6} |\n",
                row.variant,
                row.mean.cos_sim,
                row.mean.rel_l1,
                row.mean.rmse,
                row.worst.cos_sim,
                row.worst.rel_l1,
                row.worst.rmse,
            ));
        }
        out
    }
}
