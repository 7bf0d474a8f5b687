//! Artifact emission: CSVs with the config echo as leading `#` comment
//! lines, the JSON eval report, and PGM rasters for attention and
//! uncertainty maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use evsev_core::metrics::{EvalRecord, EvalReport, UncertaintyMap};
use evsev_core::model::EpochStats;

use crate::error::AppError;
use crate::ppm::{write_pgm, GrayImage};

pub fn echo_comment_lines(echo: &BTreeMap<String, String>) -> Vec<String> {
    echo.iter().map(|(k, v)| format!("{k}={v}")).collect()
}

/// CSV with `# key=value` echo lines, then a header row, then data rows.
pub fn write_csv(
    path: &Path,
    echo: &BTreeMap<String, String>,
    header: &str,
    rows: impl IntoIterator<Item = String>,
) -> Result<(), AppError> {
    let mut out = String::new();
    for line in echo_comment_lines(echo) {
        writeln!(out, "# {line}").unwrap();
    }
    writeln!(out, "{header}").unwrap();
    for row in rows {
        writeln!(out, "{row}").unwrap();
    }
    std::fs::write(path, out).map_err(|e| AppError::usage(format!("{}: {e}", path.display())))
}

pub fn write_manifest(
    path: &Path,
    echo: &BTreeMap<String, String>,
    rows: &[(String, String, String, usize, f64)], // path, scene, split, class, pseudo_aod
) -> Result<(), AppError> {
    write_csv(
        path,
        echo,
        "path,scene_id,split,class,pseudo_aod",
        rows.iter().map(|(p, s, sp, c, a)| format!("{p},{s},{sp},{c},{a}")),
    )
}

pub fn write_history(
    path: &Path,
    echo: &BTreeMap<String, String>,
    history: &[EpochStats],
) -> Result<(), AppError> {
    write_csv(
        path,
        echo,
        "epoch,edl,kl,aod,total,lr",
        history.iter().map(|h| {
            format!("{},{},{},{},{},{}", h.epoch, h.edl, h.kl, h.aod, h.total, h.learning_rate)
        }),
    )
}

pub fn write_records(
    path: &Path,
    echo: &BTreeMap<String, String>,
    records: &[EvalRecord],
) -> Result<(), AppError> {
    write_csv(
        path,
        echo,
        "index,true_class,predicted_class,confidence,vacuity,dissonance,aod_pred,correct,tier",
        records.iter().enumerate().map(|(i, r)| {
            format!(
                "{i},{},{},{},{},{},{},{},{}",
                r.true_class,
                r.predicted_class,
                r.confidence,
                r.vacuity,
                r.dissonance,
                r.aod_pred,
                r.correct,
                r.tier()
            )
        }),
    )
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<(), AppError> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| AppError::usage(format!("report serialization: {e}")))?;
    std::fs::write(path, json + "\n")
        .map_err(|e| AppError::usage(format!("{}: {e}", path.display())))
}

/// The grid as CSV plus two PGM rasters (vacuity, dissonance), values
/// clamped to [0, 1].
pub fn write_uncertainty_map(
    dir: &Path,
    echo: &BTreeMap<String, String>,
    map: &UncertaintyMap,
) -> Result<(), AppError> {
    write_csv(
        &dir.join("map.csv"),
        echo,
        "row,col,offset_y,offset_x,vacuity,dissonance",
        map.cells.iter().map(|c| {
            format!("{},{},{},{},{},{}", c.row, c.col, c.offset_y, c.offset_x, c.vacuity, c.dissonance)
        }),
    )?;
    let side = map.offsets.len();
    let comments = echo_comment_lines(echo);
    for (name, pick) in [
        ("map_vacuity.pgm", &(|c: &evsev_core::metrics::UncertaintyCell| c.vacuity) as &dyn Fn(_) -> f64),
        ("map_dissonance.pgm", &|c: &evsev_core::metrics::UncertaintyCell| c.dissonance),
    ] {
        let img = GrayImage {
            width: side,
            height: side,
            data: map.cells.iter().map(|c| pick(c)).collect(),
        };
        write_pgm(&dir.join(name), &img, &comments)?;
    }
    Ok(())
}

/// Spatial attention map (1 x H x W tensor data) as a PGM raster.
pub fn write_attention_map(
    path: &Path,
    echo: &BTreeMap<String, String>,
    side: usize,
    data: &[f64],
) -> Result<(), AppError> {
    let img = GrayImage { width: side, height: side, data: data.to_vec() };
    write_pgm(path, &img, &echo_comment_lines(echo))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_embeds_echo_and_rows() {
        let dir = std::env::temp_dir().join("evsev-artifact-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        let mut echo = BTreeMap::new();
        echo.insert("seed".to_string(), "7".to_string());
        write_csv(&path, &echo, "a,b", vec!["1,2".to_string(), "3,4".to_string()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "# seed=7\na,b\n1,2\n3,4\n");
    }
}
