//! CSV and JSON artifacts.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use retc_core::TerminalIngredients;

use crate::config::variant_name;
use crate::error::CliError;

/// Formats a float with 12 significant digits, trailing zeros removed.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// Header plus rows, written in one go.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let io = |e: &dyn std::fmt::Display| CliError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| io(&e))?;
        w.write_record(&self.header).map_err(|e| io(&e))?;
        for row in &self.rows {
            w.write_record(row).map_err(|e| io(&e))?;
        }
        w.flush().map_err(|e| io(&e))
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Serialize)]
pub struct IngredientsDump {
    pub variant: &'static str,
    pub period: usize,
    pub bucket_floor: Vec<i64>,
    pub alpha: Option<Vec<f64>>,
    pub p_x: Vec<Vec<f64>>,
    pub k_x: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub p: Vec<Vec<Vec<f64>>>,
}

impl From<&TerminalIngredients> for IngredientsDump {
    fn from(ing: &TerminalIngredients) -> Self {
        IngredientsDump {
            variant: variant_name(ing.variant),
            period: ing.period,
            bucket_floor: ing.bucket_floor.clone(),
            alpha: ing.alpha.clone(),
            p_x: rows(&ing.p_x),
            k_x: rows(&ing.k_x),
            k: rows(&ing.k),
            p: ing.p.iter().map(rows).collect(),
        }
    }
}

pub fn write_ingredients(path: &Path, ing: &TerminalIngredients) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(&IngredientsDump::from(ing)).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
