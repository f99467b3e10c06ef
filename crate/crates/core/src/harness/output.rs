//! CSV tables (header row, `.` decimal point, 6 significant digits) and
//! model checkpoints.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Urmf;
use crate::objectives::LossBreakdown;

use super::experiments::{AblationRow, RobustnessRow, RobustnessSummary};
use super::metrics::MetricsReport;
use super::TrainConfig;

/// Formats `v` with 6 significant digits, `%g` style: fixed notation for
/// exponents in `[-4, 6)`, scientific otherwise, trailing zeros removed.
pub fn sig6(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci
        .split_once('e')
        .expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        return format!("{}e{exp}", trim_zeros(mantissa));
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(sig6).unwrap_or_default()
}

fn table<W: Write>(
    out: W,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))
}

fn to_file(path: &Path, f: impl FnOnce(&mut std::fs::File) -> Result<()>) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f(&mut file)
}

pub fn write_loss_curve<W: Write>(out: W, curve: &[LossBreakdown]) -> Result<()> {
    table(
        out,
        &["epoch", "total", "task", "kl_ib", "reg", "align", "ucl"],
        curve.iter().enumerate().map(|(e, b)| {
            vec![
                e.to_string(),
                sig6(b.total),
                sig6(b.task),
                sig6(b.kl_ib),
                sig6(b.reg),
                sig6(b.align),
                sig6(b.ucl),
            ]
        }),
    )
}

const METRIC_HEADER: [&str; 11] = [
    "samples",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "alpha_f",
    "alpha_i",
    "alpha_f_corrupted",
    "alpha_f_clean",
    "alpha_i_corrupted",
    "alpha_i_clean",
];

fn metric_fields(m: &MetricsReport) -> Vec<String> {
    vec![
        m.samples.to_string(),
        sig6(m.accuracy),
        sig6(m.precision),
        sig6(m.recall),
        sig6(m.f1),
        sig6(m.alpha.alpha_f),
        sig6(m.alpha.alpha_i),
        opt(m.alpha.alpha_f_corrupted),
        opt(m.alpha.alpha_f_clean),
        opt(m.alpha.alpha_i_corrupted),
        opt(m.alpha.alpha_i_clean),
    ]
}

pub fn write_metrics<W: Write>(out: W, m: &MetricsReport) -> Result<()> {
    table(out, &METRIC_HEADER, [metric_fields(m)])
}

/// One row per variant with seed means and standard deviations.
pub fn write_ablation<W: Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    table(
        out,
        &[
            "variant", "label", "seeds", "acc_mean", "acc_std", "f1_mean", "f1_std",
        ],
        rows.iter().map(|r| {
            vec![
                r.variant.key().to_string(),
                r.variant.label().to_string(),
                r.runs.len().to_string(),
                sig6(r.acc_mean),
                sig6(r.acc_std),
                sig6(r.f1_mean),
                sig6(r.f1_std),
            ]
        }),
    )
}

/// One row per `(seed, level, variant)`.
pub fn write_robustness<W: Write>(out: W, rows: &[RobustnessRow]) -> Result<()> {
    let mut header = vec!["seed", "level", "variant"];
    header.extend(METRIC_HEADER);
    table(
        out,
        &header,
        rows.iter().map(|r| {
            let mut f = vec![
                r.seed.to_string(),
                sig6(r.level),
                r.variant.key().to_string(),
            ];
            f.extend(metric_fields(&r.metrics));
            f
        }),
    )
}

pub fn write_robustness_summary<W: Write>(out: W, rows: &[RobustnessSummary]) -> Result<()> {
    table(
        out,
        &[
            "level",
            "variant",
            "acc_mean",
            "acc_std",
            "f1_mean",
            "f1_std",
            "alpha_i_corrupted",
            "alpha_i_clean",
            "alpha_f_corrupted",
            "alpha_f_clean",
        ],
        rows.iter().map(|r| {
            vec![
                sig6(r.level),
                r.variant.key().to_string(),
                sig6(r.acc_mean),
                sig6(r.acc_std),
                sig6(r.f1_mean),
                sig6(r.f1_std),
                opt(r.alpha_i_corrupted),
                opt(r.alpha_i_clean),
                opt(r.alpha_f_corrupted),
                opt(r.alpha_f_clean),
            ]
        }),
    )
}

pub fn save_loss_curve(path: &Path, curve: &[LossBreakdown]) -> Result<()> {
    to_file(path, |f| write_loss_curve(f, curve))
}

pub fn save_metrics(path: &Path, m: &MetricsReport) -> Result<()> {
    to_file(path, |f| write_metrics(f, m))
}

pub fn save_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    to_file(path, |f| write_ablation(f, rows))
}

pub fn save_robustness(path: &Path, rows: &[RobustnessRow]) -> Result<()> {
    to_file(path, |f| write_robustness(f, rows))
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub const CONFIG_FILE: &str = "config.txt";
pub const PARAMS_FILE: &str = "params.json";

/// Writes `config.txt` and `params.json` into `dir`, creating it if needed.
pub fn save_checkpoint(dir: &Path, config: &TrainConfig, model: &Urmf) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, config.to_kv_string()).map_err(|e| Error::io(&cfg_path, e))?;
    let store = model.store();
    let entries: Vec<ParamEntry> = store
        .names()
        .iter()
        .zip(store.tensors())
        .map(|(name, t)| ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect();
    let json = serde_json::to_string(&entries).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let p = dir.join(PARAMS_FILE);
    std::fs::write(&p, json).map_err(|e| Error::io(&p, e))
}

/// Rebuilds the model saved by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(TrainConfig, Urmf)> {
    let config = TrainConfig::load(&dir.join(CONFIG_FILE))?;
    let mut model = Urmf::new(config.model_config(), config.seed)?;
    let p = dir.join(PARAMS_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let entries: Vec<ParamEntry> =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if entries.len() != model.store().len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter tensors, found {}",
            model.store().len(),
            entries.len()
        )));
    }
    for e in entries {
        let id = model
            .store()
            .find(&e.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {:?}", e.name)))?;
        let expected = model.store().get(id).shape().to_vec();
        if e.shape != expected {
            return Err(Error::Checkpoint(format!(
                "parameter {:?} has shape {:?}, expected {expected:?}",
                e.name, e.shape
            )));
        }
        model.store_mut().set(id, Tensor::new(e.shape, e.data)?);
    }
    Ok((config, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(std::f64::consts::LN_2), "0.693147");
        assert_eq!(sig6(123456789.0), "1.23457e8");
        assert_eq!(sig6(-0.000012345678), "-1.23457e-5");
        assert_eq!(sig6(0.00012345678), "0.000123457");
        assert_eq!(sig6(999999.7), "1e6");
        assert_eq!(sig6(12.5), "12.5");
        assert_eq!(sig6(f64::NAN), "nan");
    }

    #[test]
    fn loss_curve_layout() {
        let mut buf = Vec::new();
        let b = LossBreakdown {
            task: 0.5,
            total: 0.75,
            ..LossBreakdown::default()
        };
        write_loss_curve(&mut buf, &[b]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "epoch,total,task,kl_ib,reg,align,ucl\n0,0.75,0.5,0,0,0,0\n"
        );
    }
}
