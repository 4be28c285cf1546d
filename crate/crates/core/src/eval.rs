//! Classification metrics, confusion matrices and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataset::{EmotionLabel, N_CLASSES};
use crate::error::{Error, Result};
use crate::models::ModelState;
use crate::tensor::Tensor;

/// Rows are true labels, columns predictions.
pub type Confusion = [[u64; N_CLASSES]; N_CLASSES];

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub label: EmotionLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_examples: u64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted mean F1 over classes with support.
    pub macro_f1: f64,
    pub confusion: Confusion,
    /// Precision, recall or F1 values that were 0/0 and reported as 0.
    pub zero_division: usize,
}

pub fn confusion_from_predictions(truth: &[EmotionLabel], predicted: &[EmotionLabel]) -> Result<Confusion> {
    if truth.len() != predicted.len() {
        return Err(Error::shape(format!("{} labels vs {} predictions", truth.len(), predicted.len())));
    }
    let mut c = [[0u64; N_CLASSES]; N_CLASSES];
    for (t, p) in truth.iter().zip(predicted) {
        c[t.code()][p.code()] += 1;
    }
    Ok(c)
}

pub fn metrics_from_confusion(confusion: &Confusion) -> Result<EvalReport> {
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    let mut zero_division = 0;
    let ratio = |num: u64, den: u64, zero: &mut usize| {
        if den == 0 {
            *zero += 1;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let trace: u64 = (0..N_CLASSES).map(|i| confusion[i][i]).sum();
    let mut per_class = Vec::with_capacity(N_CLASSES);
    for (i, label) in EmotionLabel::ALL.iter().enumerate() {
        let tp = confusion[i][i];
        let support: u64 = confusion[i].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[i]).sum();
        let precision = ratio(tp, predicted, &mut zero_division);
        let recall = ratio(tp, support, &mut zero_division);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            zero_division += 1;
            0.0
        };
        per_class.push(ClassMetrics {
            label: *label,
            precision,
            recall,
            f1,
            support,
        });
    }
    let supported: Vec<f64> = per_class.iter().filter(|c| c.support > 0).map(|c| c.f1).collect();
    let macro_f1 = supported.iter().sum::<f64>() / supported.len() as f64;
    Ok(EvalReport {
        n_examples: total,
        accuracy: trace as f64 / total as f64,
        per_class,
        macro_f1,
        confusion: *confusion,
        zero_division,
    })
}

/// Anything that maps raw features to labels.
pub trait Predictor {
    fn predict(&mut self, features: &[&Tensor]) -> Result<Vec<EmotionLabel>>;
}

impl Predictor for ModelState {
    fn predict(&mut self, features: &[&Tensor]) -> Result<Vec<EmotionLabel>> {
        ModelState::predict(self, features)
    }
}

/// Inference over `examples` and the resulting report.
pub fn evaluate(model: &mut dyn Predictor, examples: &[(Tensor, EmotionLabel)], split: &str) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let refs: Vec<&Tensor> = examples.iter().map(|(f, _)| f).collect();
    let truth: Vec<EmotionLabel> = examples.iter().map(|e| e.1).collect();
    let predicted = model.predict(&refs)?;
    metrics_from_confusion(&confusion_from_predictions(&truth, &predicted)?)
}

pub fn confusion_csv(c: &Confusion) -> String {
    let mut out = String::from("true\\predicted");
    for l in EmotionLabel::ALL {
        let _ = write!(out, ",{}", l.name());
    }
    out.push('\n');
    for (l, row) in EmotionLabel::ALL.iter().zip(c) {
        out.push_str(l.name());
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_confusion_csv(text: &str) -> Result<Confusion> {
    let bad = |m: String| Error::MalformedContainer(format!("confusion.csv: {m}"));
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    let expected: Vec<&str> = EmotionLabel::ALL.iter().map(|l| l.name()).collect();
    if header.iter().skip(1).collect::<Vec<_>>() != expected {
        return Err(bad("unexpected header".into()));
    }
    let mut c = [[0u64; N_CLASSES]; N_CLASSES];
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if i >= N_CLASSES || rec.get(0) != Some(expected[i]) || rec.len() != N_CLASSES + 1 {
            return Err(bad(format!("unexpected row {i}")));
        }
        for j in 0..N_CLASSES {
            c[i][j] = rec[j + 1].parse().map_err(|_| bad(format!("bad count {:?}", &rec[j + 1])))?;
        }
        rows += 1;
    }
    if rows != N_CLASSES {
        return Err(bad(format!("{rows} rows")));
    }
    Ok(c)
}

pub fn metrics_csv(r: &EvalReport) -> String {
    let mut out = String::from("label,precision,recall,f1,support,accuracy\n");
    for c in &r.per_class {
        let _ = writeln!(out, "{},{},{},{},{},", c.label.name(), c.precision, c.recall, c.f1, c.support);
    }
    let supported: Vec<&ClassMetrics> = r.per_class.iter().filter(|c| c.support > 0).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| supported.iter().map(|c| f(c)).sum::<f64>() / supported.len() as f64;
    let _ = writeln!(
        out,
        "macro,{},{},{},{},{}",
        mean(|c| c.precision),
        mean(|c| c.recall),
        r.macro_f1,
        r.n_examples,
        r.accuracy
    );
    out
}

pub fn report_text(r: &EvalReport, title: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "F1 is macro-averaged (unweighted) over classes with support > 0.");
    let _ = writeln!(out, "examples: {}", r.n_examples);
    let _ = writeln!(out, "accuracy: {:.4}", r.accuracy);
    let _ = writeln!(out, "macro F1: {:.4}", r.macro_f1);
    let _ = writeln!(out, "zero-division warnings (0/0 reported as 0): {}", r.zero_division);
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<10} {:>9} {:>9} {:>9} {:>8}", "label", "precision", "recall", "f1", "support");
    for c in &r.per_class {
        let _ = writeln!(
            out,
            "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>8}",
            c.label.name(),
            c.precision,
            c.recall,
            c.f1,
            c.support
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "confusion (rows true, columns predicted):");
    out.push_str(&confusion_csv(&r.confusion));
    out
}

/// Writes `metrics.csv`, `confusion.csv` and `report.txt` into `out_dir`.
pub fn emit_report(r: &EvalReport, out_dir: &Path, title: &str) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (name, body) in [
        ("metrics.csv", metrics_csv(r)),
        ("confusion.csv", confusion_csv(&r.confusion)),
        ("report.txt", report_text(r, title)),
    ] {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
