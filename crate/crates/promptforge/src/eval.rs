//! Base/new accuracy, harmonic mean, prompt discrimination and attention
//! heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::data::Dataset;
use crate::encoders::EncoderError;
use crate::par::{self, Execution};
use crate::prompt::{attention_record, base_text, forward, AttentionRecord, ClassInputs, PromptError};
use crate::tensor::{argmax, softmax, Graph, Tensor, TensorError};
use crate::trainer::{encode_dataset, SplitSpec, TrainError, TrainedState, Which};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// 2ab/(a+b), zero when both are zero.
pub fn harmonic_mean(base: f64, new: f64) -> f64 {
    if base + new == 0.0 {
        0.0
    } else {
        2.0 * base * new / (base + new)
    }
}

/// Top-1 accuracy in percent.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAccuracy {
    pub accuracy: f64,
    pub per_class: Vec<(String, f64)>,
}

fn check_classes(ds: &Dataset, classes: &[usize]) -> Result<()> {
    if let Some(c) = classes.iter().find(|&&c| c >= ds.num_classes()) {
        return Err(EvalError::Evaluation(format!(
            "class id {c} is outside the dataset's {} classes",
            ds.num_classes()
        )));
    }
    Ok(())
}

fn names_of(ds: &Dataset, classes: &[usize]) -> Vec<String> {
    classes.iter().map(|&c| ds.class_names[c].clone()).collect()
}

/// Per-image probabilities and class embeddings over `classes`, for the
/// images whose labels fall in `classes`. Labels are remapped to positions.
struct ClassView {
    items: Vec<(usize, usize)>,
    class_tokens: Tensor,
    base: Tensor,
}

fn class_view(state: &TrainedState, ds: &Dataset, classes: &[usize]) -> Result<ClassView> {
    check_classes(ds, classes)?;
    let w = state.weights.as_ref();
    let spec = state.spec()?;
    let names = names_of(ds, classes);
    let class_tokens = w
        .class_tokens(&names)
        .map_err(|e| EvalError::Evaluation(format!("cannot build prompts for {names:?}: {e}")))?;
    let mut g = Graph::new();
    let lv = state.learnables.register(&mut g, &spec);
    let ci = ClassInputs {
        class_tokens: g.constant(class_tokens.clone()),
        template: g.constant(w.template_tokens()),
    };
    let b = base_text(&mut g, w, &spec, &lv, ci)?;
    let items = ds
        .labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| classes.iter().position(|c| c == l).map(|pos| (i, pos)))
        .collect();
    Ok(ClassView {
        items,
        class_tokens,
        base: g.value(b).clone(),
    })
}

struct ImageOutput {
    probs: Vec<f64>,
    text: Tensor,
}

fn run_image(state: &TrainedState, view: &ClassView, patches: &Arc<Tensor>) -> Result<ImageOutput> {
    let w = state.weights.as_ref();
    let spec = state.spec()?;
    let mut g = Graph::new();
    let lv = state.learnables.register(&mut g, &spec);
    let ci = ClassInputs {
        class_tokens: g.constant(view.class_tokens.clone()),
        template: g.constant(w.template_tokens()),
    };
    let b = g.constant(view.base.clone());
    let p = g.constant_shared(patches.clone());
    let out = forward(&mut g, w, &spec, &lv, ci, p, Some(b))?;
    Ok(ImageOutput {
        probs: g.value(out.probs).data().to_vec(),
        text: g.value(out.text).clone(),
    })
}

fn bank_for(state: &TrainedState, ds: &Dataset, exec: Execution) -> Result<Vec<Arc<Tensor>>> {
    Ok(encode_dataset(&state.weights, ds, exec)?)
}

pub fn evaluate(state: &TrainedState, ds: &Dataset, split: &SplitSpec, which: Which) -> Result<f64> {
    let bank = bank_for(state, ds, Execution::default())?;
    Ok(evaluate_with(state, ds, &bank, split.classes(which), Execution::default())?.accuracy)
}

/// Predicted and true positions within `classes` for every image whose
/// label is one of `classes`, in dataset order.
pub fn predict_with(
    state: &TrainedState,
    ds: &Dataset,
    bank: &[Arc<Tensor>],
    classes: &[usize],
    exec: Execution,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let view = class_view(state, ds, classes)?;
    let preds = par::map_with(exec, &view.items, |&(i, _)| {
        run_image(state, &view, &bank[i]).map(|o| argmax(&o.probs))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((preds, view.items.iter().map(|&(_, l)| l).collect()))
}

/// Accuracy over `classes` with the softmax restricted to those classes.
pub fn evaluate_with(
    state: &TrainedState,
    ds: &Dataset,
    bank: &[Arc<Tensor>],
    classes: &[usize],
    exec: Execution,
) -> Result<SplitAccuracy> {
    let (preds, labels) = predict_with(state, ds, bank, classes, exec)?;
    let per_class = names_of(ds, classes)
        .into_iter()
        .enumerate()
        .map(|(c, name)| {
            let (p, l): (Vec<usize>, Vec<usize>) =
                preds.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, l)| (*p, *l)).unzip();
            (name, accuracy(&p, &l))
        })
        .collect();
    Ok(SplitAccuracy {
        accuracy: accuracy(&preds, &labels),
        per_class,
    })
}

/// Mean over negatives of 1 − cos(positive, negative) for one image's
/// per-class embeddings.
pub fn prompt_distance(text: &Tensor, label: usize) -> Result<f64> {
    let m = text.rows();
    if label >= m {
        return Err(EvalError::Evaluation(format!("label {label} out of range for {m} classes")));
    }
    if m < 2 {
        return Ok(0.0);
    }
    let pos = text.row(label);
    let mut total = 0.0;
    for j in (0..m).filter(|&j| j != label) {
        total += 1.0 - cosine(pos, text.row(j))?;
    }
    Ok(total / (m - 1) as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(TensorError::Degenerate {
            op: "cosine",
            norm: na.min(nb),
        }
        .into());
    }
    Ok(dot / (na * nb))
}

/// Dataset mean of [`prompt_distance`] over all classes of `ds`.
pub fn discrimination_distance(state: &TrainedState, ds: &Dataset) -> Result<f64> {
    let bank = bank_for(state, ds, Execution::default())?;
    discrimination_with(state, ds, &bank, Execution::default())
}

pub fn discrimination_with(state: &TrainedState, ds: &Dataset, bank: &[Arc<Tensor>], exec: Execution) -> Result<f64> {
    let classes: Vec<usize> = (0..ds.num_classes()).collect();
    let view = class_view(state, ds, &classes)?;
    if view.items.is_empty() {
        return Ok(0.0);
    }
    let d = par::map_with(exec, &view.items, |&(i, l)| {
        run_image(state, &view, &bank[i]).and_then(|o| prompt_distance(&o.text, l))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Attention maps of dataset image `image` against every class of `ds`.
pub fn record_for(state: &TrainedState, ds: &Dataset, image: usize) -> Result<AttentionRecord> {
    let img = ds
        .images
        .get(image)
        .ok_or_else(|| EvalError::Evaluation(format!("image {image} out of range for {} images", ds.len())))?;
    let w = state.weights.as_ref();
    let names = ds.class_names.clone();
    let tokens = w.class_tokens(&names)?;
    let patches = crate::encoders::encode_image(w, img)?.patches;
    Ok(attention_record(w, &state.spec()?, &state.learnables, &tokens, &names, &patches)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapArtifact {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, max-normalized to [0, 1].
    pub grid: Vec<f64>,
}

impl HeatmapArtifact {
    /// Softmax of one prompt's patch scores, scaled so the maximum is 1.
    pub fn from_record(rec: &AttentionRecord, class: usize) -> Result<Self> {
        if class >= rec.a_t.rows() {
            return Err(EvalError::Evaluation(format!(
                "class {class} out of range for {} classes",
                rec.a_t.rows()
            )));
        }
        let weights = softmax(rec.a_t.row(class));
        let n = weights.len();
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            return Err(EvalError::Evaluation(format!("{n} patches do not form a square grid")));
        }
        let max = weights.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            rows: side,
            cols: side,
            grid: weights.iter().map(|v| v / max).collect(),
        })
    }

    pub fn to_pgm(&self, comment: &str) -> String {
        let mut s = format!("P2\n# {comment}\n{} {}\n255\n", self.cols, self.rows);
        for r in self.grid.chunks(self.cols) {
            let line: Vec<String> = r.iter().map(|v| ((v * 255.0).round() as u8).to_string()).collect();
            writeln!(s, "{}", line.join(" ")).unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in self.grid.chunks(self.cols) {
            let line: Vec<String> = r.iter().map(|v| format!("{v:.9}")).collect();
            writeln!(s, "{}", line.join(",")).unwrap();
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut grid = Vec::new();
        let mut rows = 0;
        let mut cols = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let vals = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| EvalError::Evaluation(format!("bad heatmap csv: {e}")))?;
            if rows > 0 && vals.len() != cols {
                return Err(EvalError::Evaluation("ragged heatmap csv".into()));
            }
            cols = vals.len();
            rows += 1;
            grid.extend(vals);
        }
        Ok(Self { rows, cols, grid })
    }
}

/// Writes the graymap to `path` and its CSV twin next to it.
pub fn export_heatmap(rec: &AttentionRecord, image_id: usize, class_id: usize, path: &Path) -> Result<HeatmapArtifact> {
    let art = HeatmapArtifact::from_record(rec, class_id)?;
    let name = rec.class_names.get(class_id).map_or("?", String::as_str);
    let write = |p: &Path, body: String| {
        fs::write(p, body).map_err(|source| EvalError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    write(path, art.to_pgm(&format!("image {image_id} class {class_id} {name}")))?;
    write(&path.with_extension("csv"), art.to_csv())?;
    Ok(art)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub base_acc: f64,
    pub new_acc: f64,
    pub hos: f64,
    pub per_class_acc: Vec<(String, f64)>,
    pub discrimination: f64,
}

/// Trains nothing: scores an already trained state on both halves of the split.
pub fn report_for(state: &TrainedState, ds: &Dataset, bank: &[Arc<Tensor>], exec: Execution) -> Result<EvalReport> {
    let base = evaluate_with(state, ds, bank, &state.split.base_classes, exec)?;
    let new = evaluate_with(state, ds, bank, &state.split.new_classes, exec)?;
    let base_ds_idx: Vec<usize> = (0..ds.len())
        .filter(|&i| state.split.base_classes.contains(&ds.labels[i]))
        .collect();
    let base_ds = ds.restrict(&state.split.base_classes);
    let base_bank: Vec<Arc<Tensor>> = base_ds_idx.iter().map(|&i| bank[i].clone()).collect();
    let discrimination = discrimination_with(state, &base_ds, &base_bank, exec)?;
    let mut per_class = base.per_class;
    per_class.extend(new.per_class);
    Ok(EvalReport {
        method: state.config.method.name(),
        seed: state.config.seed,
        base_acc: base.accuracy,
        new_acc: new.accuracy,
        hos: harmonic_mean(base.accuracy, new.accuracy),
        per_class_acc: per_class,
        discrimination,
    })
}

pub const CSV_HEADER: &str = "method,seed,base,new,hos,discrimination";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.4},{:.6}",
            self.method, self.seed, self.base_acc, self.new_acc, self.hos, self.discrimination
        )
    }
}

/// Seed-averaged row for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedRow {
    pub method: String,
    pub base_acc: f64,
    pub new_acc: f64,
    pub hos: f64,
    pub discrimination: f64,
    pub seeds: usize,
}

/// Averages reports per method, keeping first-appearance order. Hos is
/// averaged over seeds rather than recomputed from averaged accuracies.
pub fn average(reports: &[EvalReport]) -> Vec<AveragedRow> {
    let mut out: Vec<AveragedRow> = Vec::new();
    for r in reports {
        let row = match out.iter_mut().find(|a| a.method == r.method) {
            Some(a) => a,
            None => {
                out.push(AveragedRow {
                    method: r.method.clone(),
                    base_acc: 0.0,
                    new_acc: 0.0,
                    hos: 0.0,
                    discrimination: 0.0,
                    seeds: 0,
                });
                out.last_mut().unwrap()
            }
        };
        row.base_acc += r.base_acc;
        row.new_acc += r.new_acc;
        row.hos += r.hos;
        row.discrimination += r.discrimination;
        row.seeds += 1;
    }
    for a in &mut out {
        let n = a.seeds as f64;
        a.base_acc /= n;
        a.new_acc /= n;
        a.hos /= n;
        a.discrimination /= n;
    }
    out
}

pub fn summary_csv(rows: &[AveragedRow]) -> String {
    let mut s = String::from("method,seeds,base,new,hos,discrimination\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{:.4},{:.4},{:.4},{:.6}",
            r.method, r.seeds, r.base_acc, r.new_acc, r.hos, r.discrimination
        )
        .unwrap();
    }
    s
}

pub fn markdown_table(rows: &[AveragedRow]) -> String {
    let mut s = String::from("| Method | Base | New | Hos | Disc |\n|---|---:|---:|---:|---:|\n");
    for r in rows {
        writeln!(
            s,
            "| {} | {:.2} | {:.2} | {:.2} | {:.4} |",
            r.method, r.base_acc, r.new_acc, r.hos, r.discrimination
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(82.69, 63.22) - 71.66).abs() < 0.01);
        assert!((harmonic_mean(80.47, 71.69) - 75.83).abs() < 0.01);
        assert!((harmonic_mean(83.01, 75.72) - 79.1976).abs() < 1e-4);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 50.0), 0.0);
        for x in [0.5, 12.0, 99.9] {
            assert!((harmonic_mean(x, x) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_predictor_hits_one_over_m() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        assert_eq!(accuracy(&[0; 40], &labels), 25.0);
        assert_eq!(accuracy(&labels, &labels), 100.0);
    }

    #[test]
    fn distance_examples() {
        let same = Tensor::matrix(3, 2, vec![1.0, 2.0, 1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(prompt_distance(&same, 0).unwrap().abs() < 1e-12);
        let ortho = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        assert!((prompt_distance(&ortho, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!(prompt_distance(&ortho, 3).is_err());
    }

    fn record(row: Vec<f64>) -> AttentionRecord {
        let n = row.len();
        AttentionRecord {
            a_t: Tensor::matrix(1, n, row).unwrap(),
            a_x: Tensor::zeros(&[n, 1]),
            class_names: vec!["x".into()],
        }
    }

    #[test]
    fn uniform_and_peaked_heatmaps() {
        let u = HeatmapArtifact::from_record(&record(vec![0.3; 16]), 0).unwrap();
        assert_eq!((u.rows, u.cols), (4, 4));
        assert!(u.grid.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let mut row = vec![-1e3; 16];
        row[5] = 0.0;
        let p = HeatmapArtifact::from_record(&record(row), 0).unwrap();
        assert_eq!(p.grid.iter().filter(|&&v| v > 0.5).count(), 1);
        assert_eq!(p.grid[5], 1.0);
        assert!(p.to_pgm("t").lines().nth(5).unwrap().starts_with("0 255 0"));
        assert!(HeatmapArtifact::from_record(&record(vec![0.0; 6]), 0).is_err());
    }

    #[test]
    fn heatmap_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let row: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let path = dir.path().join("h.pgm");
        let art = export_heatmap(&record(row), 0, 0, &path).unwrap();
        let back = HeatmapArtifact::parse_csv(&fs::read_to_string(path.with_extension("csv")).unwrap()).unwrap();
        assert_eq!((back.rows, back.cols), (4, 4));
        for (a, b) in art.grid.iter().zip(&back.grid) {
            assert!((a - b).abs() < 1e-6);
        }
        let pgm = fs::read_to_string(&path).unwrap();
        assert!(pgm.starts_with("P2\n"));
        let bad = dir.path().join("missing").join("h.pgm");
        assert!(matches!(export_heatmap(&record(vec![0.0; 4]), 0, 0, &bad), Err(EvalError::Io { .. })));
    }

    #[test]
    fn averaging_keeps_order() {
        let rep = |m: &str, seed, b, n| EvalReport {
            method: m.into(),
            seed,
            base_acc: b,
            new_acc: n,
            hos: harmonic_mean(b, n),
            per_class_acc: vec![],
            discrimination: 0.1,
        };
        let rows = average(&[rep("coop", 1, 80.0, 60.0), rep("full", 1, 90.0, 70.0), rep("coop", 2, 70.0, 50.0)]);
        assert_eq!(rows[0].method, "coop");
        assert_eq!(rows[0].seeds, 2);
        assert!((rows[0].base_acc - 75.0).abs() < 1e-12);
        assert!(markdown_table(&rows).contains("| full | 90.00 | 70.00 |"));
        assert!(summary_csv(&rows).starts_with("method,seeds,base,new,hos,discrimination\n"));
    }
}
