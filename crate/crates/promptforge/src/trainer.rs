//! Few-shot training on base classes with plain SGD and cosine decay.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use thiserror::Error;

use crate::data::Dataset;
use crate::encoders::{EncoderConfig, EncoderError, EncoderWeights};
use crate::io::{read_tensor_record, write_tensor_record};
use crate::par::{self, Execution};
use crate::prompt::{
    base_text, forward, rng_for, ClassInputs, Learnables, MethodSpec, PromptError, DEFAULT_LAMBDA,
    DEFAULT_TAU,
};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("index error: label {label} out of range for {classes} classes")]
    Index { label: usize, classes: usize },
    #[error("checkpoint error in {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lambda: f64,
    pub tau: f64,
    pub shots: usize,
    pub seed: u64,
    pub method: MethodSpec,
    pub batch_size: usize,
    pub context_len: usize,
    pub encoder_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            base_lr: 0.002,
            lambda: DEFAULT_LAMBDA,
            tau: DEFAULT_TAU,
            shots: 16,
            seed: 1,
            method: MethodSpec::preset("full").expect("preset"),
            batch_size: 8,
            context_len: 4,
            encoder_seed: 7,
        }
    }
}

pub const TRAIN_KEYS: [&str; 10] = [
    "epochs",
    "base_lr",
    "lambda",
    "tau",
    "shots",
    "seed",
    "method",
    "batch_size",
    "context_len",
    "encoder_seed",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| TrainError::Parameter(format!("cannot parse {key}={value}")))
}

impl TrainConfig {
    /// The method with this config's blend weight and temperature applied.
    pub fn spec(&self) -> Result<MethodSpec> {
        Ok(self.method.with_hyper(self.lambda, self.tau)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec()?;
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(TrainError::Parameter(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.shots == 0 || self.batch_size == 0 || self.context_len == 0 {
            return Err(TrainError::Parameter("shots, batch_size and context_len must be positive".into()));
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("lambda", self.lambda.to_string()),
            ("tau", self.tau.to_string()),
            ("shots", self.shots.to_string()),
            ("seed", self.seed.to_string()),
            ("method", self.method.name()),
            ("batch_size", self.batch_size.to_string()),
            ("context_len", self.context_len.to_string()),
            ("encoder_seed", self.encoder_seed.to_string()),
        ]
    }

    /// Applies one `key=value` setting; returns false for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "shots" => self.shots = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "method" => self.method = MethodSpec::preset(value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "context_len" => self.context_len = parse(key, value)?,
            "encoder_seed" => self.encoder_seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub base_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Base,
    New,
}

impl SplitSpec {
    /// First ⌈M/2⌉ classes are base, the rest new.
    pub fn half(classes: usize) -> Self {
        let b = classes.div_ceil(2);
        Self {
            base_classes: (0..b).collect(),
            new_classes: (b..classes).collect(),
        }
    }

    pub fn classes(&self, which: Which) -> &[usize] {
        match which {
            Which::Base => &self.base_classes,
            Which::New => &self.new_classes,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let mut all: Vec<usize> = self.base_classes.iter().chain(&self.new_classes).copied().collect();
        all.sort_unstable();
        if all != (0..classes).collect::<Vec<_>>() {
            return Err(TrainError::Parameter(format!(
                "split must partition {classes} classes into disjoint base and new sets"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotSample {
    /// Dataset indices, `shots` per base class, base classes in split order.
    pub indices: Vec<usize>,
    /// Label of each sampled image, remapped to its base-class position.
    pub labels: Vec<usize>,
}

impl FewShotSample {
    pub fn draw(ds: &Dataset, split: &SplitSpec, shots: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, 11);
        let mut out = Self {
            indices: Vec::new(),
            labels: Vec::new(),
        };
        for (pos, &class) in split.base_classes.iter().enumerate() {
            let pool = ds.indices_of(class);
            if pool.len() < shots {
                return Err(TrainError::Data(format!(
                    "class {:?} has {} images but {shots} shots were requested",
                    ds.class_names.get(class).map_or("?", String::as_str),
                    pool.len()
                )));
            }
            for i in index::sample(&mut rng, pool.len(), shots) {
                out.indices.push(pool[i]);
                out.labels.push(pos);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedState {
    pub config: TrainConfig,
    pub split: SplitSpec,
    pub learnables: Learnables,
    pub loss_history: Vec<f64>,
    pub sample: FewShotSample,
    pub weights: Arc<EncoderWeights>,
}

impl TrainedState {
    pub fn spec(&self) -> Result<MethodSpec> {
        self.config.spec()
    }
}

/// −log p[label], with the log floored at 1e-30.
pub fn contrastive_loss(g: &mut Graph, probs: Var, label: usize) -> Result<Var> {
    let m = g.value(probs).len();
    if label >= m {
        return Err(TrainError::Index { label, classes: m });
    }
    let p = g.pick(probs, label)?;
    let l = g.log(p);
    Ok(g.scale(l, -1.0))
}

/// Cosine-decayed learning rate for `step` of `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(TrainError::Parameter("total_steps must be positive".into()));
    }
    let t = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Frozen patch features for every image, in dataset order.
pub fn encode_dataset(w: &EncoderWeights, ds: &Dataset, exec: Execution) -> Result<Vec<Arc<Tensor>>> {
    par::map_with(exec, &ds.images, |img| {
        crate::encoders::encode_image(w, img).map(|f| Arc::new(f.patches))
    })
    .into_iter()
    .map(|r| r.map_err(TrainError::from))
    .collect()
}

pub fn default_weights(cfg: &TrainConfig) -> Arc<EncoderWeights> {
    Arc::new(EncoderWeights::generate(cfg.encoder_seed, EncoderConfig::default()))
}

pub fn train(ds: &Dataset, split: &SplitSpec, cfg: &TrainConfig) -> Result<TrainedState> {
    let weights = default_weights(cfg);
    let bank = encode_dataset(&weights, ds, Execution::default())?;
    train_with(weights, &bank, ds, split, cfg)
}

struct SampleGrad {
    loss: f64,
    grads: Vec<Option<Tensor>>,
    base_grad: Option<Tensor>,
}

/// Loss and gradient of one sample. The base-path class embedding enters as
/// a leaf so its gradient can be pushed through the shared base graph later.
fn sample_step(
    w: &EncoderWeights,
    spec: &MethodSpec,
    learn: &Learnables,
    class_tokens: &Tensor,
    base: &Tensor,
    patches: &Arc<Tensor>,
    label: usize,
) -> Result<SampleGrad> {
    let mut g = Graph::new();
    let lv = learn.register(&mut g, spec);
    let ci = ClassInputs {
        class_tokens: g.constant(class_tokens.clone()),
        template: g.constant(w.template_tokens()),
    };
    let b = g.param(base.clone());
    let p = g.constant_shared(patches.clone());
    let out = forward(&mut g, w, spec, &lv, ci, p, Some(b))?;
    let loss = contrastive_loss(&mut g, out.probs, label)?;
    g.backward(loss)?;
    Ok(SampleGrad {
        loss: g.value(loss).item(),
        grads: lv.vars().iter().map(|v| g.grad(*v)).collect(),
        base_grad: g.grad(b),
    })
}

fn add_into(acc: &mut [f64], t: &Tensor) {
    acc.iter_mut().zip(t.data()).for_each(|(a, v)| *a += v);
}

pub fn train_with(
    weights: Arc<EncoderWeights>,
    bank: &[Arc<Tensor>],
    ds: &Dataset,
    split: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<TrainedState> {
    train_with_exec(weights, bank, ds, split, cfg, Execution::default())
}

pub fn train_with_exec(
    weights: Arc<EncoderWeights>,
    bank: &[Arc<Tensor>],
    ds: &Dataset,
    split: &SplitSpec,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<TrainedState> {
    cfg.validate()?;
    split.validate(ds.num_classes())?;
    let spec = cfg.spec()?;
    let w = weights.as_ref();
    let sample = FewShotSample::draw(ds, split, cfg.shots, cfg.seed)?;
    let base_names: Vec<String> = split.base_classes.iter().map(|&c| ds.class_names[c].clone()).collect();
    let class_tokens = w.class_tokens(&base_names)?;
    let mut learn = Learnables::init(&spec, cfg.context_len, w.config.dim, cfg.seed);
    let steps_per_epoch = sample.indices.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..sample.indices.len()).collect();
    let mut rng = rng_for(cfg.seed, 10);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut bg = Graph::new();
            let blv = learn.register(&mut bg, &spec);
            let bci = ClassInputs {
                class_tokens: bg.constant(class_tokens.clone()),
                template: bg.constant(w.template_tokens()),
            };
            let base = base_text(&mut bg, w, &spec, &blv, bci)?;
            let base_val = bg.value(base).clone();
            let results = par::map_with(exec, batch, |&j| {
                sample_step(w, &spec, &learn, &class_tokens, &base_val, &bank[sample.indices[j]], sample.labels[j])
            });
            let mut sums: Vec<Vec<f64>> = learn.tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            let mut base_sum = vec![0.0; base_val.len()];
            for r in results {
                let r = r?;
                epoch_loss += r.loss;
                for (s, gr) in sums.iter_mut().zip(&r.grads) {
                    if let Some(gr) = gr {
                        add_into(s, gr);
                    }
                }
                if let Some(gb) = &r.base_grad {
                    add_into(&mut base_sum, gb);
                }
            }
            if let Some(ctx) = blv.context.filter(|_| spec.learns_context()) {
                let seed = bg.constant(Tensor::new(base_val.shape().to_vec(), base_sum)?);
                let weighted = bg.hadamard(base, seed)?;
                let total_base = bg.sum(weighted);
                bg.backward(total_base)?;
                if let Some(gc) = bg.grad(ctx) {
                    add_into(&mut sums[0], &gc);
                }
            }
            let lr = lr_at(step, total, cfg.base_lr)?;
            step += 1;
            let scale = lr / batch.len() as f64;
            let trainable = spec.learns_context();
            for (k, (t, s)) in learn.tensors_mut().into_iter().zip(&sums).enumerate() {
                if k == 0 && !trainable {
                    continue;
                }
                let updated: Vec<f64> = t.data().iter().zip(s).map(|(v, gv)| v - scale * gv).collect();
                *t = Tensor::new(t.shape().to_vec(), updated)?;
            }
        }
        history.push(epoch_loss / sample.indices.len() as f64);
    }
    Ok(TrainedState {
        config: cfg.clone(),
        split: split.clone(),
        learnables: learn,
        loss_history: history,
        sample,
        weights,
    })
}

/// Everything needed to rebuild a trained method without retraining.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub split: SplitSpec,
    pub class_names: Vec<String>,
    /// Extra header settings (for example the dataset source).
    pub meta: Vec<(String, String)>,
    pub learnables: Learnables,
}

const MAGIC: &str = "PROMPTFORGE-CHECKPOINT v1";

fn join(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Checkpoint {
    pub fn from_state(state: &TrainedState, class_names: &[String], meta: Vec<(String, String)>) -> Self {
        Self {
            config: state.config.clone(),
            split: state.split.clone(),
            class_names: class_names.to_vec(),
            meta,
            learnables: state.learnables.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        writeln!(header, "{MAGIC}").unwrap();
        for (k, v) in self.config.pairs() {
            writeln!(header, "{k}={v}").unwrap();
        }
        writeln!(header, "base_classes={}", join(&self.split.base_classes)).unwrap();
        writeln!(header, "new_classes={}", join(&self.split.new_classes)).unwrap();
        writeln!(header, "class_names={}", self.class_names.join("\t")).unwrap();
        for (k, v) in &self.meta {
            writeln!(header, "meta.{k}={v}").unwrap();
        }
        let tensors = self.learnables.tensors();
        writeln!(header, "tensors={}", tensors.len()).unwrap();
        writeln!(header, "END").unwrap();
        let mut out = header.into_bytes();
        for (name, t) in tensors {
            write_tensor_record(&mut out, &name, t).expect("in-memory write");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io_err)?;
        f.write_all(&self.to_bytes()).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| TrainError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let io_err = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut r = BufReader::new(fs::File::open(path).map_err(io_err)?);
        let mut line = String::new();
        r.read_line(&mut line).map_err(io_err)?;
        if line.trim_end() != MAGIC {
            return Err(bad("missing checkpoint header".into()));
        }
        let mut config = TrainConfig::default();
        let mut split = SplitSpec::half(0);
        let mut class_names = Vec::new();
        let mut meta = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line).map_err(io_err)? == 0 {
                return Err(bad("header ended without END".into()));
            }
            let l = line.trim_end_matches(['\n', '\r']);
            if l == "END" {
                break;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| bad(format!("malformed header line {l:?}")))?;
            let ids = |v: &str| -> Result<Vec<usize>> {
                v.split(',').filter(|s| !s.is_empty()).map(|s| parse(k, s)).collect()
            };
            match k {
                "base_classes" => split.base_classes = ids(v)?,
                "new_classes" => split.new_classes = ids(v)?,
                "class_names" => class_names = v.split('\t').filter(|s| !s.is_empty()).map(String::from).collect(),
                "tensors" => {}
                _ => {
                    if let Some(mk) = k.strip_prefix("meta.") {
                        meta.push((mk.to_string(), v.to_string()));
                    } else if !config.set(k, v)? {
                        return Err(bad(format!("unknown header key {k:?}")));
                    }
                }
            }
        }
        let spec = config.spec()?;
        let mut learnables = Learnables {
            context: Tensor::zeros(&[0, 0]),
            prompt_net: spec.uses_prompt_net().then(|| crate::prompt::MetaNet::zeros(1)),
            feature_net: spec.uses_feature_net().then(|| crate::prompt::MetaNet::zeros(1)),
        };
        let expected: Vec<String> = learnables.tensors().into_iter().map(|(n, _)| n).collect();
        let slots = learnables.tensors_mut();
        for (name, slot) in expected.iter().zip(slots) {
            let (got, t) = read_tensor_record(&mut r).map_err(|e| bad(e.to_string()))?;
            if &got != name {
                return Err(bad(format!("expected tensor {name}, found {got}")));
            }
            *slot = t;
        }
        Ok(Self {
            config,
            split,
            class_names,
            meta,
            learnables,
        })
    }

    /// Rebinds the stored parameters to regenerated encoder weights.
    pub fn into_state(self) -> TrainedState {
        let weights = default_weights(&self.config);
        TrainedState {
            config: self.config,
            split: self.split,
            learnables: self.learnables,
            loss_history: Vec::new(),
            sample: FewShotSample {
                indices: Vec::new(),
                labels: Vec::new(),
            },
            weights,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    #[test]
    fn loss_examples() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::vector(vec![0.25; 4]));
        let l = contrastive_loss(&mut g, u, 3).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-6);
        let one = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let l = contrastive_loss(&mut g, one, 1).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let p = g.constant(Tensor::vector(vec![0.7311, 0.2689]));
        let l = contrastive_loss(&mut g, p, 1).unwrap();
        assert!((g.value(l).item() - 1.3133).abs() < 1e-3);
        assert!((g.value(l).item() - -(0.2689f64.ln())).abs() < 1e-12);
        assert!(matches!(contrastive_loss(&mut g, p, 2), Err(TrainError::Index { .. })));
        let l = contrastive_loss(&mut g, one, 0).unwrap();
        assert!(g.value(l).item().is_finite());
    }

    #[test]
    fn lr_examples() {
        assert_eq!(lr_at(0, 10, 0.002).unwrap(), 0.002);
        assert!((lr_at(5, 10, 0.002).unwrap() - 0.001).abs() < 1e-15);
        let oracle = 0.002 * 0.5 * (1.0 + (0.3 * std::f64::consts::PI).cos());
        assert!((lr_at(3, 10, 0.002).unwrap() - oracle).abs() < 1e-15);
        assert!((lr_at(3, 10, 0.002).unwrap() - 0.001588).abs() < 1e-6);
        assert!(lr_at(0, 0, 0.002).is_err());
        let lrs: Vec<f64> = (0..50).map(|s| lr_at(s, 50, 0.01).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn split_halves() {
        let s = SplitSpec::half(7);
        assert_eq!(s.base_classes, vec![0, 1, 2, 3]);
        assert_eq!(s.new_classes, vec![4, 5, 6]);
        s.validate(7).unwrap();
        assert!(s.validate(8).is_err());
        let overlap = SplitSpec {
            base_classes: vec![0, 1],
            new_classes: vec![1],
        };
        assert!(overlap.validate(2).is_err());
    }

    #[test]
    fn few_shot_sampling() {
        let ds = generate_synthetic(4, 10, 0).unwrap();
        let split = SplitSpec::half(4);
        let s = FewShotSample::draw(&ds, &split, 6, 3).unwrap();
        assert_eq!(s.indices.len(), 12);
        for (i, l) in s.indices.iter().zip(&s.labels) {
            assert_eq!(ds.labels[*i], split.base_classes[*l]);
        }
        let mut firsts = s.indices[..6].to_vec();
        firsts.sort();
        firsts.dedup();
        assert_eq!(firsts.len(), 6);
        assert_eq!(s, FewShotSample::draw(&ds, &split, 6, 3).unwrap());
        let err = FewShotSample::draw(&ds, &split, 11, 3).unwrap_err();
        assert!(err.to_string().contains("00_red_square"));
    }

    #[test]
    fn config_pairs_round_trip() {
        let mut cfg = TrainConfig {
            base_lr: 0.0035,
            method: MethodSpec::preset("mlp-pl+mlp-ft").unwrap(),
            ..TrainConfig::default()
        };
        cfg.seed = 99;
        let mut back = TrainConfig::default();
        for (k, v) in cfg.pairs() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(!back.set("bogus", "1").unwrap());
        assert_eq!(cfg.pairs().iter().map(|(k, _)| *k).collect::<Vec<_>>(), TRAIN_KEYS);
    }
}
