//! Prompt construction and feature tuning.
//!
//! Prompt paths: hand-written template, shared learned context, context
//! shifted by an image-conditioned residual (one shared residual, or one
//! attended residual per class). Image paths: untouched, shifted by a
//! text-conditioned MLP residual, or augmented by attention over the class
//! embeddings. All of it is assembled by [`forward`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::encoders::{encode_text, EncoderError, EncoderWeights};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, PromptError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptMode {
    Handcrafted,
    CoOp,
    CoCoOp,
    MlpPl,
    Ctp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImageMode {
    None,
    MlpFt,
    Tft,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodSpec {
    pub prompt_mode: PromptMode,
    pub image_mode: ImageMode,
    pub lambda: f64,
    pub tau: f64,
}

pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_TAU: f64 = 0.01;

const PRESETS: [(&str, PromptMode, ImageMode); 9] = [
    ("clip", PromptMode::Handcrafted, ImageMode::None),
    ("coop", PromptMode::CoOp, ImageMode::None),
    ("cocoop", PromptMode::CoCoOp, ImageMode::None),
    ("mlp-pl", PromptMode::MlpPl, ImageMode::None),
    ("ctp", PromptMode::Ctp, ImageMode::None),
    ("mlp-ft", PromptMode::CoOp, ImageMode::MlpFt),
    ("tft", PromptMode::CoOp, ImageMode::Tft),
    ("mlp-pl+mlp-ft", PromptMode::MlpPl, ImageMode::MlpFt),
    ("full", PromptMode::Ctp, ImageMode::Tft),
];

pub fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(PromptError::Parameter(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(PromptError::Parameter(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

impl MethodSpec {
    pub fn new(prompt_mode: PromptMode, image_mode: ImageMode, lambda: f64, tau: f64) -> Result<Self> {
        if prompt_mode == PromptMode::Handcrafted && image_mode != ImageMode::None {
            return Err(PromptError::Parameter(
                "hand-crafted prompts cannot be combined with feature tuning".into(),
            ));
        }
        check_lambda(lambda)?;
        check_temperature(tau)?;
        Ok(Self {
            prompt_mode,
            image_mode,
            lambda,
            tau,
        })
    }

    pub fn preset(name: &str) -> Result<Self> {
        let key = name.trim().to_ascii_lowercase();
        let key = if key == "ctp+tft" { "full".to_string() } else { key };
        PRESETS
            .iter()
            .find(|(n, ..)| *n == key)
            .map(|&(_, p, i)| Self::new(p, i, DEFAULT_LAMBDA, DEFAULT_TAU))
            .unwrap_or_else(|| Err(PromptError::Parameter(format!("unknown method {name:?}"))))
    }

    pub fn with_hyper(self, lambda: f64, tau: f64) -> Result<Self> {
        Self::new(self.prompt_mode, self.image_mode, lambda, tau)
    }

    pub fn name(&self) -> String {
        PRESETS
            .iter()
            .find(|(_, p, i)| *p == self.prompt_mode && *i == self.image_mode)
            .map(|(n, ..)| n.to_string())
            .unwrap_or_else(|| format!("{:?}+{:?}", self.prompt_mode, self.image_mode).to_lowercase())
    }

    pub fn uses_prompt_net(&self) -> bool {
        matches!(self.prompt_mode, PromptMode::CoCoOp | PromptMode::MlpPl)
    }

    pub fn uses_feature_net(&self) -> bool {
        self.image_mode == ImageMode::MlpFt
    }

    pub fn learns_context(&self) -> bool {
        self.prompt_mode != PromptMode::Handcrafted
    }

    /// Whether the probability head blends a base and an augmented cosine.
    pub fn blends(&self) -> bool {
        !matches!(
            (self.prompt_mode, self.image_mode),
            (PromptMode::Handcrafted | PromptMode::CoOp | PromptMode::CoCoOp, ImageMode::None)
        )
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for MethodSpec {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self> {
        Self::preset(s)
    }
}

/// Shared context rows plus frozen per-class tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub context: Tensor,
    pub class_tokens: Tensor,
}

impl PromptSet {
    /// Row i: mean of the context rows together with class token i.
    pub fn pooled_query(&self) -> Tensor {
        let (k, d) = (self.context.rows(), self.class_tokens.cols());
        let m = self.class_tokens.rows();
        let ctx_sum: Vec<f64> = (0..d).map(|j| (0..k).map(|i| self.context.get(i, j)).sum()).collect();
        let data = (0..m)
            .flat_map(|i| {
                let c = self.class_tokens.row(i);
                (0..d).map(|j| (ctx_sum[j] + c[j]) / (k + 1) as f64).collect::<Vec<_>>()
            })
            .collect();
        Tensor::matrix(m, d, data).expect("query shape")
    }
}

/// Linear-ReLU-Linear residual generator.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct MetaNetVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MetaNet {
    pub fn hidden_width(dim: usize) -> usize {
        dim.div_ceil(16).max(4)
    }

    /// Fan-in uniform initialization, U(±1/√fan_in) for weights and biases.
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        let h = Self::hidden_width(dim);
        let mut u = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
                .expect("shape")
        };
        Self {
            w1: u(&[dim, h], dim),
            b1: u(&[h], dim),
            w2: u(&[h, dim], h),
            b2: u(&[dim], h),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        let h = Self::hidden_width(dim);
        Self {
            w1: Tensor::zeros(&[dim, h]),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::zeros(&[h, dim]),
            b2: Tensor::zeros(&[dim]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn register(&self, g: &mut Graph, learnable: bool) -> MetaNetVars {
        let mut reg = |t: &Tensor| if learnable { g.param(t.clone()) } else { g.constant(t.clone()) };
        MetaNetVars {
            w1: reg(&self.w1),
            b1: reg(&self.b1),
            w2: reg(&self.w2),
            b2: reg(&self.b2),
        }
    }
}

impl MetaNetVars {
    pub fn vars(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Maps a length-d vector to a length-d residual.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let d = g.shape(x)[0];
        let x = g.reshape(x, vec![1, d])?;
        let h = g.matmul(x, self.w1)?;
        let hw = g.shape(h)[1];
        let h = g.reshape(h, vec![hw])?;
        let h = g.add(h, self.b1)?;
        let h = g.relu(h);
        let h = g.reshape(h, vec![1, hw])?;
        let o = g.matmul(h, self.w2)?;
        let o = g.reshape(o, vec![d])?;
        Ok(g.add(o, self.b2)?)
    }
}

pub fn init_context(k: usize, dim: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    Tensor::matrix(k, dim, (0..k * dim).map(|_| normal.sample(rng)).collect()).expect("shape")
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Graph handles of a prompt set; `context` has k rows (possibly zero).
#[derive(Debug, Clone, Copy)]
pub struct PromptVars {
    pub context: Option<Var>,
    pub class_tokens: Var,
}

fn class_row(g: &mut Graph, cls: Var, i: usize) -> Result<Var> {
    Ok(g.slice_rows(cls, i, 1)?)
}

fn sequences_with(g: &mut Graph, ps: PromptVars, shift: impl Fn(&mut Graph, Var, usize) -> Result<Var>) -> Result<Vec<Var>> {
    let m = g.shape(ps.class_tokens)[0];
    (0..m)
        .map(|i| {
            let c = class_row(g, ps.class_tokens, i)?;
            match ps.context {
                Some(ctx) => {
                    let ctx_i = shift(g, ctx, i)?;
                    Ok(g.concat_rows(&[ctx_i, c])?)
                }
                None => Ok(c),
            }
        })
        .collect()
}

/// Mean of context rows and each class token, one row per class.
pub fn pooled_query(g: &mut Graph, ps: PromptVars) -> Result<Var> {
    match ps.context {
        Some(ctx) => {
            let k = g.shape(ctx)[0];
            let mean = g.mean_rows(ctx)?;
            let ctx_part = g.scale(mean, k as f64 / (k + 1) as f64);
            let cls_part = g.scale(ps.class_tokens, 1.0 / (k + 1) as f64);
            Ok(g.add_row(cls_part, ctx_part)?)
        }
        None => Ok(ps.class_tokens),
    }
}

/// Class i: the shared context rows followed by class token i.
pub fn build_coop_prompts(g: &mut Graph, ps: PromptVars) -> Result<Vec<Var>> {
    sequences_with(g, ps, |_, ctx, _| Ok(ctx))
}

/// Template rows followed by each class token.
pub fn build_handcrafted_prompts(g: &mut Graph, template: Var, cls: Var) -> Result<Vec<Var>> {
    sequences_with(
        g,
        PromptVars {
            context: Some(template),
            class_tokens: cls,
        },
        |_, t, _| Ok(t),
    )
}

/// Adds one image-conditioned residual to every context row of every class.
/// Returns the sequences and the residual.
pub fn build_cocoop_prompts(g: &mut Graph, ps: PromptVars, pooled: Var, net: &MetaNetVars) -> Result<(Vec<Var>, Var)> {
    let pi = net.apply(g, pooled)?;
    let seqs = sequences_with(g, ps, |g, ctx, _| Ok(g.add_row(ctx, pi)?))?;
    Ok((seqs, pi))
}

/// Same mechanics as the shared-residual prompts, with its own network.
pub fn mlp_pl_prompts(g: &mut Graph, ps: PromptVars, pooled: Var, net: &MetaNetVars) -> Result<(Vec<Var>, Var)> {
    build_cocoop_prompts(g, ps, pooled, net)
}

/// Prompt queries attend over patches: scores M×N and attended regions M×d.
pub fn ctp_attention(g: &mut Graph, query: Var, patches: Var) -> Result<(Var, Var)> {
    let pt = g.transpose(patches)?;
    let scores = g.matmul(query, pt)?;
    let weights = g.softmax_rows(scores);
    let regions = g.matmul(weights, patches)?;
    Ok((scores, regions))
}

/// Each class's attended region is added to that class's context rows.
/// Returns the sequences, the M×N scores and the M×d residuals.
pub fn build_ctp_prompts(g: &mut Graph, ps: PromptVars, patches: Var) -> Result<(Vec<Var>, Var, Var)> {
    let q = pooled_query(g, ps)?;
    let (scores, regions) = ctp_attention(g, q, patches)?;
    let seqs = sequences_with(g, ps, |g, ctx, i| {
        let r = g.row(regions, i)?;
        Ok(g.add_row(ctx, r)?)
    })?;
    Ok((seqs, scores, regions))
}

/// Patches attend over class embeddings; the attended text is added back
/// to each patch. Returns the augmented N×d patches and the N×M scores.
pub fn tft_augment(g: &mut Graph, patches: Var, text: Var) -> Result<(Var, Var)> {
    let tt = g.transpose(text)?;
    let scores = g.matmul(patches, tt)?;
    let weights = g.softmax_rows(scores);
    let attended = g.matmul(weights, text)?;
    Ok((g.add(attended, patches)?, scores))
}

/// Adds `net(mean text row)` to every patch row.
pub fn mlp_ft_features(g: &mut Graph, patches: Var, text: Var, net: &MetaNetVars) -> Result<Var> {
    let t = g.mean_rows(text)?;
    let r = net.apply(g, t)?;
    Ok(g.add_row(patches, r)?)
}

/// softmax_i(cos(image, text_i) / τ).
pub fn clip_probability(g: &mut Graph, image: Var, text: Var, tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    let c = g.cosine_rows(image, text)?;
    let l = g.scale(c, 1.0 / tau);
    Ok(g.softmax_rows(l))
}

/// softmax_i((cos(f, g_i) + λ·cos(f_a, ga_i)) / τ).
pub fn blended_probability(
    g: &mut Graph,
    image: Var,
    base_text: Var,
    aug_image: Var,
    aug_text: Var,
    lambda: f64,
    tau: f64,
) -> Result<Var> {
    check_temperature(tau)?;
    if lambda.is_nan() || lambda < 0.0 {
        return Err(PromptError::Parameter(format!("lambda must be non-negative, got {lambda}")));
    }
    let base = g.cosine_rows(image, base_text)?;
    let aug = g.cosine_rows(aug_image, aug_text)?;
    let aug = g.scale(aug, lambda);
    let sum = g.add(base, aug)?;
    let l = g.scale(sum, 1.0 / tau);
    Ok(g.softmax_rows(l))
}

/// Learnable state of a method, outside any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Learnables {
    pub context: Tensor,
    pub prompt_net: Option<MetaNet>,
    pub feature_net: Option<MetaNet>,
}

impl Learnables {
    pub fn init(spec: &MethodSpec, k: usize, dim: usize, seed: u64) -> Self {
        Self {
            context: init_context(k, dim, &mut rng_for(seed, 1)),
            prompt_net: spec.uses_prompt_net().then(|| MetaNet::init(dim, &mut rng_for(seed, 2))),
            feature_net: spec.uses_feature_net().then(|| MetaNet::init(dim, &mut rng_for(seed, 3))),
        }
    }

    /// Every learnable tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("context".to_string(), &self.context)];
        for (prefix, net) in [("prompt_net", &self.prompt_net), ("feature_net", &self.feature_net)] {
            if let Some(n) = net {
                for (name, t) in ["w1", "b1", "w2", "b2"].iter().zip(n.tensors()) {
                    out.push((format!("{prefix}.{name}"), t));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.context];
        for n in [&mut self.prompt_net, &mut self.feature_net].into_iter().flatten() {
            out.extend(n.tensors_mut());
        }
        out
    }

    pub fn register(&self, g: &mut Graph, spec: &MethodSpec) -> LearnableVars {
        let learn = spec.learns_context();
        LearnableVars {
            context: (self.context.rows() > 0)
                .then(|| if learn { g.param(self.context.clone()) } else { g.constant(self.context.clone()) }),
            prompt_net: self.prompt_net.as_ref().map(|n| n.register(g, true)),
            feature_net: self.feature_net.as_ref().map(|n| n.register(g, true)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LearnableVars {
    pub context: Option<Var>,
    pub prompt_net: Option<MetaNetVars>,
    pub feature_net: Option<MetaNetVars>,
}

impl LearnableVars {
    /// Graph handles in the same order as [`Learnables::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.context.into_iter().collect();
        for n in [self.prompt_net, self.feature_net].into_iter().flatten() {
            out.extend(n.vars());
        }
        out
    }
}

/// Image-independent inputs shared by every forward pass of one class set.
#[derive(Debug, Clone, Copy)]
pub struct ClassInputs {
    pub class_tokens: Var,
    pub template: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub probs: Var,
    /// Final per-class embeddings the head compares against.
    pub text: Var,
    pub base_text: Var,
    pub prompt_scores: Option<Var>,
    pub patch_scores: Option<Var>,
    pub residual: Option<Var>,
}

/// Base-path class embeddings: template prompts for the hand-crafted mode,
/// shared-context prompts otherwise.
pub fn base_text(g: &mut Graph, w: &EncoderWeights, spec: &MethodSpec, lv: &LearnableVars, ci: ClassInputs) -> Result<Var> {
    let seqs = match spec.prompt_mode {
        PromptMode::Handcrafted => build_handcrafted_prompts(g, ci.template, ci.class_tokens)?,
        _ => build_coop_prompts(
            g,
            PromptVars {
                context: lv.context,
                class_tokens: ci.class_tokens,
            },
        )?,
    };
    Ok(encode_text(g, w, &seqs)?)
}

/// Full probability head for one image. `base` may carry a precomputed
/// base-path embedding (it never depends on the image).
pub fn forward(
    g: &mut Graph,
    w: &EncoderWeights,
    spec: &MethodSpec,
    lv: &LearnableVars,
    ci: ClassInputs,
    patches: Var,
    base: Option<Var>,
) -> Result<ForwardOutput> {
    let pooled = g.mean_rows(patches)?;
    let base = match base {
        Some(b) => b,
        None => base_text(g, w, spec, lv, ci)?,
    };
    let ps = PromptVars {
        context: lv.context,
        class_tokens: ci.class_tokens,
    };
    let missing = |what: &str| PromptError::Parameter(format!("{} needs a {what}", spec.name()));
    let (aug_text, prompt_scores, residual) = match spec.prompt_mode {
        PromptMode::Handcrafted | PromptMode::CoOp => (base, None, None),
        PromptMode::CoCoOp | PromptMode::MlpPl => {
            let net = lv.prompt_net.ok_or_else(|| missing("prompt network"))?;
            let (seqs, pi) = build_cocoop_prompts(g, ps, pooled, &net)?;
            (encode_text(g, w, &seqs)?, None, Some(pi))
        }
        PromptMode::Ctp => {
            let (seqs, scores, regions) = build_ctp_prompts(g, ps, patches)?;
            (encode_text(g, w, &seqs)?, Some(scores), Some(regions))
        }
    };
    let mut patch_scores = None;
    let probs = if !spec.blends() {
        let text = if spec.prompt_mode == PromptMode::CoCoOp { aug_text } else { base };
        clip_probability(g, pooled, text, spec.tau)?
    } else {
        let aug_image = match spec.image_mode {
            ImageMode::None => pooled,
            ImageMode::Tft => {
                let (fa, scores) = tft_augment(g, patches, aug_text)?;
                patch_scores = Some(scores);
                g.mean_rows(fa)?
            }
            ImageMode::MlpFt => {
                let net = lv.feature_net.ok_or_else(|| missing("feature network"))?;
                let fa = mlp_ft_features(g, patches, aug_text, &net)?;
                g.mean_rows(fa)?
            }
        };
        blended_probability(g, pooled, base, aug_image, aug_text, spec.lambda, spec.tau)?
    };
    Ok(ForwardOutput {
        probs,
        text: aug_text,
        base_text: base,
        prompt_scores,
        patch_scores,
        residual,
    })
}

/// Attention maps of one image, detached from the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    /// Prompt-to-patch scores, M×N.
    pub a_t: Tensor,
    /// Patch-to-class scores, N×M.
    pub a_x: Tensor,
    pub class_names: Vec<String>,
}

/// Prompt-to-patch and patch-to-class attention for one image, using the
/// method's final class embeddings.
pub fn attention_record(
    w: &EncoderWeights,
    spec: &MethodSpec,
    learn: &Learnables,
    class_tokens: &Tensor,
    class_names: &[String],
    patches: &Tensor,
) -> Result<AttentionRecord> {
    let mut g = Graph::new();
    let lv = learn.register(&mut g, spec);
    let ci = ClassInputs {
        class_tokens: g.constant(class_tokens.clone()),
        template: g.constant(w.template_tokens()),
    };
    let p = g.constant(patches.clone());
    let out = forward(&mut g, w, spec, &lv, ci, p, None)?;
    let a_t = match out.prompt_scores {
        Some(s) => s,
        None => {
            let q = pooled_query(
                &mut g,
                PromptVars {
                    context: lv.context,
                    class_tokens: ci.class_tokens,
                },
            )?;
            ctp_attention(&mut g, q, p)?.0
        }
    };
    let a_x = match out.patch_scores {
        Some(s) => s,
        None => tft_augment(&mut g, p, out.text)?.1,
    };
    Ok(AttentionRecord {
        a_t: g.value(a_t).clone(),
        a_x: g.value(a_x).clone(),
        class_names: class_names.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;

    fn mat(r: usize, c: usize, salt: u64) -> Tensor {
        let mut rng = rng_for(salt, 0);
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tiny() -> EncoderWeights {
        EncoderWeights::generate(5, EncoderConfig::tiny(8, 2))
    }

    fn values(g: &Graph, vs: &[Var]) -> Vec<Tensor> {
        vs.iter().map(|v| g.value(*v).clone()).collect()
    }

    #[test]
    fn presets_round_trip() {
        for (name, ..) in PRESETS {
            let spec = MethodSpec::preset(name).unwrap();
            assert_eq!(spec.name(), name);
            assert_eq!(spec.lambda, 0.2);
            assert_eq!(spec.tau, 0.01);
        }
        assert_eq!(MethodSpec::preset("CTP+TFT").unwrap().name(), "full");
        assert!(MethodSpec::preset("proda").is_err());
        assert!(MethodSpec::new(PromptMode::Handcrafted, ImageMode::Tft, 0.2, 0.01).is_err());
        assert!(MethodSpec::new(PromptMode::CoOp, ImageMode::Tft, 0.2, 0.0).is_err());
        assert!(MethodSpec::new(PromptMode::CoOp, ImageMode::Tft, -0.1, 0.01).is_err());
    }

    #[test]
    fn hidden_width_floor() {
        assert_eq!(MetaNet::hidden_width(64), 4);
        assert_eq!(MetaNet::hidden_width(16), 4);
        assert_eq!(MetaNet::hidden_width(128), 8);
        assert_eq!(MetaNet::hidden_width(100), 7);
    }

    #[test]
    fn pooled_query_is_mean_of_prompt_rows() {
        let ps = PromptSet {
            context: mat(3, 4, 1),
            class_tokens: mat(2, 4, 2),
        };
        let q = ps.pooled_query();
        for i in 0..2 {
            for j in 0..4 {
                let expect = (ps.context.get(0, j) + ps.context.get(1, j) + ps.context.get(2, j)
                    + ps.class_tokens.get(i, j))
                    / 4.0;
                assert!((q.get(i, j) - expect).abs() < 1e-15);
            }
        }
        let mut g = Graph::new();
        let pv = PromptVars {
            context: Some(g.constant(ps.context.clone())),
            class_tokens: g.constant(ps.class_tokens.clone()),
        };
        let qg = pooled_query(&mut g, pv).unwrap();
        for (a, b) in g.value(qg).data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn coop_prompt_layout() {
        let mut g = Graph::new();
        let ctx = g.constant(mat(2, 4, 3));
        let cls = g.constant(mat(3, 4, 4));
        let seqs = build_coop_prompts(&mut g, PromptVars { context: Some(ctx), class_tokens: cls }).unwrap();
        assert_eq!(seqs.len(), 3);
        for (i, s) in seqs.iter().enumerate() {
            let t = g.value(*s);
            assert_eq!(t.shape(), &[3, 4]);
            assert_eq!(t.row(0), g.value(ctx).row(0));
            assert_eq!(t.row(1), g.value(ctx).row(1));
            assert_eq!(t.row(2), g.value(cls).row(i));
        }
        let seqs = build_coop_prompts(&mut g, PromptVars { context: None, class_tokens: cls }).unwrap();
        assert_eq!(g.value(seqs[1]).shape(), &[1, 4]);
        assert_eq!(g.value(seqs[1]).row(0), g.value(cls).row(1));
    }

    #[test]
    fn changing_one_context_row_touches_one_position() {
        let c0 = mat(3, 4, 5);
        let mut d = c0.clone().into_data();
        d[0] += 1.0;
        let c1 = Tensor::matrix(3, 4, d).unwrap();
        let mut g = Graph::new();
        let cls = g.constant(mat(2, 4, 6));
        let a = g.constant(c0);
        let b = g.constant(c1);
        let sa = build_coop_prompts(&mut g, PromptVars { context: Some(a), class_tokens: cls }).unwrap();
        let sb = build_coop_prompts(&mut g, PromptVars { context: Some(b), class_tokens: cls }).unwrap();
        for (x, y) in sa.iter().zip(&sb) {
            let (x, y) = (g.value(*x), g.value(*y));
            assert_ne!(x.row(0), y.row(0));
            for r in 1..4 {
                assert_eq!(x.row(r), y.row(r));
            }
        }
    }

    #[test]
    fn cocoop_residual_is_shared_and_vanishes_with_zero_net() {
        let mut g = Graph::new();
        let ps = PromptVars {
            context: Some(g.constant(mat(2, 8, 7))),
            class_tokens: g.constant(mat(3, 8, 8)),
        };
        let pooled = g.constant(Tensor::vector(mat(1, 8, 9).into_data()));
        let net = MetaNet::init(8, &mut rng_for(1, 2)).register(&mut g, true);
        let (seqs, pi) = build_cocoop_prompts(&mut g, ps, pooled, &net).unwrap();
        let coop = build_coop_prompts(&mut g, ps).unwrap();
        let residual = |i: usize, r: usize| -> Vec<f64> {
            let (a, b) = (g.value(seqs[i]).row(r), g.value(coop[i]).row(r));
            a.iter().zip(b).map(|(x, y)| x - y).collect()
        };
        let r0 = residual(0, 0);
        assert_eq!(r0, residual(2, 0));
        assert_eq!(residual(1, 1), residual(2, 1));
        for (x, y) in r0.iter().zip(g.value(pi).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for i in 0..3 {
            assert_eq!(g.value(seqs[i]).row(2), g.value(coop[i]).row(2));
        }
        let zero = MetaNet::zeros(8).register(&mut g, false);
        let (zs, _) = build_cocoop_prompts(&mut g, ps, pooled, &zero).unwrap();
        assert_eq!(values(&g, &zs), values(&g, &coop));
    }

    #[test]
    fn ctp_attention_examples() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let p = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let (a, f) = ctp_attention(&mut g, q, p).unwrap();
        assert_eq!(g.value(a).data(), &[1.0, 0.0]);
        let e = std::f64::consts::E;
        assert!((g.value(f).data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((g.value(f).data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((g.value(f).data()[0] - 0.7311).abs() < 1e-4);

        let one = g.constant(mat(1, 4, 10));
        let q = g.constant(mat(3, 4, 11));
        let (_, f) = ctp_attention(&mut g, q, one).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(f).row(i), g.value(one).row(0));
        }

        let q = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap());
        let p = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 0.0], vec![3.0, -1.0, 0.0]]).unwrap());
        let (a, f) = ctp_attention(&mut g, q, p).unwrap();
        assert!(g.value(a).data().iter().all(|v| *v == 0.0));
        assert_eq!(g.value(f).data(), &[2.0, 0.5, 0.0]);
    }

    #[test]
    fn ctp_regions_are_convex_combinations() {
        let mut g = Graph::new();
        let q = g.constant(mat(3, 4, 12));
        let pt = mat(5, 4, 13);
        let p = g.constant(pt.clone());
        let (_, f) = ctp_attention(&mut g, q, p).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let col: Vec<f64> = (0..5).map(|n| pt.get(n, j)).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let v = g.value(f).get(i, j);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn ctp_reduces_to_coop_on_zero_patches_and_is_class_aware() {
        let mut g = Graph::new();
        let ps = PromptVars {
            context: Some(g.constant(mat(2, 4, 14))),
            class_tokens: g.constant(mat(3, 4, 15)),
        };
        let zero = g.constant(Tensor::zeros(&[5, 4]));
        let (seqs, _, _) = build_ctp_prompts(&mut g, ps, zero).unwrap();
        let coop = build_coop_prompts(&mut g, ps).unwrap();
        assert_eq!(values(&g, &seqs), values(&g, &coop));
        let p = g.constant(mat(5, 4, 16));
        let (_, _, regions) = build_ctp_prompts(&mut g, ps, p).unwrap();
        assert_ne!(g.value(regions).row(0), g.value(regions).row(1));
    }

    #[test]
    fn tft_examples() {
        let mut g = Graph::new();
        let pt = mat(4, 3, 17);
        let p = g.constant(pt.clone());
        let zt = g.constant(Tensor::zeros(&[2, 3]));
        let (fa, _) = tft_augment(&mut g, p, zt).unwrap();
        assert_eq!(g.value(fa), &pt);
        let one = g.constant(mat(1, 3, 18));
        let (fa, _) = tft_augment(&mut g, p, one).unwrap();
        for n in 0..4 {
            for j in 0..3 {
                let expect = pt.get(n, j) + g.value(one).get(0, j);
                assert!((g.value(fa).get(n, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mlp_ft_examples() {
        let mut g = Graph::new();
        let pt = mat(4, 8, 19);
        let p = g.constant(pt.clone());
        let text = g.constant(mat(1, 8, 20));
        let zero = MetaNet::zeros(8).register(&mut g, false);
        let out = mlp_ft_features(&mut g, p, text, &zero).unwrap();
        assert_eq!(g.value(out), &pt);
        let net = MetaNet::init(8, &mut rng_for(3, 3)).register(&mut g, false);
        let out = mlp_ft_features(&mut g, p, text, &net).unwrap();
        let t0 = g.row(text, 0).unwrap();
        let r = net.apply(&mut g, t0).unwrap();
        for n in 0..4 {
            for j in 0..8 {
                let expect = pt.get(n, j) + g.value(r).data()[j];
                assert!((g.value(out).get(n, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn clip_probability_examples() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let t = g.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap());
        let p = clip_probability(&mut g, f, t, 1.0).unwrap();
        assert!((g.value(p).data()[0] - 0.7311).abs() < 1e-4);
        assert!((g.value(p).data()[1] - 0.2689).abs() < 1e-4);
        let same = g.constant(Tensor::from_rows(&vec![vec![1.0, 2.0]; 4]).unwrap());
        let p = clip_probability(&mut g, f, same, 0.01).unwrap();
        assert!(g.value(p).data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let t3 = g.constant(mat(3, 2, 21));
        let p = clip_probability(&mut g, f, t3, 1e6).unwrap();
        assert!(g.value(p).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-4));
        assert!(matches!(clip_probability(&mut g, f, t3, 0.0), Err(PromptError::Parameter(_))));
        assert!(matches!(clip_probability(&mut g, f, t3, -1.0), Err(PromptError::Parameter(_))));
    }

    #[test]
    fn blended_probability_reductions() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::vector(mat(1, 4, 22).into_data()));
        let fa = g.constant(Tensor::vector(mat(1, 4, 23).into_data()));
        let base = g.constant(mat(3, 4, 24));
        let aug = g.constant(mat(3, 4, 25));
        let b0 = blended_probability(&mut g, f, base, fa, aug, 0.0, 0.05).unwrap();
        let c = clip_probability(&mut g, f, base, 0.05).unwrap();
        for (x, y) in g.value(b0).data().iter().zip(g.value(c).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let b1 = blended_probability(&mut g, f, base, f, base, 1.0, 0.05).unwrap();
        let half = clip_probability(&mut g, f, base, 0.025).unwrap();
        for (x, y) in g.value(b1).data().iter().zip(g.value(half).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(blended_probability(&mut g, f, base, fa, aug, -0.5, 0.05).is_err());
        assert!(blended_probability(&mut g, f, base, fa, aug, 0.2, 0.0).is_err());
    }

    #[test]
    fn forward_runs_every_preset() {
        let w = tiny();
        for (name, ..) in PRESETS {
            let spec = MethodSpec::preset(name).unwrap();
            let learn = Learnables::init(&spec, 2, 8, 4);
            let mut g = Graph::new();
            let lv = learn.register(&mut g, &spec);
            let ci = ClassInputs {
                class_tokens: g.constant(mat(3, 8, 26)),
                template: g.constant(w.template_tokens()),
            };
            let p = g.constant(mat(4, 8, 27));
            let out = forward(&mut g, &w, &spec, &lv, ci, p, None).unwrap();
            let probs = g.value(out.probs);
            assert_eq!(probs.shape(), &[3], "{name}");
            assert!((probs.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_record_shapes() {
        let w = tiny();
        let spec = MethodSpec::preset("full").unwrap();
        let learn = Learnables::init(&spec, 2, 8, 4);
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let rec = attention_record(&w, &spec, &learn, &mat(3, 8, 28), &names, &mat(4, 8, 29)).unwrap();
        assert_eq!(rec.a_t.shape(), &[3, 4]);
        assert_eq!(rec.a_x.shape(), &[4, 3]);
        let coop = MethodSpec::preset("coop").unwrap();
        let rec = attention_record(&w, &coop, &Learnables::init(&coop, 2, 8, 4), &mat(3, 8, 28), &names, &mat(4, 8, 29)).unwrap();
        assert_eq!(rec.a_t.shape(), &[3, 4]);
    }
}
