use super::ModelConfig;
use crate::error::{contract, Result};
use crate::numerics::{matmul, Mat, Rng, Scalar};
use crate::schedule::MergeSchedule;

/// Frozen parameters of one pre-norm transformer layer.
///
/// Projections act on row vectors: `q = x · wq + bq`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T = f32> {
    pub ln1_gamma: Vec<T>,
    pub ln1_beta: Vec<T>,
    pub wq: Mat<T>,
    pub bq: Vec<T>,
    pub wk: Mat<T>,
    pub bk: Vec<T>,
    pub wv: Mat<T>,
    pub bv: Vec<T>,
    pub wo: Mat<T>,
    pub bo: Vec<T>,
    pub ln2_gamma: Vec<T>,
    pub ln2_beta: Vec<T>,
    pub w1: Mat<T>,
    pub b1: Vec<T>,
    pub w2: Mat<T>,
    pub b2: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TowerWeights<T = f32> {
    pub layers: Vec<LayerWeights<T>>,
    pub ln_post_gamma: Vec<T>,
    pub ln_post_beta: Vec<T>,
    /// `width x embed_dim` projection into the joint space.
    pub proj: Mat<T>,
}

/// Both encoders' frozen backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T = f32> {
    pub config: ModelConfig,
    /// `patch_dim x width`, no bias.
    pub patch_proj: Mat<T>,
    pub cls_embed: Vec<T>,
    /// `tokens_per_frame x width`; row 0 belongs to the CLS token.
    pub pos_embed: Mat<T>,
    pub vision: TowerWeights<T>,
    /// `text_vocab_size x width`.
    pub token_embed: Mat<T>,
    /// `text_max_len x width`.
    pub text_pos: Mat<T>,
    pub text: TowerWeights<T>,
}

/// A named tensor view used for serialisation and flattening.
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct TensorMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

const BIAS_STD: f64 = 0.02;
const EMBED_STD: f64 = 0.1;

impl<T: Scalar> LayerWeights<T> {
    fn init(width: usize, ffn: usize, rng: &mut Rng) -> Self {
        let d_std = 1.0 / (width as f64).sqrt();
        let f_std = 1.0 / (ffn as f64).sqrt();
        let bias =
            |n: usize, rng: &mut Rng| -> Vec<T> { (0..n).map(|_| T::from_f64(BIAS_STD * rng.normal())).collect() };
        Self {
            ln1_gamma: vec![T::one(); width],
            ln1_beta: vec![T::zero(); width],
            wq: Mat::randn(width, width, d_std, rng),
            bq: bias(width, rng),
            wk: Mat::randn(width, width, d_std, rng),
            bk: bias(width, rng),
            wv: Mat::randn(width, width, d_std, rng),
            bv: bias(width, rng),
            wo: Mat::randn(width, width, d_std, rng),
            bo: bias(width, rng),
            ln2_gamma: vec![T::one(); width],
            ln2_beta: vec![T::zero(); width],
            w1: Mat::randn(width, ffn, d_std, rng),
            b1: bias(ffn, rng),
            w2: Mat::randn(ffn, width, f_std, rng),
            b2: bias(width, rng),
        }
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        let mut push = |name: &str, shape: Vec<usize>, data: &'a [T]| {
            out.push(TensorRef { name: format!("{prefix}.{name}"), shape, data })
        };
        push("ln1.gamma", vec![self.ln1_gamma.len()], &self.ln1_gamma);
        push("ln1.beta", vec![self.ln1_beta.len()], &self.ln1_beta);
        for (name, w, b) in
            [("q", &self.wq, &self.bq), ("k", &self.wk, &self.bk), ("v", &self.wv, &self.bv), ("o", &self.wo, &self.bo)]
        {
            push(&format!("attn.{name}.weight"), vec![w.rows(), w.cols()], w.data());
            push(&format!("attn.{name}.bias"), vec![b.len()], b);
        }
        push("ln2.gamma", vec![self.ln2_gamma.len()], &self.ln2_gamma);
        push("ln2.beta", vec![self.ln2_beta.len()], &self.ln2_beta);
        push("ffn.fc1.weight", vec![self.w1.rows(), self.w1.cols()], self.w1.data());
        push("ffn.fc1.bias", vec![self.b1.len()], &self.b1);
        push("ffn.fc2.weight", vec![self.w2.rows(), self.w2.cols()], self.w2.data());
        push("ffn.fc2.bias", vec![self.b2.len()], &self.b2);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        let mut push = |name: &str, shape: Vec<usize>, data: &'a mut [T]| {
            out.push(TensorMut { name: format!("{prefix}.{name}"), shape, data })
        };
        push("ln1.gamma", vec![self.ln1_gamma.len()], &mut self.ln1_gamma);
        push("ln1.beta", vec![self.ln1_beta.len()], &mut self.ln1_beta);
        for (name, w, b) in [
            ("q", &mut self.wq, &mut self.bq),
            ("k", &mut self.wk, &mut self.bk),
            ("v", &mut self.wv, &mut self.bv),
            ("o", &mut self.wo, &mut self.bo),
        ] {
            let shape = vec![w.rows(), w.cols()];
            push(&format!("attn.{name}.weight"), shape, w.data_mut());
            push(&format!("attn.{name}.bias"), vec![b.len()], b);
        }
        push("ln2.gamma", vec![self.ln2_gamma.len()], &mut self.ln2_gamma);
        push("ln2.beta", vec![self.ln2_beta.len()], &mut self.ln2_beta);
        let shape = vec![self.w1.rows(), self.w1.cols()];
        push("ffn.fc1.weight", shape, self.w1.data_mut());
        push("ffn.fc1.bias", vec![self.b1.len()], &mut self.b1);
        let shape = vec![self.w2.rows(), self.w2.cols()];
        push("ffn.fc2.weight", shape, self.w2.data_mut());
        push("ffn.fc2.bias", vec![self.b2.len()], &mut self.b2);
    }
}

impl<T: Scalar> TowerWeights<T> {
    fn init(layers: usize, width: usize, ffn: usize, embed: usize, rng: &mut Rng) -> Self {
        Self {
            layers: (0..layers).map(|_| LayerWeights::init(width, ffn, rng)).collect(),
            ln_post_gamma: vec![T::one(); width],
            ln_post_beta: vec![T::zero(); width],
            proj: Mat::randn(width, embed, 1.0 / (width as f64).sqrt(), rng),
        }
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.tensors(&format!("{prefix}.layers.{i}"), out);
        }
        let w = self.ln_post_gamma.len();
        out.push(TensorRef { name: format!("{prefix}.ln_post.gamma"), shape: vec![w], data: &self.ln_post_gamma });
        out.push(TensorRef { name: format!("{prefix}.ln_post.beta"), shape: vec![w], data: &self.ln_post_beta });
        out.push(TensorRef {
            name: format!("{prefix}.proj"),
            shape: vec![self.proj.rows(), self.proj.cols()],
            data: self.proj.data(),
        });
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.tensors_mut(&format!("{prefix}.layers.{i}"), out);
        }
        let w = self.ln_post_gamma.len();
        out.push(TensorMut { name: format!("{prefix}.ln_post.gamma"), shape: vec![w], data: &mut self.ln_post_gamma });
        out.push(TensorMut { name: format!("{prefix}.ln_post.beta"), shape: vec![w], data: &mut self.ln_post_beta });
        let shape = vec![self.proj.rows(), self.proj.cols()];
        out.push(TensorMut { name: format!("{prefix}.proj"), shape, data: self.proj.data_mut() });
    }
}

impl<T: Scalar> EncoderWeights<T> {
    /// Seeded Gaussian backbone. Matrices use standard deviation
    /// `1/sqrt(fan_in)`, norms start at identity.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.width;
        let mut rng = Rng::fork(seed, 1);
        let patch_proj = Mat::randn(c.patch_dim, d, 1.0 / (c.patch_dim as f64).sqrt(), &mut rng);
        let cls_embed = (0..d).map(|_| T::from_f64(rng.normal() / (d as f64).sqrt())).collect();
        let pos_embed = Mat::randn(c.tokens_per_frame(), d, EMBED_STD, &mut rng);
        let vision = TowerWeights::init(c.num_layers, d, c.ffn_dim, c.embed_dim, &mut rng);
        let mut rng = Rng::fork(seed, 2);
        let token_embed = Mat::randn(c.text_vocab_size, d, 1.0, &mut rng);
        let text_pos = Mat::randn(c.text_max_len, d, EMBED_STD, &mut rng);
        let text = TowerWeights::init(c.text_layers, d, c.ffn_dim, c.embed_dim, &mut rng);
        Ok(Self { config: c.clone(), patch_proj, cls_embed, pos_embed, vision, token_embed, text_pos, text })
    }

    /// Every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        out.push(TensorRef {
            name: "vision.patch_proj".into(),
            shape: vec![self.patch_proj.rows(), self.patch_proj.cols()],
            data: self.patch_proj.data(),
        });
        out.push(TensorRef { name: "vision.cls".into(), shape: vec![self.cls_embed.len()], data: &self.cls_embed });
        out.push(TensorRef {
            name: "vision.pos".into(),
            shape: vec![self.pos_embed.rows(), self.pos_embed.cols()],
            data: self.pos_embed.data(),
        });
        self.vision.tensors("vision", &mut out);
        out.push(TensorRef {
            name: "text.token_embed".into(),
            shape: vec![self.token_embed.rows(), self.token_embed.cols()],
            data: self.token_embed.data(),
        });
        out.push(TensorRef {
            name: "text.pos".into(),
            shape: vec![self.text_pos.rows(), self.text_pos.cols()],
            data: self.text_pos.data(),
        });
        self.text.tensors("text", &mut out);
        out
    }

    /// Same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = Vec::new();
        let shape = vec![self.patch_proj.rows(), self.patch_proj.cols()];
        out.push(TensorMut { name: "vision.patch_proj".into(), shape, data: self.patch_proj.data_mut() });
        let shape = vec![self.cls_embed.len()];
        out.push(TensorMut { name: "vision.cls".into(), shape, data: &mut self.cls_embed });
        let shape = vec![self.pos_embed.rows(), self.pos_embed.cols()];
        out.push(TensorMut { name: "vision.pos".into(), shape, data: self.pos_embed.data_mut() });
        self.vision.tensors_mut("vision", &mut out);
        let shape = vec![self.token_embed.rows(), self.token_embed.cols()];
        out.push(TensorMut { name: "text.token_embed".into(), shape, data: self.token_embed.data_mut() });
        let shape = vec![self.text_pos.rows(), self.text_pos.cols()];
        out.push(TensorMut { name: "text.pos".into(), shape, data: self.text_pos.data_mut() });
        self.text.tensors_mut("text", &mut out);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> EncoderWeights<U> {
        let cast_v = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect::<Vec<U>>();
        let cast_layer = |l: &LayerWeights<T>| LayerWeights {
            ln1_gamma: cast_v(&l.ln1_gamma),
            ln1_beta: cast_v(&l.ln1_beta),
            wq: l.wq.cast(),
            bq: cast_v(&l.bq),
            wk: l.wk.cast(),
            bk: cast_v(&l.bk),
            wv: l.wv.cast(),
            bv: cast_v(&l.bv),
            wo: l.wo.cast(),
            bo: cast_v(&l.bo),
            ln2_gamma: cast_v(&l.ln2_gamma),
            ln2_beta: cast_v(&l.ln2_beta),
            w1: l.w1.cast(),
            b1: cast_v(&l.b1),
            w2: l.w2.cast(),
            b2: cast_v(&l.b2),
        };
        let cast_tower = |t: &TowerWeights<T>| TowerWeights {
            layers: t.layers.iter().map(cast_layer).collect(),
            ln_post_gamma: cast_v(&t.ln_post_gamma),
            ln_post_beta: cast_v(&t.ln_post_beta),
            proj: t.proj.cast(),
        };
        EncoderWeights {
            config: self.config.clone(),
            patch_proj: self.patch_proj.cast(),
            cls_embed: cast_v(&self.cls_embed),
            pos_embed: self.pos_embed.cast(),
            vision: cast_tower(&self.vision),
            token_embed: self.token_embed.cast(),
            text_pos: self.text_pos.cast(),
            text: cast_tower(&self.text),
        }
    }
}

/// Low-rank delta `alpha * down · up` on one projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T = f32> {
    /// `width x rank`.
    pub down: Mat<T>,
    /// `rank x width`.
    pub up: Mat<T>,
}

/// Adapters on the query, key and value projections of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerLora<T = f32> {
    pub q: LoraAdapter<T>,
    pub k: LoraAdapter<T>,
    pub v: LoraAdapter<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraParams<T = f32> {
    pub rank: usize,
    pub alpha: f64,
    pub vision: Vec<LayerLora<T>>,
    pub text: Vec<LayerLora<T>>,
}

impl<T: Scalar> LoraAdapter<T> {
    fn zeros(width: usize, rank: usize) -> Self {
        Self { down: Mat::zeros(width, rank), up: Mat::zeros(rank, width) }
    }

    /// `alpha * down · up` accumulated in `f64`.
    pub fn delta(&self, alpha: f64) -> Mat<T> {
        let down: Mat<f64> = self.down.cast();
        let up: Mat<f64> = self.up.cast();
        matmul(&down, &up).expect("adapter shapes checked at construction").scale(alpha).cast()
    }
}

impl<T: Scalar> LayerLora<T> {
    pub fn adapters(&self) -> [&LoraAdapter<T>; 3] {
        [&self.q, &self.k, &self.v]
    }

    pub fn adapters_mut(&mut self) -> [&mut LoraAdapter<T>; 3] {
        [&mut self.q, &mut self.k, &mut self.v]
    }
}

impl<T: Scalar> LoraParams<T> {
    /// All-zero adapters of the configured rank.
    pub fn zeros(config: &ModelConfig) -> Self {
        let layer = || LayerLora {
            q: LoraAdapter::zeros(config.width, config.lora_rank),
            k: LoraAdapter::zeros(config.width, config.lora_rank),
            v: LoraAdapter::zeros(config.width, config.lora_rank),
        };
        Self {
            rank: config.lora_rank,
            alpha: config.lora_alpha,
            vision: (0..config.num_layers).map(|_| layer()).collect(),
            text: (0..config.text_layers).map(|_| layer()).collect(),
        }
    }

    /// Training start point: Gaussian `down`, zero `up`, so the delta is
    /// exactly zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        Self::random(config, seed, 0.0)
    }

    /// Gaussian `down` (std `1/sqrt(width)`) and Gaussian `up` with
    /// standard deviation `up_std`.
    pub fn random(config: &ModelConfig, seed: u64, up_std: f64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = Rng::fork(seed, 3);
        let d_std = 1.0 / (config.width as f64).sqrt();
        for layer in p.vision.iter_mut().chain(p.text.iter_mut()) {
            for a in layer.adapters_mut() {
                a.down = Mat::randn(a.down.rows(), a.down.cols(), d_std, &mut rng);
                a.up = Mat::randn(a.up.rows(), a.up.cols(), up_std, &mut rng);
            }
        }
        p
    }

    pub fn is_zero_delta(&self) -> bool {
        self.vision
            .iter()
            .chain(&self.text)
            .flat_map(|l| l.adapters())
            .all(|a| a.up.data().iter().all(|v| *v == T::zero()) || a.down.data().iter().all(|v| *v == T::zero()))
    }

    pub fn cast<U: Scalar>(&self) -> LoraParams<U> {
        let cast_layer = |l: &LayerLora<T>| LayerLora {
            q: LoraAdapter { down: l.q.down.cast(), up: l.q.up.cast() },
            k: LoraAdapter { down: l.k.down.cast(), up: l.k.up.cast() },
            v: LoraAdapter { down: l.v.down.cast(), up: l.v.up.cast() },
        };
        LoraParams {
            rank: self.rank,
            alpha: self.alpha,
            vision: self.vision.iter().map(cast_layer).collect(),
            text: self.text.iter().map(cast_layer).collect(),
        }
    }

    fn check(&self, weights: &EncoderWeights<T>) -> Result<()> {
        let d = weights.config.width;
        if self.vision.len() != weights.vision.layers.len() || self.text.len() != weights.text.layers.len() {
            return contract("lora", "adapter layer count does not match the backbone");
        }
        let ok = self
            .vision
            .iter()
            .chain(&self.text)
            .flat_map(|l| l.adapters())
            .all(|a| a.down.shape() == (d, self.rank) && a.up.shape() == (self.rank, d));
        if !ok {
            return contract("lora", format!("adapters must be {d}x{r} and {r}x{d}", r = self.rank));
        }
        Ok(())
    }
}

/// Folds `alpha * down · up` into the query, key and value projections.
///
/// Consumes the adapters: the returned backbone already contains them, so
/// it must be run without LoRA.
pub fn lora_merge<T: Scalar>(weights: &EncoderWeights<T>, lora: LoraParams<T>) -> Result<EncoderWeights<T>> {
    lora.check(weights)?;
    let mut out = weights.clone();
    let towers = [(&mut out.vision, &lora.vision), (&mut out.text, &lora.text)];
    for (tower, adapters) in towers {
        for (lw, ll) in tower.layers.iter_mut().zip(adapters) {
            for (w, a) in [(&mut lw.wq, &ll.q), (&mut lw.wk, &ll.k), (&mut lw.wv, &ll.v)] {
                let merged: Mat<f64> = w.cast::<f64>().add(&a.delta(lora.alpha).cast())?;
                *w = merged.cast();
            }
        }
    }
    Ok(out)
}

/// One `group x width` table per fusion step; row `j` is added to every
/// token of the `j`-th clip in each group before cross-clip matching.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPositionalEmbeddings<T = f32> {
    pub steps: Vec<Mat<T>>,
}

impl<T: Scalar> ClipPositionalEmbeddings<T> {
    pub fn zeros(sched: &MergeSchedule, width: usize) -> Self {
        Self { steps: sched.step_groups().into_iter().map(|g| Mat::zeros(g, width)).collect() }
    }

    pub fn random(sched: &MergeSchedule, width: usize, std: f64, seed: u64) -> Self {
        let mut rng = Rng::fork(seed, 4);
        Self { steps: sched.step_groups().into_iter().map(|g| Mat::randn(g, width, std, &mut rng)).collect() }
    }

    pub fn param_count(&self) -> usize {
        self.steps.iter().map(|m| m.data().len()).sum()
    }

    /// Checks one table per step with one row per clip slot.
    pub fn validate_for(&self, sched: &MergeSchedule, width: usize) -> Result<()> {
        let groups = sched.step_groups();
        if groups.len() != self.steps.len() {
            return contract(
                "clipme_block",
                format!("{} positional tables for {} fusion steps", self.steps.len(), groups.len()),
            );
        }
        for (i, (g, m)) in groups.iter().zip(&self.steps).enumerate() {
            if m.shape() != (*g, width) {
                return contract(
                    "clipme_block",
                    format!("step {i}: table is {:?}, group size {g} needs ({g}, {width})", m.shape()),
                );
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ClipPositionalEmbeddings<U> {
        ClipPositionalEmbeddings { steps: self.steps.iter().map(|m| m.cast()).collect() }
    }
}

/// Everything training may change: LoRA for both towers plus the clip
/// positional embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainable<T = f32> {
    pub lora: LoraParams<T>,
    pub cpe: ClipPositionalEmbeddings<T>,
}

impl<T: Scalar> Trainable<T> {
    pub fn init(config: &ModelConfig, sched: &MergeSchedule, seed: u64) -> Self {
        Self { lora: LoraParams::init(config, seed), cpe: ClipPositionalEmbeddings::zeros(sched, config.width) }
    }

    /// Same shapes, all zeros (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|v| v.iter_mut().for_each(|x| *x = T::zero()));
        z
    }

    fn for_each<'a>(&'a self, mut f: impl FnMut(&'a [T])) {
        for l in self.lora.vision.iter().chain(&self.lora.text) {
            for a in l.adapters() {
                f(a.down.data());
                f(a.up.data());
            }
        }
        for m in &self.cpe.steps {
            f(m.data());
        }
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut [T])) {
        for l in self.lora.vision.iter_mut().chain(self.lora.text.iter_mut()) {
            for a in l.adapters_mut() {
                f(a.down.data_mut());
                f(a.up.data_mut());
            }
        }
        for m in &mut self.cpe.steps {
            f(m.data_mut());
        }
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        self.for_each(|v| n += v.len());
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Vision adapters, text adapters (each `q`, `k`, `v` as down then
    /// up), then the positional tables.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.len());
        self.for_each(|v| out.extend_from_slice(v));
        out
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.len() {
            return contract("Trainable::set_flat", format!("{} values for {} parameters", flat.len(), self.len()));
        }
        let mut at = 0;
        self.for_each_mut(|v| {
            v.copy_from_slice(&flat[at..at + v.len()]);
            at += v.len();
        });
        Ok(())
    }

    /// Index range of the clip positional tables in the flat layout.
    pub fn cpe_range(&self) -> std::ops::Range<usize> {
        let n = self.len();
        n - self.cpe.param_count()..n
    }

    pub fn cast<U: Scalar>(&self) -> Trainable<U> {
        Trainable { lora: self.lora.cast(), cpe: self.cpe.cast() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Preset;
    use crate::schedule::parse_schedule;

    #[test]
    fn init_is_deterministic_and_finite() {
        let cfg = Preset::Micro.config();
        let a = EncoderWeights::<f32>::init(&cfg, 5).unwrap();
        let b = EncoderWeights::<f32>::init(&cfg, 5).unwrap();
        let c = EncoderWeights::<f32>::init(&cfg, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.is_finite());
        let names: Vec<_> = a.tensors().into_iter().map(|t| t.name).collect();
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert_eq!(a.tensors().len(), a.clone().tensors_mut().len());
    }

    #[test]
    fn zero_delta_merge_is_identity() {
        let cfg = Preset::Micro.config();
        let w = EncoderWeights::<f32>::init(&cfg, 1).unwrap();
        let lora = LoraParams::init(&cfg, 2);
        assert!(lora.is_zero_delta());
        assert_eq!(lora_merge(&w, lora).unwrap(), w);
    }

    #[test]
    fn merge_adds_low_rank_delta() {
        let cfg = Preset::Micro.config();
        let w = EncoderWeights::<f64>::init(&cfg, 1).unwrap();
        let lora = LoraParams::<f64>::random(&cfg, 2, 0.1);
        let delta = lora.vision[1].k.delta(lora.alpha);
        let merged = lora_merge(&w, lora).unwrap();
        let diff = merged.vision.layers[1].wk.add(&w.vision.layers[1].wk.scale(-1.0)).unwrap();
        assert!(crate::numerics::max_relative_diff(diff.data(), delta.data()) < 1e-12);
        assert_eq!(merged.vision.layers[1].wo, w.vision.layers[1].wo);
    }

    #[test]
    fn lora_shape_mismatch_rejected() {
        let cfg = Preset::Micro.config();
        let w = EncoderWeights::<f32>::init(&cfg, 1).unwrap();
        let mut lora = LoraParams::init(&cfg, 2);
        lora.text.pop();
        assert!(lora_merge(&w, lora).is_err());
    }

    #[test]
    fn trainable_flat_round_trip() {
        let cfg = Preset::Micro.config();
        let sched = parse_schedule(Preset::Micro.default_schedule()).unwrap();
        let mut t = Trainable::<f64>::init(&cfg, &sched, 3);
        let n = t.len();
        // 2 towers x 2 layers x 3 adapters x (16x4 + 4x16), plus one 4x16 table
        assert_eq!(n, 2 * 2 * 3 * 128 + 4 * 16);
        assert_eq!(t.cpe_range(), n - 64..n);
        let flat: Vec<f64> = (0..n).map(|i| i as f64).collect();
        t.set_flat(&flat).unwrap();
        assert_eq!(t.to_flat(), flat);
        assert!(t.set_flat(&flat[1..]).is_err());
        assert!(t.zeros_like().to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cpe_shapes_follow_schedule() {
        let sched = parse_schedule("12@9:6@10:3@11:1").unwrap();
        let cpe = ClipPositionalEmbeddings::<f32>::zeros(&sched, 8);
        let shapes: Vec<_> = cpe.steps.iter().map(|m| m.shape()).collect();
        assert_eq!(shapes, vec![(2, 8), (2, 8), (3, 8)]);
        cpe.validate_for(&sched, 8).unwrap();
        let other = parse_schedule("12@9:4@10:1").unwrap();
        assert!(cpe.validate_for(&other, 8).is_err());
    }
}
