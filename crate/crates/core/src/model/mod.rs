//! The segmentation network: a shared convolutional stem, the frame
//! identification encoder, and the transcript reasoning decoder.

mod transcript;

pub use transcript::{
    decode_transcript, extract_coarse_transcript, CoarseTranscript, DecodedTranscript,
};

use crate::attention::{
    mhca, GlobalBranchConfig, LocalBranchConfig, LocalGlobalLayer, MultiHeadAttention,
};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, Linear, Norm};
use crate::rng::SplitMix64;
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Var};

/// Parameter name prefixes. The stem and identification parameters form the
/// part frozen in the second training phase.
pub const STEM_PREFIX: &str = "stem.";
pub const IDENT_PREFIX: &str = "ident.";
pub const REASON_PREFIX: &str = "reason.";

/// Which encoder tap the reasoning decoder attends to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyTap {
    /// Stem output.
    Shallow,
    /// Last encoder layer.
    Deep,
}

impl KeyTap {
    pub fn name(self) -> &'static str {
        match self {
            KeyTap::Shallow => "shallow",
            KeyTap::Deep => "deep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shallow" => Some(KeyTap::Shallow),
            "deep" => Some(KeyTap::Deep),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub patch_kernel: usize,
    pub patch_stride: usize,
    pub stem_kernel: usize,
    pub stem_dilations: Vec<usize>,
    pub num_local_global: usize,
    pub local: LocalBranchConfig,
    pub global: GlobalBranchConfig,
    pub num_classes: usize,
    /// Transcript slots including the End token.
    pub max_transcript_len: usize,
    pub num_reasoning_selfattn: usize,
    pub reasoning_head_dim: usize,
    pub reasoning_hidden: usize,
    pub reasoning_keys: KeyTap,
    pub dropout: f64,
    /// Runs shorter than this are ignored when extracting coarse transcripts; 0 disables.
    pub min_segment_frames: usize,
}

impl ModelConfig {
    /// Short-video hyperparameters with 2048-d features.
    pub fn small(num_classes: usize) -> Self {
        Self {
            feature_dim: 2048,
            embed_dim: 512,
            patch_kernel: 7,
            patch_stride: 4,
            stem_kernel: 3,
            stem_dilations: vec![1, 2, 4],
            num_local_global: 3,
            local: LocalBranchConfig::default(),
            global: GlobalBranchConfig::default(),
            num_classes,
            max_transcript_len: 50,
            num_reasoning_selfattn: 8,
            reasoning_head_dim: 128,
            reasoning_hidden: 512,
            reasoning_keys: KeyTap::Shallow,
            dropout: 0.0,
            min_segment_frames: 0,
        }
    }

    /// Long-video hyperparameters: wider local window, more transcript slots.
    pub fn long(num_classes: usize) -> Self {
        let mut c = Self::small(num_classes);
        c.local.window = 51;
        c.max_transcript_len = 100;
        c
    }

    /// A narrow network for desk-scale synthetic data.
    pub fn synthetic(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            feature_dim,
            embed_dim: 64,
            local: LocalBranchConfig {
                num_heads: 3,
                head_dim: 16,
                window: 7,
                dilations: vec![1, 2, 4],
                hidden_dim: 128,
            },
            global: GlobalBranchConfig {
                num_heads: 3,
                head_dim: 16,
                pool_rates: vec![15, 45, 90],
                hidden_dim: 128,
            },
            max_transcript_len: 24,
            reasoning_head_dim: 16,
            reasoning_hidden: 64,
            ..Self::small(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
            ("patch_kernel", self.patch_kernel),
            ("patch_stride", self.patch_stride),
            ("stem_kernel", self.stem_kernel),
            ("num_classes", self.num_classes),
            ("reasoning_head_dim", self.reasoning_head_dim),
            ("reasoning_hidden", self.reasoning_hidden),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.patch_kernel.is_multiple_of(2) || self.stem_kernel.is_multiple_of(2) {
            return Err(Error::Config("stem kernels must be odd".into()));
        }
        if self.stem_dilations.contains(&0) {
            return Err(Error::Config("stem dilations must be positive".into()));
        }
        if self.max_transcript_len < 2 {
            return Err(Error::Config(
                "max_transcript_len must leave room for End".into(),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.reasoning_head_dim) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by reasoning_head_dim {}",
                self.embed_dim, self.reasoning_head_dim
            )));
        }
        if self.global.hidden_dim != self.local.hidden_dim {
            return Err(Error::Config(
                "local and global hidden_dim must match: both size the shared feed-forward".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        self.local.validate()?;
        self.global.validate()
    }

    /// Stem output length for `frames` input frames.
    pub fn downsampled_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.patch_stride)
    }

    /// Input frames seen by one stem output frame.
    pub fn stem_receptive_field(&self) -> usize {
        let spread: usize = self
            .stem_dilations
            .iter()
            .map(|d| (self.stem_kernel - 1) * d)
            .sum();
        self.patch_kernel + self.patch_stride * spread
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    norm: Norm,
    dilation: usize,
    stride: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        dilation: usize,
        stride: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let std = (2.0 / ((kernel * c_in) + c_out) as f64).sqrt();
        Self {
            weight: store.add_normal(format!("{name}.weight"), &[kernel, c_in, c_out], std, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[c_out]),
            norm: Norm::new(store, &format!("{name}.norm"), c_out),
            dilation,
            stride,
        }
    }

    fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.conv1d_dilated(x, w, b, self.dilation, self.stride)?;
        let y = tape.gelu(y);
        self.norm.forward(tape, store, y)
    }
}

/// Post-norm self-attention block over transcript slots.
#[derive(Debug, Clone)]
struct SlotBlock {
    attn: MultiHeadAttention,
    norm1: Norm,
    ffn: FeedForward,
    norm2: Norm,
}

impl SlotBlock {
    fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let dim = cfg.embed_dim;
        Ok(Self {
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                dim,
                cfg.reasoning_head_dim,
                rng,
            )?,
            norm1: Norm::new(store, &format!("{name}.norm1"), dim),
            ffn: FeedForward::new(
                store,
                &format!("{name}.ffn"),
                dim,
                cfg.reasoning_hidden,
                rng,
            ),
            norm2: Norm::new(store, &format!("{name}.norm2"), dim),
        })
    }

    fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        queries: Var,
        keyvals: Var,
        key_mask: Option<&[bool]>,
        dropout: f64,
    ) -> Result<Var> {
        let a = mhca(tape, store, queries, keyvals, &self.attn, key_mask)?;
        let a = tape.dropout(a, dropout);
        let h = tape.add(queries, a)?;
        let h = self.norm1.forward(tape, store, h)?;
        let f = self.ffn.forward(tape, store, h)?;
        let f = tape.dropout(f, dropout);
        let h2 = tape.add(h, f)?;
        self.norm2.forward(tape, store, h2)
    }
}

/// Outputs of the identification pass.
#[derive(Debug, Clone, Copy)]
pub struct Identification {
    /// T×C frame logits at input resolution.
    pub frame_logits: Var,
    /// T'×E stem output.
    pub shallow: Var,
    /// T'×E last encoder layer output.
    pub deep: Var,
}

/// Network parameters and layout.
#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    stem: Vec<ConvLayer>,
    encoder: Vec<LocalGlobalLayer>,
    classifier: Linear,
    class_embed: ParamId,
    slot_embed: ParamId,
    cross: SlotBlock,
    slot_layers: Vec<SlotBlock>,
    transcript_head: Linear,
}

impl<F: Scalar> Model<F> {
    /// Builds a freshly initialized model; initialization is a pure function of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let mut params = ParamStore::new();
        let c = &config;
        let e = c.embed_dim;

        let mut stem = vec![ConvLayer::new(
            &mut params,
            "stem.patch",
            c.patch_kernel,
            c.feature_dim,
            e,
            1,
            c.patch_stride,
            &mut rng,
        )];
        for (i, &d) in c.stem_dilations.iter().enumerate() {
            stem.push(ConvLayer::new(
                &mut params,
                &format!("stem.conv{i}"),
                c.stem_kernel,
                e,
                e,
                d,
                1,
                &mut rng,
            ));
        }

        let encoder = (0..c.num_local_global)
            .map(|i| {
                LocalGlobalLayer::new(
                    &mut params,
                    &format!("ident.layer{i}"),
                    e,
                    &c.local,
                    &c.global,
                    c.dropout,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let classifier = Linear::new(&mut params, "ident.classifier", e, c.num_classes, &mut rng);

        let class_embed =
            params.add_normal("reason.class_embed", &[c.num_classes + 2, e], 1.0, &mut rng);
        let slot_embed = params.add_normal(
            "reason.slot_embed",
            &[c.max_transcript_len, e],
            1.0,
            &mut rng,
        );
        let cross = SlotBlock::new(&mut params, "reason.cross", c, &mut rng)?;
        let slot_layers = (0..c.num_reasoning_selfattn)
            .map(|i| SlotBlock::new(&mut params, &format!("reason.self{i}"), c, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let transcript_head =
            Linear::new(&mut params, "reason.head", e, c.num_classes + 1, &mut rng);

        Ok(Self {
            config,
            params,
            stem,
            encoder,
            classifier,
            class_embed,
            slot_embed,
            cross,
            slot_layers,
            transcript_head,
        })
    }

    /// Freezes (or unfreezes) the stem and identification parameters.
    pub fn freeze_identification(&mut self, frozen: bool) {
        self.params.freeze_prefix(STEM_PREFIX, frozen);
        self.params.freeze_prefix(IDENT_PREFIX, frozen);
    }

    /// T×d features → T'×E embeddings.
    pub fn conv_stem(&self, tape: &mut Tape<F>, features: Var) -> Result<Var> {
        let (frames, dim) = tape.value(features).require_2d("conv_stem")?;
        if dim != self.config.feature_dim {
            return Err(Error::shape(
                "conv_stem",
                tape.shape(features),
                &[frames, self.config.feature_dim],
            ));
        }
        if frames < self.config.patch_kernel {
            return Err(Error::InputTooShort {
                len: frames,
                min: self.config.patch_kernel,
            });
        }
        let mut x = features;
        for layer in &self.stem {
            x = layer.forward(tape, &self.params, x)?;
        }
        Ok(x)
    }

    /// Encoder and frame classifier. Logits are computed at T' and
    /// nearest-neighbour upsampled to `frames`.
    pub fn identify(
        &self,
        tape: &mut Tape<F>,
        shallow: Var,
        frames: usize,
    ) -> Result<Identification> {
        let mut deep = shallow;
        for layer in &self.encoder {
            deep = layer.forward(tape, &self.params, deep)?;
        }
        let coarse = self.classifier.forward(tape, &self.params, deep)?;
        let frame_logits = tape.nn_upsample1d(coarse, frames)?;
        Ok(Identification {
            frame_logits,
            shallow,
            deep,
        })
    }

    /// Stem followed by identification.
    pub fn forward_identification(
        &self,
        tape: &mut Tape<F>,
        features: Var,
    ) -> Result<Identification> {
        let frames = tape.value(features).rows();
        let shallow = self.conv_stem(tape, features)?;
        self.identify(tape, shallow, frames)
    }

    /// Transcript decoder: `max_len × (C + 1)` slot logits.
    ///
    /// `keys` is the encoder tap (T'×E); `key_mask` flags padded key frames.
    pub fn reason(
        &self,
        tape: &mut Tape<F>,
        keys: Var,
        query: &CoarseTranscript,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let c = &self.config;
        if query.max_len() != c.max_transcript_len {
            return Err(Error::TranscriptTooLong {
                len: query.max_len(),
                max: c.max_transcript_len,
            });
        }
        if query.end_id() != c.num_classes {
            return Err(Error::Incompatible(format!(
                "transcript built for {} classes, model has {}",
                query.end_id(),
                c.num_classes
            )));
        }
        let table = tape.param(&self.params, self.class_embed);
        let tokens = tape.embedding(table, &query.padded())?;
        let slots = tape.param(&self.params, self.slot_embed);
        let q = tape.add(tokens, slots)?;
        let mut h = self
            .cross
            .forward(tape, &self.params, q, keys, key_mask, c.dropout)?;
        let pad = query.pad_mask();
        for layer in &self.slot_layers {
            h = layer.forward(tape, &self.params, h, h, Some(&pad), c.dropout)?;
        }
        self.transcript_head.forward(tape, &self.params, h)
    }

    /// The encoder tap selected by the configuration.
    pub fn reasoning_keys(&self, ident: &Identification) -> Var {
        match self.config.reasoning_keys {
            KeyTap::Shallow => ident.shallow,
            KeyTap::Deep => ident.deep,
        }
    }

    /// Coarse transcript from frame logits under this model's settings.
    pub fn coarse_transcript(&self, frame_logits: &crate::Tensor<F>) -> Result<CoarseTranscript> {
        extract_coarse_transcript(
            frame_logits,
            self.config.max_transcript_len,
            self.config.min_segment_frames,
        )
    }
}
