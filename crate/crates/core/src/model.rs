//! The audio, video and text projection networks and the shared decoder.
//!
//! `F_A`, `F_V` and `F_DEC` are two fully connected layers with a ReLU in
//! between; `F_T` is a single affine layer. Output layers are linear so that
//! embeddings and reconstructions can take negative values.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{self, DenseMatrix, LayerId, LayerParams, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {section}")]
    Truncated { section: &'static str },
    #[error("checkpoint shape inconsistency: {0}")]
    ShapeInconsistent(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ArchitectureSpec {
    pub dim_audio_in: usize,
    pub dim_video_in: usize,
    pub dim_text_in: usize,
    pub embed_dim: usize,
    pub decoder_out_dim: usize,
    pub hidden_audio: usize,
    pub hidden_video: usize,
    pub hidden_decoder: usize,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        Self {
            dim_audio_in: 1024,
            dim_video_in: 1024,
            dim_text_in: 300,
            embed_dim: 64,
            decoder_out_dim: 300,
            hidden_audio: 512,
            hidden_video: 512,
            hidden_decoder: 128,
        }
    }
}

impl ArchitectureSpec {
    /// Architecture for the given feature dims with default embedding and
    /// hidden widths.
    pub fn for_features(dim_audio_in: usize, dim_video_in: usize, dim_text_in: usize) -> Self {
        Self {
            dim_audio_in,
            dim_video_in,
            dim_text_in,
            decoder_out_dim: dim_text_in,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.as_array();
        if dims.iter().any(|&d| d == 0) {
            return Err(ModelError::InvalidArch(format!(
                "all dims must be >= 1, got {self:?}"
            )));
        }
        if self.decoder_out_dim != self.dim_text_in {
            return Err(ModelError::InvalidArch(format!(
                "decoder_out_dim ({}) must equal dim_text_in ({})",
                self.decoder_out_dim, self.dim_text_in
            )));
        }
        Ok(())
    }

    /// Dims in declaration order.
    pub fn as_array(&self) -> [usize; 8] {
        [
            self.dim_audio_in,
            self.dim_video_in,
            self.dim_text_in,
            self.embed_dim,
            self.decoder_out_dim,
            self.hidden_audio,
            self.hidden_video,
            self.hidden_decoder,
        ]
    }

    pub fn from_array(d: [usize; 8]) -> Self {
        Self {
            dim_audio_in: d[0],
            dim_video_in: d[1],
            dim_text_in: d[2],
            embed_dim: d[3],
            decoder_out_dim: d[4],
            hidden_audio: d[5],
            hidden_video: d[6],
            hidden_decoder: d[7],
        }
    }

    /// `(in_dim, out_dim)` of every layer in [`ModelParams::layers`] order.
    pub fn layer_shapes(&self) -> [(usize, usize); 7] {
        [
            (self.dim_audio_in, self.hidden_audio),
            (self.hidden_audio, self.embed_dim),
            (self.dim_video_in, self.hidden_video),
            (self.hidden_video, self.embed_dim),
            (self.dim_text_in, self.embed_dim),
            (self.embed_dim, self.hidden_decoder),
            (self.hidden_decoder, self.decoder_out_dim),
        ]
    }
}

/// Index of each network's layers within [`ModelParams::layers`].
pub mod layer_index {
    pub const AUDIO: [usize; 2] = [0, 1];
    pub const VIDEO: [usize; 2] = [2, 3];
    pub const TEXT: usize = 4;
    pub const DECODER: [usize; 2] = [5, 6];
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchitectureSpec,
    pub f_a: [LayerParams; 2],
    pub f_v: [LayerParams; 2],
    pub f_t: LayerParams,
    pub f_dec: [LayerParams; 2],
}

impl ModelParams {
    pub fn zeros(arch: ArchitectureSpec) -> Result<Self> {
        arch.validate()?;
        let [a1, a2, v1, v2, t, d1, d2] = arch.layer_shapes().map(|(i, o)| LayerParams::zeros(i, o));
        Ok(Self {
            arch,
            f_a: [a1, a2],
            f_v: [v1, v2],
            f_t: t,
            f_dec: [d1, d2],
        })
    }

    /// Assembles parameters from layers in [`ModelParams::layers`] order,
    /// checking every shape against `arch`.
    pub fn from_layers(arch: ArchitectureSpec, layers: Vec<LayerParams>) -> Result<Self> {
        arch.validate()?;
        if layers.len() != 7 {
            return Err(ModelError::ShapeInconsistent(format!(
                "expected 7 layers, got {}",
                layers.len()
            )));
        }
        for (i, ((din, dout), l)) in arch.layer_shapes().iter().zip(&layers).enumerate() {
            if l.in_dim() != *din || l.out_dim() != *dout || l.bias.len() != *dout {
                return Err(ModelError::ShapeInconsistent(format!(
                    "layer {i}: expected {dout}x{din}, got {}x{}",
                    l.out_dim(),
                    l.in_dim()
                )));
            }
        }
        let [a1, a2, v1, v2, t, d1, d2]: [LayerParams; 7] =
            layers.try_into().expect("length checked above");
        Ok(Self {
            arch,
            f_a: [a1, a2],
            f_v: [v1, v2],
            f_t: t,
            f_dec: [d1, d2],
        })
    }

    /// Layers in the fixed order `f_a1, f_a2, f_v1, f_v2, f_t1, f_dec1, f_dec2`.
    pub fn layers(&self) -> [&LayerParams; 7] {
        [
            &self.f_a[0],
            &self.f_a[1],
            &self.f_v[0],
            &self.f_v[1],
            &self.f_t,
            &self.f_dec[0],
            &self.f_dec[1],
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut LayerParams; 7] {
        let [a1, a2] = &mut self.f_a;
        let [v1, v2] = &mut self.f_v;
        let [d1, d2] = &mut self.f_dec;
        [a1, a2, v1, v2, &mut self.f_t, d1, d2]
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.num_params()).sum()
    }

    /// All parameters flattened layer by layer, weight before bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`ModelParams::to_flat`].
    pub fn from_flat(arch: ArchitectureSpec, flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        if flat.len() != params.num_params() {
            return Err(ModelError::ShapeInconsistent(format!(
                "expected {} parameters, got {}",
                params.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in params.layers_mut() {
            let n = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            let m = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + m]);
            off += m;
        }
        Ok(params)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self
                .layers()
                .iter()
                .zip(other.layers())
                .all(|(a, b)| a.bit_eq(b))
    }

    pub fn embed_audio(&self, x_a: &[f64]) -> Result<Vec<f64>> {
        check_len("embed_audio", self.arch.dim_audio_in, x_a.len())?;
        Ok(self.embed_audio_batch(&DenseMatrix::row_vector(x_a)?)?.into_vec())
    }

    pub fn embed_video(&self, x_v: &[f64]) -> Result<Vec<f64>> {
        check_len("embed_video", self.arch.dim_video_in, x_v.len())?;
        Ok(self.embed_video_batch(&DenseMatrix::row_vector(x_v)?)?.into_vec())
    }

    pub fn embed_text(&self, x_t: &[f64]) -> Result<Vec<f64>> {
        check_len("embed_text", self.arch.dim_text_in, x_t.len())?;
        Ok(tensor::affine(&self.f_t, x_t)?)
    }

    pub fn decode(&self, e: &[f64]) -> Result<Vec<f64>> {
        check_len("decode", self.arch.embed_dim, e.len())?;
        Ok(self.decode_batch(&DenseMatrix::row_vector(e)?)?.into_vec())
    }

    /// Row-wise `F_A` over a `batch x dim_audio_in` matrix.
    pub fn embed_audio_batch(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        two_layer(&self.f_a, x)
    }

    pub fn embed_video_batch(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        two_layer(&self.f_v, x)
    }

    pub fn embed_text_batch(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.f_t.forward(x)?)
    }

    pub fn decode_batch(&self, e: &DenseMatrix) -> Result<DenseMatrix> {
        two_layer(&self.f_dec, e)
    }
}

fn check_len(op: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(TensorError::DimMismatch {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
        .into());
    }
    Ok(())
}

fn two_layer(layers: &[LayerParams; 2], x: &DenseMatrix) -> Result<DenseMatrix> {
    let h = tensor::relu(&layers[0].forward(x)?);
    Ok(layers[1].forward(&h)?)
}

/// Fan-based uniform initialisation: weights in `±sqrt(6 / (fan_in + fan_out))`,
/// zero biases.
pub fn init_params(arch: ArchitectureSpec, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in params.layers_mut() {
        let limit = (6.0 / (layer.in_dim() + layer.out_dim()) as f64).sqrt();
        for w in layer.weight.data_mut() {
            *w = rng.random_range(-limit..limit);
        }
    }
    Ok(params)
}

/// A tape with all seven layers of a model registered, plus helpers that
/// record each network's forward pass.
pub struct ModelTape<'p> {
    pub tape: Tape<'p>,
    ids: [LayerId; 7],
    arch: ArchitectureSpec,
}

impl<'p> ModelTape<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        let mut tape = Tape::new();
        let ids = params.layers().map(|l| tape.register_layer(l));
        Self {
            tape,
            ids,
            arch: params.arch,
        }
    }

    pub fn input(&mut self, value: DenseMatrix) -> Var {
        self.tape.input(value)
    }

    fn two_layer(&mut self, idx: [usize; 2], x: Var) -> Result<Var> {
        let h = self.tape.affine(self.ids[idx[0]], x)?;
        let h = self.tape.relu(h);
        Ok(self.tape.affine(self.ids[idx[1]], h)?)
    }

    pub fn embed_audio(&mut self, x: Var) -> Result<Var> {
        self.two_layer(layer_index::AUDIO, x)
    }

    pub fn embed_video(&mut self, x: Var) -> Result<Var> {
        self.two_layer(layer_index::VIDEO, x)
    }

    pub fn embed_text(&mut self, x: Var) -> Result<Var> {
        Ok(self.tape.affine(self.ids[layer_index::TEXT], x)?)
    }

    pub fn decode(&mut self, e: Var) -> Result<Var> {
        self.two_layer(layer_index::DECODER, e)
    }

    /// Gradients of a scalar node, shaped like the model parameters.
    pub fn backward(&self, out: Var) -> Result<ModelParams> {
        let grads = self.tape.backward(out)?;
        let layers = self.ids.iter().map(|id| grads.layer(*id).clone()).collect();
        ModelParams::from_layers(self.arch, layers)
    }
}
