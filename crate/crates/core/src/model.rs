//! Full pipeline assembly: image encoder, hand encoder, sparse decoder,
//! dense decoder, plus checkpoint persistence.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dense::{DenseConfig, DenseDecoder};
use crate::encoder::{EncoderConfig, ImageEncoder};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, CameraParams};
use crate::graph::{Graph, Parameter, Var};
use crate::hand::{build_hand_embedding, HandEncoder, HandState, EMBED_DIM};
use crate::io::{Container, TensorDtype};
use crate::sparse::{SparseConfig, SparseDecoder};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn convert_tensor<T: Scalar>(t: &Tensor<f64>) -> Tensor<T> {
    let data = t.data().iter().map(|&v| T::from_f64(v)).collect();
    Tensor::from_vec(t.shape(), data).unwrap()
}

pub struct ObjectPrediction {
    pub t_o: Var,    // [1, 3]
    pub sparse: Var, // [N_s, 3]
    pub dense: Var,  // [8·N_s, 3]
}

pub struct Model<T: Scalar> {
    pub cfg: RunConfig,
    pub image_enc: ImageEncoder<T>,
    pub hand_enc: HandEncoder<T>,
    pub sparse: SparseDecoder<T>,
    pub dense: DenseDecoder<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &RunConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let enc_cfg = EncoderConfig {
            image_size: cfg.image_size,
            patch: cfg.patch,
            dim: cfg.enc_dim,
            layers: cfg.enc_layers,
            heads: cfg.enc_heads,
            ffn_mult: cfg.ffn_mult,
            refine_channels: cfg.refine_channels,
        };
        let image_enc = ImageEncoder::new(enc_cfg, rng)?;
        let hand_enc = HandEncoder::new("hand", EMBED_DIM, &cfg.hand_widths, rng);
        let sparse = SparseDecoder::new(
            SparseConfig {
                n_points: cfg.n_sparse,
                dim: cfg.sparse_dim,
                layers: cfg.sparse_layers,
                heads: cfg.sparse_heads,
                ffn_mult: cfg.ffn_mult,
                image_dim: cfg.enc_dim,
                hand_dim: *cfg.hand_widths.last().unwrap(),
            },
            rng,
        )?;
        let dense = DenseDecoder::new(
            DenseConfig {
                image_feat_dim: cfg.refine_channels,
                coord_channels: cfg.dense_coord,
                attn_dim: cfg.dense_dim,
                heads: cfg.dense_heads,
                k: cfg.knn_k,
                factors: [2, 4],
            },
            rng,
        )?;
        Ok(Model { cfg: cfg.clone(), image_enc, hand_enc, sparse, dense })
    }

    pub fn seeded(cfg: &RunConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Model::new(cfg, &mut rng)
    }

    /// Run the pipeline on one sample; `image` is [H,H,3] in [0,1].
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        image: &Tensor<T>,
        hand: &HandState,
        cam: &CameraParams,
    ) -> Result<ObjectPrediction> {
        let f_h = if self.cfg.zero_hand {
            g.constant(Tensor::zeros(&[1, self.hand_enc.out_dim()]))
        } else {
            let e_h = build_hand_embedding::<T>(hand)?;
            let e_h = g.constant(e_h);
            self.hand_enc.forward(g, e_h)?
        };

        let tokens = self.image_enc.encode(g, image)?;
        let fmap = self.image_enc.refine_feature_map(g, tokens)?;
        let (t_o, p_s) = self.sparse.decode(g, tokens, f_h)?;

        let t_p = Tensor::from_vec(&[1, 3], hand.t_p.iter().map(|&v| T::from_f64(v)).collect())?;
        let t_p = g.constant(t_p);
        let shift = g.add(t_o, t_p);

        let idx = farthest_point_sample(&hand.vertices, self.cfg.hand_tokens)?;
        let mut hand_cam = Tensor::zeros(&[idx.len(), 3]);
        for (r, &i) in idx.iter().enumerate() {
            for k in 0..3 {
                hand_cam.row_mut(r)[k] = T::from_f64(hand.vertices.row(i)[k]);
            }
        }
        let hand_cam = g.constant(hand_cam);
        let p_d = self.dense.decode(g, p_s, shift, hand_cam, cam, fmap)?;
        Ok(ObjectPrediction { t_o, sparse: p_s, dense: p_d })
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = self.image_enc.params();
        out.extend(self.hand_enc.params());
        out.extend(self.sparse.params());
        out.extend(self.dense.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.image_enc.params_mut();
        out.extend(self.hand_enc.params_mut());
        out.extend(self.sparse.params_mut());
        out.extend(self.dense.params_mut());
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState { seed, word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub fn save_checkpoint<T: Scalar + TensorDtype>(
    path: impl AsRef<Path>,
    model: &Model<T>,
    step: usize,
    rng: RngState,
) -> Result<()> {
    let meta = serde_json::json!({
        "format_version": CHECKPOINT_VERSION,
        "config": serde_json::to_value(&model.cfg)
            .map_err(|e| Error::Invalid(format!("config serialization: {e}")))?,
        "step": step,
        "rng": {
            "seed": rng.seed,
            "word_pos_lo": (rng.word_pos & u64::MAX as u128) as u64,
            "word_pos_hi": (rng.word_pos >> 64) as u64,
        },
    });
    let mut c = Container::new(meta);
    for p in model.params() {
        c.push(p.name.clone(), T::wrap(p.value.clone()));
    }
    c.save(path)
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub config: RunConfig,
    pub step: usize,
    pub rng: RngState,
    container: Container,
}

impl LoadedCheckpoint {
    pub fn open(path: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
        let path = path.as_ref();
        let container = Container::load(path)?;
        let meta = &container.meta;
        let version = meta["format_version"].as_u64().unwrap_or(0);
        if version != CHECKPOINT_VERSION as u64 {
            return Err(Error::Invalid(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        let config: RunConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Invalid(format!("{}: bad config block: {e}", path.display())))?;
        config.validate()?;
        let step = meta["step"].as_u64().unwrap_or(0) as usize;
        let seed = meta["rng"]["seed"].as_u64().unwrap_or(0);
        let lo = meta["rng"]["word_pos_lo"].as_u64().unwrap_or(0) as u128;
        let hi = meta["rng"]["word_pos_hi"].as_u64().unwrap_or(0) as u128;
        Ok(LoadedCheckpoint {
            config,
            step,
            rng: RngState { seed, word_pos: (hi << 64) | lo },
            container,
        })
    }

    /// Build a model of the checkpoint's config and restore its parameters.
    pub fn instantiate<T: Scalar + TensorDtype>(&self, path: impl AsRef<Path>) -> Result<Model<T>> {
        let path = path.as_ref();
        let mut model = Model::<T>::seeded(&self.config)?;
        for p in model.params_mut() {
            let t = self.container.get_typed::<T>(&p.name, path)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {} is {:?}, model wants {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(model)
    }
}
