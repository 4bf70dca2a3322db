//! Trainable tensors: registry, per-variant allocation, initialization and
//! versioned checkpoints.

use crate::autodiff::{Tape, VarId};
use crate::config::{Aggregator, SemanticsMode, StructureMode, TrainConfig};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Handle into a [`ModelParams`] registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in registration order; aligns with tape-var vectors built
    /// by [`ModelParams::insert_into_tape`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruIds {
    pub w_hz: ParamId,
    pub w_mz: ParamId,
    pub b_z: ParamId,
    pub w_hh: ParamId,
    pub w_mh: ParamId,
    pub b_h: ParamId,
    pub w_hf: ParamId,
    pub w_mf: ParamId,
    pub b_f: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionIds {
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct SumSemIds {
    pub w_s: ParamId,
    pub b_s: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct UsAttnIds {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_u: ParamId,
    pub w_i: ParamId,
    pub b_ui: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct SpeIds {
    pub phi1_w1: ParamId,
    pub phi1_b1: ParamId,
    pub phi1_w2: ParamId,
    pub phi1_b2: ParamId,
    pub w_p: ParamId,
    pub w1_p: ParamId,
    pub w2_p: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AoiIds {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct TgatIds {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Typed handles to whichever tensors the configured variant allocates.
#[derive(Debug, Clone)]
pub struct Handles {
    pub time_omegas: ParamId,
    pub gru: GruIds,
    pub fusion: Option<FusionIds>,
    pub sum_sem: Option<SumSemIds>,
    pub usattn: Option<UsAttnIds>,
    pub spe: Option<SpeIds>,
    pub aoi: Option<AoiIds>,
    pub tgat: Vec<TgatIds>,
    pub decoder: DecoderIds,
}

/// Every trainable tensor of one model, in a fixed registration order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub cfg: TrainConfig,
    /// Genre embedding width the model was built against (0 without
    /// semantics).
    pub d_s: usize,
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    pub handles: Handles,
}

struct Builder {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    rng: ChaCha12Rng,
}

impl Builder {
    fn glorot(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| self.rng.random_range(-a..a));
        self.push(name, value)
    }

    /// Glorot init with each column divided by that input's characteristic
    /// magnitude, so inputs of very different scales (the raw timestamp
    /// next to small feature entries) start with comparable contributions.
    fn glorot_scaled(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        scales: Option<&[f64]>,
    ) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |(_, c)| {
            let div = scales.map(|s| s[c].abs().max(1.0)).unwrap_or(1.0);
            self.rng.random_range(-a..a) / div
        });
        self.push(name, value)
    }

    fn normal(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let value = Array2::from_shape_fn((rows, cols), |_| {
            let v: f64 = StandardNormal.sample(&mut self.rng);
            v
        });
        self.push(name, value)
    }

    fn zeros(&mut self, name: &str, rows: usize) -> ParamId {
        self.push(name, Array2::zeros((rows, 1)))
    }

    fn push(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }
}

impl ModelParams {
    /// Allocates and initializes every tensor the variant needs. `d_s` is
    /// the genre embedding width (ignored when semantics are off).
    pub fn init(cfg: &TrainConfig, d_s: usize) -> Result<ModelParams> {
        Self::init_scaled(cfg, d_s, None)
    }

    /// As [`Self::init`], with per-column characteristic magnitudes of the
    /// raw message (length `d_msg`) used to scale the weights that consume
    /// it directly.
    pub fn init_scaled(
        cfg: &TrainConfig,
        d_s: usize,
        raw_msg_scales: Option<&[f64]>,
    ) -> Result<ModelParams> {
        cfg.validate()?;
        if let Some(s) = raw_msg_scales {
            if s.len() != cfg.d_msg() {
                return Err(Error::Config("raw message scale width mismatch".into()));
            }
        }
        let semantics_on = cfg.semantics != SemanticsMode::Off;
        if semantics_on && d_s == 0 {
            return Err(Error::Config("semantic variant needs a genre width".into()));
        }
        let d_s = if semantics_on || cfg.structure_semantics != StructureMode::Off {
            d_s
        } else {
            0
        };

        let mut b = Builder {
            names: Vec::new(),
            values: Vec::new(),
            rng: ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9)),
        };

        let time_omegas = {
            let omegas = crate::structural::TimeEncoderParams::geometric(cfg.d_t).omegas;
            let col = Array2::from_shape_vec((cfg.d_t, 1), omegas.to_vec()).expect("shape");
            b.push("time.omegas", col)
        };

        // Weights consuming the raw message directly inherit its column
        // scales. With semantics on, the fusion layer is the only such
        // consumer; with the AoI aggregator, its value projection already
        // normalizes the payload the memory updater sees.
        let raw_payload_scales = if semantics_on { None } else { raw_msg_scales };
        let gru_h_scales = if cfg.aggregator == Aggregator::Aoi {
            None
        } else {
            raw_payload_scales
        };
        let d_p = cfg.msg_payload_dim();
        let gru = GruIds {
            w_hz: b.glorot_scaled("gru.w_hz", cfg.d_m, d_p, gru_h_scales),
            w_mz: b.glorot("gru.w_mz", cfg.d_m, cfg.d_m),
            b_z: b.zeros("gru.b_z", cfg.d_m),
            w_hh: b.glorot_scaled("gru.w_hh", cfg.d_m, d_p, gru_h_scales),
            w_mh: b.glorot("gru.w_mh", cfg.d_m, cfg.d_m),
            b_h: b.zeros("gru.b_h", cfg.d_m),
            w_hf: b.glorot_scaled("gru.w_hf", cfg.d_m, d_p, gru_h_scales),
            w_mf: b.glorot("gru.w_mf", cfg.d_m, cfg.d_m),
            b_f: b.zeros("gru.b_f", cfg.d_m),
        };

        let fusion = semantics_on.then(|| FusionIds {
            w1: b.glorot_scaled("fusion.w1", cfg.d_h, cfg.d_msg(), raw_msg_scales),
            w2: b.glorot("fusion.w2", cfg.d_h, cfg.d_h),
        });

        let needs_sum = cfg.semantics == SemanticsMode::Sum
            || cfg.structure_semantics != StructureMode::Off;
        let sum_sem = needs_sum.then(|| SumSemIds {
            w_s: b.glorot("sem.w_s", cfg.d_h, d_s),
            b_s: b.zeros("sem.b_s", cfg.d_h),
        });

        let usattn = (cfg.semantics == SemanticsMode::UsAttn).then(|| UsAttnIds {
            w_q: b.glorot("usattn.w_q", cfg.d_h, cfg.d_h),
            w_k: b.glorot("usattn.w_k", cfg.d_h, d_s),
            w_v: b.glorot("usattn.w_v", cfg.d_h, d_s),
            w_u: b.glorot("usattn.w_u", cfg.d_h, cfg.d_emb),
            w_i: b.glorot("usattn.w_i", cfg.d_h, cfg.d_emb),
            b_ui: b.zeros("usattn.b_ui", cfg.d_h),
        });

        let spe = (cfg.structure_semantics == StructureMode::SumSpe).then(|| {
            let d_mid = cfg.spe_mlp_dim;
            let d_spe = cfg.spe_out_dim();
            SpeIds {
                phi1_w1: b.glorot("spe.phi1_w1", d_mid, cfg.d_h),
                phi1_b1: b.zeros("spe.phi1_b1", d_mid),
                phi1_w2: b.glorot("spe.phi1_w2", d_mid, d_mid),
                phi1_b2: b.zeros("spe.phi1_b2", d_mid),
                // Fourier rows drawn from a standard normal so the induced
                // similarity approximates a Gaussian kernel.
                w_p: b.normal("spe.w_p", cfg.spe_fourier_dim / 2, d_mid),
                w1_p: b.glorot("spe.w1_p", d_spe, cfg.spe_fourier_dim),
                w2_p: b.glorot("spe.w2_p", d_spe, d_spe),
            }
        });

        let aoi = (cfg.aggregator == Aggregator::Aoi).then(|| AoiIds {
            w_q: b.glorot("aoi.w_q", cfg.d_m, cfg.d_m),
            w_k: b.glorot_scaled("aoi.w_k", cfg.d_m, d_p, raw_payload_scales),
            w_v: b.glorot_scaled("aoi.w_v", d_p, d_p, raw_payload_scales),
        });

        let mut tgat = Vec::with_capacity(cfg.layers);
        for layer in 0..cfg.layers {
            let rep = if layer == 0 {
                cfg.d_m + cfg.structural_sem_dim()
            } else {
                cfg.d_emb
            };
            let w = rep + cfg.d_t;
            let p = format!("tgat{layer}");
            tgat.push(TgatIds {
                w_q: b.glorot(&format!("{p}.w_q"), cfg.d_att, w),
                w_k: b.glorot(&format!("{p}.w_k"), cfg.d_att, w),
                w_v: b.glorot(&format!("{p}.w_v"), cfg.d_att, w),
                ff_w1: b.glorot(&format!("{p}.ff_w1"), cfg.d_emb, w + cfg.d_att),
                ff_b1: b.zeros(&format!("{p}.ff_b1"), cfg.d_emb),
                ff_w2: b.glorot(&format!("{p}.ff_w2"), cfg.d_emb, cfg.d_emb),
                ff_b2: b.zeros(&format!("{p}.ff_b2"), cfg.d_emb),
            });
        }

        let decoder = DecoderIds {
            w1: b.glorot("decoder.w1", cfg.d_emb, 2 * cfg.d_emb),
            b1: b.zeros("decoder.b1", cfg.d_emb),
            w2: b.glorot("decoder.w2", 1, cfg.d_emb),
            b2: b.zeros("decoder.b2", 1),
        };

        Ok(ModelParams {
            cfg: cfg.clone(),
            d_s,
            names: b.names,
            values: b.values,
            handles: Handles {
                time_omegas,
                gru,
                fusion,
                sum_sem,
                usattn,
                spe,
                aoi,
                tgat,
                decoder,
            },
        })
    }

    pub fn n_tensors(&self) -> usize {
        self.values.len()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(k, v)| (ParamId(k), self.names[k].as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Inserts every tensor as a tape leaf, returning var ids aligned with
    /// the registry order.
    pub fn insert_into_tape(&self, tape: &mut Tape) -> Vec<VarId> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    pub fn var_of(vars: &[VarId], id: ParamId) -> VarId {
        vars[id.0]
    }

    /// Plain view of the time encoder.
    pub fn time_params(&self) -> crate::structural::TimeEncoderParams {
        crate::structural::TimeEncoderParams {
            omegas: to_vec1(self.value(self.handles.time_omegas)),
        }
    }

    /// Plain view of the memory updater gates.
    pub fn gru_params(&self) -> crate::temporal::GruParams {
        let g = &self.handles.gru;
        crate::temporal::GruParams {
            w_hz: self.value(g.w_hz).clone(),
            w_mz: self.value(g.w_mz).clone(),
            b_z: to_vec1(self.value(g.b_z)),
            w_hh: self.value(g.w_hh).clone(),
            w_mh: self.value(g.w_mh).clone(),
            b_h: to_vec1(self.value(g.b_h)),
            w_hf: self.value(g.w_hf).clone(),
            w_mf: self.value(g.w_mf).clone(),
            b_f: to_vec1(self.value(g.b_f)),
        }
    }

    /// Plain view of the summation semantic aggregator, when allocated.
    pub fn sum_sem_params(&self) -> Option<(Array2<f64>, Array1<f64>)> {
        self.handles
            .sum_sem
            .as_ref()
            .map(|s| (self.value(s.w_s).clone(), to_vec1(self.value(s.b_s))))
    }
}

fn to_vec1(v: &Array2<f64>) -> Array1<f64> {
    Array1::from_vec(v.iter().copied().collect())
}

/// Stable hash of a training configuration, recorded into checkpoints.
pub fn config_hash(cfg: &TrainConfig) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Versioned parameter dump tied to its configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub d_s: usize,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash(&params.cfg),
            config: params.cfg.clone(),
            d_s: params.d_s,
            tensors: params
                .iter()
                .map(|(_, name, v)| TensorRecord {
                    name: name.to_string(),
                    rows: v.nrows(),
                    cols: v.ncols(),
                    data: v.iter().copied().collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds a parameter set, verifying names and shapes against a fresh
    /// allocation for the stored configuration.
    pub fn into_params(self) -> Result<ModelParams> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        if config_hash(&self.config) != self.config_hash {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let mut params = ModelParams::init(&self.config, self.d_s.max(1))?;
        if params.n_tensors() != self.tensors.len() {
            return Err(Error::Checkpoint("tensor count mismatch".into()));
        }
        for (k, rec) in self.tensors.into_iter().enumerate() {
            let id = ParamId(k);
            if params.name(id) != rec.name {
                return Err(Error::Checkpoint(format!(
                    "tensor {k} is {}, expected {}",
                    rec.name,
                    params.name(id)
                )));
            }
            if params.value(id).dim() != (rec.rows, rec.cols) {
                return Err(Error::Checkpoint(format!("tensor {} shape mismatch", rec.name)));
            }
            *params.value_mut(id) =
                Array2::from_shape_vec((rec.rows, rec.cols), rec.data)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
