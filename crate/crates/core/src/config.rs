//! Run configuration: model widths, variant flags, training and cache
//! simulation settings.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Historical-message aggregator choice (the `-L`/`-M`/`-A` suffix).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    /// Keep only the latest buffered message.
    Last,
    /// Mean over all buffered messages.
    Mean,
    /// Attention over fresh messages surviving an age-of-information filter.
    Aoi,
}

impl Aggregator {
    pub fn letter(self) -> &'static str {
        match self {
            Aggregator::Last => "L",
            Aggregator::Mean => "M",
            Aggregator::Aoi => "A",
        }
    }
}

/// Semantic aggregation used when fusing genre information into messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticsMode {
    Off,
    Sum,
    #[serde(rename = "usattn")]
    UsAttn,
}

/// Semantic block concatenated into the structural learner's inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureMode {
    Off,
    Sum,
    #[serde(rename = "sum+spe")]
    SumSpe,
}

/// How genre tokens are turned into vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticEncoding {
    /// Basis vectors over the vocabulary found in the catalog.
    OneHot,
    /// Pretrained vectors loaded from a token/vector file.
    Table,
}

/// One cell of the model lattice: aggregator x temporal semantics x
/// structural semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub aggregator: Aggregator,
    pub semantics: SemanticsMode,
    pub structure: StructureMode,
}

impl Variant {
    pub fn validate(&self) -> Result<()> {
        if self.structure != StructureMode::Off && self.semantics == SemanticsMode::Off {
            return Err(Error::Config(
                "structural semantics require a temporal semantic aggregator".into(),
            ));
        }
        Ok(())
    }

    /// Family name independent of the aggregator, e.g. `M2-STGN+U+SPE`.
    pub fn family(&self) -> String {
        let (base, u) = match self.semantics {
            SemanticsMode::Off => ("TGN", ""),
            SemanticsMode::Sum => ("STGN", ""),
            SemanticsMode::UsAttn => ("STGN", "+U"),
        };
        if base == "TGN" {
            return "TGN".to_string();
        }
        let (m, spe) = match self.structure {
            StructureMode::Off => ("M1", ""),
            StructureMode::Sum => ("M2", ""),
            StructureMode::SumSpe => ("M2", "+SPE"),
        };
        format!("{m}-{base}{u}{spe}")
    }

    /// Full row label with the aggregator letter, e.g. `M2-STGN-A+U+SPE`.
    pub fn label(&self) -> String {
        let family = self.family();
        let letter = self.aggregator.letter();
        match family.find('+') {
            Some(pos) => format!("{}-{}{}", &family[..pos], letter, &family[pos..]),
            None => format!("{family}-{letter}"),
        }
    }

    /// Parses a row label such as `TGN-M` or `M2-STGN-L+U+SPE` back to flags.
    pub fn from_label(label: &str) -> Result<Variant> {
        for v in Variant::catalog() {
            if v.label() == label {
                return Ok(v);
            }
        }
        Err(Error::Config(format!("unknown variant label: {label}")))
    }

    /// Every valid flag combination (7 families x 3 aggregators).
    pub fn catalog() -> Vec<Variant> {
        let mut out = Vec::new();
        for &aggregator in &[Aggregator::Last, Aggregator::Mean, Aggregator::Aoi] {
            for &semantics in
                &[SemanticsMode::Off, SemanticsMode::Sum, SemanticsMode::UsAttn]
            {
                for &structure in
                    &[StructureMode::Off, StructureMode::Sum, StructureMode::SumSpe]
                {
                    let v = Variant { aggregator, semantics, structure };
                    if v.validate().is_ok() {
                        out.push(v);
                    }
                }
            }
        }
        out
    }

    /// The nine rows a comparison report covers: the three TGN baselines
    /// plus the six semantics-enhanced families.
    pub fn report_rows() -> Vec<String> {
        let mut rows = vec!["TGN-L".into(), "TGN-M".into(), "TGN-A".into()];
        for fam in ["M1-STGN", "M2-STGN", "M1-STGN+U", "M2-STGN+U", "M2-STGN+SPE", "M2-STGN+U+SPE"]
        {
            rows.push(fam.to_string());
        }
        rows
    }
}

/// Model widths, variant flags and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Raw node feature width.
    pub d_v: usize,
    /// Edge feature width.
    pub d_e: usize,
    /// Memory width.
    pub d_m: usize,
    /// Time-encoding width.
    pub d_t: usize,
    /// Semantic hidden width (aggregated genre features, fused messages).
    pub d_h: usize,
    /// Embedding width.
    pub d_emb: usize,
    /// Attention width inside the graph attention layers.
    pub d_att: usize,
    pub n_heads: usize,
    /// Graph attention depth, 1 or 2.
    pub layers: usize,
    /// Neighbors sampled per sub-graph.
    pub n_neighbors: usize,

    /// Fourier width of the semantic positional encoder (must be even).
    pub spe_fourier_dim: usize,
    /// Output width of the positional encoder's feature-enhancement MLP.
    pub spe_mlp_dim: usize,
    /// Final positional-encoding width; 0 means "use `d_h`".
    pub d_spe: usize,

    /// Message buffer capacity per node.
    pub msg_buffer_capacity: usize,
    /// Age cutoff (seconds) for the AoI aggregator.
    pub aoi_max_age_secs: f64,

    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub negatives_per_positive: usize,
    pub seed: u64,

    pub aggregator: Aggregator,
    pub semantics: SemanticsMode,
    pub structure_semantics: StructureMode,
    pub semantic_encoding: SemanticEncoding,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d_v: 100,
            d_e: 1,
            d_m: 100,
            d_t: 100,
            d_h: 64,
            d_emb: 100,
            d_att: 100,
            n_heads: 2,
            layers: 1,
            n_neighbors: 10,
            spe_fourier_dim: 256,
            spe_mlp_dim: 64,
            d_spe: 0,
            msg_buffer_capacity: 10,
            aoi_max_age_secs: 30.0 * 24.0 * 3600.0,
            batch_size: 200,
            epochs: 20,
            learning_rate: 1e-4,
            negatives_per_positive: 1,
            seed: 0,
            aggregator: Aggregator::Last,
            semantics: SemanticsMode::Off,
            structure_semantics: StructureMode::Off,
            semantic_encoding: SemanticEncoding::OneHot,
        }
    }
}

impl TrainConfig {
    pub fn variant(&self) -> Variant {
        Variant {
            aggregator: self.aggregator,
            semantics: self.semantics,
            structure: self.structure_semantics,
        }
    }

    /// Resolved positional-encoding output width.
    pub fn spe_out_dim(&self) -> usize {
        if self.d_spe == 0 {
            self.d_h
        } else {
            self.d_spe
        }
    }

    /// Raw message width `2*d_v + d_e + 1`.
    pub fn d_msg(&self) -> usize {
        2 * self.d_v + self.d_e + 1
    }

    /// Width of the vector the memory updater consumes: fused messages when
    /// semantics are on, raw messages otherwise.
    pub fn msg_payload_dim(&self) -> usize {
        if self.semantics == SemanticsMode::Off {
            self.d_msg()
        } else {
            self.d_h
        }
    }

    /// Width of the semantic block concatenated into structural inputs.
    pub fn structural_sem_dim(&self) -> usize {
        match self.structure_semantics {
            StructureMode::Off => 0,
            StructureMode::Sum => self.d_h,
            StructureMode::SumSpe => self.spe_out_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.variant().validate()?;
        if !(1..=2).contains(&self.layers) {
            return Err(Error::Config("layers must be 1 or 2".into()));
        }
        if self.n_heads == 0 || self.d_att % self.n_heads != 0 {
            return Err(Error::Config("n_heads must divide d_att".into()));
        }
        if self.spe_fourier_dim % 2 != 0 || self.spe_fourier_dim == 0 {
            return Err(Error::Config("spe_fourier_dim must be even and positive".into()));
        }
        for (name, v) in [
            ("d_v", self.d_v),
            ("d_e", self.d_e),
            ("d_m", self.d_m),
            ("d_t", self.d_t),
            ("d_h", self.d_h),
            ("d_emb", self.d_emb),
            ("n_neighbors", self.n_neighbors),
            ("msg_buffer_capacity", self.msg_buffer_capacity),
            ("batch_size", self.batch_size),
            ("negatives_per_positive", self.negatives_per_positive),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Cache simulation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Cache update period in seconds.
    pub update_period_secs: f64,
    /// Popularity prediction slot in seconds.
    pub slot_secs: f64,
    /// Preference threshold for counting a predicted request.
    pub p_thre: f64,
    /// Per-tier capacities, nearest tier first.
    pub tier_capacities: Vec<usize>,
    /// How far back (seconds) the candidate noise set reaches.
    pub candidate_window_secs: f64,
    /// Number of update periods simulated.
    pub periods: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            update_period_secs: 3600.0,
            slot_secs: 60.0,
            p_thre: 0.995,
            tier_capacities: vec![5, 7, 8],
            candidate_window_secs: 180_000.0,
            periods: 24,
        }
    }
}

impl SimConfig {
    pub fn total_capacity(&self) -> usize {
        self.tier_capacities.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.slot_secs <= 0.0 || self.update_period_secs <= 0.0 {
            return Err(Error::Config("periods and slots must be positive".into()));
        }
        if self.slot_secs > self.update_period_secs {
            return Err(Error::Config("slot must not exceed the update period".into()));
        }
        if !(0.0..1.0).contains(&self.p_thre) || self.p_thre <= 0.0 {
            return Err(Error::Config("p_thre must lie in (0, 1)".into()));
        }
        if self.tier_capacities.is_empty() || self.tier_capacities.iter().any(|&c| c == 0) {
            return Err(Error::Cache("tier capacities must be positive".into()));
        }
        if self.candidate_window_secs <= 0.0 || self.periods == 0 {
            return Err(Error::Config("window and periods must be positive".into()));
        }
        Ok(())
    }
}
