//! Model and recurrent-memory configuration.
//!
//! Layers are numbered from 1 to `n_layers` in every public field, matching the
//! usual "layer ℓ" convention; internal storage is 0-indexed.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Real, Result};

/// Attention span of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    /// Position t sees positions in (t - w, t].
    Sliding(usize),
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Repeating per-layer pattern of `S` (sliding) and `L` (full) layers,
    /// starting at layer 1. The last layer is always full.
    pub window_pattern: String,
    /// Sliding window in tokens; 0 selects `ceil(seq_len / 4)`.
    pub window_size: usize,
    pub softcap: Real,
    pub rope_base: Real,
    pub norm_eps: Real,
    pub value_embeddings: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lrt: Option<LrtConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            n_kv_heads: 4,
            d_head: 32,
            vocab_size: 256,
            seq_len: 64,
            window_pattern: "SSSL".into(),
            window_size: 0,
            softcap: 15.0,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
            value_embeddings: false,
            lrt: None,
        }
    }
}

impl ModelConfig {
    /// The width-scaling rule `d = 64·L` with 128-wide heads, at the full
    /// vocabulary and context of the reference runs.
    pub fn scaled(n_layers: usize) -> Self {
        let d_model = 64 * n_layers;
        let n_heads = d_model / 128;
        Self {
            n_layers,
            d_model,
            n_heads,
            n_kv_heads: n_heads,
            d_head: 128,
            vocab_size: 32_768,
            seq_len: 2048,
            value_embeddings: true,
            lrt: Some(LrtConfig::for_depth(n_layers)),
            ..Self::default()
        }
    }

    /// Two-layer, width-16 model used by the oracle checks.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            n_kv_heads: 2,
            d_head: 8,
            vocab_size: 32,
            seq_len: 8,
            window_pattern: "SL".into(),
            window_size: 3,
            ..Self::default()
        }
    }

    pub fn with_lrt(mut self, lrt: LrtConfig) -> Self {
        self.lrt = Some(lrt);
        self
    }

    pub fn without_lrt(mut self) -> Self {
        self.lrt = None;
        self
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn effective_window(&self) -> usize {
        if self.window_size == 0 {
            self.seq_len.div_ceil(4).max(1)
        } else {
            self.window_size
        }
    }

    /// Attention span of `layer` (1-indexed).
    pub fn window_kind(&self, layer: usize) -> WindowKind {
        if layer == self.n_layers {
            return WindowKind::Full;
        }
        let pattern = self.window_pattern.as_bytes();
        match pattern[(layer - 1) % pattern.len()] {
            b'S' | b's' => WindowKind::Sliding(self.effective_window()),
            _ => WindowKind::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.vocab_size == 0 || self.seq_len == 0 {
            return bad("n_layers, d_model, vocab_size and seq_len must be positive".into());
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 || self.n_heads * self.d_head != self.d_model {
            return bad(format!(
                "n_heads ({}) * d_head ({}) must equal d_model ({})",
                self.n_heads, self.d_head, self.d_model
            ));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return bad(format!("n_kv_heads ({}) must divide n_heads ({})", self.n_kv_heads, self.n_heads));
        }
        if self.d_head % 2 != 0 {
            return bad(format!("d_head ({}) must be even for rotary encoding", self.d_head));
        }
        if self.window_pattern.is_empty() || !self.window_pattern.chars().all(|c| matches!(c, 'S' | 's' | 'L' | 'l')) {
            return bad(format!("window_pattern {:?} must consist of S and L", self.window_pattern));
        }
        if !(self.softcap > 0.0) {
            return bad("softcap must be positive".into());
        }
        if let Some(lrt) = &self.lrt {
            lrt.validate(self.n_layers)?;
        }
        Ok(())
    }
}

/// Recurrent-memory settings. Absent from [`ModelConfig`] means baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrtConfig {
    /// Layer whose output is carried to the next position (1-indexed).
    pub source_layer: usize,
    /// When non-empty, the memory is a learned softmax-weighted average of
    /// these layers' outputs instead of `source_layer` alone.
    pub source_average: Vec<usize>,
    pub projection_sharing: ProjectionSharing,
    pub injection: InjectionSet,
    pub kv_mode: KvMode,
    pub kv_parts: KvParts,
    pub target_layers: TargetLayers,
    pub gamma_init: Real,
    pub memory_source: MemorySource,
}

impl Default for LrtConfig {
    fn default() -> Self {
        Self::for_depth(4)
    }
}

impl LrtConfig {
    /// Defaults for an `n_layers`-deep model: source layer at 60% depth
    /// (rounded), shared projections, both injections on all layers, the
    /// previous position's state as memory.
    pub fn for_depth(n_layers: usize) -> Self {
        Self {
            source_layer: default_source_layer(n_layers),
            source_average: Vec::new(),
            projection_sharing: ProjectionSharing::Shared,
            injection: InjectionSet::BOTH,
            kv_mode: KvMode::Additive,
            kv_parts: KvParts::KeysAndValues,
            target_layers: TargetLayers::All,
            gamma_init: 0.1,
            memory_source: MemorySource::Previous(1),
        }
    }

    /// Source layers in mixing order.
    pub fn source_layers(&self) -> Vec<usize> {
        if self.source_average.is_empty() {
            alloc::vec![self.source_layer]
        } else {
            self.source_average.clone()
        }
    }

    /// Whether `layer` (1-indexed) receives memory.
    pub fn targets(&self, layer: usize, n_layers: usize) -> bool {
        self.target_layers.contains(layer, n_layers)
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.source_layer == 0 || self.source_layer > n_layers {
            return bad(format!("lrt.source_layer {} outside [1, {n_layers}]", self.source_layer));
        }
        if let Some(l) = self.source_average.iter().find(|&&l| l == 0 || l > n_layers) {
            return bad(format!("lrt.source_average layer {l} outside [1, {n_layers}]"));
        }
        if let TargetLayers::List(list) = &self.target_layers {
            if let Some(l) = list.iter().find(|&&l| l == 0 || l > n_layers) {
                return bad(format!("lrt.target_layers entry {l} outside [1, {n_layers}]"));
            }
        }
        if !self.injection.is_empty() && !(1..=n_layers).any(|l| self.targets(l, n_layers)) {
            return bad("lrt.target_layers selects no layer".into());
        }
        match self.memory_source {
            MemorySource::Previous(0) => bad("lrt.memory_source previous lag must be >= 1".into()),
            MemorySource::LearnedAverage(0) => bad("lrt.memory_source learned_average window must be >= 1".into()),
            _ => Ok(()),
        }
    }
}

/// `round(0.6 * n_layers)`, at least 1: layer 12 of 20, layer 14 of 24.
pub fn default_source_layer(n_layers: usize) -> usize {
    ((6 * n_layers + 5) / 10).clamp(1, n_layers.max(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionSharing {
    /// One `(W_k_rec, W_v_rec)` pair for all target layers.
    Shared,
    /// One pair per target layer.
    Layerwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvMode {
    Additive,
    ReplaceLocal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvParts {
    KeysAndValues,
    KeysOnly,
    ValuesOnly,
}

impl KvParts {
    pub fn keys(self) -> bool {
        !matches!(self, KvParts::ValuesOnly)
    }

    pub fn values(self) -> bool {
        !matches!(self, KvParts::KeysOnly)
    }
}

/// Which injection pathways are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InjectionSet {
    pub kv_projection: bool,
    pub residual_injection: bool,
}

impl InjectionSet {
    pub const BOTH: Self = Self {
        kv_projection: true,
        residual_injection: true,
    };
    pub const NONE: Self = Self {
        kv_projection: false,
        residual_injection: false,
    };
    pub const KV: Self = Self {
        kv_projection: true,
        residual_injection: false,
    };
    pub const RESIDUAL: Self = Self {
        kv_projection: false,
        residual_injection: true,
    };

    pub fn is_empty(&self) -> bool {
        !self.kv_projection && !self.residual_injection
    }
}

impl Serialize for InjectionSet {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        let mut v: Vec<&str> = Vec::new();
        if self.kv_projection {
            v.push("kv_projection");
        }
        if self.residual_injection {
            v.push("residual_injection");
        }
        v.serialize(s)
    }
}

impl<'de> Deserialize<'de> for InjectionSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let names: Vec<String> = Vec::deserialize(d)?;
        let mut set = InjectionSet::NONE;
        for n in names {
            match n.as_str() {
                "kv_projection" => set.kv_projection = true,
                "residual_injection" => set.residual_injection = true,
                other => {
                    return Err(serde::de::Error::custom(format!(
                        "unknown injection {other:?} (expected kv_projection or residual_injection)"
                    )))
                }
            }
        }
        Ok(set)
    }
}

/// Layers that receive memory. Text form: `all`, `early_third`, or a comma
/// list such as `1,2,5`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TargetLayers {
    All,
    /// The first `ceil(L/3)` layers.
    EarlyThird,
    List(Vec<usize>),
}

impl TargetLayers {
    pub fn contains(&self, layer: usize, n_layers: usize) -> bool {
        match self {
            TargetLayers::All => (1..=n_layers).contains(&layer),
            TargetLayers::EarlyThird => layer >= 1 && layer <= n_layers.div_ceil(3),
            TargetLayers::List(l) => l.contains(&layer),
        }
    }

    pub fn count(&self, n_layers: usize) -> usize {
        (1..=n_layers).filter(|&l| self.contains(l, n_layers)).count()
    }
}

impl fmt::Display for TargetLayers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetLayers::All => f.write_str("all"),
            TargetLayers::EarlyThird => f.write_str("early_third"),
            TargetLayers::List(l) => {
                let parts: Vec<String> = l.iter().map(|v| v.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for TargetLayers {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(TargetLayers::All),
            "early_third" => Ok(TargetLayers::EarlyThird),
            list => list
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<core::result::Result<Vec<_>, _>>()
                .map(TargetLayers::List)
                .map_err(|_| Error::Config(format!("bad target layer list {s:?}"))),
        }
    }
}

/// Which temporal source-layer state is fed back as memory.
/// Text form: `previous:K`, `learned_average:W`, `current`,
/// `current_plus_previous`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemorySource {
    /// The state `K` positions back (`previous:1` is the default).
    Previous(usize),
    /// Softmax-weighted average of the last `W` states.
    LearnedAverage(usize),
    /// The current position's own state from a first pass.
    Current,
    /// Current state plus the previous one.
    CurrentPlusPrevious,
}

impl MemorySource {
    /// Transformer forwards per decoded token.
    pub fn forwards_per_token(self) -> usize {
        if self.needs_first_pass() {
            2
        } else {
            1
        }
    }

    pub fn needs_first_pass(self) -> bool {
        matches!(self, MemorySource::Current | MemorySource::CurrentPlusPrevious)
    }

    /// How many past states must be retained.
    pub fn max_lag(self) -> usize {
        match self {
            MemorySource::Previous(k) => k,
            MemorySource::LearnedAverage(w) => w,
            MemorySource::Current => 0,
            MemorySource::CurrentPlusPrevious => 1,
        }
    }
}

impl fmt::Display for MemorySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemorySource::Previous(k) => write!(f, "previous:{k}"),
            MemorySource::LearnedAverage(w) => write!(f, "learned_average:{w}"),
            MemorySource::Current => f.write_str("current"),
            MemorySource::CurrentPlusPrevious => f.write_str("current_plus_previous"),
        }
    }
}

impl FromStr for MemorySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("bad memory source {s:?}"));
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a.trim().parse::<usize>().map_err(|_| bad())?)),
            None => (s, None),
        };
        match (kind, arg) {
            ("previous", a) => Ok(MemorySource::Previous(a.unwrap_or(1))),
            ("learned_average", Some(w)) => Ok(MemorySource::LearnedAverage(w)),
            ("current", None) => Ok(MemorySource::Current),
            ("current_plus_previous", None) => Ok(MemorySource::CurrentPlusPrevious),
            _ => Err(bad()),
        }
    }
}

macro_rules! serde_via_str {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

serde_via_str!(MemorySource);
serde_via_str!(TargetLayers);

/// Source layer spec used by ablation labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SourceLayer {
    Single(usize),
    LearnedAverage(Vec<usize>),
}

impl From<&LrtConfig> for SourceLayer {
    fn from(c: &LrtConfig) -> Self {
        if c.source_average.is_empty() {
            SourceLayer::Single(c.source_layer)
        } else {
            SourceLayer::LearnedAverage(c.source_average.clone())
        }
    }
}
