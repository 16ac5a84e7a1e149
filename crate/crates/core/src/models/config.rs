use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::RESERVED;
use crate::error::{Error, Result};

/// The twelve dialog architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "seq2seq_attn")]
    Seq2SeqAttn,
    #[serde(rename = "seq2seq_trs")]
    Seq2SeqTrs,
    #[serde(rename = "hred")]
    Hred,
    #[serde(rename = "wseq")]
    Wseq,
    #[serde(rename = "vhred")]
    Vhred,
    #[serde(rename = "dshred")]
    Dshred,
    #[serde(rename = "recosa")]
    Recosa,
    #[serde(rename = "hran")]
    Hran,
    #[serde(rename = "hred_wa")]
    HredWa,
    #[serde(rename = "wseq_wa")]
    WseqWa,
    #[serde(rename = "dshred_wa")]
    DshredWa,
    #[serde(rename = "recosa_wa")]
    RecosaWa,
}

/// How utterance (or token) states are aggregated into the decoder context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseKind {
    /// Non-hierarchical encoder over the flattened context; `self_attention`
    /// passes token states through the self-attention stack.
    Flat { self_attention: bool },
    Hred,
    Wseq,
    Vhred,
    Dshred,
    Recosa,
}

impl Architecture {
    pub const ALL: [Architecture; 12] = [
        Architecture::Seq2SeqAttn,
        Architecture::Seq2SeqTrs,
        Architecture::Hred,
        Architecture::Wseq,
        Architecture::Vhred,
        Architecture::Dshred,
        Architecture::Recosa,
        Architecture::Hran,
        Architecture::HredWa,
        Architecture::WseqWa,
        Architecture::DshredWa,
        Architecture::RecosaWa,
    ];

    /// Identifier used on the command line and in files.
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Seq2SeqAttn => "seq2seq_attn",
            Architecture::Seq2SeqTrs => "seq2seq_trs",
            Architecture::Hred => "hred",
            Architecture::Wseq => "wseq",
            Architecture::Vhred => "vhred",
            Architecture::Dshred => "dshred",
            Architecture::Recosa => "recosa",
            Architecture::Hran => "hran",
            Architecture::HredWa => "hred_wa",
            Architecture::WseqWa => "wseq_wa",
            Architecture::DshredWa => "dshred_wa",
            Architecture::RecosaWa => "recosa_wa",
        }
    }

    /// Human-readable label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Architecture::Seq2SeqAttn => "Seq2Seq+attn",
            Architecture::Seq2SeqTrs => "Seq2Seq+trs",
            Architecture::Hred => "HRED",
            Architecture::Wseq => "WSeq",
            Architecture::Vhred => "VHRED",
            Architecture::Dshred => "DSHRED",
            Architecture::Recosa => "ReCoSa",
            Architecture::Hran => "HRAN",
            Architecture::HredWa => "HRED+WA",
            Architecture::WseqWa => "WSeq+WA",
            Architecture::DshredWa => "DSHRED+WA",
            Architecture::RecosaWa => "ReCoSa+WA",
        }
    }

    pub fn base(self) -> BaseKind {
        match self {
            Architecture::Seq2SeqAttn => BaseKind::Flat { self_attention: false },
            Architecture::Seq2SeqTrs => BaseKind::Flat { self_attention: true },
            Architecture::Hred | Architecture::Hran | Architecture::HredWa => BaseKind::Hred,
            Architecture::Wseq | Architecture::WseqWa => BaseKind::Wseq,
            Architecture::Vhred => BaseKind::Vhred,
            Architecture::Dshred | Architecture::DshredWa => BaseKind::Dshred,
            Architecture::Recosa | Architecture::RecosaWa => BaseKind::Recosa,
        }
    }

    /// Whether the architecture carries word-level attention by default.
    pub fn has_word_attention(self) -> bool {
        matches!(
            self,
            Architecture::Hran
                | Architecture::HredWa
                | Architecture::WseqWa
                | Architecture::DshredWa
                | Architecture::RecosaWa
        )
    }

    pub fn is_hierarchical(self) -> bool {
        !matches!(self.base(), BaseKind::Flat { .. })
    }

    /// Whether the model contains a self-attention stack.
    pub fn uses_self_attention(self) -> bool {
        matches!(self.base(), BaseKind::Flat { self_attention: true } | BaseKind::Recosa)
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|a| a.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '+'], "_");
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown architecture {s:?}; valid architectures: {}", Self::valid_names())))
    }
}

/// Structural hyperparameters of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub word_attention: bool,
    pub vocab_size: usize,
    pub hidden: usize,
    pub embed: usize,
    pub utterance_layers: usize,
    pub bidirectional: bool,
    pub context_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub transformer_layers: usize,
    pub dropout: f64,
    pub latent_dim: usize,
    pub max_decode_len: usize,
}

impl ModelConfig {
    /// Full-size defaults for `architecture` over a vocabulary of `vocab_size`.
    pub fn new(architecture: Architecture, vocab_size: usize) -> Self {
        ModelConfig {
            architecture,
            word_attention: architecture.has_word_attention(),
            vocab_size,
            hidden: 512,
            embed: 256,
            utterance_layers: 2,
            bidirectional: true,
            context_layers: 1,
            decoder_layers: 2,
            heads: 8,
            d_model: 512,
            transformer_layers: 3,
            dropout: 0.3,
            latent_dim: 64,
            max_decode_len: 30,
        }
    }

    /// Sets `hidden`, `embed` and `d_model` together, keeping the self-attention
    /// width equal to the decoder width.
    pub fn with_sizes(mut self, hidden: usize, embed: usize) -> Self {
        self.hidden = hidden;
        self.d_model = hidden;
        self.embed = embed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let arch = self.architecture;
        if self.word_attention && !arch.has_word_attention() {
            let why = if arch == Architecture::Vhred {
                "its latent variable path has no per-step utterance representations"
            } else {
                "it has no word-level attention variant"
            };
            return Err(Error::Config(format!("{} cannot use word-level attention: {why}", arch.label())));
        }
        if self.vocab_size <= RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary of {} leaves no room beyond the {} reserved tokens",
                self.vocab_size,
                RESERVED.len()
            )));
        }
        let positive = [
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("utterance_layers", self.utterance_layers),
            ("context_layers", self.context_layers),
            ("decoder_layers", self.decoder_layers),
            ("max_decode_len", self.max_decode_len),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if arch.uses_self_attention() {
            if self.d_model != self.hidden {
                return Err(Error::Config(format!(
                    "d_model ({}) must equal hidden ({}) when self-attention states feed the decoder",
                    self.d_model, self.hidden
                )));
            }
            if self.heads == 0 || self.d_model % self.heads != 0 || self.transformer_layers == 0 {
                return Err(Error::Config(format!(
                    "self-attention needs d_model ({}) divisible by heads ({}) and at least one layer",
                    self.d_model, self.heads
                )));
            }
        }
        if arch == Architecture::Vhred && self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        Ok(())
    }
}
