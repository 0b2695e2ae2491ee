//! INI-style pipeline configuration.
//!
//! ```text
//! [global]
//! seed = 1
//! [adam]
//! peak_lr = 6e-4
//! ```
//!
//! Every key has a default, unknown sections and keys are rejected, and
//! `section.key=value` overrides are applied after the file. Within
//! `[model]`, `preset` is applied before the individual keys whatever
//! their order. [`PipelineConfig::render`] writes every resolved value and
//! parses back to an equal config.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{CleaningConfig, DropPattern, UnicodeForm};
use crate::finetune::GridSearchConfig;
use crate::mlm::MaskingConfig;
use crate::model::ModelConfig;
use crate::nn::NormPlacement;
use crate::optim::AdamConfig;
use crate::pretrain::TrainConfig;
use crate::wsd::{EncoderLayer, SubwordPooling, WsdConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    Base,
    Large,
    Toy,
}

impl ModelPreset {
    pub fn name(self) -> &'static str {
        match self {
            ModelPreset::Base => "base",
            ModelPreset::Large => "large",
            ModelPreset::Toy => "toy",
        }
    }

    /// The preset with `vocab_size` left at 0 (taken from the vocabulary).
    pub fn config(self) -> ModelConfig {
        match self {
            ModelPreset::Base => ModelConfig::base(0),
            ModelPreset::Large => ModelConfig::large(0),
            ModelPreset::Toy => ModelConfig::toy(0),
        }
    }
}

impl FromStr for ModelPreset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "base" => Ok(ModelPreset::Base),
            "large" => Ok(ModelPreset::Large),
            "toy" => Ok(ModelPreset::Toy),
            other => Err(format!("unknown preset `{other}` (expected base, large or toy)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads for the data stages; 0 uses all cores.
    pub workers: usize,
    pub cleaning: CleaningConfig,
    pub bpe_merges: usize,
    pub masking: MaskingConfig,
    pub preset: ModelPreset,
    /// `vocab_size` 0 means "size of the BPE vocabulary".
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub train: TrainConfig,
    pub grid: GridSearchConfig,
    pub wsd: WsdConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            cleaning: CleaningConfig::default(),
            bpe_merges: 50_000,
            masking: MaskingConfig::default(),
            preset: ModelPreset::Base,
            model: ModelPreset::Base.config(),
            adam: AdamConfig::default(),
            train: TrainConfig::default(),
            grid: GridSearchConfig::default(),
            wsd: WsdConfig::default(),
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse).collect()
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn placement_name(p: NormPlacement) -> &'static str {
    match p {
        NormPlacement::PreNorm => "pre",
        NormPlacement::PostNorm => "post",
    }
}

fn pooling_name(p: SubwordPooling) -> &'static str {
    match p {
        SubwordPooling::Mean => "mean",
        SubwordPooling::First => "first",
    }
}

fn layer_name(l: EncoderLayer) -> &'static str {
    match l {
        EncoderLayer::Final => "final",
        EncoderLayer::Penultimate => "penultimate",
    }
}

/// One `key = value` assignment and where it came from (line 0: override).
#[derive(Debug, Clone)]
struct Entry {
    section: String,
    key: String,
    value: String,
    line: usize,
}

impl PipelineConfig {
    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        match (section, key) {
            ("global", "seed") => self.seed = parse(v)?,
            ("global", "workers") => self.workers = parse(v)?,

            ("cleaning", "min_tokens") => self.cleaning.min_tokens = parse(v)?,
            ("cleaning", "max_tokens") => self.cleaning.max_tokens = parse(v)?,
            ("cleaning", "max_nonalpha_ratio") => self.cleaning.max_nonalpha_ratio = parse(v)?,
            ("cleaning", "max_digit_ratio") => self.cleaning.max_digit_ratio = parse(v)?,
            ("cleaning", "drop_patterns") => self.cleaning.drop_patterns = parse_list::<DropPattern>(v)?,
            ("cleaning", "dedup_window") => self.cleaning.dedup_window = parse(v)?,
            ("cleaning", "lowercase") => self.cleaning.lowercase = parse_bool(v)?,
            ("cleaning", "unicode_form") => self.cleaning.unicode_form = parse::<UnicodeForm>(v)?,

            ("bpe", "merges") => self.bpe_merges = parse(v)?,

            ("masking", "p_select") => self.masking.p_select = parse(v)?,
            ("masking", "p_mask") => self.masking.p_mask = parse(v)?,
            ("masking", "p_random") => self.masking.p_random = parse(v)?,
            ("masking", "p_keep") => self.masking.p_keep = parse(v)?,
            ("masking", "max_len") => self.masking.max_len = parse(v)?,

            ("model", "preset") => {
                self.preset = parse(v)?;
                self.model = self.preset.config();
            }
            ("model", "layers") => self.model.layers = parse(v)?,
            ("model", "hidden") => self.model.hidden = parse(v)?,
            ("model", "heads") => self.model.heads = parse(v)?,
            ("model", "d_ff") => self.model.d_ff = parse(v)?,
            ("model", "vocab_size") => self.model.vocab_size = parse(v)?,
            ("model", "max_positions") => self.model.max_positions = parse(v)?,
            ("model", "dropout") => self.model.dropout = parse(v)?,
            ("model", "tie_mlm_head") => self.model.tie_mlm_head = parse_bool(v)?,
            ("model", "norm_placement") => {
                self.model.norm_placement = match v {
                    "pre" => NormPlacement::PreNorm,
                    "post" => NormPlacement::PostNorm,
                    _ => return Err(format!("expected pre or post, got `{v}`")),
                }
            }

            ("adam", "beta1") => self.adam.beta1 = parse(v)?,
            ("adam", "beta2") => self.adam.beta2 = parse(v)?,
            ("adam", "epsilon") => self.adam.epsilon = parse(v)?,
            ("adam", "weight_decay") => self.adam.weight_decay = parse(v)?,
            ("adam", "peak_lr") => self.adam.peak_lr = parse(v)?,
            ("adam", "warmup_steps") => self.adam.warmup_steps = parse(v)?,
            ("adam", "total_steps") => self.adam.total_steps = parse(v)?,
            ("adam", "accumulation") => self.adam.accumulation = parse(v)?,

            ("train", "micro_batch") => self.train.micro_batch = parse(v)?,
            ("train", "checkpoint_every") => self.train.checkpoint_every = parse(v)?,
            ("train", "clip_norm") => {
                self.train.clip_norm = match v {
                    "none" | "off" => None,
                    _ => Some(parse(v)?),
                }
            }

            ("grid", "learning_rates") => self.grid.learning_rates = parse_list(v)?,
            ("grid", "epochs") => self.grid.epochs = parse(v)?,
            ("grid", "batch_size") => self.grid.batch_size = parse(v)?,
            ("grid", "max_len") => self.grid.max_len = parse(v)?,

            ("wsd", "pooling") => {
                self.wsd.target.pooling = match v {
                    "mean" => SubwordPooling::Mean,
                    "first" => SubwordPooling::First,
                    _ => return Err(format!("expected mean or first, got `{v}`")),
                }
            }
            ("wsd", "layer") => {
                self.wsd.target.layer = match v {
                    "final" => EncoderLayer::Final,
                    "penultimate" => EncoderLayer::Penultimate,
                    _ => return Err(format!("expected final or penultimate, got `{v}`")),
                }
            }
            ("wsd", "awe_window") => self.wsd.awe_window = parse(v)?,
            ("wsd", "noun_models") => self.wsd.noun_models = parse(v)?,
            ("wsd", "noun_layers") => self.wsd.noun.layers = parse(v)?,
            ("wsd", "noun_heads") => self.wsd.noun.heads = parse(v)?,
            ("wsd", "noun_d_ff") => self.wsd.noun.d_ff = parse(v)?,
            ("wsd", "noun_dropout") => self.wsd.noun.dropout = parse(v)?,
            ("wsd", "noun_lr") => self.wsd.noun.lr = parse(v)?,
            ("wsd", "noun_epochs") => self.wsd.noun.epochs = parse(v)?,
            ("wsd", "noun_batch_size") => self.wsd.noun.batch_size = parse(v)?,
            ("wsd", "finetune_encoder") => self.wsd.noun.finetune_encoder = parse_bool(v)?,

            _ => return Err("unknown key".to_string()),
        }
        Ok(())
    }

    fn apply(entries: &[Entry]) -> Result<Self> {
        let mut cfg = Self::default();
        // presets first so explicit model keys refine them
        let (presets, rest): (Vec<&Entry>, Vec<&Entry>) =
            entries.iter().partition(|e| e.section == "model" && e.key == "preset");
        for e in presets.into_iter().chain(rest) {
            cfg.set(&e.section, &e.key, &e.value).map_err(|msg| Error::Config {
                key: format!("{}.{}", e.section, e.key),
                line: e.line,
                msg,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn entries(text: &str) -> Result<Vec<Entry>> {
        let mut section: Option<String> = None;
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') || l.starts_with(';') {
                continue;
            }
            if let Some(name) = l.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config { key: format!("[{name}]"), line, msg: "unknown section".into() });
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((k, v)) = l.split_once('=') else {
                return Err(Error::Config { key: l.to_string(), line, msg: "expected `key = value`".into() });
            };
            let Some(sec) = &section else {
                return Err(Error::Config { key: k.trim().to_string(), line, msg: "key outside of any section".into() });
            };
            out.push(Entry { section: sec.clone(), key: k.trim().to_string(), value: v.trim().to_string(), line });
        }
        Ok(out)
    }

    fn override_entries(overrides: &[String]) -> Result<Vec<Entry>> {
        overrides
            .iter()
            .map(|o| {
                let bad = || Error::Config { key: o.clone(), line: 0, msg: "expected section.key=value".into() };
                let (k, v) = o.split_once('=').ok_or_else(bad)?;
                let (s, k) = k.trim().split_once('.').ok_or_else(bad)?;
                Ok(Entry { section: s.to_string(), key: k.to_string(), value: v.trim().to_string(), line: 0 })
            })
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::apply(&Self::entries(text)?)
    }

    /// File values, then `section.key=value` overrides.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut entries = Self::entries(text)?;
        entries.extend(Self::override_entries(overrides)?);
        Self::apply(&entries)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse_with_overrides(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.cleaning.validate()?;
        self.masking.validate()?;
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = 1;
        }
        m.validate()?;
        self.adam.validate()?;
        self.grid.validate()?;
        if self.train.micro_batch == 0 {
            return Err(Error::InvalidConfig("train.micro_batch must be at least 1".into()));
        }
        if self.wsd.awe_window == 0 || self.wsd.noun_models == 0 {
            return Err(Error::InvalidConfig("wsd.awe_window and wsd.noun_models must be at least 1".into()));
        }
        Ok(())
    }

    /// Model config with the vocabulary size filled in.
    pub fn model_for_vocab(&self, vocab_size: usize) -> ModelConfig {
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = vocab_size;
        }
        m
    }

    /// Every resolved value, as a config file.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let c = &self.cleaning;
        let patterns: Vec<&str> = c.drop_patterns.iter().map(|p| p.name()).collect();
        let _ = write!(
            s,
            "[global]\nseed = {}\nworkers = {}\n\n\
             [cleaning]\nmin_tokens = {}\nmax_tokens = {}\nmax_nonalpha_ratio = {}\nmax_digit_ratio = {}\n\
             drop_patterns = {}\ndedup_window = {}\nlowercase = {}\nunicode_form = {}\n\n\
             [bpe]\nmerges = {}\n\n",
            self.seed,
            self.workers,
            c.min_tokens,
            c.max_tokens,
            c.max_nonalpha_ratio,
            c.max_digit_ratio,
            patterns.join(", "),
            c.dedup_window,
            c.lowercase,
            c.unicode_form,
            self.bpe_merges,
        );
        let m = &self.masking;
        let _ = write!(
            s,
            "[masking]\np_select = {}\np_mask = {}\np_random = {}\np_keep = {}\nmax_len = {}\n\n",
            m.p_select, m.p_mask, m.p_random, m.p_keep, m.max_len
        );
        let m = &self.model;
        let _ = write!(
            s,
            "[model]\npreset = {}\nlayers = {}\nhidden = {}\nheads = {}\nd_ff = {}\nvocab_size = {}\n\
             max_positions = {}\ndropout = {}\ntie_mlm_head = {}\nnorm_placement = {}\n\n",
            self.preset.name(),
            m.layers,
            m.hidden,
            m.heads,
            m.d_ff,
            m.vocab_size,
            m.max_positions,
            m.dropout,
            m.tie_mlm_head,
            placement_name(m.norm_placement),
        );
        let a = &self.adam;
        let _ = write!(
            s,
            "[adam]\nbeta1 = {}\nbeta2 = {}\nepsilon = {:e}\nweight_decay = {}\npeak_lr = {:e}\n\
             warmup_steps = {}\ntotal_steps = {}\naccumulation = {}\n\n",
            a.beta1, a.beta2, a.epsilon, a.weight_decay, a.peak_lr, a.warmup_steps, a.total_steps, a.accumulation
        );
        let t = &self.train;
        let clip = t.clip_norm.map_or("none".to_string(), |c| c.to_string());
        let _ = write!(
            s,
            "[train]\nmicro_batch = {}\ncheckpoint_every = {}\nclip_norm = {}\n\n",
            t.micro_batch, t.checkpoint_every, clip
        );
        let g = &self.grid;
        let lrs: Vec<String> = g.learning_rates.iter().map(|x| format!("{x:e}")).collect();
        let _ = write!(
            s,
            "[grid]\nlearning_rates = {}\nepochs = {}\nbatch_size = {}\nmax_len = {}\n\n",
            join(&lrs),
            g.epochs,
            g.batch_size,
            g.max_len
        );
        let w = &self.wsd;
        let _ = write!(
            s,
            "[wsd]\npooling = {}\nlayer = {}\nawe_window = {}\nnoun_models = {}\nnoun_layers = {}\n\
             noun_heads = {}\nnoun_d_ff = {}\nnoun_dropout = {}\nnoun_lr = {:e}\nnoun_epochs = {}\n\
             noun_batch_size = {}\nfinetune_encoder = {}\n",
            pooling_name(w.target.pooling),
            layer_name(w.target.layer),
            w.awe_window,
            w.noun_models,
            w.noun.layers,
            w.noun.heads,
            w.noun.d_ff,
            w.noun.dropout,
            w.noun.lr,
            w.noun.epochs,
            w.noun.batch_size,
            w.noun.finetune_encoder,
        );
        s
    }
}

const SECTIONS: [&str; 9] = ["global", "cleaning", "bpe", "masking", "model", "adam", "train", "grid", "wsd"];
