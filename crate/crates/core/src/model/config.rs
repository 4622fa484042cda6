//! Model and training configuration with a flat `key = value` text form.
//!
//! A config file names `variant` and `target` (both required) and may pick a
//! `preset` (`full` or `desk`, default `full`); every other key overrides
//! one preset value. Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::attention::{LocationConfig, MultiHeadConfig};
use crate::error::{Error, Result};
use crate::features::{F0Quantizer, N_ACCENT_TYPES};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Ja,
    Sa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Mel,
    Vocoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Desk,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ja => "JA",
            Variant::Sa => "SA",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "JA" => Ok(Variant::Ja),
            "SA" => Ok(Variant::Sa),
            _ => Err(format!("variant must be JA or SA, got {s:?}")),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Mel => "MEL",
            Target::Vocoder => "VOCODER",
        })
    }
}

impl FromStr for Target {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "MEL" => Ok(Target::Mel),
            "VOCODER" => Ok(Target::Vocoder),
            _ => Err(format!("target must be MEL or VOCODER, got {s:?}")),
        }
    }
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            _ => Err(format!("preset must be full or desk, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub target: Target,
    pub use_accent_labels: bool,
    pub reduction_factor: usize,
    pub n_phonemes: usize,
    /// Accent vocabulary, including the id used on silence and pauses.
    pub n_accents: usize,
    pub phoneme_embed_dim: usize,
    pub accent_embed_dim: usize,
    /// Layer widths after the embedding.
    pub phoneme_prenet: Vec<usize>,
    pub accent_prenet: Vec<usize>,
    pub encoder_prenet_dropout: f64,
    pub conv_bank_k: usize,
    pub conv_bank_channels: usize,
    pub highway_depth: usize,
    pub lstm_dim: usize,
    pub zoneout_rate: f64,
    pub attention_rnn_dim: usize,
    pub attention_dim: usize,
    pub location: LocationConfig,
    pub decoder_prenet: Vec<usize>,
    /// F0-probability feedback pre-net (VOCODER only).
    pub f0_prenet: Vec<usize>,
    pub decoder_prenet_dropout: f64,
    pub decoder_lstm_dim: usize,
    pub decoder_lstm_layers: usize,
    pub mgc_hidden_dim: usize,
    pub encoder_sa: Option<MultiHeadConfig>,
    pub decoder_sa: Option<MultiHeadConfig>,
    pub n_mels: usize,
    pub n_mgc: usize,
    pub f0: F0Quantizer,
    pub f0_loss_weight: f64,
    pub stop_loss_weight: f64,
    pub stop_threshold: f64,
    /// Zero means "derive from the training data".
    pub max_decoder_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay_rate: f64,
    pub lr_decay_interval: u64,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub val_interval: u64,
    pub checkpoint_interval: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

/// Everything a config file describes.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ModelConfig {
    /// Full-scale dimensions.
    pub fn full(variant: Variant, target: Target, use_accent_labels: bool) -> Self {
        let sa = |d| MultiHeadConfig { model_dim: d, n_heads: 2, hops: 1, drop_rate: 0.05 };
        let (pe, ae) = if use_accent_labels { (224, 32) } else { (256, 0) };
        Self {
            variant,
            target,
            use_accent_labels,
            reduction_factor: match target {
                Target::Mel => 2,
                Target::Vocoder => 3,
            },
            n_phonemes: 26,
            n_accents: N_ACCENT_TYPES + 1,
            phoneme_embed_dim: pe,
            accent_embed_dim: ae,
            phoneme_prenet: vec![pe, pe / 2],
            accent_prenet: if use_accent_labels { vec![ae, ae / 2] } else { Vec::new() },
            encoder_prenet_dropout: 0.5,
            conv_bank_k: 8,
            conv_bank_channels: 128,
            highway_depth: 4,
            lstm_dim: 256,
            zoneout_rate: 0.1,
            attention_rnn_dim: 256,
            attention_dim: 128,
            location: LocationConfig { kernel_width: 10, filters: 5 },
            decoder_prenet: vec![256, 128],
            f0_prenet: vec![256, 128],
            decoder_prenet_dropout: 0.5,
            decoder_lstm_dim: 256,
            decoder_lstm_layers: 2,
            mgc_hidden_dim: 256,
            encoder_sa: (variant == Variant::Sa).then(|| sa(32)),
            decoder_sa: (variant == Variant::Sa).then(|| sa(256)),
            n_mels: 80,
            n_mgc: 40,
            f0: F0Quantizer::default(),
            f0_loss_weight: 0.45,
            stop_loss_weight: 1.0,
            stop_threshold: 0.5,
            max_decoder_steps: 0,
        }
    }

    /// Every width divided by four; depths and rates unchanged.
    pub fn desk(variant: Variant, target: Target, use_accent_labels: bool) -> Self {
        let mut c = Self::full(variant, target, use_accent_labels);
        let q = |v: &mut usize| *v = (*v / 4).max(1);
        q(&mut c.phoneme_embed_dim);
        if use_accent_labels {
            q(&mut c.accent_embed_dim);
        }
        for list in [&mut c.phoneme_prenet, &mut c.accent_prenet, &mut c.decoder_prenet, &mut c.f0_prenet] {
            list.iter_mut().for_each(q);
        }
        for v in [
            &mut c.conv_bank_channels,
            &mut c.lstm_dim,
            &mut c.attention_rnn_dim,
            &mut c.attention_dim,
            &mut c.decoder_lstm_dim,
            &mut c.mgc_hidden_dim,
        ] {
            q(v);
        }
        for m in [&mut c.encoder_sa, &mut c.decoder_sa].into_iter().flatten() {
            q(&mut m.model_dim);
        }
        c
    }

    /// Every width at most 8 and a 3-bin F0 quantizer; for gradient checks.
    pub fn micro(variant: Variant, target: Target, use_accent_labels: bool) -> Self {
        let mut c = Self::full(variant, target, use_accent_labels);
        c.phoneme_embed_dim = 6;
        c.phoneme_prenet = vec![6, 4];
        if use_accent_labels {
            c.accent_embed_dim = 4;
            c.accent_prenet = vec![4, 2];
        }
        c.conv_bank_k = 3;
        c.conv_bank_channels = 4;
        c.highway_depth = 2;
        c.lstm_dim = 4;
        c.attention_rnn_dim = 4;
        c.attention_dim = 4;
        c.location = LocationConfig { kernel_width: 3, filters: 2 };
        c.decoder_prenet = vec![5, 4];
        c.f0_prenet = vec![4, 3];
        c.decoder_lstm_dim = 4;
        c.decoder_lstm_layers = 2;
        c.mgc_hidden_dim = 4;
        for m in [&mut c.encoder_sa, &mut c.decoder_sa].into_iter().flatten() {
            m.model_dim = 4;
        }
        c.n_mels = 3;
        c.n_mgc = 3;
        c.f0 = F0Quantizer { n_bins: 3, lo_hz: 60.0, hi_hz: 600.0 };
        c.max_decoder_steps = 16;
        c
    }

    pub fn preset(preset: Preset, variant: Variant, target: Target, use_accent_labels: bool) -> Self {
        match preset {
            Preset::Full => Self::full(variant, target, use_accent_labels),
            Preset::Desk => Self::desk(variant, target, use_accent_labels),
        }
    }

    /// Width of one output frame.
    pub fn frame_dim(&self) -> usize {
        match self.target {
            Target::Mel => self.n_mels,
            Target::Vocoder => self.n_mgc,
        }
    }

    /// Short system code, e.g. `SATMA` for SA, mel, accents.
    pub fn code(&self) -> String {
        format!(
            "{}T{}{}",
            self.variant,
            match self.target {
                Target::Mel => "M",
                Target::Vocoder => "V",
            },
            if self.use_accent_labels { "A" } else { "N" }
        )
    }

    /// All violated constraints.
    pub fn problems(&self) -> Vec<String> {
        let mut e = Vec::new();
        let mut pos = |name: &str, v: usize| {
            if v == 0 {
                e.push(format!("{name} must be positive"));
            }
        };
        pos("reduction_factor", self.reduction_factor);
        pos("n_phonemes", self.n_phonemes);
        pos("phoneme_embed_dim", self.phoneme_embed_dim);
        pos("conv_bank_k", self.conv_bank_k);
        pos("conv_bank_channels", self.conv_bank_channels);
        pos("lstm_dim", self.lstm_dim);
        pos("attention_rnn_dim", self.attention_rnn_dim);
        pos("attention_dim", self.attention_dim);
        pos("location_kernel_width", self.location.kernel_width);
        pos("location_filters", self.location.filters);
        pos("decoder_lstm_dim", self.decoder_lstm_dim);
        pos("decoder_lstm_layers", self.decoder_lstm_layers);
        pos("n_mels", self.n_mels);
        pos("n_mgc", self.n_mgc);
        pos("mgc_hidden_dim", self.mgc_hidden_dim);
        if self.use_accent_labels {
            pos("accent_embed_dim", self.accent_embed_dim);
            pos("n_accents", self.n_accents);
            if self.accent_prenet.is_empty() {
                e.push("accent_prenet_dims must list at least one layer".into());
            }
        }
        for (name, dims) in [
            ("phoneme_prenet_dims", &self.phoneme_prenet),
            ("decoder_prenet_dims", &self.decoder_prenet),
            ("f0_prenet_dims", &self.f0_prenet),
        ] {
            if dims.is_empty() || dims.contains(&0) {
                e.push(format!("{name} must list positive layer widths"));
            }
        }
        if self.use_accent_labels && self.accent_prenet.contains(&0) {
            e.push("accent_prenet_dims must list positive layer widths".into());
        }
        for (name, v, lo, hi_open) in [
            ("encoder_prenet_dropout", self.encoder_prenet_dropout, 0.0, 1.0),
            ("decoder_prenet_dropout", self.decoder_prenet_dropout, 0.0, 1.0),
            ("zoneout_rate", self.zoneout_rate, 0.0, 1.0),
        ] {
            if !(v >= lo && v < hi_open) {
                e.push(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.stop_threshold > 0.0 && self.stop_threshold < 1.0) {
            e.push(format!("stop_threshold must lie in (0, 1), got {}", self.stop_threshold));
        }
        if !(self.f0_loss_weight >= 0.0 && self.f0_loss_weight.is_finite()) {
            e.push("f0_loss_weight must be finite and nonnegative".into());
        }
        if !(self.stop_loss_weight >= 0.0 && self.stop_loss_weight.is_finite()) {
            e.push("stop_loss_weight must be finite and nonnegative".into());
        }
        if let Err(err) = F0Quantizer::new(self.f0.n_bins, self.f0.lo_hz, self.f0.hi_hz) {
            e.push(err.to_string());
        }
        match self.variant {
            Variant::Ja => {
                if self.encoder_sa.is_some() || self.decoder_sa.is_some() {
                    e.push("variant JA has no self-attention blocks".into());
                }
            }
            Variant::Sa => {
                for (name, m) in [("encoder_sa", &self.encoder_sa), ("decoder_sa", &self.decoder_sa)] {
                    match m {
                        None => e.push(format!("variant SA needs {name} settings")),
                        Some(m) => {
                            if let Err(err) = m.validate() {
                                e.push(format!("{name}: {err}"));
                            }
                        }
                    }
                }
            }
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset, target: Target) -> Self {
        let desk = preset == Preset::Desk;
        Self {
            learning_rate: match target {
                Target::Mel => 0.0005,
                Target::Vocoder => 0.002,
            },
            lr_decay_rate: 0.5,
            lr_decay_interval: if desk { 500 } else { 10_000 },
            batch_size: if desk { 8 } else { 32 },
            grad_clip_norm: 1.0,
            val_interval: if desk { 100 } else { 1000 },
            checkpoint_interval: if desk { 500 } else { 5000 },
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut e = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            e.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lr_decay_rate > 0.0 && self.lr_decay_rate <= 1.0) {
            e.push(format!("lr_decay_rate must lie in (0, 1], got {}", self.lr_decay_rate));
        }
        if self.lr_decay_interval == 0 {
            e.push("lr_decay_interval must be positive".into());
        }
        if self.batch_size == 0 {
            e.push("batch_size must be positive".into());
        }
        if !(self.grad_clip_norm > 0.0) {
            e.push("grad_clip_norm must be positive".into());
        }
        if self.val_interval == 0 {
            e.push("val_interval must be positive".into());
        }
        if self.checkpoint_interval == 0 {
            e.push("checkpoint_interval must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            e.push("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_epsilon > 0.0) {
            e.push("adam_epsilon must be positive".into());
        }
        e
    }
}

fn parse_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"))).collect()
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got {s:?}")),
    }
}

struct Fields {
    map: BTreeMap<String, (usize, String)>,
    errors: Vec<String>,
}

impl Fields {
    fn take<T>(&mut self, key: &str, slot: &mut T, parse: impl FnOnce(&str) -> std::result::Result<T, String>) {
        if let Some((line, v)) = self.map.remove(key) {
            match parse(&v) {
                Ok(x) => *slot = x,
                Err(e) => self.errors.push(format!("line {line}: {key}: {e}")),
            }
        }
    }

    fn num<T: FromStr>(&mut self, key: &str, slot: &mut T)
    where
        T::Err: fmt::Display,
    {
        self.take(key, slot, |s| s.parse::<T>().map_err(|e| format!("{s:?}: {e}")));
    }
}

const SA_FIELDS: [&str; 4] = ["dim", "heads", "hops", "dropout"];

impl RunConfig {
    pub fn preset(preset: Preset, variant: Variant, target: Target, use_accent_labels: bool) -> Self {
        Self {
            model: ModelConfig::preset(preset, variant, target, use_accent_labels),
            train: TrainConfig::preset(preset, target),
        }
    }

    /// Parses the text form. Every problem found is reported in one
    /// [`Error::Config`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut errors = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    let k = k.trim().to_string();
                    if map.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                        errors.push(format!("line {}: duplicate key {k}", i + 1));
                    }
                }
                None => errors.push(format!("line {}: expected `key = value`, got {line:?}", i + 1)),
            }
        }
        let mut f = Fields { map, errors };

        let mut variant = None;
        let mut target = None;
        let mut preset = Preset::Full;
        let mut accents = true;
        f.take("variant", &mut variant, |s| s.parse().map(Some));
        f.take("target", &mut target, |s| s.parse().map(Some));
        f.take("preset", &mut preset, str::parse);
        f.take("use_accent_labels", &mut accents, parse_bool);
        if variant.is_none() {
            f.errors.push("missing required key variant".into());
        }
        if target.is_none() {
            f.errors.push("missing required key target".into());
        }
        let (Some(variant), Some(target)) = (variant, target) else {
            // Report unknown keys too, against a nominal base.
            let mut base = RunConfig::preset(preset, Variant::Sa, Target::Mel, accents);
            base.apply(&mut f);
            return Err(Error::Config(f.finish()));
        };
        let mut cfg = RunConfig::preset(preset, variant, target, accents);
        if variant == Variant::Ja {
            let keys: Vec<String> = f
                .map
                .keys()
                .filter(|k| k.starts_with("encoder_sa_") || k.starts_with("decoder_sa_"))
                .cloned()
                .collect();
            for k in keys {
                f.map.remove(&k);
                f.errors.push(format!("{k}: variant JA takes no self-attention settings"));
            }
        }
        cfg.apply(&mut f);
        let mut errors = f.finish();
        errors.extend(cfg.model.problems());
        errors.extend(cfg.train.problems());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    fn apply(&mut self, f: &mut Fields) {
        let m = &mut self.model;
        f.num("reduction_factor", &mut m.reduction_factor);
        f.num("n_phonemes", &mut m.n_phonemes);
        f.num("n_accents", &mut m.n_accents);
        f.num("phoneme_embed_dim", &mut m.phoneme_embed_dim);
        f.num("accent_embed_dim", &mut m.accent_embed_dim);
        f.take("phoneme_prenet_dims", &mut m.phoneme_prenet, parse_list);
        f.take("accent_prenet_dims", &mut m.accent_prenet, parse_list);
        f.num("encoder_prenet_dropout", &mut m.encoder_prenet_dropout);
        f.num("conv_bank_k", &mut m.conv_bank_k);
        f.num("conv_bank_channels", &mut m.conv_bank_channels);
        f.num("highway_depth", &mut m.highway_depth);
        f.num("lstm_dim", &mut m.lstm_dim);
        f.num("zoneout_rate", &mut m.zoneout_rate);
        f.num("attention_rnn_dim", &mut m.attention_rnn_dim);
        f.num("attention_dim", &mut m.attention_dim);
        f.num("location_kernel_width", &mut m.location.kernel_width);
        f.num("location_filters", &mut m.location.filters);
        f.take("decoder_prenet_dims", &mut m.decoder_prenet, parse_list);
        f.take("f0_prenet_dims", &mut m.f0_prenet, parse_list);
        f.num("decoder_prenet_dropout", &mut m.decoder_prenet_dropout);
        f.num("decoder_lstm_dim", &mut m.decoder_lstm_dim);
        f.num("decoder_lstm_layers", &mut m.decoder_lstm_layers);
        f.num("mgc_hidden_dim", &mut m.mgc_hidden_dim);
        for (prefix, slot) in [("encoder_sa", &mut m.encoder_sa), ("decoder_sa", &mut m.decoder_sa)] {
            if let Some(sa) = slot {
                f.num(&format!("{prefix}_dim"), &mut sa.model_dim);
                f.num(&format!("{prefix}_heads"), &mut sa.n_heads);
                f.num(&format!("{prefix}_hops"), &mut sa.hops);
                f.num(&format!("{prefix}_dropout"), &mut sa.drop_rate);
            }
        }
        f.num("n_mels", &mut m.n_mels);
        f.num("n_mgc", &mut m.n_mgc);
        f.num("f0_bins", &mut m.f0.n_bins);
        f.num("f0_min_hz", &mut m.f0.lo_hz);
        f.num("f0_max_hz", &mut m.f0.hi_hz);
        f.num("f0_loss_weight", &mut m.f0_loss_weight);
        f.num("stop_loss_weight", &mut m.stop_loss_weight);
        f.num("stop_threshold", &mut m.stop_threshold);
        f.num("max_decoder_steps", &mut m.max_decoder_steps);
        let t = &mut self.train;
        f.num("learning_rate", &mut t.learning_rate);
        f.num("lr_decay_rate", &mut t.lr_decay_rate);
        f.num("lr_decay_interval", &mut t.lr_decay_interval);
        f.num("batch_size", &mut t.batch_size);
        f.num("grad_clip_norm", &mut t.grad_clip_norm);
        f.num("val_interval", &mut t.val_interval);
        f.num("checkpoint_interval", &mut t.checkpoint_interval);
        f.num("adam_beta1", &mut t.adam_beta1);
        f.num("adam_beta2", &mut t.adam_beta2);
        f.num("adam_epsilon", &mut t.adam_epsilon);
    }

    /// Complete text form; parsing it yields `self` again.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("variant", m.variant.to_string());
        kv("target", m.target.to_string());
        kv("use_accent_labels", m.use_accent_labels.to_string());
        kv("reduction_factor", m.reduction_factor.to_string());
        kv("n_phonemes", m.n_phonemes.to_string());
        kv("n_accents", m.n_accents.to_string());
        kv("phoneme_embed_dim", m.phoneme_embed_dim.to_string());
        kv("accent_embed_dim", m.accent_embed_dim.to_string());
        kv("phoneme_prenet_dims", fmt_list(&m.phoneme_prenet));
        kv("accent_prenet_dims", fmt_list(&m.accent_prenet));
        kv("encoder_prenet_dropout", m.encoder_prenet_dropout.to_string());
        kv("conv_bank_k", m.conv_bank_k.to_string());
        kv("conv_bank_channels", m.conv_bank_channels.to_string());
        kv("highway_depth", m.highway_depth.to_string());
        kv("lstm_dim", m.lstm_dim.to_string());
        kv("zoneout_rate", m.zoneout_rate.to_string());
        kv("attention_rnn_dim", m.attention_rnn_dim.to_string());
        kv("attention_dim", m.attention_dim.to_string());
        kv("location_kernel_width", m.location.kernel_width.to_string());
        kv("location_filters", m.location.filters.to_string());
        kv("decoder_prenet_dims", fmt_list(&m.decoder_prenet));
        kv("f0_prenet_dims", fmt_list(&m.f0_prenet));
        kv("decoder_prenet_dropout", m.decoder_prenet_dropout.to_string());
        kv("decoder_lstm_dim", m.decoder_lstm_dim.to_string());
        kv("decoder_lstm_layers", m.decoder_lstm_layers.to_string());
        kv("mgc_hidden_dim", m.mgc_hidden_dim.to_string());
        for (prefix, sa) in [("encoder_sa", &m.encoder_sa), ("decoder_sa", &m.decoder_sa)] {
            if let Some(sa) = sa {
                let vals =
                    [sa.model_dim.to_string(), sa.n_heads.to_string(), sa.hops.to_string(), sa.drop_rate.to_string()];
                for (field, v) in SA_FIELDS.iter().zip(vals) {
                    kv(&format!("{prefix}_{field}"), v);
                }
            }
        }
        kv("n_mels", m.n_mels.to_string());
        kv("n_mgc", m.n_mgc.to_string());
        kv("f0_bins", m.f0.n_bins.to_string());
        kv("f0_min_hz", m.f0.lo_hz.to_string());
        kv("f0_max_hz", m.f0.hi_hz.to_string());
        kv("f0_loss_weight", m.f0_loss_weight.to_string());
        kv("stop_loss_weight", m.stop_loss_weight.to_string());
        kv("stop_threshold", m.stop_threshold.to_string());
        kv("max_decoder_steps", m.max_decoder_steps.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("lr_decay_rate", t.lr_decay_rate.to_string());
        kv("lr_decay_interval", t.lr_decay_interval.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("grad_clip_norm", t.grad_clip_norm.to_string());
        kv("val_interval", t.val_interval.to_string());
        kv("checkpoint_interval", t.checkpoint_interval.to_string());
        kv("adam_beta1", t.adam_beta1.to_string());
        kv("adam_beta2", t.adam_beta2.to_string());
        kv("adam_epsilon", t.adam_epsilon.to_string());
        s
    }
}

impl Fields {
    fn finish(&mut self) -> Vec<String> {
        let mut errors = std::mem::take(&mut self.errors);
        for (k, (line, _)) in std::mem::take(&mut self.map) {
            errors.push(format!("line {line}: unknown key {k}"));
        }
        errors
    }
}
