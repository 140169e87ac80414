//! Flat `key = value` model configuration.
//!
//! The format is a plain text file: one `key = value` pair per line, `#`
//! comments, blank lines ignored. Lists are comma-separated. Unknown keys
//! are rejected so typos fail loudly instead of training the wrong model.

use crate::error::{invalid, Result};
use crate::fasm::FsmOrder;

/// Which prediction head sits on top of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// 1x1 conv to f^2*K channels, pixel-shuffle to full resolution, then a
    /// per-map spatial softmax. Upsamples by rearrangement only.
    Duc,
    /// Baseline: three stride-2 4x4 transposed convolutions followed by a
    /// 1x1 conv to K maps.
    SbnDeconv,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<HeadKind> {
        match s {
            "duc" => Ok(HeadKind::Duc),
            "sbn-deconv" | "sbn" => Ok(HeadKind::SbnDeconv),
            other => invalid(format!("unknown head {other:?} (expected duc or sbn-deconv)")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Duc => "duc",
            HeadKind::SbnDeconv => "sbn-deconv",
        }
    }
}

/// Complete structural description of a network. Everything needed to
/// rebuild the module tree; training hyperparameters live elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Output channel count of each encoder stage.
    pub stage_widths: Vec<usize>,
    /// Bottleneck count per stage; same length as `stage_widths`.
    pub blocks: Vec<usize>,
    /// Split count used by the multi-scale aggregation convs.
    pub s: usize,
    /// Total downsampling factor from input to the deepest feature map.
    pub f: usize,
    /// Number of keypoints.
    pub k: usize,
    pub head: HeadKind,
    /// Enable the low/high feature fusion branch.
    pub ffm: bool,
    /// When fusion is on and the head is duc, feed the fused features to the
    /// head; otherwise fusion feeds only the auxiliary supervision path.
    pub ffm_to_head: bool,
    /// Auxiliary supervision loss weight; 0 disables the auxiliary head.
    pub aux_weight: f64,
    /// Channel reduction ratio of the channel-attention squeeze.
    pub r_fc: usize,
    /// Use split-aggregation convs inside bottlenecks (false = plain
    /// reduce/3x3/expand path).
    pub fam: bool,
    /// Attach the attention block to each bottleneck.
    pub fsm: bool,
    pub fsm_order: FsmOrder,
    /// Filter count of the baseline head's transposed convolutions.
    pub sbn_filters: usize,
    pub input_channels: usize,
}

impl Default for NetworkConfig {
    /// Desk-scale default: stem stride 2 plus three stages at strides
    /// 1/2/2, so f = 8.
    fn default() -> Self {
        NetworkConfig {
            stage_widths: vec![16, 32, 64],
            blocks: vec![1, 1, 1],
            s: 4,
            f: 8,
            k: 15,
            head: HeadKind::Duc,
            ffm: true,
            ffm_to_head: true,
            aux_weight: 0.5,
            r_fc: 4,
            fam: true,
            fsm: true,
            fsm_order: FsmOrder::Parallel,
            sbn_filters: 256,
            input_channels: 1,
        }
    }
}

impl NetworkConfig {
    /// Smallest configuration that still exercises every block: two stages,
    /// f = 4, all branches on. Gradient checks and minutes-scale CPU
    /// training runs use this.
    pub fn tiny() -> NetworkConfig {
        NetworkConfig {
            stage_widths: vec![8, 16],
            blocks: vec![1, 1],
            s: 2,
            f: 4,
            k: 15,
            head: HeadKind::Duc,
            ffm: true,
            ffm_to_head: true,
            aux_weight: 0.5,
            r_fc: 2,
            fam: true,
            fsm: true,
            fsm_order: FsmOrder::Parallel,
            sbn_filters: 16,
            input_channels: 1,
        }
    }
}

pub(crate) fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| crate::error::Error::Validation(format!("{key}: bad count {v:?}")))
}

pub(crate) fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| crate::error::Error::Validation(format!("{key}: bad number {v:?}")))
}

pub(crate) fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => invalid(format!("{key}: bad flag {v:?} (expected true/false)")),
    }
}

pub(crate) fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse_usize(key, p.trim())).collect()
}

fn join_list(v: &[usize]) -> String {
    v.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
}

impl NetworkConfig {
    /// Parse the flat text format. Starts from defaults, so a config file
    /// only needs the keys it changes. Later lines win on repeats.
    pub fn parse(text: &str) -> Result<NetworkConfig> {
        let mut cfg = NetworkConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| {
                    crate::error::Error::Validation(format!(
                        "config line {}: expected key = value, got {raw:?}",
                        lineno + 1
                    ))
                })?;
            let (key, value) = (key.trim(), value.trim());
            match cfg.apply_key(key, value) {
                Some(r) => r?,
                None => return invalid(format!("unknown config key {key:?}")),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply a single `key = value` pair; `None` means the key is not one of
    /// this config's. Lets composite config files mix in keys owned by other
    /// sections without this type knowing about them.
    pub fn apply_key(&mut self, key: &str, value: &str) -> Option<Result<()>> {
        let r = match key {
            "stage_widths" => parse_list(key, value).map(|v| self.stage_widths = v),
            "blocks" => parse_list(key, value).map(|v| self.blocks = v),
            "s" => parse_usize(key, value).map(|v| self.s = v),
            "f" => parse_usize(key, value).map(|v| self.f = v),
            "K" | "k" => parse_usize(key, value).map(|v| self.k = v),
            "head" => HeadKind::parse(value).map(|v| self.head = v),
            "ffm" => parse_bool(key, value).map(|v| self.ffm = v),
            "ffm_to_head" => parse_bool(key, value).map(|v| self.ffm_to_head = v),
            "aux_weight" => parse_f64(key, value).map(|v| self.aux_weight = v),
            "r_fc" => parse_usize(key, value).map(|v| self.r_fc = v),
            "fam" => parse_bool(key, value).map(|v| self.fam = v),
            "fsm" => parse_bool(key, value).map(|v| self.fsm = v),
            "fsm_order" => FsmOrder::parse(value).map(|v| self.fsm_order = v),
            "sbn_filters" => parse_usize(key, value).map(|v| self.sbn_filters = v),
            "input_channels" => parse_usize(key, value).map(|v| self.input_channels = v),
            _ => return None,
        };
        Some(r)
    }

    /// Inverse of [`NetworkConfig::parse`]: emits every key.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("stage_widths = {}\n", join_list(&self.stage_widths)));
        out.push_str(&format!("blocks = {}\n", join_list(&self.blocks)));
        out.push_str(&format!("s = {}\n", self.s));
        out.push_str(&format!("f = {}\n", self.f));
        out.push_str(&format!("K = {}\n", self.k));
        out.push_str(&format!("head = {}\n", self.head.name()));
        out.push_str(&format!("ffm = {}\n", self.ffm));
        out.push_str(&format!("ffm_to_head = {}\n", self.ffm_to_head));
        out.push_str(&format!("aux_weight = {}\n", self.aux_weight));
        out.push_str(&format!("r_fc = {}\n", self.r_fc));
        out.push_str(&format!("fam = {}\n", self.fam));
        out.push_str(&format!("fsm = {}\n", self.fsm));
        out.push_str(&format!("fsm_order = {}\n", self.fsm_order.name()));
        out.push_str(&format!("sbn_filters = {}\n", self.sbn_filters));
        out.push_str(&format!("input_channels = {}\n", self.input_channels));
        out
    }

    /// Stride of the stem convolution.
    pub fn stem_stride(&self) -> usize {
        self.f.min(2)
    }

    /// Per-stage strides: stage 1 keeps resolution, later stages halve it
    /// until the declared downsampling factor is reached.
    pub fn stage_strides(&self) -> Result<Vec<usize>> {
        let stem = self.stem_stride();
        let mut remaining = self.f / stem;
        let mut strides = vec![1usize];
        while remaining > 1 {
            if remaining % 2 != 0 {
                return invalid(format!("f = {} is not a power of two", self.f));
            }
            strides.push(2);
            remaining /= 2;
        }
        if strides.len() > self.stage_widths.len() {
            return invalid(format!(
                "f = {} needs at least {} stages, config has {}",
                self.f,
                strides.len(),
                self.stage_widths.len()
            ));
        }
        strides.resize(self.stage_widths.len(), 1);
        Ok(strides)
    }

    /// Bottleneck mid width for a stage output width: half the output,
    /// floored at `s` and rounded up so the split count divides it.
    pub fn mid_width(&self, out_c: usize) -> usize {
        let base = (out_c / 2).max(self.s);
        base.div_ceil(self.s) * self.s
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() {
            return invalid("stage_widths must not be empty");
        }
        if self.stage_widths.len() != self.blocks.len() {
            return invalid(format!(
                "stage_widths has {} entries but blocks has {}",
                self.stage_widths.len(),
                self.blocks.len()
            ));
        }
        if self.stage_widths.iter().any(|&w| w == 0) || self.blocks.iter().any(|&b| b == 0) {
            return invalid("stage widths and block counts must be positive");
        }
        if self.s < 2 {
            return invalid("s must be at least 2");
        }
        if self.f == 0 {
            return invalid("f must be positive");
        }
        if self.k == 0 {
            return invalid("K must be at least 1");
        }
        if self.r_fc == 0 || self.sbn_filters == 0 || self.input_channels == 0 {
            return invalid("r_fc, sbn_filters and input_channels must be positive");
        }
        if !(self.aux_weight >= 0.0) {
            return invalid(format!("aux_weight must be >= 0, got {}", self.aux_weight));
        }
        self.stage_strides()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = NetworkConfig::default();
        cfg.validate().unwrap();
        let text = cfg.serialize();
        let back = NetworkConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn parse_overrides_and_comments() {
        let text = "\n# tiny\nstage_widths = 8, 16\nblocks = 1,1\nf = 4\nK = 3\nhead = sbn\nffm = false\n";
        let cfg = NetworkConfig::parse(text).unwrap();
        assert_eq!(cfg.stage_widths, vec![8, 16]);
        assert_eq!(cfg.blocks, vec![1, 1]);
        assert_eq!(cfg.f, 4);
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.head, HeadKind::SbnDeconv);
        assert!(!cfg.ffm);
        // Untouched keys keep their defaults.
        assert_eq!(cfg.s, 4);
        assert_eq!(cfg.r_fc, 4);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(NetworkConfig::parse("widths = 1,2").is_err());
    }

    #[test]
    fn malformed_line_rejected() {
        let err = NetworkConfig::parse("stage_widths 16").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn strides_multiply_to_f() {
        for f in [1usize, 2, 4, 8] {
            let mut cfg = NetworkConfig::default();
            cfg.f = f;
            let strides = cfg.stage_strides().unwrap();
            let total: usize = cfg.stem_stride() * strides.iter().product::<usize>();
            assert_eq!(total, f, "f={f} strides={strides:?}");
        }
    }

    #[test]
    fn too_much_downsampling_for_stage_count_rejected() {
        let mut cfg = NetworkConfig::default();
        cfg.stage_widths = vec![8];
        cfg.blocks = vec![1];
        cfg.f = 8;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn non_power_of_two_f_rejected() {
        let mut cfg = NetworkConfig::default();
        cfg.f = 6;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mid_width_divisible_by_s() {
        let cfg = NetworkConfig::default();
        for w in [8, 16, 30, 64, 10] {
            assert_eq!(cfg.mid_width(w) % cfg.s, 0, "w={w}");
        }
        assert_eq!(cfg.mid_width(16), 8);
        assert_eq!(cfg.mid_width(64), 32);
        // Half of 10 is 5; rounded up to the next multiple of 4.
        assert_eq!(cfg.mid_width(10), 8);
    }

    #[test]
    fn head_names_round_trip() {
        for h in [HeadKind::Duc, HeadKind::SbnDeconv] {
            assert_eq!(HeadKind::parse(h.name()).unwrap(), h);
        }
        assert_eq!(HeadKind::parse("sbn").unwrap(), HeadKind::SbnDeconv);
    }
}
