//! INI-style configuration files: `[model]`, `[train]`, `[data]` sections
//! with `key = value` lines and `#` comments. Unknown sections or keys are
//! rejected; omitted keys keep their defaults. Command-line overrides use
//! the same `section.key=value` dispatch.

use crate::blocks::HeadKind;
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::optim::OptimizerKind;
use crate::train::TrainConfig;

/// Synthetic-dataset settings; image size and class count come from the
/// model section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataConfig {
    pub count: usize,
    pub eval_count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig {
            count: 128,
            eval_count: 32,
            seed: 7,
        }
    }
}

/// Everything a CLI invocation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct FullConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for FullConfig {
    fn default() -> FullConfig {
        FullConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| Error::InvalidConfig {
        field: key.into(),
        message: format!("expected integer, got `{value}`"),
    })
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value.parse().map_err(|_| Error::InvalidConfig {
        field: key.into(),
        message: format!("expected integer, got `{value}`"),
    })
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| Error::InvalidConfig {
        field: key.into(),
        message: format!("expected number, got `{value}`"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig {
            field: key.into(),
            message: format!("expected boolean, got `{value}`"),
        }),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| parse_usize(key, part.trim()))
        .collect()
}

fn parse_pair(key: &str, value: &str) -> Result<(usize, usize)> {
    let list = parse_list(key, value)?;
    if list.len() != 2 {
        return Err(Error::InvalidConfig {
            field: key.into(),
            message: format!("expected two comma-separated values, got {}", list.len()),
        });
    }
    Ok((list[0], list[1]))
}

fn parse_triple(key: &str, value: &str) -> Result<(usize, usize, usize)> {
    let list = parse_list(key, value)?;
    if list.len() != 3 {
        return Err(Error::InvalidConfig {
            field: key.into(),
            message: format!("expected three comma-separated values, got {}", list.len()),
        });
    }
    Ok((list[0], list[1], list[2]))
}

impl FullConfig {
    /// Parse a config file body over the defaults.
    pub fn parse(text: &str, origin: &str) -> Result<FullConfig> {
        let mut cfg = FullConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find(" #") {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                if !["model", "train", "data"].contains(&section.as_str()) {
                    return Err(Error::format(
                        origin,
                        format!("line {}: unknown section [{section}]", lineno + 1),
                    ));
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(origin, format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.apply(&section, key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Load and parse a config file.
    pub fn load(path: &std::path::Path) -> Result<FullConfig> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(&origin, e))?;
        FullConfig::parse(&text, &origin)
    }

    /// Apply one `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec.split_once('=').ok_or_else(|| Error::InvalidConfig {
            field: spec.into(),
            message: "override must be section.key=value".into(),
        })?;
        let (section, key) = path.trim().split_once('.').ok_or_else(|| Error::InvalidConfig {
            field: spec.into(),
            message: "override key must be section.key".into(),
        })?;
        self.apply(section, key, value.trim())
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let qualified = format!("{section}.{key}");
        match (section, key) {
            ("model", "num_classes") => self.model.num_classes = parse_usize(&qualified, value)?,
            ("model", "c0") => self.model.c0 = parse_usize(&qualified, value)?,
            ("model", "stage_channels") => {
                self.model.stage_channels = parse_triple(&qualified, value)?
            }
            ("model", "brm_counts") => {
                let list = parse_list(&qualified, value)?;
                if list.len() != 6 {
                    return Err(Error::InvalidConfig {
                        field: qualified,
                        message: format!("expected six values, got {}", list.len()),
                    });
                }
                self.model.brm_counts = [list[0], list[1], list[2], list[3], list[4], list[5]];
            }
            ("model", "dilations_l1") => self.model.dilations[0] = parse_list(&qualified, value)?,
            ("model", "dilations_l2") => self.model.dilations[1] = parse_list(&qualified, value)?,
            ("model", "dilations_l3") => self.model.dilations[2] = parse_list(&qualified, value)?,
            ("model", "dilations_l4") => self.model.dilations[3] = parse_list(&qualified, value)?,
            ("model", "dilations_l5") => self.model.dilations[4] = parse_list(&qualified, value)?,
            ("model", "dilations_l6") => self.model.dilations[5] = parse_list(&qualified, value)?,
            ("model", "sgcn") => self.model.sgcn_enabled = parse_bool(&qualified, value)?,
            ("model", "sgcn_dims") => self.model.sgcn_dims = parse_triple(&qualified, value)?,
            ("model", "head") => {
                let mut kind = HeadKind::parse(value)?;
                if let (HeadKind::Aspp { rates, reduction }, HeadKind::Aspp { rates: old, reduction: old_red }) =
                    (&mut kind, &self.model.head)
                {
                    // keep previously-configured aspp settings
                    *rates = old.clone();
                    *reduction = *old_red;
                }
                self.model.head = kind;
            }
            ("model", "aspp_rates") => {
                let rates = parse_list(&qualified, value)?;
                match &mut self.model.head {
                    HeadKind::Aspp { rates: r, .. } => *r = rates,
                    _ => {
                        self.model.head = HeadKind::Aspp {
                            rates,
                            reduction: 4,
                        }
                    }
                }
            }
            ("model", "aspp_reduction") => {
                let reduction = parse_usize(&qualified, value)?;
                match &mut self.model.head {
                    HeadKind::Aspp { reduction: r, .. } => *r = reduction,
                    _ => {
                        self.model.head = HeadKind::Aspp {
                            rates: vec![2, 4, 8],
                            reduction,
                        }
                    }
                }
            }
            ("model", "input_hw") => self.model.input_hw = parse_pair(&qualified, value)?,
            ("train", "optimizer") => self.train.optimizer = OptimizerKind::parse(value)?,
            ("train", "lr_in") => self.train.lr_in = parse_f64(&qualified, value)?,
            ("train", "weight_decay") => self.train.weight_decay = parse_f64(&qualified, value)?,
            ("train", "momentum") => self.train.momentum = parse_f64(&qualified, value)?,
            ("train", "beta1") => self.train.betas.0 = parse_f64(&qualified, value)?,
            ("train", "beta2") => self.train.betas.1 = parse_f64(&qualified, value)?,
            ("train", "eps") => self.train.eps = parse_f64(&qualified, value)?,
            ("train", "total_iter") => self.train.total_iter = parse_usize(&qualified, value)?,
            ("train", "batch") => self.train.batch = parse_usize(&qualified, value)?,
            ("train", "seed") => self.train.seed = parse_u64(&qualified, value)?,
            ("train", "poly_power") => self.train.poly_power = parse_f64(&qualified, value)?,
            ("data", "count") => self.data.count = parse_usize(&qualified, value)?,
            ("data", "eval_count") => self.data.eval_count = parse_usize(&qualified, value)?,
            ("data", "seed") => self.data.seed = parse_u64(&qualified, value)?,
            ("", _) => {
                return Err(Error::InvalidConfig {
                    field: key.into(),
                    message: "key appears before any [section] header".into(),
                })
            }
            _ => {
                return Err(Error::InvalidConfig {
                    field: qualified,
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Validate all sections.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Render back to the file format.
    pub fn to_ini(&self) -> String {
        let dil = |i: usize| {
            self.model.dilations[i]
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        out.push_str("[model]\n");
        out.push_str(&format!("num_classes = {}\n", self.model.num_classes));
        out.push_str(&format!("c0 = {}\n", self.model.c0));
        let (c1, c2, c3) = self.model.stage_channels;
        out.push_str(&format!("stage_channels = {c1},{c2},{c3}\n"));
        out.push_str(&format!(
            "brm_counts = {}\n",
            self.model
                .brm_counts
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        for i in 0..6 {
            out.push_str(&format!("dilations_l{} = {}\n", i + 1, dil(i)));
        }
        out.push_str(&format!("sgcn = {}\n", self.model.sgcn_enabled));
        let (d1, d2, d3) = self.model.sgcn_dims;
        out.push_str(&format!("sgcn_dims = {d1},{d2},{d3}\n"));
        out.push_str(&format!("head = {}\n", self.model.head.name()));
        if let HeadKind::Aspp { rates, reduction } = &self.model.head {
            out.push_str(&format!(
                "aspp_rates = {}\n",
                rates
                    .iter()
                    .map(|r| r.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ));
            out.push_str(&format!("aspp_reduction = {reduction}\n"));
        }
        let (h, w) = self.model.input_hw;
        out.push_str(&format!("input_hw = {h},{w}\n"));

        out.push_str("\n[train]\n");
        out.push_str(&format!(
            "optimizer = {}\n",
            match self.train.optimizer {
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::Adam => "adam",
            }
        ));
        out.push_str(&format!("lr_in = {}\n", self.train.lr_in));
        out.push_str(&format!("weight_decay = {}\n", self.train.weight_decay));
        out.push_str(&format!("momentum = {}\n", self.train.momentum));
        out.push_str(&format!("beta1 = {}\n", self.train.betas.0));
        out.push_str(&format!("beta2 = {}\n", self.train.betas.1));
        out.push_str(&format!("eps = {}\n", self.train.eps));
        out.push_str(&format!("total_iter = {}\n", self.train.total_iter));
        out.push_str(&format!("batch = {}\n", self.train.batch));
        out.push_str(&format!("seed = {}\n", self.train.seed));
        out.push_str(&format!("poly_power = {}\n", self.train.poly_power));

        out.push_str("\n[data]\n");
        out.push_str(&format!("count = {}\n", self.data.count));
        out.push_str(&format!("eval_count = {}\n", self.data.eval_count));
        out.push_str(&format!("seed = {}\n", self.data.seed));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_ini() {
        let cfg = FullConfig::default();
        let text = cfg.to_ini();
        let parsed = FullConfig::parse(&text, "mem").unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let text = "# leading comment\n[model]\n\nc0 = 24 # trailing comment\n";
        let cfg = FullConfig::parse(text, "mem").unwrap();
        assert_eq!(cfg.model.c0, 24);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "[model]\nwidth = 4\n";
        let err = FullConfig::parse(text, "mem").unwrap_err();
        assert!(err.to_string().contains("model.width"), "{err}");

        let text = "[extra]\nx = 1\n";
        assert!(FullConfig::parse(text, "mem").is_err());
    }

    #[test]
    fn overrides_apply_after_parse() {
        let mut cfg = FullConfig::parse("[train]\nseed = 4\n", "mem").unwrap();
        assert_eq!(cfg.train.seed, 4);
        cfg.apply_override("train.seed=11").unwrap();
        assert_eq!(cfg.train.seed, 11);
        cfg.apply_override("model.head=psp").unwrap();
        assert_eq!(cfg.model.head, HeadKind::Psp);
        assert!(cfg.apply_override("train.bogus=1").is_err());
        assert!(cfg.apply_override("no_dot").is_err());
    }

    #[test]
    fn aspp_settings_survive_ordering() {
        let text = "[model]\naspp_rates = 3,6\nhead = aspp\naspp_reduction = 2\n";
        let cfg = FullConfig::parse(text, "mem").unwrap();
        assert_eq!(
            cfg.model.head,
            HeadKind::Aspp {
                rates: vec![3, 6],
                reduction: 2
            }
        );
    }

    #[test]
    fn default_config_validates() {
        FullConfig::default().validate().unwrap();
    }
}
